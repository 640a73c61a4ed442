//! Box-constrained limited-memory BFGS.
//!
//! A projected variant of L-BFGS-B: the quasi-Newton direction is computed on
//! the free variables only (those not pinned at a bound by the gradient), and
//! the line search backtracks along the projected path `P(x + α·d)`.

use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct LbfgsbOptions {
    pub memory: usize,
    pub max_evals: usize,
    /// Stop when the projected gradient ∞-norm drops below this.
    pub grad_tol: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsbOptions {
    fn default() -> Self {
        LbfgsbOptions {
            memory: 10,
            max_evals: 500,
            grad_tol: 1e-6,
            armijo: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    MaxEvals,
    /// The iterate stopped moving (step below machine resolution).
    StepTolerance,
    /// No acceptable step along either the quasi-Newton or the steepest-descent path.
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub n_evals: usize,
    pub n_iters: usize,
    pub projected_grad_norm: f64,
    pub termination: Termination,
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((xi, &lo), &hi) in x.iter_mut().zip(lower).zip(upper) {
        *xi = xi.clamp(lo, hi);
    }
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((&xi, &gi), (&lo, &hi))| ((xi - gi).clamp(lo, hi) - xi).abs())
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Memory {
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    capacity: usize,
}

impl Memory {
    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        if sy <= 1e-12 * dot(&y, &y).max(f64::MIN_POSITIVE) {
            return;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// Two-loop recursion for `−H·g` on the free variables. Stored pairs are
    /// restricted to the free set; pairs that lose positive curvature there are skipped.
    fn direction(&self, g: &[f64], free: &[bool]) -> Vec<f64> {
        let restrict = |v: &[f64]| -> Vec<f64> {
            v.iter().zip(free).map(|(&x, &f)| if f { x } else { 0.0 }).collect()
        };
        let pairs: Vec<(Vec<f64>, Vec<f64>, f64)> = self
            .pairs
            .iter()
            .filter_map(|(s, y, _)| {
                let (s, y) = (restrict(s), restrict(y));
                let sy = dot(&s, &y);
                (sy > 1e-12 * dot(&y, &y).max(f64::MIN_POSITIVE)).then(|| (s, y, 1.0 / sy))
            })
            .collect();
        let mut q = restrict(g);
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.last() {
            let gamma = dot(s, y) / dot(y, y);
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }
}

/// Minimizes `f` over the box `[lower, upper]`. `f` returns the value and gradient.
pub fn minimize<F>(
    mut f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &LbfgsbOptions,
) -> Minimum
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    assert!(lower.len() == n && upper.len() == n, "bounds dimension mismatch");
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let (mut fx, mut g) = f(&x);
    let mut n_evals = 1;
    let mut memory = Memory {
        pairs: VecDeque::with_capacity(opts.memory),
        capacity: opts.memory.max(1),
    };
    let mut n_iters = 0;

    let finish = |x: Vec<f64>, value, g: &[f64], n_evals, n_iters, termination| {
        let pg = projected_gradient_norm(&x, g, lower, upper);
        Minimum {
            x,
            value,
            n_evals,
            n_iters,
            projected_grad_norm: pg,
            termination,
        }
    };

    if !fx.is_finite() {
        return finish(x, fx, &g, n_evals, n_iters, Termination::LineSearchFailed);
    }

    loop {
        if projected_gradient_norm(&x, &g, lower, upper) < opts.grad_tol {
            return finish(x, fx, &g, n_evals, n_iters, Termination::GradientTolerance);
        }
        if n_evals >= opts.max_evals {
            return finish(x, fx, &g, n_evals, n_iters, Termination::MaxEvals);
        }

        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0)))
            .collect();

        let mut accepted = None;
        // quasi-Newton direction first, steepest descent as the fallback
        let attempts: &[bool] = if memory.pairs.is_empty() { &[false] } else { &[true, false] };
        for &use_memory in attempts {
            let mut d = if use_memory {
                memory.direction(&g, &free)
            } else {
                g.iter()
                    .zip(&free)
                    .map(|(&gi, &fr)| if fr { -gi } else { 0.0 })
                    .collect()
            };
            if dot(&d, &g) >= 0.0 {
                memory.pairs.clear();
                continue;
            }
            if !use_memory {
                let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if dmax > 1.0 {
                    d.iter_mut().for_each(|v| *v /= dmax);
                }
            }
            let mut alpha = 1.0;
            for _ in 0..opts.max_backtracks {
                if n_evals >= opts.max_evals {
                    break;
                }
                let mut xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
                project(&mut xn, lower, upper);
                let step: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                let decrease = dot(&g, &step);
                if decrease >= 0.0 {
                    alpha *= 0.5;
                    continue;
                }
                let (fn_, gn) = f(&xn);
                n_evals += 1;
                if fn_.is_finite() && fn_ <= fx + opts.armijo * decrease {
                    accepted = Some((xn, fn_, gn, step));
                    break;
                }
                alpha *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
            memory.pairs.clear();
        }

        let Some((xn, fn_, gn, step)) = accepted else {
            let why = if n_evals >= opts.max_evals {
                Termination::MaxEvals
            } else {
                Termination::LineSearchFailed
            };
            return finish(x, fx, &g, n_evals, n_iters, why);
        };
        n_iters += 1;
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let step_norm = step.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let x_norm = xn.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        memory.push(step, y);
        x = xn;
        fx = fn_;
        g = gn;
        if step_norm <= 1e-15 * x_norm {
            return finish(x, fx, &g, n_evals, n_iters, Termination::StepTolerance);
        }
    }
}
