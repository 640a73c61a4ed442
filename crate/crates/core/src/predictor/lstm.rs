use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::PredictionPair;
use crate::error::{Error, Result};
use crate::model::logistic;

pub const CHECKPOINT_VERSION: u32 = 1;

/// An encoded sequence with its regression target.
pub type Sample = (Vec<Vec<f64>>, f64);

/// LSTM weights. Gate blocks are stacked in the order input, forget, cell, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `4H × I`, row-major.
    pub w_input: Vec<f64>,
    /// `4H × H`, row-major.
    pub w_hidden: Vec<f64>,
    pub bias: Vec<f64>,
    pub w_head: Vec<f64>,
    pub b_head: f64,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let g = 4 * hidden_dim;
        LstmParams {
            input_dim,
            hidden_dim,
            w_input: vec![0.0; g * input_dim],
            w_hidden: vec![0.0; g * hidden_dim],
            bias: vec![0.0; g],
            w_head: vec![0.0; hidden_dim],
            b_head: 0.0,
        }
    }

    /// Uniform `±1/√H` initialization.
    pub fn random<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let k = 1.0 / (hidden_dim as f64).sqrt();
        let mut p = Self::zeros(input_dim, hidden_dim);
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v = rng.random_range(-k..k));
        }
        p
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [
            &self.w_input,
            &self.w_hidden,
            &self.bias,
            &self.w_head,
            std::slice::from_ref(&self.b_head),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 5] {
        [
            &mut self.w_input,
            &mut self.w_hidden,
            &mut self.bias,
            &mut self.w_head,
            std::slice::from_mut(&mut self.b_head),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn validate(&self) -> Result<()> {
        let (g, i, h) = (4 * self.hidden_dim, self.input_dim, self.hidden_dim);
        let ok = self.w_input.len() == g * i
            && self.w_hidden.len() == g * h
            && self.bias.len() == g
            && self.w_head.len() == h;
        if !ok {
            return Err(Error::contract("LSTM tensor shapes are inconsistent"));
        }
        if !self.is_finite() {
            return Err(Error::contract("LSTM parameters contain non-finite values"));
        }
        Ok(())
    }
}

/// Versioned on-disk model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub shapes: Vec<(String, Vec<usize>)>,
    pub params: LstmParams,
}

impl Checkpoint {
    pub fn new(params: &LstmParams) -> Self {
        let (g, i, h) = (4 * params.hidden_dim, params.input_dim, params.hidden_dim);
        Checkpoint {
            version: CHECKPOINT_VERSION,
            shapes: vec![
                ("w_input".into(), vec![g, i]),
                ("w_hidden".into(), vec![g, h]),
                ("bias".into(), vec![g]),
                ("w_head".into(), vec![h]),
                ("b_head".into(), vec![]),
            ],
            params: params.clone(),
        }
    }

    pub fn into_params(self) -> Result<LstmParams> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::data(
                "checkpoint",
                format!("unsupported version {}", self.version),
            ));
        }
        self.params.validate()?;
        Ok(self.params)
    }
}

/// One vector per input visit: `[values (missing → 0), observed fraction, (target_age − age)/10]`.
pub fn encode_pair(pair: &PredictionPair, d: usize) -> Vec<Vec<f64>> {
    pair.input_visits
        .iter()
        .map(|v| {
            let mut x = Vec::with_capacity(d + 2);
            x.extend(
                v.values
                    .iter()
                    .zip(&v.mask)
                    .map(|(&val, &m)| if m { val } else { 0.0 }),
            );
            x.push(v.observed_fraction());
            x.push((pair.target_age - v.age) / 10.0);
            x
        })
        .collect()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    logistic(x)
}

struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c: Vec<f64>,
}

struct ForwardPass {
    steps: Vec<StepCache>,
    h_last: Vec<f64>,
    output: f64,
}

fn run(params: &LstmParams, seq: &[Vec<f64>]) -> ForwardPass {
    let (h_dim, i_dim) = (params.hidden_dim, params.input_dim);
    let mut h = vec![0.0; h_dim];
    let mut c = vec![0.0; h_dim];
    let mut steps = Vec::with_capacity(seq.len());
    for x in seq {
        debug_assert_eq!(x.len(), i_dim);
        let mut a = params.bias.clone();
        for (r, ar) in a.iter_mut().enumerate() {
            let wx = &params.w_input[r * i_dim..(r + 1) * i_dim];
            let wh = &params.w_hidden[r * h_dim..(r + 1) * h_dim];
            *ar += wx.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
                + wh.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>();
        }
        let gate = |blk: usize, act: fn(f64) -> f64| -> Vec<f64> {
            a[blk * h_dim..(blk + 1) * h_dim].iter().map(|&v| act(v)).collect()
        };
        let ig = gate(0, sigmoid);
        let fg = gate(1, sigmoid);
        let gg = gate(2, f64::tanh);
        let og = gate(3, sigmoid);
        let c_new: Vec<f64> = (0..h_dim).map(|j| fg[j] * c[j] + ig[j] * gg[j]).collect();
        let h_new: Vec<f64> = (0..h_dim).map(|j| og[j] * c_new[j].tanh()).collect();
        steps.push(StepCache {
            x: x.clone(),
            h_prev: std::mem::replace(&mut h, h_new),
            c_prev: std::mem::replace(&mut c, c_new.clone()),
            i: ig,
            f: fg,
            g: gg,
            o: og,
            c: c_new,
        });
    }
    let z = params.b_head + params.w_head.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>();
    ForwardPass {
        steps,
        h_last: h,
        output: sigmoid(z),
    }
}

/// Prediction in `(0, 1)` for an encoded sequence.
pub fn forward(params: &LstmParams, sequence: &[Vec<f64>]) -> Result<f64> {
    if sequence.is_empty() {
        return Err(Error::contract("LSTM forward needs a non-empty sequence"));
    }
    if let Some(x) = sequence.iter().find(|x| x.len() != params.input_dim) {
        return Err(Error::contract(format!(
            "input vector of length {} for an LSTM with input_dim {}",
            x.len(),
            params.input_dim
        )));
    }
    Ok(run(params, sequence).output)
}

pub fn predict(params: &LstmParams, pair: &PredictionPair) -> Result<f64> {
    forward(params, &encode_pair(pair, params.input_dim - 2))
}

/// Mean squared error over the batch and its gradient by backpropagation through time.
pub fn loss_and_gradients(params: &LstmParams, batch: &[Sample]) -> (f64, LstmParams) {
    let (h_dim, i_dim) = (params.hidden_dim, params.input_dim);
    let mut grad = LstmParams::zeros(i_dim, h_dim);
    if batch.is_empty() {
        return (0.0, grad);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut da = vec![0.0; 4 * h_dim];
    for (seq, target) in batch {
        let pass = run(params, seq);
        let err = pass.output - target;
        loss += err * err * scale;

        let dz = 2.0 * err * scale * pass.output * (1.0 - pass.output);
        for (g, h) in grad.w_head.iter_mut().zip(&pass.h_last) {
            *g += dz * h;
        }
        grad.b_head += dz;

        let mut dh: Vec<f64> = params.w_head.iter().map(|w| dz * w).collect();
        let mut dc = vec![0.0; h_dim];
        for st in pass.steps.iter().rev() {
            for j in 0..h_dim {
                let tc = st.c[j].tanh();
                let d_o = dh[j] * tc;
                dc[j] += dh[j] * st.o[j] * (1.0 - tc * tc);
                let d_i = dc[j] * st.g[j];
                let d_g = dc[j] * st.i[j];
                let d_f = dc[j] * st.c_prev[j];
                da[j] = d_i * st.i[j] * (1.0 - st.i[j]);
                da[h_dim + j] = d_f * st.f[j] * (1.0 - st.f[j]);
                da[2 * h_dim + j] = d_g * (1.0 - st.g[j] * st.g[j]);
                da[3 * h_dim + j] = d_o * st.o[j] * (1.0 - st.o[j]);
                dc[j] *= st.f[j];
            }
            let mut dh_prev = vec![0.0; h_dim];
            for (r, &dar) in da.iter().enumerate() {
                if dar == 0.0 {
                    continue;
                }
                grad.bias[r] += dar;
                let gx = &mut grad.w_input[r * i_dim..(r + 1) * i_dim];
                gx.iter_mut().zip(&st.x).for_each(|(g, x)| *g += dar * x);
                let gh = &mut grad.w_hidden[r * h_dim..(r + 1) * h_dim];
                gh.iter_mut().zip(&st.h_prev).for_each(|(g, h)| *g += dar * h);
                let wh = &params.w_hidden[r * h_dim..(r + 1) * h_dim];
                dh_prev.iter_mut().zip(wh).for_each(|(d, w)| *d += dar * w);
            }
            dh = dh_prev;
        }
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Visit;
    use crate::rng;
    use approx::assert_abs_diff_eq;

    fn pair(visits: Vec<Visit>, target_age: f64) -> PredictionPair {
        let n = visits.len();
        PredictionPair {
            patient_id: "p".into(),
            input_visits: visits,
            target_age,
            target_value: 0.5,
            target_feature: 0,
            delta_t: 2.0,
            last_input_index: n - 1,
            target_index: n,
        }
    }

    #[test]
    fn encoding_examples() {
        let p = pair(vec![Visit::observed(70.0, vec![0.4]).unwrap()], 72.0);
        let enc = encode_pair(&p, 1);
        assert_eq!(enc.len(), 1);
        assert_abs_diff_eq!(enc[0][0], 0.4);
        assert_abs_diff_eq!(enc[0][1], 1.0);
        assert_abs_diff_eq!(enc[0][2], 0.2, epsilon = 1e-15);

        let p = pair(
            vec![
                Visit::new(69.0, vec![0.3, 0.9], vec![true, false]).unwrap(),
                Visit::observed(70.5, vec![0.35, 0.6]).unwrap(),
            ],
            73.5,
        );
        let enc = encode_pair(&p, 2);
        assert_eq!(enc[0], vec![0.3, 0.0, 0.5, 0.45]);
        assert_eq!(enc[1], vec![0.35, 0.6, 1.0, 0.3]);
    }

    #[test]
    fn zero_params_predict_half() {
        let p = LstmParams::zeros(3, 10);
        let seq = vec![vec![0.2, 1.0, 0.3], vec![0.9, 0.5, 0.1]];
        assert_eq!(forward(&p, &seq).unwrap(), 0.5);
        assert!(forward(&p, &[]).is_err());
    }

    #[test]
    fn single_step_scalar_oracle() {
        let mut p = LstmParams::zeros(1, 1);
        p.w_input = vec![0.5, -0.3, 0.8, 0.2];
        p.w_hidden = vec![0.1, 0.2, 0.3, 0.4];
        p.bias = vec![0.05, 0.1, -0.2, 0.3];
        p.w_head = vec![1.5];
        p.b_head = -0.25;
        let x = 0.7;
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = s(0.5 * x + 0.05);
        let g = (0.8 * x - 0.2).tanh();
        let o = s(0.2 * x + 0.3);
        let c = i * g;
        let h = o * c.tanh();
        let expect = s(1.5 * h - 0.25);
        assert_abs_diff_eq!(forward(&p, &[vec![x]]).unwrap(), expect, epsilon = 1e-15);
    }

    #[test]
    fn order_matters() {
        let p = LstmParams::random(3, 10, &mut rng::stream(3, &[]));
        let a = vec![0.1, 1.0, 0.4];
        let b = vec![0.8, 0.5, 0.2];
        let ab = forward(&p, &[a.clone(), b.clone()]).unwrap();
        let ba = forward(&p, &[b, a]).unwrap();
        assert!((ab - ba).abs() > 1e-6);
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradient() {
        let p = LstmParams::zeros(3, 4);
        let batch = vec![(vec![vec![0.3, 1.0, 0.2]], 0.5), (vec![vec![0.1, 0.5, 0.4]; 3], 0.5)];
        let (loss, g) = loss_and_gradients(&p, &batch);
        assert_eq!(loss, 0.0);
        assert!(g.norm() < 1e-12);
    }

    #[test]
    fn batch_loss_is_mean_of_singletons() {
        let p = LstmParams::random(3, 5, &mut rng::stream(8, &[]));
        let batch: Vec<Sample> = vec![
            (vec![vec![0.3, 1.0, 0.2]], 0.7),
            (vec![vec![0.1, 0.5, 0.4], vec![0.2, 1.0, 0.1]], 0.2),
            (vec![vec![0.9, 1.0, 0.0]; 4], 0.95),
        ];
        let (all, _) = loss_and_gradients(&p, &batch);
        let mean = batch
            .iter()
            .map(|s| loss_and_gradients(&p, std::slice::from_ref(s)).0)
            .sum::<f64>()
            / 3.0;
        assert_abs_diff_eq!(all, mean, epsilon = 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = LstmParams::random(4, 10, &mut rng::stream(1, &[]));
        let json = serde_json::to_string(&Checkpoint::new(&p)).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_params().unwrap(), p);
    }
}
