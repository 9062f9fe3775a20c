//! Single-layer LSTM with a linear output head, trained by full
//! backpropagation through time under the Adam rule.
//!
//! Gate layout inside the fused 4H blocks: input, forget, candidate,
//! output. Gates see both the current input and the previous hidden state;
//! hidden and cell states start at zero for every window. Input dropout
//! (train mode only) uses one inverted-scaling mask per sample, constant
//! across time steps.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LstmHyperParams {
    /// Hidden units (N_c).
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Global gradient-norm clip; None disables (gradient checks).
    pub clip_norm: Option<f64>,
}

impl Default for LstmHyperParams {
    fn default() -> Self {
        LstmHyperParams {
            hidden: 25,
            epochs: 130,
            batch: 32,
            lr: 1e-3,
            dropout: 0.15,
            seed: 0,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Train,
    Infer,
}

/// Windowed supervised dataset: inputs [n_samples, n_tauP, n_features],
/// targets [n_samples, n_tauF * n_features] flattened time-major.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub inputs: Array3<f64>,
    pub targets: Array2<f64>,
    pub n_tau_p: usize,
    pub n_tau_f: usize,
}

impl WindowedDataset {
    pub fn n_samples(&self) -> usize {
        self.inputs.dim().0
    }

    pub fn n_features(&self) -> usize {
        self.inputs.dim().2
    }
}

/// Stride-1 sliding windows over a feature matrix [n_features, span].
pub fn make_windows(features: &Array2<f64>, n_tau_p: usize, n_tau_f: usize) -> Result<WindowedDataset> {
    let (n_feat, span) = features.dim();
    let need = n_tau_p + n_tau_f;
    if span < need {
        return Err(Error::SpanTooShort { span, need });
    }
    let n_samples = span - need + 1;
    let mut inputs = Array3::zeros((n_samples, n_tau_p, n_feat));
    let mut targets = Array2::zeros((n_samples, n_tau_f * n_feat));
    for s in 0..n_samples {
        for p in 0..n_tau_p {
            for f in 0..n_feat {
                inputs[[s, p, f]] = features[[f, s + p]];
            }
        }
        for h in 0..n_tau_f {
            for f in 0..n_feat {
                targets[[s, h * n_feat + f]] = features[[f, s + n_tau_p + h]];
            }
        }
    }
    Ok(WindowedDataset {
        inputs,
        targets,
        n_tau_p,
        n_tau_f,
    })
}

#[derive(Debug, Clone)]
pub struct LstmModel {
    pub hidden: usize,
    pub n_features: usize,
    pub n_out: usize,
    /// [4H, F] input-to-hidden.
    pub w_x: Array2<f64>,
    /// [4H, H] hidden-to-hidden.
    pub w_h: Array2<f64>,
    /// [4H] gate biases (forget block initialized to 1).
    pub b: Array1<f64>,
    /// [n_out, H] output head.
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
    pub dropout: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct LossHistory {
    pub train: Vec<f64>,
    pub holdout: Vec<f64>,
}

/// Gradients in the same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w_x: Array2<f64>,
    pub w_h: Array2<f64>,
    pub b: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl Gradients {
    fn zeros_like(m: &LstmModel) -> Self {
        Gradients {
            w_x: Array2::zeros(m.w_x.dim()),
            w_h: Array2::zeros(m.w_h.dim()),
            b: Array1::zeros(m.b.len()),
            w_out: Array2::zeros(m.w_out.dim()),
            b_out: Array1::zeros(m.b_out.len()),
        }
    }

    fn global_norm(&self) -> f64 {
        let mut s = 0.0;
        for g in self.w_x.iter().chain(self.w_h.iter()).chain(self.b.iter()) {
            s += g * g;
        }
        for g in self.w_out.iter().chain(self.b_out.iter()) {
            s += g * g;
        }
        s.sqrt()
    }

    fn scale(&mut self, f: f64) {
        self.w_x.mapv_inplace(|x| x * f);
        self.w_h.mapv_inplace(|x| x * f);
        self.b.mapv_inplace(|x| x * f);
        self.w_out.mapv_inplace(|x| x * f);
        self.b_out.mapv_inplace(|x| x * f);
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmModel {
    /// Xavier-uniform weights, zero biases except the forget block at 1.
    pub fn new(
        n_features: usize,
        hidden: usize,
        n_out: usize,
        dropout: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xavier = |rows: usize, cols: usize, fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| (rng.random::<f64>() * 2.0 - 1.0) * a)
        };
        let w_x = xavier(4 * hidden, n_features, n_features, hidden);
        let w_h = xavier(4 * hidden, hidden, hidden, hidden);
        let w_out = xavier(n_out, hidden, hidden, n_out);
        let mut b = Array1::zeros(4 * hidden);
        for i in hidden..2 * hidden {
            b[i] = 1.0;
        }
        LstmModel {
            hidden,
            n_features,
            n_out,
            w_x,
            w_h,
            b,
            w_out,
            b_out: Array1::zeros(n_out),
            dropout,
            seed,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.w_x.len() + self.w_h.len() + self.b.len() + self.w_out.len() + self.b_out.len()
    }

    /// One window in, n_tauF * n_features out. Train mode draws a dropout
    /// mask from `rng`; infer mode never touches it.
    pub fn forward_single(
        &self,
        window: &Array2<f64>,
        mode: RunMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array1<f64>> {
        let (steps, n_feat) = window.dim();
        if n_feat != self.n_features {
            return Err(Error::DimensionMismatch(format!(
                "window has {n_feat} features, model expects {}",
                self.n_features
            )));
        }
        let mask = self.draw_mask(1, mode, rng);
        let mut x = Array3::zeros((steps, n_feat, 1));
        for t in 0..steps {
            for f in 0..n_feat {
                x[[t, f, 0]] = window[[t, f]] * mask[[f, 0]];
            }
        }
        let (y, _cache) = self.forward_batch(&x);
        for v in y.iter() {
            if !v.is_finite() {
                return Err(Error::NonFiniteActivation(format!("output {v}")));
            }
        }
        Ok(y.index_axis(Axis(1), 0).to_owned())
    }

    fn draw_mask(&self, batch: usize, mode: RunMode, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let p = self.dropout;
        if mode == RunMode::Infer || p == 0.0 {
            return Array2::ones((self.n_features, batch));
        }
        let keep = 1.0 - p;
        Array2::from_shape_fn((self.n_features, batch), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
    }

    /// Batched forward over x [steps, F, B] (already masked). Returns the
    /// output [n_out, B] and the cache for backprop.
    fn forward_batch(&self, x: &Array3<f64>) -> (Array2<f64>, ForwardCache) {
        let (steps, _f, batch) = x.dim();
        let h = self.hidden;
        let mut h_prev = Array2::zeros((h, batch));
        let mut c_prev = Array2::<f64>::zeros((h, batch));
        let mut cache = ForwardCache {
            gates: Vec::with_capacity(steps),
            tanh_c: Vec::with_capacity(steps),
            h_states: Vec::with_capacity(steps),
            c_prevs: Vec::with_capacity(steps),
        };
        for t in 0..steps {
            let xt = x.index_axis(Axis(0), t);
            let mut z = self.w_x.dot(&xt);
            z += &self.w_h.dot(&h_prev);
            for (mut col, _) in z.columns_mut().into_iter().zip(0..) {
                for r in 0..4 * h {
                    col[r] += self.b[r];
                }
            }
            let mut gates = Array2::zeros((4 * h, batch));
            for bcol in 0..batch {
                for r in 0..h {
                    gates[[r, bcol]] = sigmoid(z[[r, bcol]]); // input
                    gates[[h + r, bcol]] = sigmoid(z[[h + r, bcol]]); // forget
                    gates[[2 * h + r, bcol]] = z[[2 * h + r, bcol]].tanh(); // candidate
                    gates[[3 * h + r, bcol]] = sigmoid(z[[3 * h + r, bcol]]); // output
                }
            }
            let mut c = Array2::zeros((h, batch));
            let mut tanh_c = Array2::zeros((h, batch));
            let mut h_new = Array2::zeros((h, batch));
            for bcol in 0..batch {
                for r in 0..h {
                    let cv = gates[[h + r, bcol]] * c_prev[[r, bcol]]
                        + gates[[r, bcol]] * gates[[2 * h + r, bcol]];
                    c[[r, bcol]] = cv;
                    let tc = cv.tanh();
                    tanh_c[[r, bcol]] = tc;
                    h_new[[r, bcol]] = gates[[3 * h + r, bcol]] * tc;
                }
            }
            cache.c_prevs.push(c_prev);
            cache.gates.push(gates);
            cache.tanh_c.push(tanh_c);
            cache.h_states.push(h_new.clone());
            c_prev = c;
            h_prev = h_new;
        }
        let mut y = self.w_out.dot(&h_prev);
        for mut col in y.columns_mut() {
            for r in 0..self.n_out {
                col[r] += self.b_out[r];
            }
        }
        (y, cache)
    }

    /// Mean-squared-error loss and parameter gradients for one masked batch.
    pub fn loss_and_gradients(
        &self,
        x: &Array3<f64>,
        targets: &Array2<f64>,
    ) -> (f64, Gradients) {
        let (steps, _f, batch) = x.dim();
        let h = self.hidden;
        let (y, cache) = self.forward_batch(x);

        let n_terms = (self.n_out * batch) as f64;
        let mut loss = 0.0;
        let mut dy = Array2::zeros((self.n_out, batch));
        for bcol in 0..batch {
            for r in 0..self.n_out {
                let e = y[[r, bcol]] - targets[[r, bcol]];
                loss += e * e;
                dy[[r, bcol]] = 2.0 * e / n_terms;
            }
        }
        loss /= n_terms;

        let mut g = Gradients::zeros_like(self);
        let h_last = &cache.h_states[steps - 1];
        g.w_out = dy.dot(&h_last.t());
        g.b_out = dy.sum_axis(Axis(1));
        let mut dh = self.w_out.t().dot(&dy);
        let mut dc = Array2::<f64>::zeros((h, batch));

        for t in (0..steps).rev() {
            let gates = &cache.gates[t];
            let tanh_c = &cache.tanh_c[t];
            let c_prev = &cache.c_prevs[t];
            let mut dz = Array2::zeros((4 * h, batch));
            for bcol in 0..batch {
                for r in 0..h {
                    let i_g = gates[[r, bcol]];
                    let f_g = gates[[h + r, bcol]];
                    let g_g = gates[[2 * h + r, bcol]];
                    let o_g = gates[[3 * h + r, bcol]];
                    let tc = tanh_c[[r, bcol]];
                    let dh_v = dh[[r, bcol]];
                    let dc_v = dc[[r, bcol]] + dh_v * o_g * (1.0 - tc * tc);
                    dz[[r, bcol]] = dc_v * g_g * i_g * (1.0 - i_g);
                    dz[[h + r, bcol]] = dc_v * c_prev[[r, bcol]] * f_g * (1.0 - f_g);
                    dz[[2 * h + r, bcol]] = dc_v * i_g * (1.0 - g_g * g_g);
                    dz[[3 * h + r, bcol]] = dh_v * tc * o_g * (1.0 - o_g);
                    dc[[r, bcol]] = dc_v * f_g;
                }
            }
            let xt = x.index_axis(Axis(0), t);
            g.w_x += &dz.dot(&xt.t());
            if t > 0 {
                g.w_h += &dz.dot(&cache.h_states[t - 1].t());
            }
            g.b += &dz.sum_axis(Axis(1));
            dh = self.w_h.t().dot(&dz);
        }
        (loss, g)
    }

    /// Loss only, used for held-out tracking and finite differences.
    pub fn batch_loss(&self, x: &Array3<f64>, targets: &Array2<f64>) -> f64 {
        let (y, _) = self.forward_batch(x);
        let (n_out, batch) = y.dim();
        let mut loss = 0.0;
        for bcol in 0..batch {
            for r in 0..n_out {
                let e = y[[r, bcol]] - targets[[r, bcol]];
                loss += e * e;
            }
        }
        loss / (n_out * batch) as f64
    }

    fn assert_finite(&self) -> Result<()> {
        let bad = self
            .w_x
            .iter()
            .chain(self.w_h.iter())
            .chain(self.b.iter())
            .chain(self.w_out.iter())
            .chain(self.b_out.iter())
            .any(|v| !v.is_finite());
        if bad {
            return Err(Error::Divergence("non-finite parameter".into()));
        }
        Ok(())
    }
}

struct ForwardCache {
    gates: Vec<Array2<f64>>,
    tanh_c: Vec<Array2<f64>>,
    h_states: Vec<Array2<f64>>,
    c_prevs: Vec<Array2<f64>>,
}

struct AdamState {
    m: Gradients,
    v: Gradients,
    step: u64,
}

impl AdamState {
    fn new(model: &LstmModel) -> Self {
        AdamState {
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
            step: 0,
        }
    }

    fn update(&mut self, model: &mut LstmModel, g: &Gradients, lr: f64) {
        self.step += 1;
        let b1c = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let b2c = 1.0 - ADAM_BETA2.powi(self.step as i32);
        fn upd(
            p: &mut f64,
            g: f64,
            m: &mut f64,
            v: &mut f64,
            lr: f64,
            b1c: f64,
            b2c: f64,
        ) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let mhat = *m / b1c;
            let vhat = *v / b2c;
            *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
        macro_rules! apply {
            ($field:ident) => {
                for ((p, &gv), (m, v)) in model
                    .$field
                    .iter_mut()
                    .zip(g.$field.iter())
                    .zip(self.m.$field.iter_mut().zip(self.v.$field.iter_mut()))
                {
                    upd(p, gv, m, v, lr, b1c, b2c);
                }
            };
        }
        apply!(w_x);
        apply!(w_h);
        apply!(b);
        apply!(w_out);
        apply!(b_out);
    }
}

/// Train on shuffled mini-batches; per-epoch train loss is the sample-size
/// weighted mean of batch losses, holdout loss a full inference pass.
pub fn lstm_train(
    ds: &WindowedDataset,
    holdout: Option<&WindowedDataset>,
    hp: &LstmHyperParams,
) -> Result<(LstmModel, LossHistory)> {
    let n_samples = ds.n_samples();
    if n_samples == 0 {
        return Err(Error::SpanTooShort {
            span: 0,
            need: ds.n_tau_p + ds.n_tau_f,
        });
    }
    let n_feat = ds.n_features();
    let n_out = ds.targets.dim().1;
    let mut model = LstmModel::new(n_feat, hp.hidden, n_out, hp.dropout, hp.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed.wrapping_add(0x5eed));
    let mut adam = AdamState::new(&model);
    let mut history = LossHistory::default();

    let mut order: Vec<usize> = (0..n_samples).collect();
    for _epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(hp.batch.max(1)) {
            let b = chunk.len();
            // gather and mask the batch
            let mask = model.draw_mask(b, RunMode::Train, &mut rng);
            let mut x = Array3::zeros((ds.n_tau_p, n_feat, b));
            let mut tgt = Array2::zeros((n_out, b));
            for (col, &s) in chunk.iter().enumerate() {
                for t in 0..ds.n_tau_p {
                    for f in 0..n_feat {
                        x[[t, f, col]] = ds.inputs[[s, t, f]] * mask[[f, col]];
                    }
                }
                for r in 0..n_out {
                    tgt[[r, col]] = ds.targets[[s, r]];
                }
            }
            let (loss, mut grads) = model.loss_and_gradients(&x, &tgt);
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss became {loss} at step {}",
                    adam.step
                )));
            }
            if let Some(clip) = hp.clip_norm {
                let norm = grads.global_norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            adam.update(&mut model, &grads, hp.lr);
            model.assert_finite()?;
            epoch_loss += loss * b as f64;
            seen += b;
        }
        history.train.push(epoch_loss / seen as f64);
        if let Some(hd) = holdout {
            history.holdout.push(dataset_loss(&model, hd));
        }
    }
    Ok((model, history))
}

/// Inference-mode loss over a whole dataset.
pub fn dataset_loss(model: &LstmModel, ds: &WindowedDataset) -> f64 {
    let n = ds.n_samples();
    let n_feat = ds.n_features();
    let n_out = ds.targets.dim().1;
    let mut x = Array3::zeros((ds.n_tau_p, n_feat, n));
    let mut tgt = Array2::zeros((n_out, n));
    for s in 0..n {
        for t in 0..ds.n_tau_p {
            for f in 0..n_feat {
                x[[t, f, s]] = ds.inputs[[s, t, f]];
            }
        }
        for r in 0..n_out {
            tgt[[r, s]] = ds.targets[[s, r]];
        }
    }
    model.batch_loss(&x, &tgt)
}
