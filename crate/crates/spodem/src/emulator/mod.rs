//! Per-mode LSTM ensemble over the latent coefficients.
//!
//! The coefficient matrix is split by mode: network j sees every frequency
//! of mode j (real and imaginary parts as separate features), is scaled to
//! [-0.1, 0.1] with train statistics, and learns to map n_tauP past steps
//! to n_tauF future steps. Networks are independent; seeds derive as
//! seed + mode index, so training order cannot change any forecast.

pub mod lstm;

use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{CoeffKind, CoeffMatrix};
use crate::linalg::C64;
use crate::npy;
pub use lstm::{
    dataset_loss, lstm_train, make_windows, LossHistory, LstmHyperParams, LstmModel, RunMode,
    WindowedDataset,
};

/// Scale target for the latent features.
pub const SCALE_LO: f64 = -0.1;
pub const SCALE_HI: f64 = 0.1;

/// Per-feature affine map onto [SCALE_LO, SCALE_HI] fitted on a train span.
/// Constant features map to the interval midpoint and invert back exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl FeatureScaler {
    pub fn fit(features: &Array2<f64>, span: Range<usize>) -> Result<Self> {
        let (n_feat, n_time) = features.dim();
        if span.is_empty() || span.end > n_time {
            return Err(Error::SpanTooShort {
                span: span.len(),
                need: 1,
            });
        }
        let mut min = vec![f64::INFINITY; n_feat];
        let mut max = vec![f64::NEG_INFINITY; n_feat];
        for f in 0..n_feat {
            for t in span.clone() {
                min[f] = min[f].min(features[[f, t]]);
                max[f] = max[f].max(features[[f, t]]);
            }
        }
        Ok(FeatureScaler {
            min,
            max,
            lo: SCALE_LO,
            hi: SCALE_HI,
        })
    }

    pub fn apply(&self, features: &Array2<f64>) -> Array2<f64> {
        let (n_feat, n_time) = features.dim();
        let mut out = Array2::zeros((n_feat, n_time));
        for f in 0..n_feat {
            let range = self.max[f] - self.min[f];
            for t in 0..n_time {
                out[[f, t]] = if range == 0.0 {
                    0.5 * (self.lo + self.hi)
                } else {
                    self.lo + (features[[f, t]] - self.min[f]) * (self.hi - self.lo) / range
                };
            }
        }
        out
    }

    pub fn invert(&self, scaled: &Array2<f64>) -> Array2<f64> {
        let (n_feat, n_time) = scaled.dim();
        let mut out = Array2::zeros((n_feat, n_time));
        for f in 0..n_feat {
            let range = self.max[f] - self.min[f];
            for t in 0..n_time {
                out[[f, t]] = if range == 0.0 {
                    self.min[f]
                } else {
                    self.min[f] + (scaled[[f, t]] - self.lo) * range / (self.hi - self.lo)
                };
            }
        }
        out
    }
}

/// Complex coefficient rows become (real, imaginary) feature row pairs;
/// real (POD) coefficients pass through. Round-trips exactly.
pub fn complexify_features(a: &CoeffMatrix) -> Array2<f64> {
    let (d, nt) = a.values.dim();
    match a.kind {
        CoeffKind::Pod => {
            let mut out = Array2::zeros((d, nt));
            for ((r, t), z) in a.values.indexed_iter() {
                out[[r, t]] = z.re;
            }
            out
        }
        CoeffKind::SpodTime => {
            let mut out = Array2::zeros((2 * d, nt));
            for ((r, t), z) in a.values.indexed_iter() {
                out[[2 * r, t]] = z.re;
                out[[2 * r + 1, t]] = z.im;
            }
            out
        }
    }
}

/// Inverse of [`complexify_features`].
pub fn decomplexify_features(
    features: &Array2<f64>,
    kind: CoeffKind,
    index: &[(usize, usize)],
) -> Result<CoeffMatrix> {
    let (rows, nt) = features.dim();
    let values = match kind {
        CoeffKind::Pod => {
            if rows != index.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{rows} feature rows vs index of {}",
                    index.len()
                )));
            }
            Array2::from_shape_fn((rows, nt), |(r, t)| C64::new(features[[r, t]], 0.0))
        }
        CoeffKind::SpodTime => {
            if rows != 2 * index.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{rows} feature rows vs 2 x index of {}",
                    index.len()
                )));
            }
            Array2::from_shape_fn((rows / 2, nt), |(r, t)| {
                C64::new(features[[2 * r, t]], features[[2 * r + 1, t]])
            })
        }
    };
    Ok(CoeffMatrix {
        values,
        index: index.to_vec(),
        kind,
    })
}

/// Feature-row groups per mode: network j owns every feature row whose
/// coefficient row has mode index j.
pub fn per_mode_partition(a: &CoeffMatrix) -> Vec<Vec<usize>> {
    let mut modes: Vec<usize> = a.index.iter().map(|&(j, _)| j).collect::<Vec<_>>();
    modes.sort_unstable();
    modes.dedup();
    let rows_per_coeff = match a.kind {
        CoeffKind::Pod => 1,
        CoeffKind::SpodTime => 2,
    };
    modes
        .into_iter()
        .map(|mode| {
            let mut rows = Vec::new();
            for (r, &(j, _)) in a.index.iter().enumerate() {
                if j == mode {
                    for s in 0..rows_per_coeff {
                        rows.push(rows_per_coeff * r + s);
                    }
                }
            }
            rows
        })
        .collect()
}

/// One trained network plus everything needed to replay its forecasts.
#[derive(Debug, Clone)]
pub struct TrainedNet {
    pub model: LstmModel,
    pub scaler: FeatureScaler,
    /// Rows of the complexified feature matrix this network owns.
    pub feature_rows: Vec<usize>,
    pub loss: LossHistory,
}

#[derive(Debug, Clone)]
pub struct EmulatorEnsemble {
    pub nets: Vec<TrainedNet>,
    pub hp: LstmHyperParams,
    pub n_tau_p: usize,
    pub n_tau_f: usize,
    pub kind: CoeffKind,
    /// Coefficient index, carried through to the predicted CoeffMatrix.
    pub index: Vec<(usize, usize)>,
}

fn slice_rows(features: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let nt = features.ncols();
    let mut out = Array2::zeros((rows.len(), nt));
    for (i, &r) in rows.iter().enumerate() {
        for t in 0..nt {
            out[[i, t]] = features[[r, t]];
        }
    }
    out
}

/// Train one network per mode. `holdout` supplies the per-epoch held-out
/// loss (scaled with train statistics); it never influences the update.
pub fn train_ensemble(
    a: &CoeffMatrix,
    hp: &LstmHyperParams,
    n_tau_p: usize,
    n_tau_f: usize,
    holdout: Option<&CoeffMatrix>,
) -> Result<EmulatorEnsemble> {
    let features = complexify_features(a);
    let holdout_features = holdout.map(complexify_features);
    let partition = per_mode_partition(a);
    if partition.is_empty() {
        return Err(Error::DimensionMismatch("empty coefficient matrix".into()));
    }

    let nets: Vec<TrainedNet> = partition
        .par_iter()
        .enumerate()
        .map(|(mode_idx, rows)| -> Result<TrainedNet> {
            let sub = slice_rows(&features, rows);
            let scaler = FeatureScaler::fit(&sub, 0..sub.ncols())?;
            let scaled = scaler.apply(&sub);
            let ds = make_windows(&scaled, n_tau_p, n_tau_f)?;
            let hd = match &holdout_features {
                Some(hf) => {
                    let sub_h = slice_rows(hf, rows);
                    let scaled_h = scaler.apply(&sub_h);
                    Some(make_windows(&scaled_h, n_tau_p, n_tau_f)?)
                }
                None => None,
            };
            let mut net_hp = *hp;
            net_hp.seed = hp.seed.wrapping_add(mode_idx as u64);
            let (model, loss) = lstm_train(&ds, hd.as_ref(), &net_hp)
                .map_err(|e| Error::Divergence(format!("network for mode {mode_idx}: {e}")))?;
            Ok(TrainedNet {
                model,
                scaler,
                feature_rows: rows.clone(),
                loss,
            })
        })
        .collect::<Result<_>>()?;

    Ok(EmulatorEnsemble {
        nets,
        hp: *hp,
        n_tau_p,
        n_tau_f,
        kind: a.kind,
        index: a.index.clone(),
    })
}

/// Forecast aligned with the test timeline.
#[derive(Debug, Clone)]
pub struct Forecast {
    pub coeffs: CoeffMatrix,
    /// First test snapshot with a prediction: n_tauP + n_tauF - 1.
    pub start: usize,
}

/// Sliding-window one-shot prediction over true past coefficients. Each
/// predicted time t carries the n_tauF-step-ahead forecast (the last step
/// of the window ending at t - n_tauF); earlier snapshots have none.
pub fn predict_over_test(e: &EmulatorEnsemble, test: &CoeffMatrix) -> Result<Forecast> {
    if test.kind != e.kind {
        return Err(Error::DimensionMismatch(
            "coefficient kind differs from the ensemble's".into(),
        ));
    }
    let features = complexify_features(test);
    let nt = features.ncols();
    let need = e.n_tau_p + e.n_tau_f;
    if nt < need {
        return Err(Error::SpanTooShort { span: nt, need });
    }
    let start = need - 1;
    let mut predicted = Array2::zeros(features.dim());

    for net in &e.nets {
        let sub = slice_rows(&features, &net.feature_rows);
        let scaled = net.scaler.apply(&sub);
        let n_feat = net.feature_rows.len();
        let n_windows = nt - need + 1;
        let mut out_scaled = Array2::zeros((n_feat, nt));
        let mut rng = ChaCha8Rng::seed_from_u64(0); // inference draws nothing
        for s in 0..n_windows {
            let window = Array2::from_shape_fn((e.n_tau_p, n_feat), |(p, f)| scaled[[f, s + p]]);
            let y = net.model.forward_single(&window, RunMode::Infer, &mut rng)?;
            // keep the last horizon step of this window's prediction
            let t = s + need - 1;
            for f in 0..n_feat {
                out_scaled[[f, t]] = y[(e.n_tau_f - 1) * n_feat + f];
            }
        }
        let out = net.scaler.invert(&out_scaled);
        for (i, &r) in net.feature_rows.iter().enumerate() {
            for t in start..nt {
                predicted[[r, t]] = out[[i, t]];
            }
        }
    }

    let coeffs = decomplexify_features(&predicted, e.kind, &test.index)?;
    Ok(Forecast { coeffs, start })
}

// ---------------------------------------------------------------------------
// Checkpoints: hyperparams.json + per-network parameter blocks.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleMeta {
    hp: LstmHyperParams,
    n_tau_p: usize,
    n_tau_f: usize,
    kind: CoeffKind,
    index: Vec<(usize, usize)>,
    n_nets: usize,
    provenance: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetMeta {
    scaler: FeatureScaler,
    feature_rows: Vec<usize>,
    hidden: usize,
    n_features: usize,
    n_out: usize,
    dropout: f64,
    seed: u64,
    loss_train: Vec<f64>,
    loss_holdout: Vec<f64>,
}

pub fn save_ensemble(dir: &Path, e: &EmulatorEnsemble, provenance: u64) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|err| Error::io(format!("creating model dir {}", dir.display()), err))?;
    let meta = EnsembleMeta {
        hp: e.hp,
        n_tau_p: e.n_tau_p,
        n_tau_f: e.n_tau_f,
        kind: e.kind,
        index: e.index.clone(),
        n_nets: e.nets.len(),
        provenance: format!("{provenance:016x}"),
    };
    let s = serde_json::to_string_pretty(&meta)
        .map_err(|err| Error::json("serializing ensemble meta", err))?;
    fs::write(dir.join("hyperparams.json"), s)
        .map_err(|err| Error::io("writing hyperparams.json", err))?;

    for (j, net) in e.nets.iter().enumerate() {
        let nm = NetMeta {
            scaler: net.scaler.clone(),
            feature_rows: net.feature_rows.clone(),
            hidden: net.model.hidden,
            n_features: net.model.n_features,
            n_out: net.model.n_out,
            dropout: net.model.dropout,
            seed: net.model.seed,
            loss_train: net.loss.train.clone(),
            loss_holdout: net.loss.holdout.clone(),
        };
        let s = serde_json::to_string_pretty(&nm)
            .map_err(|err| Error::json("serializing net meta", err))?;
        fs::write(dir.join(format!("net{j}.json")), s)
            .map_err(|err| Error::io(format!("writing net{j}.json"), err))?;
        let m = &net.model;
        npy::write_f64(
            &dir.join(format!("net{j}.wx.npy")),
            m.w_x.as_slice().unwrap(),
            &[m.w_x.nrows(), m.w_x.ncols()],
        )?;
        npy::write_f64(
            &dir.join(format!("net{j}.wh.npy")),
            m.w_h.as_slice().unwrap(),
            &[m.w_h.nrows(), m.w_h.ncols()],
        )?;
        npy::write_f64(
            &dir.join(format!("net{j}.b.npy")),
            m.b.as_slice().unwrap(),
            &[m.b.len()],
        )?;
        npy::write_f64(
            &dir.join(format!("net{j}.wout.npy")),
            m.w_out.as_slice().unwrap(),
            &[m.w_out.nrows(), m.w_out.ncols()],
        )?;
        npy::write_f64(
            &dir.join(format!("net{j}.bout.npy")),
            m.b_out.as_slice().unwrap(),
            &[m.b_out.len()],
        )?;
    }
    Ok(())
}

pub fn load_ensemble(dir: &Path) -> Result<(EmulatorEnsemble, u64)> {
    let meta_path = dir.join("hyperparams.json");
    if !meta_path.exists() {
        return Err(Error::FileMissing(meta_path));
    }
    let text = fs::read_to_string(&meta_path)
        .map_err(|err| Error::io(format!("reading {}", meta_path.display()), err))?;
    let meta: EnsembleMeta = serde_json::from_str(&text)
        .map_err(|err| Error::json(format!("parsing {}", meta_path.display()), err))?;
    let provenance = u64::from_str_radix(&meta.provenance, 16)
        .map_err(|_| Error::ConfigValidation("bad provenance hash in ensemble meta".into()))?;

    let mut nets = Vec::with_capacity(meta.n_nets);
    for j in 0..meta.n_nets {
        let text = fs::read_to_string(dir.join(format!("net{j}.json")))
            .map_err(|err| Error::io(format!("reading net{j}.json"), err))?;
        let nm: NetMeta = serde_json::from_str(&text)
            .map_err(|err| Error::json(format!("parsing net{j}.json"), err))?;
        let read_mat = |name: &str, rows: usize, cols: usize| -> Result<Array2<f64>> {
            let (flat, shape) = npy::read_f64(&dir.join(format!("net{j}.{name}.npy")))?;
            if shape != vec![rows, cols] {
                return Err(Error::ShapeMismatch(format!(
                    "net{j}.{name}.npy has shape {shape:?}, expected [{rows}, {cols}]"
                )));
            }
            Array2::from_shape_vec((rows, cols), flat)
                .map_err(|e| Error::ShapeMismatch(e.to_string()))
        };
        let read_vec = |name: &str, len: usize| -> Result<Array1<f64>> {
            let (flat, shape) = npy::read_f64(&dir.join(format!("net{j}.{name}.npy")))?;
            if shape != vec![len] {
                return Err(Error::ShapeMismatch(format!(
                    "net{j}.{name}.npy has shape {shape:?}, expected [{len}]"
                )));
            }
            Ok(Array1::from_vec(flat))
        };
        let model = LstmModel {
            hidden: nm.hidden,
            n_features: nm.n_features,
            n_out: nm.n_out,
            w_x: read_mat("wx", 4 * nm.hidden, nm.n_features)?,
            w_h: read_mat("wh", 4 * nm.hidden, nm.hidden)?,
            b: read_vec("b", 4 * nm.hidden)?,
            w_out: read_mat("wout", nm.n_out, nm.hidden)?,
            b_out: read_vec("bout", nm.n_out)?,
            dropout: nm.dropout,
            seed: nm.seed,
        };
        nets.push(TrainedNet {
            model,
            scaler: nm.scaler,
            feature_rows: nm.feature_rows,
            loss: LossHistory {
                train: nm.loss_train,
                holdout: nm.loss_holdout,
            },
        });
    }
    Ok((
        EmulatorEnsemble {
            nets,
            hp: meta.hp,
            n_tau_p: meta.n_tau_p,
            n_tau_f: meta.n_tau_f,
            kind: meta.kind,
            index: meta.index,
        },
        provenance,
    ))
}
