//! SPOD and POD basis construction.
//!
//! SPOD: segment the centered record into L Welch blocks, apply a windowed
//! DFT (scaled by 1/n_fft so that one-sided bin energies sum to the mean
//! per-snapshot block energy), gather realizations of each frequency into an
//! M x L ensemble, and solve the weighted L x L eigenproblem
//! X_k^H X_k V = V Lambda with X_k = (1/sqrt(L)) W^{1/2} Q_hat_k. Modes
//! follow Phi_k = (1/sqrt(L)) Q_hat_k V Lambda^{-1/2}, which keeps them
//! orthonormal under the weighted inner product.
//!
//! POD: method of snapshots on the weighted Gram matrix Q^T W Q, with modes
//! rescaled to unit weighted norm.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::{SnapshotMatrix, WeightVector};
use crate::error::{Error, Result};
use crate::linalg::{self, C64};
use crate::npy;

/// Relative eigenvalue cutoff: eigenvalues below eps_rank * lambda_max are
/// clamped to zero and their modes zero-filled instead of divided by
/// sqrt(lambda).
pub const EPS_RANK: f64 = 1e-12;

/// Orthonormality is only checkable down to the eigensolver's noise floor:
/// the Lambda^{-1/2} scaling amplifies an O(eps * lambda_max) backward error
/// to O(eps * lambda_max / lambda_j), so modes below this relative energy
/// cannot meet the 1e-8 residual target and are skipped by the check.
pub const ORTHO_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hamming,
    Boxcar,
}

/// Welch segmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchParams {
    /// Snapshots per block. Must be even (one-sided spectra of odd-length
    /// blocks would break the N_f = n_fft/2 + 1 bookkeeping).
    pub n_fft: usize,
    /// Fraction of a block shared with its successor, in [0, 1).
    pub overlap_fraction: f64,
    pub window: WindowKind,
    /// Multiply spectra by 1/sqrt(mean(window^2)) to undo the window's
    /// energy loss.
    pub normalize_window: bool,
}

impl WelchParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 || self.n_fft % 2 != 0 {
            return Err(Error::ConfigValidation(format!(
                "n_fft must be an even number >= 2, got {}",
                self.n_fft
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::ConfigValidation(format!(
                "overlap_fraction must be in [0, 1), got {}",
                self.overlap_fraction
            )));
        }
        Ok(())
    }

    pub fn n_overlap(&self) -> usize {
        (self.overlap_fraction * self.n_fft as f64).floor() as usize
    }

    /// One-sided frequency count for real data.
    pub fn n_freq(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// L = floor((Nt - n_ovlp) / (n_fft - n_ovlp)); trailing remainder
    /// snapshots are discarded.
    pub fn block_count(&self, nt: usize) -> Result<usize> {
        if nt < self.n_fft {
            return Err(Error::TooFewSnapshots {
                nt,
                n_fft: self.n_fft,
            });
        }
        let hop = self.n_fft - self.n_overlap();
        Ok((nt - self.n_overlap()) / hop)
    }

    pub fn window_samples(&self) -> Vec<f64> {
        let n = self.n_fft;
        match self.window {
            WindowKind::Boxcar => vec![1.0; n],
            WindowKind::Hamming => (0..n)
                .map(|i| {
                    0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n as f64 - 1.0)).cos()
                })
                .collect(),
        }
    }

    /// 1/sqrt(mean(window^2)) when normalization is on, else 1.
    pub fn window_correction(&self) -> f64 {
        if !self.normalize_window {
            return 1.0;
        }
        let w = self.window_samples();
        let ms = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        1.0 / ms.sqrt()
    }
}

/// Per-frequency SPOD mode sets with energies.
#[derive(Debug, Clone)]
pub struct SpodBasis {
    /// modes[k] is M x L; column j is the j-th mode at frequency bin k.
    pub modes: Vec<Array2<C64>>,
    /// eigvals[[k, j]], sorted descending in j for every k, clamped at zero.
    pub eigvals: Array2<f64>,
    /// Physical frequency axis, freqs[k] = k / (n_fft * dt).
    pub freqs: Array1<f64>,
    pub weights: WeightVector,
    pub welch: WelchParams,
    pub dt: f64,
}

impl SpodBasis {
    pub fn n_freq(&self) -> usize {
        self.modes.len()
    }

    pub fn n_modes(&self) -> usize {
        self.modes.first().map_or(0, |m| m.ncols())
    }

    pub fn n_rows(&self) -> usize {
        self.modes.first().map_or(0, |m| m.nrows())
    }

    /// A mode is degenerate when its eigenvalue fell below the rank cutoff.
    pub fn is_degenerate(&self, k: usize, j: usize) -> bool {
        let lead = self.eigvals[[k, 0]];
        self.eigvals[[k, j]] <= EPS_RANK * lead
    }

    /// max over k of || Phi_k^H W Phi_k - I ||_max over modes above the
    /// orthonormality check floor.
    pub fn orthonormality_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..self.n_freq() {
            let lead = self.eigvals[[k, 0]];
            let live: Vec<usize> = (0..self.n_modes())
                .filter(|&j| self.eigvals[[k, j]] > ORTHO_CHECK_FLOOR * lead)
                .collect();
            for (a_i, &ja) in live.iter().enumerate() {
                for &jb in &live[a_i..] {
                    let mut acc = C64::new(0.0, 0.0);
                    for m in 0..self.n_rows() {
                        acc += self.modes[k][[m, ja]].conj()
                            * self.weights.w[m]
                            * self.modes[k][[m, jb]];
                    }
                    let target = if ja == jb { 1.0 } else { 0.0 };
                    worst = worst.max((acc - C64::new(target, 0.0)).norm());
                }
            }
        }
        worst
    }
}

/// Space-only orthonormal basis from the method of snapshots.
#[derive(Debug, Clone)]
pub struct PodBasis {
    /// M x L_max, columns orthonormal under the weights.
    pub modes: Array2<f64>,
    pub eigvals: Array1<f64>,
    pub weights: WeightVector,
}

impl PodBasis {
    pub fn n_modes(&self) -> usize {
        self.modes.ncols()
    }

    pub fn orthonormality_residual(&self) -> f64 {
        let lead = self.eigvals.iter().cloned().fold(0.0f64, f64::max);
        let live: Vec<usize> = (0..self.n_modes())
            .filter(|&j| self.eigvals[j] > ORTHO_CHECK_FLOOR * lead)
            .collect();
        let mut worst = 0.0f64;
        for (a_i, &ja) in live.iter().enumerate() {
            for &jb in &live[a_i..] {
                let mut acc = 0.0;
                for m in 0..self.modes.nrows() {
                    acc += self.modes[[m, ja]] * self.weights.w[m] * self.modes[[m, jb]];
                }
                let target = if ja == jb { 1.0 } else { 0.0 };
                worst = worst.max((acc - target).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Spod,
    Pod,
}

/// Mode/frequency selection flattened into one column block, ordered by
/// frequency first and mode second (a_flb^(1) ... a_flb^(Lr), a_flb+1^(1),
/// ...).
#[derive(Debug, Clone)]
pub struct ReducedBasis {
    pub kind: BasisKind,
    /// M x d; for kind = pod every imaginary part is exactly zero.
    pub columns: Array2<C64>,
    /// (mode j, frequency k) per column.
    pub index: Vec<(usize, usize)>,
    pub band: (usize, usize),
    pub l_r: usize,
}

impl ReducedBasis {
    pub fn d(&self) -> usize {
        self.index.len()
    }
}

/// Cut the centered record into overlapping M x n_fft blocks.
pub fn partition_blocks(q: &SnapshotMatrix, p: &WelchParams) -> Result<Vec<Array2<f64>>> {
    p.validate()?;
    let l = p.block_count(q.n_snapshots())?;
    let hop = p.n_fft - p.n_overlap();
    let mut blocks = Vec::with_capacity(l);
    for b in 0..l {
        let start = b * hop;
        blocks.push(
            q.values
                .slice(ndarray::s![.., start..start + p.n_fft])
                .to_owned(),
        );
    }
    Ok(blocks)
}

/// Window each row and take the one-sided DFT, scaled by 1/n_fft (so a unit
/// tone carries amplitude 1/2 in its bin and bin energies satisfy the
/// Parseval bookkeeping used by the eigenvalue checks).
pub fn window_and_fft(block: &Array2<f64>, p: &WelchParams) -> Result<Array2<C64>> {
    p.validate()?;
    let (m, n) = block.dim();
    if n != p.n_fft {
        return Err(Error::DimensionMismatch(format!(
            "block has {n} columns, Welch params expect {}",
            p.n_fft
        )));
    }
    let window = p.window_samples();
    let scale = p.window_correction() / p.n_fft as f64;
    let n_freq = p.n_freq();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut out = Array2::zeros((m, n_freq));
    let mut buf: Vec<Complex64> = vec![Complex64::new(0.0, 0.0); n];
    for i in 0..m {
        for t in 0..n {
            buf[t] = Complex64::new(block[[i, t]] * window[t], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_freq {
            out[[i, k]] = buf[k] * scale;
        }
    }
    Ok(out)
}

/// Regroup per-block spectra into per-frequency ensembles Q_hat_k (M x L).
pub fn assemble_frequency_ensembles(blocks_fft: &[Array2<C64>]) -> Vec<Array2<C64>> {
    let l = blocks_fft.len();
    if l == 0 {
        return Vec::new();
    }
    let (m, n_freq) = blocks_fft[0].dim();
    (0..n_freq)
        .map(|k| {
            let mut qk = Array2::zeros((m, l));
            for (b, blk) in blocks_fft.iter().enumerate() {
                for i in 0..m {
                    qk[[i, b]] = blk[[i, k]];
                }
            }
            qk
        })
        .collect()
}

/// Result of one per-frequency eigensolve.
#[derive(Debug, Clone)]
pub struct FreqEigen {
    /// M x L modes, degenerate columns zero-filled.
    pub modes: Array2<C64>,
    /// Length L, descending, clamped at zero.
    pub eigvals: Array1<f64>,
    pub degenerate: Vec<bool>,
}

/// Solve X_k^H X_k V = V Lambda with X_k = (1/sqrt(L)) W^{1/2} Q_hat_k and
/// scale modes to Phi_k = (1/sqrt(L)) Q_hat_k V Lambda^{-1/2}.
pub fn solve_frequency_eigenproblem(qhat_k: &Array2<C64>, w: &WeightVector) -> Result<FreqEigen> {
    let (m, l) = qhat_k.dim();
    if w.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "weights have {} entries, ensemble has {m} rows",
            w.len()
        )));
    }
    // G = X^H X = (1/L) Q_hat^H W Q_hat, L x L Hermitian PSD.
    let mut g = Array2::<C64>::zeros((l, l));
    for a in 0..l {
        for b in a..l {
            let mut acc = C64::new(0.0, 0.0);
            for i in 0..m {
                acc += qhat_k[[i, a]].conj() * w.w[i] * qhat_k[[i, b]];
            }
            acc /= l as f64;
            g[[a, b]] = acc;
            g[[b, a]] = acc.conj();
        }
    }
    let eig = linalg::hermitian_eigen(g.view())?;
    let eigvals = eig.eigvals.mapv(|x| x.max(0.0));
    let lead = eigvals.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = EPS_RANK * lead;

    let mut modes = Array2::<C64>::zeros((m, l));
    let mut degenerate = vec![false; l];
    let inv_sqrt_l = 1.0 / (l as f64).sqrt();
    for j in 0..l {
        if eigvals[j] <= cutoff || eigvals[j] == 0.0 {
            degenerate[j] = true;
            continue;
        }
        let s = inv_sqrt_l / eigvals[j].sqrt();
        for i in 0..m {
            let mut acc = C64::new(0.0, 0.0);
            for a in 0..l {
                acc += qhat_k[[i, a]] * eig.vecs[[a, j]];
            }
            modes[[i, j]] = acc * s;
        }
    }
    fix_phase(&mut modes, &degenerate);
    Ok(FreqEigen {
        modes,
        eigvals,
        degenerate,
    })
}

/// Rotate each live column so its largest-magnitude entry is real positive.
fn fix_phase(modes: &mut Array2<C64>, degenerate: &[bool]) {
    let (m, l) = modes.dim();
    for j in 0..l {
        if degenerate[j] {
            continue;
        }
        let mut best = 0usize;
        let mut best_norm = 0.0f64;
        for i in 0..m {
            let n = modes[[i, j]].norm();
            if n > best_norm {
                best_norm = n;
                best = i;
            }
        }
        if best_norm == 0.0 {
            continue;
        }
        let phase = modes[[best, j]] / best_norm;
        let rot = phase.conj();
        for i in 0..m {
            modes[[i, j]] *= rot;
        }
    }
}

/// Full SPOD of a centered snapshot matrix. Per-frequency eigenproblems are
/// independent and run on the rayon pool; each writes only its own slot, so
/// parallel output is identical to sequential output.
pub fn compute_spod(q: &SnapshotMatrix, p: &WelchParams, w: &WeightVector) -> Result<SpodBasis> {
    p.validate()?;
    if w.len() != q.n_rows() {
        return Err(Error::DimensionMismatch(format!(
            "weights have {} entries, data has {} rows",
            w.len(),
            q.n_rows()
        )));
    }
    let blocks = partition_blocks(q, p)?;
    let spectra: Vec<Array2<C64>> = blocks
        .par_iter()
        .map(|b| window_and_fft(b, p))
        .collect::<Result<_>>()?;
    drop(blocks);
    let ensembles = assemble_frequency_ensembles(&spectra);
    drop(spectra);

    let solved: Vec<FreqEigen> = ensembles
        .par_iter()
        .map(|qk| solve_frequency_eigenproblem(qk, w))
        .collect::<Result<_>>()?;

    let n_freq = solved.len();
    let l = solved.first().map_or(0, |s| s.eigvals.len());
    let mut eigvals = Array2::zeros((n_freq, l));
    let mut modes = Vec::with_capacity(n_freq);
    for (k, fe) in solved.into_iter().enumerate() {
        eigvals.row_mut(k).assign(&fe.eigvals);
        modes.push(fe.modes);
    }
    let freqs = Array1::from_iter((0..n_freq).map(|k| k as f64 / (p.n_fft as f64 * q.dt)));
    Ok(SpodBasis {
        modes,
        eigvals,
        freqs,
        weights: w.clone(),
        welch: *p,
        dt: q.dt,
    })
}

/// POD by the method of snapshots on the weighted Gram matrix.
pub fn compute_pod(q: &SnapshotMatrix, w: &WeightVector, l_max: usize) -> Result<PodBasis> {
    let (m, nt) = q.values.dim();
    if w.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "weights have {} entries, data has {m} rows",
            w.len()
        )));
    }
    if l_max == 0 || l_max > m.min(nt) {
        return Err(Error::DimensionMismatch(format!(
            "L_max={l_max} must be in 1..=min(M={m}, Nt={nt})"
        )));
    }
    // K = Q^T W Q
    let mut qw = q.values.clone();
    for (mut row, &wi) in qw.rows_mut().into_iter().zip(w.w.iter()) {
        row.mapv_inplace(|x| x * wi);
    }
    let k = q.values.t().dot(&qw);
    let eig = linalg::symmetric_eigen(k.view())?;
    let eigvals = eig.eigvals.slice(ndarray::s![..l_max]).mapv(|x| x.max(0.0));
    let lead = eigvals.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = EPS_RANK * lead;

    let mut modes = Array2::<f64>::zeros((m, l_max));
    for j in 0..l_max {
        if eigvals[j] <= cutoff || eigvals[j] == 0.0 {
            continue;
        }
        let s = 1.0 / eigvals[j].sqrt();
        for i in 0..m {
            let mut acc = 0.0;
            for t in 0..nt {
                acc += q.values[[i, t]] * eig.vecs[[t, j]];
            }
            modes[[i, j]] = acc * s;
        }
    }
    // Sign convention: largest-magnitude entry positive.
    for j in 0..l_max {
        let mut best = 0usize;
        let mut best_abs = 0.0f64;
        for i in 0..m {
            let a = modes[[i, j]].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if best_abs > 0.0 && modes[[best, j]] < 0.0 {
            for i in 0..m {
                modes[[i, j]] = -modes[[i, j]];
            }
        }
    }
    Ok(PodBasis {
        modes,
        eigvals,
        weights: w.clone(),
    })
}

/// Assemble the reduced column block for a mode count and frequency band.
pub fn select_band_spod(b: &SpodBasis, l_r: usize, flb: usize, fub: usize) -> Result<ReducedBasis> {
    let n_freq = b.n_freq();
    if l_r == 0 || l_r > b.n_modes() {
        return Err(Error::BandOutOfRange { flb, fub, n_freq });
    }
    if flb > fub || fub >= n_freq {
        return Err(Error::BandOutOfRange { flb, fub, n_freq });
    }
    let m = b.n_rows();
    let d = l_r * (fub - flb + 1);
    let mut columns = Array2::zeros((m, d));
    let mut index = Vec::with_capacity(d);
    let mut c = 0usize;
    for k in flb..=fub {
        for j in 0..l_r {
            for i in 0..m {
                columns[[i, c]] = b.modes[k][[i, j]];
            }
            index.push((j, k));
            c += 1;
        }
    }
    Ok(ReducedBasis {
        kind: BasisKind::Spod,
        columns,
        index,
        band: (flb, fub),
        l_r,
    })
}

/// POD variant: the band is ignored, d = L_r.
pub fn select_band_pod(b: &PodBasis, l_r: usize) -> Result<ReducedBasis> {
    if l_r == 0 || l_r > b.n_modes() {
        return Err(Error::BandOutOfRange {
            flb: 0,
            fub: 0,
            n_freq: b.n_modes(),
        });
    }
    let m = b.modes.nrows();
    let mut columns = Array2::zeros((m, l_r));
    let mut index = Vec::with_capacity(l_r);
    for j in 0..l_r {
        for i in 0..m {
            columns[[i, j]] = C64::new(b.modes[[i, j]], 0.0);
        }
        index.push((j, 0));
    }
    Ok(ReducedBasis {
        kind: BasisKind::Pod,
        columns,
        index,
        band: (0, 0),
        l_r,
    })
}

// ---------------------------------------------------------------------------
// Persistence: meta.json + binary arrays in one directory.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BasisMeta {
    kind: BasisKind,
    m: usize,
    n_modes: usize,
    n_freq: usize,
    dt: f64,
    welch: Option<WelchParams>,
    /// FNV-1a hash of the input data, hex.
    provenance: String,
}

/// Either flavor of persisted basis.
#[derive(Debug, Clone)]
pub enum Basis {
    Spod(SpodBasis),
    Pod(PodBasis),
}

impl Basis {
    pub fn kind(&self) -> BasisKind {
        match self {
            Basis::Spod(_) => BasisKind::Spod,
            Basis::Pod(_) => BasisKind::Pod,
        }
    }
}

pub fn save_basis(dir: &Path, basis: &Basis, provenance: u64) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating basis dir {}", dir.display()), e))?;
    match basis {
        Basis::Spod(b) => {
            let (n_freq, l) = (b.n_freq(), b.n_modes());
            let m = b.n_rows();
            let meta = BasisMeta {
                kind: BasisKind::Spod,
                m,
                n_modes: l,
                n_freq,
                dt: b.dt,
                welch: Some(b.welch),
                provenance: format!("{provenance:016x}"),
            };
            write_meta(dir, &meta)?;
            let mut flat = Vec::with_capacity(n_freq * m * l);
            for k in 0..n_freq {
                for i in 0..m {
                    for j in 0..l {
                        flat.push(b.modes[k][[i, j]]);
                    }
                }
            }
            npy::write_c128(&dir.join("modes.npy"), &flat, &[n_freq, m, l])?;
            npy::write_f64(
                &dir.join("eigvals.npy"),
                b.eigvals.as_slice().unwrap(),
                &[n_freq, l],
            )?;
            npy::write_f64(
                &dir.join("freqs.npy"),
                b.freqs.as_slice().unwrap(),
                &[n_freq],
            )?;
            npy::write_f64(
                &dir.join("weights.npy"),
                b.weights.w.as_slice().unwrap(),
                &[m],
            )?;
        }
        Basis::Pod(b) => {
            let (m, l) = b.modes.dim();
            let meta = BasisMeta {
                kind: BasisKind::Pod,
                m,
                n_modes: l,
                n_freq: 0,
                dt: 0.0,
                welch: None,
                provenance: format!("{provenance:016x}"),
            };
            write_meta(dir, &meta)?;
            let flat: Vec<f64> = b.modes.iter().cloned().collect();
            npy::write_f64(&dir.join("modes.npy"), &flat, &[m, l])?;
            npy::write_f64(&dir.join("eigvals.npy"), b.eigvals.as_slice().unwrap(), &[l])?;
            npy::write_f64(
                &dir.join("weights.npy"),
                b.weights.w.as_slice().unwrap(),
                &[m],
            )?;
        }
    }
    Ok(())
}

fn write_meta(dir: &Path, meta: &BasisMeta) -> Result<()> {
    let s =
        serde_json::to_string_pretty(meta).map_err(|e| Error::json("serializing basis meta", e))?;
    fs::write(dir.join("meta.json"), s)
        .map_err(|e| Error::io(format!("writing {}/meta.json", dir.display()), e))
}

/// Load a persisted basis. Returns the basis and its recorded provenance.
pub fn load_basis(dir: &Path) -> Result<(Basis, u64)> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::FileMissing(meta_path));
    }
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| Error::io(format!("reading {}", meta_path.display()), e))?;
    let meta: BasisMeta = serde_json::from_str(&text)
        .map_err(|e| Error::json(format!("parsing {}", meta_path.display()), e))?;
    let provenance = u64::from_str_radix(&meta.provenance, 16)
        .map_err(|_| Error::ConfigValidation("bad provenance hash in meta.json".into()))?;

    match meta.kind {
        BasisKind::Spod => {
            let welch = meta.welch.ok_or_else(|| {
                Error::ConfigValidation("spod basis meta lacks welch params".into())
            })?;
            let (flat, shape) = npy::read_c128(&dir.join("modes.npy"))?;
            if shape != vec![meta.n_freq, meta.m, meta.n_modes] {
                return Err(Error::ShapeMismatch(format!(
                    "modes.npy shape {shape:?} does not match meta"
                )));
            }
            let arr = Array3::from_shape_vec((meta.n_freq, meta.m, meta.n_modes), flat)
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
            let modes: Vec<Array2<C64>> = (0..meta.n_freq)
                .map(|k| arr.index_axis(Axis(0), k).to_owned())
                .collect();
            let (ev, ev_shape) = npy::read_f64(&dir.join("eigvals.npy"))?;
            if ev_shape != vec![meta.n_freq, meta.n_modes] {
                return Err(Error::ShapeMismatch("eigvals.npy shape mismatch".into()));
            }
            let eigvals = Array2::from_shape_vec((meta.n_freq, meta.n_modes), ev)
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
            let (fr, _) = npy::read_f64(&dir.join("freqs.npy"))?;
            let (wv, _) = npy::read_f64(&dir.join("weights.npy"))?;
            Ok((
                Basis::Spod(SpodBasis {
                    modes,
                    eigvals,
                    freqs: Array1::from_vec(fr),
                    weights: WeightVector::new(Array1::from_vec(wv))?,
                    welch,
                    dt: meta.dt,
                }),
                provenance,
            ))
        }
        BasisKind::Pod => {
            let (flat, shape) = npy::read_f64(&dir.join("modes.npy"))?;
            if shape != vec![meta.m, meta.n_modes] {
                return Err(Error::ShapeMismatch("modes.npy shape mismatch".into()));
            }
            let modes = Array2::from_shape_vec((meta.m, meta.n_modes), flat)
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
            let (ev, _) = npy::read_f64(&dir.join("eigvals.npy"))?;
            let (wv, _) = npy::read_f64(&dir.join("weights.npy"))?;
            Ok((
                Basis::Pod(PodBasis {
                    modes,
                    eigvals: Array1::from_vec(ev),
                    weights: WeightVector::new(Array1::from_vec(wv))?,
                }),
                provenance,
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(n_fft: usize, overlap: f64, window: WindowKind, norm: bool) -> WelchParams {
        WelchParams {
            n_fft,
            overlap_fraction: overlap,
            window,
            normalize_window: norm,
        }
    }

    fn centered(values: Array2<f64>) -> SnapshotMatrix {
        let q = SnapshotMatrix::new(values, 1, 1.0, None).unwrap();
        data::subtract_temporal_mean(&q).unwrap()
    }

    fn random_centered(m: usize, nt: usize, seed: u64) -> SnapshotMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        centered(Array2::from_shape_fn((m, nt), |_| {
            rng.random::<f64>() * 2.0 - 1.0
        }))
    }

    #[test]
    fn block_counts_match_reference_configs() {
        let p = params(64, 0.5, WindowKind::Hamming, true);
        assert_eq!(p.block_count(800).unwrap(), 24);
        assert_eq!(p.n_freq(), 33);

        let p = params(730, 0.0, WindowKind::Hamming, true);
        assert_eq!(p.block_count(3750).unwrap(), 5);
        assert_eq!(p.n_freq(), 366);

        let p = params(64, 0.5, WindowKind::Boxcar, false);
        assert_eq!(p.block_count(64).unwrap(), 1);

        // one-snapshot hop
        let p = params(64, 63.0 / 64.0, WindowKind::Hamming, true);
        assert_eq!(p.n_overlap(), 63);
        assert_eq!(p.block_count(750).unwrap(), 687);
    }

    #[test]
    fn partition_starts_and_discards_remainder() {
        let q = random_centered(3, 25, 0);
        let p = params(8, 0.5, WindowKind::Boxcar, false);
        let blocks = partition_blocks(&q, &p).unwrap();
        // hop = 4, L = floor((25-4)/4) = 5
        assert_eq!(blocks.len(), 5);
        for (b, blk) in blocks.iter().enumerate() {
            let start = b * 4;
            assert_eq!(blk.column(0), q.values.column(start));
        }
        let p_big = params(32, 0.0, WindowKind::Boxcar, false);
        assert!(matches!(
            partition_blocks(&q, &p_big),
            Err(Error::TooFewSnapshots { .. })
        ));
    }

    #[test]
    fn dc_block_concentrates_in_bin_zero() {
        let p = params(16, 0.0, WindowKind::Boxcar, false);
        let block = Array2::from_elem((2, 16), 3.0);
        let spec = window_and_fft(&block, &p).unwrap();
        // The transform carries 1/n_fft, so a constant row c lands as c in
        // bin zero.
        assert!((spec[[0, 0]] - C64::new(3.0, 0.0)).norm() < 1e-12);
        for k in 1..p.n_freq() {
            assert!(spec[[0, k]].norm() < 1e-12, "bin {k} leaked");
        }
    }

    #[test]
    fn pure_tone_lands_on_its_bin() {
        let n = 64;
        let p = params(n, 0.0, WindowKind::Boxcar, false);
        let block = Array2::from_shape_fn((1, n), |(_, t)| {
            (2.0 * std::f64::consts::PI * 4.0 * t as f64 / n as f64).cos()
        });
        let spec = window_and_fft(&block, &p).unwrap();
        assert!((spec[[0, 4]].norm() - 0.5).abs() < 1e-12);
        let off: f64 = (0..p.n_freq())
            .filter(|&k| k != 4)
            .map(|k| spec[[0, k]].norm())
            .sum();
        assert!(off < 1e-10);
    }

    #[test]
    fn windowed_fft_matches_naive_dft() {
        // independent O(n^2) oracle with its own window formula
        let n = 16;
        let p = params(n, 0.0, WindowKind::Hamming, true);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let block = Array2::from_shape_fn((3, n), |_| rng.random::<f64>() - 0.5);
        let spec = window_and_fft(&block, &p).unwrap();

        let win: Vec<f64> = (0..n)
            .map(|i| {
                0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n as f64 - 1.0)).cos()
            })
            .collect();
        let msq = win.iter().map(|x| x * x).sum::<f64>() / n as f64;
        let corr = 1.0 / msq.sqrt();
        for i in 0..3 {
            for k in 0..p.n_freq() {
                let mut acc = C64::new(0.0, 0.0);
                for t in 0..n {
                    let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                    acc += C64::new(ang.cos(), ang.sin()) * block[[i, t]] * win[t];
                }
                acc = acc * corr / n as f64;
                assert!((acc - spec[[i, k]]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn ensembles_are_pure_bookkeeping() {
        let p = params(8, 0.0, WindowKind::Boxcar, false);
        let q = random_centered(4, 24, 3);
        let blocks = partition_blocks(&q, &p).unwrap();
        let spectra: Vec<_> = blocks
            .iter()
            .map(|b| window_and_fft(b, &p).unwrap())
            .collect();
        let ens = assemble_frequency_ensembles(&spectra);
        assert_eq!(ens.len(), p.n_freq());
        for (k, qk) in ens.iter().enumerate() {
            assert_eq!(qk.dim(), (4, 3));
            for b in 0..3 {
                for i in 0..4 {
                    assert_eq!(qk[[i, b]], spectra[b][[i, k]]);
                }
            }
        }
        // column permutation follows block permutation
        let perm: Vec<_> = vec![spectra[2].clone(), spectra[0].clone(), spectra[1].clone()];
        let ens_p = assemble_frequency_ensembles(&perm);
        for k in 0..p.n_freq() {
            assert_eq!(ens_p[k].column(0), ens[k].column(2));
        }
        // single block => M x 1 everywhere
        let ens_1 = assemble_frequency_ensembles(&spectra[..1]);
        for qk in &ens_1 {
            assert_eq!(qk.ncols(), 1);
        }
    }

    #[test]
    fn rank_one_ensemble_has_single_eigenvalue() {
        let m = 6;
        let l = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<C64> = (0..m)
            .map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        let qhat = Array2::from_shape_fn((m, l), |(i, _)| v[i]);
        let w = data::build_uniform_weights(m).unwrap();
        let fe = solve_frequency_eigenproblem(&qhat, &w).unwrap();
        let expect: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        assert!((fe.eigvals[0] - expect).abs() < 1e-10 * expect);
        for j in 1..l {
            assert!(fe.eigvals[j] < 1e-10 * expect);
            assert!(fe.degenerate[j]);
        }
    }

    #[test]
    fn gram_route_matches_dense_covariance_route() {
        // eigenvalues of X^H X (L x L) vs X X^H (M x M)
        let (m, l) = (8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qhat = Array2::from_shape_fn((m, l), |_| {
            C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        });
        let wvec = Array1::from_shape_fn(m, |_| 0.5 + rng.random::<f64>());
        let w = WeightVector::new(wvec.clone()).unwrap();
        let fe = solve_frequency_eigenproblem(&qhat, &w).unwrap();

        // dense covariance S = X X^H with X = (1/sqrt(L)) W^{1/2} Q
        let mut x = Array2::<C64>::zeros((m, l));
        for i in 0..m {
            for a in 0..l {
                x[[i, a]] = qhat[[i, a]] * wvec[i].sqrt() / (l as f64).sqrt();
            }
        }
        let xh = linalg::herm_t(&x.view());
        let s = linalg::zgemm(&x.view(), &xh.view());
        let dense = linalg::hermitian_eigen(s.view()).unwrap();
        for j in 0..l {
            let rel = (fe.eigvals[j] - dense.eigvals[j]).abs() / dense.eigvals[0];
            assert!(rel < 1e-10, "mode {j}: {rel}");
        }
    }

    #[test]
    fn null_weighting_over_data_support_flags_degenerate() {
        // Weights vanish on every row that carries data (the weight vector
        // still has one positive entry to satisfy its own invariant).
        let m = 5;
        let l = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut qhat = Array2::<C64>::zeros((m, l));
        for i in 0..m - 1 {
            for a in 0..l {
                qhat[[i, a]] = C64::new(rng.random::<f64>(), rng.random::<f64>());
            }
        }
        let mut wv = Array1::zeros(m);
        wv[m - 1] = 1.0; // only the data-free row is weighted
        let w = WeightVector::new(wv).unwrap();
        let fe = solve_frequency_eigenproblem(&qhat, &w).unwrap();
        assert!(fe.eigvals.iter().all(|&x| x == 0.0));
        assert!(fe.degenerate.iter().all(|&d| d));
    }

    #[test]
    fn spod_recovers_planted_coherent_structure() {
        // data = Re(a(t) phi e^{i 2 pi f0 t}) with f0 on-bin
        let m = 12;
        let nt = 512;
        let n_fft = 32;
        let bin = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let phi: Vec<C64> = (0..m)
            .map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        let f0 = bin as f64 / n_fft as f64; // cycles per snapshot, dt = 1
        let values = Array2::from_shape_fn((m, nt), |(i, t)| {
            let amp = 1.0 + 0.05 * (2.0 * std::f64::consts::PI * t as f64 / nt as f64).sin();
            let rot = C64::from_polar(1.0, 2.0 * std::f64::consts::PI * f0 * t as f64);
            (amp * phi[i] * rot).re + 1e-4 * (rng.random::<f64>() - 0.5)
        });
        let q = centered(values);
        let w = data::build_uniform_weights(m).unwrap();
        let p = params(n_fft, 0.5, WindowKind::Hamming, true);
        let basis = compute_spod(&q, &p, &w).unwrap();

        // energy at the planted bin is dominated by the first mode
        assert!(basis.eigvals[[bin, 0]] > 100.0 * basis.eigvals[[bin, 1]]);
        // and the leading mode aligns with phi under the weighted inner product
        let mode = basis.modes[bin].column(0);
        let mut inner = C64::new(0.0, 0.0);
        let mut n_phi = 0.0;
        for i in 0..m {
            inner += mode[i].conj() * phi[i];
            n_phi += phi[i].norm_sqr();
        }
        let align = inner.norm() / n_phi.sqrt(); // mode already unit norm
        assert!(align > 0.99, "alignment {align}");
        // frequency axis bookkeeping
        assert!((basis.freqs[bin] - f0).abs() < 1e-12);
        assert!(basis.orthonormality_residual() < 1e-8);
    }

    #[test]
    fn white_noise_spectrum_is_statistically_flat() {
        let m = 4;
        let n_fft = 16;
        let nt = 16 * 80;
        let q = random_centered(m, nt, 33);
        let w = data::build_uniform_weights(m).unwrap();
        let p = params(n_fft, 0.0, WindowKind::Boxcar, false);
        let basis = compute_spod(&q, &p, &w).unwrap();
        // compare total energy per interior bin against the interior mean
        let totals: Vec<f64> = (1..p.n_freq() - 1)
            .map(|k| basis.eigvals.row(k).sum())
            .collect();
        let mean = totals.iter().sum::<f64>() / totals.len() as f64;
        for (k, t) in totals.iter().enumerate() {
            assert!(
                (t / mean - 1.0).abs() < 0.5,
                "bin {} off by {}",
                k + 1,
                t / mean - 1.0
            );
        }
    }

    #[test]
    fn parseval_energy_identity_boxcar() {
        let q = random_centered(5, 128, 17);
        let w = WeightVector::new(Array1::from_shape_fn(5, |i| 0.3 + i as f64 * 0.2)).unwrap();
        let p = params(16, 0.0, WindowKind::Boxcar, false);
        let basis = compute_spod(&q, &p, &w).unwrap();

        let n_freq = p.n_freq();
        let mut lhs = 0.0;
        for k in 0..n_freq {
            let row_sum: f64 = basis.eigvals.row(k).sum();
            let double = if k == 0 || k == n_freq - 1 { 1.0 } else { 2.0 };
            lhs += double * row_sum;
        }
        let blocks = partition_blocks(&q, &p).unwrap();
        let l = blocks.len() as f64;
        let mut rhs = 0.0;
        for blk in &blocks {
            for i in 0..5 {
                for t in 0..16 {
                    rhs += w.w[i] * blk[[i, t]] * blk[[i, t]];
                }
            }
        }
        rhs /= l * 16.0;
        assert!(
            ((lhs - rhs) / rhs).abs() < 1e-6,
            "parseval: lhs {lhs} rhs {rhs}"
        );
    }

    #[test]
    fn pod_rank_one_data() {
        let m = 7;
        let nt = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<f64> = (0..m).map(|_| rng.random::<f64>() - 0.5).collect();
        // alternating signs keep the record centered and rank one
        let values =
            Array2::from_shape_fn((m, nt), |(i, t)| v[i] * if t % 2 == 0 { 1.0 } else { -1.0 });
        let q = SnapshotMatrix::new(values, 1, 1.0, None).unwrap();
        let w = data::build_uniform_weights(m).unwrap();
        let basis = compute_pod(&q, &w, 3).unwrap();
        assert!(basis.eigvals[0] > 0.0);
        assert!(basis.eigvals[1] < 1e-12 * basis.eigvals[0]);
        // mode proportional to v
        let norm_v: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for i in 0..m {
            let expect = v[i] / norm_v;
            let got = basis.modes[[i, 0]];
            assert!(
                (got - expect).abs() < 1e-10 || (got + expect).abs() < 1e-10,
                "i={i}"
            );
        }
    }

    #[test]
    fn pod_matches_one_sided_jacobi_svd_oracle() {
        let (m, nt) = (12, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let values = Array2::from_shape_fn((m, nt), |_| rng.random::<f64>() - 0.5);
        let q = SnapshotMatrix::new(values.clone(), 1, 1.0, None).unwrap();
        let w = data::build_uniform_weights(m).unwrap();
        let basis = compute_pod(&q, &w, m).unwrap();

        let (sv, left) = one_sided_jacobi_svd(&values);
        for j in 0..m {
            let rel = (basis.eigvals[j] - sv[j] * sv[j]).abs() / (sv[0] * sv[0]);
            assert!(rel < 1e-9, "eigval {j}: {rel}");
        }
        for j in 0..m {
            if sv[j] < 1e-8 * sv[0] {
                continue;
            }
            let dot: f64 = (0..m).map(|i| basis.modes[[i, j]] * left[[i, j]]).sum();
            assert!(
                (dot.abs() - 1.0).abs() < 1e-9,
                "mode {j}: |dot| = {}",
                dot.abs()
            );
        }
    }

    /// Test-only SVD oracle: one-sided Jacobi on A^T, independent of the
    /// production eigensolver. Returns (singular values desc, left vectors).
    fn one_sided_jacobi_svd(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
        let (m, n) = a.dim();
        assert!(m <= n);
        // B = A^T (n x m); rotate columns of B until mutually orthogonal.
        let mut b = Array2::zeros((n, m));
        for i in 0..m {
            for j in 0..n {
                b[[j, i]] = a[[i, j]];
            }
        }
        let mut v = Array2::<f64>::eye(m);
        for _sweep in 0..60 {
            let mut off = 0.0f64;
            for p in 0..m {
                for q in (p + 1)..m {
                    let mut app = 0.0;
                    let mut aqq = 0.0;
                    let mut apq = 0.0;
                    for r in 0..n {
                        app += b[[r, p]] * b[[r, p]];
                        aqq += b[[r, q]] * b[[r, q]];
                        apq += b[[r, p]] * b[[r, q]];
                    }
                    off = off.max(apq.abs() / (app * aqq).sqrt().max(1e-300));
                    if apq.abs() < 1e-15 * (app * aqq).sqrt() {
                        continue;
                    }
                    let tau = (aqq - app) / (2.0 * apq);
                    let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    for r in 0..n {
                        let bp = b[[r, p]];
                        let bq = b[[r, q]];
                        b[[r, p]] = c * bp - s * bq;
                        b[[r, q]] = s * bp + c * bq;
                    }
                    for r in 0..m {
                        let vp = v[[r, p]];
                        let vq = v[[r, q]];
                        v[[r, p]] = c * vp - s * vq;
                        v[[r, q]] = s * vp + c * vq;
                    }
                }
            }
            if off < 1e-14 {
                break;
            }
        }
        // column norms are singular values; A = V Sigma U^T so left vectors
        // of A are the accumulated rotations V.
        let mut order: Vec<usize> = (0..m).collect();
        let norms: Vec<f64> = (0..m)
            .map(|j| (0..n).map(|r| b[[r, j]] * b[[r, j]]).sum::<f64>().sqrt())
            .collect();
        order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());
        let sv: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
        let mut left = Array2::zeros((m, m));
        for (col, &src) in order.iter().enumerate() {
            for r in 0..m {
                left[[r, col]] = v[[r, src]];
            }
        }
        (sv, left)
    }

    #[test]
    fn select_band_shapes() {
        let q = random_centered(6, 300, 50);
        let w = data::build_uniform_weights(6).unwrap();
        let p = params(64, 0.5, WindowKind::Hamming, true);
        let basis = compute_spod(&q, &p, &w).unwrap();
        assert_eq!(basis.n_freq(), 33);

        // d = L_r * (#freqs in band); full band at L_r = 10 gives 330 when
        // the basis has >= 10 modes, here checked at this case's own scale
        let l = basis.n_modes();
        let rb = select_band_spod(&basis, l.min(3), 0, 32).unwrap();
        assert_eq!(rb.d(), l.min(3) * 33);
        let rb1 = select_band_spod(&basis, 3, 5, 5).unwrap();
        assert_eq!(rb1.d(), 3);
        assert!(rb1.index.iter().all(|&(_, k)| k == 5));
        // frequency-major order
        let rb2 = select_band_spod(&basis, 2, 3, 4).unwrap();
        assert_eq!(rb2.index, vec![(0, 3), (1, 3), (0, 4), (1, 4)]);
        assert!(matches!(
            select_band_spod(&basis, 3, 7, 5),
            Err(Error::BandOutOfRange { .. })
        ));
        assert!(matches!(
            select_band_spod(&basis, 3, 0, 33),
            Err(Error::BandOutOfRange { .. })
        ));
    }

    #[test]
    fn select_band_pod_ignores_band() {
        let q = random_centered(14, 40, 51);
        let w = data::build_uniform_weights(14).unwrap();
        let basis = compute_pod(&q, &w, 10).unwrap();
        let rb = select_band_pod(&basis, 10).unwrap();
        assert_eq!(rb.d(), 10);
        assert!(rb.columns.iter().all(|z| z.im == 0.0));
    }

    #[test]
    fn basis_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let q = random_centered(5, 200, 60);
        let w = data::build_uniform_weights(5).unwrap();
        let p = params(16, 0.5, WindowKind::Hamming, true);
        let basis = compute_spod(&q, &p, &w).unwrap();
        save_basis(dir.path(), &Basis::Spod(basis.clone()), 0xabcd).unwrap();
        let (loaded, prov) = load_basis(dir.path()).unwrap();
        assert_eq!(prov, 0xabcd);
        match loaded {
            Basis::Spod(lb) => {
                assert_eq!(lb.n_freq(), basis.n_freq());
                for k in 0..lb.n_freq() {
                    assert_eq!(lb.modes[k], basis.modes[k]);
                }
                assert_eq!(lb.eigvals, basis.eigvals);
            }
            _ => panic!("wrong kind"),
        }

        let podb = compute_pod(&q, &w, 4).unwrap();
        let pod_dir = dir.path().join("pod");
        save_basis(&pod_dir, &Basis::Pod(podb.clone()), 0x1).unwrap();
        let (loaded, _) = load_basis(&pod_dir).unwrap();
        match loaded {
            Basis::Pod(lb) => {
                assert_eq!(lb.modes, podb.modes);
            }
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn spod_is_deterministic() {
        let q = random_centered(4, 120, 99);
        let w = data::build_uniform_weights(4).unwrap();
        let p = params(16, 0.5, WindowKind::Hamming, true);
        let a = compute_spod(&q, &p, &w).unwrap();
        let b = compute_spod(&q, &p, &w).unwrap();
        assert_eq!(a.eigvals, b.eigvals);
        for k in 0..a.n_freq() {
            assert_eq!(a.modes[k], b.modes[k]);
        }
    }

    #[test]
    fn odd_n_fft_is_rejected() {
        let p = params(15, 0.0, WindowKind::Boxcar, false);
        assert!(p.validate().is_err());
    }

    #[test]
    fn pod_projection_error_monotone_in_mode_count() {
        let q = random_centered(10, 60, 123);
        let w = data::build_uniform_weights(10).unwrap();
        let basis = compute_pod(&q, &w, 8).unwrap();
        // residual energy after keeping r modes must not increase with r
        let total: f64 = q.values.iter().map(|x| x * x).sum();
        let mut last = f64::INFINITY;
        for r in 1..=8usize {
            let kept: f64 = (0..r).map(|j| basis.eigvals[j]).sum();
            let resid = total - kept;
            assert!(resid <= last + 1e-9 * total);
            last = resid;
        }
    }
}
