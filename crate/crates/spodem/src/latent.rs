//! Latent coefficients: weighted oblique projection in the time domain,
//! orthogonal projection of block transforms in the frequency domain, and
//! the inverse maps back to the high-dimensional field.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::{SnapshotMatrix, WeightVector};
use crate::decomposition::{BasisKind, PodBasis, ReducedBasis, SpodBasis, WelchParams, WindowKind};
use crate::error::{Error, Result};
use crate::linalg::{self, C64};
use crate::npy;

/// Pseudo-inverse cutoff for the mode Gram matrix, relative to its largest
/// singular value.
pub const TAU_PINV: f64 = 1e-10;

/// Floor for window-sample division in frequency-domain reconstruction,
/// relative to the window maximum.
pub const WINDOW_DIV_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoeffKind {
    SpodTime,
    Pod,
}

/// Latent time series: one row per retained (mode, frequency) column.
#[derive(Debug, Clone)]
pub struct CoeffMatrix {
    /// d x Nt; zero imaginary part when kind = pod.
    pub values: Array2<C64>,
    /// (mode j, frequency k) per row, copied from the generating basis.
    pub index: Vec<(usize, usize)>,
    pub kind: CoeffKind,
}

impl CoeffMatrix {
    pub fn d(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_snapshots(&self) -> usize {
        self.values.ncols()
    }
}

/// Frequency-domain coefficients a_hat[k][j][l] = <phi_kj, q_hat_k^(l)>_W.
#[derive(Debug, Clone)]
pub struct FreqCoeffMatrix {
    /// [n_freq, n_modes, n_blocks]
    pub values: Array3<C64>,
    /// Welch parameters of the ensembles this was projected from.
    pub welch: WelchParams,
}

/// Frequency ensembles tagged with the Welch parameters that produced them,
/// so downstream projections can refuse mismatched inputs.
#[derive(Debug, Clone)]
pub struct FrequencyEnsembles {
    /// per_k[k] is M x L.
    pub per_k: Vec<Array2<C64>>,
    pub welch: WelchParams,
}

impl FrequencyEnsembles {
    pub fn n_blocks(&self) -> usize {
        self.per_k.first().map_or(0, |q| q.ncols())
    }
}

/// Partition, window, transform, and regroup a centered record.
pub fn build_frequency_ensembles(
    q: &SnapshotMatrix,
    p: &WelchParams,
) -> Result<FrequencyEnsembles> {
    let blocks = crate::decomposition::partition_blocks(q, p)?;
    let spectra: Vec<Array2<C64>> = blocks
        .iter()
        .map(|b| crate::decomposition::window_and_fft(b, p))
        .collect::<Result<_>>()?;
    Ok(FrequencyEnsembles {
        per_k: crate::decomposition::assemble_frequency_ensembles(&spectra),
        welch: *p,
    })
}

/// Weighted oblique projection A = (Phi^H W Phi)^+ Phi^H W Q.
///
/// The Gram matrix is inverted through its eigendecomposition with the
/// TAU_PINV relative cutoff. Returns the coefficients and the effective
/// Gram rank; a rank below d is a warning for the caller, not a failure.
pub fn oblique_project(
    rb: &ReducedBasis,
    w: &WeightVector,
    q: &SnapshotMatrix,
) -> Result<(CoeffMatrix, usize)> {
    let qc = linalg::promote_real(&q.values.view());
    let (values, rank) = project_columns(rb, w, &qc)?;
    let kind = match rb.kind {
        BasisKind::Spod => CoeffKind::SpodTime,
        BasisKind::Pod => CoeffKind::Pod,
    };
    Ok((
        CoeffMatrix {
            values,
            index: rb.index.clone(),
            kind,
        },
        rank,
    ))
}

/// Core of the oblique projection over complex snapshot columns.
pub fn project_columns(
    rb: &ReducedBasis,
    w: &WeightVector,
    columns: &Array2<C64>,
) -> Result<(Array2<C64>, usize)> {
    let (m, _nt) = columns.dim();
    if rb.columns.nrows() != m {
        return Err(Error::DimensionMismatch(format!(
            "basis has {} rows, data has {m}",
            rb.columns.nrows()
        )));
    }
    if w.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "weights have {} entries, data has {m} rows",
            w.len()
        )));
    }
    // W Phi, reused for both the Gram and the right-hand side.
    let mut wphi = rb.columns.clone();
    for (i, mut row) in wphi.rows_mut().into_iter().enumerate() {
        let wi = w.w[i];
        row.mapv_inplace(|z| z * wi);
    }
    let phi_h = linalg::herm_t(&rb.columns.view());
    let gram = linalg::zgemm(&phi_h.view(), &wphi.view());
    let wphi_h = linalg::herm_t(&wphi.view());
    let rhs = linalg::zgemm(&wphi_h.view(), &columns.view());
    let (pinv, rank) = linalg::hermitian_pinv(gram.view(), TAU_PINV)?;
    let coeffs = linalg::zgemm(&pinv.view(), &rhs.view());
    Ok((coeffs, rank))
}

/// Q_tilde = Re(Phi_r A) + mean. Returns the reconstruction and the RMS of
/// the discarded imaginary part relative to the real-part RMS.
pub fn reconstruct_time_domain(
    rb: &ReducedBasis,
    a: &CoeffMatrix,
    mean: Option<&Array1<f64>>,
) -> Result<(SnapshotMatrix, f64)> {
    let (m, d) = rb.columns.dim();
    if a.d() != d {
        return Err(Error::DimensionMismatch(format!(
            "coefficients have {} rows, basis has {d} columns",
            a.d()
        )));
    }
    if let Some(mu) = mean {
        if mu.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "mean has {} entries, basis has {m} rows",
                mu.len()
            )));
        }
    }
    let rec = linalg::zgemm(&rb.columns.view(), &a.values.view());
    let nt = rec.ncols();
    let mut values = Array2::zeros((m, nt));
    let mut re_sq = 0.0f64;
    let mut im_sq = 0.0f64;
    for ((i, t), z) in rec.indexed_iter() {
        re_sq += z.re * z.re;
        im_sq += z.im * z.im;
        values[[i, t]] = z.re + mean.map_or(0.0, |mu| mu[i]);
    }
    let imag_rel = if re_sq > 0.0 {
        (im_sq / re_sq).sqrt()
    } else if im_sq > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    let out = SnapshotMatrix {
        values,
        n_space: m,
        n_vars: 1,
        dt: 0.0,
        grid: None,
        mean: None,
    };
    Ok((out, imag_rel))
}

/// Orthogonal per-frequency projection a_hat[k][j][l] = phi_kj^H W q_hat_k^l.
pub fn freq_project(
    b: &SpodBasis,
    ens: &FrequencyEnsembles,
    w: &WeightVector,
) -> Result<FreqCoeffMatrix> {
    if ens.welch != b.welch {
        return Err(Error::ParameterMismatch(format!(
            "ensembles built with {:?}, basis with {:?}",
            ens.welch, b.welch
        )));
    }
    if ens.per_k.len() != b.n_freq() {
        return Err(Error::ParameterMismatch(format!(
            "ensembles carry {} frequencies, basis has {}",
            ens.per_k.len(),
            b.n_freq()
        )));
    }
    let m = b.n_rows();
    let n_modes = b.n_modes();
    let n_freq = b.n_freq();
    let n_blocks = ens.n_blocks();
    let mut values = Array3::zeros((n_freq, n_modes, n_blocks));
    for k in 0..n_freq {
        let qk = &ens.per_k[k];
        if qk.nrows() != m {
            return Err(Error::DimensionMismatch(format!(
                "ensemble {k} has {} rows, basis has {m}",
                qk.nrows()
            )));
        }
        for j in 0..n_modes {
            for l in 0..n_blocks {
                let mut acc = C64::new(0.0, 0.0);
                for i in 0..m {
                    acc += b.modes[k][[i, j]].conj() * w.w[i] * qk[[i, l]];
                }
                values[[k, j, l]] = acc;
            }
        }
    }
    Ok(FreqCoeffMatrix {
        values,
        welch: b.welch,
    })
}

impl FreqCoeffMatrix {
    /// Zero the coefficients of modes past `l_r`.
    pub fn truncate_modes(&self, l_r: usize) -> FreqCoeffMatrix {
        let mut values = self.values.clone();
        let (_, n_modes, _) = values.dim();
        for j in l_r..n_modes {
            values
                .index_axis_mut(ndarray::Axis(1), j)
                .mapv_inplace(|_| C64::new(0.0, 0.0));
        }
        FreqCoeffMatrix {
            values,
            welch: self.welch,
        }
    }
}

/// Rebuild one block in the time domain from its frequency coefficients.
///
/// Frequencies outside `keep` are zeroed; the one-sided spectrum is
/// completed by Hermitian symmetry (DC and Nyquist forced real); the inverse
/// transform undoes the forward 1/n_fft scaling and the window-energy
/// correction, and — when `invert_window` is set and the window is not a
/// boxcar — the window samples themselves, floored at WINDOW_DIV_FLOOR times
/// the window maximum.
pub fn reconstruct_frequency_domain(
    b: &SpodBasis,
    a: &FreqCoeffMatrix,
    keep: &BTreeSet<usize>,
    block: usize,
    invert_window: bool,
) -> Result<Array2<f64>> {
    if a.welch != b.welch {
        return Err(Error::ParameterMismatch(
            "coefficients were projected with different Welch parameters".into(),
        ));
    }
    let (n_freq, n_modes, n_blocks) = a.values.dim();
    if block >= n_blocks {
        return Err(Error::IndexOutOfRange(format!(
            "block {block} of {n_blocks}"
        )));
    }
    if let Some(&bad) = keep.iter().find(|&&k| k >= n_freq) {
        return Err(Error::IndexOutOfRange(format!(
            "frequency id {bad} of {n_freq}"
        )));
    }
    let m = b.n_rows();
    let n_fft = b.welch.n_fft;

    // Per-frequency mode sums.
    let mut sums = Array2::<C64>::zeros((m, n_freq));
    for k in keep {
        for j in 0..n_modes {
            let c = a.values[[*k, j, block]];
            if c.re == 0.0 && c.im == 0.0 {
                continue;
            }
            for i in 0..m {
                sums[[i, *k]] += b.modes[*k][[i, j]] * c;
            }
        }
    }

    // Hermitian completion and inverse transform per row.
    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n_fft);
    let corr = b.welch.window_correction();
    let window = b.welch.window_samples();
    let wmax = window.iter().cloned().fold(0.0f64, f64::max);
    let floor = WINDOW_DIV_FLOOR * wmax;
    let do_invert = invert_window && b.welch.window != WindowKind::Boxcar;

    let mut out = Array2::zeros((m, n_fft));
    let mut buf: Vec<Complex64> = vec![Complex64::new(0.0, 0.0); n_fft];
    for i in 0..m {
        for z in buf.iter_mut() {
            *z = Complex64::new(0.0, 0.0);
        }
        buf[0] = Complex64::new(sums[[i, 0]].re, 0.0);
        let nyq = n_freq - 1; // n_fft even: bin n_fft/2
        buf[nyq] = Complex64::new(sums[[i, nyq]].re, 0.0);
        for k in 1..nyq {
            buf[k] = sums[[i, k]];
            buf[n_fft - k] = sums[[i, k]].conj();
        }
        ifft.process(&mut buf);
        // Forward was DFT * corr / n_fft; rustfft's inverse is unnormalized,
        // so the 1/n_fft cancels and only corr remains.
        for t in 0..n_fft {
            let mut x = buf[t].re / corr;
            if do_invert {
                x /= window[t].max(floor);
            }
            out[[i, t]] = x;
        }
    }
    Ok(out)
}

/// Orthogonal POD projection A = Phi_r^T W Q (real arithmetic).
pub fn pod_project(b: &PodBasis, q: &SnapshotMatrix, l_r: usize) -> Result<CoeffMatrix> {
    if l_r == 0 || l_r > b.n_modes() {
        return Err(Error::DimensionMismatch(format!(
            "L_r={l_r} exceeds available {} modes",
            b.n_modes()
        )));
    }
    let (m, nt) = q.values.dim();
    if b.modes.nrows() != m {
        return Err(Error::DimensionMismatch(format!(
            "modes have {} rows, data has {m}",
            b.modes.nrows()
        )));
    }
    let mut values = Array2::zeros((l_r, nt));
    for j in 0..l_r {
        for t in 0..nt {
            let mut acc = 0.0;
            for i in 0..m {
                acc += b.modes[[i, j]] * b.weights.w[i] * q.values[[i, t]];
            }
            values[[j, t]] = C64::new(acc, 0.0);
        }
    }
    Ok(CoeffMatrix {
        values,
        index: (0..l_r).map(|j| (j, 0)).collect(),
        kind: CoeffKind::Pod,
    })
}

/// Latent dimension over ambient dimension.
pub fn compression_ratio(rb: &ReducedBasis, m: usize) -> f64 {
    rb.d() as f64 / m as f64
}

// ---------------------------------------------------------------------------
// Persistence: values.npy (complex128 [d, Nt]) + index.json.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoeffMeta {
    kind: CoeffKind,
    /// (mode, frequency) per row.
    index: Vec<(usize, usize)>,
    provenance: String,
}

pub fn save_coeffs(dir: &Path, name: &str, a: &CoeffMatrix, provenance: u64) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating coeff dir {}", dir.display()), e))?;
    let flat: Vec<C64> = a.values.iter().cloned().collect();
    npy::write_c128(
        &dir.join(format!("{name}.npy")),
        &flat,
        &[a.d(), a.n_snapshots()],
    )?;
    let meta = CoeffMeta {
        kind: a.kind,
        index: a.index.clone(),
        provenance: format!("{provenance:016x}"),
    };
    let s = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::json("serializing coefficient index", e))?;
    fs::write(dir.join(format!("{name}.index.json")), s)
        .map_err(|e| Error::io(format!("writing {name}.index.json"), e))?;
    Ok(())
}

pub fn load_coeffs(dir: &Path, name: &str) -> Result<(CoeffMatrix, u64)> {
    let npy_path = dir.join(format!("{name}.npy"));
    let (flat, shape) = npy::read_c128(&npy_path)?;
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "{}: expected 2-d coefficients",
            npy_path.display()
        )));
    }
    let values = Array2::from_shape_vec((shape[0], shape[1]), flat)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let meta_path = dir.join(format!("{name}.index.json"));
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| Error::io(format!("reading {}", meta_path.display()), e))?;
    let meta: CoeffMeta = serde_json::from_str(&text)
        .map_err(|e| Error::json(format!("parsing {}", meta_path.display()), e))?;
    if meta.index.len() != values.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{}: index lists {} rows, array has {}",
            meta_path.display(),
            meta.index.len(),
            values.nrows()
        )));
    }
    let provenance = u64::from_str_radix(&meta.provenance, 16)
        .map_err(|_| Error::ConfigValidation("bad provenance hash in coefficient meta".into()))?;
    Ok((
        CoeffMatrix {
            values,
            index: meta.index,
            kind: meta.kind,
        },
        provenance,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{self, SnapshotMatrix};
    use crate::decomposition::{self, WindowKind};
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn welch(n_fft: usize, overlap: f64, window: WindowKind, norm: bool) -> WelchParams {
        WelchParams {
            n_fft,
            overlap_fraction: overlap,
            window,
            normalize_window: norm,
        }
    }

    fn random_centered(m: usize, nt: usize, seed: u64) -> SnapshotMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = Array2::from_shape_fn((m, nt), |_| rng.random::<f64>() * 2.0 - 1.0);
        let q = SnapshotMatrix::new(values, 1, 1.0, None).unwrap();
        data::subtract_temporal_mean(&q).unwrap()
    }

    fn spod_reduced(
        q: &SnapshotMatrix,
        p: &WelchParams,
        w: &WeightVector,
        l_r: usize,
    ) -> (SpodBasis, ReducedBasis) {
        let basis = decomposition::compute_spod(q, p, w).unwrap();
        let n_freq = basis.n_freq();
        let l_r = l_r.min(basis.n_modes());
        let rb = decomposition::select_band_spod(&basis, l_r, 0, n_freq - 1).unwrap();
        (basis, rb)
    }

    #[test]
    fn exact_recovery_of_in_span_complex_data() {
        // q = Phi A0 for random A0 recovered through the pinv route; the
        // band is kept narrow so d < M and the basis stays well conditioned
        let q = random_centered(10, 128, 1);
        let w = data::build_uniform_weights(10).unwrap();
        let p = welch(16, 0.5, WindowKind::Hamming, true);
        let basis = decomposition::compute_spod(&q, &p, &w).unwrap();
        let rb = decomposition::select_band_spod(&basis, 2, 1, 4).unwrap();
        let d = rb.d();
        assert!(d < 10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a0 = Array2::from_shape_fn((d, 9), |_| {
            C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        });
        let data_c = linalg::zgemm(&rb.columns.view(), &a0.view());
        let (a, rank) = project_columns(&rb, &w, &data_c).unwrap();
        let denom: f64 = a0.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let num: f64 = a0
            .iter()
            .zip(a.iter())
            .map(|(x, y)| (x - y).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert_eq!(rank, d);
        assert!(num / denom < 1e-8, "relative recovery error {}", num / denom);
    }

    #[test]
    fn pod_gram_is_identity_so_projection_is_direct() {
        let q = random_centered(12, 60, 3);
        let w = data::build_uniform_weights(12).unwrap();
        let basis = decomposition::compute_pod(&q, &w, 5).unwrap();
        let rb = decomposition::select_band_pod(&basis, 5).unwrap();
        let (a, rank) = oblique_project(&rb, &w, &q).unwrap();
        assert_eq!(rank, 5);
        assert_eq!(a.kind, CoeffKind::Pod);
        // matches Phi^T W Q directly
        let direct = pod_project(&basis, &q, 5).unwrap();
        for (x, y) in a.values.iter().zip(direct.values.iter()) {
            assert!((x - y).norm() < 1e-13 * y.norm().max(1.0));
            assert!(x.im.abs() < 1e-13);
        }
    }

    #[test]
    fn oblique_matches_direct_least_squares_oracle() {
        // random complex basis, random real data, weighted LS via a
        // test-local complex Gaussian elimination
        let (m, d, nt) = (20, 7, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cols = Array2::from_shape_fn((m, d), |_| {
            C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        });
        let rb = ReducedBasis {
            kind: BasisKind::Spod,
            columns: cols.clone(),
            index: (0..d).map(|j| (j, 0)).collect(),
            band: (0, 0),
            l_r: d,
        };
        let wv = Array1::from_shape_fn(m, |_| 0.2 + rng.random::<f64>());
        let w = WeightVector::new(wv.clone()).unwrap();
        let qv = Array2::from_shape_fn((m, nt), |_| rng.random::<f64>() - 0.5);
        let q = SnapshotMatrix::new(qv.clone(), 1, 1.0, None).unwrap();
        let (a, rank) = oblique_project(&rb, &w, &q).unwrap();
        assert_eq!(rank, d);

        // oracle: solve (Phi^H W Phi) x = Phi^H W q by Gaussian elimination
        let mut g = vec![C64::new(0.0, 0.0); d * d];
        for r in 0..d {
            for c in 0..d {
                let mut acc = C64::new(0.0, 0.0);
                for i in 0..m {
                    acc += cols[[i, r]].conj() * wv[i] * cols[[i, c]];
                }
                g[r * d + c] = acc;
            }
        }
        for t in 0..nt {
            let mut rhs = vec![C64::new(0.0, 0.0); d];
            for (r, rhs_r) in rhs.iter_mut().enumerate() {
                for i in 0..m {
                    *rhs_r += cols[[i, r]].conj() * wv[i] * qv[[i, t]];
                }
            }
            let x = gauss_solve(g.clone(), rhs, d);
            for r in 0..d {
                let got = a.values[[r, t]];
                assert!(
                    (got - x[r]).norm() < 1e-8 * x[r].norm().max(1.0),
                    "row {r} t {t}"
                );
            }
        }
    }

    fn gauss_solve(mut a: Vec<C64>, mut b: Vec<C64>, n: usize) -> Vec<C64> {
        for col in 0..n {
            let mut piv = col;
            for r in (col + 1)..n {
                if a[r * n + col].norm() > a[piv * n + col].norm() {
                    piv = r;
                }
            }
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            b.swap(col, piv);
            let diag = a[col * n + col];
            for r in (col + 1)..n {
                let f = a[r * n + col] / diag;
                for c in col..n {
                    let v = a[col * n + c];
                    a[r * n + c] -= f * v;
                }
                let v = b[col];
                b[r] -= f * v;
            }
        }
        let mut x = vec![C64::new(0.0, 0.0); n];
        for r in (0..n).rev() {
            let mut acc = b[r];
            for c in (r + 1)..n {
                acc -= a[r * n + c] * x[c];
            }
            x[r] = acc / a[r * n + r];
        }
        x
    }

    #[test]
    fn zero_coefficients_reconstruct_the_mean() {
        let q = random_centered(6, 64, 9);
        let w = data::build_uniform_weights(6).unwrap();
        let p = welch(16, 0.5, WindowKind::Hamming, true);
        let (_b, rb) = spod_reduced(&q, &p, &w, 2);
        let a = CoeffMatrix {
            values: Array2::zeros((rb.d(), 5)),
            index: rb.index.clone(),
            kind: CoeffKind::SpodTime,
        };
        let mean = Array1::from_shape_fn(6, |i| i as f64);
        let (rec, imag) = reconstruct_time_domain(&rb, &a, Some(&mean)).unwrap();
        assert_eq!(imag, 0.0);
        for t in 0..5 {
            for i in 0..6 {
                assert_eq!(rec.values[[i, t]], mean[i]);
            }
        }
    }

    #[test]
    fn projection_is_idempotent_on_the_span() {
        let q = random_centered(8, 256, 13);
        let w = data::build_uniform_weights(8).unwrap();
        let p = welch(32, 0.5, WindowKind::Hamming, true);
        let (_b, rb) = spod_reduced(&q, &p, &w, 3);
        let (a1, _) = oblique_project(&rb, &w, &q).unwrap();
        let rec = linalg::zgemm(&rb.columns.view(), &a1.values.view());
        let (a2, _) = project_columns(&rb, &w, &rec).unwrap();
        let denom: f64 = a1.values.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let num: f64 = a1
            .values
            .iter()
            .zip(a2.iter())
            .map(|(x, y)| (x - y).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(num / denom < 1e-8, "idempotence residual {}", num / denom);
    }

    #[test]
    fn oblique_equals_orthogonal_for_single_frequency_subbasis() {
        let q = random_centered(10, 256, 15);
        let w = data::build_uniform_weights(10).unwrap();
        let p = welch(32, 0.5, WindowKind::Hamming, true);
        let basis = decomposition::compute_spod(&q, &p, &w).unwrap();
        let rb = decomposition::select_band_spod(&basis, 3, 7, 7).unwrap();
        let (a, _) = oblique_project(&rb, &w, &q).unwrap();
        // orthogonal projection: a = Phi^H W q directly
        for t in 0..q.n_snapshots() {
            for (c, &(j, k)) in rb.index.iter().enumerate() {
                let mut acc = C64::new(0.0, 0.0);
                for i in 0..10 {
                    acc += basis.modes[k][[i, j]].conj() * w.w[i] * q.values[[i, t]];
                }
                assert!(
                    (acc - a.values[[c, t]]).norm() < 1e-10 * acc.norm().max(1.0),
                    "t {t} col {c}"
                );
            }
        }
    }

    #[test]
    fn freq_projection_self_consistency_and_round_trip() {
        let q = random_centered(5, 96, 21);
        let w = data::build_uniform_weights(5).unwrap();
        let p = welch(16, 0.0, WindowKind::Hamming, true);
        let basis = decomposition::compute_spod(&q, &p, &w).unwrap();
        let ens = build_frequency_ensembles(&q, &p).unwrap();
        let a = freq_project(&basis, &ens, &w).unwrap();
        assert_eq!(a.values.dim(), (9, 6, 6));

        // full-band, all-mode reconstruction must reproduce each block
        let keep: BTreeSet<usize> = (0..basis.n_freq()).collect();
        let blocks = decomposition::partition_blocks(&q, &p).unwrap();
        for l in 0..ens.n_blocks() {
            let rec = reconstruct_frequency_domain(&basis, &a, &keep, l, true).unwrap();
            let denom: f64 = blocks[l].iter().map(|x| x * x).sum::<f64>().sqrt();
            let num: f64 = blocks[l]
                .iter()
                .zip(rec.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            assert!(num / denom < 1e-6, "block {l}: {}", num / denom);
        }
    }

    #[test]
    fn freq_projection_of_modes_gives_unit_coefficients() {
        let q = random_centered(7, 128, 23);
        let w = data::build_uniform_weights(7).unwrap();
        let p = welch(16, 0.5, WindowKind::Hamming, true);
        let basis = decomposition::compute_spod(&q, &p, &w).unwrap();
        // hand the basis's own modes in as "ensembles"
        let per_k: Vec<Array2<C64>> = basis.modes.clone();
        let ens = FrequencyEnsembles { per_k, welch: p };
        let a = freq_project(&basis, &ens, &w).unwrap();
        for k in 0..basis.n_freq() {
            for j in 0..basis.n_modes() {
                if basis.is_degenerate(k, j) {
                    continue;
                }
                for jj in 0..basis.n_modes() {
                    if basis.is_degenerate(k, jj) {
                        continue;
                    }
                    let target = if j == jj { 1.0 } else { 0.0 };
                    let got = a.values[[k, jj, j]];
                    assert!(
                        (got - C64::new(target, 0.0)).norm() < 1e-8,
                        "k={k} j={j} jj={jj} got {got}"
                    );
                }
            }
        }
    }

    #[test]
    fn single_mode_residual_energy_matches_eigenvalue_tail() {
        let q = random_centered(6, 256, 29);
        let w = data::build_uniform_weights(6).unwrap();
        let p = welch(16, 0.0, WindowKind::Boxcar, false);
        let basis = decomposition::compute_spod(&q, &p, &w).unwrap();
        let ens = build_frequency_ensembles(&q, &p).unwrap();
        let a = freq_project(&basis, &ens, &w).unwrap();
        let l = ens.n_blocks();
        for k in 0..basis.n_freq() {
            // mean residual energy after removing the leading mode
            let mut resid = 0.0;
            for b in 0..l {
                let coeff = a.values[[k, 0, b]];
                for i in 0..6 {
                    let r = ens.per_k[k][[i, b]] - basis.modes[k][[i, 0]] * coeff;
                    resid += r.norm_sqr();
                }
            }
            resid /= l as f64;
            let tail: f64 = (1..basis.n_modes()).map(|j| basis.eigvals[[k, j]]).sum();
            let scale = basis.eigvals[[k, 0]].max(1e-300);
            assert!(
                (resid - tail).abs() <= 1e-10 * scale,
                "k={k}: resid {resid} vs tail {tail}"
            );
        }
    }

    #[test]
    fn dc_only_band_gives_time_constant_block() {
        let q = random_centered(4, 64, 31);
        let w = data::build_uniform_weights(4).unwrap();
        let p = welch(16, 0.0, WindowKind::Boxcar, false);
        let basis = decomposition::compute_spod(&q, &p, &w).unwrap();
        let ens = build_frequency_ensembles(&q, &p).unwrap();
        let a = freq_project(&basis, &ens, &w).unwrap();
        let keep: BTreeSet<usize> = [0usize].into_iter().collect();
        let rec = reconstruct_frequency_domain(&basis, &a, &keep, 0, true).unwrap();
        for i in 0..4 {
            for t in 1..16 {
                assert!((rec[[i, t]] - rec[[i, 0]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn welch_provenance_mismatch_is_rejected() {
        let q = random_centered(4, 96, 37);
        let w = data::build_uniform_weights(4).unwrap();
        let p1 = welch(16, 0.0, WindowKind::Hamming, true);
        let p2 = welch(16, 0.5, WindowKind::Hamming, true);
        let basis = decomposition::compute_spod(&q, &p1, &w).unwrap();
        let ens = build_frequency_ensembles(&q, &p2).unwrap();
        assert!(matches!(
            freq_project(&basis, &ens, &w),
            Err(Error::ParameterMismatch(_))
        ));
    }

    #[test]
    fn pod_projection_full_rank_round_trip() {
        let q = random_centered(9, 40, 41);
        let w = data::build_uniform_weights(9).unwrap();
        let basis = decomposition::compute_pod(&q, &w, 9).unwrap();
        let a = pod_project(&basis, &q, 9).unwrap();
        // full-rank reconstruction is the identity on the span
        let rb = decomposition::select_band_pod(&basis, 9).unwrap();
        let (rec, imag) = reconstruct_time_domain(&rb, &a, None).unwrap();
        assert_eq!(imag, 0.0);
        let denom: f64 = q.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        let num: f64 = q
            .values
            .iter()
            .zip(rec.values.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(num / denom < 1e-10, "residual {}", num / denom);
    }

    #[test]
    fn compression_ratios() {
        let rb = ReducedBasis {
            kind: BasisKind::Spod,
            columns: Array2::zeros((4, 330)),
            index: (0..330).map(|c| (c % 10, c / 10)).collect(),
            band: (0, 32),
            l_r: 10,
        };
        assert!((compression_ratio(&rb, 1936) - 0.17045).abs() < 1e-4);
        let rb2 = ReducedBasis {
            kind: BasisKind::Pod,
            columns: Array2::zeros((4, 10)),
            index: (0..10).map(|j| (j, 0)).collect(),
            band: (0, 0),
            l_r: 10,
        };
        assert!((compression_ratio(&rb2, 1936) - 0.0051653).abs() < 1e-6);
        assert_eq!(compression_ratio(&rb2, 10), 1.0);
    }

    #[test]
    fn coeffs_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let values = Array2::from_shape_fn((6, 20), |_| {
            C64::new(rng.random::<f64>(), rng.random::<f64>())
        });
        let a = CoeffMatrix {
            values,
            index: (0..6).map(|r| (r % 3, r / 3)).collect(),
            kind: CoeffKind::SpodTime,
        };
        save_coeffs(dir.path(), "train", &a, 0x77).unwrap();
        let (back, prov) = load_coeffs(dir.path(), "train").unwrap();
        assert_eq!(prov, 0x77);
        assert_eq!(back.values, a.values);
        assert_eq!(back.index, a.index);
    }

    #[test]
    fn full_basis_reconstruction_has_tiny_imaginary_residue() {
        // complete span: d >= M, so real data reconstructs exactly
        let q = random_centered(6, 256, 47);
        let w = data::build_uniform_weights(6).unwrap();
        let p = welch(16, 0.5, WindowKind::Hamming, true);
        let basis = decomposition::compute_spod(&q, &p, &w).unwrap();
        let rb = decomposition::select_band_spod(&basis, basis.n_modes(), 0, basis.n_freq() - 1)
            .unwrap();
        let (a, _) = oblique_project(&rb, &w, &q).unwrap();
        let (rec, imag_rel) = reconstruct_time_domain(&rb, &a, None).unwrap();
        assert!(imag_rel < 1e-6, "imaginary residue {imag_rel}");
        let denom: f64 = q.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        let num: f64 = q
            .values
            .iter()
            .zip(rec.values.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(num / denom < 1e-6, "reconstruction residual {}", num / denom);
    }
}
