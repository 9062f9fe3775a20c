//! Dense linear algebra kernels: Jacobi eigensolvers for Hermitian and real
//! symmetric matrices, a Hermitian pseudo-inverse, and complex GEMM helpers.
//!
//! Cyclic Jacobi is used deliberately: it is unconditionally stable, it is
//! bit-deterministic for identical inputs, and the eigenproblems in this
//! pipeline are small (the block count L per frequency, or the snapshot
//! count of the training span).

use ndarray::{Array1, Array2, ArrayView2};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

const MAX_SWEEPS: usize = 64;

/// Eigendecomposition of a Hermitian matrix, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct HermEigen {
    pub eigvals: Array1<f64>,
    /// Unitary eigenvector matrix, column j pairs with `eigvals[j]`.
    pub vecs: Array2<C64>,
}

/// Eigendecomposition of a real symmetric matrix, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub eigvals: Array1<f64>,
    pub vecs: Array2<f64>,
}

/// Cyclic Jacobi eigensolver for a Hermitian matrix.
///
/// The input is symmetrized as (A + A^H)/2 before iteration, so mild
/// asymmetry from accumulated roundoff is tolerated.
pub fn hermitian_eigen(a: ArrayView2<'_, C64>) -> Result<HermEigen> {
    let n = check_square(&a)?;
    if n == 0 {
        return Ok(HermEigen {
            eigvals: Array1::zeros(0),
            vecs: Array2::zeros((0, 0)),
        });
    }

    // Row-major working copies.
    let mut m: Vec<C64> = vec![C64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (a[[i, j]] + a[[j, i]].conj());
        }
    }
    let mut v: Vec<C64> = vec![C64::new(0.0, 0.0); n * n];
    for i in 0..n {
        v[i * n + i] = C64::new(1.0, 0.0);
    }

    let norm: f64 = m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let tol = 1e-14 * norm.max(f64::MIN_POSITIVE);

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut max_off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                let r = apq.norm();
                max_off = max_off.max(r);
                if r <= tol {
                    continue;
                }
                // Factor out the phase so the 2x2 block becomes real
                // symmetric, then apply the classic Jacobi rotation.
                let phase = apq / r; // e^{i phi}
                let app = m[p * n + p].re;
                let aqq = m[q * n + q].re;
                let theta = (aqq - app) / (2.0 * r);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Plane transform U restricted to (p,q):
                //   U = [[c, s], [-s*conj(phase_bar)...]] built from
                //   D = diag(1, conj(phase)) and the real rotation.
                let u_pp = C64::new(c, 0.0);
                let u_pq = C64::new(s, 0.0);
                let u_qp = -s * phase.conj();
                let u_qq = c * phase.conj();

                // A <- U^H A U; update columns p and q for every row.
                for i in 0..n {
                    let aip = m[i * n + p];
                    let aiq = m[i * n + q];
                    m[i * n + p] = aip * u_pp + aiq * u_qp;
                    m[i * n + q] = aip * u_pq + aiq * u_qq;
                }
                // Rows p and q.
                for j in 0..n {
                    let apj = m[p * n + j];
                    let aqj = m[q * n + j];
                    m[p * n + j] = u_pp.conj() * apj + u_qp.conj() * aqj;
                    m[q * n + j] = u_pq.conj() * apj + u_qq.conj() * aqj;
                }
                // Pin the annihilated pair and keep the diagonal real.
                m[p * n + q] = C64::new(0.0, 0.0);
                m[q * n + p] = C64::new(0.0, 0.0);
                m[p * n + p] = C64::new(m[p * n + p].re, 0.0);
                m[q * n + q] = C64::new(m[q * n + q].re, 0.0);

                // V <- V U.
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = vip * u_pp + viq * u_qp;
                    v[i * n + q] = vip * u_pq + viq * u_qq;
                }
            }
        }
        if max_off <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::EigensolveFailure {
            n,
            sweeps: MAX_SWEEPS,
        });
    }

    let mut idx: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m[i * n + i].re).collect();
    idx.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());

    let eigvals = Array1::from_iter(idx.iter().map(|&i| diag[i]));
    let mut vecs = Array2::zeros((n, n));
    for (col, &src) in idx.iter().enumerate() {
        for row in 0..n {
            vecs[[row, col]] = v[row * n + src];
        }
    }
    Ok(HermEigen { eigvals, vecs })
}

/// Cyclic Jacobi eigensolver for a real symmetric matrix.
pub fn symmetric_eigen(a: ArrayView2<'_, f64>) -> Result<SymEigen> {
    let n = check_square(&a)?;
    if n == 0 {
        return Ok(SymEigen {
            eigvals: Array1::zeros(0),
            vecs: Array2::zeros((0, 0)),
        });
    }

    let mut m: Vec<f64> = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (a[[i, j]] + a[[j, i]]);
        }
    }
    let mut v: Vec<f64> = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let norm: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * norm.max(f64::MIN_POSITIVE);

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut max_off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                let r = apq.abs();
                max_off = max_off.max(r);
                if r <= tol {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for i in 0..n {
                    let aip = m[i * n + p];
                    let aiq = m[i * n + q];
                    m[i * n + p] = c * aip - s * aiq;
                    m[i * n + q] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = m[p * n + j];
                    let aqj = m[q * n + j];
                    m[p * n + j] = c * apj - s * aqj;
                    m[q * n + j] = s * apj + c * aqj;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;

                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
        if max_off <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::EigensolveFailure {
            n,
            sweeps: MAX_SWEEPS,
        });
    }

    let mut idx: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    idx.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());

    let eigvals = Array1::from_iter(idx.iter().map(|&i| diag[i]));
    let mut vecs = Array2::zeros((n, n));
    for (col, &src) in idx.iter().enumerate() {
        for row in 0..n {
            vecs[[row, col]] = v[row * n + src];
        }
    }
    Ok(SymEigen { eigvals, vecs })
}

/// Moore-Penrose pseudo-inverse of a Hermitian PSD matrix via its
/// eigendecomposition (which, for Hermitian PSD input, is its SVD).
///
/// Eigenvalues at or below `rel_cutoff * lambda_max` are treated as zero.
/// Returns the pseudo-inverse and the effective rank.
pub fn hermitian_pinv(g: ArrayView2<'_, C64>, rel_cutoff: f64) -> Result<(Array2<C64>, usize)> {
    let n = check_square(&g)?;
    let eig = hermitian_eigen(g)?;
    let lambda_max = eig.eigvals.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = rel_cutoff * lambda_max;
    let mut rank = 0usize;
    let inv_vals: Vec<f64> = eig
        .eigvals
        .iter()
        .map(|&l| {
            if l > cutoff && l > 0.0 {
                rank += 1;
                1.0 / l
            } else {
                0.0
            }
        })
        .collect();

    // pinv = V diag(inv_vals) V^H
    let mut scaled = eig.vecs.clone();
    for (j, &w) in inv_vals.iter().enumerate() {
        for i in 0..n {
            scaled[[i, j]] *= w;
        }
    }
    let vh = herm_t(&eig.vecs.view());
    let pinv = zgemm(&scaled.view(), &vh.view());
    Ok((pinv, rank))
}

/// Conjugate transpose, materialized.
pub fn herm_t(a: &ArrayView2<'_, C64>) -> Array2<C64> {
    let (r, c) = a.dim();
    let mut out = Array2::zeros((c, r));
    for i in 0..r {
        for j in 0..c {
            out[[j, i]] = a[[i, j]].conj();
        }
    }
    out
}

/// Row-major blocked complex matrix product.
///
/// ndarray's generic fallback for `Complex64` is slow without a BLAS
/// backend; this ikj kernel keeps the big reconstruction products
/// (M x d times d x Nt) in the seconds range.
pub fn zgemm(a: &ArrayView2<'_, C64>, b: &ArrayView2<'_, C64>) -> Array2<C64> {
    let (m, ka) = a.dim();
    let (kb, n) = b.dim();
    assert_eq!(ka, kb, "zgemm: inner dimensions differ");
    let mut c = Array2::<C64>::zeros((m, n));
    let a_s = a.to_owned();
    let b_s = b.to_owned();
    let a_slice = a_s.as_slice().unwrap();
    let b_slice = b_s.as_slice().unwrap();
    let c_slice = c.as_slice_mut().unwrap();
    for i in 0..m {
        let crow = &mut c_slice[i * n..(i + 1) * n];
        for k in 0..ka {
            let aik = a_slice[i * ka + k];
            if aik.re == 0.0 && aik.im == 0.0 {
                continue;
            }
            let brow = &b_slice[k * n..(k + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

/// Complex product of a real matrix (promoted) with a complex matrix.
pub fn promote_real(a: &ArrayView2<'_, f64>) -> Array2<C64> {
    a.mapv(|x| C64::new(x, 0.0))
}

fn check_square<T>(a: &ArrayView2<'_, T>) -> Result<usize> {
    let (r, c) = a.dim();
    if r != c {
        return Err(Error::DimensionMismatch(format!(
            "expected square matrix, got {r}x{c}"
        )));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    fn random_hermitian(n: usize, seed: u64) -> Array2<C64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Array2::<C64>::zeros((n, n));
        for i in 0..n {
            for j in i..n {
                let re: f64 = rng.random::<f64>() - 0.5;
                let im: f64 = if i == j { 0.0 } else { rng.random::<f64>() - 0.5 };
                a[[i, j]] = C64::new(re, im);
                a[[j, i]] = C64::new(re, -im);
            }
        }
        a
    }

    fn eig_residual(a: &Array2<C64>, e: &HermEigen) -> f64 {
        // max_j ||A v_j - lambda_j v_j||
        let n = a.nrows();
        let mut worst = 0.0f64;
        for j in 0..n {
            let mut res = 0.0f64;
            for i in 0..n {
                let mut av = C64::new(0.0, 0.0);
                for k in 0..n {
                    av += a[[i, k]] * e.vecs[[k, j]];
                }
                res += (av - e.eigvals[j] * e.vecs[[i, j]]).norm_sqr();
            }
            worst = worst.max(res.sqrt());
        }
        worst
    }

    #[test]
    fn hermitian_eigen_2x2_analytic() {
        // [[2, i], [-i, 2]] has eigenvalues 3 and 1.
        let a = array![
            [C64::new(2.0, 0.0), C64::new(0.0, 1.0)],
            [C64::new(0.0, -1.0), C64::new(2.0, 0.0)]
        ];
        let e = hermitian_eigen(a.view()).unwrap();
        assert!((e.eigvals[0] - 3.0).abs() < 1e-12);
        assert!((e.eigvals[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hermitian_eigen_residual_and_orthonormality() {
        for seed in 0..4u64 {
            let n = 17;
            let a = random_hermitian(n, seed);
            let e = hermitian_eigen(a.view()).unwrap();
            assert!(eig_residual(&a, &e) < 1e-11, "seed {seed}");
            // V^H V = I
            let vh = herm_t(&e.vecs.view());
            let g = zgemm(&vh.view(), &e.vecs.view());
            for i in 0..n {
                for j in 0..n {
                    let target = if i == j { 1.0 } else { 0.0 };
                    assert!((g[[i, j]] - C64::new(target, 0.0)).norm() < 1e-12);
                }
            }
            // trace preserved
            let tr_a: f64 = (0..n).map(|i| a[[i, i]].re).sum();
            let tr_l: f64 = e.eigvals.sum();
            assert!((tr_a - tr_l).abs() < 1e-10);
        }
    }

    #[test]
    fn symmetric_eigen_matches_hermitian_on_real_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 12;
        let mut a = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in i..n {
                let x: f64 = rng.random::<f64>() - 0.5;
                a[[i, j]] = x;
                a[[j, i]] = x;
            }
        }
        let se = symmetric_eigen(a.view()).unwrap();
        let he = hermitian_eigen(promote_real(&a.view()).view()).unwrap();
        for j in 0..n {
            assert!((se.eigvals[j] - he.eigvals[j]).abs() < 1e-11);
        }
    }

    #[test]
    fn pinv_recovers_inverse_on_well_conditioned_input() {
        let n = 9;
        let b = random_hermitian(n, 42);
        // G = B^H B + I is Hermitian positive definite.
        let bh = herm_t(&b.view());
        let mut g = zgemm(&bh.view(), &b.view());
        for i in 0..n {
            g[[i, i]] += C64::new(1.0, 0.0);
        }
        let (pinv, rank) = hermitian_pinv(g.view(), 1e-10).unwrap();
        assert_eq!(rank, n);
        let prod = zgemm(&pinv.view(), &g.view());
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((prod[[i, j]] - C64::new(target, 0.0)).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn pinv_rank_deficient_reports_effective_rank() {
        // G = v v^H has rank 1.
        let n = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<C64> = (0..n)
            .map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        let mut g = Array2::<C64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                g[[i, j]] = v[i] * v[j].conj();
            }
        }
        let (pinv, rank) = hermitian_pinv(g.view(), 1e-10).unwrap();
        assert_eq!(rank, 1);
        // pinv G pinv = pinv for a valid pseudo-inverse.
        let t = zgemm(&pinv.view(), &g.view());
        let t2 = zgemm(&t.view(), &pinv.view());
        for i in 0..n {
            for j in 0..n {
                assert!((t2[[i, j]] - pinv[[i, j]]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn zgemm_matches_manual_small_case() {
        let a = array![
            [C64::new(1.0, 1.0), C64::new(2.0, 0.0)],
            [C64::new(0.0, -1.0), C64::new(1.0, 0.0)]
        ];
        let b = array![
            [C64::new(1.0, 0.0), C64::new(0.0, 2.0)],
            [C64::new(3.0, 0.0), C64::new(1.0, -1.0)]
        ];
        let c = zgemm(&a.view(), &b.view());
        // c[0,0] = (1+i)*1 + 2*3 = 7+i
        assert!((c[[0, 0]] - C64::new(7.0, 1.0)).norm() < 1e-14);
        // c[0,1] = (1+i)*2i + 2*(1-i) = (2i-2) + (2-2i) = 0
        assert!(c[[0, 1]].norm() < 1e-14);
    }
}
