//! Singular value decomposition and the Moore-Penrose pseudo-inverse.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration: columns of the working
//! matrix are rotated pairwise until they are mutually orthogonal, at which
//! point their norms are the singular values. It is slower than
//! Golub-Kahan but small, accurate for tiny singular values, and needs no
//! external LAPACK.

use crate::tensor::{matmul, Result, Tensor, TensorError};

const MAX_SWEEPS: usize = 80;

/// Thin SVD `a = u · diag(s) · vᵀ` with `r = min(m, n)` singular triplets.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m × r`, orthonormal columns.
    pub u: Tensor,
    /// Length `r`, nonnegative, descending.
    pub s: Vec<f64>,
    /// `n × r`, orthonormal columns.
    pub v: Tensor,
}

impl Svd {
    /// Number of singular values above `rtol · σ_max`.
    pub fn rank(&self, rtol: f64) -> usize {
        let cutoff = rtol * self.s.first().copied().unwrap_or(0.0);
        self.s.iter().filter(|&&s| s > cutoff).count()
    }

    /// `u · diag(s) · vᵀ`.
    pub fn reconstruct(&self) -> Result<Tensor> {
        let us = scale_columns(&self.u, &self.s)?;
        matmul(&us, &self.v.transpose()?)
    }
}

pub fn svd(a: &Tensor) -> Result<Svd> {
    let (m, n) = a.dims2()?;
    if !a.is_finite() {
        let index = a.as_slice().iter().position(|v| !v.is_finite()).unwrap_or(0);
        return Err(TensorError::NonFinite { index });
    }
    if m < n {
        let t = svd_tall(&a.transpose()?, n, m)?;
        return Ok(Svd { u: t.v, s: t.s, v: t.u });
    }
    svd_tall(a, m, n)
}

/// SVD of an `m × n` matrix with `m ≥ n`.
fn svd_tall(a: &Tensor, m: usize, n: usize) -> Result<Svd> {
    let src = a.as_slice();
    // column-major working copies
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| src[i * n + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (wp, wq) = (&w[p], &w[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in wp.iter().zip(wq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha.sqrt() * beta.sqrt()) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let sign = if zeta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (zeta.abs() + zeta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(TensorError::SvdNoConvergence { sweeps: MAX_SWEEPS });
    }

    let norms: Vec<f64> = w.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut missing = Vec::new();
    let mut s = Vec::with_capacity(n);
    for (slot, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        if sigma > f64::MIN_POSITIVE {
            u_cols.push(w[j].iter().map(|x| x / sigma).collect());
        } else {
            u_cols.push(vec![0.0; m]);
            missing.push(slot);
        }
    }
    complete_basis(&mut u_cols, &missing, m);

    let mut u = vec![0.0; m * n];
    let mut vt = vec![0.0; n * n];
    for (slot, &j) in order.iter().enumerate() {
        for i in 0..m {
            u[i * n + slot] = u_cols[slot][i];
        }
        for i in 0..n {
            vt[i * n + slot] = v[j][i];
        }
    }
    Ok(Svd {
        u: Tensor::from_raw(crate::tensor::DType::F64, vec![m, n], u)?,
        s,
        v: Tensor::from_raw(crate::tensor::DType::F64, vec![n, n], vt)?,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the zero columns listed in `missing` with unit vectors orthogonal to
/// every other column (Gram-Schmidt against the standard basis, two passes).
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize], m: usize) {
    let mut candidate = 0usize;
    for &slot in missing {
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == slot {
                        continue;
                    }
                    let dot: f64 = c.iter().zip(&e).map(|(a, b)| a * b).sum();
                    for (ei, ci) in e.iter_mut().zip(c) {
                        *ei -= dot * ci;
                    }
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                cols[slot] = e.iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

fn scale_columns(a: &Tensor, s: &[f64]) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let data = a.as_slice().iter().enumerate().map(|(idx, &x)| x * s[idx % n]).collect();
    Tensor::from_raw(crate::tensor::DType::F64, vec![m, n], data)
}

/// Default relative cutoff for [`pinv`]: `max(m, n) · ε_f64`.
pub fn default_rtol(a: &Tensor) -> f64 {
    let shape = a.shape();
    *shape.iter().max().unwrap_or(&1) as f64 * f64::EPSILON
}

/// Pseudo-inverse together with the numerical rank used to build it.
#[derive(Debug, Clone)]
pub struct PseudoInverse {
    pub pinv: Tensor,
    pub rank: usize,
}

/// Moore-Penrose pseudo-inverse via SVD; singular values at or below
/// `rtol · σ_max` are treated as zero. `None` selects [`default_rtol`].
pub fn pinv(a: &Tensor, rtol: Option<f64>) -> Result<Tensor> {
    pinv_with_rank(a, rtol).map(|p| p.pinv)
}

pub fn pinv_with_rank(a: &Tensor, rtol: Option<f64>) -> Result<PseudoInverse> {
    let rtol = rtol.unwrap_or_else(|| default_rtol(a));
    let dec = svd(a)?;
    let rank = dec.rank(rtol);
    let inv_s: Vec<f64> = dec.s.iter().enumerate().map(|(i, &s)| if i < rank { 1.0 / s } else { 0.0 }).collect();
    let v_scaled = scale_columns(&dec.v, &inv_s)?;
    let pinv = matmul(&v_scaled, &dec.u.transpose()?)?;
    Ok(PseudoInverse { pinv, rank })
}

/// Best rank-`rank` factorization `a ≈ b · c` with `b = u·diag(√s)` (`m × rank`)
/// and `c = diag(√s)·vᵀ` (`rank × n`).
pub fn truncated_factors(a: &Tensor, rank: usize) -> Result<(Tensor, Tensor)> {
    let (m, n) = a.dims2()?;
    let dec = svd(a)?;
    let rank = rank.clamp(1, m.min(n));
    let r_full = m.min(n);
    let mut b = vec![0.0; m * rank];
    let mut c = vec![0.0; rank * n];
    for k in 0..rank {
        let root = dec.s[k].sqrt();
        for i in 0..m {
            b[i * rank + k] = dec.u.as_slice()[i * r_full + k] * root;
        }
        for j in 0..n {
            c[k * n + j] = dec.v.as_slice()[j * r_full + k] * root;
        }
    }
    Ok((Tensor::matrix(m, rank, b)?, Tensor::matrix(rank, n, c)?))
}
