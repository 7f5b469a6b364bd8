//! Thin SVD via Householder QR followed by one-sided Jacobi on the triangular
//! factor, plus best rank-k truncation.
//!
//! Output conventions:
//! - singular values sorted non-increasing, stable with respect to column order;
//! - the largest-magnitude entry of every `u` column is non-negative (first such
//!   entry on ties), with the matching `v` column flipped alongside.

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Off-diagonal convergence threshold, relative to the column norms.
pub const JACOBI_TOL: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 60;

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// m × p, orthonormal columns.
    pub u: Tensor,
    /// length p, non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// n × p, orthonormal columns.
    pub v: Tensor,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Keep the leading `k` triplets.
    pub fn truncate(&self, k: usize) -> Result<SvdResult> {
        let p = self.rank();
        if k == 0 || k > p {
            return invalid(format!("truncation rank {k} outside 1..={p}"));
        }
        Ok(SvdResult {
            u: leading_columns(&self.u, k),
            sigma: self.sigma[..k].to_vec(),
            v: leading_columns(&self.v, k),
        })
    }

    /// `u · diag(sigma) · vᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        let (m, p) = self.u.dims2().expect("u is a matrix");
        let (n, _) = self.v.dims2().expect("v is a matrix");
        let mut us = self.u.clone();
        for row in us.data_mut().chunks_mut(p) {
            for (x, s) in row.iter_mut().zip(&self.sigma) {
                *x *= s;
            }
        }
        let mut out = vec![0.0; m * n];
        crate::tensor::gemm(m, p, n, 1.0, us.data(), false, self.v.data(), true, 0.0, &mut out);
        Tensor::new(vec![m, n], out).expect("reconstruction shape")
    }

    /// Sum of squared singular values past the leading `k`.
    pub fn tail_energy(&self, k: usize) -> f64 {
        self.sigma.iter().skip(k).map(|s| s * s).sum()
    }
}

/// Best rank-`k` approximation of `m` (Eckart–Young).
pub fn truncate(s: &SvdResult, k: usize) -> Result<SvdResult> {
    s.truncate(k)
}

pub fn leading_columns(t: &Tensor, k: usize) -> Tensor {
    let (rows, cols) = t.dims2().expect("matrix");
    let k = k.min(cols);
    let data = t
        .data()
        .chunks(cols)
        .flat_map(|r| r[..k].iter().copied())
        .collect();
    Tensor::new(vec![rows, k], data).expect("column slice")
}

/// First `k` columns of the orthonormal `t`; when `k` exceeds its width the
/// basis is extended to `k` orthonormal columns by Gram-Schmidt on unit vectors.
pub fn orthonormal_columns(t: &Tensor, k: usize) -> Result<Tensor> {
    let (rows, cols) = t.dims2()?;
    if k > rows {
        return invalid(format!("cannot build {k} orthonormal columns in dimension {rows}"));
    }
    if k <= cols {
        return Ok(leading_columns(t, k));
    }
    let mut basis: Vec<Vec<f64>> = (0..k)
        .map(|j| if j < cols { (0..rows).map(|i| t.data()[i * cols + j]).collect() } else { Vec::new() })
        .collect();
    let missing: Vec<usize> = (cols..k).collect();
    complete_basis(&mut basis, &missing, rows);
    Ok(Tensor::from_fn(&[rows, k], |ix| basis[ix[1]][ix[0]]))
}

pub fn svd(m: &Tensor) -> Result<SvdResult> {
    let (rows, cols) = match m.shape() {
        [r, c] => (*r, *c),
        s => {
            return Err(Error::Shape(format!(
                "svd needs a 2-d matrix, got shape {:?}",
                s
            )))
        }
    };
    if m.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("svd input contains non-finite values".into()));
    }
    let mut res = if rows >= cols {
        svd_tall(m.data(), rows, cols)?
    } else {
        let t = m.transpose()?;
        let (u, sigma, v) = {
            let r = svd_tall(t.data(), cols, rows)?;
            (r.v, r.sigma, r.u)
        };
        SvdResult { u, sigma, v }
    };
    sort_and_fix_signs(&mut res);
    Ok(res)
}

/// Column-major scratch matrix.
struct ColMat {
    rows: usize,
    cols: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// SVD of a row-major `m × n` buffer with `m ≥ n`.
fn svd_tall(a: &[f64], m: usize, n: usize) -> Result<SvdResult> {
    // Householder QR: columns of `work` hold the reflected matrix.
    let mut work = ColMat {
        rows: m,
        cols: (0..n)
            .map(|j| (0..m).map(|i| a[i * n + j]).collect())
            .collect(),
    };
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let x = &work.cols[k][k..];
        let norm = dot(x, x).sqrt();
        let mut v = x.to_vec();
        if norm > 0.0 {
            let alpha = if v[0] >= 0.0 { -norm } else { norm };
            v[0] -= alpha;
            let vnorm = dot(&v, &v).sqrt();
            if vnorm > 0.0 {
                v.iter_mut().for_each(|e| *e /= vnorm);
            }
        } else {
            v.iter_mut().for_each(|e| *e = 0.0);
        }
        for j in k..n {
            let col = &mut work.cols[j][k..];
            let d = 2.0 * dot(&v, col);
            if d != 0.0 {
                for (c, vi) in col.iter_mut().zip(&v) {
                    *c -= d * vi;
                }
            }
        }
        reflectors.push(v);
    }
    // R (n × n, upper triangular) as columns.
    let mut r = ColMat {
        rows: n,
        cols: (0..n)
            .map(|j| (0..n).map(|i| if i <= j { work.cols[j][i] } else { 0.0 }).collect())
            .collect(),
    };
    drop(work);

    let mut v = ColMat {
        rows: n,
        cols: (0..n)
            .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
            .collect(),
    };
    // Columns below this squared norm are numerically zero and left unrotated.
    let total: f64 = r.cols.iter().map(|c| dot(c, c)).sum();
    let negligible = total * (f64::EPSILON * f64::EPSILON);
    let mut converged = false;
    let mut last_off = 0.0f64;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        last_off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&r.cols[p], &r.cols[p]);
                let beta = dot(&r.cols[q], &r.cols[q]);
                let gamma = dot(&r.cols[p], &r.cols[q]);
                if gamma == 0.0 || alpha <= negligible || beta <= negligible {
                    continue;
                }
                let scale = (alpha * beta).sqrt();
                let off = gamma.abs() / scale;
                last_off = last_off.max(off);
                if off <= JACOBI_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut r, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi SVD did not converge in {MAX_SWEEPS} sweeps (residual off-diagonal {last_off:.3e})"
        )));
    }

    let sigma: Vec<f64> = r.cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let smax = sigma.iter().cloned().fold(0.0, f64::max);
    let null_tol = smax * 1e-14;
    let mut ur: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut null_cols = Vec::new();
    for j in 0..n {
        if sigma[j] > null_tol && sigma[j] > 0.0 {
            ur[j] = r.cols[j].iter().map(|x| x / sigma[j]).collect();
        } else {
            null_cols.push(j);
        }
    }
    complete_basis(&mut ur, &null_cols, n);

    // U = Q · U_r, applying the reflectors in reverse to each column padded to length m.
    let mut u_cols: Vec<Vec<f64>> = ur
        .into_iter()
        .map(|c| {
            let mut full = c;
            full.resize(m, 0.0);
            for (k, h) in reflectors.iter().enumerate().rev() {
                let seg = &mut full[k..];
                let d = 2.0 * dot(h, seg);
                if d != 0.0 {
                    for (x, hi) in seg.iter_mut().zip(h) {
                        *x -= d * hi;
                    }
                }
            }
            full
        })
        .collect();
    let _ = r.rows;

    let mut u = Tensor::zeros(&[m, n]);
    for (j, col) in u_cols.iter_mut().enumerate() {
        for (i, x) in col.iter().enumerate() {
            u.data_mut()[i * n + j] = *x;
        }
    }
    let mut vt = Tensor::zeros(&[n, n]);
    for (j, col) in v.cols.iter().enumerate() {
        for (i, x) in col.iter().enumerate().take(v.rows) {
            vt.data_mut()[i * n + j] = *x;
        }
    }
    Ok(SvdResult { u, sigma, v: vt })
}

fn rotate(mat: &mut ColMat, p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = mat.cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fill the listed empty columns with unit vectors orthogonal to the rest.
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize], n: usize) {
    let mut candidate = 0usize;
    for &j in missing {
        loop {
            assert!(candidate < n, "basis completion ran out of candidates");
            let mut e = vec![0.0; n];
            e[candidate] = 1.0;
            candidate += 1;
            // two passes of Gram-Schmidt for stability
            for _ in 0..2 {
                for c in cols.iter().filter(|c| !c.is_empty()) {
                    let d = dot(c, &e);
                    for (x, ci) in e.iter_mut().zip(c) {
                        *x -= d * ci;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-8 {
                e.iter_mut().for_each(|x| *x /= norm);
                cols[j] = e;
                break;
            }
        }
    }
}

fn sort_and_fix_signs(res: &mut SvdResult) {
    let p = res.sigma.len();
    let mut order: Vec<usize> = (0..p).collect();
    // stable: equal values keep their column order
    order.sort_by(|&a, &b| res.sigma[b].partial_cmp(&res.sigma[a]).expect("finite sigma"));
    let (m, _) = res.u.dims2().expect("u");
    let (n, _) = res.v.dims2().expect("v");
    let mut u = Tensor::zeros(&[m, p]);
    let mut v = Tensor::zeros(&[n, p]);
    let mut sigma = Vec::with_capacity(p);
    for (dst, &src) in order.iter().enumerate() {
        sigma.push(res.sigma[src]);
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..m {
            let x = res.u.data()[i * p + src];
            if x.abs() > best {
                best = x.abs();
                sign = if x < 0.0 { -1.0 } else { 1.0 };
            }
        }
        for i in 0..m {
            u.data_mut()[i * p + dst] = sign * res.u.data()[i * p + src];
        }
        for i in 0..n {
            v.data_mut()[i * p + dst] = sign * res.v.data()[i * p + src];
        }
    }
    res.u = u;
    res.v = v;
    res.sigma = sigma;
}
