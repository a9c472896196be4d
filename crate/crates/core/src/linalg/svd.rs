use crate::error::{invalid, Error, Result};

use super::matrix::{dot, Matrix};

const MAX_SWEEPS: usize = 80;

/// Singular values below `sigma_max * NULL_RELATIVE` are treated as exact
/// zeros when building the left singular vectors.
const NULL_RELATIVE: f64 = 1e-13;

/// Entries of a singular vector smaller than this are skipped when choosing
/// the sign-defining "first nonzero" entry.
const SIGN_EPS: f64 = 1e-12;

/// Thin SVD `W = U · diag(sigma) · Vᵀ` with `k = min(m, n)` components.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdTriple {
    /// `m × k`, left singular vectors as columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// `n × k`, right singular vectors as columns.
    pub v: Matrix,
}

impl SvdTriple {
    pub fn rank_capacity(&self) -> usize {
        self.sigma.len()
    }

    pub fn source_shape(&self) -> (usize, usize) {
        (self.u.rows(), self.v.rows())
    }

    /// Sum of `sigma_i u_i v_iᵀ` over the given component indices, accumulated
    /// in the order supplied.
    pub fn partial_sum(&self, components: &[usize]) -> Matrix {
        let (m, n) = self.source_shape();
        let mut out = Matrix::zeros(m, n);
        for &i in components {
            let s = self.sigma[i];
            if s == 0.0 {
                continue;
            }
            for a in 0..m {
                let coef = s * self.u[(a, i)];
                if coef == 0.0 {
                    continue;
                }
                let row = out.row_mut(a);
                for (b, o) in row.iter_mut().enumerate() {
                    *o += coef * self.v[(b, i)];
                }
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        let all: Vec<usize> = (0..self.sigma.len()).collect();
        self.partial_sum(&all)
    }
}

/// Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
///
/// Singular vector pairs are sign-canonicalised so that the first nonzero
/// entry of every `u_i` is positive.
pub fn svd(w: &Matrix) -> Result<SvdTriple> {
    let (m, n) = w.shape();
    if m == 0 || n == 0 {
        return invalid(format!("svd needs a non-empty matrix, got {m}x{n}"));
    }
    if !w.is_finite() {
        return invalid(format!("svd input {m}x{n} has non-finite entries"));
    }
    let triple = if m >= n {
        jacobi_tall(w)?
    } else {
        let t = jacobi_tall(&w.transpose())?;
        SvdTriple { u: t.v, sigma: t.sigma, v: t.u }
    };
    Ok(canonicalize_signs(triple))
}

/// Works on a matrix with `rows >= cols`, orthogonalising its columns.
fn jacobi_tall(w: &Matrix) -> Result<SvdTriple> {
    let (m, n) = w.shape();
    // Column-major copies: column j lives at [j*m, (j+1)*m).
    let mut a: Vec<f64> = (0..n).flat_map(|j| w.col(j)).collect();
    let mut v: Vec<f64> = vec![0.0; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }
    let tol = f64::EPSILON * m as f64;

    let mut converged = n == 1;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (ap, aq) = column_pair(&mut a, m, p, q);
                let alpha = dot(ap, ap);
                let beta = dot(aq, aq);
                let gamma = dot(ap, aq);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(ap, aq, c, s);
                let (vp, vq) = column_pair(&mut v, n, p, q);
                rotate(vp, vq, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "svd of {m}x{n} matrix did not converge after {MAX_SWEEPS} sweeps"
        )));
    }

    let norms: Vec<f64> = (0..n).map(|j| dot(&a[j * m..(j + 1) * m], &a[j * m..(j + 1) * m]).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).expect("finite norms"));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let sigma_max = sigma[0];
    let mut u = Matrix::zeros(m, n);
    let mut vv = Matrix::zeros(n, n);
    let mut null_cols = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        if s > 0.0 && s > sigma_max * NULL_RELATIVE {
            for r in 0..m {
                u[(r, dst)] = a[src * m + r] / s;
            }
        } else {
            null_cols.push(dst);
        }
        for r in 0..n {
            vv[(r, dst)] = v[src * n + r];
        }
    }
    if !null_cols.is_empty() {
        complete_orthonormal(&mut u, &null_cols);
    }
    Ok(SvdTriple { u, sigma, v: vv })
}

fn column_pair(buf: &mut [f64], len: usize, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (head, tail) = buf.split_at_mut(q * len);
    (&mut head[p * len..(p + 1) * len], &mut tail[..len])
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (xi, yi) in x.iter_mut().zip(y.iter_mut()) {
        let a = *xi;
        let b = *yi;
        *xi = c * a - s * b;
        *yi = s * a + c * b;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every other
/// column, drawing candidates from the standard basis.
fn complete_orthonormal(u: &mut Matrix, targets: &[usize]) {
    let (m, k) = u.shape();
    let mut filled: Vec<bool> = (0..k).map(|c| !targets.contains(&c)).collect();
    let mut basis = 0;
    for &t in targets {
        loop {
            assert!(basis < m, "standard basis exhausted while completing U");
            let mut cand = vec![0.0; m];
            cand[basis] = 1.0;
            basis += 1;
            // Two Gram-Schmidt passes for stability.
            for _ in 0..2 {
                for c in (0..k).filter(|&c| filled[c]) {
                    let col = u.col(c);
                    let proj = dot(&cand, &col);
                    for (x, y) in cand.iter_mut().zip(&col) {
                        *x -= proj * y;
                    }
                }
            }
            let nrm = dot(&cand, &cand).sqrt();
            if nrm > 1e-6 {
                for r in 0..m {
                    u[(r, t)] = cand[r] / nrm;
                }
                filled[t] = true;
                break;
            }
        }
    }
}

fn canonicalize_signs(mut t: SvdTriple) -> SvdTriple {
    let k = t.sigma.len();
    for i in 0..k {
        let lead = (0..t.u.rows()).map(|r| t.u[(r, i)]).find(|x| x.abs() > SIGN_EPS);
        if matches!(lead, Some(x) if x < 0.0) {
            for r in 0..t.u.rows() {
                t.u[(r, i)] = -t.u[(r, i)];
            }
            for r in 0..t.v.rows() {
                t.v[(r, i)] = -t.v[(r, i)];
            }
        }
    }
    t
}
