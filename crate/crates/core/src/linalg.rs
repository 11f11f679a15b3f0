//! Dense helpers: Lawson–Hanson NNLS in two flavours and a sign-aware least
//! squares front end built on top of it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solve a small symmetric system in place by Gaussian elimination with
/// partial pivoting. Returns `None` when a pivot collapses.
fn solve_small(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for col in 0..n {
        let mut piv = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[piv * n + col].abs() {
                piv = row;
            }
        }
        if a[piv * n + col].abs() <= 1e-13 * scale {
            return None;
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            b.swap(col, piv);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f != 0.0 {
                for c in col..n {
                    a[row * n + c] -= f * a[col * n + c];
                }
                b[row] -= f * b[col];
            }
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for c in col + 1..n {
            s -= a[col * n + c] * b[c];
        }
        b[col] = s / a[col * n + col];
    }
    Some(b)
}

/// Minimize `½ λᵀHλ − cᵀλ` over `λ ≥ 0` for a small positive semidefinite
/// `H` stored row-major. This is Lawson–Hanson run on the normal equations,
/// which is all the projection onto a polyhedral cone needs.
pub fn nnqp(h: &[f64], c: &[f64], max_iter: usize) -> Result<Vec<f64>> {
    let m = c.len();
    let mut x = vec![0.0; m];
    let mut passive = vec![false; m];
    let cscale = c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let hscale = h.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let tol = 1e-14 * hscale * cscale.max(1e-300);
    let mut iter = 0;
    let mut banned = vec![false; m];

    loop {
        // w = c − Hx is the negative gradient
        let w: Vec<f64> = (0..m)
            .map(|i| c[i] - (0..m).map(|j| h[i * m + j] * x[j]).sum::<f64>())
            .collect();
        let mut best = None;
        for i in 0..m {
            if !passive[i] && !banned[i] && w[i] > tol && best.is_none_or(|b: usize| w[i] > w[b]) {
                best = Some(i);
            }
        }
        let Some(t) = best else { break };
        passive[t] = true;

        loop {
            iter += 1;
            if iter > max_iter {
                return Err(Error::NumericalFailure(format!(
                    "projection did not converge in {max_iter} iterations"
                )));
            }
            let idx: Vec<usize> = (0..m).filter(|&i| passive[i]).collect();
            let p = idx.len();
            let sub_h: Vec<f64> = idx
                .iter()
                .flat_map(|&i| idx.iter().map(move |&j| h[i * m + j]))
                .collect();
            let sub_c: Vec<f64> = idx.iter().map(|&i| c[i]).collect();
            let s = match solve_small(sub_h, sub_c, p) {
                Some(s) => s,
                None => {
                    // the newest column is dependent on the passive set
                    passive[t] = false;
                    banned[t] = true;
                    break;
                }
            };
            if s.iter().all(|&v| v > 0.0) {
                for (k, &i) in idx.iter().enumerate() {
                    x[i] = s[k];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (k, &i) in idx.iter().enumerate() {
                if s[k] <= 0.0 {
                    let denom = x[i] - s[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[i] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for (k, &i) in idx.iter().enumerate() {
                x[i] += alpha * (s[k] - x[i]);
                if x[i] <= 1e-15 * (1.0 + x[i].abs()) && s[k] <= 0.0 {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if !passive[t] {
                banned[t] = true;
                break;
            }
        }
    }
    Ok(x)
}

/// Least squares restricted to a column subset, via SVD.
fn lstsq_cols(a: &DMatrix<f64>, cols: &[usize], b: &DVector<f64>) -> DVector<f64> {
    let sub = a.select_columns(cols);
    let svd = sub.svd(true, true);
    let smax = svd.singular_values.max();
    svd.solve(b, 1e-12 * smax.max(1e-300))
        .unwrap_or_else(|_| DVector::zeros(cols.len()))
}

/// Nonnegative least squares `min ‖Ax − b‖, x ≥ 0` (Lawson–Hanson).
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>, max_iter: usize) -> Result<DVector<f64>> {
    let n = a.ncols();
    if a.nrows() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "nnls: {} rows against rhs of length {}",
            a.nrows(),
            b.len()
        )));
    }
    let mut x = DVector::zeros(n);
    if n == 0 {
        return Ok(x);
    }
    let mut passive = vec![false; n];
    let mut banned = vec![false; n];
    let scale = a.amax() * b.amax().max(a.amax());
    let tol = 1e-12 * scale.max(1e-300) * (a.nrows() as f64).sqrt();
    let mut iter = 0;

    loop {
        let w = a.tr_mul(&(b - a * &x));
        let mut best = None;
        for i in 0..n {
            if !passive[i] && !banned[i] && w[i] > tol && best.is_none_or(|k: usize| w[i] > w[k]) {
                best = Some(i);
            }
        }
        let Some(t) = best else { break };
        passive[t] = true;

        loop {
            iter += 1;
            if iter > max_iter {
                return Err(Error::NumericalFailure(format!(
                    "nnls did not converge in {max_iter} iterations"
                )));
            }
            let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let s = lstsq_cols(a, &idx, b);
            if s.iter().all(|&v| v > 0.0) {
                for (k, &i) in idx.iter().enumerate() {
                    x[i] = s[k];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (k, &i) in idx.iter().enumerate() {
                if s[k] <= 0.0 {
                    let denom = x[i] - s[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[i] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for (k, &i) in idx.iter().enumerate() {
                x[i] += alpha * (s[k] - x[i]);
                if s[k] <= 0.0 && x[i] <= 1e-14 * (1.0 + x.amax()) {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if !passive[t] {
                // degenerate entering column, drop it for good
                banned[t] = true;
                break;
            }
        }
    }
    Ok(x)
}

/// How an unknown in [`signed_lstsq`] may vary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sign {
    Free,
    NonNeg,
    NonPos,
    Zero,
    /// Box `[lo, hi]`, enforced through a stiff slack row.
    Between(f64, f64),
}

/// `min ‖Az − b‖` with per-variable sign restrictions. Free variables are
/// split into positive and negative parts and the whole thing goes through
/// [`nnls`]. Returns the solution and the residual norm of the original
/// system.
pub fn signed_lstsq(a: &DMatrix<f64>, b: &DVector<f64>, signs: &[Sign]) -> Result<(DVector<f64>, f64)> {
    let n = a.ncols();
    if signs.len() != n {
        return Err(Error::DimensionMismatch("signed_lstsq: sign list".into()));
    }
    // column map: (original index, multiplier, offset) per nnls column
    let mut cols: Vec<(usize, f64)> = Vec::new();
    let mut boxes: Vec<(usize, f64, f64)> = Vec::new();
    for (i, s) in signs.iter().enumerate() {
        match *s {
            Sign::Free => {
                cols.push((i, 1.0));
                cols.push((i, -1.0));
            }
            Sign::NonNeg => cols.push((i, 1.0)),
            Sign::NonPos => cols.push((i, -1.0)),
            Sign::Zero => {}
            Sign::Between(lo, hi) => boxes.push((i, lo, hi)),
        }
    }
    // box variables: z = lo + s, s ≥ 0, and s + slack = hi − lo through a stiff row
    let nbox = boxes.len();
    let ncols = cols.len() + 2 * nbox;
    let rows = a.nrows() + nbox;
    let mut m = DMatrix::zeros(rows, ncols);
    let mut rhs = DVector::zeros(rows);
    rhs.rows_mut(0, a.nrows()).copy_from(b);
    for (c, &(i, s)) in cols.iter().enumerate() {
        for r in 0..a.nrows() {
            m[(r, c)] = s * a[(r, i)];
        }
    }
    let stiff = 1e6 * a.amax().max(1.0);
    for (k, &(i, lo, hi)) in boxes.iter().enumerate() {
        let c = cols.len() + 2 * k;
        for r in 0..a.nrows() {
            m[(r, c)] = a[(r, i)];
            rhs[r] -= a[(r, i)] * lo;
        }
        let r = a.nrows() + k;
        m[(r, c)] = stiff;
        m[(r, c + 1)] = stiff;
        rhs[r] = stiff * (hi - lo).max(0.0);
    }
    let sol = nnls(&m, &rhs, 100 * ncols.max(10))?;
    let mut z = DVector::zeros(n);
    for (c, &(i, s)) in cols.iter().enumerate() {
        z[i] += s * sol[c];
    }
    for (k, &(i, lo, hi)) in boxes.iter().enumerate() {
        z[i] = (lo + sol[cols.len() + 2 * k]).clamp(lo, hi);
    }
    let res = (a * &z - b).norm();
    Ok((z, res))
}

/// Pseudo-inverse solve with a relative singular value cutoff.
pub fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.ncols() == 0 {
        return DVector::zeros(0);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    svd.solve(b, 1e-12 * smax.max(1e-300))
        .unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

/// Numerical rank with the absolute-plus-relative cutoff used across the crate.
pub fn rank(a: &DMatrix<f64>, cutoff: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.clone().singular_values();
    let smax = sv.max();
    sv.iter().filter(|&&s| s > cutoff * smax.max(1.0)).count()
}

/// Orthonormal basis of the null space of `a` (columns).
pub fn null_space(a: &DMatrix<f64>, ncols: usize) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return DMatrix::identity(ncols, ncols);
    }
    // pad to square so the full right singular basis is available
    let mut sq = DMatrix::zeros(a.nrows().max(ncols), ncols);
    sq.rows_mut(0, a.nrows()).copy_from(a);
    let svd = sq.svd(false, true);
    let vt = svd.v_t.expect("v_t requested");
    let smax = svd.singular_values.max().max(1.0);
    let keep: Vec<usize> = (0..ncols)
        .filter(|&i| svd.singular_values[i] <= 1e-10 * smax)
        .collect();
    let mut out = DMatrix::zeros(ncols, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        out.set_column(c, &vt.row(i).transpose());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nnls_matches_hand_solution() {
        // columns e1, e2, b = (1, -1): best is x = (1, 0)
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, -1.0]);
        let x = nnls(&a, &b, 100).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && x[1] == 0.0);
    }

    #[test]
    fn nnls_kkt_on_random_problem() {
        let a = DMatrix::from_fn(6, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + 0.1 * j as f64);
        let b = DVector::from_fn(6, |i, _| (i as f64).sin());
        let x = nnls(&a, &b, 400).unwrap();
        let g = a.tr_mul(&(&a * &x - &b));
        for i in 0..4 {
            assert!(x[i] >= 0.0);
            assert!(g[i] >= -1e-10);
            assert!((x[i] * g[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn nnqp_agrees_with_nnls() {
        let g = DMatrix::from_row_slice(3, 2, &[1.0, -1.0, 0.0, 1.0, 1.0, 1.0]);
        let y = DVector::from_vec(vec![2.0, 0.5]);
        let h = &g * g.transpose();
        let c = &g * &y;
        let lam = nnqp(h.as_slice(), c.as_slice(), 300).unwrap();
        // column-major storage is fine since h is symmetric
        let ref_lam = nnls(&g.transpose(), &y, 300).unwrap();
        let lhs = g.transpose() * DVector::from_vec(lam);
        let rhs = g.transpose() * ref_lam;
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn signed_lstsq_respects_boxes() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_vec(vec![5.0]);
        let (z, _) = signed_lstsq(&a, &b, &[Sign::Between(-1.0, 1.0), Sign::Zero]).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-9);
        let (z, r) = signed_lstsq(&a, &b, &[Sign::NonPos, Sign::Free]).unwrap();
        assert!(r < 1e-10 && z[0] <= 0.0);
    }

    #[test]
    fn null_space_is_orthogonal() {
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -1.0]);
        let ns = null_space(&a, 3);
        assert_eq!(ns.ncols(), 2);
        assert!((&a * &ns).amax() < 1e-12);
    }
}
