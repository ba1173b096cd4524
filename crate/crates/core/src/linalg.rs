//! Small dense linear-algebra helpers shared by the analysis modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Row-wise softmax with the row maximum subtracted before exponentiation.
pub fn row_softmax(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}

pub fn singular_values_desc(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().cloned().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// 2-norm condition number from the singular values.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = singular_values_desc(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Symmetric eigendecomposition with eigenpairs sorted by descending eigenvalue.
pub fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Orthogonal projector onto the range of a symmetric matrix, keeping
/// eigen-directions with |λ| > `rel_tol`·max|λ|.
pub fn range_projector(sym: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let (values, vectors) = sorted_symmetric_eigen(sym);
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let n = sym.nrows();
    let mut p = DMatrix::zeros(n, n);
    for (i, &v) in values.iter().enumerate() {
        if scale > 0.0 && v.abs() > rel_tol * scale {
            let col = vectors.column(i);
            p += col * col.transpose();
        }
    }
    p
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

pub fn max_row_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
}

/// Least-squares line `log y = slope·log x + intercept`; pairs with
/// non-positive entries are skipped. `None` with fewer than two usable points.
pub fn log_log_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0 && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Linear-interpolated percentile `q ∈ [0, 1]`; `None` for empty input.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(v[lo] * (1.0 - frac) + v[hi] * frac)
}

pub fn median(values: &[f64]) -> Option<f64> {
    percentile(values, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let l = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 1000.0, 0.0, -1000.0]);
        let a = row_softmax(&l);
        for r in a.row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-15);
        }
        assert!((a[(1, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn log_log_fit_recovers_power_law() {
        let xs = [4.0, 8.0, 16.0, 32.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-1.0)).collect();
        let (slope, intercept) = log_log_fit(&xs, &ys).unwrap();
        assert!((slope + 1.0).abs() < 1e-12);
        assert!((intercept - 3f64.ln()).abs() < 1e-12);
        assert!(log_log_fit(&xs, &[0.0; 4]).is_none());
    }

    #[test]
    fn percentiles() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(median(&v), Some(2.5));
        assert_eq!(percentile(&v, 1.0), Some(4.0));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn eigen_sorted_descending() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        let (v, _) = sorted_symmetric_eigen(&m);
        assert_eq!(v.as_slice(), &[3.0, 1.0]);
    }
}
