//! Householder QR least squares for small, tall design matrices.

/// Least-squares fit of `y` on the columns of `x` (column-major).
///
/// Returns `None` when a column's residual norm after orthogonalization falls
/// below `rel_tol` times the largest column norm.
pub(crate) fn least_squares(columns: &[Vec<f64>], y: &[f64], rel_tol: f64) -> Option<Vec<f64>> {
    let n = y.len();
    let p = columns.len();
    if p == 0 || n < p || columns.iter().any(|c| c.len() != n) {
        return None;
    }
    let max_norm = columns
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    if max_norm == 0.0 {
        return None;
    }
    let mut a: Vec<Vec<f64>> = columns.to_vec();
    let mut b = y.to_vec();
    let mut diag = vec![0.0; p];
    for k in 0..p {
        let norm = a[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= rel_tol * max_norm {
            return None;
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = a[k][k..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|t| t * t).sum();
        diag[k] = alpha;
        if vnorm2 > 0.0 {
            for col in a.iter_mut().skip(k + 1) {
                let dot: f64 = v.iter().zip(&col[k..]).map(|(vi, ci)| vi * ci).sum();
                let f = 2.0 * dot / vnorm2;
                for (ci, vi) in col[k..].iter_mut().zip(&v) {
                    *ci -= f * vi;
                }
            }
            let dot: f64 = v.iter().zip(&b[k..]).map(|(vi, bi)| vi * bi).sum();
            let f = 2.0 * dot / vnorm2;
            for (bi, vi) in b[k..].iter_mut().zip(&v) {
                *bi -= f * vi;
            }
        }
    }
    let mut coef = vec![0.0; p];
    for k in (0..p).rev() {
        let mut s = b[k];
        for j in k + 1..p {
            s -= a[j][k] * coef[j];
        }
        coef[k] = s / diag[k];
    }
    Some(coef)
}
