//! Linear centered kernel alignment between two feature matrices.

use crate::error::{Result, TnasError};

/// ||Y_c^T X_c||_F^2 / (||X_c^T X_c||_F * ||Y_c^T Y_c||_F) with X_c, Y_c
/// column-centered; a similarity in [0, 1].
pub fn linear_cka(x: &[f64], x_dims: (usize, usize), y: &[f64], y_dims: (usize, usize)) -> Result<f64> {
    let (n, d1) = x_dims;
    let (ny, d2) = y_dims;
    if n != ny {
        return Err(TnasError::Config(format!(
            "row counts differ: {n} vs {ny}"
        )));
    }
    if n < 2 {
        return Err(TnasError::Config("need at least 2 rows".into()));
    }
    if x.len() != n * d1 || y.len() != ny * d2 {
        return Err(TnasError::Config("feature buffer size mismatch".into()));
    }
    let xc = center_columns(x, n, d1);
    let yc = center_columns(y, n, d2);

    // ||Y_c^T X_c||_F^2 = sum over (j, k) of (column_j(Y) . column_k(X))^2
    let cross = gram_fro_sq(&yc, d2, &xc, d1, n);
    let xx = gram_fro_sq(&xc, d1, &xc, d1, n).sqrt();
    let yy = gram_fro_sq(&yc, d2, &yc, d2, n).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(TnasError::UndefinedSimilarity(
            "zero-variance features".into(),
        ));
    }
    Ok(cross / (xx * yy))
}

fn center_columns(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut means = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            means[c] += x[r * d + c];
        }
    }
    for m in means.iter_mut() {
        *m /= n as f64;
    }
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        for c in 0..d {
            out[r * d + c] = x[r * d + c] - means[c];
        }
    }
    out
}

/// ||A^T B||_F^2 for column-major interpretation of row-major [n, da], [n, db].
fn gram_fro_sq(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..da {
        for j in 0..db {
            let mut dot = 0.0;
            for r in 0..n {
                dot += a[r * da + i] * b[r * db + j];
            }
            total += dot * dot;
        }
    }
    total
}
