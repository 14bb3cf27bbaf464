//! Singular values by one-sided (Hestenes) Jacobi rotations.

const MAX_SWEEPS: usize = 60;

/// Returned when the rotations fail to orthogonalize within the sweep budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoConvergence;

/// Singular values of a row-major `rows x cols` matrix, in descending order.
pub fn singular_values(rows: usize, cols: usize, data: &[f64]) -> Result<Vec<f64>, NoConvergence> {
    assert_eq!(data.len(), rows * cols, "matrix data length");
    // Orthogonalize the shorter dimension: each working vector is a column
    // when rows >= cols, otherwise a row.
    let (count, len) = if rows >= cols {
        (cols, rows)
    } else {
        (rows, cols)
    };
    let mut vecs: Vec<Vec<f64>> = if rows >= cols {
        (0..cols)
            .map(|c| (0..rows).map(|r| data[r * cols + c]).collect())
            .collect()
    } else {
        data.chunks(cols).map(|r| r.to_vec()).collect()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let ortho_tol = len as f64 * f64::EPSILON;
    // Columns whose squared norm is rounding noise relative to the whole
    // matrix carry no rank and are left alone.
    let frob2: f64 = data.iter().map(|v| v * v).sum();
    let negligible = (f64::EPSILON * f64::EPSILON) * frob2;

    let mut converged = count < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for i in 0..count {
            for j in i + 1..count {
                let alpha = dot(&vecs[i], &vecs[i]);
                let beta = dot(&vecs[j], &vecs[j]);
                let gamma = dot(&vecs[i], &vecs[j]);
                if alpha <= negligible
                    || beta <= negligible
                    || gamma.abs() <= ortho_tol * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = vecs.split_at_mut(j);
                let (vi, vj) = (&mut lo[i], &mut hi[0]);
                for k in 0..len {
                    let (a, b) = (vi[k], vj[k]);
                    vi[k] = c * a - s * b;
                    vj[k] = s * a + c * b;
                }
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(NoConvergence);
    }
    let mut sv: Vec<f64> = vecs.iter().map(|v| dot(v, v).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Number of singular values strictly greater than `epsilon`.
pub fn threshold_rank(
    rows: usize,
    cols: usize,
    data: &[f64],
    epsilon: f64,
) -> Result<usize, NoConvergence> {
    Ok(singular_values(rows, cols, data)?
        .into_iter()
        .filter(|&s| s > epsilon)
        .count())
}
