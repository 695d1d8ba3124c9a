//! Small dense symmetric solvers for the regression steps.

/// Solve `a x = b` for a symmetric positive semi-definite `a` (k x k,
/// row-major) by Cholesky factorization. A ridge jitter proportional to the
/// mean diagonal is added up front so collinear designs stay solvable; the
/// jitter escalates if the factorization still breaks down numerically.
pub fn solve_spd_jittered(a: &[f64], b: &[f64], k: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * k);
    debug_assert_eq!(b.len(), k);
    let mean_diag = (0..k).map(|i| a[i * k + i]).sum::<f64>() / k.max(1) as f64;
    let base = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut jitter = 1e-8 * base;
    loop {
        let mut m = a.to_vec();
        for i in 0..k {
            m[i * k + i] += jitter;
        }
        if cholesky_factor(&mut m, k) {
            let mut x = substitute(&m, b, k);
            // One refinement step against the unjittered matrix cancels the
            // ridge bias on well-posed systems.
            let mut r = b.to_vec();
            for i in 0..k {
                for j in 0..k {
                    r[i] -= a[i * k + j] * x[j];
                }
            }
            let dx = substitute(&m, &r, k);
            for i in 0..k {
                x[i] += dx[i];
            }
            if x.iter().all(|v| v.is_finite()) {
                return x;
            }
        }
        jitter *= 100.0;
    }
}

/// In-place lower Cholesky; false when the matrix is not numerically PD.
fn cholesky_factor(a: &mut [f64], k: usize) -> bool {
    for j in 0..k {
        let mut d = a[j * k + j];
        for l in 0..j {
            d -= a[j * k + l] * a[j * k + l];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * k + j] = d;
        for i in (j + 1)..k {
            let mut v = a[i * k + j];
            for l in 0..j {
                v -= a[i * k + l] * a[j * k + l];
            }
            a[i * k + j] = v / d;
        }
    }
    true
}

/// Forward + backward substitution with a factored lower triangle.
fn substitute(l: &[f64], b: &[f64], k: usize) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..k {
        for j in 0..i {
            x[i] -= l[i * k + j] * x[j];
        }
        x[i] /= l[i * k + i];
    }
    for i in (0..k).rev() {
        for j in (i + 1)..k {
            x[i] -= l[j * k + i] * x[j];
        }
        x[i] /= l[i * k + i];
    }
    x
}

/// Ordinary least squares of `target` on an intercept plus the given predictor
/// columns, restricted to `rows`. Returns `[intercept, coef_1, ..., coef_k]`.
/// `value_at(row, j)` must yield the current value of predictor `j` at `row`.
pub fn ols_with_intercept<F>(rows: &[usize], n_predictors: usize, value_at: F, target: &[f64]) -> Vec<f64>
where
    F: Fn(usize, usize) -> f64,
{
    let k = n_predictors + 1;
    let mut xtx = vec![0.0; k * k];
    let mut xty = vec![0.0; k];
    let mut row_buf = vec![0.0; k];
    for (t_idx, &row) in rows.iter().enumerate() {
        row_buf[0] = 1.0;
        for j in 0..n_predictors {
            row_buf[j + 1] = value_at(row, j);
        }
        let t = target[t_idx];
        for a in 0..k {
            let ra = row_buf[a];
            xty[a] += ra * t;
            for b in a..k {
                xtx[a * k + b] += ra * row_buf[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            xtx[a * k + b] = xtx[b * k + a];
        }
    }
    solve_spd_jittered(&xtx, &xty, k)
}
