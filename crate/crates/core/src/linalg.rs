//! Small dense linear-algebra helpers shared by the analysis modules.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Dense solve `A x = b` by LU with partial pivoting and one refinement step.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let lu = a.clone().lu();
    let mut x = lu
        .solve(b)
        .ok_or_else(|| Error::SolverSingular("LU factorization is singular".into()))?;
    let residual = b - a * &x;
    if let Some(dx) = lu.solve(&residual) {
        x += dx;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SolverSingular(
            "solution has non-finite entries".into(),
        ));
    }
    Ok(x)
}

/// True iff the directed graph with an edge `i -> j` whenever `edge(i, j)` is strongly connected.
pub fn strongly_connected<F: Fn(usize, usize) -> bool>(n: usize, edge: F) -> bool {
    if n <= 1 {
        return true;
    }
    let reach = |forward: bool| {
        let mut seen = alloc::vec![false; n];
        let mut stack = alloc::vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let linked = if forward { edge(i, j) } else { edge(j, i) };
                if i != j && linked && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

/// Stationary law of a generator given as a row-major `n x n` slice.
///
/// Solves `π Q = 0` with one balance equation replaced by `Σ π = 1`.
pub fn stationary_dense(q: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(j, i)] = q[i * n + j];
        }
    }
    for i in 0..n {
        a[(n - 1, i)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let x = solve(&a, &b)?;
    let mut pi: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = pi.iter().sum();
    if !(total > 0.0) {
        return Err(Error::SolverSingular(
            "stationary solve produced zero mass".into(),
        ));
    }
    for p in &mut pi {
        *p /= total;
    }
    Ok(pi)
}

/// Grassmann–Taksar–Heyman elimination for the stationary law of a generator.
///
/// Works with off-diagonal entries only (no subtractions), which keeps small
/// tail probabilities accurate to relative precision.
pub fn gth_stationary(q: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut a = q.to_vec();
    for i in 0..n {
        a[i * n + i] = 0.0;
    }
    let mut scale = alloc::vec![0.0; n];
    for k in (1..n).rev() {
        let s: f64 = (0..k).map(|j| a[k * n + j]).sum();
        if !(s > 0.0) {
            return Err(Error::NotIrreducible);
        }
        scale[k] = s;
        for i in 0..k {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let factor = aik / s;
            for j in 0..k {
                if i != j {
                    a[i * n + j] += factor * a[k * n + j];
                }
            }
        }
    }
    let mut pi = alloc::vec![0.0; n];
    pi[0] = 1.0;
    for k in 1..n {
        let mut acc = 0.0;
        for i in 0..k {
            acc += pi[i] * a[i * n + k];
        }
        pi[k] = acc / scale[k];
    }
    let total: f64 = pi.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::SolverSingular(
            "GTH elimination lost all mass".into(),
        ));
    }
    for p in &mut pi {
        *p /= total;
    }
    Ok(pi)
}

/// `‖π Q‖₁` for a row-major generator.
pub fn balance_residual(pi: &[f64], q: &[f64], n: usize) -> f64 {
    let mut res = 0.0;
    for j in 0..n {
        let mut s = 0.0;
        for i in 0..n {
            s += pi[i] * q[i * n + j];
        }
        res += s.abs();
    }
    res
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(m: DMatrix<f64>) -> f64 {
    m.symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Eigenvalues `(re, im)` of a general square matrix, sorted by real part.
pub fn eigenvalues(m: DMatrix<f64>) -> Vec<(f64, f64)> {
    let mut ev: Vec<(f64, f64)> = m
        .complex_eigenvalues()
        .iter()
        .map(|z| (z.re, z.im))
        .collect();
    ev.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    ev
}
