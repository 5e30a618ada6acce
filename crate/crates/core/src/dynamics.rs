//! Forward ODE `dp/dt = p Γ(p)`, fixed points, and frozen-matrix stationary laws.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{RateFamily, RateMatrix};
use crate::simplex::{self, SimplexPoint, TangentVector};

/// Residual below which a point counts as a fixed point.
pub const FIXED_POINT_TOLERANCE: f64 = 1e-10;
/// Pre-clamp coordinate below which an RK4 step is rejected.
pub const STEP_REJECT_THRESHOLD: f64 = -1e-9;
/// Real-part threshold separating stable, unstable and inconclusive spectra.
pub const CLASSIFICATION_THRESHOLD: f64 = 1e-8;
/// Fixed points closer than this in ℓ1 are merged.
pub const DEDUP_TOLERANCE: f64 = 1e-6;
pub const PICARD_DAMPING: f64 = 0.5;
pub const PICARD_MAX_ITERATIONS: usize = 100_000;
pub const PICARD_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub points: Vec<SimplexPoint>,
    pub model_label: String,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_point(&self) -> &SimplexPoint {
        self.points
            .last()
            .expect("trajectory has at least one point")
    }

    /// Linear interpolation of the state at time `t` (clamped to the time range).
    pub fn at_time(&self, t: f64) -> Vec<f64> {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.points[0].weights().to_vec();
        }
        if t >= self.times[n - 1] {
            return self.points[n - 1].weights().to_vec();
        }
        let k = self.times.partition_point(|&s| s <= t) - 1;
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let w = (t - t0) / (t1 - t0);
        self.points[k]
            .weights()
            .iter()
            .zip(self.points[k + 1].weights())
            .map(|(a, b)| (1.0 - w) * a + w * b)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    Stable,
    Unstable,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub point: SimplexPoint,
    /// `‖p Γ(p)‖₁`.
    pub residual: f64,
    /// `‖p - π(p)‖₁`.
    pub stationarity_gap: f64,
    pub classification: Classification,
    pub jacobian_spectrum: Vec<Eigenvalue>,
}

/// Result of a multistart search; failed starts are counted, not fatal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointSearch {
    pub reports: Vec<FixedPointReport>,
    pub starts: usize,
    pub failed_starts: usize,
}

/// Stationary law of an irreducible generator by a dense augmented solve.
pub fn stationary_distribution(gamma: &RateMatrix) -> Result<SimplexPoint> {
    let pi = gamma.stationary()?;
    let res = linalg::balance_residual(pi.weights(), gamma.as_slice(), gamma.dim());
    if !(res <= 1e-12 * gamma.max_exit_rate().max(1.0)) {
        return Err(Error::SolverSingular(alloc::format!(
            "balance residual {res:e} after solve"
        )));
    }
    Ok(pi)
}

/// Stationary law by power iteration on the uniformized kernel `I + Γ/q`.
pub fn power_iteration_stationary(
    gamma: &RateMatrix,
    tol: f64,
    max_iterations: usize,
) -> Result<SimplexPoint> {
    if !gamma.is_irreducible() {
        return Err(Error::NotIrreducible);
    }
    let d = gamma.dim();
    let q = 1.05 * gamma.max_exit_rate();
    let mut p = vec![1.0 / d as f64; d];
    for _ in 0..max_iterations {
        let flow = gamma.left_apply(&p);
        let next: Vec<f64> = p.iter().zip(&flow).map(|(a, b)| a + b / q).collect();
        let change = simplex::l1_distance(&next, &p);
        p = next;
        if change <= tol {
            return SimplexPoint::new(p);
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iterations,
        residual: simplex::l1_distance(&p, &gamma.left_apply(&p)),
    })
}

/// `r Γ(r)`, an element of the tangent space.
pub fn vector_field(model: &RateFamily, r: &SimplexPoint) -> TangentVector {
    let v = model.vector_field_at(r.weights());
    simplex::tangent_project(&v).unwrap_or_else(|_| TangentVector::zero(r.dim()))
}

fn clamp_renormalize(p: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = p.iter().map(|x| x.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    clamped.into_iter().map(|x| x / total).collect()
}

/// `s Γ(q)` with `q` the stage state pulled back onto the simplex.
fn stage_field(model: &RateFamily, p: &[f64]) -> Vec<f64> {
    let q = clamp_renormalize(p);
    model.rates_at(&q).left_apply(p)
}

/// One classical RK4 step; returns the pre-clamp state.
pub fn rk4_step(model: &RateFamily, p: &[f64], h: f64) -> Vec<f64> {
    let k1 = stage_field(model, p);
    let s2: Vec<f64> = p.iter().zip(&k1).map(|(x, k)| x + 0.5 * h * k).collect();
    let k2 = stage_field(model, &s2);
    let s3: Vec<f64> = p.iter().zip(&k2).map(|(x, k)| x + 0.5 * h * k).collect();
    let k3 = stage_field(model, &s3);
    let s4: Vec<f64> = p.iter().zip(&k3).map(|(x, k)| x + h * k).collect();
    let k4 = stage_field(model, &s4);
    (0..p.len())
        .map(|i| p[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Fixed-step RK4 from `p0` to `t_end`, recording every step.
///
/// The step is `t_end / ceil(t_end / dt)`, so the final time is hit exactly.
pub fn integrate_ode(
    model: &RateFamily,
    p0: &SimplexPoint,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory> {
    if !(dt > 0.0 && dt.is_finite()) || !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidInput("need dt > 0 and t_end >= 0".into()));
    }
    if p0.dim() != model.dim() {
        return Err(Error::InvalidInput(
            "initial point dimension does not match the model".into(),
        ));
    }
    let steps = (t_end / dt - 1e-9).ceil().max(0.0) as usize;
    let h = if steps == 0 {
        0.0
    } else {
        t_end / steps as f64
    };
    let mut times = Vec::with_capacity(steps + 1);
    let mut points = Vec::with_capacity(steps + 1);
    times.push(0.0);
    points.push(p0.clone());
    let mut p = p0.weights().to_vec();
    for k in 1..=steps {
        let next = rk4_step(model, &p, h);
        let t = k as f64 * h;
        let low = next.iter().copied().fold(f64::INFINITY, f64::min);
        if low < STEP_REJECT_THRESHOLD || !low.is_finite() {
            return Err(Error::StepTooLarge {
                time: t,
                value: low,
            });
        }
        p = clamp_renormalize(&next);
        times.push(t);
        points.push(SimplexPoint::new(p.clone())?);
    }
    Ok(Trajectory {
        times,
        points,
        model_label: model.label().to_string(),
    })
}

fn stationarity_gap(model: &RateFamily, p: &[f64]) -> Result<f64> {
    let pi = model.stationary(p)?;
    Ok(simplex::l1_distance(p, pi.weights()))
}

/// Damped Picard iteration `p ← (1-θ) p + θ π(p)`.
pub fn picard_fixed_point(model: &RateFamily, start: &SimplexPoint) -> Result<SimplexPoint> {
    let mut p = start.weights().to_vec();
    let mut gap = f64::INFINITY;
    for _ in 0..PICARD_MAX_ITERATIONS {
        let pi = model.stationary(&p)?;
        gap = simplex::l1_distance(&p, pi.weights());
        if gap <= PICARD_TOLERANCE {
            return SimplexPoint::new(p);
        }
        for (x, y) in p.iter_mut().zip(pi.weights()) {
            *x = (1.0 - PICARD_DAMPING) * *x + PICARD_DAMPING * y;
        }
    }
    Err(Error::NoConvergence {
        iterations: PICARD_MAX_ITERATIONS,
        residual: gap,
    })
}

/// Newton iteration on `p - π(p) = 0` in reduced coordinates, with backtracking.
pub fn newton_fixed_point(
    model: &RateFamily,
    start: &SimplexPoint,
    max_iterations: usize,
) -> Result<SimplexPoint> {
    let d = model.dim();
    let m = d - 1;
    let residual = |s: &[f64]| -> Result<Vec<f64>> {
        let p = simplex::embed_reduced(s);
        if p.iter().any(|x| !(*x > 0.0)) {
            return Err(Error::BoundaryProximity {
                min_coord: p.iter().copied().fold(f64::INFINITY, f64::min),
                required: 0.0,
            });
        }
        let pi = model.stationary(&p)?;
        Ok((0..m).map(|i| p[i] - pi[i]).collect())
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut s: Vec<f64> = start.weights()[..m].to_vec();
    let mut g = residual(&s)?;
    for _ in 0..max_iterations {
        let p = simplex::embed_reduced(&s);
        if stationarity_gap(model, &p)? <= PICARD_TOLERANCE {
            return SimplexPoint::new(p);
        }
        let mut jac = DMatrix::<f64>::zeros(m, m);
        for j in 0..m {
            let h = 1e-7 * s[j].abs().max(1e-3);
            let mut sp = s.clone();
            let mut sm = s.clone();
            sp[j] += h;
            sm[j] -= h;
            let gp = residual(&sp)?;
            let gm = residual(&sm)?;
            for i in 0..m {
                jac[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        let step = linalg::solve(&jac, &DVector::from_vec(g.iter().map(|x| -x).collect()))?;
        let base = norm(&g);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = s.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
            if let Ok(gt) = residual(&trial) {
                if norm(&gt) < base || norm(&gt) == 0.0 {
                    s = trial;
                    g = gt;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let p = simplex::embed_reduced(&s);
    let gap = stationarity_gap(model, &p)?;
    if gap <= PICARD_TOLERANCE {
        SimplexPoint::new(p)
    } else {
        Err(Error::NoConvergence {
            iterations: max_iterations,
            residual: gap,
        })
    }
}

/// Fixed point reached from one start: Picard, falling back to Newton, then a Newton polish.
pub fn fixed_point_from_start(model: &RateFamily, start: &SimplexPoint) -> Result<SimplexPoint> {
    let p = match picard_fixed_point(model, start) {
        Ok(p) => p,
        Err(picard_err) => newton_fixed_point(model, start, 100).map_err(|_| picard_err)?,
    };
    Ok(newton_fixed_point(model, &p, 5).unwrap_or(p))
}

/// Jacobian of `r ↦ r Γ(r)` restricted to the tangent space, in the Helmert basis.
pub fn tangent_jacobian(model: &RateFamily, p: &SimplexPoint) -> DMatrix<f64> {
    let d = model.dim();
    let basis = simplex::helmert_basis(d);
    let eps = 1e-6 * p.min_coord().min(1.0).max(1e-3);
    let mut jac = DMatrix::<f64>::zeros(d - 1, d - 1);
    for (j, hj) in basis.iter().enumerate() {
        let plus: Vec<f64> = p
            .weights()
            .iter()
            .zip(hj)
            .map(|(x, h)| x + eps * h)
            .collect();
        let minus: Vec<f64> = p
            .weights()
            .iter()
            .zip(hj)
            .map(|(x, h)| x - eps * h)
            .collect();
        let fp = model.vector_field_at(&plus);
        let fm = model.vector_field_at(&minus);
        let diff: Vec<f64> = fp
            .iter()
            .zip(&fm)
            .map(|(a, b)| (a - b) / (2.0 * eps))
            .collect();
        for (i, hi) in basis.iter().enumerate() {
            jac[(i, j)] = simplex::dot(hi, &diff);
        }
    }
    jac
}

pub fn classify_spectrum(spectrum: &[Eigenvalue]) -> Classification {
    if spectrum.iter().any(|z| z.re > CLASSIFICATION_THRESHOLD) {
        Classification::Unstable
    } else if spectrum.iter().all(|z| z.re < -CLASSIFICATION_THRESHOLD) {
        Classification::Stable
    } else {
        Classification::Inconclusive
    }
}

/// Builds the report for a converged fixed point.
pub fn classify_fixed_point(model: &RateFamily, p: &SimplexPoint) -> Result<FixedPointReport> {
    let residual: f64 = model
        .vector_field_at(p.weights())
        .iter()
        .map(|v| v.abs())
        .sum();
    let gap = stationarity_gap(model, p.weights())?;
    let spectrum: Vec<Eigenvalue> = linalg::eigenvalues(tangent_jacobian(model, p))
        .into_iter()
        .map(|(re, im)| Eigenvalue { re, im })
        .collect();
    Ok(FixedPointReport {
        point: p.clone(),
        residual,
        stationarity_gap: gap,
        classification: classify_spectrum(&spectrum),
        jacobian_spectrum: spectrum,
    })
}

/// Start points: the barycenter, an interior grid, and seeded random interior points.
pub fn multistart_points(d: usize, multistarts: usize, seed: u64) -> Result<Vec<SimplexPoint>> {
    if multistarts == 0 {
        return Err(Error::InvalidInput("multistarts must be at least 1".into()));
    }
    let mut starts = vec![SimplexPoint::uniform(d)];
    let grid_count = multistarts.div_ceil(2);
    let grid =
        simplex::interior_grid_with_at_least(d, grid_count, 0.5 / (grid_count as f64 + d as f64))?;
    starts.extend(grid.points.into_iter().take(grid_count));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..multistarts - multistarts.div_ceil(2) {
        starts.push(simplex::random_interior(d, 1e-3, &mut rng));
    }
    Ok(starts)
}

/// Merges converged points closer than [`DEDUP_TOLERANCE`]; keeps the first of each cluster.
pub fn deduplicate(points: Vec<SimplexPoint>) -> Vec<SimplexPoint> {
    let mut kept: Vec<SimplexPoint> = Vec::new();
    for p in points {
        if kept.iter().all(|q| q.l1_distance(&p) > DEDUP_TOLERANCE) {
            kept.push(p);
        }
    }
    kept.sort_by(|a, b| {
        a.weights()
            .partial_cmp(b.weights())
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    kept
}

/// Multistart fixed-point search (sequential; the CLI parallelizes over starts).
pub fn find_fixed_points(
    model: &RateFamily,
    multistarts: usize,
    seed: u64,
) -> Result<FixedPointSearch> {
    let starts = multistart_points(model.dim(), multistarts, seed)?;
    let mut found = Vec::new();
    let mut failed = 0;
    for s in &starts {
        match fixed_point_from_start(model, s) {
            Ok(p) => found.push(p),
            Err(e) => {
                log::debug!("fixed-point start {:?} failed: {e}", s.weights());
                failed += 1;
            }
        }
    }
    assemble_search(model, found, starts.len(), failed)
}

/// Deduplicates and classifies converged points.
pub fn assemble_search(
    model: &RateFamily,
    found: Vec<SimplexPoint>,
    starts: usize,
    failed_starts: usize,
) -> Result<FixedPointSearch> {
    let reports = deduplicate(found)
        .iter()
        .map(|p| classify_fixed_point(model, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(FixedPointSearch {
        reports,
        starts,
        failed_starts,
    })
}
