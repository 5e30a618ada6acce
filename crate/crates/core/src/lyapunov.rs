//! Lyapunov candidates, positive-definiteness probes, descent checks,
//! potential-existence tests and slow-adaptation constants.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::DMatrix;
#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Trajectory, FIXED_POINT_TOLERANCE};
use crate::error::{Error, Result};
use crate::expr::Function;
use crate::linalg;
use crate::models::RateFamily;
use crate::quadrature;
use crate::simplex::{self, SimplexGrid, SimplexPoint, TangentVector};

/// Margin below which an orbital derivative counts as strictly negative.
pub const DESCENT_MARGIN: f64 = 1e-12;
/// Closedness threshold for the potential-existence test.
pub const CURL_THRESHOLD: f64 = 1e-4;
/// Agreement required between analytic and finite-difference gradients.
pub const GRADIENT_CHECK_TOLERANCE: f64 = 1e-6;

/// `Σ p_x log(p_x / q_x)` with `0 log 0 = 0`.
pub fn relative_entropy(p: &SimplexPoint, q: &SimplexPoint) -> Result<f64> {
    relative_entropy_raw(p.weights(), q.weights())
}

pub(crate) fn relative_entropy_raw(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidInput("dimension mismatch".into()));
    }
    let mut total = 0.0;
    for (x, (&px, &qx)) in p.iter().zip(q).enumerate() {
        if px > 0.0 {
            if !(qx > 0.0) {
                return Err(Error::SupportViolation(x));
            }
            total += px * (px / qx).ln();
        }
    }
    Ok(total.max(0.0))
}

fn entropy_term(r: &[f64]) -> f64 {
    r.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum()
}

/// `Σ_x (K^x(r) + log r_x) r_x` given the evaluated interaction potentials `K(r)`.
pub fn gibbs_free_energy(k: &[f64], r: &SimplexPoint) -> Result<f64> {
    r.require_interior(1e-12)?;
    Ok(k.iter()
        .zip(r.weights())
        .map(|(kx, rx)| (kx + rx.ln()) * rx)
        .sum())
}

/// `Σ r_x log r_x + U(r)`.
#[allow(non_snake_case)]
pub fn locally_gibbs_J<U: Fn(&[f64]) -> f64>(u: U, r: &SimplexPoint) -> Result<f64> {
    r.require_interior(1e-12)?;
    Ok(entropy_term(r.weights()) + u(r.weights()))
}

/// `Σ_z [∫₀^{r_z} R(z, w) dw + K^z(r) r_z]`.
pub fn ggibbs_potential(k: &[Function], rr: &[Function], r: &SimplexPoint) -> Result<f64> {
    if k.len() != r.dim() || rr.len() != r.dim() {
        return Err(Error::InvalidInput("need one K and one R per state".into()));
    }
    let mut total = 0.0;
    for z in 0..r.dim() {
        total += quadrature::integrate_default(|w| rr[z].eval1(w), 0.0, r[z])?;
        total += k[z].eval(r.weights()) * r[z];
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum CandidateKind {
    RelativeEntropy { pi_star: SimplexPoint },
    GibbsFreeEnergy { model: String },
    LocallyGibbsJ { model: String },
    Custom { label: String },
}

type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradientField = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Scalar field on the simplex interior with an optional analytic gradient.
#[derive(Clone)]
pub struct LyapunovCandidate {
    kind: CandidateKind,
    value: ScalarField,
    gradient: Option<GradientField>,
    dim: usize,
}

impl fmt::Debug for LyapunovCandidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LyapunovCandidate")
            .field("kind", &self.kind)
            .field("analytic_gradient", &self.gradient.is_some())
            .finish()
    }
}

impl LyapunovCandidate {
    /// Builds a candidate and checks the analytic gradient against finite differences at 25 points.
    pub fn new(
        kind: CandidateKind,
        value: ScalarField,
        gradient: Option<GradientField>,
        dim: usize,
    ) -> Result<Self> {
        let c = Self {
            kind,
            value,
            gradient,
            dim,
        };
        c.check_gradient(dim)?;
        Ok(c)
    }

    fn check_gradient(&self, dim: usize) -> Result<()> {
        let Some(g) = &self.gradient else {
            return Ok(());
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0x6a5d);
        for _ in 0..25 {
            let r = simplex::random_interior(dim, 0.01, &mut rng);
            let fd = simplex::tangent_gradient(|p| (self.value)(p), &r, 1e-6)?;
            let an = simplex::tangent_project(&g(r.weights()))?;
            let err = fd
                .components()
                .iter()
                .zip(an.components())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let scale = an.norm_inf().max(1.0);
            if !(err <= GRADIENT_CHECK_TOLERANCE * scale) {
                return Err(Error::InvalidParameters(format!(
                    "analytic gradient disagrees with finite differences by {err:e} at {:?}",
                    r.weights()
                )));
            }
        }
        Ok(())
    }

    /// `R(· ‖ π*)`.
    pub fn relative_entropy(pi_star: &SimplexPoint) -> Result<Self> {
        pi_star.require_interior(1e-300)?;
        let q = pi_star.weights().to_vec();
        let q2 = q.clone();
        let dim = q.len();
        Self::new(
            CandidateKind::RelativeEntropy {
                pi_star: pi_star.clone(),
            },
            Arc::new(move |r: &[f64]| relative_entropy_raw(r, &q).unwrap_or(f64::NAN)),
            Some(Arc::new(move |r: &[f64]| {
                r.iter().zip(&q2).map(|(x, y)| (x / y).ln()).collect()
            })),
            dim,
        )
    }

    /// Free energy `F(r) = Σ (K^x(r) + log r_x) r_x` of a Gibbs-type family.
    pub fn gibbs_free_energy(model: &RateFamily) -> Result<Self> {
        if model
            .gibbs_k(&vec![1.0 / model.dim() as f64; model.dim()])
            .is_none()
        {
            return Err(Error::InvalidInput(format!(
                "{} has no interaction potential K",
                model.label()
            )));
        }
        let m1 = model.clone();
        let m2 = model.clone();
        Self::new(
            CandidateKind::GibbsFreeEnergy {
                model: model.label().to_string(),
            },
            Arc::new(move |r: &[f64]| {
                let k = m1.gibbs_k(r).unwrap_or_default();
                k.iter().zip(r).map(|(kx, rx)| (kx + rx.ln()) * rx).sum()
            }),
            Some(Arc::new(move |r: &[f64]| {
                let h = m2.gibbs_h(r).unwrap_or_default();
                h.iter().zip(r).map(|(hx, rx)| hx + rx.ln()).collect()
            })),
            model.dim(),
        )
    }

    /// `J(r) = Σ r_x log r_x + U(r)` for a family with a potential.
    pub fn locally_gibbs(model: &RateFamily) -> Result<Self> {
        if !model.has_potential() {
            return Err(Error::InvalidInput(format!(
                "{} has no potential",
                model.label()
            )));
        }
        let m1 = model.clone();
        let m2 = model.clone();
        Self::new(
            CandidateKind::LocallyGibbsJ {
                model: model.label().to_string(),
            },
            Arc::new(move |r: &[f64]| match m1.potential(r) {
                Some(Ok(u)) => entropy_term(r) + u,
                _ => f64::NAN,
            }),
            Some(Arc::new(move |r: &[f64]| {
                let g = m2.potential_gradient(r).unwrap_or_default();
                g.iter().zip(r).map(|(gx, rx)| gx + rx.ln()).collect()
            })),
            model.dim(),
        )
    }

    /// A user-supplied field; the gradient, when given, is checked like the built-in ones.
    pub fn custom<F, G>(label: &str, dim: usize, value: F, gradient: Option<G>) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self::new(
            CandidateKind::Custom {
                label: label.to_string(),
            },
            Arc::new(value),
            gradient.map(|g| Arc::new(g) as GradientField),
            dim,
        )
    }

    pub fn kind(&self) -> &CandidateKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_analytic_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    pub fn value(&self, r: &[f64]) -> f64 {
        (self.value)(r)
    }

    /// Tangent gradient: analytic when available, else central differences.
    pub fn gradient(&self, r: &SimplexPoint) -> Result<TangentVector> {
        match &self.gradient {
            Some(g) => simplex::tangent_project(&g(r.weights())),
            None => {
                let h = simplex::default_step(r).min(0.25 * r.min_coord());
                simplex::tangent_gradient(|p| (self.value)(p), r, h)
            }
        }
    }

    /// `⟨DJ(r), r Γ(r)⟩`.
    pub fn orbital_derivative(&self, model: &RateFamily, r: &SimplexPoint) -> Result<f64> {
        let g = self.gradient(r)?;
        Ok(g.dot(&model.vector_field_at(r.weights())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Both checks passed: the samples are consistent with positive definiteness.
    pub consistent_with_positive_definite: bool,
    pub samples_used: usize,
    /// `min J(r) - J(π*)` over the samples.
    pub min_excess: f64,
    /// Samples with `J(r) ≤ J(π*)`.
    pub witnesses: Vec<Vec<f64>>,
    pub strict_minimum: bool,
    /// Largest sampled distance from π* within each of 10 nested sublevel sets.
    pub sublevel_radii: Vec<f64>,
    pub sublevel_monotone: bool,
}

/// Samples `r = π* + t u` with `u` a random unit tangent direction and `t ∈ [radius/1000, radius]`,
/// keeping only points in the open simplex.
pub fn positive_definiteness_probe(
    j: &LyapunovCandidate,
    pi_star: &SimplexPoint,
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<ProbeReport> {
    if !(radius > 0.0) || samples == 0 {
        return Err(Error::InvalidInput(
            "radius and samples must be positive".into(),
        ));
    }
    pi_star.require_interior(1e-12)?;
    let d = pi_star.dim();
    let j0 = j.value(pi_star.weights());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts: Vec<(f64, f64, Vec<f64>)> = Vec::with_capacity(samples);
    let mut attempts = 0;
    while pts.len() < samples && attempts < 100 * samples {
        attempts += 1;
        let u = simplex::random_tangent_direction(d, &mut rng);
        let t = radius * (1e-3 + (1.0 - 1e-3) * rng.random::<f64>());
        let r: Vec<f64> = pi_star
            .weights()
            .iter()
            .zip(&u)
            .map(|(p, v)| p + t * v)
            .collect();
        if r.iter().any(|x| !(*x > 1e-9)) {
            continue;
        }
        let excess = j.value(&r) - j0;
        let dist = simplex::l1_distance(&r, pi_star.weights());
        pts.push((excess, dist, r));
    }
    let min_excess = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let witnesses: Vec<Vec<f64>> = pts
        .iter()
        .filter(|p| !(p.0 > 0.0))
        .take(10)
        .map(|p| p.2.clone())
        .collect();
    let strict_minimum = !pts.is_empty() && witnesses.is_empty();
    let max_excess = pts.iter().map(|p| p.0).fold(0.0f64, f64::max);
    let sublevel_radii: Vec<f64> = (1..=10)
        .map(|i| {
            let level = max_excess * i as f64 / 10.0;
            pts.iter()
                .filter(|p| p.0 <= level)
                .map(|p| p.1)
                .fold(0.0, f64::max)
        })
        .collect();
    let sublevel_monotone = sublevel_radii.windows(2).all(|w| w[0] <= w[1]);
    Ok(ProbeReport {
        consistent_with_positive_definite: strict_minimum && sublevel_monotone,
        samples_used: pts.len(),
        min_excess,
        witnesses,
        strict_minimum,
        sublevel_radii,
        sublevel_monotone,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentSample {
    pub t: f64,
    pub j: f64,
    pub orbital_derivative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    pub trajectory_label: String,
    pub samples: Vec<DescentSample>,
    pub violations: usize,
    pub epsilon_ball: f64,
    pub margin: f64,
    /// Samples skipped because a coordinate fell below 1e-8.
    pub skipped: usize,
    /// `J(p_{k+1}) - J(p_k)` along the trajectory.
    pub discrete_differences: Vec<f64>,
    pub discrete_increases: usize,
}

/// Orbital derivative of `J` along a trajectory; violations are samples outside the
/// ℓ1 ε-ball around π* whose derivative exceeds `-DESCENT_MARGIN`.
pub fn descent_check(
    j: &LyapunovCandidate,
    model: &RateFamily,
    traj: &Trajectory,
    pi_star: &SimplexPoint,
    eps: f64,
) -> DescentReport {
    let mut samples = Vec::with_capacity(traj.len());
    let mut violations = 0;
    let mut skipped = 0;
    for (t, p) in traj.times.iter().zip(&traj.points) {
        if p.min_coord() < 1e-8 {
            skipped += 1;
            continue;
        }
        let od = j.orbital_derivative(model, p).unwrap_or(f64::NAN);
        let value = j.value(p.weights());
        if p.l1_distance(pi_star) > eps && !(od < -DESCENT_MARGIN) {
            violations += 1;
        }
        samples.push(DescentSample {
            t: *t,
            j: value,
            orbital_derivative: od,
        });
    }
    let discrete_differences: Vec<f64> = samples.windows(2).map(|w| w[1].j - w[0].j).collect();
    let discrete_increases = discrete_differences.iter().filter(|v| **v > 0.0).count();
    DescentReport {
        trajectory_label: traj.model_label.clone(),
        samples,
        violations,
        epsilon_ball: eps,
        margin: DESCENT_MARGIN,
        skipped,
        discrete_differences,
        discrete_increases,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialTestReport {
    pub max_asymmetry: f64,
    /// Grid point where the asymmetry is largest.
    pub worst_point: Vec<f64>,
    pub threshold: f64,
    pub passed: bool,
    pub grid_points: usize,
    /// Max deviation between the reconstructed potential and the family's own
    /// potential after removing the mean difference; present when both exist.
    pub reconstruction_error: Option<f64>,
}

/// `ω_i(s) = -log(π_i / π_d)` in reduced coordinates `s = (r_1..r_{d-1})`.
fn log_ratio_form(model: &RateFamily, s: &[f64]) -> Result<Vec<f64>> {
    let r = simplex::embed_reduced(s);
    let pi = model.stationary(&r)?;
    let d = r.len();
    Ok((0..d - 1).map(|i| -(pi[i] / pi[d - 1]).ln()).collect())
}

/// Line integral of the log-ratio form from the barycenter to `r` along a straight segment.
pub fn reconstruct_potential(model: &RateFamily, r: &[f64]) -> Result<f64> {
    let d = model.dim();
    let b = vec![1.0 / d as f64; d - 1];
    let s = &r[..d - 1];
    let dir: Vec<f64> = s.iter().zip(&b).map(|(x, y)| x - y).collect();
    let failure = core::cell::RefCell::new(None);
    let v = quadrature::integrate(
        |t| {
            let pt: Vec<f64> = b.iter().zip(&dir).map(|(x, v)| x + t * v).collect();
            match log_ratio_form(model, &pt) {
                Ok(w) => simplex::dot(&w, &dir),
                Err(e) => {
                    *failure.borrow_mut() = Some(e);
                    0.0
                }
            }
        },
        0.0,
        1.0,
        1e-11,
        quadrature::DEFAULT_MAX_SUBDIVISIONS,
    );
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    v
}

/// Closedness test of the log-ratio 1-form by central second differences on the grid.
pub fn potential_existence_test(
    model: &RateFamily,
    grid: &SimplexGrid,
    h: f64,
) -> Result<PotentialTestReport> {
    let d = model.dim();
    if grid.dim() != d {
        return Err(Error::InvalidInput(
            "grid dimension does not match the model".into(),
        ));
    }
    let mut max_asym = 0.0f64;
    let mut worst = vec![];
    for p in &grid.points {
        p.require_interior(2.0 * h)?;
        let s = &p.weights()[..d - 1];
        let mut partials = vec![vec![0.0; d - 1]; d - 1];
        for j in 0..d - 1 {
            let mut sp = s.to_vec();
            let mut sm = s.to_vec();
            sp[j] += h;
            sm[j] -= h;
            let wp = log_ratio_form(model, &sp)?;
            let wm = log_ratio_form(model, &sm)?;
            for i in 0..d - 1 {
                partials[i][j] = (wp[i] - wm[i]) / (2.0 * h);
            }
        }
        for i in 0..d - 1 {
            for j in i + 1..d - 1 {
                let a = (partials[i][j] - partials[j][i]).abs();
                if a > max_asym || worst.is_empty() {
                    max_asym = max_asym.max(a);
                    worst = p.weights().to_vec();
                }
            }
        }
    }
    if worst.is_empty() {
        worst = grid
            .points
            .first()
            .map(|p| p.weights().to_vec())
            .unwrap_or_default();
    }
    let passed = max_asym <= CURL_THRESHOLD;
    let reconstruction_error = if passed && model.has_potential() {
        let mut diffs = Vec::with_capacity(grid.len());
        for p in &grid.points {
            let rec = reconstruct_potential(model, p.weights())?;
            let own = match model.potential(p.weights()) {
                Some(v) => v?,
                None => unreachable!(),
            };
            diffs.push(rec - own);
        }
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        Some(diffs.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max))
    } else {
        None
    };
    Ok(PotentialTestReport {
        max_asymmetry: max_asym,
        worst_point: worst,
        threshold: CURL_THRESHOLD,
        passed,
        grid_points: grid.len(),
        reconstruction_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowAdaptationBoundReport {
    pub gamma_min: f64,
    pub pi_star_min: f64,
    pub lipschitz_c: f64,
    /// Half the smallest eigenvalue of the relative-entropy Hessian form on the tangent space.
    pub quadratic_c: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
}

/// `½ min_{u ∈ H0, |u| = 1} Σ_{x≠y} π_y (u_y/π_y - u_x/π_x)² Γ_yx`.
pub fn quadratic_constant(gamma: &crate::models::RateMatrix, pi: &[f64]) -> f64 {
    let d = pi.len();
    let mut a = DMatrix::<f64>::zeros(d, d);
    for y in 0..d {
        for x in 0..d {
            if x == y {
                continue;
            }
            let w = pi[y] * gamma.get(y, x);
            a[(y, y)] += w / (pi[y] * pi[y]);
            a[(x, x)] += w / (pi[x] * pi[x]);
            a[(x, y)] -= w / (pi[x] * pi[y]);
            a[(y, x)] -= w / (pi[x] * pi[y]);
        }
    }
    let basis = simplex::helmert_basis(d);
    let h = DMatrix::from_fn(d, d - 1, |i, k| basis[k][i]);
    let restricted = h.transpose() * a * h;
    0.5 * linalg::min_symmetric_eigenvalue(restricted)
}

/// `λ₁ = min(γ_min / 16C, 1)`, `λ₂ = min(λ₁, c π*_min / 8C)`.
pub fn slow_adaptation_bounds(
    model: &RateFamily,
    pi_star: &SimplexPoint,
    samples: usize,
    seed: u64,
) -> Result<SlowAdaptationBoundReport> {
    let gamma = model.evaluate_rates(pi_star);
    if !gamma.is_irreducible() {
        return Err(Error::NotIrreducible);
    }
    let residual: f64 = gamma
        .left_apply(pi_star.weights())
        .iter()
        .map(|v| v.abs())
        .sum();
    if residual > FIXED_POINT_TOLERANCE {
        return Err(Error::NotFixedPoint(residual));
    }
    let gamma_min = gamma.min_positive_rate().ok_or(Error::NotIrreducible)?;
    let pi_star_min = pi_star.min_coord();
    let c_lip = model.lipschitz_estimate(samples, seed)?;
    let quadratic_c = quadratic_constant(&gamma, pi_star.weights());
    let ratio = |num: f64| {
        if c_lip > 0.0 {
            num / c_lip
        } else {
            f64::INFINITY
        }
    };
    let lambda_1 = ratio(gamma_min / 16.0).min(1.0);
    let lambda_2 = lambda_1.min(ratio(quadratic_c * pi_star_min / 8.0));
    Ok(SlowAdaptationBoundReport {
        gamma_min,
        pi_star_min,
        lipschitz_c: c_lip,
        quadratic_c,
        lambda_1,
        lambda_2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDescentSummary {
    /// Largest orbital derivative of `R(·‖π*)` over grid points away from π*.
    pub max_orbital_derivative: f64,
    /// Grid points (away from π*) where the derivative is not below `-DESCENT_MARGIN`.
    pub violations: usize,
    pub points: usize,
}

/// Orbital derivative of `R(· ‖ π*)` over a grid; points within `exclusion` (ℓ1) of π* are ignored.
pub fn relative_entropy_grid_descent(
    model: &RateFamily,
    pi_star: &SimplexPoint,
    grid: &SimplexGrid,
    exclusion: f64,
) -> Result<GridDescentSummary> {
    let j = LyapunovCandidate::relative_entropy(pi_star)?;
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0;
    let mut points = 0;
    for p in &grid.points {
        if p.l1_distance(pi_star) <= exclusion {
            continue;
        }
        points += 1;
        let od = j.orbital_derivative(model, p)?;
        worst = worst.max(od);
        if !(od < -DESCENT_MARGIN) {
            violations += 1;
        }
    }
    Ok(GridDescentSummary {
        max_orbital_derivative: worst,
        violations,
        points,
    })
}

/// Largest λ (by bisection on `[lo, 1]`) for which the relative-entropy descent holds on the grid.
///
/// `make(λ)` builds the slowed family. Returns `1.0` if descent already holds at λ = 1.
pub fn empirical_lambda_threshold<F>(
    make: F,
    pi_star: &SimplexPoint,
    grid: &SimplexGrid,
    lo: f64,
    iterations: usize,
) -> Result<f64>
where
    F: Fn(f64) -> Result<RateFamily>,
{
    let holds = |lambda: f64| -> Result<bool> {
        let m = make(lambda)?;
        Ok(relative_entropy_grid_descent(&m, pi_star, grid, 1e-9)?.violations == 0)
    };
    if holds(1.0)? {
        return Ok(1.0);
    }
    if !holds(lo)? {
        return Err(Error::NoConvergence {
            iterations: 0,
            residual: lo,
        });
    }
    let (mut a, mut b) = (lo, 1.0);
    for _ in 0..iterations {
        let mid = 0.5 * (a + b);
        if holds(mid)? {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(a)
}
