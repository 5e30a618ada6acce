//! Hamiltonian `𝐇(r, α)`, Lagrangian `𝐋(r, β)`, their duality, PDE subsolution
//! checks, concavity probes and Dirichlet forms.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::lyapunov::LyapunovCandidate;
use crate::models::{RateFamily, RateMatrix};
use crate::simplex::{self, SimplexGrid, SimplexPoint, TangentVector};

/// Exponents above this trigger [`Error::OverflowGuard`].
pub const EXPONENT_GUARD: f64 = 700.0;
pub const SOLUTION_TOLERANCE_ANALYTIC: f64 = 1e-7;
pub const SOLUTION_TOLERANCE_FD: f64 = 1e-4;
pub const DUAL_GRADIENT_TOLERANCE: f64 = 1e-10;
pub const DUAL_MAX_ITERATIONS: usize = 200;
pub const DUAL_DIVERGENCE_NORM: f64 = 1e3;

/// Active edges `(x, y, Λ_xy = r_x Γ_xy(r))` with `Λ_xy > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fluxes {
    pub dim: usize,
    pub edges: Vec<(usize, usize, f64)>,
}

impl Fluxes {
    pub fn new(r: &[f64], gamma: &RateMatrix) -> Self {
        let d = gamma.dim();
        let mut edges = Vec::new();
        for x in 0..d {
            for y in 0..d {
                let lam = r[x] * gamma.get(x, y);
                if x != y && lam > 0.0 {
                    edges.push((x, y, lam));
                }
            }
        }
        Self { dim: d, edges }
    }

    pub fn of(model: &RateFamily, r: &SimplexPoint) -> Self {
        Self::new(r.weights(), &model.evaluate_rates(r))
    }

    fn weights(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        self.edges
            .iter()
            .map(|&(x, y, lam)| {
                let e = -(alpha[y] - alpha[x]);
                if e > EXPONENT_GUARD {
                    Err(Error::OverflowGuard(e))
                } else {
                    Ok(lam * e.exp())
                }
            })
            .collect()
    }

    /// `-Σ Λ_xy (e^{-(α_y - α_x)} - 1)`.
    pub fn hamiltonian(&self, alpha: &[f64]) -> Result<f64> {
        let w = self.weights(alpha)?;
        Ok(-self
            .edges
            .iter()
            .zip(&w)
            .map(|(&(_, _, lam), wi)| wi - lam)
            .sum::<f64>())
    }

    /// `∇_α 𝐇 = Σ Λ_xy e^{-(α_y - α_x)} (e_y - e_x)`.
    pub fn gradient(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        let w = self.weights(alpha)?;
        let mut g = vec![0.0; self.dim];
        for (&(x, y, _), wi) in self.edges.iter().zip(&w) {
            g[y] += wi;
            g[x] -= wi;
        }
        Ok(g)
    }

    /// `∇²_α 𝐇 = -Σ Λ_xy e^{-(α_y - α_x)} (e_y - e_x)(e_y - e_x)ᵀ`.
    pub fn hessian(&self, alpha: &[f64]) -> Result<DMatrix<f64>> {
        let w = self.weights(alpha)?;
        let mut h = DMatrix::<f64>::zeros(self.dim, self.dim);
        for (&(x, y, _), wi) in self.edges.iter().zip(&w) {
            h[(x, x)] -= wi;
            h[(y, y)] -= wi;
            h[(x, y)] += wi;
            h[(y, x)] += wi;
        }
        Ok(h)
    }

    /// Net flux `Σ Λ_xy (e_y - e_x) = r Γ(r)`.
    pub fn net_flux(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.dim];
        for &(x, y, lam) in &self.edges {
            b[y] += lam;
            b[x] -= lam;
        }
        b
    }

    /// `sup_α [𝐇(α) - ⟨α, β⟩]` by damped Newton ascent in reduced coordinates (`α_d = 0`).
    pub fn lagrangian(&self, beta: &[f64]) -> Result<f64> {
        let d = self.dim;
        let m = d - 1;
        let objective =
            |a: &[f64]| -> Result<f64> { Ok(self.hamiltonian(a)? - simplex::dot(a, beta)) };
        let scale = self.edges.iter().map(|e| e.2).fold(1.0f64, f64::max);
        let mut alpha = vec![0.0; d];
        let mut value = objective(&alpha)?;
        for _ in 0..DUAL_MAX_ITERATIONS {
            let full = self.gradient(&alpha)?;
            let g: Vec<f64> = (0..m).map(|i| full[i] - beta[i]).collect();
            let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gnorm <= DUAL_GRADIENT_TOLERANCE * scale {
                return Ok(value.max(0.0));
            }
            let hess = self.hessian(&alpha)?;
            let mut neg = DMatrix::<f64>::from_fn(m, m, |i, j| -hess[(i, j)]);
            let ridge = 1e-14 * scale;
            for i in 0..m {
                neg[(i, i)] += ridge;
            }
            let step = match neg.clone().cholesky() {
                Some(ch) => ch.solve(&DVector::from_vec(g.clone())),
                None => DVector::from_vec(g.clone()),
            };
            let slope: f64 = step.iter().zip(&g).map(|(a, b)| a * b).sum();
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let mut trial = alpha.clone();
                for i in 0..m {
                    trial[i] += t * step[i];
                }
                match objective(&trial) {
                    Ok(v)
                        if v >= value + 1e-4 * t * slope
                            - 4.0 * f64::EPSILON * value.abs().max(1.0) =>
                    {
                        alpha = trial;
                        value = v;
                        accepted = true;
                        break;
                    }
                    Ok(_) | Err(Error::OverflowGuard(_)) => t *= 0.5,
                    Err(e) => return Err(e),
                }
            }
            let norm = alpha.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > DUAL_DIVERGENCE_NORM {
                return Err(Error::Infeasible);
            }
            if !accepted {
                // No ascent possible at working precision: converged up to rounding.
                if gnorm <= 1e-6 * scale {
                    return Ok(value.max(0.0));
                }
                return Err(Error::Infeasible);
            }
        }
        let full = self.gradient(&alpha)?;
        let gnorm = (0..m)
            .map(|i| (full[i] - beta[i]).powi(2))
            .sum::<f64>()
            .sqrt();
        if gnorm <= DUAL_GRADIENT_TOLERANCE * scale {
            Ok(value.max(0.0))
        } else if alpha.iter().map(|v| v * v).sum::<f64>().sqrt() > 0.5 * DUAL_DIVERGENCE_NORM {
            Err(Error::Infeasible)
        } else {
            Err(Error::MaxIterations(DUAL_MAX_ITERATIONS))
        }
    }

    /// `inf Σ Λ_xy ℓ(u_xy / Λ_xy)` over `u ≥ 0` with `Σ u_xy (e_y - e_x) = β`,
    /// by infeasible-start Newton on the KKT system; `u` stays positive by backtracking.
    pub fn lagrangian_primal(&self, beta: &[f64]) -> Result<f64> {
        let d = self.dim;
        let m = d - 1;
        let ne = self.edges.len();
        if ne == 0 {
            return if beta.iter().all(|b| b.abs() < 1e-14) {
                Ok(0.0)
            } else {
                Err(Error::Infeasible)
            };
        }
        let lam: Vec<f64> = self.edges.iter().map(|e| e.2).collect();
        let apply = |u: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; d];
            for (&(x, y, _), ui) in self.edges.iter().zip(u) {
                out[y] += ui;
                out[x] -= ui;
            }
            out
        };
        // Residuals: dual (grad f + Aᵀν) and primal (Au - β), last constraint row dropped.
        let residual = |u: &[f64], nu: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let dual: Vec<f64> = self
                .edges
                .iter()
                .enumerate()
                .map(|(k, &(x, y, _))| {
                    let ay = if y < m { nu[y] } else { 0.0 };
                    let ax = if x < m { nu[x] } else { 0.0 };
                    (u[k] / lam[k]).ln() + ay - ax
                })
                .collect();
            let au = apply(u);
            let primal: Vec<f64> = (0..m).map(|i| au[i] - beta[i]).collect();
            (dual, primal)
        };
        let norm2 = |a: &[f64], b: &[f64]| a.iter().chain(b).map(|v| v * v).sum::<f64>().sqrt();
        let mut u = lam.clone();
        let mut nu = vec![0.0; m];
        let scale = lam.iter().copied().fold(1.0f64, f64::max);
        for _ in 0..DUAL_MAX_ITERATIONS {
            let (rd, rp) = residual(&u, &nu);
            let rnorm = norm2(&rd, &rp);
            if rnorm <= 1e-12 * scale {
                break;
            }
            let n = ne + m;
            let mut kkt = DMatrix::<f64>::zeros(n, n);
            let mut rhs = DVector::<f64>::zeros(n);
            for (k, &(x, y, _)) in self.edges.iter().enumerate() {
                kkt[(k, k)] = 1.0 / u[k];
                if y < m {
                    kkt[(k, ne + y)] = 1.0;
                    kkt[(ne + y, k)] = 1.0;
                }
                if x < m {
                    kkt[(k, ne + x)] = -1.0;
                    kkt[(ne + x, k)] = -1.0;
                }
                rhs[k] = -rd[k];
            }
            for i in 0..m {
                rhs[ne + i] = -rp[i];
            }
            let step = linalg::solve(&kkt, &rhs)?;
            let mut t = 1.0;
            while (0..ne).any(|k| u[k] + t * step[k] <= 0.0) {
                t *= 0.5;
                if t < 1e-30 {
                    return Err(Error::Infeasible);
                }
            }
            let mut accepted = false;
            for _ in 0..60 {
                let un: Vec<f64> = (0..ne).map(|k| u[k] + t * step[k]).collect();
                let nn: Vec<f64> = (0..m).map(|i| nu[i] + t * step[ne + i]).collect();
                let (a, b) = residual(&un, &nn);
                if norm2(&a, &b) <= (1.0 - 0.01 * t) * rnorm {
                    u = un;
                    nu = nn;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        let (rd, rp) = residual(&u, &nu);
        let primal_gap = rp.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if primal_gap > 1e-8 * scale {
            return Err(Error::Infeasible);
        }
        if norm2(&rd, &[]) > 1e-6 {
            return Err(Error::MaxIterations(DUAL_MAX_ITERATIONS));
        }
        Ok(u.iter()
            .zip(&lam)
            .map(|(ui, li)| ui * (ui / li).ln() - ui + li)
            .sum::<f64>()
            .max(0.0))
    }
}

/// `𝐇(r, α) = -Σ r_x Γ_xy(r) [e^{-(α_y - α_x)} - 1]`.
pub fn hamiltonian_h(model: &RateFamily, r: &SimplexPoint, alpha: &[f64]) -> Result<f64> {
    if alpha.len() != model.dim() || alpha.iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidInput(
            "alpha must be a finite vector of length d".into(),
        ));
    }
    Fluxes::of(model, r).hamiltonian(alpha)
}

/// `𝐋(r, β) = sup_α [𝐇(r, α) - ⟨α, β⟩]`.
pub fn lagrangian_l(model: &RateFamily, r: &SimplexPoint, beta: &TangentVector) -> Result<f64> {
    Fluxes::of(model, r).lagrangian(beta.components())
}

/// `𝐋(r, β)` from the flow formulation `inf Σ Λ ℓ(u/Λ)`.
pub fn lagrangian_l_primal(
    model: &RateFamily,
    r: &SimplexPoint,
    beta: &TangentVector,
) -> Result<f64> {
    Fluxes::of(model, r).lagrangian_primal(beta.components())
}

/// `ℓ(z) = z log z - z + 1`.
pub fn ell(z: f64) -> f64 {
    if z == 0.0 {
        1.0
    } else {
        z * z.ln() - z + 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    pub samples: usize,
    /// `max |⟨α, β*⟩ + 𝐋(r, β*) - 𝐇(r, α)|` with `β* = ∇_α 𝐇(r, α)`.
    pub max_roundtrip_error: f64,
    /// `max |𝐋(r, r Γ(r))|`.
    pub max_dual1_error: f64,
    /// `max |𝐋_dual - 𝐋_primal|` on the first samples (only for `d ≤ 4`).
    pub max_primal_dual_error: Option<f64>,
    /// Samples where an optimizer failed; these do not enter the maxima.
    pub failures: usize,
}

/// One duality sample; returns `(roundtrip, dual1, primal_dual)`.
pub fn duality_sample(
    model: &RateFamily,
    r: &SimplexPoint,
    alpha: &[f64],
    primal: bool,
) -> Result<(f64, f64, Option<f64>)> {
    let fl = Fluxes::of(model, r);
    let h = fl.hamiltonian(alpha)?;
    let beta_star = simplex::tangent_project(&fl.gradient(alpha)?)?;
    let l = fl.lagrangian(beta_star.components())?;
    let roundtrip = (simplex::dot(alpha, beta_star.components()) + l - h).abs();
    let dual1 = fl.lagrangian(&fl.net_flux())?.abs();
    let pd = if primal {
        Some((fl.lagrangian_primal(beta_star.components())? - l).abs())
    } else {
        None
    };
    Ok((roundtrip, dual1, pd))
}

/// Random `(r, α)` with `r` interior (min coordinate 0.01) and `α ∈ [-1, 1]^d`.
pub fn duality_check(model: &RateFamily, samples: usize, seed: u64) -> Result<DualityReport> {
    if samples == 0 {
        return Err(Error::InvalidParameters(
            "duality check needs at least one sample".into(),
        ));
    }
    let d = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = DualityReport {
        samples,
        max_roundtrip_error: 0.0,
        max_dual1_error: 0.0,
        max_primal_dual_error: if d <= 4 { Some(0.0) } else { None },
        failures: 0,
    };
    for k in 0..samples {
        let r = simplex::random_interior(d, 0.01, &mut rng);
        let alpha: Vec<f64> = (0..d).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
        let primal = d <= 4 && k < 25;
        match duality_sample(model, &r, &alpha, primal) {
            Ok((rt, d1, pd)) => {
                report.max_roundtrip_error = report.max_roundtrip_error.max(rt);
                report.max_dual1_error = report.max_dual1_error.max(d1);
                if let (Some(v), Some(acc)) = (pd, report.max_primal_dual_error.as_mut()) {
                    *acc = acc.max(v);
                }
            }
            Err(e) => {
                log::warn!("duality sample {k} failed: {e}");
                report.failures += 1;
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcavityReport {
    /// Largest raw second difference `𝐇(ρ₋) + 𝐇(ρ₊) - 2𝐇(ρ)` over the grid.
    pub max_second_difference: f64,
    /// Largest error of a fine finite-difference second derivative against the analytic one.
    pub analytic_fd_max_error: f64,
    pub concave: bool,
    /// Strictness was expected (`w ∉ span{1}`, `Γ(r)` irreducible, `r` interior).
    pub strictness_expected: bool,
    pub strictly_concave: bool,
    pub passed: bool,
}

/// `-Σ (w_y - w_x)² e^{-⟨α + ρ w, e_y - e_x⟩} Λ_xy`.
pub fn hamiltonian_second_derivative(
    fl: &Fluxes,
    alpha: &[f64],
    w: &[f64],
    rho: f64,
) -> Result<f64> {
    let a: Vec<f64> = alpha.iter().zip(w).map(|(x, v)| x + rho * v).collect();
    let weights = fl.weights(&a)?;
    Ok(-fl
        .edges
        .iter()
        .zip(&weights)
        .map(|(&(x, y, _), wt)| (w[y] - w[x]).powi(2) * wt)
        .sum::<f64>())
}

/// Second differences of `ρ ↦ 𝐇(r, α + ρ w)` on an equally spaced, increasing `rho_grid`.
pub fn concavity_probe(
    model: &RateFamily,
    r: &SimplexPoint,
    alpha: &[f64],
    w: &[f64],
    rho_grid: &[f64],
) -> Result<ConcavityReport> {
    if rho_grid.len() < 3 {
        return Err(Error::InvalidInput(
            "rho grid needs at least 3 points".into(),
        ));
    }
    let fl = Fluxes::of(model, r);
    let along = |rho: f64| -> Result<f64> {
        let a: Vec<f64> = alpha.iter().zip(w).map(|(x, v)| x + rho * v).collect();
        fl.hamiltonian(&a)
    };
    let values = rho_grid
        .iter()
        .map(|&rho| along(rho))
        .collect::<Result<Vec<_>>>()?;
    let max_sd = values
        .windows(3)
        .map(|v| v[0] + v[2] - 2.0 * v[1])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut max_err = 0.0f64;
    let delta = 1e-4;
    for &rho in rho_grid {
        let fd = (along(rho + delta)? + along(rho - delta)? - 2.0 * along(rho)?) / (delta * delta);
        let an = hamiltonian_second_derivative(&fl, alpha, w, rho)?;
        max_err = max_err.max((fd - an).abs());
    }
    let centered = simplex::center(w);
    let strictness_expected = centered.iter().any(|v| v.abs() > 1e-12)
        && r.is_interior()
        && model.evaluate_rates(r).is_irreducible();
    let concave = max_sd <= 1e-10;
    let strictly_concave = max_sd <= -1e-8;
    Ok(ConcavityReport {
        max_second_difference: max_sd,
        analytic_fd_max_error: max_err,
        concave,
        strictness_expected,
        strictly_concave,
        passed: concave && (!strictness_expected || strictly_concave),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Solution,
    Subsolution,
    Violation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsolutionReport {
    pub grid_size: usize,
    pub min_value: f64,
    pub max_abs_value: f64,
    pub worst_point: SimplexPoint,
    pub verdict: Verdict,
    pub tolerance: f64,
    /// `𝐇(r, -DJ(r))` per grid point, in grid order.
    #[serde(skip)]
    pub values: Vec<f64>,
}

/// Evaluates `𝐇(r, -DJ(r))` on the grid.
pub fn subsolution_check(
    model: &RateFamily,
    j: &LyapunovCandidate,
    grid: &SimplexGrid,
) -> Result<SubsolutionReport> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty grid".into()));
    }
    if grid.dim() != model.dim() || j.dim() != model.dim() {
        return Err(Error::InvalidInput(
            "grid, candidate and model dimensions differ".into(),
        ));
    }
    let mut values = Vec::with_capacity(grid.len());
    for p in &grid.points {
        p.require_interior(1e-3 - 1e-12)?;
        let g = j.gradient(p)?;
        let alpha: Vec<f64> = g.components().iter().map(|v| -v).collect();
        values.push(hamiltonian_h(model, p, &alpha)?);
    }
    let tolerance = if j.has_analytic_gradient() {
        SOLUTION_TOLERANCE_ANALYTIC
    } else {
        SOLUTION_TOLERANCE_FD
    };
    let min_value = values.iter().copied().fold(f64::INFINITY, f64::min);
    let (worst, max_abs) = values
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |(bi, bv), (i, v)| {
            if v.abs() > bv {
                (i, v.abs())
            } else {
                (bi, bv)
            }
        });
    let verdict = if max_abs <= tolerance {
        Verdict::Solution
    } else if min_value >= -tolerance {
        Verdict::Subsolution
    } else {
        Verdict::Violation
    };
    let worst_index = if verdict == Verdict::Violation {
        values
            .iter()
            .enumerate()
            .fold(0, |bi, (i, v)| if *v < values[bi] { i } else { bi })
    } else {
        worst
    };
    Ok(SubsolutionReport {
        grid_size: grid.len(),
        min_value,
        max_abs_value: max_abs,
        worst_point: grid.points[worst_index].clone(),
        verdict,
        tolerance,
        values,
    })
}

/// `⟨DJ(r), r Γ(r)⟩`.
pub fn orbital_derivative(
    model: &RateFamily,
    j: &LyapunovCandidate,
    r: &SimplexPoint,
) -> Result<f64> {
    r.require_interior(1e-12)?;
    j.orbital_derivative(model, r)
}

fn require_stationary(gamma: &RateMatrix, pi: &SimplexPoint) -> Result<()> {
    let res = linalg::balance_residual(pi.weights(), gamma.as_slice(), gamma.dim());
    if res > 1e-10 {
        return Err(Error::NotStationary(res));
    }
    Ok(())
}

/// `ℰ_Γ(f, g) = -Σ_x f(x) (Σ_y g(y) Γ_xy) π_x`.
pub fn dirichlet_form(gamma: &RateMatrix, pi: &SimplexPoint, f: &[f64], g: &[f64]) -> Result<f64> {
    let d = gamma.dim();
    if pi.dim() != d || f.len() != d || g.len() != d {
        return Err(Error::InvalidInput("dimension mismatch".into()));
    }
    require_stationary(gamma, pi)?;
    let mut total = 0.0;
    for x in 0..d {
        let gx: f64 = (0..d).map(|y| g[y] * gamma.get(x, y)).sum();
        total -= f[x] * gx * pi[x];
    }
    Ok(total)
}

/// Donsker–Varadhan rate `ℰ_Γ(√(μ/π), √(μ/π))` for reversible `Γ`.
pub fn dv_rate_reversible(gamma: &RateMatrix, pi: &SimplexPoint, mu: &SimplexPoint) -> Result<f64> {
    require_stationary(gamma, pi)?;
    let defect = gamma.detailed_balance_defect(pi.weights());
    if defect > 1e-10 {
        return Err(Error::NotReversible(defect));
    }
    let mut f = vec![0.0; pi.dim()];
    for x in 0..pi.dim() {
        if mu[x] > 0.0 {
            if !(pi[x] > 0.0) {
                return Err(Error::SupportViolation(x));
            }
            f[x] = (mu[x] / pi[x]).sqrt();
        }
    }
    Ok(dirichlet_form(gamma, pi, &f, &f)?.max(0.0))
}
