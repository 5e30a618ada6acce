//! One function per subcommand. Each writes its artifacts and returns whether its verdict held.

use anyhow::{anyhow, bail, Context as _};
use nlmarkov_core::dynamics::{
    find_fixed_points, fixed_point_from_start, integrate_ode, Classification, FixedPointSearch,
};
use nlmarkov_core::finite_n::{
    build_lattice_chain, evolve_distribution_with, gillespie_simulate, rate_estimate,
    scaled_relative_entropy, stationary_of_chain, EvolveMethod, InitialCondition, LatticeChain,
    LatticeDistribution,
};
use nlmarkov_core::hamiltonian::{
    concavity_probe, duality_check, subsolution_check, ConcavityReport, Verdict,
};
use nlmarkov_core::lyapunov::{
    descent_check, empirical_lambda_threshold, positive_definiteness_probe,
    potential_existence_test, relative_entropy_grid_descent, slow_adaptation_bounds,
    GridDescentSummary, LyapunovCandidate, ProbeReport, SlowAdaptationBoundReport,
};
use nlmarkov_core::models::build_model;
use nlmarkov_core::{linalg, simplex, ModelSpec, RateFamily, SimplexPoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::artifacts::{indexed, ArtifactWriter, Cell};
use crate::config::{CandidateChoice, EvolveChoice, ExperimentConfig};
use crate::{Outcome, ToleranceProfile};

pub struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    pub model: RateFamily,
    pub seed: u64,
    pub profile: ToleranceProfile,
    pub out: &'a mut ArtifactWriter,
}

fn point(v: &[f64], d: usize, what: &str) -> anyhow::Result<SimplexPoint> {
    if v.len() != d {
        bail!(
            "{what} has {} coordinates, the model has {d} states",
            v.len()
        );
    }
    SimplexPoint::new(v.to_vec()).map_err(|e| anyhow!("{what}: {e}"))
}

fn verdict(ok: bool) -> Outcome {
    if ok {
        Outcome::Success
    } else {
        Outcome::VerdictFailure
    }
}

fn point_cells(p: &[f64]) -> Vec<Cell> {
    p.iter().map(|&x| Cell::Float(x)).collect()
}

/// First stable fixed point of a multistart search, or an error naming the search size.
fn stable_fixed_point(ctx: &Context) -> anyhow::Result<SimplexPoint> {
    let search = find_fixed_points(&ctx.model, ctx.cfg.fixed_points.multistarts, ctx.seed)?;
    search
        .reports
        .into_iter()
        .find(|r| r.classification == Classification::Stable)
        .map(|r| r.point)
        .ok_or_else(|| anyhow!("no stable fixed point found; set pi_star explicitly"))
}

fn reference_point(ctx: &Context, given: &Option<Vec<f64>>) -> anyhow::Result<SimplexPoint> {
    match given {
        Some(v) => point(v, ctx.model.dim(), "pi_star"),
        None => stable_fixed_point(ctx),
    }
}

/// Builds the chosen field; under the `fd` profile its analytic gradient is dropped.
fn candidate(
    ctx: &Context,
    choice: CandidateChoice,
    pi_star: Option<&SimplexPoint>,
) -> anyhow::Result<LyapunovCandidate> {
    let d = ctx.model.dim();
    let c = match choice {
        CandidateChoice::LocallyGibbs => LyapunovCandidate::locally_gibbs(&ctx.model)?,
        CandidateChoice::FreeEnergy => LyapunovCandidate::gibbs_free_energy(&ctx.model)?,
        CandidateChoice::RelativeEntropy => {
            let pi = pi_star.ok_or_else(|| anyhow!("relative_entropy needs a reference point"))?;
            LyapunovCandidate::relative_entropy(pi)?
        }
        CandidateChoice::Zero => {
            return Ok(LyapunovCandidate::custom(
                "zero",
                d,
                |_: &[f64]| 0.0,
                Some(move |_: &[f64]| vec![0.0; d]),
            )?)
        }
    };
    if ctx.profile == ToleranceProfile::Fd {
        let inner = c.clone();
        return Ok(LyapunovCandidate::custom(
            "finite-difference gradient",
            d,
            move |r: &[f64]| inner.value(r),
            None::<fn(&[f64]) -> Vec<f64>>,
        )?);
    }
    Ok(c)
}

#[derive(Serialize)]
struct OdeReport {
    model: String,
    steps: usize,
    t_end: f64,
    initial: Vec<f64>,
    final_point: Vec<f64>,
    final_stationarity_gap: f64,
}

pub fn simulate_ode(ctx: &mut Context) -> anyhow::Result<Outcome> {
    let p = &ctx.cfg.ode;
    let d = ctx.model.dim();
    let p0 = match &p.initial {
        Some(v) => point(v, d, "ode.initial")?,
        None => SimplexPoint::uniform(d),
    };
    let traj = integrate_ode(&ctx.model, &p0, p.t_end, p.dt)?;
    let last = traj.final_point().clone();
    let pi = ctx.model.stationary(last.weights())?;
    let mut header = vec!["t".to_string()];
    header.extend(indexed("r", d));
    let rows: Vec<Vec<Cell>> = traj
        .times
        .iter()
        .zip(&traj.points)
        .map(|(t, q)| {
            let mut row = vec![Cell::Float(*t)];
            row.extend(point_cells(q.weights()));
            row
        })
        .collect();
    ctx.out.csv("trajectory", &header, &rows)?;
    ctx.out.json(
        "report",
        &OdeReport {
            model: ctx.model.label().to_string(),
            steps: traj.len() - 1,
            t_end: p.t_end,
            initial: p0.weights().to_vec(),
            final_point: last.weights().to_vec(),
            final_stationarity_gap: last.l1_distance(&pi),
        },
    )?;
    Ok(Outcome::Success)
}

pub fn fixed_points(ctx: &mut Context) -> anyhow::Result<Outcome> {
    let search: FixedPointSearch =
        find_fixed_points(&ctx.model, ctx.cfg.fixed_points.multistarts, ctx.seed)?;
    let d = ctx.model.dim();
    let mut header = indexed("r", d);
    header.extend(["residual".to_string(), "classification".to_string()]);
    let rows: Vec<Vec<Cell>> = search
        .reports
        .iter()
        .map(|r| {
            let mut row = point_cells(r.point.weights());
            row.push(Cell::Float(r.residual));
            row.push(Cell::Text(format!("{:?}", r.classification)));
            row
        })
        .collect();
    ctx.out.csv("points", &header, &rows)?;
    ctx.out.json("report", &search)?;
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct StationaryReport {
    points: usize,
    max_balance_residual: f64,
    max_fixed_point_gap: f64,
}

pub fn stationary(ctx: &mut Context) -> anyhow::Result<Outcome> {
    let p = &ctx.cfg.stationary;
    let d = ctx.model.dim();
    let points: Vec<SimplexPoint> = match &p.points {
        Some(list) => list
            .iter()
            .map(|v| point(v, d, "stationary.points"))
            .collect::<anyhow::Result<_>>()?,
        None => simplex::interior_grid(d, p.resolution, p.margin)?.points,
    };
    let model = &ctx.model;
    let results: Vec<(SimplexPoint, f64)> = points
        .par_iter()
        .map(|r| {
            let pi = model.stationary(r.weights())?;
            let g = model.evaluate_rates(r);
            let res = linalg::balance_residual(pi.weights(), g.as_slice(), d);
            Ok((pi, res))
        })
        .collect::<Result<_, nlmarkov_core::Error>>()?;
    let mut header = indexed("r", d);
    header.extend(indexed("pi", d));
    header.push("balance_residual".into());
    let rows: Vec<Vec<Cell>> = points
        .iter()
        .zip(&results)
        .map(|(r, (pi, res))| {
            let mut row = point_cells(r.weights());
            row.extend(point_cells(pi.weights()));
            row.push(Cell::Float(*res));
            row
        })
        .collect();
    ctx.out.csv("values", &header, &rows)?;
    let report = StationaryReport {
        points: points.len(),
        max_balance_residual: results.iter().map(|r| r.1).fold(0.0, f64::max),
        max_fixed_point_gap: points
            .iter()
            .zip(&results)
            .map(|(r, (pi, _))| r.l1_distance(pi))
            .fold(0.0, f64::max),
    };
    ctx.out.json("report", &report)?;
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct DescentStart {
    start: Vec<f64>,
    limit: Vec<f64>,
    violations: usize,
    skipped: usize,
    discrete_increases: usize,
    max_orbital_derivative_outside_ball: f64,
}

#[derive(Serialize)]
struct DescentSummary {
    candidate: CandidateChoice,
    epsilon: f64,
    total_violations: usize,
    starts: Vec<DescentStart>,
    limit_points: Vec<Vec<f64>>,
    probes: Vec<ProbeReport>,
    passed: bool,
}

/// Per-start summary, limit point and `(t, J, dJ/dt)` samples.
type DescentRun = (DescentStart, SimplexPoint, Vec<(f64, f64, f64)>);

pub fn descent(ctx: &mut Context) -> anyhow::Result<Outcome> {
    let p = ctx.cfg.descent.clone();
    let d = ctx.model.dim();
    let search = find_fixed_points(&ctx.model, ctx.cfg.fixed_points.multistarts, ctx.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let starts: Vec<SimplexPoint> = (0..p.starts)
        .map(|_| simplex::random_interior(d, p.min_coord, &mut rng))
        .collect();
    let shared = if p.candidate == CandidateChoice::RelativeEntropy {
        None
    } else {
        Some(candidate(ctx, p.candidate, None)?)
    };
    let model = &ctx.model;
    let runs: Vec<DescentRun> = starts
        .par_iter()
        .map(|s| -> anyhow::Result<_> {
            let traj = integrate_ode(model, s, p.t_end, p.dt)?;
            let end = traj.final_point().clone();
            let limit = search
                .reports
                .iter()
                .map(|r| r.point.clone())
                .find(|q| q.l1_distance(&end) < 1e-3)
                .map_or_else(|| fixed_point_from_start(model, &end), Ok)?;
            let j = match &shared {
                Some(j) => j.clone(),
                None => LyapunovCandidate::relative_entropy(&limit)?,
            };
            let rep = descent_check(&j, model, &traj, &limit, p.epsilon);
            let worst = rep
                .samples
                .iter()
                .zip(&traj.points)
                .filter(|(_, q)| q.l1_distance(&limit) > p.epsilon)
                .map(|(s, _)| s.orbital_derivative)
                .fold(f64::NEG_INFINITY, f64::max);
            let samples = rep
                .samples
                .iter()
                .map(|s| (s.t, s.j, s.orbital_derivative))
                .collect();
            Ok((
                DescentStart {
                    start: s.weights().to_vec(),
                    limit: limit.weights().to_vec(),
                    violations: rep.violations,
                    skipped: rep.skipped,
                    discrete_increases: rep.discrete_increases,
                    max_orbital_derivative_outside_ball: worst,
                },
                limit,
                samples,
            ))
        })
        .collect::<anyhow::Result<_>>()?;

    let mut limits: Vec<SimplexPoint> = Vec::new();
    for (_, l, _) in &runs {
        if !limits.iter().any(|q| q.l1_distance(l) < 1e-6) {
            limits.push(l.clone());
        }
    }
    let mut probes = Vec::new();
    for (k, l) in limits.iter().enumerate() {
        let j = match &shared {
            Some(j) => j.clone(),
            None => LyapunovCandidate::relative_entropy(l)?,
        };
        let radius = p.probe_radius.min(0.5 * l.min_coord());
        probes.push(positive_definiteness_probe(
            &j,
            l,
            radius,
            p.probe_samples,
            ctx.seed.wrapping_add(k as u64),
        )?);
    }

    if let Some((_, _, samples)) = runs.first() {
        let header: Vec<String> = ["t", "J", "orbital_derivative"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows: Vec<Vec<Cell>> = samples
            .iter()
            .map(|&(t, j, od)| vec![Cell::Float(t), Cell::Float(j), Cell::Float(od)])
            .collect();
        ctx.out.csv("first-start", &header, &rows)?;
    }
    let total: usize = runs.iter().map(|r| r.0.violations).sum();
    let summary = DescentSummary {
        candidate: p.candidate,
        epsilon: p.epsilon,
        total_violations: total,
        starts: runs.into_iter().map(|r| r.0).collect(),
        limit_points: limits.iter().map(|l| l.weights().to_vec()).collect(),
        probes,
        passed: total == 0,
    };
    ctx.out.json("report", &summary)?;
    Ok(verdict(summary.passed))
}

#[derive(Serialize)]
struct SubsolutionSummary {
    candidate: CandidateChoice,
    analytic_gradient: bool,
    #[serde(flatten)]
    report: nlmarkov_core::hamiltonian::SubsolutionReport,
}

pub fn check_subsolution(ctx: &mut Context) -> anyhow::Result<Outcome> {
    let p = ctx.cfg.subsolution.clone();
    let d = ctx.model.dim();
    let pi = if p.candidate == CandidateChoice::RelativeEntropy {
        Some(reference_point(ctx, &p.pi_star)?)
    } else {
        None
    };
    let j = candidate(ctx, p.candidate, pi.as_ref())?;
    let grid = simplex::interior_grid_with_at_least(d, p.min_points, p.margin)?;
    let report = subsolution_check(&ctx.model, &j, &grid)?;
    let mut header = indexed("r", d);
    header.push("H".into());
    let rows: Vec<Vec<Cell>> = grid
        .points
        .iter()
        .zip(&report.values)
        .map(|(q, v)| {
            let mut row = point_cells(q.weights());
            row.push(Cell::Float(*v));
            row
        })
        .collect();
    ctx.out.csv("values", &header, &rows)?;
    let failed = report.verdict == Verdict::Violation;
    ctx.out.json(
        "report",
        &SubsolutionSummary {
            candidate: p.candidate,
            analytic_gradient: j.has_analytic_gradient(),
            report,
        },
    )?;
    Ok(verdict(!failed))
}

#[derive(Serialize)]
struct DualitySummary {
    #[serde(flatten)]
    report: nlmarkov_core::hamiltonian::DualityReport,
    roundtrip_tolerance: f64,
    dual1_tolerance: f64,
    primal_dual_tolerance: f64,
    passed: bool,
}

pub fn duality(ctx: &mut Context) -> anyhow::Result<Outcome> {
    let p = ctx.cfg.duality.clone();
    let report = duality_check(&ctx.model, p.samples, ctx.seed)?;
    let passed = report.failures == 0
        && report.max_roundtrip_error <= p.roundtrip_tolerance
        && report.max_dual1_error <= p.dual1_tolerance
        && report
            .max_primal_dual_error
            .is_none_or(|e| e <= p.primal_dual_tolerance);
    ctx.out.json(
        "report",
        &DualitySummary {
            report,
            roundtrip_tolerance: p.roundtrip_tolerance,
            dual1_tolerance: p.dual1_tolerance,
            primal_dual_tolerance: p.primal_dual_tolerance,
            passed,
        },
    )?;
    Ok(verdict(passed))
}

#[derive(Serialize)]
struct ConcavitySample {
    r: Vec<f64>,
    alpha: Vec<f64>,
    w: Vec<f64>,
    #[serde(flatten)]
    report: ConcavityReport,
}

#[derive(Serialize)]
struct ConcavitySummary {
    samples: Vec<ConcavitySample>,
    failures: usize,
    passed: bool,
}

pub fn concavity(ctx: &mut Context) -> anyhow::Result<Outcome> {
    let p = ctx.cfg.concavity.clone();
    if p.rho_points < 3 || !(p.rho_max > p.rho_min) {
        bail!("concavity needs rho_points >= 3 and rho_max > rho_min");
    }
    let d = ctx.model.dim();
    let step = (p.rho_max - p.rho_min) / (p.rho_points - 1) as f64;
    let rho: Vec<f64> = (0..p.rho_points)
        .map(|k| p.rho_min + step * k as f64)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let inputs: Vec<(SimplexPoint, Vec<f64>, Vec<f64>)> = (0..p.samples)
        .map(|_| {
            let r = simplex::random_interior(d, 0.02, &mut rng);
            let alpha: Vec<f64> = (0..d).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
            let w = simplex::random_tangent_direction(d, &mut rng);
            (r, alpha, w)
        })
        .collect();
    let model = &ctx.model;
    let samples: Vec<ConcavitySample> = inputs
        .into_par_iter()
        .map(|(r, alpha, w)| {
            let report = concavity_probe(model, &r, &alpha, &w, &rho)?;
            Ok(ConcavitySample {
                r: r.weights().to_vec(),
                alpha,
                w,
                report,
            })
        })
        .collect::<Result<_, nlmarkov_core::Error>>()?;
    let failures = samples.iter().filter(|s| !s.report.passed).count();
    ctx.out.json(
        "report",
        &ConcavitySummary {
            samples,
            failures,
            passed: failures == 0,
        },
    )?;
    Ok(verdict(failures == 0))
}

pub fn potential_test(ctx: &mut Context) -> anyhow::Result<Outcome> {
    let p = ctx.cfg.potential_test.clone();
    let grid = simplex::interior_grid(ctx.model.dim(), p.resolution, p.margin)?;
    let report = potential_existence_test(&ctx.model, &grid, p.h)?;
    ctx.out.json("report", &report)?;
    Ok(verdict(report.passed))
}

#[derive(Serialize)]
struct SlowAdaptationSummary {
    pi_star: Vec<f64>,
    bounds: SlowAdaptationBoundReport,
    /// Grid descent of `R(·‖π*)` at half the analytic bound.
    descent_at_half_lambda_2: GridDescentSummary,
    /// Grid descent of `R(·‖π*)` for the unslowed family.
    descent_at_lambda_1_equal_one: GridDescentSummary,
    /// Largest λ with grid-verified descent (bisection); not a proven bound.
    empirical_lambda: Option<f64>,
    empirical_error: Option<String>,
    passed: bool,
}

pub fn slow_adaptation(ctx: &mut Context) -> anyhow::Result<Outcome> {
    let p = ctx.cfg.slow_adaptation.clone();
    let pi = reference_point(ctx, &p.pi_star)?;
    let bounds = slow_adaptation_bounds(&ctx.model, &pi, p.lipschitz_samples, ctx.seed)?;
    let grid = simplex::interior_grid_with_at_least(ctx.model.dim(), p.min_points, p.margin)?;
    let base = ctx.cfg.model.clone();
    let make = |lambda: f64| {
        build_model(&ModelSpec::SlowAdaptation {
            base: Box::new(base.clone()),
            pi_star: pi.weights().to_vec(),
            lambda,
        })
    };
    let exclusion = 1e-9;
    let half = relative_entropy_grid_descent(&make(0.5 * bounds.lambda_2)?, &pi, &grid, exclusion)?;
    let full = relative_entropy_grid_descent(&ctx.model, &pi, &grid, exclusion)?;
    let (empirical_lambda, empirical_error) = match empirical_lambda_threshold(
        make,
        &pi,
        &grid,
        p.bisection_floor,
        p.bisection_iterations,
    ) {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let passed = half.violations == 0;
    ctx.out.json(
        "report",
        &SlowAdaptationSummary {
            pi_star: pi.weights().to_vec(),
            bounds,
            descent_at_half_lambda_2: half,
            descent_at_lambda_1_equal_one: full,
            empirical_lambda,
            empirical_error,
            passed,
        },
    )?;
    Ok(verdict(passed))
}

fn with_default_point(init: &InitialCondition, d: usize) -> InitialCondition {
    match init {
        InitialCondition::PointMass { p } if p.is_empty() => InitialCondition::PointMass {
            p: vec![1.0 / d as f64; d],
        },
        InitialCondition::Iid { q } if q.is_empty() => InitialCondition::Iid {
            q: vec![1.0 / d as f64; d],
        },
        other => other.clone(),
    }
}

/// Mean of the empirical measure at time zero.
fn mean_of_initial(init: &InitialCondition, d: usize) -> anyhow::Result<SimplexPoint> {
    Ok(match init {
        InitialCondition::PointMass { p } => point(p, d, "initial.p")?,
        InitialCondition::Iid { q } => point(q, d, "initial.q")?,
        InitialCondition::Lattice { counts, mass } => {
            let total: f64 = mass.iter().sum();
            let mut m = vec![0.0; d];
            for (c, w) in counts.iter().zip(mass) {
                let n: u32 = c.iter().sum();
                for x in 0..d {
                    m[x] += w / total * c[x] as f64 / n.max(1) as f64;
                }
            }
            SimplexPoint::new(m)?
        }
    })
}

fn lattice_rows(chain: &LatticeChain, values: &[Cell]) -> Vec<Vec<Cell>> {
    (0..chain.len())
        .map(|i| {
            let mut row = point_cells(chain.point(i).weights());
            row.push(match &values[i] {
                Cell::Float(x) => Cell::Float(*x),
                _ => Cell::Missing,
            });
            row
        })
        .collect()
}

#[derive(Serialize)]
struct FiniteNReport {
    n: usize,
    states: usize,
    t: f64,
    dt: f64,
    method: String,
    max_exit_rate: f64,
    mean_at_t: Vec<f64>,
    ode_at_t: Vec<f64>,
    mean_ode_l1_gap: f64,
    stationary_mean: Option<Vec<f64>>,
    stationary_error: Option<String>,
    /// Entropies tabulated for every lattice state (false when the lattice exceeds the limit).
    entropy_tabulated: bool,
}

pub fn finite_n(ctx: &mut Context) -> anyhow::Result<Outcome> {
    let p = ctx.cfg.finite_n.clone();
    let d = ctx.model.dim();
    let chain = build_lattice_chain(&ctx.model, p.n)?;
    let init = with_default_point(&p.initial, d);
    let u0 = init.lattice_law(&chain)?;
    let q = chain.max_exit_rate();
    let dt = p.dt.unwrap_or(if q > 0.0 { 0.1 / q } else { 1e-2 });
    let method = match p.method {
        EvolveChoice::Auto => EvolveMethod::Auto,
        EvolveChoice::Rk4 => EvolveMethod::Rk4,
        EvolveChoice::Uniformization => EvolveMethod::Uniformization,
    };
    let used = match method {
        EvolveMethod::Auto if q * p.t_end > nlmarkov_core::finite_n::UNIFORMIZATION_THRESHOLD => {
            "uniformization"
        }
        EvolveMethod::Uniformization => "uniformization",
        _ => "rk4",
    };
    let ut = evolve_distribution_with(&chain, &u0, p.t_end, dt, method)?;
    let p0 = SimplexPoint::new(u0.mean(&chain))?;
    let ode = integrate_ode(&ctx.model, &p0, p.t_end, 1e-3)?;
    let mean_t = ut.mean(&chain);
    let (stationary, stationary_error) = match stationary_of_chain(&chain) {
        Ok(s) => (Some(s), None),
        Err(e) => (None, Some(e.to_string())),
    };

    let mut header = indexed("r", d);
    header.push("mass".into());
    let masses: Vec<Cell> = ut.mass.iter().map(|&m| Cell::Float(m)).collect();
    ctx.out
        .csv("evolved", &header, &lattice_rows(&chain, &masses))?;
    if let Some(s) = &stationary {
        let masses: Vec<Cell> = s.mass.iter().map(|&m| Cell::Float(m)).collect();
        ctx.out
            .csv("stationary", &header, &lattice_rows(&chain, &masses))?;
    }
    let mut header = indexed("r", d);
    header.push("J_hat".into());
    let est: Vec<Cell> = rate_estimate(&ut)?.into_iter().map(Cell::from).collect();
    ctx.out
        .csv("rate-estimate", &header, &lattice_rows(&chain, &est))?;
    if let Some(s) = &stationary {
        let est: Vec<Cell> = rate_estimate(s)?.into_iter().map(Cell::from).collect();
        ctx.out.csv(
            "stationary-rate-estimate",
            &header,
            &lattice_rows(&chain, &est),
        )?;
    }

    let tabulate = chain.len() <= p.entropy_table_limit;
    if tabulate {
        let entropy = |u: &LatticeDistribution| -> Vec<Option<f64>> {
            (0..chain.len())
                .into_par_iter()
                .map(|i| scaled_relative_entropy(&chain, &chain.point(i), u).ok())
                .collect()
        };
        let at_t = entropy(&ut);
        let at_inf = stationary.as_ref().map(&entropy);
        let mut header = indexed("r", d);
        header.extend(["F_t".to_string(), "F_stationary".to_string()]);
        let rows: Vec<Vec<Cell>> = (0..chain.len())
            .map(|i| {
                let mut row = point_cells(chain.point(i).weights());
                row.push(Cell::from(at_t[i]));
                row.push(at_inf.as_ref().map_or(Cell::Missing, |v| Cell::from(v[i])));
                row
            })
            .collect();
        ctx.out.csv("scaled-entropy", &header, &rows)?;
    }

    let report = FiniteNReport {
        n: p.n,
        states: chain.len(),
        t: p.t_end,
        dt,
        method: used.into(),
        max_exit_rate: q,
        mean_ode_l1_gap: simplex::l1_distance(&mean_t, ode.final_point().weights()),
        mean_at_t: mean_t,
        ode_at_t: ode.final_point().weights().to_vec(),
        stationary_mean: stationary.as_ref().map(|s| s.mean(&chain)),
        stationary_error,
        entropy_tabulated: tabulate,
    };
    ctx.out.json("report", &report)?;
    Ok(Outcome::Success)
}

#[derive(Serialize)]
pub struct ParticleSummary {
    pub n: usize,
    pub replicas: usize,
    pub t_end: f64,
    pub threshold: f64,
    pub within_threshold: usize,
    pub min: f64,
    pub q05: f64,
    pub median: f64,
    pub q95: f64,
    pub max: f64,
    pub mean_jumps: f64,
}

/// Empirical quantile by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn particles(ctx: &mut Context) -> anyhow::Result<Outcome> {
    let p = ctx.cfg.particles.clone();
    if p.replicas == 0 {
        bail!("particles needs at least one replica");
    }
    let d = ctx.model.dim();
    let init = with_default_point(&p.initial, d);
    let p0 = mean_of_initial(&init, d)?;
    let ode = integrate_ode(&ctx.model, &p0, p.t_end, p.ode_dt)?;
    let model = &ctx.model;
    let seed = ctx.seed;
    let runs: Vec<(f64, usize, Option<nlmarkov_core::finite_n::EmpiricalPath>)> = (0..p.replicas
        as u64)
        .into_par_iter()
        .map(|k| {
            let path = gillespie_simulate(model, p.n, &init, p.t_end, seed, k)?;
            let dev = path.sup_deviation(&ode);
            let jumps = path.jump_times.len() - 1;
            Ok((dev, jumps, if k == 0 { Some(path) } else { None }))
        })
        .collect::<Result<_, nlmarkov_core::Error>>()
        .context("particle simulation")?;
    let deviations: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let mut sorted = deviations.clone();
    sorted.sort_by(f64::total_cmp);
    let rows: Vec<Vec<Cell>> = deviations
        .iter()
        .enumerate()
        .map(|(k, &v)| vec![Cell::Int(k as u64), Cell::Float(v)])
        .collect();
    ctx.out.csv(
        "deviations",
        &["replica".to_string(), "sup_deviation".to_string()],
        &rows,
    )?;
    if let Some(path) = runs.first().and_then(|r| r.2.as_ref()) {
        let mut header = vec!["t".to_string()];
        header.extend(indexed("r", d));
        let rows: Vec<Vec<Cell>> = path
            .jump_times
            .iter()
            .zip(&path.states)
            .map(|(t, s)| {
                let mut row = vec![Cell::Float(*t)];
                row.extend(point_cells(s.weights()));
                row
            })
            .collect();
        ctx.out.csv("path", &header, &rows)?;
    }
    let summary = ParticleSummary {
        n: p.n,
        replicas: p.replicas,
        t_end: p.t_end,
        threshold: p.threshold,
        within_threshold: deviations.iter().filter(|&&v| v <= p.threshold).count(),
        min: sorted[0],
        q05: quantile(&sorted, 0.05),
        median: quantile(&sorted, 0.5),
        q95: quantile(&sorted, 0.95),
        max: sorted[sorted.len() - 1],
        mean_jumps: runs.iter().map(|r| r.1 as f64).sum::<f64>() / p.replicas as f64,
    };
    ctx.out.json("summary", &summary)?;
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct LandscapeSummary {
    candidate: CandidateChoice,
    points: usize,
    min_value: f64,
    argmin: Vec<f64>,
}

pub fn landscape(ctx: &mut Context) -> anyhow::Result<Outcome> {
    let p = ctx.cfg.landscape.clone();
    let d = ctx.model.dim();
    let pi = if p.candidate == CandidateChoice::RelativeEntropy {
        Some(reference_point(ctx, &p.pi_star)?)
    } else {
        None
    };
    let j = candidate(ctx, p.candidate, pi.as_ref())?;
    let grid = simplex::interior_grid(d, p.resolution, p.margin)?;
    let values: Vec<f64> = grid
        .points
        .par_iter()
        .map(|q| j.value(q.weights()))
        .collect();
    let mut header = indexed("r", d);
    header.push("value".into());
    let rows: Vec<Vec<Cell>> = grid
        .points
        .iter()
        .zip(&values)
        .map(|(q, v)| {
            let mut row = point_cells(q.weights());
            row.push(Cell::Float(*v));
            row
        })
        .collect();
    ctx.out.csv("values", &header, &rows)?;
    let (k, min_value) =
        values.iter().enumerate().fold(
            (0, f64::INFINITY),
            |b, (i, &v)| if v < b.1 { (i, v) } else { b },
        );
    ctx.out.json(
        "report",
        &LandscapeSummary {
            candidate: p.candidate,
            points: grid.len(),
            min_value,
            argmin: grid.points[k].weights().to_vec(),
        },
    )?;
    Ok(Outcome::Success)
}
