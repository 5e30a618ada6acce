//! Acceptance suite. Prints one PASS/FAIL line per criterion with its sub-checks.
//!
//! A sub-check marked as a documented gap is reported as FAIL when it fails but
//! does not fail the process; every other failure does.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nlmarkov_core::dynamics::vector_field;
use nlmarkov_core::finite_n::{
    build_lattice_chain, product_form_law, rate_estimate, stationary_of_chain,
};
use nlmarkov_core::hamiltonian::{
    dirichlet_form, duality_check, hamiltonian_h, subsolution_check, Verdict,
};
use nlmarkov_core::lyapunov::{relative_entropy, LyapunovCandidate};
use nlmarkov_core::models::build_model;
use nlmarkov_core::{simplex, ModelSpec, RateFamily, RateMatrix, SimplexPoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

// Tolerances and budgets.
const FIXED_POINT_TOL: f64 = 1e-8;
const FIXED_POINT_BUDGET: Duration = Duration::from_secs(5);
const SOLUTION_TOL_ANALYTIC: f64 = 1e-7;
const SOLUTION_TOL_FD: f64 = 1e-4;
const SUBSOLUTION_BUDGET: Duration = Duration::from_secs(30);
const DUAL1_TOL: f64 = 1e-8;
const ROUNDTRIP_TOL: f64 = 1e-6;
const PRIMAL_DUAL_TOL: f64 = 1e-6;
const DUALITY_BUDGET: Duration = Duration::from_secs(60);
const STRICT_MARGIN: f64 = 1e-12;
const ASYMMETRY_REL_TOL: f64 = 0.05;
const RECONSTRUCTION_TOL: f64 = 1e-6;
const PRODUCT_FORM_TOL: f64 = 1e-10;
const FINITE_N_BUDGET: Duration = Duration::from_secs(120);
const CHAOS_THRESHOLD: f64 = 0.1;
const CHAOS_MIN_WITHIN: usize = 95;
const CHAOS_RATIO_BAND: (f64, f64) = (1.6, 2.6);
const CHAOS_BUDGET: Duration = Duration::from_secs(120);
const DIRICHLET_GAP: f64 = 0.01;

struct Check {
    name: String,
    passed: bool,
    detail: String,
    documented_gap: bool,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
        documented_gap: false,
    }
}

fn gap(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
        documented_gap: true,
    }
}

fn within(name: &str, elapsed: Duration, budget: Duration) -> Check {
    check(
        name,
        elapsed <= budget,
        format!(
            "{:.2} s (budget {} s)",
            elapsed.as_secs_f64(),
            budget.as_secs()
        ),
    )
}

fn curie_weiss(beta: f64) -> ModelSpec {
    ModelSpec::curie_weiss(beta)
}

fn three_state(kappa: f64, c: [f64; 3], non_gibbs: bool) -> ModelSpec {
    if non_gibbs {
        ModelSpec::ThreeStateNonGibbs {
            a1: 1.0,
            a2: 2.0,
            b2: 1.5,
            b3: 0.5,
            kappa,
            c,
            r_star: None,
        }
    } else {
        ModelSpec::ThreeStateB {
            a1: 1.0,
            a2: 2.0,
            b2: 1.5,
            b3: 0.5,
            kappa,
            c,
            r_star: None,
        }
    }
}

/// Every family in the catalog, one parameter set each (two for GibbsAffine).
fn catalog() -> Vec<ModelSpec> {
    vec![
        ModelSpec::Constant {
            rates: vec![
                vec![-2.0, 1.5, 0.5],
                vec![0.3, -0.8, 0.5],
                vec![1.0, 2.0, -3.0],
            ],
        },
        curie_weiss(2.0),
        ModelSpec::GibbsAffine {
            v: vec![0.1, -0.2, 0.3],
            w: vec![
                vec![0.0, 0.5, -0.3],
                vec![0.5, 0.2, 0.1],
                vec![-0.3, 0.1, 0.0],
            ],
            beta: 1.3,
            adjacency: Some(vec![vec![0, 1, 0], vec![1, 0, 1], vec![0, 1, 0]]),
        },
        ModelSpec::SlowAdaptation {
            base: Box::new(curie_weiss(0.5)),
            pi_star: vec![0.5, 0.5],
            lambda: 0.3,
        },
        ModelSpec::BirthDeathPhiPsi {
            psi: vec!["1 + r1*r2".into(), "exp(r3)".into()],
            phi: vec!["1 + w".into(), "2 - w".into(), "1 + w^2".into()],
        },
        ModelSpec::MetropolisGGibbs {
            k: vec!["r2".into(), "r1 + 0.5*r3".into(), "0.3*r1*r2".into()],
            r: vec!["log(1 + w)".into(), "w".into(), "0.5".into()],
            adjacency: None,
        },
        three_state(1.0, [0.3, 1.0, 1.0], false),
        three_state(1.0, [0.3, 1.0, 1.0], true),
        ModelSpec::NearestNeighborCost {
            a: vec!["1 + w".into(), "2".into(), "exp(-w)".into()],
            b: vec!["1.5".into(), "1 + w^2".into(), "0.7 + w".into()],
        },
        ModelSpec::Telecom {
            capacity: 3,
            lambda: vec![1.0, 0.5],
            mu: vec![1.0, 2.0],
            gamma: vec![0.5, 0.3],
            sizes: vec![1, 1],
        },
        ModelSpec::NonLocallyGibbs {
            a1: "0.5 + 0.3*r1".into(),
            a2: "0.4 + 0.2*r2*r3".into(),
            psi: "0.5 + 0.3*w".into(),
        },
    ]
}

fn build(spec: &ModelSpec) -> RateFamily {
    build_model(spec).unwrap_or_else(|e| panic!("{}: {e}", spec.variant_name()))
}

struct Cli {
    root: tempfile::TempDir,
    runs: usize,
}

struct CliRun {
    code: i32,
    out: PathBuf,
}

impl CliRun {
    fn json(&self, command: &str, kind: &str) -> Value {
        let path = self.out.join(format!("{command}.{kind}.json"));
        let text = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        serde_json::from_str(&text).unwrap()
    }
}

impl Cli {
    fn new() -> Self {
        Self {
            root: tempfile::tempdir().unwrap(),
            runs: 0,
        }
    }

    fn run(&mut self, config: &Value, command: &str, extra: &[&str]) -> CliRun {
        self.runs += 1;
        let dir = self.root.path().join(format!("run{}", self.runs));
        fs::create_dir_all(&dir).unwrap();
        let cfg = dir.join("config.json");
        fs::write(&cfg, serde_json::to_string_pretty(config).unwrap()).unwrap();
        let out = dir.join("out");
        let status = Command::new(env!("CARGO_BIN_EXE_nlmarkov"))
            .arg(command)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .args(extra)
            .status()
            .expect("spawning the CLI");
        CliRun {
            code: status.code().unwrap_or(-1),
            out,
        }
    }
}

fn config(model: &ModelSpec, seed: u64, sections: Value) -> Value {
    let mut v = json!({ "version": 1, "seed": seed, "model": model });
    if let (Some(obj), Some(extra)) = (v.as_object_mut(), sections.as_object()) {
        for (k, x) in extra {
            obj.insert(k.clone(), x.clone());
        }
    }
    v
}

/// Bisection for a zero of `f'(x) = log x - log(1-x) + 2β - 4βx` on `[lo, hi]`.
fn bisect_critical_point(beta: f64, mut lo: f64, mut hi: f64) -> f64 {
    let fp = |x: f64| x.ln() - (1.0 - x).ln() + 2.0 * beta - 4.0 * beta * x;
    let neg_at_lo = fp(lo) < 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (fp(mid) < 0.0) == neg_at_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn criterion_1(cli: &mut Cli) -> Vec<Check> {
    let start = Instant::now();
    let low = cli.run(
        &config(&curie_weiss(0.5), 1, json!({})),
        "fixed-points",
        &[],
    );
    let high = cli.run(
        &config(&curie_weiss(2.0), 1, json!({})),
        "fixed-points",
        &[],
    );
    let elapsed = start.elapsed();
    let reports = |run: &CliRun| -> Vec<(f64, String)> {
        run.json("fixed-points", "report")["reports"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| {
                (
                    r["point"][0].as_f64().unwrap(),
                    r["classification"].as_str().unwrap().to_string(),
                )
            })
            .collect()
    };
    let lo = reports(&low);
    let hi = reports(&high);
    let x_beta = bisect_critical_point(2.0, 1e-12, 0.5 - 1e-9);
    let mut checks = vec![
        check(
            "exit codes",
            low.code == 0 && high.code == 0,
            format!("{} and {}", low.code, high.code),
        ),
        check(
            "β=0.5: one stable point at 1/2",
            lo.len() == 1 && (lo[0].0 - 0.5).abs() <= FIXED_POINT_TOL && lo[0].1 == "Stable",
            format!("{lo:?}"),
        ),
    ];
    let mut sorted = hi.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let ok = sorted.len() == 3
        && (sorted[1].0 - 0.5).abs() <= FIXED_POINT_TOL
        && sorted[1].1 == "Unstable"
        && (sorted[0].0 - x_beta).abs() <= FIXED_POINT_TOL
        && (sorted[2].0 - (1.0 - x_beta)).abs() <= FIXED_POINT_TOL
        && sorted[0].1 == "Stable"
        && sorted[2].1 == "Stable";
    checks.push(check(
        "β=2: three points, x_β matches bisection",
        ok,
        format!("{sorted:?}, oracle x_β = {x_beta:.12}"),
    ));
    checks.push(within("runtime", elapsed, FIXED_POINT_BUDGET));
    checks
}

fn criterion_2() -> Vec<Check> {
    let start = Instant::now();
    let specs = vec![
        curie_weiss(2.0),
        catalog()[2].clone(),
        catalog()[4].clone(),
        catalog()[5].clone(),
        three_state(1.0, [0.3, 1.0, 1.0], false),
        three_state(1.0, [0.3, 1.0, 1.0], true),
        catalog()[8].clone(),
        catalog()[9].clone(),
        catalog()[10].clone(),
    ];
    let rows: Vec<(String, Verdict, f64, Verdict, f64, usize)> = specs
        .par_iter()
        .map(|spec| {
            let m = build(spec);
            let grid = simplex::interior_grid_with_at_least(m.dim(), 200, 0.02).unwrap();
            let j = LyapunovCandidate::locally_gibbs(&m).unwrap();
            let a = subsolution_check(&m, &j, &grid).unwrap();
            let inner = j.clone();
            let fd = LyapunovCandidate::custom(
                "fd",
                m.dim(),
                move |r: &[f64]| inner.value(r),
                None::<fn(&[f64]) -> Vec<f64>>,
            )
            .unwrap();
            let b = subsolution_check(&m, &fd, &grid).unwrap();
            (
                spec.variant_name().to_string(),
                a.verdict,
                a.max_abs_value,
                b.verdict,
                b.max_abs_value,
                grid.len(),
            )
        })
        .collect();
    let elapsed = start.elapsed();
    let mut checks: Vec<Check> = rows
        .iter()
        .map(|(name, va, ha, vb, hb, n)| {
            check(
                name,
                *va == Verdict::Solution
                    && *ha <= SOLUTION_TOL_ANALYTIC
                    && *vb == Verdict::Solution
                    && *hb <= SOLUTION_TOL_FD,
                format!("{n} points, analytic max|H| = {ha:.2e}, fd max|H| = {hb:.2e}"),
            )
        })
        .collect();
    checks.push(within("runtime", elapsed, SUBSOLUTION_BUDGET));
    checks
}

fn criterion_3() -> Vec<Check> {
    let start = Instant::now();
    let reports: Vec<_> = catalog()
        .par_iter()
        .enumerate()
        .map(|(k, spec)| {
            let m = build(spec);
            (
                spec.variant_name(),
                m.dim(),
                duality_check(&m, 50, 100 + k as u64).unwrap(),
            )
        })
        .collect();
    let elapsed = start.elapsed();
    let mut checks: Vec<Check> = reports
        .iter()
        .map(|(name, d, r)| {
            let pd_ok = r.max_primal_dual_error.is_none_or(|e| e <= PRIMAL_DUAL_TOL);
            check(
                &format!("{name} (d = {d})"),
                r.failures == 0
                    && r.max_dual1_error <= DUAL1_TOL
                    && r.max_roundtrip_error <= ROUNDTRIP_TOL
                    && pd_ok,
                format!(
                    "dual1 {:.1e}, roundtrip {:.1e}, primal-dual {}",
                    r.max_dual1_error,
                    r.max_roundtrip_error,
                    r.max_primal_dual_error
                        .map_or("n/a (d > 4)".into(), |e| format!("{e:.1e}"))
                ),
            )
        })
        .collect();
    checks.push(within("runtime", elapsed, DUALITY_BUDGET));
    checks
}

fn criterion_4(cli: &mut Cli) -> Vec<Check> {
    let section = json!({
        "descent": { "candidate": "locally_gibbs", "starts": 20, "t_end": 20.0, "dt": 1e-3, "epsilon": 1e-4 }
    });
    catalog()
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let run = cli.run(
                &config(spec, 40 + k as u64, section.clone()),
                "descent",
                &[],
            );
            let rep = run.json("descent", "report");
            let violations = rep["total_violations"].as_u64().unwrap_or(u64::MAX);
            let starts = rep["starts"].as_array().map_or(0, Vec::len);
            check(
                spec.variant_name(),
                run.code == 0 && violations == 0 && starts == 20,
                format!(
                    "{starts} starts, {violations} violations, exit {}",
                    run.code
                ),
            )
        })
        .collect()
}

fn criterion_5() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let models: Vec<RateFamily> = catalog().iter().map(build).collect();
    let mut worst = f64::INFINITY;
    let mut failures = 0;
    for k in 0..400 {
        let m = &models[k % models.len()];
        let d = m.dim();
        let r = simplex::random_interior(d, 0.01, &mut rng);
        let scale = 0.2 + 1.8 * rng.random::<f64>();
        let alpha: Vec<f64> = simplex::random_tangent_direction(d, &mut rng)
            .iter()
            .map(|a| a * scale)
            .collect();
        let h = hamiltonian_h(m, &r, &alpha).unwrap();
        let flow = simplex::dot(&alpha, vector_field(m, &r).components());
        let gap = flow - h;
        worst = worst.min(gap);
        if !(h < flow - STRICT_MARGIN) {
            failures += 1;
        }
    }
    vec![check(
        "400 pairs",
        failures == 0,
        format!("{failures} failures, smallest gap {worst:.3e}"),
    )]
}

fn criterion_6(cli: &mut Cli) -> Vec<Check> {
    let run = cli.run(
        &config(
            &curie_weiss(2.0),
            6,
            json!({ "slow_adaptation": { "min_points": 200 } }),
        ),
        "slow-adaptation",
        &[],
    );
    let rep = run.json("slow-adaptation", "report");
    let l2 = rep["bounds"]["lambda_2"].as_f64().unwrap();
    let half = &rep["descent_at_half_lambda_2"];
    let full = &rep["descent_at_lambda_1_equal_one"];
    vec![
        check(
            "λ₂ ∈ (0, 1)",
            l2 > 0.0 && l2 < 1.0,
            format!("λ₂ = {l2:.4e}, exit {}", run.code),
        ),
        check(
            "no violations at λ₂/2",
            half["violations"].as_u64() == Some(0) && half["points"].as_u64().unwrap() >= 200,
            format!(
                "{} points, max derivative {:.3e}",
                half["points"],
                half["max_orbital_derivative"].as_f64().unwrap()
            ),
        ),
        check(
            "positive derivative somewhere at λ = 1",
            full["max_orbital_derivative"].as_f64().unwrap() > 0.0,
            format!(
                "max derivative {:.3e}, {} violations",
                full["max_orbital_derivative"].as_f64().unwrap(),
                full["violations"]
            ),
        ),
    ]
}

fn criterion_7(cli: &mut Cli) -> Vec<Check> {
    let spec = |c: [f64; 3]| ModelSpec::ThreeStateB {
        a1: 1.0,
        a2: 1.0,
        b2: 1.0,
        b3: 1.0,
        kappa: 1.0,
        c,
        r_star: None,
    };
    let section = json!({ "potential_test": { "resolution": 10, "margin": 0.05, "h": 1e-4 } });
    let bad = cli.run(
        &config(&spec([0.0, 1.0, 0.0]), 7, section.clone()),
        "potential-test",
        &[],
    );
    let good = cli.run(
        &config(&spec([0.0, 1.0, 1.0]), 7, section),
        "potential-test",
        &[],
    );
    let b = bad.json("potential-test", "report");
    let g = good.json("potential-test", "report");
    let asym = b["max_asymmetry"].as_f64().unwrap();
    let recon = g["reconstruction_error"].as_f64().unwrap_or(f64::INFINITY);
    vec![
        check(
            "c = (0,1,0) fails, asymmetry ≈ 1",
            bad.code == 2 && b["passed"] == false && (asym - 1.0).abs() <= ASYMMETRY_REL_TOL,
            format!("asymmetry {asym:.6}, exit {}", bad.code),
        ),
        check(
            "c = (0,1,1) passes, potential reconstructed",
            good.code == 0 && g["passed"] == true && recon <= RECONSTRUCTION_TOL,
            format!("reconstruction error {recon:.2e}, exit {}", good.code),
        ),
    ]
}

/// `max |Ĵ(q) - R(q‖π)|` over lattice points with every coordinate positive.
fn interior_rate_error(model: &RateFamily, pi: &SimplexPoint, n: usize) -> f64 {
    let chain = build_lattice_chain(model, n).unwrap();
    let est = rate_estimate(&stationary_of_chain(&chain).unwrap()).unwrap();
    (0..chain.len())
        .filter(|&i| chain.counts(i).iter().all(|&c| c > 0))
        .map(|i| (est[i].unwrap() - relative_entropy(&chain.point(i), pi).unwrap()).abs())
        .fold(0.0, f64::max)
}

fn criterion_8() -> Vec<Check> {
    let start = Instant::now();
    let constant =
        RateFamily::constant(RateMatrix::from_rows(&[vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap())
            .unwrap();
    let pi = SimplexPoint::new(vec![2.0 / 3.0, 1.0 / 3.0]).unwrap();
    let chain = build_lattice_chain(&constant, 50).unwrap();
    let stat = stationary_of_chain(&chain).unwrap();
    let exact = product_form_law(&chain, &pi);
    let pf_err = stat
        .mass
        .iter()
        .zip(&exact.mass)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let e50 = interior_rate_error(&constant, &pi, 50);
    let e200 = interior_rate_error(&constant, &pi, 200);

    let gibbs = build(&curie_weiss(0.5));
    let argmins: Vec<(usize, usize)> = [50usize, 100, 200]
        .iter()
        .map(|&n| {
            let chain = build_lattice_chain(&gibbs, n).unwrap();
            let est = rate_estimate(&stationary_of_chain(&chain).unwrap()).unwrap();
            let k = (0..chain.len())
                .min_by(|&a, &b| est[a].unwrap().total_cmp(&est[b].unwrap()))
                .unwrap();
            let nearest = chain.nearest(&SimplexPoint::uniform(2));
            (
                chain.counts(k)[0] as usize,
                chain.counts(nearest)[0] as usize,
            )
        })
        .collect();
    let elapsed = start.elapsed();
    vec![
        check(
            "product form at N = 50",
            pf_err <= PRODUCT_FORM_TOL,
            format!("max mass error {pf_err:.2e}"),
        ),
        check(
            "rate estimate converges",
            e200 < e50,
            format!("interior ℓ∞ error {e50:.4e} (N=50) vs {e200:.4e} (N=200)"),
        ),
        gap(
            "GibbsAffine β=0.5 argmin at nearest lattice point",
            argmins.iter().all(|(a, b)| a == b),
            format!("(argmin count, nearest count) per N ∈ {{50,100,200}}: {argmins:?}"),
        ),
        within("runtime", elapsed, FINITE_N_BUDGET),
    ]
}

fn particle_summary(cli: &mut Cli, n: usize) -> Value {
    let section = json!({
        "particles": {
            "n": n, "replicas": 100, "t_end": 2.0, "ode_dt": 1e-3, "threshold": CHAOS_THRESHOLD,
            "initial": { "kind": "iid", "q": [0.9, 0.1] }
        }
    });
    cli.run(&config(&curie_weiss(0.5), 9, section), "particles", &[])
        .json("particles", "summary")
}

fn criterion_9(cli: &mut Cli) -> Vec<Check> {
    let start = Instant::now();
    let small = particle_summary(cli, 1000);
    let large = particle_summary(cli, 4000);
    let elapsed = start.elapsed();
    let within_count = small["within_threshold"].as_u64().unwrap() as usize;
    let ratio = small["median"].as_f64().unwrap() / large["median"].as_f64().unwrap();
    vec![
        gap(
            "N = 1000: ≥ 95 of 100 within 0.1",
            within_count >= CHAOS_MIN_WITHIN,
            format!(
                "{within_count} within, median {:.4}, q95 {:.4}",
                small["median"], small["q95"]
            ),
        ),
        check(
            "median ratio N=1000 → 4000",
            ratio >= CHAOS_RATIO_BAND.0 && ratio <= CHAOS_RATIO_BAND.1,
            format!("ratio {ratio:.3}"),
        ),
        within("runtime", elapsed, CHAOS_BUDGET),
    ]
}

fn criterion_10() -> Vec<Check> {
    let g = RateMatrix::from_rows(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap();
    let pi = SimplexPoint::uniform(2);
    let ratio = |f: [f64; 2]| {
        let s = f.map(f64::sqrt);
        let l = f.map(f64::ln);
        dirichlet_form(&g, &pi, &s, &s).unwrap() / dirichlet_form(&g, &pi, &f, &l).unwrap()
    };
    let a = ratio([1.2, 0.8]);
    let b = ratio([1.8, 0.2]);
    vec![check(
        "ratios differ",
        (a - b).abs() > DIRICHLET_GAP,
        format!("{a:.6} vs {b:.6}"),
    )]
}

fn artifact_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.to_string_lossy().ends_with(".manifest.json"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn criterion_11(cli: &mut Cli) -> Vec<Check> {
    let cases = [
        ("fixed-points", config(&curie_weiss(2.0), 3, json!({}))),
        (
            "descent",
            config(
                &catalog()[2],
                3,
                json!({ "descent": { "starts": 8, "t_end": 5.0 } }),
            ),
        ),
        ("duality", config(&catalog()[5], 3, json!({}))),
        ("concavity", config(&catalog()[4], 3, json!({}))),
        ("slow-adaptation", config(&curie_weiss(2.0), 3, json!({}))),
        (
            "finite-n",
            config(
                &curie_weiss(0.5),
                3,
                json!({ "finite_n": { "n": 60, "t_end": 2.0 } }),
            ),
        ),
        (
            "particles",
            config(
                &curie_weiss(0.5),
                3,
                json!({ "particles": { "n": 500, "replicas": 20, "initial": { "kind": "iid", "q": [0.9, 0.1] } } }),
            ),
        ),
        (
            "landscape",
            config(
                &catalog()[6],
                3,
                json!({ "landscape": { "resolution": 30 } }),
            ),
        ),
    ];
    cases
        .iter()
        .map(|(command, cfg)| {
            let a = cli.run(cfg, command, &["--jobs", "1"]);
            let b = cli.run(cfg, command, &["--jobs", "4"]);
            let fa = artifact_bytes(&a.out);
            let fb = artifact_bytes(&b.out);
            let hashes = |r: &CliRun| -> Vec<Value> {
                r.json(command, "manifest")["artifacts"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|x| x["sha256"].clone())
                    .collect()
            };
            check(
                command,
                !fa.is_empty() && fa == fb && hashes(&a) == hashes(&b) && a.code == b.code,
                format!("{} artifacts, exit {} / {}", fa.len(), a.code, b.code),
            )
        })
        .collect()
}

fn main() {
    let mut cli = Cli::new();
    let criteria: Vec<(&str, Box<dyn FnOnce(&mut Cli) -> Vec<Check>>)> = vec![
        ("fixed-point bifurcation", Box::new(criterion_1)),
        ("PDE solution identity", Box::new(|_| criterion_2())),
        ("Legendre duality", Box::new(|_| criterion_3())),
        ("descent along trajectories", Box::new(criterion_4)),
        ("strict Hamiltonian inequality", Box::new(|_| criterion_5())),
        ("slow adaptation", Box::new(criterion_6)),
        ("potential-existence obstruction", Box::new(criterion_7)),
        ("finite-N consistency", Box::new(|_| criterion_8())),
        ("propagation of chaos", Box::new(criterion_9)),
        ("Dirichlet-form ratio", Box::new(|_| criterion_10())),
        ("determinism", Box::new(criterion_11)),
    ];
    let mut passed = 0;
    let mut unexpected = 0;
    let total = criteria.len();
    for (k, (title, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let checks = run(&mut cli);
        let ok = checks.iter().all(|c| c.passed);
        passed += ok as usize;
        println!(
            "criterion {:>2} {}: {title} ({:.1} s)",
            k + 1,
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        for c in &checks {
            let tag = match (c.passed, c.documented_gap) {
                (true, _) => "ok  ",
                (false, true) => "GAP ",
                (false, false) => "FAIL",
            };
            println!("    {tag} {}: {}", c.name, c.detail);
            unexpected += (!c.passed && !c.documented_gap) as usize;
        }
    }
    println!("acceptance: {passed}/{total} criteria pass; {unexpected} failing sub-checks outside the documented gaps");
    if unexpected > 0 {
        std::process::exit(1);
    }
}
