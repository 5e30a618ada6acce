//! Rate families `r ↦ Γ(r)` and the model catalog.
//!
//! Every family is built from a [`ModelSpec`], which is also the on-disk
//! configuration format (`{"variant": .., "params": {..}}`). Families carry
//! their stationary law `π(r)` and potential `U` in closed form when one is
//! known; otherwise `π(r)` is obtained by a dense linear solve.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[allow(unused_imports)]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{check_positive_scalar, Domain, Function};
use crate::linalg;
use crate::quadrature;
use crate::simplex::{self, SimplexPoint};

/// Tolerance on row sums of a rate matrix.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

/// Generator of a continuous-time chain on `{1..d}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct RateMatrix {
    d: usize,
    entries: Vec<f64>,
}

impl RateMatrix {
    /// Validates a row-major `d x d` matrix.
    pub fn new(d: usize, entries: Vec<f64>) -> Result<Self> {
        if d == 0 || entries.len() != d * d {
            return Err(Error::InvalidInput(format!(
                "rate matrix needs {} entries",
                d * d
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "rate matrix has non-finite entries".into(),
            ));
        }
        for x in 0..d {
            let row = &entries[x * d..(x + 1) * d];
            let scale = row.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (y, v) in row.iter().enumerate() {
                if x != y && *v < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "negative rate {v} on edge ({x}, {y})"
                    )));
                }
            }
            let sum: f64 = row.iter().sum();
            if sum.abs() > ROW_SUM_TOLERANCE * scale {
                return Err(Error::InvalidInput(format!("row {x} sums to {sum:e}")));
            }
        }
        Ok(Self { d, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidInput("rate matrix must be square".into()));
        }
        Self::new(d, rows.iter().flatten().copied().collect())
    }

    /// Builds a generator from its off-diagonal rates; the diagonal is filled in.
    pub fn from_off_diagonal<F: FnMut(usize, usize) -> f64>(d: usize, mut rate: F) -> Self {
        let mut entries = vec![0.0; d * d];
        for x in 0..d {
            let mut total = 0.0;
            for y in 0..d {
                if x != y {
                    let v = rate(x, y);
                    entries[x * d + y] = v;
                    total += v;
                }
            }
            entries[x * d + x] = -total;
        }
        Self { d, entries }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.entries[x * self.d + y]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.d).map(<[f64]>::to_vec).collect()
    }

    /// Largest total exit rate `max_x |Γ_xx|`.
    pub fn max_exit_rate(&self) -> f64 {
        (0..self.d).map(|x| -self.get(x, x)).fold(0.0, f64::max)
    }

    /// Row vector times matrix: `p Γ`.
    pub fn left_apply(&self, p: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut out = vec![0.0; d];
        for x in 0..d {
            let px = p[x];
            if px == 0.0 {
                continue;
            }
            for y in 0..d {
                out[y] += px * self.entries[x * d + y];
            }
        }
        out
    }

    /// Entrywise ℓ1 distance `Σ |Γ_xy - Γ'_xy|`.
    pub fn l1_distance(&self, other: &RateMatrix) -> f64 {
        simplex::l1_distance(&self.entries, &other.entries)
    }

    /// Smallest strictly positive off-diagonal rate.
    pub fn min_positive_rate(&self) -> Option<f64> {
        let mut best: Option<f64> = None;
        for x in 0..self.d {
            for y in 0..self.d {
                let v = self.get(x, y);
                if x != y && v > 0.0 {
                    best = Some(best.map_or(v, |b| b.min(v)));
                }
            }
        }
        best
    }

    pub fn is_irreducible(&self) -> bool {
        check_irreducible(self)
    }

    /// Stationary law by a dense solve of the augmented balance system.
    pub fn stationary(&self) -> Result<SimplexPoint> {
        if !self.is_irreducible() {
            return Err(Error::NotIrreducible);
        }
        let pi = linalg::stationary_dense(&self.entries, self.d)?;
        SimplexPoint::new(pi)
    }

    /// Detailed-balance defect `max |π_x Γ_xy - π_y Γ_yx|`.
    pub fn detailed_balance_defect(&self, pi: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for x in 0..self.d {
            for y in x + 1..self.d {
                worst = worst.max((pi[x] * self.get(x, y) - pi[y] * self.get(y, x)).abs());
            }
        }
        worst
    }
}

impl TryFrom<Vec<Vec<f64>>> for RateMatrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<RateMatrix> for Vec<Vec<f64>> {
    fn from(m: RateMatrix) -> Self {
        m.rows()
    }
}

/// True iff the graph of strictly positive off-diagonal rates is strongly connected.
pub fn check_irreducible(gamma: &RateMatrix) -> bool {
    linalg::strongly_connected(gamma.dim(), |x, y| gamma.get(x, y) > 0.0)
}

/// Configuration of a rate family.
///
/// Function-valued fields are expression strings (see [`crate::expr`]):
/// functions on the simplex use `r1..rd`, functions of one variable use `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", content = "params", deny_unknown_fields)]
pub enum ModelSpec {
    /// A fixed irreducible generator (a linear Markov chain).
    Constant { rates: Vec<Vec<f64>> },
    /// Glauber-type rates `exp(-(H^y - H^x)⁺) α(x,y)` with `K(p) = V + β W p`.
    GibbsAffine {
        #[serde(rename = "V")]
        v: Vec<f64>,
        #[serde(rename = "W")]
        w: Vec<Vec<f64>>,
        beta: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        adjacency: Option<Vec<Vec<u8>>>,
    },
    /// `Γ^λ(p) = Γ(λ(p - π*) + π*)`.
    SlowAdaptation {
        base: Box<ModelSpec>,
        pi_star: Vec<f64>,
        lambda: f64,
    },
    /// Birth–death chain with `a_i = ψ_i(r) φ_i(r_i)` and `b_{i+1} = ψ_i(r) φ_{i+1}(r_{i+1})`.
    BirthDeathPhiPsi { psi: Vec<String>, phi: Vec<String> },
    /// Metropolis rates for the energy `H^x(r) + R(x, r_x)`.
    MetropolisGGibbs {
        #[serde(rename = "K")]
        k: Vec<String>,
        #[serde(rename = "R")]
        r: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        adjacency: Option<Vec<Vec<u8>>>,
    },
    /// Three-state chain with the `2 -> 1` rate scaled by `B(r) = exp(κ⟨r - r*, c⟩)`.
    ThreeStateB {
        a1: f64,
        a2: f64,
        b2: f64,
        b3: f64,
        kappa: f64,
        c: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        r_star: Option<Vec<f64>>,
    },
    /// `Γ̃(π(r))` where `π(r)` is the stationary law of the matching `ThreeStateB` family.
    ThreeStateNonGibbs {
        a1: f64,
        a2: f64,
        b2: f64,
        b3: f64,
        kappa: f64,
        c: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        r_star: Option<Vec<f64>>,
    },
    /// Birth–death chain with rates `a^i(⟨r, c^i⟩)`, `b^{i+1}(⟨r, c^i⟩)` and `c^i = Σ_{k>i} e_k`.
    NearestNeighborCost { a: Vec<String>, b: Vec<String> },
    /// Loss-network node with `M` call classes and capacity `C`.
    Telecom {
        #[serde(rename = "C")]
        capacity: u32,
        lambda: Vec<f64>,
        mu: Vec<f64>,
        gamma: Vec<f64>,
        #[serde(rename = "A")]
        sizes: Vec<u32>,
    },
    /// Three-state chain solving the stationary equation without a potential for `π(r)`.
    NonLocallyGibbs { a1: String, a2: String, psi: String },
}

impl ModelSpec {
    pub fn variant_name(&self) -> &'static str {
        match self {
            ModelSpec::Constant { .. } => "Constant",
            ModelSpec::GibbsAffine { .. } => "GibbsAffine",
            ModelSpec::SlowAdaptation { .. } => "SlowAdaptation",
            ModelSpec::BirthDeathPhiPsi { .. } => "BirthDeathPhiPsi",
            ModelSpec::MetropolisGGibbs { .. } => "MetropolisGGibbs",
            ModelSpec::ThreeStateB { .. } => "ThreeStateB",
            ModelSpec::ThreeStateNonGibbs { .. } => "ThreeStateNonGibbs",
            ModelSpec::NearestNeighborCost { .. } => "NearestNeighborCost",
            ModelSpec::Telecom { .. } => "Telecom",
            ModelSpec::NonLocallyGibbs { .. } => "NonLocallyGibbs",
        }
    }

    /// The two-state Curie–Weiss model: `V = 0`, `W` with unit off-diagonal.
    pub fn curie_weiss(beta: f64) -> Self {
        ModelSpec::GibbsAffine {
            v: vec![0.0, 0.0],
            w: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            beta,
            adjacency: None,
        }
    }
}

/// Enumerated states of the loss-network node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelecomStateSpace {
    pub states: Vec<Vec<u32>>,
    pub sizes: Vec<u32>,
    pub capacity: u32,
}

impl TelecomStateSpace {
    /// All `x ∈ Z₊^M` with `Σ x_m A_m ≤ C`, ordered by `(Σ x_m, x)` lexicographically.
    pub fn new(capacity: u32, sizes: &[u32]) -> Result<Self> {
        if sizes.is_empty() || sizes.iter().any(|&a| a == 0) {
            return Err(Error::InvalidParameters(
                "class sizes must be positive integers".into(),
            ));
        }
        let mut states = Vec::new();
        let mut x = vec![0u32; sizes.len()];
        fn rec(
            m: usize,
            used: u32,
            cap: u32,
            sizes: &[u32],
            x: &mut Vec<u32>,
            out: &mut Vec<Vec<u32>>,
        ) {
            if m == sizes.len() {
                out.push(x.clone());
                return;
            }
            let mut k = 0;
            while used + k * sizes[m] <= cap {
                x[m] = k;
                rec(m + 1, used + k * sizes[m], cap, sizes, x, out);
                k += 1;
            }
            x[m] = 0;
        }
        rec(0, 0, capacity, sizes, &mut x, &mut states);
        states.sort_by(|a, b| {
            let sa: u32 = a.iter().sum();
            let sb: u32 = b.iter().sum();
            sa.cmp(&sb).then_with(|| a.cmp(b))
        });
        if states.len() < 2 {
            return Err(Error::InvalidParameters(
                "telecom state space has fewer than 2 states".into(),
            ));
        }
        Ok(Self {
            states,
            sizes: sizes.to_vec(),
            capacity,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn index_of(&self, x: &[u32]) -> Option<usize> {
        self.states.iter().position(|s| s.as_slice() == x)
    }

    /// Class means `a_m(r) = Σ_x r_x x_m`.
    pub fn class_means(&self, r: &[f64]) -> Vec<f64> {
        let mut a = vec![0.0; self.sizes.len()];
        for (s, &rx) in self.states.iter().zip(r) {
            for (am, &xm) in a.iter_mut().zip(s) {
                *am += rx * xm as f64;
            }
        }
        a
    }
}

type CustomRates = Arc<dyn Fn(&[f64]) -> RateMatrix + Send + Sync>;

#[derive(Clone)]
enum Kind {
    Constant {
        rates: RateMatrix,
        pi: Vec<f64>,
    },
    Gibbs {
        v: Vec<f64>,
        w: Vec<f64>,
        beta: f64,
        adjacency: Vec<bool>,
    },
    Slow {
        base: Box<RateFamily>,
        pi_star: Vec<f64>,
        lambda: f64,
    },
    BirthDeath {
        psi: Vec<Function>,
        phi: Vec<Function>,
    },
    Metropolis {
        k: Vec<Function>,
        dk: Vec<Vec<Function>>,
        r: Vec<Function>,
        adjacency: Vec<bool>,
    },
    ThreeState {
        a1: f64,
        a2: f64,
        b2: f64,
        b3: f64,
        kappa: f64,
        c: [f64; 3],
        r_star: [f64; 3],
        non_gibbs: bool,
    },
    NearestNeighbor {
        a: Vec<Function>,
        b: Vec<Function>,
    },
    Telecom {
        space: TelecomStateSpace,
        lambda: Vec<f64>,
        mu: Vec<f64>,
        gamma: Vec<f64>,
    },
    NonLocallyGibbs {
        a1: Function,
        a2: Function,
        psi: Function,
    },
    Custom(CustomRates),
}

/// A rate family `r ↦ Γ(r)` with optional closed-form stationary law and potential.
#[derive(Clone)]
pub struct RateFamily {
    label: String,
    spec: Option<ModelSpec>,
    dim: usize,
    kind: Kind,
}

impl fmt::Debug for RateFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RateFamily")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("spec", &self.spec)
            .finish()
    }
}

/// Builds and validates a rate family from its specification.
pub fn build_model(spec: &ModelSpec) -> Result<RateFamily> {
    RateFamily::from_spec(spec)
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameters(msg.into())
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

fn parse_adjacency(adj: &Option<Vec<Vec<u8>>>, d: usize) -> Result<Vec<bool>> {
    let Some(rows) = adj else {
        return Ok((0..d * d).map(|i| i / d != i % d).collect());
    };
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(invalid(format!("adjacency must be {d}x{d}")));
    }
    let mut out = vec![false; d * d];
    for x in 0..d {
        for y in 0..d {
            let v = rows[x][y];
            if v > 1 {
                return Err(invalid("adjacency entries must be 0 or 1"));
            }
            if x == y && v != 0 {
                return Err(invalid("adjacency diagonal must be zero"));
            }
            if v != rows[y][x] {
                return Err(invalid("adjacency must be symmetric"));
            }
            out[x * d + y] = v == 1;
        }
    }
    if !linalg::strongly_connected(d, |x, y| out[x * d + y]) {
        return Err(Error::NotIrreducible);
    }
    Ok(out)
}

fn parse_functions(srcs: &[String], domain: Domain, what: &str) -> Result<Vec<Function>> {
    srcs.iter()
        .enumerate()
        .map(|(i, s)| Function::parse(s, domain).map_err(|e| invalid(format!("{what}[{i}]: {e}"))))
        .collect()
}

fn softmax_neg(e: &[f64]) -> Vec<f64> {
    let m = e.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = e.iter().map(|v| (m - v).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let z: f64 = v.iter().sum();
    for x in &mut v {
        *x /= z;
    }
    v
}

fn integral(f: impl Fn(f64) -> f64, upper: f64) -> Result<f64> {
    quadrature::integrate_default(f, 0.0, upper)
}

/// `∫₀^a log(λ + γ w) dw` in closed form.
pub fn log_linear_integral(lambda: f64, gamma: f64, a: f64) -> f64 {
    let top = lambda + gamma * a;
    (top * top.ln() - lambda * lambda.ln()) / gamma - a
}

fn ln_factorial(k: u32) -> f64 {
    (2..=k).map(|i| (i as f64).ln()).sum()
}

impl RateFamily {
    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        let (dim, kind) = Self::kind_from_spec(spec)?;
        let family = Self {
            label: spec.variant_name().to_string(),
            spec: Some(spec.clone()),
            dim,
            kind,
        };
        family.spot_check()?;
        Ok(family)
    }

    /// A linear Markov chain with generator `rates`.
    pub fn constant(rates: RateMatrix) -> Result<Self> {
        let spec = ModelSpec::Constant {
            rates: rates.rows(),
        };
        Self::from_spec(&spec)
    }

    /// A family given by an arbitrary closure; no closed-form stationary law or potential.
    pub fn custom<F>(label: &str, dim: usize, f: F) -> Self
    where
        F: Fn(&[f64]) -> RateMatrix + Send + Sync + 'static,
    {
        Self {
            label: label.to_string(),
            spec: None,
            dim,
            kind: Kind::Custom(Arc::new(f)),
        }
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.label = label.to_string();
        self
    }

    fn kind_from_spec(spec: &ModelSpec) -> Result<(usize, Kind)> {
        match spec {
            ModelSpec::Constant { rates } => {
                let rates = RateMatrix::from_rows(rates).map_err(|e| invalid(format!("{e}")))?;
                if !rates.is_irreducible() {
                    return Err(Error::NotIrreducible);
                }
                let pi = linalg::stationary_dense(rates.as_slice(), rates.dim())?;
                Ok((rates.dim(), Kind::Constant { rates, pi }))
            }
            ModelSpec::GibbsAffine {
                v,
                w,
                beta,
                adjacency,
            } => {
                let d = v.len();
                if d < 2 {
                    return Err(invalid("GibbsAffine needs d >= 2"));
                }
                if w.len() != d || w.iter().any(|row| row.len() != d) {
                    return Err(invalid(format!("W must be {d}x{d}")));
                }
                if !(beta.is_finite() && *beta >= 0.0) {
                    return Err(invalid("beta must be finite and nonnegative"));
                }
                if v.iter().chain(w.iter().flatten()).any(|x| !x.is_finite()) {
                    return Err(invalid("V and W must be finite"));
                }
                for x in 0..d {
                    for y in 0..d {
                        if (w[x][y] - w[y][x]).abs() > 1e-12 {
                            return Err(invalid("W must be symmetric"));
                        }
                    }
                }
                let adjacency = parse_adjacency(adjacency, d)?;
                Ok((
                    d,
                    Kind::Gibbs {
                        v: v.clone(),
                        w: w.iter().flatten().copied().collect(),
                        beta: *beta,
                        adjacency,
                    },
                ))
            }
            ModelSpec::SlowAdaptation {
                base,
                pi_star,
                lambda,
            } => {
                let base = RateFamily::from_spec(base)?;
                if pi_star.len() != base.dim {
                    return Err(invalid("pi_star dimension does not match the base model"));
                }
                let pi_star = SimplexPoint::new(pi_star.clone())
                    .map_err(|e| invalid(format!("pi_star: {e}")))?;
                if !(0.0..=1.0).contains(lambda) {
                    return Err(invalid("lambda must lie in [0, 1]"));
                }
                let residual = base
                    .vector_field_at(pi_star.weights())
                    .iter()
                    .map(|v| v.abs())
                    .sum::<f64>();
                if residual > 1e-8 {
                    log::warn!(
                        "pi_star is not a fixed point of the base model (residual {residual:e})"
                    );
                }
                Ok((
                    base.dim,
                    Kind::Slow {
                        base: Box::new(base),
                        pi_star: pi_star.into_weights(),
                        lambda: *lambda,
                    },
                ))
            }
            ModelSpec::BirthDeathPhiPsi { psi, phi } => {
                let d = phi.len();
                if d < 2 {
                    return Err(invalid("BirthDeathPhiPsi needs d >= 2"));
                }
                let mut psi = parse_functions(psi, Domain::Simplex(d), "psi")?;
                if psi.len() == d {
                    psi.remove(0);
                }
                if psi.len() != d - 1 {
                    return Err(invalid(format!(
                        "psi needs {} (or {d}) entries, got {}",
                        d - 1,
                        psi.len()
                    )));
                }
                let phi = parse_functions(phi, Domain::Scalar, "phi")?;
                for (i, f) in phi.iter().enumerate() {
                    check_positive_scalar(f, 0.0, 1.0, &format!("phi[{i}]"))?;
                }
                Ok((d, Kind::BirthDeath { psi, phi }))
            }
            ModelSpec::MetropolisGGibbs { k, r, adjacency } => {
                let d = k.len();
                if d < 2 || r.len() != d {
                    return Err(invalid(
                        "MetropolisGGibbs needs d >= 2 entries in both K and R",
                    ));
                }
                let k = parse_functions(k, Domain::Simplex(d), "K")?;
                let r = parse_functions(r, Domain::Scalar, "R")?;
                let dk = k
                    .iter()
                    .map(|kz| (0..d).map(|x| kz.derivative(x)).collect())
                    .collect();
                let adjacency = parse_adjacency(adjacency, d)?;
                Ok((
                    d,
                    Kind::Metropolis {
                        k,
                        dk,
                        r,
                        adjacency,
                    },
                ))
            }
            ModelSpec::ThreeStateB {
                a1,
                a2,
                b2,
                b3,
                kappa,
                c,
                r_star,
            }
            | ModelSpec::ThreeStateNonGibbs {
                a1,
                a2,
                b2,
                b3,
                kappa,
                c,
                r_star,
            } => {
                let non_gibbs = matches!(spec, ModelSpec::ThreeStateNonGibbs { .. });
                for (name, v) in [("a1", a1), ("a2", a2), ("b2", b2), ("b3", b3)] {
                    positive(name, *v)?;
                }
                if !kappa.is_finite() || c.iter().any(|x| !x.is_finite()) {
                    return Err(invalid("kappa and c must be finite"));
                }
                if non_gibbs && c[1] != c[2] {
                    return Err(invalid("ThreeStateNonGibbs requires c2 = c3"));
                }
                let r_star = match r_star {
                    Some(v) => {
                        let p = SimplexPoint::new(v.clone())
                            .map_err(|e| invalid(format!("r_star: {e}")))?;
                        if p.dim() != 3 {
                            return Err(invalid("r_star must have 3 entries"));
                        }
                        [p[0], p[1], p[2]]
                    }
                    None => {
                        let w = normalize(vec![b2 * b3, a1 * b3, a1 * a2]);
                        [w[0], w[1], w[2]]
                    }
                };
                Ok((
                    3,
                    Kind::ThreeState {
                        a1: *a1,
                        a2: *a2,
                        b2: *b2,
                        b3: *b3,
                        kappa: *kappa,
                        c: *c,
                        r_star,
                        non_gibbs,
                    },
                ))
            }
            ModelSpec::NearestNeighborCost { a, b } => {
                let d = a.len() + 1;
                if d < 2 || b.len() != a.len() {
                    return Err(invalid(
                        "NearestNeighborCost needs d-1 >= 1 entries in both a and b",
                    ));
                }
                let a = parse_functions(a, Domain::Scalar, "a")?;
                let b = parse_functions(b, Domain::Scalar, "b")?;
                for (i, f) in a.iter().enumerate() {
                    check_positive_scalar(f, 0.0, 1.0, &format!("a[{i}]"))?;
                }
                for (i, f) in b.iter().enumerate() {
                    check_positive_scalar(f, 0.0, 1.0, &format!("b[{i}]"))?;
                }
                Ok((d, Kind::NearestNeighbor { a, b }))
            }
            ModelSpec::Telecom {
                capacity,
                lambda,
                mu,
                gamma,
                sizes,
            } => {
                let m = sizes.len();
                if lambda.len() != m || mu.len() != m || gamma.len() != m || m == 0 {
                    return Err(invalid(
                        "lambda, mu, gamma and A must have one entry per class",
                    ));
                }
                for (name, vals) in [("lambda", lambda), ("mu", mu), ("gamma", gamma)] {
                    for v in vals {
                        positive(name, *v)?;
                    }
                }
                if *capacity == 0 {
                    return Err(invalid("capacity C must be positive"));
                }
                let space = TelecomStateSpace::new(*capacity, sizes)?;
                Ok((
                    space.len(),
                    Kind::Telecom {
                        space,
                        lambda: lambda.clone(),
                        mu: mu.clone(),
                        gamma: gamma.clone(),
                    },
                ))
            }
            ModelSpec::NonLocallyGibbs { a1, a2, psi } => {
                let a1 = Function::parse(a1, Domain::Simplex(3))
                    .map_err(|e| invalid(format!("a1: {e}")))?;
                let a2 = Function::parse(a2, Domain::Simplex(3))
                    .map_err(|e| invalid(format!("a2: {e}")))?;
                let psi = Function::parse(psi, Domain::Scalar)
                    .map_err(|e| invalid(format!("psi: {e}")))?;
                check_positive_scalar(&psi, 0.0, 1.0, "psi")?;
                for k in 0..=64 {
                    let w = k as f64 / 64.0;
                    if psi.eval1(w) >= 1.0 {
                        return Err(invalid(format!(
                            "psi must take values in (0, 1); psi({w}) >= 1"
                        )));
                    }
                }
                Ok((3, Kind::NonLocallyGibbs { a1, a2, psi }))
            }
        }
    }

    /// Checks positivity of function-valued rates and, where available, `π(r) Γ(r) = 0`
    /// on 25 seeded random points.
    fn spot_check(&self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..25 {
            let r = simplex::random_interior(self.dim, 0.0, &mut rng);
            self.check_rate_functions(r.weights())?;
            let gamma = self.rates_at(r.weights());
            if gamma.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!(
                    "{}: non-finite rates at {:?}",
                    self.label,
                    r.weights()
                )));
            }
            if let Some(pi) = self.stationary_analytic(r.weights()) {
                let res = linalg::balance_residual(&pi, gamma.as_slice(), self.dim);
                let scale = gamma.max_exit_rate().max(1.0);
                if res > 1e-10 * scale {
                    return Err(invalid(format!(
                        "{}: closed-form stationary law fails balance (residual {res:e})",
                        self.label
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_rate_functions(&self, r: &[f64]) -> Result<()> {
        match &self.kind {
            Kind::BirthDeath { psi, .. } => {
                for (i, f) in psi.iter().enumerate() {
                    let v = f.eval(r);
                    if !(v.is_finite() && v > 0.0) {
                        return Err(invalid(format!(
                            "psi[{i}] = '{f}' is not positive at {r:?}"
                        )));
                    }
                }
            }
            Kind::NonLocallyGibbs { a1, a2, .. } => {
                for (name, f) in [("a1", a1), ("a2", a2)] {
                    let v = f.eval(r);
                    if !(v > 0.0 && v < 1.0) {
                        return Err(invalid(format!(
                            "{name} = '{f}' must lie in (0, 1); got {v} at {r:?}"
                        )));
                    }
                }
            }
            Kind::Slow {
                base,
                pi_star,
                lambda,
            } => {
                let q = slow_argument(r, pi_star, *lambda);
                base.check_rate_functions(&q)?;
            }
            _ => {}
        }
        Ok(())
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn spec(&self) -> Option<&ModelSpec> {
        self.spec.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The telecom state space, when this family is a telecom model.
    pub fn telecom_space(&self) -> Option<&TelecomStateSpace> {
        match &self.kind {
            Kind::Telecom { space, .. } => Some(space),
            Kind::Slow { base, .. } => base.telecom_space(),
            _ => None,
        }
    }

    pub fn evaluate_rates(&self, r: &SimplexPoint) -> RateMatrix {
        self.rates_at(r.weights())
    }

    /// `Γ(r)` at a raw coordinate vector (used for finite differences near the simplex).
    pub fn rates_at(&self, r: &[f64]) -> RateMatrix {
        let d = self.dim;
        match &self.kind {
            Kind::Constant { rates, .. } => rates.clone(),
            Kind::Gibbs { adjacency, .. } => {
                let h = self.gibbs_h(r).unwrap_or_default();
                RateMatrix::from_off_diagonal(d, |x, y| {
                    if adjacency[x * d + y] {
                        (-(h[y] - h[x]).max(0.0)).exp()
                    } else {
                        0.0
                    }
                })
            }
            Kind::Slow {
                base,
                pi_star,
                lambda,
            } => base.rates_at(&slow_argument(r, pi_star, *lambda)),
            Kind::BirthDeath { psi, phi } => {
                let mut up = vec![0.0; d];
                let mut down = vec![0.0; d];
                for i in 0..d - 1 {
                    let s = psi[i].eval(r);
                    up[i] = s * phi[i].eval1(r[i]);
                    down[i + 1] = s * phi[i + 1].eval1(r[i + 1]);
                }
                RateMatrix::from_off_diagonal(d, |x, y| {
                    if y == x + 1 {
                        up[x]
                    } else if x == y + 1 {
                        down[x]
                    } else {
                        0.0
                    }
                })
            }
            Kind::Metropolis { adjacency, .. } => {
                let e = self.metropolis_energy(r);
                RateMatrix::from_off_diagonal(d, |x, y| {
                    if adjacency[x * d + y] {
                        (-(e[y] - e[x]).max(0.0)).exp()
                    } else {
                        0.0
                    }
                })
            }
            Kind::ThreeState {
                a1,
                a2,
                b2,
                b3,
                non_gibbs,
                ..
            } => {
                if *non_gibbs {
                    let p = self.three_state_pi(r);
                    let (q1, q2, q3) = (p[0], p[1], p[2]);
                    let m = [
                        [0.0, q2 * q3, q2 * q3],
                        [2.0 * q1 * q3, 0.0, 2.0 * q1 * q3],
                        [0.0, 3.0 * q1 * q2, 0.0],
                    ];
                    RateMatrix::from_off_diagonal(3, |x, y| m[x][y])
                } else {
                    let b = self.three_state_b(r);
                    let m = [[0.0, *a1, 0.0], [b2 * b, 0.0, *a2], [0.0, *b3, 0.0]];
                    RateMatrix::from_off_diagonal(3, |x, y| m[x][y])
                }
            }
            Kind::NearestNeighbor { a, b } => {
                let u = tail_sums(r);
                RateMatrix::from_off_diagonal(d, |x, y| {
                    if y == x + 1 {
                        a[x].eval1(u[x])
                    } else if x == y + 1 {
                        b[y].eval1(u[y])
                    } else {
                        0.0
                    }
                })
            }
            Kind::Telecom {
                space,
                lambda,
                mu,
                gamma,
            } => {
                let a = space.class_means(r);
                let mut entries = vec![0.0; d * d];
                for (i, s) in space.states.iter().enumerate() {
                    let used: u32 = s.iter().zip(&space.sizes).map(|(x, a)| x * a).sum();
                    let mut total = 0.0;
                    for m in 0..s.len() {
                        if used + space.sizes[m] <= space.capacity {
                            let mut t = s.clone();
                            t[m] += 1;
                            if let Some(j) = space.index_of(&t) {
                                let rate = lambda[m] + gamma[m] * a[m];
                                entries[i * d + j] = rate;
                                total += rate;
                            }
                        }
                        if s[m] > 0 {
                            let mut t = s.clone();
                            t[m] -= 1;
                            if let Some(j) = space.index_of(&t) {
                                let rate = s[m] as f64 * (mu[m] + gamma[m]);
                                entries[i * d + j] = rate;
                                total += rate;
                            }
                        }
                    }
                    entries[i * d + i] = -total;
                }
                RateMatrix { d, entries }
            }
            Kind::NonLocallyGibbs { .. } => {
                let (a1, a2, b2, b3) = self.non_locally_gibbs_rates(r);
                let m = [[0.0, a1, 0.0], [b2, 0.0, a2], [0.0, b3, 0.0]];
                RateMatrix::from_off_diagonal(3, |x, y| m[x][y])
            }
            Kind::Custom(f) => f(r),
        }
    }

    /// `H^x(r) = K^x(r) + Σ_z ∂_x K^z(r) r_z` for Gibbs-type families.
    pub fn gibbs_h(&self, r: &[f64]) -> Option<Vec<f64>> {
        let d = self.dim;
        match &self.kind {
            Kind::Gibbs { v, w, beta, .. } => Some(
                (0..d)
                    .map(|x| v[x] + 2.0 * beta * (0..d).map(|y| w[x * d + y] * r[y]).sum::<f64>())
                    .collect(),
            ),
            Kind::Metropolis { k, dk, .. } => Some(
                (0..d)
                    .map(|x| k[x].eval(r) + (0..d).map(|z| dk[z][x].eval(r) * r[z]).sum::<f64>())
                    .collect(),
            ),
            _ => None,
        }
    }

    /// The interaction potentials `K^x(r)` for Gibbs-type families.
    pub fn gibbs_k(&self, r: &[f64]) -> Option<Vec<f64>> {
        let d = self.dim;
        match &self.kind {
            Kind::Gibbs { v, w, beta, .. } => Some(
                (0..d)
                    .map(|x| v[x] + beta * (0..d).map(|y| w[x * d + y] * r[y]).sum::<f64>())
                    .collect(),
            ),
            Kind::Metropolis { k, .. } => Some(k.iter().map(|f| f.eval(r)).collect()),
            _ => None,
        }
    }

    fn metropolis_energy(&self, r: &[f64]) -> Vec<f64> {
        let Kind::Metropolis { r: rr, .. } = &self.kind else {
            unreachable!()
        };
        let h = self.gibbs_h(r).unwrap_or_default();
        h.iter()
            .zip(rr)
            .zip(r)
            .map(|((hx, f), rx)| hx + f.eval1(*rx))
            .collect()
    }

    fn three_state_b(&self, r: &[f64]) -> f64 {
        let Kind::ThreeState {
            kappa, c, r_star, ..
        } = &self.kind
        else {
            unreachable!()
        };
        let s: f64 = (0..3).map(|i| (r[i] - r_star[i]) * c[i]).sum();
        (kappa * s).exp()
    }

    fn three_state_pi(&self, r: &[f64]) -> Vec<f64> {
        let Kind::ThreeState { a1, a2, b2, b3, .. } = &self.kind else {
            unreachable!()
        };
        let b = self.three_state_b(r);
        normalize(vec![b2 * b3 * b, a1 * b3, a1 * a2])
    }

    fn non_locally_gibbs_rates(&self, r: &[f64]) -> (f64, f64, f64, f64) {
        let Kind::NonLocallyGibbs { a1, a2, psi } = &self.kind else {
            unreachable!()
        };
        let (x1, x2) = (a1.eval(r), a2.eval(r));
        let s = psi.eval1(r[2]);
        let b2 = (1.0 + (r[1] - r[2] * s) * x2) * x1;
        let b3 = s * x2 * (1.0 + (r[1] - r[0]) * x1);
        (x1, x2, b2, b3)
    }

    /// Closed-form stationary law of the frozen matrix `Γ(r)`, when known.
    pub fn stationary_analytic(&self, r: &[f64]) -> Option<Vec<f64>> {
        let d = self.dim;
        match &self.kind {
            Kind::Constant { pi, .. } => Some(pi.clone()),
            Kind::Gibbs { .. } => Some(softmax_neg(&self.gibbs_h(r)?)),
            Kind::Slow {
                base,
                pi_star,
                lambda,
            } => base.stationary_analytic(&slow_argument(r, pi_star, *lambda)),
            Kind::BirthDeath { phi, .. } => {
                let e: Vec<f64> = phi.iter().zip(r).map(|(f, &x)| f.eval1(x).ln()).collect();
                Some(softmax_neg(&e))
            }
            Kind::Metropolis { .. } => Some(softmax_neg(&self.metropolis_energy(r))),
            Kind::ThreeState { .. } => Some(self.three_state_pi(r)),
            Kind::NearestNeighbor { a, b } => {
                let u = tail_sums(r);
                let mut e = vec![0.0; d];
                for i in 0..d - 1 {
                    e[i + 1] = e[i] + (b[i].eval1(u[i]) / a[i].eval1(u[i])).ln();
                }
                Some(softmax_neg(&e))
            }
            Kind::Telecom {
                space,
                lambda,
                mu,
                gamma,
            } => {
                let a = space.class_means(r);
                let log_rho: Vec<f64> = (0..a.len())
                    .map(|m| ((lambda[m] + gamma[m] * a[m]) / (mu[m] + gamma[m])).ln())
                    .collect();
                let e: Vec<f64> = space
                    .states
                    .iter()
                    .map(|s| {
                        s.iter()
                            .enumerate()
                            .map(|(m, &x)| ln_factorial(x) - x as f64 * log_rho[m])
                            .sum()
                    })
                    .collect();
                Some(softmax_neg(&e))
            }
            Kind::NonLocallyGibbs { .. } => {
                let (a1, a2, b2, b3) = self.non_locally_gibbs_rates(r);
                let p2 = b3 / a2;
                Some(normalize(vec![p2 * b2 / a1, p2, 1.0]))
            }
            Kind::Custom(_) => None,
        }
    }

    /// Stationary law `π(r)` of `Γ(r)`: closed form when known, else a dense solve.
    pub fn stationary(&self, r: &[f64]) -> Result<SimplexPoint> {
        match self.stationary_analytic(r) {
            Some(pi) => SimplexPoint::new(pi),
            None => self.rates_at(r).stationary(),
        }
    }

    /// `r Γ(r)` at a raw coordinate vector.
    pub fn vector_field_at(&self, r: &[f64]) -> Vec<f64> {
        self.rates_at(r).left_apply(r)
    }

    pub fn has_potential(&self) -> bool {
        match &self.kind {
            Kind::ThreeState { c, non_gibbs, .. } => *non_gibbs || c[1] == c[2],
            Kind::Slow { base, .. } => base.has_potential(),
            Kind::Custom(_) => false,
            _ => true,
        }
    }

    /// Potential `U` with `π(r)_y / π(r)_x = exp(-D_{e_y - e_x} U(r))`, when the family has one.
    pub fn potential(&self, r: &[f64]) -> Option<Result<f64>> {
        if !self.has_potential() {
            return None;
        }
        let d = self.dim;
        let value = match &self.kind {
            Kind::Constant { pi, .. } => {
                Ok(-r.iter().zip(pi).map(|(x, p)| x * p.ln()).sum::<f64>())
            }
            Kind::Gibbs { v, w, beta, .. } => {
                let mut quad = 0.0;
                for x in 0..d {
                    for y in 0..d {
                        quad += r[x] * w[x * d + y] * r[y];
                    }
                }
                Ok(simplex::dot(v, r) + beta * quad)
            }
            Kind::Slow {
                base,
                pi_star,
                lambda,
            } => {
                if *lambda > 0.0 {
                    let q = slow_argument(r, pi_star, *lambda);
                    base.potential(&q)?.map(|u| u / lambda)
                } else {
                    let g = base.potential_gradient(pi_star)?;
                    Ok(simplex::dot(&g, r))
                }
            }
            Kind::BirthDeath { phi, .. } => phi.iter().zip(r).try_fold(0.0, |acc, (f, &x)| {
                Ok(acc + integral(|w| f.eval1(w).ln(), x)?)
            }),
            Kind::Metropolis { k, r: rr, .. } => {
                let mut total = 0.0;
                for z in 0..d {
                    match integral(|w| rr[z].eval1(w), r[z]) {
                        Ok(v) => total += v + k[z].eval(r) * r[z],
                        Err(e) => return Some(Err(e)),
                    }
                }
                Ok(total)
            }
            Kind::ThreeState {
                a1,
                a2,
                b2,
                b3,
                kappa,
                c,
                r_star,
                ..
            } => {
                let inner: f64 = (0..3).map(|i| (r_star[i] - r[i]) * c[i]).sum();
                Ok(kappa * r[0] * inner
                    + (a1 * a2 / (b2 * b3)).ln() * r[0]
                    + (a2 / b3).ln() * r[1]
                    + 0.5 * kappa * r[0] * r[0] * (c[0] - c[1]))
            }
            Kind::NearestNeighbor { a, b } => {
                let u = tail_sums(r);
                let mut total = 0.0;
                for j in 0..d - 1 {
                    match integral(|w| (b[j].eval1(w) / a[j].eval1(w)).ln(), u[j]) {
                        Ok(v) => total += v,
                        Err(e) => return Some(Err(e)),
                    }
                }
                Ok(total)
            }
            Kind::Telecom {
                space,
                lambda,
                mu,
                gamma,
            } => {
                let a = space.class_means(r);
                let mut total = 0.0;
                for m in 0..a.len() {
                    for (s, &rx) in space.states.iter().zip(r) {
                        total += rx * (ln_factorial(s[m]) + s[m] as f64 * (mu[m] + gamma[m]).ln());
                    }
                    total -= log_linear_integral(lambda[m], gamma[m], a[m]);
                }
                Ok(total)
            }
            Kind::NonLocallyGibbs { psi, .. } => integral(|w| psi.eval1(w).ln(), r[2]),
            Kind::Custom(_) => return None,
        };
        Some(value)
    }

    /// Full gradient `∇U(r) ∈ R^d` of the potential (tangent projection is left to the caller).
    pub fn potential_gradient(&self, r: &[f64]) -> Option<Vec<f64>> {
        if !self.has_potential() {
            return None;
        }
        let d = self.dim;
        match &self.kind {
            Kind::Constant { pi, .. } => Some(pi.iter().map(|p| -p.ln()).collect()),
            Kind::Gibbs { .. } => self.gibbs_h(r),
            Kind::Slow {
                base,
                pi_star,
                lambda,
            } => {
                let q = if *lambda > 0.0 {
                    slow_argument(r, pi_star, *lambda)
                } else {
                    pi_star.clone()
                };
                base.potential_gradient(&q)
            }
            Kind::BirthDeath { phi, .. } => {
                Some(phi.iter().zip(r).map(|(f, &x)| f.eval1(x).ln()).collect())
            }
            Kind::Metropolis { .. } => Some(self.metropolis_energy(r)),
            Kind::ThreeState {
                a1,
                a2,
                b2,
                b3,
                kappa,
                c,
                r_star,
                ..
            } => {
                let inner: f64 = (0..3).map(|i| (r_star[i] - r[i]) * c[i]).sum();
                Some(vec![
                    kappa * inner - kappa * r[0] * c[0]
                        + (a1 * a2 / (b2 * b3)).ln()
                        + kappa * r[0] * (c[0] - c[1]),
                    -kappa * r[0] * c[1] + (a2 / b3).ln(),
                    -kappa * r[0] * c[2],
                ])
            }
            Kind::NearestNeighbor { a, b } => {
                let u = tail_sums(r);
                let mut g = vec![0.0; d];
                let mut acc = 0.0;
                for k in 1..d {
                    acc += (b[k - 1].eval1(u[k - 1]) / a[k - 1].eval1(u[k - 1])).ln();
                    g[k] = acc;
                }
                Some(g)
            }
            Kind::Telecom {
                space,
                lambda,
                mu,
                gamma,
            } => {
                let a = space.class_means(r);
                Some(
                    space
                        .states
                        .iter()
                        .map(|s| {
                            (0..a.len())
                                .map(|m| {
                                    let x = s[m] as f64;
                                    ln_factorial(s[m]) + x * (mu[m] + gamma[m]).ln()
                                        - x * (lambda[m] + gamma[m] * a[m]).ln()
                                })
                                .sum()
                        })
                        .collect(),
                )
            }
            Kind::NonLocallyGibbs { psi, .. } => Some(vec![0.0, 0.0, psi.eval1(r[2]).ln()]),
            Kind::Custom(_) => None,
        }
    }

    /// Sampled lower bound on the Lipschitz constant of `r ↦ Γ(r)` (entrywise ℓ1 over ℓ1).
    ///
    /// Half of the pairs are independent uniform draws, the other half are
    /// close pairs, which capture local slopes the far pairs average out.
    pub fn lipschitz_estimate(&self, samples: usize, seed: u64) -> Result<f64> {
        if samples < 2 {
            return Err(invalid("lipschitz_estimate needs at least 2 samples"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best = 0.0f64;
        for k in 0..samples {
            let r = simplex::random_interior(self.dim, 0.0, &mut rng);
            let r2 = if k % 2 == 0 {
                simplex::random_interior(self.dim, 0.0, &mut rng)
            } else {
                let dir = simplex::random_tangent_direction(self.dim, &mut rng);
                let room = r.min_coord();
                let step = 1e-3 * rand::Rng::random::<f64>(&mut rng) * room.max(1e-6);
                let moved: Vec<f64> = r
                    .weights()
                    .iter()
                    .zip(&dir)
                    .map(|(x, v)| x + step * v)
                    .collect();
                match SimplexPoint::new(moved) {
                    Ok(p) => p,
                    Err(_) => continue,
                }
            };
            let dist = r.l1_distance(&r2);
            if dist < 1e-14 {
                continue;
            }
            let diff = self
                .evaluate_rates(&r)
                .l1_distance(&self.evaluate_rates(&r2));
            best = best.max(diff / dist);
        }
        Ok(best)
    }
}

/// `λ (r - π*) + π*`.
pub(crate) fn slow_argument(r: &[f64], pi_star: &[f64], lambda: f64) -> Vec<f64> {
    r.iter()
        .zip(pi_star)
        .map(|(x, p)| lambda * (x - p) + p)
        .collect()
}

/// `u_i = ⟨r, c^i⟩ = Σ_{k > i} r_k` for `i = 0..d-1` (zero-based).
fn tail_sums(r: &[f64]) -> Vec<f64> {
    let d = r.len();
    let mut u = vec![0.0; d];
    let mut acc = 0.0;
    for i in (0..d).rev() {
        u[i] = acc;
        acc += r[i];
    }
    u
}
