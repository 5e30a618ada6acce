//! The `N`-particle empirical-measure chain on the lattice `S_N = S ∩ (1/N)Z^d`:
//! exact generator, forward evolution, stationary law, scaled relative entropies,
//! and a Gillespie simulator.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::linalg;
use crate::models::RateFamily;
use crate::simplex::{self, SimplexPoint};

/// Largest lattice the builder accepts.
pub const MAX_LATTICE_STATES: usize = 200_000;
/// Chains up to this size use GTH elimination for the stationary law.
pub const GTH_STATE_LIMIT: usize = 1200;
/// `q t` above which evolution switches to uniformization.
pub const UNIFORMIZATION_THRESHOLD: f64 = 50.0;

/// `binomial(n + d - 1, d - 1)`, saturating.
pub fn lattice_size(n: usize, d: usize) -> usize {
    let k = d.saturating_sub(1) as u128;
    let top = (n + d - 1) as u128;
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (top - i) / (i + 1);
        if acc > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    acc as usize
}

/// `ln k!` for `k = 0..=n`.
pub fn log_factorials(n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n + 1];
    for k in 1..=n {
        t[k] = t[k - 1] + (k as f64).ln();
    }
    t
}

#[derive(Debug, Clone)]
pub struct LatticeChain {
    n: usize,
    d: usize,
    states: Vec<Vec<u32>>,
    index: BTreeMap<Vec<u32>, usize>,
    /// Off-diagonal generator entries per row.
    rows: Vec<Vec<(usize, f64)>>,
    diag: Vec<f64>,
    model_label: String,
}

/// Builds the generator `ℒ^N` with rate `N r_x Γ_xy(r)` from `r` to `r + (e_y - e_x)/N`.
pub fn build_lattice_chain(model: &RateFamily, n: usize) -> Result<LatticeChain> {
    let d = model.dim();
    if n == 0 {
        return Err(Error::InvalidInput(
            "particle count must be positive".into(),
        ));
    }
    let size = lattice_size(n, d);
    if size > MAX_LATTICE_STATES {
        return Err(Error::TooLarge {
            states: size,
            limit: MAX_LATTICE_STATES,
        });
    }
    let mut states = Vec::with_capacity(size);
    simplex::for_each_composition(n, d, |k| {
        states.push(k.iter().map(|&v| v as u32).collect::<Vec<u32>>())
    });
    let index: BTreeMap<Vec<u32>, usize> = states
        .iter()
        .cloned()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect();
    let nf = n as f64;
    let mut rows = Vec::with_capacity(size);
    let mut diag = Vec::with_capacity(size);
    for s in &states {
        let r: Vec<f64> = s.iter().map(|&c| c as f64 / nf).collect();
        let gamma = model.rates_at(&r);
        let mut row = Vec::new();
        let mut total = 0.0;
        let mut target = s.clone();
        for x in 0..d {
            if s[x] == 0 {
                continue;
            }
            for y in 0..d {
                let g = gamma.get(x, y);
                if x == y || !(g > 0.0) {
                    continue;
                }
                target[x] -= 1;
                target[y] += 1;
                let j = index[&target];
                target[x] += 1;
                target[y] -= 1;
                let rate = s[x] as f64 * g;
                row.push((j, rate));
                total += rate;
            }
        }
        rows.push(row);
        diag.push(-total);
    }
    Ok(LatticeChain {
        n,
        d,
        states,
        index,
        rows,
        diag,
        model_label: model.label().to_string(),
    })
}

impl LatticeChain {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn model_label(&self) -> &str {
        &self.model_label
    }

    /// Particle counts `N r` of state `i`.
    pub fn counts(&self, i: usize) -> &[u32] {
        &self.states[i]
    }

    pub fn point(&self, i: usize) -> SimplexPoint {
        let nf = self.n as f64;
        SimplexPoint::new(self.states[i].iter().map(|&c| c as f64 / nf).collect())
            .expect("lattice point")
    }

    pub fn index_of(&self, counts: &[u32]) -> Option<usize> {
        self.index.get(counts).copied()
    }

    /// Lattice state nearest (ℓ1) to `p`.
    pub fn nearest(&self, p: &SimplexPoint) -> usize {
        let nf = self.n as f64;
        (0..self.len())
            .map(|i| {
                let dist: f64 = self.states[i]
                    .iter()
                    .zip(p.weights())
                    .map(|(&c, q)| (c as f64 / nf - q).abs())
                    .sum();
                (i, dist)
            })
            .fold(
                (0, f64::INFINITY),
                |best, cur| if cur.1 < best.1 { cur } else { best },
            )
            .0
    }

    /// Off-diagonal generator entries of row `i`.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn diagonal(&self, i: usize) -> f64 {
        self.diag[i]
    }

    pub fn max_exit_rate(&self) -> f64 {
        self.diag.iter().map(|v| -v).fold(0.0, f64::max)
    }

    /// `u ℒ^N`.
    pub fn left_apply(&self, u: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = u.iter().zip(&self.diag).map(|(a, b)| a * b).collect();
        for (i, row) in self.rows.iter().enumerate() {
            let ui = u[i];
            if ui == 0.0 {
                continue;
            }
            for &(j, rate) in row {
                out[j] += ui * rate;
            }
        }
        out
    }

    fn reachable(&self, forward: bool) -> bool {
        let n = self.len();
        let mut incoming: Vec<Vec<usize>> = Vec::new();
        if !forward {
            incoming = vec![Vec::new(); n];
            for (i, row) in self.rows.iter().enumerate() {
                for &(j, _) in row {
                    incoming[j].push(i);
                }
            }
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            let next: Vec<usize> = if forward {
                self.rows[i].iter().map(|e| e.0).collect()
            } else {
                incoming[i].clone()
            };
            for j in next {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn is_irreducible(&self) -> bool {
        self.len() <= 1 || (self.reachable(true) && self.reachable(false))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeDistribution {
    pub n: usize,
    pub d: usize,
    pub mass: Vec<f64>,
    pub time: f64,
}

impl LatticeDistribution {
    pub fn new(chain: &LatticeChain, mass: Vec<f64>, time: f64) -> Result<Self> {
        if mass.len() != chain.len() {
            return Err(Error::InvalidInput(
                "mass vector does not match the lattice".into(),
            ));
        }
        if mass.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::InvalidInput(
                "masses must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(alloc::format!("masses sum to {total}")));
        }
        Ok(Self {
            n: chain.n,
            d: chain.d,
            mass,
            time,
        })
    }

    /// Unit mass at the lattice state nearest to `p`.
    pub fn point_mass(chain: &LatticeChain, p: &SimplexPoint) -> Self {
        let mut mass = vec![0.0; chain.len()];
        mass[chain.nearest(p)] = 1.0;
        Self {
            n: chain.n,
            d: chain.d,
            mass,
            time: 0.0,
        }
    }

    /// Law of the empirical measure of `N` i.i.d. draws from `q` (multinomial).
    pub fn product_form(chain: &LatticeChain, q: &SimplexPoint) -> Self {
        let lf = log_factorials(chain.n);
        let mass = (0..chain.len())
            .map(|i| log_multinomial_mass(chain.counts(i), q.weights(), &lf).exp())
            .collect();
        Self {
            n: chain.n,
            d: chain.d,
            mass,
            time: 0.0,
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// `E[r]` under this law.
    pub fn mean(&self, chain: &LatticeChain) -> Vec<f64> {
        let nf = chain.n as f64;
        let mut m = vec![0.0; chain.d];
        for (i, &w) in self.mass.iter().enumerate() {
            for (mx, &c) in m.iter_mut().zip(chain.counts(i)) {
                *mx += w * c as f64 / nf;
            }
        }
        m
    }
}

/// Law of the empirical measure of `N` i.i.d. `q`-distributed particles.
pub fn product_form_law(chain: &LatticeChain, q: &SimplexPoint) -> LatticeDistribution {
    LatticeDistribution::product_form(chain, q)
}

/// `ln [multinomial(N; c) Π q_x^{c_x}]`, `-∞` when `c` charges a null state of `q`.
fn log_multinomial_mass(c: &[u32], q: &[f64], lf: &[f64]) -> f64 {
    let n: usize = c.iter().map(|&v| v as usize).sum();
    let mut v = lf[n];
    for (&cx, &qx) in c.iter().zip(q) {
        v -= lf[cx as usize];
        if cx > 0 {
            if !(qx > 0.0) {
                return f64::NEG_INFINITY;
            }
            v += cx as f64 * qx.ln();
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvolveMethod {
    /// Uniformization when `q t >` [`UNIFORMIZATION_THRESHOLD`], RK4 otherwise.
    Auto,
    Rk4,
    Uniformization,
}

/// Solves `du/dt = u ℒ^N` from `u0` for time `t`.
pub fn evolve_distribution(
    chain: &LatticeChain,
    u0: &LatticeDistribution,
    t: f64,
    dt: f64,
) -> Result<LatticeDistribution> {
    evolve_distribution_with(chain, u0, t, dt, EvolveMethod::Auto)
}

pub fn evolve_distribution_with(
    chain: &LatticeChain,
    u0: &LatticeDistribution,
    t: f64,
    dt: f64,
    method: EvolveMethod,
) -> Result<LatticeDistribution> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidInput(
            "evolution time must be finite and nonnegative".into(),
        ));
    }
    if u0.mass.len() != chain.len() {
        return Err(Error::InvalidInput(
            "distribution does not match the lattice".into(),
        ));
    }
    if t == 0.0 {
        return Ok(u0.clone());
    }
    let q = chain.max_exit_rate();
    let use_uniform = match method {
        EvolveMethod::Auto => q * t > UNIFORMIZATION_THRESHOLD,
        EvolveMethod::Rk4 => false,
        EvolveMethod::Uniformization => true,
    };
    let mass = if use_uniform {
        log::info!(
            "evolving lattice law by uniformization (q t = {:.3e})",
            q * t
        );
        uniformize(chain, &u0.mass, t, q)
    } else {
        if !(dt > 0.0) || dt * q > 0.1 + 1e-12 {
            return Err(Error::StepTooLarge {
                time: 0.0,
                value: dt * q,
            });
        }
        rk4_linear(chain, &u0.mass, t, dt)?
    };
    Ok(LatticeDistribution {
        n: u0.n,
        d: u0.d,
        mass,
        time: u0.time + t,
    })
}

fn rk4_linear(chain: &LatticeChain, u0: &[f64], t: f64, dt: f64) -> Result<Vec<f64>> {
    let steps = (t / dt - 1e-9).ceil().max(1.0) as usize;
    let h = t / steps as f64;
    let mut u = u0.to_vec();
    let axpy = |a: &[f64], k: &[f64], s: f64| -> Vec<f64> {
        a.iter().zip(k).map(|(x, y)| x + s * y).collect()
    };
    for step in 1..=steps {
        let k1 = chain.left_apply(&u);
        let k2 = chain.left_apply(&axpy(&u, &k1, 0.5 * h));
        let k3 = chain.left_apply(&axpy(&u, &k2, 0.5 * h));
        let k4 = chain.left_apply(&axpy(&u, &k3, h));
        for i in 0..u.len() {
            u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let low = u.iter().copied().fold(f64::INFINITY, f64::min);
        if low < -1e-9 {
            return Err(Error::StepTooLarge {
                time: step as f64 * h,
                value: low,
            });
        }
        for x in &mut u {
            *x = x.max(0.0);
        }
    }
    let total: f64 = u.iter().sum();
    Ok(u.into_iter().map(|x| x / total).collect())
}

/// `u(t) = Σ_k Pois(k; q t) u0 P^k` with `P = I + ℒ^N / q`, truncated at `q t + 10 √(q t) + 20`.
fn uniformize(chain: &LatticeChain, u0: &[f64], t: f64, q: f64) -> Vec<f64> {
    if q == 0.0 {
        return u0.to_vec();
    }
    let lam = q * t;
    let kmax = (lam + 10.0 * lam.sqrt() + 20.0).ceil() as usize;
    let mut v = u0.to_vec();
    let mut out = vec![0.0; v.len()];
    let mut log_w = -lam;
    for k in 0..=kmax {
        if k > 0 {
            let flow = chain.left_apply(&v);
            for (x, f) in v.iter_mut().zip(&flow) {
                *x += f / q;
            }
            log_w += lam.ln() - (k as f64).ln();
        }
        let w = log_w.exp();
        if w > 0.0 {
            for (o, x) in out.iter_mut().zip(&v) {
                *o += w * x;
            }
        }
    }
    let total: f64 = out.iter().sum();
    out.into_iter().map(|x| x.max(0.0) / total).collect()
}

/// Stationary law of the lattice chain.
///
/// Uses GTH elimination up to [`GTH_STATE_LIMIT`] states, Gauss–Seidel sweeps beyond.
pub fn stationary_of_chain(chain: &LatticeChain) -> Result<LatticeDistribution> {
    if !chain.is_irreducible() {
        return Err(Error::NotIrreducible);
    }
    let n = chain.len();
    let mass = if n <= GTH_STATE_LIMIT {
        let mut dense = vec![0.0; n * n];
        for i in 0..n {
            dense[i * n + i] = chain.diag[i];
            for &(j, rate) in &chain.rows[i] {
                dense[i * n + j] += rate;
            }
        }
        linalg::gth_stationary(&dense, n)?
    } else {
        gauss_seidel_stationary(chain)?
    };
    let res: f64 = chain.left_apply(&mass).iter().map(|v| v.abs()).sum();
    let scale = chain.max_exit_rate().max(1.0);
    if res > 1e-10 * scale {
        return Err(Error::NoConvergence {
            iterations: 0,
            residual: res,
        });
    }
    Ok(LatticeDistribution {
        n: chain.n,
        d: chain.d,
        mass,
        time: f64::INFINITY,
    })
}

fn gauss_seidel_stationary(chain: &LatticeChain) -> Result<Vec<f64>> {
    let n = chain.len();
    let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, row) in chain.rows.iter().enumerate() {
        for &(j, rate) in row {
            incoming[j].push((i, rate));
        }
    }
    let mut pi = vec![1.0 / n as f64; n];
    let scale = chain.max_exit_rate().max(1.0);
    let max_sweeps = 100_000;
    let mut res = f64::INFINITY;
    for sweep in 0..max_sweeps {
        for j in 0..n {
            let inflow: f64 = incoming[j].iter().map(|&(i, r)| pi[i] * r).sum();
            pi[j] = inflow / -chain.diag[j];
        }
        let total: f64 = pi.iter().sum();
        for p in &mut pi {
            *p /= total;
        }
        if sweep % 10 == 9 {
            res = chain.left_apply(&pi).iter().map(|v| v.abs()).sum();
            if res <= 1e-11 * scale {
                return Ok(pi);
            }
        }
    }
    Err(Error::NoConvergence {
        iterations: max_sweeps,
        residual: res,
    })
}

/// `-(1/N) log mass(q)` shifted to minimum zero; `None` where the mass vanishes.
pub fn rate_estimate(u: &LatticeDistribution) -> Result<Vec<Option<f64>>> {
    let nf = u.n as f64;
    let raw: Vec<Option<f64>> = u
        .mass
        .iter()
        .map(|&m| if m > 0.0 { Some(-m.ln() / nf) } else { None })
        .collect();
    let min = raw.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::ZeroMass);
    }
    Ok(raw.into_iter().map(|v| v.map(|x| x - min)).collect())
}

/// `(1/N) R(⊗^N q ‖ p^N)` where `p^N` is the exchangeable law whose empirical measure has law `u`.
pub fn scaled_relative_entropy(
    chain: &LatticeChain,
    q: &SimplexPoint,
    u: &LatticeDistribution,
) -> Result<f64> {
    if q.dim() != chain.d || u.mass.len() != chain.len() {
        return Err(Error::InvalidInput("dimension mismatch".into()));
    }
    let lf = log_factorials(chain.n);
    let mut total = 0.0;
    for i in 0..chain.len() {
        let lm = log_multinomial_mass(chain.counts(i), q.weights(), &lf);
        if lm == f64::NEG_INFINITY {
            continue;
        }
        let m = lm.exp();
        if m == 0.0 {
            continue;
        }
        let ui = u.mass[i];
        if !(ui > 0.0) {
            return Err(Error::ZeroMass);
        }
        total += m * (lm - ui.ln());
    }
    Ok((total / chain.n as f64).max(0.0))
}

/// Initial condition of the particle system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    /// All mass at the lattice state nearest to `p`.
    PointMass { p: Vec<f64> },
    /// Each particle drawn independently from `q`.
    Iid { q: Vec<f64> },
    /// An explicit law on particle-count vectors.
    Lattice {
        counts: Vec<Vec<u32>>,
        mass: Vec<f64>,
    },
}

impl InitialCondition {
    /// Draws initial particle counts.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, d: usize, rng: &mut R) -> Result<Vec<u32>> {
        match self {
            InitialCondition::PointMass { p } => {
                let p = SimplexPoint::new(p.clone())?;
                if p.dim() != d {
                    return Err(Error::InvalidInput(
                        "initial point dimension mismatch".into(),
                    ));
                }
                Ok(nearest_counts(p.weights(), n))
            }
            InitialCondition::Iid { q } => {
                let q = SimplexPoint::new(q.clone())?;
                if q.dim() != d {
                    return Err(Error::InvalidInput("initial law dimension mismatch".into()));
                }
                let mut c = vec![0u32; d];
                for _ in 0..n {
                    c[categorical(q.weights(), rng)] += 1;
                }
                Ok(c)
            }
            InitialCondition::Lattice { counts, mass } => {
                if counts.len() != mass.len() || counts.is_empty() {
                    return Err(Error::InvalidInput(
                        "counts and mass must have equal nonzero length".into(),
                    ));
                }
                for c in counts {
                    if c.len() != d || c.iter().map(|&v| v as usize).sum::<usize>() != n {
                        return Err(Error::InvalidInput(
                            "lattice initial state has wrong shape or total".into(),
                        ));
                    }
                }
                let law = SimplexPoint::from_masses(mass.clone())?;
                Ok(counts[categorical(law.weights(), rng)].clone())
            }
        }
    }

    /// The corresponding exact law on the lattice.
    pub fn lattice_law(&self, chain: &LatticeChain) -> Result<LatticeDistribution> {
        match self {
            InitialCondition::PointMass { p } => Ok(LatticeDistribution::point_mass(
                chain,
                &SimplexPoint::new(p.clone())?,
            )),
            InitialCondition::Iid { q } => {
                Ok(product_form_law(chain, &SimplexPoint::new(q.clone())?))
            }
            InitialCondition::Lattice { counts, mass } => {
                let law = SimplexPoint::from_masses(mass.clone())?;
                let mut m = vec![0.0; chain.len()];
                for (c, w) in counts.iter().zip(law.weights()) {
                    let i = chain
                        .index_of(c)
                        .ok_or_else(|| Error::InvalidInput("state not on the lattice".into()))?;
                    m[i] += w;
                }
                LatticeDistribution::new(chain, m, 0.0)
            }
        }
    }
}

fn categorical<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * w.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &x) in w.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    w.iter().rposition(|&x| x > 0.0).unwrap_or(w.len() - 1)
}

/// Largest-remainder rounding of `N p` to integer counts.
fn nearest_counts(p: &[f64], n: usize) -> Vec<u32> {
    let nf = n as f64;
    let mut c: Vec<u32> = p.iter().map(|x| (x * nf).floor() as u32).collect();
    let mut left = n - c.iter().map(|&v| v as usize).sum::<usize>();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = p[a] * nf - c[a] as f64;
        let rb = p[b] * nf - c[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        c[i] += 1;
        left -= 1;
    }
    c
}

/// One simulated path of the empirical measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalPath {
    pub n: usize,
    /// Time 0 followed by the jump times.
    pub jump_times: Vec<f64>,
    pub states: Vec<SimplexPoint>,
    pub seed: u64,
    pub replica: u64,
}

impl EmpiricalPath {
    /// State at time `t` (right-continuous).
    pub fn at_time(&self, t: f64) -> &SimplexPoint {
        let k = self.jump_times.partition_point(|&s| s <= t);
        &self.states[k.max(1) - 1]
    }

    /// `sup_k ‖μ^N(t_k) - p(t_k)‖₁` over the trajectory's time grid.
    pub fn sup_deviation(&self, traj: &Trajectory) -> f64 {
        traj.times
            .iter()
            .zip(&traj.points)
            .map(|(&t, p)| self.at_time(t).l1_distance(p))
            .fold(0.0, f64::max)
    }
}

/// Exact-jump simulation; the stream is `(seed, replica)`.
pub fn gillespie_simulate(
    model: &RateFamily,
    n: usize,
    initial: &InitialCondition,
    t_end: f64,
    seed: u64,
    replica: u64,
) -> Result<EmpiricalPath> {
    if n == 0 {
        return Err(Error::InvalidInput(
            "particle count must be positive".into(),
        ));
    }
    let d = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    let mut counts = initial.sample(n, d, &mut rng)?;
    let nf = n as f64;
    let to_point = |c: &[u32]| SimplexPoint::new(c.iter().map(|&v| v as f64 / nf).collect());
    let mut jump_times = vec![0.0];
    let mut states = vec![to_point(&counts)?];
    let mut t = 0.0;
    let mut edges: Vec<(usize, usize, f64)> = Vec::with_capacity(d * d);
    loop {
        let r: Vec<f64> = counts.iter().map(|&v| v as f64 / nf).collect();
        let gamma = model.rates_at(&r);
        edges.clear();
        let mut total = 0.0;
        for x in 0..d {
            if counts[x] == 0 {
                continue;
            }
            for y in 0..d {
                let g = gamma.get(x, y);
                if x != y && g > 0.0 {
                    let rate = counts[x] as f64 * g;
                    edges.push((x, y, rate));
                    total += rate;
                }
            }
        }
        if !(total > 0.0) {
            break;
        }
        let hold: f64 = Exp1.sample(&mut rng);
        t += hold / total;
        if t > t_end {
            break;
        }
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = edges[edges.len() - 1];
        for &e in &edges {
            acc += e.2;
            if u < acc {
                chosen = e;
                break;
            }
        }
        counts[chosen.0] -= 1;
        counts[chosen.1] += 1;
        jump_times.push(t);
        states.push(to_point(&counts)?);
    }
    Ok(EmpiricalPath {
        n,
        jump_times,
        states,
        seed,
        replica,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::integrate_ode;
    use crate::lyapunov::relative_entropy;
    use crate::models::{build_model, ModelSpec, RateMatrix};
    use proptest::prelude::*;

    fn linear(rows: &[Vec<f64>]) -> RateFamily {
        RateFamily::constant(RateMatrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn lattice_sizes_and_structure() {
        let cw = build_model(&ModelSpec::curie_weiss(1.0)).unwrap();
        let c = build_lattice_chain(&cw, 10).unwrap();
        assert_eq!(c.len(), 11);
        for i in 0..c.len() {
            for &(j, _) in c.row(i) {
                assert_eq!((i as i64 - j as i64).abs(), 1);
            }
        }
        let c2 = build_lattice_chain(&cw, 2).unwrap();
        let mid = c2.index_of(&[1, 1]).unwrap();
        let to = c2.index_of(&[0, 2]).unwrap();
        let rate = c2.row(mid).iter().find(|e| e.0 == to).unwrap().1;
        assert_eq!(rate, cw.rates_at(&[0.5, 0.5]).get(0, 1));

        let g3 = build_model(&ModelSpec::ThreeStateB {
            a1: 1.0,
            a2: 2.0,
            b2: 1.0,
            b3: 0.5,
            kappa: 1.0,
            c: [0.0, 1.0, 1.0],
            r_star: None,
        })
        .unwrap();
        let c3 = build_lattice_chain(&g3, 20).unwrap();
        assert_eq!(c3.len(), 231);
        for i in 0..c3.len() {
            let s: f64 = c3.diagonal(i) + c3.row(i).iter().map(|e| e.1).sum::<f64>();
            assert!(s.abs() <= 1e-12);
        }
        assert_eq!(lattice_size(20, 3), 231);
        assert!(matches!(
            build_lattice_chain(&g3, 1000),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn evolution_basics() {
        let cw = build_model(&ModelSpec::curie_weiss(0.5)).unwrap();
        let chain = build_lattice_chain(&cw, 50).unwrap();
        let u0 =
            LatticeDistribution::point_mass(&chain, &SimplexPoint::new(vec![0.9, 0.1]).unwrap());
        assert_eq!(evolve_distribution(&chain, &u0, 0.0, 1e-3).unwrap(), u0);
        let dt = 0.1 / chain.max_exit_rate();
        let u = evolve_distribution(&chain, &u0, 3.0, dt).unwrap();
        assert!((u.total_mass() - 1.0).abs() < 1e-10);
        let ode =
            integrate_ode(&cw, &SimplexPoint::new(vec![0.9, 0.1]).unwrap(), 3.0, 1e-3).unwrap();
        assert!(simplex::l1_distance(&u.mean(&chain), ode.final_point().weights()) <= 0.02);

        let st = stationary_of_chain(&chain).unwrap();
        let moved = evolve_distribution(&chain, &st, 5.0, dt).unwrap();
        assert!(simplex::l1_distance(&moved.mass, &st.mass) <= 1e-10);
        let too_big = evolve_distribution_with(&chain, &u0, 1.0, 1.0, EvolveMethod::Rk4);
        assert!(matches!(too_big, Err(Error::StepTooLarge { .. })));
    }

    #[test]
    fn uniformization_matches_rk4() {
        let cw = build_model(&ModelSpec::curie_weiss(1.2)).unwrap();
        let chain = build_lattice_chain(&cw, 30).unwrap();
        let u0 =
            LatticeDistribution::point_mass(&chain, &SimplexPoint::new(vec![0.2, 0.8]).unwrap());
        let dt = 0.05 / chain.max_exit_rate();
        let a = evolve_distribution_with(&chain, &u0, 2.0, dt, EvolveMethod::Rk4).unwrap();
        let b =
            evolve_distribution_with(&chain, &u0, 2.0, dt, EvolveMethod::Uniformization).unwrap();
        assert!(simplex::l1_distance(&a.mass, &b.mass) < 1e-9);
    }

    #[test]
    fn single_particle_chain() {
        let m = linear(&[vec![-2.0, 2.0], vec![0.5, -0.5]]);
        let chain = build_lattice_chain(&m, 1).unwrap();
        let st = stationary_of_chain(&chain).unwrap();
        let e1 = chain.index_of(&[1, 0]).unwrap();
        assert!((st.mass[e1] - 0.2).abs() < 1e-14);
    }

    #[test]
    fn independent_particles_have_multinomial_stationary_law() {
        let m = linear(&[
            vec![-1.0, 0.6, 0.4],
            vec![0.3, -0.5, 0.2],
            vec![0.5, 0.5, -1.0],
        ]);
        let pi = m.stationary(&[0.3, 0.3, 0.4]).unwrap();
        let chain = build_lattice_chain(&m, 15).unwrap();
        let st = stationary_of_chain(&chain).unwrap();
        let oracle = product_form_law(&chain, &pi);
        let err = st
            .mass
            .iter()
            .zip(&oracle.mass)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn gauss_seidel_matches_gth() {
        let cw = build_model(&ModelSpec::GibbsAffine {
            v: vec![0.0, 0.2, -0.1],
            w: vec![
                vec![0.0, 1.0, 0.0],
                vec![1.0, 0.0, 0.5],
                vec![0.0, 0.5, 0.0],
            ],
            beta: 0.7,
            adjacency: None,
        })
        .unwrap();
        let chain = build_lattice_chain(&cw, 25).unwrap();
        let gth = stationary_of_chain(&chain).unwrap();
        let gs = gauss_seidel_stationary(&chain).unwrap();
        assert!(simplex::l1_distance(&gth.mass, &gs) < 1e-9);
    }

    #[test]
    fn stationary_rate_minimum_sits_one_site_from_the_fixed_point() {
        // Birth-death balance at the centre: mass(N/2) / mass(N/2 - 1) = (1 + 2/N) e^{-4 beta / N} < 1.
        let beta = 0.5;
        let cw = build_model(&ModelSpec::curie_weiss(beta)).unwrap();
        for n in [50usize, 100] {
            let chain = build_lattice_chain(&cw, n).unwrap();
            let st = stationary_of_chain(&chain).unwrap();
            let centre = chain.nearest(&SimplexPoint::uniform(2));
            let below = chain
                .index_of(&[(n / 2 - 1) as u32, (n / 2 + 1) as u32])
                .unwrap();
            let nf = n as f64;
            let oracle = (1.0 + 2.0 / nf) * (-4.0 * beta / nf).exp();
            assert!((st.mass[centre] / st.mass[below] - oracle).abs() < 1e-10);
            let est = rate_estimate(&st).unwrap();
            let argmin = (0..chain.len())
                .min_by(|&a, &b| est[a].unwrap().total_cmp(&est[b].unwrap()))
                .unwrap();
            assert_eq!((argmin as i64 - centre as i64).abs(), 1);
        }
    }

    #[test]
    fn rate_estimate_examples() {
        let m = linear(&[vec![-1.0, 1.0], vec![2.0, -2.0]]);
        let chain = build_lattice_chain(&m, 10).unwrap();
        let pm =
            LatticeDistribution::point_mass(&chain, &SimplexPoint::new(vec![0.3, 0.7]).unwrap());
        let est = rate_estimate(&pm).unwrap();
        assert_eq!(est.iter().filter(|v| v.is_some()).count(), 1);
        assert_eq!(est[chain.index_of(&[3, 7]).unwrap()], Some(0.0));
        let zero = LatticeDistribution {
            n: 10,
            d: 2,
            mass: vec![0.0; 11],
            time: 0.0,
        };
        assert_eq!(rate_estimate(&zero).unwrap_err(), Error::ZeroMass);

        let pi = m.stationary(&[0.5, 0.5]).unwrap();
        let deviation = |n: usize| {
            let chain = build_lattice_chain(&m, n).unwrap();
            let est = rate_estimate(&stationary_of_chain(&chain).unwrap()).unwrap();
            (1..chain.len() - 1)
                .map(|i| (est[i].unwrap() - relative_entropy(&chain.point(i), &pi).unwrap()).abs())
                .fold(0.0, f64::max)
        };
        assert!(deviation(200) < deviation(50));
    }

    #[test]
    fn gibbs_rate_estimate_approaches_free_energy() {
        use crate::lyapunov::LyapunovCandidate;
        let cw = build_model(&ModelSpec::curie_weiss(0.5)).unwrap();
        let f = LyapunovCandidate::gibbs_free_energy(&cw).unwrap();
        let deviation = |n: usize| {
            let chain = build_lattice_chain(&cw, n).unwrap();
            let est = rate_estimate(&stationary_of_chain(&chain).unwrap()).unwrap();
            let vals: Vec<f64> = (0..chain.len())
                .map(|i| f.value(chain.point(i).weights()))
                .collect();
            let interior: Vec<usize> = (1..chain.len() - 1).collect();
            let fmin = interior
                .iter()
                .map(|&i| vals[i])
                .fold(f64::INFINITY, f64::min);
            interior
                .iter()
                .map(|&i| (est[i].unwrap() - (vals[i] - fmin)).abs())
                .fold(0.0, f64::max)
        };
        assert!(deviation(200) < deviation(50));
    }

    #[test]
    fn scaled_relative_entropy_examples() {
        let m = linear(&[vec![-1.0, 1.0], vec![2.0, -2.0]]);
        let chain = build_lattice_chain(&m, 100).unwrap();
        let q = SimplexPoint::new(vec![0.37, 0.63]).unwrap();
        let own = product_form_law(&chain, &q);
        assert!(scaled_relative_entropy(&chain, &q, &own).unwrap().abs() < 1e-12);

        let st = stationary_of_chain(&chain).unwrap();
        let pi = m.stationary(&[0.5, 0.5]).unwrap();
        for k in [10, 30, 50, 70, 90] {
            let q = chain.point(chain.index_of(&[k, 100 - k]).unwrap());
            let f = scaled_relative_entropy(&chain, &q, &st).unwrap();
            let r = relative_entropy(&q, &pi).unwrap();
            assert!((f - r).abs() <= 5.0 * (100f64).ln() / 100.0);
        }

        let c1 = build_lattice_chain(&m, 1).unwrap();
        let u = LatticeDistribution::new(&c1, vec![0.25, 0.75], 0.0).unwrap();
        let q = SimplexPoint::new(vec![0.6, 0.4]).unwrap();
        let mean = SimplexPoint::new(u.mean(&c1)).unwrap();
        let direct = relative_entropy(&q, &mean).unwrap();
        assert!((scaled_relative_entropy(&c1, &q, &u).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn holding_times_are_exponential() {
        // Only 1 -> 2 is allowed; from N r_1 = 50 particles in state 1 the first jump is Exp(50 Γ12).
        let m = RateFamily::custom("one-way", 2, |_| {
            RateMatrix::from_off_diagonal(2, |x, _| if x == 0 { 1.5 } else { 0.0 })
        });
        let n = 50;
        let init = InitialCondition::PointMass { p: vec![1.0, 0.0] };
        let samples = 10_000;
        let mut sum = 0.0;
        for rep in 0..samples {
            let path = gillespie_simulate(&m, n, &init, 1e9, 17, rep).unwrap();
            sum += path.jump_times[1];
        }
        let mean = sum / samples as f64;
        let expected = 1.0 / (n as f64 * 1.5);
        let se = expected / (samples as f64).sqrt();
        assert!(
            (mean - expected).abs() <= 3.0 * se,
            "mean {mean} expected {expected}"
        );
    }

    #[test]
    fn gillespie_is_deterministic_and_single_jump() {
        let cw = build_model(&ModelSpec::curie_weiss(0.5)).unwrap();
        let init = InitialCondition::Iid { q: vec![0.9, 0.1] };
        let a = gillespie_simulate(&cw, 200, &init, 1.0, 5, 3).unwrap();
        let b = gillespie_simulate(&cw, 200, &init, 1.0, 5, 3).unwrap();
        assert_eq!(a, b);
        let c = gillespie_simulate(&cw, 200, &init, 1.0, 5, 4).unwrap();
        assert_ne!(a, c);
        for w in a.states.windows(2) {
            let diff = w[0].l1_distance(&w[1]);
            assert!((diff - 2.0 / 200.0).abs() < 1e-12);
        }
        assert!(a.jump_times.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn initial_condition_rounding() {
        assert_eq!(nearest_counts(&[0.34, 0.33, 0.33], 10), vec![4, 3, 3]);
        assert_eq!(nearest_counts(&[0.9, 0.1], 1000), vec![900, 100]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn generator_rows_sum_to_zero(n in 1usize..25, beta in 0.0f64..3.0) {
            let cw = build_model(&ModelSpec::curie_weiss(beta)).unwrap();
            let chain = build_lattice_chain(&cw, n).unwrap();
            prop_assert_eq!(chain.len(), n + 1);
            for i in 0..chain.len() {
                let s: f64 = chain.diagonal(i) + chain.row(i).iter().map(|e| e.1).sum::<f64>();
                prop_assert!(s.abs() <= 1e-12);
                prop_assert!(chain.row(i).iter().all(|e| e.1 >= 0.0));
            }
        }

        #[test]
        fn evolution_conserves_mass(seed in 0u64..1000) {
            let cw = build_model(&ModelSpec::curie_weiss(1.5)).unwrap();
            let chain = build_lattice_chain(&cw, 20).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = simplex::random_interior(2, 0.0, &mut rng);
            let u0 = product_form_law(&chain, &q);
            let u = evolve_distribution(&chain, &u0, 1.0, 0.1 / chain.max_exit_rate()).unwrap();
            prop_assert!((u.total_mass() - 1.0).abs() <= 1e-10);
        }
    }
}
