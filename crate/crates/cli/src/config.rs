//! Experiment configuration files.

use std::path::Path;

use anyhow::{bail, Context};
use nlmarkov_core::finite_n::InitialCondition;
use nlmarkov_core::ModelSpec;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub model: ModelSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ode: OdeParams,
    #[serde(default)]
    pub fixed_points: FixedPointParams,
    #[serde(default)]
    pub stationary: StationaryParams,
    #[serde(default)]
    pub descent: DescentParams,
    #[serde(default)]
    pub subsolution: SubsolutionParams,
    #[serde(default)]
    pub duality: DualityParams,
    #[serde(default)]
    pub concavity: ConcavityParams,
    #[serde(default)]
    pub potential_test: PotentialTestParams,
    #[serde(default)]
    pub slow_adaptation: SlowAdaptationParams,
    #[serde(default)]
    pub finite_n: FiniteNParams,
    #[serde(default)]
    pub particles: ParticleParams,
    #[serde(default)]
    pub landscape: LandscapeParams,
}

/// Which scalar field an analysis uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateChoice {
    /// `Σ r log r + U` for families with a potential.
    LocallyGibbs,
    /// `Σ (K + log r) r` for Gibbs-type families.
    FreeEnergy,
    /// `R(· ‖ π*)` at a fixed point.
    RelativeEntropy,
    /// The zero function.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdeParams {
    /// Defaults to the barycenter.
    pub initial: Option<Vec<f64>>,
    pub t_end: f64,
    pub dt: f64,
}

impl Default for OdeParams {
    fn default() -> Self {
        Self {
            initial: None,
            t_end: 10.0,
            dt: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedPointParams {
    pub multistarts: usize,
}

impl Default for FixedPointParams {
    fn default() -> Self {
        Self { multistarts: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StationaryParams {
    /// Points at which to evaluate `π(r)`; a grid is used when absent.
    pub points: Option<Vec<Vec<f64>>>,
    pub resolution: usize,
    pub margin: f64,
}

impl Default for StationaryParams {
    fn default() -> Self {
        Self {
            points: None,
            resolution: 10,
            margin: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescentParams {
    pub candidate: CandidateChoice,
    pub starts: usize,
    pub t_end: f64,
    pub dt: f64,
    pub epsilon: f64,
    pub min_coord: f64,
    /// Radius and sample count of the positive-definiteness probe at each limit point.
    pub probe_radius: f64,
    pub probe_samples: usize,
}

impl Default for DescentParams {
    fn default() -> Self {
        Self {
            candidate: CandidateChoice::LocallyGibbs,
            starts: 20,
            t_end: 20.0,
            dt: 1e-3,
            epsilon: 1e-4,
            min_coord: 0.02,
            probe_radius: 0.05,
            probe_samples: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubsolutionParams {
    pub candidate: CandidateChoice,
    pub min_points: usize,
    pub margin: f64,
    /// Reference point for `relative_entropy`; defaults to the first stable fixed point.
    pub pi_star: Option<Vec<f64>>,
}

impl Default for SubsolutionParams {
    fn default() -> Self {
        Self {
            candidate: CandidateChoice::LocallyGibbs,
            min_points: 200,
            margin: 0.02,
            pi_star: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualityParams {
    pub samples: usize,
    pub roundtrip_tolerance: f64,
    pub dual1_tolerance: f64,
    pub primal_dual_tolerance: f64,
}

impl Default for DualityParams {
    fn default() -> Self {
        Self {
            samples: 50,
            roundtrip_tolerance: 1e-6,
            dual1_tolerance: 1e-8,
            primal_dual_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConcavityParams {
    pub samples: usize,
    pub rho_min: f64,
    pub rho_max: f64,
    pub rho_points: usize,
}

impl Default for ConcavityParams {
    fn default() -> Self {
        Self {
            samples: 20,
            rho_min: -1.0,
            rho_max: 1.0,
            rho_points: 21,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PotentialTestParams {
    pub resolution: usize,
    pub margin: f64,
    pub h: f64,
}

impl Default for PotentialTestParams {
    fn default() -> Self {
        Self {
            resolution: 10,
            margin: 0.05,
            h: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlowAdaptationParams {
    /// Defaults to the first stable fixed point of the model.
    pub pi_star: Option<Vec<f64>>,
    pub lipschitz_samples: usize,
    pub min_points: usize,
    pub margin: f64,
    pub bisection_iterations: usize,
    pub bisection_floor: f64,
}

impl Default for SlowAdaptationParams {
    fn default() -> Self {
        Self {
            pi_star: None,
            lipschitz_samples: 400,
            min_points: 200,
            margin: 0.01,
            bisection_iterations: 20,
            bisection_floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvolveChoice {
    Auto,
    Rk4,
    Uniformization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FiniteNParams {
    pub n: usize,
    pub t_end: f64,
    /// Defaults to `0.1 / max exit rate`.
    pub dt: Option<f64>,
    pub initial: InitialCondition,
    pub method: EvolveChoice,
    /// Largest lattice for which the scaled relative entropy is tabulated at every state.
    pub entropy_table_limit: usize,
}

impl Default for FiniteNParams {
    fn default() -> Self {
        Self {
            n: 50,
            t_end: 1.0,
            dt: None,
            initial: InitialCondition::PointMass { p: Vec::new() },
            method: EvolveChoice::Auto,
            entropy_table_limit: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParticleParams {
    pub n: usize,
    pub replicas: usize,
    pub t_end: f64,
    pub ode_dt: f64,
    pub initial: InitialCondition,
    /// Deviation threshold counted in the summary.
    pub threshold: f64,
}

impl Default for ParticleParams {
    fn default() -> Self {
        Self {
            n: 1000,
            replicas: 100,
            t_end: 2.0,
            ode_dt: 1e-2,
            initial: InitialCondition::Iid { q: Vec::new() },
            threshold: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LandscapeParams {
    pub candidate: CandidateChoice,
    pub resolution: usize,
    pub margin: f64,
    pub pi_star: Option<Vec<f64>>,
}

impl Default for LandscapeParams {
    fn default() -> Self {
        Self {
            candidate: CandidateChoice::LocallyGibbs,
            resolution: 50,
            margin: 0.01,
            pi_star: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses a config; errors name the offending field path and position.
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            anyhow::anyhow!(
                "invalid config at `{path}` (line {}, column {}): {inner}",
                inner.line(),
                inner.column()
            )
        })?;
        if cfg.version != CONFIG_VERSION {
            bail!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            );
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("loading {}", path.display()))
    }
}
