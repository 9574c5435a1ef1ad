use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use scbf_core::montecarlo::CircleTracking;
use scbf_core::semigroup::PropagationConfig;
use scbf_core::spectral::PolicyUpdate;
use scbf_core::systems::{make_benchmark, BenchmarkId, SystemModel};
use serde::{Deserialize, Serialize};

/// Everything needed to reproduce a job. Echoed verbatim into every
/// metadata document the CLI writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    pub system: SystemSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub propagation: PropagationConfig,
    #[serde(default)]
    pub iteration: IterationSection,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub name: BenchmarkId,
    /// Parameter overrides by name.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Nodes per dimension; the benchmark default when absent.
    pub counts: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    #[default]
    Bump,
    Constant,
    Warm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterationSection {
    pub tol: f64,
    pub max_iter: usize,
    pub init: InitKind,
    /// `.fld` file used when `init = "warm"`; resampled onto the job grid.
    pub warm_start: Option<PathBuf>,
    pub update: PolicyUpdate,
    pub coarse_to_fine: bool,
}

impl Default for IterationSection {
    fn default() -> Self {
        IterationSection {
            tol: 1e-4,
            max_iter: 500,
            init: InitKind::Bump,
            warm_start: None,
            update: PolicyUpdate::Accelerated,
            coarse_to_fine: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    /// Decay rate of the filter constraint; γ^π of the artifacts when absent.
    pub gamma: Option<f64>,
    pub weight: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    #[default]
    FixedPolicy,
    ScbfQp,
    OpenLoop,
    Unfiltered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Constant,
    CircleTracking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub controller: ControllerKind,
    pub dt: f64,
    pub t_end: f64,
    pub trials: usize,
    pub seed: u64,
    pub sample_dt: f64,
    /// Initial state; the maximizer of ψ (or the grid center) when absent.
    pub x0: Option<Vec<f64>>,
    /// Reference law for `scbf_qp` and `unfiltered`; circle tracking for the
    /// bicycle and a constant input otherwise when absent.
    pub reference: Option<ReferenceKind>,
    /// Constant reference, or the open-loop input.
    pub input: Option<Vec<f64>>,
    pub circle: CircleTracking,
    /// Tail fraction used for the decay-rate fit.
    pub fit_window: f64,
    /// Number of individual trajectories written as CSV.
    pub trajectories: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            controller: ControllerKind::FixedPolicy,
            dt: 1e-3,
            t_end: 1.0,
            trials: 1000,
            seed: 0,
            sample_dt: 0.01,
            x0: None,
            reference: None,
            input: None,
            circle: CircleTracking::default(),
            fit_window: 0.5,
            trajectories: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub residual_tol: f64,
    /// Relative change of γ allowed when the horizon is doubled.
    pub horizon_tol: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection { residual_tol: 5e-3, horizon_tol: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("out") }
    }
}

impl JobConfig {
    pub fn for_system(name: BenchmarkId) -> Self {
        JobConfig {
            system: SystemSection { name, params: BTreeMap::new() },
            grid: GridSection::default(),
            propagation: PropagationConfig::default(),
            iteration: IterationSection::default(),
            filter: FilterSection::default(),
            simulation: SimulationSection::default(),
            verify: VerifySection::default(),
            output: OutputSection::default(),
        }
    }

    /// Reads TOML, or JSON when the extension is `.json`. A metadata
    /// document is accepted too; its `config` entry is used.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        if path.extension().is_some_and(|e| e == "json") {
            let value: serde_json::Value =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let value = match value.get("config") {
                Some(inner) => inner.clone(),
                None => value,
            };
            serde_json::from_value(value).with_context(|| format!("invalid config in {}", path.display()))
        } else {
            toml::from_str(&text).with_context(|| format!("invalid config in {}", path.display()))
        }
    }

    pub fn build_system(&self) -> Result<SystemModel> {
        let sys = make_benchmark(self.system.name, &self.system.params)?;
        match &self.grid.counts {
            Some(counts) => Ok(sys.with_resolution(counts)?),
            None => Ok(sys),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let it = &self.iteration;
        if !(it.tol > 0.0) {
            bail!("iteration.tol must be positive");
        }
        if it.init == InitKind::Warm && it.warm_start.is_none() {
            bail!("iteration.init = \"warm\" needs iteration.warm_start");
        }
        if !(self.propagation.horizon > 0.0) {
            bail!("propagation.horizon must be positive");
        }
        let fw = self.simulation.fit_window;
        if !(fw > 0.0 && fw <= 1.0) {
            bail!("simulation.fit_window must lie in (0, 1]");
        }
        Ok(())
    }
}

/// `--grid` value such as `81,161`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridCounts(pub Vec<usize>);

impl FromStr for GridCounts {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad grid count `{p}`: {e}")))
            .collect::<Result<_, _>>()
            .map(GridCounts)
    }
}
