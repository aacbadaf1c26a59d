//! Run configuration read from a JSON file; command-line flags override it.

use std::path::{Path, PathBuf};

use sdecluster::closure::ClosureConfig;
use sdecluster::subspace::SubspaceConfig;
use sdecluster::synth::ExampleConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<String>,
    pub data: Option<PathBuf>,
    pub result: Option<PathBuf>,
    pub closure_file: Option<PathBuf>,
    pub k: Option<usize>,
    pub eps2: Option<f64>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    /// Solver settings; the model's preset when absent.
    pub subspace: Option<SubspaceConfig>,
    pub scan: ScanConfig,
    pub closure: ClosureSection,
    /// Full dataset recipe for `generate`; the example's preset when absent.
    pub example: Option<ExampleConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub energy: bool,
    pub eps2_min: f64,
    pub eps2_max: f64,
    pub eps2_points: usize,
    pub round_trip: bool,
    pub gap: bool,
    pub k_values: Vec<usize>,
    pub b: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            energy: true,
            eps2_min: 0.1,
            eps2_max: 100.0,
            eps2_points: 101,
            round_trip: true,
            gap: false,
            k_values: (2..=10).collect(),
            b: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosureSection {
    pub degrees: Vec<usize>,
    pub aux_index_per_param: Vec<usize>,
    pub min_mass: f64,
    /// Internal steps per sample of the closed simulation.
    pub substeps: usize,
    /// Start of the closed simulation; the first observation when absent.
    pub x0: Option<f64>,
    pub bins: usize,
}

impl Default for ClosureSection {
    fn default() -> Self {
        let base = ClosureConfig::default();
        Self {
            degrees: base.degrees,
            aux_index_per_param: base.aux_index_per_param,
            min_mass: base.min_mass,
            substeps: 10,
            x0: None,
            bins: 60,
        }
    }
}

impl ClosureSection {
    pub fn fit_config(&self) -> ClosureConfig {
        ClosureConfig {
            degrees: self.degrees.clone(),
            aux_index_per_param: self.aux_index_per_param.clone(),
            min_mass: self.min_mass,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}
