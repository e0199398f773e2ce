//! Config-driven experiment runs that write reproducible artifacts.
//!
//! Every run writes into one directory: a snapshot of the effective config,
//! the kind-specific artifacts, and `manifest.json` listing every artifact
//! with its SHA-256.

mod analyze;
mod artifacts;
mod decompose;
mod synthetic;
mod theory;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::MuirConfig;
use crate::bank::BankConfig;
use crate::decompose::{Architecture, OverflowPolicy};
use crate::error::{MuirError, Result};
use crate::synthetic::{DataConfig, Setup, StlConfig};

pub use analyze::{cmd_analyze, AnalysisReport, RunAnalysis, TrajectoryPoint};
pub use artifacts::{sha256_file, FailedRun, FileEntry, RunManifest};
pub use decompose::{cmd_decompose, ArchitectureReport, BlockReport, LayerReport};
pub use synthetic::{cmd_synthetic, SeedResult, SetupSummary, SyntheticResults};
pub use theory::{cmd_theory, OrderingSpec, OrderingVerdict, Regime, RegimeVerdict, Sweep, TheoryGrid, Verdict};

/// Environment variable holding the worker-pool size.
pub const WORKERS_ENV: &str = "MUIR_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Synthetic,
    Theory,
    Decompose,
    Analyze,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeSpec {
    #[serde(default)]
    pub policy: OverflowPolicy,
    pub architectures: Vec<Architecture>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSpec {
    /// Run directory produced by a synthetic experiment.
    pub run: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "all_setups")]
    pub setups: Vec<Setup>,
    #[serde(default)]
    pub muir: MuirConfig,
    pub bank: Option<BankConfig>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub stl: StlConfig,
    pub theory: Option<TheoryGrid>,
    pub decompose: Option<DecomposeSpec>,
    pub analyze: Option<AnalyzeSpec>,
}

fn all_setups() -> Vec<Setup> {
    Setup::ALL.to_vec()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| MuirError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Canonical TOML of the effective config; its hash identifies the run.
    /// The output directory is left out so relocated reruns hash alike.
    pub fn snapshot(&self) -> Result<String> {
        let placeless = Self {
            out: None,
            ..self.clone()
        };
        toml::to_string(&placeless).map_err(|e| MuirError::Config(format!("cannot serialize config: {e}")))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.snapshot()?.as_bytes())))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            let kind = serde_json::to_value(self.kind).ok();
            let name = kind.as_ref().and_then(|v| v.as_str()).unwrap_or("run");
            PathBuf::from("runs").join(name)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MuirError::Config(m.into()));
        match self.kind {
            ExperimentKind::Synthetic => {
                if self.seeds.is_empty() {
                    return bad("seed list is empty");
                }
                if self.setups.is_empty() {
                    return bad("no setups requested");
                }
                if self.setups.iter().collect::<BTreeSet<_>>().len() != self.setups.len() {
                    return bad("setups must be distinct");
                }
                self.muir.validate()?;
                self.data.validate()?;
                self.stl.validate()?;
            }
            ExperimentKind::Theory => {
                if self.seeds.is_empty() {
                    return bad("seed list is empty");
                }
                match &self.theory {
                    Some(grid) => grid.validate()?,
                    None => return bad("theory run needs a [theory] section"),
                }
            }
            ExperimentKind::Decompose => {
                let Some(spec) = &self.decompose else {
                    return bad("decompose run needs a [decompose] section");
                };
                if spec.architectures.is_empty() {
                    return bad("no architectures to decompose");
                }
                match self.bank {
                    Some(b) if b.m > 0 && b.n > 0 => {}
                    _ => return bad("decompose run needs [bank] with positive m and n"),
                }
            }
            ExperimentKind::Analyze => {
                if self.analyze.is_none() {
                    return bad("analyze run needs an [analyze] section");
                }
            }
        }
        if let Some(bank) = &self.bank {
            bank.validate()?;
        }
        if !self.seeds.is_empty() && self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        Ok(())
    }
}

/// Thread pool sized by `MUIR_WORKERS`, or rayon's default when unset.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(raw) = std::env::var(WORKERS_ENV) {
        let n: usize = raw
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| MuirError::Config(format!("{WORKERS_ENV} must be a positive integer, got '{raw}'")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| MuirError::Config(format!("cannot build worker pool: {e}")))
}

/// Where a run wrote its artifacts, and its manifest.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl RunOutcome {
    pub fn succeeded(&self) -> bool {
        self.manifest.failed.is_empty()
    }
}

/// Validates `config` and dispatches on its kind.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    match config.kind {
        ExperimentKind::Synthetic => cmd_synthetic(config),
        ExperimentKind::Theory => cmd_theory(config),
        ExperimentKind::Decompose => cmd_decompose(config),
        ExperimentKind::Analyze => {
            let spec = config.analyze.as_ref().expect("validated");
            cmd_analyze(&spec.run, config.out.as_deref())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("kind = \"synthetic\"\nseeds = [0]\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"));
        let err = ExperimentConfig::from_toml("kind = \"synthetic\"\nseeds = [0]\n[muir]\nlamda = 3\n").unwrap_err();
        assert!(err.to_string().contains("lamda"));
    }

    #[test]
    fn empty_seed_list_is_invalid() {
        let cfg = ExperimentConfig::from_toml("kind = \"synthetic\"\n").unwrap();
        assert!(matches!(cfg.validate(), Err(MuirError::Config(m)) if m.contains("seed")));
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = ExperimentConfig::from_toml("kind = \"synthetic\"\nseeds = [3, 4]\n[muir]\nlambda = 4\n").unwrap();
        let again = ExperimentConfig::from_toml(&cfg.snapshot().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash().unwrap(), again.hash().unwrap());
        assert_eq!(again.muir.lambda, 4);
        assert_eq!(again.setups, Setup::ALL.to_vec());
    }
}
