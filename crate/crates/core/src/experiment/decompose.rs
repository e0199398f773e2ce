use serde::{Deserialize, Serialize};

use crate::bank::{parameter_counts, parsimony_threshold, BankConfig, ParameterCounts};
use crate::decompose::{decompose_architectures, BlockShape, Decomposition, LayerKind, OverflowPolicy};
use crate::error::Result;

use super::artifacts::{ArtifactWriter, FailedRun};
use super::{ExperimentConfig, RunOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub architecture: String,
    pub name: String,
    pub kind: LayerKind,
    pub adapter: bool,
    pub weights: usize,
    pub first_location: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureReport {
    pub name: String,
    pub blocks: usize,
    /// All weights of the host network, adapters included.
    pub weights: usize,
    pub adapter_weights: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub bank: BankConfig,
    pub policy: OverflowPolicy,
    /// Total number of locations, `L`.
    pub locations: usize,
    pub architectures: Vec<ArchitectureReport>,
    pub layers: Vec<LayerReport>,
    /// Counts for the pessimistic alignment, one module per location.
    pub pessimistic: ParameterCounts,
    /// Module count below which the reparameterization is smaller than `L m n`.
    pub parsimony_threshold: f64,
}

impl BlockReport {
    pub fn new(bank: BankConfig, d: &Decomposition) -> Self {
        let mut architectures: Vec<ArchitectureReport> = Vec::new();
        for entry in &d.layers {
            let weights = entry.spec.weight_count();
            let arch = match architectures.iter_mut().find(|a| a.name == entry.architecture) {
                Some(a) => a,
                None => {
                    architectures.push(ArchitectureReport {
                        name: entry.architecture.clone(),
                        blocks: 0,
                        weights: 0,
                        adapter_weights: 0,
                    });
                    architectures.last_mut().expect("just pushed")
                }
            };
            arch.blocks += entry.blocks;
            arch.weights += weights;
            if entry.adapter {
                arch.adapter_weights += weights;
            }
        }
        let layers = d
            .layers
            .iter()
            .map(|e| LayerReport {
                architecture: e.architecture.clone(),
                name: e.spec.name.clone(),
                kind: e.spec.kind,
                adapter: e.adapter,
                weights: e.spec.weight_count(),
                first_location: e.first_location,
                blocks: e.blocks,
            })
            .collect();
        let psi: Vec<usize> = (0..d.len()).collect();
        Self {
            bank,
            policy: d.shape.policy,
            locations: d.len(),
            architectures,
            layers,
            pessimistic: parameter_counts(&psi, &bank),
            parsimony_threshold: parsimony_threshold(d.len(), &bank),
        }
    }
}

/// Decomposes the configured architectures into `m x n` blocks and writes
/// `blocks.json`.
pub fn cmd_decompose(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let spec = config.decompose.as_ref().expect("validated");
    let bank = config.bank.expect("validated");
    let mut writer = ArtifactWriter::create(&config.out_dir())?;
    writer.write_snapshot(config)?;
    let shape = BlockShape {
        m: bank.m,
        n: bank.n,
        policy: spec.policy,
    };
    let mut failed = Vec::new();
    match decompose_architectures(&spec.architectures, &shape) {
        Ok(d) => writer.write_json("blocks.json", &BlockReport::new(bank, &d))?,
        Err(e) => failed.push(FailedRun {
            setup: None,
            seed: None,
            error: e.to_string(),
        }),
    }
    let (dir, manifest) = writer.finish(config, 1, failed)?;
    Ok(RunOutcome { dir, manifest })
}
