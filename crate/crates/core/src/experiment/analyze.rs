use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment::Phase;
use crate::bank::{generality_stats, GeneralityReport};
use crate::checkpoint::load_checkpoint;
use crate::error::{MuirError, Result};

use super::artifacts::{csv_err, ArtifactWriter};
use super::synthetic::SyntheticResults;
use super::{AnalyzeSpec, ExperimentConfig, ExperimentKind, RunOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HistoryRecord {
    setup: String,
    seed: u64,
    phase: Phase,
    generation: usize,
    step: usize,
    active_k: usize,
    reparameterized: usize,
    inference: usize,
    score: Option<i64>,
    psi_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub setup: String,
    pub seed: u64,
    pub phase: Phase,
    pub generation: usize,
    pub step: usize,
    pub active_k: usize,
    pub reparameterized: usize,
    pub inference: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageBin {
    pub usage: usize,
    pub modules: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAnalysis {
    pub setup: String,
    pub seed: u64,
    pub checkpoint: String,
    pub locations: usize,
    pub active_modules: usize,
    pub generality: GeneralityReport,
    pub usage_histogram: Vec<UsageBin>,
    /// First history record at the perfect grouping score, or else at the
    /// final alignment for good.
    pub converged_generation: Option<usize>,
    /// Whether the reparameterized count never increases from convergence on.
    pub non_increasing_after_convergence: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub run: PathBuf,
    pub runs: Vec<RunAnalysis>,
}

/// `<setup>-seed<seed>.ckpt`
fn parse_checkpoint_name(name: &str) -> Option<(String, u64)> {
    let stem = name.strip_suffix(".ckpt")?;
    let (setup, seed) = stem.rsplit_once("-seed")?;
    Some((setup.to_string(), seed.parse().ok()?))
}

fn read_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    reader
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

fn convergence(history: &[&HistoryRecord], perfect: Option<i64>) -> Option<usize> {
    if let Some(p) = perfect {
        if history.iter().any(|r| r.score.is_some()) {
            return history.iter().position(|r| r.score == Some(p));
        }
    }
    let last = history.last()?;
    let settled = history.iter().rposition(|r| r.psi_hash != last.psi_hash).map_or(0, |i| i + 1);
    Some(settled)
}

/// Generality statistics, usage histogram and parameter trajectory of every
/// checkpoint in a synthetic run directory. Writes `analysis.json` and
/// `parameter_trajectory.csv` into `out`, or `<run>/analysis` by default.
pub fn cmd_analyze(run: &Path, out: Option<&Path>) -> Result<RunOutcome> {
    let ckpt_dir = run.join("checkpoints");
    let mut names: Vec<String> = match fs::read_dir(&ckpt_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.ends_with(".ckpt"))
            .collect(),
        Err(_) => Vec::new(),
    };
    if names.is_empty() {
        return Err(MuirError::Config(format!("no checkpoint found under {}", ckpt_dir.display())));
    }
    names.sort();

    let perfect = fs::read(run.join("results.json"))
        .ok()
        .and_then(|b| serde_json::from_slice::<SyntheticResults>(&b).ok())
        .map(|r| r.perfect_score);
    let history = read_history(&run.join("history.csv"))?;

    let mut runs = Vec::new();
    let mut trajectory = Vec::new();
    for name in &names {
        let (setup, seed) = parse_checkpoint_name(name)
            .ok_or_else(|| MuirError::Integrity(format!("unexpected checkpoint name '{name}'")))?;
        let ckpt = load_checkpoint(&ckpt_dir.join(name))?;
        let generality = generality_stats(&ckpt.bank, &ckpt.contexts, &ckpt.psi)?;
        let mut bins: BTreeMap<usize, usize> = BTreeMap::new();
        for m in ckpt.bank.modules() {
            *bins.entry(m.usage).or_default() += 1;
        }

        let records: Vec<&HistoryRecord> = history.iter().filter(|r| r.setup == setup && r.seed == seed).collect();
        trajectory.extend(records.iter().map(|r| TrajectoryPoint {
            setup: setup.clone(),
            seed,
            phase: r.phase,
            generation: r.generation,
            step: r.step,
            active_k: r.active_k,
            reparameterized: r.reparameterized,
            inference: r.inference,
        }));
        let converged = convergence(&records, perfect);
        let non_increasing = converged.map(|i| {
            records[i..]
                .windows(2)
                .all(|w| w[1].reparameterized <= w[0].reparameterized)
        });

        runs.push(RunAnalysis {
            setup,
            seed,
            checkpoint: format!("checkpoints/{name}"),
            locations: ckpt.psi.len(),
            active_modules: ckpt.bank.active_count(),
            generality,
            usage_histogram: bins.into_iter().map(|(usage, modules)| UsageBin { usage, modules }).collect(),
            converged_generation: converged.map(|i| records[i].generation),
            non_increasing_after_convergence: non_increasing,
        });
    }

    let config = ExperimentConfig {
        kind: ExperimentKind::Analyze,
        out: Some(out.map_or_else(|| run.join("analysis"), Path::to_path_buf)),
        seeds: runs.iter().map(|r| r.seed).collect::<std::collections::BTreeSet<_>>().into_iter().collect(),
        setups: Vec::new(),
        muir: Default::default(),
        bank: None,
        data: Default::default(),
        stl: Default::default(),
        theory: None,
        decompose: None,
        analyze: Some(AnalyzeSpec { run: run.to_path_buf() }),
    };
    let mut writer = ArtifactWriter::create(&config.out_dir())?;
    writer.write_snapshot(&config)?;
    writer.write_csv("parameter_trajectory.csv", &trajectory)?;
    writer.write_json(
        "analysis.json",
        &AnalysisReport {
            run: run.to_path_buf(),
            runs,
        },
    )?;
    let (dir, manifest) = writer.finish(&config, 1, Vec::new())?;
    Ok(RunOutcome { dir, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_names_parse() {
        assert_eq!(parse_checkpoint_name("muir-seed12.ckpt"), Some(("muir".into(), 12)));
        assert_eq!(parse_checkpoint_name("muir-seedx.ckpt"), None);
        assert_eq!(parse_checkpoint_name("notes.txt"), None);
    }

    #[test]
    fn missing_checkpoint_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_analyze(dir.path(), None).unwrap_err();
        assert!(err.to_string().contains("no checkpoint"));
    }
}
