use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{MuirRun, Phase};
use crate::bank::ModuleId;
use crate::checkpoint::encode_checkpoint;
use crate::error::Result;
use crate::stats::median;
use crate::synthetic::{generate_synthetic, run_setup, Setup, SetupOutcome};
use crate::theory::mean_stderr;

use super::artifacts::{ArtifactWriter, FailedRun};
use super::{worker_pool, ExperimentConfig, RunOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test_rmse: f64,
    pub val_rmse: f64,
    /// First generation whose alignment reached the perfect grouping score.
    pub first_perfect_generation: Option<usize>,
    /// Whether the perfect score held for the rest of the run once reached.
    pub stays_perfect: Option<bool>,
    pub final_score: Option<i64>,
    pub active_modules: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetupSummary {
    pub setup: Setup,
    pub completed: usize,
    /// Absent when no seed completed.
    pub mean: Option<f64>,
    pub stderr: Option<f64>,
    pub median: Option<f64>,
    pub per_seed: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticResults {
    pub noisy: bool,
    pub perfect_score: i64,
    pub setups: Vec<SetupSummary>,
}

#[derive(Serialize)]
struct HistoryRow<'a> {
    setup: &'a str,
    seed: u64,
    phase: Phase,
    generation: usize,
    step: usize,
    mean_train: f64,
    mean_val: f64,
    active_k: usize,
    original: usize,
    reparameterized: usize,
    inference: usize,
    score: Option<i64>,
    changed: usize,
    psi_hash: &'a str,
}

#[derive(Serialize)]
struct AlignmentPoint<'a> {
    generation: usize,
    psi: &'a [ModuleId],
}

#[derive(Serialize)]
struct AlignmentTrace<'a> {
    setup: Setup,
    seed: u64,
    alignments: Vec<AlignmentPoint<'a>>,
}

pub(crate) fn checkpoint_name(setup: Setup, seed: u64) -> String {
    format!("checkpoints/{}-seed{seed}.ckpt", setup.name())
}

fn seed_result(seed: u64, o: &SetupOutcome, perfect: i64) -> SeedResult {
    let final_score = o.run.as_ref().and_then(|r| r.history.last()).and_then(|h| h.score);
    SeedResult {
        seed,
        test_rmse: o.test_rmse,
        val_rmse: o.val_rmse,
        first_perfect_generation: o.first_generation_at(perfect),
        stays_perfect: o.stays_at(perfect),
        final_score,
        active_modules: o.run.as_ref().map(|r| r.state.bank.active_count()),
    }
}

fn history_rows<'a>(setup: Setup, seed: u64, run: &'a MuirRun) -> impl Iterator<Item = HistoryRow<'a>> {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    run.history.iter().map(move |r| HistoryRow {
        setup: setup.name(),
        seed,
        phase: r.phase,
        generation: r.generation,
        step: r.step,
        mean_train: mean(&r.train),
        mean_val: r.mean_val,
        active_k: r.active_k,
        original: r.counts.original,
        reparameterized: r.counts.reparameterized,
        inference: r.counts.inference,
        score: r.score,
        changed: r.changed,
        psi_hash: &r.psi_hash,
    })
}

/// Runs every requested setup on every seed and aggregates test RMSE.
pub fn cmd_synthetic(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let pool = worker_pool()?;
    let mut writer = ArtifactWriter::create(&config.out_dir())?;
    writer.write_snapshot(config)?;

    let jobs: Vec<(Setup, u64)> = config
        .setups
        .iter()
        .flat_map(|&s| config.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let outcomes: Vec<Result<SetupOutcome>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(setup, seed)| {
                let tasks = generate_synthetic(seed, &config.data)?;
                let muir = crate::alignment::MuirConfig { seed, ..config.muir };
                run_setup(setup, &tasks, &muir, &config.stl)
            })
            .collect()
    });

    let perfect = config.data.num_tasks() as i64;
    let mut failed = Vec::new();
    let mut history = Vec::new();
    let mut traces = Vec::new();
    let mut summaries: Vec<SetupSummary> = config
        .setups
        .iter()
        .map(|&setup| SetupSummary {
            setup,
            completed: 0,
            mean: None,
            stderr: None,
            median: None,
            per_seed: Vec::new(),
        })
        .collect();
    for (&(setup, seed), outcome) in jobs.iter().zip(&outcomes) {
        let summary = summaries.iter_mut().find(|s| s.setup == setup).expect("setup listed");
        match outcome {
            Ok(o) => {
                summary.per_seed.push(seed_result(seed, o, perfect));
                if let Some(run) = &o.run {
                    history.extend(history_rows(setup, seed, run));
                    traces.push(AlignmentTrace {
                        setup,
                        seed,
                        alignments: run
                            .alignments
                            .iter()
                            .map(|(generation, psi)| AlignmentPoint {
                                generation: *generation,
                                psi,
                            })
                            .collect(),
                    });
                    writer.write_bytes(&checkpoint_name(setup, seed), &encode_checkpoint(&run.state)?)?;
                }
            }
            Err(e) => failed.push(FailedRun {
                setup: Some(setup.name().into()),
                seed: Some(seed),
                error: e.to_string(),
            }),
        }
    }
    for s in &mut summaries {
        let rmse: Vec<f64> = s.per_seed.iter().map(|r| r.test_rmse).collect();
        s.completed = rmse.len();
        if !rmse.is_empty() {
            let (mean, stderr) = mean_stderr(&rmse);
            s.mean = Some(mean);
            s.stderr = Some(stderr);
            s.median = Some(median(&rmse));
        }
    }

    writer.write_csv("history.csv", &history)?;
    writer.write_json("alignment.json", &traces)?;
    writer.write_json(
        "results.json",
        &SyntheticResults {
            noisy: config.data.noisy,
            perfect_score: perfect,
            setups: summaries,
        },
    )?;
    let (dir, manifest) = writer.finish(config, pool.current_num_threads(), failed)?;
    Ok(RunOutcome { dir, manifest })
}
