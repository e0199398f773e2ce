use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{run_muir, JointModel, ModelState, MuirConfig, MuirRun, SelectionRule};
use crate::bank::{BankConfig, ModuleId};
use crate::decompose::PseudoTaskLocation;
use crate::error::{MuirError, Result};
use crate::tensor::{AdamConfig, AdamState, Array, Tape, Var};

use super::data::{SplitKind, SyntheticTaskSet};
use super::{grouping_score, rmse};

/// Each task is a single `dim x 1` block generated from a `1 x dim x 1`
/// hypermodule and a scalar context.
pub struct JointLinearModel<'a> {
    tasks: &'a SyntheticTaskSet,
    locations: Vec<PseudoTaskLocation>,
    labels: Vec<usize>,
}

impl<'a> JointLinearModel<'a> {
    pub fn new(tasks: &'a SyntheticTaskSet) -> Self {
        let dim = tasks.config.dim;
        let locations = (0..tasks.len())
            .map(|t| PseudoTaskLocation {
                index: t,
                layer: t,
                slot: 0,
                row: 0,
                col: 0,
                fan_in: dim,
            })
            .collect();
        Self {
            tasks,
            locations,
            labels: tasks.labels(),
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-task RMSE of `blocks` on a split.
    pub fn split_rmse(&self, blocks: &[Array], kind: SplitKind) -> Result<Vec<f64>> {
        split_rmse(self.tasks, blocks, kind)
    }
}

pub fn split_rmse(tasks: &SyntheticTaskSet, weights: &[Array], kind: SplitKind) -> Result<Vec<f64>> {
    if weights.len() != tasks.len() {
        return Err(MuirError::Shape(format!(
            "{} weight blocks for {} tasks",
            weights.len(),
            tasks.len()
        )));
    }
    tasks
        .tasks
        .iter()
        .zip(weights)
        .map(|(task, w)| {
            let split = task.split(kind);
            let pred = split.x.matmul(w)?;
            rmse(pred.data(), split.y.data())
        })
        .collect()
}

impl JointModel for JointLinearModel<'_> {
    fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn locations(&self) -> &[PseudoTaskLocation] {
        &self.locations
    }

    fn bank_config(&self) -> BankConfig {
        BankConfig::new(1, self.tasks.config.dim, 1)
    }

    fn task_losses(&self, tape: &mut Tape, blocks: &[Var], _adapters: &[Var], _step: usize) -> Result<Vec<Var>> {
        self.tasks
            .tasks
            .iter()
            .zip(blocks)
            .map(|(task, &b)| {
                let x = tape.leaf(task.train.x.clone());
                let pred = tape.matmul(x, b)?;
                tape.mse(pred, task.train.y.clone())
            })
            .collect()
    }

    fn validation(&self, blocks: &[Array], _adapters: &[Array]) -> Result<Vec<f64>> {
        self.split_rmse(blocks, SplitKind::Val)
    }

    fn alignment_score(&self, psi: &[ModuleId]) -> Option<i64> {
        Some(grouping_score(psi, &self.labels))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setup {
    Stl,
    Random,
    Oracle,
    Muir,
}

impl Setup {
    pub const ALL: [Setup; 4] = [Setup::Stl, Setup::Random, Setup::Oracle, Setup::Muir];

    pub fn name(self) -> &'static str {
        match self {
            Setup::Stl => "stl",
            Setup::Random => "random",
            Setup::Oracle => "oracle",
            Setup::Muir => "muir",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SetupOutcome {
    pub setup: Setup,
    pub test_rmse: f64,
    pub per_task_test: Vec<f64>,
    pub val_rmse: f64,
    /// Present for setups driven by the alignment loop.
    pub run: Option<MuirRun>,
}

impl SetupOutcome {
    /// First search generation whose alignment scored `target`.
    pub fn first_generation_at(&self, target: i64) -> Option<usize> {
        self.run.as_ref()?.history.iter().find(|r| r.score == Some(target)).map(|r| r.generation)
    }

    /// Whether every later record of the run keeps the score at `target`
    /// once it was first reached.
    pub fn stays_at(&self, target: i64) -> Option<bool> {
        let run = self.run.as_ref()?;
        let first = run.history.iter().position(|r| r.score == Some(target))?;
        Some(run.history[first..].iter().all(|r| r.score == Some(target)))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn finish(setup: Setup, tasks: &SyntheticTaskSet, run: MuirRun) -> Result<SetupOutcome> {
    let blocks = run.state.blocks()?;
    let per_task_test = split_rmse(tasks, &blocks, SplitKind::Test)?;
    Ok(SetupOutcome {
        setup,
        test_rmse: mean(&per_task_test),
        per_task_test,
        val_rmse: mean(&run.final_val),
        run: Some(run),
    })
}

fn model_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Alignment search with belief-based selection from pessimistic init.
pub fn run_muir_synthetic(tasks: &SyntheticTaskSet, cfg: &MuirConfig) -> Result<SetupOutcome> {
    let model = JointLinearModel::new(tasks);
    let cfg = MuirConfig {
        selection: SelectionRule::Belief,
        ..*cfg
    };
    let state = ModelState::pessimistic(&model, &cfg, &mut model_rng(cfg.seed))?;
    finish(Setup::Muir, tasks, run_muir(&model, &cfg, state)?)
}

/// Same loop, but each location commits a uniformly random candidate.
pub fn run_random(tasks: &SyntheticTaskSet, cfg: &MuirConfig) -> Result<SetupOutcome> {
    let model = JointLinearModel::new(tasks);
    let cfg = MuirConfig {
        selection: SelectionRule::Random,
        ..*cfg
    };
    let state = ModelState::pessimistic(&model, &cfg, &mut model_rng(cfg.seed))?;
    finish(Setup::Random, tasks, run_muir(&model, &cfg, state)?)
}

/// Alignment frozen to the true grouping, one module per group.
pub fn run_oracle(tasks: &SyntheticTaskSet, cfg: &MuirConfig) -> Result<SetupOutcome> {
    let model = JointLinearModel::new(tasks);
    let cfg = MuirConfig {
        selection: SelectionRule::Frozen,
        ..*cfg
    };
    let state = ModelState::with_grouping(&model, &cfg, model.labels(), &mut model_rng(cfg.seed))?;
    finish(Setup::Oracle, tasks, run_muir(&model, &cfg, state)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StlConfig {
    pub lr: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
}

impl Default for StlConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            max_steps: 100_000,
            eval_every: 100,
            patience: 50,
        }
    }
}

impl StlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.eval_every == 0 || self.patience == 0 {
            return Err(MuirError::Config("stl needs lr > 0, eval_every > 0, patience > 0".into()));
        }
        Ok(())
    }
}

/// Independent linear models, one per task, trained with Adam on the full
/// training split and early-stopped on validation RMSE.
///
/// Weights start at zero: with fewer samples than inputs, any random start
/// would survive untouched in the null space of the training inputs.
pub fn run_stl(tasks: &SyntheticTaskSet, cfg: &StlConfig) -> Result<SetupOutcome> {
    cfg.validate()?;
    let dim = tasks.config.dim;
    let mut weights = Vec::with_capacity(tasks.len());
    let mut val = Vec::with_capacity(tasks.len());
    for task in &tasks.tasks {
        let mut w = Array::zeros(&[dim, 1]);
        let mut adam: AdamState<()> = AdamState::new(AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        });
        let (x, y) = (&task.train.x, &task.train.y);
        let xt = x.transpose()?;
        let scale = 2.0 / y.len() as f64;
        let val_rmse = |w: &Array| -> Result<f64> { rmse(task.val.x.matmul(w)?.data(), task.val.y.data()) };
        let mut best = (val_rmse(&w)?, w.clone());
        let mut since_best = 0;
        let mut step = 0;
        while step < cfg.max_steps && since_best < cfg.patience {
            for _ in 0..cfg.eval_every.min(cfg.max_steps - step) {
                let resid = x.matmul(&w)?.zip_map(y, |p, t| p - t)?;
                let grad = xt.matmul(&resid)?.map(|g| g * scale);
                adam.update((), &mut w, &grad)?;
                step += 1;
            }
            let v = val_rmse(&w)?;
            if v < best.0 {
                best = (v, w.clone());
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        val.push(best.0);
        weights.push(best.1);
    }
    let per_task_test = split_rmse(tasks, &weights, SplitKind::Test)?;
    Ok(SetupOutcome {
        setup: Setup::Stl,
        test_rmse: mean(&per_task_test),
        per_task_test,
        val_rmse: mean(&val),
        run: None,
    })
}

/// Runs one setup on one task set.
pub fn run_setup(setup: Setup, tasks: &SyntheticTaskSet, muir: &MuirConfig, stl: &StlConfig) -> Result<SetupOutcome> {
    match setup {
        Setup::Stl => run_stl(tasks, stl),
        Setup::Random => run_random(tasks, muir),
        Setup::Oracle => run_oracle(tasks, muir),
        Setup::Muir => run_muir_synthetic(tasks, muir),
    }
}
