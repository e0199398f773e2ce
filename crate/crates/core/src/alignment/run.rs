//! The interleaved loop: gradient training of the joint model alternating
//! with generations of alignment search.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bank::{
    generate_all, generate_on_tape, init_bank, initial_context, parameter_counts, soft_merge_on_tape,
    BankConfig, Contexts, HypermoduleBank, ModuleId, ParameterCounts,
};
use crate::decompose::PseudoTaskLocation;
use crate::error::{MuirError, Result};
use crate::tensor::{AdamConfig, AdamState, Array, Tape, Var};

use super::state::{AlignmentState, MuirConfig, SelectionRule};

/// A set of task models whose decomposable weights come from a shared bank.
pub trait JointModel {
    fn num_tasks(&self) -> usize;

    fn locations(&self) -> &[PseudoTaskLocation];

    fn bank_config(&self) -> BankConfig;

    /// Initial values of the unshared adapter parameters.
    fn init_adapters(&self, _rng: &mut ChaCha8Rng) -> Vec<Array> {
        Vec::new()
    }

    /// Records per-task training losses for training step `step`.
    fn task_losses(&self, tape: &mut Tape, blocks: &[Var], adapters: &[Var], step: usize) -> Result<Vec<Var>>;

    /// Per-task validation metric; lower is better.
    fn validation(&self, blocks: &[Array], adapters: &[Array]) -> Result<Vec<f64>>;

    /// Optional model-specific alignment quality measure for the history.
    fn alignment_score(&self, _psi: &[ModuleId]) -> Option<i64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamKey {
    Module(ModuleId),
    Context(usize),
    Adapter(usize),
    Soft(usize),
}

/// Everything that is trained or checkpointed. Soft weights are not part of
/// it; they are rebuilt every generation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub bank: HypermoduleBank,
    pub contexts: Contexts,
    pub adapters: Vec<Array>,
    pub psi: Vec<ModuleId>,
    pub optimizer: AdamState<ParamKey>,
}

impl ModelState {
    /// One private module per location.
    pub fn pessimistic<M: JointModel + ?Sized>(model: &M, cfg: &MuirConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (bank, contexts) = init_bank(model.locations(), model.bank_config(), rng)?;
        let psi = (0..model.locations().len()).collect();
        Ok(Self {
            bank,
            contexts,
            adapters: model.init_adapters(rng),
            psi,
            optimizer: AdamState::new(AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            }),
        })
    }

    /// One module per distinct label; location `l` uses the module of
    /// `labels[l]`.
    pub fn with_grouping<M: JointModel + ?Sized>(
        model: &M,
        cfg: &MuirConfig,
        labels: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let locs = model.locations();
        if labels.len() != locs.len() {
            return Err(MuirError::Config(format!(
                "{} labels for {} locations",
                labels.len(),
                locs.len()
            )));
        }
        let config = model.bank_config();
        config.validate()?;
        let mut bank = HypermoduleBank::empty(config);
        let mut ids: BTreeMap<usize, ModuleId> = BTreeMap::new();
        let mut psi = Vec::with_capacity(labels.len());
        for (loc, &label) in locs.iter().zip(labels) {
            let id = match ids.get(&label) {
                Some(&id) => id,
                None => {
                    let id = bank.create_module(loc.fan_in, rng)?;
                    ids.insert(label, id);
                    id
                }
            };
            psi.push(id);
        }
        bank.recount(&psi)?;
        bank.set_initial_count(ids.len());
        let contexts = Contexts {
            values: locs.iter().map(|l| initial_context(&config, l.fan_in)).collect(),
        };
        Ok(Self {
            bank,
            contexts,
            adapters: model.init_adapters(rng),
            psi,
            optimizer: AdamState::new(AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            }),
        })
    }

    pub fn blocks(&self) -> Result<Vec<Array>> {
        generate_all(&self.bank, &self.psi, &self.contexts)
    }

    pub fn parameter_counts(&self) -> ParameterCounts {
        parameter_counts(&self.psi, self.bank.config())
    }
}

/// Short hex digest identifying an alignment.
pub fn psi_hash(psi: &[ModuleId]) -> String {
    let mut h = Sha256::new();
    for id in psi {
        h.update((*id as u64).to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Search,
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub phase: Phase,
    pub generation: usize,
    /// Training steps taken so far.
    pub step: usize,
    pub train: Vec<f64>,
    pub val: Vec<f64>,
    pub mean_val: f64,
    pub active_k: usize,
    pub counts: ParameterCounts,
    pub psi_hash: String,
    pub score: Option<i64>,
    /// Locations whose module changed at this commit.
    pub changed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub state: ModelState,
    pub val: Vec<f64>,
    pub mean_val: f64,
    pub generation: usize,
}

#[derive(Debug, Clone)]
pub struct MuirRun {
    pub history: Vec<GenerationRecord>,
    /// `(generation, psi)` after every commit, starting with the initial map.
    pub alignments: Vec<(usize, Vec<ModuleId>)>,
    /// Best state of the search phase, the one reverted to.
    pub best: BestSnapshot,
    /// State after the final training phase.
    pub state: ModelState,
    pub final_val: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn evaluate<M: JointModel + ?Sized>(model: &M, state: &ModelState) -> Result<Vec<f64>> {
    model.validation(&state.blocks()?, &state.adapters)
}

/// One gradient step. With `align`, perturbed locations use the soft-merge
/// of their candidates and the soft weights are trained too.
pub fn train_step<M: JointModel + ?Sized>(
    model: &M,
    state: &mut ModelState,
    mut align: Option<&mut AlignmentState>,
    lr_s: f64,
    step: usize,
) -> Result<Vec<f64>> {
    let exact = state.bank.config().exact_sharing();
    let mut tape = Tape::new();

    let mut module_vars: BTreeMap<ModuleId, Var> = BTreeMap::new();
    let mut needed: Vec<ModuleId> = state.psi.clone();
    if let Some(a) = align.as_deref() {
        for &loc in &a.perturbed {
            needed.extend(a.modules_at(loc));
        }
    }
    for id in needed {
        if let std::collections::btree_map::Entry::Vacant(e) = module_vars.entry(id) {
            e.insert(tape.leaf(state.bank.get(id)?.tensor.clone()));
        }
    }
    let context_vars: Vec<Var> = state
        .contexts
        .values
        .iter()
        .map(|z| tape.leaf(z.clone()))
        .collect();
    let adapter_vars: Vec<Var> = state.adapters.iter().map(|a| tape.leaf(a.clone())).collect();

    let mut soft_vars: Vec<(usize, Var)> = Vec::new();
    let mut blocks = Vec::with_capacity(state.psi.len());
    for loc in 0..state.psi.len() {
        let z = context_vars[loc];
        let block = match align.as_deref() {
            Some(a) if a.is_perturbed(loc) => {
                let hs: Vec<Var> = a.modules_at(loc).iter().map(|id| module_vars[id]).collect();
                let s = tape.leaf(a.soft[loc].clone());
                soft_vars.push((loc, s));
                soft_merge_on_tape(&mut tape, exact, &hs, z, s)?
            }
            _ => generate_on_tape(&mut tape, exact, module_vars[&state.psi[loc]], z)?,
        };
        blocks.push(block);
    }

    let losses = model.task_losses(&mut tape, &blocks, &adapter_vars, step)?;
    let train: Vec<f64> = losses
        .iter()
        .map(|&l| tape.value(l).item())
        .collect::<Result<_>>()?;
    let total = tape.mean(&losses)?;
    let grads = tape.backward(total)?;

    let opt = &mut state.optimizer;
    for (&id, &var) in &module_vars {
        opt.update(ParamKey::Module(id), state.bank.tensor_mut(id)?, grads.wrt(var))?;
    }
    if !exact {
        for (loc, &var) in context_vars.iter().enumerate() {
            opt.update(ParamKey::Context(loc), &mut state.contexts.values[loc], grads.wrt(var))?;
        }
    }
    for (i, &var) in adapter_vars.iter().enumerate() {
        opt.update(ParamKey::Adapter(i), &mut state.adapters[i], grads.wrt(var))?;
    }
    if let Some(a) = align.as_mut() {
        for (loc, var) in soft_vars {
            opt.update_with_lr(ParamKey::Soft(loc), &mut a.soft[loc], grads.wrt(var), lr_s)?;
        }
    }
    Ok(train)
}

/// Trains with the plain (unmerged) parameterization.
pub fn train_plain<M: JointModel + ?Sized>(
    model: &M,
    state: &mut ModelState,
    steps: usize,
    first_step: usize,
) -> Result<Vec<f64>> {
    let mut last = vec![f64::NAN; model.num_tasks()];
    for k in 0..steps {
        last = train_step(model, state, None, 0.0, first_step + k)?;
    }
    Ok(last)
}

struct Recorder<'a, M: JointModel + ?Sized> {
    model: &'a M,
    history: Vec<GenerationRecord>,
}

impl<M: JointModel + ?Sized> Recorder<'_, M> {
    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        phase: Phase,
        generation: usize,
        step: usize,
        train: Vec<f64>,
        val: &[f64],
        state: &ModelState,
        changed: usize,
    ) {
        self.history.push(GenerationRecord {
            phase,
            generation,
            step,
            train,
            val: val.to_vec(),
            mean_val: mean(val),
            active_k: state.bank.active_count(),
            counts: state.parameter_counts(),
            psi_hash: psi_hash(&state.psi),
            score: self.model.alignment_score(&state.psi),
            changed,
        });
    }
}

/// Runs the interleaved optimization from `state`.
///
/// `n_init` plain steps; then up to `n_gen` generations of {reset soft
/// weights, propose, `n_iter` merged steps, commit, validate}; then revert to
/// the best validated state and train `n_final` plain steps, validating
/// every `n_iter` steps and keeping the best.
pub fn run_muir<M: JointModel + ?Sized>(model: &M, cfg: &MuirConfig, mut state: ModelState) -> Result<MuirRun> {
    cfg.validate()?;
    if state.psi.len() != model.locations().len() {
        return Err(MuirError::Config("model state does not match the model's locations".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let alpha = cfg.alpha();
    let mut rec = Recorder {
        model,
        history: Vec::new(),
    };
    let mut step = 0;

    let train = train_plain(model, &mut state, cfg.n_init, step)?;
    step += cfg.n_init;
    let val = evaluate(model, &state)?;
    rec.record(Phase::Init, 0, step, train, &val, &state, 0);
    let mut alignments = vec![(0, state.psi.clone())];
    let mut best = BestSnapshot {
        state: state.clone(),
        mean_val: mean(&val),
        val,
        generation: 0,
    };

    let searching = cfg.selection != SelectionRule::Frozen && cfg.lambda > 0;
    for generation in 1..=cfg.n_gen {
        let mut align = AlignmentState::new(state.psi.clone(), cfg.lambda);
        let mut train = vec![f64::NAN; model.num_tasks()];
        if searching {
            align.reset_soft_weights(alpha)?;
            state.optimizer.reset_where(|k| matches!(k, ParamKey::Soft(_)));
            align.propose_candidates(&mut state.bank, model.locations(), cfg.p, cfg.epsilon, &mut rng)?;
            for _ in 0..cfg.n_iter {
                train = train_step(model, &mut state, Some(&mut align), cfg.lr_s, step)?;
                step += 1;
            }
        } else {
            train = train_plain(model, &mut state, cfg.n_iter, step)?;
            step += cfg.n_iter;
        }
        let before = state.psi.clone();
        let removed = align.commit_selection(&mut state.bank, cfg.selection, &mut rng)?;
        for id in removed {
            state.optimizer.forget(&ParamKey::Module(id));
        }
        state.psi = align.incumbent;
        let changed = before.iter().zip(&state.psi).filter(|(a, b)| a != b).count();

        let val = evaluate(model, &state)?;
        rec.record(Phase::Search, generation, step, train, &val, &state, changed);
        alignments.push((generation, state.psi.clone()));
        let mv = mean(&val);
        if mv < best.mean_val {
            best = BestSnapshot {
                state: state.clone(),
                val,
                mean_val: mv,
                generation,
            };
        }
        if let Some(patience) = cfg.patience {
            if generation - best.generation >= patience {
                break;
            }
        }
    }

    let mut state = best.state.clone();
    let last_generation = rec.history.last().map_or(0, |r| r.generation);
    let mut final_best = (best.mean_val, best.val.clone(), state.clone());
    let mut done = 0;
    let mut since_best = 0;
    while done < cfg.n_final {
        let chunk = cfg.n_iter.min(cfg.n_final - done);
        let train = train_plain(model, &mut state, chunk, step)?;
        step += chunk;
        done += chunk;
        let val = evaluate(model, &state)?;
        rec.record(Phase::Final, last_generation, step, train, &val, &state, 0);
        let mv = mean(&val);
        if mv < final_best.0 {
            final_best = (mv, val, state.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    let (_, final_val, state) = final_best;
    Ok(MuirRun {
        history: rec.history,
        alignments,
        best,
        state,
        final_val,
    })
}
