//! Hypermodules, contexts, block generation and parameter accounting.
//!
//! A hypermodule is a `c x m x n` tensor; contracting it along its first
//! mode with a location's length-`c` context yields that location's `m x n`
//! block. With `c = 0` the bank runs in exact-sharing mode: modules store
//! raw `m x n` blocks and there are no contexts.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decompose::PseudoTaskLocation;
use crate::error::{MuirError, Result};
use crate::stats::{mann_whitney_u, TensorSummary};
use crate::tensor::{mode1_product, softmax, Array, Tape, Var};

pub type ModuleId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankConfig {
    /// Context size. Zero selects exact sharing of raw blocks.
    pub c: usize,
    pub m: usize,
    pub n: usize,
}

impl BankConfig {
    pub fn new(c: usize, m: usize, n: usize) -> Self {
        Self { c, m, n }
    }

    pub fn exact_sharing(&self) -> bool {
        self.c == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(MuirError::Config("block dimensions m, n must be positive".into()));
        }
        Ok(())
    }

    pub fn module_shape(&self) -> Vec<usize> {
        if self.exact_sharing() {
            vec![self.m, self.n]
        } else {
            vec![self.c, self.m, self.n]
        }
    }

    pub fn block_size(&self) -> usize {
        self.m * self.n
    }

    /// Standard deviation shared by every hypermodule entry: `sqrt(2 / c)`.
    pub fn sigma_h(&self) -> f64 {
        (2.0 / self.c as f64).sqrt()
    }

    /// Constant initial context entry `z` with `c * z * sigma_h = sqrt(2 / fan_in)`.
    pub fn context_value(&self, fan_in: usize) -> f64 {
        he_sigma(fan_in) / (self.c as f64 * self.sigma_h())
    }

    /// Whether keeping a module with `usage` users is no larger than
    /// materializing the blocks it generates.
    pub fn keeps_at_inference(&self, usage: usize) -> bool {
        if self.exact_sharing() {
            return true;
        }
        let (c, mn) = (self.c, self.block_size());
        usage * c + c * mn <= usage * mn
    }
}

/// He-normal standard deviation.
pub fn he_sigma(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypermodule {
    pub id: ModuleId,
    pub tensor: Array,
    /// Number of locations mapped to this module by the incumbent alignment.
    pub usage: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypermoduleBank {
    config: BankConfig,
    modules: BTreeMap<ModuleId, Hypermodule>,
    next_id: ModuleId,
    initial_count: usize,
}

/// Per-location context vectors (empty vectors in exact-sharing mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contexts {
    pub values: Vec<Array>,
}

impl Contexts {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, loc: usize) -> &Array {
        &self.values[loc]
    }
}

fn sample_tensor<R: Rng + ?Sized>(shape: &[usize], sigma: f64, rng: &mut R) -> Array {
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let len = shape.iter().product();
    let data = (0..len).map(|_| normal.sample(rng)).collect();
    Array::new(shape.to_vec(), data).expect("shape matches length")
}

/// Pessimistic initialization: one private hypermodule per location, module
/// id equal to the location index, contexts set to the constant `z`.
pub fn init_bank<R: Rng + ?Sized>(
    locations: &[PseudoTaskLocation],
    config: BankConfig,
    rng: &mut R,
) -> Result<(HypermoduleBank, Contexts)> {
    config.validate()?;
    if locations.is_empty() {
        return Err(MuirError::Config("cannot build a bank for zero locations".into()));
    }
    let mut bank = HypermoduleBank::empty(config);
    let mut contexts = Vec::with_capacity(locations.len());
    for loc in locations {
        let id = bank.create_module(loc.fan_in, rng)?;
        bank.modules.get_mut(&id).expect("just created").usage = 1;
        contexts.push(initial_context(&config, loc.fan_in));
    }
    bank.initial_count = locations.len();
    Ok((bank, Contexts { values: contexts }))
}

pub fn initial_context(config: &BankConfig, fan_in: usize) -> Array {
    if config.exact_sharing() {
        Array::zeros(&[0])
    } else {
        Array::filled(&[config.c], config.context_value(fan_in))
    }
}

impl HypermoduleBank {
    pub fn empty(config: BankConfig) -> Self {
        Self {
            config,
            modules: BTreeMap::new(),
            next_id: 0,
            initial_count: 0,
        }
    }

    /// Rebuilds a bank from stored modules, e.g. when loading a checkpoint.
    pub fn from_parts(
        config: BankConfig,
        modules: Vec<Hypermodule>,
        next_id: ModuleId,
        initial_count: usize,
    ) -> Result<Self> {
        let shape = config.module_shape();
        let mut map = BTreeMap::new();
        for m in modules {
            if m.tensor.shape() != shape.as_slice() || m.id >= next_id {
                return Err(MuirError::Integrity(format!("module {} is inconsistent with the bank", m.id)));
            }
            map.insert(m.id, m);
        }
        Ok(Self {
            config,
            modules: map,
            next_id,
            initial_count,
        })
    }

    pub fn config(&self) -> &BankConfig {
        &self.config
    }

    /// Number of modules the bank was initialized with.
    pub fn initial_count(&self) -> usize {
        self.initial_count
    }

    pub fn set_initial_count(&mut self, k: usize) {
        self.initial_count = k;
    }

    pub fn next_id(&self) -> ModuleId {
        self.next_id
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    /// Modules currently used by at least one location.
    pub fn active_count(&self) -> usize {
        self.modules.values().filter(|m| m.usage > 0).count()
    }

    pub fn get(&self, id: ModuleId) -> Result<&Hypermodule> {
        self.modules
            .get(&id)
            .ok_or_else(|| MuirError::Integrity(format!("dangling hypermodule id {id}")))
    }

    pub fn tensor_mut(&mut self, id: ModuleId) -> Result<&mut Array> {
        self.modules
            .get_mut(&id)
            .map(|m| &mut m.tensor)
            .ok_or_else(|| MuirError::Integrity(format!("dangling hypermodule id {id}")))
    }

    pub fn contains(&self, id: ModuleId) -> bool {
        self.modules.contains_key(&id)
    }

    pub fn modules(&self) -> impl Iterator<Item = &Hypermodule> {
        self.modules.values()
    }

    pub fn ids(&self) -> Vec<ModuleId> {
        self.modules.keys().copied().collect()
    }

    /// Adds a fresh, unused module initialized for a location with `fan_in`.
    pub fn create_module<R: Rng + ?Sized>(&mut self, fan_in: usize, rng: &mut R) -> Result<ModuleId> {
        if fan_in == 0 {
            return Err(MuirError::Config("fan_in must be positive".into()));
        }
        let sigma = if self.config.exact_sharing() {
            he_sigma(fan_in)
        } else {
            self.config.sigma_h()
        };
        let tensor = sample_tensor(&self.config.module_shape(), sigma, rng);
        let id = self.next_id;
        self.next_id += 1;
        self.modules.insert(id, Hypermodule { id, tensor, usage: 0 });
        Ok(id)
    }

    /// Inserts a module with an explicit tensor, e.g. for frozen alignments.
    pub fn insert_module(&mut self, tensor: Array) -> Result<ModuleId> {
        if tensor.shape() != self.config.module_shape().as_slice() {
            return Err(MuirError::Shape(format!(
                "module tensor {:?} does not match bank shape {:?}",
                tensor.shape(),
                self.config.module_shape()
            )));
        }
        let id = self.next_id;
        self.next_id += 1;
        self.modules.insert(id, Hypermodule { id, tensor, usage: 0 });
        Ok(id)
    }

    /// Moves one user from `from` to `to`.
    pub fn reassign(&mut self, from: ModuleId, to: ModuleId) -> Result<()> {
        if from == to {
            return Ok(());
        }
        if !self.contains(to) {
            return Err(MuirError::Integrity(format!("dangling hypermodule id {to}")));
        }
        let src = self
            .modules
            .get_mut(&from)
            .ok_or_else(|| MuirError::Integrity(format!("dangling hypermodule id {from}")))?;
        if src.usage == 0 {
            return Err(MuirError::Integrity(format!("module {from} has no users to move")));
        }
        src.usage -= 1;
        self.modules.get_mut(&to).expect("checked").usage += 1;
        Ok(())
    }

    /// Sets usage counts from an alignment, erroring on dangling references.
    pub fn recount(&mut self, psi: &[ModuleId]) -> Result<()> {
        let counts = usage_counts(psi);
        if let Some(id) = counts.keys().find(|id| !self.contains(**id)) {
            return Err(MuirError::Integrity(format!("alignment references missing module {id}")));
        }
        for m in self.modules.values_mut() {
            m.usage = counts.get(&m.id).copied().unwrap_or(0);
        }
        Ok(())
    }

    /// Checks stored usage counts against an alignment.
    pub fn usage_consistent(&self, psi: &[ModuleId]) -> bool {
        let counts = usage_counts(psi);
        counts.keys().all(|id| self.contains(*id))
            && self
                .modules
                .values()
                .all(|m| counts.get(&m.id).copied().unwrap_or(0) == m.usage)
    }

    /// Deletes every module without users and returns their ids.
    pub fn remove_orphans(&mut self) -> Vec<ModuleId> {
        let orphans: Vec<ModuleId> = self
            .modules
            .values()
            .filter(|m| m.usage == 0)
            .map(|m| m.id)
            .collect();
        for id in &orphans {
            self.modules.remove(id);
        }
        orphans
    }
}

pub fn usage_counts(psi: &[ModuleId]) -> BTreeMap<ModuleId, usize> {
    let mut counts = BTreeMap::new();
    for &id in psi {
        *counts.entry(id).or_insert(0) += 1;
    }
    counts
}

/// Block generated by `module` under context `z`.
pub fn generate_from(bank: &HypermoduleBank, module: ModuleId, z: &Array) -> Result<Array> {
    let h = &bank.get(module)?.tensor;
    if bank.config().exact_sharing() {
        Ok(h.clone())
    } else {
        mode1_product(h, z)
    }
}

/// Block at location `loc` under alignment `psi`.
pub fn generate_block(
    bank: &HypermoduleBank,
    psi: &[ModuleId],
    loc: usize,
    contexts: &Contexts,
) -> Result<Array> {
    let id = *psi
        .get(loc)
        .ok_or_else(|| MuirError::Integrity(format!("location {loc} outside alignment")))?;
    generate_from(bank, id, contexts.get(loc))
}

/// Every block under `psi`, in location order.
pub fn generate_all(bank: &HypermoduleBank, psi: &[ModuleId], contexts: &Contexts) -> Result<Vec<Array>> {
    (0..psi.len()).map(|l| generate_block(bank, psi, l, contexts)).collect()
}

/// Belief-weighted mixture of the blocks generated by each candidate.
pub fn soft_merge_block(
    bank: &HypermoduleBank,
    candidates: &[ModuleId],
    s: &Array,
    z: &Array,
) -> Result<Array> {
    if s.ndim() != 1 || s.len() != candidates.len() || candidates.is_empty() {
        return Err(MuirError::Shape(format!(
            "{} candidates with soft weights {:?}",
            candidates.len(),
            s.shape()
        )));
    }
    let probs = softmax(s);
    let cfg = bank.config();
    let mut out = Array::zeros(&[cfg.m, cfg.n]);
    for (&id, &p) in candidates.iter().zip(probs.data()) {
        out.add_scaled(&generate_from(bank, id, z)?, p)?;
    }
    Ok(out)
}

/// Records block generation on a tape. `z` is ignored in exact-sharing mode.
pub fn generate_on_tape(tape: &mut Tape, exact_sharing: bool, h: Var, z: Var) -> Result<Var> {
    if exact_sharing {
        Ok(h)
    } else {
        tape.mode1_product(h, z)
    }
}

/// Records the soft-merge of candidate modules `hs` on a tape.
pub fn soft_merge_on_tape(
    tape: &mut Tape,
    exact_sharing: bool,
    hs: &[Var],
    z: Var,
    s: Var,
) -> Result<Var> {
    let blocks = hs
        .iter()
        .map(|&h| generate_on_tape(tape, exact_sharing, h, z))
        .collect::<Result<Vec<_>>>()?;
    let probs = tape.softmax(s)?;
    tape.weighted_sum(&blocks, probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    /// `L * m * n`
    pub original: usize,
    /// `L * c + K_active * c * m * n`
    pub reparameterized: usize,
    /// Size after collapsing modules that do not pay for themselves.
    pub inference: usize,
    pub active_modules: usize,
    /// Modules kept as generators at inference.
    pub kept_modules: usize,
    /// Locations whose blocks are materialized at inference.
    pub collapsed_locations: usize,
}

pub fn parameter_counts(psi: &[ModuleId], config: &BankConfig) -> ParameterCounts {
    let l = psi.len();
    let (c, mn) = (config.c, config.block_size());
    let counts = usage_counts(psi);
    let active = counts.len();
    let original = l * mn;
    if config.exact_sharing() {
        return ParameterCounts {
            original,
            reparameterized: active * mn,
            inference: active * mn,
            active_modules: active,
            kept_modules: active,
            collapsed_locations: 0,
        };
    }
    let kept: Vec<usize> = counts
        .values()
        .copied()
        .filter(|&u| config.keeps_at_inference(u))
        .collect();
    let kept_locations: usize = kept.iter().sum();
    let collapsed = l - kept_locations;
    ParameterCounts {
        original,
        reparameterized: l * c + active * c * mn,
        inference: kept_locations * c + kept.len() * c * mn + collapsed * mn,
        active_modules: active,
        kept_modules: kept.len(),
        collapsed_locations: collapsed,
    }
}

/// Number of modules below which the reparameterization is smaller than the
/// original model: `L (mn - c) / (c m n)`.
pub fn parsimony_threshold(locations: usize, config: &BankConfig) -> f64 {
    let mn = config.block_size() as f64;
    let c = config.c as f64;
    locations as f64 * (mn - c) / (c * mn)
}

#[derive(Debug, Clone, PartialEq)]
pub enum InferenceBlock {
    Generated { module: ModuleId, context: Array },
    Materialized(Array),
}

/// Deployed form of a trained model: shared modules stay generators, the
/// rest are replaced by the blocks they produce.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapsedModel {
    pub config: BankConfig,
    pub modules: BTreeMap<ModuleId, Array>,
    pub blocks: Vec<InferenceBlock>,
}

impl CollapsedModel {
    pub fn block(&self, loc: usize) -> Result<Array> {
        match &self.blocks[loc] {
            InferenceBlock::Materialized(b) => Ok(b.clone()),
            InferenceBlock::Generated { module, context } => {
                let h = self
                    .modules
                    .get(module)
                    .ok_or_else(|| MuirError::Integrity(format!("dangling hypermodule id {module}")))?;
                if self.config.exact_sharing() {
                    Ok(h.clone())
                } else {
                    mode1_product(h, context)
                }
            }
        }
    }

    pub fn blocks(&self) -> Result<Vec<Array>> {
        (0..self.blocks.len()).map(|l| self.block(l)).collect()
    }

    pub fn materialized_count(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| matches!(b, InferenceBlock::Materialized(_)))
            .count()
    }

    pub fn parameter_count(&self) -> usize {
        let module_params: usize = self.modules.values().map(Array::len).sum();
        let block_params: usize = self
            .blocks
            .iter()
            .map(|b| match b {
                InferenceBlock::Materialized(a) => a.len(),
                InferenceBlock::Generated { context, .. } => context.len(),
            })
            .sum();
        module_params + block_params
    }
}

pub fn collapse_for_inference(
    psi: &[ModuleId],
    bank: &HypermoduleBank,
    contexts: &Contexts,
) -> Result<CollapsedModel> {
    let config = *bank.config();
    let counts = usage_counts(psi);
    let mut modules = BTreeMap::new();
    let mut blocks = Vec::with_capacity(psi.len());
    for (loc, &id) in psi.iter().enumerate() {
        let usage = counts[&id];
        if config.keeps_at_inference(usage) {
            modules
                .entry(id)
                .or_insert_with(|| bank.get(id).map(|m| m.tensor.clone()));
            blocks.push(InferenceBlock::Generated {
                module: id,
                context: contexts.get(loc).clone(),
            });
        } else {
            blocks.push(InferenceBlock::Materialized(generate_block(bank, psi, loc, contexts)?));
        }
    }
    let modules = modules
        .into_iter()
        .map(|(id, t)| t.map(|t| (id, t)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(CollapsedModel {
        config,
        modules,
        blocks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatComparison {
    pub statistic: String,
    pub generic_mean: Option<f64>,
    pub specific_mean: Option<f64>,
    /// Two-sided Mann-Whitney p-value; `None` when a side is empty.
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: String,
    pub generic: usize,
    pub specific: usize,
    pub comparisons: Vec<StatComparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralityReport {
    pub c: usize,
    pub generic_modules: Vec<ModuleId>,
    pub groups: Vec<GroupStats>,
}

fn compare_group(name: &str, generic: &[TensorSummary], specific: &[TensorSummary]) -> GroupStats {
    type Pick = fn(&TensorSummary) -> f64;
    let picks: [(&str, Pick); 4] = [
        ("stdev", |s| s.stdev),
        ("mean", |s| s.mean),
        ("norm", |s| s.norm),
        ("max", |s| s.max),
    ];
    let avg = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let comparisons = picks
        .iter()
        .map(|(label, pick)| {
            let g: Vec<f64> = generic.iter().map(pick).collect();
            let s: Vec<f64> = specific.iter().map(pick).collect();
            StatComparison {
                statistic: (*label).into(),
                generic_mean: avg(&g),
                specific_mean: avg(&s),
                p_value: mann_whitney_u(&g, &s).map(|r| r.p_value),
            }
        })
        .collect();
    GroupStats {
        group: name.into(),
        generic: generic.len(),
        specific: specific.len(),
        comparisons,
    }
}

/// Compares generic (used more than `c` times) and specific modules, and the
/// contexts and generated blocks of the locations using them.
pub fn generality_stats(
    bank: &HypermoduleBank,
    contexts: &Contexts,
    psi: &[ModuleId],
) -> Result<GeneralityReport> {
    let c = bank.config().c;
    let counts = usage_counts(psi);
    let is_generic = |id: &ModuleId| counts.get(id).copied().unwrap_or(0) > c;

    let (mut gm, mut sm) = (vec![], vec![]);
    let mut generic_modules = vec![];
    for id in counts.keys() {
        let summary = TensorSummary::of(bank.get(*id)?.tensor.data());
        if is_generic(id) {
            generic_modules.push(*id);
            gm.push(summary);
        } else {
            sm.push(summary);
        }
    }
    let (mut gc, mut sc, mut gb, mut sb) = (vec![], vec![], vec![], vec![]);
    for (loc, id) in psi.iter().enumerate() {
        let block = TensorSummary::of(generate_block(bank, psi, loc, contexts)?.data());
        let ctx = contexts.get(loc);
        let (ctx_side, block_side) = if is_generic(id) {
            (&mut gc, &mut gb)
        } else {
            (&mut sc, &mut sb)
        };
        if !ctx.is_empty() {
            ctx_side.push(TensorSummary::of(ctx.data()));
        }
        block_side.push(block);
    }
    Ok(GeneralityReport {
        c,
        generic_modules,
        groups: vec![
            compare_group("hypermodules", &gm, &sm),
            compare_group("contexts", &gc, &sc),
            compare_group("linear_maps", &gb, &sb),
        ],
    })
}
