use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{HypermoduleBank, ModuleId};
use crate::decompose::PseudoTaskLocation;
use crate::error::{MuirError, Result};
use crate::tensor::{softmax, Array};

/// How the incumbent alignment is updated at the end of a generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionRule {
    /// Argmax of duplicate-aware belief scores.
    #[default]
    Belief,
    /// Uniformly random candidate slot per location.
    Random,
    /// The alignment never changes; only parameters are trained.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MuirConfig {
    /// Number of challengers per location.
    pub lambda: usize,
    /// Fraction of locations perturbed per generation.
    pub p: f64,
    /// Adam learning rate of the soft weights.
    pub lr_s: f64,
    /// Adam learning rate of modules, contexts and adapters.
    pub lr: f64,
    pub n_init: usize,
    pub n_iter: usize,
    pub n_gen: usize,
    pub n_final: usize,
    /// Initial challenger mass; defaults to `lambda / (lambda + 1)`.
    pub alpha: Option<f64>,
    /// Probability of proposing a brand-new module.
    pub epsilon: f64,
    /// Generations without validation improvement before stopping.
    pub patience: Option<usize>,
    pub selection: SelectionRule,
    pub seed: u64,
}

impl Default for MuirConfig {
    fn default() -> Self {
        Self {
            lambda: 8,
            p: 0.5,
            lr_s: 0.01,
            lr: 1e-3,
            n_init: 0,
            n_iter: 100,
            n_gen: 1000,
            n_final: 1000,
            alpha: None,
            epsilon: 1e-4,
            patience: Some(50),
            selection: SelectionRule::Belief,
            seed: 0,
        }
    }
}

impl MuirConfig {
    /// Settings for the grouped linear-regression benchmark. The model
    /// learning rate sits two orders of magnitude below `lr_s`; the final
    /// phase is long because it is early-stopped anyway.
    pub fn synthetic() -> Self {
        Self {
            lr: 1e-4,
            n_final: 20_000,
            ..Self::default()
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
            .unwrap_or(self.lambda as f64 / (self.lambda as f64 + 1.0))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MuirError::Config(m));
        if !(self.p > 0.0 && self.p <= 1.0) {
            return bad(format!("p must lie in (0, 1], got {}", self.p));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must lie in [0, 1), got {}", self.epsilon));
        }
        if self.lambda > 0 {
            let a = self.alpha();
            if !(a > 0.0 && a < 1.0) {
                return bad(format!("alpha must lie in (0, 1), got {a}"));
            }
        }
        if self.lr <= 0.0 || self.lr_s <= 0.0 {
            return bad("learning rates must be positive".into());
        }
        if self.n_iter == 0 {
            return bad("n_iter must be positive".into());
        }
        Ok(())
    }
}

/// Initial soft weights: zero for the incumbent, `ln a - ln lambda - ln(1 - a)`
/// for each challenger, so the incumbent starts with probability `1 - a`.
pub fn init_soft_weights(lambda: usize, alpha: f64) -> Result<Array> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MuirError::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if lambda == 0 {
        return Ok(Array::vector(vec![0.0]));
    }
    let challenger = alpha.ln() - (lambda as f64).ln() - (1.0 - alpha).ln();
    let mut s = vec![challenger; lambda + 1];
    s[0] = 0.0;
    Ok(Array::vector(s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proposal {
    Existing(ModuleId),
    New,
}

/// Draws a module with probability proportional to its usage in `psi`.
///
/// When `allow_new` is set, a new module is proposed with probability
/// `epsilon` and existing modules share the remaining `1 - epsilon`.
/// Otherwise all mass goes to existing modules.
pub fn proportional_sample<R: Rng + ?Sized>(
    psi: &[ModuleId],
    epsilon: f64,
    allow_new: bool,
    rng: &mut R,
) -> Proposal {
    if allow_new && epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Proposal::New;
    }
    Proposal::Existing(psi[rng.random_range(0..psi.len())])
}

/// Number of locations perturbed per generation: `ceil(p * L)`.
pub fn perturbation_count(p: f64, locations: usize) -> usize {
    // Guard against p * L landing one ulp above an integer.
    let raw = p * locations as f64;
    let count = (raw - 1e-9 * raw.max(1.0)).ceil().max(1.0) as usize;
    count.min(locations)
}

/// The incumbent alignment, the challengers, and their soft weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentState {
    pub incumbent: Vec<ModuleId>,
    /// `candidates[i - 1][l]` is challenger `i` at location `l`.
    pub candidates: Vec<Vec<ModuleId>>,
    /// One length-`lambda + 1` row per location.
    pub soft: Vec<Array>,
    pub perturbed: Vec<usize>,
    perturbed_mask: Vec<bool>,
    pub generation: usize,
}

impl AlignmentState {
    pub fn new(incumbent: Vec<ModuleId>, lambda: usize) -> Self {
        let l = incumbent.len();
        Self {
            candidates: vec![incumbent.clone(); lambda],
            soft: vec![Array::zeros(&[lambda + 1]); l],
            perturbed: vec![],
            perturbed_mask: vec![false; l],
            incumbent,
            generation: 0,
        }
    }

    pub fn lambda(&self) -> usize {
        self.candidates.len()
    }

    pub fn len(&self) -> usize {
        self.incumbent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.incumbent.is_empty()
    }

    pub fn is_perturbed(&self, loc: usize) -> bool {
        self.perturbed_mask[loc]
    }

    /// Modules at `loc` across slots `0..=lambda`, slot 0 being the incumbent.
    pub fn modules_at(&self, loc: usize) -> Vec<ModuleId> {
        std::iter::once(self.incumbent[loc])
            .chain(self.candidates.iter().map(|c| c[loc]))
            .collect()
    }

    pub fn reset_soft_weights(&mut self, alpha: f64) -> Result<()> {
        let row = init_soft_weights(self.lambda(), alpha)?;
        for s in &mut self.soft {
            *s = row.clone();
        }
        Ok(())
    }

    fn clear_perturbation(&mut self) {
        for c in &mut self.candidates {
            c.clone_from(&self.incumbent);
        }
        for &l in &self.perturbed {
            self.perturbed_mask[l] = false;
        }
        self.perturbed.clear();
    }

    /// Resamples `ceil(p L)` distinct locations in every challenger; the rest
    /// copy the incumbent. New modules proposed via the epsilon path are
    /// created in `bank` with zero usage.
    pub fn propose_candidates<R: Rng + ?Sized>(
        &mut self,
        bank: &mut HypermoduleBank,
        locations: &[PseudoTaskLocation],
        p: f64,
        epsilon: f64,
        rng: &mut R,
    ) -> Result<()> {
        self.clear_perturbation();
        let l = self.len();
        if self.lambda() == 0 || l == 0 {
            return Ok(());
        }
        let mut chosen = sample(rng, l, perturbation_count(p, l)).into_vec();
        chosen.sort_unstable();
        let allow_new = bank.active_count() < bank.initial_count();
        for &loc in &chosen {
            for i in 0..self.lambda() {
                let id = match proportional_sample(&self.incumbent, epsilon, allow_new, rng) {
                    Proposal::Existing(id) => id,
                    Proposal::New => bank.create_module(locations[loc].fan_in, rng)?,
                };
                self.candidates[i][loc] = id;
            }
            self.perturbed_mask[loc] = true;
        }
        self.perturbed = chosen;
        Ok(())
    }

    /// Chooses a slot per location, updates usage counts and deletes
    /// orphaned modules. Returns the ids of the deleted modules.
    pub fn commit_selection<R: Rng + ?Sized>(
        &mut self,
        bank: &mut HypermoduleBank,
        rule: SelectionRule,
        rng: &mut R,
    ) -> Result<Vec<ModuleId>> {
        if rule != SelectionRule::Frozen {
            for loc in 0..self.len() {
                let modules = self.modules_at(loc);
                let slot = match rule {
                    SelectionRule::Belief => select_slot(&score_candidates(&self.soft[loc], &modules)?),
                    SelectionRule::Random => rng.random_range(0..modules.len()),
                    SelectionRule::Frozen => 0,
                };
                let chosen = modules[slot];
                bank.reassign(self.incumbent[loc], chosen)?;
                self.incumbent[loc] = chosen;
            }
        }
        self.clear_perturbation();
        self.generation += 1;
        Ok(bank.remove_orphans())
    }
}

/// Score of each slot: the belief mass of every slot holding the same module.
pub fn score_candidates(s: &Array, modules: &[ModuleId]) -> Result<Vec<f64>> {
    if s.len() != modules.len() {
        return Err(MuirError::Shape(format!(
            "{} soft weights for {} candidate slots",
            s.len(),
            modules.len()
        )));
    }
    let probs = softmax(s);
    Ok(modules
        .iter()
        .map(|m| {
            modules
                .iter()
                .zip(probs.data())
                .filter(|(other, _)| *other == m)
                .map(|(_, &p)| p)
                .sum()
        })
        .collect())
}

/// Argmax with ties going to the incumbent, then to the lowest slot.
pub fn select_slot(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{init_bank, BankConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn locs(count: usize) -> Vec<PseudoTaskLocation> {
        (0..count)
            .map(|i| PseudoTaskLocation {
                index: i,
                layer: i,
                slot: 0,
                row: 0,
                col: 0,
                fan_in: 20,
            })
            .collect()
    }

    #[test]
    fn soft_weight_examples() {
        assert_eq!(init_soft_weights(1, 0.5).unwrap().data(), &[0.0, 0.0]);
        let s = init_soft_weights(8, 8.0 / 9.0).unwrap();
        assert!(s.data().iter().all(|v| v.abs() < 1e-12));
        let s = init_soft_weights(1, 0.9).unwrap();
        assert!((s.data()[1] - 9f64.ln()).abs() < 1e-12);
        assert!((softmax(&s).data()[0] - 0.1).abs() < 1e-12);
        assert!(init_soft_weights(1, 1.0).is_err());
        assert!(init_soft_weights(1, 0.0).is_err());
    }

    #[test]
    fn incumbent_probability_is_one_minus_alpha() {
        for lambda in 1..6 {
            for alpha in [0.05, 0.3, 0.5, 0.9] {
                let p = softmax(&init_soft_weights(lambda, alpha).unwrap());
                assert!((p.data()[0] - (1.0 - alpha)).abs() < 1e-12);
                for &pi in &p.data()[1..] {
                    assert!((pi - alpha / lambda as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_module_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(proportional_sample(&[7, 7, 7], 0.0, true, &mut rng), Proposal::Existing(7));
        }
    }

    #[test]
    fn perturbation_counts() {
        assert_eq!(perturbation_count(0.5, 30), 15);
        assert_eq!(perturbation_count(1.0, 4), 4);
        assert_eq!(perturbation_count(0.1, 30), 3);
        assert_eq!(perturbation_count(0.25, 30), 8);
        assert_eq!(perturbation_count(0.01, 30), 1);
    }

    #[test]
    fn full_perturbation_resamples_every_location() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut bank, _) = init_bank(&locs(4), BankConfig::new(1, 20, 1), &mut rng).unwrap();
        let mut state = AlignmentState::new(vec![0, 1, 2, 3], 1);
        state.propose_candidates(&mut bank, &locs(4), 1.0, 0.0, &mut rng).unwrap();
        assert_eq!(state.perturbed, vec![0, 1, 2, 3]);
    }

    #[test]
    fn half_perturbation_of_thirty() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut bank, _) = init_bank(&locs(30), BankConfig::new(1, 20, 1), &mut rng).unwrap();
        let mut state = AlignmentState::new((0..30).collect(), 8);
        state.propose_candidates(&mut bank, &locs(30), 0.5, 1e-4, &mut rng).unwrap();
        assert_eq!(state.perturbed.len(), 15);
        for loc in 0..30 {
            if !state.is_perturbed(loc) {
                assert!(state.modules_at(loc).iter().all(|&m| m == loc));
            }
        }
    }

    #[test]
    fn proposals_are_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let (mut bank, _) = init_bank(&locs(30), BankConfig::new(1, 20, 1), &mut rng).unwrap();
            let mut state = AlignmentState::new((0..30).collect(), 8);
            state.propose_candidates(&mut bank, &locs(30), 0.5, 1e-4, &mut rng).unwrap();
            state.candidates
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn score_examples() {
        let s = Array::vector(vec![0.0, 0.0]);
        let scores = score_candidates(&s, &[1, 2]).unwrap();
        assert_eq!(scores, vec![0.5, 0.5]);
        assert_eq!(select_slot(&scores), 0);

        assert_eq!(score_candidates(&s, &[3, 3]).unwrap(), vec![1.0, 1.0]);

        let s = Array::vector(vec![0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln()]);
        let scores = score_candidates(&s, &[10, 11, 10]).unwrap();
        assert!((scores[0] - 0.7).abs() < 1e-12);
        assert!((scores[1] - 0.3).abs() < 1e-12);
        assert!((scores[2] - 0.7).abs() < 1e-12);
        assert_eq!(select_slot(&scores), 0);
    }

    #[test]
    fn commit_takes_stronger_challenger_and_deletes_orphans() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut bank, _) = init_bank(&locs(2), BankConfig::new(1, 20, 1), &mut rng).unwrap();
        let mut state = AlignmentState::new(vec![0, 1], 1);
        state.candidates[0] = vec![1, 1];
        state.soft[0] = Array::vector(vec![0.0, 3f64.ln()]);
        state.soft[1] = Array::vector(vec![0.0, 0.0]);
        let removed = state
            .commit_selection(&mut bank, SelectionRule::Belief, &mut rng)
            .unwrap();
        assert_eq!(state.incumbent, vec![1, 1]);
        assert_eq!(removed, vec![0]);
        assert_eq!(bank.active_count(), 1);
        assert!(bank.usage_consistent(&state.incumbent));
    }

    #[test]
    fn exact_tie_keeps_incumbent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut bank, _) = init_bank(&locs(2), BankConfig::new(1, 20, 1), &mut rng).unwrap();
        let mut state = AlignmentState::new(vec![0, 1], 1);
        state.candidates[0] = vec![1, 0];
        state.reset_soft_weights(0.5).unwrap();
        state
            .commit_selection(&mut bank, SelectionRule::Belief, &mut rng)
            .unwrap();
        assert_eq!(state.incumbent, vec![0, 1]);
    }
}
