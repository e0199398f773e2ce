//! Alignment search: the decomposed (1+lambda)-EA over location-to-module
//! maps, scored by learned soft-merge beliefs and interleaved with training.

mod run;
mod state;

pub use run::{
    psi_hash, run_muir, train_plain, train_step, BestSnapshot, GenerationRecord, JointModel, ModelState, MuirRun, ParamKey,
    Phase,
};
pub use state::{
    init_soft_weights, perturbation_count, proportional_sample, score_candidates, select_slot, AlignmentState,
    MuirConfig, Proposal, SelectionRule,
};
