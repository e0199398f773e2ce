//! Grouped linear-regression benchmark: thirty tasks in three groups whose
//! weight vectors are scalar multiples of a shared direction.

mod data;
mod model;

use std::collections::BTreeMap;

use crate::bank::ModuleId;
use crate::error::{MuirError, Result};

pub use data::{generate_synthetic, DataConfig, Split, SplitKind, SyntheticTask, SyntheticTaskSet};
pub use model::{
    run_muir_synthetic, run_oracle, run_random, run_setup, run_stl, split_rmse, JointLinearModel, Setup,
    SetupOutcome, StlConfig,
};

/// Per task: +1 if its module is shared only within its true group, 0 if
/// unshared, -1 if shared across groups.
pub fn grouping_score(psi: &[ModuleId], labels: &[usize]) -> i64 {
    let mut users: BTreeMap<ModuleId, Vec<usize>> = BTreeMap::new();
    for (t, &m) in psi.iter().enumerate() {
        users.entry(m).or_default().push(t);
    }
    psi.iter()
        .enumerate()
        .map(|(t, m)| {
            let u = &users[m];
            if u.len() < 2 {
                0
            } else if u.iter().all(|&o| labels[o] == labels[t]) {
                1
            } else {
                -1
            }
        })
        .sum()
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(MuirError::Shape(format!(
            "rmse over {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    let mse = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> Vec<usize> {
        (0..30).map(|t| t / 10).collect()
    }

    #[test]
    fn score_extremes() {
        let private: Vec<ModuleId> = (0..30).collect();
        assert_eq!(grouping_score(&private, &labels()), 0);
        let perfect: Vec<ModuleId> = labels();
        assert_eq!(grouping_score(&perfect, &labels()), 30);
        assert_eq!(grouping_score(&[7; 30], &labels()), -30);
    }

    #[test]
    fn score_mixes_contributions() {
        let mut psi: Vec<ModuleId> = (0..30).collect();
        psi[1] = 0; // tasks 0, 1 share within group 0
        psi[15] = 2;
        psi[2] = 2; // tasks 2, 15 share across groups
        assert_eq!(grouping_score(&psi, &labels()), 2 - 2);
    }

    #[test]
    fn rmse_basics() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0, 0.0], &[3.0, -4.0]).unwrap(), 12.5f64.sqrt());
        assert!(rmse(&[], &[]).is_err());
    }
}
