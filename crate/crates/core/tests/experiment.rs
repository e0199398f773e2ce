use std::fs;
use std::path::{Path, PathBuf};

use muir::alignment::{ModelState, MuirConfig};
use muir::checkpoint::save_checkpoint;
use muir::decompose::presets;
use muir::experiment::{cmd_analyze, cmd_theory, sha256_file, AnalysisReport, ExperimentConfig, ExperimentKind};
use muir::synthetic::{generate_synthetic, DataConfig, JointLinearModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_are_valid() {
    let mut seen = 0;
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 7);
}

#[test]
fn architecture_files_match_presets() {
    for (file, arch) in [
        ("wrn-40-1", presets::wide_resnet(40, 1)),
        ("stacked-lstm", presets::stacked_lstm(2, 256, 256, 33278)),
        ("deepbind-256", presets::deepbind(256)),
    ] {
        let cfg = ExperimentConfig::load(&configs().join(format!("{file}.toml"))).unwrap();
        assert_eq!(cfg.kind, ExperimentKind::Decompose);
        assert_eq!(cfg.decompose.unwrap().architectures, vec![arch], "{file}");
    }
}

#[test]
fn fresh_pessimistic_checkpoint_is_all_specific() {
    let tmp = tempfile::tempdir().unwrap();
    let tasks = generate_synthetic(0, &DataConfig::default()).unwrap();
    let model = JointLinearModel::new(&tasks);
    let state =
        ModelState::pessimistic(&model, &MuirConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    fs::create_dir_all(tmp.path().join("checkpoints")).unwrap();
    save_checkpoint(&tmp.path().join("checkpoints/muir-seed0.ckpt"), &state).unwrap();

    let outcome = cmd_analyze(tmp.path(), None).unwrap();
    let report: AnalysisReport = serde_json::from_slice(&fs::read(outcome.dir.join("analysis.json")).unwrap()).unwrap();
    let run = &report.runs[0];
    assert!(run.generality.generic_modules.is_empty());
    assert_eq!(run.active_modules, 30);
    assert_eq!(run.usage_histogram.len(), 1);
    assert_eq!((run.usage_histogram[0].usage, run.usage_histogram[0].modules), (1, 30));
    let hypermodules = &run.generality.groups[0];
    assert_eq!((hypermodules.generic, hypermodules.specific), (0, 30));
}

#[test]
fn theory_runs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let text = r#"
kind = "theory"
seeds = [3]

[theory]
trials = 20

[[theory.regimes]]
name = "small"
predictor = { kind = "log_l" }
sweep = "l"
values = [4, 8, 16]
sampling = "proportional"
init = "pessimistic"

[[theory.ordering]]
l = 16
k = 4
t = 4
"#;
    let mut sums = Vec::new();
    for run in ["a", "b"] {
        let mut cfg = ExperimentConfig::from_toml(text).unwrap();
        cfg.out = Some(tmp.path().join(run));
        let outcome = cmd_theory(&cfg).unwrap();
        assert!(outcome.succeeded());
        let report: serde_json::Value =
            serde_json::from_slice(&fs::read(outcome.dir.join("scaling_report.json")).unwrap()).unwrap();
        // Three grid points and 20 trials fall short of a conclusive fit.
        assert_eq!(report["regimes"][0]["verdict"], "inconclusive");
        assert_eq!(report["ordering"].as_array().unwrap().len(), 1);
        let rows = fs::read_to_string(outcome.dir.join("trials.csv")).unwrap().lines().count();
        assert_eq!(rows, 1 + 3 * 20);
        sums.push((
            sha256_file(&outcome.dir.join("trials.csv")).unwrap(),
            sha256_file(&outcome.dir.join("scaling_report.json")).unwrap(),
        ));
    }
    assert_eq!(sums[0], sums[1]);
}
