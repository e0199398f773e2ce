use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MuirError, Result};
use crate::theory::{
    decomposition_ordering, fit_scaling, run_trials, EaConfig, EaTrialResult, InitMode, LinearFitness, OrderingReport,
    Predictor, Sampling, ScalingReport, DEFAULT_MAX_ITERS,
};

use super::artifacts::{ArtifactWriter, FailedRun};
use super::{worker_pool, ExperimentConfig, RunOutcome};

/// Which quantity a regime varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sweep {
    /// Number of locations; `k` and `d` default to `L`.
    L,
    /// Number of blocks at fixed `l`; `k` defaults to `l`.
    D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regime {
    pub name: String,
    pub predictor: Predictor,
    pub sweep: Sweep,
    pub values: Vec<usize>,
    pub l: Option<usize>,
    pub k: Option<usize>,
    pub d: Option<usize>,
    #[serde(default = "one")]
    pub lambda: usize,
    pub sampling: Sampling,
    pub init: InitMode,
}

fn one() -> usize {
    1
}

impl Regime {
    fn ea_config(&self, x: usize, max_iters: u64) -> Result<EaConfig> {
        let (l, d) = match self.sweep {
            Sweep::L => (x, self.d.unwrap_or(x)),
            Sweep::D => (
                self.l
                    .ok_or_else(|| MuirError::Config(format!("regime '{}' sweeps d and needs l", self.name)))?,
                x,
            ),
        };
        let cfg = EaConfig {
            max_iters,
            ..EaConfig::new(l, self.k.unwrap_or(l), d, self.lambda, self.sampling, self.init)
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderingSpec {
    pub l: usize,
    pub k: usize,
    /// Number of tasks, the middle granularity.
    pub t: usize,
    #[serde(default = "one")]
    pub lambda: usize,
    /// Smallest ratio between neighbouring granularities to call it ordered.
    #[serde(default = "two")]
    pub min_gap: f64,
}

fn two() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryGrid {
    /// Trials per grid point and seed.
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: u64,
    #[serde(default = "default_min_r_squared")]
    pub min_r_squared: f64,
    #[serde(default)]
    pub regimes: Vec<Regime>,
    #[serde(default)]
    pub ordering: Vec<OrderingSpec>,
}

fn default_trials() -> usize {
    200
}

fn default_max_iters() -> u64 {
    DEFAULT_MAX_ITERS
}

fn default_min_r_squared() -> f64 {
    0.9
}

impl TheoryGrid {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MuirError::Config(m));
        if self.trials == 0 || self.max_iters == 0 {
            return bad("trials and max_iters must be positive".into());
        }
        if self.regimes.is_empty() && self.ordering.is_empty() {
            return bad("theory grid has no regimes and no ordering checks".into());
        }
        let names: BTreeSet<_> = self.regimes.iter().map(|r| r.name.as_str()).collect();
        if names.len() != self.regimes.len() {
            return bad("regime names must be distinct".into());
        }
        for r in &self.regimes {
            if r.values.is_empty() {
                return bad(format!("regime '{}' has no values", r.name));
            }
            for &x in &r.values {
                r.ea_config(x, self.max_iters)?;
            }
        }
        for o in &self.ordering {
            for d in [1, o.t, o.l] {
                EaConfig::new(o.l, o.k, d, o.lambda, Sampling::Uniform, InitMode::Uniform).validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Consistent,
    Inconsistent,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeVerdict {
    pub name: String,
    pub verdict: Verdict,
    /// Ratio of mean iterations between consecutive grid values.
    pub step_ratios: Vec<f64>,
    pub fit: ScalingReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingVerdict {
    pub seed: u64,
    pub verdict: Verdict,
    pub report: OrderingReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScalingFile {
    regimes: Vec<RegimeVerdict>,
    ordering: Vec<OrderingVerdict>,
}

#[derive(Serialize)]
struct TrialRow<'a> {
    regime: &'a str,
    x: usize,
    l: usize,
    k: usize,
    d: usize,
    lambda: usize,
    sampling: Sampling,
    init: InitMode,
    seed: u64,
    stream: u64,
    iterations: u64,
    reached: bool,
}

/// Independent seed for one grid point, so points never share streams.
fn point_seed(seed: u64, regime: usize, x: usize) -> u64 {
    let mut h = Sha256::new();
    for v in [seed, regime as u64, x as u64] {
        h.update(v.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn verdict(fit: &ScalingReport, min_r_squared: f64) -> Verdict {
    if fit.inconclusive {
        Verdict::Inconclusive
    } else if fit.r_squared >= min_r_squared && fit.slope > 0.0 {
        Verdict::Consistent
    } else {
        Verdict::Inconsistent
    }
}

/// Runs every scaling regime and ordering check of the grid.
pub fn cmd_theory(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let grid = config.theory.as_ref().expect("validated");
    let pool = worker_pool()?;
    let mut writer = ArtifactWriter::create(&config.out_dir())?;
    writer.write_snapshot(config)?;
    let mut failed = Vec::new();
    let mut rows = Vec::new();
    let mut regimes = Vec::new();

    for (ri, regime) in grid.regimes.iter().enumerate() {
        let mut groups: Vec<(usize, Vec<EaTrialResult>)> = Vec::new();
        for &x in &regime.values {
            let cfg = regime.ea_config(x, grid.max_iters)?;
            let fitness = LinearFitness::unit(cfg.l);
            let mut trials = Vec::new();
            for &seed in &config.seeds {
                match pool.install(|| run_trials(&cfg, &fitness, grid.trials, point_seed(seed, ri, x))) {
                    Ok(res) => trials.extend(res),
                    Err(e) => failed.push(FailedRun {
                        setup: Some(format!("{}:{x}", regime.name)),
                        seed: Some(seed),
                        error: e.to_string(),
                    }),
                }
            }
            rows.extend(trials.iter().map(|t| TrialRow {
                regime: &regime.name,
                x,
                l: t.l,
                k: t.k,
                d: t.d,
                lambda: t.lambda,
                sampling: t.sampling,
                init: t.init,
                seed: t.seed,
                stream: t.stream,
                iterations: t.iterations,
                reached: t.reached,
            }));
            if !trials.is_empty() {
                groups.push((x, trials));
            }
        }
        let fit = fit_scaling(&groups, regime.predictor);
        let step_ratios = fit.points.windows(2).map(|w| w[1].mean / w[0].mean).collect();
        regimes.push(RegimeVerdict {
            name: regime.name.clone(),
            verdict: verdict(&fit, grid.min_r_squared),
            step_ratios,
            fit,
        });
    }

    let mut ordering = Vec::new();
    for (oi, o) in grid.ordering.iter().enumerate() {
        for &seed in &config.seeds {
            let s = point_seed(seed, grid.regimes.len() + oi, o.l);
            match pool.install(|| decomposition_ordering(o.l, o.k, o.t, o.lambda, grid.trials, s)) {
                Ok(report) => {
                    let verdict = if report.timeouts > 0 {
                        Verdict::Inconclusive
                    } else if report.strictly_ordered() && report.min_gap() >= o.min_gap {
                        Verdict::Consistent
                    } else {
                        Verdict::Inconsistent
                    };
                    ordering.push(OrderingVerdict { seed, verdict, report });
                }
                Err(e) => failed.push(FailedRun {
                    setup: Some(format!("ordering:{}", o.l)),
                    seed: Some(seed),
                    error: e.to_string(),
                }),
            }
        }
    }

    writer.write_csv("trials.csv", &rows)?;
    writer.write_json("scaling_report.json", &ScalingFile { regimes, ordering })?;
    let (dir, manifest) = writer.finish(config, pool.current_num_threads(), failed)?;
    Ok(RunOutcome { dir, manifest })
}
