//! Decomposed K-valued (1+λ)-EA on linear fitness functions.
//!
//! Locations are split into `D` equal blocks, each evolved by its own
//! (1+λ) selection. The optimum assigns module 0 everywhere, so the bench
//! can detect termination exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MuirError, Result};

pub const DEFAULT_MAX_ITERS: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    Uniform,
    Proportional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Uniform,
    /// Location `l` starts on module `l`; requires `k == l`.
    Pessimistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EaConfig {
    pub l: usize,
    pub k: usize,
    pub d: usize,
    pub lambda: usize,
    pub sampling: Sampling,
    pub init: InitMode,
    #[serde(default = "default_max_iters")]
    pub max_iters: u64,
}

fn default_max_iters() -> u64 {
    DEFAULT_MAX_ITERS
}

impl EaConfig {
    pub fn new(l: usize, k: usize, d: usize, lambda: usize, sampling: Sampling, init: InitMode) -> Self {
        Self {
            l,
            k,
            d,
            lambda,
            sampling,
            init,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.k == 0 || self.lambda == 0 || self.d == 0 {
            return Err(MuirError::Config("l, k, d and lambda must be positive".into()));
        }
        if !self.l.is_multiple_of(self.d) {
            return Err(MuirError::Config(format!("d={} does not divide l={}", self.d, self.l)));
        }
        if self.init == InitMode::Pessimistic && self.k != self.l {
            return Err(MuirError::Config(format!(
                "pessimistic init needs k == l, got k={} l={}",
                self.k, self.l
            )));
        }
        Ok(())
    }
}

/// `h_d(ψ_d) = Σ_ℓ w_ℓ · [ψ_d(ℓ) = 0]` over the locations of block `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFitness {
    weights: Vec<f64>,
}

impl LinearFitness {
    pub fn unit(l: usize) -> Self {
        Self { weights: vec![1.0; l] }
    }

    pub fn weighted(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(MuirError::Config("fitness weights must be positive".into()));
        }
        Ok(Self { weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weight(&self, loc: usize) -> f64 {
        self.weights[loc]
    }

    /// Fitness of each block under `psi`.
    pub fn block_values(&self, psi: &[u32], d: usize) -> Vec<f64> {
        let len = psi.len() / d;
        (0..d)
            .map(|b| {
                (b * len..(b + 1) * len)
                    .filter(|&loc| psi[loc] == 0)
                    .map(|loc| self.weights[loc])
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EaTrialResult {
    pub l: usize,
    pub k: usize,
    pub d: usize,
    pub lambda: usize,
    pub sampling: Sampling,
    pub init: InitMode,
    pub iterations: u64,
    /// False when the iteration cap was hit first.
    pub reached: bool,
    pub seed: u64,
    pub stream: u64,
}

/// Per-trial generator: the base seed split by trial index into streams.
pub fn trial_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Observer hook called after every generation with the committed map and
/// per-block fitness.
pub trait EaObserver {
    fn generation(&mut self, psi: &[u32], block_fitness: &[f64]);
}

impl EaObserver for () {
    fn generation(&mut self, _: &[u32], _: &[f64]) {}
}

/// Records the number of wrong locations at t = 0, 1, 2, ...
#[derive(Debug, Default)]
pub struct WrongCountTrace(pub Vec<usize>);

impl EaObserver for WrongCountTrace {
    fn generation(&mut self, psi: &[u32], _: &[f64]) {
        self.0.push(psi.iter().filter(|&&m| m != 0).count());
    }
}

pub fn run_decomposed_ea<R: Rng + ?Sized>(
    cfg: &EaConfig,
    fitness: &LinearFitness,
    rng: &mut R,
) -> Result<(u64, bool)> {
    run_observed(cfg, fitness, rng, &mut ())
}

/// Runs one trial, returning `(generations, reached_optimum)`.
///
/// All mutants of a generation are drawn against the map as it stood at the
/// start of that generation; winners are committed together afterwards.
pub fn run_observed<R: Rng + ?Sized, O: EaObserver>(
    cfg: &EaConfig,
    fitness: &LinearFitness,
    rng: &mut R,
    observer: &mut O,
) -> Result<(u64, bool)> {
    cfg.validate()?;
    if fitness.len() != cfg.l {
        return Err(MuirError::Config(format!(
            "fitness covers {} locations, config has {}",
            fitness.len(),
            cfg.l
        )));
    }
    let (l, d) = (cfg.l, cfg.d);
    let block_len = l / d;
    let k = cfg.k as u32;
    let mut psi: Vec<u32> = match cfg.init {
        InitMode::Pessimistic => (0..l as u32).collect(),
        InitMode::Uniform => (0..l).map(|_| rng.random_range(0..k)).collect(),
    };
    let mut block_fit = fitness.block_values(&psi, d);
    let mut wrong = psi.iter().filter(|&&m| m != 0).count();
    let mut block_wrong: Vec<usize> = (0..d)
        .map(|b| psi[b * block_len..(b + 1) * block_len].iter().filter(|&&m| m != 0).count())
        .collect();
    observer.generation(&psi, &block_fit);
    if wrong == 0 {
        return Ok((0, true));
    }

    let q = d as f64 / l as f64;
    let skip = if q < 1.0 {
        Some(Geometric::new(q).map_err(|e| MuirError::Config(e.to_string()))?)
    } else {
        None
    };
    let mut pending: Vec<(usize, u32)> = Vec::new();
    let mut changes: Vec<(usize, u32)> = Vec::new();
    let mut best: Vec<(usize, u32)> = Vec::new();

    for generation in 1..=cfg.max_iters {
        pending.clear();
        for b in 0..d {
            if block_wrong[b] == 0 {
                continue;
            }
            let start = b * block_len;
            let mut best_delta = 0.0;
            best.clear();
            for _ in 0..cfg.lambda {
                changes.clear();
                let mut delta = 0.0;
                let mut pos = 0usize;
                loop {
                    if let Some(g) = &skip {
                        pos = pos.saturating_add(g.sample(rng) as usize);
                    }
                    if pos >= block_len {
                        break;
                    }
                    let loc = start + pos;
                    let new = match cfg.sampling {
                        Sampling::Uniform => rng.random_range(0..k),
                        Sampling::Proportional => psi[rng.random_range(0..l)],
                    };
                    let w = fitness.weight(loc);
                    delta += w * f64::from(u8::from(new == 0)) - w * f64::from(u8::from(psi[loc] == 0));
                    changes.push((loc, new));
                    pos += 1;
                }
                if delta > best_delta {
                    best_delta = delta;
                    std::mem::swap(&mut best, &mut changes);
                }
            }
            if best_delta > 0.0 {
                pending.extend_from_slice(&best);
                block_fit[b] += best_delta;
            }
        }
        for &(loc, m) in &pending {
            let was_wrong = psi[loc] != 0;
            let is_wrong = m != 0;
            if was_wrong != is_wrong {
                let b = loc / block_len;
                if is_wrong {
                    wrong += 1;
                    block_wrong[b] += 1;
                } else {
                    wrong -= 1;
                    block_wrong[b] -= 1;
                }
            }
            psi[loc] = m;
        }
        observer.generation(&psi, &block_fit);
        if wrong == 0 {
            return Ok((generation, true));
        }
    }
    Ok((cfg.max_iters, false))
}

/// Runs `trials` independent trials in parallel; trial `i` uses stream `i`.
pub fn run_trials(cfg: &EaConfig, fitness: &LinearFitness, trials: usize, seed: u64) -> Result<Vec<EaTrialResult>> {
    cfg.validate()?;
    (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(seed, i);
            let (iterations, reached) = run_decomposed_ea(cfg, fitness, &mut rng)?;
            Ok(EaTrialResult {
                l: cfg.l,
                k: cfg.k,
                d: cfg.d,
                lambda: cfg.lambda,
                sampling: cfg.sampling,
                init: cfg.init,
                iterations,
                reached,
                seed,
                stream: i,
            })
        })
        .collect()
}

/// `W_t = (L-1)^(2^t) / L^(2^t - 1)`, evaluated in log space.
pub fn expected_wrong_count(l: u64, t: u32) -> f64 {
    let lf = l as f64;
    let e = 2f64.powi(t as i32);
    (lf.ln() + e * (-1.0 / lf).ln_1p()).exp()
}

/// The same sequence from `W_0 = L - 1` and `W_{t+1} = W_t^2 / L`.
pub fn wrong_count_recurrence(l: u64, t_max: u32) -> Vec<f64> {
    let lf = l as f64;
    let mut w = lf - 1.0;
    let mut out = Vec::with_capacity(t_max as usize + 1);
    out.push(w);
    for _ in 0..t_max {
        w = w * w / lf;
        out.push(w);
    }
    out
}

/// Mean wrong-location count per generation under pessimistic init,
/// proportional sampling, D = L and λ = 1. Finished trials contribute 0.
pub fn empirical_wrong_counts(l: usize, trials: usize, seed: u64) -> Result<Vec<f64>> {
    let cfg = EaConfig::new(l, l, l, 1, Sampling::Proportional, InitMode::Pessimistic);
    let fitness = LinearFitness::unit(l);
    let traces: Vec<Vec<usize>> = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let mut trace = WrongCountTrace::default();
            run_observed(&cfg, &fitness, &mut trial_rng(seed, i), &mut trace)?;
            Ok(trace.0)
        })
        .collect::<Result<_>>()?;
    let len = traces.iter().map(Vec::len).max().unwrap_or(0);
    let mut mean = vec![0.0; len];
    for trace in &traces {
        for (acc, &w) in mean.iter_mut().zip(trace) {
            *acc += w as f64;
        }
    }
    for m in &mut mean {
        *m /= trials as f64;
    }
    Ok(mean)
}

/// Quantity the mean iteration count is regressed on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predictor {
    /// `ln x`, with x = L.
    LogL,
    /// `k · x · ln x`, with x = L.
    KLLogL { k: usize },
    /// `k·L·(ln L - ln D)·ln D / D`, with x = D.
    Blocks { k: usize, l: usize },
}

impl Predictor {
    pub fn value(&self, x: usize) -> f64 {
        let xf = x as f64;
        match *self {
            Predictor::LogL => xf.ln(),
            Predictor::KLLogL { k } => k as f64 * xf * xf.ln(),
            Predictor::Blocks { k, l } => {
                let lf = l as f64;
                k as f64 * lf * (lf.ln() - xf.ln()) * xf.ln() / xf
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub x: usize,
    pub predictor: f64,
    pub trials: usize,
    pub timeouts: usize,
    pub mean: f64,
    pub stderr: f64,
    pub fitted: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub predictor: Predictor,
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
    pub points: Vec<ScalingPoint>,
    /// Fewer than 5 groups, fewer than 100 trials in some group, or
    /// timed-out trials.
    pub inconclusive: bool,
}

pub const MIN_GROUPS: usize = 5;
pub const MIN_TRIALS: usize = 100;

pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Least-squares fit of group mean iterations against `predictor(x)`.
pub fn fit_scaling(groups: &[(usize, Vec<EaTrialResult>)], predictor: Predictor) -> ScalingReport {
    let mut points: Vec<ScalingPoint> = groups
        .iter()
        .map(|(x, trials)| {
            let its: Vec<f64> = trials.iter().map(|t| t.iterations as f64).collect();
            let (mean, stderr) = mean_stderr(&its);
            ScalingPoint {
                x: *x,
                predictor: predictor.value(*x),
                trials: trials.len(),
                timeouts: trials.iter().filter(|t| !t.reached).count(),
                mean,
                stderr,
                fitted: f64::NAN,
                residual: f64::NAN,
            }
        })
        .collect();
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.predictor).sum::<f64>() / n;
    let my = points.iter().map(|p| p.mean).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.predictor - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.predictor - mx) * (p.mean - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for p in &mut points {
        p.fitted = intercept + slope * p.predictor;
        p.residual = p.mean - p.fitted;
        ss_res += p.residual * p.residual;
        ss_tot += (p.mean - my).powi(2);
    }
    let mut distinct: Vec<usize> = points.iter().map(|p| p.x).collect();
    distinct.sort_unstable();
    distinct.dedup();
    let inconclusive = distinct.len() < MIN_GROUPS
        || points.iter().any(|p| p.trials < MIN_TRIALS || p.timeouts > 0)
        || !slope.is_finite();
    ScalingReport {
        predictor,
        intercept,
        slope,
        r_squared: 1.0 - ss_res / ss_tot,
        points,
        inconclusive,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub l: usize,
    pub k: usize,
    pub t: usize,
    pub trials: usize,
    /// Mean iterations with no decomposition (D = 1), per task (D = T) and
    /// per block (D = L).
    pub none: f64,
    pub per_task: f64,
    pub per_block: f64,
    pub none_over_task: f64,
    pub task_over_block: f64,
    pub timeouts: usize,
}

impl OrderingReport {
    pub fn strictly_ordered(&self) -> bool {
        self.none > self.per_task && self.per_task > self.per_block
    }

    pub fn min_gap(&self) -> f64 {
        self.none_over_task.min(self.task_over_block)
    }
}

/// Compares decomposition granularities under uniform init and sampling.
pub fn decomposition_ordering(
    l: usize,
    k: usize,
    t: usize,
    lambda: usize,
    trials: usize,
    seed: u64,
) -> Result<OrderingReport> {
    let fitness = LinearFitness::unit(l);
    let mut means = [0.0; 3];
    let mut timeouts = 0;
    for (slot, d) in [1, t, l].into_iter().enumerate() {
        let cfg = EaConfig::new(l, k, d, lambda, Sampling::Uniform, InitMode::Uniform);
        let res = run_trials(&cfg, &fitness, trials, seed.wrapping_add(slot as u64))?;
        timeouts += res.iter().filter(|r| !r.reached).count();
        let its: Vec<f64> = res.iter().map(|r| r.iterations as f64).collect();
        means[slot] = mean_stderr(&its).0;
    }
    Ok(OrderingReport {
        l,
        k,
        t,
        trials,
        none: means[0],
        per_task: means[1],
        per_block: means[2],
        none_over_task: means[0] / means[1],
        task_over_block: means[1] / means[2],
        timeouts,
    })
}
