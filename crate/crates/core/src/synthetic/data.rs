use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MuirError, Result};
use crate::tensor::Array;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub groups: usize,
    pub tasks_per_group: usize,
    pub dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noisy: bool,
    pub noise_sigma: f64,
    /// Whether test targets also carry noise. Off by default so test RMSE
    /// measures recovery of the underlying linear function.
    pub noisy_test: bool,
    /// Task scalars are drawn uniformly from `[alpha_min, alpha_max]`,
    /// or from `±[alpha_min, alpha_max]` with `signed_scalars`.
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub signed_scalars: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            groups: 3,
            tasks_per_group: 10,
            dim: 20,
            n_train: 10,
            n_val: 5,
            n_test: 50,
            noisy: false,
            noise_sigma: 0.5,
            noisy_test: false,
            alpha_min: 0.5,
            alpha_max: 2.5,
            signed_scalars: false,
        }
    }
}

impl DataConfig {
    pub fn noisy() -> Self {
        Self {
            noisy: true,
            ..Self::default()
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.groups * self.tasks_per_group
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.tasks_per_group == 0 || self.dim == 0 {
            return Err(MuirError::Config("groups, tasks_per_group and dim must be positive".into()));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(MuirError::Config("every split needs at least one sample".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(MuirError::Config("noise_sigma must be finite and non-negative".into()));
        }
        if !(0.0 < self.alpha_min && self.alpha_min <= self.alpha_max && self.alpha_max.is_finite()) {
            return Err(MuirError::Config("need 0 < alpha_min <= alpha_max".into()));
        }
        Ok(())
    }
}

/// Inputs `x` (`n x dim`) and targets `y` (`n x 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub x: Array,
    pub y: Array,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub group: usize,
    pub alpha: f64,
    pub weights: Vec<f64>,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl SyntheticTask {
    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSet {
    pub config: DataConfig,
    pub seed: u64,
    /// Unit-norm direction of each group.
    pub directions: Vec<Vec<f64>>,
    pub tasks: Vec<SyntheticTask>,
}

impl SyntheticTaskSet {
    pub fn labels(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.group).collect()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

const STREAM_DIRECTIONS: u64 = 0;
const STREAM_SCALARS: u64 = 1;
const STREAM_INPUTS: u64 = 2;
const STREAM_NOISE: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Grouped linear-regression tasks: task `t` in group `g` has weights
/// `alpha_t * v_g`, and `y = <w_t, x>` plus optional Gaussian noise.
pub fn generate_synthetic(seed: u64, config: &DataConfig) -> Result<SyntheticTaskSet> {
    config.validate()?;
    let mut dir_rng = stream(seed, STREAM_DIRECTIONS);
    let mut scalar_rng = stream(seed, STREAM_SCALARS);
    let mut input_rng = stream(seed, STREAM_INPUTS);
    let mut noise_rng = stream(seed, STREAM_NOISE);
    let dim = config.dim;

    let directions: Vec<Vec<f64>> = (0..config.groups)
        .map(|_| {
            let v = normal_vec(&mut dir_rng, dim);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();

    let mut tasks = Vec::with_capacity(config.num_tasks());
    for (group, v) in directions.iter().enumerate() {
        for _ in 0..config.tasks_per_group {
            let magnitude = scalar_rng.random_range(config.alpha_min..=config.alpha_max);
            let negative = scalar_rng.random::<bool>();
            let alpha = if config.signed_scalars && negative { -magnitude } else { magnitude };
            let weights: Vec<f64> = v.iter().map(|x| alpha * x).collect();
            let mut make = |n: usize, noisy: bool| -> Result<Split> {
                let x = normal_vec(&mut input_rng, n * dim);
                let y = (0..n)
                    .map(|i| {
                        let clean: f64 = x[i * dim..(i + 1) * dim].iter().zip(&weights).map(|(a, b)| a * b).sum();
                        let e: f64 = StandardNormal.sample(&mut noise_rng);
                        if noisy {
                            clean + config.noise_sigma * e
                        } else {
                            clean
                        }
                    })
                    .collect();
                Ok(Split {
                    x: Array::new(vec![n, dim], x)?,
                    y: Array::new(vec![n, 1], y)?,
                })
            };
            let train = make(config.n_train, config.noisy)?;
            let val = make(config.n_val, config.noisy)?;
            let test = make(config.n_test, config.noisy && config.noisy_test)?;
            tasks.push(SyntheticTask {
                group,
                alpha,
                weights,
                train,
                val,
                test,
            });
        }
    }
    Ok(SyntheticTaskSet {
        config: *config,
        seed,
        directions,
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_match_the_benchmark() {
        let set = generate_synthetic(0, &DataConfig::default()).unwrap();
        assert_eq!(set.len(), 30);
        for t in &set.tasks {
            assert_eq!(t.train.x.shape(), &[10, 20]);
            assert_eq!(t.val.x.shape(), &[5, 20]);
            assert_eq!(t.test.x.shape(), &[50, 20]);
            assert_eq!(t.test.y.shape(), &[50, 1]);
        }
        let labels = set.labels();
        for g in 0..3 {
            assert_eq!(labels.iter().filter(|&&l| l == g).count(), 10);
        }
    }

    #[test]
    fn same_group_weights_differ_by_a_scalar() {
        let set = generate_synthetic(4, &DataConfig::default()).unwrap();
        let (a, b) = (&set.tasks[0], &set.tasks[7]);
        assert_eq!(a.group, b.group);
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            assert!((wa / a.alpha - wb / b.alpha).abs() < 1e-12);
        }
    }

    #[test]
    fn clean_targets_are_exactly_linear() {
        let set = generate_synthetic(2, &DataConfig::default()).unwrap();
        for t in &set.tasks {
            for s in [&t.train, &t.val, &t.test] {
                let pred = s.x.matmul(&Array::new(vec![20, 1], t.weights.clone()).unwrap()).unwrap();
                assert!(pred.max_abs_diff(&s.y) < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = DataConfig::noisy();
        assert_eq!(generate_synthetic(9, &cfg).unwrap(), generate_synthetic(9, &cfg).unwrap());
        assert_ne!(generate_synthetic(9, &cfg).unwrap(), generate_synthetic(10, &cfg).unwrap());
    }

    #[test]
    fn noise_only_where_requested() {
        let clean = generate_synthetic(1, &DataConfig::default()).unwrap();
        let noisy = generate_synthetic(1, &DataConfig::noisy()).unwrap();
        let (c, n) = (&clean.tasks[3], &noisy.tasks[3]);
        assert_eq!(c.train.x, n.train.x);
        assert!(c.train.y.max_abs_diff(&n.train.y) > 0.0);
        assert_eq!(c.test.y, n.test.y);
    }
}
