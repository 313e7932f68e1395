//! Tasks: multi-digit addition with its symbolic function and datasets, a
//! synthetic perception channel standing in for MNIST images, a real-MNIST
//! IDX loader, and a boolean constrained-output toy task.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::problem::{Output, SpaceSpec, SymbolicFn, World};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("digit pool of {pool} cannot fill a single instance of {need} digits")]
    PoolTooSmall { pool: usize, need: usize },
    #[error("invalid task config: {0}")]
    InvalidConfig(String),
    #[error("bad IDX magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("truncated IDX file while reading {0}")]
    Truncated(&'static str),
    #[error("IDX count mismatch: {images} images against {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("IDX label {0} out of digit range")]
    BadLabel(u8),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Addition of two N-digit numbers: worlds are 2N digits, outputs are the
/// N+1 digits of the sum with the leading carry restricted to {0, 1}.
#[derive(Debug, Clone)]
pub struct AdditionTask {
    n: usize,
    world: SpaceSpec,
    output: SpaceSpec,
}

impl AdditionTask {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "need at least one digit per number");
        let mut out_cards = vec![2];
        out_cards.extend(std::iter::repeat(10).take(n));
        Self {
            n,
            world: SpaceSpec::uniform(2 * n, 10),
            output: SpaceSpec::new(out_cards).expect("valid output space"),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

impl SymbolicFn for AdditionTask {
    fn world_space(&self) -> &SpaceSpec {
        &self.world
    }
    fn output_space(&self) -> &SpaceSpec {
        &self.output
    }
    fn apply(&self, world: &World) -> Output {
        c_sum(world, self.n)
    }
}

/// Decode `digits` (most significant first) into an integer.
pub fn digits_to_int(digits: &[usize]) -> u128 {
    digits.iter().fold(0u128, |acc, &d| acc * 10 + d as u128)
}

/// Sum two N-digit numbers and decompose the result by digit: a carry in
/// {0, 1} followed by N digits, most significant first.
pub fn c_sum(world: &World, n: usize) -> Output {
    debug_assert_eq!(world.0.len(), 2 * n);
    let n1 = digits_to_int(&world.0[..n]);
    let n2 = digits_to_int(&world.0[n..]);
    let mut s = n1 + n2;
    let mut digits = vec![0usize; n + 1];
    for slot in (0..=n).rev() {
        digits[slot] = (s % 10) as usize;
        s /= 10;
    }
    debug_assert_eq!(s, 0);
    debug_assert!(digits[0] <= 1);
    Output(digits)
}

/// A sum instance: 2N pool positions, their digit labels, and the output.
#[derive(Debug, Clone)]
pub struct AdditionInstance {
    pub pool_indices: Vec<usize>,
    pub digits: Vec<usize>,
    pub output: Output,
}

#[derive(Debug, Clone)]
pub struct AdditionDataset {
    pub n: usize,
    pub instances: Vec<AdditionInstance>,
}

/// Partition a pool of `digit_pool_size` uniformly drawn digit labels into
/// disjoint 2N-tuples, each labeled with its sum. Yields
/// `floor(pool / 2N)` instances; the remainder of the pool is dropped.
pub fn make_dataset(n: usize, digit_pool_size: usize, seed: u64) -> Result<AdditionDataset, TaskError> {
    let need = 2 * n;
    if digit_pool_size < need {
        return Err(TaskError::PoolTooSmall {
            pool: digit_pool_size,
            need,
        });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let pool: Vec<usize> = (0..digit_pool_size).map(|_| rng.gen_range(0..10)).collect();
    Ok(dataset_from_labels(n, &pool))
}

/// Chunk an explicit label pool (e.g. MNIST labels) into instances.
pub fn dataset_from_labels(n: usize, labels: &[usize]) -> AdditionDataset {
    let need = 2 * n;
    let instances = labels
        .chunks_exact(need)
        .enumerate()
        .map(|(i, chunk)| {
            let digits = chunk.to_vec();
            let output = c_sum(&World(digits.clone()), n);
            AdditionInstance {
                pool_indices: (i * need..(i + 1) * need).collect(),
                digits,
                output,
            }
        })
        .collect();
    AdditionDataset { n, instances }
}

/// Synthetic stand-in for MNIST images: a one-hot anchor plus Gaussian noise.
#[derive(Debug, Clone)]
pub struct SyntheticDigitConfig {
    pub feature_dim: usize,
    /// With this probability the anchor is redrawn uniformly over all ten
    /// digits, so the irreducible per-digit error rate is 0.9 epsilon.
    pub epsilon: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticDigitConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            epsilon: 0.0,
            sigma: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticDigitConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.feature_dim < 10 {
            return Err(TaskError::InvalidConfig(format!(
                "feature_dim {} cannot hold a digit anchor",
                self.feature_dim
            )));
        }
        if !(0.0..0.5).contains(&self.epsilon) {
            return Err(TaskError::InvalidConfig(format!(
                "epsilon {} outside [0, 0.5)",
                self.epsilon
            )));
        }
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return Err(TaskError::InvalidConfig(format!("sigma {}", self.sigma)));
        }
        Ok(())
    }
}

/// One synthetic observation of `label`.
pub fn synth_perceive(label: usize, config: &SyntheticDigitConfig, rng: &mut impl Rng) -> Vec<f64> {
    debug_assert!(label < 10);
    let anchor = if config.epsilon > 0.0 && rng.gen::<f64>() < config.epsilon {
        rng.gen_range(0..10)
    } else {
        label
    };
    let mut feat = vec![0.0; config.feature_dim];
    feat[anchor] = 1.0;
    if config.sigma > 0.0 {
        let noise = Normal::new(0.0, config.sigma).expect("valid sigma");
        for v in feat.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    feat
}

/// Fully materialized training data: digit labels, per-digit feature
/// vectors, and the target output.
#[derive(Debug, Clone)]
pub struct Instance {
    pub digits: Vec<usize>,
    pub features: Vec<Vec<f64>>,
    pub output: Output,
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub n: usize,
    pub feature_dim: usize,
    pub instances: Vec<Instance>,
}

/// Addition dataset with synthetic perception features.
pub fn synthetic_addition_data(
    n: usize,
    digit_pool_size: usize,
    config: &SyntheticDigitConfig,
) -> Result<TaskData, TaskError> {
    config.validate()?;
    let base = make_dataset(n, digit_pool_size, config.seed)?;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed.wrapping_add(1));
    let instances = base
        .instances
        .into_iter()
        .map(|inst| {
            let features = inst
                .digits
                .iter()
                .map(|&d| synth_perceive(d, config, &mut rng))
                .collect();
            Instance {
                digits: inst.digits,
                features,
                output: inst.output,
            }
        })
        .collect();
    Ok(TaskData {
        n,
        feature_dim: config.feature_dim,
        instances,
    })
}

/// Addition dataset over real MNIST images; features are pixels in [0, 1].
pub fn idx_addition_data(n: usize, idx: &IdxDataset) -> TaskData {
    let labels: Vec<usize> = idx.labels.iter().map(|&l| l as usize).collect();
    let base = dataset_from_labels(n, &labels);
    let instances = base
        .instances
        .into_iter()
        .map(|inst| {
            let features = inst
                .pool_indices
                .iter()
                .map(|&i| idx.images[i].iter().map(|&p| p as f64 / 255.0).collect())
                .collect();
            Instance {
                digits: inst.digits,
                features,
                output: inst.output,
            }
        })
        .collect();
    TaskData {
        n,
        feature_dim: idx.rows * idx.cols,
        instances,
    }
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct IdxDataset {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<u8>,
}

fn read_be_u32(bytes: &[u8], pos: usize, what: &'static str) -> Result<u32, TaskError> {
    bytes
        .get(pos..pos + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(TaskError::Truncated(what))
}

/// Parse an IDX image file: big-endian magic 0x00000803, then count, rows,
/// cols, then `count * rows * cols` bytes of pixels.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<u8>>), TaskError> {
    let magic = read_be_u32(bytes, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(TaskError::BadMagic(magic));
    }
    let count = read_be_u32(bytes, 4, "image count")? as usize;
    let rows = read_be_u32(bytes, 8, "image rows")? as usize;
    let cols = read_be_u32(bytes, 12, "image cols")? as usize;
    if rows == 0 || cols == 0 {
        return Err(TaskError::InvalidConfig("zero-sized IDX images".into()));
    }
    let pixels = rows
        .checked_mul(cols)
        .and_then(|rc| rc.checked_mul(count))
        .ok_or_else(|| TaskError::InvalidConfig("IDX dimensions overflow".into()))?;
    let payload = bytes
        .get(16..16usize.saturating_add(pixels))
        .ok_or(TaskError::Truncated("image payload"))?;
    let images = payload.chunks_exact(rows * cols).map(|c| c.to_vec()).collect();
    Ok((rows, cols, images))
}

/// Parse an IDX label file: big-endian magic 0x00000801, then count, then
/// `count` label bytes, each in [0, 9].
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, TaskError> {
    let magic = read_be_u32(bytes, 0, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(TaskError::BadMagic(magic));
    }
    let count = read_be_u32(bytes, 4, "label count")? as usize;
    let payload = bytes
        .get(8..8 + count)
        .ok_or(TaskError::Truncated("label payload"))?;
    if let Some(&bad) = payload.iter().find(|&&l| l > 9) {
        return Err(TaskError::BadLabel(bad));
    }
    Ok(payload.to_vec())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<IdxDataset, TaskError> {
    let (rows, cols, images) = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if images.len() != labels.len() {
        return Err(TaskError::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    Ok(IdxDataset {
        rows,
        cols,
        images,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoolFormula {
    Disjunction,
    Conjunction,
}

/// Constrained-output toy task: binary worlds, Y = {0, 1} indicating whether
/// the formula holds.
#[derive(Debug, Clone)]
pub struct BooleanTask {
    formula: BoolFormula,
    world: SpaceSpec,
    output: SpaceSpec,
}

impl BooleanTask {
    pub fn formula(&self) -> BoolFormula {
        self.formula
    }
}

pub fn boolean_constraint_task(num_vars: usize, formula: BoolFormula) -> Result<BooleanTask, TaskError> {
    if num_vars == 0 || num_vars > 20 {
        return Err(TaskError::InvalidConfig(format!(
            "boolean task over {num_vars} variables"
        )));
    }
    Ok(BooleanTask {
        formula,
        world: SpaceSpec::uniform(num_vars, 2),
        output: SpaceSpec::uniform(1, 2),
    })
}

impl SymbolicFn for BooleanTask {
    fn world_space(&self) -> &SpaceSpec {
        &self.world
    }
    fn output_space(&self) -> &SpaceSpec {
        &self.output
    }
    fn apply(&self, world: &World) -> Output {
        let sat = match self.formula {
            BoolFormula::Disjunction => world.0.iter().any(|&v| v == 1),
            BoolFormula::Conjunction => world.0.iter().all(|&v| v == 1),
        };
        Output(vec![sat as usize])
    }
}
