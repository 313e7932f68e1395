//! One function per CLI verb. Each returns a serializable summary; the
//! binary decides how to print it and maps errors to exit codes.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anesi::gradest::{
    cosine, exact_expectation_gradient, fit_outcome_model, project_row_gradient,
    score_function_gradient, surrogate_gradient, EstimatorReport, OutcomeModel,
};
use anesi::infer::beam_search_output;
use anesi::infer::PredictionModel;
use anesi::prior::DirichletPrior;
use anesi::problem::{Belief, SpaceSpec, SymbolicFn, World};
use anesi::pruners::{
    mnistadd_prune_output, mnistadd_prune_world, verify_output_pruner_exhaustive,
    verify_world_pruner_exhaustive, verify_world_pruner_randomized, MnistAddPruner, Pruner,
};
use anesi::tasks::{
    idx_addition_data, load_idx, synthetic_addition_data, AdditionTask, SyntheticDigitConfig,
    TaskData, TaskError,
};
use anesi::train::{evaluate, train_run, MetricsRecord, TrainState, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

fn task_error(e: TaskError) -> CliError {
    CliError::Config(e.to_string())
}

/// Train/test splits per the config: synthetic digit channel by default,
/// IDX-backed images when both paths are present.
pub fn build_data(cfg: &RunConfig) -> Result<(TaskData, TaskData), CliError> {
    let seed = cfg.resolved_seed();
    let data_seed = cfg.data_seed.unwrap_or(seed);
    if let (Some(images), Some(labels)) = (&cfg.idx_images, &cfg.idx_labels) {
        let idx = load_idx(images, labels).map_err(task_error)?;
        let all = idx_addition_data(cfg.n, &idx);
        let need = cfg.train_size + cfg.test_size;
        if all.instances.len() < need {
            return Err(CliError::Config(format!(
                "IDX data yields {} instances, config needs {need}",
                all.instances.len()
            )));
        }
        let train = TaskData {
            n: all.n,
            feature_dim: all.feature_dim,
            instances: all.instances[..cfg.train_size].to_vec(),
        };
        let test = TaskData {
            n: all.n,
            feature_dim: all.feature_dim,
            instances: all.instances[cfg.train_size..need].to_vec(),
        };
        return Ok((train, test));
    }
    let channel = |seed: u64| SyntheticDigitConfig {
        feature_dim: cfg.feature_dim,
        epsilon: cfg.epsilon,
        sigma: cfg.sigma,
        seed,
    };
    let train = synthetic_addition_data(cfg.n, 2 * cfg.n * cfg.train_size, &channel(data_seed))
        .map_err(task_error)?;
    let test =
        synthetic_addition_data(cfg.n, 2 * cfg.n * cfg.test_size, &channel(data_seed + 1))
            .map_err(task_error)?;
    Ok((train, test))
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub epochs: usize,
    pub final_record: Option<MetricsRecord>,
}

/// Full training run: JSONL metrics flushed per epoch so a killed run still
/// leaves a parseable file, then one checkpoint with every parameter.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    let variant = cfg.parsed_variant()?;
    let seed = cfg.resolved_seed();
    let task = AdditionTask::new(cfg.n);
    let (train_data, test_data) = build_data(cfg)?;
    fs::create_dir_all(&cfg.out)?;
    let metrics_path = cfg.metrics_path();
    let mut metrics_file = File::create(&metrics_path)?;

    let mut state = TrainState::new(&task, train_data.feature_dim, &cfg.train, seed)?;
    let pruner = matches!(variant, Variant::Pruning).then(|| MnistAddPruner::new(cfg.n));
    let pruner_ref = pruner.as_ref().map(|p| p as &dyn Pruner);

    let mut write_err: Option<std::io::Error> = None;
    let records = train_run(
        &mut state,
        &task,
        cfg.n,
        &train_data,
        &test_data,
        variant,
        pruner_ref,
        &cfg.train,
        seed,
        |rec| {
            let line = serde_json::to_string(rec).expect("metrics record is serializable");
            println!("{line}");
            if write_err.is_none() {
                write_err = writeln!(metrics_file, "{line}")
                    .and_then(|_| metrics_file.flush())
                    .err();
            }
        },
    )?;
    if let Some(e) = write_err {
        return Err(e.into());
    }

    let checkpoint = cfg.out.join("checkpoint.anesi");
    state.save(&checkpoint)?;
    Ok(TrainSummary {
        metrics: metrics_path,
        checkpoint,
        epochs: records.len(),
        final_record: records.last().cloned(),
    })
}

#[derive(Debug, Serialize)]
pub struct EvalSummary {
    pub n: usize,
    pub variant: String,
    pub beam: usize,
    pub acc_symbolic: f64,
    pub acc_neural: f64,
    pub acc_digit: f64,
}

/// Evaluate a checkpoint on the config's test split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalSummary, CliError> {
    let variant = cfg.parsed_variant()?;
    if !checkpoint.is_file() {
        return Err(CliError::Config(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    let seed = cfg.resolved_seed();
    let task = AdditionTask::new(cfg.n);
    let (_, test_data) = build_data(cfg)?;
    let mut state = TrainState::new(&task, test_data.feature_dim, &cfg.train, seed)?;
    state.load(checkpoint)?;
    let pruner = matches!(variant, Variant::Pruning).then(|| MnistAddPruner::new(cfg.n));
    let pruner_ref = pruner.as_ref().map(|p| p as &dyn Pruner);
    let beam = cfg.train.beam.unwrap_or(cfg.train.k);
    let stats = evaluate(&state, &task, &test_data.instances, beam, pruner_ref)?;
    Ok(EvalSummary {
        n: cfg.n,
        variant: cfg.variant.clone(),
        beam,
        acc_symbolic: stats.acc_symbolic,
        acc_neural: stats.acc_neural,
        acc_digit: stats.acc_digit,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TimingEntry {
    pub n: usize,
    pub median_seconds: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TimingReport {
    pub beam: usize,
    pub repeats: usize,
    pub hidden: Vec<usize>,
    pub entries: Vec<TimingEntry>,
}

/// Median wall-clock of one neural prediction across problem sizes.
/// Freshly initialized weights: the cost is architecture-bound, so no
/// training is needed. Everything runs on the calling thread.
pub fn cmd_timing(
    ns: &[usize],
    repeats: usize,
    beam: usize,
    hidden: &[usize],
    seed: u64,
) -> Result<TimingReport, CliError> {
    if repeats == 0 || beam == 0 {
        return Err(CliError::Config("repeats and beam must be positive".into()));
    }
    let mut entries = Vec::with_capacity(ns.len());
    for &n in ns {
        if n == 0 || n > 15 {
            return Err(CliError::Config(format!("n = {n} outside 1..=15")));
        }
        let task = AdditionTask::new(n);
        let mut rng = ChaCha12Rng::seed_from_u64(seed.wrapping_add(n as u64));
        let model =
            PredictionModel::new(task.world_space(), task.output_space(), hidden, &mut rng);
        let belief = random_belief(task.world_space(), &mut rng);
        for _ in 0..2 {
            beam_search_output(&model, &belief, beam, None).map_err(|e| CliError::Other(e.to_string()))?;
        }
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            beam_search_output(&model, &belief, beam, None)
                .map_err(|e| CliError::Other(e.to_string()))?;
            times.push(start.elapsed().as_secs_f64());
        }
        entries.push(TimingEntry {
            n,
            median_seconds: median(&mut times),
        });
    }
    Ok(TimingReport {
        beam,
        repeats,
        hidden: hidden.to_vec(),
        entries,
    })
}

fn random_belief(space: &SpaceSpec, rng: &mut impl Rng) -> Belief {
    let rows = space
        .cards()
        .iter()
        .map(|&c| {
            let raw: Vec<f64> = (0..c).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / total).collect()
        })
        .collect();
    Belief::new(space, rows).expect("rows are normalized")
}

fn median(times: &mut [f64]) -> f64 {
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite durations"));
    let mid = times.len() / 2;
    if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    }
}

#[derive(Debug, Serialize)]
pub struct VerifyLevel {
    pub n: usize,
    pub kind: String,
    pub mode: String,
    pub checked: u64,
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub levels: Vec<VerifyLevel>,
}

/// Compare the interval pruner against brute-force oracles: exhaustively
/// for N <= 2, randomized at N = 3 where full coverage is out of reach.
pub fn cmd_verify_pruner(n_max: usize, cases: u64, seed: u64) -> Result<VerifyReport, CliError> {
    if n_max > 3 {
        return Err(CliError::Config(format!(
            "n = {n_max}: the completion oracle only reaches n = 3"
        )));
    }
    let mut levels = Vec::new();
    for n in 1..=n_max.min(2) {
        let checked = verify_world_pruner_exhaustive(n, &|ctx| mnistadd_prune_world(ctx))
            .map_err(CliError::Pruner)?;
        levels.push(VerifyLevel {
            n,
            kind: "world".into(),
            mode: "exhaustive".into(),
            checked,
        });
        let checked = verify_output_pruner_exhaustive(n, &|ctx| mnistadd_prune_output(ctx))
            .map_err(CliError::Pruner)?;
        levels.push(VerifyLevel {
            n,
            kind: "output".into(),
            mode: "exhaustive".into(),
            checked,
        });
    }
    if n_max >= 3 {
        let checked = verify_world_pruner_randomized(3, cases, seed, &|ctx| {
            mnistadd_prune_world(ctx)
        })
        .map_err(CliError::Pruner)?;
        levels.push(VerifyLevel {
            n: 3,
            kind: "world".into(),
            mode: "randomized".into(),
            checked,
        });
        let checked = verify_output_pruner_exhaustive(3, &|ctx| mnistadd_prune_output(ctx))
            .map_err(CliError::Pruner)?;
        levels.push(VerifyLevel {
            n: 3,
            kind: "output".into(),
            mode: "exhaustive".into(),
            checked,
        });
    }
    Ok(VerifyReport { levels })
}

/// Benchmark the surrogate against the score-function estimator on a
/// two-variable disjunction, reporting alignment, error and variance.
pub fn cmd_gradest_bench(
    fit_iters: usize,
    samples: usize,
    seed: u64,
) -> Result<EstimatorReport, CliError> {
    if fit_iters == 0 || samples < 2 {
        return Err(CliError::Config(
            "fit_iters must be positive and samples at least 2".into(),
        ));
    }
    let start = Instant::now();
    let space = SpaceSpec::new(vec![2, 2]).expect("static cards");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut model = OutcomeModel::new(&space, &[64], &mut rng);
    let mut prior = DirichletPrior::new(&space);
    for var in 0..2 {
        prior
            .set_alpha(var, &[1.0, 1.0])
            .expect("static alpha shape");
    }
    let g = |z: &World| {
        if z.0[0] == 1 || z.0[1] == 1 {
            1.0
        } else {
            0.0
        }
    };
    let wrap = |e: anesi::gradest::EstimatorError| CliError::Other(e.to_string());
    fit_outcome_model(&mut model, &prior, &g, fit_iters, 64, 3e-3, &mut rng).map_err(wrap)?;
    fit_outcome_model(&mut model, &prior, &g, fit_iters / 2, 64, 3e-4, &mut rng).map_err(wrap)?;

    let points = 8;
    let mut cos_sum = 0.0;
    let mut abs_sum = 0.0;
    let mut var_sum = 0.0;
    let mut entries = 0.0;
    for _ in 0..points {
        let belief = prior.sample_belief(&mut rng);
        let surrogate = surrogate_gradient(&model, &belief).map_err(wrap)?;
        let exact = exact_expectation_gradient(&belief, &g).map_err(wrap)?;
        let projected: Vec<Vec<f64>> = exact
            .iter()
            .zip(belief.rows())
            .map(|(row, p)| project_row_gradient(row, p))
            .collect();
        cos_sum += cosine(&surrogate, &projected);
        let score = score_function_gradient(&belief, &g, samples, &mut rng).map_err(wrap)?;
        for (mean_row, (var_row, exact_row)) in
            score.mean.iter().zip(score.variance.iter().zip(&exact))
        {
            for ((m, v), e) in mean_row.iter().zip(var_row).zip(exact_row) {
                abs_sum += (m - e).abs();
                var_sum += v;
                entries += 1.0;
            }
        }
    }
    Ok(EstimatorReport {
        cards: vec![2, 2],
        fit_iters,
        score_samples: samples,
        cosine_surrogate: cos_sum / points as f64,
        score_abs_error: abs_sum / entries,
        score_variance: var_sum / entries,
        seconds: start.elapsed().as_secs_f64(),
    })
}
