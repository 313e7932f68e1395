//! Run configuration: the JSON schema, built-in desk presets, and the
//! flag > file > `ANESI_SEED` > default precedence chain.

use std::path::PathBuf;

use anesi::train::{TrainConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything one run needs. The JSON form is strict: unknown fields are
/// rejected, missing fields fall back to the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Task name; `add` is the only task wired up.
    pub task: String,
    /// Digits per operand.
    pub n: usize,
    /// predict, explain, pruning or no-prior.
    pub variant: String,
    /// Master seed. Unset falls back to `ANESI_SEED`, then 0.
    pub seed: Option<u64>,
    /// Training instances (synthetic) or prefix of the IDX-derived set.
    pub train_size: usize,
    /// Held-out instances evaluated after every epoch.
    pub test_size: usize,
    /// Label corruption rate of the synthetic digit channel.
    pub epsilon: f64,
    /// Feature noise of the synthetic digit channel.
    pub sigma: f64,
    /// Synthetic feature width; ignored when IDX files are given.
    pub feature_dim: usize,
    /// Seed of the data channel only; defaults to the master seed.
    pub data_seed: Option<u64>,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    /// Directory for the checkpoint and, by default, the metrics file.
    pub out: PathBuf,
    /// Metrics path override; defaults to `<out>/metrics.jsonl`.
    pub metrics: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: "add".into(),
            n: 1,
            variant: "predict".into(),
            seed: None,
            train_size: 1000,
            test_size: 500,
            epsilon: 0.0,
            sigma: 0.1,
            feature_dim: 16,
            data_seed: None,
            idx_images: None,
            idx_labels: None,
            out: PathBuf::from("anesi-out"),
            metrics: None,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn resolved_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Parsed variant; [`validate`] has already rejected bad strings.
    pub fn parsed_variant(&self) -> Result<Variant, CliError> {
        self.variant.parse().map_err(CliError::Config)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.metrics
            .clone()
            .unwrap_or_else(|| self.out.join("metrics.jsonl"))
    }
}

/// The `desk-nX` preset: shrunken training knobs that converge in minutes.
pub fn desk_preset(n: usize) -> RunConfig {
    RunConfig {
        n,
        train_size: 256,
        test_size: 200,
        train: TrainConfig::desk(),
        ..RunConfig::default()
    }
}

/// A `--config` value is either a built-in `desk-nX` preset name or a path
/// to a JSON file. Preset names win; nobody should name a file `desk-n1`.
pub fn load_config_arg(arg: &str) -> Result<RunConfig, CliError> {
    if let Some(rest) = arg.strip_prefix("desk-n") {
        if let Ok(n) = rest.parse::<usize>() {
            if n == 0 {
                return Err(CliError::Config("desk preset needs n >= 1".into()));
            }
            return Ok(desk_preset(n));
        }
    }
    let text = std::fs::read_to_string(arg)
        .map_err(|e| CliError::Config(format!("cannot read config {arg:?}: {e}")))?;
    parse_config(&text).map_err(|e| CliError::Config(format!("config {arg:?}: {e}")))
}

/// Strict-schema JSON decode, shared with the fuzz target.
pub fn parse_config(text: &str) -> Result<RunConfig, serde_json::Error> {
    serde_json::from_str(text)
}

/// Values taken from command-line flags; any `Some` beats the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub task: Option<String>,
    pub n: Option<usize>,
    pub variant: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub beam: Option<usize>,
    pub epochs: Option<usize>,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
}

pub fn resolve(config_arg: Option<&str>, ov: &Overrides) -> Result<RunConfig, CliError> {
    resolve_with_env(config_arg, ov, std::env::var("ANESI_SEED").ok().as_deref())
}

pub fn resolve_with_env(
    config_arg: Option<&str>,
    ov: &Overrides,
    env_seed: Option<&str>,
) -> Result<RunConfig, CliError> {
    let mut cfg = match config_arg {
        Some(arg) => load_config_arg(arg)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &ov.task {
        cfg.task = v.clone();
    }
    if let Some(v) = ov.n {
        cfg.n = v;
    }
    if let Some(v) = &ov.variant {
        cfg.variant = v.clone();
    }
    if let Some(v) = ov.seed {
        cfg.seed = Some(v);
    }
    if let Some(v) = &ov.out {
        cfg.out = v.clone();
    }
    if let Some(v) = ov.beam {
        cfg.train.beam = Some(v);
    }
    if let Some(v) = ov.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = &ov.idx_images {
        cfg.idx_images = Some(v.clone());
    }
    if let Some(v) = &ov.idx_labels {
        cfg.idx_labels = Some(v.clone());
    }
    if cfg.seed.is_none() {
        if let Some(raw) = env_seed {
            let parsed = raw
                .parse::<u64>()
                .map_err(|_| CliError::Config(format!("ANESI_SEED {raw:?} is not a u64")))?;
            cfg.seed = Some(parsed);
        }
    }
    validate(&cfg)?;
    Ok(cfg)
}

/// Seed chain for commands without a config file: flag > `ANESI_SEED` > 0.
pub fn resolve_seed(flag: Option<u64>) -> Result<u64, CliError> {
    resolve_seed_with_env(flag, std::env::var("ANESI_SEED").ok().as_deref())
}

pub fn resolve_seed_with_env(flag: Option<u64>, env_seed: Option<&str>) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env_seed {
        Some(raw) => raw
            .parse::<u64>()
            .map_err(|_| CliError::Config(format!("ANESI_SEED {raw:?} is not a u64"))),
        None => Ok(0),
    }
}

pub fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.task != "add" {
        return Err(CliError::Config(format!(
            "unknown task {:?} (only \"add\" is implemented)",
            cfg.task
        )));
    }
    cfg.variant.parse::<Variant>().map_err(CliError::Config)?;
    if cfg.n == 0 || cfg.n > 15 {
        return Err(CliError::Config(format!(
            "n = {} outside the supported range 1..=15",
            cfg.n
        )));
    }
    if cfg.train_size == 0 || cfg.test_size == 0 {
        return Err(CliError::Config("train_size and test_size must be positive".into()));
    }
    if cfg.idx_images.is_some() != cfg.idx_labels.is_some() {
        return Err(CliError::Config(
            "--idx-images and --idx-labels must be given together".into(),
        ));
    }
    if cfg.train.epochs == 0 || cfg.train.batch_size == 0 || cfg.train.k == 0 {
        return Err(CliError::Config(
            "epochs, batch_size and k must be positive".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back = parse_config(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_field_is_rejected() {
        let err = parse_config("{\"bogus\": 1}").unwrap_err();
        assert!(err.to_string().contains("bogus"), "got {err}");
        let err = parse_config("{\"train\": {\"bogus\": 1}}").unwrap_err();
        assert!(err.to_string().contains("bogus"), "got {err}");
    }

    #[test]
    fn desk_preset_name_resolves() {
        let cfg = load_config_arg("desk-n4").unwrap();
        assert_eq!(cfg.n, 4);
        assert_eq!(cfg.train.k, 100);
        assert_eq!(cfg.train.hidden, vec![128, 128]);
        assert_eq!(cfg.train.epochs, 30);
        // not a preset name, so treated as a (missing) path
        assert!(load_config_arg("desk-nope").is_err());
    }

    #[test]
    fn flag_beats_file_beats_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, "{\"n\": 2, \"seed\": 7, \"variant\": \"explain\"}").unwrap();
        let arg = path.to_str().unwrap();

        let ov = Overrides {
            n: Some(4),
            ..Overrides::default()
        };
        let cfg = resolve_with_env(Some(arg), &ov, Some("99")).unwrap();
        assert_eq!(cfg.n, 4, "flag beats file");
        assert_eq!(cfg.seed, Some(7), "file beats env");
        assert_eq!(cfg.variant, "explain");

        let cfg = resolve_with_env(Some(arg), &Overrides::default(), Some("99")).unwrap();
        assert_eq!(cfg.n, 2, "file value survives without a flag");

        std::fs::write(&path, "{\"n\": 2}").unwrap();
        let cfg = resolve_with_env(Some(arg), &Overrides::default(), Some("99")).unwrap();
        assert_eq!(cfg.seed, Some(99), "env fills an unset seed");
        let cfg = resolve_with_env(Some(arg), &Overrides::default(), None).unwrap();
        assert_eq!(cfg.resolved_seed(), 0, "default seed is 0");
    }

    #[test]
    fn bad_values_are_config_errors() {
        let ov = Overrides {
            variant: Some("nonsense".into()),
            ..Overrides::default()
        };
        let err = resolve_with_env(None, &ov, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        let err = resolve_with_env(None, &Overrides::default(), Some("not-a-number")).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        let ov = Overrides {
            idx_images: Some(PathBuf::from("imgs.idx")),
            ..Overrides::default()
        };
        let err = resolve_with_env(None, &ov, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
