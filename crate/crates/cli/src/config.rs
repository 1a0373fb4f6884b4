//! Declarative pipeline configuration (TOML). Command-line flags take
//! precedence over every value here.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub reduction: ReductionConfig,
    pub space: SpaceConfig,
    pub labels: LabelConfig,
    pub direction: DirectionConfig,
    pub sweep: SweepConfig,
    pub embed: EmbedConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReductionConfig {
    /// Preset (`all`, `unet`, `ff-attn-v`, `attn-v`) or comma list of
    /// `+`-joined substring patterns.
    pub layers: String,
    pub rank: Option<usize>,
    pub base_model: Option<String>,
    pub svd_tol: f64,
    pub svd_max_iter: usize,
    pub svd_seed: u64,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self {
            layers: "unet".into(),
            rank: None,
            base_model: None,
            svd_tol: 1e-7,
            svd_max_iter: 10_000,
            svd_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceConfig {
    /// Number of components; `min(N−1, 100)` when unset.
    pub m: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub gate: f64,
    pub positive: f64,
    pub negative: f64,
    pub quantile: f64,
    pub min_cluster_size: usize,
    pub min_samples: usize,
    pub representatives: usize,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            gate: 0.2,
            positive: 0.26,
            negative: 0.24,
            quantile: 0.2,
            min_cluster_size: 10,
            min_samples: 5,
            representatives: 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectionConfig {
    pub lambda: f64,
    pub seed: u64,
    pub holdout: f64,
    pub max_iter: usize,
}

impl Default for DirectionConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            seed: 0,
            holdout: 0.2,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub endpoint: Option<String>,
    pub cache: Option<PathBuf>,
    pub batch_size: usize,
    pub concurrency: usize,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            cache: None,
            batch_size: 32,
            concurrency: 4,
            max_attempts: 3,
            backoff_ms: 250,
            timeout_secs: 60,
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p.as_mut() {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl PipelineConfig {
    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        resolve(base, &mut cfg.paths.manifest);
        resolve(base, &mut cfg.paths.embeddings);
        resolve(base, &mut cfg.paths.output);
        resolve(base, &mut cfg.embed.cache);
        Ok(cfg)
    }

    /// Input paths named in the config that do not exist.
    pub fn missing_inputs(&self) -> Vec<String> {
        [
            ("paths.manifest", &self.paths.manifest),
            ("paths.embeddings", &self.paths.embeddings),
        ]
        .into_iter()
        .filter_map(|(name, p)| {
            p.as_ref()
                .filter(|p| !p.exists())
                .map(|p| format!("{name}: {} does not exist", p.display()))
        })
        .collect()
    }

    /// Range checks on every value. Paths are checked by `missing_inputs`
    /// since earlier pipeline steps may still have to create them.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                problems.push(msg);
            }
        };
        check(
            w2w_core::reduction::LayerSelection::parse_list(&self.reduction.layers).is_ok(),
            format!("reduction.layers: cannot parse `{}`", self.reduction.layers),
        );
        check(
            self.reduction.rank != Some(0),
            "reduction.rank must be at least 1".into(),
        );
        check(
            self.reduction.svd_tol > 0.0 && self.reduction.svd_tol < 1.0,
            "reduction.svd_tol must lie in (0, 1)".into(),
        );
        check(
            self.reduction.svd_max_iter > 0,
            "reduction.svd_max_iter must be positive".into(),
        );
        check(self.space.m != Some(0), "space.m must be at least 1".into());
        for (name, v) in [
            ("labels.gate", self.labels.gate),
            ("labels.positive", self.labels.positive),
            ("labels.negative", self.labels.negative),
        ] {
            check((-1.0..=1.0).contains(&v), format!("{name} must be a cosine in [-1, 1]"));
        }
        check(
            self.labels.quantile > 0.0 && self.labels.quantile < 0.5,
            "labels.quantile must lie in (0, 0.5)".into(),
        );
        check(
            self.labels.min_cluster_size >= 2,
            "labels.min_cluster_size must be at least 2".into(),
        );
        check(
            self.labels.min_samples >= 1,
            "labels.min_samples must be at least 1".into(),
        );
        check(
            self.labels.representatives >= 1,
            "labels.representatives must be at least 1".into(),
        );
        check(
            self.direction.lambda >= 0.0 && self.direction.lambda.is_finite(),
            "direction.lambda must be non-negative".into(),
        );
        check(
            (0.0..1.0).contains(&self.direction.holdout),
            "direction.holdout must lie in [0, 1)".into(),
        );
        check(
            self.direction.max_iter > 0,
            "direction.max_iter must be positive".into(),
        );
        check(
            self.sweep.alphas.iter().all(|a| a.is_finite()),
            "sweep.alphas must be finite".into(),
        );
        check(self.embed.batch_size >= 1, "embed.batch_size must be at least 1".into());
        check(
            self.embed.concurrency >= 1,
            "embed.concurrency must be at least 1".into(),
        );
        check(
            self.embed.max_attempts >= 1,
            "embed.max_attempts must be at least 1".into(),
        );
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::usage(problems.join("; ")))
        }
    }
}
