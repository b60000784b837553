//! Run configuration: defaults, JSON config files and command-line flags.
//!
//! Both the file and the flags deserialize into a [`ConfigPatch`] of
//! optional fields; patches are applied over the defaults in the order
//! file, then flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use scm_accel::attention::LatentDims;
use scm_accel::denoiser::AccelConfig;
use scm_accel::pruning::{PruneSettings, RatioRule, Refill};
use scm_accel::scheduler::{SchedulerConfig, StepKind};

use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Dense,
    Turbo,
    CacheOnly,
    PruneOnly,
    BypassOnly,
    RandomPrune,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Dense => "dense",
            Mode::Turbo => "turbo",
            Mode::CacheOnly => "cache-only",
            Mode::PruneOnly => "prune-only",
            Mode::BypassOnly => "bypass-only",
            Mode::RandomPrune => "random-prune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub frames: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub heads: usize,
    pub layers: usize,
    pub steps: usize,
    pub seed: u64,
    pub mode: Mode,
    pub topk_ratio: f64,
    pub per_axis_ratio: bool,
    pub zero_refill: bool,
    pub delta_t: usize,
    pub alpha_threshold: f64,
    pub warmup: usize,
    pub elevation: f64,
    pub compare_dense: bool,
    pub similarity_log: bool,
    pub save_latent: bool,
    #[serde(skip)]
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            frames: 5,
            views: 8,
            height: 16,
            width: 16,
            channels: 64,
            heads: 2,
            layers: 6,
            steps: 20,
            seed: 0,
            mode: Mode::Turbo,
            topk_ratio: 0.2,
            per_axis_ratio: false,
            zero_refill: false,
            delta_t: 3,
            alpha_threshold: 0.9,
            warmup: 2,
            elevation: 30.0,
            compare_dense: false,
            similarity_log: false,
            save_latent: false,
            output: None,
        }
    }
}

/// Optional overrides, shared by config files and command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, Args)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct ConfigPatch {
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub topk_ratio: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub per_axis_ratio: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub zero_refill: Option<bool>,
    #[arg(long)]
    pub delta_t: Option<usize>,
    #[arg(long, alias = "alpha")]
    pub alpha_threshold: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub elevation: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub compare_dense: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub similarity_log: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub save_latent: Option<bool>,
    /// Report path (`.json`); CSV siblings are written next to it.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

macro_rules! apply_fields {
    ($cfg:expr, $patch:expr, $($field:ident),*) => {
        $( if let Some(v) = $patch.$field.clone() { $cfg.$field = v; } )*
    };
}

impl RunConfig {
    pub fn apply(&mut self, patch: &ConfigPatch) {
        apply_fields!(
            self, patch, frames, views, height, width, channels, heads, layers, steps, seed, mode, topk_ratio,
            per_axis_ratio, zero_refill, delta_t, alpha_threshold, warmup, elevation, compare_dense,
            similarity_log, save_latent
        );
        if let Some(out) = &patch.output {
            self.output = Some(out.clone());
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let usage = |key: &str, msg: String| Err(BenchError::Usage { key: key.into(), msg });
        for (key, v) in [
            ("frames", self.frames),
            ("views", self.views),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("heads", self.heads),
            ("layers", self.layers),
            ("steps", self.steps),
        ] {
            if v == 0 {
                return usage(key, "must be at least 1".into());
            }
        }
        if !self.channels.is_multiple_of(self.heads) {
            return usage("heads", format!("{} does not divide {} channels", self.heads, self.channels));
        }
        if !(self.topk_ratio > 0.0 && self.topk_ratio <= 1.0) {
            return usage("topk_ratio", format!("{} is outside (0, 1]", self.topk_ratio));
        }
        if !(self.alpha_threshold > 0.0 && self.alpha_threshold.is_finite()) {
            return usage("alpha_threshold", format!("{} must be positive", self.alpha_threshold));
        }
        if !self.elevation.is_finite() {
            return usage("elevation", "must be finite".into());
        }
        if self.mode != Mode::Dense && self.warmup == 0 {
            return usage("warmup", format!("{} mode needs at least one dense step first", self.mode.as_str()));
        }
        Ok(())
    }

    pub fn dims(&self) -> LatentDims {
        LatentDims::new(self.frames, self.views, self.height, self.width, self.channels)
    }

    pub fn scheduler(&self) -> SchedulerConfig {
        let (even, odd, bypass) = match self.mode {
            Mode::Dense => (StepKind::Dense, StepKind::Dense, false),
            Mode::Turbo | Mode::RandomPrune => (StepKind::Prune, StepKind::Reuse, true),
            Mode::CacheOnly => (StepKind::Dense, StepKind::Reuse, false),
            Mode::PruneOnly => (StepKind::Prune, StepKind::Dense, false),
            Mode::BypassOnly => (StepKind::Dense, StepKind::Dense, true),
        };
        SchedulerConfig {
            warmup: self.warmup,
            delta_t: self.delta_t,
            alpha: self.alpha_threshold,
            even,
            odd,
            bypass,
        }
    }

    pub fn accel(&self) -> AccelConfig {
        AccelConfig {
            caching: self.mode != Mode::Dense,
            prune: PruneSettings {
                ratio: self.topk_ratio,
                rule: if self.per_axis_ratio { RatioRule::PerAxis } else { RatioRule::Tokens },
                refill: if self.zero_refill { Refill::Zero } else { Refill::Cache },
            },
            random_selection: self.mode == Mode::RandomPrune,
        }
    }

    /// Same run in dense mode, used as the drift and speed reference.
    pub fn dense_reference(&self) -> RunConfig {
        RunConfig {
            mode: Mode::Dense,
            compare_dense: false,
            ..self.clone()
        }
    }
}

pub fn read_patch(path: &Path) -> Result<ConfigPatch, BenchError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| BenchError::Usage {
        key: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Defaults, then the file (if any), then flags.
pub fn parse_config(flags: &ConfigPatch, file: Option<&Path>) -> Result<RunConfig, BenchError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        cfg.apply(&read_patch(path)?);
    }
    cfg.apply(flags);
    cfg.validate()?;
    Ok(cfg)
}

/// Patch setting one field from its textual value, e.g. for sweeps.
/// Names may use dashes or underscores.
pub fn patch_for(param: &str, value: &str) -> Result<ConfigPatch, BenchError> {
    let key = param.replace('-', "_");
    let parsed = serde_json::from_str::<serde_json::Value>(value).unwrap_or_else(|_| serde_json::Value::String(value.into()));
    let mut obj = serde_json::Map::new();
    obj.insert(key.clone(), parsed);
    serde_json::from_value(serde_json::Value::Object(obj)).map_err(|e| BenchError::Usage { key, msg: e.to_string() })
}
