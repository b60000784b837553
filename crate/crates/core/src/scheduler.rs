//! Per-step mode selection and adaptive bypass of intermediate chains.
//!
//! After `warmup` fully dense steps the scheduler alternates two step kinds
//! (by default prune on even steps, reuse on odd). At every step boundary
//! the average similarity rate over the last `delta_t` steps of logged
//! cosines is compared against `alpha`; once it reaches the threshold every
//! layer except the first and last skips its chain for the rest of the run.

use serde::{Deserialize, Serialize};

use crate::attention::LatentTensor;
use crate::cache::{RollingCache, SimilarityRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    /// Full chain, cache refreshed.
    Dense,
    /// Dense spatial block, pruned camera/motion refilled from the cache.
    Prune,
    /// All three attention outputs read from the cache.
    Reuse,
}

impl StepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::Dense => "dense",
            StepKind::Prune => "prune",
            StepKind::Reuse => "reuse",
        }
    }

    /// Whether the step computes fresh attention (and so logs similarities).
    pub fn computes(self) -> bool {
        self != StepKind::Reuse
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepMode {
    pub kind: StepKind,
    /// Layers whose chain is skipped this step.
    pub bypass: Vec<usize>,
}

impl StepMode {
    pub fn is_bypassed(&self, layer: usize) -> bool {
        self.bypass.binary_search(&layer).is_ok()
    }
}

/// Every layer except the first and last.
pub fn bypass_set(layers: usize) -> Vec<usize> {
    (1..layers.saturating_sub(1)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub warmup: usize,
    pub delta_t: usize,
    pub alpha: f64,
    pub even: StepKind,
    pub odd: StepKind,
    pub bypass: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            warmup: 2,
            delta_t: 3,
            alpha: 0.9,
            even: StepKind::Prune,
            odd: StepKind::Reuse,
            bypass: true,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::Config(format!("alpha must be positive and finite, got {}", self.alpha)));
        }
        // A reuse or prune step reads what the previous step stored, so the
        // very first step cannot be either.
        if self.warmup == 0 && (self.even != StepKind::Dense) {
            return Err(Error::Config("warmup 0 needs a dense step at step 0".into()));
        }
        if self.even == StepKind::Reuse && self.odd == StepKind::Reuse {
            return Err(Error::Config("reuse steps need a compute step in between".into()));
        }
        Ok(())
    }

    pub fn kind_at(&self, step: usize) -> StepKind {
        if step < self.warmup {
            StepKind::Dense
        } else if step.is_multiple_of(2) {
            self.even
        } else {
            self.odd
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AsrPoint {
    pub step: usize,
    pub asr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModePoint {
    pub step: usize,
    pub kind: StepKind,
    pub bypassed_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchedulerState {
    pub config: SchedulerConfig,
    pub bypass_active: bool,
    /// Step from which bypass applies, once triggered.
    pub bypass_from: Option<usize>,
    pub asr_history: Vec<AsrPoint>,
    pub mode_trace: Vec<ModePoint>,
}

impl SchedulerState {
    pub fn new(config: SchedulerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            bypass_active: false,
            bypass_from: None,
            asr_history: Vec::new(),
            mode_trace: Vec::new(),
        })
    }

    /// Mode for `step` given the similarity rate of the window ending at
    /// the latest compute step (`None` while nothing has been logged).
    pub fn select_mode(&mut self, step: usize, asr: Option<f64>, layers: usize) -> StepMode {
        if let Some(value) = asr {
            self.asr_history.push(AsrPoint { step, asr: value });
            if self.config.bypass && step >= self.config.warmup && !self.bypass_active && value >= self.config.alpha {
                self.bypass_active = true;
                self.bypass_from = Some(step);
            }
        }
        let kind = self.config.kind_at(step);
        let bypass = if self.bypass_active && step >= self.config.warmup {
            bypass_set(layers)
        } else {
            Vec::new()
        };
        self.mode_trace.push(ModePoint {
            step,
            kind,
            bypassed_layers: bypass.len(),
        });
        StepMode { kind, bypass }
    }
}

/// Mean cosine over records from steps `[step - delta_t, step]`, skipping
/// the listed layers. `None` when the window is empty.
pub fn asr_window(records: &[SimilarityRecord], step: usize, delta_t: usize, excluded: &[usize]) -> Option<f64> {
    let lo = step.saturating_sub(delta_t);
    let (sum, count) = records
        .iter()
        .filter(|r| (lo..=step).contains(&r.step) && !excluded.contains(&r.layer))
        .fold((0.0, 0usize), |(s, n), r| (s + r.cosine, n + 1));
    (count > 0).then(|| (sum / count as f64).clamp(-1.0, 1.0))
}

/// Average similarity rate of the cache's log for the window ending at `step`.
pub fn compute_asr(cache: &RollingCache, step: usize, delta_t: usize) -> Option<f64> {
    asr_window(cache.similarity_log(), step, delta_t, &[])
}

/// What a layer does this step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerPath<'a> {
    /// Chain skipped; the input continues unchanged.
    PassThrough(&'a LatentTensor),
    Run(StepKind),
}

pub fn apply_bypass<'a>(layer: usize, mode: &StepMode, z: &'a LatentTensor) -> LayerPath<'a> {
    if mode.is_bypassed(layer) {
        LayerPath::PassThrough(z)
    } else {
        LayerPath::Run(mode.kind)
    }
}
