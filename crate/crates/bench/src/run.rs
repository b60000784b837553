use std::path::{Path, PathBuf};

use scm_accel::attention::LatentTensor;
use scm_accel::cache::SimilarityRecord;
use scm_accel::cost::CostCounters;
use scm_accel::denoiser::{build_toy_model, sample, synth_priors, CameraTrajectory, DiffusionSchedule, RunState, SampleReport};
use scm_accel::rng::Rng;
use scm_accel::tensor::{cosine, psnr};

use crate::config::{patch_for, RunConfig};
use crate::report::{DenseReference, Drift, RunReport};
use crate::BenchError;

// Independent streams derived from the run seed.
const PRIOR_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const SELECTION_STREAM: u64 = 3;

pub struct RunOutcome {
    pub report: RunReport,
    pub latent: LatentTensor,
    pub similarity: Vec<SimilarityRecord>,
}

struct Sampled {
    latent: LatentTensor,
    report: SampleReport,
    similarity: Vec<SimilarityRecord>,
}

fn execute(cfg: &RunConfig) -> Result<Sampled, BenchError> {
    cfg.validate()?;
    let dims = cfg.dims();
    let model = build_toy_model(dims, cfg.heads, cfg.layers, cfg.seed)?;
    let trajectory = CameraTrajectory::orbit(cfg.views, cfg.elevation);
    let priors = synth_priors(dims, &trajectory, &mut Rng::new(cfg.seed.wrapping_add(PRIOR_STREAM)))?;
    let schedule = DiffusionSchedule::cosine(cfg.steps)?;
    let mut state = RunState::new(cfg.accel(), cfg.layers, cfg.seed.wrapping_add(SELECTION_STREAM));
    let mut noise = Rng::new(cfg.seed.wrapping_add(NOISE_STREAM));
    let mut cost = CostCounters::new();
    let (latent, report) = sample(&model, &priors, &schedule, cfg.scheduler(), &mut state, &mut noise, &mut cost)?;
    Ok(Sampled {
        latent,
        report,
        similarity: state.cache.similarity_log().to_vec(),
    })
}

/// Runs the configured mode, plus the dense reference when requested.
pub fn run_benchmark(cfg: &RunConfig) -> Result<RunOutcome, BenchError> {
    let run = execute(cfg)?;
    let mut report = RunReport::new(cfg.clone(), &run.report, &run.similarity);
    if cfg.compare_dense {
        let dense = execute(&cfg.dense_reference())?;
        let (a, b) = (dense.latent.tensor(), run.latent.tensor());
        let cos = match cosine(a, b) {
            Ok(c) => c,
            Err(scm_accel::Error::Degenerate(_)) => 0.0,
            Err(e) => return Err(e.into()),
        };
        report.attach_dense(
            DenseReference::from(&dense.report),
            Drift {
                cosine: cos,
                psnr_db: psnr(a, b)?,
            },
        );
    }
    Ok(RunOutcome {
        report,
        latent: run.latent,
        similarity: run.similarity,
    })
}

fn sweep_path(base: &Path, param: &str, value: &str) -> PathBuf {
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let safe: String = value.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect();
    base.with_file_name(format!("{stem}-{param}-{safe}.json"))
}

/// One run per value of `param`; each point's output path is derived
/// from the base config's output path.
pub fn run_sweep(base: &RunConfig, param: &str, values: &[String]) -> Result<Vec<(RunConfig, RunOutcome)>, BenchError> {
    let mut points = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = base.clone();
        cfg.apply(&patch_for(param, value)?);
        cfg.validate()?;
        cfg.output = base.output.as_ref().map(|p| sweep_path(p, param, value));
        let outcome = run_benchmark(&cfg)?;
        points.push((cfg, outcome));
    }
    Ok(points)
}
