use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Serialize, Serializer};

use scm_accel::attention::LatentTensor;
use scm_accel::cache::SimilarityRecord;
use scm_accel::denoiser::{write_latent, SampleReport};
use scm_accel::scheduler::{AsrPoint, StepKind};

use crate::config::RunConfig;
use crate::BenchError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRow {
    pub step: usize,
    pub t: usize,
    pub mode: StepKind,
    pub bypassed_layers: usize,
    pub asr: Option<f64>,
    pub flops_attention: u64,
    pub flops_ffn: u64,
    pub flops_mixing: u64,
    pub elapsed_us: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Totals {
    pub flops_attention: u64,
    pub flops_ffn: u64,
    pub flops_mixing: u64,
    pub elapsed_us: u64,
}

/// Mean cosine logged at one compute step, across layers and blocks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepSimilarity {
    pub step: usize,
    pub mean: f64,
    pub min: f64,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DenseReference {
    pub flops_attention: u64,
    pub flops_ffn: u64,
    pub flops_mixing: u64,
    pub peak_live_elements: u64,
    pub elapsed_us: u64,
}

impl From<&SampleReport> for DenseReference {
    fn from(r: &SampleReport) -> Self {
        Self {
            flops_attention: r.counters.flops_attention,
            flops_ffn: r.counters.flops_ffn,
            flops_mixing: r.counters.flops_mixing,
            peak_live_elements: r.counters.peak_live_elements,
            elapsed_us: r.elapsed_us,
        }
    }
}

fn finite_or_inf<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    if x.is_infinite() && *x > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Drift {
    pub cosine: f64,
    /// `"inf"` when the latents are identical.
    #[serde(serialize_with = "finite_or_inf")]
    pub psnr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub steps: Vec<StepRow>,
    pub totals: Totals,
    pub peak_live_elements: u64,
    pub asr_trace: Vec<AsrPoint>,
    pub bypass_from: Option<usize>,
    pub similarity: Vec<StepSimilarity>,
    pub dense: Option<DenseReference>,
    pub drift: Option<Drift>,
    pub attention_flop_ratio: Option<f64>,
    pub speedup: Option<f64>,
}

impl RunReport {
    pub fn new(config: RunConfig, sample: &SampleReport, log: &[SimilarityRecord]) -> Self {
        let steps: Vec<StepRow> = sample
            .steps
            .iter()
            .map(|s| StepRow {
                step: s.step,
                t: s.t,
                mode: s.kind,
                bypassed_layers: s.bypassed_layers,
                asr: s.asr,
                flops_attention: s.flops_attention,
                flops_ffn: s.flops_ffn,
                flops_mixing: s.flops_mixing,
                elapsed_us: s.elapsed_us,
            })
            .collect();
        let totals = steps.iter().fold(Totals::default(), |mut t, s| {
            t.flops_attention += s.flops_attention;
            t.flops_ffn += s.flops_ffn;
            t.flops_mixing += s.flops_mixing;
            t
        });
        let totals = Totals {
            elapsed_us: sample.elapsed_us,
            ..totals
        };
        Self {
            config,
            steps,
            totals,
            peak_live_elements: sample.counters.peak_live_elements,
            asr_trace: sample.scheduler.asr_history.clone(),
            bypass_from: sample.scheduler.bypass_from,
            similarity: similarity_by_step(log),
            dense: None,
            drift: None,
            attention_flop_ratio: None,
            speedup: None,
        }
    }

    pub fn attach_dense(&mut self, dense: DenseReference, drift: Drift) {
        self.attention_flop_ratio = Some(self.totals.flops_attention as f64 / dense.flops_attention.max(1) as f64);
        self.speedup = Some(dense.elapsed_us as f64 / self.totals.elapsed_us.max(1) as f64);
        self.dense = Some(dense);
        self.drift = Some(drift);
    }

    pub fn to_json(&self) -> Result<String, BenchError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,t,mode,bypassed_layers,asr,flops_attention,flops_ffn,flops_mixing,elapsed_us\n");
        for s in &self.steps {
            let asr = s.asr.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                s.step,
                s.t,
                s.mode.as_str(),
                s.bypassed_layers,
                asr,
                s.flops_attention,
                s.flops_ffn,
                s.flops_mixing,
                s.elapsed_us
            ));
        }
        out
    }
}

pub fn similarity_by_step(log: &[SimilarityRecord]) -> Vec<StepSimilarity> {
    let mut by_step: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in log {
        by_step.entry(r.step).or_default().push(r.cosine);
    }
    by_step
        .into_iter()
        .map(|(step, v)| StepSimilarity {
            step,
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            records: v.len(),
        })
        .collect()
}

/// Drops wall-clock fields (`*_us`, `speedup`) so two runs can be compared.
pub fn strip_timing(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.retain(|k, _| !k.ends_with("_us") && k != "speedup");
            map.values_mut().for_each(strip_timing);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Files written by [`emit_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct Emitted {
    pub json: PathBuf,
    pub steps_csv: PathBuf,
    pub similarity_csv: Option<PathBuf>,
    pub latent: Option<PathBuf>,
}

/// Writes `<path>`, `<stem>.steps.csv` and, when given, the similarity
/// log and final latent next to it.
pub fn emit_report(
    report: &RunReport,
    path: &Path,
    similarity: Option<&[SimilarityRecord]>,
    latent: Option<&LatentTensor>,
) -> Result<Emitted, BenchError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, report.to_json()?)?;
    let steps_csv = sibling(path, "steps.csv");
    fs::write(&steps_csv, report.steps_csv())?;
    let similarity_csv = match similarity {
        Some(log) => {
            let p = sibling(path, "similarity.csv");
            let mut f = fs::File::create(&p)?;
            writeln!(f, "step,layer,kind,cosine")?;
            for r in log {
                writeln!(f, "{},{},{},{}", r.step, r.layer, r.kind.as_str(), r.cosine)?;
            }
            Some(p)
        }
        None => None,
    };
    let latent = match latent {
        Some(z) => {
            let p = sibling(path, "latent.bin");
            write_latent(z, std::io::BufWriter::new(fs::File::create(&p)?))?;
            Some(p)
        }
        None => None,
    };
    Ok(Emitted {
        json: path.to_path_buf(),
        steps_csv,
        similarity_csv,
        latent,
    })
}
