use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scm_bench::config::{parse_config, ConfigPatch, Mode, RunConfig};
use scm_bench::{emit_report, run_benchmark, run_sweep, BenchError, RunOutcome};

/// Dense vs. accelerated SCM denoising benchmarks.
#[derive(Parser)]
#[command(name = "scm-bench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigPatch,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single configuration.
    Run(Common),
    /// Run once per value of one parameter.
    Sweep {
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Accelerated run plus the dense reference at the same seed.
    Compare(Common),
}

fn output_path(cfg: &RunConfig) -> PathBuf {
    cfg.output.clone().unwrap_or_else(|| {
        let dir = std::env::var_os("SCM_BENCH_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("bench-out"));
        dir.join(format!("{}-seed{}.json", cfg.mode.as_str(), cfg.seed))
    })
}

fn write(cfg: &RunConfig, outcome: &RunOutcome) -> Result<(), BenchError> {
    let path = output_path(cfg);
    let similarity = cfg.similarity_log.then_some(outcome.similarity.as_slice());
    let latent = cfg.save_latent.then_some(&outcome.latent);
    emit_report(&outcome.report, &path, similarity, latent)?;
    let r = &outcome.report;
    let mut line = format!(
        "{} seed={} attention_flops={} peak_live={} time={:.3}s",
        cfg.mode.as_str(),
        cfg.seed,
        r.totals.flops_attention,
        r.peak_live_elements,
        r.totals.elapsed_us as f64 / 1e6
    );
    if let (Some(ratio), Some(speedup), Some(drift)) = (r.attention_flop_ratio, r.speedup, &r.drift) {
        line += &format!(
            " flop_ratio={ratio:.4} speedup={speedup:.2}x cosine={:.6} psnr={:.2}dB",
            drift.cosine, drift.psnr_db
        );
    }
    println!("{line} -> {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(c) => parse_config(&c.flags, c.config.as_deref()).and_then(|cfg| {
            let outcome = run_benchmark(&cfg)?;
            write(&cfg, &outcome)
        }),
        Command::Compare(mut c) => {
            c.flags.compare_dense = Some(true);
            if c.flags.mode == Some(Mode::Dense) {
                eprintln!("note: comparing dense against itself");
            }
            parse_config(&c.flags, c.config.as_deref()).and_then(|cfg| {
                let outcome = run_benchmark(&cfg)?;
                write(&cfg, &outcome)
            })
        }
        Command::Sweep { param, values, common } => parse_config(&common.flags, common.config.as_deref()).and_then(|mut base| {
            base.output = Some(output_path(&base));
            run_sweep(&base, &param, &values)?
                .iter()
                .try_for_each(|(cfg, outcome)| write(cfg, outcome))
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("scm-bench: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
