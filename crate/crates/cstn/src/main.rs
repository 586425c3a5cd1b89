use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use cstn::config::{thread_count, RunConfig, PROTOCOLS};
use cstn::error::{exit, Error, Result};
use cstn::{checkpoint, gradcheck_suite, pipeline, trainer};
use cstn_core::model::CstnWeights;

/// Multi-echo MRI enhancement and SMWI reconstruction.
#[derive(Parser)]
#[command(name = "cstn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus `key=value` overrides.
#[derive(clap::Args)]
struct ConfigArgs {
    /// `key=value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.total_steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate seeded multi-echo phantoms with ground-truth maps.
    Phantom {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 384)]
        size: usize,
        /// Echo times in ms, comma separated.
        #[arg(long, default_value = "14,27,40")]
        tes: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Truncate k-space to `target`×`target` and reconstruct.
    Downsample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Enhance a low-resolution volume with a checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct the SMWI image of a volume into a `.cst` file.
    Smwi {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on generated phantoms; writes a run directory under `--out-dir`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs")]
        out_dir: PathBuf,
    },
    /// Score a checkpoint and the bicubic baseline on a directory of volumes.
    Eval {
        /// Omit to score the baseline alone.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Truncation size; repeat for several (default: 192 and 256).
        #[arg(long)]
        protocol: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
    /// Write a 2-D `.cst` tensor (or one slice of a 3-D one) as PNG.
    ExportPng {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Write the seeded initial checkpoint, which is the identity network.
    Init {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_tes(s: &str) -> Result<Vec<f64>> {
    let tes: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Usage(format!("bad echo time {t:?}"))))
        .collect::<Result<_>>()?;
    if tes.is_empty() || tes.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::Usage(format!("bad echo times {s:?}")));
    }
    Ok(tes)
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Phantom { seed, count, size, tes, out } => {
            for dir in pipeline::phantoms(seed, count, size, &parse_tes(&tes)?, &out)? {
                println!("{}", dir.display());
            }
        }
        Command::Downsample { input, target, out } => {
            pipeline::downsample(&input, target, &out)?;
        }
        Command::Infer { ckpt, input, out } => {
            pipeline::infer(&ckpt, &input, &out)?;
        }
        Command::Smwi { input, out, cfg } => {
            pipeline::smwi(&input, &cfg.load()?.smwi, &out)?;
        }
        Command::Train { cfg, out_dir } => {
            let cfg = cfg.load()?;
            let summary = trainer::run(&cfg, &out_dir, thread_count())?;
            println!("run directory: {}", summary.dir.display());
            println!(
                "best validation loss {} at step {}",
                summary.outcome.best_val, summary.outcome.best_step
            );
        }
        Command::Eval { ckpt, data, protocol, out, cfg } => {
            let protocols = if protocol.is_empty() { PROTOCOLS.to_vec() } else { protocol };
            let reports = pipeline::eval(ckpt.as_deref(), &data, &protocols, &cfg.load()?, thread_count(), &out)?;
            print!("{}", cstn::report::text(&reports));
        }
        Command::Gradcheck => {
            let results = gradcheck_suite::run(|r| {
                println!(
                    "{:<34} max rel err {:.3e}  {}",
                    r.name,
                    r.max_rel_error,
                    if r.passed { "ok" } else { "FAIL" }
                )
            })?;
            let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
            if !failed.is_empty() {
                return Err(Error::GradCheck(failed.join(", ")));
            }
        }
        Command::ExportPng { input, out, index } => {
            let w = pipeline::export_png(&input, index, &out)?;
            println!("window min={} max={}", w.min, w.max);
        }
        Command::Init { cfg, out } => {
            let cfg = cfg.load()?;
            checkpoint::save(&out, &cfg.model, &CstnWeights::init(&cfg.model, cfg.train.seed)?)?;
        }
    }
    Ok(exit::OK)
}

/// Help footer listing settings whose defaults are local choices.
fn defaults_note() -> String {
    let mut s = String::from("Defaults not from paper (override with --set key=value):\n");
    for line in RunConfig::default().to_text().lines() {
        if let Some(kv) = line.strip_suffix("  # not from paper") {
            s.push_str("  ");
            s.push_str(kv);
            s.push('\n');
        }
    }
    s
}

fn main() -> ExitCode {
    let note = defaults_note();
    let command = Cli::command()
        .after_help(note.clone())
        .mut_subcommands(|sc| sc.after_help(note.clone()));
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
