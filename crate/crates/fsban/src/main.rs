use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fsban::commands::{
    ablate_cmd, analyze_cmd, evaluate_cmd, gen_universe_cmd, reproduce_cmd, train_cmd, AblateOptions, ModelInputs,
    TrainOptions,
};
use fsban::core::train::Mode;
use fsban::results::{parse_split, resolve_out, SUMMARY_FILE};
use fsban::{CliError, CliResult, ExperimentConfig};

/// Episodic few-shot distillation lab: synthetic domains, BAN and FS-BAN
/// training, evaluation and diagnostics.
#[derive(Parser)]
#[command(name = "fsban", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the top-level `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a universe file generated from the `[universe]` section.
    GenUniverse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train in one of the modes gen0, ban, fsban, fsban-lite.
    Train {
        #[command(flatten)]
        common: Common,
        /// Universe file; generated from the config when omitted.
        #[arg(long)]
        universe: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Gen-0 checkpoint to distill from (ban mode).
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Validate the config and inputs, then exit without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Few-shot accuracy of a checkpoint.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Class separation, probes, LDA projection, noise sweep and TSD.
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// All eight on/off combinations of MR, MM and MCT.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        universe: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Re-run a results file from its embedded config and compare outputs.
    Reproduce {
        /// A results file or the directory holding it.
        results: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    universe: Option<PathBuf>,
    /// A single domain; all domains (evaluate) or the held-out one (analyze)
    /// when omitted.
    #[arg(long)]
    domain: Option<usize>,
    #[arg(long, default_value = "novel", value_parser = parse_split_arg)]
    split: fsban::core::data::Split,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| format!("unknown mode `{s}` (expected gen0, ban, fsban or fsban-lite)"))
}

fn parse_split_arg(s: &str) -> Result<fsban::core::data::Split, String> {
    parse_split(s).ok_or_else(|| format!("unknown split `{s}` (expected base, valid or novel)"))
}

fn load_config(common: &Common) -> CliResult<ExperimentConfig> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn report(dir: &Path) {
    println!("wrote {}", dir.display());
    if let Ok(s) = std::fs::read_to_string(dir.join(SUMMARY_FILE)) {
        print!("{s}");
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenUniverse { common, out } => {
            let sha = gen_universe_cmd(&load_config(&common)?, &out)?;
            println!("wrote {} (sha256 {sha})", out.display());
        }
        Command::Train { common, universe, mode, teacher, out, dry_run } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = mode {
                cfg = cfg.with_mode(m);
            }
            let out = resolve_out(out.as_deref(), &cfg, &format!("{}-seed{}", cfg.mode.name(), cfg.seed));
            let opts = TrainOptions { universe: universe.as_deref(), teacher: teacher.as_deref(), out: &out, dry_run };
            match train_cmd(cfg, &opts)? {
                Some(dir) => report(&dir),
                None => println!("config ok"),
            }
        }
        Command::Evaluate { model } => {
            let cfg = load_config(&model.common)?;
            let out = resolve_out(model.out.as_deref(), &cfg, &format!("evaluate-seed{}", cfg.seed));
            report(&evaluate_cmd(cfg, &inputs(&model, &out))?);
        }
        Command::Analyze { model } => {
            let cfg = load_config(&model.common)?;
            let out = resolve_out(model.out.as_deref(), &cfg, &format!("analyze-seed{}", cfg.seed));
            report(&analyze_cmd(cfg, &inputs(&model, &out))?);
        }
        Command::Ablate { common, universe, out, parallel } => {
            let cfg = load_config(&common)?;
            let out = resolve_out(out.as_deref(), &cfg, &format!("ablate-seed{}", cfg.seed));
            report(&ablate_cmd(cfg, &AblateOptions { universe: universe.as_deref(), out: &out, parallel })?);
        }
        Command::Reproduce { results, out } => {
            let out = match out {
                Some(o) => o,
                None => {
                    let base = if results.is_dir() { results.clone() } else { results.parent().map_or(PathBuf::from("."), Path::to_path_buf) };
                    let name = base.file_name().map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned());
                    base.with_file_name(format!("{name}-reproduced"))
                }
            };
            let r = reproduce_cmd(&results, &out)?;
            if r.identical() {
                println!("identical: {} reproduces {}", r.replay.display(), r.original.display());
            } else {
                return Err(CliError::runtime(format!(
                    "{} differs from {} in: {}",
                    r.replay.display(),
                    r.original.display(),
                    r.differences.join(", ")
                )));
            }
        }
    }
    Ok(())
}

fn inputs<'a>(m: &'a ModelArgs, out: &'a Path) -> ModelInputs<'a> {
    ModelInputs { checkpoint: &m.checkpoint, universe: m.universe.as_deref(), domain: m.domain, split: m.split, out }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fsban: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
