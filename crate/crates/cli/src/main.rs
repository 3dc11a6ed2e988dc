use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pptformer::cli_io::{self, RunConfig};
use pptformer::parser;
use pptformer::Result;

/// Parser-prompted image restoration: data synthesis, training, evaluation and inference.
#[derive(Parser, Debug)]
#[command(name = "pptformer", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key.path=VALUE` applied on top of the configuration (repeatable).
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for training, synthesis and stub parsing.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write procedural degraded/clean pairs and a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill the parser cache for every manifest row.
    Parse {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train on `data.train_manifest`.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a manifest, restoring with a checkpoint if given.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Restore a single image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Precomputed parser map; stub-parsed when absent.
        #[arg(long)]
        parser: Option<PathBuf>,
        /// Also write an input | parser | output comparison strip.
        #[arg(long)]
        figure: Option<PathBuf>,
    },
    /// Train and compare the configured ablation variants.
    Ablate {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(g.config.as_deref(), &g.overrides)?;
    if let Some(s) = g.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Synth { out } => {
            let m = cli_io::cmd_synth(&out, &cfg.synth)?;
            println!("wrote {} pairs; manifest {}", cfg.synth.n_images, m.display());
        }
        Command::Parse { manifest } => {
            let cache = parser::cache_root(&cfg.data.cache_dir);
            let s = cli_io::cmd_parse(&manifest, &cache, cfg.parser.n_segments, cfg.parser.seed)?;
            println!(
                "parser cache {}: generated {}, copied {}, skipped {}",
                cache.display(),
                s.generated,
                s.copied,
                s.skipped
            );
        }
        Command::Train { out, resume } => {
            let o = cli_io::cmd_train(&cfg, &out, resume.as_deref())?;
            if let Some(s) = o.final_stats {
                println!("step {} loss {:.6}", s.step, s.loss);
            }
            if let Some((p, ss, _)) = o.validation.as_ref().and_then(|r| r.mean()) {
                println!("val psnr {p:.4} ssim {ss:.4}");
            }
            println!("checkpoint {} ({} steps)", o.checkpoint.display(), o.steps);
        }
        Command::Eval { manifest, checkpoint, out } => {
            let r = cli_io::cmd_eval(&cfg, checkpoint.as_deref(), &manifest, out.as_deref())?;
            print!("{}", r.summary());
        }
        Command::Infer { checkpoint, input, out, parser, figure } => {
            cli_io::cmd_infer(&cfg, &checkpoint, &input, parser.as_deref(), &out, figure.as_deref())?;
            println!("wrote {}", out.display());
        }
        Command::Ablate { out } => {
            let r = cli_io::cmd_ablate(&cfg, &out)?;
            print!("{}", r.to_csv());
            println!("table {}", Path::new(&out).join("ablation.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
