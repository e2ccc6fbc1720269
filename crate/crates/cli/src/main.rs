use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crossvis::cli::{self, Protocol, RunConfig, Split};

#[derive(Parser)]
#[command(name = "crossvis", version, about = "Video instance segmentation with crossover learning")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (the corpus root for `generate`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.interval=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training and validation corpora.
    Generate,
    /// Train, logging one JSON row per epoch.
    Train,
    /// Score a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
    },
    /// Track one clip and dump its predictions.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: String,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Also write per-frame mask overlays.
        #[arg(long)]
        overlays: bool,
    },
    /// Run an ablation protocol: components, t_sweep or embedding_variants.
    Ablate {
        protocol: Protocol,
        /// Seeds per arm (defaults to `ablate.seeds`).
        #[arg(long)]
        seeds: Option<usize>,
    },
}

fn load_config(common: &Common) -> crossvis::Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.sets)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> crossvis::Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let out = cli.common.out.as_deref();
    let set_out = |cfg: &mut RunConfig, p: Option<&Path>| {
        if let Some(p) = p {
            cfg.out = p.to_path_buf();
        }
    };
    match cli.command {
        Command::Generate => {
            if let Some(p) = out {
                cfg.data.root = p.to_path_buf();
            }
            let [train, val] = cli::cmd_generate(&cfg)?;
            println!(
                "wrote {} train clips ({} identities) and {} val clips ({} identities) to {}",
                train.num_clips,
                train.total_identities,
                val.num_clips,
                val.total_identities,
                cfg.data.root.display()
            );
        }
        Command::Train => {
            set_out(&mut cfg, out);
            let report = cli::cmd_train(&cfg)?;
            if let Some(last) = report.final_epoch {
                println!(
                    "epoch {}: total {:.6} (det {:.4}, seg {:.4}, cross {:.4}, id {:.4})",
                    last.epoch + 1,
                    last.total,
                    last.det,
                    last.seg,
                    last.cross,
                    last.id
                );
            }
            println!("checkpoint: {}", report.checkpoint.display());
        }
        Command::Eval { checkpoint, split } => {
            set_out(&mut cfg, out);
            let s = cli::cmd_eval(&cfg, &checkpoint, split)?;
            println!(
                "AP {:.1}  AP50 {:.1}  AP75 {:.1}  AR1 {:.1}  AR10 {:.1}",
                100.0 * s.ap,
                100.0 * s.ap50,
                100.0 * s.ap75,
                100.0 * s.ar1,
                100.0 * s.ar10
            );
        }
        Command::Infer {
            checkpoint,
            clip,
            split,
            overlays,
        } => {
            set_out(&mut cfg, out);
            let tracks = cli::cmd_infer(&cfg, &checkpoint, split, &clip, overlays)?;
            println!("{} tracks -> {}", tracks.len(), cfg.out.join("predictions.json").display());
        }
        Command::Ablate { protocol, seeds } => {
            set_out(&mut cfg, out);
            if let Some(k) = seeds {
                cfg.ablate.seeds = k;
            }
            let report = cli::cmd_ablate(&cfg, protocol)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", cli::render_table(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
