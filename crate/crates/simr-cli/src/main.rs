//! `simr`: generate synthetic image/report data, train the cross-attention
//! alignment model, evaluate it zero-shot, sweep ablation grids, and export
//! attention maps. One command per process; every run is reproducible from
//! (config, seed) byte for byte, timestamps excepted (those live in run.log).

mod ablate;
mod config;
mod eval_cmd;
mod export_attn;
mod gen_data;
mod model_desc;
mod runlog;
mod train_cmd;

use clap::{Args, Parser, Subcommand};
use config::{resolve, Overrides, RunConfig};
use simr::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "simr", version, about = "cross-attention image-text alignment workbench")]
struct Cli {
    /// JSON config file; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Run-config fields exposed as flags. Precedence: flag > config file >
/// built-in default.
#[derive(Args, Debug, Default)]
struct ConfigFlags {
    /// dataset directory
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// artifact directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// shared feature width
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// transformer blocks per encoder
    #[arg(long)]
    n_enc: Option<usize>,
    /// feed-forward width (default 2*dim)
    #[arg(long)]
    d_ff: Option<usize>,
    /// similarity head: cos_proj_proj, cos_proj_orig, linear or mlp
    #[arg(long)]
    head_kind: Option<String>,
    /// cross-attention keys/values: global, local or both
    #[arg(long)]
    kv_choice: Option<String>,
    /// train on prompt-aligned rewrites (true/false)
    #[arg(long)]
    prompt_align: Option<bool>,
    /// zero-shot scoring direction: t2i, i2t or avg
    #[arg(long)]
    direction: Option<String>,
    /// optimizer: sgd or adam
    #[arg(long)]
    opt: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// rewrite service URL (also read from SIMR_REWRITER_ENDPOINT)
    #[arg(long)]
    rewriter_endpoint: Option<String>,
}

impl ConfigFlags {
    fn overrides(self) -> Overrides {
        Overrides {
            dataset: self.dataset,
            out_dir: self.out,
            d: self.dim,
            heads: self.heads,
            n_enc: self.n_enc,
            d_ff: self.d_ff,
            head_kind: self.head_kind,
            kv_choice: self.kv_choice,
            prompt_align: self.prompt_align,
            direction: self.direction,
            opt: self.opt,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            rewriter_endpoint: self.rewriter_endpoint,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic paired dataset
    GenData(gen_data::GenArgs),
    /// Train an alignment model on a dataset
    Train {
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Score a checkpoint zero-shot with a prompt template
    Eval {
        #[command(flatten)]
        flags: ConfigFlags,
        #[command(flatten)]
        args: eval_cmd::EvalArgs,
    },
    /// Train and evaluate a grid of model variants
    Ablate {
        #[command(flatten)]
        flags: ConfigFlags,
        #[command(flatten)]
        args: ablate::AblateArgs,
    },
    /// Export attention maps for one concept as PGM images
    ExportAttn {
        #[command(flatten)]
        flags: ConfigFlags,
        #[command(flatten)]
        args: export_attn::ExportArgs,
    },
}

fn effective(config: Option<&PathBuf>, flags: ConfigFlags) -> simr::Result<RunConfig> {
    resolve(config.map(|p| p.as_path()), flags.overrides())
}

fn dispatch(cli: Cli) -> simr::Result<()> {
    match cli.cmd {
        Cmd::GenData(args) => gen_data::run(&args),
        Cmd::Train { flags } => train_cmd::run(&effective(cli.config.as_ref(), flags)?),
        Cmd::Eval { flags, args } => eval_cmd::run(&effective(cli.config.as_ref(), flags)?, &args),
        Cmd::Ablate { flags, args } => ablate::run(&effective(cli.config.as_ref(), flags)?, &args),
        Cmd::ExportAttn { flags, args } => {
            export_attn::run(&effective(cli.config.as_ref(), flags)?, &args)
        }
    }
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Input(_) | Error::Format { .. } | Error::Io(_) => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
