//! `gen-data`: synthesize a paired image/report dataset on disk.

use crate::runlog;
use clap::Args;
use simr::data::{generate, save_dataset, GenConfig};
use simr::Result;
use std::path::PathBuf;

#[derive(Args, Debug)]
pub struct GenArgs {
    /// directory to write the dataset into (created if missing)
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    /// number of concepts
    #[arg(long)]
    pub k: Option<usize>,
    /// patches per image
    #[arg(long)]
    pub l: Option<usize>,
    /// raw floats per patch
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// per-element gaussian noise level
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// most concepts a single sample can carry
    #[arg(long)]
    pub max_concepts: Option<usize>,
}

impl GenArgs {
    fn gen_config(&self) -> GenConfig {
        let d = GenConfig::default();
        GenConfig {
            k: self.k.unwrap_or(d.k),
            l: self.l.unwrap_or(d.l),
            p: self.p.unwrap_or(d.p),
            n_train: self.n_train.unwrap_or(d.n_train),
            n_val: self.n_val.unwrap_or(d.n_val),
            n_test: self.n_test.unwrap_or(d.n_test),
            seed: self.seed.unwrap_or(d.seed),
            noise_sigma: self.noise_sigma.unwrap_or(d.noise_sigma),
            max_concepts: self.max_concepts.unwrap_or(d.max_concepts),
        }
    }
}

pub fn run(args: &GenArgs) -> Result<()> {
    let cfg = args.gen_config();
    let ds = generate(&cfg)?;
    save_dataset(&ds, &args.out)?;
    runlog::append(&args.out, "dataset generated")?;
    println!(
        "wrote {}: k={} l={} p={} splits {}/{}/{} seed={} noise={}",
        args.out.display(),
        cfg.k,
        cfg.l,
        cfg.p,
        ds.train.n,
        ds.val.n,
        ds.test.n,
        cfg.seed,
        cfg.noise_sigma
    );
    println!("concepts: {}", ds.concepts.join(", "));
    Ok(())
}
