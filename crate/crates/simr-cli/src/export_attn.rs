//! `export-attn`: write the cross-attention map of one concept over chosen
//! samples as grayscale PGM images.

use crate::config::RunConfig;
use crate::model_desc::ModelDesc;
use crate::runlog;
use clap::Args;
use serde_json::json;
use simr::checkpoint;
use simr::data::{load_dataset, prompt_template, Vocab};
use simr::eval::{export_attention_map, zero_shot};
use simr::{Error, Result};
use std::path::PathBuf;

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// trained checkpoint (reads model.json from the same directory)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// concept whose attention map to export
    #[arg(long)]
    pub concept: String,
    /// comma-separated sample indices within the split
    #[arg(long, default_value = "0")]
    pub samples: String,
    /// dataset split to read samples from
    #[arg(long, default_value = "test")]
    pub split: String,
    /// prompt template id used to phrase the concept
    #[arg(long, default_value = "p1")]
    pub template: String,
}

fn parse_samples(csv: &str) -> Result<Vec<usize>> {
    csv.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad sample index `{s}`")))
        })
        .collect()
}

pub fn run(cfg: &RunConfig, args: &ExportArgs) -> Result<()> {
    let template = prompt_template(&args.template)?;
    let samples = parse_samples(&args.samples)?;
    if samples.is_empty() {
        return Err(Error::Config("no sample indices given".into()));
    }
    let ds = load_dataset(&cfg.dataset)?;
    let split = ds.split(&args.split)?;
    let vocab = Vocab::build(&ds.concepts);
    let d_idx = ds.concepts.iter().position(|c| c == &args.concept).ok_or_else(|| {
        Error::Config(format!(
            "unknown concept `{}` (dataset has: {})",
            args.concept,
            ds.concepts.join(", ")
        ))
    })?;
    if let Some(&bad) = samples.iter().find(|&&s| s >= split.n) {
        return Err(Error::Input(format!(
            "sample {bad} out of range for split {} with {} samples",
            args.split, split.n
        )));
    }

    let desc = ModelDesc::load_for(&args.checkpoint)?;
    desc.check_dataset(&ds, vocab.len())?;
    let model = desc.to_model()?;
    let ps = checkpoint::load(&args.checkpoint)?;

    // gather just the requested images, in the order given
    let span = ds.config.l * ds.config.p;
    let mut images = Vec::with_capacity(samples.len() * span);
    for &s in &samples {
        images.extend_from_slice(&split.images[s * span..(s + 1) * span]);
    }
    let zs = zero_shot(
        &model,
        &ps,
        &vocab,
        &ds.concepts,
        &images,
        samples.len(),
        template,
        cfg.direction()?,
    )?;
    let attn = zs.attn.as_ref().ok_or_else(|| {
        Error::Unavailable(
            "attention maps need local keys; this checkpoint was trained with kv_choice=global"
                .into(),
        )
    })?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let l = zs.l_patches;
    let mut files = Vec::new();
    for (j, &s) in samples.iter().enumerate() {
        let row = &attn[(d_idx * zs.n_images + j) * l..][..l];
        let name = format!("attn_{}_{}_{}.pgm", args.concept, args.split, s);
        export_attention_map(row, l, &cfg.out_dir.join(&name))?;
        files.push(name);
    }

    let mut index = serde_json::to_string_pretty(&json!({
        "config": cfg.echo(),
        "checkpoint": args.checkpoint.display().to_string(),
        "concept": args.concept,
        "split": args.split,
        "template": args.template,
        "samples": samples,
        "files": files,
    }))
    .map_err(|e| Error::Contract(format!("index serializes: {e}")))?;
    index.push('\n');
    std::fs::write(cfg.out_dir.join("export.json"), index)?;
    runlog::append(&cfg.out_dir, &format!("exported {} attention maps", files.len()))?;

    println!(
        "wrote {} map(s) for `{}` to {}",
        files.len(),
        args.concept,
        cfg.out_dir.display()
    );
    Ok(())
}
