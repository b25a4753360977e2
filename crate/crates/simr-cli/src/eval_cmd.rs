//! `eval`: zero-shot scoring of a trained checkpoint against a dataset,
//! one report in JSON and CSV per prompt template.

use crate::config::RunConfig;
use crate::model_desc::ModelDesc;
use crate::runlog;
use clap::Args;
use simr::checkpoint;
use simr::data::{load_dataset, prompt_template, Vocab};
use simr::eval::evaluate;
use simr::{Error, Result};
use std::path::PathBuf;

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// trained checkpoint (reads model.json from the same directory)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// prompt template id: p1 or p2
    #[arg(long, default_value = "p1")]
    pub template: String,
}

pub fn run(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let template = prompt_template(&args.template)?;
    let direction = cfg.direction()?;
    let ds = load_dataset(&cfg.dataset)?;
    let vocab = Vocab::build(&ds.concepts);
    let desc = ModelDesc::load_for(&args.checkpoint)?;
    desc.check_dataset(&ds, vocab.len())?;
    let model = desc.to_model()?;
    let ps = checkpoint::load(&args.checkpoint)?;

    let mut echo = cfg.echo();
    echo["template"] = serde_json::Value::String(args.template.clone());
    echo["checkpoint"] = serde_json::Value::String(args.checkpoint.display().to_string());
    let report = evaluate(&model, &ps, &ds, &vocab, template, direction, echo)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let stem = format!("eval_{}", args.template);
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Contract(format!("report serializes: {e}")))?;
    text.push('\n');
    std::fs::write(cfg.out_dir.join(format!("{stem}.json")), text)?;
    std::fs::write(cfg.out_dir.join(format!("{stem}.csv")), report.to_csv())?;
    runlog::append(&cfg.out_dir, &format!("evaluated template {}", args.template))?;

    let pointing = report
        .pointing_mean
        .map_or_else(|| "unavailable".into(), |v| format!("{v:.4}"));
    println!(
        "template {} ({}) direction {}: mean AUC {:.4}, mean MCC {:.4}, pointing {}",
        args.template,
        if report.aligned { "aligned" } else { "free-form" },
        report.direction,
        report.mean_auc,
        report.mean_mcc,
        pointing
    );
    println!("report in {}", cfg.out_dir.join(format!("{stem}.json")).display());
    Ok(())
}
