//! `train`: fit an alignment model on a stored dataset and leave behind a
//! loss log, final and best-validation checkpoints, and a model description.

use crate::config::RunConfig;
use crate::model_desc::ModelDesc;
use crate::runlog;
use serde_json::json;
use simr::checkpoint;
use simr::data::vocab::{PROMPT_P1, PROMPT_P2};
use simr::data::{load_dataset, render, Dataset, Vocab};
use simr::train::{fit, loss_csv};
use simr::{Error, Result};

/// Text length the tokenizer must accommodate: every stored sentence plus
/// both inference prompts (truncation would silently change what a prompt
/// means to the model).
pub fn required_m_len(ds: &Dataset) -> usize {
    let count = |s: &str| s.split_whitespace().count();
    let mut m = 4;
    for split in [&ds.train, &ds.val, &ds.test] {
        for rep in &split.reports {
            for s in &rep.sentences {
                m = m.max(count(s));
            }
        }
    }
    for c in &ds.concepts {
        m = m.max(count(&render(PROMPT_P1, c)));
        m = m.max(count(&render(PROMPT_P2, c)));
    }
    m
}

pub fn run(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(&cfg.dataset)?;
    let vocab = Vocab::build(&ds.concepts);
    let model = cfg.model_config(ds.config.p, ds.config.l, required_m_len(&ds), vocab.len())?;
    let tc = cfg.train_config()?;
    let rewriter = cfg.rewriter();

    std::fs::create_dir_all(&cfg.out_dir)?;
    runlog::append(&cfg.out_dir, "training started")?;
    let started = std::time::Instant::now();
    let out = fit(&model, &tc, &ds, &vocab, &rewriter)?;
    let elapsed = started.elapsed().as_secs_f64();
    runlog::append(&cfg.out_dir, &format!("training finished in {elapsed:.1}s"))?;

    let echo = cfg.echo();
    std::fs::write(cfg.out_dir.join("loss.csv"), loss_csv(&out.loss_rows, &echo))?;
    checkpoint::save(&out.params, &cfg.out_dir.join("final.ckpt"))?;
    checkpoint::save(&out.best_params, &cfg.out_dir.join("best.ckpt"))?;
    ModelDesc::describe(&model, echo.clone()).save(&cfg.out_dir.join("model.json"))?;

    let summary = json!({
        "config": echo,
        "iterations": out.loss_rows.len(),
        "final_loss": out.loss_rows.last().map(|r| r.total),
        "val_losses": out.val_losses,
        "best_epoch": out.best_epoch,
        "best_val_loss": out.best_val_loss,
        "rewriter_fallbacks": rewriter.fallback_count(),
        "numeric_failure": out.numeric_failure,
    });
    let mut text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Contract(format!("summary serializes: {e}")))?;
    text.push('\n');
    std::fs::write(cfg.out_dir.join("train.json"), text)?;

    if let Some(detail) = out.numeric_failure {
        runlog::append(&cfg.out_dir, "training aborted on a non-finite value")?;
        return Err(Error::Numeric(format!(
            "{detail}; checkpoints from before the failing step are in {}",
            cfg.out_dir.display()
        )));
    }

    println!(
        "trained {} epochs ({} iterations); best val loss {:.6} at epoch {}",
        tc.epochs,
        out.loss_rows.len(),
        out.best_val_loss,
        out.best_epoch
    );
    println!("artifacts in {}", cfg.out_dir.display());
    Ok(())
}
