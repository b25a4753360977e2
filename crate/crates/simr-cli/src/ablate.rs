//! `ablate`: train and evaluate every requested {head_kind, kv_choice,
//! prompt_align} cell with a shared seed and emit one comparison CSV.
//! A failing cell is recorded in its row; the grid keeps going.

use crate::config::RunConfig;
use crate::runlog;
use crate::train_cmd::required_m_len;
use clap::Args;
use simr::data::{load_dataset, prompt_template, Dataset, Vocab};
use simr::eval::{evaluate, EvalReport};
use simr::train::fit;
use simr::{Error, Result};

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// comma-separated similarity heads to sweep
    #[arg(long, default_value = "cos_proj_proj,cos_proj_orig,linear,mlp")]
    pub variants: String,
    /// comma-separated key/value choices to sweep
    #[arg(long, default_value = "global,local,both")]
    pub kv: String,
    /// comma-separated prompt-alignment settings (on/off)
    #[arg(long, default_value = "on")]
    pub pa: String,
    /// prompt template scored after each cell trains
    #[arg(long, default_value = "p1")]
    pub template: String,
}

fn parse_pa(item: &str) -> Result<bool> {
    match item {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        other => Err(Error::Config(format!(
            "bad prompt-alignment setting `{other}` (expected on or off)"
        ))),
    }
}

fn list(csv: &str) -> Vec<String> {
    csv.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn cell(cfg: &RunConfig, ds: &Dataset, vocab: &Vocab, template: &str) -> Result<EvalReport> {
    let model = cfg.model_config(ds.config.p, ds.config.l, required_m_len(ds), vocab.len())?;
    let tc = cfg.train_config()?;
    let out = fit(&model, &tc, ds, vocab, &cfg.rewriter())?;
    if let Some(detail) = out.numeric_failure {
        return Err(Error::Numeric(detail));
    }
    evaluate(
        &model,
        &out.best_params,
        ds,
        vocab,
        template,
        cfg.direction()?,
        cfg.echo(),
    )
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

pub fn run(cfg: &RunConfig, args: &AblateArgs) -> Result<()> {
    let template = prompt_template(&args.template)?;
    let variants = list(&args.variants);
    let kvs = list(&args.kv);
    let pas = list(&args.pa).iter().map(|s| parse_pa(s)).collect::<Result<Vec<bool>>>()?;
    if variants.is_empty() || kvs.is_empty() || pas.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }

    let ds = load_dataset(&cfg.dataset)?;
    let vocab = Vocab::build(&ds.concepts);
    std::fs::create_dir_all(&cfg.out_dir)?;
    runlog::append(
        &cfg.out_dir,
        &format!("ablation over {}x{}x{} cells", variants.len(), kvs.len(), pas.len()),
    )?;

    let mut csv = format!("# config: {}\n", cfg.echo());
    csv.push_str(
        "head_kind,kv_choice,prompt_align,status,mean_auc,mean_mcc,mean_f1,mean_acc,pointing_mean,detail\n",
    );
    let mut header_shown = false;
    for v in &variants {
        for kv in &kvs {
            for &pa in &pas {
                let cell_cfg = RunConfig {
                    head_kind: v.clone(),
                    kv_choice: kv.clone(),
                    prompt_align: pa,
                    ..cfg.clone()
                };
                let pa_str = if pa { "on" } else { "off" };
                let row = match cell(&cell_cfg, &ds, &vocab, template) {
                    Ok(rep) => {
                        let pointing = rep
                            .pointing_mean
                            .map_or_else(|| "unavailable".into(), |p| format!("{p:.6}"));
                        format!(
                            "{v},{kv},{pa_str},ok,{:.6},{:.6},{:.6},{:.6},{pointing},\n",
                            rep.mean_auc, rep.mean_mcc, rep.mean_f1, rep.mean_acc
                        )
                    }
                    Err(e) => {
                        runlog::append(&cfg.out_dir, &format!("cell {v}/{kv}/{pa_str} failed"))?;
                        format!("{v},{kv},{pa_str},error,,,,,,{}\n", quote(&e.to_string()))
                    }
                };
                if !header_shown {
                    print!("head_kind,kv_choice,prompt_align,status,mean_auc,mean_mcc,mean_f1,mean_acc,pointing_mean,detail\n");
                    header_shown = true;
                }
                print!("{row}");
                csv.push_str(&row);
            }
        }
    }

    let path = cfg.out_dir.join("ablation.csv");
    std::fs::write(&path, csv)?;
    runlog::append(&cfg.out_dir, "ablation finished")?;
    println!("table in {}", path.display());
    Ok(())
}
