//! Training loop: shuffled mini-batches of matched image/sentence pairs,
//! bidirectional InfoNCE, Adam or SGD. Per-iteration sentence sampling
//! draws from either the raw report or its prompt-aligned rewrite. A
//! non-finite loss stops the run and keeps the parameters from before the
//! offending step.

use crate::data::generate::{Dataset, Split};
use crate::data::prompt::Rewriter;
use crate::data::vocab::Vocab;
use crate::encoders::{batch_tokens, TokenSeq};
use crate::error::{Error, Result};
use crate::loss::total_loss;
use crate::model::{seeded_rng, ModelConfig, STREAM_SENTENCES, STREAM_SHUFFLE};
use crate::optim::{OptKind, Optimizer};
use crate::params::ParamSet;
use crate::tensor::Graph;
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub opt: OptKind,
    pub lr: f64,
    pub seed: u64,
    /// train on prompt-aligned rewrites instead of raw report sentences
    pub prompt_align: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            opt: OptKind::Adam,
            lr: 5e-4,
            seed: 42,
            prompt_align: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size {} rejected: the contrastive loss needs at least one negative per batch",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub iter: usize,
    pub l_t2i: f64,
    pub l_i2t: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub loss_rows: Vec<LossRow>,
    /// parameters at the end of training — or from just before the step
    /// that went non-finite
    pub params: ParamSet<f32>,
    /// parameters at the epoch with the lowest validation loss
    pub best_params: ParamSet<f32>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// per-epoch validation loss
    pub val_losses: Vec<f64>,
    /// set when training aborted on a non-finite value
    pub numeric_failure: Option<String>,
}

/// Per-sample sentence pools, tokenized once up front.
fn sentence_pools(
    split: &Split,
    concepts: &[String],
    vocab: &Vocab,
    m_len: usize,
    prompt_align: bool,
    rewriter: &Rewriter,
) -> Result<Vec<Vec<TokenSeq>>> {
    split
        .reports
        .iter()
        .map(|rep| {
            let aligned;
            let pool: &[String] = if prompt_align {
                aligned = rewriter.align(&rep.sentences, concepts, vocab);
                if aligned.is_empty() {
                    &rep.sentences
                } else {
                    &aligned
                }
            } else {
                &rep.sentences
            };
            if pool.is_empty() {
                return Err(Error::Input(format!("report {} has no sentences", rep.id)));
            }
            pool.iter()
                .map(|s| TokenSeq::from_ids(&vocab.encode(s)?, m_len))
                .collect()
        })
        .collect()
}

fn gather_images(split: &Split, per_image: usize, batch: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(batch.len() * per_image);
    for &i in batch {
        out.extend_from_slice(&split.images[i * per_image..(i + 1) * per_image]);
    }
    out
}

/// One forward pass worth of loss; no gradients.
fn batch_loss(
    model: &ModelConfig,
    params: &ParamSet<f32>,
    split: &Split,
    pools: &[Vec<TokenSeq>],
    batch: &[usize],
    pick: impl Fn(usize) -> usize,
) -> Result<(f64, f64, f64)> {
    let per_image = model.l_patches * model.p_raw;
    let images = gather_images(split, per_image, batch);
    let seqs: Vec<TokenSeq> = batch.iter().map(|&i| pools[i][pick(i)].clone()).collect();
    let (tokens, mask, _) = batch_tokens(&seqs)?;
    let mut g: Graph<f32> = Graph::new();
    let bound = params.bind_frozen(&mut g)?;
    let out = model.forward(&mut g, &bound, &images, batch.len(), &tokens, &mask, batch.len())?;
    let nodes = total_loss(&mut g, out.s_t2i, out.s_i2t)?;
    let b = nodes.read(&g, batch.len());
    Ok((b.l_t2i, b.l_i2t, b.total))
}

/// Validation loss: deterministic batches in split order, first pool
/// sentence per sample, mean total loss over batches.
fn validation_loss(
    model: &ModelConfig,
    params: &ParamSet<f32>,
    split: &Split,
    pools: &[Vec<TokenSeq>],
    batch_size: usize,
) -> Result<f64> {
    let idx: Vec<usize> = (0..split.n).collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let (_, _, total) = batch_loss(model, params, split, pools, chunk, |_| 0)?;
        sum += total;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Data(
            "validation split too small for a single contrastive batch".into(),
        ));
    }
    Ok(sum / count as f64)
}

/// Run the full loop. Returns normally even when training aborts on a
/// non-finite value — the failure is in `numeric_failure` and the
/// parameters are the last finite ones.
pub fn fit(
    model: &ModelConfig,
    tc: &TrainConfig,
    ds: &Dataset,
    vocab: &Vocab,
    rewriter: &Rewriter,
) -> Result<TrainOutcome> {
    model.validate()?;
    tc.validate()?;
    if model.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocab_size {} but vocabulary has {} words",
            model.vocab_size,
            vocab.len()
        )));
    }
    if ds.train.n < 2 {
        return Err(Error::Data("training split too small for contrastive batches".into()));
    }

    let train_pools = sentence_pools(
        &ds.train, &ds.concepts, vocab, model.m_len, tc.prompt_align, rewriter,
    )?;
    let val_pools = sentence_pools(
        &ds.val, &ds.concepts, vocab, model.m_len, tc.prompt_align, rewriter,
    )?;

    let mut params: ParamSet<f32> = model.init_params(tc.seed)?;
    let mut opt: Optimizer<f32> = Optimizer::new(tc.opt, tc.lr)?;
    let mut shuffle_rng = seeded_rng(tc.seed, STREAM_SHUFFLE);
    let mut sent_rng = seeded_rng(tc.seed, STREAM_SENTENCES);

    let per_image = model.l_patches * model.p_raw;
    let mut rows: Vec<LossRow> = Vec::new();
    let mut val_losses: Vec<f64> = Vec::new();
    let mut best_params = params.clone();
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut failure: Option<String> = None;
    let mut iter = 0usize;
    let mut indices: Vec<usize> = (0..ds.train.n).collect();

    'epochs: for epoch in 0..tc.epochs {
        indices.shuffle(&mut shuffle_rng);
        for batch in indices.chunks(tc.batch_size) {
            if batch.len() < 2 {
                continue; // a leftover singleton has no negatives to contrast
            }
            iter += 1;
            let images = gather_images(&ds.train, per_image, batch);
            let seqs: Vec<TokenSeq> = batch
                .iter()
                .map(|&i| {
                    let pool = &train_pools[i];
                    pool[sent_rng.gen_range(0..pool.len())].clone()
                })
                .collect();
            let (tokens, mask, _) = batch_tokens(&seqs)?;

            // keep a pre-step copy so a poisoned update is recoverable
            let before = params.clone();
            let step = (|| -> Result<LossRow> {
                let mut g: Graph<f32> = Graph::new();
                let bound = params.bind(&mut g)?;
                let out =
                    model.forward(&mut g, &bound, &images, batch.len(), &tokens, &mask, batch.len())?;
                let nodes = total_loss(&mut g, out.s_t2i, out.s_i2t)?;
                let b = nodes.read(&g, batch.len());
                if !b.total.is_finite() {
                    return Err(Error::Numeric(format!("loss went non-finite: {}", b.total)));
                }
                g.backward(nodes.total)?;
                opt.step(&mut params, &mut g, &bound)?;
                Ok(LossRow {
                    iter,
                    l_t2i: b.l_t2i,
                    l_i2t: b.l_i2t,
                    total: b.total,
                })
            })();
            match step {
                Ok(row) => rows.push(row),
                Err(Error::Numeric(detail)) => {
                    params = before;
                    failure = Some(format!("iteration {iter}: {detail}"));
                    break 'epochs;
                }
                Err(other) => return Err(other),
            }
        }

        match validation_loss(model, &params, &ds.val, &val_pools, tc.batch_size) {
            Ok(v) => {
                val_losses.push(v);
                if v < best_val_loss {
                    best_val_loss = v;
                    best_epoch = epoch;
                    best_params = params.clone();
                }
            }
            Err(Error::Numeric(detail)) => {
                failure = Some(format!("validation after epoch {epoch}: {detail}"));
                break 'epochs;
            }
            Err(other) => return Err(other),
        }
    }

    if best_val_loss.is_infinite() {
        // never completed an epoch; best is whatever we have
        best_params = params.clone();
    }
    Ok(TrainOutcome {
        loss_rows: rows,
        params,
        best_params,
        best_epoch,
        best_val_loss,
        val_losses,
        numeric_failure: failure,
    })
}

/// The loss log as CSV, config echo on the first line.
pub fn loss_csv(rows: &[LossRow], config_echo: &serde_json::Value) -> String {
    let mut out = format!("# config: {config_echo}\n");
    out.push_str("iter,l_t2i,l_i2t,total\n");
    for r in rows {
        out.push_str(&format!("{},{:.9},{:.9},{:.9}\n", r.iter, r.l_t2i, r.l_i2t, r.total));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{KvChoice, SimrVariant};
    use crate::data::generate::{generate, GenConfig};

    fn tiny_data(n_train: usize) -> Dataset {
        generate(&GenConfig {
            k: 4,
            l: 6,
            p: 6,
            n_train,
            n_val: 12,
            n_test: 12,
            seed: 11,
            noise_sigma: 0.2,
            max_concepts: 2,
        })
        .unwrap()
    }

    fn tiny_model(vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            d: 16,
            heads: 2,
            n_enc: 1,
            p_raw: 6,
            l_patches: 6,
            m_len: 8,
            vocab_size: vocab.len(),
            variant: SimrVariant::Linear,
            kv: KvChoice::Both,
            ffn_width: None,
        }
    }

    #[test]
    fn smoke_run_reduces_the_loss() {
        let ds = tiny_data(200);
        let vocab = Vocab::build(&ds.concepts);
        let model = tiny_model(&vocab);
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 16,
            opt: OptKind::Adam,
            lr: 1e-3,
            seed: 3,
            prompt_align: true,
        };
        let out = fit(&model, &tc, &ds, &vocab, &Rewriter::rule_based()).unwrap();
        assert!(out.numeric_failure.is_none());
        let first = out.loss_rows.first().unwrap().total;
        let last = out.loss_rows.last().unwrap().total;
        assert!(
            last < first,
            "loss should fall over a smoke run: {first} -> {last}"
        );
        assert_eq!(out.val_losses.len(), 3);
        assert!(out.best_val_loss.is_finite());
    }

    #[test]
    fn same_seed_gives_identical_loss_curves() {
        let ds = tiny_data(40);
        let vocab = Vocab::build(&ds.concepts);
        let model = tiny_model(&vocab);
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 8,
            opt: OptKind::Adam,
            lr: 5e-4,
            seed: 9,
            prompt_align: false,
        };
        let a = fit(&model, &tc, &ds, &vocab, &Rewriter::rule_based()).unwrap();
        let b = fit(&model, &tc, &ds, &vocab, &Rewriter::rule_based()).unwrap();
        assert_eq!(a.loss_rows, b.loss_rows);
        assert_eq!(a.val_losses, b.val_losses);
        let mut tc2 = tc;
        tc2.seed = 10;
        let c = fit(&model, &tc2, &ds, &vocab, &Rewriter::rule_based()).unwrap();
        assert_ne!(a.loss_rows, c.loss_rows);
    }

    #[test]
    fn exploding_run_keeps_finite_parameters() {
        let ds = tiny_data(40);
        let vocab = Vocab::build(&ds.concepts);
        let model = tiny_model(&vocab);
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 8,
            opt: OptKind::Sgd,
            lr: 1e30, // guaranteed blow-up
            seed: 4,
            prompt_align: false,
        };
        let out = fit(&model, &tc, &ds, &vocab, &Rewriter::rule_based()).unwrap();
        assert!(out.numeric_failure.is_some(), "lr=1e30 should abort");
        for (name, p) in out.params.iter() {
            assert!(
                p.data.iter().all(|v| v.is_finite()),
                "retained parameter {name} is not finite"
            );
        }
    }

    #[test]
    fn batch_size_one_is_rejected_with_explanation() {
        let tc = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        match tc.validate() {
            Err(Error::Config(msg)) => assert!(msg.contains("negative")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn leftover_singleton_batches_are_skipped() {
        let ds = tiny_data(17); // 17 = 2*8 + 1 leftover at batch 8
        let vocab = Vocab::build(&ds.concepts);
        let model = tiny_model(&vocab);
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 8,
            opt: OptKind::Adam,
            lr: 5e-4,
            seed: 1,
            prompt_align: false,
        };
        let out = fit(&model, &tc, &ds, &vocab, &Rewriter::rule_based()).unwrap();
        assert_eq!(out.loss_rows.len(), 2, "the singleton leftover must not train");
    }

    #[test]
    fn prompt_aligned_pools_use_canonical_sentences() {
        let ds = tiny_data(6);
        let vocab = Vocab::build(&ds.concepts);
        let pools = sentence_pools(
            &ds.train, &ds.concepts, &vocab, 8, true, &Rewriter::rule_based(),
        )
        .unwrap();
        let there = vocab.id("there").unwrap();
        for (pool, rep) in pools.iter().zip(&ds.train.reports) {
            assert_eq!(pool.len(), rep.concepts.len());
            for seq in pool {
                assert_eq!(seq.ids[0], there, "aligned sentences start with `there`");
            }
        }
    }

    #[test]
    fn loss_csv_has_config_line_and_rows() {
        let rows = vec![LossRow {
            iter: 1,
            l_t2i: 1.5,
            l_i2t: 1.25,
            total: 2.75,
        }];
        let csv = loss_csv(&rows, &serde_json::json!({"seed": 7}));
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("# config: "));
        assert_eq!(lines.next().unwrap(), "iter,l_t2i,l_i2t,total");
        assert!(lines.next().unwrap().starts_with("1,1.5"));
    }
}
