//! Zero-shot classification and grounding evaluation: score every test
//! image against one prompt per concept, then rank-based AUC, thresholded
//! confusion metrics (thresholds picked on the validation split) and the
//! pointing game over the cross-attention maps.

use crate::data::generate::{Dataset, Split};
use crate::data::vocab::{render, Vocab};
use crate::encoders::{batch_tokens, TokenSeq};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamSet;
use crate::tensor::Graph;
use serde::Serialize;
use std::path::Path;

/// Which alignment direction produces the zero-shot logit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    T2i,
    I2t,
    /// mean of both directional logits (default)
    Avg,
}

impl Direction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "t2i" => Ok(Direction::T2i),
            "i2t" => Ok(Direction::I2t),
            "avg" => Ok(Direction::Avg),
            other => Err(Error::Config(format!(
                "unknown direction `{other}` (expected t2i, i2t or avg)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::T2i => "t2i",
            Direction::I2t => "i2t",
            Direction::Avg => "avg",
        }
    }
}

/// images scored per graph; keeps peak memory flat for large test splits
const CHUNK: usize = 64;

pub struct ZeroShotOutput {
    pub k: usize,
    pub n_images: usize,
    pub l_patches: usize,
    /// n_images x k, image-major: scores[i * k + d]
    pub scores: Vec<f64>,
    /// head-averaged t2i attention over the local patches,
    /// [d * n_images * l + i * l + patch]; None when kv carries no local keys
    pub attn: Option<Vec<f64>>,
}

/// Score every image against one prompt per concept. Raw logits, no
/// normalization.
pub fn zero_shot(
    cfg: &ModelConfig,
    ps: &ParamSet<f32>,
    vocab: &Vocab,
    concepts: &[String],
    images: &[f32],
    n_images: usize,
    template: &str,
    direction: Direction,
) -> Result<ZeroShotOutput> {
    let k = concepts.len();
    let l = cfg.l_patches;
    let per_image = l * cfg.p_raw;
    if images.len() != n_images * per_image {
        return Err(Error::Shape {
            op: "zero_shot",
            detail: format!(
                "{} floats is not {n_images} images of {per_image}",
                images.len()
            ),
        });
    }

    let seqs: Vec<TokenSeq> = concepts
        .iter()
        .map(|c| {
            let sentence = render(template, c);
            let ids = vocab.encode(&sentence).map_err(|_| {
                Error::Config(format!("prompt `{sentence}` uses words outside the vocabulary"))
            })?;
            TokenSeq::from_ids(&ids, cfg.m_len)
        })
        .collect::<Result<_>>()?;
    let (tokens, mask, _m) = batch_tokens(&seqs)?;

    let want_attn = cfg.kv.has_local();
    let mut scores = vec![0.0f64; n_images * k];
    let mut attn = if want_attn {
        Some(vec![0.0f64; k * n_images * l])
    } else {
        None
    };

    let mut start = 0;
    while start < n_images {
        let count = CHUNK.min(n_images - start);
        let mut g: Graph<f32> = Graph::new();
        let bound = ps.bind_frozen(&mut g)?;
        let chunk = &images[start * per_image..(start + count) * per_image];
        let out = cfg.forward(&mut g, &bound, chunk, count, &tokens, &mask, k)?;
        let s_t2i = g.value(out.s_t2i); // (k, count)
        let s_i2t = g.value(out.s_i2t); // (count, k)
        for d in 0..k {
            for c in 0..count {
                let t2i = s_t2i[d * count + c] as f64;
                let i2t = s_i2t[c * k + d] as f64;
                scores[(start + c) * k + d] = match direction {
                    Direction::T2i => t2i,
                    Direction::I2t => i2t,
                    Direction::Avg => 0.5 * (t2i + i2t),
                };
            }
        }
        if let Some(buf) = attn.as_mut() {
            // (k, count, heads, k_len); local patches are the first l keys
            let a = g.value(out.attn_t2i);
            let k_len = cfg.kv.k_len(l);
            let h = cfg.heads;
            for d in 0..k {
                for c in 0..count {
                    let base = (d * count + c) * h * k_len;
                    let row = &mut buf[(d * n_images + start + c) * l..][..l];
                    for patch in 0..l {
                        let mut acc = 0.0f64;
                        for head in 0..h {
                            acc += a[base + head * k_len + patch] as f64;
                        }
                        row[patch] = acc / h as f64;
                    }
                }
            }
        }
        start += count;
    }

    Ok(ZeroShotOutput {
        k,
        n_images,
        l_patches: l,
        scores,
        attn,
    })
}

/// Tie-averaged rank AUC (Mann-Whitney): the probability a random positive
/// outranks a random negative, ties counting one half.
pub fn rank_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both a positive and a negative example".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based average rank over the tie group [i, j)
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &t in &idx[i..j] {
            if labels[t] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

/// Predictions are `score >= threshold`.
pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Confusion {
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

impl Confusion {
    pub fn mcc(&self) -> f64 {
        let (tp, fp, fn_, tn) = (self.tp as f64, self.fp as f64, self.fn_ as f64, self.tn as f64);
        let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if denom == 0.0 {
            return 0.0;
        }
        (tp * tn - fp * fn_) / denom.sqrt()
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            return 0.0;
        }
        2.0 * self.tp as f64 / denom as f64
    }

    pub fn acc(&self) -> f64 {
        let total = self.tp + self.fp + self.fn_ + self.tn;
        if total == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / total as f64
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    /// true when the scan had nothing to work with (constant scores or a
    /// single-class column) and the median was used instead
    pub fallback: bool,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// MCC-maximizing threshold over the midpoints of adjacent unique scores;
/// ties go to the lowest threshold.
pub fn select_threshold(scores: &[f64], labels: &[bool]) -> ThresholdChoice {
    let mut uniq: Vec<f64> = scores.to_vec();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let single_class = labels.iter().all(|&l| l) || labels.iter().all(|&l| !l);
    if uniq.len() < 2 || single_class {
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        return ThresholdChoice {
            threshold: median(&sorted),
            fallback: true,
        };
    }
    let mut best_t = f64::NAN;
    let mut best_mcc = f64::NEG_INFINITY;
    for w in uniq.windows(2) {
        let t = 0.5 * (w[0] + w[1]);
        let mcc = confusion(scores, labels, t).mcc();
        if mcc > best_mcc {
            best_mcc = mcc;
            best_t = t;
        }
    }
    ThresholdChoice {
        threshold: best_t,
        fallback: false,
    }
}

/// One grounding decision: head-averaged attention over the local patches,
/// argmax (lowest index on ties), hit iff that patch is ground truth.
pub fn pointing_hit(attn_row: &[f64], grounding: &[usize]) -> bool {
    let mut best = 0;
    for (i, &v) in attn_row.iter().enumerate() {
        if v > attn_row[best] {
            best = i;
        }
    }
    grounding.contains(&best)
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassEval {
    pub name: String,
    /// None when the test column is single-class
    pub auc: Option<f64>,
    pub threshold: f64,
    pub threshold_fallback: bool,
    pub mcc: f64,
    pub f1: f64,
    pub acc: f64,
    pub pointing_hits: usize,
    pub pointing_total: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub template: String,
    /// true when the template is the canonical rewrite target, i.e. the
    /// phrasing prompt alignment trains toward
    pub aligned: bool,
    pub direction: String,
    pub n_test: usize,
    pub classes: Vec<ClassEval>,
    /// classes excluded from the AUC mean for having one label value
    pub undefined_auc_classes: usize,
    pub mean_auc: f64,
    pub mean_mcc: f64,
    pub mean_f1: f64,
    pub mean_acc: f64,
    /// mean per-class pointing hit rate (classes with no grounded positives excluded)
    pub pointing_mean: Option<f64>,
    /// pooled hits / decisions across all classes
    pub pointing_overall: Option<f64>,
    pub config_echo: serde_json::Value,
}

fn column(scores: &[f64], k: usize, d: usize, n: usize) -> Vec<f64> {
    (0..n).map(|i| scores[i * k + d]).collect()
}

fn label_column(split: &Split, k: usize, d: usize) -> Vec<bool> {
    (0..split.n).map(|i| split.labels[i * k + d] != 0.0).collect()
}

/// Full evaluation: thresholds from the validation split, every other
/// number from the test split.
pub fn evaluate(
    cfg: &ModelConfig,
    ps: &ParamSet<f32>,
    ds: &Dataset,
    vocab: &Vocab,
    template: &str,
    direction: Direction,
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    let k = ds.concepts.len();
    let val = zero_shot(
        cfg, ps, vocab, &ds.concepts, &ds.val.images, ds.val.n, template, direction,
    )?;
    let test = zero_shot(
        cfg, ps, vocab, &ds.concepts, &ds.test.images, ds.test.n, template, direction,
    )?;

    let mut classes = Vec::with_capacity(k);
    for (d, name) in ds.concepts.iter().enumerate() {
        let val_scores = column(&val.scores, k, d, ds.val.n);
        let val_labels = label_column(&ds.val, k, d);
        let choice = select_threshold(&val_scores, &val_labels);

        let test_scores = column(&test.scores, k, d, ds.test.n);
        let test_labels = label_column(&ds.test, k, d);
        let auc = match rank_auc(&test_scores, &test_labels) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        let conf = confusion(&test_scores, &test_labels, choice.threshold);

        let (mut hits, mut total) = (0usize, 0usize);
        if let Some(attn) = &test.attn {
            for (i, rep) in ds.test.reports.iter().enumerate() {
                if let Some(patches) = rep.grounding.get(name) {
                    let row = &attn[(d * test.n_images + i) * test.l_patches..][..test.l_patches];
                    total += 1;
                    if pointing_hit(row, patches) {
                        hits += 1;
                    }
                }
            }
        }

        classes.push(ClassEval {
            name: name.clone(),
            auc,
            threshold: choice.threshold,
            threshold_fallback: choice.fallback,
            mcc: conf.mcc(),
            f1: conf.f1(),
            acc: conf.acc(),
            pointing_hits: hits,
            pointing_total: total,
        });
    }

    let defined: Vec<f64> = classes.iter().filter_map(|c| c.auc).collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric(
            "every class column is single-valued; no AUC is defined".into(),
        ));
    }
    let mean = |f: fn(&ClassEval) -> f64| {
        classes.iter().map(f).sum::<f64>() / classes.len() as f64
    };
    let (pointing_mean, pointing_overall) = if test.attn.is_some() {
        let rates: Vec<f64> = classes
            .iter()
            .filter(|c| c.pointing_total > 0)
            .map(|c| c.pointing_hits as f64 / c.pointing_total as f64)
            .collect();
        let hits: usize = classes.iter().map(|c| c.pointing_hits).sum();
        let total: usize = classes.iter().map(|c| c.pointing_total).sum();
        (
            (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64),
            (total > 0).then(|| hits as f64 / total as f64),
        )
    } else {
        (None, None)
    };

    Ok(EvalReport {
        template: template.to_string(),
        aligned: template == crate::data::vocab::PROMPT_P1,
        direction: direction.as_str().to_string(),
        n_test: ds.test.n,
        undefined_auc_classes: classes.len() - defined.len(),
        mean_auc: defined.iter().sum::<f64>() / defined.len() as f64,
        mean_mcc: mean(|c| c.mcc),
        mean_f1: mean(|c| c.f1),
        mean_acc: mean(|c| c.acc),
        pointing_mean,
        pointing_overall,
        classes,
        config_echo,
    })
}

impl EvalReport {
    /// Rows mirroring the JSON, for quick spreadsheet digestion.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# config: {}\n", self.config_echo);
        out.push_str(
            "class,auc,threshold,threshold_fallback,mcc,f1,acc,pointing_hits,pointing_total\n",
        );
        for c in &self.classes {
            let auc = c
                .auc
                .map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"));
            out.push_str(&format!(
                "{},{},{:.6},{},{:.6},{:.6},{:.6},{},{}\n",
                c.name, auc, c.threshold, c.threshold_fallback, c.mcc, c.f1, c.acc,
                c.pointing_hits, c.pointing_total
            ));
        }
        out.push_str(&format!(
            "mean,{:.6},,,{:.6},{:.6},{:.6},{},{}\n",
            self.mean_auc,
            self.mean_mcc,
            self.mean_f1,
            self.mean_acc,
            self.pointing_mean.map_or_else(|| "unavailable".into(), |v| format!("{v:.6}")),
            self.pointing_overall.map_or_else(|| "unavailable".into(), |v| format!("{v:.6}")),
        ));
        out
    }
}

/// Patch grid used for rendering: the squarest factorization of l, rows
/// never exceeding columns.
pub fn grid_dims(l: usize) -> (usize, usize) {
    let mut rows = 1;
    let mut r = 1;
    while r * r <= l {
        if l % r == 0 {
            rows = r;
        }
        r += 1;
    }
    (rows, l / rows)
}

/// scale factor for exported attention maps
pub const UPSCALE: usize = 16;

/// Bilinear upsample (half-pixel centers, edge clamped), then min-max
/// normalize to 0..=255. A flat map renders mid-gray.
fn upsample_normalize(attn: &[f64], rows: usize, cols: usize, scale: usize) -> Vec<u8> {
    let (h, w) = (rows * scale, cols * scale);
    let mut img = vec![0.0f64; h * w];
    for y in 0..h {
        let sy = ((y as f64 + 0.5) / scale as f64 - 0.5).clamp(0.0, rows as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(rows - 1);
        let fy = sy - y0 as f64;
        for x in 0..w {
            let sx = ((x as f64 + 0.5) / scale as f64 - 0.5).clamp(0.0, cols as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(cols - 1);
            let fx = sx - x0 as f64;
            let top = attn[y0 * cols + x0] * (1.0 - fx) + attn[y0 * cols + x1] * fx;
            let bot = attn[y1 * cols + x0] * (1.0 - fx) + attn[y1 * cols + x1] * fx;
            img[y * w + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo).is_finite() || hi - lo < 1e-12 {
        return vec![128u8; h * w];
    }
    img.iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Binary PGM (P5) bytes for one head-averaged local attention vector.
pub fn attention_pgm(attn: &[f64], l: usize) -> Result<Vec<u8>> {
    if attn.len() != l || l == 0 {
        return Err(Error::Contract(format!(
            "attention length {} does not cover {l} patches",
            attn.len()
        )));
    }
    let (rows, cols) = grid_dims(l);
    let pixels = upsample_normalize(attn, rows, cols, UPSCALE);
    let mut out = format!("P5\n{} {}\n255\n", cols * UPSCALE, rows * UPSCALE).into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn export_attention_map(attn: &[f64], l: usize, path: &Path) -> Result<()> {
    let bytes = attention_pgm(attn, l)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}
