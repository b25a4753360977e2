//! Synthetic paired image/report generator. Every sample carries one to
//! `max_concepts` findings; each finding stamps its signature vector into a
//! few dedicated patches (plus noise) and contributes at least one sentence,
//! so image evidence, report text and grounding stay consistent by
//! construction.

use crate::data::vocab::{render, CONCEPT_NAMES, FILLER_SENTENCES, SENTENCE_TEMPLATES};
use crate::error::{Error, Result};
use crate::model::{seeded_rng, STREAM_DATAGEN};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Minimum pairwise separation between concept signatures, in degrees. The
/// generator enforces a small margin on top when sampling.
pub const MIN_SIGNATURE_ANGLE_DEG: f64 = 15.0;
const SAMPLE_ANGLE_DEG: f64 = 20.0;
/// Euclidean norm of every concept signature.
pub const SIGNATURE_NORM: f64 = 2.0;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GenConfig {
    /// number of concepts (max 16, the size of the name inventory)
    pub k: usize,
    /// patches per image
    pub l: usize,
    /// raw floats per patch
    pub p: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    /// per-element gaussian noise level
    pub noise_sigma: f64,
    /// most concepts a single sample can carry
    pub max_concepts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            k: 8,
            l: 16,
            p: 16,
            n_train: 2000,
            n_val: 300,
            n_test: 500,
            seed: 42,
            noise_sigma: 0.3,
            max_concepts: 3,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config("need at least 2 concepts for contrastive pairs".into()));
        }
        if self.k > CONCEPT_NAMES.len() {
            return Err(Error::Config(format!(
                "requested {} concepts but only {} names are available",
                self.k,
                CONCEPT_NAMES.len()
            )));
        }
        if self.max_concepts == 0 || self.max_concepts > self.k {
            return Err(Error::Config(format!(
                "max_concepts must be in 1..={}, got {}",
                self.k, self.max_concepts
            )));
        }
        if self.l < 3 * self.max_concepts {
            return Err(Error::Config(format!(
                "{} patches cannot hold disjoint evidence for up to {} concepts (need at least {})",
                self.l,
                self.max_concepts,
                3 * self.max_concepts
            )));
        }
        if self.p < 2 {
            return Err(Error::Config("patch dimension must be at least 2".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("every split needs at least one sample".into()));
        }
        Ok(())
    }

    pub fn concepts(&self) -> Vec<String> {
        CONCEPT_NAMES[..self.k].iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Report {
    pub id: String,
    pub sentences: Vec<String>,
    /// finding names present in the paired image
    pub concepts: Vec<String>,
    /// finding name -> patch indices carrying its evidence
    pub grounding: BTreeMap<String, Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub n: usize,
    /// n * l * p floats, row-major
    pub images: Vec<f32>,
    /// n * k multi-hot floats
    pub labels: Vec<f32>,
    pub reports: Vec<Report>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub concepts: Vec<String>,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

/// Unit-tested separately: signatures with fixed norm and a guaranteed
/// pairwise angle, found by per-vector rejection sampling.
pub fn make_signatures(k: usize, p: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f32>>> {
    let cos_limit = SAMPLE_ANGLE_DEG.to_radians().cos();
    let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut sigs: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut placed = false;
        for _attempt in 0..10_000 {
            let raw: Vec<f64> = (0..p).map(|_| normal.sample(rng)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            let cand: Vec<f64> = raw.iter().map(|v| v / norm * SIGNATURE_NORM).collect();
            let ok = sigs.iter().all(|s| {
                let dot: f64 = s.iter().zip(&cand).map(|(a, b)| a * b).sum();
                dot / (SIGNATURE_NORM * SIGNATURE_NORM) <= cos_limit
            });
            if ok {
                sigs.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place {k} concept signatures in {p} dimensions with {MIN_SIGNATURE_ANGLE_DEG} degree separation"
            )));
        }
    }
    Ok(sigs
        .into_iter()
        .map(|s| s.into_iter().map(|v| v as f32).collect())
        .collect())
}

fn make_split(
    name: &str,
    n: usize,
    cfg: &GenConfig,
    concepts: &[String],
    sigs: &[Vec<f32>],
    rng: &mut impl Rng,
) -> Result<Split> {
    let noise = if cfg.noise_sigma > 0.0 {
        Some(Normal::new(0.0f64, cfg.noise_sigma).map_err(|e| Error::Config(format!("bad noise level: {e}")))?)
    } else {
        None
    };
    let mut images = Vec::with_capacity(n * cfg.l * cfg.p);
    let mut labels = vec![0.0f32; n * cfg.k];
    let mut reports = Vec::with_capacity(n);

    for idx in 0..n {
        // which findings this sample carries
        let c = rng.gen_range(1..=cfg.max_concepts);
        let mut chosen = rand::seq::index::sample(rng, cfg.k, c).into_vec();
        chosen.sort_unstable();

        // evidence patches, disjoint across the sample's findings
        let mut pool: Vec<usize> = (0..cfg.l).collect();
        let mut grounding: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for &ci in &chosen {
            let take = rng.gen_range(1..=3.min(pool.len()));
            let picks = rand::seq::index::sample(rng, pool.len(), take).into_vec();
            let mut patches: Vec<usize> = picks.iter().map(|&i| pool[i]).collect();
            let mut dead: Vec<usize> = picks;
            dead.sort_unstable_by(|a, b| b.cmp(a));
            for i in dead {
                pool.swap_remove(i);
            }
            patches.sort_unstable();
            grounding.insert(concepts[ci].clone(), patches);
        }

        // image: noise everywhere, signatures added on the evidence patches
        let base = images.len();
        for _ in 0..cfg.l * cfg.p {
            images.push(noise.as_ref().map_or(0.0, |d| d.sample(rng) as f32));
        }
        for &ci in &chosen {
            for &patch in &grounding[&concepts[ci]] {
                let off = base + patch * cfg.p;
                for j in 0..cfg.p {
                    images[off + j] += sigs[ci][j];
                }
            }
        }

        for &ci in &chosen {
            labels[idx * cfg.k + ci] = 1.0;
        }

        // one sentence per finding plus fillers, up to four total
        let total = rng.gen_range(c..=c.max(4));
        let mut sentences: Vec<String> = chosen
            .iter()
            .map(|&ci| {
                let t = SENTENCE_TEMPLATES[rng.gen_range(0..SENTENCE_TEMPLATES.len())];
                render(t, &concepts[ci])
            })
            .collect();
        for _ in c..total {
            sentences.push(FILLER_SENTENCES[rng.gen_range(0..FILLER_SENTENCES.len())].to_string());
        }
        sentences.shuffle(rng);

        reports.push(Report {
            id: format!("{name}-{idx:05}"),
            sentences,
            concepts: chosen.iter().map(|&ci| concepts[ci].clone()).collect(),
            grounding,
        });
    }

    Ok(Split {
        n,
        images,
        labels,
        reports,
    })
}

/// Generate the full dataset. Reproducible: the same config always yields
/// the same bytes.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let concepts = cfg.concepts();
    let mut rng = seeded_rng(cfg.seed, STREAM_DATAGEN);
    let sigs = make_signatures(cfg.k, cfg.p, &mut rng)?;
    let train = make_split("train", cfg.n_train, cfg, &concepts, &sigs, &mut rng)?;
    let val = make_split("val", cfg.n_val, cfg, &concepts, &sigs, &mut rng)?;
    let test = make_split("test", cfg.n_test, cfg, &concepts, &sigs, &mut rng)?;
    Ok(Dataset {
        config: cfg.clone(),
        concepts,
        train,
        val,
        test,
    })
}
