//! Word-level vocabulary shared by the data generator, the tokenizer and
//! the prompt templates. Id 0 is always the pad token; everything else is a
//! word drawn from the fixed sentence inventory plus the dataset's concepts.

use crate::error::{Error, Result};
use std::collections::HashMap;

/// Finding names the generator can draw on, in canonical order.
pub const CONCEPT_NAMES: [&str; 16] = [
    "fibrosis",
    "edema",
    "effusion",
    "nodule",
    "atelectasis",
    "opacity",
    "cardiomegaly",
    "consolidation",
    "pneumothorax",
    "emphysema",
    "infiltrate",
    "mass",
    "thickening",
    "hernia",
    "calcification",
    "scarring",
];

/// Surface forms the generator uses for a finding mention. Report text
/// names findings the way the free-form prompt below does ("... disease of
/// X") and never uses "there", "is" or a sentence-final "." — so the
/// canonical prompt's wording enters the training distribution only when
/// prompt alignment puts it there.
pub const SENTENCE_TEMPLATES: [&str; 4] = [
    "a disease of {}",
    "worsening disease of {} at the base",
    "chronic disease of {} in the left lung",
    "evidence of {}",
];

/// Finding-free sentences mixed into reports.
pub const FILLER_SENTENCES: [&str; 4] = [
    "lungs clear",
    "no acute change",
    "stable exam",
    "heart size normal",
];

/// Class-prompt wordings for zero-shot scoring.
pub const PROMPT_P1: &str = "there is {} .";
pub const PROMPT_P2: &str = "a disease of {}";

pub fn render(template: &str, concept: &str) -> String {
    template.replace("{}", concept)
}

pub fn prompt_template(name: &str) -> Result<&'static str> {
    match name {
        "p1" => Ok(PROMPT_P1),
        "p2" => Ok(PROMPT_P2),
        other => Err(Error::Config(format!(
            "unknown prompt template `{other}` (expected p1 or p2)"
        ))),
    }
}

pub const PAD: &str = "<pad>";

#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Deterministic vocabulary: pad, the prompt words, every word any
    /// template or filler can produce, then the concepts in their given
    /// order.
    pub fn build(concepts: &[String]) -> Vocab {
        let mut words: Vec<String> = vec![PAD.to_string()];
        let push = |w: &str, words: &mut Vec<String>| {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        };
        for w in ["there", "is", "a", "disease", "of", "."] {
            push(w, &mut words);
        }
        for sentence in SENTENCE_TEMPLATES
            .iter()
            .chain(FILLER_SENTENCES.iter())
            .chain([PROMPT_P1, PROMPT_P2].iter())
        {
            for w in sentence.split_whitespace() {
                if w != "{}" {
                    push(w, &mut words);
                }
            }
        }
        for c in concepts {
            push(c, &mut words);
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn contains_all(&self, sentence: &str) -> bool {
        sentence.split_whitespace().all(|w| self.index.contains_key(w))
    }

    /// Whitespace tokenization to ids. Unknown words are input errors: all
    /// text in the pipeline is built from this vocabulary.
    pub fn encode(&self, sentence: &str) -> Result<Vec<usize>> {
        sentence
            .split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Input(format!("word `{w}` not in vocabulary")))
            })
            .collect()
    }
}
