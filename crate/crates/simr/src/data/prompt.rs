//! Prompt alignment: rewrite a free-form report into canonical class-prompt
//! sentences, one per mentioned concept, so training text matches the
//! wording used for zero-shot scoring. A remote rewriter can be plugged in
//! over HTTP; any failure there falls back to the rule-based rewrite, so
//! alignment never aborts a run.

use crate::data::vocab::{render, Vocab, PROMPT_P1};
use serde::{Deserialize, Serialize};
use std::time::Duration;

/// Rule-based rewrite: every concept mentioned anywhere in the report gets
/// exactly one canonical sentence, emitted in vocabulary order. Mentions of
/// the same concept merge; already-canonical input maps to itself.
pub fn align_report(sentences: &[String], concepts: &[String]) -> Vec<String> {
    concepts
        .iter()
        .filter(|c| {
            sentences
                .iter()
                .any(|s| s.split_whitespace().any(|w| w == c.as_str()))
        })
        .map(|c| render(PROMPT_P1, c))
        .collect()
}

#[derive(Serialize)]
struct RewriteRequest<'a> {
    report: String,
    instruction: &'static str,
    vocab: &'a [String],
}

#[derive(Deserialize)]
struct RewriteResponse {
    rewritten: String,
}

const INSTRUCTION: &str =
    "Rewrite the report as one sentence per finding, each of the form `there is <finding> .`, \
     findings ordered as in the vocabulary list.";

/// Remote rewriter with a rule-based fallback.
pub struct Rewriter {
    /// POST endpoint; None means rule-based only.
    pub endpoint: Option<String>,
    /// extra attempts after the first failure
    pub retries: u32,
    /// starting backoff, doubled per retry
    pub backoff: Duration,
    fallbacks: std::cell::Cell<u64>,
}

impl Rewriter {
    pub fn rule_based() -> Rewriter {
        Rewriter {
            endpoint: None,
            retries: 2,
            backoff: Duration::from_millis(100),
            fallbacks: std::cell::Cell::new(0),
        }
    }

    pub fn remote(endpoint: String) -> Rewriter {
        Rewriter {
            endpoint: Some(endpoint),
            ..Rewriter::rule_based()
        }
    }

    /// How often the remote path failed and the rule-based rewrite was used.
    pub fn fallback_count(&self) -> u64 {
        self.fallbacks.get()
    }

    /// Align one report. Never fails: remote errors, malformed responses and
    /// out-of-vocabulary words all degrade to the rule-based rewrite.
    pub fn align(&self, sentences: &[String], concepts: &[String], vocab: &Vocab) -> Vec<String> {
        let Some(url) = &self.endpoint else {
            return align_report(sentences, concepts);
        };
        match self.try_remote(url, sentences, concepts, vocab) {
            Ok(out) => out,
            Err(why) => {
                self.fallbacks.set(self.fallbacks.get() + 1);
                // warn once, not once per report; the total lands in the run summary
                if self.fallbacks.get() == 1 {
                    eprintln!(
                        "warning: remote rewriter unavailable ({why}); using rule-based rewrite"
                    );
                }
                align_report(sentences, concepts)
            }
        }
    }

    fn try_remote(
        &self,
        url: &str,
        sentences: &[String],
        concepts: &[String],
        vocab: &Vocab,
    ) -> std::result::Result<Vec<String>, String> {
        let req = RewriteRequest {
            report: sentences.join("\n"),
            instruction: INSTRUCTION,
            vocab: concepts,
        };
        let mut wait = self.backoff;
        let mut last_err = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(wait);
                wait *= 2;
            }
            match post_rewrite(url, &req) {
                Ok(body) => {
                    let lines: Vec<String> = body
                        .rewritten
                        .lines()
                        .map(str::trim)
                        .filter(|l| !l.is_empty())
                        .map(str::to_string)
                        .collect();
                    if lines.is_empty() {
                        last_err = "empty rewrite".to_string();
                        continue;
                    }
                    if let Some(bad) = lines.iter().find(|l| !vocab.contains_all(l)) {
                        return Err(format!("rewrite contains out-of-vocabulary words: `{bad}`"));
                    }
                    return Ok(lines);
                }
                Err(e) => last_err = e,
            }
        }
        Err(last_err)
    }
}

fn post_rewrite(url: &str, req: &RewriteRequest) -> std::result::Result<RewriteResponse, String> {
    let mut resp = ureq::post(url)
        .config()
        .timeout_global(Some(Duration::from_secs(5)))
        .build()
        .send_json(req)
        .map_err(|e| e.to_string())?;
    resp.body_mut()
        .read_json::<RewriteResponse>()
        .map_err(|e| e.to_string())
}
