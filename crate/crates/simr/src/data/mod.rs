//! Synthetic paired data: generation, on-disk format, vocabulary and
//! prompt alignment.

pub mod generate;
pub mod prompt;
pub mod store;
pub mod vocab;

pub use generate::{generate, Dataset, GenConfig, Report, Split};
pub use prompt::{align_report, Rewriter};
pub use store::{load_dataset, save_dataset};
pub use vocab::{prompt_template, render, Vocab};
