//! Corpus-level caption metrics and the aggregate scores built from them.
//!
//! Every metric takes tokenized candidates, one per image, and a non-empty
//! set of tokenized references per image. Scores are on a 0–100 scale,
//! except CIDEr, which is reported as 100 × its raw 0–10 value.

mod bleu;
mod cider;
mod meteor;
mod report;
mod rouge;

use std::collections::HashMap;

pub use bleu::bleu;
pub use cider::{cider, CiderScorer};
pub use meteor::meteor_lite;
pub use report::{aggregate, evaluate, MetricReport, METEOR_NOTE};
pub use rouge::{rouge_l, ROUGE_BETA};

use crate::error::{Error, Result};

pub type Tokens = Vec<String>;

/// Checks the corpus shape shared by every metric.
pub(crate) fn check_corpus(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Argument("empty candidate corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Argument(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(Error::Argument(format!("image {i} has no references")));
    }
    Ok(())
}

/// Counts of every `n`-gram in `tokens`.
pub(crate) fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}
