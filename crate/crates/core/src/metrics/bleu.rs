use std::collections::HashMap;

use super::{check_corpus, ngram_counts, Tokens};
use crate::error::Result;

/// Corpus BLEU-1 … BLEU-`max_n`.
///
/// Clipped n-gram matches and candidate n-gram totals are summed over the
/// corpus before taking precisions. The brevity penalty compares the total
/// candidate length with the summed closest reference lengths, preferring
/// the shorter reference on ties.
pub fn bleu(candidates: &[Tokens], references: &[Vec<Tokens>], max_n: usize) -> Result<Vec<f64>> {
    check_corpus(candidates, references)?;
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        ref_len += closest_length(cand.len(), refs);
        for n in 1..=max_n {
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in ngram_counts(cand, n) {
                matches[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    if cand_len == 0 {
        return Ok(vec![0.0; max_n]);
    }
    let bp = if cand_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    let mut log_sum = 0.0;
    let mut out = Vec::with_capacity(max_n);
    for n in 0..max_n {
        if matches[n] == 0 || log_sum == f64::NEG_INFINITY {
            log_sum = f64::NEG_INFINITY;
            out.push(0.0);
            continue;
        }
        log_sum += (matches[n] as f64 / totals[n] as f64).ln();
        out.push(100.0 * bp * (log_sum / (n + 1) as f64).exp());
    }
    Ok(out)
}

fn closest_length(c: usize, refs: &[Tokens]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .expect("non-empty references")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize;

    #[test]
    fn brevity_penalty_anchor() {
        let b = bleu(&[tokenize("the cat")], &[vec![tokenize("the cat sat")]], 1).unwrap();
        assert!((b[0] - 100.0 * (-0.5f64).exp()).abs() < 1e-12);
        assert_eq!(format!("{:.2}", b[0]), "60.65");
    }

    #[test]
    fn perfect_and_disjoint() {
        let s = tokenize("a small plane on the runway");
        assert!(bleu(&[s.clone()], &[vec![s.clone()]], 4).unwrap().iter().all(|v| (v - 100.0).abs() < 1e-12));
        assert_eq!(bleu(&[tokenize("x y z w")], &[vec![s]], 4).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn closest_reference_prefers_shorter_on_ties() {
        let refs = vec![tokenize("a b c d"), tokenize("a b")];
        assert_eq!(closest_length(3, &refs), 2);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(bleu(&[], &[], 4).is_err());
    }
}
