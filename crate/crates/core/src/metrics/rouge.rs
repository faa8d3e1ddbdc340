use super::{check_corpus, Tokens};
use crate::error::Result;

pub const ROUGE_BETA: f64 = 1.2;

/// Corpus mean of the best LCS-based F-score per image.
pub fn rouge_l(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| refs.iter().map(|r| pair_score(c, r)).fold(0.0, f64::max))
        .sum();
    Ok(100.0 * total / candidates.len() as f64)
}

pub(crate) fn pair_score(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(cand, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / cand.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize;

    #[test]
    fn lcs_anchor() {
        let s = rouge_l(&[tokenize("a b c d")], &[vec![tokenize("a c b d")]]).unwrap();
        assert!((s - 75.0).abs() < 1e-12);
    }

    #[test]
    fn identical_and_empty() {
        let s = tokenize("green trees near a river");
        assert!((rouge_l(&[s.clone()], &[vec![s.clone()]]).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(rouge_l(&[vec![]], &[vec![s]]).unwrap(), 0.0);
    }

    #[test]
    fn best_reference_wins() {
        let c = tokenize("a b c");
        let s = rouge_l(&[c.clone()], &[vec![tokenize("x y"), c]]).unwrap();
        assert!((s - 100.0).abs() < 1e-12);
    }
}
