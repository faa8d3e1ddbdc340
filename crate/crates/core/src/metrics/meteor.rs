use super::{check_corpus, Tokens};
use crate::error::Result;

/// Exact-match METEOR stand-in: no stemming, synonyms or paraphrases.
///
/// Candidate tokens are aligned left to right, each to the first unused
/// identical reference token. A chunk is a run of matches adjacent in both
/// sentences. The score is `F_mean · (1 − 0.5 (ch/m)³)` with
/// `F_mean = 10PR / (R + 9P)`, maximized over references and averaged over
/// the corpus.
pub fn meteor_lite(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| refs.iter().map(|r| pair_score(c, r)).fold(0.0, f64::max))
        .sum();
    Ok(100.0 * total / candidates.len() as f64)
}

pub(crate) fn pair_score(cand: &[String], reference: &[String]) -> f64 {
    let mut used = vec![false; reference.len()];
    let mut aligned: Vec<(usize, usize)> = Vec::new();
    for (i, tok) in cand.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *tok) {
            used[j] = true;
            aligned.push((i, j));
        }
    }
    let m = aligned.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + aligned
        .windows(2)
        .filter(|w| w[1].0 != w[0].0 + 1 || w[1].1 != w[0].1 + 1)
        .count();
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize;

    #[test]
    fn single_token_match_is_fifty() {
        let s = meteor_lite(&[tokenize("road")], &[vec![tokenize("road")]]).unwrap();
        assert!((s - 50.0).abs() < 1e-12);
    }

    #[test]
    fn identical_long_sentence_between_99_and_100() {
        let s = tokenize("many buildings and green trees are around a playground");
        let v = meteor_lite(&[s.clone()], &[vec![s.clone()]]).unwrap();
        let m = s.len() as f64;
        assert!((v - 100.0 * (1.0 - 0.5 / (m * m * m))).abs() < 1e-12);
        assert!(v > 99.0 && v < 100.0);
    }

    #[test]
    fn no_overlap_is_zero() {
        assert_eq!(meteor_lite(&[tokenize("a b")], &[vec![tokenize("c d")]]).unwrap(), 0.0);
    }

    #[test]
    fn reordering_adds_chunks() {
        // aligned positions 2,3,0,1: two chunks
        let c = tokenize("c d a b");
        let r = tokenize("a b c d");
        let expected = 1.0 - 0.5 * (2.0f64 / 4.0).powi(3);
        assert!((pair_score(&c, &r) - expected).abs() < 1e-15);
    }

    #[test]
    fn unmatched_candidate_token_splits_a_chunk() {
        let c = tokenize("a x b");
        let r = tokenize("a b");
        let (p, rec) = (2.0 / 3.0, 1.0);
        let expected = 10.0 * p * rec / (rec + 9.0 * p) * (1.0 - 0.5 * 1.0f64.powi(3));
        assert!((pair_score(&c, &r) - expected).abs() < 1e-15);
    }
}
