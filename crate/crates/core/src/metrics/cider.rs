use std::collections::{HashMap, HashSet};

use log::warn;

use super::{check_corpus, ngram_counts, Tokens};
use crate::config::CiderVariant;
use crate::error::{Error, Result};

const MAX_N: usize = 4;
const SIGMA: f64 = 6.0;

/// TF-IDF n-gram consensus scorer with document frequencies taken from a
/// reference corpus.
#[derive(Clone, Debug)]
pub struct CiderScorer {
    df: HashMap<Tokens, usize>,
    log_images: f64,
    variant: CiderVariant,
}

struct Weighted {
    vecs: Vec<HashMap<Tokens, f64>>,
    norms: Vec<f64>,
    len: usize,
}

impl CiderScorer {
    /// Document frequency counts each image once per n-gram, over the union
    /// of its references.
    pub fn new(references: &[Vec<Tokens>], variant: CiderVariant) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Argument("CIDEr needs at least one image".into()));
        }
        let mut df: HashMap<Tokens, usize> = HashMap::new();
        for refs in references {
            let mut seen: HashSet<&[String]> = HashSet::new();
            for r in refs {
                for n in 1..=MAX_N {
                    seen.extend(ngram_counts(r, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        if references.len() == 1 {
            warn!("CIDEr over a single image: every idf is zero, scores are 0");
        }
        Ok(CiderScorer {
            df,
            log_images: (references.len() as f64).ln(),
            variant,
        })
    }

    pub fn variant(&self) -> CiderVariant {
        self.variant
    }

    fn weigh(&self, tokens: &[String]) -> Weighted {
        let mut vecs = Vec::with_capacity(MAX_N);
        let mut norms = Vec::with_capacity(MAX_N);
        for n in 1..=MAX_N {
            let mut v = HashMap::new();
            let mut sq = 0.0;
            for (g, tf) in ngram_counts(tokens, n) {
                let df = self.df.get(g).copied().unwrap_or(0).max(1) as f64;
                let w = tf as f64 * (self.log_images - df.ln());
                sq += w * w;
                v.insert(g.to_vec(), w);
            }
            vecs.push(v);
            norms.push(sq.sqrt());
        }
        Weighted { vecs, norms, len: tokens.len() }
    }

    fn similarity(&self, cand: &Weighted, reference: &Weighted) -> f64 {
        let mut total = 0.0;
        for n in 0..MAX_N {
            let mut dot = 0.0;
            for (g, wc) in &cand.vecs[n] {
                if let Some(wr) = reference.vecs[n].get(g) {
                    dot += match self.variant {
                        CiderVariant::Plain => wc * wr,
                        CiderVariant::CiderD => wc.min(*wr) * wr,
                    };
                }
            }
            if cand.norms[n] != 0.0 && reference.norms[n] != 0.0 {
                dot /= cand.norms[n] * reference.norms[n];
            }
            if self.variant == CiderVariant::CiderD {
                let delta = cand.len as f64 - reference.len as f64;
                dot *= (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
            }
            total += dot;
        }
        total / MAX_N as f64
    }

    /// Raw score (0–10) of one candidate against its references.
    pub fn score(&self, candidate: &[String], references: &[Tokens]) -> Result<f64> {
        if references.is_empty() {
            return Err(Error::Reward("CIDEr reward needs at least one reference".into()));
        }
        let c = self.weigh(candidate);
        let sum: f64 = references.iter().map(|r| self.similarity(&c, &self.weigh(r))).sum();
        Ok(10.0 * sum / references.len() as f64)
    }

    /// Corpus mean of the raw per-image scores.
    pub fn corpus(&self, candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
        check_corpus(candidates, references)?;
        let mut total = 0.0;
        for (c, refs) in candidates.iter().zip(references) {
            total += self.score(c, refs)?;
        }
        Ok(total / candidates.len() as f64)
    }
}

/// Raw corpus CIDEr (0–10) with document frequencies from `references`.
pub fn cider(candidates: &[Tokens], references: &[Vec<Tokens>], variant: CiderVariant) -> Result<f64> {
    check_corpus(candidates, references)?;
    CiderScorer::new(references, variant)?.corpus(candidates, references)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize;

    fn refs(sets: &[&[&str]]) -> Vec<Vec<Tokens>> {
        sets.iter().map(|s| s.iter().map(|x| tokenize(x)).collect()).collect()
    }

    #[test]
    fn disjoint_candidate_scores_zero() {
        let r = refs(&[&["a plane on the runway"], &["green trees by a river"]]);
        let c = vec![tokenize("xx yy"), tokenize("zz ww")];
        assert_eq!(cider(&c, &r, CiderVariant::Plain).unwrap(), 0.0);
    }

    #[test]
    fn exact_unique_match_scores_ten() {
        // each image's single reference shares no n-gram with the other's
        let r = refs(&[&["a plane on runway"], &["green trees by river"]]);
        let c = vec![tokenize("a plane on runway"), tokenize("green trees by river")];
        assert!((cider(&c, &r, CiderVariant::Plain).unwrap() - 10.0).abs() < 1e-12);
        assert!((cider(&c, &r, CiderVariant::CiderD).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn single_image_corpus_is_zero() {
        let r = refs(&[&["a plane"]]);
        assert_eq!(cider(&[tokenize("a plane")], &r, CiderVariant::Plain).unwrap(), 0.0);
    }

    #[test]
    fn idf_is_corpus_global() {
        let base = refs(&[&["red car today"], &["blue boat"]]);
        let cands = vec![tokenize("red car"), tokenize("blue boat")];
        let alone = CiderScorer::new(&base, CiderVariant::Plain).unwrap().score(&cands[0], &base[0]).unwrap();
        let mut more = base.clone();
        more.push(refs(&[&["red house"]]).remove(0));
        let with = CiderScorer::new(&more, CiderVariant::Plain).unwrap().score(&cands[0], &more[0]).unwrap();
        assert!((alone - with).abs() > 1e-6);
    }

    #[test]
    fn empty_references_are_a_reward_error() {
        let s = CiderScorer::new(&refs(&[&["a"], &["b"]]), CiderVariant::Plain).unwrap();
        assert!(matches!(s.score(&tokenize("a"), &[]), Err(Error::Reward(_))));
    }
}
