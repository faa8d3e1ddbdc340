//! Deliberately naive reference implementations of the caption metrics.
//!
//! These use different algorithms from [`crate::metrics`]: linear scans
//! instead of hash maps, subset enumeration instead of dynamic programming
//! for LCS, and dense vectors over an explicit n-gram list for CIDEr. They
//! exist to cross-check the fast implementations.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::config::CiderVariant;
use crate::metrics::{Tokens, ROUGE_BETA};

fn grams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= tokens.len() {
        out.push(tokens[i..i + n].to_vec());
        i += 1;
    }
    out
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

/// Corpus BLEU-1 … BLEU-`max_n` on the 0–100 scale.
pub fn naive_bleu(candidates: &[Tokens], references: &[Vec<Tokens>], max_n: usize) -> Vec<f64> {
    let mut c_len = 0;
    let mut r_len = 0;
    for (c, refs) in candidates.iter().zip(references) {
        c_len += c.len();
        let mut best = refs[0].len();
        for r in refs {
            let (d, bd) = (r.len().abs_diff(c.len()), best.abs_diff(c.len()));
            if d < bd || (d == bd && r.len() < best) {
                best = r.len();
            }
        }
        r_len += best;
    }
    let mut precisions = Vec::new();
    for n in 1..=max_n {
        let (mut hit, mut total) = (0, 0);
        for (c, refs) in candidates.iter().zip(references) {
            let cg = grams(c, n);
            total += cg.len();
            for g in distinct(&cg) {
                let mut limit = 0;
                for r in refs {
                    limit = limit.max(count(&grams(r, n), &g));
                }
                hit += count(&cg, &g).min(limit);
            }
        }
        precisions.push(if total == 0 { 0.0 } else { hit as f64 / total as f64 });
    }
    let bp = if c_len == 0 {
        0.0
    } else if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    (1..=max_n)
        .map(|n| {
            let product: f64 = precisions[..n].iter().product();
            100.0 * bp * product.powf(1.0 / n as f64)
        })
        .collect()
}

fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|s| it.any(|x| x == *s))
}

fn lcs_brute(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1u32 << a.len()) {
        let ones = mask.count_ones() as usize;
        if ones <= best {
            continue;
        }
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        if is_subsequence(&sub, b) {
            best = ones;
        }
    }
    best
}

/// ROUGE-L by exhaustive subsequence search. Candidates must be at most 20
/// tokens long.
pub fn naive_rouge_l(candidates: &[Tokens], references: &[Vec<Tokens>]) -> f64 {
    assert!(candidates.iter().all(|c| c.len() <= 20), "oracle is exponential in candidate length");
    let b2 = ROUGE_BETA * ROUGE_BETA;
    let mut sum = 0.0;
    for (c, refs) in candidates.iter().zip(references) {
        let mut best = 0.0f64;
        for r in refs {
            let l = lcs_brute(c, r) as f64;
            if l > 0.0 {
                best = best.max((1.0 + b2) * l / (c.len() as f64 + b2 * r.len() as f64));
            }
        }
        sum += best;
    }
    100.0 * sum / candidates.len() as f64
}

/// Raw corpus CIDEr (0–10) using dense TF-IDF vectors over every n-gram
/// that appears anywhere in the corpus.
pub fn naive_cider(candidates: &[Tokens], references: &[Vec<Tokens>], variant: CiderVariant) -> f64 {
    let images = references.len() as f64;
    let mut per_n_vocab: Vec<Vec<Vec<String>>> = Vec::new();
    for n in 1..=4 {
        let mut all = Vec::new();
        for (c, refs) in candidates.iter().zip(references) {
            all.extend(grams(c, n));
            for r in refs {
                all.extend(grams(r, n));
            }
        }
        per_n_vocab.push(distinct(&all));
    }
    let idf = |g: &Vec<String>| -> f64 {
        let n = g.len();
        let df = references.iter().filter(|refs| refs.iter().any(|r| grams(r, n).contains(g))).count();
        images.ln() - (df.max(1) as f64).ln()
    };
    let idfs: Vec<Vec<f64>> = per_n_vocab.iter().map(|v| v.iter().map(idf).collect()).collect();
    let dense = |t: &[String], n: usize| -> Vec<f64> {
        let g = grams(t, n + 1);
        per_n_vocab[n].iter().zip(&idfs[n]).map(|(v, w)| count(&g, v) as f64 * w).collect()
    };
    let mut total = 0.0;
    for (c, refs) in candidates.iter().zip(references) {
        let mut image = 0.0;
        for r in refs {
            let mut per_n = 0.0;
            for n in 0..4 {
                let (vc, vr) = (dense(c, n), dense(r, n));
                let dot: f64 = match variant {
                    CiderVariant::Plain => vc.iter().zip(&vr).map(|(a, b)| a * b).sum(),
                    CiderVariant::CiderD => vc.iter().zip(&vr).map(|(a, b)| a.min(*b) * b).sum(),
                };
                let nc = vc.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nr = vr.iter().map(|x| x * x).sum::<f64>().sqrt();
                let mut sim = if nc > 0.0 && nr > 0.0 { dot / (nc * nr) } else { dot };
                if variant == CiderVariant::CiderD {
                    let delta = c.len() as f64 - r.len() as f64;
                    sim *= (-delta * delta / 72.0).exp();
                }
                per_n += sim;
            }
            image += per_n / 4.0;
        }
        total += 10.0 * image / refs.len() as f64;
    }
    total / candidates.len() as f64
}

/// METEOR-lite with the alignment recorded as an explicit position map.
pub fn naive_meteor(candidates: &[Tokens], references: &[Vec<Tokens>]) -> f64 {
    let mut sum = 0.0;
    for (c, refs) in candidates.iter().zip(references) {
        let mut best = 0.0f64;
        for r in refs {
            let mut taken = vec![false; r.len()];
            let mut map: Vec<Option<usize>> = vec![None; c.len()];
            for i in 0..c.len() {
                for j in 0..r.len() {
                    if !taken[j] && r[j] == c[i] {
                        taken[j] = true;
                        map[i] = Some(j);
                        break;
                    }
                }
            }
            let m = map.iter().flatten().count();
            if m == 0 {
                continue;
            }
            let mut chunks = 0;
            let mut prev: Option<(usize, usize)> = None;
            for (i, j) in map.iter().enumerate() {
                if let Some(j) = *j {
                    let continues = matches!(prev, Some((pi, pj)) if pi + 1 == i && pj + 1 == j);
                    if !continues {
                        chunks += 1;
                    }
                    prev = Some((i, j));
                }
            }
            let p = m as f64 / c.len() as f64;
            let rc = m as f64 / r.len() as f64;
            let alpha = 0.9;
            let f_mean = p * rc / (alpha * p + (1.0 - alpha) * rc);
            let frag = chunks as f64 / m as f64;
            best = best.max(f_mean * (1.0 - 0.5 * frag * frag * frag));
        }
        sum += best;
    }
    100.0 * sum / candidates.len() as f64
}

/// A random corpus of small token lists over a tiny vocabulary, so that
/// n-gram overlaps are common.
pub fn random_fixture<R: Rng + ?Sized>(rng: &mut R) -> (Vec<Tokens>, Vec<Vec<Tokens>>) {
    const WORDS: [&str; 7] = ["a", "plane", "is", "on", "the", "runway", "green"];
    let images = rng.random_range(2..=10);
    let sentence = |rng: &mut R| -> Tokens {
        let len = rng.random_range(1..=12);
        (0..len).map(|_| WORDS.choose(rng).expect("non-empty").to_string()).collect()
    };
    let mut cands = Vec::with_capacity(images);
    let mut refs = Vec::with_capacity(images);
    for _ in 0..images {
        cands.push(sentence(rng));
        let n_refs = rng.random_range(1..=4);
        refs.push((0..n_refs).map(|_| sentence(rng)).collect());
    }
    (cands, refs)
}
