//! Caption generation: greedy decoding, beam search, exhaustive search for
//! tiny vocabularies, and multinomial sampling.
//!
//! PAD, BOS and UNK are never generated. Ties between equal scores go to the
//! lower token id, except that EOS ranks after every word so that a flat
//! distribution keeps emitting words rather than stopping.

use std::cmp::Ordering;

use rand::Rng;
use rayon::prelude::*;

use crate::data::{FeatureBundle, TokenSeq, BOS, EOS, NUM_SPECIALS};
use crate::error::{Error, Result};
use crate::model::SfdrModel;
use crate::tensor::Tensor;

/// Next-token log-probabilities for a prefix that starts with BOS.
pub trait StepScorer {
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
    /// Longest sequence, BOS and EOS included.
    fn max_len(&self) -> usize;
}

/// A model bound to one encoded image.
pub struct ModelScorer<'a> {
    model: &'a SfdrModel,
    context: Tensor,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a SfdrModel, bundle: &FeatureBundle) -> Result<Self> {
        Ok(ModelScorer {
            model,
            context: model.context(bundle)?,
        })
    }

    pub fn context(&self) -> &Tensor {
        &self.context
    }
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        self.model.next_log_probs(&self.context, prefix)
    }

    fn max_len(&self) -> usize {
        self.model.max_len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionHypothesis {
    pub tokens: TokenSeq,
    /// Sum of the per-step log-probabilities.
    pub logprob: f64,
    pub finished: bool,
}

impl CaptionHypothesis {
    /// `logprob / len^length_norm`, with `len` counting generated tokens.
    pub fn score(&self, length_norm: f64) -> f64 {
        normalized(self.logprob, self.tokens.len() - 1, length_norm)
    }
}

fn normalized(logprob: f64, generated: usize, length_norm: f64) -> f64 {
    if length_norm == 0.0 {
        logprob
    } else {
        logprob / (generated.max(1) as f64).powf(length_norm)
    }
}

/// Whether `id` may be generated.
pub fn is_generable(id: u32) -> bool {
    id == EOS || id as usize >= NUM_SPECIALS
}

/// Sort key used for tie-breaking: EOS after every word.
pub fn tie_rank(id: u32) -> u32 {
    if id == EOS {
        u32::MAX
    } else {
        id
    }
}

fn tie_cmp(a: &[u32], b: &[u32]) -> Ordering {
    a.iter().map(|&t| tie_rank(t)).cmp(b.iter().map(|&t| tie_rank(t)))
}

/// Best-first order: higher score, then lower tie ranks.
fn rank_cmp(a: &CaptionHypothesis, b: &CaptionHypothesis, length_norm: f64) -> Ordering {
    b.score(length_norm)
        .total_cmp(&a.score(length_norm))
        .then_with(|| tie_cmp(a.tokens.ids(), b.tokens.ids()))
}

fn is_finished(tokens: &[u32], max_len: usize) -> bool {
    tokens.last() == Some(&EOS) || tokens.len() >= max_len
}

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len < 2 {
        return Err(Error::Argument(format!("max_len {max_len} leaves no room for a generated token")));
    }
    Ok(())
}

/// Highest-probability token at every step until EOS or `max_len`.
pub fn greedy<S: StepScorer + ?Sized>(scorer: &S) -> Result<CaptionHypothesis> {
    let max_len = scorer.max_len();
    check_max_len(max_len)?;
    let mut tokens = vec![BOS];
    let mut logprob = 0.0;
    while !is_finished(&tokens, max_len) {
        let lp = scorer.log_probs(&tokens)?;
        let best = (0..lp.len() as u32)
            .filter(|&id| is_generable(id))
            .min_by(|&a, &b| lp[b as usize].total_cmp(&lp[a as usize]).then(tie_rank(a).cmp(&tie_rank(b))))
            .ok_or_else(|| Error::Argument("vocabulary has no generable tokens".into()))?;
        logprob += lp[best as usize];
        tokens.push(best);
    }
    Ok(CaptionHypothesis {
        tokens: TokenSeq(tokens),
        logprob,
        finished: true,
    })
}

/// Beam search keeping the `beam` best prefixes per step.
///
/// A candidate that finishes enters the result pool only when it ranks
/// within the top `beam` of its step; the others compete for the live set.
/// The search stops once `beam` results score at least the best bound any
/// live prefix could still reach. Results are sorted best first.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &S, beam: usize, length_norm: f64) -> Result<Vec<CaptionHypothesis>> {
    if beam < 1 {
        return Err(Error::Argument("beam width must be at least 1".into()));
    }
    if !(length_norm >= 0.0 && length_norm.is_finite()) {
        return Err(Error::Argument(format!("length_norm {length_norm} must be finite and ≥ 0")));
    }
    let max_len = scorer.max_len();
    check_max_len(max_len)?;
    let mut live = vec![CaptionHypothesis {
        tokens: TokenSeq(vec![BOS]),
        logprob: 0.0,
        finished: false,
    }];
    let mut done: Vec<CaptionHypothesis> = Vec::new();
    while !live.is_empty() {
        let mut candidates = Vec::new();
        for h in &live {
            let lp = scorer.log_probs(h.tokens.ids())?;
            for id in (0..lp.len() as u32).filter(|&id| is_generable(id)) {
                let mut tokens = h.tokens.0.clone();
                tokens.push(id);
                let finished = is_finished(&tokens, max_len);
                candidates.push(CaptionHypothesis {
                    tokens: TokenSeq(tokens),
                    logprob: h.logprob + lp[id as usize],
                    finished,
                });
            }
        }
        if candidates.is_empty() {
            return Err(Error::Argument("vocabulary has no generable tokens".into()));
        }
        candidates.sort_by(|a, b| rank_cmp(a, b, length_norm));
        let mut next = Vec::with_capacity(beam);
        for (rank, c) in candidates.into_iter().enumerate() {
            if c.finished {
                if rank < beam {
                    done.push(c);
                }
            } else if next.len() < beam {
                next.push(c);
            } else if rank >= beam {
                break;
            }
        }
        live = next;
        done.sort_by(|a, b| rank_cmp(a, b, length_norm));
        if done.len() >= beam {
            let worst = done[beam - 1].score(length_norm);
            let bound = live
                .iter()
                .map(|h| if length_norm == 0.0 { h.logprob } else { normalized(h.logprob, max_len - 1, length_norm) })
                .fold(f64::NEG_INFINITY, f64::max);
            if worst >= bound {
                break;
            }
        }
    }
    done.truncate(beam);
    Ok(done)
}

/// Every finishable sequence, best first. Exponential; for tiny
/// vocabularies and lengths only.
pub fn exhaustive<S: StepScorer + ?Sized>(scorer: &S, length_norm: f64) -> Result<Vec<CaptionHypothesis>> {
    let max_len = scorer.max_len();
    check_max_len(max_len)?;
    let mut out = Vec::new();
    let mut stack = vec![(vec![BOS], 0.0)];
    while let Some((tokens, logprob)) = stack.pop() {
        if is_finished(&tokens, max_len) {
            out.push(CaptionHypothesis {
                tokens: TokenSeq(tokens),
                logprob,
                finished: true,
            });
            continue;
        }
        let lp = scorer.log_probs(&tokens)?;
        for id in (0..lp.len() as u32).filter(|&id| is_generable(id)) {
            let mut t = tokens.clone();
            t.push(id);
            stack.push((t, logprob + lp[id as usize]));
        }
    }
    out.sort_by(|a, b| rank_cmp(a, b, length_norm));
    Ok(out)
}

/// Draws a sequence token by token from the model distribution restricted
/// to generable tokens, at temperature 1.
pub fn sample<S: StepScorer + ?Sized, R: Rng + ?Sized>(scorer: &S, rng: &mut R) -> Result<CaptionHypothesis> {
    let max_len = scorer.max_len();
    check_max_len(max_len)?;
    let mut tokens = vec![BOS];
    let mut logprob = 0.0;
    while !is_finished(&tokens, max_len) {
        let lp = scorer.log_probs(&tokens)?;
        let ids: Vec<u32> = (0..lp.len() as u32).filter(|&id| is_generable(id)).collect();
        let mass: f64 = ids.iter().map(|&id| lp[id as usize].exp()).sum();
        let mut u = rng.random::<f64>() * mass;
        let mut pick = *ids.last().ok_or_else(|| Error::Argument("vocabulary has no generable tokens".into()))?;
        for &id in &ids {
            u -= lp[id as usize].exp();
            if u < 0.0 {
                pick = id;
                break;
            }
        }
        logprob += lp[pick as usize];
        tokens.push(pick);
    }
    Ok(CaptionHypothesis {
        tokens: TokenSeq(tokens),
        logprob,
        finished: true,
    })
}

/// Greedy caption for one image.
pub fn greedy_decode(model: &SfdrModel, bundle: &FeatureBundle) -> Result<CaptionHypothesis> {
    greedy(&ModelScorer::new(model, bundle)?)
}

/// Beam-searched captions for one image, best first.
pub fn beam_decode(model: &SfdrModel, bundle: &FeatureBundle, beam: usize, length_norm: f64) -> Result<Vec<CaptionHypothesis>> {
    beam_search(&ModelScorer::new(model, bundle)?, beam, length_norm)
}

/// Best caption text per image, in input order, decoded in parallel.
pub fn caption_all(model: &SfdrModel, bundles: &[FeatureBundle], beam: usize, length_norm: f64) -> Result<Vec<(String, CaptionHypothesis)>> {
    bundles
        .par_iter()
        .map(|b| {
            let best = if beam == 1 {
                greedy_decode(model, b)?
            } else {
                beam_decode(model, b, beam, length_norm)?.swap_remove(0)
            };
            Ok((b.image_id.clone(), best))
        })
        .collect()
}

/// Cross-attention rows behind a caption, `[layer][head]`, each
/// `generated × m`: row `t` is the attention used to predict token `t + 1`.
pub fn attention_maps(model: &SfdrModel, bundle: &FeatureBundle, hyp: &CaptionHypothesis) -> Result<Vec<Vec<Tensor>>> {
    let context = model.context(bundle)?;
    let ids = hyp.tokens.ids();
    model.cross_attention(&context, &ids[..ids.len() - 1])
}

/// Whitespace-separated numeric grid, one line per row.
pub fn format_grid(t: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = t.row_slice(r).iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Log-probabilities drawn from a hash of the prefix.
    struct TableScorer {
        vocab: usize,
        max_len: usize,
        seed: u64,
    }

    impl StepScorer for TableScorer {
        fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
            let mut h = self.seed;
            for &t in prefix {
                h = h.wrapping_mul(6364136223846793005).wrapping_add(t as u64 + 1);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            let logits = Tensor::randn(1, self.vocab, 2.0, &mut rng);
            Ok(logits.log_softmax_rows().into_data())
        }

        fn max_len(&self) -> usize {
            self.max_len
        }
    }

    struct Flat(usize, usize);

    impl StepScorer for Flat {
        fn log_probs(&self, _: &[u32]) -> Result<Vec<f64>> {
            Ok(vec![-(self.0 as f64).ln(); self.0])
        }
        fn max_len(&self) -> usize {
            self.1
        }
    }

    #[test]
    fn flat_distribution_emits_first_word_until_max_len() {
        let h = greedy(&Flat(9, 20)).unwrap();
        assert_eq!(h.tokens.len(), 20);
        assert!(h.tokens.ids()[1..].iter().all(|&t| t == 4));
        let b = beam_search(&Flat(9, 6), 1, 0.0).unwrap();
        assert_eq!(b[0].tokens, greedy(&Flat(9, 6)).unwrap().tokens);
    }

    #[test]
    fn beam_width_one_is_greedy() {
        for seed in 0..30 {
            let s = TableScorer { vocab: 9, max_len: 7, seed };
            let g = greedy(&s).unwrap();
            let b = beam_search(&s, 1, 0.0).unwrap();
            assert_eq!(b.len(), 1);
            assert_eq!(b[0], g);
        }
    }

    #[test]
    fn tiny_beam_matches_exhaustive_search() {
        for seed in 0..30 {
            let s = TableScorer { vocab: 6, max_len: 5, seed };
            let all = exhaustive(&s, 0.0).unwrap();
            let b = beam_search(&s, 5, 0.0).unwrap();
            assert_eq!(b[0].tokens, all[0].tokens, "seed {seed}");
            assert!((b[0].logprob - all[0].logprob).abs() < 1e-12);
        }
    }

    #[test]
    fn results_are_sorted_and_well_formed() {
        let s = TableScorer { vocab: 10, max_len: 8, seed: 3 };
        let b = beam_search(&s, 4, 0.7).unwrap();
        assert!(b.len() <= 4);
        for w in b.windows(2) {
            assert!(w[0].score(0.7) >= w[1].score(0.7));
        }
        for h in &b {
            assert_eq!(h.tokens.ids()[0], BOS);
            assert!(h.tokens.ids()[1..].iter().all(|&t| is_generable(t)));
            let mut lp = 0.0;
            for t in 1..h.tokens.len() {
                lp += s.log_probs(&h.tokens.ids()[..t]).unwrap()[h.tokens.ids()[t] as usize];
            }
            assert!((lp - h.logprob).abs() < 1e-10);
        }
    }

    #[test]
    fn wider_beams_never_score_worse_on_tiny_models() {
        for seed in 0..20 {
            let s = TableScorer { vocab: 6, max_len: 5, seed };
            let mut prev = f64::NEG_INFINITY;
            for beam in 1..=5 {
                let top = beam_search(&s, beam, 0.0).unwrap()[0].logprob;
                assert!(top >= prev - 1e-12, "seed {seed} beam {beam}");
                prev = top;
            }
        }
    }

    #[test]
    fn zero_beam_is_an_argument_error() {
        assert!(matches!(beam_search(&Flat(6, 4), 0, 0.0), Err(Error::Argument(_))));
    }

    #[test]
    fn sampling_is_seeded_and_matches_its_logprob() {
        let s = TableScorer { vocab: 8, max_len: 6, seed: 1 };
        let a = sample(&s, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample(&s, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let mut lp = 0.0;
        for t in 1..a.tokens.len() {
            lp += s.log_probs(&a.tokens.ids()[..t]).unwrap()[a.tokens.ids()[t] as usize];
        }
        assert!((lp - a.logprob).abs() < 1e-12);
    }
}
