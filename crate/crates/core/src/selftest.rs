//! Built-in gradient-check and metric-oracle suites.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Tape};
use crate::config::{CiderVariant, RunConfig};
use crate::data::{gen_synthetic_corpus, tokenize, CorpusHeader, SyntheticSpec, Vocabulary};
use crate::error::Result;
use crate::metrics::{bleu, cider, meteor_lite, rouge_l};
use crate::model::SfdrModel;
use crate::oracle::{naive_bleu, naive_cider, naive_meteor, naive_rouge_l, random_fixture};
use crate::params::Bound;
use crate::ssff::TextPathway;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn check(name: &str, result: Result<(bool, String)>) -> Check {
    match result {
        Ok((passed, detail)) => Check { name: name.into(), passed, detail },
        Err(e) => Check { name: name.into(), passed: false, detail: format!("error: {e}") },
    }
}

const GRAD_TOL: f64 = 1e-4;

fn op_grad(f: impl Fn(&mut Tape, &[crate::autodiff::Var]) -> Result<crate::autodiff::Var> + Sync, params: &[Tensor]) -> Result<(bool, String)> {
    let err = grad_check(f, params, 1e-5)?;
    Ok((err < GRAD_TOL, format!("max rel err {err:.2e}")))
}

/// Gradient checks of individual tape operations and of the whole pipeline.
pub fn gradient_suite() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Tensor::uniform(3, 4, -1.0, 1.0, &mut rng);
    let b = Tensor::uniform(4, 3, -1.0, 1.0, &mut rng);
    let g = Tensor::uniform(1, 4, 0.5, 1.5, &mut rng);
    let bias = Tensor::uniform(1, 4, -0.5, 0.5, &mut rng);
    let mut out = vec![
        check("grad matmul", op_grad(|t, v| { let c = t.matmul(v[0], v[1])?; let s = t.sigmoid(c)?; t.sum(s) }, &[a.clone(), b.clone()])),
        check("grad softmax", op_grad(|t, v| { let s = t.softmax_rows(v[0], 0.7, None)?; let w = t.matmul(s, v[1])?; let r = t.relu(w)?; t.sum(r) }, &[a.clone(), b.clone()])),
        check("grad layer norm", op_grad(|t, v| { let n = t.layer_norm(v[0], v[1], v[2])?; let s = t.sigmoid(n)?; t.sum(s) }, &[a.clone(), g, bias])),
        check("grad cross-entropy", op_grad(|t, v| t.cross_entropy(v[0], &[Some(1), None, Some(3)]), &[a])),
    ];
    out.push(check("grad full pipeline", pipeline_grad()));
    out
}

fn pipeline_grad() -> Result<(bool, String)> {
    let mut spec = SyntheticSpec::desk(11);
    spec.header = CorpusHeader { d_v: 4, d_t: 4, h: 4, d_g: 6, k: 3, d_r: 6 };
    let corpus = gen_synthetic_corpus(1, &spec);
    let mut cfg = RunConfig::desk();
    cfg.ssff_model_dim = 8;
    cfg.decoder_dim = 8;
    cfg.decoder_ffn = 16;
    cfg.decoder_layers = 1;
    cfg.decoder_max_len = 6;
    let model = SfdrModel::new(&cfg, corpus.header, Vocabulary::from_words(["a".to_string(), "b".to_string(), "c".to_string()]))?;
    let bundle = &corpus.bundles[0];
    let tokens = [1u32, 4, 6, 5, 2];
    let params = model.store.tensors().to_vec();
    let mut worst: f64 = 0.0;
    for pathway in [TextPathway::ImageText, TextPathway::ImageOnly] {
        let err = grad_check(|t, v| model.sequence_loss(t, &Bound::from_vars(v), bundle, &tokens, pathway), &params, 1e-4)?;
        worst = worst.max(err);
    }
    Ok((worst < GRAD_TOL, format!("{} values, max rel err {worst:.2e}", model.store.num_values())))
}

/// Fast metrics against the naive oracles plus hand-computed anchors.
pub fn metric_suite() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let fixtures: Vec<_> = (0..20).map(|_| random_fixture(&mut rng)).collect();
    let compare = |f: &dyn Fn(&[Vec<String>], &[Vec<Vec<String>>]) -> Result<f64>| -> Result<(bool, String)> {
        let mut worst: f64 = 0.0;
        for (c, r) in &fixtures {
            worst = worst.max(f(c, r)?);
        }
        Ok((worst < 1e-9, format!("{} fixtures, max |fast − naive| {worst:.1e}", fixtures.len())))
    };
    vec![
        check(
            "bleu oracle",
            compare(&|c, r| Ok(bleu(c, r, 4)?.iter().zip(naive_bleu(c, r, 4)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))),
        ),
        check("rouge-l oracle", compare(&|c, r| Ok((rouge_l(c, r)? - naive_rouge_l(c, r)).abs()))),
        check("meteor-lite oracle", compare(&|c, r| Ok((meteor_lite(c, r)? - naive_meteor(c, r)).abs()))),
        check("cider oracle", compare(&|c, r| Ok((cider(c, r, CiderVariant::Plain)? - naive_cider(c, r, CiderVariant::Plain)).abs()))),
        check("cider-d oracle", compare(&|c, r| Ok((cider(c, r, CiderVariant::CiderD)? - naive_cider(c, r, CiderVariant::CiderD)).abs()))),
        check(
            "bleu-1 anchor",
            bleu(&[tokenize("the cat")], &[vec![tokenize("the cat sat")]], 1).map(|b| ((b[0] - 60.653065971263345).abs() < 1e-9, format!("{:.2}", b[0]))),
        ),
        check(
            "rouge-l anchor",
            rouge_l(&[tokenize("a b c d")], &[vec![tokenize("a c b d")]]).map(|r| ((r - 75.0).abs() < 1e-9, format!("{r:.2}"))),
        ),
    ]
}

/// Every suite, in display order.
pub fn run_all() -> Vec<Check> {
    let mut all = gradient_suite();
    all.extend(metric_suite());
    all
}
