//! Cross-entropy training followed by self-critical sequence training.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::checkpoint::TrainState;
use crate::config::{RunConfig, Stage};
use crate::data::{tokenize, Corpus, FeatureBundle, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::inference::{greedy, sample, ModelScorer};
use crate::metrics::{CiderScorer, Tokens};
use crate::model::SfdrModel;
use crate::params::ParamStore;
use crate::ssff::TextPathway;
use crate::tensor::Tensor;

/// Summed negative log-likelihood of `targets` under row-wise softmax of
/// `logits`. PAD targets contribute nothing.
pub fn ce_loss(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::Argument(format!("{} logit rows for {} targets", logits.rows(), targets.len())));
    }
    let lp = logits.log_softmax_rows();
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        if t as usize >= logits.cols() {
            return Err(Error::Vocabulary { id: t as usize, size: logits.cols() });
        }
        loss -= lp.get(r, t as usize);
    }
    Ok(loss)
}

/// Mixes seed components into one 64-bit seed (splitmix64 finalizer).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243F_6A88_85A3_08D3u64;
    for &p in parts {
        h = (h ^ p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

fn stage_code(stage: Stage) -> u64 {
    match stage {
        Stage::Ce => 1,
        Stage::Scst => 2,
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Adaptive moment estimation without weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Adam { beta1, beta2, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!("{} parameters, {} gradients, {} moments", params.len(), grads.len(), self.m.len())));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::Dimension { op: "adam", lhs: p.shape(), rhs: g.shape() });
            }
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                if lr != 0.0 {
                    p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

/// Scores a generated caption for SCST.
pub trait RewardFn: Sync {
    fn reward(&self, bundle: &FeatureBundle, caption: &str) -> Result<f64>;
}

impl<F> RewardFn for F
where
    F: Fn(&FeatureBundle, &str) -> Result<f64> + Sync,
{
    fn reward(&self, bundle: &FeatureBundle, caption: &str) -> Result<f64> {
        self(bundle, caption)
    }
}

/// Raw CIDEr against the bundle's own references, with document
/// frequencies taken from a fixed reference corpus.
pub struct CiderReward {
    scorer: CiderScorer,
}

impl CiderReward {
    pub fn new(corpus: &[FeatureBundle], variant: crate::config::CiderVariant) -> Result<Self> {
        let refs: Vec<Vec<Tokens>> = corpus.iter().map(|b| b.captions.iter().map(|c| tokenize(c)).collect()).collect();
        Ok(CiderReward { scorer: CiderScorer::new(&refs, variant)? })
    }
}

impl RewardFn for CiderReward {
    fn reward(&self, bundle: &FeatureBundle, caption: &str) -> Result<f64> {
        let refs: Vec<Tokens> = bundle.captions.iter().map(|c| tokenize(c)).collect();
        self.scorer
            .score(&tokenize(caption), &refs)
            .map_err(|e| Error::Reward(format!("{}: {e}", bundle.image_id)))
    }
}

/// One self-critical step for one bundle.
#[derive(Clone, Debug)]
pub struct ScstSample {
    pub sampled: Vec<u32>,
    pub greedy: Vec<u32>,
    pub sample_reward: f64,
    pub greedy_reward: f64,
    /// Log-probability of the sampled sequence.
    pub log_prob: f64,
    /// Gradient of `−(r_s − r_g) · log p(sample)`, in parameter order.
    pub grads: Vec<Tensor>,
}

impl ScstSample {
    pub fn advantage(&self) -> f64 {
        self.sample_reward - self.greedy_reward
    }
}

/// Draws a multinomial sample and the greedy sequence on the image-only
/// pathway, rewards both, and returns the advantage-weighted gradient of the
/// sample's log-likelihood.
pub fn scst_step<R: Rng + ?Sized>(model: &SfdrModel, bundle: &FeatureBundle, reward: &dyn RewardFn, rng: &mut R) -> Result<ScstSample> {
    if bundle.captions.is_empty() {
        return Err(Error::Reward(format!("{} has no reference captions", bundle.image_id)));
    }
    let scorer = ModelScorer::new(model, bundle)?;
    let s = sample(&scorer, rng)?;
    let g = greedy(&scorer)?;
    let sample_reward = reward.reward(bundle, &model.vocab.decode(s.tokens.ids()))?;
    let greedy_reward = reward.reward(bundle, &model.vocab.decode(g.tokens.ids()))?;
    if !sample_reward.is_finite() || !greedy_reward.is_finite() {
        return Err(Error::Reward(format!("non-finite reward for {}", bundle.image_id)));
    }
    let advantage = sample_reward - greedy_reward;

    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let ce = model.sequence_loss(&mut tape, &bound, bundle, s.tokens.ids(), TextPathway::ImageOnly)?;
    let log_prob = -tape.value(ce).item();
    let grads = bound.gradients(&tape.backward(ce)?, &model.store);
    Ok(ScstSample {
        sampled: s.tokens.0,
        greedy: g.tokens.0,
        sample_reward,
        greedy_reward,
        log_prob,
        grads: grads.into_iter().map(|t| t.scale(advantage)).collect(),
    })
}

/// One line of the run manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: Stage,
    /// 1-based within the stage.
    pub epoch: u64,
    /// Mean sequence cross-entropy (CE) or mean advantage-weighted loss (SCST).
    pub train_loss: f64,
    /// Mean greedy reward over the epoch, SCST only.
    pub mean_reward: Option<f64>,
    /// 100 × raw CIDEr of greedy captions on the validation split.
    pub val_cider: Option<f64>,
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub config: String,
    pub vocab_hash: String,
    pub vocab_size: usize,
    pub seed: u64,
    pub train_images: usize,
    pub val_images: usize,
    pub resumed: Option<(Stage, u64)>,
    pub epochs: Vec<EpochRecord>,
    pub best: Option<(Stage, u64, f64)>,
    pub failure: Option<String>,
}

impl fmt::Display for RunManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[run]")?;
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "vocab_hash={}", self.vocab_hash)?;
        writeln!(f, "vocab_size={}", self.vocab_size)?;
        writeln!(f, "train_images={}", self.train_images)?;
        writeln!(f, "val_images={}", self.val_images)?;
        if let Some((stage, epoch)) = self.resumed {
            writeln!(f, "resumed={stage}@{epoch}")?;
        }
        writeln!(f, "\n[config]")?;
        write!(f, "{}", self.config)?;
        writeln!(f, "\n[epochs]")?;
        writeln!(f, "stage\tepoch\ttrain_loss\tmean_reward\tval_cider")?;
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        for e in &self.epochs {
            writeln!(f, "{}\t{}\t{:.6}\t{}\t{}", e.stage, e.epoch, e.train_loss, opt(e.mean_reward), opt(e.val_cider))?;
        }
        writeln!(f, "\n[result]")?;
        match self.best {
            Some((stage, epoch, c)) => writeln!(f, "best={stage}@{epoch} val_cider={c:.6}")?,
            None => writeln!(f, "best=-")?,
        }
        match &self.failure {
            Some(msg) => writeln!(f, "status=failed\nfailure={msg}"),
            None => writeln!(f, "status=ok"),
        }
    }
}

/// Owns a model and its optimizer for the length of a run.
pub struct Trainer<'a> {
    model: SfdrModel,
    train: &'a [FeatureBundle],
    val: &'a [FeatureBundle],
    stage: Stage,
    epoch: u64,
    adam: Adam,
    manifest: RunManifest,
    best: Option<(f64, ParamStore)>,
    reward: Option<CiderReward>,
}

struct BatchItem {
    loss: f64,
    reward: f64,
    grads: Vec<Tensor>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: SfdrModel, train: &'a [FeatureBundle], val: &'a [FeatureBundle]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        for b in train.iter().chain(val) {
            b.validate(&model.header)?;
        }
        let manifest = RunManifest {
            config: model.config.to_text(),
            vocab_hash: model.vocab.hash(),
            vocab_size: model.vocab.len(),
            seed: model.config.train_seed,
            train_images: train.len(),
            val_images: val.len(),
            resumed: None,
            epochs: Vec::new(),
            best: None,
            failure: None,
        };
        let adam = Adam::new(&model.store, model.config.train_beta1, model.config.train_beta2);
        Ok(Trainer { stage: model.config.train_stage, model, train, val, epoch: 0, adam, manifest, best: None, reward: None })
    }

    /// Continues from saved optimizer state.
    pub fn resume(model: SfdrModel, state: TrainState, train: &'a [FeatureBundle], val: &'a [FeatureBundle]) -> Result<Self> {
        let mut t = Trainer::new(model, train, val)?;
        let fresh = Adam::new(&t.model.store, t.adam.beta1, t.adam.beta2);
        if state.m.len() != fresh.m.len() || state.m.iter().chain(&state.v).zip(fresh.m.iter().chain(&fresh.v)).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Shape("optimizer state does not match the model".into()));
        }
        t.adam = Adam { step: state.step, m: state.m, v: state.v, ..fresh };
        t.stage = state.stage;
        t.epoch = state.epoch;
        t.manifest.resumed = Some((state.stage, state.epoch));
        Ok(t)
    }

    pub fn model(&self) -> &SfdrModel {
        &self.model
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// Completed epochs in the current stage.
    pub fn completed_epochs(&self) -> u64 {
        self.epoch
    }

    pub fn state(&self) -> TrainState {
        TrainState { stage: self.stage, epoch: self.epoch, step: self.adam.step, m: self.adam.m.clone(), v: self.adam.v.clone() }
    }

    /// The parameters with the best validation CIDEr so far, or the current
    /// ones when nothing has been validated.
    pub fn best_model(&self) -> SfdrModel {
        let mut m = self.model.clone();
        if let Some((_, store)) = &self.best {
            m.store = store.clone();
        }
        m
    }

    pub fn into_model(self) -> SfdrModel {
        self.model
    }

    /// Switches stage. Entering a new stage restarts the epoch count and the
    /// optimizer moments.
    pub fn begin_stage(&mut self, stage: Stage) {
        if stage != self.stage {
            self.stage = stage;
            self.epoch = 0;
            self.adam = Adam::new(&self.model.store, self.adam.beta1, self.adam.beta2);
        }
    }

    fn lr(&self) -> f64 {
        match self.stage {
            Stage::Ce => self.model.config.train_lr,
            Stage::Scst => self.model.config.scst_lr(),
        }
    }

    fn target_epochs(&self) -> u64 {
        match self.stage {
            Stage::Ce => self.model.config.train_epochs as u64,
            Stage::Scst => self.model.config.train_scst_epochs as u64,
        }
    }

    /// Runs the current stage until its configured epoch count.
    pub fn run(&mut self) -> Result<()> {
        while self.epoch < self.target_epochs() {
            self.step_epoch()?;
        }
        Ok(())
    }

    /// Runs one epoch of the current stage.
    pub fn step_epoch(&mut self) -> Result<EpochRecord> {
        match self.run_epoch() {
            Ok(r) => Ok(r),
            Err(e) => {
                self.manifest.failure = Some(e.to_string());
                Err(e)
            }
        }
    }

    fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epoch + 1;
        let cfg = &self.model.config;
        let seed = cfg.train_seed;
        let stage = self.stage;
        // CE iterates over (image, caption) pairs, SCST over images.
        let mut items: Vec<(usize, usize)> = match stage {
            Stage::Ce => self.train.iter().enumerate().flat_map(|(i, b)| (0..b.captions.len()).map(move |c| (i, c))).collect(),
            Stage::Scst => (0..self.train.len()).map(|i| (i, 0)).collect(),
        };
        if items.is_empty() {
            return Err(Error::Data("training split has no captions".into()));
        }
        items.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, stage_code(stage), epoch])));
        if stage == Stage::Scst && self.reward.is_none() {
            self.reward = Some(CiderReward::new(self.train, cfg.metrics_cider)?);
        }

        let batch_size = cfg.train_batch_size;
        let (mut loss_sum, mut reward_sum) = (0.0, 0.0);
        for (b, batch) in items.chunks(batch_size).enumerate() {
            let results: Vec<Result<BatchItem>> = batch
                .par_iter()
                .map(|&(i, c)| {
                    let item_seed = derive_seed(&[seed, stage_code(stage), epoch, i as u64, c as u64]);
                    self.item(stage, &self.train[i], c, item_seed)
                })
                .collect();
            let mut total: Vec<Tensor> = self.model.store.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
            let mut batch_loss = 0.0;
            for r in results {
                let item = r.map_err(|e| self.diverged(epoch, b, e))?;
                batch_loss += item.loss;
                reward_sum += item.reward;
                for (t, g) in total.iter_mut().zip(&item.grads) {
                    t.data_mut().iter_mut().zip(g.data()).for_each(|(a, x)| *a += x);
                }
            }
            if !batch_loss.is_finite() {
                return Err(self.diverged(epoch, b, Error::NonFinite("training loss")));
            }
            loss_sum += batch_loss;
            let n = batch.len() as f64;
            total.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x /= n));
            let norm = clip_global_norm(&mut total, self.model.config.train_grad_clip);
            if !norm.is_finite() {
                return Err(self.diverged(epoch, b, Error::NonFinite("gradient")));
            }
            let lr = self.lr();
            self.adam.update(self.model.store.tensors_mut(), &total, lr)?;
        }

        let n = items.len() as f64;
        let val_cider = self.validate()?;
        let record = EpochRecord {
            stage,
            epoch,
            train_loss: loss_sum / n,
            mean_reward: (stage == Stage::Scst).then_some(reward_sum / n),
            val_cider,
        };
        if let Some(c) = val_cider {
            if self.best.as_ref().is_none_or(|(b, _)| c > *b) {
                self.best = Some((c, self.model.store.clone()));
                self.manifest.best = Some((stage, epoch, c));
            }
        }
        log::info!(
            "{stage} epoch {epoch}: loss {:.6}{}",
            record.train_loss,
            val_cider.map_or(String::new(), |c| format!(", val CIDEr {c:.2}"))
        );
        self.manifest.epochs.push(record.clone());
        self.epoch = epoch;
        Ok(record)
    }

    fn diverged(&self, epoch: u64, batch: usize, e: Error) -> Error {
        match e {
            Error::NonFinite(_) | Error::Numeric(_) => Error::Diverged { epoch: epoch as usize, batch, msg: e.to_string() },
            other => other,
        }
    }

    fn item(&self, stage: Stage, bundle: &FeatureBundle, caption: usize, seed: u64) -> Result<BatchItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match stage {
            Stage::Ce => {
                let tokens = self.model.vocab.encode(&bundle.captions[caption], self.model.max_len());
                let drop = rng.random::<f64>() < self.model.config.ssff_text_dropout;
                let pathway = if drop || bundle.clip_text.is_none() { TextPathway::ImageOnly } else { TextPathway::ImageText };
                let mut tape = Tape::new();
                let bound = self.model.store.bind(&mut tape);
                let loss = self.model.sequence_loss(&mut tape, &bound, bundle, tokens.ids(), pathway)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite("training loss"));
                }
                let grads = bound.gradients(&tape.backward(loss)?, &self.model.store);
                Ok(BatchItem { loss: value, reward: 0.0, grads })
            }
            Stage::Scst => {
                let reward = self.reward.as_ref().expect("reward built before SCST batches");
                let s = scst_step(&self.model, bundle, reward, &mut rng)?;
                if !s.log_prob.is_finite() {
                    return Err(Error::NonFinite("sample log-probability"));
                }
                Ok(BatchItem { loss: -s.advantage() * s.log_prob, reward: s.greedy_reward, grads: s.grads })
            }
        }
    }

    /// Greedy-caption CIDEr (×100) on the validation images that have
    /// references.
    pub fn validate(&self) -> Result<Option<f64>> {
        let val: Vec<&FeatureBundle> = self.val.iter().filter(|b| !b.captions.is_empty()).collect();
        if val.is_empty() {
            return Ok(None);
        }
        let owned: Vec<FeatureBundle> = val.into_iter().cloned().collect();
        corpus_cider(&self.model, &owned).map(Some)
    }
}

/// 100 × raw CIDEr of greedy captions against each bundle's references,
/// document frequencies taken over `bundles`.
pub fn corpus_cider(model: &SfdrModel, bundles: &[FeatureBundle]) -> Result<f64> {
    let cands: Vec<Tokens> = bundles
        .par_iter()
        .map(|b| {
            let h = greedy(&ModelScorer::new(model, b)?)?;
            Ok(tokenize(&model.vocab.decode(h.tokens.ids())))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<Vec<Tokens>> = bundles.iter().map(|b| b.captions.iter().map(|c| tokenize(c)).collect()).collect();
    Ok(100.0 * CiderScorer::new(&refs, model.config.metrics_cider)?.corpus(&cands, &refs)?)
}

/// Result of [`train`].
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub last: SfdrModel,
    /// Best-validation parameters (the last ones without a validation split).
    pub best: SfdrModel,
    pub state: TrainState,
    pub manifest: RunManifest,
}

/// Builds the vocabulary from the training captions, initializes a model and
/// runs cross-entropy training, followed by SCST when `config.train_stage`
/// is SCST.
pub fn train(corpus: &Corpus, config: &RunConfig) -> Result<TrainOutcome> {
    let captions: Vec<Vec<String>> = corpus.train.iter().flat_map(|b| b.captions.iter().map(|c| tokenize(c))).collect();
    let vocab = Vocabulary::build(&captions, config.vocab_min_count);
    let mut ce = config.clone();
    ce.train_stage = Stage::Ce;
    let model = SfdrModel::new(&ce, corpus.header, vocab)?;
    let mut trainer = Trainer::new(model, &corpus.train, &corpus.val)?;
    trainer.run()?;
    if config.train_stage == Stage::Scst {
        trainer.begin_stage(Stage::Scst);
        trainer.run()?;
    }
    let restore_stage = |m: &mut SfdrModel| m.config.train_stage = config.train_stage;
    let mut best = trainer.best_model();
    restore_stage(&mut best);
    let state = trainer.state();
    let manifest = trainer.manifest().clone();
    let mut last = trainer.into_model();
    restore_stage(&mut last);
    Ok(TrainOutcome { last, best, state, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_corpus, SyntheticSpec};

    #[test]
    fn ce_loss_hand_values() {
        let uniform = Tensor::zeros(3, 4);
        assert!(matches!(ce_loss(&uniform, &[4, 5, 6]), Err(Error::Vocabulary { .. })));
        assert!((ce_loss(&uniform, &[1, 2, 3]).unwrap() - 3.0 * 4f64.ln()).abs() < 1e-12);
        // id 0 is PAD, so the favoured target sits in column 1
        let row = Tensor::row(&[0.0, 2f64.ln()]);
        assert!((ce_loss(&row, &[1]).unwrap() + (2.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!(matches!(ce_loss(&uniform, &[1, 2]), Err(Error::Argument(_))));
        assert_eq!(ce_loss(&uniform, &[PAD, PAD, PAD]).unwrap(), 0.0);
    }

    #[test]
    fn ce_loss_agrees_with_tape() {
        let logits = Tensor::from_rows(&[&[0.3, -1.0, 2.0], &[1.5, 0.0, -0.5]]);
        let mut tape = Tape::new();
        let l = tape.param(logits.clone());
        let v = tape.cross_entropy(l, &[Some(2), Some(1)]).unwrap();
        assert!((tape.value(v).item() - ce_loss(&logits, &[2, 1]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![Tensor::row(&[3.0]), Tensor::row(&[4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].item() - 0.6).abs() < 1e-15 && (g[1].item() - 0.8).abs() < 1e-15);
        let mut small = vec![Tensor::row(&[0.1])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].item(), 0.1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row(&[1.0, -1.0]));
        let mut adam = Adam::new(&store, 0.9, 0.999);
        let mut p = store.tensors().to_vec();
        adam.update(&mut p, &[Tensor::row(&[0.5, -2.0])], 0.1).unwrap();
        assert!((p[0].get(0, 0) - 0.9).abs() < 1e-6);
        assert!((p[0].get(0, 1) + 0.9).abs() < 1e-6);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_eq!(derive_seed(&[7, 3]), derive_seed(&[7, 3]));
    }

    fn small() -> (SfdrModel, Vec<FeatureBundle>) {
        let corpus = gen_synthetic_corpus(4, &SyntheticSpec::desk(3));
        let captions: Vec<Vec<String>> = corpus.bundles.iter().flat_map(|b| b.captions.iter().map(|c| tokenize(c))).collect();
        let mut cfg = RunConfig::desk();
        cfg.ssff_model_dim = 16;
        cfg.decoder_dim = 16;
        cfg.decoder_ffn = 32;
        cfg.decoder_layers = 1;
        cfg.decoder_max_len = 8;
        cfg.train_batch_size = 2;
        let model = SfdrModel::new(&cfg, corpus.header, Vocabulary::build(&captions, 0)).unwrap();
        (model, corpus.bundles)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut model, data) = small();
        model.config.train_lr = 0.0;
        let before = model.store.clone();
        let mut t = Trainer::new(model, &data, &[]).unwrap();
        for _ in 0..3 {
            t.step_epoch().unwrap();
        }
        assert_eq!(t.model().store, before);
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let (mut model, data) = small();
        model.config.train_lr = 1e300;
        let mut t = Trainer::new(model, &data, &[]).unwrap();
        let err = (0..5).find_map(|_| t.step_epoch().err()).expect("diverges");
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
        assert!(t.manifest().failure.is_some());
        assert!(t.manifest().to_string().contains("status=failed"));
    }

    #[test]
    fn empty_references_are_reward_errors() {
        let (model, mut data) = small();
        data[0].captions.clear();
        let constant = |_: &FeatureBundle, _: &str| Ok(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(scst_step(&model, &data[0], &constant, &mut rng), Err(Error::Reward(_))));
    }

    #[test]
    fn scst_step_is_deterministic() {
        let (model, data) = small();
        let reward = CiderReward::new(&data, crate::config::CiderVariant::Plain).unwrap();
        let a = scst_step(&model, &data[1], &reward, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = scst_step(&model, &data[1], &reward, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.sampled, b.sampled);
        assert_eq!(a.grads, b.grads);
    }
}
