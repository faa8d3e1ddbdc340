//! Flat `key=value` run configuration.
//!
//! Values resolve in the order defaults, then a config file, then
//! command-line overrides. The resolved configuration is written verbatim
//! into every run manifest and checkpoint.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeMode {
    /// MLP input is `v_i ⊙ v_j`.
    Product,
    /// MLP input is `[v_i, v_j]`; the weight matrix is symmetrised afterwards.
    Concat,
}

/// What the decoder cross-attends over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextMode {
    /// Scene–object attention output (`m × d`).
    Attention,
    /// The knowledge matrix itself (`m × H`).
    RawZ,
}

/// Replacement for CLIP text features when none are available.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferenceText {
    Learned,
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ce,
    Scst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CiderVariant {
    Plain,
    CiderD,
}

macro_rules! keyword_enum {
    ($ty:ty { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        "unknown value {other:?} for {}", stringify!($ty)
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(EdgeMode { "product" => EdgeMode::Product, "concat" => EdgeMode::Concat });
keyword_enum!(ContextMode { "mha" => ContextMode::Attention, "raw_z" => ContextMode::RawZ });
keyword_enum!(InferenceText { "learned" => InferenceText::Learned, "zeros" => InferenceText::Zeros });
keyword_enum!(Stage { "ce" => Stage::Ce, "scst" => Stage::Scst });
keyword_enum!(CiderVariant { "cider" => CiderVariant::Plain, "cider-d" => CiderVariant::CiderD });

/// Every tunable of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub ssff_alpha: f64,
    pub ssff_model_dim: usize,
    pub ssff_inference_text: InferenceText,
    /// Probability of training a bundle through the image-only pathway.
    pub ssff_text_dropout: f64,

    pub dgfr_heads: usize,
    pub dgfr_edge_mode: EdgeMode,
    pub dgfr_self_loops: bool,
    pub dgfr_context: ContextMode,

    pub decoder_layers: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub decoder_ffn: usize,
    pub decoder_max_len: usize,
    pub decoder_tie_embeddings: bool,

    pub vocab_min_count: usize,

    pub train_stage: Stage,
    pub train_batch_size: usize,
    pub train_epochs: usize,
    pub train_lr: f64,
    pub train_beta1: f64,
    pub train_beta2: f64,
    pub train_grad_clip: f64,
    pub train_seed: u64,
    pub train_scst_epochs: usize,
    /// `None` means "same as `train_lr`".
    pub train_scst_lr: Option<f64>,
    pub train_init_std: f64,

    pub inference_beam: usize,
    pub inference_length_norm: f64,

    pub metrics_cider: CiderVariant,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            ssff_alpha: 0.5,
            ssff_model_dim: 64,
            ssff_inference_text: InferenceText::Learned,
            ssff_text_dropout: 0.5,
            dgfr_heads: 2,
            dgfr_edge_mode: EdgeMode::Product,
            dgfr_self_loops: true,
            dgfr_context: ContextMode::Attention,
            decoder_layers: 2,
            decoder_dim: 64,
            decoder_heads: 2,
            decoder_ffn: 128,
            decoder_max_len: 20,
            decoder_tie_embeddings: false,
            vocab_min_count: 5,
            train_stage: Stage::Ce,
            train_batch_size: 64,
            train_epochs: 40,
            train_lr: 5e-6,
            train_beta1: 0.9,
            train_beta2: 0.999,
            train_grad_clip: 5.0,
            train_seed: 0,
            train_scst_epochs: 5,
            train_scst_lr: None,
            train_init_std: 0.0,
            inference_beam: 5,
            inference_length_norm: 0.0,
            metrics_cider: CiderVariant::Plain,
            threads: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {value:?} for key {key}")))
}

impl RunConfig {
    /// Settings for the small synthetic corpora: full vocabulary, batch of 8,
    /// a learning rate large enough to fit a handful of images in a few
    /// hundred steps.
    pub fn desk() -> Self {
        RunConfig {
            vocab_min_count: 0,
            train_batch_size: 8,
            train_epochs: 200,
            train_lr: 2e-3,
            train_scst_lr: Some(5e-5),
            ..RunConfig::default()
        }
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "ssff.alpha" => self.ssff_alpha = parse(key, v)?,
            "ssff.model_dim" => self.ssff_model_dim = parse(key, v)?,
            "ssff.inference_text" => self.ssff_inference_text = v.parse()?,
            "ssff.text_dropout" => self.ssff_text_dropout = parse(key, v)?,
            "dgfr.heads" => self.dgfr_heads = parse(key, v)?,
            "dgfr.edge_mode" => self.dgfr_edge_mode = v.parse()?,
            "dgfr.self_loops" => self.dgfr_self_loops = parse_bool(key, v)?,
            "dgfr.context" => self.dgfr_context = v.parse()?,
            "decoder.layers" => self.decoder_layers = parse(key, v)?,
            "decoder.dim" => self.decoder_dim = parse(key, v)?,
            "decoder.heads" => self.decoder_heads = parse(key, v)?,
            "decoder.ffn" => self.decoder_ffn = parse(key, v)?,
            "decoder.max_len" => self.decoder_max_len = parse(key, v)?,
            "decoder.tie_embeddings" => self.decoder_tie_embeddings = parse_bool(key, v)?,
            "vocab.min_count" => self.vocab_min_count = parse(key, v)?,
            "train.stage" => self.train_stage = v.parse()?,
            "train.batch_size" => self.train_batch_size = parse(key, v)?,
            "train.epochs" => self.train_epochs = parse(key, v)?,
            "train.lr" => self.train_lr = parse(key, v)?,
            "train.beta1" => self.train_beta1 = parse(key, v)?,
            "train.beta2" => self.train_beta2 = parse(key, v)?,
            "train.grad_clip" => self.train_grad_clip = parse(key, v)?,
            "train.seed" => self.train_seed = parse(key, v)?,
            "train.scst_epochs" => self.train_scst_epochs = parse(key, v)?,
            "train.scst_lr" => {
                self.train_scst_lr = if v == "same" { None } else { Some(parse(key, v)?) }
            }
            "train.init_std" => self.train_init_std = parse(key, v)?,
            "inference.beam" => self.inference_beam = parse(key, v)?,
            "inference.length_norm" => self.inference_length_norm = parse(key, v)?,
            "metrics.cider" => self.metrics_cider = v.parse()?,
            "threads" => self.threads = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every assignment in a `key=value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(base: RunConfig, text: &str) -> Result<Self> {
        let mut c = base;
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.ssff_alpha) {
            return fail(format!("ssff.alpha {} outside [0, 1]", self.ssff_alpha));
        }
        if !(0.0..=1.0).contains(&self.ssff_text_dropout) {
            return fail(format!("ssff.text_dropout {} outside [0, 1]", self.ssff_text_dropout));
        }
        if self.dgfr_heads == 0 || self.ssff_model_dim % self.dgfr_heads != 0 {
            return fail(format!(
                "ssff.model_dim {} not divisible by dgfr.heads {}",
                self.ssff_model_dim, self.dgfr_heads
            ));
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return fail(format!(
                "decoder.dim {} not divisible by decoder.heads {}",
                self.decoder_dim, self.decoder_heads
            ));
        }
        if self.decoder_max_len < 2 {
            return fail("decoder.max_len must be at least 2".into());
        }
        if self.train_batch_size == 0 {
            return fail("train.batch_size must be at least 1".into());
        }
        if !(self.train_lr >= 0.0 && self.train_lr.is_finite()) {
            return fail(format!("train.lr {} must be finite and non-negative", self.train_lr));
        }
        if self.inference_beam == 0 {
            return fail("inference.beam must be at least 1".into());
        }
        Ok(())
    }

    pub fn scst_lr(&self) -> f64 {
        self.train_scst_lr.unwrap_or(self.train_lr)
    }

    /// Every key with its resolved value, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let scst_lr = self.train_scst_lr.map_or("same".to_string(), |v| fmt_f64(v));
        let pairs: Vec<(&str, String)> = vec![
            ("ssff.alpha", fmt_f64(self.ssff_alpha)),
            ("ssff.model_dim", self.ssff_model_dim.to_string()),
            ("ssff.inference_text", self.ssff_inference_text.to_string()),
            ("ssff.text_dropout", fmt_f64(self.ssff_text_dropout)),
            ("dgfr.heads", self.dgfr_heads.to_string()),
            ("dgfr.edge_mode", self.dgfr_edge_mode.to_string()),
            ("dgfr.self_loops", self.dgfr_self_loops.to_string()),
            ("dgfr.context", self.dgfr_context.to_string()),
            ("decoder.layers", self.decoder_layers.to_string()),
            ("decoder.dim", self.decoder_dim.to_string()),
            ("decoder.heads", self.decoder_heads.to_string()),
            ("decoder.ffn", self.decoder_ffn.to_string()),
            ("decoder.max_len", self.decoder_max_len.to_string()),
            ("decoder.tie_embeddings", self.decoder_tie_embeddings.to_string()),
            ("vocab.min_count", self.vocab_min_count.to_string()),
            ("train.stage", self.train_stage.to_string()),
            ("train.batch_size", self.train_batch_size.to_string()),
            ("train.epochs", self.train_epochs.to_string()),
            ("train.lr", fmt_f64(self.train_lr)),
            ("train.beta1", fmt_f64(self.train_beta1)),
            ("train.beta2", fmt_f64(self.train_beta2)),
            ("train.grad_clip", fmt_f64(self.train_grad_clip)),
            ("train.seed", self.train_seed.to_string()),
            ("train.scst_epochs", self.train_scst_epochs.to_string()),
            ("train.scst_lr", scst_lr),
            ("train.init_std", fmt_f64(self.train_init_std)),
            ("inference.beam", self.inference_beam.to_string()),
            ("inference.length_norm", fmt_f64(self.inference_length_norm)),
            ("metrics.cider", self.metrics_cider.to_string()),
            ("threads", self.threads.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Shortest decimal form that parses back to the same `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("cannot parse {v:?} as a boolean for key {key}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_preserves_every_key() {
        let mut c = RunConfig::desk();
        c.ssff_alpha = 0.3;
        c.dgfr_edge_mode = EdgeMode::Concat;
        c.train_lr = 1.0 / 3.0;
        let back = RunConfig::from_text(RunConfig::default(), &c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn later_assignments_override() {
        let c = RunConfig::from_text(RunConfig::default(), "ssff.alpha=0.2\n# comment\nssff.alpha = 0.7 # trailing").unwrap();
        assert_eq!(c.ssff_alpha, 0.7);
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = RunConfig::default();
        assert!(c.set("no.such.key", "1").is_err());
        assert!(c.set("ssff.alpha", "abc").is_err());
        assert!(c.set("dgfr.edge_mode", "sum").is_err());
        assert!(RunConfig::from_text(RunConfig::default(), "ssff.alpha=1.5").is_err());
        assert!(RunConfig::from_text(RunConfig::default(), "dgfr.heads=3").is_err());
        assert!(RunConfig::from_text(RunConfig::default(), "novalue").is_err());
    }

    #[test]
    fn paper_training_defaults() {
        let c = RunConfig::default();
        assert_eq!((c.train_batch_size, c.train_epochs, c.train_lr), (64, 40, 5e-6));
        assert_eq!(c.inference_beam, 5);
        assert_eq!(c.vocab_min_count, 5);
    }
}
