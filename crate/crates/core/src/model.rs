//! The complete captioner: fusion, two refinement graphs, the knowledge
//! matrix with scene–object attention, and the decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{ContextMode, RunConfig};
use crate::data::{CorpusHeader, FeatureBundle, Vocabulary, PAD};
use crate::decoder::{decode, DecoderParams, DecoderShape};
use crate::dgfr::{knowledge_matrix, scene_object_attention, DgfrParams, GraphPass, RefinedGraph};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::ssff::{SsffParams, TextPathway};
use crate::tensor::Tensor;

/// Parameters and architecture of one captioning model.
#[derive(Clone, Debug)]
pub struct SfdrModel {
    pub config: RunConfig,
    pub header: CorpusHeader,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    ssff: SsffParams,
    roi_in: Option<ParamId>,
    dgfr: DgfrParams,
    decoder: DecoderParams,
}

/// Tape handles produced by [`SfdrModel::encode`].
pub struct Encoded {
    pub roi_nodes: Var,
    pub fusion_nodes: Var,
    pub roi_graph: GraphPass,
    pub fusion_graph: GraphPass,
    pub knowledge: Var,
    /// Rows the decoder cross-attends to.
    pub context: Var,
}

/// Value-level view of every encoder intermediate.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub fused: Tensor,
    pub roi_graph: RefinedGraph,
    pub fusion_graph: RefinedGraph,
    pub knowledge: Tensor,
    pub context: Tensor,
}

impl SfdrModel {
    /// Fresh parameters drawn from `config.train_seed`.
    pub fn new(config: &RunConfig, header: CorpusHeader, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if header.k == 0 || header.h == 0 {
            return Err(Error::Config("corpus header needs k ≥ 1 ROI rows and H ≥ 1 grid rows".into()));
        }
        let d = config.ssff_model_dim;
        if d % config.dgfr_heads != 0 {
            return Err(Error::Config(format!("ssff.model_dim {d} not divisible by dgfr.heads {}", config.dgfr_heads)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.train_seed);
        let mut store = ParamStore::new();
        let ssff = SsffParams::new(&mut store, &mut rng, &header, d, config.ssff_alpha, config.ssff_inference_text);
        let roi_in = (header.d_r != d).then(|| store.add_linear("dgfr.roi_in", header.d_r, d, &mut rng));
        let dgfr = DgfrParams::new(&mut store, &mut rng, d, config.dgfr_heads, config.dgfr_edge_mode, config.dgfr_self_loops);
        let context_dim = match config.dgfr_context {
            ContextMode::Attention => d,
            ContextMode::RawZ => header.h,
        };
        let decoder = DecoderParams::new(
            &mut store,
            &mut rng,
            DecoderShape {
                vocab: vocab.len(),
                dim: config.decoder_dim,
                heads: config.decoder_heads,
                layers: config.decoder_layers,
                ffn: config.decoder_ffn,
                max_len: config.decoder_max_len,
                context_dim,
                tie_embeddings: config.decoder_tie_embeddings,
            },
        )?;
        if config.train_init_std > 0.0 {
            for t in store.tensors_mut() {
                *t = Tensor::randn(t.rows(), t.cols(), config.train_init_std, &mut rng);
            }
        }
        Ok(SfdrModel {
            config: config.clone(),
            header,
            vocab,
            store,
            ssff,
            roi_in,
            dgfr,
            decoder,
        })
    }

    pub fn decoder(&self) -> &DecoderParams {
        &self.decoder
    }

    pub fn max_len(&self) -> usize {
        self.config.decoder_max_len
    }

    /// Fusion, both graphs, the knowledge matrix and the decoder context.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, bundle: &FeatureBundle, pathway: TextPathway) -> Result<Encoded> {
        bundle.validate(&self.header)?;
        let fusion_nodes = self.ssff.forward(tape, bound, &bundle.clip_visual, bundle.clip_text.as_ref(), &bundle.grid, pathway)?;
        let roi = tape.constant(bundle.roi.clone());
        let roi_nodes = match self.roi_in {
            Some(id) => tape.matmul(roi, bound[id])?,
            None => roi,
        };
        let roi_graph = self.dgfr.roi_graph.forward(tape, bound, roi_nodes)?;
        let fusion_graph = self.dgfr.fusion_graph.forward(tape, bound, fusion_nodes)?;
        let knowledge = knowledge_matrix(tape, roi_graph.refined, fusion_graph.refined)?;
        let context = match self.config.dgfr_context {
            ContextMode::Attention => {
                let p = self.dgfr.scene_object.vars(bound);
                scene_object_attention(tape, roi_graph.refined, knowledge, fusion_graph.refined, &p, self.config.dgfr_heads)?.output
            }
            ContextMode::RawZ => knowledge,
        };
        Ok(Encoded {
            roi_nodes,
            fusion_nodes,
            roi_graph,
            fusion_graph,
            knowledge,
            context,
        })
    }

    /// Decoder context for inference (image-only text pathway).
    pub fn context(&self, bundle: &FeatureBundle) -> Result<Tensor> {
        Ok(self.trace(bundle)?.context)
    }

    /// Every encoder intermediate for one bundle on the inference pathway.
    pub fn trace(&self, bundle: &FeatureBundle) -> Result<EncoderTrace> {
        let mut tape = Tape::inference();
        let bound = self.store.bind(&mut tape);
        let enc = self.encode(&mut tape, &bound, bundle, TextPathway::ImageOnly)?;
        Ok(EncoderTrace {
            fused: tape.value(enc.fusion_nodes).clone(),
            roi_graph: enc.roi_graph.snapshot(&tape, enc.roi_nodes),
            fusion_graph: enc.fusion_graph.snapshot(&tape, enc.fusion_nodes),
            knowledge: tape.value(enc.knowledge).clone(),
            context: tape.value(enc.context).clone(),
        })
    }

    /// Summed teacher-forced cross-entropy of `tokens` (BOS … EOS).
    pub fn sequence_loss(&self, tape: &mut Tape, bound: &Bound, bundle: &FeatureBundle, tokens: &[u32], pathway: TextPathway) -> Result<Var> {
        if tokens.len() < 2 {
            return Err(Error::Argument("a training sequence needs BOS and at least one more token".into()));
        }
        let enc = self.encode(tape, bound, bundle, pathway)?;
        self.decoder_loss(tape, bound, enc.context, tokens)
    }

    /// Teacher-forced cross-entropy given an already encoded context.
    pub fn decoder_loss(&self, tape: &mut Tape, bound: &Bound, context: Var, tokens: &[u32]) -> Result<Var> {
        let out = decode(tape, bound, &self.decoder, context, &tokens[..tokens.len() - 1])?;
        let targets: Vec<Option<usize>> = tokens[1..].iter().map(|&t| (t != PAD).then_some(t as usize)).collect();
        tape.cross_entropy(out.logits, &targets)
    }

    /// Log-probabilities of the next token after `prefix`, given a context
    /// from [`SfdrModel::context`].
    pub fn next_log_probs(&self, context: &Tensor, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let bound = self.store.bind_only(&mut tape, &self.decoder.ids());
        let c = tape.constant(context.clone());
        let out = decode(&mut tape, &bound, &self.decoder, c, prefix)?;
        let logits = tape.value(out.logits);
        let last = logits.gather_rows(&[logits.rows() - 1])?;
        Ok(last.log_softmax_rows().into_data())
    }

    /// Cross-attention weights for a complete token sequence, as
    /// `[layer][head]` matrices of `len × m`.
    pub fn cross_attention(&self, context: &Tensor, tokens: &[u32]) -> Result<Vec<Vec<Tensor>>> {
        let mut tape = Tape::inference();
        let bound = self.store.bind_only(&mut tape, &self.decoder.ids());
        let c = tape.constant(context.clone());
        let out = decode(&mut tape, &bound, &self.decoder, c, tokens)?;
        Ok(out
            .cross_attention
            .iter()
            .map(|heads| heads.iter().map(|v| tape.value(*v).clone()).collect())
            .collect())
    }

    /// Teacher-forced log-likelihood of a whole sequence under the inference
    /// pathway.
    pub fn score(&self, bundle: &FeatureBundle, tokens: &[u32]) -> Result<f64> {
        let mut tape = Tape::inference();
        let bound = self.store.bind(&mut tape);
        let loss = self.sequence_loss(&mut tape, &bound, bundle, tokens, TextPathway::ImageOnly)?;
        Ok(-tape.value(loss).item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_corpus, SyntheticSpec};

    fn tiny() -> (SfdrModel, FeatureBundle) {
        let mut spec = SyntheticSpec::desk(3);
        spec.header = CorpusHeader { d_v: 4, d_t: 4, h: 6, d_g: 8, k: 5, d_r: 6 };
        let corpus = gen_synthetic_corpus(2, &spec);
        let mut cfg = RunConfig::desk();
        cfg.ssff_model_dim = 8;
        cfg.decoder_dim = 8;
        cfg.decoder_ffn = 16;
        cfg.decoder_layers = 1;
        let vocab = Vocabulary::build(&[vec!["a", "b", "c"]], 0);
        let model = SfdrModel::new(&cfg, corpus.header, vocab).unwrap();
        (model, corpus.bundles[0].clone())
    }

    #[test]
    fn next_log_probs_match_sequence_score() {
        let (model, bundle) = tiny();
        let tokens = [1u32, 4, 6, 2];
        let ctx = model.context(&bundle).unwrap();
        let mut total = 0.0;
        for t in 1..tokens.len() {
            total += model.next_log_probs(&ctx, &tokens[..t]).unwrap()[tokens[t] as usize];
        }
        assert!((total - model.score(&bundle, &tokens).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn trace_shapes() {
        let (model, bundle) = tiny();
        let tr = model.trace(&bundle).unwrap();
        assert_eq!(tr.fused.shape(), (6, 8));
        assert_eq!(tr.roi_graph.adjacency.shape(), (5, 5));
        assert_eq!(tr.knowledge.shape(), (5, 6));
        assert_eq!(tr.context.shape(), (5, 8));
    }

    #[test]
    fn mismatched_bundle_is_rejected() {
        let (model, mut bundle) = tiny();
        bundle.roi = Tensor::zeros(5, 7);
        assert!(model.context(&bundle).is_err());
    }

    #[test]
    fn raw_knowledge_context_has_grid_width() {
        let (model, bundle) = tiny();
        let mut cfg = model.config.clone();
        cfg.dgfr_context = ContextMode::RawZ;
        let raw = SfdrModel::new(&cfg, model.header, model.vocab.clone()).unwrap();
        assert_eq!(raw.context(&bundle).unwrap().shape(), (5, 6));
    }
}
