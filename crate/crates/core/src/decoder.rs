//! Pre-norm transformer caption decoder.
//!
//! Each layer applies masked self-attention over the token prefix,
//! cross-attention over the refined visual context and a position-wise
//! feed-forward network, each wrapped as `x + sublayer(LayerNorm(x))`.
//! A final layer norm precedes the vocabulary projection
//! `logits = O_N · W_Dᵀ + b_D`.

use rand::Rng;

use crate::attention::{multi_head_attention, AttentionParams};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Mask, Tensor};

/// Sizes that fix the decoder's parameter shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderShape {
    pub vocab: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub max_len: usize,
    /// Width of the context rows attended to by cross-attention.
    pub context_dim: usize,
    pub tie_embeddings: bool,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::full(1, dim, 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, dim)),
        }
    }

    fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound[self.gain], bound[self.bias])
    }
}

#[derive(Clone, Debug)]
struct Layer {
    norm_self: Norm,
    self_attn: AttentionParams,
    norm_cross: Norm,
    cross_attn: AttentionParams,
    norm_ffn: Norm,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter handles of the whole decoder.
#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub shape: DecoderShape,
    pub embedding: ParamId,
    /// `V_b × d_h`; the embedding table itself when tied.
    pub output: ParamId,
    pub output_bias: ParamId,
    layers: Vec<Layer>,
    final_norm: Norm,
    positions: Tensor,
}

/// Fixed sinusoidal encodings, `max_len × dim`.
pub fn sinusoidal_positions(max_len: usize, dim: usize) -> Tensor {
    let mut pe = Tensor::zeros(max_len, dim);
    for pos in 0..max_len {
        for c in 0..dim {
            let i = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
            pe.set(pos, c, if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

/// Lower-triangular mask: position `i` attends to `j ≤ i`.
pub fn causal_mask(len: usize) -> Result<Mask> {
    if len == 0 {
        return Err(Error::Argument("causal mask needs length ≥ 1".into()));
    }
    Ok(Mask::causal(len))
}

impl DecoderParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, shape: DecoderShape) -> Result<Self> {
        let d = shape.dim;
        if shape.heads == 0 || d % shape.heads != 0 {
            return Err(Error::Config(format!("decoder.dim {d} not divisible by decoder.heads {}", shape.heads)));
        }
        if shape.vocab == 0 || shape.max_len == 0 || shape.layers == 0 {
            return Err(Error::Config("decoder needs a vocabulary, max_len ≥ 1 and layers ≥ 1".into()));
        }
        let embedding = store.add("decoder.embedding", Tensor::randn(shape.vocab, d, 1.0 / (d as f64).sqrt(), rng));
        let mut layers = Vec::with_capacity(shape.layers);
        for l in 0..shape.layers {
            let p = format!("decoder.layer{l}");
            layers.push(Layer {
                norm_self: Norm::new(store, &format!("{p}.ln1"), d),
                self_attn: AttentionParams::new(store, rng, &format!("{p}.self"), d, d, d, shape.heads),
                norm_cross: Norm::new(store, &format!("{p}.ln2"), d),
                cross_attn: AttentionParams::new(store, rng, &format!("{p}.cross"), d, shape.context_dim, d, shape.heads),
                norm_ffn: Norm::new(store, &format!("{p}.ln3"), d),
                w1: store.add_linear(&format!("{p}.ffn.w1"), d, shape.ffn, rng),
                b1: store.add(format!("{p}.ffn.b1"), Tensor::zeros(1, shape.ffn)),
                w2: store.add_linear(&format!("{p}.ffn.w2"), shape.ffn, d, rng),
                b2: store.add(format!("{p}.ffn.b2"), Tensor::zeros(1, d)),
            });
        }
        let final_norm = Norm::new(store, "decoder.ln_final", d);
        let output = if shape.tie_embeddings {
            embedding
        } else {
            store.add("decoder.output", Tensor::randn(shape.vocab, d, 1.0 / (d as f64).sqrt(), rng))
        };
        let output_bias = store.add("decoder.output_bias", Tensor::zeros(1, shape.vocab));
        Ok(DecoderParams {
            shape,
            embedding,
            output,
            output_bias,
            layers,
            final_norm,
            positions: sinusoidal_positions(shape.max_len, d),
        })
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    /// Every parameter the decoder reads, for binding onto a tape.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embedding, self.output_bias, self.final_norm.gain, self.final_norm.bias];
        if self.output != self.embedding {
            ids.push(self.output);
        }
        for l in &self.layers {
            for n in [l.norm_self, l.norm_cross, l.norm_ffn] {
                ids.extend([n.gain, n.bias]);
            }
            ids.extend(l.self_attn.ids());
            ids.extend(l.cross_attn.ids());
            ids.extend([l.w1, l.b1, l.w2, l.b2]);
        }
        ids
    }
}

/// Logits plus the cross-attention maps, indexed `[layer][head]`, each
/// `l × m`.
pub struct DecoderOutput {
    pub logits: Var,
    pub cross_attention: Vec<Vec<Var>>,
}

/// Table lookup plus positional encoding.
pub fn embed_tokens(tape: &mut Tape, bound: &Bound, params: &DecoderParams, ids: &[u32]) -> Result<Var> {
    let vocab = params.shape.vocab;
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
        return Err(Error::Vocabulary { id: bad as usize, size: vocab });
    }
    if ids.len() > params.shape.max_len {
        return Err(Error::Argument(format!("{} tokens exceed decoder.max_len {}", ids.len(), params.shape.max_len)));
    }
    let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let table = tape.gather_rows(bound[params.embedding], &rows)?;
    let pos: Vec<usize> = (0..ids.len()).collect();
    let pe = tape.constant(params.positions.gather_rows(&pos)?);
    tape.add(table, pe)
}

/// Runs the decoder over a token prefix, attending to `context`.
pub fn decode(tape: &mut Tape, bound: &Bound, params: &DecoderParams, context: Var, tokens: &[u32]) -> Result<DecoderOutput> {
    if tokens.is_empty() {
        return Err(Error::Argument("decode needs at least one token".into()));
    }
    if tape.value(context).cols() != params.shape.context_dim {
        return Err(Error::Dimension {
            op: "decode",
            lhs: tape.value(context).shape(),
            rhs: (tape.value(context).rows(), params.shape.context_dim),
        });
    }
    let heads = params.shape.heads;
    let mask = causal_mask(tokens.len())?;
    let mut x = embed_tokens(tape, bound, params, tokens)?;
    let mut cross_attention = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let h = layer.norm_self.apply(tape, bound, x)?;
        let sa = multi_head_attention(tape, h, h, &layer.self_attn.vars(bound), heads, Some(&mask))?;
        x = tape.add(x, sa.output)?;

        let h = layer.norm_cross.apply(tape, bound, x)?;
        let ca = multi_head_attention(tape, h, context, &layer.cross_attn.vars(bound), heads, None)?;
        x = tape.add(x, ca.output)?;
        cross_attention.push(ca.weights);

        let h = layer.norm_ffn.apply(tape, bound, x)?;
        let f = tape.matmul(h, bound[layer.w1])?;
        let f = tape.add_row(f, bound[layer.b1])?;
        let f = tape.relu(f)?;
        let f = tape.matmul(f, bound[layer.w2])?;
        let f = tape.add_row(f, bound[layer.b2])?;
        x = tape.add(x, f)?;
    }
    let x = params.final_norm.apply(tape, bound, x)?;
    let logits = tape.matmul_t(x, bound[params.output])?;
    let logits = tape.add_row(logits, bound[params.output_bias])?;
    Ok(DecoderOutput { logits, cross_attention })
}
