//! Multi-head scaled dot-product attention on the tape.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Mask;

/// Projection matrices of one attention block (no biases).
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

/// The same projections as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl AttentionParams {
    /// Queries come from `query_dim`-wide rows, keys and values from
    /// `kv_dim`-wide rows; output width is `model_dim`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        query_dim: usize,
        kv_dim: usize,
        model_dim: usize,
        heads: usize,
    ) -> Self {
        AttentionParams {
            wq: store.add_linear(&format!("{prefix}.wq"), query_dim, model_dim, rng),
            wk: store.add_linear(&format!("{prefix}.wk"), kv_dim, model_dim, rng),
            wv: store.add_linear(&format!("{prefix}.wv"), kv_dim, model_dim, rng),
            wo: store.add_linear(&format!("{prefix}.wo"), model_dim, model_dim, rng),
            heads,
        }
    }

    pub fn vars(&self, bound: &Bound) -> AttentionVars {
        AttentionVars {
            wq: bound[self.wq],
            wk: bound[self.wk],
            wv: bound[self.wv],
            wo: bound[self.wo],
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.wq, self.wk, self.wv, self.wo]
    }
}

/// Output of [`multi_head_attention`].
pub struct AttentionOutput {
    pub output: Var,
    /// Row-stochastic attention weights, one `q × kv` matrix per head.
    pub weights: Vec<Var>,
}

/// `Concat(head₁ … head_h) · W^O` with
/// `head_i = softmax(Q_i K_iᵀ / √(d/h)) V_i`, `Q = queries·W^Q`,
/// `K = keys·W^K`, `V = keys·W^V`.
pub fn multi_head_attention(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    p: &AttentionVars,
    heads: usize,
    mask: Option<&Mask>,
) -> Result<AttentionOutput> {
    let d = tape.value(p.wq).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("attention width {d} not divisible by {heads} heads")));
    }
    let q = tape.matmul(queries, p.wq)?;
    let k = tape.matmul(keys, p.wk)?;
    let v = tape.matmul(keys, p.wv)?;
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dk, dk)?,
                tape.slice_cols(k, h * dk, dk)?,
                tape.slice_cols(v, h * dk, dk)?,
            )
        };
        let scores = tape.matmul_t(qh, kh)?;
        let w = tape.softmax_rows(scores, scale, mask)?;
        outs.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let concat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let output = tape.matmul(concat, p.wo)?;
    Ok(AttentionOutput { output, weights })
}
