//! Dynamic graph feature refinement.
//!
//! Feature rows are graph nodes. An MLP scores every node pair, the scores
//! are pruned at the midpoint between their minimum and maximum, and each
//! node is rebuilt from its surviving neighbours:
//!
//! ```text
//! w_ij = σ(u · (W₂ · ReLU(W₁ (v_i ⊙ v_j) + b₁)) + b₂)
//! t    = min(W_o) + ½ (max(W_o) − min(W_o))
//! a_ij = [w_ij ≥ t]            (a_ii forced to 1)
//! v̂_i  = Σ_j a_ij w_ij v_j W_v
//! ```
//!
//! Refined object (ROI) and scene (fused) features are then related through
//! the feature knowledge matrix `Z = softmax(F'_roi F'_fusionᵀ / √d)` and a
//! multi-head attention whose keys and values are the scene-aligned object
//! context `Z · F'_fusion`.
//!
//! The threshold mask is piecewise constant, so gradients flow only through
//! the retained edge weights.

use rand::Rng;

use crate::attention::{multi_head_attention, AttentionOutput, AttentionParams, AttentionVars};
use crate::autodiff::{Tape, Var};
use crate::config::EdgeMode;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Edge-scoring MLP parameters.
#[derive(Clone, Copy, Debug)]
pub struct EdgeMlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    /// `d × 1` output head producing the scalar score.
    pub head: ParamId,
    pub b2: ParamId,
    pub mode: EdgeMode,
}

#[derive(Clone, Copy, Debug)]
pub struct EdgeMlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub head: Var,
    pub b2: Var,
}

impl EdgeMlpParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, d: usize, mode: EdgeMode) -> Self {
        let in_dim = match mode {
            EdgeMode::Product => d,
            EdgeMode::Concat => 2 * d,
        };
        EdgeMlpParams {
            w1: store.add_linear(&format!("{prefix}.edge.w1"), in_dim, d, rng),
            b1: store.add(format!("{prefix}.edge.b1"), Tensor::randn(1, d, 0.01, rng)),
            w2: store.add_linear(&format!("{prefix}.edge.w2"), d, d, rng),
            head: store.add_linear(&format!("{prefix}.edge.head"), d, 1, rng),
            b2: store.add(format!("{prefix}.edge.b2"), Tensor::randn(1, 1, 0.01, rng)),
            mode,
        }
    }

    pub fn vars(&self, bound: &Bound) -> EdgeMlpVars {
        EdgeMlpVars {
            w1: bound[self.w1],
            b1: bound[self.b1],
            w2: bound[self.w2],
            head: bound[self.head],
            b2: bound[self.b2],
        }
    }
}

/// Symmetric `k × k` matrix of pairwise edge weights in `(0, 1)`.
pub fn edge_weights(tape: &mut Tape, nodes: Var, p: &EdgeMlpVars, mode: EdgeMode) -> Result<Var> {
    let k = tape.value(nodes).rows();
    if k == 0 {
        return Err(Error::Argument("edge_weights needs at least one node".into()));
    }
    let left: Vec<usize> = (0..k * k).map(|p| p / k).collect();
    let right: Vec<usize> = (0..k * k).map(|p| p % k).collect();
    let vi = tape.gather_rows(nodes, &left)?;
    let vj = tape.gather_rows(nodes, &right)?;
    let pairs = match mode {
        EdgeMode::Product => tape.mul(vi, vj)?,
        EdgeMode::Concat => tape.concat_cols(&[vi, vj])?,
    };
    let h = tape.matmul(pairs, p.w1)?;
    let h = tape.add_row(h, p.b1)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, p.w2)?;
    let s = tape.matmul(h, p.head)?;
    let s = tape.add_row(s, p.b2)?;
    let w = tape.sigmoid(s)?;
    let w = tape.reshape(w, k, k)?;
    match mode {
        EdgeMode::Product => Ok(w),
        EdgeMode::Concat => {
            let wt = tape.transpose(w)?;
            let sum = tape.add(w, wt)?;
            tape.scale(sum, 0.5)
        }
    }
}

/// Midpoint between the smallest and largest edge weight.
pub fn threshold(w_o: &Tensor) -> f64 {
    let (lo, hi) = (w_o.min(), w_o.max());
    lo + 0.5 * (hi - lo)
}

/// 0/1 adjacency `a_ij = [w_ij ≥ t]`, with the diagonal forced to 1 when
/// `self_loops` is set, and the masked weights `W_o ⊙ A`.
pub fn adjacency(w_o: &Tensor, t: f64, self_loops: bool) -> (Tensor, Tensor) {
    let (rows, cols) = w_o.shape();
    let mut a = w_o.map(|w| if w >= t { 1.0 } else { 0.0 });
    if self_loops {
        for i in 0..rows.min(cols) {
            a.set(i, i, 1.0);
        }
    }
    let w_n = w_o.hadamard(&a).expect("same shape");
    (a, w_n)
}

/// `v̂_i = Σ_j W_n[i][j] · v_j W_v`. Non-edges carry zero weight in `W_n`.
pub fn refine(tape: &mut Tape, nodes: Var, w_n: Var, w_v: Var) -> Result<Var> {
    let projected = tape.matmul(nodes, w_v)?;
    tape.matmul(w_n, projected)
}

/// Every intermediate of one refinement pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedGraph {
    pub nodes: Tensor,
    pub edge_weights: Tensor,
    pub threshold: f64,
    pub adjacency: Tensor,
    pub masked_weights: Tensor,
    pub refined: Tensor,
}

impl RefinedGraph {
    /// Neighbourhood sizes (row sums of the adjacency).
    pub fn degrees(&self) -> Vec<usize> {
        (0..self.adjacency.rows())
            .map(|r| self.adjacency.row_slice(r).iter().filter(|v| **v != 0.0).count())
            .collect()
    }
}

/// Tape handles of one refinement pass.
pub struct GraphPass {
    pub edge_weights: Var,
    pub masked_weights: Var,
    pub refined: Var,
    pub threshold: f64,
    pub adjacency: Tensor,
}

impl GraphPass {
    pub fn snapshot(&self, tape: &Tape, nodes: Var) -> RefinedGraph {
        RefinedGraph {
            nodes: tape.value(nodes).clone(),
            edge_weights: tape.value(self.edge_weights).clone(),
            threshold: self.threshold,
            adjacency: self.adjacency.clone(),
            masked_weights: tape.value(self.masked_weights).clone(),
            refined: tape.value(self.refined).clone(),
        }
    }
}

/// Parameters of one refinement graph.
#[derive(Clone, Copy, Debug)]
pub struct GraphParams {
    pub edge: EdgeMlpParams,
    pub w_v: ParamId,
    pub self_loops: bool,
}

impl GraphParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, prefix: &str, d: usize, mode: EdgeMode, self_loops: bool) -> Self {
        GraphParams {
            edge: EdgeMlpParams::new(store, rng, prefix, d, mode),
            w_v: store.add_linear(&format!("{prefix}.wv"), d, d, rng),
            self_loops,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, nodes: Var) -> Result<GraphPass> {
        let ev = self.edge.vars(bound);
        let w_o = edge_weights(tape, nodes, &ev, self.edge.mode)?;
        let t = threshold(tape.value(w_o));
        let (a, _) = adjacency(tape.value(w_o), t, self.self_loops);
        let w_n = tape.mul_const(w_o, &a)?;
        let refined = refine(tape, nodes, w_n, bound[self.w_v])?;
        Ok(GraphPass {
            edge_weights: w_o,
            masked_weights: w_n,
            refined,
            threshold: t,
            adjacency: a,
        })
    }
}

/// Row-stochastic scene–object alignment matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureKnowledgeMatrix(Tensor);

impl FeatureKnowledgeMatrix {
    /// Wraps `z` after checking every row sums to 1 within `1e-12`.
    pub fn new(z: Tensor) -> Result<Self> {
        for r in 0..z.rows() {
            let s: f64 = z.row_slice(r).iter().sum();
            if (s - 1.0).abs() > 1e-12 || z.row_slice(r).iter().any(|v| *v < 0.0) {
                return Err(Error::Numeric(format!("knowledge matrix row {r} sums to {s}")));
            }
        }
        Ok(FeatureKnowledgeMatrix(z))
    }

    pub fn matrix(&self) -> &Tensor {
        &self.0
    }
}

/// `Z = softmax(F'_roi · F'_fusionᵀ / √d)`, shape `m × H`.
pub fn knowledge_matrix(tape: &mut Tape, roi_refined: Var, fusion_refined: Var) -> Result<Var> {
    let d = tape.value(roi_refined).cols();
    if tape.value(fusion_refined).cols() != d {
        return Err(Error::Dimension {
            op: "knowledge_matrix",
            lhs: tape.value(roi_refined).shape(),
            rhs: tape.value(fusion_refined).shape(),
        });
    }
    let logits = tape.matmul_t(roi_refined, fusion_refined)?;
    tape.softmax_rows(logits, 1.0 / (d as f64).sqrt(), None)
}

/// Multi-head attention with queries from the refined objects and keys and
/// values from the scene-aligned context `S = Z · F'_fusion`.
pub fn scene_object_attention(
    tape: &mut Tape,
    roi_refined: Var,
    z: Var,
    fusion_refined: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<AttentionOutput> {
    let scene = tape.matmul(z, fusion_refined)?;
    multi_head_attention(tape, roi_refined, scene, p, heads, None)
}

/// Both graphs plus the scene–object attention.
#[derive(Clone, Debug)]
pub struct DgfrParams {
    pub roi_graph: GraphParams,
    pub fusion_graph: GraphParams,
    pub scene_object: AttentionParams,
}

impl DgfrParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, d: usize, heads: usize, mode: EdgeMode, self_loops: bool) -> Self {
        DgfrParams {
            roi_graph: GraphParams::new(store, rng, "dgfr.roi", d, mode, self_loops),
            fusion_graph: GraphParams::new(store, rng, "dgfr.fusion", d, mode, self_loops),
            scene_object: AttentionParams::new(store, rng, "dgfr.mha", d, d, d, heads),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn const_vars(t: &mut Tape, w1: Tensor, b1: Tensor, w2: Tensor, head: Tensor, b2: Tensor) -> EdgeMlpVars {
        EdgeMlpVars {
            w1: t.param(w1),
            b1: t.param(b1),
            w2: t.param(w2),
            head: t.param(head),
            b2: t.param(b2),
        }
    }

    fn random_vars(t: &mut Tape, rng: &mut ChaCha8Rng, d: usize, mode: EdgeMode) -> EdgeMlpVars {
        let in_dim = if mode == EdgeMode::Product { d } else { 2 * d };
        const_vars(
            t,
            Tensor::uniform(in_dim, d, -1.0, 1.0, rng),
            Tensor::uniform(1, d, -1.0, 1.0, rng),
            Tensor::uniform(d, d, -1.0, 1.0, rng),
            Tensor::uniform(d, 1, -1.0, 1.0, rng),
            Tensor::uniform(1, 1, -1.0, 1.0, rng),
        )
    }

    #[test]
    fn zero_params_give_half() {
        let mut t = Tape::new();
        let p = const_vars(&mut t, Tensor::zeros(3, 3), Tensor::zeros(1, 3), Tensor::zeros(3, 3), Tensor::zeros(3, 1), Tensor::zeros(1, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nodes = t.constant(Tensor::randn(4, 3, 1.0, &mut rng));
        let w = edge_weights(&mut t, nodes, &p, EdgeMode::Product).unwrap();
        assert!(t.value(w).data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn hand_evaluated_scalar_edge() {
        let mut t = Tape::new();
        let one = Tensor::scalar(1.0);
        let p = const_vars(&mut t, one.clone(), Tensor::zeros(1, 1), one.clone(), one, Tensor::zeros(1, 1));
        let nodes = t.constant(Tensor::from_rows(&[&[2.0], &[3.0]]));
        let w = edge_weights(&mut t, nodes, &p, EdgeMode::Product).unwrap();
        assert!((t.value(w).get(0, 1) - 0.997_527_376_843_365_2).abs() < 1e-15);
        assert!((t.value(w).get(0, 1) - 1.0 / (1.0 + (-6f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold(&Tensor::row(&[0.2, 0.8, 0.5])), 0.5);
        assert_eq!(threshold(&Tensor::full(3, 3, 0.7)), 0.7);
        assert_eq!(threshold(&Tensor::row(&[0.1, 0.4, 0.9])), 0.5);
    }

    #[test]
    fn adjacency_examples() {
        let w = Tensor::from_rows(&[&[0.9, 0.3], &[0.3, 0.9]]);
        let (a, wn) = adjacency(&w, 0.6, true);
        assert_eq!(a, Tensor::identity(2));
        assert_eq!(wn, Tensor::from_rows(&[&[0.9, 0.0], &[0.0, 0.9]]));
        let (a, _) = adjacency(&w, 0.3, false);
        assert_eq!(a, Tensor::full(2, 2, 1.0));
        let (a, wn) = adjacency(&w, 0.1, true);
        assert_eq!(a, Tensor::full(2, 2, 1.0));
        assert_eq!(wn, w);
        // all equal: every edge survives with equality
        let (a, _) = adjacency(&Tensor::full(3, 3, 0.7), 0.7, false);
        assert_eq!(a, Tensor::full(3, 3, 1.0));
    }

    #[test]
    fn refine_examples() {
        let mut t = Tape::new();
        let nodes = t.constant(Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 4.0]]));
        let wv = t.constant(Tensor::identity(2));
        let wn = t.constant(Tensor::identity(2));
        let r = refine(&mut t, nodes, wn, wv).unwrap();
        assert_eq!(t.value(r), t.value(nodes));
        let wn = t.constant(Tensor::from_rows(&[&[1.0, 0.5], &[0.5, 1.0]]));
        let r = refine(&mut t, nodes, wn, wv).unwrap();
        assert_eq!(t.value(r), &Tensor::from_rows(&[&[2.0, 2.0], &[1.0, 4.0]]));
        let z = t.constant(Tensor::zeros(2, 2));
        let r = refine(&mut t, z, wn, wv).unwrap();
        assert!(t.value(r).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn knowledge_matrix_examples() {
        let mut t = Tape::new();
        let roi = t.constant(Tensor::zeros(3, 4));
        let fus = t.constant(Tensor::zeros(5, 4));
        let z = knowledge_matrix(&mut t, roi, fus).unwrap();
        assert!(t.value(z).data().iter().all(|v| (*v - 0.2).abs() < 1e-15));
        // d = 1 so the scale is 1: logits (ln 2, 0)
        let roi = t.constant(Tensor::scalar(1.0));
        let fus = t.constant(Tensor::from_rows(&[&[2f64.ln()], &[0.0]]));
        let z = knowledge_matrix(&mut t, roi, fus).unwrap();
        let z = FeatureKnowledgeMatrix::new(t.value(z).clone()).unwrap();
        assert!((z.matrix().get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn knowledge_matrix_survives_large_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let roi = Tensor::randn(4, 6, 1.0, &mut rng);
        let fus = Tensor::randn(5, 6, 1.0, &mut rng);
        for c in [1.0, 10.0, 100.0, 1000.0] {
            let mut t = Tape::new();
            let r = t.constant(roi.scale(c));
            let f = t.constant(fus.scale(c));
            let z = knowledge_matrix(&mut t, r, f).unwrap();
            assert!(t.value(z).is_finite());
            FeatureKnowledgeMatrix::new(t.value(z).clone()).unwrap();
        }
    }

    #[test]
    fn single_head_identity_attention_averages_scene_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let roi = t.constant(Tensor::randn(1, 4, 1.0, &mut rng));
        let z = t.constant(Tensor::from_rows(&[&[0.25, 0.75]]));
        let fus = t.constant(Tensor::randn(2, 4, 1.0, &mut rng));
        let i = t.constant(Tensor::identity(4));
        let p = AttentionVars { wq: i, wk: i, wv: i, wo: i };
        let out = scene_object_attention(&mut t, roi, z, fus, &p, 1).unwrap();
        // one query over one scene row: the output is that row
        let s = t.value(z).matmul(t.value(fus)).unwrap();
        assert!(t.value(out.output).all_close(&s, 1e-14));
    }

    #[test]
    fn constant_scene_makes_output_query_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let row = Tensor::randn(1, 4, 1.0, &mut rng);
        let fus = Tensor::concat_rows(&[&row, &row, &row]).unwrap();
        let w: Vec<Tensor> = (0..4).map(|_| Tensor::randn(4, 4, 1.0, &mut rng)).collect();
        let run = |roi: Tensor| {
            let mut t = Tape::new();
            let r = t.constant(roi);
            let z = t.constant(Tensor::full(3, 3, 1.0 / 3.0));
            let f = t.constant(fus.clone());
            let p = AttentionVars { wq: t.constant(w[0].clone()), wk: t.constant(w[1].clone()), wv: t.constant(w[2].clone()), wo: t.constant(w[3].clone()) };
            let out = scene_object_attention(&mut t, r, z, f, &p, 2).unwrap();
            t.value(out.output).row_slice(0).to_vec()
        };
        let a = run(Tensor::randn(3, 4, 1.0, &mut rng));
        let b = run(Tensor::randn(3, 4, 5.0, &mut rng));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn end_to_end_graph_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let d = 4;
        let mut params = vec![
            Tensor::uniform(5, d, -1.0, 1.0, &mut rng), // roi nodes
            Tensor::uniform(3, d, -1.0, 1.0, &mut rng), // fusion nodes
        ];
        for _ in 0..2 {
            params.push(Tensor::uniform(d, d, -1.0, 1.0, &mut rng));
            params.push(Tensor::uniform(1, d, -1.0, 1.0, &mut rng));
            params.push(Tensor::uniform(d, d, -1.0, 1.0, &mut rng));
            params.push(Tensor::uniform(d, 1, -1.0, 1.0, &mut rng));
            params.push(Tensor::uniform(1, 1, -1.0, 1.0, &mut rng));
            params.push(Tensor::uniform(d, d, -1.0, 1.0, &mut rng));
        }
        for _ in 0..4 {
            params.push(Tensor::uniform(d, d, -1.0, 1.0, &mut rng));
        }
        let err = grad_check(
            |t, v| {
                let graph = |t: &mut Tape, nodes: Var, o: usize| -> Result<Var> {
                    let e = EdgeMlpVars { w1: v[o], b1: v[o + 1], w2: v[o + 2], head: v[o + 3], b2: v[o + 4] };
                    let w_o = edge_weights(t, nodes, &e, EdgeMode::Product)?;
                    let th = threshold(t.value(w_o));
                    let (a, _) = adjacency(t.value(w_o), th, true);
                    let w_n = t.mul_const(w_o, &a)?;
                    refine(t, nodes, w_n, v[o + 5])
                };
                let roi = graph(t, v[0], 2)?;
                let fus = graph(t, v[1], 8)?;
                let z = knowledge_matrix(t, roi, fus)?;
                let p = AttentionVars { wq: v[14], wk: v[15], wv: v[16], wo: v[17] };
                let out = scene_object_attention(t, roi, z, fus, &p, 2)?;
                let sq = t.mul(out.output, out.output)?;
                t.sum(sq)
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn graph_laws(seed in any::<u64>(), k in 1usize..7, concat in any::<bool>()) {
            let mode = if concat { EdgeMode::Concat } else { EdgeMode::Product };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tape::new();
            let p = random_vars(&mut t, &mut rng, 3, mode);
            let nodes = t.constant(Tensor::uniform(k, 3, -2.0, 2.0, &mut rng));
            let w = edge_weights(&mut t, nodes, &p, mode).unwrap();
            let w = t.value(w).clone();
            prop_assert_eq!(&w, &w.transpose());
            prop_assert!(w.data().iter().all(|v| *v > 0.0 && *v < 1.0));
            let th = threshold(&w);
            let (a, wn) = adjacency(&w, th, true);
            for i in 0..k {
                prop_assert_eq!(a.get(i, i), 1.0);
                for j in 0..k {
                    if i != j {
                        prop_assert_eq!(a.get(i, j) == 1.0, w.get(i, j) >= th);
                    }
                    prop_assert_eq!(wn.get(i, j), w.get(i, j) * a.get(i, j));
                }
            }
            // raising the threshold never adds edges
            let (a_hi, _) = adjacency(&w, th + 0.05, true);
            prop_assert!(a_hi.data().iter().zip(a.data()).all(|(h, l)| h <= l));
        }
    }
}
