//! Semantic-spatial feature fusion.
//!
//! The CLIP visual and text vectors are concatenated into one semantic
//! vector, linearly mapped to the grid feature width, repeated once per grid
//! row and convex-combined with the grid features:
//!
//! ```text
//! fused = α · tile_H(P(concat(visual, text))) + (1 − α) · grid
//! ```
//!
//! When the grid width differs from the model width a second learned map
//! brings the result to model width.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::InferenceText;
use crate::data::CorpusHeader;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Fused scene features and the mixing weight that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures {
    pub matrix: Tensor,
    pub alpha: f64,
}

/// `[visual, text]` along the feature axis.
pub fn embed_semantic(tape: &mut Tape, visual: Var, text: Var) -> Result<Var> {
    for v in [visual, text] {
        if tape.value(v).rows() != 1 {
            return Err(Error::Dimension {
                op: "embed_semantic",
                lhs: tape.value(v).shape(),
                rhs: (1, tape.value(v).cols()),
            });
        }
    }
    tape.concat_cols(&[visual, text])
}

/// Weighted fusion of the semantic vector with grid features.
///
/// `proj` maps the semantic width to the grid width; `out_proj`, when given,
/// maps the grid width to the model width.
pub fn fuse(tape: &mut Tape, embedded: Var, grid: Var, proj: Var, out_proj: Option<Var>, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("fusion weight alpha={alpha} outside [0, 1]")));
    }
    let rows = tape.value(grid).rows();
    let semantic = tape.matmul(embedded, proj)?;
    let tiled = tape.tile_rows(semantic, rows)?;
    let a = tape.scale(tiled, alpha)?;
    let b = tape.scale(grid, 1.0 - alpha)?;
    let fused = tape.add(a, b)?;
    match out_proj {
        Some(w) => tape.matmul(fused, w),
        None => Ok(fused),
    }
}

/// Value-level [`fuse`] without gradient tracking.
pub fn fuse_values(embedded: &Tensor, grid: &Tensor, proj: &Tensor, out_proj: Option<&Tensor>, alpha: f64) -> Result<FusedFeatures> {
    let mut tape = Tape::inference();
    let e = tape.constant(embedded.clone());
    let g = tape.constant(grid.clone());
    let p = tape.constant(proj.clone());
    let o = out_proj.map(|t| tape.constant(t.clone()));
    let out = fuse(&mut tape, e, g, p, o, alpha)?;
    Ok(FusedFeatures {
        matrix: tape.value(out).clone(),
        alpha,
    })
}

/// Learned pieces of the fusion stage.
#[derive(Clone, Debug)]
pub struct SsffParams {
    pub proj: ParamId,
    pub out_proj: Option<ParamId>,
    /// Stand-in for CLIP text features on the image-only pathway.
    pub text_const: Option<ParamId>,
    pub alpha: f64,
    d_t: usize,
}

/// Which text features feed the semantic vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextPathway {
    /// Use the bundle's CLIP text features when present.
    ImageText,
    /// Ignore any text features; use the configured substitute.
    ImageOnly,
}

impl SsffParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        header: &CorpusHeader,
        model_dim: usize,
        alpha: f64,
        inference_text: InferenceText,
    ) -> Self {
        let proj = store.add_linear("ssff.proj", header.d_v + header.d_t, header.d_g, rng);
        let out_proj = (header.d_g != model_dim).then(|| store.add_linear("ssff.out_proj", header.d_g, model_dim, rng));
        let text_const = (inference_text == InferenceText::Learned)
            .then(|| store.add("ssff.text_const", Tensor::randn(1, header.d_t, 0.02, rng)));
        SsffParams {
            proj,
            out_proj,
            text_const,
            alpha,
            d_t: header.d_t,
        }
    }

    /// Fused `H × d` features for one image.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        visual: &Tensor,
        text: Option<&Tensor>,
        grid: &Tensor,
        pathway: TextPathway,
    ) -> Result<Var> {
        let v = tape.constant(visual.clone());
        let t = match (pathway, text) {
            (TextPathway::ImageText, Some(t)) => tape.constant(t.clone()),
            _ => match self.text_const {
                Some(id) => bound[id],
                None => tape.constant(Tensor::zeros(1, self.d_t)),
            },
        };
        let embedded = embed_semantic(tape, v, t)?;
        let g = tape.constant(grid.clone());
        fuse(tape, embedded, g, bound[self.proj], self.out_proj.map(|id| bound[id]), self.alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn concatenation_order_is_visual_then_text() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::row(&[1.0, 2.0, 3.0, 4.0]));
        let x = t.constant(Tensor::row(&[5.0, 6.0, 7.0, 8.0]));
        let e = embed_semantic(&mut t, v, x).unwrap();
        assert_eq!(t.value(e).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let z = t.constant(Tensor::zeros(1, 4));
        let e = embed_semantic(&mut t, z, z).unwrap();
        assert!(t.value(e).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn full_scale_semantic_width() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::zeros(1, 512));
        let e = embed_semantic(&mut t, v, v).unwrap();
        assert_eq!(t.value(e).shape(), (1, 1024));
    }

    #[test]
    fn hand_evaluated_fusion() {
        let grid = Tensor::from_rows(&[&[3.0, 3.0], &[5.0, 5.0]]);
        let out = fuse_values(&Tensor::row(&[1.0, 1.0]), &grid, &Tensor::identity(2), None, 0.5).unwrap();
        assert_eq!(out.matrix, Tensor::from_rows(&[&[2.0, 2.0], &[3.0, 3.0]]));
    }

    #[test]
    fn alpha_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = Tensor::randn(1, 6, 1.0, &mut rng);
        let g = Tensor::randn(5, 3, 1.0, &mut rng);
        let p = Tensor::randn(6, 3, 1.0, &mut rng);
        let out = fuse_values(&e, &g, &p, None, 0.0).unwrap();
        assert_eq!(out.matrix, g);
        let out = fuse_values(&e, &g, &p, None, 1.0).unwrap();
        for r in 1..5 {
            assert_eq!(out.matrix.row_slice(r), out.matrix.row_slice(0));
        }
        assert!(matches!(fuse_values(&e, &g, &p, None, 1.2), Err(Error::Argument(_))));
    }

    #[test]
    fn gradients_through_fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = vec![
            Tensor::uniform(1, 4, -1.0, 1.0, &mut rng),
            Tensor::uniform(3, 5, -1.0, 1.0, &mut rng),
            Tensor::uniform(4, 5, -1.0, 1.0, &mut rng),
            Tensor::uniform(5, 2, -1.0, 1.0, &mut rng),
            Tensor::uniform(3, 2, -1.0, 1.0, &mut rng),
        ];
        let err = grad_check(
            |t, v| {
                let f = fuse(t, v[0], v[1], v[2], Some(v[3]), 0.3)?;
                let w = t.mul(f, v[4])?;
                let sq = t.mul(w, w)?;
                t.sum(sq)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    proptest! {
        #[test]
        fn fusion_is_linear(seed in any::<u64>(), alpha in 0.0f64..=1.0, c in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Tensor::randn(4, 3, 1.0, &mut rng);
            let (e1, e2) = (Tensor::randn(1, 4, 1.0, &mut rng), Tensor::randn(1, 4, 1.0, &mut rng));
            let (g1, g2) = (Tensor::randn(5, 3, 1.0, &mut rng), Tensor::randn(5, 3, 1.0, &mut rng));
            let f = |e: &Tensor, g: &Tensor| fuse_values(e, g, &p, None, alpha).unwrap().matrix;
            let sum = f(&e1.add(&e2).unwrap(), &g1.add(&g2).unwrap());
            prop_assert!(sum.all_close(&f(&e1, &g1).add(&f(&e2, &g2)).unwrap(), 1e-9));
            let scaled = f(&e1.scale(c), &g1.scale(c));
            prop_assert!(scaled.all_close(&f(&e1, &g1).scale(c), 1e-9));
        }

        #[test]
        fn unit_alpha_rows_identical(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = fuse_values(&Tensor::randn(1, 3, 1.0, &mut rng), &Tensor::randn(4, 2, 1.0, &mut rng),
                                  &Tensor::randn(3, 2, 1.0, &mut rng), Some(&Tensor::randn(2, 5, 1.0, &mut rng)), 1.0).unwrap();
            for r in 1..4 {
                prop_assert_eq!(out.matrix.row_slice(r), out.matrix.row_slice(0));
            }
        }
    }
}
