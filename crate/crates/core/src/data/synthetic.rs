//! Seeded toy corpora whose captions are predictable from their features.
//!
//! Each image belongs to a class. Every feature array is the class mean plus
//! Gaussian noise, and the captions are fixed phrasings of a class template,
//! so a model can only caption correctly by reading the features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bundle::{CorpusHeader, FeatureBundle};
use crate::tensor::Tensor;

const TEMPLATES: [[&str; 3]; 8] = [
    [
        "many cars are parked in the parking lot",
        "there are many cars in the parking lot",
        "a parking lot with many cars",
    ],
    [
        "a river runs through the green forest",
        "the green forest is beside a river",
        "there is a river in the forest",
    ],
    [
        "some buildings are near a wide road",
        "a wide road goes past some buildings",
        "there are buildings beside the road",
    ],
    [
        "several planes are parked at the airport",
        "an airport with several planes",
        "many planes are at the airport",
    ],
    [
        "a bridge crosses the blue river",
        "the blue river is crossed by a bridge",
        "there is a bridge over the river",
    ],
    [
        "the white beach is next to the ocean",
        "the ocean meets a white beach",
        "there is a beach along the ocean",
    ],
    [
        "a baseball field is surrounded by trees",
        "trees surround a baseball field",
        "there is a baseball field among trees",
    ],
    [
        "large farmland is divided into neat fields",
        "neat fields cover the large farmland",
        "there are many fields on the farmland",
    ],
];

/// Parameters of a synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub classes: usize,
    pub captions_per_image: usize,
    /// Standard deviation of per-image noise around the class means.
    pub noise: f64,
    pub header: CorpusHeader,
}

impl SyntheticSpec {
    /// Desk-scale dimensions: d_v = d_t = 32, H = 16, d_g = 64, k = 9, d_r = 64.
    pub fn desk(seed: u64) -> Self {
        SyntheticSpec {
            seed,
            classes: 4,
            captions_per_image: 1,
            noise: 0.5,
            header: CorpusHeader {
                d_v: 32,
                d_t: 32,
                h: 16,
                d_g: 64,
                k: 9,
                d_r: 64,
            },
        }
    }
}

/// Generated bundles plus the class of each.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub header: CorpusHeader,
    pub bundles: Vec<FeatureBundle>,
    pub classes: Vec<usize>,
}

/// Caption `variant` of class `class`.
pub fn class_caption(class: usize, variant: usize) -> String {
    let base = TEMPLATES[class % TEMPLATES.len()][variant % 3];
    if class < TEMPLATES.len() {
        base.to_string()
    } else {
        format!("{base} in zone {}", class / TEMPLATES.len())
    }
}

struct ClassMeans {
    visual: Tensor,
    text: Tensor,
    grid: Tensor,
    roi: Tensor,
}

fn class_means(spec: &SyntheticSpec) -> Vec<ClassMeans> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let h = &spec.header;
    (0..spec.classes)
        .map(|_| ClassMeans {
            visual: Tensor::randn(1, h.d_v, 1.0, &mut rng),
            text: Tensor::randn(1, h.d_t, 1.0, &mut rng),
            grid: Tensor::randn(h.h, h.d_g, 1.0, &mut rng),
            roi: Tensor::randn(h.k, h.d_r, 1.0, &mut rng),
        })
        .collect()
}

fn noisy(mean: &Tensor, noise: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = Tensor::randn(mean.rows(), mean.cols(), noise, rng);
    // stored as f32 on disk; keep values representable so round trips are exact
    mean.add(&n).expect("same shape").map(|v| v as f32 as f64)
}

/// Images `start..start + count` of the corpus defined by `spec`. Class
/// means depend only on the seed, so disjoint ranges are independent draws
/// from the same distribution.
pub fn generate_range(spec: &SyntheticSpec, start: usize, count: usize) -> SyntheticCorpus {
    assert!(spec.classes >= 1, "at least one class");
    let means = class_means(spec);
    let mut bundles = Vec::with_capacity(count);
    let mut classes = Vec::with_capacity(count);
    for i in start..start + count {
        let class = i % spec.classes;
        let m = &means[class];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)));
        bundles.push(FeatureBundle {
            image_id: format!("syn{i:05}"),
            clip_visual: noisy(&m.visual, spec.noise, &mut rng),
            clip_text: Some(noisy(&m.text, spec.noise, &mut rng)),
            grid: noisy(&m.grid, spec.noise, &mut rng),
            roi: noisy(&m.roi, spec.noise, &mut rng),
            captions: (0..spec.captions_per_image.max(1)).map(|v| class_caption(class, v)).collect(),
        });
        classes.push(class);
    }
    SyntheticCorpus {
        header: spec.header,
        bundles,
        classes,
    }
}

/// `n_images` seeded images, classes assigned round-robin.
pub fn gen_synthetic_corpus(n_images: usize, spec: &SyntheticSpec) -> SyntheticCorpus {
    generate_range(spec, 0, n_images)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(b: &FeatureBundle) -> Vec<f64> {
        let mut v = b.clip_visual.data().to_vec();
        v.extend_from_slice(b.grid.data());
        v.extend_from_slice(b.roi.data());
        v
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec::desk(7);
        let a = gen_synthetic_corpus(8, &spec);
        let b = gen_synthetic_corpus(8, &spec);
        assert_eq!(a.bundles, b.bundles);
        let c = gen_synthetic_corpus(8, &SyntheticSpec::desk(8));
        assert_ne!(a.bundles, c.bundles);
    }

    #[test]
    fn classes_are_balanced() {
        let c = gen_synthetic_corpus(8, &SyntheticSpec::desk(7));
        for k in 0..4 {
            assert_eq!(c.classes.iter().filter(|&&x| x == k).count(), 2);
        }
        for (b, &k) in c.bundles.iter().zip(&c.classes) {
            assert_eq!(b.captions[0], class_caption(k, 0));
            b.validate(&c.header).unwrap();
        }
    }

    #[test]
    fn nearest_centroid_recovers_caption_class() {
        let spec = SyntheticSpec::desk(11);
        let train = generate_range(&spec, 0, 40);
        let held_out = generate_range(&spec, 40, 200);
        let dim = features(&train.bundles[0]).len();
        let mut centroids = vec![vec![0.0; dim]; spec.classes];
        let mut counts = vec![0usize; spec.classes];
        for (b, &c) in train.bundles.iter().zip(&train.classes) {
            for (acc, v) in centroids[c].iter_mut().zip(features(b)) {
                *acc += v;
            }
            counts[c] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
        let correct = held_out
            .bundles
            .iter()
            .filter(|b| {
                let f = features(b);
                let predicted = (0..spec.classes)
                    .min_by(|&a, &b| {
                        let da: f64 = centroids[a].iter().zip(&f).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = centroids[b].iter().zip(&f).map(|(x, y)| (x - y).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                b.captions[0] == class_caption(predicted, 0)
            })
            .count();
        let accuracy = correct as f64 / held_out.bundles.len() as f64;
        assert!(accuracy > 0.9, "accuracy {accuracy}");
    }
}
