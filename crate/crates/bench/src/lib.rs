//! Shared fixtures for the criterion benchmarks.

use cahqp_core::detector::BoxLabel;
use cahqp_core::pipeline::RankedDetection;
use cahqp_core::synthdata::{generate_scene, DomainSpec, SceneSample};
use cahqp_core::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn scene(index: u64) -> SceneSample {
    generate_scene(&DomainSpec::default(), index)
}

pub fn random_cost(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect())
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let w = rng.gen_range(0.05..0.3);
    let h = rng.gen_range(0.05..0.3);
    let cx = rng.gen_range(w / 2.0..1.0 - w / 2.0);
    let cy = rng.gen_range(h / 2.0..1.0 - h / 2.0);
    [cx, cy, w, h]
}

/// Aligned predictions and truth over `images` images, 3 classes.
pub fn eval_case(
    rng: &mut ChaCha8Rng,
    images: usize,
) -> (Vec<Vec<RankedDetection>>, Vec<Vec<BoxLabel>>) {
    let mut preds = Vec::with_capacity(images);
    let mut truth = Vec::with_capacity(images);
    for _ in 0..images {
        let mut t = Vec::new();
        for _ in 0..rng.gen_range(1..=4usize) {
            let [cx, cy, w, h] = random_box(rng);
            t.push(BoxLabel::new(rng.gen_range(0..3), cx, cy, w, h));
        }
        let mut p = Vec::new();
        for _ in 0..rng.gen_range(0..=6usize) {
            p.push(RankedDetection {
                class_id: rng.gen_range(0..3),
                confidence: rng.gen_range(0.05..1.0),
                bbox: random_box(rng),
            });
        }
        preds.push(p);
        truth.push(t);
    }
    (preds, truth)
}
