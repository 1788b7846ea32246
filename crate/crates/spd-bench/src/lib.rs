//! Shared helpers for the benchmark suite: small deterministic fixtures.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spd_core::{AnnotatedSample, SegMask, Skeleton};

/// Deterministic random samples shaped like the synthetic dataset, without
/// touching the filesystem.
pub fn random_samples(count: usize, side: usize, seed: u64) -> Vec<AnnotatedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let image = Array4::from_shape_fn((1, 3, side, side), |_| rng.random::<f64>())
                .index_axis_move(Axis(0), 0);
            let mask = Array2::from_shape_fn((side, side), |_| rng.random_range(0..19u8));
            let joints = (0..16)
                .map(|_| {
                    [
                        rng.random_range(0.0..(side - 1) as f64),
                        rng.random_range(0.0..(side - 1) as f64),
                    ]
                })
                .collect();
            AnnotatedSample {
                sample_id: format!("b{i}"),
                image,
                mask: SegMask::new(mask, 19).expect("valid mask"),
                skeleton: Skeleton::new(joints, vec![true; 16]).expect("valid skeleton"),
                densepose: Some(random_densepose(&mut rng, side)),
            }
        })
        .collect()
}

fn random_densepose(rng: &mut ChaCha8Rng, side: usize) -> spd_core::DensePoseMap {
    let mut part = Array2::<u8>::zeros((side, side));
    let mut u = Array2::<f64>::zeros((side, side));
    let mut v = Array2::<f64>::zeros((side, side));
    let lo = side / 4;
    let hi = 3 * side / 4;
    for y in lo..hi {
        for x in lo..hi {
            part[[y, x]] = rng.random_range(1..=24);
            u[[y, x]] = rng.random::<f64>();
            v[[y, x]] = rng.random::<f64>();
        }
    }
    spd_core::DensePoseMap::new(part, u, v, 24).expect("valid dense map")
}

/// Random logits of the segmentation head's output shape.
pub fn random_logits(batch: usize, k: usize, side: usize, seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn((batch, k, side, side), |_| rng.random_range(-3.0..3.0))
}

/// Random class targets matching [`random_logits`].
pub fn random_targets(batch: usize, k: usize, side: usize, seed: u64) -> Array3<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    Array3::from_shape_fn((batch, side, side), |_| rng.random_range(0..k as u8))
}
