//! Dense-surface branch: multi-scale pooled stage-4 features feed a shared
//! trunk with two sibling heads, a part classifier over P+1 indices and a
//! sigmoid-bounded UV regressor, both lifted to input resolution.

use ndarray::{Array2, ArrayView3};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Node};
use crate::nn::layers::{Conv2d, ConvBnRelu, WeightInit};
use crate::nn::params::ParamStore;
use crate::types::DensePoseMap;

/// Average-pooling factors of the context pyramid.
const PYRAMID_SCALES: [usize; 2] = [2, 4];

/// Nodes produced by one dense-surface pass.
#[derive(Clone, Copy, Debug)]
pub struct DenseBranchOutput {
    /// `(batch, P+1, H, W)` part-classification logits at input resolution.
    pub part_logits: Node,
    /// `(batch, 2, H, W)` surface coordinates in `[0, 1]` at input resolution.
    pub uv: Node,
}

/// Dense-surface head over the stage-4 features.
pub struct DenseBranch {
    trunk1: ConvBnRelu,
    trunk2: ConvBnRelu,
    part_head: Conv2d,
    uv_head: Conv2d,
    num_parts: usize,
}

impl DenseBranch {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        num_parts: usize,
    ) -> Result<Self> {
        let cat_c = in_c * (PYRAMID_SCALES.len() + 1);
        let trunk1 = ConvBnRelu::new(store, rng, &format!("{name}.trunk1"), cat_c, 48, 3, 1, 1)?;
        let trunk2 = ConvBnRelu::new(store, rng, &format!("{name}.trunk2"), 48, 40, 3, 1, 1)?;
        let part_head = Conv2d::new(
            store,
            rng,
            &format!("{name}.part_head"),
            40,
            num_parts + 1,
            1,
            1,
            0,
            1,
            true,
            WeightInit::Zero,
        )?;
        let uv_head = Conv2d::new(
            store,
            rng,
            &format!("{name}.uv_head"),
            40,
            2,
            1,
            1,
            0,
            1,
            true,
            WeightInit::Zero,
        )?;
        Ok(DenseBranch {
            trunk1,
            trunk2,
            part_head,
            uv_head,
            num_parts,
        })
    }

    /// Pyramid pooling at 1x, 1/2x, and 1/4x, trunk convolutions, then the two
    /// heads upsampled to `(out_h, out_w)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        res4: Node,
        out_h: usize,
        out_w: usize,
    ) -> Result<DenseBranchOutput> {
        let (_, _, h, w) = g.value(res4).as4().dim();
        let mut scales = vec![res4];
        for &k in &PYRAMID_SCALES {
            if h % k != 0 || w % k != 0 {
                return Err(Error::Shape(format!(
                    "feature map {h}x{w} not divisible by pyramid scale {k}"
                )));
            }
            let pooled = g.avg_pool(res4, k)?;
            scales.push(g.bilinear(pooled, h, w));
        }
        let cat = g.concat_c(&scales)?;
        let t = self.trunk1.apply(g, cat)?;
        let t = self.trunk2.apply(g, t)?;
        let part = self.part_head.apply(g, t)?;
        let part_logits = g.bilinear(part, out_h, out_w);
        let uv_raw = self.uv_head.apply(g, t)?;
        let uv_bounded = g.sigmoid(uv_raw);
        let uv = g.bilinear(uv_bounded, out_h, out_w);
        Ok(DenseBranchOutput { part_logits, uv })
    }

    pub fn num_parts(&self) -> usize {
        self.num_parts
    }
}

/// Argmax decode of the part logits (ties to the lower index); UV values are
/// copied on figure pixels, clamped to `[0, 1]`, and zeroed on background.
pub fn predict_densepose(
    part_logits: ArrayView3<'_, f64>,
    uv: ArrayView3<'_, f64>,
) -> Result<DensePoseMap> {
    let (pc, h, w) = part_logits.dim();
    if pc < 2 || pc > 256 {
        return Err(Error::Shape(format!(
            "part logits need 2..=256 channels, got {pc}"
        )));
    }
    if uv.dim() != (2, h, w) {
        return Err(Error::Shape(format!(
            "uv raster {:?} does not match part logits {:?}",
            uv.dim(),
            part_logits.dim()
        )));
    }
    let mut part = Array2::<u8>::zeros((h, w));
    let mut u = Array2::<f64>::zeros((h, w));
    let mut v = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = part_logits[[0, y, x]];
            for c in 1..pc {
                let val = part_logits[[c, y, x]];
                if val > best_v {
                    best = c;
                    best_v = val;
                }
            }
            part[[y, x]] = best as u8;
            if best > 0 {
                u[[y, x]] = uv[[0, y, x]].clamp(0.0, 1.0);
                v[[y, x]] = uv[[1, y, x]].clamp(0.0, 1.0);
            }
        }
    }
    DensePoseMap::new(part, u, v, pc - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::kernels::softmax_channels;
    use crate::types::{validate_sample, AnnotatedSample, SegMask, Skeleton};
    use ndarray::{Array3, Array4};
    use rand::{Rng, SeedableRng};

    fn branch(store: &mut ParamStore, seed: u64) -> DenseBranch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseBranch::new(store, &mut rng, "dense", 48, 24).unwrap()
    }

    #[test]
    fn fresh_heads_give_uniform_parts_and_centered_uv() {
        let mut store = ParamStore::new();
        let dense = branch(&mut store, 1);
        let mut g = Graph::new(&mut store, false);
        let res4 = g.input4(Array4::zeros((1, 48, 8, 8)));
        let out = dense.forward(&mut g, res4, 64, 64).unwrap();
        let logits = g.value(out.part_logits).as4().clone();
        assert_eq!(logits.dim(), (1, 25, 64, 64));
        let probs = softmax_channels(&logits);
        for &p in probs.iter() {
            assert!((p - 1.0 / 25.0).abs() < 1e-12);
        }
        let uv = g.value(out.uv).as4().clone();
        assert_eq!(uv.dim(), (1, 2, 64, 64));
        for &x in uv.iter() {
            assert!((x - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn uv_stays_bounded_under_random_weights() {
        let mut store = ParamStore::new();
        let dense = branch(&mut store, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        store
            .get_mut("dense.uv_head.weight")
            .unwrap()
            .mapv_inplace(|_| 6.0 * (rng.random::<f64>() - 0.5));
        store
            .get_mut("dense.uv_head.bias")
            .unwrap()
            .mapv_inplace(|_| 2.0 * (rng.random::<f64>() - 0.5));
        let mut g = Graph::new(&mut store, false);
        let res4 = g.input4(Array4::from_shape_fn((2, 48, 8, 8), |_| rng.random::<f64>()));
        let out = dense.forward(&mut g, res4, 64, 64).unwrap();
        for &x in g.value(out.uv).as4().iter() {
            assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn indivisible_feature_map_is_rejected() {
        let mut store = ParamStore::new();
        let dense = branch(&mut store, 3);
        let mut g = Graph::new(&mut store, false);
        let res4 = g.input4(Array4::zeros((1, 48, 6, 6)));
        assert!(dense.forward(&mut g, res4, 48, 48).is_err());
    }

    #[test]
    fn background_maximal_logits_decode_to_empty_map() {
        let mut logits = Array3::zeros((25, 5, 5));
        for y in 0..5 {
            for x in 0..5 {
                logits[[0, y, x]] = 3.0;
            }
        }
        let uv = Array3::from_elem((2, 5, 5), 0.7);
        let dp = predict_densepose(logits.view(), uv.view()).unwrap();
        assert!(dp.part_index.iter().all(|&p| p == 0));
        assert!(dp.u.iter().all(|&u| u == 0.0));
        assert!(dp.v.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoded_map_passes_sample_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Array3::from_shape_fn((25, 16, 16), |_| rng.random::<f64>());
        let uv = Array3::from_shape_fn((2, 16, 16), |_| 1.4 * rng.random::<f64>() - 0.2);
        let dp = predict_densepose(logits.view(), uv.view()).unwrap();
        let sample = AnnotatedSample {
            sample_id: "probe".into(),
            image: Array3::zeros((3, 16, 16)),
            mask: SegMask::zeros(16, 16, 19),
            skeleton: Skeleton::new(vec![[0.0, 0.0]; 16], vec![true; 16]).unwrap(),
            densepose: Some(dp),
        };
        assert!(validate_sample(&sample).is_empty());
    }

    #[test]
    fn part_argmax_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Array3::from_shape_fn((7, 9, 9), |_| rng.random::<f64>());
        let uv = Array3::from_elem((2, 9, 9), 0.5);
        let dp = predict_densepose(logits.view(), uv.view()).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                let mut best = 0;
                for c in 0..7 {
                    if logits[[c, y, x]] > logits[[best, y, x]] {
                        best = c;
                    }
                }
                assert_eq!(dp.part_index[[y, x]] as usize, best);
            }
        }
    }
}
