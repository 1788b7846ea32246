//! Shared residual backbone with two tap points: the stage-4 output feeds the
//! keypoint and dense-surface branches, the stage-5 output the segmentation
//! branch.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Node};
use crate::nn::layers::{ConvBnRelu, ResidualBlock};
use crate::nn::params::ParamStore;
use crate::types::ModelConfig;

/// Spatial stride of the stage-4 tap relative to the input.
pub const RES4_STRIDE: usize = 8;
/// Spatial stride of the stage-5 tap relative to the input.
pub const RES5_STRIDE: usize = 16;

/// Per-stage stride of the first residual block; later blocks run at stride 1.
const STAGE_STRIDES: [usize; 5] = [2, 1, 2, 1, 2];

/// The two intermediate feature maps consumed by the task branches.
#[derive(Clone, Copy, Debug)]
pub struct BackboneFeatures {
    /// Stage-4 output, stride [`RES4_STRIDE`].
    pub res4: Node,
    /// Stage-5 output, stride [`RES5_STRIDE`].
    pub res5: Node,
}

/// Five-stage residual feature extractor.
///
/// The stem convolution runs at stride 2 and the first blocks of stages 1, 3,
/// and 5 at stride 2 each, which pins the taps at strides 8 and 16.
pub struct Backbone {
    stem: ConvBnRelu,
    stages: Vec<Vec<ResidualBlock>>,
    /// Channel width of the stage-4 tap.
    pub res4_channels: usize,
    /// Channel width of the stage-5 tap.
    pub res5_channels: usize,
    /// Trainable parameter elements registered by this backbone.
    pub param_count: usize,
}

impl Backbone {
    /// Registers all backbone parameters under `{name}.` in the store.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        config: &ModelConfig,
    ) -> Result<Self> {
        if config.backbone_blocks.len() != 5 {
            return Err(Error::Config(format!(
                "backbone needs exactly 5 stages, got {}",
                config.backbone_blocks.len()
            )));
        }
        if let Some(&(n, w)) = config
            .backbone_blocks
            .iter()
            .find(|&&(n, w)| n == 0 || w == 0)
        {
            return Err(Error::Config(format!(
                "backbone stage with {n} blocks of width {w}; both must be positive"
            )));
        }
        let before = store.num_elements(true);
        let stem_width = config.backbone_blocks[0].1;
        let stem = ConvBnRelu::new(store, rng, &format!("{name}.stem"), 3, stem_width, 3, 2, 1)?;
        let mut stages = Vec::with_capacity(5);
        let mut in_c = stem_width;
        for (si, &(blocks, width)) in config.backbone_blocks.iter().enumerate() {
            let mut stage = Vec::with_capacity(blocks);
            for bi in 0..blocks {
                let stride = if bi == 0 { STAGE_STRIDES[si] } else { 1 };
                stage.push(ResidualBlock::new(
                    store,
                    rng,
                    &format!("{name}.stage{}.block{}", si + 1, bi),
                    in_c,
                    width,
                    stride,
                )?);
                in_c = width;
            }
            stages.push(stage);
        }
        Ok(Backbone {
            stem,
            stages,
            res4_channels: config.backbone_blocks[3].1,
            res5_channels: config.backbone_blocks[4].1,
            param_count: store.num_elements(true) - before,
        })
    }

    /// Runs the stack and returns both taps from the same pass.
    pub fn forward(&self, g: &mut Graph, image: Node) -> Result<BackboneFeatures> {
        let (_, _, h, w) = g.value(image).as4().dim();
        if h % RES5_STRIDE != 0 || w % RES5_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} not divisible by the backbone stride {RES5_STRIDE}"
            )));
        }
        let mut x = self.stem.apply(g, image)?;
        for stage in &self.stages[..4] {
            for block in stage {
                x = block.apply(g, x)?;
            }
        }
        let res4 = x;
        for block in &self.stages[4] {
            x = block.apply(g, x)?;
        }
        Ok(BackboneFeatures { res4, res5: x })
    }

    /// Convenience wrapper: checks divisibility without building a graph.
    pub fn check_input_dims(height: usize, width: usize) -> Result<()> {
        if height % RES5_STRIDE != 0 || width % RES5_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "input {height}x{width} not divisible by the backbone stride {RES5_STRIDE}"
            )));
        }
        Ok(())
    }

    /// Forward on a raw image batch, for eval-style callers.
    pub fn forward_images(&self, g: &mut Graph, images: Array4<f64>) -> Result<BackboneFeatures> {
        let x = g.input4(images);
        self.forward(g, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::default_config;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};

    fn build(config: &ModelConfig) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bb = Backbone::new(&mut store, &mut rng, "backbone", config).unwrap();
        (store, bb)
    }

    #[test]
    fn default_config_taps_have_stride_8_and_16() {
        let config = default_config();
        let (mut store, bb) = build(&config);
        let mut g = Graph::new(&mut store, false);
        let feats = bb.forward_images(&mut g, Array4::zeros((1, 3, 64, 64))).unwrap();
        assert_eq!(g.value(feats.res4).as4().dim(), (1, 48, 8, 8));
        assert_eq!(g.value(feats.res5).as4().dim(), (1, 64, 4, 4));
    }

    #[test]
    fn four_stage_config_is_rejected() {
        let mut config = default_config();
        config.backbone_blocks.pop();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(Backbone::new(&mut store, &mut rng, "b", &config).is_err());
    }

    #[test]
    fn zero_width_stage_is_rejected() {
        let mut config = default_config();
        config.backbone_blocks[2].1 = 0;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(Backbone::new(&mut store, &mut rng, "b", &config).is_err());
    }

    #[test]
    fn indivisible_input_reports_required_stride() {
        let config = default_config();
        let (mut store, bb) = build(&config);
        let mut g = Graph::new(&mut store, false);
        let err = bb
            .forward_images(&mut g, Array4::zeros((1, 3, 72, 64)))
            .unwrap_err();
        assert!(err.to_string().contains("16"), "{err}");
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let config = default_config();
        let (mut store, bb) = build(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = Array4::from_shape_fn((1, 3, 32, 32), |_| rng.random::<f64>());
        let run = |store: &mut ParamStore| {
            let mut g = Graph::new(store, false);
            let f = bb.forward_images(&mut g, img.clone()).unwrap();
            g.value(f.res5).as4().clone()
        };
        let a = run(&mut store);
        let b = run(&mut store);
        assert_eq!(a, b);
    }

    #[test]
    fn stage2_weight_reaches_both_taps() {
        let config = default_config();
        let (mut store, bb) = build(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let img = Array4::from_shape_fn((1, 3, 32, 32), |_| rng.random::<f64>());
        let run = |store: &mut ParamStore| {
            let mut g = Graph::new(store, false);
            let f = bb.forward_images(&mut g, img.clone()).unwrap();
            (
                g.value(f.res4).as4().sum(),
                g.value(f.res5).as4().sum(),
            )
        };
        let (r4a, r5a) = run(&mut store);
        store
            .get_mut("backbone.stage2.block0.conv1.weight")
            .unwrap()[[0, 0, 0, 0]] += 0.5;
        let (r4b, r5b) = run(&mut store);
        assert_ne!(r4a, r4b);
        assert_ne!(r5a, r5b);
    }

    #[test]
    fn param_count_matches_store_total() {
        let config = default_config();
        let (store, bb) = build(&config);
        assert_eq!(bb.param_count, store.num_elements(true));
        assert!(bb.param_count > 0);
    }
}
