//! Full model assembly: backbone plus task branches wired per variant, with
//! the segmentation/keypoint context exchange and zero-filled slots where a
//! branch is ablated.

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, RES4_STRIDE};
use crate::dense::{DenseBranch, DenseBranchOutput};
use crate::error::Result;
use crate::nn::graph::Graph;
use crate::nn::params::ParamStore;
use crate::pose::{PoseBranch, PoseBranchOutput};
use crate::seg::{SegBranch, SegBranchOutput};
use crate::types::ModelConfig;

/// Nodes produced by one full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub seg: SegBranchOutput,
    /// Present in variants SPD and SP.
    pub pose: Option<PoseBranchOutput>,
    /// Present in variants SPD and SD.
    pub dense: Option<DenseBranchOutput>,
}

/// A built variant: the backbone and whichever branches the variant carries.
pub struct SpdModel {
    pub config: ModelConfig,
    backbone: Backbone,
    seg: SegBranch,
    pose: Option<PoseBranch>,
    dense: Option<DenseBranch>,
    /// Trainable parameter elements across all registered modules.
    pub param_count: usize,
}

/// Registers all parameters for `config.variant` into `store`.
///
/// Initialization draws from a stream seeded by `config.seed` in a fixed
/// module order, so variants sharing a seed share backbone and segmentation
/// weights at construction.
pub fn build_variant(store: &mut ParamStore, config: &ModelConfig) -> Result<SpdModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let backbone = Backbone::new(store, &mut rng, "backbone", config)?;
    let seg = SegBranch::new(
        store,
        &mut rng,
        "seg",
        backbone.res5_channels,
        config.num_classes,
        config.context_channels,
    )?;
    let pose = if config.variant.has_pose() {
        Some(PoseBranch::new(
            store,
            &mut rng,
            "pose",
            backbone.res4_channels,
            config.num_joints,
            config.context_channels,
        )?)
    } else {
        None
    };
    let dense = if config.variant.has_dense() {
        Some(DenseBranch::new(
            store,
            &mut rng,
            "dense",
            backbone.res4_channels,
            config.num_parts,
        )?)
    } else {
        None
    };
    Ok(SpdModel {
        config: config.clone(),
        backbone,
        seg,
        pose,
        dense,
        param_count: store.num_elements(true),
    })
}

impl SpdModel {
    /// Runs every active branch on an image batch `(b, 3, h, w)`.
    ///
    /// Context exchange: the keypoint context is average-pooled to the
    /// stage-5 resolution before entering the segmentation refinement, and
    /// the segmentation context is bilinearly lifted to the stage-4
    /// resolution before entering the keypoint refinement. Ablated slots are
    /// zero-filled inside the branches.
    pub fn forward(&self, g: &mut Graph, images: Array4<f64>) -> Result<ModelOutput> {
        let (_, _, h, w) = images.dim();
        let image = g.input4(images);
        let feats = self.backbone.forward(g, image)?;

        let pose_initial = match &self.pose {
            Some(p) => Some(p.pose_initial(g, feats.res4)?),
            None => None,
        };
        let (initial_logits, seg_context) = self.seg.seg_initial(g, feats.res5)?;

        let pose_ctx_at_res5 = match &pose_initial {
            Some((ctx, _, _)) => Some(g.avg_pool(*ctx, 2)?),
            None => None,
        };
        let final_logits =
            self.seg
                .seg_refine(g, seg_context, initial_logits, pose_ctx_at_res5, h, w)?;

        let pose = match (&self.pose, pose_initial) {
            (Some(p), Some((pose_context, initial_heatmaps, initial_coords))) => {
                let (r4h, r4w) = (h / RES4_STRIDE, w / RES4_STRIDE);
                let seg_ctx_at_res4 = g.bilinear(seg_context, r4h, r4w);
                let (refined_heatmaps, refined_coords) =
                    p.pose_refine(g, pose_context, initial_coords, Some(seg_ctx_at_res4))?;
                Some(PoseBranchOutput {
                    pose_context,
                    initial_heatmaps,
                    initial_coords,
                    refined_heatmaps,
                    refined_coords,
                })
            }
            _ => None,
        };

        let dense = match &self.dense {
            Some(d) => Some(d.forward(g, feats.res4, h, w)?),
            None => None,
        };

        Ok(ModelOutput {
            seg: SegBranchOutput {
                initial_logits,
                seg_context,
                final_logits,
            },
            pose,
            dense,
        })
    }

    pub fn has_pose(&self) -> bool {
        self.pose.is_some()
    }

    pub fn has_dense(&self) -> bool {
        self.dense.is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{default_config, Variant};
    use ndarray::Array4;
    use rand::Rng;
    use std::collections::BTreeSet;

    fn names(variant: Variant) -> BTreeSet<String> {
        let mut config = default_config();
        config.variant = variant;
        let mut store = ParamStore::new();
        build_variant(&mut store, &config).unwrap();
        store.names().map(str::to_string).collect()
    }

    #[test]
    fn variant_parameter_sets_nest() {
        let spd = names(Variant::Spd);
        let sp = names(Variant::Sp);
        let sd = names(Variant::Sd);
        let s = names(Variant::S);
        assert!(sp.is_subset(&spd));
        assert!(sd.is_subset(&spd));
        assert!(s.is_subset(&sp) && s.is_subset(&sd));
        assert!(s.iter().all(|n| !n.starts_with("pose.") && !n.starts_with("dense.")));
        assert!(sp.iter().any(|n| n.starts_with("pose.")));
        assert!(sp.iter().all(|n| !n.starts_with("dense.")));
        assert!(sd.iter().any(|n| n.starts_with("dense.")));
        assert!(sd.iter().all(|n| !n.starts_with("pose.")));
    }

    #[test]
    fn all_variants_forward_with_expected_shapes() {
        for variant in Variant::ALL {
            let mut config = default_config();
            config.variant = variant;
            let mut store = ParamStore::new();
            let model = build_variant(&mut store, &config).unwrap();
            let mut g = Graph::new(&mut store, false);
            let out = model.forward(&mut g, Array4::zeros((2, 3, 64, 64))).unwrap();
            assert_eq!(g.value(out.seg.final_logits).as4().dim(), (2, 19, 64, 64));
            assert_eq!(g.value(out.seg.initial_logits).as4().dim(), (2, 19, 4, 4));
            assert_eq!(out.pose.is_some(), variant.has_pose(), "{variant}");
            assert_eq!(out.dense.is_some(), variant.has_dense(), "{variant}");
            if let Some(p) = out.pose {
                assert_eq!(g.value(p.refined_coords).as3().dim(), (2, 16, 2));
                assert_eq!(g.value(p.pose_context).as4().dim(), (2, 32, 8, 8));
            }
            if let Some(d) = out.dense {
                assert_eq!(g.value(d.part_logits).as4().dim(), (2, 25, 64, 64));
                assert_eq!(g.value(d.uv).as4().dim(), (2, 2, 64, 64));
            }
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let config = default_config();
        let mut store = ParamStore::new();
        let model = build_variant(&mut store, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Array4::from_shape_fn((1, 3, 64, 64), |_| rng.random::<f64>());
        let run = |store: &mut ParamStore| {
            let mut g = Graph::new(store, false);
            let out = model.forward(&mut g, img.clone()).unwrap();
            g.value(out.seg.final_logits).as4().clone()
        };
        let a = run(&mut store);
        let b = run(&mut store);
        assert_eq!(a, b);
    }

    #[test]
    fn shared_seed_gives_shared_backbone_weights_across_variants() {
        let weights = |variant: Variant| {
            let mut config = default_config();
            config.variant = variant;
            let mut store = ParamStore::new();
            build_variant(&mut store, &config).unwrap();
            store.get("backbone.stage3.block0.conv1.weight").unwrap().clone()
        };
        assert_eq!(weights(Variant::Spd), weights(Variant::S));
    }
}
