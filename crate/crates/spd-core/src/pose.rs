//! Keypoint branch: an initial stage distills the stage-4 features into pose
//! context and first joint coordinates via spatial soft-argmax; a refinement
//! stage re-reads those coordinates as Gaussian maps together with the
//! segmentation context.

use ndarray::{Array4, ArrayView2};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Node};
use crate::nn::layers::{Conv2d, ConvBnRelu, WeightInit};
use crate::nn::params::ParamStore;
use crate::types::Skeleton;

/// Width of the Gaussian bumps that re-render coordinates as maps, in cells.
pub const COORD_MAP_SIGMA: f64 = 1.0;

/// Nodes produced by one keypoint-branch pass.
#[derive(Clone, Copy, Debug)]
pub struct PoseBranchOutput {
    /// Context map handed to the segmentation branch, at stage-4 resolution.
    pub pose_context: Node,
    /// N-channel heatmaps behind the initial decode.
    pub initial_heatmaps: Node,
    /// `(batch, N, 2)` coordinates in `[0, 1]`, initial stage.
    pub initial_coords: Node,
    /// N-channel heatmaps behind the refined decode.
    pub refined_heatmaps: Node,
    /// `(batch, N, 2)` coordinates in `[0, 1]`, refined stage.
    pub refined_coords: Node,
}

/// Two-stage keypoint head over the stage-4 features.
pub struct PoseBranch {
    features: Vec<ConvBnRelu>,
    initial_mid: ConvBnRelu,
    initial_head: Conv2d,
    refine: Vec<ConvBnRelu>,
    refine_mid: ConvBnRelu,
    refine_head: Conv2d,
    num_joints: usize,
    context_channels: usize,
}

impl PoseBranch {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        num_joints: usize,
        context_channels: usize,
    ) -> Result<Self> {
        let widths = [48, 48, 40, 40, 36, context_channels];
        let mut features = Vec::with_capacity(widths.len());
        let mut c = in_c;
        for (i, &w) in widths.iter().enumerate() {
            features.push(ConvBnRelu::new(
                store,
                rng,
                &format!("{name}.feat{i}"),
                c,
                w,
                3,
                1,
                1,
            )?);
            c = w;
        }
        let initial_mid = ConvBnRelu::new(store, rng, &format!("{name}.initial_mid"), c, 32, 3, 1, 1)?;
        let initial_head = Conv2d::new(
            store,
            rng,
            &format!("{name}.initial_head"),
            32,
            num_joints,
            1,
            1,
            0,
            1,
            true,
            WeightInit::Zero,
        )?;
        let refine_in = 2 * context_channels + num_joints;
        let refine_widths = [48, 40, 36, 32];
        let mut refine = Vec::with_capacity(refine_widths.len());
        let mut rc = refine_in;
        for (i, &w) in refine_widths.iter().enumerate() {
            refine.push(ConvBnRelu::new(
                store,
                rng,
                &format!("{name}.refine{i}"),
                rc,
                w,
                3,
                1,
                1,
            )?);
            rc = w;
        }
        let refine_mid = ConvBnRelu::new(store, rng, &format!("{name}.refine_mid"), rc, 32, 3, 1, 1)?;
        let refine_head = Conv2d::new(
            store,
            rng,
            &format!("{name}.refine_head"),
            32,
            num_joints,
            1,
            1,
            0,
            1,
            true,
            WeightInit::Zero,
        )?;
        Ok(PoseBranch {
            features,
            initial_mid,
            initial_head,
            refine,
            refine_mid,
            refine_head,
            num_joints,
            context_channels,
        })
    }

    /// Six feature convolutions, then two head convolutions and the
    /// soft-argmax decode. Returns `(pose_context, heatmaps, coords)`.
    pub fn pose_initial(&self, g: &mut Graph, res4: Node) -> Result<(Node, Node, Node)> {
        let mut x = res4;
        for layer in &self.features {
            x = layer.apply(g, x)?;
        }
        let pose_context = x;
        let mid = self.initial_mid.apply(g, pose_context)?;
        let heatmaps = self.initial_head.apply(g, mid)?;
        let coords = g.soft_argmax(heatmaps);
        Ok((pose_context, heatmaps, coords))
    }

    /// Refinement: initial coordinates re-rendered as Gaussian maps join the
    /// pose context and the (resampled) segmentation context; four convolution
    /// levels and two head convolutions decode the refined coordinates.
    ///
    /// `seg_context` must already sit at the stage-4 resolution; `None`
    /// substitutes a zero map, keeping the concatenation width fixed.
    pub fn pose_refine(
        &self,
        g: &mut Graph,
        pose_context: Node,
        initial_coords: Node,
        seg_context: Option<Node>,
    ) -> Result<(Node, Node)> {
        let (b, _, h, w) = g.value(pose_context).as4().dim();
        let coord_maps = g.gaussian_maps(initial_coords, h, w, COORD_MAP_SIGMA);
        let seg_ctx = match seg_context {
            Some(s) => s,
            None => g.input4(Array4::zeros((b, self.context_channels, h, w))),
        };
        let mut x = g.concat_c(&[pose_context, coord_maps, seg_ctx])?;
        for layer in &self.refine {
            x = layer.apply(g, x)?;
        }
        let mid = self.refine_mid.apply(g, x)?;
        let heatmaps = self.refine_head.apply(g, mid)?;
        let coords = g.soft_argmax(heatmaps);
        Ok((heatmaps, coords))
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }
}

/// Maps `[0, 1]`-normalized coordinates onto a pixel grid; every predicted
/// joint is marked visible.
pub fn to_pixels(coords: ArrayView2<'_, f64>, height: usize, width: usize) -> Result<Skeleton> {
    if coords.ncols() != 2 {
        return Err(Error::Shape(format!(
            "expected (n, 2) coordinates, got {:?}",
            coords.dim()
        )));
    }
    let joints = coords
        .rows()
        .into_iter()
        .map(|r| [r[0] * (width - 1) as f64, r[1] * (height - 1) as f64])
        .collect::<Vec<_>>();
    let n = joints.len();
    Skeleton::new(joints, vec![true; n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array4};
    use rand::{Rng, SeedableRng};

    fn branch(store: &mut ParamStore, seed: u64) -> PoseBranch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PoseBranch::new(store, &mut rng, "pose", 48, 16, 32).unwrap()
    }

    #[test]
    fn fresh_heads_decode_to_map_center() {
        let mut store = ParamStore::new();
        let pose = branch(&mut store, 1);
        let mut g = Graph::new(&mut store, false);
        let res4 = g.input4(Array4::zeros((2, 48, 8, 8)));
        let (ctx, heat, init) = pose.pose_initial(&mut g, res4).unwrap();
        assert_eq!(g.value(ctx).as4().dim(), (2, 32, 8, 8));
        assert_eq!(g.value(heat).as4().dim(), (2, 16, 8, 8));
        let coords = g.value(init).as3().clone();
        assert_eq!(coords.dim(), (2, 16, 2));
        for &c in coords.iter() {
            assert!((c - 0.5).abs() < 1e-12);
        }
        let (_, refined) = pose.pose_refine(&mut g, ctx, init, None).unwrap();
        for &c in g.value(refined).as3().iter() {
            assert!((c - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn coords_stay_normalized_under_random_weights() {
        let mut store = ParamStore::new();
        let pose = branch(&mut store, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for name in ["pose.initial_head.weight", "pose.refine_head.weight"] {
            store
                .get_mut(name)
                .unwrap()
                .mapv_inplace(|_| 4.0 * (rng.random::<f64>() - 0.5));
        }
        let res4 = Array4::from_shape_fn((1, 48, 8, 8), |_| rng.random::<f64>());
        let mut g = Graph::new(&mut store, false);
        let x = g.input4(res4);
        let (ctx, _, init) = pose.pose_initial(&mut g, x).unwrap();
        let (_, refined) = pose.pose_refine(&mut g, ctx, init, None).unwrap();
        for node in [init, refined] {
            let coords = g.value(node).as3().clone();
            assert_eq!(coords.dim(), (1, 16, 2));
            for &c in coords.iter() {
                assert!((0.0..=1.0).contains(&c));
            }
        }
    }

    #[test]
    fn seg_context_perturbation_moves_refined_coords() {
        let mut store = ParamStore::new();
        let pose = branch(&mut store, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        store
            .get_mut("pose.refine_head.weight")
            .unwrap()
            .mapv_inplace(|_| rng.random::<f64>() - 0.5);
        let res4 = Array4::from_shape_fn((1, 48, 8, 8), |_| rng.random::<f64>());
        let seg_a = Array4::zeros((1, 32, 8, 8));
        let seg_b = Array4::from_elem((1, 32, 8, 8), 0.9);
        let run = |store: &mut ParamStore, seg: Array4<f64>| {
            let mut g = Graph::new(store, false);
            let x = g.input4(res4.clone());
            let (ctx, _, init) = pose.pose_initial(&mut g, x).unwrap();
            let s = g.input4(seg);
            let (_, refined) = pose.pose_refine(&mut g, ctx, init, Some(s)).unwrap();
            g.value(refined).as3().clone()
        };
        let a = run(&mut store, seg_a);
        let b = run(&mut store, seg_b);
        assert_ne!(a, b);
    }

    #[test]
    fn to_pixels_maps_corners_and_center() {
        let mut c = Array2::zeros((3, 2));
        c[[0, 0]] = 0.5;
        c[[0, 1]] = 0.5;
        c[[2, 0]] = 1.0;
        c[[2, 1]] = 1.0;
        let s = to_pixels(c.view(), 65, 65).unwrap();
        assert_eq!(s.joints[0], [32.0, 32.0]);
        assert_eq!(s.joints[1], [0.0, 0.0]);
        assert_eq!(s.visibility, vec![true; 3]);
        let s64 = to_pixels(c.view(), 64, 64).unwrap();
        assert_eq!(s64.joints[2], [63.0, 63.0]);
    }
}
