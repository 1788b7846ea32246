//! Task losses and their weighted combination: pixel-wise cross entropy for
//! segmentation, visible-joint L2 for keypoints, and the classification x
//! Huber dense-surface term.

use ndarray::{Array2, Array3, Array4};

use crate::error::{Error, Result};
use crate::nn::kernels;
use crate::types::{DenseLossForm, DensePoseMap, ModelConfig, Skeleton};

/// Huber switch point for the surface-coordinate residuals, in UV units.
pub const HUBER_DELTA: f64 = 1.0;

/// One iteration's loss components and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_seg: f64,
    pub l_pose: f64,
    pub l_dense: f64,
    pub total: f64,
    /// Effective `(lambda_s, lambda_p, lambda_d)`, ablated tasks zeroed.
    pub weights: (f64, f64, f64),
}

impl LossBreakdown {
    /// All components finite?
    pub fn is_finite(&self) -> bool {
        self.l_seg.is_finite()
            && self.l_pose.is_finite()
            && self.l_dense.is_finite()
            && self.total.is_finite()
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("l_seg", self.l_seg),
            ("l_pose", self.l_pose),
            ("l_dense", self.l_dense),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    /// One line of the training log.
    pub fn log_line(&self, iteration: u64) -> String {
        format!(
            "iter={} l_seg={} l_pose={} l_dense={} total={}",
            iteration, self.l_seg, self.l_pose, self.l_dense, self.total
        )
    }
}

/// Mean over all pixels of the negative log softmax probability of the
/// target class.
pub fn seg_loss(logits: &Array4<f64>, target: &Array3<u8>) -> Result<f64> {
    Ok(kernels::seg_ce_forward(logits, target)?.0)
}

/// Normalizes pixel-space skeletons onto the `[0, 1]` grid used by the
/// keypoint branch. Returns `(coords (b, n, 2), visibility (b, n))`;
/// invisible joints are zeroed and never read by the loss.
pub fn pose_targets(
    skeletons: &[&Skeleton],
    height: usize,
    width: usize,
) -> Result<(Array3<f64>, Array2<bool>)> {
    if skeletons.is_empty() {
        return Err(Error::Invalid("no skeletons to normalize".into()));
    }
    if height < 2 || width < 2 {
        return Err(Error::Invalid(format!(
            "cannot normalize coordinates on a {height}x{width} grid"
        )));
    }
    let n = skeletons[0].num_joints();
    if let Some(s) = skeletons.iter().find(|s| s.num_joints() != n) {
        return Err(Error::Shape(format!(
            "skeleton with {} joints in a batch of {n}-joint skeletons",
            s.num_joints()
        )));
    }
    let mut coords = Array3::zeros((skeletons.len(), n, 2));
    let mut vis = Array2::from_elem((skeletons.len(), n), false);
    for (bi, s) in skeletons.iter().enumerate() {
        for (ji, (&[x, y], &v)) in s.joints.iter().zip(&s.visibility).enumerate() {
            if v {
                coords[[bi, ji, 0]] = x / (width - 1) as f64;
                coords[[bi, ji, 1]] = y / (height - 1) as f64;
                vis[[bi, ji]] = true;
            }
        }
    }
    Ok((coords, vis))
}

/// Visible-joint squared-distance loss: per sample `1/(2V) * sum ||p - p'||^2`
/// over the `V` visible joints, averaged over supervised samples. Returns the
/// loss and the number of samples that carried supervision.
pub fn pose_loss(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    vis: &Array2<bool>,
) -> Result<(f64, usize)> {
    kernels::pose_l2_forward(pred, target, vis)
}

/// Stacks optional per-sample dense annotations into batch targets:
/// `(part (b, h, w), uv (b, 2, h, w), valid flags)`. Samples without an
/// annotation get zero rasters and a false flag.
pub fn dense_targets(
    maps: &[Option<&DensePoseMap>],
    height: usize,
    width: usize,
) -> Result<(Array3<u8>, Array4<f64>, Vec<bool>)> {
    if maps.is_empty() {
        return Err(Error::Invalid("no dense annotations to stack".into()));
    }
    let bs = maps.len();
    let mut part = Array3::zeros((bs, height, width));
    let mut uv = Array4::zeros((bs, 2, height, width));
    let mut valid = vec![false; bs];
    for (bi, m) in maps.iter().enumerate() {
        let Some(m) = m else { continue };
        if m.part_index.dim() != (height, width) {
            return Err(Error::Shape(format!(
                "dense annotation {:?} does not match the {height}x{width} batch",
                m.part_index.dim()
            )));
        }
        valid[bi] = true;
        for y in 0..height {
            for x in 0..width {
                part[[bi, y, x]] = m.part_index[[y, x]];
                uv[[bi, 0, y, x]] = m.u[[y, x]];
                uv[[bi, 1, y, x]] = m.v[[y, x]];
            }
        }
    }
    Ok((part, uv, valid))
}

/// Dense-surface loss over a batch; see the kernel for the exact form.
pub fn dense_loss(
    part_logits: &Array4<f64>,
    uv: &Array4<f64>,
    part: &Array3<u8>,
    target_uv: &Array4<f64>,
    valid: &[bool],
    form: DenseLossForm,
) -> Result<f64> {
    let t = kernels::DenseTargets {
        part,
        uv: target_uv,
        valid,
    };
    Ok(kernels::dense_loss_forward(part_logits, uv, &t, form, HUBER_DELTA)?.0)
}

/// Weighted joint objective. Ablated tasks must pass 0 and contribute 0; the
/// weights recorded in the breakdown are the effective ones.
pub fn joint_loss(l_seg: f64, l_pose: f64, l_dense: f64, config: &ModelConfig) -> Result<LossBreakdown> {
    if config.lambda_s < 0.0 || config.lambda_p < 0.0 || config.lambda_d < 0.0 {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    let weights = config.effective_weights();
    let total = weights.0 * l_seg + weights.1 * l_pose + weights.2 * l_dense;
    Ok(LossBreakdown {
        l_seg,
        l_pose,
        l_dense,
        total,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{default_config, Variant};
    use ndarray::{Array3, Array4};

    #[test]
    fn uniform_logits_cost_ln_k() {
        let logits = Array4::zeros((2, 19, 4, 4));
        let target = Array3::zeros((2, 4, 4));
        let l = seg_loss(&logits, &target).unwrap();
        assert!((l - 19.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_class_pixel_example() {
        let mut logits = Array4::zeros((1, 2, 1, 1));
        logits[[0, 1, 0, 0]] = 3.0f64.ln();
        let mut target = Array3::zeros((1, 1, 1));
        target[[0, 0, 0]] = 1;
        let l = seg_loss(&logits, &target).unwrap();
        assert!((l - (-0.75f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn sixteen_joints_off_by_a_tenth() {
        let n = 16;
        let mut pred = Array3::zeros((1, n, 2));
        let target = Array3::zeros((1, n, 2));
        for j in 0..n {
            pred[[0, j, 0]] = 0.1;
        }
        let vis = Array2::from_elem((1, n), true);
        let (l, sup) = pose_loss(&pred, &target, &vis).unwrap();
        assert!((l - 0.005).abs() < 1e-12);
        assert_eq!(sup, 1);
    }

    #[test]
    fn invisible_skeleton_reports_no_supervision() {
        let pred = Array3::from_elem((1, 16, 2), 0.4);
        let target = Array3::zeros((1, 16, 2));
        let vis = Array2::from_elem((1, 16), false);
        let (l, sup) = pose_loss(&pred, &target, &vis).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(sup, 0);
    }

    #[test]
    fn pose_targets_normalize_by_grid_extent() {
        let skel = Skeleton::new(vec![[63.0, 0.0], [31.5, 63.0]], vec![true, true]).unwrap();
        let (coords, vis) = pose_targets(&[&skel], 64, 64).unwrap();
        assert_eq!(coords[[0, 0, 0]], 1.0);
        assert_eq!(coords[[0, 0, 1]], 0.0);
        assert_eq!(coords[[0, 1, 0]], 0.5);
        assert_eq!(coords[[0, 1, 1]], 1.0);
        assert!(vis[[0, 0]] && vis[[0, 1]]);
    }

    #[test]
    fn dense_product_example() {
        // One foreground pixel: cse = 0.5, residual (0.3, 0) -> 0.5 * 0.045.
        let mut logits = Array4::zeros((1, 2, 1, 1));
        logits[[0, 0, 0, 0]] = (0.5f64.exp() - 1.0).ln();
        let mut part = Array3::zeros((1, 1, 1));
        part[[0, 0, 0]] = 1;
        let mut uv = Array4::zeros((1, 2, 1, 1));
        uv[[0, 0, 0, 0]] = 0.3;
        let tuv = Array4::zeros((1, 2, 1, 1));
        let l = dense_loss(&logits, &uv, &part, &tuv, &[true], DenseLossForm::Product).unwrap();
        assert!((l - 0.0225).abs() < 1e-12, "{l}");
        let s = dense_loss(&logits, &uv, &part, &tuv, &[true], DenseLossForm::Sum).unwrap();
        assert!((s - 0.545).abs() < 1e-12, "{s}");
    }

    #[test]
    fn joint_loss_matches_published_weighting() {
        let config = default_config();
        let b = joint_loss(1.0, 1.0, 1.0, &config).unwrap();
        assert_eq!(b.total, 2.4);
        assert_eq!(b.weights, (1.0, 0.8, 0.6));
    }

    #[test]
    fn ablated_tasks_contribute_nothing() {
        let mut config = default_config();
        config.variant = Variant::S;
        let b = joint_loss(0.7, 0.0, 0.0, &config).unwrap();
        assert_eq!(b.total, 0.7);
        config.variant = Variant::Spd;
        config.lambda_p = 0.0;
        let b = joint_loss(0.0, 5.0, 0.0, &config).unwrap();
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn negative_weight_is_rejected() {
        let mut config = default_config();
        config.lambda_d = -0.1;
        assert!(joint_loss(1.0, 1.0, 1.0, &config).is_err());
    }

    #[test]
    fn breakdown_invariant_holds_for_arbitrary_components() {
        let config = default_config();
        for (ls, lp, ld) in [(0.1, 2.3, 4.5), (9.9, 0.0, 0.004), (3.3, 1.1, 0.77)] {
            let b = joint_loss(ls, lp, ld, &config).unwrap();
            assert_eq!(b.total, 1.0 * ls + 0.8 * lp + 0.6 * ld);
        }
    }

    #[test]
    fn log_line_is_stable() {
        let b = LossBreakdown {
            l_seg: 1.5,
            l_pose: 0.25,
            l_dense: 0.0,
            total: 1.7,
            weights: (1.0, 0.8, 0.6),
        };
        assert_eq!(
            b.log_line(12),
            "iter=12 l_seg=1.5 l_pose=0.25 l_dense=0 total=1.7"
        );
    }
}
