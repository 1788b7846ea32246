//! Shared data model: images, annotations, predictions, and model configuration.
//!
//! All rasters are row-major `(height, width)`; images are `(channel, height,
//! width)` with values in `[0, 1]`. Every type here is immutable after
//! construction and safe to share across threads.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of segmentation classes, background included.
pub const DEFAULT_NUM_CLASSES: usize = 19;
/// Default number of skeleton joints.
pub const DEFAULT_NUM_JOINTS: usize = 16;
/// Default number of dense-surface body parts (0 is background).
pub const DEFAULT_NUM_PARTS: usize = 24;

/// Per-pixel class-index raster over `num_classes` classes.
///
/// Class 0 is background by convention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    pub data: Array2<u8>,
    pub num_classes: usize,
}

impl SegMask {
    pub fn new(data: Array2<u8>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::Invalid(format!(
                "num_classes must be in 1..=256, got {num_classes}"
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| (v as usize) >= num_classes) {
            return Err(Error::Invalid(format!(
                "class index {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(SegMask { data, num_classes })
    }

    /// Constant-background mask of the given size.
    pub fn zeros(height: usize, width: usize, num_classes: usize) -> Self {
        SegMask {
            data: Array2::zeros((height, width)),
            num_classes,
        }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }
}

/// Ordered list of joint coordinates in absolute pixels, with visibility flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    /// `(x, y)` per joint, pixel coordinates.
    pub joints: Vec<[f64; 2]>,
    pub visibility: Vec<bool>,
}

impl Skeleton {
    pub fn new(joints: Vec<[f64; 2]>, visibility: Vec<bool>) -> Result<Self> {
        if joints.len() != visibility.len() {
            return Err(Error::Invalid(format!(
                "joint count {} != visibility count {}",
                joints.len(),
                visibility.len()
            )));
        }
        Ok(Skeleton { joints, visibility })
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    /// Number of joints marked visible.
    pub fn visible_count(&self) -> usize {
        self.visibility.iter().filter(|&&v| v).count()
    }
}

/// Per-pixel body-part index plus continuous surface coordinates.
///
/// `part_index` is 0 on background and in `1..=num_parts` on the figure;
/// `u` and `v` live in `[0, 1]` and are exactly 0 wherever `part_index` is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DensePoseMap {
    pub part_index: Array2<u8>,
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    pub num_parts: usize,
}

impl DensePoseMap {
    pub fn new(
        part_index: Array2<u8>,
        u: Array2<f64>,
        v: Array2<f64>,
        num_parts: usize,
    ) -> Result<Self> {
        if part_index.dim() != u.dim() || u.dim() != v.dim() {
            return Err(Error::Shape(format!(
                "part/u/v rasters disagree: {:?} vs {:?} vs {:?}",
                part_index.dim(),
                u.dim(),
                v.dim()
            )));
        }
        Ok(DensePoseMap {
            part_index,
            u,
            v,
            num_parts,
        })
    }

    /// All-background map of the given size.
    pub fn zeros(height: usize, width: usize, num_parts: usize) -> Self {
        DensePoseMap {
            part_index: Array2::zeros((height, width)),
            u: Array2::zeros((height, width)),
            v: Array2::zeros((height, width)),
            num_parts,
        }
    }

    pub fn height(&self) -> usize {
        self.part_index.nrows()
    }

    pub fn width(&self) -> usize {
        self.part_index.ncols()
    }
}

/// One dataset sample: image raster plus the aligned annotation types.
#[derive(Debug, Clone)]
pub struct AnnotatedSample {
    pub sample_id: String,
    /// `(3, height, width)`, values in `[0, 1]`.
    pub image: Array3<f64>,
    pub mask: SegMask,
    pub skeleton: Skeleton,
    /// Dense-surface annotation; optional per sample.
    pub densepose: Option<DensePoseMap>,
}

impl AnnotatedSample {
    pub fn height(&self) -> usize {
        self.image.dim().1
    }

    pub fn width(&self) -> usize {
        self.image.dim().2
    }
}

/// Checks every typed invariant of a sample and returns one description per
/// violated invariant kind. An empty list means the sample is consistent.
pub fn validate_sample(sample: &AnnotatedSample) -> Vec<String> {
    let mut violations = Vec::new();
    let (c, h, w) = sample.image.dim();
    if c != 3 {
        violations.push(format!("image must have 3 channels, has {c}"));
    }
    if sample.mask.data.dim() != (h, w) {
        violations.push("mask dimensions differ from image".to_string());
    }
    if sample
        .mask
        .data
        .iter()
        .any(|&v| (v as usize) >= sample.mask.num_classes)
    {
        violations.push("class index out of range".to_string());
    }
    if sample
        .skeleton
        .joints
        .iter()
        .zip(&sample.skeleton.visibility)
        .any(|(&[x, y], &vis)| {
            vis && (x < 0.0 || y < 0.0 || x > (w.max(1) - 1) as f64 || y > (h.max(1) - 1) as f64)
        })
    {
        violations.push("visible joint outside image bounds".to_string());
    }
    if let Some(dp) = &sample.densepose {
        if dp.part_index.dim() != (h, w) {
            violations.push("dense-surface dimensions differ from image".to_string());
        }
        if dp
            .part_index
            .iter()
            .any(|&p| (p as usize) > dp.num_parts)
        {
            violations.push("part index out of range".to_string());
        }
        let mut nonzero_on_bg = false;
        let mut out_of_range = false;
        for ((&p, &u), &v) in dp.part_index.iter().zip(dp.u.iter()).zip(dp.v.iter()) {
            if p == 0 && (u != 0.0 || v != 0.0) {
                nonzero_on_bg = true;
            }
            if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                out_of_range = true;
            }
        }
        if nonzero_on_bg {
            violations.push("UV nonzero on background".to_string());
        }
        if out_of_range {
            violations.push("UV out of range".to_string());
        }
    }
    violations
}

/// Which task branches a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Segmentation + keypoint pose + dense surface.
    #[serde(rename = "SPD")]
    Spd,
    /// Segmentation + keypoint pose.
    #[serde(rename = "SP")]
    Sp,
    /// Segmentation + dense surface.
    #[serde(rename = "SD")]
    Sd,
    /// Segmentation only.
    #[serde(rename = "S")]
    S,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Spd, Variant::Sp, Variant::Sd, Variant::S];

    pub fn has_pose(self) -> bool {
        matches!(self, Variant::Spd | Variant::Sp)
    }

    pub fn has_dense(self) -> bool {
        matches!(self, Variant::Spd | Variant::Sd)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Spd => "SPD",
            Variant::Sp => "SP",
            Variant::Sd => "SD",
            Variant::S => "S",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SPD" | "spd" => Ok(Variant::Spd),
            "SP" | "sp" => Ok(Variant::Sp),
            "SD" | "sd" => Ok(Variant::Sd),
            "S" | "s" => Ok(Variant::S),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected one of SPD, SP, SD, S"
            ))),
        }
    }
}

/// How the dense-surface loss combines its classification and regression parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseLossForm {
    /// Per-pixel product of classification cross entropy and the Huber term.
    Product,
    /// Per-pixel sum of the two terms.
    Sum,
}

/// Model architecture and objective configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub num_joints: usize,
    pub num_parts: usize,
    /// Five residual stages as `(block_count, channel_width)`.
    pub backbone_blocks: Vec<(usize, usize)>,
    /// Channel width of the cross-branch context maps.
    pub context_channels: usize,
    pub lambda_s: f64,
    pub lambda_p: f64,
    pub lambda_d: f64,
    pub variant: Variant,
    pub seed: u64,
    pub dense_loss_form: DenseLossForm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        default_config()
    }
}

/// Default desk-scale configuration: 19 classes, 16 joints, 24 parts, joint
/// loss weights (1, 0.8, 0.6), all branches enabled.
pub fn default_config() -> ModelConfig {
    ModelConfig {
        num_classes: DEFAULT_NUM_CLASSES,
        num_joints: DEFAULT_NUM_JOINTS,
        num_parts: DEFAULT_NUM_PARTS,
        backbone_blocks: vec![(1, 16), (1, 24), (1, 32), (1, 48), (1, 64)],
        context_channels: 32,
        lambda_s: 1.0,
        lambda_p: 0.8,
        lambda_d: 0.6,
        variant: Variant::Spd,
        seed: 0,
        dense_loss_form: DenseLossForm::Product,
    }
}

impl ModelConfig {
    /// Validates value-level invariants.
    pub fn validate(&self) -> Result<()> {
        if self.lambda_s < 0.0 || self.lambda_p < 0.0 || self.lambda_d < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.num_classes == 0 || self.num_classes > 256 {
            return Err(Error::Config("num_classes must be in 1..=256".into()));
        }
        if self.num_joints == 0 {
            return Err(Error::Config("num_joints must be positive".into()));
        }
        if self.num_parts == 0 || self.num_parts > 255 {
            return Err(Error::Config("num_parts must be in 1..=255".into()));
        }
        if self.context_channels == 0 {
            return Err(Error::Config("context_channels must be positive".into()));
        }
        if self.backbone_blocks.iter().any(|&(n, w)| n == 0 || w == 0) {
            return Err(Error::Config(
                "backbone stages need positive block counts and channel widths".into(),
            ));
        }
        Ok(())
    }

    /// Joint-loss weights with ablated tasks zeroed out.
    pub fn effective_weights(&self) -> (f64, f64, f64) {
        (
            self.lambda_s,
            if self.variant.has_pose() {
                self.lambda_p
            } else {
                0.0
            },
            if self.variant.has_dense() {
                self.lambda_d
            } else {
                0.0
            },
        )
    }
}
