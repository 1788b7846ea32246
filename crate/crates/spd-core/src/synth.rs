//! Procedural humanoid figures: articulated 2-D capsule bodies rendered with
//! mutually consistent segmentation, skeleton, and dense-surface annotations.
//!
//! Left and right limbs share image colors and occluders borrow body colors,
//! so appearance alone underdetermines the labels; the structural annotations
//! carry real signal.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io;
use crate::types::{validate_sample, AnnotatedSample, DensePoseMap, SegMask, Skeleton};

pub const NUM_JOINTS: usize = 16;
pub const NUM_BONES: usize = 15;
pub const DEFAULT_IMAGE_SIDE: usize = 64;
/// Dense-surface part vocabulary size written into manifests.
pub const NUM_PARTS: usize = 24;

/// Joint ordering used by every skeleton this generator produces.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "right_ankle",
    "right_knee",
    "right_hip",
    "left_hip",
    "left_knee",
    "left_ankle",
    "pelvis",
    "thorax",
    "upper_neck",
    "head_top",
    "right_wrist",
    "right_elbow",
    "right_shoulder",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
];

/// Per-joint articulation range in radians, relative to the rest pose.
pub const ANGLE_RANGES: [(f64, f64); NUM_JOINTS] = [
    (-0.80, 0.35), // right_ankle (shin swing)
    (-0.55, 0.55), // right_knee (thigh swing)
    (-0.10, 0.10), // right_hip socket
    (-0.10, 0.10), // left_hip socket
    (-0.55, 0.55), // left_knee (thigh swing)
    (-0.35, 0.80), // left_ankle (shin swing)
    (-0.20, 0.20), // pelvis (whole-body lean)
    (-0.15, 0.15), // thorax (spine)
    (-0.25, 0.25), // upper_neck
    (-0.15, 0.15), // head_top
    (-1.10, 1.10), // right_wrist (forearm swing)
    (-1.30, 0.95), // right_elbow (upper-arm swing)
    (-0.25, 0.25), // right_shoulder mount
    (-0.25, 0.25), // left_shoulder mount
    (-0.95, 1.30), // left_elbow (upper-arm swing)
    (-1.10, 1.10), // left_wrist (forearm swing)
];

const FRAC_PI_2: f64 = std::f64::consts::FRAC_PI_2;

// Materials give the image its colors; left and right limbs always share one.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Material {
    Skin,
    Shirt,
    Pants,
    Socks,
}

struct Bone {
    child: usize,
    parent: usize,
    length: f64,
    rest: f64,
    radius: f64,
    seg_class: u8,
    part_index: u8,
    material: Material,
}

// Listed in painter's order: trunk and head first (drawn behind), then legs,
// then arms on top. The trunk and head are wide enough that no thinner limb
// passing in front can blot out a joint's whole tolerance disk, and limb
// joints always sit on their own top-drawn capsules.
const BONES: [Bone; NUM_BONES] = [
    // trunk, shoulder mounts, and head
    Bone { child: 7, parent: 6, length: 0.92, rest: 0.0, radius: 0.32, seg_class: 2, part_index: 1, material: Material::Shirt },
    Bone { child: 12, parent: 7, length: 0.50, rest: FRAC_PI_2, radius: 0.105, seg_class: 2, part_index: 10, material: Material::Shirt },
    Bone { child: 13, parent: 7, length: 0.50, rest: -FRAC_PI_2, radius: 0.105, seg_class: 2, part_index: 11, material: Material::Shirt },
    Bone { child: 2, parent: 6, length: 0.26, rest: FRAC_PI_2, radius: 0.16, seg_class: 11, part_index: 4, material: Material::Pants },
    Bone { child: 3, parent: 6, length: 0.26, rest: -FRAC_PI_2, radius: 0.16, seg_class: 11, part_index: 5, material: Material::Pants },
    Bone { child: 8, parent: 7, length: 0.24, rest: 0.0, radius: 0.09, seg_class: 12, part_index: 2, material: Material::Skin },
    Bone { child: 9, parent: 8, length: 0.42, rest: 0.0, radius: 0.21, seg_class: 1, part_index: 3, material: Material::Skin },
    // legs
    Bone { child: 1, parent: 2, length: 0.72, rest: FRAC_PI_2, radius: 0.15, seg_class: 7, part_index: 6, material: Material::Pants },
    Bone { child: 0, parent: 1, length: 0.70, rest: 0.0, radius: 0.115, seg_class: 9, part_index: 8, material: Material::Socks },
    Bone { child: 4, parent: 3, length: 0.72, rest: -FRAC_PI_2, radius: 0.15, seg_class: 8, part_index: 7, material: Material::Pants },
    Bone { child: 5, parent: 4, length: 0.70, rest: 0.0, radius: 0.115, seg_class: 10, part_index: 9, material: Material::Socks },
    // arms in front
    Bone { child: 11, parent: 12, length: 0.52, rest: FRAC_PI_2, radius: 0.105, seg_class: 3, part_index: 12, material: Material::Shirt },
    Bone { child: 10, parent: 11, length: 0.48, rest: 0.0, radius: 0.09, seg_class: 5, part_index: 14, material: Material::Skin },
    Bone { child: 14, parent: 13, length: 0.52, rest: -FRAC_PI_2, radius: 0.105, seg_class: 4, part_index: 13, material: Material::Shirt },
    Bone { child: 15, parent: 14, length: 0.48, rest: 0.0, radius: 0.09, seg_class: 6, part_index: 15, material: Material::Skin },
];

// Canonical figure height in chain units, used to scale into the canvas.
const FIGURE_SPAN: f64 = 3.4;
// Vertical midpoint offset of the canonical figure relative to the pelvis.
const FIGURE_MID_Y: f64 = 0.24;

/// Axis-aligned occluder rectangle in canvas-fraction coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occluder {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Everything that determines one rendered figure.
#[derive(Debug, Clone, PartialEq)]
pub struct FigureSpec {
    /// Relative articulation per joint, radians; see [`ANGLE_RANGES`].
    pub joint_angles: Vec<f64>,
    /// Per-bone radius multipliers, positive.
    pub limb_widths: Vec<f64>,
    /// Figure height as a fraction of the canvas short side.
    pub scale: f64,
    /// Body center offset from the canvas center, canvas fractions.
    pub translation: (f64, f64),
    pub occluder: Option<Occluder>,
    pub palette_seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(base: u64, k: u64, attempt: u64) -> u64 {
    splitmix64(base ^ splitmix64(k) ^ splitmix64(attempt.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Draws a figure specification. Deterministic in `rng_seed`.
pub fn sample_figure(rng_seed: u64) -> FigureSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let joint_angles = ANGLE_RANGES
        .iter()
        .map(|&(lo, hi)| rng.random_range(lo..hi))
        .collect();
    let limb_widths = (0..NUM_BONES)
        .map(|_| rng.random_range(0.85..1.2))
        .collect();
    let scale = rng.random_range(0.62..0.92);
    let translation = (
        rng.random_range(-0.10..0.10),
        rng.random_range(-0.08..0.08),
    );
    let has_occluder = rng.random_bool(0.45);
    let occluder = {
        let rect = Occluder {
            x: rng.random_range(0.05..0.65),
            y: rng.random_range(0.30..0.70),
            w: rng.random_range(0.18..0.38),
            h: rng.random_range(0.12..0.32),
        };
        has_occluder.then_some(rect)
    };
    let palette_seed = rng.random::<u64>();
    FigureSpec {
        joint_angles,
        limb_widths,
        scale,
        translation,
        occluder,
        palette_seed,
    }
}

// World angle of the bone ending at each joint, walking the chain from the
// pelvis. Returns pixel-space joint positions.
fn joint_positions(spec: &FigureSpec, height: usize, width: usize) -> Vec<[f64; 2]> {
    let unit = spec.scale * height.min(width) as f64 / FIGURE_SPAN;
    let cx = (width as f64 - 1.0) / 2.0 + spec.translation.0 * width as f64;
    let cy = (height as f64 - 1.0) / 2.0 + spec.translation.1 * height as f64 + FIGURE_MID_Y * unit;

    // canonical frame: x right, y up; pelvis at origin; base direction up
    let mut pos = vec![[0.0f64; 2]; NUM_JOINTS];
    let mut dir = vec![0.0f64; NUM_JOINTS];
    dir[6] = FRAC_PI_2 + spec.joint_angles[6];
    // process bones child-by-child in chain order (parents before children)
    for &child in &[7usize, 8, 9, 2, 3, 1, 0, 4, 5, 12, 11, 10, 13, 14, 15] {
        let bone = BONES.iter().find(|b| b.child == child).unwrap();
        let a = dir[bone.parent] - bone.rest + spec.joint_angles[child] * rest_sign(bone.rest);
        dir[child] = a;
        pos[child] = [
            pos[bone.parent][0] + bone.length * a.cos(),
            pos[bone.parent][1] + bone.length * a.sin(),
        ];
    }
    pos.iter()
        .map(|p| [cx + p[0] * unit, cy - p[1] * unit])
        .collect()
}

// Mirror articulation for left-side bones so equal angle magnitudes produce
// mirror-symmetric poses.
fn rest_sign(rest: f64) -> f64 {
    if rest < 0.0 {
        -1.0
    } else {
        1.0
    }
}

fn jitter_color(rng: &mut ChaCha8Rng, base: [u8; 3]) -> [u8; 3] {
    let mut c = [0u8; 3];
    for (o, &b) in c.iter_mut().zip(base.iter()) {
        let d: i16 = rng.random_range(-24..=24);
        *o = (b as i16 + d).clamp(0, 255) as u8;
    }
    c
}

struct Canvas {
    rgb: Vec<[u8; 3]>,
    mask: Array2<u8>,
    part: Array2<u8>,
    u: Array2<f64>,
    v: Array2<f64>,
    h: usize,
    w: usize,
}

fn q16(x: f64) -> f64 {
    (x.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

impl Canvas {
    fn draw_capsule(
        &mut self,
        a: [f64; 2],
        b: [f64; 2],
        radius: f64,
        color: [u8; 3],
        seg_class: u8,
        part_index: u8,
    ) {
        let (h, w) = (self.h, self.w);
        let x0 = (a[0].min(b[0]) - radius).floor().max(0.0) as usize;
        let x1 = (a[0].max(b[0]) + radius).ceil().min(w as f64 - 1.0) as usize;
        let y0 = (a[1].min(b[1]) - radius).floor().max(0.0) as usize;
        let y1 = (a[1].max(b[1]) + radius).ceil().min(h as f64 - 1.0) as usize;
        if x0 > x1 || y0 > y1 {
            return;
        }
        let ab = [b[0] - a[0], b[1] - a[1]];
        let len2 = ab[0] * ab[0] + ab[1] * ab[1];
        for i in y0..=y1 {
            for j in x0..=x1 {
                let p = [j as f64 - a[0], i as f64 - a[1]];
                let t = if len2 > 0.0 {
                    ((p[0] * ab[0] + p[1] * ab[1]) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let dx = p[0] - t * ab[0];
                let dy = p[1] - t * ab[1];
                let d2 = dx * dx + dy * dy;
                if d2 > radius * radius {
                    continue;
                }
                // signed perpendicular offset, normalized across the width
                let perp = if len2 > 0.0 {
                    (ab[0] * p[1] - ab[1] * p[0]) / len2.sqrt()
                } else {
                    0.0
                };
                self.rgb[i * w + j] = color;
                self.mask[[i, j]] = seg_class;
                self.part[[i, j]] = part_index;
                self.u[[i, j]] = q16(t);
                self.v[[i, j]] = q16(perp / (2.0 * radius) + 0.5);
            }
        }
    }
}

/// Rasterizes a specification onto an `height` x `width` canvas. Fails if the
/// canvas is smaller than 64 a side or the figure lies entirely outside it.
pub fn render_sample(
    spec: &FigureSpec,
    height: usize,
    width: usize,
    sample_id: &str,
) -> Result<AnnotatedSample> {
    if height < 64 || width < 64 {
        return Err(Error::Invalid(format!(
            "canvas {height}x{width} is below the 64x64 minimum"
        )));
    }
    if spec.joint_angles.len() != NUM_JOINTS || spec.limb_widths.len() != NUM_BONES {
        return Err(Error::Invalid(
            "figure spec must carry 16 joint angles and 15 limb widths".into(),
        ));
    }
    if spec.scale <= 0.0 || spec.limb_widths.iter().any(|&w| w <= 0.0) {
        return Err(Error::Invalid("scale and limb widths must be positive".into()));
    }
    let unit = spec.scale * height.min(width) as f64 / FIGURE_SPAN;
    let joints = joint_positions(spec, height, width);
    let max_radius = BONES
        .iter()
        .map(|b| b.radius)
        .fold(0.0f64, f64::max)
        * unit
        * 1.2;
    let inside = joints.iter().any(|p| {
        p[0] > -max_radius
            && p[0] < width as f64 + max_radius
            && p[1] > -max_radius
            && p[1] < height as f64 + max_radius
    });
    if !inside {
        return Err(Error::Invalid(
            "figure projects entirely outside the canvas".into(),
        ));
    }

    let mut prng = ChaCha8Rng::seed_from_u64(spec.palette_seed);
    let bg_base = jitter_color(&mut prng, [126, 132, 122]);
    let skin = jitter_color(&mut prng, [224, 172, 105]);
    let shirt = jitter_color(&mut prng, [64, 120, 192]);
    let pants = jitter_color(&mut prng, [70, 62, 84]);
    let socks = jitter_color(&mut prng, [186, 74, 60]);
    // occluder borrows a body material so color alone cannot separate it
    let occ_pick: u8 = prng.random_range(0..4);
    let occ_color = jitter_color(
        &mut prng,
        match occ_pick {
            0 => skin,
            1 => shirt,
            2 => pants,
            _ => socks,
        },
    );

    let mut canvas = Canvas {
        rgb: vec![[0u8; 3]; height * width],
        mask: Array2::zeros((height, width)),
        part: Array2::zeros((height, width)),
        u: Array2::zeros((height, width)),
        v: Array2::zeros((height, width)),
        h: height,
        w: width,
    };
    // blocky background texture
    let bw = 8;
    let blocks_x = width.div_ceil(bw);
    let blocks_y = height.div_ceil(bw);
    let mut block_deltas = Vec::with_capacity(blocks_x * blocks_y);
    for _ in 0..blocks_x * blocks_y {
        block_deltas.push(prng.random_range(-26..=26i16));
    }
    for i in 0..height {
        for j in 0..width {
            let d = block_deltas[(i / bw) * blocks_x + (j / bw)];
            let mut c = [0u8; 3];
            for ch in 0..3 {
                c[ch] = (bg_base[ch] as i16 + d).clamp(0, 255) as u8;
            }
            canvas.rgb[i * width + j] = c;
        }
    }

    for (bi, bone) in BONES.iter().enumerate() {
        let a = joints[bone.parent];
        let b = joints[bone.child];
        let radius = bone.radius * spec.limb_widths[bi] * unit;
        let color = match bone.material {
            Material::Skin => skin,
            Material::Shirt => shirt,
            Material::Pants => pants,
            Material::Socks => socks,
        };
        canvas.draw_capsule(a, b, radius, color, bone.seg_class, bone.part_index);
    }

    if let Some(o) = spec.occluder {
        let x0 = (o.x * width as f64).round().max(0.0) as usize;
        let y0 = (o.y * height as f64).round().max(0.0) as usize;
        let x1 = (((o.x + o.w) * width as f64).round() as usize).min(width);
        let y1 = (((o.y + o.h) * height as f64).round() as usize).min(height);
        for i in y0..y1 {
            for j in x0..x1 {
                canvas.rgb[i * width + j] = occ_color;
                canvas.mask[[i, j]] = 0;
                canvas.part[[i, j]] = 0;
                canvas.u[[i, j]] = 0.0;
                canvas.v[[i, j]] = 0.0;
            }
        }
    }

    // A joint counts as visible when it lies in the canvas and some pixel of
    // one of its incident parts survives within half a limb width -- joints
    // fully painted over, whether by the occluder or by a body part drawn in
    // front, are marked invisible.
    let visibility: Vec<bool> = (0..NUM_JOINTS)
        .map(|ji| {
            let p = joints[ji];
            let in_canvas = p[0] >= 0.0
                && p[0] <= (width - 1) as f64
                && p[1] >= 0.0
                && p[1] <= (height - 1) as f64;
            in_canvas && joint_evidence(&canvas.mask, spec, unit, &joints, ji)
        })
        .collect();

    let image = Array3::from_shape_fn((3, height, width), |(c, i, j)| {
        canvas.rgb[i * width + j][c] as f64 / 255.0
    });
    Ok(AnnotatedSample {
        sample_id: sample_id.to_string(),
        image,
        mask: SegMask {
            data: canvas.mask,
            num_classes: 19,
        },
        skeleton: Skeleton {
            joints,
            visibility,
        },
        densepose: Some(DensePoseMap {
            part_index: canvas.part,
            u: canvas.u,
            v: canvas.v,
            num_parts: NUM_PARTS,
        }),
    })
}

// True when a pixel of one of joint `ji`'s incident parts survives within
// half that part's limb width of the joint position.
fn joint_evidence(
    mask: &Array2<u8>,
    spec: &FigureSpec,
    unit: f64,
    joints: &[[f64; 2]],
    ji: usize,
) -> bool {
    let (h, w) = mask.dim();
    let p = joints[ji];
    let mut classes = Vec::new();
    let mut tol = 0.0f64;
    for (bi, bone) in BONES.iter().enumerate() {
        if bone.child == ji || bone.parent == ji {
            classes.push(bone.seg_class);
            tol = tol.max(bone.radius * spec.limb_widths[bi] * unit / 2.0);
        }
    }
    let tol = tol.max(1.0);
    let x0 = ((p[0] - tol).floor().max(0.0)) as usize;
    let x1 = ((p[0] + tol).ceil().min(w as f64 - 1.0)) as usize;
    let y0 = ((p[1] - tol).floor().max(0.0)) as usize;
    let y1 = ((p[1] + tol).ceil().min(h as f64 - 1.0)) as usize;
    if x0 > x1 || y0 > y1 {
        return false;
    }
    for i in y0..=y1 {
        for j in x0..=x1 {
            let dx = j as f64 - p[0];
            let dy = i as f64 - p[1];
            if dx * dx + dy * dy <= tol * tol && classes.contains(&mask[[i, j]]) {
                return true;
            }
        }
    }
    false
}

/// `(parent, child)` joint index of every bone, for stick-figure rendering.
pub fn bone_joints() -> [(usize, usize); NUM_BONES] {
    let mut out = [(0, 0); NUM_BONES];
    for (i, b) in BONES.iter().enumerate() {
        out[i] = (b.parent, b.child);
    }
    out
}

/// Checks that every visible joint sits on (or within half a limb width of)
/// a pixel labeled with one of its incident body parts.
pub fn joint_consistency_ok(spec: &FigureSpec, sample: &AnnotatedSample) -> bool {
    let (h, w) = sample.mask.data.dim();
    let unit = spec.scale * h.min(w) as f64 / FIGURE_SPAN;
    (0..NUM_JOINTS).all(|ji| {
        !sample.skeleton.visibility[ji]
            || joint_evidence(&sample.mask.data, spec, unit, &sample.skeleton.joints, ji)
    })
}

/// Generates `count` samples at the default resolution and writes them as a
/// split under `out_dir`. Returns the manifest path. Deterministic in
/// `base_seed`.
pub fn generate_split(count: usize, base_seed: u64, out_dir: &Path) -> Result<PathBuf> {
    generate_split_sized(count, base_seed, out_dir, DEFAULT_IMAGE_SIDE, DEFAULT_IMAGE_SIDE)
}

/// [`generate_split`] with an explicit canvas size.
pub fn generate_split_sized(
    count: usize,
    base_seed: u64,
    out_dir: &Path,
    height: usize,
    width: usize,
) -> Result<PathBuf> {
    if count == 0 {
        return Err(Error::Invalid("sample count must be at least 1".into()));
    }
    let mut samples = Vec::with_capacity(count);
    for k in 0..count {
        let sample_id = format!("s_{k:05}");
        let mut accepted = None;
        for attempt in 0..64u64 {
            let spec = sample_figure(derive_seed(base_seed, k as u64, attempt));
            let Ok(sample) = render_sample(&spec, height, width, &sample_id) else {
                continue;
            };
            if validate_sample(&sample).is_empty() && joint_consistency_ok(&spec, &sample) {
                accepted = Some(sample);
                break;
            }
        }
        let sample = accepted.ok_or_else(|| {
            Error::Invalid(format!("no acceptable figure for sample {k} after 64 attempts"))
        })?;
        samples.push(sample);
    }
    io::save_split(out_dir, &samples, NUM_PARTS, &JOINT_NAMES)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn neutral_spec() -> FigureSpec {
        FigureSpec {
            joint_angles: vec![0.0; NUM_JOINTS],
            limb_widths: vec![1.0; NUM_BONES],
            scale: 0.8,
            translation: (0.0, 0.0),
            occluder: None,
            palette_seed: 7,
        }
    }

    #[test]
    fn sample_figure_is_deterministic_and_seed_sensitive() {
        assert_eq!(sample_figure(0), sample_figure(0));
        assert_ne!(sample_figure(0).joint_angles, sample_figure(1).joint_angles);
    }

    #[test]
    fn sampled_angles_respect_the_range_table() {
        for seed in 0..200 {
            let spec = sample_figure(seed);
            for (a, &(lo, hi)) in spec.joint_angles.iter().zip(ANGLE_RANGES.iter()) {
                assert!(*a >= lo && *a <= hi);
            }
            assert!(spec.limb_widths.iter().all(|&w| w > 0.0));
            assert!(spec.scale > 0.0);
        }
    }

    #[test]
    fn neutral_pose_renders_a_valid_sample() {
        let s = render_sample(&neutral_spec(), 64, 64, "t").unwrap();
        assert_eq!(validate_sample(&s), Vec::<String>::new());
        assert!(s.skeleton.visibility.iter().all(|&v| v));
        // all twelve body classes present in a frontal unoccluded pose
        for class in 1..=12u8 {
            assert!(
                s.mask.data.iter().any(|&c| c == class),
                "class {class} missing"
            );
        }
    }

    #[test]
    fn occluder_over_legs_hides_leg_joints() {
        let mut spec = neutral_spec();
        spec.occluder = Some(Occluder {
            x: 0.0,
            y: 0.62,
            w: 1.0,
            h: 0.38,
        });
        let s = render_sample(&spec, 64, 64, "t").unwrap();
        // ankles and knees sit in the occluded band
        for ji in [0usize, 1, 4, 5] {
            assert!(!s.skeleton.visibility[ji], "joint {ji} should be hidden");
        }
        assert!(s.skeleton.visibility[9], "head stays visible");
        assert_eq!(validate_sample(&s), Vec::<String>::new());
    }

    #[test]
    fn uv_zero_exactly_on_background() {
        for seed in 0..20 {
            let spec = sample_figure(seed);
            let Ok(s) = render_sample(&spec, 64, 64, "t") else {
                continue;
            };
            let dp = s.densepose.as_ref().unwrap();
            for ((&pt, &u), &v) in dp
                .part_index
                .iter()
                .zip(dp.u.iter())
                .zip(dp.v.iter())
            {
                if pt == 0 {
                    assert_eq!(u, 0.0);
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn part_index_implies_mask_foreground() {
        for seed in 0..20 {
            let spec = sample_figure(seed);
            let Ok(s) = render_sample(&spec, 64, 64, "t") else {
                continue;
            };
            let dp = s.densepose.as_ref().unwrap();
            for (&pt, &m) in dp.part_index.iter().zip(s.mask.data.iter()) {
                if pt > 0 {
                    assert!(m > 0);
                }
            }
        }
    }

    #[test]
    fn fully_offscreen_figure_is_rejected() {
        let mut spec = neutral_spec();
        spec.translation = (5.0, 5.0);
        assert!(render_sample(&spec, 64, 64, "t").is_err());
    }

    #[test]
    fn small_canvas_is_rejected() {
        assert!(render_sample(&neutral_spec(), 32, 64, "t").is_err());
        assert!(render_sample(&neutral_spec(), 64, 63, "t").is_err());
    }

    #[test]
    fn generated_split_is_deterministic_and_consistent() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_split(6, 42, d1.path()).unwrap();
        let m2 = generate_split(6, 42, d2.path()).unwrap();
        let bytes1 = std::fs::read(&m1).unwrap();
        let bytes2 = std::fs::read(&m2).unwrap();
        assert_eq!(bytes1, bytes2);
        for entry in std::fs::read_dir(d1.path()).unwrap() {
            let name = entry.unwrap().file_name();
            let a = std::fs::read(d1.path().join(&name)).unwrap();
            let b = std::fs::read(d2.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name:?} differs");
        }
        let samples = io::load_split(&m1).unwrap();
        assert_eq!(samples.len(), 6);
        for s in &samples {
            assert_eq!(validate_sample(s), Vec::<String>::new(), "{}", s.sample_id);
        }
    }

    #[test]
    fn zero_count_split_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_split(0, 1, dir.path()).is_err());
    }

    #[test]
    fn rejection_rate_stays_low() {
        let mut ok = 0;
        let total = 300;
        for seed in 0..total {
            let spec = sample_figure(seed);
            if let Ok(s) = render_sample(&spec, 64, 64, "t") {
                if validate_sample(&s).is_empty() && joint_consistency_ok(&spec, &s) {
                    ok += 1;
                }
            }
        }
        assert!(
            ok * 10 >= total * 9,
            "only {ok}/{total} random figures acceptable"
        );
    }
}
