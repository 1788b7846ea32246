//! Overlay and plot rendering for reports: class/part rasters blended over
//! the input, stick-figure skeletons, a loss curve, and per-class IoU bars.
//! Everything is drawn into plain RGB buffers, so output bytes depend only
//! on the inputs.

use std::path::Path;

use ndarray::{Array3, Axis};
use spd_core::io::write_rgb_png;
use spd_core::metrics::ClassScores;
use spd_core::objectives::LossBreakdown;
use spd_core::palette::class_color;
use spd_core::synth::bone_joints;
use spd_core::{Result, SegMask, Skeleton};

/// Nearest-neighbor upscale applied to every overlay.
pub const OVERLAY_SCALE: usize = 4;

/// Part-index rasters shift into the palette's extended range so they are
/// not confused with class colors.
const PART_COLOR_OFFSET: u8 = 19;

/// A fixed-size RGB byte canvas.
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    px: Vec<[u8; 3]>,
}

impl Canvas {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        Canvas {
            width,
            height,
            px: vec![color; width * height],
        }
    }

    /// Upscaled copy of a `(3, h, w)` image in `[0, 1]`.
    pub fn from_image(image: &Array3<f64>, scale: usize) -> Self {
        let (_, h, w) = image.dim();
        let mut c = Canvas::filled(w * scale, h * scale, [0, 0, 0]);
        for y in 0..h * scale {
            for x in 0..w * scale {
                let (i, j) = (y / scale, x / scale);
                c.px[y * w * scale + x] = [
                    (image[[0, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (image[[1, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (image[[2, i, j]].clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
            }
        }
        c
    }

    pub fn set(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.px[y as usize * self.width + x as usize] = color;
        }
    }

    fn blend(&mut self, x: usize, y: usize, color: [u8; 3], alpha: f64) {
        let p = &mut self.px[y * self.width + x];
        for ch in 0..3 {
            p[ch] = (alpha * color[ch] as f64 + (1.0 - alpha) * p[ch] as f64).round() as u8;
        }
    }

    /// Solid line segment, clipped to the canvas.
    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    /// Thick line: the unit segment stamped as 3x3 blocks.
    pub fn thick_line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        for oy in -1..=1 {
            for ox in -1..=1 {
                self.line(x0 + ox, y0 + oy, x1 + ox, y1 + oy, color);
            }
        }
    }

    pub fn square(&mut self, cx: i64, cy: i64, half: i64, color: [u8; 3]) {
        for y in cy - half..=cy + half {
            for x in cx - half..=cx + half {
                self.set(x, y, color);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let arr = Array3::from_shape_fn((3, self.height, self.width), |(ch, y, x)| {
            self.px[y * self.width + x][ch] as f64 / 255.0
        });
        write_rgb_png(path, &arr)
    }
}

/// Blends an index raster over the canvas; index 0 leaves the image as is.
pub fn blend_index_raster(
    canvas: &mut Canvas,
    raster: &ndarray::Array2<u8>,
    scale: usize,
    color_offset: u8,
) {
    let (h, w) = raster.dim();
    for y in 0..h * scale {
        for x in 0..w * scale {
            let v = raster[[y / scale, x / scale]];
            if v != 0 {
                canvas.blend(x, y, class_color(v.wrapping_add(color_offset)), 0.6);
            }
        }
    }
}

/// Overlay of a class mask on the input image.
pub fn mask_overlay(image: &Array3<f64>, mask: &SegMask) -> Canvas {
    let mut c = Canvas::from_image(image, OVERLAY_SCALE);
    blend_index_raster(&mut c, &mask.data, OVERLAY_SCALE, 0);
    c
}

/// Overlay of a part-index raster on the input image.
pub fn parts_overlay(image: &Array3<f64>, parts: &ndarray::Array2<u8>) -> Canvas {
    let mut c = Canvas::from_image(image, OVERLAY_SCALE);
    blend_index_raster(&mut c, parts, OVERLAY_SCALE, PART_COLOR_OFFSET);
    c
}

fn draw_skeleton(canvas: &mut Canvas, skel: &Skeleton, colored: bool) {
    let s = OVERLAY_SCALE as f64;
    for (bi, (parent, child)) in bone_joints().into_iter().enumerate() {
        if parent >= skel.num_joints() || child >= skel.num_joints() {
            continue;
        }
        if !(skel.visibility[parent] && skel.visibility[child]) {
            continue;
        }
        let color = if colored {
            class_color(bi as u8 + 1)
        } else {
            [190, 190, 190]
        };
        let (p, q) = (skel.joints[parent], skel.joints[child]);
        canvas.thick_line(
            (p[0] * s).round() as i64,
            (p[1] * s).round() as i64,
            (q[0] * s).round() as i64,
            (q[1] * s).round() as i64,
            color,
        );
    }
    for (j, &vis) in skel.visibility.iter().enumerate() {
        if vis {
            let color = if colored { [255, 255, 255] } else { [120, 120, 120] };
            canvas.square(
                (skel.joints[j][0] * s).round() as i64,
                (skel.joints[j][1] * s).round() as i64,
                1,
                color,
            );
        }
    }
}

/// Stick-figure overlay: the target skeleton in gray, the predicted one (if
/// any) in per-bone colors on top.
pub fn skeleton_overlay(
    image: &Array3<f64>,
    target: &Skeleton,
    predicted: Option<&Skeleton>,
) -> Canvas {
    let mut c = Canvas::from_image(image, OVERLAY_SCALE);
    draw_skeleton(&mut c, target, false);
    if let Some(p) = predicted {
        draw_skeleton(&mut c, p, true);
    }
    c
}

// --- tiny numeral font for plot labels -------------------------------------

const GLYPH_W: usize = 3;
const GLYPH_H: usize = 5;

fn glyph(ch: char) -> Option<[u8; GLYPH_H]> {
    // Rows of 3-bit patterns, most significant bit left.
    let rows = match ch {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        'e' => [0b000, 0b111, 0b111, 0b100, 0b111],
        _ => return None,
    };
    Some(rows)
}

/// Draws numeric text; characters without a glyph advance the cursor only.
pub fn draw_text(canvas: &mut Canvas, x: i64, y: i64, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        if let Some(rows) = glyph(ch) {
            for (ry, row) in rows.iter().enumerate() {
                for rx in 0..GLYPH_W {
                    if row >> (GLYPH_W - 1 - rx) & 1 == 1 {
                        canvas.set(cx + rx as i64, y + ry as i64, color);
                    }
                }
            }
        }
        cx += GLYPH_W as i64 + 1;
    }
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 100.0 || v.abs() < 0.01 {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

const PLOT_W: usize = 640;
const PLOT_H: usize = 400;
const MARGIN_L: usize = 48;
const MARGIN_B: usize = 26;
const MARGIN_T: usize = 12;
const MARGIN_R: usize = 12;

struct Frame {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

fn axes(canvas: &mut Canvas) -> Frame {
    let f = Frame {
        x0: MARGIN_L,
        y0: MARGIN_T,
        w: PLOT_W - MARGIN_L - MARGIN_R,
        h: PLOT_H - MARGIN_T - MARGIN_B,
    };
    let black = [40, 40, 40];
    canvas.line(
        f.x0 as i64,
        f.y0 as i64,
        f.x0 as i64,
        (f.y0 + f.h) as i64,
        black,
    );
    canvas.line(
        f.x0 as i64,
        (f.y0 + f.h) as i64,
        (f.x0 + f.w) as i64,
        (f.y0 + f.h) as i64,
        black,
    );
    f
}

/// Loss-curve plot: one polyline per component plus the weighted total,
/// x spanning exactly the logged iterations.
pub fn loss_curve(history: &[LossBreakdown], path: &Path) -> Result<()> {
    let mut canvas = Canvas::filled(PLOT_W, PLOT_H, [255, 255, 255]);
    let f = axes(&mut canvas);
    let n = history.len();
    let series: [(&str, [u8; 3], Vec<f64>); 4] = [
        ("total", [40, 40, 40], history.iter().map(|b| b.total).collect()),
        ("l_seg", class_color(1), history.iter().map(|b| b.l_seg).collect()),
        ("l_pose", class_color(2), history.iter().map(|b| b.l_pose).collect()),
        ("l_dense", class_color(7), history.iter().map(|b| b.l_dense).collect()),
    ];
    let y_max = series
        .iter()
        .flat_map(|(_, _, v)| v.iter().copied())
        .fold(0.0_f64, f64::max)
        .max(1e-12);
    let to_xy = |i: usize, v: f64| -> (i64, i64) {
        let fx = if n <= 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
        let fy = (v / y_max).clamp(0.0, 1.0);
        (
            (f.x0 as f64 + fx * f.w as f64).round() as i64,
            (f.y0 as f64 + (1.0 - fy) * f.h as f64).round() as i64,
        )
    };
    for (_, color, values) in &series {
        if n == 1 {
            let (x, y) = to_xy(0, values[0]);
            canvas.square(x, y, 1, *color);
            continue;
        }
        for i in 1..n {
            let (xa, ya) = to_xy(i - 1, values[i - 1]);
            let (xb, yb) = to_xy(i, values[i]);
            canvas.line(xa, ya, xb, yb, *color);
        }
    }
    let gray = [90, 90, 90];
    draw_text(&mut canvas, 4, f.y0 as i64, &format_tick(y_max), gray);
    draw_text(&mut canvas, 4, (f.y0 + f.h) as i64 - 5, "0", gray);
    draw_text(&mut canvas, f.x0 as i64, (f.y0 + f.h + 6) as i64, "0", gray);
    let xmax = format_tick(n.saturating_sub(1) as f64);
    draw_text(
        &mut canvas,
        (f.x0 + f.w) as i64 - (xmax.len() * (GLYPH_W + 1)) as i64,
        (f.y0 + f.h + 6) as i64,
        &xmax,
        gray,
    );
    canvas.save(path)
}

/// Per-class IoU bar chart; bars take the class palette color.
pub fn iou_bars(per_class: &[ClassScores], num_classes: usize, path: &Path) -> Result<()> {
    let mut canvas = Canvas::filled(PLOT_W, PLOT_H, [255, 255, 255]);
    let f = axes(&mut canvas);
    let k = num_classes.max(1);
    let slot = f.w / k;
    let bar = (slot * 3 / 4).max(1);
    for s in per_class {
        let x0 = f.x0 + s.class * slot + (slot - bar) / 2;
        let bh = (s.iou.clamp(0.0, 1.0) * f.h as f64).round() as usize;
        for y in 0..bh {
            for x in 0..bar {
                canvas.set((x0 + x) as i64, (f.y0 + f.h - 1 - y) as i64, class_color(s.class as u8));
            }
        }
        draw_text(
            &mut canvas,
            x0 as i64,
            (f.y0 + f.h + 6) as i64,
            &s.class.to_string(),
            [90, 90, 90],
        );
    }
    let gray = [90, 90, 90];
    draw_text(&mut canvas, 4, f.y0 as i64, "1", gray);
    draw_text(&mut canvas, 4, (f.y0 + f.h) as i64 - 5, "0", gray);
    canvas.save(path)
}

/// Per-sample model predictions needed by the report overlays.
pub struct Prediction {
    pub mask: SegMask,
    pub skeleton: Option<Skeleton>,
    pub parts: Option<ndarray::Array2<u8>>,
}

/// Eval-mode predictions for every sample, in order.
pub fn predictions(
    model: &spd_core::model::SpdModel,
    store: &mut spd_core::nn::params::ParamStore,
    samples: &[spd_core::AnnotatedSample],
) -> Result<Vec<Prediction>> {
    use spd_core::dense::predict_densepose;
    use spd_core::pose::to_pixels;
    use spd_core::seg::predict_mask;

    let mut out = Vec::with_capacity(samples.len());
    for batch in samples.chunks(4) {
        let (h, w) = (batch[0].height(), batch[0].width());
        let mut images = ndarray::Array4::zeros((batch.len(), 3, h, w));
        for (bi, s) in batch.iter().enumerate() {
            images.index_axis_mut(Axis(0), bi).assign(&s.image);
        }
        let mut g = spd_core::nn::graph::Graph::new(store, false);
        let fwd = model.forward(&mut g, images)?;
        let logits = g.value(fwd.seg.final_logits).as4().clone();
        let coords = fwd.pose.map(|p| g.value(p.refined_coords).as3().clone());
        let dense = fwd
            .dense
            .map(|d| (g.value(d.part_logits).as4().clone(), g.value(d.uv).as4().clone()));
        drop(g);
        for bi in 0..batch.len() {
            let mask = predict_mask(logits.index_axis(Axis(0), bi))?;
            let skeleton = match &coords {
                Some(c) => Some(to_pixels(c.index_axis(Axis(0), bi), h, w)?),
                None => None,
            };
            let parts = match &dense {
                Some((pl, uv)) => Some(
                    predict_densepose(pl.index_axis(Axis(0), bi), uv.index_axis(Axis(0), bi))?
                        .part_index,
                ),
                None => None,
            };
            out.push(Prediction {
                mask,
                skeleton,
                parts,
            });
        }
    }
    Ok(out)
}
