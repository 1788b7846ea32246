//! On-disk dataset format: lossless rasters per sample, one skeleton text
//! file per split, and a JSON manifest tying them together.
//!
//! Round-tripping a split through `save_split` / `load_split` reproduces
//! rasters and coordinates bit-for-bit.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{AnnotatedSample, DensePoseMap, SegMask, Skeleton};

/// Split manifest: sample ids, file paths, and the annotation conventions
/// needed to interpret them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub num_parts: usize,
    pub joint_order: Vec<String>,
    pub skeleton_file: String,
    pub samples: Vec<ManifestEntry>,
}

/// Per-sample file paths, relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub image: String,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<String>,
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// 8-bit single-channel raster; pixel value = class or part index.
pub fn write_index_png(path: &Path, data: &Array2<u8>) -> Result<()> {
    let (h, w) = data.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([data[[y as usize, x as usize]]])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn read_index_png(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let gray = img.as_luma8().ok_or_else(|| Error::Image {
        path: path.to_path_buf(),
        msg: "expected 8-bit single-channel raster".into(),
    })?;
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn(
        (h as usize, w as usize),
        |(i, j)| gray.get_pixel(j as u32, i as u32)[0],
    ))
}

/// 16-bit single-channel raster; stored value / 65535 = coordinate.
pub fn write_coord_png(path: &Path, data: &Array2<f64>) -> Result<()> {
    let (h, w) = data.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let v = data[[y as usize, x as usize]].clamp(0.0, 1.0);
            Luma([(v * 65535.0).round() as u16])
        });
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn read_coord_png(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let gray = img.as_luma16().ok_or_else(|| Error::Image {
        path: path.to_path_buf(),
        msg: "expected 16-bit single-channel raster".into(),
    })?;
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        gray.get_pixel(j as u32, i as u32)[0] as f64 / 65535.0
    }))
}

/// 8-bit RGB raster from a `(3, height, width)` image with values in [0,1].
pub fn write_rgb_png(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 image channels, got {c}")));
    }
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            (image[[ch, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn read_rgb_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let rgb = img.as_rgb8().ok_or_else(|| Error::Image {
        path: path.to_path_buf(),
        msg: "expected 8-bit RGB raster".into(),
    })?;
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_fn(
        (3, h as usize, w as usize),
        |(ch, i, j)| rgb.get_pixel(j as u32, i as u32)[ch] as f64 / 255.0,
    ))
}

fn write_skeletons(path: &Path, samples: &[AnnotatedSample]) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&s.sample_id);
        out.push('\n');
        for (idx, (p, &vis)) in s
            .skeleton
            .joints
            .iter()
            .zip(s.skeleton.visibility.iter())
            .enumerate()
        {
            out.push_str(&format!(
                "{idx} {} {} {}\n",
                p[0],
                p[1],
                if vis { 1 } else { 0 }
            ));
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        what: "skeleton record".into(),
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn read_skeletons(path: &Path, n_joints: usize) -> Result<HashMap<String, Skeleton>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let mut out = HashMap::new();
    while let Some(id_line) = lines.next() {
        if id_line.trim().is_empty() {
            continue;
        }
        let id = id_line.trim().to_string();
        let mut joints = Vec::with_capacity(n_joints);
        let mut visibility = Vec::with_capacity(n_joints);
        for k in 0..n_joints {
            let line = lines
                .next()
                .ok_or_else(|| parse_err(path, format!("{id}: truncated after {k} joints")))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(parse_err(path, format!("{id}: expected 4 fields, got {line:?}")));
            }
            let idx: usize = fields[0]
                .parse()
                .map_err(|_| parse_err(path, format!("{id}: bad joint index {:?}", fields[0])))?;
            if idx != k {
                return Err(parse_err(path, format!("{id}: joint {k} listed as {idx}")));
            }
            let x: f64 = fields[1]
                .parse()
                .map_err(|_| parse_err(path, format!("{id}: bad x {:?}", fields[1])))?;
            let y: f64 = fields[2]
                .parse()
                .map_err(|_| parse_err(path, format!("{id}: bad y {:?}", fields[2])))?;
            let vis = match fields[3] {
                "0" => false,
                "1" => true,
                other => return Err(parse_err(path, format!("{id}: bad visibility {other:?}"))),
            };
            joints.push([x, y]);
            visibility.push(vis);
        }
        out.insert(id, Skeleton { joints, visibility });
    }
    Ok(out)
}

/// Writes a split to `dir` and returns the manifest path. File names derive
/// from sample ids; the skeleton file and manifest are shared per split.
pub fn save_split(
    dir: &Path,
    samples: &[AnnotatedSample],
    num_parts: usize,
    joint_order: &[&str],
) -> Result<PathBuf> {
    if samples.is_empty() {
        return Err(Error::Invalid("cannot save an empty split".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        if s.skeleton.joints.len() != joint_order.len() {
            return Err(Error::Invalid(format!(
                "{}: {} joints but {} joint names",
                s.sample_id,
                s.skeleton.joints.len(),
                joint_order.len()
            )));
        }
        let image = format!("{}.png", s.sample_id);
        let mask = format!("{}_mask.png", s.sample_id);
        write_rgb_png(&dir.join(&image), &s.image)?;
        write_index_png(&dir.join(&mask), &s.mask.data)?;
        let mut entry = ManifestEntry {
            sample_id: s.sample_id.clone(),
            image,
            mask,
            part: None,
            u: None,
            v: None,
        };
        if let Some(dp) = &s.densepose {
            let part = format!("{}_part.png", s.sample_id);
            let u = format!("{}_u.png", s.sample_id);
            let v = format!("{}_v.png", s.sample_id);
            write_index_png(&dir.join(&part), &dp.part_index)?;
            write_coord_png(&dir.join(&u), &dp.u)?;
            write_coord_png(&dir.join(&v), &dp.v)?;
            entry.part = Some(part);
            entry.u = Some(u);
            entry.v = Some(v);
        }
        entries.push(entry);
    }
    let skeleton_file = "skeletons.txt".to_string();
    write_skeletons(&dir.join(&skeleton_file), samples)?;
    let manifest = Manifest {
        num_classes: samples[0].mask.num_classes,
        num_parts,
        joint_order: joint_order.iter().map(|s| s.to_string()).collect(),
        skeleton_file,
        samples: entries,
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Invalid(format!("manifest serialization: {e}")))?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: "manifest".into(),
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Loads every sample listed in a manifest, in manifest order.
pub fn load_split(manifest_path: &Path) -> Result<Vec<AnnotatedSample>> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let skeletons = read_skeletons(&dir.join(&manifest.skeleton_file), manifest.joint_order.len())?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let image = read_rgb_png(&dir.join(&entry.image))?;
        let mask = SegMask {
            data: read_index_png(&dir.join(&entry.mask))?,
            num_classes: manifest.num_classes,
        };
        let skeleton = skeletons.get(&entry.sample_id).cloned().ok_or_else(|| {
            parse_err(
                &dir.join(&manifest.skeleton_file),
                format!("missing record for {}", entry.sample_id),
            )
        })?;
        let densepose = match (&entry.part, &entry.u, &entry.v) {
            (Some(p), Some(u), Some(v)) => Some(DensePoseMap {
                part_index: read_index_png(&dir.join(p))?,
                u: read_coord_png(&dir.join(u))?,
                v: read_coord_png(&dir.join(v))?,
                num_parts: manifest.num_parts,
            }),
            (None, None, None) => None,
            _ => {
                return Err(Error::Parse {
                    what: "manifest".into(),
                    path: manifest_path.to_path_buf(),
                    msg: format!(
                        "{}: dense annotation must provide part, u, and v together",
                        entry.sample_id
                    ),
                })
            }
        };
        samples.push(AnnotatedSample {
            sample_id: entry.sample_id.clone(),
            image,
            mask,
            skeleton,
            densepose,
        });
    }
    Ok(samples)
}
