//! Fixed color palette for visualizing class-index rasters.
//!
//! Class `c` always maps to the same RGB triple, so overlays are comparable
//! across runs and reports.

/// Hand-picked colors for the first 19 segmentation classes; class 0
/// (background) is black.
const BASE: [[u8; 3]; 19] = [
    [0, 0, 0],       // background
    [230, 80, 60],   // head
    [60, 120, 220],  // torso
    [240, 180, 60],  // upper arm, left
    [160, 220, 70],  // upper arm, right
    [250, 130, 40],  // forearm, left
    [70, 200, 190],  // forearm, right
    [150, 80, 200],  // thigh, left
    [220, 90, 160],  // thigh, right
    [110, 170, 250], // shin, left
    [90, 220, 130],  // shin, right
    [200, 160, 110], // hip band
    [250, 220, 120], // neck
    [130, 130, 220], // hand, left
    [220, 130, 130], // hand, right
    [130, 220, 220], // foot, left
    [180, 200, 90],  // foot, right
    [160, 110, 80],  // hair
    [120, 160, 160], // scarf
];

/// Deterministic RGB color for a class or part index.
pub fn class_color(index: u8) -> [u8; 3] {
    let i = index as usize;
    if i < BASE.len() {
        return BASE[i];
    }
    // Golden-ratio hue walk for indices beyond the hand-picked table.
    let hue = (i as f64 * 0.618_033_988_749_895).fract();
    hsv_to_rgb(hue, 0.65, 0.9)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let f = h6.fract();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match h6 as usize {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}
