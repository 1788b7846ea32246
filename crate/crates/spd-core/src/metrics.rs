//! Evaluation measures: confusion-matrix segmentation scores (IoU, precision,
//! recall, F1), mean Euclidean joint distance, and a geodesic point
//! similarity proxy over surface coordinates.
//!
//! The similarity proxy measures UV-chart distance with a per-part
//! normalization constant; absolute values are not comparable to scores
//! computed on a 3-D body mesh, only to other runs of this code.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DensePoseMap, SegMask, Skeleton};

/// Default per-part normalization for the point-similarity measure.
pub const DEFAULT_GPS_K: f64 = 0.255;

/// Harmonic mean of precision and recall.
pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// K x K pixel counts; rows index the target class, columns the prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    matrix: Array2<u64>,
}

/// Per-class row of a [`MetricReport`]. Precision, recall, and F1 are absent
/// for classes whose denominator is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: usize,
    pub iou: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// Target pixels of this class.
    pub support: u64,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize) -> Self {
        ConfusionAccumulator {
            matrix: Array2::zeros((num_classes, num_classes)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.nrows()
    }

    /// Total pixels accumulated.
    pub fn total(&self) -> u64 {
        self.matrix.sum()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.matrix
    }

    /// Adds one prediction/target pair, pixel-wise.
    pub fn accumulate(&mut self, pred: &SegMask, target: &SegMask) -> Result<()> {
        if pred.data.dim() != target.data.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} and target {:?} differ",
                pred.data.dim(),
                target.data.dim()
            )));
        }
        let k = self.num_classes();
        if pred.num_classes != k || target.num_classes != k {
            return Err(Error::Invalid(format!(
                "masks declare {} and {} classes, accumulator has {k}",
                pred.num_classes, target.num_classes
            )));
        }
        for (&p, &t) in pred.data.iter().zip(target.data.iter()) {
            self.matrix[[t as usize, p as usize]] += 1;
        }
        Ok(())
    }

    /// Count-wise addition, for sharded evaluation.
    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::Invalid("cannot merge mismatched accumulators".into()));
        }
        self.matrix += &other.matrix;
        Ok(())
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Invalid("no pixels accumulated".into()));
        }
        Ok(())
    }

    /// Per-class scores for every class present in the prediction or target.
    pub fn per_class(&self) -> Vec<ClassScores> {
        let k = self.num_classes();
        let mut out = Vec::new();
        for c in 0..k {
            let diag = self.matrix[[c, c]];
            let row: u64 = (0..k).map(|j| self.matrix[[c, j]]).sum();
            let col: u64 = (0..k).map(|i| self.matrix[[i, c]]).sum();
            let union = row + col - diag;
            if union == 0 {
                continue;
            }
            let precision = (col > 0).then(|| diag as f64 / col as f64);
            let recall = (row > 0).then(|| diag as f64 / row as f64);
            let f1 = match (precision, recall) {
                (Some(p), Some(r)) => Some(harmonic_mean(p, r)),
                _ => None,
            };
            out.push(ClassScores {
                class: c,
                iou: diag as f64 / union as f64,
                precision,
                recall,
                f1,
                support: row,
            });
        }
        out
    }

    /// Mean IoU over classes with a nonzero prediction/target union.
    pub fn miou(&self) -> Result<f64> {
        self.require_nonempty()?;
        let scores = self.per_class();
        Ok(scores.iter().map(|s| s.iou).sum::<f64>() / scores.len() as f64)
    }

    /// Support-weighted IoU average, for comparison against the plain mean.
    pub fn support_weighted_iou(&self) -> Result<f64> {
        self.require_nonempty()?;
        let scores = self.per_class();
        let weight: u64 = scores.iter().map(|s| s.support).sum();
        if weight == 0 {
            return Err(Error::Invalid("no supported classes accumulated".into()));
        }
        Ok(scores
            .iter()
            .map(|s| s.iou * s.support as f64)
            .sum::<f64>()
            / weight as f64)
    }

    /// Macro precision and recall over classes with a nonzero denominator,
    /// and the harmonic mean of those two numbers.
    pub fn precision_recall_f1(&self) -> Result<(f64, f64, f64)> {
        self.require_nonempty()?;
        let scores = self.per_class();
        let mean = |vals: Vec<f64>| -> Option<f64> {
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        let p = mean(scores.iter().filter_map(|s| s.precision).collect())
            .ok_or_else(|| Error::Invalid("no predicted classes accumulated".into()))?;
        let r = mean(scores.iter().filter_map(|s| s.recall).collect())
            .ok_or_else(|| Error::Invalid("no target classes accumulated".into()))?;
        Ok((p, r, harmonic_mean(p, r)))
    }
}

/// Mean pixel-space Euclidean distance over mutually visible joints.
pub fn mean_euclidean_distance(pred: &Skeleton, target: &Skeleton) -> Result<f64> {
    let (sum, count) = euclidean_distance_sum(pred, target)?;
    if count == 0 {
        return Err(Error::Invalid("no mutually visible joints".into()));
    }
    Ok(sum / count as f64)
}

/// Unnormalized distance sum and the number of mutually visible joints, for
/// strict-formula comparison and for pooling across samples.
pub fn euclidean_distance_sum(pred: &Skeleton, target: &Skeleton) -> Result<(f64, usize)> {
    if pred.num_joints() != target.num_joints() {
        return Err(Error::Shape(format!(
            "skeletons have {} and {} joints",
            pred.num_joints(),
            target.num_joints()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for j in 0..pred.num_joints() {
        if pred.visibility[j] && target.visibility[j] {
            let dx = pred.joints[j][0] - target.joints[j][0];
            let dy = pred.joints[j][1] - target.joints[j][1];
            sum += (dx * dx + dy * dy).sqrt();
            count += 1;
        }
    }
    Ok((sum, count))
}

/// Every foreground pixel of a target dense-surface map, as `(y, x)` points.
pub fn annotated_points(target: &DensePoseMap) -> Vec<(usize, usize)> {
    let mut pts = Vec::new();
    for ((y, x), &p) in target.part_index.indexed_iter() {
        if p > 0 {
            pts.push((y, x));
        }
    }
    pts
}

/// Uniform per-part normalization constants.
pub fn uniform_gps_k(num_parts: usize) -> Vec<f64> {
    vec![DEFAULT_GPS_K; num_parts]
}

/// Point-similarity sum over annotated points plus the point count.
///
/// Per point: 0 on a part mismatch, otherwise `exp(-d^2 / (2 k_j^2))` with
/// `d` the UV distance and `k_j` the constant for target part `j`
/// (`k[j - 1]`). Pool sums across samples and divide for a split-level score.
pub fn gps_sum(
    pred: &DensePoseMap,
    target: &DensePoseMap,
    points: &[(usize, usize)],
    k: &[f64],
) -> Result<(f64, usize)> {
    if points.is_empty() {
        return Err(Error::Invalid("no annotated points".into()));
    }
    if let Some(&bad) = k.iter().find(|&&v| v <= 0.0) {
        return Err(Error::Invalid(format!(
            "normalization constants must be positive, got {bad}"
        )));
    }
    if pred.part_index.dim() != target.part_index.dim() {
        return Err(Error::Shape("dense maps differ in size".into()));
    }
    let mut sum = 0.0;
    for &(y, x) in points {
        let tp = target.part_index[[y, x]] as usize;
        if tp == 0 {
            return Err(Error::Invalid(format!(
                "annotated point ({y}, {x}) lies on background"
            )));
        }
        let kj = *k
            .get(tp - 1)
            .ok_or_else(|| Error::Invalid(format!("no normalization constant for part {tp}")))?;
        if pred.part_index[[y, x]] as usize != tp {
            continue;
        }
        let du = pred.u[[y, x]] - target.u[[y, x]];
        let dv = pred.v[[y, x]] - target.v[[y, x]];
        let d2 = du * du + dv * dv;
        sum += (-d2 / (2.0 * kj * kj)).exp();
    }
    Ok((sum, points.len()))
}

/// Mean point similarity over one sample's annotated points.
pub fn geodesic_point_similarity(
    pred: &DensePoseMap,
    target: &DensePoseMap,
    points: &[(usize, usize)],
    k: &[f64],
) -> Result<f64> {
    let (sum, count) = gps_sum(pred, target, points, k)?;
    Ok(sum / count as f64)
}

/// Split-level evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassScores>,
    /// Mean joint distance in pixels; absent without skeleton predictions.
    pub med_pixels: Option<f64>,
    /// Mean point similarity; absent without dense-surface predictions.
    pub gps: Option<f64>,
}

impl MetricReport {
    /// Builds the segmentation scores from an accumulator and attaches the
    /// optional keypoint/surface numbers.
    pub fn from_confusion(
        acc: &ConfusionAccumulator,
        med_pixels: Option<f64>,
        gps: Option<f64>,
    ) -> Result<Self> {
        let (precision, recall, f1) = acc.precision_recall_f1()?;
        Ok(MetricReport {
            iou: acc.miou()?,
            precision,
            recall,
            f1,
            per_class: acc.per_class(),
            med_pixels,
            gps,
        })
    }

    /// Machine-readable `key=value` lines; floats print in shortest
    /// round-trip form so reruns diff cleanly.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("iou={}\n", self.iou));
        out.push_str(&format!("precision={}\n", self.precision));
        out.push_str(&format!("recall={}\n", self.recall));
        out.push_str(&format!("f1={}\n", self.f1));
        if let Some(m) = self.med_pixels {
            out.push_str(&format!("med_pixels={m}\n"));
        }
        if let Some(g) = self.gps {
            out.push_str(&format!("gps={g}\n"));
        }
        for c in &self.per_class {
            out.push_str(&format!(
                "class{}.iou={} class{}.support={}\n",
                c.class, c.iou, c.class, c.support
            ));
        }
        out
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "IoU {:.4}  Pr {:.4}  Rec {:.4}  F1 {:.4}\n",
            self.iou, self.precision, self.recall, self.f1
        ));
        if let Some(m) = self.med_pixels {
            out.push_str(&format!("mED {m:.2} px\n"));
        }
        if let Some(g) = self.gps {
            out.push_str(&format!("GPS {g:.4}\n"));
        }
        out.push_str("class    iou     prec    rec     f1      support\n");
        for c in &self.per_class {
            let fmt = |v: Option<f64>| match v {
                Some(v) => format!("{v:.4}"),
                None => "  -   ".to_string(),
            };
            out.push_str(&format!(
                "{:<8} {:.4}  {}  {}  {}  {}\n",
                c.class,
                c.iou,
                fmt(c.precision),
                fmt(c.recall),
                fmt(c.f1),
                c.support
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(vals: &[u8], h: usize, w: usize, k: usize) -> SegMask {
        SegMask::new(Array2::from_shape_vec((h, w), vals.to_vec()).unwrap(), k).unwrap()
    }

    #[test]
    fn accumulate_counts_by_target_row() {
        let mut acc = ConfusionAccumulator::new(5);
        acc.accumulate(&mask(&[2], 1, 1, 5), &mask(&[3], 1, 1, 5)).unwrap();
        assert_eq!(acc.counts()[[3, 2]], 1);
        assert_eq!(acc.total(), 1);
    }

    #[test]
    fn identical_masks_score_perfectly() {
        let m = mask(&[0, 3, 3, 0], 2, 2, 5);
        let mut acc = ConfusionAccumulator::new(5);
        acc.accumulate(&m, &m).unwrap();
        assert_eq!(acc.miou().unwrap(), 1.0);
        assert_eq!(acc.precision_recall_f1().unwrap(), (1.0, 1.0, 1.0));
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let mut acc = ConfusionAccumulator::new(5);
        acc.accumulate(&mask(&[1; 4], 2, 2, 5), &mask(&[2; 4], 2, 2, 5)).unwrap();
        assert_eq!(acc.miou().unwrap(), 0.0);
    }

    #[test]
    fn two_class_iou_example() {
        // 8 agreeing pixels of class 1, 4 prediction-only, 4 target-only.
        let pred = mask(&[1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0], 4, 4, 2);
        let targ = mask(&[1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1], 4, 4, 2);
        let mut acc = ConfusionAccumulator::new(2);
        acc.accumulate(&pred, &targ).unwrap();
        let per = acc.per_class();
        let c1 = per.iter().find(|c| c.class == 1).unwrap();
        assert_eq!(c1.iou, 0.5);
        assert_eq!(c1.support, 12);
    }

    #[test]
    fn f1_matches_published_rows_to_two_decimals() {
        let f1 = harmonic_mean(0.67, 0.70);
        assert_eq!((f1 * 100.0).round() / 100.0, 0.68);
        let f1 = harmonic_mean(0.69, 0.53);
        assert_eq!((f1 * 100.0).round() / 100.0, 0.60);
    }

    #[test]
    fn streaming_equals_batch_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a_pred = mask(&(0..64).map(|_| rng.random_range(0..4)).collect::<Vec<u8>>(), 8, 8, 4);
        let a_targ = mask(&(0..64).map(|_| rng.random_range(0..4)).collect::<Vec<u8>>(), 8, 8, 4);
        let b_pred = mask(&(0..64).map(|_| rng.random_range(0..4)).collect::<Vec<u8>>(), 8, 8, 4);
        let b_targ = mask(&(0..64).map(|_| rng.random_range(0..4)).collect::<Vec<u8>>(), 8, 8, 4);
        let mut streaming = ConfusionAccumulator::new(4);
        streaming.accumulate(&a_pred, &a_targ).unwrap();
        streaming.accumulate(&b_pred, &b_targ).unwrap();
        let mut sharded = ConfusionAccumulator::new(4);
        let mut other = ConfusionAccumulator::new(4);
        sharded.accumulate(&a_pred, &a_targ).unwrap();
        other.accumulate(&b_pred, &b_targ).unwrap();
        sharded.merge(&other).unwrap();
        assert_eq!(streaming, sharded);
    }

    #[test]
    fn correcting_a_pixel_never_lowers_miou() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let pred_v: Vec<u8> = (0..16).map(|_| rng.random_range(0..3)).collect();
            let targ_v: Vec<u8> = (0..16).map(|_| rng.random_range(0..3)).collect();
            let Some(bad) = (0..16).find(|&i| pred_v[i] != targ_v[i]) else {
                continue;
            };
            let mut acc = ConfusionAccumulator::new(3);
            acc.accumulate(&mask(&pred_v, 4, 4, 3), &mask(&targ_v, 4, 4, 3)).unwrap();
            let before = acc.miou().unwrap();
            let mut fixed = pred_v.clone();
            fixed[bad] = targ_v[bad];
            let mut acc2 = ConfusionAccumulator::new(3);
            acc2.accumulate(&mask(&fixed, 4, 4, 3), &mask(&targ_v, 4, 4, 3)).unwrap();
            assert!(acc2.miou().unwrap() >= before - 1e-12);
        }
    }

    #[test]
    fn empty_accumulator_is_an_error() {
        let acc = ConfusionAccumulator::new(3);
        assert!(acc.miou().is_err());
        assert!(acc.precision_recall_f1().is_err());
    }

    #[test]
    fn med_is_five_for_three_four_offsets() {
        let target = Skeleton::new(vec![[0.0, 0.0]; 16], vec![true; 16]).unwrap();
        let pred = Skeleton::new(vec![[3.0, 4.0]; 16], vec![true; 16]).unwrap();
        assert_eq!(mean_euclidean_distance(&pred, &target).unwrap(), 5.0);
    }

    #[test]
    fn med_uses_only_mutually_visible_joints() {
        let mut vis = vec![false; 16];
        vis[4] = true;
        let target = Skeleton::new(vec![[0.0, 0.0]; 16], vis.clone()).unwrap();
        let mut joints = vec![[100.0, 100.0]; 16];
        joints[4] = [1.0, 0.0];
        let pred = Skeleton::new(joints, vec![true; 16]).unwrap();
        assert_eq!(mean_euclidean_distance(&pred, &target).unwrap(), 1.0);
        let none = Skeleton::new(vec![[0.0, 0.0]; 16], vec![false; 16]).unwrap();
        assert!(mean_euclidean_distance(&pred, &none).is_err());
    }

    #[test]
    fn gps_analytic_cases() {
        let mut target = DensePoseMap::zeros(4, 4, 3);
        target.part_index[[1, 1]] = 2;
        target.u[[1, 1]] = 0.5;
        target.v[[1, 1]] = 0.5;
        let points = annotated_points(&target);
        assert_eq!(points, vec![(1, 1)]);
        let k = uniform_gps_k(3);

        let perfect = target.clone();
        assert_eq!(geodesic_point_similarity(&perfect, &target, &points, &k).unwrap(), 1.0);

        let mut off = target.clone();
        off.u[[1, 1]] = 0.5 + DEFAULT_GPS_K;
        let g = geodesic_point_similarity(&off, &target, &points, &k).unwrap();
        assert!((g - (-0.5f64).exp()).abs() < 1e-9);

        let mut wrong = target.clone();
        wrong.part_index[[1, 1]] = 1;
        assert_eq!(geodesic_point_similarity(&wrong, &target, &points, &k).unwrap(), 0.0);

        assert!(geodesic_point_similarity(&perfect, &target, &points, &[0.0, 0.1, 0.1]).is_err());
        assert!(geodesic_point_similarity(&perfect, &target, &[], &k).is_err());
    }

    #[test]
    fn report_round_trips_through_json() {
        let mut acc = ConfusionAccumulator::new(4);
        let m = mask(&[0, 1, 2, 2], 2, 2, 4);
        let t = mask(&[0, 1, 2, 3], 2, 2, 4);
        acc.accumulate(&m, &t).unwrap();
        let report = MetricReport::from_confusion(&acc, Some(3.5), None).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
        assert!(report.to_kv().contains("med_pixels=3.5"));
        assert!(!report.to_kv().contains("gps="));
        assert!(report.to_text().contains("mED"));
    }
}
