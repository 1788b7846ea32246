//! Optimization loop, sharded evaluation, checkpointing, and the ablation
//! grid over the four model variants.
//!
//! Batch composition is a pure function of `(seed, iteration)`, so a resumed
//! run replays exactly the schedule the uninterrupted run would have seen.

use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dense::predict_densepose;
use crate::error::{Error, Result};
use crate::metrics::{
    annotated_points, euclidean_distance_sum, gps_sum, uniform_gps_k, ConfusionAccumulator,
    MetricReport,
};
use crate::model::{build_variant, SpdModel};
use crate::nn::graph::Graph;
use crate::nn::optim::{Adam, AdamParams, AdamState};
use crate::nn::params::ParamStore;
use crate::objectives::{
    dense_targets, joint_loss, pose_targets, LossBreakdown, HUBER_DELTA,
};
use crate::pose::to_pixels;
use crate::seg::predict_mask;
use crate::types::{AnnotatedSample, ModelConfig, Skeleton, Variant};

/// Environment variable bounding evaluation parallelism.
pub const NUM_WORKERS_ENV: &str = "SPD_NUM_WORKERS";

/// Samples per evaluation forward pass.
const EVAL_BATCH: usize = 4;

/// Loop hyperparameters, separate from the model architecture.
#[derive(Clone, Copy, Debug)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub adam: AdamParams,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 4,
            adam: AdamParams::default(),
        }
    }
}

/// A model under optimization: parameters, optimizer state, and the log.
pub struct Trainer {
    pub settings: TrainSettings,
    pub store: ParamStore,
    pub model: SpdModel,
    adam: Adam,
    pub iteration: u64,
    pub loss_history: Vec<LossBreakdown>,
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample indices of one mini-batch, as a pure function of the seed and the
/// iteration counter: each epoch shuffles the sample order with its own
/// derived seed and is consumed in full batches.
pub fn batch_indices(
    seed: u64,
    num_samples: usize,
    batch_size: usize,
    iteration: u64,
) -> Vec<usize> {
    let b = batch_size.clamp(1, num_samples.max(1));
    let per_epoch = (num_samples / b).max(1) as u64;
    let epoch = iteration / per_epoch;
    let slot = (iteration % per_epoch) as usize;
    let mut order: Vec<usize> = (0..num_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch));
    order.shuffle(&mut rng);
    order[slot * b..(slot + 1) * b].to_vec()
}

fn stack_images(batch: &[&AnnotatedSample]) -> Result<(Array4<f64>, Array3<u8>)> {
    let (h, w) = (batch[0].height(), batch[0].width());
    if let Some(s) = batch.iter().find(|s| (s.height(), s.width()) != (h, w)) {
        return Err(Error::Shape(format!(
            "sample {} is {}x{} in a {h}x{w} batch",
            s.sample_id,
            s.height(),
            s.width()
        )));
    }
    let bs = batch.len();
    let mut images = Array4::zeros((bs, 3, h, w));
    let mut masks = Array3::zeros((bs, h, w));
    for (bi, s) in batch.iter().enumerate() {
        images.index_axis_mut(Axis(0), bi).assign(&s.image);
        masks.index_axis_mut(Axis(0), bi).assign(&s.mask.data);
    }
    Ok((images, masks))
}

impl Trainer {
    /// Builds the configured variant with freshly initialized parameters.
    pub fn new(config: &ModelConfig, settings: TrainSettings) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = build_variant(&mut store, config)?;
        let adam = Adam::new(&store, settings.adam);
        Ok(Trainer {
            settings,
            store,
            model,
            adam,
            iteration: 0,
            loss_history: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// Trainable parameter elements in the built variant.
    pub fn param_count(&self) -> usize {
        self.model.param_count
    }

    /// One optimization step on an explicit batch.
    pub fn train_step(&mut self, batch: &[&AnnotatedSample]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let (h, w) = (batch[0].height(), batch[0].width());
        let (images, masks) = stack_images(batch)?;
        let weights = self.model.config.effective_weights();
        let form = self.model.config.dense_loss_form;
        let (breakdown, grads) = {
            let mut g = Graph::new(&mut self.store, true);
            let out = self.model.forward(&mut g, images)?;
            let seg_node = g.seg_ce(out.seg.final_logits, &masks)?;
            let l_seg = g.value(seg_node).scalar();
            let mut terms = vec![(seg_node, weights.0)];
            let mut l_pose = 0.0;
            if let Some(p) = out.pose {
                let skels: Vec<&Skeleton> = batch.iter().map(|s| &s.skeleton).collect();
                let (tc, tv) = pose_targets(&skels, h, w)?;
                let node = g.pose_l2(p.refined_coords, &tc, &tv)?;
                l_pose = g.value(node).scalar();
                terms.push((node, weights.1));
            }
            let mut l_dense = 0.0;
            if let Some(d) = out.dense {
                let maps: Vec<Option<&crate::types::DensePoseMap>> =
                    batch.iter().map(|s| s.densepose.as_ref()).collect();
                let (part, tuv, valid) = dense_targets(&maps, h, w)?;
                let node = g.dense_loss(d.part_logits, d.uv, &part, &tuv, &valid, form, HUBER_DELTA)?;
                l_dense = g.value(node).scalar();
                terms.push((node, weights.2));
            }
            let total = g.weighted_sum(&terms)?;
            let breakdown = joint_loss(l_seg, l_pose, l_dense, &self.model.config)?;
            if let Some(component) = breakdown.non_finite_component() {
                return Err(Error::NonFinite {
                    iteration: self.iteration as usize,
                    component: component.into(),
                });
            }
            let grads = g.backward(total)?;
            if !grads.all_finite() {
                return Err(Error::NonFinite {
                    iteration: self.iteration as usize,
                    component: "gradients".into(),
                });
            }
            (breakdown, grads)
        };
        self.adam.step(&mut self.store, &grads)?;
        self.loss_history.push(breakdown);
        self.iteration += 1;
        Ok(breakdown)
    }

    /// Runs `iterations` steps with the seeded batch schedule.
    pub fn train(&mut self, dataset: &[AnnotatedSample], iterations: u64) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::Invalid("cannot train on an empty dataset".into()));
        }
        if iterations == 0 {
            return Err(Error::Invalid("iterations must be at least 1".into()));
        }
        let seed = self.model.config.seed;
        for _ in 0..iterations {
            let idx = batch_indices(seed, dataset.len(), self.settings.batch_size, self.iteration);
            let batch: Vec<&AnnotatedSample> = idx.into_iter().map(|i| &dataset[i]).collect();
            self.train_step(&batch)?;
        }
        Ok(())
    }

    /// The training log, one line per completed iteration.
    pub fn training_log(&self) -> String {
        let mut out = String::new();
        for (i, b) in self.loss_history.iter().enumerate() {
            out.push_str(&b.log_line(i as u64));
            out.push('\n');
        }
        out
    }

    /// Eval-mode pass over a split, with worker count from
    /// [`NUM_WORKERS_ENV`] (default 1).
    pub fn evaluate(&self, dataset: &[AnnotatedSample]) -> Result<MetricReport> {
        let workers = std::env::var(NUM_WORKERS_ENV)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(1);
        self.evaluate_with_workers(dataset, workers)
    }

    /// Eval-mode pass over a split with an explicit worker bound; shards are
    /// merged in shard order, so the result is independent of the bound.
    pub fn evaluate_with_workers(
        &self,
        dataset: &[AnnotatedSample],
        workers: usize,
    ) -> Result<MetricReport> {
        if dataset.is_empty() {
            return Err(Error::Invalid("cannot evaluate an empty dataset".into()));
        }
        let workers = workers.clamp(1, dataset.len());
        let mut shards = Vec::with_capacity(workers);
        let per = dataset.len().div_ceil(workers);
        for c in dataset.chunks(per) {
            shards.push(c);
        }
        let stats: Vec<Result<ShardStats>> = std::thread::scope(|scope| {
            let handles: Vec<_> = shards
                .iter()
                .map(|shard| {
                    let store = self.store.clone();
                    let model = &self.model;
                    scope.spawn(move || eval_shard(model, store, shard))
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let k = self.model.config.num_classes;
        let mut acc = ConfusionAccumulator::new(k);
        let mut med_sum = 0.0;
        let mut med_count = 0usize;
        let mut gps_total = 0.0;
        let mut gps_count = 0usize;
        // Per-sample terms are re-added in global sample order so the pooled
        // sums do not depend on where the shard boundaries fell.
        for s in stats {
            let s = s?;
            acc.merge(&s.confusion)?;
            for (sum, count) in s.med {
                med_sum += sum;
                med_count += count;
            }
            for (sum, count) in s.gps {
                gps_total += sum;
                gps_count += count;
            }
        }
        let med = (med_count > 0).then(|| med_sum / med_count as f64);
        let gps = (gps_count > 0).then(|| gps_total / gps_count as f64);
        MetricReport::from_confusion(&acc, med, gps)
    }
}

struct ShardStats {
    confusion: ConfusionAccumulator,
    /// Per-sample `(distance sum, joint count)` terms, in shard order.
    med: Vec<(f64, usize)>,
    /// Per-sample `(similarity sum, point count)` terms, in shard order.
    gps: Vec<(f64, usize)>,
}

fn eval_shard(
    model: &SpdModel,
    mut store: ParamStore,
    samples: &[AnnotatedSample],
) -> Result<ShardStats> {
    let config = &model.config;
    let mut stats = ShardStats {
        confusion: ConfusionAccumulator::new(config.num_classes),
        med: Vec::new(),
        gps: Vec::new(),
    };
    let k = uniform_gps_k(config.num_parts);
    for batch in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&AnnotatedSample> = batch.iter().collect();
        let (images, _) = stack_images(&refs)?;
        let (h, w) = (batch[0].height(), batch[0].width());
        let mut g = Graph::new(&mut store, false);
        let out = model.forward(&mut g, images)?;
        let logits = g.value(out.seg.final_logits).as4().clone();
        let coords = out.pose.map(|p| g.value(p.refined_coords).as3().clone());
        let dense = out
            .dense
            .map(|d| (g.value(d.part_logits).as4().clone(), g.value(d.uv).as4().clone()));
        drop(g);
        for (bi, sample) in batch.iter().enumerate() {
            let pred = predict_mask(logits.index_axis(Axis(0), bi))?;
            stats.confusion.accumulate(&pred, &sample.mask)?;
            if let Some(coords) = &coords {
                let skel = to_pixels(coords.index_axis(Axis(0), bi), h, w)?;
                stats.med.push(euclidean_distance_sum(&skel, &sample.skeleton)?);
            }
            if let (Some((part_logits, uv)), Some(target)) = (&dense, &sample.densepose) {
                let points = annotated_points(target);
                if !points.is_empty() {
                    let pred_dp = predict_densepose(
                        part_logits.index_axis(Axis(0), bi),
                        uv.index_axis(Axis(0), bi),
                    )?;
                    stats.gps.push(gps_sum(&pred_dp, target, &points, &k)?);
                }
            }
        }
    }
    Ok(stats)
}

/// One trained-and-evaluated grid entry.
pub struct AblationCell {
    pub variant: Variant,
    pub seed: u64,
    /// The evaluation report, or the error message for this cell alone.
    pub report: std::result::Result<MetricReport, String>,
}

/// Results of the full variant x seed grid.
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

/// Mean segmentation scores over the seeds that completed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanScores {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl AblationTable {
    pub fn cell(&self, variant: Variant, seed: u64) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.seed == seed)
    }

    pub fn mean(&self, variant: Variant) -> Option<MeanScores> {
        let reports: Vec<&MetricReport> = self
            .cells
            .iter()
            .filter(|c| c.variant == variant)
            .filter_map(|c| c.report.as_ref().ok())
            .collect();
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        Some(MeanScores {
            iou: reports.iter().map(|r| r.iou).sum::<f64>() / n,
            precision: reports.iter().map(|r| r.precision).sum::<f64>() / n,
            recall: reports.iter().map(|r| r.recall).sum::<f64>() / n,
            f1: reports.iter().map(|r| r.f1).sum::<f64>() / n,
        })
    }

    /// Human-readable grid, one block per variant.
    pub fn to_text(&self) -> String {
        let mut out = String::from("variant  seed  iou     prec    rec     f1\n");
        for &variant in &Variant::ALL {
            for &seed in &self.seeds {
                match self.cell(variant, seed).map(|c| &c.report) {
                    Some(Ok(r)) => out.push_str(&format!(
                        "{:<8} {:<5} {:.4}  {:.4}  {:.4}  {:.4}\n",
                        variant.name(),
                        seed,
                        r.iou,
                        r.precision,
                        r.recall,
                        r.f1
                    )),
                    Some(Err(e)) => out.push_str(&format!(
                        "{:<8} {:<5} error: {e}\n",
                        variant.name(),
                        seed
                    )),
                    None => {}
                }
            }
            if let Some(m) = self.mean(variant) {
                out.push_str(&format!(
                    "{:<8} mean  {:.4}  {:.4}  {:.4}  {:.4}\n",
                    variant.name(),
                    m.iou,
                    m.precision,
                    m.recall,
                    m.f1
                ));
            }
        }
        out
    }

    /// Machine-readable rows.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for c in &self.cells {
            match &c.report {
                Ok(r) => out.push_str(&format!(
                    "variant={} seed={} iou={} precision={} recall={} f1={}\n",
                    c.variant.name(),
                    c.seed,
                    r.iou,
                    r.precision,
                    r.recall,
                    r.f1
                )),
                Err(e) => out.push_str(&format!(
                    "variant={} seed={} error={e:?}\n",
                    c.variant.name(),
                    c.seed
                )),
            }
        }
        out
    }
}

/// Trains and evaluates all four variants for every seed, with identical
/// data order per seed. Per-cell failures land in the cell, not the grid.
pub fn run_ablation(
    base: &ModelConfig,
    train_set: &[AnnotatedSample],
    eval_set: &[AnnotatedSample],
    seeds: &[u64],
    settings: TrainSettings,
    iterations: u64,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Invalid("ablation needs at least one seed".into()));
    }
    let mut cells = Vec::with_capacity(4 * seeds.len());
    for &variant in &Variant::ALL {
        for &seed in seeds {
            let mut config = base.clone();
            config.variant = variant;
            config.seed = seed;
            let report = (|| {
                let mut trainer = Trainer::new(&config, settings)?;
                trainer.train(train_set, iterations)?;
                trainer.evaluate(eval_set)
            })()
            .map_err(|e| e.to_string());
            cells.push(AblationCell {
                variant,
                seed,
                report,
            });
        }
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        cells,
    })
}

// --- checkpoint archive ---------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"SPDCKPT1";

struct ByteWriter(Vec<u8>);

impl ByteWriter {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }

    fn array(&mut self, a: &ndarray::ArrayD<f64>) {
        self.u64(a.ndim() as u64);
        for &d in a.shape() {
            self.u64(d as u64);
        }
        for &v in a.iter() {
            self.f64(v);
        }
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated archive".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn array(&mut self) -> Result<ndarray::ArrayD<f64>> {
        let ndim = self.u64()? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        if len > (1 << 28) {
            return Err(Error::Checkpoint("implausible tensor size".into()));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(self.f64()?);
        }
        ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl Trainer {
    /// Serializes parameters, buffers, optimizer moments, the iteration
    /// counter, the loss log, and the embedded configuration.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter(Vec::new());
        w.0.extend_from_slice(CKPT_MAGIC);
        w.u64(self.iteration);
        w.u64(self.settings.batch_size as u64);
        w.f64(self.settings.adam.lr);
        w.f64(self.settings.adam.beta1);
        w.f64(self.settings.adam.beta2);
        w.f64(self.settings.adam.eps);
        let config = serde_json::to_vec(&self.model.config)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.bytes(&config);
        w.u64(self.store.len() as u64);
        for id in 0..self.store.len() {
            w.bytes(self.store.name(id).as_bytes());
            w.u64(self.store.is_trainable(id) as u64);
            w.array(self.store.value(id));
        }
        let adam = self.adam.snapshot(&self.store);
        w.u64(adam.t);
        w.u64(adam.moments.len() as u64);
        for (name, m, v) in &adam.moments {
            w.bytes(name.as_bytes());
            w.array(m);
            w.array(v);
        }
        w.u64(self.loss_history.len() as u64);
        for b in &self.loss_history {
            for v in [b.l_seg, b.l_pose, b.l_dense, b.total, b.weights.0, b.weights.1, b.weights.2]
            {
                w.f64(v);
            }
        }
        std::fs::write(path, &w.0).map_err(|e| Error::io(path, e))
    }

    /// Restores a trainer from [`Trainer::save_checkpoint`] output.
    pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader { buf: &buf, pos: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err(Error::Checkpoint("unrecognized archive header".into()));
        }
        let iteration = r.u64()?;
        let batch_size = r.u64()? as usize;
        let adam_hp = AdamParams {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let config: ModelConfig = serde_json::from_slice(r.bytes()?)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let settings = TrainSettings {
            batch_size,
            adam: adam_hp,
        };
        let mut trainer = Trainer::new(&config, settings)?;
        let entries = r.u64()? as usize;
        if entries != trainer.store.len() {
            return Err(Error::Checkpoint(format!(
                "archive has {entries} tensors, the rebuilt model has {}",
                trainer.store.len()
            )));
        }
        for _ in 0..entries {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| Error::Checkpoint("non-UTF-8 tensor name".into()))?;
            let trainable = r.u64()? != 0;
            let value = r.array()?;
            let id = trainer
                .store
                .id(&name)
                .map_err(|_| Error::Checkpoint(format!("unexpected tensor {name:?}")))?;
            if trainer.store.is_trainable(id) != trainable {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} changed trainability"
                )));
            }
            let slot = trainer.store.value_mut(id);
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} is {:?} in the archive but {:?} in the model",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        let t = r.u64()?;
        let n_moments = r.u64()? as usize;
        let mut moments = Vec::with_capacity(n_moments);
        for _ in 0..n_moments {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| Error::Checkpoint("non-UTF-8 moment name".into()))?;
            let m = r.array()?;
            let v = r.array()?;
            moments.push((name, m, v));
        }
        trainer
            .adam
            .restore(&trainer.store, &AdamState { t, moments })
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n_history = r.u64()? as usize;
        let mut history = Vec::with_capacity(n_history);
        for _ in 0..n_history {
            let l_seg = r.f64()?;
            let l_pose = r.f64()?;
            let l_dense = r.f64()?;
            let total = r.f64()?;
            let weights = (r.f64()?, r.f64()?, r.f64()?);
            history.push(LossBreakdown {
                l_seg,
                l_pose,
                l_dense,
                total,
                weights,
            });
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes in archive".into()));
        }
        trainer.iteration = iteration;
        trainer.loss_history = history;
        Ok(trainer)
    }
}
