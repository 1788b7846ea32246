//! Acceptance suite, one test per criterion:
//! 1. published-table F1 arithmetic, 2. joint-loss weighting, 3. loss
//! gradients vs central finite differences, 4. metric oracles, 5. shape and
//! generator invariants, 6. an overfit run, 7. the ablation trend, and
//! 8. determinism (logs, reports, checkpoint/resume).

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spd_core::io::load_split;
use spd_core::metrics::{
    gps_sum, harmonic_mean, mean_euclidean_distance, uniform_gps_k, ConfusionAccumulator,
    MetricReport,
};
use spd_core::model::build_variant;
use spd_core::nn::graph::Graph;
use spd_core::nn::kernels::softmax_channels;
use spd_core::nn::params::ParamStore;
use spd_core::objectives::{joint_loss, HUBER_DELTA};
use spd_core::synth::{generate_split, render_sample, sample_figure};
use spd_core::trainer::{run_ablation, TrainSettings, Trainer};
use spd_core::types::default_config;
use spd_core::{validate_sample, DenseLossForm, DensePoseMap, SegMask, Skeleton, Variant};

/// Iterations per ablation cell in criterion 7.
const ABLATION_ITERATIONS: u64 = 150;
/// Step size used by the training-based criteria.
const ACCEPT_LR: f64 = 3e-3;

fn accept_settings() -> TrainSettings {
    let mut s = TrainSettings::default();
    s.adam.lr = ACCEPT_LR;
    s
}

#[test]
fn acceptance_1_f1_arithmetic() {
    let a = harmonic_mean(0.67, 0.70);
    let b = harmonic_mean(0.69, 0.53);
    assert_eq!(format!("{a:.2}"), "0.68");
    assert_eq!(format!("{b:.2}"), "0.60");
    println!("acceptance 1 (F1 arithmetic vs published rows): PASS ({a:.4}, {b:.4})");
}

#[test]
fn acceptance_2_joint_loss_weighting() {
    let config = default_config();
    assert_eq!(
        (config.lambda_s, config.lambda_p, config.lambda_d),
        (1.0, 0.8, 0.6)
    );
    let b = joint_loss(1.0, 1.0, 1.0, &config).expect("joint loss");
    assert_eq!(b.total, 2.4);
    println!("acceptance 2 (joint-loss weighting): PASS (total = {})", b.total);
}

// --- criterion 3: gradients vs central finite differences ------------------

/// Central-difference check of `d loss / d param` for every coordinate of
/// every named parameter, against one analytic backward pass.
fn fd_check<F>(store: &mut ParamStore, names: &[&str], forward: F, label: &str)
where
    F: Fn(&mut ParamStore, bool) -> (f64, Option<spd_core::nn::graph::Gradients>),
{
    let (_, grads) = forward(store, true);
    let grads = grads.expect("gradients");
    let eps = 1e-5;
    for name in names {
        let id = store.id(name).expect("param id");
        let analytic = grads
            .param(id)
            .expect("param gradient")
            .view_dyn()
            .to_owned();
        let coords: Vec<Vec<usize>> = analytic
            .indexed_iter()
            .map(|(ix, _)| ix.slice().to_vec())
            .collect();
        for ix in coords {
            let orig = store.value(id)[ix.as_slice()];
            store.value_mut(id)[ix.as_slice()] = orig + eps;
            let (fp, _) = forward(store, false);
            store.value_mut(id)[ix.as_slice()] = orig - eps;
            let (fm, _) = forward(store, false);
            store.value_mut(id)[ix.as_slice()] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let a = analytic[ix.as_slice()];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                (a - fd).abs() / denom < 1e-4,
                "{label} {name}[{ix:?}]: analytic {a} vs fd {fd}"
            );
        }
    }
}

#[test]
fn acceptance_3_gradient_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let mut cases = 0;

    for _ in 0..20 {
        let mut store = ParamStore::new();
        let logits = Array4::from_shape_fn((2, 4, 3, 3), |_| rng.random_range(-2.0..2.0));
        store.add_param("logits", logits.into_dyn()).unwrap();
        let target = Array3::from_shape_fn((2, 3, 3), |_| rng.random_range(0..4u8));
        fd_check(
            &mut store,
            &["logits"],
            |s, with_grads| {
                let mut g = Graph::new(s, false);
                let x = g.param_named("logits").unwrap();
                let loss = g.seg_ce(x, &target).unwrap();
                let v = g.value(loss).scalar();
                (v, with_grads.then(|| g.backward(loss).unwrap()))
            },
            "seg_ce",
        );
        cases += 1;
    }

    for _ in 0..20 {
        let mut store = ParamStore::new();
        let coords = Array3::from_shape_fn((2, 5, 2), |_| rng.random_range(-0.2..1.2));
        store.add_param("coords", coords.into_dyn()).unwrap();
        let target = Array3::from_shape_fn((2, 5, 2), |_| rng.random_range(0.0..1.0));
        let mut vis = Array2::from_shape_fn((2, 5), |_| rng.random_bool(0.7));
        vis[[0, 0]] = true;
        fd_check(
            &mut store,
            &["coords"],
            |s, with_grads| {
                let mut g = Graph::new(s, false);
                let x = g.param_named("coords").unwrap();
                let loss = g.pose_l2(x, &target, &vis).unwrap();
                let v = g.value(loss).scalar();
                (v, with_grads.then(|| g.backward(loss).unwrap()))
            },
            "pose_l2",
        );
        cases += 1;
    }

    for form in [DenseLossForm::Product, DenseLossForm::Sum] {
        for _ in 0..20 {
            let mut store = ParamStore::new();
            let part_logits = Array4::from_shape_fn((2, 4, 3, 3), |_| rng.random_range(-2.0..2.0));
            let uv = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.random_range(0.05..0.95));
            store.add_param("part_logits", part_logits.into_dyn()).unwrap();
            store.add_param("uv", uv.into_dyn()).unwrap();
            let part = Array3::from_shape_fn((2, 3, 3), |_| rng.random_range(0..4u8));
            let tuv = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.random_range(0.0..1.0));
            let valid = vec![true, rng.random_bool(0.5)];
            fd_check(
                &mut store,
                &["part_logits", "uv"],
                |s, with_grads| {
                    let mut g = Graph::new(s, false);
                    let pl = g.param_named("part_logits").unwrap();
                    let u = g.param_named("uv").unwrap();
                    let loss = g
                        .dense_loss(pl, u, &part, &tuv, &valid, form, HUBER_DELTA)
                        .unwrap();
                    let v = g.value(loss).scalar();
                    (v, with_grads.then(|| g.backward(loss).unwrap()))
                },
                "dense_loss",
            );
            cases += 1;
        }
    }
    println!("acceptance 3 (gradient suite, {cases} instances): PASS");
}

// --- criterion 4: metric oracles --------------------------------------------

#[test]
fn acceptance_4_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(401);

    for case in 0..100 {
        let k = rng.random_range(2..=5usize);
        let pred_data = Array2::from_shape_fn((16, 16), |_| rng.random_range(0..k as u8));
        let target_data = Array2::from_shape_fn((16, 16), |_| rng.random_range(0..k as u8));
        let pred = SegMask::new(pred_data.clone(), k).unwrap();
        let target = SegMask::new(target_data.clone(), k).unwrap();
        let mut acc = ConfusionAccumulator::new(k);
        acc.accumulate(&pred, &target).unwrap();
        let report = MetricReport::from_confusion(&acc, None, None).unwrap();

        // Brute force, straight from the definitions.
        let mut ious = Vec::new();
        let mut precisions = Vec::new();
        let mut recalls = Vec::new();
        for c in 0..k as u8 {
            let mut tp = 0u64;
            let mut fp = 0u64;
            let mut fn_ = 0u64;
            for (p, t) in pred_data.iter().zip(target_data.iter()) {
                match (*p == c, *t == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            if tp + fp + fn_ > 0 {
                ious.push(tp as f64 / (tp + fp + fn_) as f64);
            }
            if tp + fp > 0 {
                precisions.push(tp as f64 / (tp + fp) as f64);
            }
            if tp + fn_ > 0 {
                recalls.push(tp as f64 / (tp + fn_) as f64);
            }
        }
        let miou = ious.iter().sum::<f64>() / ious.len() as f64;
        let mp = precisions.iter().sum::<f64>() / precisions.len() as f64;
        let mr = recalls.iter().sum::<f64>() / recalls.len() as f64;
        assert_eq!(report.iou, miou, "case {case}: miou");
        assert_eq!(report.precision, mp, "case {case}: precision");
        assert_eq!(report.recall, mr, "case {case}: recall");
        assert_eq!(report.f1, harmonic_mean(mp, mr), "case {case}: f1");
    }

    // mED against a direct per-joint computation.
    for _ in 0..100 {
        let n = rng.random_range(1..=16usize);
        let mk = |rng: &mut ChaCha8Rng| {
            let joints = (0..n)
                .map(|_| [rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)])
                .collect();
            let mut vis: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
            vis[0] = true;
            Skeleton::new(joints, vis).unwrap()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let med = mean_euclidean_distance(&a, &b).unwrap();
        let mut sum = 0.0;
        let mut count = 0;
        for j in 0..n {
            if a.visibility[j] && b.visibility[j] {
                sum += ((a.joints[j][0] - b.joints[j][0]).powi(2)
                    + (a.joints[j][1] - b.joints[j][1]).powi(2))
                .sqrt();
                count += 1;
            }
        }
        assert!((med - sum / count as f64).abs() < 1e-9);
    }

    // GPS analytic cases on a one-point map.
    let k = uniform_gps_k(24);
    let mut part = Array2::<u8>::zeros((4, 4));
    part[[1, 2]] = 5;
    let mut u = Array2::<f64>::zeros((4, 4));
    let mut v = Array2::<f64>::zeros((4, 4));
    u[[1, 2]] = 0.4;
    v[[1, 2]] = 0.6;
    let target = DensePoseMap::new(part.clone(), u.clone(), v.clone(), 24).unwrap();
    let points = vec![(1usize, 2usize)];

    let perfect = gps_sum(&target, &target, &points, &k).unwrap();
    assert_eq!(perfect, (1.0, 1));

    let mut u2 = u.clone();
    u2[[1, 2]] = 0.4 + k[4]; // distance exactly one k for part 5
    let shifted = DensePoseMap::new(part.clone(), u2, v.clone(), 24).unwrap();
    let (g, c) = gps_sum(&shifted, &target, &points, &k).unwrap();
    assert_eq!(c, 1);
    assert!((g - (-0.5f64).exp()).abs() < 1e-9);

    let mut part2 = part.clone();
    part2[[1, 2]] = 6;
    let mismatched = DensePoseMap::new(part2, u, v, 24).unwrap();
    let (g, c) = gps_sum(&mismatched, &target, &points, &k).unwrap();
    assert_eq!((g, c), (0.0, 1));

    println!("acceptance 4 (metric oracles): PASS");
}

// --- criterion 5: shapes and generator invariants ---------------------------

#[test]
fn acceptance_5_shape_and_generator_invariants() {
    let config = default_config();
    assert_eq!(config.num_classes, 19);
    assert_eq!(config.num_joints, 16);
    assert_eq!(config.num_parts, 24);

    let mut store = ParamStore::new();
    let model = build_variant(&mut store, &config).expect("build");
    let mut rng = ChaCha8Rng::seed_from_u64(501);
    let images = Array4::from_shape_fn((2, 3, 64, 64), |_| rng.random::<f64>());
    let mut g = Graph::new(&mut store, false);
    let out = model.forward(&mut g, images).expect("forward");

    let logits = g.value(out.seg.final_logits).as4();
    assert_eq!(logits.dim(), (2, 19, 64, 64));
    let probs = softmax_channels(logits);
    for bi in 0..2 {
        for i in 0..64 {
            for j in 0..64 {
                let s: f64 = (0..19).map(|c| probs[[bi, c, i, j]]).sum();
                assert!((s - 1.0).abs() <= 1e-6, "softmax sum {s} at {bi},{i},{j}");
            }
        }
    }

    let pose = out.pose.expect("pose branch");
    let coords = g.value(pose.refined_coords).as3();
    assert_eq!(coords.dim(), (2, 16, 2));
    assert!(coords.iter().all(|&v| (0.0..=1.0).contains(&v)));

    let dense = out.dense.expect("dense branch");
    assert_eq!(g.value(dense.part_logits).as4().dim(), (2, 25, 64, 64));
    let uv = g.value(dense.uv).as4();
    assert_eq!(uv.dim(), (2, 2, 64, 64));
    assert!(uv.iter().all(|&v| (0.0..=1.0).contains(&v)));
    drop(g);

    for seed in 0..1000u64 {
        let spec = sample_figure(seed);
        let sample = render_sample(&spec, 64, 64, &format!("gen{seed}")).expect("render");
        validate_sample(&sample).expect("generator invariants");
    }
    println!("acceptance 5 (shapes and 1000 generator specs): PASS");
}

// --- criterion 6: overfit ----------------------------------------------------

#[test]
fn acceptance_6_overfit_smoke() {
    let dir = tempfile::tempdir().expect("tempdir");
    let manifest = generate_split(8, 42, dir.path()).expect("synth");
    let data = load_split(&manifest).expect("load");

    let mut config = default_config();
    config.seed = 7;
    let mut trainer = Trainer::new(&config, accept_settings()).expect("build");
    let target = (19.0f64).ln() / 10.0;
    let mut final_l_seg = f64::INFINITY;
    let mut final_miou = 0.0;
    let mut passed = false;
    while trainer.iteration < 3000 {
        trainer.train(&data, 150).expect("train");
        final_l_seg = trainer.loss_history.last().expect("history").l_seg;
        if final_l_seg < target {
            final_miou = trainer
                .evaluate_with_workers(&data, 1)
                .expect("evaluate")
                .iou;
            if final_miou >= 0.90 {
                passed = true;
                break;
            }
        }
    }
    assert!(
        passed,
        "after {} iterations: l_seg against {target}: {final_l_seg}, train miou: {final_miou}",
        trainer.iteration
    );
    println!(
        "acceptance 6 (overfit, {} iterations): PASS (l_seg {final_l_seg:.4} < {target:.4}, train mIoU {final_miou:.4} >= 0.90)",
        trainer.iteration
    );
}

// --- criterion 7: ablation trend ---------------------------------------------

#[test]
fn acceptance_7_ablation_trend() {
    let train_dir = tempfile::tempdir().expect("tempdir");
    let eval_dir = tempfile::tempdir().expect("tempdir");
    let train_set = load_split(&generate_split(256, 1000, train_dir.path()).expect("synth"))
        .expect("load train");
    let eval_set =
        load_split(&generate_split(64, 2000, eval_dir.path()).expect("synth")).expect("load eval");

    let base = default_config();
    let table = run_ablation(
        &base,
        &train_set,
        &eval_set,
        &[1, 2, 3],
        accept_settings(),
        ABLATION_ITERATIONS,
    )
    .expect("ablation");
    for cell in &table.cells {
        assert!(
            cell.report.is_ok(),
            "{} seed {}: {:?}",
            cell.variant.name(),
            cell.seed,
            cell.report.as_ref().err()
        );
    }
    print!("{}", table.to_text());
    let spd = table.mean(Variant::Spd).expect("spd mean");
    let s = table.mean(Variant::S).expect("s mean");
    let sd = table.mean(Variant::Sd).expect("sd mean");
    assert!(
        spd.iou >= s.iou,
        "mean mIoU: SPD {} < S {}",
        spd.iou,
        s.iou
    );
    assert!(
        spd.iou >= sd.iou,
        "mean mIoU: SPD {} < SD {}",
        spd.iou,
        sd.iou
    );
    println!(
        "acceptance 7 (ablation trend over seeds 1-3): PASS (SPD {:.4} >= S {:.4}, SPD {:.4} >= SD {:.4})",
        spd.iou, s.iou, spd.iou, sd.iou
    );
}

// --- criterion 8: determinism --------------------------------------------------

#[test]
fn acceptance_8_determinism() {
    let dir = tempfile::tempdir().expect("tempdir");
    let manifest = generate_split(8, 42, dir.path()).expect("synth");
    let data = load_split(&manifest).expect("load");

    // Byte-identical regeneration.
    let dir2 = tempfile::tempdir().expect("tempdir");
    let manifest2 = generate_split(8, 42, dir2.path()).expect("synth");
    assert_eq!(
        std::fs::read(&manifest).unwrap(),
        std::fs::read(&manifest2).unwrap(),
        "manifest bytes differ between identical synth runs"
    );

    let mut config = default_config();
    config.seed = 7;
    let run = || {
        let mut t = Trainer::new(&config, accept_settings()).expect("build");
        t.train(&data, 30).expect("train");
        let report = t.evaluate_with_workers(&data, 1).expect("evaluate");
        (t.training_log(), report.to_kv(), report.to_text())
    };
    let (log_a, kv_a, text_a) = run();
    let (log_b, kv_b, text_b) = run();
    assert_eq!(log_a, log_b, "training logs differ");
    assert_eq!(kv_a, kv_b, "metric key-value reports differ");
    assert_eq!(text_a, text_b, "metric text reports differ");

    // Checkpoint/resume equivalence to 1e-6.
    let ckpt = dir.path().join("resume.ckpt");
    let mut straight = Trainer::new(&config, accept_settings()).expect("build");
    straight.train(&data, 12).expect("train");
    let mut partial = Trainer::new(&config, accept_settings()).expect("build");
    partial.train(&data, 6).expect("train");
    partial.save_checkpoint(&ckpt).expect("save");
    let mut resumed = Trainer::load_checkpoint(&ckpt).expect("load");
    resumed.train(&data, 6).expect("resume");
    let mut worst = 0.0f64;
    for id in 0..straight.store.len() {
        for (a, b) in straight
            .store
            .value(id)
            .iter()
            .zip(resumed.store.value(id).iter())
        {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-6, "checkpoint/resume divergence {worst}");
    println!(
        "acceptance 8 (determinism): PASS (identical logs and reports; resume divergence {worst:.2e})"
    );
}
