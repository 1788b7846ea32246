//! Manual throughput probe for the training step building blocks.
//! Run with `cargo test --test perf_probe -- --ignored --nocapture`.

use std::time::Instant;

use ndarray::{Array1, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spd_core::nn::{Graph, ParamStore};

fn rand4(rng: &mut ChaCha8Rng, d: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(d, || rng.random_range(-0.5..0.5))
}

#[test]
#[ignore]
fn conv_stack_throughput() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    // stem s2 + stage s2 + two stride-1 stages at 16x16 + heads: rough
    // stand-in for the real model's compute profile at 64x64 input.
    let widths = [(3usize, 16usize, 2usize), (16, 24, 2), (24, 32, 2), (32, 48, 1), (48, 48, 1), (48, 64, 2), (64, 64, 1)];
    for (i, &(ic, oc, _)) in widths.iter().enumerate() {
        store
            .add_param(&format!("w{i}"), rand4(&mut rng, (oc, ic, 3, 3)).into_dyn())
            .unwrap();
        store
            .add_param(&format!("g{i}"), Array1::from_elem(oc, 1.0).into_dyn())
            .unwrap();
        store
            .add_param(&format!("b{i}"), Array1::zeros(oc).into_dyn())
            .unwrap();
        store
            .add_buffer(&format!("rm{i}"), Array1::zeros(oc).into_dyn())
            .unwrap();
        store
            .add_buffer(&format!("rv{i}"), Array1::from_elem(oc, 1.0).into_dyn())
            .unwrap();
    }
    let x = rand4(&mut rng, (4, 3, 64, 64));
    let target = ndarray::Array3::<u8>::zeros((4, 64, 64));

    let reps = 5;
    let start = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new(&mut store, true);
        let mut h = g.input4(x.clone());
        for (i, &(_, _, stride)) in widths.iter().enumerate() {
            let w = g.param_named(&format!("w{i}")).unwrap();
            h = g.conv2d(h, w, None, stride, 1, 1).unwrap();
            let gamma = g.param_named(&format!("g{i}")).unwrap();
            let beta = g.param_named(&format!("b{i}")).unwrap();
            let rm = g.store_ref().id(&format!("rm{i}")).unwrap();
            let rv = g.store_ref().id(&format!("rv{i}")).unwrap();
            h = g.batch_norm(h, gamma, beta, rm, rv).unwrap();
            h = g.relu(h);
        }
        let up = g.bilinear(h, 64, 64);
        let loss = g.seg_ce(up, &target).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.all_finite());
    }
    let dt = start.elapsed().as_secs_f64() / reps as f64;
    println!("fwd+bwd: {:.3} s/iter ({:.1} iter/min)", dt, 60.0 / dt);
}
