mod oracles;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use oracles::{check_primitive, lif_bptt, lif_direct, primitives, spike_threshold_mismatches, FD_REL_TOL};
use spikediff_core::snn::{lif_step, LifState, NeuronConfig};
use spikediff_core::{Tape, Tensor};

fn check(name: &str) {
    let p = primitives().into_iter().find(|p| p.name == name).expect("known primitive");
    let worst = check_primitive(&p, 11).unwrap();
    assert!(worst < FD_REL_TOL, "{name}: worst relative error {worst:e}");
}

#[test]
fn conv2d_matches_finite_differences() {
    check("conv2d 3x3");
    check("conv2d 3x3 stride 2");
    check("conv2d 1x1");
}

#[test]
fn linear_matches_finite_differences() {
    check("linear");
}

#[test]
fn resampling_matches_finite_differences() {
    check("avgpool2x2");
    check("upsample2x");
}

#[test]
fn elementwise_ops_match_finite_differences() {
    for name in ["add", "sub", "mul", "scale", "relu"] {
        check(name);
    }
}

#[test]
fn shape_ops_match_finite_differences() {
    for name in ["concat", "broadcast_spatial", "repeat_time", "mean_time", "mean", "reshape"] {
        check(name);
    }
}

#[test]
fn losses_and_normalization_match_finite_differences() {
    for name in ["weighted_sum_sq", "batch_norm (batch statistics)", "batch_norm (running statistics)"] {
        check(name);
    }
}

#[test]
fn every_primitive_is_covered() {
    assert_eq!(primitives().len(), 20);
}

fn neuron(tau: f64, vth: f64, width: f64) -> NeuronConfig {
    NeuronConfig {
        v_threshold: vth,
        tau_decay: tau,
        surrogate_width: width,
        num_steps: 4,
    }
}

proptest! {
    #[test]
    fn spike_threshold_backward_is_the_triangle(seed in any::<u64>(), vth in 0.2f64..2.0, width in 0.1f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(spike_threshold_mismatches(&mut rng, neuron(0.8, vth, width)).unwrap(), 0);
    }

    #[test]
    fn lif_step_matches_direct_iteration(
        currents in prop::collection::vec(-1.5f64..2.5, 1..12),
        tau in 0.0f64..0.99,
        vth in 0.2f64..2.0,
    ) {
        let cfg = neuron(tau, vth, 1.0);
        let (u_ref, o_ref) = lif_direct(&currents, tau, vth);
        let mut state = LifState::<f64>::zeros(&[1]);
        for (s, &i) in currents.iter().enumerate() {
            let (next, o) = lif_step(&state, &Tensor::new(vec![1], vec![i]).unwrap(), &cfg).unwrap();
            prop_assert_eq!(next.membrane.data()[0], u_ref[s]);
            prop_assert_eq!(o.data()[0], o_ref[s]);
            state = next;
        }
    }

    #[test]
    fn lif_backward_detaches_the_reset(
        currents in prop::collection::vec(-1.5f64..2.5, 1..10),
        grads in prop::collection::vec(-1.0f64..1.0, 10),
        tau in 0.0f64..0.99,
    ) {
        let cfg = neuron(tau, 1.0, 1.0);
        let s = currents.len();
        let g = &grads[..s];
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![1, s], currents.clone()).unwrap());
        let o = tape.lif(x, cfg).unwrap();
        let gv = tape.constant(Tensor::new(vec![1, s], g.to_vec()).unwrap());
        let prod = tape.mul(o, gv).unwrap();
        let loss = tape.mean(prod).unwrap();
        let got = tape.backward(loss).unwrap().get_or_zero(x, &tape);
        // Upstream gradient of the spike output under `mean(o * g)`.
        let mut t2 = Tape::<f64>::new();
        let ov = t2.param(Tensor::new(vec![1, s], vec![0.0; s]).unwrap());
        let gv2 = t2.constant(Tensor::new(vec![1, s], g.to_vec()).unwrap());
        let p2 = t2.mul(ov, gv2).unwrap();
        let l2 = t2.mean(p2).unwrap();
        let upstream = t2.backward(l2).unwrap().get_or_zero(ov, &t2);
        let (u, spikes) = lif_direct(&currents, tau, 1.0);
        prop_assert_eq!(got.data(), &lif_bptt(&u, &spikes, upstream.data(), &cfg)[..]);
    }
}
