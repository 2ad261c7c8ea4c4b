use proptest::prelude::*;
use tvpinn_core::autodiff::{Tape, Tensor};
use tvpinn_core::gradcheck::Problem;
use tvpinn_core::losses::{data_loss, LossContext, Scales};
use tvpinn_core::neural::{Network, NetworkConfig};
use tvpinn_core::ode::{solve_rk4, DosingSchedule, ParamSet, SystemState};
use tvpinn_core::trainer::{adam_step, AdamConfig, AdamState, Band};
use tvpinn_core::BcScaling;

fn small_state_net(seed: u64) -> Network {
    Network::init(&NetworkConfig::new(vec![5, 5], 4), seed).unwrap()
}

proptest! {
    #[test]
    fn network_outputs_are_positive(seed in any::<u64>(), t in prop::collection::vec(0.0f64..=1.0, 1..200)) {
        for cfg in [NetworkConfig::new(vec![16, 16], 4), NetworkConfig::new(vec![12], 1)] {
            let out = Network::init(&cfg, seed).unwrap().forward(&t).unwrap();
            prop_assert!(out.as_slice().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn network_is_continuous(seed in any::<u64>(), t in 0.0f64..0.999) {
        let net = small_state_net(seed);
        let grid: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
        let out = net.forward(&grid).unwrap();
        let mut lipschitz = 0.0_f64;
        for i in 0..1000 {
            for k in 0..4 {
                lipschitz = lipschitz.max((out.get(i + 1, k) - out.get(i, k)).abs() * 1000.0);
            }
        }
        let eps = 1e-6;
        let pair = net.forward(&[t, t + eps]).unwrap();
        for k in 0..4 {
            let jump = (pair.get(1, k) - pair.get(0, k)).abs();
            // a safety factor covers curvature between grid points
            prop_assert!(jump <= 10.0 * eps * lipschitz.max(1e-12), "output {k}: {jump}");
        }
    }

    #[test]
    fn network_weight_gradients_match_finite_differences(seed in 0u64..500) {
        let net = small_state_net(seed);
        let times = [0.1, 0.45, 0.8];
        // weighted sum of all outputs so each entry of every layer matters
        let weights: Vec<f64> = (0..12).map(|i| 0.3 + 0.1 * i as f64).collect();
        let objective = |n: &Network| -> f64 {
            let out = n.forward(&times).unwrap();
            out.as_slice().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let mut tape = Tape::new();
        let input = tape.constant(Tensor::column(&times));
        let bound = net.bind(&mut tape);
        let out = bound.forward(&mut tape, input);
        let w = tape.constant(Tensor::new(3, 4, weights.clone()));
        let prod = tape.mul(out, w);
        let y = tape.sum(prod);
        let grads = tape.backward(y);
        let mut g = Vec::new();
        bound.flat_gradient(&grads, &mut g);
        let p = net.parameters();
        let mut probe = net.clone();
        for i in 0..p.len() {
            let mut x = p.clone();
            x[i] = p[i] + 1e-5;
            probe.set_parameters(&x).unwrap();
            let up = objective(&probe);
            x[i] = p[i] - 1e-5;
            probe.set_parameters(&x).unwrap();
            let down = objective(&probe);
            let fd = (up - down) / 2e-5;
            prop_assert!((g[i] - fd).abs() <= 1e-4 * g[i].abs().max(fd.abs()) + 1e-8, "param {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn trajectories_stay_non_negative(
        consts in prop::array::uniform10(0.0f64..1.0),
        s_mt in 0.0f64..0.2,
        init in prop::array::uniform4(0.0f64..5.0),
        gem in 0.0f64..2.0,
        ot1 in 0.0f64..20.0,
    ) {
        let p = ParamSet::from_constants(consts, s_mt);
        let schedule = DosingSchedule::gem_then_ot1(gem, ot1);
        let init = SystemState::from_array(init);
        if let Ok(traj) = solve_rk4(init, &p, &|_| s_mt, &schedule, 6.0, 23.0, 0.05) {
            for s in &traj.states {
                prop_assert!(s.to_array().iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn gem_ignores_the_cell_populations(
        a in prop::array::uniform3(0.0f64..5.0),
        b in prop::array::uniform3(0.0f64..5.0),
    ) {
        let p = ParamSet::fixture();
        let schedule = DosingSchedule::gem_then_ot1(0.5, 10.0);
        let run = |c: [f64; 3]| {
            solve_rk4(SystemState::new(c[0], c[1], c[2], 0.0), &p, &|_| p.s_mt, &schedule, 6.0, 23.0, 0.01).unwrap()
        };
        let (ta, tb) = (run(a), run(b));
        for (x, y) in ta.states.iter().zip(&tb.states) {
            prop_assert_eq!(x.gem.to_bits(), y.gem.to_bits());
        }
    }

    #[test]
    fn loss_terms_are_non_negative(seed in any::<u64>()) {
        let p = Problem::random(seed);
        let (flat, _) = p.flat();
        let v = p.values(&flat);
        prop_assert!(v[..4].iter().all(|&x| x >= 0.0 && x.is_finite()), "{v:?}");
    }

    #[test]
    fn data_loss_is_quadratically_homogeneous(
        states in prop::collection::vec(0.01f64..2.0, 20),
        targets in prop::array::uniform2(0.01f64..3.0),
        lambda in 0.1f64..10.0,
    ) {
        let eval = |scale: f64| {
            let ctx = LossContext {
                times: vec![0.0, 0.25, 0.5, 0.75, 1.0],
                residual_rows: 5,
                forcing_t: vec![0.0; 5],
                forcing_g: vec![0.0; 5],
                scales: Scales { time: 1.0, volume: 1.0, drug: 1.0, rate: 1.0 },
                data_rows: vec![1, 4],
                data_targets: targets.iter().map(|t| t * scale).collect(),
                initial: None,
                histology: Vec::new(),
                bc_scaling: BcScaling::Sum,
            };
            let mut tape = Tape::new();
            let u = tape.constant(Tensor::new(5, 4, states.iter().map(|s| s * scale).collect()));
            let l = data_loss(&mut tape, u, &ctx);
            tape.value(l).item()
        };
        let (base, scaled) = (eval(1.0), eval(lambda));
        prop_assert!((scaled - lambda * lambda * base).abs() <= 1e-10 * scaled.abs().max(1e-300));
    }

    #[test]
    fn adam_second_moment_stays_non_negative(
        grads in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 6), 1..40),
    ) {
        let mut params = vec![0.5; 6];
        let mut state = AdamState::new(AdamConfig::default(), 6);
        for g in &grads {
            prop_assert!(adam_step(&mut params, g, &mut state));
            prop_assert!(state.v.iter().all(|&v| v >= 0.0 && v.is_finite()));
            prop_assert!(state.m.iter().all(|m| m.is_finite()));
            prop_assert!(params.iter().all(|p| p.is_finite()));
        }
        prop_assert_eq!(state.step, grads.len() as u64);
    }

    #[test]
    fn band_brackets_the_mean(members in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 8), 1..12)) {
        let refs: Vec<&[f64]> = members.iter().map(|m| m.as_slice()).collect();
        let band = Band::from_members(&refs);
        for i in 0..8 {
            prop_assert!(band.lower[i] <= band.mean[i] && band.mean[i] <= band.upper[i]);
            let mean = members.iter().map(|m| m[i]).sum::<f64>() / members.len() as f64;
            prop_assert!((band.mean[i] - mean).abs() <= 1e-9 * mean.abs().max(1.0));
        }
    }
}

#[test]
fn ten_thousand_sampled_outputs_are_positive() {
    let t: Vec<f64> = (0..2500).map(|i| i as f64 / 2499.0).collect();
    let mut n = 0;
    for seed in 0..4 {
        let out = Network::init(&NetworkConfig::state_default(), seed).unwrap().forward(&t).unwrap();
        assert!(out.as_slice().iter().all(|&v| v > 0.0));
        n += out.len();
    }
    assert!(n >= 10_000);
}
