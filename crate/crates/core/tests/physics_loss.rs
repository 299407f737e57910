use emgpinn::autodiff::{time_jet, JetMode, ParamVars, Tape};
use emgpinn::data::EMG_CHANNELS;
use emgpinn::dynamics::{JointState, LimbModel, SegmentParams};
use emgpinn::network::{Activation, Architecture, MlpParams, NormSpec};
use emgpinn::training::{data_loss, physics_loss, physics_residual, total_loss, Batch, PhysicsContext};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arm() -> LimbModel {
    let seg = |mass, length, inertia_com| SegmentParams {
        mass,
        length,
        com_ratio: 0.44,
        inertia_com,
    };
    LimbModel::new(seg(2.0, 0.3, 0.013), seg(1.2, 0.27, 0.008))
}

fn norm() -> NormSpec {
    NormSpec {
        angle_offset: vec![-0.2, 0.1],
        angle_scale: vec![0.9, 2.4],
        emg_offset: vec![0.0; EMG_CHANNELS],
        emg_scale: vec![1.0; EMG_CHANNELS],
    }
}

fn batch(rng: &mut ChaCha8Rng, n: usize, duration: f64) -> Batch {
    Batch {
        inputs: Array2::from_shape_fn((EMG_CHANNELS + 1, n), |_| rng.gen_range(0.0..1.0)),
        targets: Array2::from_shape_fn((2, n), |_| rng.gen_range(0.0..1.0)),
        tau: Array2::from_shape_fn((2, n), |_| rng.gen_range(-3.0..3.0)),
        inv_t: Array2::from_elem((1, n), 1.0 / duration),
        inv_t2: Array2::from_elem((1, n), 1.0 / (duration * duration)),
    }
}

/// Output of a network with no hidden layer and identity output:
/// `y_j = a_j + b_j · t`, EMG ignored.
fn linear_in_time(a: [f64; 2], b: [f64; 2]) -> MlpParams {
    let arch = Architecture {
        hidden_layers: 0,
        output_activation: Activation::Identity,
        ..Architecture::default()
    };
    let mut p = MlpParams::zeros(&arch);
    for j in 0..2 {
        p.layers[0].weights[[j, EMG_CHANNELS]] = b[j];
        p.layers[0].bias[j] = a[j];
    }
    p
}

#[test]
fn residual_vanishes_when_torque_matches_dynamics() {
    let model = arm().with_load(2.0);
    let norm = norm();
    let ctx = PhysicsContext::new(&arm(), 2.0, &norm, JetMode::Exact);
    let (a, b, duration) = ([0.3, 0.2], [0.4, 0.5], 1.6);
    let params = linear_in_time(a, b);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut batch = batch(&mut rng, 20, duration);
    for i in 0..batch.len() {
        let t = batch.inputs[[EMG_CHANNELS, i]];
        let mut state = JointState::default();
        for j in 0..2 {
            state.q[j] = norm.angle_offset[j] + norm.angle_scale[j] * (a[j] + b[j] * t);
            state.qd[j] = norm.angle_scale[j] * b[j] / duration;
        }
        let tau = model.inverse_dynamics(&state).tau;
        batch.tau[[0, i]] = tau[0];
        batch.tau[[1, i]] = tau[1];
    }
    let r = physics_residual(&params, &batch, &ctx);
    assert!(r.iter().all(|v| v.abs() < 1e-12), "{r:?}");

    // Offsetting the reference torque shows up scaled by the characteristic torque.
    batch.tau.row_mut(1).mapv_inplace(|v| v - 0.5);
    let r = physics_residual(&params, &batch, &ctx);
    let expected = 0.5 / model.characteristic_torque();
    assert!(r.row(1).iter().all(|v| (v - expected).abs() < 1e-12));
}

#[test]
fn exact_jet_matches_time_differences() {
    let arch = Architecture::small(3, 12, 2);
    let params = MlpParams::init(&arch, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = batch(&mut rng, 15, 1.0).inputs;
    let tape = Tape::new();
    let vars = ParamVars::register(&tape, &params);
    let jet = time_jet(&vars, &x, EMG_CHANNELS, JetMode::Exact);
    let (qd, qdd) = (jet.qd.value(), jet.qdd.value());
    let h = 1e-3;
    let shifted = |dt: f64| {
        let mut xs = x.clone();
        xs.row_mut(EMG_CHANNELS).mapv_inplace(|t| t + dt);
        params.forward_batch(&xs).unwrap()
    };
    let (p2, p1, m1, m2) = (shifted(2.0 * h), shifted(h), shifted(-h), shifted(-2.0 * h));
    let y0 = params.forward_batch(&x).unwrap();
    for idx in ndarray::indices_of(&qd) {
        let d1 = (8.0 * (p1[idx] - m1[idx]) - (p2[idx] - m2[idx])) / (12.0 * h);
        let d2 = (-p2[idx] + 16.0 * p1[idx] - 30.0 * y0[idx] + 16.0 * m1[idx] - m2[idx]) / (12.0 * h * h);
        assert!((qd[idx] - d1).abs() < 1e-8 * (1.0 + d1.abs()), "{idx:?}: {} vs {d1}", qd[idx]);
        assert!((qdd[idx] - d2).abs() < 1e-5 * (1.0 + d2.abs()), "{idx:?}: {} vs {d2}", qdd[idx]);
    }
}

#[test]
fn stencil_jet_approaches_exact() {
    let arch = Architecture::small(2, 10, 2);
    let params = MlpParams::init(&arch, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let b = batch(&mut rng, 10, 1.3);
    let exact = PhysicsContext::new(&arm(), 0.0, &norm(), JetMode::Exact);
    let stencil = PhysicsContext::new(&arm(), 0.0, &norm(), JetMode::Stencil { h: 1e-4 });
    let (re, rs) = (physics_residual(&params, &b, &exact), physics_residual(&params, &b, &stencil));
    for (e, s) in re.iter().zip(&rs) {
        assert!((e - s).abs() < 1e-4 * (1.0 + e.abs()), "{e} vs {s}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn total_is_weighted_sum(seed in 0u64..1000, alpha in 0.0f64..50.0) {
        let params = MlpParams::init(&Architecture::small(2, 8, 2), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = batch(&mut rng, 12, 1.0);
        let ctx = PhysicsContext::new(&arm(), 4.0, &norm(), JetMode::Exact);
        let parts = total_loss(&params, &b, &ctx, alpha).unwrap();
        prop_assert_eq!(parts.total, parts.l_q + alpha * parts.l_tau);
        prop_assert!((parts.l_q - data_loss(&params, &b).unwrap()).abs() < 1e-12);
        prop_assert!((parts.l_tau - physics_loss(&params, &b, &ctx).unwrap()).abs() < 1e-12 * (1.0 + parts.l_tau));
    }

    #[test]
    fn auto_alpha_balances_initial_terms(seed in 0u64..1000) {
        let params = MlpParams::init(&Architecture::small(2, 8, 2), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xff);
        let b = batch(&mut rng, 16, 1.0);
        let ctx = PhysicsContext::new(&arm(), 2.0, &norm(), JetMode::Exact);
        let first = total_loss(&params, &b, &ctx, 1.0).unwrap();
        let alpha = first.l_q / first.l_tau;
        let balanced = total_loss(&params, &b, &ctx, alpha).unwrap();
        prop_assert!((alpha * balanced.l_tau - balanced.l_q).abs() < 1e-9 * balanced.l_q);
    }
}
