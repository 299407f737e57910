//! Finite-difference verification of the reverse-mode gradients, per
//! primitive and for the full training loss.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{finite_difference_gradient, max_relative_error, JetMode, Primitive, Tape, Var};
use crate::data::{mix_seed, EMG_CHANNELS};
use crate::dynamics::LimbModel;
use crate::network::{Architecture, MlpParams, NormSpec};
use crate::training::{loss_and_grad, objective, Batch, PhysicsContext, TrainMode};

pub const TOLERANCE: f64 = 1e-4;
/// Step of the fourth-order central difference on parameters.
pub const FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub draws: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: String, draws: usize, max_rel_error: f64) -> Self {
        Self {
            name,
            draws,
            passed: max_rel_error < TOLERANCE,
            max_rel_error,
        }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(lo..hi))
}

/// Leaf shapes and the graph under test for one primitive. The checked
/// function is the sum of all entries of the returned node, so the backward
/// seed of ones is exactly its gradient and no other primitive is involved.
fn primitive_graph(p: Primitive) -> (Vec<(usize, usize)>, for<'t> fn(&[Var<'t>]) -> Var<'t>) {
    match p {
        Primitive::Affine => (vec![(3, 4), (4, 5), (3, 1)], |v| v[0].matmul(v[1]).add_bias(v[2])),
        Primitive::Tanh => (vec![(3, 4)], |v| v[0].tanh()),
        Primitive::Sigmoid => (vec![(3, 4)], |v| v[0].sigmoid()),
        Primitive::Square => (vec![(3, 4)], |v| v[0].square()),
        Primitive::Sum => (vec![(3, 4)], |v| v[0].sum()),
        Primitive::Mul => (vec![(3, 4), (3, 4)], |v| v[0] * v[1]),
        Primitive::Sin => (vec![(3, 4)], |v| crate::dynamics::Scalar::sin(v[0])),
        Primitive::Cos => (vec![(3, 4)], |v| crate::dynamics::Scalar::cos(v[0])),
    }
}

fn split_leaves(flat: &[f64], shapes: &[(usize, usize)]) -> Vec<Array2<f64>> {
    let mut at = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let m = Array2::from_shape_vec((r, c), flat[at..at + r * c].to_vec()).expect("shape");
            at += r * c;
            m
        })
        .collect()
}

/// Checks one primitive's backward rule on `draws` random inputs.
pub fn check_primitive(p: Primitive, draws: usize, seed: u64, fault: Option<Primitive>) -> CheckResult {
    let (shapes, build) = primitive_graph(p);
    let n: usize = shapes.iter().map(|(r, c)| r * c).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[p as u64]));
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let tape = match fault {
            Some(f) => Tape::with_fault(f),
            None => Tape::new(),
        };
        let leaves: Vec<Var> = split_leaves(&x, &shapes).into_iter().map(|m| tape.var(m)).collect();
        let root = build(&leaves);
        let adj = tape.backward(root);
        let analytic: Vec<f64> = leaves
            .iter()
            .flat_map(|l| adj.get(*l).map(|g| g.iter().copied().collect::<Vec<_>>()).unwrap_or_else(|| vec![0.0; l.shape().0 * l.shape().1]))
            .collect();
        let f = |probe: &[f64]| {
            let t = Tape::new();
            let leaves: Vec<Var> = split_leaves(probe, &shapes).into_iter().map(|m| t.var(m)).collect();
            build(&leaves).value().sum()
        };
        let numeric = finite_difference_gradient(f, &x, 1e-6);
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    CheckResult::new(p.name().to_string(), draws, worst)
}

/// Random batch with plausible magnitudes for loss checks.
pub fn random_batch(rng: &mut ChaCha8Rng, size: usize) -> Batch {
    let mut inputs = random_matrix(rng, EMG_CHANNELS + 1, size, 0.0, 1.0);
    inputs.row_mut(EMG_CHANNELS).mapv_inplace(|t| t.clamp(0.05, 0.95));
    let inv_t = random_matrix(rng, 1, size, 0.5, 2.0);
    Batch {
        targets: random_matrix(rng, 2, size, 0.1, 0.9),
        tau: random_matrix(rng, 2, size, -5.0, 5.0),
        inv_t2: inv_t.mapv(|v| v * v),
        inv_t,
        inputs,
    }
}

pub fn check_norm() -> NormSpec {
    NormSpec {
        angle_offset: vec![-0.1, 0.2],
        angle_scale: vec![0.8, 2.0],
        emg_offset: vec![0.0; EMG_CHANNELS],
        emg_scale: vec![1.0; EMG_CHANNELS],
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossCheck<'a> {
    pub model: &'a LimbModel,
    pub arch: &'a Architecture,
    pub jet: JetMode,
    pub alpha: f64,
    pub draws: usize,
    pub batch: usize,
    /// Check this many random coordinates per draw; all when `None`.
    pub coords: Option<usize>,
}

/// Gradient of the full PINN objective (data plus physics through the time
/// jet) against central differences, on random parameters and batches.
pub fn check_total_loss(check: &LossCheck<'_>, seed: u64, fault: Option<Primitive>) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x4c4f_5353]));
    let norm = check_norm();
    let ctx = PhysicsContext::new(check.model, 1.0, &norm, check.jet);
    let mut worst: f64 = 0.0;
    for d in 0..check.draws {
        let params = MlpParams::init(check.arch, mix_seed(seed, &[d as u64]));
        let batch = random_batch(&mut rng, check.batch);
        let (_, g) = match loss_and_grad(&params, &batch, &ctx, TrainMode::Pinn, check.alpha, false, fault) {
            Ok(v) => v,
            Err(_) => return CheckResult::new(name_of(check), d + 1, f64::INFINITY),
        };
        let flat = params.to_flat();
        let idx: Vec<usize> = match check.coords {
            Some(k) => (0..k.min(flat.len())).map(|_| rng.gen_range(0..flat.len())).collect(),
            None => (0..flat.len()).collect(),
        };
        let mut probe = params.clone();
        let mut eval = |x: &[f64]| {
            probe.assign_flat(x);
            objective(&probe, &batch, &ctx, TrainMode::Pinn, check.alpha).unwrap_or(f64::NAN)
        };
        let mut x = flat.clone();
        for &i in &idx {
            let orig = x[i];
            let mut at = |k: f64| {
                x[i] = orig + k * FD_STEP;
                eval(&x)
            };
            let numeric = (8.0 * (at(1.0) - at(-1.0)) - (at(2.0) - at(-2.0))) / (12.0 * FD_STEP);
            x[i] = orig;
            let err = max_relative_error(&[g.0[i]], &[numeric]);
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        }
    }
    CheckResult::new(name_of(check), check.draws, worst)
}

fn name_of(check: &LossCheck<'_>) -> String {
    let dims: Vec<String> = check.arch.layer_dims().iter().map(|(_, o)| o.to_string()).collect();
    format!(
        "total_loss[{}-{} {}, alpha={}]",
        check.arch.input_dim,
        dims.join("-"),
        check.jet.describe(),
        check.alpha
    )
}

/// Every primitive check followed by the full-loss checks for `model`.
pub fn run_all(model: &LimbModel, draws: usize, seed: u64, fault: Option<Primitive>) -> Vec<CheckResult> {
    let mut out: Vec<CheckResult> = Primitive::ALL
        .iter()
        .map(|p| check_primitive(*p, draws.clamp(1, 20), seed, fault))
        .collect();
    let small = Architecture::small(2, 8, 2);
    // Smaller stencil steps amplify roundoff beyond what differences can resolve.
    for jet in [JetMode::Exact, JetMode::Stencil { h: 1e-2 }] {
        out.push(check_total_loss(
            &LossCheck {
                model,
                arch: &small,
                jet,
                alpha: 1.0,
                draws,
                batch: 8,
                coords: None,
            },
            seed,
            fault,
        ));
    }
    let full = Architecture::default();
    out.push(check_total_loss(
        &LossCheck {
            model,
            arch: &full,
            jet: JetMode::Exact,
            alpha: 1.0,
            draws: 2,
            batch: 6,
            coords: Some(40),
        },
        seed,
        fault,
    ));
    out
}
