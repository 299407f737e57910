//! Feed-forward network mapping (EMG channels, normalized time) to
//! normalized joint angles.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, tanh};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("invalid normalization: {0}")]
    InvalidNorm(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => tanh(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// EMG channels plus one time input.
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 5,
            hidden_layers: 4,
            hidden_width: 75,
            output_dim: 2,
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Sigmoid,
        }
    }
}

impl Architecture {
    /// A reduced tanh/sigmoid network, mostly for tests and gradient checks.
    pub fn small(hidden_layers: usize, hidden_width: usize, output_dim: usize) -> Self {
        Self {
            hidden_layers,
            hidden_width,
            output_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(NetworkError::InvalidArchitecture(
                "input and output dimensions must be >= 1".into(),
            ));
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return Err(NetworkError::InvalidArchitecture(
                "hidden width must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// `(n_in, n_out)` of each affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut n_in = self.input_dim;
        for _ in 0..self.hidden_layers {
            dims.push((n_in, self.hidden_width));
            n_in = self.hidden_width;
        }
        dims.push((n_in, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Index of the time input within the input vector.
    pub fn time_index(&self) -> usize {
        self.input_dim - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `n_out × n_in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub arch: Architecture,
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Glorot-uniform weights and zero biases, fully determined by `seed`.
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(n_in, n_out)| {
                let limit = glorot_limit(n_in, n_out);
                Layer {
                    weights: Array2::from_shape_fn((n_out, n_in), |_| rng.gen_range(-limit..limit)),
                    bias: Array1::zeros(n_out),
                }
            })
            .collect();
        Self { arch: *arch, layers }
    }

    pub fn zeros(arch: &Architecture) -> Self {
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(n_in, n_out)| Layer {
                weights: Array2::zeros((n_out, n_in)),
                bias: Array1::zeros(n_out),
            })
            .collect();
        Self { arch: *arch, layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn activations(&self) -> Vec<Activation> {
        let n = self.layers.len();
        (0..n)
            .map(|i| {
                if i + 1 == n {
                    self.arch.output_activation
                } else {
                    self.arch.hidden_activation
                }
            })
            .collect()
    }

    /// Layer-major, weights before biases, row-major within a matrix.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend(layer.weights.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        out
    }

    pub fn from_flat(arch: &Architecture, flat: &[f64]) -> Result<Self, NetworkError> {
        let expected = arch.param_count();
        if flat.len() != expected {
            return Err(NetworkError::ShapeMismatch {
                expected,
                got: flat.len(),
            });
        }
        let mut params = Self::zeros(arch);
        params.assign_flat(flat);
        Ok(params)
    }

    /// Overwrites all parameters from a canonical flat vector of matching length.
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut it = flat.iter().copied();
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut() {
                *w = it.next().unwrap();
            }
            for b in layer.bias.iter_mut() {
                *b = it.next().unwrap();
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Network output for one input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NetworkError> {
        if x.len() != self.arch.input_dim {
            return Err(NetworkError::ShapeMismatch {
                expected: self.arch.input_dim,
                got: x.len(),
            });
        }
        let mut a = Array1::from(x.to_vec());
        for (layer, act) in self.layers.iter().zip(self.activations()) {
            let z = layer.weights.dot(&a) + &layer.bias;
            a = z.mapv(|v| act.apply(v));
        }
        Ok(a.to_vec())
    }

    /// Network output for a batch laid out as `input_dim × batch`.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>, NetworkError> {
        if x.nrows() != self.arch.input_dim {
            return Err(NetworkError::ShapeMismatch {
                expected: self.arch.input_dim,
                got: x.nrows(),
            });
        }
        let mut a = x.clone();
        for (layer, act) in self.layers.iter().zip(self.activations()) {
            let mut z = layer.weights.dot(&a);
            z += &layer.bias.view().insert_axis(ndarray::Axis(1));
            z.mapv_inplace(|v| act.apply(v));
            a = z;
        }
        Ok(a)
    }
}

pub fn glorot_limit(n_in: usize, n_out: usize) -> f64 {
    (6.0 / (n_in + n_out) as f64).sqrt()
}

/// Affine map between physical joint angles (rad) and the network's (0, 1)
/// output range: `normalized = (angle - offset) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormSpec {
    pub angle_offset: Vec<f64>,
    pub angle_scale: Vec<f64>,
    /// Per EMG channel; inputs are already MVC-normalized, so these are
    /// normally 0 and 1.
    pub emg_offset: Vec<f64>,
    pub emg_scale: Vec<f64>,
}

impl NormSpec {
    pub fn identity(joints: usize, channels: usize) -> Self {
        Self {
            angle_offset: vec![0.0; joints],
            angle_scale: vec![1.0; joints],
            emg_offset: vec![0.0; channels],
            emg_scale: vec![1.0; channels],
        }
    }

    /// Builds the angle map from the per-joint range of `angles`, widened by
    /// `margin` (fraction of the range) on each side.
    pub fn from_angle_range(
        angles: &[[f64; 2]],
        channels: usize,
        margin: f64,
    ) -> Result<Self, NetworkError> {
        if angles.is_empty() {
            return Err(NetworkError::InvalidNorm("no angles to scan".into()));
        }
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for q in angles {
            for j in 0..2 {
                lo[j] = lo[j].min(q[j]);
                hi[j] = hi[j].max(q[j]);
            }
        }
        let mut spec = Self::identity(2, channels);
        for j in 0..2 {
            let range = hi[j] - lo[j];
            if !(range > 0.0 && range.is_finite()) {
                return Err(NetworkError::InvalidNorm(format!(
                    "joint {j} has degenerate range [{}, {}]",
                    lo[j], hi[j]
                )));
            }
            spec.angle_offset[j] = lo[j] - margin * range;
            spec.angle_scale[j] = range * (1.0 + 2.0 * margin);
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let ok = self.angle_offset.len() == self.angle_scale.len()
            && self.emg_offset.len() == self.emg_scale.len()
            && self
                .angle_scale
                .iter()
                .chain(&self.emg_scale)
                .all(|s| *s > 0.0 && s.is_finite())
            && self
                .angle_offset
                .iter()
                .chain(&self.emg_offset)
                .all(|o| o.is_finite());
        if ok {
            Ok(())
        } else {
            Err(NetworkError::InvalidNorm(format!("{self:?}")))
        }
    }

    pub fn normalize_angle(&self, joint: usize, angle: f64) -> f64 {
        (angle - self.angle_offset[joint]) / self.angle_scale[joint]
    }

    pub fn denormalize_angle(&self, joint: usize, y: f64) -> f64 {
        self.angle_offset[joint] + self.angle_scale[joint] * y
    }

    pub fn normalize(&self, q: &[f64]) -> Vec<f64> {
        q.iter()
            .enumerate()
            .map(|(j, v)| self.normalize_angle(j, *v))
            .collect()
    }

    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(j, v)| self.denormalize_angle(j, *v))
            .collect()
    }

    pub fn normalize_emg(&self, channel: usize, value: f64) -> f64 {
        (value - self.emg_offset[channel]) / self.emg_scale[channel]
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained network plus everything needed to reuse it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub architecture: Architecture,
    /// Canonical flat order: layer by layer, weights (row-major) then bias.
    pub params: Vec<f64>,
    pub norm: NormSpec,
    pub config_hash: String,
    /// Free-form label such as the training mode.
    pub tag: String,
}

impl Checkpoint {
    pub fn new(params: &MlpParams, norm: &NormSpec, config_hash: &str, tag: &str) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            architecture: params.arch.clone(),
            params: params.to_flat(),
            norm: norm.clone(),
            config_hash: config_hash.to_string(),
            tag: tag.to_string(),
        }
    }

    pub fn mlp(&self) -> Result<MlpParams, NetworkError> {
        MlpParams::from_flat(&self.architecture, &self.params)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        let ck: Self = serde_json::from_str(text).map_err(|e| NetworkError::Checkpoint(e.to_string()))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(NetworkError::Checkpoint(format!(
                "format version {} unsupported (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        ck.architecture.validate()?;
        ck.norm.validate()?;
        let params = ck.mlp()?;
        if !params.is_finite() {
            return Err(NetworkError::Checkpoint("non-finite parameter".into()));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn checkpoint_round_trip() {
        let arch = Architecture::small(2, 4, 2);
        let params = MlpParams::init(&arch, 9);
        let norm = NormSpec::from_angle_range(&[[0.0, 0.1], [0.5, 2.0]], 4, 0.05).unwrap();
        let ck = Checkpoint::new(&params, &norm, "abc", "pinn");
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.mlp().unwrap().to_flat(), params.to_flat());

        let mut bad = ck.clone();
        bad.params.pop();
        assert!(Checkpoint::from_json(&bad.to_json()).is_err());
        let mut bad = ck;
        bad.format_version = 99;
        assert!(Checkpoint::from_json(&bad.to_json()).is_err());
    }

    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_parameter_count() {
        let arch = Architecture::default();
        assert_eq!(arch.param_count(), 5 * 75 + 75 + 3 * (75 * 75 + 75) + 75 * 2 + 2);
        assert_eq!(arch.param_count(), 17_702);
        assert_eq!(MlpParams::init(&arch, 0).param_count(), 17_702);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let arch = Architecture::default();
        let a = MlpParams::init(&arch, 42);
        let b = MlpParams::init(&arch, 42);
        let c = MlpParams::init(&arch, 43);
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (layer, (n_in, n_out)) in a.layers.iter().zip(arch.layer_dims()) {
            let limit = glorot_limit(n_in, n_out);
            assert!(layer.weights.iter().all(|w| w.abs() <= limit));
            assert!(layer.bias.iter().all(|b| *b == 0.0));
        }
    }

    #[test]
    fn zero_params_give_half() {
        let p = MlpParams::zeros(&Architecture::default());
        assert_eq!(p.forward(&[0.3, 0.1, 0.9, 0.0, 0.5]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn single_neuron_hand_calculation() {
        let arch = Architecture {
            input_dim: 1,
            hidden_layers: 1,
            hidden_width: 1,
            output_dim: 1,
            ..Architecture::default()
        };
        // w1, b1, w2, b2
        let p = MlpParams::from_flat(&arch, &[0.7, -0.2, 1.5, 0.3]).unwrap();
        let x = 0.9f64;
        let expect = 1.0 / (1.0 + (-(1.5 * (0.7 * x - 0.2).tanh() + 0.3)).exp());
        let got = p.forward(&[x]).unwrap()[0];
        assert!((got - expect).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = MlpParams::zeros(&Architecture::default());
        assert_eq!(
            p.forward(&[0.0; 4]),
            Err(NetworkError::ShapeMismatch {
                expected: 5,
                got: 4
            })
        );
        assert!(MlpParams::from_flat(&Architecture::default(), &[0.0; 3]).is_err());
    }

    #[test]
    fn batch_matches_single() {
        let p = MlpParams::init(&Architecture::small(2, 8, 2), 3);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 * 0.3 - j as f64 * 0.2).sin());
        let y = p.forward_batch(&x).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = x.column(j).to_vec();
            let single = p.forward(&col).unwrap();
            for k in 0..2 {
                assert!((y[[k, j]] - single[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn denormalize_affine() {
        let spec = NormSpec {
            angle_offset: vec![0.0],
            angle_scale: vec![2.0],
            emg_offset: vec![],
            emg_scale: vec![],
        };
        assert_eq!(spec.denormalize(&[0.5]), vec![1.0]);
    }

    #[test]
    fn range_spec_maps_into_unit_interval() {
        let angles: Vec<[f64; 2]> = (0..200)
            .map(|i| {
                let t = i as f64 / 199.0;
                [0.1 + 0.2 * (3.0 * t).sin(), 0.3 + 1.6 * (std::f64::consts::PI * t).sin()]
            })
            .collect();
        for margin in [0.0, 0.05] {
            let spec = NormSpec::from_angle_range(&angles, 4, margin).unwrap();
            for q in &angles {
                for (j, v) in q.iter().enumerate() {
                    let y = spec.normalize_angle(j, *v);
                    assert!((-1e-12..=1.0 + 1e-12).contains(&y));
                }
            }
        }
        assert!(NormSpec::from_angle_range(&[[1.0, 1.0]; 3], 4, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn normalize_roundtrip(q0 in -3.0f64..3.0, q1 in -3.0f64..3.0, off in -1.0f64..1.0, sc in 0.1f64..5.0) {
            let spec = NormSpec {
                angle_offset: vec![off, -off],
                angle_scale: vec![sc, 2.0 * sc],
                emg_offset: vec![0.0; 4],
                emg_scale: vec![1.0; 4],
            };
            let back = spec.denormalize(&spec.normalize(&[q0, q1]));
            prop_assert!((back[0] - q0).abs() < 1e-12 && (back[1] - q1).abs() < 1e-12);
        }

        #[test]
        fn outputs_strictly_inside_unit_interval(seed in 0u64..10_000, x in proptest::collection::vec(-3.0f64..3.0, 5)) {
            let p = MlpParams::init(&Architecture::small(2, 6, 2), seed);
            for y in p.forward(&x).unwrap() {
                prop_assert!(y > 0.0 && y < 1.0);
            }
        }

        #[test]
        fn flat_roundtrip(seed in 0u64..1000) {
            let arch = Architecture::small(2, 5, 2);
            let p = MlpParams::init(&arch, seed);
            prop_assert_eq!(MlpParams::from_flat(&arch, &p.to_flat()).unwrap(), p);
        }
    }
}
