//! Losses, optimizer and the sequential-load training loop.
//!
//! Network inputs are `[emg_0 .. emg_3, t_norm]` with `t_norm ∈ [0, 1]`
//! across each trial; outputs are normalized joint angles. The physics
//! residual maps the output jet back to radians (and seconds, through the
//! trial duration) before applying the inverse dynamics, and divides it by
//! the loaded model's characteristic torque.

use std::cell::Cell;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::autodiff::{self, time_jet, AutodiffError, Gradient, JetMode, ParamVars, Primitive, Tape, Var};
use crate::data::{mix_seed, DataError, RunSet, Trial, EMG_CHANNELS};
use crate::dynamics::LimbModel;
use crate::network::{Architecture, MlpParams, NetworkError, NormSpec};

/// Evaluation chunk for value-only passes over whole sample sets.
const EVAL_CHUNK: usize = 100;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch} (load {load_kg} kg): {detail}")]
    NonFiniteLoss {
        epoch: usize,
        load_kg: f64,
        detail: String,
    },
    #[error("no training trials for load {0} kg")]
    MissingLoad(f64),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {params} parameters, {grad} gradient entries, {state} optimizer slots")]
    ShapeMismatch { params: usize, grad: usize, state: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Data loss plus weighted physics loss.
    Pinn,
    /// Data loss only.
    Ann,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Pinn => "pinn",
            TrainMode::Ann => "ann",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pinn" => Some(TrainMode::Pinn),
            "ann" => Some(TrainMode::Ann),
            _ => None,
        }
    }
}

/// Physics-loss weight: a fixed value, or `auto` (the ratio of data loss to
/// physics loss on the first batch of each load block).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum AlphaSetting {
    #[default]
    Auto,
    Fixed(f64),
}

impl Serialize for AlphaSetting {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            AlphaSetting::Auto => s.serialize_str("auto"),
            AlphaSetting::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for AlphaSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(AlphaSetting::Fixed(v)),
            Raw::Str(s) if s == "auto" => Ok(AlphaSetting::Auto),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "alpha must be a number or \"auto\", got \"{s}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub batch_size: usize,
    pub epochs_per_load: usize,
    pub lr0: f64,
    /// Learning rate is multiplied by `lr_decay` every `lr_decay_every`
    /// epochs, counted from the start of each load block.
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    pub alpha: AlphaSetting,
    pub adam: AdamConfig,
    pub jet: JetMode,
    /// Loads trained in sequence, kg.
    pub load_order: Vec<f64>,
    pub seed: u64,
    /// Fraction of the heaviest-load angle range added on each side when
    /// fitting the output normalization.
    pub norm_margin: f64,
    /// Reset Adam moments at the start of each load block.
    pub reset_optimizer_per_load: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::default(),
            batch_size: 75,
            epochs_per_load: 1000,
            lr0: 1e-3,
            lr_decay_every: 300,
            lr_decay: 0.8,
            alpha: AlphaSetting::Auto,
            adam: AdamConfig::default(),
            jet: JetMode::Exact,
            load_order: vec![0.0, 2.0, 4.0],
            seed: 0,
            norm_margin: 0.05,
            reset_optimizer_per_load: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.arch.validate()?;
        if self.arch.input_dim != EMG_CHANNELS + 1 || self.arch.output_dim != 2 {
            return bad(format!(
                "architecture must map {} inputs to 2 outputs, got {} -> {}",
                EMG_CHANNELS + 1,
                self.arch.input_dim,
                self.arch.output_dim
            ));
        }
        if self.batch_size == 0 || self.lr_decay_every == 0 {
            return bad("batch_size and lr_decay_every must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr0 {} / lr_decay {} out of range", self.lr0, self.lr_decay));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad(format!("invalid Adam settings {a:?}"));
        }
        if let AlphaSetting::Fixed(v) = self.alpha {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("alpha must be >= 0, got {v}"));
            }
        }
        if let JetMode::Stencil { h } = self.jet {
            if !(h > 0.0 && h < 0.5) {
                return bad(format!("stencil step {h} outside (0, 0.5)"));
            }
        }
        if self.load_order.is_empty() || self.load_order.iter().any(|l| !(*l >= 0.0)) {
            return bad(format!("load_order must be nonempty and >= 0: {:?}", self.load_order));
        }
        if !(0.0..1.0).contains(&self.norm_margin) {
            return bad(format!("norm_margin {} outside [0, 1)", self.norm_margin));
        }
        Ok(())
    }
}

/// `lr0 · decay^⌊epoch / every⌋`.
pub fn lr_at(cfg: &TrainConfig, epoch_in_block: usize) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch_in_block / cfg.lr_decay_every) as i32)
}

/// Samples of one load condition, column-major by sample.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub load_kg: f64,
    /// `input_dim × n`.
    pub inputs: Array2<f64>,
    /// Normalized angles, `2 × n`.
    pub targets: Array2<f64>,
    /// Benchmark torques, N·m, `2 × n`. Zero when the trials carry none.
    pub tau: Array2<f64>,
    /// Reciprocal trial duration per sample, 1/s.
    pub inv_duration: Array1<f64>,
}

impl SampleSet {
    pub fn from_trials<'a>(
        trials: impl IntoIterator<Item = &'a Trial>,
        norm: &NormSpec,
        require_torque: bool,
    ) -> Result<Self, TrainError> {
        let trials: Vec<&Trial> = trials.into_iter().collect();
        let load_kg = trials.first().map(|t| t.load_kg).unwrap_or(0.0);
        let n: usize = trials.iter().map(|t| t.len()).sum();
        let mut inputs = Array2::zeros((EMG_CHANNELS + 1, n));
        let mut targets = Array2::zeros((2, n));
        let mut tau = Array2::zeros((2, n));
        let mut inv_duration = Array1::zeros(n);
        let mut col = 0;
        for trial in trials {
            trial.validate()?;
            let torques = match trial.torques() {
                Ok(t) => Some(t),
                Err(e) if require_torque => return Err(e.into()),
                Err(_) => None,
            };
            let inv_t = 1.0 / trial.duration();
            for i in 0..trial.len() {
                for c in 0..EMG_CHANNELS {
                    inputs[[c, col]] = norm.normalize_emg(c, trial.emg[i][c]);
                }
                inputs[[EMG_CHANNELS, col]] = trial.normalized_time(i);
                for j in 0..2 {
                    targets[[j, col]] = norm.normalize_angle(j, trial.q[i][j]);
                    if let Some(t) = torques {
                        tau[[j, col]] = t[i][j];
                    }
                }
                inv_duration[col] = inv_t;
                col += 1;
            }
        }
        Ok(Self {
            load_kg,
            inputs,
            targets,
            tau,
            inv_duration,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        let inv_t = self.inv_duration.select(Axis(0), idx).insert_axis(Axis(0));
        Batch {
            inputs: self.inputs.select(Axis(1), idx),
            targets: self.targets.select(Axis(1), idx),
            tau: self.tau.select(Axis(1), idx),
            inv_t2: inv_t.mapv(|v| v * v),
            inv_t,
        }
    }

    pub fn all(&self) -> Batch {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Consecutive chunks covering every sample.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Batch> + '_ {
        (0..self.len())
            .step_by(size)
            .map(move |s| self.batch(&(s..(s + size).min(self.len())).collect::<Vec<_>>()))
    }
}

/// Mini-batch of samples, one per column.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    pub tau: Array2<f64>,
    pub inv_t: Array2<f64>,
    pub inv_t2: Array2<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything the physics residual needs besides the network.
#[derive(Debug, Clone)]
pub struct PhysicsContext {
    /// Model with the block's hand load applied.
    pub model: LimbModel,
    pub norm: NormSpec,
    /// Residuals are divided by this torque, N·m.
    pub torque_scale: f64,
    pub jet: JetMode,
}

impl PhysicsContext {
    pub fn new(base: &LimbModel, load_kg: f64, norm: &NormSpec, jet: JetMode) -> Self {
        let model = base.with_load(load_kg);
        Self {
            torque_scale: model.characteristic_torque(),
            model,
            norm: norm.clone(),
            jet,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_q: f64,
    pub l_tau: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_q: f64, l_tau: f64, alpha: f64) -> Self {
        Self {
            l_q,
            l_tau,
            alpha,
            total: l_q + alpha * l_tau,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_q.is_finite() && self.l_tau.is_finite() && self.total.is_finite()
    }
}

/// Mean over samples of the squared angle error summed over joints.
fn data_loss_graph<'t>(y: Var<'t>, batch: &Batch) -> Var<'t> {
    let target = y.tape().constant(batch.targets.clone());
    (y - target).square().sum().scale(1.0 / batch.len() as f64)
}

/// Normalized equation-of-motion residual, `2 × batch`.
fn residual_graph<'t>(jet: &autodiff::Jet<'t>, batch: &Batch, ctx: &PhysicsContext) -> [Var<'t>; 2] {
    let tape = jet.q.tape();
    let inv_t = tape.constant(batch.inv_t.clone());
    let inv_t2 = tape.constant(batch.inv_t2.clone());
    let mut q = [jet.q; 2];
    let mut qd = [jet.q; 2];
    let mut qdd = [jet.q; 2];
    for j in 0..2 {
        let (off, sc) = (ctx.norm.angle_offset[j], ctx.norm.angle_scale[j]);
        q[j] = jet.q.row(j).scale(sc).offset(off);
        qd[j] = jet.qd.row(j).scale(sc) * inv_t;
        qdd[j] = jet.qdd.row(j).scale(sc) * inv_t2;
    }
    let tau_hat = ctx.model.inverse_dynamics_terms(q, qd, qdd);
    let k = 1.0 / ctx.torque_scale;
    [0, 1].map(|j| {
        let reference = tape.constant(batch.tau.row(j).to_owned().insert_axis(Axis(0)));
        (tau_hat[j] - reference).scale(k)
    })
}

fn physics_loss_graph<'t>(jet: &autodiff::Jet<'t>, batch: &Batch, ctx: &PhysicsContext) -> Var<'t> {
    let [f0, f1] = residual_graph(jet, batch, ctx);
    (f0.square().sum() + f1.square().sum()).scale(1.0 / batch.len() as f64)
}

/// Data and physics losses recorded on `tape`.
fn loss_terms<'t>(
    vars: &ParamVars<'t>,
    batch: &Batch,
    ctx: &PhysicsContext,
) -> (Var<'t>, Var<'t>) {
    let time_row = EMG_CHANNELS;
    let jet = time_jet(vars, &batch.inputs, time_row, ctx.jet);
    (data_loss_graph(jet.q, batch), physics_loss_graph(&jet, batch, ctx))
}

/// Data loss in normalized units, evaluated without a tape.
pub fn data_loss(params: &MlpParams, batch: &Batch) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let y = params.forward_batch(&batch.inputs)?;
    Ok((&y - &batch.targets).mapv(|d| d * d).sum() / batch.len() as f64)
}

/// Physics loss (mean squared normalized residual, summed over joints).
pub fn physics_loss(params: &MlpParams, batch: &Batch, ctx: &PhysicsContext) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let tape = Tape::new();
    let vars = ParamVars::register(&tape, params);
    let jet = time_jet(&vars, &batch.inputs, EMG_CHANNELS, ctx.jet);
    Ok(physics_loss_graph(&jet, batch, ctx).scalar())
}

/// Normalized residual per joint and sample, `2 × batch`.
pub fn physics_residual(params: &MlpParams, batch: &Batch, ctx: &PhysicsContext) -> Array2<f64> {
    let tape = Tape::new();
    let vars = ParamVars::register(&tape, params);
    let jet = time_jet(&vars, &batch.inputs, EMG_CHANNELS, ctx.jet);
    let [f0, f1] = residual_graph(&jet, batch, ctx);
    ndarray::concatenate![Axis(0), f0.value(), f1.value()]
}

/// Both loss terms and their weighted sum, value only.
pub fn total_loss(params: &MlpParams, batch: &Batch, ctx: &PhysicsContext, alpha: f64) -> Result<LossBreakdown, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let tape = Tape::new();
    let vars = ParamVars::register(&tape, params);
    let (lq, lt) = loss_terms(&vars, batch, ctx);
    Ok(LossBreakdown::new(lq.scalar(), lt.scalar(), alpha))
}

/// Loss the optimizer sees: `L_q + α·L_τ` for a PINN with `α > 0`, `L_q`
/// otherwise.
pub fn objective(params: &MlpParams, batch: &Batch, ctx: &PhysicsContext, mode: TrainMode, alpha: f64) -> Result<f64, TrainError> {
    if uses_physics(mode, alpha) {
        Ok(total_loss(params, batch, ctx, alpha)?.total)
    } else {
        data_loss(params, batch)
    }
}

fn uses_physics(mode: TrainMode, alpha: f64) -> bool {
    mode == TrainMode::Pinn && alpha != 0.0
}

/// Gradient of [`objective`] plus the loss breakdown. Without physics in the
/// objective, `L_τ` is reported only when `monitor_physics` is set (NaN
/// otherwise). `fault` perturbs one primitive's backward rule.
pub fn loss_and_grad(
    params: &MlpParams,
    batch: &Batch,
    ctx: &PhysicsContext,
    mode: TrainMode,
    alpha: f64,
    monitor_physics: bool,
    fault: Option<Primitive>,
) -> Result<(LossBreakdown, Gradient), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let tape = match fault {
        Some(p) => Tape::with_fault(p),
        None => Tape::new(),
    };
    if uses_physics(mode, alpha) {
        let parts = Cell::new((0.0, 0.0));
        let (_, g) = autodiff::grad_on(&tape, params, |_, vars| {
            let (lq, lt) = loss_terms(vars, batch, ctx);
            parts.set((lq.scalar(), lt.scalar()));
            lq + lt.scale(alpha)
        })?;
        let (lq, lt) = parts.get();
        Ok((LossBreakdown::new(lq, lt, alpha), g))
    } else {
        let (lq, g) = autodiff::grad_on(&tape, params, |tape, vars| {
            data_loss_graph(vars.forward(tape.constant(batch.inputs.clone())), batch)
        })?;
        let lt = if monitor_physics {
            physics_loss(params, batch, ctx)?
        } else {
            f64::NAN
        };
        let alpha = if mode == TrainMode::Ann { 0.0 } else { alpha };
        Ok((LossBreakdown { l_q: lq, l_tau: lt, alpha, total: lq }, g))
    }
}

/// Adam moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &AdamConfig) -> Result<(), TrainError> {
        if params.len() != grad.len() || params.len() != self.m.len() {
            return Err(TrainError::ShapeMismatch {
                params: params.len(),
                grad: grad.len(),
                state: self.m.len(),
            });
        }
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

/// Fits the output normalization to the training angles of the heaviest
/// load in `loads`.
pub fn fit_norm(train: &RunSet, loads: &[f64], margin: f64) -> Result<NormSpec, TrainError> {
    let heaviest = loads.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let angles: Vec<[f64; 2]> = train.trials_for(heaviest).flat_map(|t| t.q.iter().copied()).collect();
    if angles.is_empty() {
        return Err(TrainError::MissingLoad(heaviest));
    }
    Ok(NormSpec::from_angle_range(&angles, EMG_CHANNELS, margin)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    /// Global epoch index across load blocks.
    pub epoch: usize,
    pub load_kg: f64,
    pub epoch_in_load: usize,
    pub lr: f64,
    pub l_q: f64,
    pub l_tau: f64,
    pub alpha: f64,
    pub j_total: f64,
    pub val_j: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,load_kg,lr,L_q,L_tau,alpha,J,val_J";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.load_kg, self.lr, self.l_q, self.l_tau, self.alpha, self.j_total, self.val_j
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_params: MlpParams,
    /// Lowest validation loss seen during the final load block.
    pub best_params: MlpParams,
    pub best_val: f64,
    pub norm: NormSpec,
    pub log: Vec<EpochLog>,
    /// Physics weight used in each load block.
    pub alphas: Vec<(f64, f64)>,
}

/// Validation objective over a whole sample set.
pub fn evaluate_objective(
    params: &MlpParams,
    set: &SampleSet,
    ctx: &PhysicsContext,
    mode: TrainMode,
    alpha: f64,
) -> Result<f64, TrainError> {
    let mut acc = 0.0;
    for batch in set.chunks(EVAL_CHUNK) {
        acc += objective(params, &batch, ctx, mode, alpha)? * batch.len() as f64;
    }
    Ok(acc / set.len() as f64)
}

/// Options that do not change the optimization trajectory.
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    /// Compute `L_τ` for logging when it is not part of the objective.
    pub monitor_physics: bool,
    /// Skip the validation pass (logged as NaN); best params then track the
    /// final params.
    pub validate: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            monitor_physics: true,
            validate: true,
        }
    }
}

/// Trains one network through the load blocks in `cfg.load_order`,
/// carrying parameters from one block into the next. `on_epoch` sees each
/// log row as it is produced.
pub fn train(
    train_runs: &RunSet,
    val_runs: &RunSet,
    base_model: &LimbModel,
    cfg: &TrainConfig,
    mode: TrainMode,
    opts: TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    base_model.validate().map_err(DataError::from)?;
    let norm = fit_norm(train_runs, &cfg.load_order, cfg.norm_margin)?;
    let mut params = MlpParams::init(&cfg.arch, cfg.seed);
    let mut flat = params.to_flat();
    let mut opt = OptimizerState::new(flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[0x5348_5546]));

    let mut log = Vec::new();
    let mut alphas = Vec::new();
    let mut best = (f64::INFINITY, params.clone());
    let mut global_epoch = 0;

    for (block, &load) in cfg.load_order.iter().enumerate() {
        let train_set = SampleSet::from_trials(train_runs.trials_for(load), &norm, mode == TrainMode::Pinn)?;
        if train_set.is_empty() {
            return Err(TrainError::MissingLoad(load));
        }
        let val_set = if opts.validate {
            Some(SampleSet::from_trials(val_runs.trials_for(load), &norm, mode == TrainMode::Pinn)?)
                .filter(|s| !s.is_empty())
        } else {
            None
        };
        let ctx = PhysicsContext::new(base_model, load, &norm, cfg.jet);
        if cfg.reset_optimizer_per_load && block > 0 {
            opt = OptimizerState::new(flat.len());
        }
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut alpha = match (mode, cfg.alpha) {
            (TrainMode::Ann, _) => 0.0,
            (TrainMode::Pinn, AlphaSetting::Fixed(a)) => a,
            (TrainMode::Pinn, AlphaSetting::Auto) => f64::NAN,
        };
        best = (f64::INFINITY, params.clone());

        for epoch in 0..cfg.epochs_per_load {
            order.shuffle(&mut rng);
            let lr = lr_at(cfg, epoch);
            let (mut sum_q, mut sum_t) = (0.0, 0.0);
            for idx in order.chunks(cfg.batch_size) {
                let batch = train_set.batch(idx);
                if alpha.is_nan() {
                    let first = total_loss(&params, &batch, &ctx, 1.0)?;
                    alpha = if first.l_tau > 0.0 && first.is_finite() {
                        first.l_q / first.l_tau
                    } else {
                        log::warn!("auto alpha undefined on load {load} kg (L_tau = {}); using 1", first.l_tau);
                        1.0
                    };
                    log::info!("load {load} kg: alpha = {alpha:e}");
                }
                let (parts, g) = loss_and_grad(&params, &batch, &ctx, mode, alpha, opts.monitor_physics, None)
                    .map_err(|e| match e {
                        TrainError::Autodiff(err) => TrainError::NonFiniteLoss {
                            epoch: global_epoch,
                            load_kg: load,
                            detail: err.to_string(),
                        },
                        other => other,
                    })?;
                opt.update(&mut flat, g.as_slice(), lr, &cfg.adam)?;
                params.assign_flat(&flat);
                let w = batch.len() as f64;
                sum_q += parts.l_q * w;
                sum_t += parts.l_tau * w;
            }
            if !params.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: global_epoch,
                    load_kg: load,
                    detail: "parameters diverged".into(),
                });
            }
            let n = train_set.len() as f64;
            let (l_q, l_tau) = (sum_q / n, sum_t / n);
            let val_j = match &val_set {
                Some(v) => evaluate_objective(&params, v, &ctx, mode, alpha)?,
                None => f64::NAN,
            };
            let tracked = if val_j.is_nan() { -(global_epoch as f64) } else { val_j };
            if tracked <= best.0 {
                best = (tracked, params.clone());
            }
            let row = EpochLog {
                epoch: global_epoch,
                load_kg: load,
                epoch_in_load: epoch,
                lr,
                l_q,
                l_tau,
                alpha,
                j_total: if uses_physics(mode, alpha) { l_q + alpha * l_tau } else { l_q },
                val_j,
            };
            on_epoch(&row);
            log.push(row);
            global_epoch += 1;
        }
        alphas.push((load, if alpha.is_nan() { 0.0 } else { alpha }));
    }

    Ok(TrainOutcome {
        final_params: params,
        best_val: best.0,
        best_params: best.1,
        norm,
        log,
        alphas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_dataset, split, SplitSpec, SynthConfig, TrajectoryConfig};
    use crate::dynamics::SegmentParams;

    fn arm() -> LimbModel {
        LimbModel::new(
            SegmentParams {
                mass: 2.07,
                length: 0.30,
                com_ratio: 0.436,
                inertia_com: 0.0193,
            },
            SegmentParams {
                mass: 1.18,
                length: 0.27,
                com_ratio: 0.43,
                inertia_com: 0.0079,
            },
        )
    }

    fn tiny_data() -> RunSet {
        let cfg = SynthConfig {
            runs_per_load: 4,
            trials_per_run: 1,
            trajectory: TrajectoryConfig {
                duration: 0.4,
                ..TrajectoryConfig::default()
            },
            ..SynthConfig::default()
        };
        make_synthetic_dataset(&arm(), &cfg, &Default::default()).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            arch: Architecture::small(1, 6, 2),
            batch_size: 16,
            epochs_per_load: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_steps() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 0), 1e-3);
        assert_eq!(lr_at(&cfg, 299), 1e-3);
        assert!((lr_at(&cfg, 300) - 8e-4).abs() < 1e-18);
        assert!((lr_at(&cfg, 999) - 1e-3 * 0.8f64.powi(3)).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut opt = OptimizerState::new(3);
        let mut p = vec![1.0, 1.0, 1.0];
        opt.update(&mut p, &[2.0, -0.5, 0.0], 0.01, &AdamConfig::default()).unwrap();
        assert!(opt.update(&mut p, &[1.0], 0.01, &AdamConfig::default()).is_err());
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] - 1.01).abs() < 1e-9);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn alpha_setting_serde() {
        let a: AlphaSetting = serde_json::from_str("\"auto\"").unwrap();
        assert_eq!(a, AlphaSetting::Auto);
        let a: AlphaSetting = serde_json::from_str("0.25").unwrap();
        assert_eq!(a, AlphaSetting::Fixed(0.25));
        assert!(serde_json::from_str::<AlphaSetting>("\"sometimes\"").is_err());
        assert_eq!(serde_json::to_string(&AlphaSetting::Fixed(2.0)).unwrap(), "2.0");
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.alpha = AlphaSetting::Fixed(-1.0);
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let unknown = serde_json::from_str::<TrainConfig>(r#"{"batch": 3}"#);
        assert!(unknown.is_err());
    }

    #[test]
    fn total_is_weighted_sum() {
        let data = tiny_data();
        let norm = fit_norm(&data, &[4.0], 0.05).unwrap();
        let set = SampleSet::from_trials(data.trials_for(2.0), &norm, true).unwrap();
        let params = MlpParams::init(&Architecture::small(1, 5, 2), 3);
        let ctx = PhysicsContext::new(&arm(), 2.0, &norm, JetMode::Exact);
        let b = set.batch(&[0, 3, 7, 11]);
        let parts = total_loss(&params, &b, &ctx, 0.7).unwrap();
        assert_eq!(parts.total, parts.l_q + 0.7 * parts.l_tau);
        assert!((parts.l_q - data_loss(&params, &b).unwrap()).abs() < 1e-12);
        let r = physics_residual(&params, &b, &ctx);
        let manual = r.mapv(|v| v * v).sum() / 4.0;
        assert!((manual - parts.l_tau).abs() < 1e-12 * manual.max(1.0));

        let doubled = PhysicsContext {
            torque_scale: 2.0 * ctx.torque_scale,
            ..ctx.clone()
        };
        let quarter = physics_loss(&params, &b, &doubled).unwrap();
        assert!((4.0 * quarter - parts.l_tau).abs() < 1e-12 * parts.l_tau);
        assert!(matches!(data_loss(&params, &set.batch(&[])), Err(TrainError::EmptyBatch)));
    }

    #[test]
    fn zero_alpha_pinn_matches_ann() {
        let data = tiny_data();
        let sp = split(&data, &SplitSpec::default(), 1).unwrap();
        let cfg = TrainConfig {
            alpha: AlphaSetting::Fixed(0.0),
            ..tiny_cfg()
        };
        let a = train(&sp.train, &sp.val, &arm(), &cfg, TrainMode::Pinn, TrainOptions::default(), |_| {}).unwrap();
        let b = train(&sp.train, &sp.val, &arm(), &cfg, TrainMode::Ann, TrainOptions::default(), |_| {}).unwrap();
        assert_eq!(a.final_params.to_flat(), b.final_params.to_flat());
    }

    #[test]
    fn training_is_deterministic_and_logs_every_epoch() {
        let data = tiny_data();
        let sp = split(&data, &SplitSpec::default(), 1).unwrap();
        let cfg = tiny_cfg();
        let mut seen = 0;
        let a = train(&sp.train, &sp.val, &arm(), &cfg, TrainMode::Pinn, TrainOptions::default(), |_| seen += 1).unwrap();
        let b = train(&sp.train, &sp.val, &arm(), &cfg, TrainMode::Pinn, TrainOptions::default(), |_| {}).unwrap();
        assert_eq!(seen, 9);
        assert_eq!(a.log.len(), 9);
        assert_eq!(a.final_params.to_flat(), b.final_params.to_flat());
        for row in &a.log {
            assert!((row.j_total - (row.l_q + row.alpha * row.l_tau)).abs() <= 1e-12 * row.j_total.abs());
            assert!(row.alpha > 0.0);
        }
        assert_eq!(a.alphas.len(), 3);
    }

    #[test]
    fn missing_load_is_reported() {
        let data = tiny_data();
        let sp = split(&data, &SplitSpec::default(), 1).unwrap();
        let cfg = TrainConfig {
            load_order: vec![0.0, 3.0],
            ..tiny_cfg()
        };
        assert!(matches!(
            train(&sp.train, &sp.val, &arm(), &cfg, TrainMode::Ann, TrainOptions::default(), |_| {}),
            Err(TrainError::MissingLoad(_))
        ));
    }
}
