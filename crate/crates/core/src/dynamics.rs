//! Planar two-link model of the upper limb.
//!
//! The shoulder angle `q[0]` is measured from the downward vertical and is
//! positive in flexion; the elbow angle `q[1]` is measured relative to the
//! upper-arm axis. `q = [0, 0]` is the arm hanging straight down. A hand
//! load is a point mass at the distal end of the forearm with no inertia of
//! its own.
//!
//! The equation of motion is `M(q) q̈ + c(q, q̇) + g(q) = τ`, where `c` is the
//! combined Coriolis/centrifugal force vector. All terms are written once,
//! generically over [`Scalar`], so the same code evaluates plain `f64`
//! values and records differentiable graphs for the physics loss.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STANDARD_GRAVITY: f64 = 9.81;

/// Mass matrices with a condition number above this are treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Any state component beyond this magnitude aborts a simulation.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("mass matrix is numerically singular (condition number {condition:.3e})")]
    SingularMassMatrix { condition: f64 },
    #[error("simulation diverged at t = {time} s")]
    NonFinite { time: f64 },
    #[error("invalid anthropometric measurement `{field}` = {value}")]
    InvalidAnthropometrics { field: &'static str, value: f64 },
    #[error("invalid model parameter: {0}")]
    InvalidModel(String),
    #[error("invalid simulation setup: {0}")]
    InvalidSimulation(String),
}

/// Arithmetic needed to evaluate the limb equations.
///
/// Implemented for `f64` and for graph variables in [`crate::autodiff`].
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + Mul<f64, Output = Self>
    + Add<f64, Output = Self>
{
    fn sin(self) -> Self;
    fn cos(self) -> Self;
}

impl Scalar for f64 {
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentParams {
    /// kg
    pub mass: f64,
    /// m
    pub length: f64,
    /// Distance from the proximal joint to the center of mass, as a fraction of `length`.
    pub com_ratio: f64,
    /// Moment of inertia about the transverse axis through the center of mass, kg·m².
    pub inertia_com: f64,
}

impl SegmentParams {
    pub fn validate(&self, name: &str) -> Result<(), DynamicsError> {
        let ok = self.mass.is_finite()
            && self.mass > 0.0
            && self.length.is_finite()
            && self.length > 0.0
            && self.com_ratio > 0.0
            && self.com_ratio <= 1.0
            && self.inertia_com.is_finite()
            && self.inertia_com >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(DynamicsError::InvalidModel(format!("{name}: {self:?}")))
        }
    }

    pub fn com_distance(&self) -> f64 {
        self.com_ratio * self.length
    }

    /// Inertia about the proximal joint.
    pub fn inertia_proximal(&self) -> f64 {
        self.inertia_com + self.mass * self.com_distance().powi(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimbModel {
    pub upper_arm: SegmentParams,
    pub forearm: SegmentParams,
    /// Point mass at the distal end of the forearm, kg.
    #[serde(default)]
    pub hand_load: f64,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
}

fn default_gravity() -> f64 {
    STANDARD_GRAVITY
}

/// Lumped constants of the equation of motion.
#[derive(Debug, Clone, Copy)]
struct Lumped {
    /// Upper-arm inertia about the shoulder.
    j1: f64,
    /// Forearm plus load inertia about the elbow.
    j2: f64,
    /// Total distal mass (forearm + load).
    m2: f64,
    /// First mass moment of forearm plus load about the elbow.
    s2: f64,
    l1: f64,
    /// Gravity moment coefficient of the shoulder term in `sin q1`.
    g1: f64,
    /// Gravity moment coefficient of the `sin(q1 + q2)` term.
    g2: f64,
}

impl LimbModel {
    pub fn new(upper_arm: SegmentParams, forearm: SegmentParams) -> Self {
        Self {
            upper_arm,
            forearm,
            hand_load: 0.0,
            gravity: STANDARD_GRAVITY,
        }
    }

    pub fn with_load(mut self, hand_load: f64) -> Self {
        self.hand_load = hand_load;
        self
    }

    pub fn with_gravity(mut self, gravity: f64) -> Self {
        self.gravity = gravity;
        self
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        self.upper_arm.validate("upper_arm")?;
        self.forearm.validate("forearm")?;
        if !(self.hand_load.is_finite() && self.hand_load >= 0.0) {
            return Err(DynamicsError::InvalidModel(format!(
                "hand_load must be >= 0, got {}",
                self.hand_load
            )));
        }
        // g = 0 is accepted for the zero-gravity oracles.
        if !(self.gravity.is_finite() && self.gravity >= 0.0) {
            return Err(DynamicsError::InvalidModel(format!(
                "gravity must be >= 0, got {}",
                self.gravity
            )));
        }
        Ok(())
    }

    fn lumped(&self) -> Lumped {
        let l1 = self.upper_arm.length;
        let l2 = self.forearm.length;
        let m1 = self.upper_arm.mass;
        let m2 = self.forearm.mass + self.hand_load;
        let s2 = self.forearm.mass * self.forearm.com_distance() + self.hand_load * l2;
        let j2 = self.forearm.inertia_proximal() + self.hand_load * l2 * l2;
        Lumped {
            j1: self.upper_arm.inertia_proximal(),
            j2,
            m2,
            s2,
            l1,
            g1: self.gravity * (m1 * self.upper_arm.com_distance() + m2 * l1),
            g2: self.gravity * s2,
        }
    }

    /// Largest gravitational shoulder torque over all poses (arm horizontal
    /// and straight). Used as the characteristic torque of the model.
    pub fn characteristic_torque(&self) -> f64 {
        let k = self.lumped();
        k.g1 + k.g2
    }

    /// Entries of the symmetric mass matrix; `m22` does not depend on `q`.
    pub fn mass_matrix_terms<S: Scalar>(&self, q: [S; 2]) -> MassTerms<S> {
        let k = self.lumped();
        let c2 = q[1].cos() * (k.l1 * k.s2);
        MassTerms {
            m11: c2 * 2.0 + (k.j1 + k.j2 + k.m2 * k.l1 * k.l1),
            m12: c2 + k.j2,
            m22: k.j2,
        }
    }

    pub fn mass_matrix(&self, q: [f64; 2]) -> [[f64; 2]; 2] {
        let MassTerms { m11, m12, m22 } = self.mass_matrix_terms(q);
        [[m11, m12], [m12, m22]]
    }

    /// `C(q, q̇) q̇` as a force vector.
    pub fn coriolis_vector<S: Scalar>(&self, q: [S; 2], qd: [S; 2]) -> [S; 2] {
        let k = self.lumped();
        let h = q[1].sin() * (k.l1 * k.s2);
        let shoulder = -(h * (qd[0] * qd[1] * 2.0 + qd[1] * qd[1]));
        let elbow = h * qd[0] * qd[0];
        [shoulder, elbow]
    }

    /// Gradient of the potential energy with respect to `q`.
    pub fn gravity_vector<S: Scalar>(&self, q: [S; 2]) -> [S; 2] {
        let k = self.lumped();
        let distal = (q[0] + q[1]).sin() * k.g2;
        [q[0].sin() * k.g1 + distal, distal]
    }

    /// Potential energy relative to the hanging pose, J.
    pub fn potential_energy(&self, q: [f64; 2]) -> f64 {
        let k = self.lumped();
        k.g1 * (1.0 - q[0].cos()) + k.g2 * (1.0 - (q[0] + q[1]).cos())
    }

    pub fn kinetic_energy(&self, q: [f64; 2], qd: [f64; 2]) -> f64 {
        let m = self.mass_matrix(q);
        0.5 * (m[0][0] * qd[0] * qd[0] + 2.0 * m[0][1] * qd[0] * qd[1] + m[1][1] * qd[1] * qd[1])
    }

    /// `τ = M(q) q̈ + c(q, q̇) + g(q)`, generic over the scalar type.
    pub fn inverse_dynamics_terms<S: Scalar>(&self, q: [S; 2], qd: [S; 2], qdd: [S; 2]) -> [S; 2] {
        let MassTerms { m11, m12, m22 } = self.mass_matrix_terms(q);
        let c = self.coriolis_vector(q, qd);
        let g = self.gravity_vector(q);
        [
            m11 * qdd[0] + m12 * qdd[1] + c[0] + g[0],
            m12 * qdd[0] + qdd[1] * m22 + c[1] + g[1],
        ]
    }

    pub fn inverse_dynamics(&self, state: &JointState) -> Torque2 {
        Torque2 {
            tau: self.inverse_dynamics_terms(state.q, state.qd, state.qdd),
        }
    }

    /// Solves `M(q) q̈ = τ − c(q, q̇) − g(q)` for `q̈`.
    pub fn forward_dynamics(
        &self,
        q: [f64; 2],
        qd: [f64; 2],
        tau: Torque2,
    ) -> Result<[f64; 2], DynamicsError> {
        let MassTerms { m11, m12, m22 } = self.mass_matrix_terms(q);
        let c = self.coriolis_vector(q, qd);
        let g = self.gravity_vector(q);
        let rhs = [tau.tau[0] - c[0] - g[0], tau.tau[1] - c[1] - g[1]];

        // Eigenvalues of the symmetric 2x2 matrix give the 2-norm condition number.
        let half_trace = 0.5 * (m11 + m22);
        let det = m11 * m22 - m12 * m12;
        let disc = (0.25 * (m11 - m22).powi(2) + m12 * m12).sqrt();
        let lmax = half_trace + disc;
        let lmin = half_trace - disc;
        let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
        if !(condition.is_finite() && condition <= SINGULAR_CONDITION) || det <= 0.0 {
            return Err(DynamicsError::SingularMassMatrix { condition });
        }
        Ok([
            (m22 * rhs[0] - m12 * rhs[1]) / det,
            (m11 * rhs[1] - m12 * rhs[0]) / det,
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassTerms<S> {
    pub m11: S,
    pub m12: S,
    pub m22: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointState {
    pub q: [f64; 2],
    pub qd: [f64; 2],
    pub qdd: [f64; 2],
}

impl JointState {
    pub fn is_finite(&self) -> bool {
        self.q
            .iter()
            .chain(&self.qd)
            .chain(&self.qdd)
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Torque2 {
    pub tau: [f64; 2],
}

impl Torque2 {
    pub fn new(shoulder: f64, elbow: f64) -> Self {
        Self {
            tau: [shoulder, elbow],
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }
}

/// Fixed-step trajectory produced by [`simulate`]; sample `i` is at `i * dt`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<JointState>,
}

impl Trajectory {
    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }
}

/// Integrates the forward dynamics with classic fixed-step RK4.
///
/// `tau_fn(t, q, qd)` may depend on the state. Each returned state carries
/// the acceleration evaluated at that state.
pub fn simulate<F>(
    model: &LimbModel,
    q0: [f64; 2],
    qd0: [f64; 2],
    mut tau_fn: F,
    dt: f64,
    duration: f64,
) -> Result<Trajectory, DynamicsError>
where
    F: FnMut(f64, [f64; 2], [f64; 2]) -> Torque2,
{
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::InvalidSimulation(format!("dt must be > 0, got {dt}")));
    }
    if !(duration >= dt) {
        return Err(DynamicsError::InvalidSimulation(format!(
            "duration {duration} shorter than dt {dt}"
        )));
    }
    let steps = (duration / dt).round() as usize;

    let mut accel = |t: f64, q: [f64; 2], qd: [f64; 2]| -> Result<[f64; 2], DynamicsError> {
        let tau = tau_fn(t, q, qd);
        model.forward_dynamics(q, qd, tau)
    };

    let mut q = q0;
    let mut qd = qd0;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(JointState {
        q,
        qd,
        qdd: accel(0.0, q, qd)?,
    });

    let shift = |x: [f64; 2], d: [f64; 2], h: f64| [x[0] + h * d[0], x[1] + h * d[1]];
    for i in 0..steps {
        let t = i as f64 * dt;
        let k1v = qd;
        let k1a = accel(t, q, qd)?;
        let k2v = shift(qd, k1a, 0.5 * dt);
        let k2a = accel(t + 0.5 * dt, shift(q, k1v, 0.5 * dt), k2v)?;
        let k3v = shift(qd, k2a, 0.5 * dt);
        let k3a = accel(t + 0.5 * dt, shift(q, k2v, 0.5 * dt), k3v)?;
        let k4v = shift(qd, k3a, dt);
        let k4a = accel(t + dt, shift(q, k3v, dt), k4v)?;
        for j in 0..2 {
            q[j] += dt / 6.0 * (k1v[j] + 2.0 * k2v[j] + 2.0 * k3v[j] + k4v[j]);
            qd[j] += dt / 6.0 * (k1a[j] + 2.0 * k2a[j] + 2.0 * k3a[j] + k4a[j]);
        }
        let t_next = (i + 1) as f64 * dt;
        let qdd = accel(t_next, q, qd)?;
        let state = JointState { q, qd, qdd };
        let diverged = !state.is_finite()
            || state
                .q
                .iter()
                .chain(&state.qd)
                .chain(&state.qdd)
                .any(|v| v.abs() > DIVERGENCE_LIMIT);
        if diverged {
            return Err(DynamicsError::NonFinite { time: t_next });
        }
        states.push(state);
    }
    Ok(Trajectory { dt, states })
}

/// Body measurements feeding the segment-parameter estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anthropometrics {
    /// m
    pub height: f64,
    /// kg
    pub weight: f64,
    /// Acromion–radiale length, m.
    pub upper_arm_length: f64,
    /// Radiale–styloid length, m.
    pub forearm_length: f64,
    pub arm_circumference: f64,
    pub biceps_circumference: f64,
    pub forearm_circumference: f64,
    pub wrist_circumference: f64,
}

impl Anthropometrics {
    fn fields(&self) -> [(&'static str, f64); 8] {
        [
            ("height", self.height),
            ("weight", self.weight),
            ("upper_arm_length", self.upper_arm_length),
            ("forearm_length", self.forearm_length),
            ("arm_circumference", self.arm_circumference),
            ("biceps_circumference", self.biceps_circumference),
            ("forearm_circumference", self.forearm_circumference),
            ("wrist_circumference", self.wrist_circumference),
        ]
    }
}

/// Linear moment-of-inertia regression: `I = intercept + Σ coeff·predictor`.
/// Missing coefficients are zero.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InertiaRegression {
    pub intercept: f64,
    #[serde(default)]
    pub height: f64,
    #[serde(default)]
    pub weight: f64,
    /// Coefficient on the segment's own length.
    #[serde(default)]
    pub segment_length: f64,
    #[serde(default)]
    pub arm_circumference: f64,
    #[serde(default)]
    pub biceps_circumference: f64,
    #[serde(default)]
    pub forearm_circumference: f64,
    #[serde(default)]
    pub wrist_circumference: f64,
}

impl InertiaRegression {
    fn evaluate(&self, a: &Anthropometrics, segment_length: f64) -> f64 {
        self.intercept
            + self.height * a.height
            + self.weight * a.weight
            + self.segment_length * segment_length
            + self.arm_circumference * a.arm_circumference
            + self.biceps_circumference * a.biceps_circumference
            + self.forearm_circumference * a.forearm_circumference
            + self.wrist_circumference * a.wrist_circumference
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRegression {
    /// Segment mass as a fraction of body mass.
    pub mass_fraction: f64,
    pub com_ratio: f64,
    pub inertia: InertiaRegression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionCoeffs {
    pub upper_arm: SegmentRegression,
    pub forearm: SegmentRegression,
}

impl Default for RegressionCoeffs {
    /// Body-mass fractions and center-of-mass ratios from standard
    /// anthropometric tables; the inertia regression is a weight-scaled
    /// placeholder calibrated to a 74 kg adult (≈0.019 and ≈0.008 kg·m²).
    fn default() -> Self {
        Self {
            upper_arm: SegmentRegression {
                mass_fraction: 0.028,
                com_ratio: 0.436,
                inertia: InertiaRegression {
                    weight: 2.6e-4,
                    ..Default::default()
                },
            },
            forearm: SegmentRegression {
                mass_fraction: 0.016,
                com_ratio: 0.430,
                inertia: InertiaRegression {
                    weight: 1.07e-4,
                    ..Default::default()
                },
            },
        }
    }
}

/// Smallest center-of-mass ratio an estimate is clamped to.
const MIN_COM_RATIO: f64 = 1e-3;

/// Estimates upper-arm and forearm parameters from body measurements.
pub fn estimate_segment_params(
    anthro: &Anthropometrics,
    coeffs: &RegressionCoeffs,
) -> Result<(SegmentParams, SegmentParams), DynamicsError> {
    for (field, value) in anthro.fields() {
        if !(value.is_finite() && value > 0.0) {
            return Err(DynamicsError::InvalidAnthropometrics { field, value });
        }
    }
    let segment = |reg: &SegmentRegression, length: f64, name: &'static str| {
        if !(reg.mass_fraction.is_finite() && reg.mass_fraction > 0.0) {
            return Err(DynamicsError::InvalidModel(format!(
                "{name}.mass_fraction must be > 0, got {}",
                reg.mass_fraction
            )));
        }
        let inertia = reg.inertia.evaluate(anthro, length);
        Ok(SegmentParams {
            mass: reg.mass_fraction * anthro.weight,
            length,
            com_ratio: reg.com_ratio.clamp(MIN_COM_RATIO, 1.0),
            inertia_com: if inertia.is_finite() { inertia.max(0.0) } else { 0.0 },
        })
    };
    Ok((
        segment(&coeffs.upper_arm, anthro.upper_arm_length, "upper_arm")?,
        segment(&coeffs.forearm, anthro.forearm_length, "forearm")?,
    ))
}
