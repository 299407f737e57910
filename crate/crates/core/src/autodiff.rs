//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Tape::backward`] then walks the recording in reverse and
//! accumulates adjoints. Nodes hold whole matrices (features × batch), so a
//! network evaluated on a mini-batch costs one node per layer operation
//! rather than one per scalar.
//!
//! Time derivatives of the network output are recorded *inside* the graph
//! (see [`time_jet`]), so parameter gradients flow through `dq̂/dt` and
//! `d²q̂/dt²` like through any other quantity.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::Scalar;
use crate::network::{Activation, MlpParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("loss evaluated to a non-finite value ({0})")]
    NonFiniteLoss(f64),
    #[error("loss node must be 1x1, got {0}x{1}")]
    NonScalarLoss(usize, usize),
}

/// Differentiable primitives, used to name gradient checks and to inject
/// deliberate faults into the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Affine,
    Tanh,
    Sigmoid,
    Square,
    Sum,
    Mul,
    Sin,
    Cos,
}

impl Primitive {
    pub const ALL: [Primitive; 8] = [
        Primitive::Affine,
        Primitive::Tanh,
        Primitive::Sigmoid,
        Primitive::Square,
        Primitive::Sum,
        Primitive::Mul,
        Primitive::Sin,
        Primitive::Cos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Affine => "affine",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Square => "square",
            Primitive::Sum => "sum",
            Primitive::Mul => "mul",
            Primitive::Sin => "sin",
            Primitive::Cos => "cos",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scale applied to a faulted primitive's backward contribution.
const FAULT_FACTOR: f64 = 1.01;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `m + b` with `b` a column broadcast over all columns of `m`.
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Tanh(usize),
    Sigmoid(usize),
    Sin(usize),
    Cos(usize),
    Square(usize),
    Sum(usize),
    Cols(usize, usize),
    Rows(usize, usize),
    HStack(Vec<usize>),
    /// Hidden tanh layer on a stacked `[z | z_t | z_tt]` pre-activation plus
    /// a bias on the first block; the value is `[a | a_t | a_tt]`.
    TanhJet(usize, usize),
}

impl Op {
    fn primitive(&self) -> Option<Primitive> {
        match self {
            Op::MatMul(..) | Op::AddBias(..) => Some(Primitive::Affine),
            Op::Tanh(_) | Op::TanhJet(..) => Some(Primitive::Tanh),
            Op::Sigmoid(_) => Some(Primitive::Sigmoid),
            Op::Square(_) => Some(Primitive::Square),
            Op::Sum(_) => Some(Primitive::Sum),
            Op::Mul(..) => Some(Primitive::Mul),
            Op::Sin(_) => Some(Primitive::Sin),
            Op::Cos(_) => Some(Primitive::Cos),
            _ => None,
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward pass. Tapes are per-evaluation and never shared.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Option<Primitive>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({r}x{c})", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward pass deliberately mis-scales one primitive.
    pub fn with_fault(fault: Primitive) -> Self {
        Self {
            nodes: RefCell::default(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives an adjoint.
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&self, value: f64) -> Var<'_> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    fn push(&self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn unary(&self, a: usize, op: Op, f: impl FnOnce(&Array2<f64>) -> Array2<f64>) -> Var<'_> {
        let (value, needs_grad) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[a].value), nodes[a].needs_grad)
        };
        self.push(value, op, needs_grad)
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        op: Op,
        f: impl FnOnce(&Array2<f64>, &Array2<f64>) -> Array2<f64>,
    ) -> Var<'_> {
        let (value, needs_grad) = {
            let nodes = self.nodes.borrow();
            (
                f(&nodes[a].value, &nodes[b].value),
                nodes[a].needs_grad || nodes[b].needs_grad,
            )
        };
        self.push(value, op, needs_grad)
    }

    /// Concatenates same-height nodes along columns.
    pub fn hstack<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "hstack of nothing");
        let (value, needs_grad) = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
            let value = ndarray::concatenate(Axis(1), &views).expect("hstack height mismatch");
            (value, parts.iter().any(|p| nodes[p.id].needs_grad))
        };
        self.push(value, Op::HStack(parts.iter().map(|p| p.id).collect()), needs_grad)
    }

    /// Propagates adjoints from `root`, seeded with ones.
    pub fn backward(&self, root: Var<'_>) -> Adjoints {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(Array2::ones(nodes[root.id].value.dim()));

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let g = match (self.fault, node.op.primitive()) {
                (Some(f), Some(p)) if f == p => g * FAULT_FACTOR,
                _ => g,
            };
            let wants = |i: usize| nodes[i].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads, *a, g.dot(&nodes[*b].value.t()));
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, nodes[*a].value.t().dot(&g));
                    }
                }
                Op::AddBias(m, b) => {
                    if wants(*b) {
                        accumulate(&mut grads, *b, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                    }
                    if wants(*m) {
                        accumulate(&mut grads, *m, g);
                    }
                }
                Op::Add(a, b) => {
                    if wants(*a) && wants(*b) {
                        accumulate(&mut grads, *b, g.clone());
                        accumulate(&mut grads, *a, g);
                    } else if wants(*a) {
                        accumulate(&mut grads, *a, g);
                    } else {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*b) {
                        accumulate(&mut grads, *b, -&g);
                    }
                    if wants(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads, *a, &g * &nodes[*b].value);
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, &g * &nodes[*a].value);
                    }
                }
                Op::Neg(a) => accumulate(&mut grads, *a, -g),
                Op::Scale(a, k) => accumulate(&mut grads, *a, g * *k),
                Op::Offset(a) => accumulate(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let y = &node.value;
                    let mut d = g;
                    ndarray::Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let mut d = g;
                    ndarray::Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Sin(a) => {
                    let x = &nodes[*a].value;
                    let mut d = g;
                    ndarray::Zip::from(&mut d).and(x).for_each(|d, &x| *d *= x.cos());
                    accumulate(&mut grads, *a, d);
                }
                Op::Cos(a) => {
                    let x = &nodes[*a].value;
                    let mut d = g;
                    ndarray::Zip::from(&mut d).and(x).for_each(|d, &x| *d *= -x.sin());
                    accumulate(&mut grads, *a, d);
                }
                Op::Square(a) => {
                    let x = &nodes[*a].value;
                    let mut d = g;
                    ndarray::Zip::from(&mut d).and(x).for_each(|d, &x| *d *= 2.0 * x);
                    accumulate(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let gs = g[[0, 0]];
                    accumulate(&mut grads, *a, Array2::from_elem(nodes[*a].value.dim(), gs));
                }
                Op::Cols(a, start) => {
                    let slot = grads[*a].get_or_insert_with(|| Array2::zeros(nodes[*a].value.dim()));
                    let mut view = slot.slice_mut(s![.., *start..*start + g.ncols()]);
                    view += &g;
                }
                Op::Rows(a, start) => {
                    let slot = grads[*a].get_or_insert_with(|| Array2::zeros(nodes[*a].value.dim()));
                    let mut view = slot.slice_mut(s![*start..*start + g.nrows(), ..]);
                    view += &g;
                }
                Op::TanhJet(zs, b) => {
                    let n = g.ncols() / 3;
                    let g = g.as_standard_layout();
                    let y = node.value.as_standard_layout();
                    let zs_val = nodes[*zs].value.as_standard_layout();
                    let mut gz = Array2::zeros(zs_val.dim());
                    for (((mut gz_r, y_r), z_r), g_r) in gz.rows_mut().into_iter().zip(y.rows()).zip(zs_val.rows()).zip(g.rows()) {
                        let gz_r = gz_r.as_slice_mut().expect("standard layout");
                        let (a, z_r, g_r) = (&y_r.as_slice().expect("standard layout")[..n], z_r.as_slice().expect("standard layout"), g_r.as_slice().expect("standard layout"));
                        let (gz0, rest) = gz_r.split_at_mut(n);
                        let (gz1, gz2) = rest.split_at_mut(n);
                        let (zt, ztt) = (&z_r[n..2 * n], &z_r[2 * n..]);
                        let (ga, gat, gatt) = (&g_r[..n], &g_r[n..2 * n], &g_r[2 * n..]);
                        for c in 0..n {
                            let (a, zt, ztt) = (a[c], zt[c], ztt[c]);
                            let (ga, gat, gatt) = (ga[c], gat[c], gatt[c]);
                            let d = 1.0 - a * a;
                            let ad = a * d;
                            gz0[c] = ga * d - 2.0 * ad * (gat * zt + gatt * ztt) - 2.0 * gatt * zt * zt * (d * d - 2.0 * a * ad);
                            gz1[c] = gat * d - 4.0 * gatt * ad * zt;
                            gz2[c] = gatt * d;
                        }
                    }
                    if wants(*b) {
                        let gb = gz.slice(s![.., ..n]).sum_axis(Axis(1)).insert_axis(Axis(1));
                        accumulate(&mut grads, *b, gb);
                    }
                    if wants(*zs) {
                        accumulate(&mut grads, *zs, gz);
                    }
                }
                Op::HStack(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = nodes[p].value.ncols();
                        if wants(p) {
                            accumulate(&mut grads, p, g.slice(s![.., col..col + w]).to_owned());
                        }
                        col += w;
                    }
                }
            }
        }
        Adjoints { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: usize, contribution: Array2<f64>) {
    match &mut grads[id] {
        Some(existing) => *existing += &contribution,
        slot @ None => *slot = Some(contribution),
    }
}

/// Adjoints of the leaves reached by a backward pass.
pub struct Adjoints {
    grads: Vec<Option<Array2<f64>>>,
}

impl Adjoints {
    /// Adjoint of `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Array2<f64>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Array2<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// The value of a 1x1 node.
    pub fn scalar(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dim()
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, Op::MatMul(self.id, rhs.id), |a, b| a.dot(b))
    }

    pub fn add_bias(self, bias: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, bias.id, Op::AddBias(self.id, bias.id), |m, b| m + b)
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Tanh(self.id), |x| x.mapv(tanh))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Sigmoid(self.id), |x| x.mapv(sigmoid))
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Square(self.id), |x| x.mapv(|v| v * v))
    }

    pub fn sum(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sum(self.id), |x| {
            Array2::from_elem((1, 1), x.sum())
        })
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Scale(self.id, k), |x| x * k)
    }

    pub fn offset(self, k: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Offset(self.id), |x| x + k)
    }

    /// Tanh layer and its first two time derivatives from a stacked
    /// pre-activation `[W·x | W·x_t | W·x_tt]` (three equal column blocks).
    /// Equivalent to slicing the blocks and pushing them through the
    /// chain rule node by node, in a single node.
    pub fn tanh_jet(self, bias: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, bias.id, Op::TanhJet(self.id, bias.id), |zs, b| {
            let n = zs.ncols() / 3;
            debug_assert_eq!(3 * n, zs.ncols());
            let zs = zs.as_standard_layout();
            let mut out = Array2::zeros(zs.dim());
            for ((mut o, z), &br) in out.rows_mut().into_iter().zip(zs.rows()).zip(b.iter()) {
                let o = o.as_slice_mut().expect("standard layout");
                let z = z.as_slice().expect("standard layout");
                let (o0, rest) = o.split_at_mut(n);
                let (o1, o2) = rest.split_at_mut(n);
                let (z0, zt, ztt) = (&z[..n], &z[n..2 * n], &z[2 * n..]);
                for c in 0..n {
                    let a = tanh(z0[c] + br);
                    let d = 1.0 - a * a;
                    let at = d * zt[c];
                    o0[c] = a;
                    o1[c] = at;
                    o2[c] = d * ztt[c] - 2.0 * a * at * zt[c];
                }
            }
            out
        })
    }

    /// Columns `start..start + len`.
    pub fn cols(self, start: usize, len: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::Cols(self.id, start), |x| {
            x.slice(s![.., start..start + len]).to_owned()
        })
    }

    /// Rows `start..start + len`.
    pub fn rows(self, start: usize, len: usize) -> Var<'t> {
        self.tape.unary(self.id, Op::Rows(self.id, start), |x| {
            x.slice(s![start..start + len, ..]).to_owned()
        })
    }

    pub fn row(self, i: usize) -> Var<'t> {
        self.rows(i, 1)
    }

    pub fn activate(self, activation: Activation) -> Var<'t> {
        match activation {
            Activation::Tanh => self.tanh(),
            Activation::Sigmoid => self.sigmoid(),
            Activation::Identity => self,
        }
    }
}

/// Hyperbolic tangent from a single `exp`. Absolute error stays within a
/// few ulp of 1, which is what activations and their derivatives need;
/// relative accuracy near zero is not preserved.
pub fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, Op::Add(self.id, rhs.id), |a, b| a + b)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, Op::Sub(self.id, rhs.id), |a, b| a - b)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, rhs.id, Op::Mul(self.id, rhs.id), |a, b| a * b)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Neg(self.id), |x| -x)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, k: f64) -> Var<'t> {
        self.scale(k)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, k: f64) -> Var<'t> {
        self.offset(k)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, k: f64) -> Var<'t> {
        self.offset(-k)
    }
}

impl Scalar for Var<'_> {
    fn sin(self) -> Self {
        self.tape.unary(self.id, Op::Sin(self.id), |x| x.mapv(f64::sin))
    }
    fn cos(self) -> Self {
        self.tape.unary(self.id, Op::Cos(self.id), |x| x.mapv(f64::cos))
    }
}

/// Gradient of a scalar loss, one entry per trainable parameter in the
/// canonical ordering of [`MlpParams::to_flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Network parameters registered as leaves of a tape.
pub struct ParamVars<'t> {
    pub layers: Vec<(Var<'t>, Var<'t>)>,
    activations: Vec<Activation>,
}

impl<'t> ParamVars<'t> {
    pub fn register(tape: &'t Tape, params: &MlpParams) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|layer| {
                let w = tape.var(layer.weights.clone());
                let b = tape.var(layer.bias.clone().insert_axis(Axis(1)));
                (w, b)
            })
            .collect();
        Self {
            layers,
            activations: params.activations(),
        }
    }

    pub fn activation(&self, layer: usize) -> Activation {
        self.activations[layer]
    }

    /// Network output for a batch `x` (input_dim × batch).
    pub fn forward(&self, x: Var<'t>) -> Var<'t> {
        let mut a = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            a = w.matmul(a).add_bias(*b).activate(self.activations[i]);
        }
        a
    }

    /// Flattens the adjoints of every parameter in canonical order. Parameters
    /// the loss does not reach get zeros.
    pub fn gradient(&self, adjoints: &Adjoints) -> Gradient {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            for var in [w, b] {
                match adjoints.get(*var) {
                    Some(g) => out.extend(g.iter().copied()),
                    None => out.extend(std::iter::repeat(0.0).take(var.shape().0 * var.shape().1)),
                }
            }
        }
        Gradient(out)
    }
}

/// Evaluates `loss_fn` on a fresh tape and returns its value and exact
/// reverse-mode gradient with respect to every parameter.
pub fn grad<F>(params: &MlpParams, loss_fn: F) -> Result<(f64, Gradient), AutodiffError>
where
    F: for<'t> FnOnce(&'t Tape, &ParamVars<'t>) -> Var<'t>,
{
    grad_on(&Tape::new(), params, loss_fn)
}

/// Like [`grad`], on a caller-provided (possibly fault-injected) tape.
pub fn grad_on<'t, F>(
    tape: &'t Tape,
    params: &MlpParams,
    loss_fn: F,
) -> Result<(f64, Gradient), AutodiffError>
where
    F: FnOnce(&'t Tape, &ParamVars<'t>) -> Var<'t>,
{
    let vars = ParamVars::register(tape, params);
    let loss = loss_fn(tape, &vars);
    let (r, c) = loss.shape();
    if (r, c) != (1, 1) {
        return Err(AutodiffError::NonScalarLoss(r, c));
    }
    let value = loss.scalar();
    if !value.is_finite() {
        return Err(AutodiffError::NonFiniteLoss(value));
    }
    let adjoints = tape.backward(loss);
    Ok((value, vars.gradient(&adjoints)))
}

/// How the time derivatives of the network output are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JetMode {
    /// First- and second-order forward propagation of the time direction
    /// through every layer, recorded in the graph.
    Exact,
    /// Three-point central stencil over normalized time with step `h`.
    Stencil { h: f64 },
}

impl Default for JetMode {
    fn default() -> Self {
        JetMode::Exact
    }
}

impl JetMode {
    /// Default stencil step: a quarter of one 125 Hz sample on a one-second trial.
    pub const DEFAULT_STENCIL_H: f64 = 1.0 / (125.0 * 4.0);

    pub fn describe(&self) -> String {
        match self {
            JetMode::Exact => "exact (forward-over-reverse)".to_string(),
            JetMode::Stencil { h } => format!("stencil (h = {h:e})"),
        }
    }
}

/// Network output and its first and second derivatives with respect to the
/// normalized time input, each `output_dim × batch`.
#[derive(Debug, Clone, Copy)]
pub struct Jet<'t> {
    pub q: Var<'t>,
    pub qd: Var<'t>,
    pub qdd: Var<'t>,
}

/// Records the network output and its time derivatives at fixed EMG input.
///
/// `x` is `input_dim × batch`; `time_row` selects the time input.
pub fn time_jet<'t>(
    vars: &ParamVars<'t>,
    x: &Array2<f64>,
    time_row: usize,
    mode: JetMode,
) -> Jet<'t> {
    let tape = vars.layers[0].0.tape();
    let batch = x.ncols();
    match mode {
        JetMode::Exact => {
            let mut stacked = Array2::zeros((x.nrows(), 3 * batch));
            stacked.slice_mut(s![.., ..batch]).assign(x);
            stacked
                .slice_mut(s![time_row, batch..2 * batch])
                .fill(1.0);
            let mut s_var = tape.constant(stacked);
            let last = vars.layers.len() - 1;
            let mut jet = None;
            for (i, (w, b)) in vars.layers.iter().enumerate() {
                let z_all = w.matmul(s_var);
                if i != last && vars.activation(i) == Activation::Tanh {
                    s_var = z_all.tanh_jet(*b);
                    continue;
                }
                let z = z_all.cols(0, batch).add_bias(*b);
                let zt = z_all.cols(batch, batch);
                let ztt = z_all.cols(2 * batch, batch);
                let (a, at, att) = activation_jet(vars.activation(i), z, zt, ztt);
                if i == last {
                    jet = Some(Jet {
                        q: a,
                        qd: at,
                        qdd: att,
                    });
                } else {
                    s_var = tape.hstack(&[a, at, att]);
                }
            }
            jet.expect("network has at least one layer")
        }
        JetMode::Stencil { h } => {
            let mut stacked = Array2::zeros((x.nrows(), 3 * batch));
            for (k, shift) in [-h, 0.0, h].into_iter().enumerate() {
                let mut block = stacked.slice_mut(s![.., k * batch..(k + 1) * batch]);
                block.assign(x);
                block.row_mut(time_row).mapv_inplace(|t| t + shift);
            }
            let y = vars.forward(tape.constant(stacked));
            let minus = y.cols(0, batch);
            let mid = y.cols(batch, batch);
            let plus = y.cols(2 * batch, batch);
            Jet {
                q: mid,
                qd: (plus - minus).scale(0.5 / h),
                qdd: (plus + minus - mid.scale(2.0)).scale(1.0 / (h * h)),
            }
        }
    }
}

/// Pushes a value and its first two time derivatives through an activation.
fn activation_jet<'t>(
    activation: Activation,
    z: Var<'t>,
    zt: Var<'t>,
    ztt: Var<'t>,
) -> (Var<'t>, Var<'t>, Var<'t>) {
    match activation {
        Activation::Identity => (z, zt, ztt),
        Activation::Tanh => {
            // a' = (1 - a²) z', a'' = (1 - a²) z'' - 2 a (1 - a²) z'²
            let a = z.tanh();
            let d = (-a.square()).offset(1.0);
            let at = d * zt;
            let att = d * ztt - (a * at * zt).scale(2.0);
            (a, at, att)
        }
        Activation::Sigmoid => {
            // y' = y(1 - y) z', y'' = y(1 - y) z'' + (1 - 2y) y' z'
            let y = z.sigmoid();
            let d = y - y.square();
            let yt = d * zt;
            let ytt = d * ztt + y.scale(-2.0).offset(1.0) * yt * zt;
            (y, yt, ytt)
        }
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Magnitudes below this are compared absolutely in [`relative_error`].
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}
