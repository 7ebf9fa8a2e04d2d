//! Scalar reverse-mode differentiation.
//!
//! A [`Recording`] owns a tape of nodes on the current thread. Every node
//! stores the local partial derivatives with respect to its parents at the
//! moment it is created, so the backward sweep is a single pass of
//! multiply-adds over the tape in reverse order.
//!
//! Numerical code in this crate is written once against the [`Real`] trait
//! and instantiated either with plain `f64` (fast forward evaluation) or with
//! [`Var`] (recorded evaluation). Fused primitives (`dot`, `log_sum_exp`,
//! `sq_dist`, `affine`) record one node with many parents instead of a chain
//! of binary nodes, which keeps the O(N^2) transport stages compact.
//!
//! ```
//! use dpf_core::autodiff::{Real, Recording};
//!
//! let rec = Recording::new();
//! let x = rec.declare_parameters(&[3.0]).unwrap();
//! let y = x[0] * x[0];
//! let g = rec.grad(y).unwrap();
//! assert_eq!(g[0], 6.0);
//! ```

use std::cell::RefCell;
use std::fmt::Debug;
use std::marker::PhantomData;
use std::ops::{Add, Div, Index, Mul, Neg, Sub};
use std::sync::atomic::{AtomicU32, Ordering};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("non-finite parameter value {value} at position {index}")]
    NonFiniteInput { index: usize, value: f64 },
    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFiniteNode { op: &'static str, node: usize },
    #[error("variable from recording {found} used in recording {expected}")]
    StaleVariable { expected: u32, found: u32 },
}

/// Vector-Jacobian product of a custom block: receives the adjoints of the
/// block outputs and accumulates into the adjoints of the block inputs.
pub type Vjp = Box<dyn Fn(&[f64], &mut [f64])>;

struct CustomBlock {
    first_output: u32,
    n_outputs: u32,
    inputs: Vec<Option<u32>>,
    vjp: Vjp,
}

struct Tape {
    id: u32,
    offsets: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
    params: Vec<u32>,
    blocks: Vec<CustomBlock>,
    error: Option<AutodiffError>,
}

impl Tape {
    fn new(id: u32) -> Self {
        Tape {
            id,
            offsets: vec![0],
            parents: Vec::new(),
            partials: Vec::new(),
            params: Vec::new(),
            blocks: Vec::new(),
            error: None,
        }
    }

    fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    fn fail(&mut self, err: AutodiffError) {
        if self.error.is_none() {
            self.error = Some(err);
        }
    }

    fn push_leaf(&mut self, value: f64, op: &'static str) -> Var {
        let idx = self.len();
        self.offsets.push(self.parents.len() as u32);
        if !value.is_finite() {
            self.fail(AutodiffError::NonFiniteNode { op, node: idx });
        }
        Var { value, idx: idx as u32, rec: self.id }
    }

    fn push<I>(&mut self, value: f64, op: &'static str, parents: I) -> Var
    where
        I: IntoIterator<Item = (Var, f64)>,
    {
        let start = self.parents.len();
        for (v, d) in parents {
            if v.rec == 0 {
                continue;
            }
            if v.rec != self.id {
                self.fail(AutodiffError::StaleVariable { expected: self.id, found: v.rec });
                continue;
            }
            self.parents.push(v.idx);
            self.partials.push(d);
        }
        if self.parents.len() == start {
            return Var::constant(value);
        }
        let idx = self.len();
        self.offsets.push(self.parents.len() as u32);
        if !value.is_finite() {
            self.fail(AutodiffError::NonFiniteNode { op, node: idx });
        }
        Var { value, idx: idx as u32, rec: self.id }
    }
}

thread_local! {
    static TAPES: RefCell<Vec<Tape>> = const { RefCell::new(Vec::new()) };
}

static NEXT_ID: AtomicU32 = AtomicU32::new(1);

fn with_active<R>(f: impl FnOnce(&mut Tape) -> R) -> R {
    TAPES.with(|t| {
        let mut stack = t.borrow_mut();
        let tape = stack
            .last_mut()
            .expect("recorded variable used with no active recording on this thread");
        f(tape)
    })
}

fn record<I>(value: f64, op: &'static str, parents: I) -> Var
where
    I: IntoIterator<Item = (Var, f64)>,
{
    with_active(|t| t.push(value, op, parents))
}

/// An active recording. Creating one makes it the target of every operation
/// on [`Var`]s on this thread until it is dropped. Recordings nest: the most
/// recently created one is active.
pub struct Recording {
    id: u32,
    _not_send: PhantomData<*const ()>,
}

impl Default for Recording {
    fn default() -> Self {
        Self::new()
    }
}

impl Recording {
    pub fn new() -> Self {
        let id = NEXT_ID.fetch_add(1, Ordering::Relaxed);
        TAPES.with(|t| t.borrow_mut().push(Tape::new(id)));
        Recording { id, _not_send: PhantomData }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    fn with_tape<R>(&self, f: impl FnOnce(&mut Tape) -> R) -> R {
        TAPES.with(|t| {
            let mut stack = t.borrow_mut();
            let tape = stack
                .iter_mut()
                .rev()
                .find(|tape| tape.id == self.id)
                .expect("recording is registered on its own thread");
            f(tape)
        })
    }

    /// Declares differentiable leaves. Gradients are reported in declaration
    /// order across all calls.
    pub fn declare_parameters(&self, values: &[f64]) -> Result<Vec<Var>, AutodiffError> {
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(AutodiffError::NonFiniteInput { index, value });
        }
        Ok(self.with_tape(|t| {
            values
                .iter()
                .map(|&v| {
                    let var = t.push_leaf(v, "parameter");
                    t.params.push(var.idx);
                    var
                })
                .collect()
        }))
    }

    pub fn num_parameters(&self) -> usize {
        self.with_tape(|t| t.params.len())
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.with_tape(|t| t.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First error met while recording, if any.
    pub fn check(&self) -> Result<(), AutodiffError> {
        self.with_tape(|t| match &t.error {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        })
    }

    /// Reverse accumulation from `root` to every declared parameter.
    pub fn grad(&self, root: Var) -> Result<GradientVector, AutodiffError> {
        self.with_tape(|t| {
            if let Some(e) = &t.error {
                return Err(e.clone());
            }
            if root.rec == 0 {
                return Ok(GradientVector(vec![0.0; t.params.len()]));
            }
            if root.rec != t.id {
                return Err(AutodiffError::StaleVariable { expected: t.id, found: root.rec });
            }
            let mut adj = vec![0.0; t.len()];
            adj[root.idx as usize] = 1.0;
            let mut next_block = t.blocks.partition_point(|b| b.first_output <= root.idx);
            let mut in_adj = Vec::new();
            for i in (0..=root.idx as usize).rev() {
                if next_block > 0 && t.blocks[next_block - 1].first_output as usize == i {
                    next_block -= 1;
                    let blk = &t.blocks[next_block];
                    let out = &adj[i..i + blk.n_outputs as usize];
                    if out.iter().any(|&a| a != 0.0) {
                        in_adj.clear();
                        in_adj.resize(blk.inputs.len(), 0.0);
                        (blk.vjp)(out, &mut in_adj);
                        for (slot, &a) in blk.inputs.iter().zip(&in_adj) {
                            if let Some(p) = slot {
                                adj[*p as usize] += a;
                            }
                        }
                    }
                    continue;
                }
                let a = adj[i];
                if a == 0.0 {
                    continue;
                }
                let (lo, hi) = (t.offsets[i] as usize, t.offsets[i + 1] as usize);
                for k in lo..hi {
                    adj[t.parents[k] as usize] += a * t.partials[k];
                }
            }
            let g: Vec<f64> = t.params.iter().map(|&p| adj[p as usize]).collect();
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFiniteNode { op: "gradient", node: t.params[pos] as usize });
            }
            Ok(GradientVector(g))
        })
    }
}

impl Drop for Recording {
    fn drop(&mut self) {
        TAPES.with(|t| {
            let mut stack = t.borrow_mut();
            if let Some(pos) = stack.iter().rposition(|tape| tape.id == self.id) {
                stack.remove(pos);
            }
        });
    }
}

/// Gradient of a scalar with respect to the declared parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Index<usize> for GradientVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// A recorded scalar. Constants (`rec == 0`) carry no tape node.
#[derive(Debug, Clone, Copy)]
pub struct Var {
    value: f64,
    idx: u32,
    rec: u32,
}

impl Var {
    pub fn constant(value: f64) -> Self {
        Var { value, idx: u32::MAX, rec: 0 }
    }
    pub fn is_constant(&self) -> bool {
        self.rec == 0
    }
    pub fn recording_id(&self) -> u32 {
        self.rec
    }
}

pub(crate) fn lse_value(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m == f64::INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Scalar interface shared by `f64` and [`Var`].
pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + 'static
{
    /// Whether values of this type carry derivative information.
    const TRACKED: bool;

    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;

    fn square(self) -> Self {
        self * self
    }

    /// Drops derivative information.
    fn detach(self) -> Self {
        Self::cst(self.value())
    }

    fn sum(xs: &[Self]) -> Self;
    fn dot(a: &[Self], b: &[Self]) -> Self;
    /// `c0 + sum_k coeffs[k] * xs[k]`.
    fn affine(xs: &[Self], coeffs: &[f64], c0: f64) -> Self;
    fn log_sum_exp(xs: &[Self]) -> Self;
    /// Squared Euclidean distance.
    fn sq_dist(a: &[Self], b: &[Self]) -> Self;

    /// Attaches values computed outside the tape. `make_vjp` is only invoked
    /// for tracked types; it returns the vector-Jacobian product of the
    /// outputs with respect to `inputs`.
    fn custom(inputs: &[Self], outputs: &[f64], make_vjp: impl FnOnce() -> Vjp) -> Vec<Self>;
}

impl Real for f64 {
    const TRACKED: bool = false;

    fn cst(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn sum(xs: &[Self]) -> Self {
        xs.iter().sum()
    }
    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
    fn affine(xs: &[Self], coeffs: &[f64], c0: f64) -> Self {
        debug_assert_eq!(xs.len(), coeffs.len());
        c0 + xs.iter().zip(coeffs).map(|(x, c)| x * c).sum::<f64>()
    }
    fn log_sum_exp(xs: &[Self]) -> Self {
        lse_value(xs.iter().copied())
    }
    fn sq_dist(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }
    fn custom(_inputs: &[Self], outputs: &[f64], _make_vjp: impl FnOnce() -> Vjp) -> Vec<Self> {
        outputs.to_vec()
    }
}

impl Real for Var {
    const TRACKED: bool = true;

    fn cst(v: f64) -> Self {
        Var::constant(v)
    }
    fn value(self) -> f64 {
        self.value
    }
    fn exp(self) -> Self {
        let v = self.value.exp();
        if self.rec == 0 {
            return Var::constant(v);
        }
        record(v, "exp", [(self, v)])
    }
    fn ln(self) -> Self {
        let v = self.value.ln();
        if self.rec == 0 {
            return Var::constant(v);
        }
        record(v, "ln", [(self, 1.0 / self.value)])
    }
    fn sqrt(self) -> Self {
        let v = self.value.sqrt();
        if self.rec == 0 {
            return Var::constant(v);
        }
        record(v, "sqrt", [(self, 0.5 / v)])
    }
    fn square(self) -> Self {
        let v = self.value * self.value;
        if self.rec == 0 {
            return Var::constant(v);
        }
        record(v, "square", [(self, 2.0 * self.value)])
    }
    fn sum(xs: &[Self]) -> Self {
        let v = xs.iter().map(|x| x.value).sum();
        if xs.iter().all(|x| x.rec == 0) {
            return Var::constant(v);
        }
        record(v, "sum", xs.iter().map(|&x| (x, 1.0)))
    }
    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let v = a.iter().zip(b).map(|(x, y)| x.value * y.value).sum();
        if a.iter().chain(b).all(|x| x.rec == 0) {
            return Var::constant(v);
        }
        record(
            v,
            "dot",
            a.iter().zip(b).flat_map(|(&x, &y)| [(x, y.value), (y, x.value)]),
        )
    }
    fn affine(xs: &[Self], coeffs: &[f64], c0: f64) -> Self {
        debug_assert_eq!(xs.len(), coeffs.len());
        let v = c0 + xs.iter().zip(coeffs).map(|(x, c)| x.value * c).sum::<f64>();
        if xs.iter().all(|x| x.rec == 0) {
            return Var::constant(v);
        }
        record(v, "affine", xs.iter().copied().zip(coeffs.iter().copied()))
    }
    fn log_sum_exp(xs: &[Self]) -> Self {
        let v = lse_value(xs.iter().map(|x| x.value));
        if xs.iter().all(|x| x.rec == 0) {
            return Var::constant(v);
        }
        record(v, "log_sum_exp", xs.iter().map(|&x| (x, (x.value - v).exp())))
    }
    fn sq_dist(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let v = a.iter().zip(b).map(|(x, y)| (x.value - y.value) * (x.value - y.value)).sum();
        if a.iter().chain(b).all(|x| x.rec == 0) {
            return Var::constant(v);
        }
        record(
            v,
            "sq_dist",
            a.iter().zip(b).flat_map(|(&x, &y)| {
                let d = 2.0 * (x.value - y.value);
                [(x, d), (y, -d)]
            }),
        )
    }
    fn custom(inputs: &[Self], outputs: &[f64], make_vjp: impl FnOnce() -> Vjp) -> Vec<Self> {
        if inputs.iter().all(|x| x.rec == 0) {
            return outputs.iter().map(|&v| Var::constant(v)).collect();
        }
        with_active(|t| {
            let mut slots = Vec::with_capacity(inputs.len());
            for x in inputs {
                if x.rec == 0 {
                    slots.push(None);
                } else if x.rec != t.id {
                    t.fail(AutodiffError::StaleVariable { expected: t.id, found: x.rec });
                    slots.push(None);
                } else {
                    slots.push(Some(x.idx));
                }
            }
            let first = t.len() as u32;
            let outs: Vec<Var> = outputs.iter().map(|&v| t.push_leaf(v, "custom")).collect();
            t.blocks.push(CustomBlock {
                first_output: first,
                n_outputs: outputs.len() as u32,
                inputs: slots,
                vjp: make_vjp(),
            });
            outs
        })
    }
}

macro_rules! binary_ops {
    ($($trait:ident $method:ident)*) => {$(
        impl $trait for Var {
            type Output = Var;
            fn $method(self, rhs: Var) -> Var {
                binary::$method(self, rhs)
            }
        }
        impl $trait<f64> for Var {
            type Output = Var;
            fn $method(self, rhs: f64) -> Var {
                binary::$method(self, Var::constant(rhs))
            }
        }
        impl $trait<Var> for f64 {
            type Output = Var;
            fn $method(self, rhs: Var) -> Var {
                binary::$method(Var::constant(self), rhs)
            }
        }
    )*};
}

mod binary {
    use super::{record, Var};

    fn both_constant(a: Var, b: Var) -> bool {
        a.rec == 0 && b.rec == 0
    }

    pub fn add(a: Var, b: Var) -> Var {
        let v = a.value + b.value;
        if both_constant(a, b) {
            return Var::constant(v);
        }
        record(v, "add", [(a, 1.0), (b, 1.0)])
    }
    pub fn sub(a: Var, b: Var) -> Var {
        let v = a.value - b.value;
        if both_constant(a, b) {
            return Var::constant(v);
        }
        record(v, "sub", [(a, 1.0), (b, -1.0)])
    }
    pub fn mul(a: Var, b: Var) -> Var {
        let v = a.value * b.value;
        if both_constant(a, b) {
            return Var::constant(v);
        }
        record(v, "mul", [(a, b.value), (b, a.value)])
    }
    pub fn div(a: Var, b: Var) -> Var {
        let v = a.value / b.value;
        if both_constant(a, b) {
            return Var::constant(v);
        }
        record(v, "div", [(a, 1.0 / b.value), (b, -v / b.value)])
    }
}

binary_ops! { Add add Sub sub Mul mul Div div }

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        if self.rec == 0 {
            return Var::constant(-self.value);
        }
        record(-self.value, "neg", [(self, -1.0)])
    }
}

/// A scalar function that can be evaluated for any [`Real`] type.
pub trait ScalarFn {
    fn eval<S: Real>(&self, x: &[S]) -> S;
}

/// Evaluates `f` on a fresh recording and returns its value and gradient.
pub fn value_and_grad<F: ScalarFn>(f: &F, point: &[f64]) -> Result<(f64, GradientVector), AutodiffError> {
    let rec = Recording::new();
    let params = rec.declare_parameters(point)?;
    let out = f.eval(&params);
    let g = rec.grad(out)?;
    Ok((out.value(), g))
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradCheckError {
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
    #[error("function value is not finite at coordinate {coord} (value {value})")]
    NonFinite { coord: usize, value: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub autodiff: Vec<f64>,
    pub finite_diff: Vec<f64>,
}

/// Compares the recorded gradient of `f` at `point` against central
/// differences with step `h`. The error per coordinate is
/// `|g_ad - g_fd| / max(1, |g_fd|)`.
pub fn finite_diff_check<F: ScalarFn>(f: &F, point: &[f64], h: f64) -> Result<GradCheckReport, GradCheckError> {
    if !(h > 0.0) {
        return Err(GradCheckError::BadStep(h));
    }
    let (_, ad) = value_and_grad(f, point)?;
    let mut x = point.to_vec();
    let mut fd = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        x[i] = point[i] + h;
        let up = f.eval::<f64>(&x);
        x[i] = point[i] - h;
        let down = f.eval::<f64>(&x);
        x[i] = point[i];
        for value in [up, down] {
            if !value.is_finite() {
                return Err(GradCheckError::NonFinite { coord: i, value });
            }
        }
        fd.push((up - down) / (2.0 * h));
    }
    let max_rel_error = ad
        .as_slice()
        .iter()
        .zip(&fd)
        .map(|(a, d)| (a - d).abs() / d.abs().max(1.0))
        .fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, autodiff: ad.into_vec(), finite_diff: fd })
}
