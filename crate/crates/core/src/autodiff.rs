//! Reverse-mode automatic differentiation over a recorded graph.
//!
//! Every backward rule is itself expressed with graph operations, so the
//! gradients returned by [`Graph::grad`] are ordinary [`Var`]s that can be
//! differentiated again. That is what makes meta-gradients through an
//! explicit gradient-descent step exact: see [`grad_through_step`].
//!
//! Node ids are assigned in insertion order, which is also a topological
//! order. A graph is single-threaded; independent graphs may run in parallel
//! over shared, immutable [`ParamSet`] snapshots.

use std::cell::{Cell, RefCell};
use std::ops;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

thread_local! {
    static CORRUPTED: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Names of the primitive ops, as reported by checked graphs and accepted by
/// [`with_corrupted_backward`].
pub const OP_NAMES: &[&str] = &[
    "add", "sub", "mul", "div", "scale", "shift", "matmul", "transpose", "tanh", "relu", "exp",
    "log", "sqrt", "sum", "sum_rows", "sum_cols", "expand", "broadcast_rows", "broadcast_cols",
    "pick", "scatter",
];

/// Runs `f` with the backward rule of `op` scaled by 1.1 on this thread.
/// Fault injection for gradient checks; unknown names are an error.
pub fn with_corrupted_backward<R>(op: &str, f: impl FnOnce() -> R) -> Result<R> {
    let name = OP_NAMES
        .iter()
        .find(|n| **n == op)
        .ok_or_else(|| Error::Config(format!("unknown op `{op}`")))?;
    let prev = CORRUPTED.with(|c| c.replace(Some(name)));
    let out = f();
    CORRUPTED.with(|c| c.set(prev));
    Ok(out)
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    /// `1×1` to the node's shape.
    Expand(usize),
    /// `1×d` to `n×d`.
    BroadcastRows(usize),
    /// `n×1` to `n×d`.
    BroadcastCols(usize),
    /// Row `i` of an `n×c` input keeps column `idx[i]`, giving `n×1`.
    Pick(usize, Rc<[usize]>),
    /// Adjoint of `Pick`: places an `n×1` input into zeros at `idx[i]`.
    Scatter(usize, Rc<[usize]>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Sum(..) => "sum",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::Expand(..) => "expand",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::Pick(..) => "pick",
            Op::Scatter(..) => "scatter",
        }
    }

    fn inputs(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => [Some(a), Some(b)],
            Scale(a, _) | Shift(a) | Transpose(a) | Tanh(a) | Relu(a) | Exp(a) | Log(a)
            | Sqrt(a) | Sum(a) | SumRows(a) | SumCols(a) | Expand(a) | BroadcastRows(a)
            | BroadcastCols(a) => [Some(a), None],
            Pick(a, _) | Scatter(a, _) => [Some(a), None],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of operations, owned by one thread for its lifetime.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    checked: bool,
    fault: RefCell<Option<String>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that scans every produced value for NaN/Inf. The first
    /// offending op is reported by [`Graph::check`] and [`Graph::grad`].
    pub fn checked() -> Self {
        Self {
            checked: true,
            ..Self::default()
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf node. Whether it is differentiated depends only on the `wrt`
    /// list passed to [`Graph::grad`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(value))
    }

    /// Registers every entry of `params` as a leaf.
    pub fn bind<'g>(&'g self, params: &ParamSet) -> Bound<'g> {
        Bound {
            entries: params
                .iter()
                .map(|(name, t)| (name.to_string(), self.leaf(t.clone())))
                .collect(),
        }
    }

    /// Errors if checked mode observed a non-finite value.
    pub fn check(&self) -> Result<()> {
        match &*self.fault.borrow() {
            Some(op) => Err(Error::NonFinite { op: op.clone() }),
            None => Ok(()),
        }
    }

    fn push(&self, op: Op, value: Tensor) -> Var<'_> {
        if self.checked && !value.is_finite() {
            let mut fault = self.fault.borrow_mut();
            if fault.is_none() {
                *fault = Some(op.name().to_string());
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn owns(&self, v: Var<'_>) -> bool {
        std::ptr::eq(self, v.graph)
    }

    /// Gradients of a scalar `loss` with respect to each of `wrt`.
    ///
    /// Entries of `wrt` with no path to `loss` receive zeros. The returned
    /// vars live in this graph and are themselves differentiable.
    pub fn grad<'g>(&'g self, loss: Var<'g>, wrt: &[Var<'g>]) -> Result<Vec<Var<'g>>> {
        if !self.owns(loss) || wrt.iter().any(|w| !self.owns(*w)) {
            return Err(Error::ForeignGraph);
        }
        let [rows, cols] = loss.shape();
        if rows * cols != 1 {
            return Err(Error::NotScalar { rows, cols });
        }
        self.check()?;

        let last = loss.id;
        let mut reaches = vec![false; last + 1];
        for w in wrt {
            if w.id <= last {
                reaches[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in 0..=last {
                if !reaches[id] {
                    reaches[id] = nodes[id]
                        .op
                        .inputs()
                        .iter()
                        .flatten()
                        .any(|&i| reaches[i]);
                }
            }
        }

        let mut grads: Vec<Option<Var<'g>>> = vec![None; last + 1];
        if reaches[last] {
            grads[last] = Some(self.scalar(1.0));
        }
        for id in (0..=last).rev() {
            let Some(g) = grads[id] else { continue };
            if !reaches[id] {
                continue;
            }
            let op = self.nodes.borrow()[id].op.clone();
            self.backward(id, &op, g, &reaches, &mut grads);
        }

        let out = wrt
            .iter()
            .map(|w| {
                grads
                    .get(w.id)
                    .copied()
                    .flatten()
                    .unwrap_or_else(|| {
                        let [r, c] = w.shape();
                        self.leaf(Tensor::zeros(r, c))
                    })
            })
            .collect();
        self.check()?;
        Ok(out)
    }

    /// [`Graph::grad`] over a bound parameter set, keeping names.
    pub fn grad_params<'g>(&'g self, loss: Var<'g>, wrt: &Bound<'g>) -> Result<Bound<'g>> {
        let vars: Vec<_> = wrt.entries.iter().map(|(_, v)| *v).collect();
        let grads = self.grad(loss, &vars)?;
        Ok(Bound {
            entries: wrt
                .entries
                .iter()
                .zip(grads)
                .map(|((name, _), g)| (name.clone(), g))
                .collect(),
        })
    }

    fn backward<'g>(
        &'g self,
        id: usize,
        op: &Op,
        g: Var<'g>,
        reaches: &[bool],
        grads: &mut [Option<Var<'g>>],
    ) {
        let var = |i: usize| Var { graph: self, id: i };
        let y = var(id);
        let corrupt = CORRUPTED.with(Cell::get) == Some(op.name());
        let mut acc = |i: usize, contrib: &dyn Fn() -> Var<'g>| {
            if reaches[i] {
                let c = if corrupt { contrib().scale(1.1) } else { contrib() };
                grads[i] = Some(match grads[i] {
                    Some(prev) => prev + c,
                    None => c,
                });
            }
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|| g);
                acc(*b, &|| g);
            }
            Op::Sub(a, b) => {
                acc(*a, &|| g);
                acc(*b, &|| -g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (var(*a), var(*b));
                acc(*a, &|| g * vb);
                acc(*b, &|| g * va);
            }
            Op::Div(a, b) => {
                let vb = var(*b);
                acc(*a, &|| g / vb);
                acc(*b, &|| -((g * y) / vb));
            }
            Op::Scale(a, k) => acc(*a, &|| g * *k),
            Op::Shift(a) => acc(*a, &|| g),
            Op::MatMul(a, b) => {
                let (va, vb) = (var(*a), var(*b));
                acc(*a, &|| g.matmul(vb.t()));
                acc(*b, &|| va.t().matmul(g));
            }
            Op::Transpose(a) => acc(*a, &|| g.t()),
            Op::Tanh(a) => acc(*a, &|| g * (y * y).scale(-1.0).shift(1.0)),
            Op::Relu(a) => {
                let mask = self.value_of(*a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let mask = self.leaf(mask);
                acc(*a, &|| g * mask)
            }
            Op::Exp(a) => acc(*a, &|| g * y),
            Op::Log(a) => {
                let va = var(*a);
                acc(*a, &|| g / va)
            }
            Op::Sqrt(a) => acc(*a, &|| (g / y).scale(0.5)),
            Op::Sum(a) => {
                let [r, c] = var(*a).shape();
                acc(*a, &|| g.expand(r, c))
            }
            Op::SumRows(a) => {
                let [_, c] = var(*a).shape();
                acc(*a, &|| g.broadcast_cols(c))
            }
            Op::SumCols(a) => {
                let [r, _] = var(*a).shape();
                acc(*a, &|| g.broadcast_rows(r))
            }
            Op::Expand(a) => acc(*a, &|| g.sum()),
            Op::BroadcastRows(a) => acc(*a, &|| g.sum_cols()),
            Op::BroadcastCols(a) => acc(*a, &|| g.sum_rows()),
            Op::Pick(a, idx) => {
                let [_, c] = var(*a).shape();
                acc(*a, &|| g.scatter(idx.clone(), c))
            }
            Op::Scatter(a, idx) => acc(*a, &|| g.pick_rc(idx.clone())),
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> [usize; 2] {
        self.graph.value_of(self.id).shape()
    }

    /// Copy of the current value.
    pub fn value(&self) -> Tensor {
        self.graph.value_of(self.id).clone()
    }

    /// Value of a `1×1` node.
    pub fn item(&self) -> f64 {
        self.graph.value_of(self.id).item()
    }

    /// A leaf holding the same value; gradients do not flow through it.
    pub fn detach(&self) -> Var<'g> {
        self.graph.leaf(self.value())
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'g> {
        let out = f(&self.graph.value_of(self.id));
        self.graph.push(op, out)
    }

    fn binary(self, other: Var<'g>, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Tensor) -> Var<'g> {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "operands of `{}` belong to different graphs",
            op.name()
        );
        let out = {
            let a = self.graph.value_of(self.id);
            let b = self.graph.value_of(other.id);
            f(&a, &b)
        };
        self.graph.push(op, out)
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    pub fn t(self) -> Var<'g> {
        self.unary(Op::Transpose(self.id), Tensor::transpose)
    }

    pub fn scale(self, k: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, k), |a| a.map(|v| v * k))
    }

    /// Adds a constant to every entry.
    pub fn shift(self, k: f64) -> Var<'g> {
        self.unary(Op::Shift(self.id), |a| a.map(|v| v + k))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(Op::Tanh(self.id), |a| a.map(f64::tanh))
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |a| a.map(|v| v.max(0.0)))
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Op::Exp(self.id), |a| a.map(f64::exp))
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(Op::Log(self.id), |a| a.map(f64::ln))
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(Op::Sqrt(self.id), |a| a.map(f64::sqrt))
    }

    pub fn square(self) -> Var<'g> {
        self * self
    }

    /// Sum of all entries, `1×1`.
    pub fn sum(self) -> Var<'g> {
        self.unary(Op::Sum(self.id), |a| Tensor::scalar(a.sum()))
    }

    /// Mean of all entries. Panics on an empty tensor.
    pub fn mean(self) -> Var<'g> {
        let [r, c] = self.shape();
        assert!(r * c > 0, "mean of empty tensor");
        self.sum().scale(1.0 / (r * c) as f64)
    }

    /// Per-row sums, `n×d` to `n×1`.
    pub fn sum_rows(self) -> Var<'g> {
        self.unary(Op::SumRows(self.id), |a| {
            let data = (0..a.rows()).map(|r| a.row(r).iter().sum()).collect();
            Tensor::from_vec(a.rows(), 1, data)
        })
    }

    /// Per-column sums, `n×d` to `1×d`.
    pub fn sum_cols(self) -> Var<'g> {
        self.unary(Op::SumCols(self.id), |a| {
            let mut data = vec![0.0; a.cols()];
            for r in 0..a.rows() {
                for (d, v) in data.iter_mut().zip(a.row(r)) {
                    *d += v;
                }
            }
            Tensor::from_vec(1, a.cols(), data)
        })
    }

    /// Repeats a `1×1` value into an `rows×cols` tensor.
    pub fn expand(self, rows: usize, cols: usize) -> Var<'g> {
        self.unary(Op::Expand(self.id), |a| Tensor::full(rows, cols, a.item()))
    }

    /// Repeats a `1×d` row `n` times.
    pub fn broadcast_rows(self, n: usize) -> Var<'g> {
        self.unary(Op::BroadcastRows(self.id), |a| {
            assert_eq!(a.rows(), 1, "broadcast_rows expects a single row, got {:?}", a.shape());
            let mut data = Vec::with_capacity(n * a.cols());
            for _ in 0..n {
                data.extend_from_slice(a.data());
            }
            Tensor::from_vec(n, a.cols(), data)
        })
    }

    /// Repeats an `n×1` column `d` times.
    pub fn broadcast_cols(self, d: usize) -> Var<'g> {
        self.unary(Op::BroadcastCols(self.id), |a| {
            assert_eq!(a.cols(), 1, "broadcast_cols expects a single column, got {:?}", a.shape());
            let data = a
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, d))
                .collect();
            Tensor::from_vec(a.rows(), d, data)
        })
    }

    /// Gathers entry `(i, idx[i])` of every row into an `n×1` column.
    pub fn pick(self, idx: &[usize]) -> Var<'g> {
        self.pick_rc(idx.into())
    }

    fn pick_rc(self, idx: Rc<[usize]>) -> Var<'g> {
        let op = Op::Pick(self.id, idx.clone());
        self.unary(op, |a| {
            assert_eq!(a.rows(), idx.len(), "pick index count mismatch");
            let data = idx
                .iter()
                .enumerate()
                .map(|(r, &c)| a.get(r, c))
                .collect();
            Tensor::from_vec(a.rows(), 1, data)
        })
    }

    fn scatter(self, idx: Rc<[usize]>, cols: usize) -> Var<'g> {
        let op = Op::Scatter(self.id, idx.clone());
        self.unary(op, |a| {
            let mut out = Tensor::zeros(a.rows(), cols);
            for (r, &c) in idx.iter().enumerate() {
                out.set(r, c, a.get(r, 0));
            }
            out
        })
    }

    /// Row-wise log-softmax. The row maximum is subtracted as a constant,
    /// which leaves the function and all its derivatives unchanged.
    pub fn log_softmax_rows(self) -> Var<'g> {
        let [n, d] = self.shape();
        let max = {
            let v = self.graph.value_of(self.id);
            let data = (0..n)
                .map(|r| v.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            Tensor::from_vec(n, 1, data)
        };
        let shifted = self - self.graph.leaf(max).broadcast_cols(d);
        let lse = shifted.exp().sum_rows().ln();
        shifted - lse.broadcast_cols(d)
    }

    pub fn softmax_rows(self) -> Var<'g> {
        self.log_softmax_rows().exp()
    }

    /// Euclidean norm of each row, `n×1`.
    pub fn row_norms(self) -> Var<'g> {
        self.square().sum_rows().sqrt()
    }

    /// Euclidean norm of the whole tensor, `1×1`.
    pub fn l2_norm(self) -> Var<'g> {
        self.square().sum().sqrt()
    }

    /// Rows scaled to unit length. Zero rows produce non-finite values;
    /// callers that can see such rows validate first.
    pub fn normalize_rows(self) -> Var<'g> {
        let [_, d] = self.shape();
        self / self.row_norms().broadcast_cols(d)
    }

    /// Pairwise cosine similarities between the rows of `self` and `other`.
    pub fn cosine_matrix(self, other: Var<'g>) -> Var<'g> {
        self.normalize_rows().matmul(other.normalize_rows().t())
    }
}

macro_rules! elementwise {
    ($trait:ident, $method:ident, $variant:ident, $f:expr) => {
        impl<'g> ops::$trait for Var<'g> {
            type Output = Var<'g>;
            fn $method(self, rhs: Var<'g>) -> Var<'g> {
                self.binary(rhs, Op::$variant(self.id, rhs.id), |a, b| a.zip_map(b, $f))
            }
        }
    };
}

elementwise!(Add, add, Add, |x, y| x + y);
elementwise!(Sub, sub, Sub, |x, y| x - y);
elementwise!(Mul, mul, Mul, |x, y| x * y);
elementwise!(Div, div, Div, |x, y| x / y);

impl<'g> ops::Mul<f64> for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, k: f64) -> Var<'g> {
        self.scale(k)
    }
}

impl<'g> ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }
}

/// A [`ParamSet`] whose entries are vars in one graph.
#[derive(Clone, Debug)]
pub struct Bound<'g> {
    entries: Vec<(String, Var<'g>)>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'g>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), *v))
    }

    pub fn vars(&self) -> Vec<Var<'g>> {
        self.entries.iter().map(|(_, v)| *v).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entrywise combination of two bound sets with the same names.
    pub fn zip_with(&self, other: &Bound<'g>, f: impl Fn(Var<'g>, Var<'g>) -> Var<'g>) -> Bound<'g> {
        assert_eq!(self.len(), other.len(), "bound set size mismatch");
        Bound {
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|((n, a), (m, b))| {
                    assert_eq!(n, m, "bound set name mismatch");
                    (n.clone(), f(*a, *b))
                })
                .collect(),
        }
    }

    /// Snapshot of current values.
    pub fn values(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, v) in &self.entries {
            out.insert(name.clone(), v.value())
                .expect("bound names are unique");
        }
        out
    }
}

/// Whether meta-gradients include the Jacobian of the inner step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradOrder {
    /// Exact total derivative, including the inner-loss Hessian term.
    #[default]
    Exact,
    /// Outer gradient at the adapted point; the adaptation Jacobian is taken as identity.
    FirstOrder,
}

/// Result of differentiating an outer loss through inner descent steps.
#[derive(Clone, Debug)]
pub struct StepGradient {
    pub grad: ParamSet,
    pub adapted: ParamSet,
    /// Inner loss at the starting parameters.
    pub inner_loss: f64,
    /// Outer loss at the adapted parameters.
    pub outer_loss: f64,
}

/// Pins a closure to the higher-ranked signature expected by
/// [`grad_of`] and [`grad_through_step`] so it can be stored in a `let`.
pub fn objective<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Graph, &Bound<'g>) -> Result<Var<'g>>,
{
    f
}

/// Gradient of a scalar function of parameters, evaluated on a fresh graph.
pub fn grad_of<F>(params: &ParamSet, f: F) -> Result<(f64, ParamSet)>
where
    F: for<'g> Fn(&'g Graph, &Bound<'g>) -> Result<Var<'g>>,
{
    let graph = Graph::new();
    let bound = graph.bind(params);
    let loss = f(&graph, &bound)?;
    let grads = graph.grad_params(loss, &bound)?;
    let value = loss.item();
    let grads = grads.values();
    if !value.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite { op: "grad".into() });
    }
    Ok((value, grads))
}

/// `d/dθ outer(θ − α ∇inner(θ))`, one inner step.
pub fn grad_through_step<F, G>(
    params: &ParamSet,
    step_size: f64,
    order: GradOrder,
    inner: F,
    outer: G,
) -> Result<StepGradient>
where
    F: for<'g> Fn(&'g Graph, &Bound<'g>) -> Result<Var<'g>>,
    G: for<'g> Fn(&'g Graph, &Bound<'g>) -> Result<Var<'g>>,
{
    grad_through_steps(params, step_size, 1, order, inner, outer)
}

/// Like [`grad_through_step`] with `steps` unrolled inner descent steps.
pub fn grad_through_steps<F, G>(
    params: &ParamSet,
    step_size: f64,
    steps: usize,
    order: GradOrder,
    inner: F,
    outer: G,
) -> Result<StepGradient>
where
    F: for<'g> Fn(&'g Graph, &Bound<'g>) -> Result<Var<'g>>,
    G: for<'g> Fn(&'g Graph, &Bound<'g>) -> Result<Var<'g>>,
{
    if step_size < 0.0 || step_size.is_nan() {
        return Err(Error::NegativeStep(step_size));
    }
    let non_finite = |what: &str| Error::NonFinite { op: what.to_string() };

    match order {
        GradOrder::Exact => {
            let graph = Graph::new();
            let theta = graph.bind(params);
            let mut adapted = theta.clone();
            let mut inner_loss = None;
            for _ in 0..steps {
                let loss = inner(&graph, &adapted)?;
                inner_loss.get_or_insert(loss.item());
                let g = graph.grad_params(loss, &adapted)?;
                if !g.values().is_finite() {
                    return Err(non_finite("inner gradient"));
                }
                adapted = adapted.zip_with(&g, |p, gp| p - gp * step_size);
            }
            let outer_loss = outer(&graph, &adapted)?;
            let grad = graph.grad_params(outer_loss, &theta)?.values();
            let out = StepGradient {
                grad,
                adapted: adapted.values(),
                inner_loss: inner_loss.unwrap_or(f64::NAN),
                outer_loss: outer_loss.item(),
            };
            if !out.grad.is_finite() || !out.outer_loss.is_finite() {
                return Err(non_finite("meta-gradient"));
            }
            Ok(out)
        }
        GradOrder::FirstOrder => {
            let mut adapted = params.clone();
            let mut inner_loss = None;
            for _ in 0..steps {
                let (loss, g) = grad_of(&adapted, &inner)?;
                inner_loss.get_or_insert(loss);
                adapted = adapted.add_scaled(&g, -step_size)?;
            }
            let (outer_loss, grad) = grad_of(&adapted, &outer)?;
            Ok(StepGradient {
                grad,
                adapted,
                inner_loss: inner_loss.unwrap_or(f64::NAN),
                outer_loss,
            })
        }
    }
}
