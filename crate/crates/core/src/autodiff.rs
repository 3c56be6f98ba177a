//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in creation order; [`Var`] is a cheap
//! handle into it. Scalars are `1 x 1` matrices. Forward values are computed
//! eagerly with the same arithmetic as the plain [`DenseMatrix`] routines, so
//! a recorded graph reproduces a direct evaluation bit for bit.
//!
//! ```
//! use gplvm::autodiff::Tape;
//! use gplvm::linalg::DenseMatrix;
//!
//! let tape = Tape::new();
//! let x = tape.input("x", DenseMatrix::column(&[1.0, 2.0]));
//! let f = x.square().sum();
//! let grads = tape.backward(f).unwrap();
//! assert_eq!(grads.by_name("x").unwrap().as_slice(), &[2.0, 4.0]);
//! ```

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::likelihood::{diag_gaussian_kl, LikelihoodError, LowRankLoglik};
use crate::linalg::DenseMatrix;
use crate::mask::ObservationMask;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("backward needs a scalar output, got {0:?}")]
    NonScalarOutput((usize, usize)),
    #[error("tape is empty")]
    EmptyTape,
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Neg(usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Sin(usize),
    Cos(usize),
    Square(usize),
    FloorMin(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    Trace(usize),
    GatherRows(usize, Vec<usize>),
    InterleaveCols(usize, usize),
    MulRowBroadcast(usize, usize),
    MulScalar(usize, usize),
    LowRankLoglik {
        phi: usize,
        sigma2: usize,
        cache: Box<LowRankLoglik>,
    },
    DiagKl {
        mu: usize,
        log_s: usize,
    },
}

struct Node {
    op: Op,
    value: DenseMatrix,
    needs_grad: bool,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    names: RefCell<BTreeMap<String, usize>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: DenseMatrix, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Named differentiable leaf.
    pub fn input(&self, name: &str, value: DenseMatrix) -> Var<'_> {
        let v = self.push(Op::Leaf, value, true);
        self.names.borrow_mut().insert(name.to_string(), v.id);
        v
    }

    /// Leaf that receives no gradient.
    pub fn constant(&self, value: DenseMatrix) -> Var<'_> {
        self.push(Op::Leaf, value, false)
    }

    fn unary(&self, a: usize, op: Op, f: impl Fn(&DenseMatrix) -> DenseMatrix) -> Var<'_> {
        let value = f(&self.nodes.borrow()[a].value);
        let needs = self.needs(&[a]);
        self.push(op, value, needs)
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        op: Op,
        f: impl Fn(&DenseMatrix, &DenseMatrix) -> Result<DenseMatrix>,
    ) -> Result<Var<'_>> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)?
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(op, value, needs))
    }

    /// Reverse sweep from a scalar output. Every differentiable leaf reachable
    /// from `output` gets an adjoint; unreachable inputs get zeros.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        let shape = nodes[output.id].value.shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarOutput(shape));
        }
        let mut adj: Vec<Option<DenseMatrix>> = vec![None; output.id + 1];
        adj[output.id] = Some(DenseMatrix::scalar(1.0));
        for id in (0..=output.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                adj[id] = Some(g);
                continue;
            }
            propagate(&nodes, node, &g, &mut adj);
        }
        let mut by_id = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let (r, c) = node.value.shape();
                let g = adj
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| DenseMatrix::zeros(r, c));
                by_id.insert(id, g);
            }
        }
        Ok(Gradients {
            by_id,
            names: self.names.borrow().clone(),
        })
    }
}

fn accumulate(adj: &mut [Option<DenseMatrix>], nodes: &[Node], id: usize, g: DenseMatrix) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut adj[id] {
        Some(acc) => {
            for (a, v) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &DenseMatrix, adj: &mut [Option<DenseMatrix>]) {
    let val = |i: usize| &nodes[i].value;
    let mut acc = |i: usize, m: DenseMatrix| accumulate(adj, nodes, i, m);
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(*a, g.clone());
            acc(*b, g.clone());
        }
        Op::Sub(a, b) => {
            acc(*a, g.clone());
            acc(*b, g.scale(-1.0));
        }
        Op::Neg(a) => acc(*a, g.scale(-1.0)),
        Op::Mul(a, b) => {
            acc(*a, g.zip_map(val(*b), |g, y| g * y));
            acc(*b, g.zip_map(val(*a), |g, x| g * x));
        }
        Op::Div(a, b) => {
            let (x, y) = (val(*a), val(*b));
            acc(*a, g.zip_map(y, |g, y| g / y));
            let gb = DenseMatrix::from_fn(g.rows(), g.cols(), |r, c| {
                -g[(r, c)] * x[(r, c)] / (y[(r, c)] * y[(r, c)])
            });
            acc(*b, gb);
        }
        Op::Scale(a, s) => acc(*a, g.scale(*s)),
        Op::AddScalar(a) => acc(*a, g.clone()),
        Op::Exp(a) => acc(*a, g.zip_map(&node.value, |g, e| g * e)),
        Op::Log(a) => acc(*a, g.zip_map(val(*a), |g, x| g / x)),
        Op::Sqrt(a) => acc(*a, g.zip_map(&node.value, |g, s| g * 0.5 / s)),
        Op::Sin(a) => acc(*a, g.zip_map(val(*a), |g, x| g * x.cos())),
        Op::Cos(a) => acc(*a, g.zip_map(val(*a), |g, x| -g * x.sin())),
        Op::Square(a) => acc(*a, g.zip_map(val(*a), |g, x| 2.0 * x * g)),
        Op::FloorMin(a, c) => {
            let c = *c;
            acc(*a, g.zip_map(val(*a), |g, x| if x > c { g } else { 0.0 }));
        }
        Op::MatMul(a, b) => {
            acc(*a, g.matmul_t(val(*b)).expect("shapes fixed at record time"));
            acc(*b, val(*a).t_matmul(g).expect("shapes fixed at record time"));
        }
        Op::Transpose(a) => acc(*a, g.transpose()),
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            acc(*a, DenseMatrix::filled(r, c, g.item()));
        }
        Op::Trace(a) => {
            let n = val(*a).rows();
            let mut m = DenseMatrix::zeros(n, n);
            m.add_diag(g.item());
            acc(*a, m);
        }
        Op::GatherRows(a, idx) => {
            let src = val(*a);
            let mut m = DenseMatrix::zeros(src.rows(), src.cols());
            for (k, &r) in idx.iter().enumerate() {
                for (d, v) in m.row_mut(r).iter_mut().zip(g.row(k)) {
                    *d += v;
                }
            }
            acc(*a, m);
        }
        Op::InterleaveCols(a, b) => {
            let (r, c) = val(*a).shape();
            acc(*a, DenseMatrix::from_fn(r, c, |i, j| g[(i, 2 * j)]));
            acc(*b, DenseMatrix::from_fn(r, c, |i, j| g[(i, 2 * j + 1)]));
        }
        Op::MulRowBroadcast(a, b) => {
            let (x, s) = (val(*a), val(*b));
            acc(
                *a,
                DenseMatrix::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * s[(0, j)]),
            );
            let mut gs = DenseMatrix::zeros(1, g.cols());
            for i in 0..g.rows() {
                for (j, d) in gs.row_mut(0).iter_mut().enumerate() {
                    *d += g[(i, j)] * x[(i, j)];
                }
            }
            acc(*b, gs);
        }
        Op::MulScalar(a, s) => {
            let (x, sv) = (val(*a), val(*s).item());
            acc(*a, g.scale(sv));
            let gs: f64 = g.as_slice().iter().zip(x.as_slice()).map(|(g, x)| g * x).sum();
            acc(*s, DenseMatrix::scalar(gs));
        }
        Op::LowRankLoglik { phi, sigma2, cache } => {
            let gv = g.item();
            let (dphi, ds2) = cache.gradient(val(*phi));
            acc(*phi, dphi.scale(gv));
            acc(*sigma2, DenseMatrix::scalar(gv * ds2));
        }
        Op::DiagKl { mu, log_s } => {
            let gv = g.item();
            acc(*mu, val(*mu).scale(gv));
            acc(*log_s, val(*log_s).map(|v| gv * (0.5 * (v.exp() - 1.0))));
        }
    }
}

fn same_shape(op: &'static str, a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Borrow of the forward value.
    pub fn value(&self) -> Ref<'t, DenseMatrix> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    /// Forward value of a `1 x 1` node.
    pub fn scalar(&self) -> f64 {
        self.value().item()
    }

    fn elementwise(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.tape.binary(self.id, other.id, op, |a, b| {
            same_shape(name, a, b)?;
            Ok(a.zip_map(b, f))
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Elementwise quotient.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Neg(self.id), |a| a.map(|x| -x))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::Scale(self.id, c), |a| a.map(|x| x * c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.tape
            .unary(self.id, Op::AddScalar(self.id), |a| a.map(|x| x + c))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Exp(self.id), |a| a.map(f64::exp))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Log(self.id), |a| a.map(f64::ln))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sqrt(self.id), |a| a.map(f64::sqrt))
    }

    pub fn sin(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sin(self.id), |a| a.map(f64::sin))
    }

    pub fn cos(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Cos(self.id), |a| a.map(f64::cos))
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Square(self.id), |a| a.map(|x| x * x))
    }

    /// `max(x, c)` elementwise; the gradient is zero where the floor is active.
    pub fn floor_min(self, c: f64) -> Var<'t> {
        self.tape
            .unary(self.id, Op::FloorMin(self.id, c), |a| a.map(|x| x.max(c)))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape
            .binary(self.id, other.id, Op::MatMul(self.id, other.id), |a, b| {
                if a.cols() != b.rows() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "matmul",
                        left: a.shape(),
                        right: b.shape(),
                    });
                }
                Ok(a.matmul(b).expect("checked"))
            })
    }

    pub fn t(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Transpose(self.id), DenseMatrix::transpose)
    }

    /// Sum of all entries, accumulated in row-major order.
    pub fn sum(self) -> Var<'t> {
        self.tape
            .unary(self.id, Op::Sum(self.id), |a| DenseMatrix::scalar(a.sum()))
    }

    pub fn trace(self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.0 != shape.1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "trace",
                left: shape,
                right: (shape.1, shape.0),
            });
        }
        Ok(self
            .tape
            .unary(self.id, Op::Trace(self.id), |a| DenseMatrix::scalar(a.trace())))
    }

    /// Row `k` of the result is row `idx[k]` of `self`.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if let Some(&bad) = idx.iter().find(|&&r| r >= shape.0) {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_rows",
                left: shape,
                right: (bad, shape.1),
            });
        }
        let owned = idx.to_vec();
        Ok(self.tape.unary(self.id, Op::GatherRows(self.id, owned), |a| {
            a.select_rows(idx)
        }))
    }

    /// Columns `2j` and `2j + 1` of the result are column `j` of `self` and
    /// of `other`.
    pub fn interleave_cols(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(
            self.id,
            other.id,
            Op::InterleaveCols(self.id, other.id),
            |a, b| {
                same_shape("interleave_cols", a, b)?;
                Ok(DenseMatrix::from_fn(a.rows(), 2 * a.cols(), |r, c| {
                    if c % 2 == 0 {
                        a[(r, c / 2)]
                    } else {
                        b[(r, c / 2)]
                    }
                }))
            },
        )
    }

    /// Scales column `j` by entry `j` of the `1 x cols` row vector `row`.
    pub fn mul_row_broadcast(self, row: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(
            self.id,
            row.id,
            Op::MulRowBroadcast(self.id, row.id),
            |a, s| {
                if s.rows() != 1 || s.cols() != a.cols() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "mul_row_broadcast",
                        left: a.shape(),
                        right: s.shape(),
                    });
                }
                Ok(DenseMatrix::from_fn(a.rows(), a.cols(), |r, c| a[(r, c)] * s[(0, c)]))
            },
        )
    }

    /// Multiplies every entry by the `1 x 1` node `s`.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        self.tape
            .binary(self.id, s.id, Op::MulScalar(self.id, s.id), |a, s| {
                if s.shape() != (1, 1) {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "mul_scalar",
                        left: a.shape(),
                        right: s.shape(),
                    });
                }
                let v = s.item();
                Ok(a.map(|x| x * v))
            })
    }

    /// `Σ_j log N(y_j | 0, ΦΦᵀ + σ²I)` with `self` as `Φ` and `sigma2` a
    /// `1 x 1` node, evaluated and differentiated through the capacitance
    /// factor.
    pub fn lowrank_gaussian_loglik(
        self,
        sigma2: Var<'t>,
        y: &DenseMatrix,
        mask: Option<&ObservationMask>,
    ) -> Result<Var<'t>> {
        let s2_shape = sigma2.shape();
        if s2_shape != (1, 1) {
            return Err(AutodiffError::ShapeMismatch {
                op: "lowrank_gaussian_loglik",
                left: self.shape(),
                right: s2_shape,
            });
        }
        let cache = {
            let nodes = self.tape.nodes.borrow();
            LowRankLoglik::evaluate(&nodes[self.id].value, nodes[sigma2.id].value.item(), y, mask)?
        };
        let value = DenseMatrix::scalar(cache.value);
        let needs = self.tape.needs(&[self.id, sigma2.id]);
        Ok(self.tape.push(
            Op::LowRankLoglik {
                phi: self.id,
                sigma2: sigma2.id,
                cache: Box::new(cache),
            },
            value,
            needs,
        ))
    }

    /// `KL(N(μ, diag exp(log_s)) ‖ N(0, I))` summed over rows; `self` is `μ`.
    pub fn diag_kl(self, log_s: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(
            self.id,
            log_s.id,
            Op::DiagKl {
                mu: self.id,
                log_s: log_s.id,
            },
            |mu, ls| {
                same_shape("diag_kl", mu, ls)?;
                Ok(DenseMatrix::scalar(diag_gaussian_kl(mu, ls)))
            },
        )
    }
}

/// Adjoints of the differentiable leaves after one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_id: BTreeMap<usize, DenseMatrix>,
    names: BTreeMap<String, usize>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&DenseMatrix> {
        self.by_id.get(&var.id)
    }

    pub fn by_name(&self, name: &str) -> Option<&DenseMatrix> {
        self.names.get(name).and_then(|id| self.by_id.get(id))
    }

    /// `(name, gradient)` for every named input, in name order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &DenseMatrix)> {
        self.names
            .iter()
            .filter_map(|(n, id)| self.by_id.get(id).map(|g| (n.as_str(), g)))
    }
}

/// Worst relative error between tape gradients and central differences
/// `(f(x+h) − f(x−h)) / 2h` over every entry of every input. The graph is
/// rebuilt on a fresh tape for each evaluation, so it must be a deterministic
/// function of its inputs (fix any seeds inside `graph`). Relative error uses
/// the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn gradcheck<F>(inputs: &[(&str, DenseMatrix)], h: f64, graph: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |values: &[DenseMatrix]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs
            .iter()
            .zip(values)
            .map(|((n, _), v)| tape.input(n, v.clone()))
            .collect();
        Ok(graph(&tape, &vars)?.scalar())
    };
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|(n, v)| tape.input(n, v.clone())).collect();
    let out = graph(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut values: Vec<DenseMatrix> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("input leaf").clone();
        for e in 0..values[k].as_slice().len() {
            let orig = values[k].as_slice()[e];
            values[k].as_mut_slice()[e] = orig + h;
            let fp = eval(&values)?;
            values[k].as_mut_slice()[e] = orig - h;
            let fm = eval(&values)?;
            values[k].as_mut_slice()[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.as_slice()[e];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
