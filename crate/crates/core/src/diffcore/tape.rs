//! Wengert tape over dense matrices.
//!
//! Every value is a 2-D `f64` matrix; scalars are `1×1`, row vectors `1×n`.
//! Binary elementwise ops broadcast singleton rows and columns. The backward
//! sweep records its own work as ordinary tape nodes, so a gradient is itself
//! a differentiable expression (double backward).

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    Square,
    Sqrt,
    Recip,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Offset(Var),
    /// Clamp with a zero gradient outside `[lo, hi]`.
    Clamp(Var, f64, f64),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    SumTo(Var),
    BroadcastTo(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    PadCols(Var, usize),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Mat,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape(m: &Mat) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Shape {
            expected: vec![a.0, a.1],
            actual: vec![b.0, b.1],
        }),
    }
}

fn sum_to(m: &Mat, target: (usize, usize)) -> Mat {
    let mut out = m.clone();
    if target.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if target.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Relu => x.max(0.0),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Recip => 1.0 / x,
            Unary::Abs => x.abs(),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(&self.nodes[v.0].value)
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(shape(m), (1, 1));
        m[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Mat, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (parameter or input).
    pub fn var(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Copies the value of `v` into a fresh constant, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let value = self.value(x).mapv(|a| kind.apply(a));
        let rg = self.rg(x);
        self.push(Op::Unary(kind, x), value, rg)
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        broadcast_shape(shape(va), shape(vb)).expect("incompatible shapes in elementwise op");
        let value = match kind {
            Binary::Add => va + vb,
            Binary::Sub => va - vb,
            Binary::Mul => va * vb,
            Binary::Div => va / vb,
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Binary(kind, a, b), value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Div, a, b)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(Unary::Recip, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) * c;
        let rg = self.rg(x);
        self.push(Op::Scale(x, c), value, rg)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) + c;
        let rg = self.rg(x);
        self.push(Op::Offset(x), value, rg)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).mapv(|a| a.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(Op::Clamp(x, lo, hi), value, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let va = if ta { va.t() } else { va.view() };
        let vb = if tb { vb.t() } else { vb.view() };
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dimensions differ");
        let value = va.dot(&vb);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul { a, b, ta, tb }, value, rg)
    }

    /// Sums over the axes that are singleton in `target`.
    pub fn sum_to(&mut self, x: Var, target: (usize, usize)) -> Var {
        if self.shape(x) == target {
            return x;
        }
        let value = sum_to(self.value(x), target);
        assert_eq!(shape(&value), target, "sum_to target incompatible");
        let rg = self.rg(x);
        self.push(Op::SumTo(x), value, rg)
    }

    pub fn broadcast_to(&mut self, x: Var, target: (usize, usize)) -> Var {
        if self.shape(x) == target {
            return x;
        }
        let value = self
            .value(x)
            .broadcast(target)
            .expect("broadcast_to target incompatible")
            .to_owned();
        let rg = self.rg(x);
        self.push(Op::BroadcastTo(x), value, rg)
    }

    /// Sum of all entries as a `1×1` node.
    pub fn sum(&mut self, x: Var) -> Var {
        self.sum_to(x, (1, 1))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums as a column.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let r = self.shape(x).0;
        self.sum_to(x, (r, 1))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Op::ConcatCols(parts.to_vec()), value, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + width]).to_owned();
        let rg = self.rg(x);
        self.push(Op::SliceCols(x, start), value, rg)
    }

    /// Embeds `x` in a zero matrix with `total` columns starting at `start`.
    pub fn pad_cols(&mut self, x: Var, start: usize, total: usize) -> Var {
        let (r, c) = self.shape(x);
        let mut value = Array2::zeros((r, total));
        value.slice_mut(s![.., start..start + c]).assign(self.value(x));
        let rg = self.rg(x);
        self.push(Op::PadCols(x, start), value, rg)
    }

    /// Per-row Euclidean norm as a column.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let sq = self.square(x);
        let s = self.row_sum(sq);
        self.sqrt(s)
    }

    /// Rescales each row to norm at most `max_norm`.
    pub fn clip_row_norm(&mut self, x: Var, max_norm: f64) -> Var {
        let norm = self.row_norm(x);
        let floor = self.clamp(norm, max_norm, f64::INFINITY);
        let inv = self.recip(floor);
        let factor = self.scale(inv, max_norm);
        self.mul(x, factor)
    }

    /// Reverse-mode gradient of the scalar `output` with respect to `wrt`.
    ///
    /// The backward sweep is recorded on the tape, so returned gradients can
    /// be differentiated again. Inputs unreachable from `output` get zeros.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.shape(output) != (1, 1) {
            let (r, c) = self.shape(output);
            return Err(Error::Contract(format!(
                "gradient requires a scalar output, got {r}x{c}"
            )));
        }
        let n = output.0 + 1;
        // Nodes on some path from a `wrt` leaf to the output.
        let mut reaches = vec![false; n];
        for w in wrt {
            if w.0 < n {
                reaches[w.0] = true;
            }
        }
        for i in 0..n {
            if reaches[i] {
                continue;
            }
            reaches[i] = match &self.nodes[i].op {
                Op::Leaf => false,
                Op::Unary(_, x)
                | Op::Scale(x, _)
                | Op::Offset(x)
                | Op::Clamp(x, _, _)
                | Op::SumTo(x)
                | Op::BroadcastTo(x)
                | Op::SliceCols(x, _)
                | Op::PadCols(x, _) => reaches[x.0],
                Op::Binary(_, a, b) | Op::MatMul { a, b, .. } => reaches[a.0] || reaches[b.0],
                Op::ConcatCols(parts) => parts.iter().any(|p| reaches[p.0]),
            };
        }

        let mut adj: Vec<Option<Var>> = vec![None; n];
        let seed = self.scalar_constant(1.0);
        adj[output.0] = Some(seed);

        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !reaches[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let y = Var(i);
            let mut contribs: Vec<(Var, Var)> = Vec::with_capacity(2);
            match op {
                Op::Leaf => {}
                Op::Unary(kind, x) => {
                    if reaches[x.0] {
                        let d = self.unary_vjp(kind, x, y, g);
                        contribs.push((x, d));
                    }
                }
                Op::Binary(kind, a, b) => {
                    let sa = self.shape(a);
                    let sb = self.shape(b);
                    if reaches[a.0] {
                        let d = match kind {
                            Binary::Add | Binary::Sub => g,
                            Binary::Mul => self.mul(g, b),
                            Binary::Div => self.div(g, b),
                        };
                        let d = self.sum_to(d, sa);
                        contribs.push((a, d));
                    }
                    if reaches[b.0] {
                        let d = match kind {
                            Binary::Add => g,
                            Binary::Sub => self.neg(g),
                            Binary::Mul => self.mul(g, a),
                            Binary::Div => {
                                let q = self.div(y, b);
                                let t = self.mul(g, q);
                                self.neg(t)
                            }
                        };
                        let d = self.sum_to(d, sb);
                        contribs.push((b, d));
                    }
                }
                Op::Scale(x, c) => {
                    if reaches[x.0] {
                        let d = self.scale(g, c);
                        contribs.push((x, d));
                    }
                }
                Op::Offset(x) => {
                    if reaches[x.0] {
                        contribs.push((x, g));
                    }
                }
                Op::Clamp(x, lo, hi) => {
                    if reaches[x.0] {
                        let mask = self
                            .value(x)
                            .mapv(|a| if a >= lo && a <= hi { 1.0 } else { 0.0 });
                        let m = self.constant(mask);
                        let d = self.mul(g, m);
                        contribs.push((x, d));
                    }
                }
                Op::MatMul { a, b, ta, tb } => {
                    if reaches[a.0] {
                        let d = if ta {
                            self.matmul_t(b, g, tb, true)
                        } else {
                            self.matmul_t(g, b, false, !tb)
                        };
                        contribs.push((a, d));
                    }
                    if reaches[b.0] {
                        let d = if tb {
                            self.matmul_t(g, a, true, ta)
                        } else {
                            self.matmul_t(a, g, !ta, false)
                        };
                        contribs.push((b, d));
                    }
                }
                Op::SumTo(x) => {
                    if reaches[x.0] {
                        let sx = self.shape(x);
                        let d = self.broadcast_to(g, sx);
                        contribs.push((x, d));
                    }
                }
                Op::BroadcastTo(x) => {
                    if reaches[x.0] {
                        let sx = self.shape(x);
                        let d = self.sum_to(g, sx);
                        contribs.push((x, d));
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(p).1;
                        if reaches[p.0] {
                            let d = self.slice_cols(g, start, w);
                            contribs.push((p, d));
                        }
                        start += w;
                    }
                }
                Op::SliceCols(x, start) => {
                    if reaches[x.0] {
                        let total = self.shape(x).1;
                        let d = self.pad_cols(g, start, total);
                        contribs.push((x, d));
                    }
                }
                Op::PadCols(x, start) => {
                    if reaches[x.0] {
                        let w = self.shape(x).1;
                        let d = self.slice_cols(g, start, w);
                        contribs.push((x, d));
                    }
                }
            }
            for (target, d) in contribs {
                adj[target.0] = Some(match adj[target.0] {
                    Some(prev) => self.add(prev, d),
                    None => d,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let zeros = Array2::zeros(self.shape(*w));
                    self.constant(zeros)
                }
            })
            .collect())
    }

    fn unary_vjp(&mut self, kind: Unary, x: Var, y: Var, g: Var) -> Var {
        match kind {
            Unary::Neg => self.neg(g),
            Unary::Exp => self.mul(g, y),
            Unary::Log => self.div(g, x),
            Unary::Tanh => {
                let y2 = self.square(y);
                let one_minus = self.neg(y2);
                let one_minus = self.offset(one_minus, 1.0);
                self.mul(g, one_minus)
            }
            Unary::Sigmoid => {
                let ny = self.neg(y);
                let one_minus = self.offset(ny, 1.0);
                let d = self.mul(y, one_minus);
                self.mul(g, d)
            }
            Unary::Softplus => {
                let s = self.sigmoid(x);
                self.mul(g, s)
            }
            Unary::Relu => {
                let mask = self.value(x).mapv(|a| if a > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                self.mul(g, m)
            }
            Unary::Square => {
                let twice = self.scale(x, 2.0);
                self.mul(g, twice)
            }
            Unary::Sqrt => {
                let d = self.div(g, y);
                self.scale(d, 0.5)
            }
            Unary::Recip => {
                let y2 = self.square(y);
                let d = self.mul(g, y2);
                self.neg(d)
            }
            Unary::Abs => {
                let sign = self.value(x).mapv(|a| a.signum());
                let m = self.constant(sign);
                self.mul(g, m)
            }
        }
    }

    /// Index of the first row containing a non-finite entry, if any.
    pub fn first_nonfinite_row(&self, v: Var) -> Option<usize> {
        let m = self.value(v);
        let mut bad = None;
        Zip::indexed(m).for_each(|(r, _), a| {
            if !a.is_finite() && bad.is_none_or(|b| r < b) {
                bad = Some(r);
            }
        });
        bad
    }
}
