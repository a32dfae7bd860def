use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::{gelu, gelu_grad, sigmoid, softplus, Real};

use super::params::{ParamId, ParamStore};
use super::Tensor;

/// Variance floor inside the layer-norm square root.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Gelu,
    Silu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Abs,
    Square,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Backward rule for an operation implemented outside the tape.
///
/// Receives the forward input values, the forward output and the upstream
/// gradient; returns one gradient per input (`None` where none flows).
pub trait CustomBackward<T>: Send {
    fn backward(&self, inputs: &[&[T]], output: &[T], grad_output: &[T]) -> Vec<Option<Vec<T>>>;
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Unary(Unary, Var),
    Affine(Var, T),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Sum(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        func: Box<dyn CustomBackward<T>>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of one forward pass.
///
/// Values are computed eagerly as operations are added. A single call to
/// [`Tape::backward`] is allowed; a second call fails until [`Tape::reset`].
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    params_require_grad: bool,
    finished: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            params_require_grad: true,
            finished: false,
        }
    }

    /// A tape whose parameters are bound as constants.
    pub fn inference() -> Self {
        Tape {
            params_require_grad: false,
            ..Self::new()
        }
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.finished = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape consistent")
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn variable(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?.with_grad(true);
        Ok(self.leaf(&t))
    }

    /// Binds a stored parameter, reusing the node if already bound.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let rg = self.params_require_grad;
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, rg);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(binary_name(kind), self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<T> = match kind {
            Binary::Add => va.iter().zip(vb).map(|(&x, &y)| x + y).collect(),
            Binary::Sub => va.iter().zip(vb).map(|(&x, &y)| x - y).collect(),
            Binary::Mul => va.iter().zip(vb).map(|(&x, &y)| x * y).collect(),
            Binary::Div => va.iter().zip(vb).map(|(&x, &y)| x / y).collect(),
        };
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn check_row(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr.len() != 1 || sx.last() != Some(&sr[0]) || sr[0] == 0 {
            return Err(Error::shape(op, sx, sr));
        }
        Ok(sr[0])
    }

    /// `x + row` with `row` repeated over every leading index.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.check_row("add_row", x, row)?;
        let r = self.value(row);
        let out: Vec<T> = self
            .value(x)
            .chunks(n)
            .flat_map(|c| c.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(shape, out, Op::AddRow(x, row), rg))
    }

    /// `x * row` with `row` repeated over every leading index.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.check_row("mul_row", x, row)?;
        let r = self.value(row);
        let out: Vec<T> = self
            .value(x)
            .chunks(n)
            .flat_map(|c| c.iter().zip(r).map(|(&a, &b)| a * b))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(shape, out, Op::MulRow(x, row), rg))
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let v = self.value(x);
        if kind == Unary::Log {
            if let Some((index, &value)) = v.iter().enumerate().find(|(_, &a)| a <= T::zero()) {
                return Err(Error::Domain {
                    op: "log",
                    index,
                    value: value.to_f64_lossy(),
                });
            }
        }
        let f: fn(T) -> T = match kind {
            Unary::Relu => |a| a.max(T::zero()),
            Unary::Gelu => gelu,
            Unary::Silu => |a| a * sigmoid(a),
            Unary::Sigmoid => sigmoid,
            Unary::Softplus => softplus,
            Unary::Exp => |a| a.exp(),
            Unary::Log => |a| a.ln(),
            Unary::Abs => |a| a.abs(),
            Unary::Square => |a| a * a,
            Unary::Neg => |a| -a,
        };
        let out = v.iter().map(|&a| f(a)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Unary(kind, x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Silu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).iter().map(|&a| scale * a + shift).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    /// Layer normalization over the last dimension followed by `gain * xhat + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if d < 2 {
            return Err(Error::InvalidDimension(format!(
                "layernorm needs a last dimension of at least 2, got {sx:?}"
            )));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layernorm", &sx, self.shape(gain)));
        }
        let eps = T::c(LAYERNORM_EPS);
        let dn = T::c(d as f64);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = self.value(x).len() / d;
        let mut xhat = Vec::with_capacity(rows * d);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for row in self.value(x).chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * is;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            sx,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::c(self.value(x).len().max(1) as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let v = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), v, Op::Reshape(x), rg))
    }

    /// Columns `start..start + len` of a rank-2 node.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || start + len > sx[1] {
            return Err(Error::shape("slice_cols", sx, &[start, len]));
        }
        let (m, n) = (sx[0], sx[1]);
        let v = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&v[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![m, len], out, Op::SliceCols { x, start }, rg))
    }

    /// Concatenates rank-2 nodes with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(&p) => self.shape(p).first().copied().unwrap_or(0),
            None => return Err(Error::InvalidDimension("concat of nothing".into())),
        };
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != m {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), s));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let n = self.shape(p)[1];
                out.extend_from_slice(&self.value(p)[i * n..(i + 1) * n]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Selects rows of a rank-2 node (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || rows.iter().any(|&r| r >= sx[0]) {
            return Err(Error::shape("gather_rows", sx, &[rows.len()]));
        }
        let n = sx[1];
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&v[r * n..(r + 1) * n]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![rows.len(), n],
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<T>,
        func: Box<dyn CustomBackward<T>>,
    ) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::InvalidDimension(format!(
                "custom op output shape {shape:?} does not hold {} values",
                value.len()
            )));
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                func,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.finished {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward", &self.nodes[loss.0].shape, &[]));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let n = nodes[b.0].shape[1];
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    accumulate(&mut grads, nodes, *a, |ga| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                ga[i * k + p] += dot(grow, &vb[p * n..(p + 1) * n]);
                            }
                        }
                    });
                    accumulate(&mut grads, nodes, *b, |gb| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                axpy(va[i * k + p], grow, &mut gb[p * n..(p + 1) * n]);
                            }
                        }
                    });
                }
                Op::Binary(kind, a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    match kind {
                        Binary::Add => {
                            accumulate(&mut grads, nodes, *a, |ga| add_into(ga, &g));
                            accumulate(&mut grads, nodes, *b, |gb| add_into(gb, &g));
                        }
                        Binary::Sub => {
                            accumulate(&mut grads, nodes, *a, |ga| add_into(ga, &g));
                            accumulate(&mut grads, nodes, *b, |gb| {
                                gb.iter_mut().zip(&g).for_each(|(o, &x)| *o -= x)
                            });
                        }
                        Binary::Mul => {
                            accumulate(&mut grads, nodes, *a, |ga| {
                                for i in 0..g.len() {
                                    ga[i] += g[i] * vb[i];
                                }
                            });
                            accumulate(&mut grads, nodes, *b, |gb| {
                                for i in 0..g.len() {
                                    gb[i] += g[i] * va[i];
                                }
                            });
                        }
                        Binary::Div => {
                            accumulate(&mut grads, nodes, *a, |ga| {
                                for i in 0..g.len() {
                                    ga[i] += g[i] / vb[i];
                                }
                            });
                            accumulate(&mut grads, nodes, *b, |gb| {
                                for i in 0..g.len() {
                                    gb[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                                }
                            });
                        }
                    }
                }
                Op::AddRow(x, row) => {
                    let n = nodes[row.0].shape[0];
                    accumulate(&mut grads, nodes, *x, |gx| add_into(gx, &g));
                    accumulate(&mut grads, nodes, *row, |gr| {
                        for c in g.chunks(n) {
                            add_into(gr, c);
                        }
                    });
                }
                Op::MulRow(x, row) => {
                    let n = nodes[row.0].shape[0];
                    let (vx, vr) = (&nodes[x.0].value, &nodes[row.0].value);
                    accumulate(&mut grads, nodes, *x, |gx| {
                        for (i, (o, &gi)) in gx.iter_mut().zip(&g).enumerate() {
                            *o += gi * vr[i % n];
                        }
                    });
                    accumulate(&mut grads, nodes, *row, |gr| {
                        for (gc, xc) in g.chunks(n).zip(vx.chunks(n)) {
                            for j in 0..n {
                                gr[j] += gc[j] * xc[j];
                            }
                        }
                    });
                }
                Op::Unary(kind, x) => {
                    let vx = &nodes[x.0].value;
                    let y = &node.value;
                    let kind = *kind;
                    accumulate(&mut grads, nodes, *x, |gx| {
                        for i in 0..g.len() {
                            let a = vx[i];
                            let d = match kind {
                                Unary::Relu => {
                                    if a > T::zero() {
                                        T::one()
                                    } else {
                                        T::zero()
                                    }
                                }
                                Unary::Gelu => gelu_grad(a),
                                Unary::Silu => {
                                    let s = sigmoid(a);
                                    s * (T::one() + a * (T::one() - s))
                                }
                                Unary::Sigmoid => y[i] * (T::one() - y[i]),
                                Unary::Softplus => sigmoid(a),
                                Unary::Exp => y[i],
                                Unary::Log => T::one() / a,
                                Unary::Abs => {
                                    if a > T::zero() {
                                        T::one()
                                    } else if a < T::zero() {
                                        -T::one()
                                    } else {
                                        T::zero()
                                    }
                                }
                                Unary::Square => T::c(2.0) * a,
                                Unary::Neg => -T::one(),
                            };
                            gx[i] += g[i] * d;
                        }
                    });
                }
                Op::Affine(x, s) => {
                    let s = *s;
                    accumulate(&mut grads, nodes, *x, |gx| {
                        gx.iter_mut().zip(&g).for_each(|(o, &v)| *o += s * v)
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = nodes[gain.0].shape[0];
                    let vg = &nodes[gain.0].value;
                    let dn = T::c(d as f64);
                    accumulate(&mut grads, nodes, *gain, |gg| {
                        for (gc, xc) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] += gc[j] * xc[j];
                            }
                        }
                    });
                    accumulate(&mut grads, nodes, *bias, |gb| {
                        for gc in g.chunks(d) {
                            add_into(gb, gc);
                        }
                    });
                    accumulate(&mut grads, nodes, *x, |gx| {
                        for (r, (gc, xc)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                            let mut sum_g = T::zero();
                            let mut sum_gx = T::zero();
                            for j in 0..d {
                                let gh = gc[j] * vg[j];
                                sum_g += gh;
                                sum_gx += gh * xc[j];
                            }
                            let k = inv_std[r] / dn;
                            for j in 0..d {
                                let gh = gc[j] * vg[j];
                                gx[r * d + j] += k * (dn * gh - sum_g - xc[j] * sum_gx);
                            }
                        }
                    });
                }
                Op::Sum(x) => {
                    let g0 = g[0];
                    accumulate(&mut grads, nodes, *x, |gx| gx.iter_mut().for_each(|o| *o += g0));
                }
                Op::Reshape(x) => {
                    accumulate(&mut grads, nodes, *x, |gx| add_into(gx, &g));
                }
                Op::SliceCols { x, start } => {
                    let n = nodes[x.0].shape[1];
                    let len = node.shape[1];
                    accumulate(&mut grads, nodes, *x, |gx| {
                        for (i, gc) in g.chunks(len).enumerate() {
                            add_into(&mut gx[i * n + start..i * n + start + len], gc);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = node.shape[1];
                    let mut offset = 0;
                    for p in parts {
                        let n = nodes[p.0].shape[1];
                        accumulate(&mut grads, nodes, *p, |gp| {
                            for (i, gc) in g.chunks(total).enumerate() {
                                add_into(&mut gp[i * n..(i + 1) * n], &gc[offset..offset + n]);
                            }
                        });
                        offset += n;
                    }
                }
                Op::GatherRows { x, rows } => {
                    let n = node.shape[1];
                    accumulate(&mut grads, nodes, *x, |gx| {
                        for (gc, &r) in g.chunks(n).zip(rows) {
                            add_into(&mut gx[r * n..(r + 1) * n], gc);
                        }
                    });
                }
                Op::Custom { inputs, func } => {
                    let values: Vec<&[T]> = inputs.iter().map(|v| nodes[v.0].value.as_slice()).collect();
                    let contributions = func.backward(&values, &node.value, &g);
                    for (v, c) in inputs.iter().zip(contributions) {
                        if let Some(c) = c {
                            accumulate(&mut grads, nodes, *v, |gv| add_into(gv, &c));
                        }
                    }
                }
            }
            grads[idx] = Some(g);
        }
        self.finished = true;
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` when no path exists.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }

    /// One gradient buffer per stored parameter, zero where unused.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Vec<T>> {
        store
            .ids()
            .map(|id| match self.param(id) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); store.get(id).numel()],
            })
            .collect()
    }
}

fn binary_name(kind: Binary) -> &'static str {
    match kind {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
        Binary::Div => "div",
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, f: impl FnOnce(&mut [T])) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]);
    f(buf);
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub(crate) fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (mut s0, mut s1, mut s2, mut s3) = (T::zero(), T::zero(), T::zero(), T::zero());
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for i in chunks * 4..n {
        s0 += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3)
}

/// `out += a[m,k] * b[k,n]`.
pub(crate) fn matmul_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], orow);
        }
    }
}
