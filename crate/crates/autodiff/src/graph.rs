use crate::broadcast::{broadcast_shape, Layout};
use crate::error::{AutodiffError, Result};
use crate::float::{gemm, Float};
use crate::tensor::{numel, Tensor};

/// Arguments of `log` and denominators of `div` are kept at least this far from 0.
pub const CLAMP_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<F> {
    Leaf,
    Add(Var, Var, Layout),
    Sub(Var, Var, Layout),
    Mul(Var, Var, Layout),
    Div(Var, Var, Layout),
    Neg(Var),
    Scale(Var, F),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Powf(Var, F),
    Clamp(Var, F, F),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_a: bool,
        trans_b: bool,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<F>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<F>,
    },
    SumAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    ProdAxis {
        x: Var,
        axis: usize,
    },
    LogSumExpAxis {
        x: Var,
        axis: usize,
    },
    NormalizeSum {
        x: Var,
        axis: usize,
        sums: Vec<F>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        col: Vec<F>,
    },
    AvgPool2d {
        x: Var,
        k: usize,
    },
}

pub(crate) struct Node<F> {
    pub(crate) value: Tensor<F>,
    pub(crate) op: Op<F>,
    pub(crate) requires_grad: bool,
}

/// Gradients produced by one [`Graph::backward`] call, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub(crate) grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of the output with respect to `var`; `None` when `var` does not
    /// require gradients or the output does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Define-by-run record of primitive applications in topological order.
pub struct Graph<F: Float> {
    pub(crate) nodes: Vec<Node<F>>,
    pub(crate) backward_done: bool,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
pub(crate) fn axis_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn gelu_parts<F: Float>(x: F) -> (F, F) {
    // tanh approximation; returns (value, derivative)
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let one = F::one();
    let x3 = x * x * x;
    let t = (c * (x + a * x3)).tanh();
    let value = half * x * (one + t);
    let dt = c * (one + F::from_f64(3.0) * a * x * x);
    let deriv = half * (one + t) + half * x * (one - t * t) * dt;
    (value, deriv)
}

pub(crate) fn stable_sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn clamp_denominator<F: Float>(b: F) -> F {
    let eps = F::from_f64(CLAMP_EPS);
    if b.abs() >= eps {
        b
    } else if b < F::zero() {
        -eps
    } else {
        eps
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient (parameters, inputs under test).
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without gradient (data, masks, fixed encodings).
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: F) -> Var {
        self.constant(Tensor::scalar(v))
    }

    // ── elementwise binary ──────────────────────────────────────────

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<(Tensor<F>, Layout)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or(AutodiffError::ShapeMismatch {
            op,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let layout = Layout::new(&sa, &sb, &out_shape);
        let n = numel(&out_shape);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = vec![F::zero(); n];
        layout.for_each(n, |i, ia, ib| out[i] = f(da[ia], db[ib]));
        Ok((Tensor::from_parts(out_shape, out), layout))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, l) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b, l), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, l) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b, l), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, l) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b, l), rg))
    }

    /// Division with the denominator clamped away from zero by [`CLAMP_EPS`].
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, l) = self.binary("div", a, b, |x, y| x / clamp_denominator(y))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Div(a, b, l), rg))
    }

    // ── elementwise unary ───────────────────────────────────────────

    fn unary(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.neg(x);
        self.add_scalar(n, F::one())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    /// Natural logarithm of `max(x, CLAMP_EPS)`.
    pub fn log(&mut self, x: Var) -> Var {
        let eps = F::from_f64(CLAMP_EPS);
        self.unary(x, Op::Log(x), |v| v.max(eps).ln())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), stable_sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |v| gelu_parts(v).0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(F::zero()))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    /// `x^p` for non-negative `x`.
    pub fn powf(&mut self, x: Var, p: F) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < F::zero()) {
            return Err(AutodiffError::InvalidArgument {
                op: "powf",
                msg: "base must be non-negative".into(),
            });
        }
        Ok(self.unary(x, Op::Powf(x, p), |v| v.powf(p)))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi))
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// `[..., k] x [k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k.max(1);
        let mut out = vec![F::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let mut shape = sa;
        *shape.last_mut().expect("rank >= 1") = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// Batched `op(a) x op(b)` over rank-3 operands, `op` optionally transposing
    /// the two trailing axes.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || AutodiffError::ShapeMismatch {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(err());
        }
        let (m, k) = if trans_a {
            (sa[2], sa[1])
        } else {
            (sa[1], sa[2])
        };
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if k != kb {
            return Err(err());
        }
        let batch = sa[0];
        let mut out = vec![F::zero(); batch * m * n];
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    trans_a,
                    &db[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_a,
                trans_b,
            },
            rg,
        ))
    }

    // ── row-wise normalizations over the last axis ──────────────────

    fn last_axis(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        match s.last() {
            Some(&d) if d > 0 => Ok((numel(s) / d, d)),
            _ => Err(AutodiffError::InvalidArgument {
                op,
                msg: format!("needs a non-empty last axis, got shape {s:?}"),
            }),
        }
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.last_axis("softmax", x)?;
        let src = self.value(x);
        let mut out = src.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::from_parts(src.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.last_axis("log_softmax", x)?;
        let src = self.value(x);
        let mut out = src.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::from_parts(src.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSoftmax(x), rg))
    }

    /// Zero-mean unit-variance rows (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: F) -> Result<Var> {
        let (rows, d) = self.last_axis("layer_norm", x)?;
        let src = self.value(x);
        let mut out = src.data().to_vec();
        let mut rstd = Vec::with_capacity(rows);
        let df = F::from_f64(d as f64);
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let rs = F::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rs;
            }
            rstd.push(rs);
        }
        let t = Tensor::from_parts(src.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LayerNorm { x, rstd }, rg))
    }

    /// Rows divided by their Euclidean norm (floored at [`CLAMP_EPS`]).
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.last_axis("l2_normalize", x)?;
        let src = self.value(x);
        let mut out = src.data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        let eps = F::from_f64(CLAMP_EPS);
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let nrm = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(eps);
            for v in row.iter_mut() {
                *v /= nrm;
            }
            norms.push(nrm);
        }
        let t = Tensor::from_parts(src.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::L2Normalize { x, norms }, rg))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = F::from_f64(self.value(x).numel().max(1) as f64);
        let s = self.sum(x);
        self.scale(s, F::one() / n)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(AutodiffError::InvalidArgument {
                op,
                msg: format!("axis {axis} out of range for shape {:?}", self.shape(x)),
            });
        }
        Ok(())
    }

    fn reduced_shape(&self, x: Var, axis: usize, keepdim: bool) -> Vec<usize> {
        let mut s = self.shape(x).to_vec();
        if keepdim {
            s[axis] = 1;
        } else {
            s.remove(axis);
        }
        s
    }

    fn reduce_axis(
        &mut self,
        op_name: &'static str,
        x: Var,
        axis: usize,
        keepdim: bool,
        mut f: impl FnMut(&mut dyn Iterator<Item = F>) -> F,
    ) -> Result<Tensor<F>> {
        self.check_axis(op_name, x, axis)?;
        let (outer, len, inner) = axis_dims(self.shape(x), axis);
        if len == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: op_name,
                msg: "cannot reduce an empty axis".into(),
            });
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut it = (0..len).map(|j| data[base + j * inner]);
                out.push(f(&mut it));
            }
        }
        Ok(Tensor::from_parts(
            self.reduced_shape(x, axis, keepdim),
            out,
        ))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let t = self.reduce_axis("sum_axis", x, axis, keepdim, |it| it.sum())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.check_axis("mean_axis", x, axis)?;
        let len = self.shape(x)[axis];
        let s = self.sum_axis(x, axis, keepdim)?;
        Ok(self.scale(s, F::one() / F::from_f64(len as f64)))
    }

    /// Product along `axis`; the gradient is exact even when factors are zero.
    pub fn prod_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let t = self.reduce_axis("prod_axis", x, axis, keepdim, |it| {
            it.fold(F::one(), |a, b| a * b)
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::ProdAxis { x, axis }, rg))
    }

    /// `log(sum(exp(x)))` along `axis`, evaluated with the max shift.
    pub fn logsumexp_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let t = self.reduce_axis("logsumexp_axis", x, axis, keepdim, |it| {
            let vals: Vec<F> = it.collect();
            let m = vals.iter().copied().fold(F::neg_infinity(), F::max);
            m + vals.iter().map(|&v| (v - m).exp()).sum::<F>().ln()
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSumExpAxis { x, axis }, rg))
    }

    /// Divides by the sum along `axis` (shape preserved). Slices whose sum is
    /// below [`CLAMP_EPS`] become uniform and pass no gradient.
    pub fn normalize_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("normalize_sum", x, axis)?;
        let (outer, len, inner) = axis_dims(self.shape(x), axis);
        let src = self.value(x);
        let mut out = src.data().to_vec();
        let mut sums = Vec::with_capacity(outer * inner);
        let eps = F::from_f64(CLAMP_EPS);
        let uniform = F::one() / F::from_f64(len as f64);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let s: F = (0..len).map(|j| out[base + j * inner]).sum();
                for j in 0..len {
                    let v = &mut out[base + j * inner];
                    *v = if s >= eps { *v / s } else { uniform };
                }
                sums.push(s);
            }
        }
        let t = Tensor::from_parts(src.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::NormalizeSum { x, axis, sums }, rg))
    }

    // ── shape manipulation ──────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len()
            || perm
                .iter()
                .any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(AutodiffError::InvalidArgument {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of shape {s:?}"),
            });
        }
        let out = permute_data(self.value(x).data(), &s, perm);
        let shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => {
                return Err(AutodiffError::InvalidArgument {
                    op: "concat",
                    msg: "no inputs".into(),
                })
            }
        };
        self.check_axis("concat", inputs[0], axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_dims(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `start..start + len` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", x, axis)?;
        let s = self.shape(x).to_vec();
        if start + len > s[axis] {
            return Err(AutodiffError::InvalidArgument {
                op: "narrow",
                msg: format!(
                    "range {start}..{} exceeds axis {axis} of {s:?}",
                    start + len
                ),
            });
        }
        let (outer, full, inner) = axis_dims(&s, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Narrow { x, axis, start },
            rg,
        ))
    }

    // ── convolution ─────────────────────────────────────────────────

    /// NHWC convolution: `x [N,H,W,C]`, `w [kh,kw,C,O]` -> `[N,Ho,Wo,O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] || stride == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let geo = ConvGeometry::new(&sx, &sw, stride, pad).ok_or_else(|| {
            AutodiffError::ShapeMismatch {
                op: "conv2d",
                lhs: sx.clone(),
                rhs: sw.clone(),
            }
        })?;
        let col = geo.im2col(self.value(x).data());
        let rows = geo.n * geo.ho * geo.wo;
        let mut out = vec![F::zero(); rows * geo.o];
        gemm(
            rows,
            geo.patch(),
            geo.o,
            &col,
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            Tensor::from_parts(vec![geo.n, geo.ho, geo.wo, geo.o], out),
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                col,
            },
            rg,
        ))
    }

    /// Non-overlapping `k x k` average pooling of an NHWC tensor.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[1] % k != 0 || s[2] % k != 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "avg_pool2d",
                msg: format!("window {k} does not tile shape {s:?}"),
            });
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / k, w / k);
        let d = self.value(x).data();
        let mut out = vec![F::zero(); n * ho * wo * c];
        let inv = F::one() / F::from_f64((k * k) as f64);
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let src = ((b * h + y) * w + xx) * c;
                    let dst = ((b * ho + y / k) * wo + xx / k) * c;
                    for ch in 0..c {
                        out[dst + ch] += d[src + ch] * inv;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![n, ho, wo, c], out),
            Op::AvgPool2d { x, k },
            rg,
        ))
    }
}

pub(crate) fn permute_data<F: Float>(data: &[F], shape: &[usize], perm: &[usize]) -> Vec<F> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub o: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub(crate) fn new(sx: &[usize], sw: &[usize], stride: usize, pad: usize) -> Option<Self> {
        let (n, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
        let (kh, kw, o) = (sw[0], sw[1], sw[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Some(Self {
            n,
            h,
            w,
            c,
            kh,
            kw,
            o,
            ho,
            wo,
            stride,
            pad,
        })
    }

    pub(crate) fn patch(&self) -> usize {
        self.kh * self.kw * self.c
    }

    /// Visits `(col_offset, input_offset)` for every in-bounds patch element.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let patch = self.patch();
        for b in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = ((b * self.ho + oy) * self.wo + ox) * patch;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * self.c;
                            let dst = row + (ky * self.kw + kx) * self.c;
                            f(dst, src);
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn im2col<F: Float>(&self, x: &[F]) -> Vec<F> {
        let mut col = vec![F::zero(); self.n * self.ho * self.wo * self.patch()];
        let c = self.c;
        self.for_each_tap(|dst, src| col[dst..dst + c].copy_from_slice(&x[src..src + c]));
        col
    }

    pub(crate) fn col2im_add<F: Float>(&self, col: &[F], gx: &mut [F]) {
        let c = self.c;
        self.for_each_tap(|dst, src| {
            for (g, &v) in gx[src..src + c].iter_mut().zip(&col[dst..dst + c]) {
                *g += v;
            }
        });
    }
}
