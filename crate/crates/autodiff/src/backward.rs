use crate::error::{AutodiffError, Result};
use crate::float::{gemm, Float};
use crate::graph::{
    axis_dims, clamp_denominator, gelu_parts, permute_data, ConvGeometry, Gradients, Graph, Op,
    Var, CLAMP_EPS,
};
use crate::tensor::Tensor;

/// Adds `delta` into the gradient slot of `v`, allocating it on first use.
fn slot<'a, F: Float>(grads: &'a mut [Option<Vec<F>>], len: usize, v: Var) -> &'a mut [F] {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

impl<F: Float> Graph<F> {
    /// Reverse pass from the scalar `output`. Can run once per graph.
    pub fn backward(&mut self, output: Var) -> Result<Gradients<F>> {
        if self.backward_done {
            return Err(AutodiffError::BackwardAlreadyRun);
        }
        let out_shape = self.shape(output).to_vec();
        if self.value(output).numel() != 1 {
            return Err(AutodiffError::NonScalarOutput(out_shape));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![F::one()]);

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            // keep interior gradients readable by callers
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|data| Tensor::from_parts(node.value.shape().to_vec(), data))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.numel()
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data_of(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn propagate(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let n = g.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, layout) | Op::Sub(a, b, layout) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -F::one()
                } else {
                    F::one()
                };
                if self.wants(*a) {
                    let ga = slot(grads, self.len_of(*a), *a);
                    layout.for_each(n, |i, ia, _| ga[ia] += g[i]);
                }
                if self.wants(*b) {
                    let gb = slot(grads, self.len_of(*b), *b);
                    layout.for_each(n, |i, _, ib| gb[ib] += sign * g[i]);
                }
            }
            Op::Mul(a, b, layout) => {
                let (da, db) = (self.data_of(*a), self.data_of(*b));
                if self.wants(*a) {
                    let ga = slot(grads, da.len(), *a);
                    layout.for_each(n, |i, ia, ib| ga[ia] += g[i] * db[ib]);
                }
                if self.wants(*b) {
                    let gb = slot(grads, db.len(), *b);
                    layout.for_each(n, |i, ia, ib| gb[ib] += g[i] * da[ia]);
                }
            }
            Op::Div(a, b, layout) => {
                let (da, db) = (self.data_of(*a), self.data_of(*b));
                let eps = F::from_f64(CLAMP_EPS);
                if self.wants(*a) {
                    let ga = slot(grads, da.len(), *a);
                    layout.for_each(n, |i, ia, ib| ga[ia] += g[i] / clamp_denominator(db[ib]));
                }
                if self.wants(*b) {
                    let gb = slot(grads, db.len(), *b);
                    layout.for_each(n, |i, _, ib| {
                        let den = db[ib];
                        if den.abs() >= eps {
                            gb[ib] -= g[i] * out[i] / den;
                        }
                    });
                }
            }
            Op::Neg(x) => self.unary_back(*x, grads, |i| -g[i]),
            Op::Scale(x, c) => self.unary_back(*x, grads, |i| g[i] * *c),
            Op::AddScalar(x) => self.unary_back(*x, grads, |i| g[i]),
            Op::Exp(x) => self.unary_back(*x, grads, |i| g[i] * out[i]),
            Op::Log(x) => {
                let d = self.data_of(*x);
                let eps = F::from_f64(CLAMP_EPS);
                self.unary_back(
                    *x,
                    grads,
                    |i| {
                        if d[i] > eps {
                            g[i] / d[i]
                        } else {
                            F::zero()
                        }
                    },
                )
            }
            Op::Sigmoid(x) => self.unary_back(*x, grads, |i| g[i] * out[i] * (F::one() - out[i])),
            Op::Tanh(x) => self.unary_back(*x, grads, |i| g[i] * (F::one() - out[i] * out[i])),
            Op::Gelu(x) => {
                let d = self.data_of(*x);
                self.unary_back(*x, grads, |i| g[i] * gelu_parts(d[i]).1)
            }
            Op::Relu(x) => {
                let d = self.data_of(*x);
                self.unary_back(
                    *x,
                    grads,
                    |i| if d[i] > F::zero() { g[i] } else { F::zero() },
                )
            }
            Op::Abs(x) => {
                let d = self.data_of(*x);
                self.unary_back(*x, grads, |i| {
                    if d[i] > F::zero() {
                        g[i]
                    } else if d[i] < F::zero() {
                        -g[i]
                    } else {
                        F::zero()
                    }
                })
            }
            Op::Powf(x, p) => {
                let d = self.data_of(*x);
                self.unary_back(*x, grads, |i| {
                    if d[i] > F::zero() {
                        g[i] * *p * d[i].powf(*p - F::one())
                    } else if *p == F::one() {
                        g[i]
                    } else {
                        F::zero()
                    }
                })
            }
            Op::Clamp(x, lo, hi) => {
                let d = self.data_of(*x);
                self.unary_back(*x, grads, |i| {
                    if d[i] >= *lo && d[i] <= *hi {
                        g[i]
                    } else {
                        F::zero()
                    }
                })
            }
            Op::MatMul { a, b, m, k, n: nn } => {
                let (m, k, nn) = (*m, *k, *nn);
                if self.wants(*a) {
                    let db = self.data_of(*b);
                    let ga = slot(grads, m * k, *a);
                    gemm(m, nn, k, g, false, db, true, ga, true);
                }
                if self.wants(*b) {
                    let da = self.data_of(*a);
                    let gb = slot(grads, k * nn, *b);
                    gemm(k, m, nn, da, true, g, false, gb, true);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n: nn,
                trans_a,
                trans_b,
            } => {
                let (m, k, nn) = (*m, *k, *nn);
                let (ta, tb) = (*trans_a, *trans_b);
                if self.wants(*a) {
                    let db = self.data_of(*b);
                    let ga = slot(grads, batch * m * k, *a);
                    for i in 0..*batch {
                        let gi = &g[i * m * nn..(i + 1) * m * nn];
                        let bi = &db[i * k * nn..(i + 1) * k * nn];
                        let out_i = &mut ga[i * m * k..(i + 1) * m * k];
                        if ta {
                            gemm(k, nn, m, bi, tb, gi, true, out_i, true);
                        } else {
                            gemm(m, nn, k, gi, false, bi, !tb, out_i, true);
                        }
                    }
                }
                if self.wants(*b) {
                    let da = self.data_of(*a);
                    let gb = slot(grads, batch * k * nn, *b);
                    for i in 0..*batch {
                        let gi = &g[i * m * nn..(i + 1) * m * nn];
                        let ai = &da[i * m * k..(i + 1) * m * k];
                        let out_i = &mut gb[i * k * nn..(i + 1) * k * nn];
                        if tb {
                            gemm(nn, m, k, gi, true, ai, ta, out_i, true);
                        } else {
                            gemm(k, m, nn, ai, !ta, gi, false, out_i, true);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let d = *node.value.shape().last().expect("rank >= 1");
                let gx = slot(grads, n, *x);
                for r in 0..n / d {
                    let (s, gr) = (&out[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: F = s.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] += s[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let d = *node.value.shape().last().expect("rank >= 1");
                let gx = slot(grads, n, *x);
                for r in 0..n / d {
                    let (o, gr) = (&out[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let total: F = gr.iter().copied().sum();
                    for j in 0..d {
                        gx[r * d + j] += gr[j] - o[j].exp() * total;
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let d = *node.value.shape().last().expect("rank >= 1");
                let df = F::from_f64(d as f64);
                let gx = slot(grads, n, *x);
                for (r, &rs) in rstd.iter().enumerate() {
                    let (y, gr) = (&out[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let mean_g = gr.iter().copied().sum::<F>() / df;
                    let mean_gy = y.iter().zip(gr).map(|(&a, &b)| a * b).sum::<F>() / df;
                    for j in 0..d {
                        gx[r * d + j] += rs * (gr[j] - mean_g - y[j] * mean_gy);
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = *node.value.shape().last().expect("rank >= 1");
                let gx = slot(grads, n, *x);
                for (r, &nrm) in norms.iter().enumerate() {
                    let (y, gr) = (&out[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: F = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] += (gr[j] - y[j] * dot) / nrm;
                    }
                }
            }
            Op::SumAll(x) => {
                let len = self.len_of(*x);
                let gx = slot(grads, len, *x);
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_dims(self.nodes[x.0].value.shape(), *axis);
                let gx = slot(grads, outer * len * inner, *x);
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            gx[(o * len + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::ProdAxis { x, axis } => {
                let (outer, len, inner) = axis_dims(self.nodes[x.0].value.shape(), *axis);
                let d = self.data_of(*x);
                let gx = slot(grads, outer * len * inner, *x);
                let mut prefix = vec![F::one(); len + 1];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        for j in 0..len {
                            prefix[j + 1] = prefix[j] * d[at(j)];
                        }
                        let mut suffix = F::one();
                        for j in (0..len).rev() {
                            gx[at(j)] += g[o * inner + i] * prefix[j] * suffix;
                            suffix *= d[at(j)];
                        }
                    }
                }
            }
            Op::LogSumExpAxis { x, axis } => {
                let (outer, len, inner) = axis_dims(self.nodes[x.0].value.shape(), *axis);
                let d = self.data_of(*x);
                let gx = slot(grads, outer * len * inner, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        for j in 0..len {
                            let at = (o * len + j) * inner + i;
                            gx[at] += g[r] * (d[at] - out[r]).exp();
                        }
                    }
                }
            }
            Op::NormalizeSum { x, axis, sums } => {
                let (outer, len, inner) = axis_dims(self.nodes[x.0].value.shape(), *axis);
                let eps = F::from_f64(CLAMP_EPS);
                let gx = slot(grads, outer * len * inner, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let s = sums[o * inner + i];
                        if s < eps {
                            continue;
                        }
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: F = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += (g[at(j)] - dot) / s;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                let gx = slot(grads, n, *x);
                gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                let gx = slot(grads, n, *x);
                gx.iter_mut().zip(&back).for_each(|(a, &b)| *a += b);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_dims(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    if self.wants(v) {
                        let gv = slot(grads, outer * len * inner, v);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for j in 0..len * inner {
                                gv[dst + j] += g[src + j];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, full, inner) = axis_dims(self.nodes[x.0].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                let gx = slot(grads, outer * full * inner, *x);
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    for j in 0..len * inner {
                        gx[dst + j] += g[src + j];
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                col,
            } => {
                let sx = self.nodes[x.0].value.shape();
                let sw = self.nodes[w.0].value.shape();
                let geo = ConvGeometry::new(sx, sw, *stride, *pad).expect("validated in forward");
                let rows = geo.n * geo.ho * geo.wo;
                if self.wants(*w) {
                    let gw = slot(grads, geo.patch() * geo.o, *w);
                    gemm(geo.patch(), rows, geo.o, col, true, g, false, gw, true);
                }
                if self.wants(*x) {
                    let mut gcol = vec![F::zero(); rows * geo.patch()];
                    gemm(
                        rows,
                        geo.o,
                        geo.patch(),
                        g,
                        false,
                        self.data_of(*w),
                        true,
                        &mut gcol,
                        false,
                    );
                    let gx = slot(grads, geo.n * geo.h * geo.w * geo.c, *x);
                    geo.col2im_add(&gcol, gx);
                }
            }
            Op::AvgPool2d { x, k } => {
                let s = self.nodes[x.0].value.shape();
                let (nb, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h / k, w / k);
                let inv = F::one() / F::from_f64((k * k) as f64);
                let gx = slot(grads, nb * h * w * c, *x);
                for b in 0..nb {
                    for y in 0..h {
                        for xx in 0..w {
                            let dst = ((b * h + y) * w + xx) * c;
                            let src = ((b * ho + y / k) * wo + xx / k) * c;
                            for ch in 0..c {
                                gx[dst + ch] += g[src + ch] * inv;
                            }
                        }
                    }
                }
            }
        }
    }

    fn unary_back(&self, x: Var, grads: &mut [Option<Vec<F>>], f: impl Fn(usize) -> F) {
        if !self.wants(x) {
            return;
        }
        let len = self.len_of(x);
        let gx = slot(grads, len, x);
        for (i, v) in gx.iter_mut().enumerate() {
            *v += f(i);
        }
    }
}
