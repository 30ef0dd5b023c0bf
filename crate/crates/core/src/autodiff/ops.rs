//! Forward primitives and their backward rules.

use rayon::prelude::*;

use super::tape::{Node, Op};
use super::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Target size of one im2col buffer. Samples are grouped so each group's
/// buffer stays near this size; the grouping depends only on shapes, so
/// reductions do not depend on thread count.
const CONV_COLS_TARGET: usize = 1 << 18;
const NORM_EPS: f64 = 1e-12;

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn hw_in(&self) -> usize {
        self.c * self.h * self.w
    }

    fn chunk_samples(&self) -> usize {
        (CONV_COLS_TARGET / (self.ckk() * self.hw_out()).max(1)).max(1)
    }

    /// Output columns `[lo, hi)` whose input column `ow * stride + j - pad` is in range.
    #[inline]
    fn valid_cols(&self, j: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(j).div_ceil(self.stride);
        let hi = if self.w + self.pad > j {
            ((self.w + self.pad - j - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    #[inline]
    fn input_row(&self, i: usize, oh: usize) -> Option<usize> {
        let ih = (oh * self.stride + i).checked_sub(self.pad)?;
        (ih < self.h).then_some(ih)
    }

    /// Unfolds one sample into `cols`, whose rows are `ld` apart.
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T], ld: usize) {
        let hw = self.hw_out();
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (ci * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * ld..row * ld + hw];
                    let (lo, hi) = self.valid_cols(j);
                    for oh in 0..self.ho {
                        let out = &mut dst[oh * self.wo..(oh + 1) * self.wo];
                        let Some(ih) = self.input_row(i, oh) else {
                            out.fill(T::zero());
                            continue;
                        };
                        let src = &plane[ih * self.w..(ih + 1) * self.w];
                        out[..lo].fill(T::zero());
                        out[hi..].fill(T::zero());
                        let taps = src[lo * self.stride + j - self.pad..].iter().step_by(self.stride);
                        out[lo..hi].iter_mut().zip(taps).for_each(|(o, &v)| *o = v);
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T], ld: usize) {
        let hw = self.hw_out();
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (ci * self.kh + i) * self.kw + j;
                    let src = &cols[row * ld..row * ld + hw];
                    let (lo, hi) = self.valid_cols(j);
                    for oh in 0..self.ho {
                        let Some(ih) = self.input_row(i, oh) else {
                            continue;
                        };
                        let dst = &mut plane[ih * self.w..(ih + 1) * self.w];
                        let taps = dst[lo * self.stride + j - self.pad..].iter_mut().step_by(self.stride);
                        taps.zip(&src[oh * self.wo + lo..oh * self.wo + hi]).for_each(|(d, &v)| *d += v);
                    }
                }
            }
        }
    }
}

fn conv_geom(xs: &[usize], ks: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || stride == 0 {
        return Err(shape_err("conv2d", xs, ks));
    }
    let (h, w, kh, kw) = (xs[2], xs[3], ks[2], ks[3]);
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(shape_err("conv2d", xs, ks));
    }
    Ok(ConvGeom {
        c: xs[1],
        h,
        w,
        o: ks[0],
        kh,
        kw,
        stride,
        pad,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (w + 2 * pad - kw) / stride + 1,
    })
}

impl<T: Real> Tape<T> {
    /// `x W + b` for `x: [B, in]`, `W: [in, out]`, `b: [out]`.
    pub fn dense(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = {
            let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
            let (xs, ws, bs) = (xv.shape(), wv.shape(), bv.shape());
            if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
                return Err(shape_err("dense", xs, ws));
            }
            if bs != [ws[1]] {
                return Err(shape_err("dense", ws, bs));
            }
            let (batch, inp, out) = (xs[0], ws[0], ws[1]);
            let mut data = Vec::with_capacity(batch * out);
            for _ in 0..batch {
                data.extend_from_slice(bv.data());
            }
            T::gemm(
                batch,
                inp,
                out,
                xv.data(),
                (inp as isize, 1),
                wv.data(),
                (out as isize, 1),
                T::one(),
                &mut data,
                (out as isize, 1),
            );
            Tensor::new(vec![batch, out], data)?
        };
        self.push(Op::Dense { x, w, b }, value)
    }

    /// Cross-correlation of `x: [B, C, H, W]` with `k: [O, C, kh, kw]`, plus an optional per-channel bias.
    pub fn conv2d(&self, x: Var, k: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let value = {
            let (xv, kv) = (self.value(x), self.value(k));
            let g = conv_geom(xv.shape(), kv.shape(), stride, pad)?;
            let bv = match bias {
                Some(b) => {
                    let bv = self.value(b);
                    if bv.shape() != [g.o] {
                        return Err(shape_err("conv2d", kv.shape(), bv.shape()));
                    }
                    Some(bv.data().to_vec())
                }
                None => None,
            };
            let batch = xv.shape()[0];
            let (ckk, hw) = (g.ckk(), g.hw_out());
            let mut out = vec![T::zero(); batch * g.o * hw];
            let (xd, kd) = (xv.data(), kv.data());
            let per = g.chunk_samples();
            out.par_chunks_mut(per * g.o * hw).enumerate().for_each(|(ci, out_c)| {
                let n = out_c.len() / (g.o * hw);
                let ld = n * hw;
                let x_c = &xd[ci * per * g.hw_in()..];
                let mut cols = vec![T::zero(); ckk * ld];
                for s in 0..n {
                    g.im2col(&x_c[s * g.hw_in()..(s + 1) * g.hw_in()], &mut cols[s * hw..], ld);
                }
                let mut prod = vec![T::zero(); g.o * ld];
                T::gemm(g.o, ckk, ld, kd, (ckk as isize, 1), &cols, (ld as isize, 1), T::zero(), &mut prod, (ld as isize, 1));
                for s in 0..n {
                    for oc in 0..g.o {
                        let bias = bv.as_ref().map_or(T::zero(), |b| b[oc]);
                        let dst = &mut out_c[(s * g.o + oc) * hw..(s * g.o + oc + 1) * hw];
                        let src = &prod[oc * ld + s * hw..oc * ld + (s + 1) * hw];
                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d = v + bias);
                    }
                }
            });
            Tensor::new(vec![batch, g.o, g.ho, g.wo], out)?
        };
        self.push(Op::Conv2d { x, k, b: bias, stride, pad }, value)
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            let data = xv.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
            Tensor::new(xv.shape().to_vec(), data)?
        };
        self.push(Op::Relu { x }, value)
    }

    /// Mean over the spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            let s = xv.shape();
            if s.len() != 4 {
                return Err(shape_err("global_avg_pool", s, &[0, 0, 0, 0]));
            }
            let hw = s[2] * s[3];
            let inv = T::one() / T::of(hw as f64);
            let data = xv.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
            Tensor::new(vec![s[0], s[1]], data)?
        };
        self.push(Op::GlobalAvgPool { x }, value)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push(Op::Reshape { x }, value)
    }

    /// Divides each row of `[B, D]` by `max(norm, 1e-12)`.
    pub fn l2_normalize(&self, x: Var) -> Result<Var> {
        let (value, norms) = {
            let xv = self.value(x);
            let s = xv.shape();
            if s.len() != 2 {
                return Err(shape_err("l2_normalize", s, &[0, 0]));
            }
            let eps = T::of(NORM_EPS);
            let mut norms = Vec::with_capacity(s[0]);
            let mut data = Vec::with_capacity(xv.len());
            for row in xv.data().chunks(s[1]) {
                let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if norm <= eps {
                    log::debug!("l2_normalize: degenerate row, norm {norm} floored to {NORM_EPS}");
                }
                let n = norm.max(eps);
                norms.push(norm);
                data.extend(row.iter().map(|&v| v / n));
            }
            (Tensor::new(s.to_vec(), data)?, norms)
        };
        self.push(Op::L2Normalize { x, norms }, value)
    }

    /// Per-row inner product `[B, D] x [B, D] -> [B]`.
    pub fn row_dot(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            if av.shape() != bv.shape() || av.shape().len() != 2 {
                return Err(shape_err("row_dot", av.shape(), bv.shape()));
            }
            let d = av.shape()[1];
            let data = av
                .data()
                .chunks(d)
                .zip(bv.data().chunks(d))
                .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
                .collect();
            Tensor::new(vec![av.shape()[0]], data)?
        };
        self.push(Op::RowDot { a, b }, value)
    }

    /// Per-row cosine similarity `[B, D] x [B, D] -> [B]`.
    pub fn cosine_similarity(&self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("cosine_similarity", &self.shape(a), &self.shape(b)));
        }
        let an = self.l2_normalize(a)?;
        let bn = self.l2_normalize(b)?;
        self.row_dot(an, bn)
    }

    /// Per-row `-sum_k t_k log softmax(z)_k`, shape `[B]`. Target rows must lie on the simplex.
    pub fn softmax_cross_entropy_rows(&self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let (value, probs) = {
            let zv = self.value(logits);
            let s = zv.shape();
            if s.len() != 2 || target.shape() != s {
                return Err(shape_err("softmax_cross_entropy", s, target.shape()));
            }
            check_simplex(target, s[1])?;
            let k = s[1];
            let mut probs = Vec::with_capacity(zv.len());
            let mut losses = Vec::with_capacity(s[0]);
            for (z, t) in zv.data().chunks(k).zip(target.data().chunks(k)) {
                let m = z.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = z.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
                let mut loss = T::zero();
                for (&zi, &ti) in z.iter().zip(t) {
                    probs.push((zi - lse).exp());
                    if ti != T::zero() {
                        loss = loss - ti * (zi - lse);
                    }
                }
                losses.push(loss);
            }
            (Tensor::new(vec![s[0]], losses)?, probs)
        };
        let target = target.data().to_vec();
        self.push(Op::SoftmaxCrossEntropy { logits, target, probs }, value)
    }

    /// Batch mean of [`Tape::softmax_cross_entropy_rows`].
    pub fn softmax_cross_entropy(&self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let rows = self.softmax_cross_entropy_rows(logits, target)?;
        self.mean(rows)
    }

    /// Per-row mean over classes of the stable logistic loss
    /// `max(z, 0) - z t + log(1 + exp(-|z|))`, shape `[B]`.
    pub fn sigmoid_bce_rows(&self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let value = {
            let zv = self.value(logits);
            let s = zv.shape();
            if s.len() != 2 || target.shape() != s {
                return Err(shape_err("sigmoid_bce", s, target.shape()));
            }
            if target.data().iter().any(|&t| !(t >= T::zero() && t <= T::one())) {
                return Err(Error::InvalidInput("sigmoid_bce targets must lie in [0, 1]".into()));
            }
            let k = s[1];
            let inv_k = T::one() / T::of(k as f64);
            let data = zv
                .data()
                .chunks(k)
                .zip(target.data().chunks(k))
                .map(|(z, t)| {
                    z.iter()
                        .zip(t)
                        .map(|(&zi, &ti)| zi.max(T::zero()) - zi * ti + (-zi.abs()).exp().ln_1p())
                        .sum::<T>()
                        * inv_k
                })
                .collect();
            Tensor::new(vec![s[0]], data)?
        };
        let target = target.data().to_vec();
        self.push(Op::SigmoidBce { logits, target }, value)
    }

    /// Mean over all `B * K` elements.
    pub fn sigmoid_bce(&self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let rows = self.sigmoid_bce_rows(logits, target)?;
        self.mean(rows)
    }

    /// Identity forward; contributes nothing backward.
    pub fn stop_gradient(&self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(Op::StopGradient { x }, value)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            if av.shape() != bv.shape() {
                return Err(shape_err("add", av.shape(), bv.shape()));
            }
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
            Tensor::new(av.shape().to_vec(), data)?
        };
        self.push(Op::Add { a, b }, value)
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            if av.shape() != bv.shape() {
                return Err(shape_err("mul", av.shape(), bv.shape()));
            }
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
            Tensor::new(av.shape().to_vec(), data)?
        };
        self.push(Op::Mul { a, b }, value)
    }

    pub fn scale(&self, x: Var, c: T) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v * c).collect())?
        };
        self.push(Op::Scale { x, c }, value)
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().copied().sum());
        self.push(Op::Sum { x }, value)
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            Tensor::scalar(xv.data().iter().copied().sum::<T>() / T::of(xv.len() as f64))
        };
        self.push(Op::Mean { x }, value)
    }

    /// `(sum_b w_b x_b) / B` for a vector `x` of length `B` and constant weights.
    pub fn weighted_mean(&self, x: Var, weights: &[T]) -> Result<Var> {
        let value = {
            let xv = self.value(x);
            if xv.len() != weights.len() {
                return Err(shape_err("weighted_mean", xv.shape(), &[weights.len()]));
            }
            let s: T = xv.data().iter().zip(weights).map(|(&v, &w)| w * v).sum();
            Tensor::scalar(s / T::of(xv.len() as f64))
        };
        self.push(Op::WeightedMean { x, w: weights.to_vec() }, value)
    }
}

fn check_simplex<T: Real>(target: &Tensor<T>, k: usize) -> Result<()> {
    let tol = T::of(1e-6);
    for (r, row) in target.data().chunks(k).enumerate() {
        let sum: T = row.iter().copied().sum();
        if row.iter().any(|&t| !(t >= T::zero())) || (sum - T::one()).abs() > tol {
            return Err(Error::InvalidInput(format!(
                "target row {r} is not a probability vector (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Input gradients of one node, in input order, for inputs with `needs[i]`.
pub(crate) fn backward<T: Real>(
    node: &Node<T>,
    g: &[T],
    nodes: &[Node<T>],
    needs: &[bool],
) -> Result<Vec<(Var, Vec<T>)>> {
    let val = |v: Var| &nodes[v.0].value;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf | Op::StopGradient { .. } => {}
        &Op::Dense { x, w, b } => {
            let (xv, wv) = (val(x), val(w));
            let (batch, inp, outd) = (xv.shape()[0], wv.shape()[0], wv.shape()[1]);
            if needs[0] {
                let mut dx = vec![T::zero(); batch * inp];
                // g [B, out] . W^T [out, in]
                T::gemm(batch, outd, inp, g, (outd as isize, 1), wv.data(), (1, outd as isize), T::zero(), &mut dx, (inp as isize, 1));
                out.push((x, dx));
            }
            if needs[1] {
                let mut dw = vec![T::zero(); inp * outd];
                // x^T [in, B] . g [B, out]
                T::gemm(inp, batch, outd, xv.data(), (1, inp as isize), g, (outd as isize, 1), T::zero(), &mut dw, (outd as isize, 1));
                out.push((w, dw));
            }
            if needs[2] {
                let mut db = vec![T::zero(); outd];
                for row in g.chunks(outd) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
                out.push((b, db));
            }
        }
        &Op::Conv2d { x, k, b, stride, pad } => {
            let (xv, kv) = (val(x), val(k));
            let geom = conv_geom(xv.shape(), kv.shape(), stride, pad)?;
            out.extend(conv_backward(geom, xv, kv, g, (x, k, b), needs));
        }
        &Op::Relu { x } => {
            let xv = val(x);
            let dx = xv.data().iter().zip(g).map(|(&v, &gi)| if v > T::zero() { gi } else { T::zero() }).collect();
            out.push((x, dx));
        }
        &Op::GlobalAvgPool { x } => {
            let s = val(x).shape();
            let hw = s[2] * s[3];
            let inv = T::one() / T::of(hw as f64);
            let mut dx = Vec::with_capacity(s.iter().product());
            for &gi in g {
                dx.extend(std::iter::repeat_n(gi * inv, hw));
            }
            out.push((x, dx));
        }
        &Op::Reshape { x } => out.push((x, g.to_vec())),
        Op::L2Normalize { x, norms } => {
            let y = node.value.data();
            let d = node.value.shape()[1];
            let eps = T::of(NORM_EPS);
            let mut dx = Vec::with_capacity(y.len());
            for ((yr, gr), &norm) in y.chunks(d).zip(g.chunks(d)).zip(norms) {
                if norm > eps {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&yi, &gi)| (gi - yi * dot) / norm));
                } else {
                    dx.extend(gr.iter().map(|&gi| gi / eps));
                }
            }
            out.push((*x, dx));
        }
        &Op::RowDot { a, b } => {
            let (av, bv) = (val(a), val(b));
            let d = av.shape()[1];
            let scaled = |other: &Tensor<T>| -> Vec<T> {
                other
                    .data()
                    .chunks(d)
                    .zip(g)
                    .flat_map(|(row, &gi)| row.iter().map(move |&v| v * gi))
                    .collect()
            };
            if needs[0] {
                out.push((a, scaled(bv)));
            }
            if needs[1] {
                out.push((b, scaled(av)));
            }
        }
        Op::SoftmaxCrossEntropy { logits, target, probs } => {
            let k = val(*logits).shape()[1];
            let mut dz = Vec::with_capacity(probs.len());
            for ((p, t), &gi) in probs.chunks(k).zip(target.chunks(k)).zip(g) {
                let tsum: T = t.iter().copied().sum();
                dz.extend(p.iter().zip(t).map(|(&pi, &ti)| (pi * tsum - ti) * gi));
            }
            out.push((*logits, dz));
        }
        Op::SigmoidBce { logits, target } => {
            let zv = val(*logits);
            let k = zv.shape()[1];
            let inv_k = T::one() / T::of(k as f64);
            let mut dz = Vec::with_capacity(zv.len());
            for ((z, t), &gi) in zv.data().chunks(k).zip(target.chunks(k)).zip(g) {
                dz.extend(z.iter().zip(t).map(|(&zi, &ti)| (sigmoid(zi) - ti) * inv_k * gi));
            }
            out.push((*logits, dz));
        }
        &Op::Add { a, b } => {
            if needs[0] {
                out.push((a, g.to_vec()));
            }
            if needs[1] {
                out.push((b, g.to_vec()));
            }
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (val(a), val(b));
            if needs[0] {
                out.push((a, bv.data().iter().zip(g).map(|(&v, &gi)| v * gi).collect()));
            }
            if needs[1] {
                out.push((b, av.data().iter().zip(g).map(|(&v, &gi)| v * gi).collect()));
            }
        }
        &Op::Scale { x, c } => out.push((x, g.iter().map(|&gi| gi * c).collect())),
        &Op::Sum { x } => out.push((x, vec![g[0]; val(x).len()])),
        &Op::Mean { x } => {
            let n = val(x).len();
            out.push((x, vec![g[0] / T::of(n as f64); n]));
        }
        Op::WeightedMean { x, w } => {
            let n = T::of(w.len() as f64);
            out.push((*x, w.iter().map(|&wi| wi * g[0] / n).collect()));
        }
    }
    Ok(out)
}

fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn conv_backward<T: Real>(
    g: ConvGeom,
    xv: &Tensor<T>,
    kv: &Tensor<T>,
    grad: &[T],
    (x, k, b): (Var, Var, Option<Var>),
    needs: &[bool],
) -> Vec<(Var, Vec<T>)> {
    let batch = xv.shape()[0];
    let (ckk, hw, o) = (g.ckk(), g.hw_out(), g.o);
    let need_x = needs[0];
    let need_k = needs[1];
    let need_b = b.is_some() && needs[2];
    let (xd, kd) = (xv.data(), kv.data());

    let mut dx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
    let per = g.chunk_samples();
    let n_chunks = batch.div_ceil(per);

    let work = |ci: usize, dx_chunk: Option<&mut [T]>| -> (Vec<T>, Vec<T>) {
        let b0 = ci * per;
        let n = per.min(batch - b0);
        let ld = n * hw;
        // Output gradient of the chunk as one [O, n * HW] matrix.
        let mut gm = vec![T::zero(); o * ld];
        for s in 0..n {
            for oc in 0..o {
                let src = &grad[((b0 + s) * o + oc) * hw..((b0 + s) * o + oc + 1) * hw];
                gm[oc * ld + s * hw..oc * ld + (s + 1) * hw].copy_from_slice(src);
            }
        }
        let mut dk = Vec::new();
        if need_k {
            let mut cols = vec![T::zero(); ckk * ld];
            for s in 0..n {
                let xs = &xd[(b0 + s) * g.hw_in()..(b0 + s + 1) * g.hw_in()];
                g.im2col(xs, &mut cols[s * hw..], ld);
            }
            dk = vec![T::zero(); o * ckk];
            // dK = G [O, n*HW] . cols^T [n*HW, CKK]
            T::gemm(o, ld, ckk, &gm, (ld as isize, 1), &cols, (1, ld as isize), T::zero(), &mut dk, (ckk as isize, 1));
        }
        let db = if need_b {
            gm.chunks(ld).map(|row| row.iter().copied().sum::<T>()).collect()
        } else {
            Vec::new()
        };
        if let Some(dxc) = dx_chunk {
            // dcols = K^T [CKK, O] . G [O, n*HW]
            let mut dcols = vec![T::zero(); ckk * ld];
            T::gemm(ckk, o, ld, kd, (1, ckk as isize), &gm, (ld as isize, 1), T::zero(), &mut dcols, (ld as isize, 1));
            for s in 0..n {
                g.col2im(&dcols[s * hw..], &mut dxc[s * g.hw_in()..(s + 1) * g.hw_in()], ld);
            }
        }
        (dk, db)
    };

    let partials: Vec<(Vec<T>, Vec<T>)> = if need_x {
        dx.par_chunks_mut(per * g.hw_in())
            .enumerate()
            .map(|(ci, chunk)| work(ci, Some(chunk)))
            .collect()
    } else {
        (0..n_chunks).into_par_iter().map(|ci| work(ci, None)).collect()
    };

    let mut out = Vec::new();
    if need_x {
        out.push((x, dx));
    }
    if need_k {
        let mut dk = vec![T::zero(); o * ckk];
        for (p, _) in &partials {
            dk.iter_mut().zip(p).for_each(|(a, &v)| *a += v);
        }
        out.push((k, dk));
    }
    if let (true, Some(b)) = (need_b, b) {
        let mut db = vec![T::zero(); o];
        for (_, p) in &partials {
            db.iter_mut().zip(p).for_each(|(a, &v)| *a += v);
        }
        out.push((b, db));
    }
    out
}
