//! Reverse-mode automatic differentiation over a linear tape.
//!
//! The tape supports exactly the operations the denoiser and discriminator
//! need. Nodes are appended in evaluation order, so a single reverse sweep
//! over the tape visits every node after all of its consumers.

use crate::error::{Error, Result};
use crate::losses;
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Group normalization stabilizer.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c_in * 9
    }

    fn p(&self) -> usize {
        self.h_out * self.w_out
    }
}

enum Op<S> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<S>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Silu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: S,
    },
    AddChannel {
        x: Var,
        v: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    AvgPool2 {
        x: Var,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    BatchLinear {
        x: Var,
        scale: Vec<S>,
    },
    Mse {
        x: Var,
        target: Vec<S>,
    },
    SoftplusMean {
        x: Var,
        sign: S,
    },
    Combine {
        terms: Vec<(Var, f64)>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<S: Real = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, expected: &[usize], got: &[usize]) -> Error {
    Error::Shape {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value.data()[0]
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked when `trainable` is set.
    pub fn leaf(&mut self, value: Tensor<S>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    /// 3×3 convolution with zero padding of one pixel.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (batch, c_in, h, wd) = self.value(x).dims4()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != c_in || ws[2] != 3 || ws[3] != 3 {
            return Err(shape_err("conv3x3 weight", &[0, c_in, 3, 3], &ws));
        }
        let c_out = ws[0];
        if self.value(b).shape() != [c_out] {
            return Err(shape_err("conv3x3 bias", &[c_out], self.value(b).shape()));
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            h_out: (h - 1) / stride + 1,
            w_out: (wd - 1) / stride + 1,
            stride,
        };
        let (k, p) = (geom.k(), geom.p());
        let xv = self.value(x).data();
        let mut cols = vec![S::zero(); batch * k * p];
        for n in 0..batch {
            im2col(&xv[n * c_in * h * wd..(n + 1) * c_in * h * wd], &geom, &mut cols[n * k * p..(n + 1) * k * p]);
        }
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![S::zero(); batch * c_out * p];
        for n in 0..batch {
            let o = &mut out[n * c_out * p..(n + 1) * c_out * p];
            for (c, row) in o.chunks_mut(p).enumerate() {
                row.fill(bv[c]);
            }
            S::gemm(false, false, c_out, k, p, wv, &cols[n * k * p..(n + 1) * k * p], o, true);
        }
        let value = Tensor::from_vec(&[batch, c_out, geom.h_out, geom.w_out], out)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(value, Op::Conv { x, w, b, geom, cols }, ng))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (batch, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid("groups", format!("{groups} does not divide {c} channels")));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err("group_norm affine", &[c], self.value(gamma).shape()));
        }
        let hw = h * w;
        let n = c / groups * hw;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![S::zero(); xv.len()];
        let mut out = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); batch * groups];
        for bg in 0..batch * groups {
            let seg = &xv[bg * n..(bg + 1) * n];
            let mean = seg.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
            let var = seg.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + NORM_EPS).sqrt();
            rstd[bg] = S::of(r);
            let (mean, r) = (S::of(mean), S::of(r));
            let c0 = (bg % groups) * (c / groups);
            for (i, &v) in seg.iter().enumerate() {
                let ch = c0 + i / hw;
                let xh = (v - mean) * r;
                xhat[bg * n + i] = xh;
                out[bg * n + i] = xh * gv[ch] + bv[ch];
            }
        }
        let value = Tensor::from_vec(self.value(x).shape(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let ng = self.ng(x);
        self.push(value, Op::Silu { x }, ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = S::of(slope);
        let value = self.value(x).map(|v| if v > S::zero() { v } else { v * slope });
        let ng = self.ng(x);
        self.push(value, Op::LeakyRelu { x, slope }, ng)
    }

    /// Adds a per-(item, channel) vector `v: [B, C]` to every pixel of `x: [B, C, H, W]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (batch, c, h, w) = self.value(x).dims4()?;
        if self.value(v).shape() != [batch, c] {
            return Err(shape_err("add_channel", &[batch, c], self.value(v).shape()));
        }
        let hw = h * w;
        let vv = self.value(v).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, plane) in value.data_mut().chunks_mut(hw).enumerate() {
            let add = vv[i];
            plane.iter_mut().for_each(|p| *p = *p + add);
        }
        let ng = self.ng(x) || self.ng(v);
        Ok(self.push(value, Op::AddChannel { x, v }, ng))
    }

    /// `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(shape_err("linear", &xs, &ws));
        }
        let (batch, d_in, d_out) = (xs[0], xs[1], ws[0]);
        if self.value(b).shape() != [d_out] {
            return Err(shape_err("linear bias", &[d_out], self.value(b).shape()));
        }
        let mut out = vec![S::zero(); batch * d_out];
        for row in out.chunks_mut(d_out) {
            row.copy_from_slice(self.value(b).data());
        }
        S::gemm(false, true, batch, d_in, d_out, self.value(x).data(), self.value(w).data(), &mut out, true);
        let value = Tensor::from_vec(&[batch, d_out], out)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(value, Op::Linear { x, w, b }, ng))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (batch, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("avg_pool2", &[batch, c, h + h % 2, w + w % 2], &[batch, c, h, w]));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = S::of(0.25);
        let mut out = vec![S::zero(); batch * c * ho * wo];
        for (pi, plane) in out.chunks_mut(ho * wo).enumerate() {
            let src = &xv[pi * h * w..(pi + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let s = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    plane[i * wo + j] = s * quarter;
                }
            }
        }
        let value = Tensor::from_vec(&[batch, c, ho, wo], out)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::AvgPool2 { x }, ng))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (batch, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (2 * h, 2 * w);
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); batch * c * ho * wo];
        for (pi, plane) in out.chunks_mut(ho * wo).enumerate() {
            let src = &xv[pi * h * w..(pi + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    plane[i * wo + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[batch, c, ho, wo], out)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Upsample2 { x }, ng))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, ca, h, w) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if (bb, hb, wb) != (batch, h, w) {
            return Err(shape_err("concat", &[batch, cb, h, w], &[bb, cb, hb, wb]));
        }
        let hw = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(batch * (ca + cb) * hw);
        for n in 0..batch {
            out.extend_from_slice(&av[n * ca * hw..(n + 1) * ca * hw]);
            out.extend_from_slice(&bv[n * cb * hw..(n + 1) * cb * hw]);
        }
        let value = Tensor::from_vec(&[batch, ca + cb, h, w], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Concat { a, b }, ng))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (batch, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let inv = S::of(1.0 / hw as f64);
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<S>() * inv)
            .collect();
        let value = Tensor::from_vec(&[batch, c], out)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::GlobalAvgPool { x }, ng))
    }

    /// A node whose value is supplied by the caller and whose Jacobian with
    /// respect to `x` is `scale[item] · I` for each leading-axis item.
    /// Used for affine maps of `x` whose offset is a constant.
    pub fn batch_linear(&mut self, x: Var, value: Tensor<S>, scale: Vec<S>) -> Result<Var> {
        self.value(x).ensure_same_shape(&value, "batch_linear")?;
        if scale.len() != value.shape()[0] {
            return Err(shape_err("batch_linear scale", &[value.shape()[0]], &[scale.len()]));
        }
        let ng = self.ng(x);
        Ok(self.push(value, Op::BatchLinear { x, scale }, ng))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &Tensor<S>) -> Result<Var> {
        self.value(x).ensure_same_shape(target, "mse")?;
        let v = losses::mse(target.data(), self.value(x).data());
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::scalar(S::of(v)),
            Op::Mse {
                x,
                target: target.data().to_vec(),
            },
            ng,
        ))
    }

    /// `mean(softplus(sign · x))` over all elements.
    pub fn softplus_mean(&mut self, x: Var, sign: f64) -> Var {
        let v = losses::mean_softplus(self.value(x).data(), sign);
        let ng = self.ng(x);
        self.push(
            Tensor::scalar(S::of(v)),
            Op::SoftplusMean { x, sign: S::of(sign) },
            ng,
        )
    }

    /// Weighted sum of scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Var {
        let v: f64 = terms.iter().map(|&(t, w)| w * self.scalar(t).f64()).sum();
        let ng = terms.iter().any(|&(t, _)| self.ng(t));
        self.push(
            Tensor::scalar(S::of(v)),
            Op::Combine {
                terms: terms.to_vec(),
            },
            ng,
        )
    }

    /// Gradients of the scalar node `loss` with respect to every node that
    /// needs one.
    pub fn backward(&self, loss: Var) -> Grads<S> {
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one(); self.nodes[loss.0].value.len()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            if !matches!(node.op, Op::Leaf) {
                self.backprop(node, &dy, &mut grads);
            }
            grads[i] = Some(dy);
        }
        Grads {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|g| Tensor::from_vec(n.value.shape(), g).expect("gradient shape")))
                .collect(),
        }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut Vec<S>> {
        if !self.ng(v) {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n]))
    }

    fn backprop(&self, node: &Node<S>, dy: &[S], grads: &mut [Option<Vec<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom, cols } => {
                let g = *geom;
                let (k, p) = (g.k(), g.p());
                let per_out = g.c_out * p;
                if let Some(db) = self.acc(grads, *b) {
                    for n in 0..g.batch {
                        for c in 0..g.c_out {
                            let s: S = dy[n * per_out + c * p..n * per_out + (c + 1) * p].iter().copied().sum();
                            db[c] = db[c] + s;
                        }
                    }
                }
                if let Some(dw) = self.acc(grads, *w) {
                    for n in 0..g.batch {
                        S::gemm(
                            false,
                            true,
                            g.c_out,
                            p,
                            k,
                            &dy[n * per_out..(n + 1) * per_out],
                            &cols[n * k * p..(n + 1) * k * p],
                            dw,
                            true,
                        );
                    }
                }
                if self.ng(*x) {
                    let wv = self.value(*w).data();
                    let mut dcols = vec![S::zero(); k * p];
                    let in_len = g.c_in * g.h * g.w;
                    let dx = self.acc(grads, *x).expect("needs grad");
                    for n in 0..g.batch {
                        S::gemm(true, false, k, g.c_out, p, wv, &dy[n * per_out..(n + 1) * per_out], &mut dcols, false);
                        col2im(&dcols, &g, &mut dx[n * in_len..(n + 1) * in_len]);
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let shape = self.value(*x).shape();
                let (c, hw) = (shape[1], shape[2] * shape[3]);
                let cpg = c / groups;
                let n = cpg * hw;
                let gv = self.value(*gamma).data();
                if let Some(dg) = self.acc(grads, *gamma) {
                    for (i, (&d, &xh)) in dy.iter().zip(xhat).enumerate() {
                        let ch = (i / hw) % c;
                        dg[ch] = dg[ch] + d * xh;
                    }
                }
                if let Some(db) = self.acc(grads, *beta) {
                    for (i, &d) in dy.iter().enumerate() {
                        let ch = (i / hw) % c;
                        db[ch] = db[ch] + d;
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let nf = S::of(n as f64);
                    let mut dxh = vec![S::zero(); n];
                    for (bg, &r) in rstd.iter().enumerate() {
                        let c0 = (bg % groups) * cpg;
                        let base = bg * n;
                        let mut sum = 0.0f64;
                        let mut sum_x = 0.0f64;
                        for i in 0..n {
                            let d = dy[base + i] * gv[c0 + i / hw];
                            dxh[i] = d;
                            sum += d.f64();
                            sum_x += (d * xhat[base + i]).f64();
                        }
                        let (sum, sum_x) = (S::of(sum), S::of(sum_x));
                        let scale = r / nf;
                        for i in 0..n {
                            let v = scale * (nf * dxh[i] - sum - xhat[base + i] * sum_x);
                            dx[base + i] = dx[base + i] + v;
                        }
                    }
                }
            }
            Op::Silu { x } => {
                let xv = self.value(*x).data();
                let dx = self.acc(grads, *x).expect("needs grad");
                for ((g, &d), &v) in dx.iter_mut().zip(dy).zip(xv) {
                    let s = sigmoid(v);
                    *g = *g + d * s * (S::one() + v * (S::one() - s));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let dx = self.acc(grads, *x).expect("needs grad");
                for ((g, &d), &v) in dx.iter_mut().zip(dy).zip(xv) {
                    *g = *g + if v > S::zero() { d } else { d * *slope };
                }
            }
            Op::AddChannel { x, v } => {
                let shape = self.value(*x).shape();
                let hw = shape[2] * shape[3];
                if let Some(dx) = self.acc(grads, *x) {
                    for (g, &d) in dx.iter_mut().zip(dy) {
                        *g = *g + d;
                    }
                }
                if let Some(dv) = self.acc(grads, *v) {
                    for (i, plane) in dy.chunks(hw).enumerate() {
                        dv[i] = dv[i] + plane.iter().copied().sum();
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (batch, d_in) = (xs[0], xs[1]);
                let d_out = self.value(*w).shape()[0];
                if let Some(db) = self.acc(grads, *b) {
                    for row in dy.chunks(d_out) {
                        for (g, &d) in db.iter_mut().zip(row) {
                            *g = *g + d;
                        }
                    }
                }
                if let Some(dw) = self.acc(grads, *w) {
                    S::gemm(true, false, d_out, batch, d_in, dy, self.value(*x).data(), dw, true);
                }
                if let Some(dx) = self.acc(grads, *x) {
                    S::gemm(false, false, batch, d_out, d_in, dy, self.value(*w).data(), dx, true);
                }
            }
            Op::AvgPool2 { x } => {
                let shape = self.value(*x).shape();
                let (h, w) = (shape[2], shape[3]);
                let (ho, wo) = (h / 2, w / 2);
                let quarter = S::of(0.25);
                let dx = self.acc(grads, *x).expect("needs grad");
                for (pi, plane) in dy.chunks(ho * wo).enumerate() {
                    let dst = &mut dx[pi * h * w..(pi + 1) * h * w];
                    for i in 0..h {
                        for j in 0..w {
                            dst[i * w + j] = dst[i * w + j] + plane[(i / 2) * wo + j / 2] * quarter;
                        }
                    }
                }
            }
            Op::Upsample2 { x } => {
                let shape = self.value(*x).shape();
                let (h, w) = (shape[2], shape[3]);
                let wo = 2 * w;
                let dx = self.acc(grads, *x).expect("needs grad");
                for (pi, plane) in dy.chunks(4 * h * w).enumerate() {
                    let dst = &mut dx[pi * h * w..(pi + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..wo {
                            dst[(i / 2) * w + j / 2] = dst[(i / 2) * w + j / 2] + plane[i * wo + j];
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let sa = self.value(*a).shape();
                let sb = self.value(*b).shape();
                let hw = sa[2] * sa[3];
                let (la, lb) = (sa[1] * hw, sb[1] * hw);
                let batch = sa[0];
                if let Some(da) = self.acc(grads, *a) {
                    for n in 0..batch {
                        for i in 0..la {
                            da[n * la + i] = da[n * la + i] + dy[n * (la + lb) + i];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *b) {
                    for n in 0..batch {
                        for i in 0..lb {
                            db[n * lb + i] = db[n * lb + i] + dy[n * (la + lb) + la + i];
                        }
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                let shape = self.value(*x).shape();
                let hw = shape[2] * shape[3];
                let inv = S::of(1.0 / hw as f64);
                let dx = self.acc(grads, *x).expect("needs grad");
                for (i, plane) in dx.chunks_mut(hw).enumerate() {
                    let d = dy[i] * inv;
                    plane.iter_mut().for_each(|g| *g = *g + d);
                }
            }
            Op::BatchLinear { x, scale } => {
                let dx = self.acc(grads, *x).expect("needs grad");
                let per = dx.len() / scale.len();
                for (i, &s) in scale.iter().enumerate() {
                    for j in i * per..(i + 1) * per {
                        dx[j] = dx[j] + dy[j] * s;
                    }
                }
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x).data();
                let k = dy[0] * S::of(2.0 / xv.len() as f64);
                let dx = self.acc(grads, *x).expect("needs grad");
                for ((g, &v), &t) in dx.iter_mut().zip(xv).zip(target) {
                    *g = *g + k * (v - t);
                }
            }
            Op::SoftplusMean { x, sign } => {
                let xv = self.value(*x).data();
                let k = dy[0] * *sign / S::of(xv.len() as f64);
                let dx = self.acc(grads, *x).expect("needs grad");
                for (g, &v) in dx.iter_mut().zip(xv) {
                    *g = *g + k * sigmoid(*sign * v);
                }
            }
            Op::Combine { terms } => {
                for &(t, w) in terms {
                    if let Some(dt) = self.acc(grads, t) {
                        dt[0] = dt[0] + dy[0] * S::of(w);
                    }
                }
            }
        }
    }
}

fn im2col<S: Real>(x: &[S], g: &ConvGeom, cols: &mut [S]) {
    let p = g.p();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 3 + ky) * 3 + kx) * p..((c * 3 + ky) * 3 + kx + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    let dst = &mut row[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        *d = if ix < 0 || ix >= g.w as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<S: Real>(cols: &[S], g: &ConvGeom, dx: &mut [S]) {
    let p = g.p();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 3 + ky) * 3 + kx) * p..((c * 3 + ky) * 3 + kx + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let idx = iy as usize * g.w + ix as usize;
                        plane[idx] = plane[idx] + row[oy * g.w_out + ox];
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}
