//! A minimal reverse-mode autodiff tape over `[C, H, W]` feature maps.
//!
//! The tape holds exactly the operators the detector and the hallucination
//! network are built from. Graphs are built per image; mini-batches sum
//! parameter gradients over per-image tapes, so nothing couples images.

use crate::tensor::{gemm, Real, Tensor};

const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        /// im2col buffer; `None` for 1x1 stride-1 convolutions, which read
        /// the input directly.
        cols: Option<Vec<T>>,
    },
    Silu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    MulMask(Var, Var),
    Upsample2(Var),
    Concat(Var, Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    PadBottomRight(Var),
    Crop(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`]; `None` where no gradient flowed.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let hw_out = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * hw_out];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    dx: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let d = &mut plane[base + ix as usize];
                            *d = *d + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// 2-D convolution of `x: [Cin, H, W]` with `w: [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = self.value(x).chw();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [Cout, Cin, k, k]");
        assert_eq!(ws[1], c, "conv input channels {c} vs weight {ws:?}");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let (cout, k) = (ws[0], ws[2]);
        let ho = out_dim(h, k, stride, pad);
        let wo = out_dim(wd, k, stride, pad);
        let kk = c * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let requires_grad = self.requires_grad(x)
            || self.requires_grad(w)
            || b.is_some_and(|b| self.requires_grad(b));

        let cols = if direct {
            None
        } else {
            Some(im2col(self.value(x).data(), c, h, wd, k, stride, pad, ho, wo))
        };
        let mut out = vec![T::zero(); cout * ho * wo];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), cout);
            for (o, &bv) in bias.iter().enumerate() {
                out[o * ho * wo..(o + 1) * ho * wo].fill(bv);
            }
        }
        {
            let src = cols.as_deref().unwrap_or_else(|| self.value(x).data());
            gemm(
                cout,
                kk,
                ho * wo,
                self.value(w).data(),
                false,
                src,
                false,
                T::one(),
                &mut out,
            );
        }
        let value = Tensor::from_vec(&[cout, ho, wo], out);
        let cols = if requires_grad { cols } else { None };
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            requires_grad,
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.requires_grad(x);
        self.push(value, Op::Silu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.requires_grad(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// `x: [C, H, W]` times a broadcast spatial mask `m: [1, H, W]`.
    pub fn mul_mask(&mut self, x: Var, m: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.value(m).shape(), &[1, h, w], "mask shape");
        let hw = h * w;
        let xv = self.value(x).data();
        let mv = self.value(m).data();
        let mut out = vec![T::zero(); c * hw];
        for ci in 0..c {
            for i in 0..hw {
                out[ci * hw + i] = xv[ci * hw + i] * mv[i];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(m);
        self.push(Tensor::from_vec(&[c, h, w], out), Op::MulMask(x, m), rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let xv = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * h2 * w2];
        for ci in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(ci * h2 + y) * w2 + xx] = xv[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(&[c, h2, w2], out), Op::Upsample2(x), rg)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ca, h, w) = self.value(a).chw();
        let (cb, hb, wb) = self.value(b).chw();
        assert_eq!((h, w), (hb, wb), "concat spatial dims");
        let mut out = Vec::with_capacity((ca + cb) * h * w);
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(Tensor::from_vec(&[ca + cb, h, w], out), Op::Concat(a, b), rg)
    }

    /// Group normalization with per-channel affine `gamma`, `beta: [C]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert!(groups > 0 && c % groups == 0, "{c} channels, {groups} groups");
        let cpg = c / groups;
        let n = cpg * h * w;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let mut xhat = vec![T::zero(); c * h * w];
        let mut rstd = vec![T::zero(); groups];
        let mut out = vec![T::zero(); c * h * w];
        for g in 0..groups {
            let range = g * n..(g + 1) * n;
            let seg = &xv[range.clone()];
            let mean = seg.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
            let var = seg
                .iter()
                .map(|v| {
                    let d = v.f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            let r = 1.0 / (var + GN_EPS).sqrt();
            rstd[g] = T::of(r);
            let (m, r) = (T::of(mean), T::of(r));
            for (i, idx) in range.enumerate() {
                let ch = g * cpg + i / (h * w);
                let xh = (xv[idx] - m) * r;
                xhat[idx] = xh;
                out[idx] = gv[ch] * xh + bv[ch];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let (xhat, rstd) = if rg { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push(
            Tensor::from_vec(&[c, h, w], out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Zero-pads the bottom and right edges up to `[C, h, w]`.
    pub fn pad_bottom_right(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (c, h0, w0) = self.value(x).chw();
        assert!(h >= h0 && w >= w0);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); c * h * w];
        for ci in 0..c {
            for y in 0..h0 {
                out[(ci * h + y) * w..(ci * h + y) * w + w0]
                    .copy_from_slice(&xv[(ci * h0 + y) * w0..(ci * h0 + y + 1) * w0]);
            }
        }
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(&[c, h, w], out), Op::PadBottomRight(x), rg)
    }

    /// Keeps the top-left `[C, h, w]` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (c, h0, w0) = self.value(x).chw();
        assert!(h <= h0 && w <= w0);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                out.extend_from_slice(&xv[(ci * h0 + y) * w0..(ci * h0 + y) * w0 + w]);
            }
        }
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(&[c, h, w], out), Op::Crop(x), rg)
    }

    /// Reverse pass from the given output gradients.
    pub fn backward(&self, seeds: &[(Var, &Tensor<T>)]) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed gradient shape");
            accumulate(&mut grads, *v, (*g).clone());
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    cols,
                } => self.conv_backward(&mut grads, &gy, *x, *w, *b, *stride, *pad, cols.as_deref()),
                Op::Silu(x) => {
                    if self.requires_grad(*x) {
                        let xv = self.value(*x).data();
                        let d: Vec<T> = xv
                            .iter()
                            .zip(gy.data())
                            .map(|(&v, &g)| {
                                let s = sigmoid(v);
                                g * s * (T::one() + v * (T::one() - s))
                            })
                            .collect();
                        accumulate(&mut grads, *x, Tensor::from_vec(gy.shape(), d));
                    }
                }
                Op::Sigmoid(x) => {
                    if self.requires_grad(*x) {
                        let d: Vec<T> = node
                            .value
                            .data()
                            .iter()
                            .zip(gy.data())
                            .map(|(&y, &g)| g * y * (T::one() - y))
                            .collect();
                        accumulate(&mut grads, *x, Tensor::from_vec(gy.shape(), d));
                    }
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, gy.clone());
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, gy);
                    }
                }
                Op::MulMask(x, m) => {
                    let (c, h, w) = gy.chw();
                    let hw = h * w;
                    let g = gy.data();
                    if self.requires_grad(*x) {
                        let mv = self.value(*m).data();
                        let mut d = vec![T::zero(); c * hw];
                        for ci in 0..c {
                            for i in 0..hw {
                                d[ci * hw + i] = g[ci * hw + i] * mv[i];
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::from_vec(&[c, h, w], d));
                    }
                    if self.requires_grad(*m) {
                        let xv = self.value(*x).data();
                        let mut d = vec![T::zero(); hw];
                        for ci in 0..c {
                            for i in 0..hw {
                                d[i] = d[i] + g[ci * hw + i] * xv[ci * hw + i];
                            }
                        }
                        accumulate(&mut grads, *m, Tensor::from_vec(&[1, h, w], d));
                    }
                }
                Op::Upsample2(x) => {
                    let (c, h, w) = self.value(*x).chw();
                    let (h2, w2) = (2 * h, 2 * w);
                    let g = gy.data();
                    let mut d = vec![T::zero(); c * h * w];
                    for ci in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                let t = &mut d[(ci * h + y / 2) * w + xx / 2];
                                *t = *t + g[(ci * h2 + y) * w2 + xx];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&[c, h, w], d));
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).len();
                    if self.requires_grad(*a) {
                        let sa = self.value(*a).shape().to_vec();
                        accumulate(&mut grads, *a, Tensor::from_vec(&sa, gy.data()[..na].to_vec()));
                    }
                    if self.requires_grad(*b) {
                        let sb = self.value(*b).shape().to_vec();
                        accumulate(&mut grads, *b, Tensor::from_vec(&sb, gy.data()[na..].to_vec()));
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
                    let (c, h, w) = gy.chw();
                    let hw = h * w;
                    let g = gy.data();
                    if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                        let mut dg = vec![T::zero(); c];
                        let mut db = vec![T::zero(); c];
                        for ch in 0..c {
                            for i in ch * hw..(ch + 1) * hw {
                                dg[ch] = dg[ch] + g[i] * xhat[i];
                                db[ch] = db[ch] + g[i];
                            }
                        }
                        if self.requires_grad(*gamma) {
                            accumulate(&mut grads, *gamma, Tensor::from_vec(&[c], dg));
                        }
                        if self.requires_grad(*beta) {
                            accumulate(&mut grads, *beta, Tensor::from_vec(&[c], db));
                        }
                    }
                    if self.requires_grad(*x) {
                        let gv = self.value(*gamma).data();
                        let cpg = c / groups;
                        let n = cpg * hw;
                        let nf = T::of(n as f64);
                        let mut d = vec![T::zero(); c * hw];
                        for grp in 0..*groups {
                            let range = grp * n..(grp + 1) * n;
                            let mut sum_dxh = T::zero();
                            let mut sum_dxh_xh = T::zero();
                            for i in range.clone() {
                                let dxh = g[i] * gv[i / hw];
                                sum_dxh = sum_dxh + dxh;
                                sum_dxh_xh = sum_dxh_xh + dxh * xhat[i];
                            }
                            let scale = rstd[grp] / nf;
                            for i in range {
                                let dxh = g[i] * gv[i / hw];
                                d[i] = scale * (nf * dxh - sum_dxh - xhat[i] * sum_dxh_xh);
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::from_vec(&[c, h, w], d));
                    }
                }
                Op::PadBottomRight(x) => {
                    let (c, h0, w0) = self.value(*x).chw();
                    let (_, h, w) = gy.chw();
                    let g = gy.data();
                    let mut d = Vec::with_capacity(c * h0 * w0);
                    for ci in 0..c {
                        for y in 0..h0 {
                            d.extend_from_slice(&g[(ci * h + y) * w..(ci * h + y) * w + w0]);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&[c, h0, w0], d));
                }
                Op::Crop(x) => {
                    let (c, h0, w0) = self.value(*x).chw();
                    let (_, h, w) = gy.chw();
                    let g = gy.data();
                    let mut d = vec![T::zero(); c * h0 * w0];
                    for ci in 0..c {
                        for y in 0..h {
                            d[(ci * h0 + y) * w0..(ci * h0 + y) * w0 + w]
                                .copy_from_slice(&g[(ci * h + y) * w..(ci * h + y + 1) * w]);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&[c, h0, w0], d));
                }
            }
        }
        Gradients { grads }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        gy: &Tensor<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Option<&[T]>,
    ) {
        let (c, h, wd) = self.value(x).chw();
        let ws = self.value(w).shape().to_vec();
        let (cout, k) = (ws[0], ws[2]);
        let (_, ho, wo) = gy.chw();
        let hw_out = ho * wo;
        let kk = c * k * k;
        let g = gy.data();
        if let Some(b) = b {
            if self.requires_grad(b) {
                let db: Vec<T> = (0..cout)
                    .map(|o| g[o * hw_out..(o + 1) * hw_out].iter().copied().sum())
                    .collect();
                accumulate(grads, b, Tensor::from_vec(&[cout], db));
            }
        }
        if self.requires_grad(w) {
            let src = cols.unwrap_or_else(|| self.value(x).data());
            let mut dw = vec![T::zero(); cout * kk];
            gemm(cout, hw_out, kk, g, false, src, true, T::zero(), &mut dw);
            accumulate(grads, w, Tensor::from_vec(&ws, dw));
        }
        if self.requires_grad(x) {
            let mut dcols = vec![T::zero(); kk * hw_out];
            gemm(kk, cout, hw_out, self.value(w).data(), true, g, false, T::zero(), &mut dcols);
            let dx = if k == 1 && stride == 1 && pad == 0 {
                dcols
            } else {
                let mut dx = vec![T::zero(); c * h * wd];
                col2im(&dcols, &mut dx, c, h, wd, k, stride, pad, ho, wo);
                dx
            };
            accumulate(grads, x, Tensor::from_vec(&[c, h, wd], dx));
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
