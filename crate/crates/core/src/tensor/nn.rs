//! Layer primitives on NHWC tensors: dense/conv products, normalisation,
//! neighborhood attention and resampling.

use super::real::gemm;
use super::{Real, Tensor, Var};

/// Start index and extent of the clamped neighborhood window along one axis.
///
/// Windows near the border are shifted inwards so every query sees exactly
/// `min(window, len)` keys.
#[inline]
pub fn window_span(pos: usize, len: usize, window: usize) -> (usize, usize) {
    let extent = window.min(len);
    let radius = extent / 2;
    let start = pos.saturating_sub(radius).min(len - extent);
    (start, extent)
}

#[derive(Clone, Copy)]
struct AttnGeom {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    heads: usize,
    d: usize,
    window: usize,
    ew: usize,
    nk: usize,
}

/// Flat pixel indices of the keys seen by query `(s, i, j)`.
fn key_positions(g: &AttnGeom, s: usize, i: usize, j: usize, keys: &mut [usize]) {
    let (si, eh) = window_span(i, g.h, g.window);
    let (sj, _) = window_span(j, g.w, g.window);
    for a in 0..eh {
        for b in 0..g.ew {
            keys[a * g.ew + b] = (s * g.h + si + a) * g.w + sj + b;
        }
    }
}

/// Per-head dot products of `a` and `b`, written to `out[head * stride]`.
#[inline(always)]
fn head_dots<T: Real, const D: usize>(a: &[T], b: &[T], d: usize, out: &mut [T], stride: usize, scale: T) {
    let d = if D == 0 { d } else { D };
    for (hd, (qa, kb)) in a.chunks_exact(d).zip(b.chunks_exact(d)).enumerate() {
        let mut acc = T::zero();
        for t in 0..d {
            acc += qa[t] * kb[t];
        }
        out[hd * stride] = acc * scale;
    }
}

/// `out[head] += wts[head * stride] * x[head]` for every head block.
#[inline(always)]
fn head_axpy<T: Real, const D: usize>(out: &mut [T], wts: &[T], stride: usize, x: &[T], d: usize) {
    let d = if D == 0 { d } else { D };
    for (hd, (o, xv)) in out.chunks_exact_mut(d).zip(x.chunks_exact(d)).enumerate() {
        let p = wts[hd * stride];
        for t in 0..d {
            o[t] += p * xv[t];
        }
    }
}

/// Returns the output and the softmax weights laid out `[pos][head][key]`.
fn attn_forward<T: Real, const D: usize>(data: &[T], g: &AttnGeom) -> (Vec<T>, Vec<T>) {
    let AttnGeom { n, h, w, c, heads, d, nk, .. } = *g;
    let c3 = 3 * c;
    let scale = T::of(1.0 / (d as f64).sqrt());
    let mut out = vec![T::zero(); n * h * w * c];
    let mut probs = vec![T::zero(); n * h * w * heads * nk];
    let mut keys = vec![0usize; nk];
    for s in 0..n {
        for i in 0..h {
            for j in 0..w {
                let pos = (s * h + i) * w + j;
                key_positions(g, s, i, j, &mut keys);
                let q = &data[pos * c3..pos * c3 + c];
                let pb = &mut probs[pos * heads * nk..(pos + 1) * heads * nk];
                for (kk, &kp) in keys.iter().enumerate() {
                    head_dots::<T, D>(q, &data[kp * c3 + c..kp * c3 + 2 * c], d, &mut pb[kk..], nk, scale);
                }
                for row in pb.chunks_exact_mut(nk) {
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - mx).exp();
                        z += *v;
                    }
                    let inv = T::one() / z;
                    for v in row.iter_mut() {
                        *v *= inv;
                    }
                }
                let o = &mut out[pos * c..(pos + 1) * c];
                for (kk, &kp) in keys.iter().enumerate() {
                    head_axpy::<T, D>(o, &pb[kk..], nk, &data[kp * c3 + 2 * c..(kp + 1) * c3], d);
                }
            }
        }
    }
    (out, probs)
}

fn attn_backward<T: Real, const D: usize>(data: &[T], gd: &[T], probs: &[T], gq: &mut [T], g: &AttnGeom) {
    let AttnGeom { n, h, w, c, heads, d, nk, .. } = *g;
    let c3 = 3 * c;
    let scale = T::of(1.0 / (d as f64).sqrt());
    let mut keys = vec![0usize; nk];
    let mut dp = vec![T::zero(); heads * nk];
    let mut gqrow = vec![T::zero(); c];
    for s in 0..n {
        for i in 0..h {
            for j in 0..w {
                let pos = (s * h + i) * w + j;
                key_positions(g, s, i, j, &mut keys);
                let p = &probs[pos * heads * nk..(pos + 1) * heads * nk];
                let go = &gd[pos * c..(pos + 1) * c];
                for (kk, &kp) in keys.iter().enumerate() {
                    let vo = kp * c3 + 2 * c;
                    head_dots::<T, D>(go, &data[vo..vo + c], d, &mut dp[kk..], nk, T::one());
                    head_axpy::<T, D>(&mut gq[vo..vo + c], &p[kk..], nk, go, d);
                }
                for (pr, dr) in p.chunks_exact(nk).zip(dp.chunks_exact_mut(nk)) {
                    let dot = pr.iter().zip(dr.iter()).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    for (dv, &pv) in dr.iter_mut().zip(pr) {
                        *dv = pv * (*dv - dot) * scale;
                    }
                }
                gqrow.fill(T::zero());
                let q = &data[pos * c3..pos * c3 + c];
                for (kk, &kp) in keys.iter().enumerate() {
                    let ko = kp * c3 + c;
                    head_axpy::<T, D>(&mut gqrow, &dp[kk..], nk, &data[ko..ko + c], d);
                    head_axpy::<T, D>(&mut gq[ko..ko + c], &dp[kk..], nk, q, d);
                }
                for (a, &b) in gq[pos * c3..pos * c3 + c].iter_mut().zip(&gqrow) {
                    *a += b;
                }
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// `x · w + b` over the trailing axis; `w` is `[in, out]`.
    pub fn linear(&self, w: &Var<'t, T>, b: Option<&Var<'t, T>>) -> Var<'t, T> {
        let x = self.value();
        let wv = w.value();
        let cin = x.last_dim();
        assert_eq!(wv.shape().len(), 2, "linear: weight must be rank 2");
        assert_eq!(wv.shape()[0], cin, "linear: in-features {} vs weight {:?}", cin, wv.shape());
        let cout = wv.shape()[1];
        let rows = x.len() / cin;
        let mut out = vec![T::zero(); rows * cout];
        gemm(rows, cin, cout, x.data(), false, wv.data(), false, T::zero(), &mut out);
        if let Some(b) = b {
            let bv = b.value();
            assert_eq!(bv.shape(), &[cout], "linear: bias shape");
            for row in out.chunks_mut(cout) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let (ix, iw) = (self.id(), w.id());
        let ib = b.map(|b| b.id());
        let mut parents = vec![*self, *w];
        if let Some(b) = b {
            parents.push(*b);
        }
        let xshape = x.shape().to_vec();
        self.tape().record(Tensor::new(&shape, out), &parents, move |g, grads| {
            if let Some(gx) = grads.slot(ix, &xshape) {
                gemm(rows, cout, cin, g.data(), false, wv.data(), true, T::one(), gx);
            }
            if let Some(gw) = grads.slot(iw, &[cin, cout]) {
                gemm(cin, rows, cout, x.data(), true, g.data(), false, T::one(), gw);
            }
            if let Some(ib) = ib {
                if let Some(gb) = grads.slot(ib, &[cout]) {
                    for row in g.data().chunks(cout) {
                        for (d, &u) in gb.iter_mut().zip(row) {
                            *d += u;
                        }
                    }
                }
            }
        })
    }

    /// 2-D convolution, zero padding. `w` is `[k*k*in, out]` with `(ky, kx, ci)` row order.
    pub fn conv2d(
        &self,
        w: &Var<'t, T>,
        b: Option<&Var<'t, T>>,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Var<'t, T> {
        if kernel == 1 && stride == 1 && pad == 0 {
            return self.linear(w, b);
        }
        let x = self.value();
        let (n, h, wd, cin) = x.dims4();
        let wv = w.value();
        assert_eq!(wv.shape()[0], kernel * kernel * cin, "conv2d: weight rows");
        let cout = wv.shape()[1];
        assert!(h + 2 * pad >= kernel && wd + 2 * pad >= kernel, "conv2d: input smaller than kernel");
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (wd + 2 * pad - kernel) / stride + 1;
        let kk = kernel * kernel * cin;
        let rows = n * ho * wo;
        let mut cols = vec![T::zero(); rows * kk];
        for s in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let r = (s * ho + oy) * wo + ox;
                    let dst = &mut cols[r * kk..(r + 1) * kk];
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let src = ((s * h + iy as usize) * wd + ix as usize) * cin;
                            let off = (ky * kernel + kx) * cin;
                            dst[off..off + cin].copy_from_slice(&x.data()[src..src + cin]);
                        }
                    }
                }
            }
        }
        let mut out = vec![T::zero(); rows * cout];
        gemm(rows, kk, cout, &cols, false, wv.data(), false, T::zero(), &mut out);
        if let Some(b) = b {
            let bv = b.value();
            for row in out.chunks_mut(cout) {
                for (o, &bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let (ix_, iw) = (self.id(), w.id());
        let ib = b.map(|b| b.id());
        let mut parents = vec![*self, *w];
        if let Some(b) = b {
            parents.push(*b);
        }
        let xshape = x.shape().to_vec();
        drop(x);
        self.tape().record(Tensor::new(&[n, ho, wo, cout], out), &parents, move |g, grads| {
            if grads.wants(ix_) {
                let mut dcols = vec![T::zero(); rows * kk];
                gemm(rows, cout, kk, g.data(), false, wv.data(), true, T::zero(), &mut dcols);
                let gx = grads.slot(ix_, &xshape).unwrap();
                for s in 0..n {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let r = (s * ho + oy) * wo + ox;
                            let src = &dcols[r * kk..(r + 1) * kk];
                            for ky in 0..kernel {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kernel {
                                    let ixx = (ox * stride + kx) as isize - pad as isize;
                                    if ixx < 0 || ixx >= wd as isize {
                                        continue;
                                    }
                                    let dst = ((s * h + iy as usize) * wd + ixx as usize) * cin;
                                    let off = (ky * kernel + kx) * cin;
                                    for (d, &u) in gx[dst..dst + cin].iter_mut().zip(&src[off..off + cin]) {
                                        *d += u;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(gw) = grads.slot(iw, &[kk, cout]) {
                gemm(kk, rows, cout, &cols, true, g.data(), false, T::one(), gw);
            }
            if let Some(ib) = ib {
                if let Some(gb) = grads.slot(ib, &[cout]) {
                    for row in g.data().chunks(cout) {
                        for (d, &u) in gb.iter_mut().zip(row) {
                            *d += u;
                        }
                    }
                }
            }
        })
    }

    /// Layer normalisation over the trailing axis, without affine parameters.
    pub fn layer_norm(&self, eps: f64) -> Var<'t, T> {
        let x = self.value();
        let c = x.last_dim();
        let rows = x.len() / c;
        let eps = T::of(eps);
        let inv_c = T::of(1.0 / c as f64);
        let mut out = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let normed = Tensor::new(x.shape(), out);
        let y = normed.clone();
        let ix = self.id();
        let shape = x.shape().to_vec();
        self.tape().record(normed, &[*self], move |g, grads| {
            if let Some(gx) = grads.slot(ix, &shape) {
                for r in 0..rows {
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let yr = &y.data()[r * c..(r + 1) * c];
                    let mg = gr.iter().copied().sum::<T>() * inv_c;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_c;
                    for ((d, &gv), &yv) in gx[r * c..(r + 1) * c].iter_mut().zip(gr).zip(yr) {
                        *d += rstd[r] * (gv - mg - yv * mgy);
                    }
                }
            }
        })
    }

    /// Multi-head neighborhood self-attention on a fused `[N, H, W, 3C]` q/k/v tensor.
    ///
    /// Each query attends to the `window × window` block of keys around it
    /// (clamped at the borders, see [`window_span`]). Output is `[N, H, W, C]`.
    pub fn neighborhood_attention(&self, heads: usize, window: usize) -> Var<'t, T> {
        let qkv = self.value();
        let (n, h, w, c3) = qkv.dims4();
        assert_eq!(c3 % 3, 0, "attention: fused channels must be 3C");
        let c = c3 / 3;
        assert_eq!(c % heads, 0, "attention: channels {c} not divisible by heads {heads}");
        assert!(window % 2 == 1, "attention: window must be odd");
        let geom = AttnGeom {
            n,
            h,
            w,
            c,
            heads,
            d: c / heads,
            window,
            ew: window.min(w),
            nk: window.min(h) * window.min(w),
        };
        let forward = match geom.d {
            4 => attn_forward::<T, 4>,
            8 => attn_forward::<T, 8>,
            16 => attn_forward::<T, 16>,
            _ => attn_forward::<T, 0>,
        };
        let (out, probs) = forward(qkv.data(), &geom);
        let ix = self.id();
        let shape = qkv.shape().to_vec();
        self.tape().record(Tensor::new(&[n, h, w, c], out), &[*self], move |g, grads| {
            let Some(gq) = grads.slot(ix, &shape) else { return };
            let backward = match geom.d {
                4 => attn_backward::<T, 4>,
                8 => attn_backward::<T, 8>,
                16 => attn_backward::<T, 16>,
                _ => attn_backward::<T, 0>,
            };
            backward(qkv.data(), g.data(), &probs, gq, &geom);
        })
    }

    /// 2×2 average pooling.
    pub fn avg_pool2(&self) -> Var<'t, T> {
        let x = self.value();
        let (n, h, w, c) = x.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial size {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let q = T::of(0.25);
        let mut out = vec![T::zero(); n * ho * wo * c];
        for s in 0..n {
            for i in 0..ho {
                for j in 0..wo {
                    let o = ((s * ho + i) * wo + j) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let src = ((s * h + 2 * i + dy) * w + 2 * j + dx) * c;
                        for k in 0..c {
                            out[o + k] += x.data()[src + k] * q;
                        }
                    }
                }
            }
        }
        let ix = self.id();
        let shape = x.shape().to_vec();
        self.tape().record(Tensor::new(&[n, ho, wo, c], out), &[*self], move |g, grads| {
            if let Some(gx) = grads.slot(ix, &shape) {
                for s in 0..n {
                    for i in 0..ho {
                        for j in 0..wo {
                            let o = ((s * ho + i) * wo + j) * c;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let dst = ((s * h + 2 * i + dy) * w + 2 * j + dx) * c;
                                for k in 0..c {
                                    gx[dst + k] += g.data()[o + k] * q;
                                }
                            }
                        }
                    }
                }
            }
        })
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&self) -> Var<'t, T> {
        let x = self.value();
        let (n, h, w, c) = x.dims4();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * ho * wo * c];
        for s in 0..n {
            for i in 0..ho {
                for j in 0..wo {
                    let dst = ((s * ho + i) * wo + j) * c;
                    let src = ((s * h + i / 2) * w + j / 2) * c;
                    out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
                }
            }
        }
        let ix = self.id();
        let shape = x.shape().to_vec();
        self.tape().record(Tensor::new(&[n, ho, wo, c], out), &[*self], move |g, grads| {
            if let Some(gx) = grads.slot(ix, &shape) {
                for s in 0..n {
                    for i in 0..ho {
                        for j in 0..wo {
                            let src = ((s * ho + i) * wo + j) * c;
                            let dst = ((s * h + i / 2) * w + j / 2) * c;
                            for k in 0..c {
                                gx[dst + k] += g.data()[src + k];
                            }
                        }
                    }
                }
            }
        })
    }

    /// Batch normalisation with batch statistics over `N, H, W`.
    ///
    /// Returns the output together with the batch mean and unbiased variance
    /// per channel (for running-statistic updates).
    pub fn batch_norm_train(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: f64) -> (Var<'t, T>, Vec<T>, Vec<T>) {
        let x = self.value();
        let c = x.last_dim();
        let m = x.len() / c;
        let inv_m = T::of(1.0 / m as f64);
        let mut mean = vec![T::zero(); c];
        for px in x.data().chunks(c) {
            for (a, &v) in mean.iter_mut().zip(px) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|v| *v *= inv_m);
        let mut var = vec![T::zero(); c];
        for px in x.data().chunks(c) {
            for ((a, &v), &mu) in var.iter_mut().zip(px).zip(&mean) {
                *a += (v - mu) * (v - mu);
            }
        }
        let unbiased: Vec<T> = var
            .iter()
            .map(|&v| if m > 1 { v / T::of((m - 1) as f64) } else { v })
            .collect();
        var.iter_mut().for_each(|v| *v *= inv_m);
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let gv = gamma.value();
        let bv = beta.value();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for ((px, hx), o) in x.data().chunks(c).zip(xhat.chunks_mut(c)).zip(out.chunks_mut(c)) {
            for k in 0..c {
                hx[k] = (px[k] - mean[k]) * rstd[k];
                o[k] = gv.data()[k] * hx[k] + bv.data()[k];
            }
        }
        let (ix, ig, ib) = (self.id(), gamma.id(), beta.id());
        let shape = x.shape().to_vec();
        let mf = T::of(m as f64);
        let y = self.tape().record(Tensor::new(&shape, out), &[*self, *gamma, *beta], move |g, grads| {
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for (gp, hx) in g.data().chunks(c).zip(xhat.chunks(c)) {
                for k in 0..c {
                    sum_g[k] += gp[k];
                    sum_gx[k] += gp[k] * hx[k];
                }
            }
            if let Some(gx) = grads.slot(ix, &shape) {
                for ((d, gp), hx) in gx.chunks_mut(c).zip(g.data().chunks(c)).zip(xhat.chunks(c)) {
                    for k in 0..c {
                        let gk = gv.data()[k];
                        d[k] += gk * rstd[k] / mf * (mf * gp[k] - sum_g[k] - hx[k] * sum_gx[k]);
                    }
                }
            }
            if let Some(gg) = grads.slot(ig, &[c]) {
                for k in 0..c {
                    gg[k] += sum_gx[k];
                }
            }
            if let Some(gb) = grads.slot(ib, &[c]) {
                for k in 0..c {
                    gb[k] += sum_g[k];
                }
            }
        });
        (y, mean, unbiased)
    }

    /// Batch normalisation with fixed running statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Var<'t, T> {
        let x = self.value();
        let c = x.last_dim();
        let rstd: Vec<T> = running_var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let mean = running_mean.to_vec();
        let gv = gamma.value();
        let bv = beta.value();
        let mut out = vec![T::zero(); x.len()];
        for (px, o) in x.data().chunks(c).zip(out.chunks_mut(c)) {
            for k in 0..c {
                o[k] = gv.data()[k] * (px[k] - mean[k]) * rstd[k] + bv.data()[k];
            }
        }
        let (ix, ig, ib) = (self.id(), gamma.id(), beta.id());
        let shape = x.shape().to_vec();
        self.tape().record(Tensor::new(&shape, out), &[*self, *gamma, *beta], move |g, grads| {
            if let Some(gx) = grads.slot(ix, &shape) {
                for (d, gp) in gx.chunks_mut(c).zip(g.data().chunks(c)) {
                    for k in 0..c {
                        d[k] += gp[k] * gv.data()[k] * rstd[k];
                    }
                }
            }
            if let Some(gg) = grads.slot(ig, &[c]) {
                for (gp, px) in g.data().chunks(c).zip(x.data().chunks(c)) {
                    for k in 0..c {
                        gg[k] += gp[k] * (px[k] - mean[k]) * rstd[k];
                    }
                }
            }
            if let Some(gb) = grads.slot(ib, &[c]) {
                for gp in g.data().chunks(c) {
                    for k in 0..c {
                        gb[k] += gp[k];
                    }
                }
            }
        })
    }
}
