//! Fixed linear image operators (MTF blur, decimation, band mixing) as
//! differentiable ops, plus the plane kernels they share with the raster path.

use super::{Real, Tensor, Var};

/// Half-sample symmetric boundary: `... b a | a b c ... z | z y ...`.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable convolution of one `h × w` plane with a centred odd 1-D kernel
/// applied along both axes, reflective boundaries.
pub fn blur_plane<T: Real>(src: &[T], h: usize, w: usize, k: &[T]) -> Vec<T> {
    debug_assert_eq!(src.len(), h * w);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![T::zero(); h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = T::zero();
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * row[reflect_index(x as isize + t as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for (t, &kv) in k.iter().enumerate() {
            let sy = reflect_index(y as isize + t as isize - r, h);
            let srow = &tmp[sy * w..(sy + 1) * w];
            for (o, &v) in out[y * w..(y + 1) * w].iter_mut().zip(srow) {
                *o += kv * v;
            }
        }
    }
    out
}

/// Adjoint of [`blur_plane`].
pub fn blur_plane_adjoint<T: Real>(grad: &[T], h: usize, w: usize, k: &[T]) -> Vec<T> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![T::zero(); h * w];
    for y in 0..h {
        for (t, &kv) in k.iter().enumerate() {
            let sy = reflect_index(y as isize + t as isize - r, h);
            for x in 0..w {
                tmp[sy * w + x] += kv * grad[y * w + x];
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let u = tmp[y * w + x];
            for (t, &kv) in k.iter().enumerate() {
                out[y * w + reflect_index(x as isize + t as isize - r, w)] += kv * u;
            }
        }
    }
    out
}

fn nhwc_plane<T: Real>(data: &[T], s: usize, ch: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let base = s * h * w * c;
    (0..h * w).map(|p| data[base + p * c + ch]).collect()
}

impl<'t, T: Real> Var<'t, T> {
    /// Per-channel separable blur of an NHWC tensor; `kernels[c]` is the 1-D
    /// kernel for channel `c`.
    pub fn blur_reflect(&self, kernels: &[Vec<T>]) -> Var<'t, T> {
        let x = self.value();
        let (n, h, w, c) = x.dims4();
        assert_eq!(kernels.len(), c, "blur_reflect: one kernel per channel");
        let mut out = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let plane = blur_plane(&nhwc_plane(x.data(), s, ch, h, w, c), h, w, &kernels[ch]);
                for (p, v) in plane.into_iter().enumerate() {
                    out[(s * h * w + p) * c + ch] = v;
                }
            }
        }
        let kernels = kernels.to_vec();
        let ix = self.id();
        let shape = x.shape().to_vec();
        self.tape().record(Tensor::new(&shape, out), &[*self], move |g, grads| {
            if let Some(gx) = grads.slot(ix, &shape) {
                for s in 0..n {
                    for ch in 0..c {
                        let plane = blur_plane_adjoint(&nhwc_plane(g.data(), s, ch, h, w, c), h, w, &kernels[ch]);
                        for (p, v) in plane.into_iter().enumerate() {
                            gx[(s * h * w + p) * c + ch] += v;
                        }
                    }
                }
            }
        })
    }

    /// Keep one pixel per `ratio × ratio` block at offset `(ratio/2, ratio/2)`.
    pub fn decimate(&self, ratio: usize) -> Var<'t, T> {
        let x = self.value();
        let (n, h, w, c) = x.dims4();
        assert!(h % ratio == 0 && w % ratio == 0, "decimate: {h}x{w} not divisible by {ratio}");
        let (ho, wo, off) = (h / ratio, w / ratio, ratio / 2);
        let mut out = Vec::with_capacity(n * ho * wo * c);
        for s in 0..n {
            for i in 0..ho {
                for j in 0..wo {
                    let src = ((s * h + i * ratio + off) * w + j * ratio + off) * c;
                    out.extend_from_slice(&x.data()[src..src + c]);
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
                            let dst = ((s * h + i * ratio + off) * w + j * ratio + off) * c;
                            let src = ((s * ho + i) * wo + j) * c;
                            for k in 0..c {
                                gx[dst + k] += g.data()[src + k];
                            }
                        }
                    }
                }
            }
        })
    }

    /// Per-sample affine band mixture `Σ_b weights[n, b] · x[n, .., b] + bias[n]`,
    /// producing a single-channel tensor. Weights and bias are constants.
    pub fn band_combine(&self, weights: &Tensor<T>, bias: &[T]) -> Var<'t, T> {
        let x = self.value();
        let (n, h, w, c) = x.dims4();
        assert_eq!(weights.shape(), &[n, c], "band_combine: weight shape");
        assert_eq!(bias.len(), n, "band_combine: bias length");
        let mut out = Vec::with_capacity(n * h * w);
        for s in 0..n {
            let wrow = &weights.data()[s * c..(s + 1) * c];
            for px in x.data()[s * h * w * c..(s + 1) * h * w * c].chunks(c) {
                out.push(px.iter().zip(wrow).map(|(&a, &b)| a * b).sum::<T>() + bias[s]);
            }
        }
        let weights = weights.clone();
        let ix = self.id();
        let shape = x.shape().to_vec();
        self.tape().record(Tensor::new(&[n, h, w, 1], out), &[*self], move |g, grads| {
            if let Some(gx) = grads.slot(ix, &shape) {
                for s in 0..n {
                    let wrow = &weights.data()[s * c..(s + 1) * c];
                    for p in 0..h * w {
                        let u = g.data()[s * h * w + p];
                        let base = (s * h * w + p) * c;
                        for k in 0..c {
                            gx[base + k] += u * wrow[k];
                        }
                    }
                }
            }
        })
    }
}
