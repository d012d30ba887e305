//! Elementwise, reduction and shape ops.

use super::{Real, Tensor, Var};

fn same_shape<T: Real>(a: &Var<'_, T>, b: &Var<'_, T>, op: &str) {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa, sb, "{op}: shape mismatch {sa:?} vs {sb:?}");
}

impl<'t, T: Real> Var<'t, T> {
    pub fn add(&self, other: &Var<'t, T>) -> Var<'t, T> {
        same_shape(self, other, "add");
        let (a, b) = (self.value(), other.value());
        let out: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let (ia, ib) = (self.id(), other.id());
        let shape = a.shape().to_vec();
        self.tape().record(Tensor::new(&shape, out), &[*self, *other], move |g, grads| {
            grads.add(ia, g.clone());
            grads.add(ib, g.clone());
        })
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Var<'t, T> {
        same_shape(self, other, "sub");
        let (a, b) = (self.value(), other.value());
        let out: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let (ia, ib) = (self.id(), other.id());
        let shape = a.shape().to_vec();
        self.tape().record(Tensor::new(&shape, out), &[*self, *other], move |g, grads| {
            grads.add(ia, g.clone());
            if grads.wants(ib) {
                grads.add(ib, g.map(|v| -v));
            }
        })
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Var<'t, T> {
        same_shape(self, other, "mul");
        let (a, b) = (self.value(), other.value());
        let out: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let (ia, ib) = (self.id(), other.id());
        let shape = a.shape().to_vec();
        self.tape().record(Tensor::new(&shape, out), &[*self, *other], move |g, grads| {
            if let Some(ga) = grads.slot(ia, a.shape()) {
                for ((d, &u), &y) in ga.iter_mut().zip(g.data()).zip(b.data()) {
                    *d += u * y;
                }
            }
            if let Some(gb) = grads.slot(ib, b.shape()) {
                for ((d, &u), &x) in gb.iter_mut().zip(g.data()).zip(a.data()) {
                    *d += u * x;
                }
            }
        })
    }

    pub fn scale(&self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        let a = self.value();
        let ia = self.id();
        self.tape().record(a.map(|v| v * s), &[*self], move |g, grads| {
            grads.add(ia, g.map(|v| v * s));
        })
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        let a = self.value();
        let ia = self.id();
        self.tape().record(a.map(|v| v + s), &[*self], move |g, grads| {
            grads.add(ia, g.clone());
        })
    }

    pub fn square(&self) -> Var<'t, T> {
        let a = self.value();
        let ia = self.id();
        let two = T::of(2.0);
        self.tape().record(a.map(|v| v * v), &[*self], move |g, grads| {
            if let Some(ga) = grads.slot(ia, a.shape()) {
                for ((d, &u), &x) in ga.iter_mut().zip(g.data()).zip(a.data()) {
                    *d += two * u * x;
                }
            }
        })
    }

    /// `exp(clamp(x, -bound, bound))`; the gradient is zero where the clamp is active.
    pub fn exp_clamped(&self, bound: f64) -> Var<'t, T> {
        let b = T::of(bound);
        let a = self.value();
        let out = a.map(|v| v.max(-b).min(b).exp());
        let y = out.clone();
        let ia = self.id();
        self.tape().record(out, &[*self], move |g, grads| {
            if let Some(ga) = grads.slot(ia, a.shape()) {
                for (((d, &u), &x), &e) in ga.iter_mut().zip(g.data()).zip(a.data()).zip(y.data()) {
                    if x > -b && x < b {
                        *d += u * e;
                    }
                }
            }
        })
    }

    /// GELU, tanh approximation, evaluated as `x · σ(2u)` with
    /// `u = √(2/π) (x + 0.044715 x³)`.
    pub fn gelu(&self) -> Var<'t, T> {
        let a = self.value();
        let c2 = T::of(2.0 * (2.0 / std::f64::consts::PI).sqrt());
        let k = T::of(0.044715);
        let one = T::one();
        let three = T::of(3.0);
        let sig = a.map(|x| one / (one + (-(c2 * (x + k * x * x * x))).exp()));
        let out = Tensor::new(a.shape(), a.data().iter().zip(sig.data()).map(|(&x, &s)| x * s).collect());
        let ia = self.id();
        self.tape().record(out, &[*self], move |g, grads| {
            if let Some(ga) = grads.slot(ia, a.shape()) {
                for (((d, &u), &x), &s) in ga.iter_mut().zip(g.data()).zip(a.data()).zip(sig.data()) {
                    let dy = s + x * s * (one - s) * c2 * (one + three * k * x * x);
                    *d += u * dy;
                }
            }
        })
    }

    pub fn silu(&self) -> Var<'t, T> {
        let a = self.value();
        let one = T::one();
        let out = a.map(|x| x / (one + (-x).exp()));
        let ia = self.id();
        self.tape().record(out, &[*self], move |g, grads| {
            if let Some(ga) = grads.slot(ia, a.shape()) {
                for ((d, &u), &x) in ga.iter_mut().zip(g.data()).zip(a.data()) {
                    let s = one / (one + (-x).exp());
                    *d += u * (s + x * s * (one - s));
                }
            }
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t, T> {
        let s = T::of(slope);
        let a = self.value();
        let out = a.map(|x| if x > T::zero() { x } else { s * x });
        let ia = self.id();
        self.tape().record(out, &[*self], move |g, grads| {
            if let Some(ga) = grads.slot(ia, a.shape()) {
                for ((d, &u), &x) in ga.iter_mut().zip(g.data()).zip(a.data()) {
                    *d += if x > T::zero() { u } else { s * u };
                }
            }
        })
    }

    pub fn sum_all(&self) -> Var<'t, T> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let ia = self.id();
        self.tape().record(Tensor::scalar(a.sum()), &[*self], move |g, grads| {
            let u = g.item();
            if let Some(ga) = grads.slot(ia, &shape) {
                for d in ga.iter_mut() {
                    *d += u;
                }
            }
        })
    }

    pub fn mean_all(&self) -> Var<'t, T> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Mean over all axes but the leading one: `[N, ...] -> [N]`.
    pub fn mean_per_sample(&self) -> Var<'t, T> {
        let a = self.value();
        let n = a.shape()[0];
        let row = a.len() / n;
        let inv = T::of(1.0 / row as f64);
        let out: Vec<T> = a
            .data()
            .chunks(row)
            .map(|r| r.iter().copied().sum::<T>() * inv)
            .collect();
        let shape = a.shape().to_vec();
        let ia = self.id();
        self.tape().record(Tensor::new(&[n], out), &[*self], move |g, grads| {
            if let Some(ga) = grads.slot(ia, &shape) {
                for (chunk, &u) in ga.chunks_mut(row).zip(g.data()) {
                    let v = u * inv;
                    for d in chunk.iter_mut() {
                        *d += v;
                    }
                }
            }
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t, T> {
        let a = self.value();
        let old = a.shape().to_vec();
        let out = (*a).clone().reshaped(shape);
        let ia = self.id();
        self.tape().record(out, &[*self], move |g, grads| {
            grads.add(ia, g.clone().reshaped(&old));
        })
    }

    /// Broadcast-add a per-sample channel vector `[N, C]` over every position of `[N, ..., C]`.
    pub fn add_channel_bias(&self, bias: &Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = bias.value();
        let n = a.shape()[0];
        let c = a.last_dim();
        assert_eq!(b.shape(), &[n, c], "add_channel_bias: bias shape {:?}", b.shape());
        let per = a.len() / n;
        let mut out = a.data().to_vec();
        for (s, chunk) in out.chunks_mut(per).enumerate() {
            let row = &b.data()[s * c..(s + 1) * c];
            for px in chunk.chunks_mut(c) {
                for (v, &bb) in px.iter_mut().zip(row) {
                    *v += bb;
                }
            }
        }
        let shape = a.shape().to_vec();
        let (ia, ib) = (self.id(), bias.id());
        self.tape().record(Tensor::new(&shape, out), &[*self, *bias], move |g, grads| {
            grads.add(ia, g.clone());
            if let Some(gb) = grads.slot(ib, &[n, c]) {
                for (s, chunk) in g.data().chunks(per).enumerate() {
                    let row = &mut gb[s * c..(s + 1) * c];
                    for px in chunk.chunks(c) {
                        for (d, &u) in row.iter_mut().zip(px) {
                            *d += u;
                        }
                    }
                }
            }
        })
    }

    /// Scale each sample of `[N, ...]` by the matching entry of a `[N]` vector.
    pub fn mul_per_sample(&self, factors: &Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let f = factors.value();
        let n = a.shape()[0];
        assert_eq!(f.shape(), &[n], "mul_per_sample: factor shape");
        let per = a.len() / n;
        let mut out = a.data().to_vec();
        for (chunk, &s) in out.chunks_mut(per).zip(f.data()) {
            for v in chunk.iter_mut() {
                *v *= s;
            }
        }
        let shape = a.shape().to_vec();
        let (ia, ifac) = (self.id(), factors.id());
        self.tape().record(Tensor::new(&shape, out), &[*self, *factors], move |g, grads| {
            if let Some(ga) = grads.slot(ia, &shape) {
                for ((dchunk, gchunk), &s) in ga.chunks_mut(per).zip(g.data().chunks(per)).zip(f.data()) {
                    for (d, &u) in dchunk.iter_mut().zip(gchunk) {
                        *d += u * s;
                    }
                }
            }
            if let Some(gf) = grads.slot(ifac, &[n]) {
                for ((d, gchunk), achunk) in gf.iter_mut().zip(g.data().chunks(per)).zip(a.data().chunks(per)) {
                    *d += gchunk.iter().zip(achunk).map(|(&u, &x)| u * x).sum::<T>();
                }
            }
        })
    }

    /// Concatenate along the trailing axis.
    pub fn concat_last(parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let lead = values[0].shape()[..values[0].shape().len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = values
            .iter()
            .map(|v| {
                assert_eq!(&v.shape()[..v.shape().len() - 1], &lead[..], "concat_last: leading dims");
                v.last_dim()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.clone();
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        parts[0].tape().record(Tensor::new(&shape, out), parts, move |g, grads| {
            let mut offset = 0;
            for ((&id, &w), s) in ids.iter().zip(&widths).zip(&shapes) {
                if let Some(gp) = grads.slot(id, s) {
                    for r in 0..rows {
                        let src = &g.data()[r * total + offset..r * total + offset + w];
                        for (d, &u) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                            *d += u;
                        }
                    }
                }
                offset += w;
            }
        })
    }

    /// Channels `[start, start + len)` of the trailing axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Var<'t, T> {
        let a = self.value();
        let c = a.last_dim();
        assert!(start + len <= c, "slice_last out of range");
        let rows = a.len() / c;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&a.data()[r * c + start..r * c + start + len]);
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let full = a.shape().to_vec();
        let ia = self.id();
        self.tape().record(Tensor::new(&shape, out), &[*self], move |g, grads| {
            if let Some(ga) = grads.slot(ia, &full) {
                for r in 0..rows {
                    for (d, &u) in ga[r * c + start..r * c + start + len]
                        .iter_mut()
                        .zip(&g.data()[r * len..(r + 1) * len])
                    {
                        *d += u;
                    }
                }
            }
        })
    }
}
