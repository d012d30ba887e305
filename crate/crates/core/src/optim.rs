//! AdamW with decoupled weight decay and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::networks::ParamSet;
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Euclidean norm over every present gradient.
pub fn global_norm<T: Real>(grads: &[Option<Tensor<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescale so the global norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm.is_finite() && norm > max_norm {
        let s = T::of(max_norm / (norm + 1e-6));
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Real> {
    pub lr: f64,
    pub weight_decay: f64,
    /// First and second moments, shaped like the parameters.
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamSet<T>, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) || !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::arg(format!("invalid AdamW settings lr={lr} weight_decay={weight_decay}")));
        }
        let mut m = ParamSet::new();
        for (name, p) in params.iter() {
            m.push(name, Tensor::zeros(p.shape()));
        }
        Ok(Self {
            lr,
            weight_decay,
            v: m.clone(),
            m,
            t: 0,
        })
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() || !self.m.same_structure(params) {
            return Err(Error::arg("optimizer state does not match the parameters"));
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let (c1, c2) = (T::of(1.0 - BETA1), T::of(1.0 - BETA2));
        let step = T::of(self.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(ADAM_EPS);
        let decay = T::of(1.0 - self.lr * self.weight_decay);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != params.get(i).shape() {
                return Err(Error::arg(format!("gradient shape mismatch for {}", params.names()[i])));
            }
            let m = self.m.get_mut(i).data_mut();
            let v = self.v.get_mut(i).data_mut();
            let p = params.get_mut(i).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + c1 * gk;
                v[k] = b2 * v[k] + c2 * gk * gk;
                p[k] = p[k] * decay - step * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(vals: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::from_f64(&[vals.len()], vals));
        p
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = params(&[1.0, -2.0, 0.5]);
        let mut opt = AdamW::new(&p, 0.1, 0.0).unwrap();
        let g = vec![Some(Tensor::from_f64(&[3], &[3.0, -0.01, 0.0]))];
        opt.step(&mut p, &g).unwrap();
        let got = p.get(0).data();
        assert!((got[0] - 0.9).abs() < 1e-6);
        assert!((got[1] - -1.9).abs() < 1e-4);
        assert_eq!(got[2], 0.5);
    }

    #[test]
    fn matches_scalar_reference() {
        // Reference recursion written out by hand.
        let (lr, wd) = (0.01, 0.1);
        let grads = [0.3, -1.2, 0.7, 0.05];
        let (mut x, mut m, mut v) = (0.8f64, 0.0f64, 0.0f64);
        for (k, &g) in grads.iter().enumerate() {
            let t = (k + 1) as i32;
            x -= lr * wd * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= lr * mh / (vh.sqrt() + 1e-8);
        }
        let mut p = params(&[0.8]);
        let mut opt = AdamW::new(&p, lr, wd).unwrap();
        for &g in &grads {
            opt.step(&mut p, &[Some(Tensor::from_f64(&[1], &[g]))]).unwrap();
        }
        assert!((p.get(0).item() - x).abs() < 1e-12);
        assert_eq!(opt.t, 4);
    }

    #[test]
    fn zero_lr_freezes() {
        let mut p = params(&[1.0, 2.0]);
        let before = p.clone();
        let mut opt = AdamW::new(&p, 0.0, 0.01).unwrap();
        opt.step(&mut p, &[Some(Tensor::from_f64(&[2], &[5.0, -5.0]))]).unwrap();
        assert_eq!(p, before);
        assert!(AdamW::new(&p, -1.0, 0.0).is_err());
        assert!(opt.step(&mut p, &[]).is_err());
    }

    #[test]
    fn clipping() {
        let mut g: Vec<Option<Tensor<f64>>> = vec![Some(Tensor::from_f64(&[2], &[3.0, 0.0])), None, Some(Tensor::from_f64(&[1], &[4.0]))];
        assert_eq!(global_norm(&g), 5.0);
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
        let mut small: Vec<Option<Tensor<f64>>> = vec![Some(Tensor::from_f64(&[1], &[0.5]))];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap().item(), 0.5);
    }
}
