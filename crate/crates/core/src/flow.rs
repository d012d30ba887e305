//! Linear flow path between the upsampled LRMS (`t = 1`) and the HRMS
//! (`t = 0`), its velocity target, endpoint reconstruction and Euler sampling.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// One interpolation point on the path.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState<T: Real> {
    pub y0: Tensor<T>,
    pub y1: Tensor<T>,
    pub t: f64,
    pub y_t: Tensor<T>,
}

/// `v = y1 - y0`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityTarget<T: Real> {
    pub v: Tensor<T>,
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::arg(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::arg(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

/// `y_t = t * y0 + (1 - t) * y1`.
pub fn interpolate<T: Real>(y0: &Tensor<T>, y1: &Tensor<T>, t: f64) -> Result<FlowState<T>> {
    same_shape(y0, y1, "interpolate")?;
    check_t(t)?;
    let (a, b) = (T::of(t), T::of(1.0 - t));
    let data = y0.data().iter().zip(y1.data()).map(|(&u, &v)| a * u + b * v).collect();
    Ok(FlowState {
        y0: y0.clone(),
        y1: y1.clone(),
        t,
        y_t: Tensor::new(y0.shape(), data),
    })
}

/// Per-sample interpolation of NHWC batches with `t[n]` for sample `n`.
pub fn interpolate_batch<T: Real>(y0: &Tensor<T>, y1: &Tensor<T>, t: &[f64]) -> Result<Tensor<T>> {
    same_shape(y0, y1, "interpolate_batch")?;
    let n = y0.shape()[0];
    if t.len() != n {
        return Err(Error::arg(format!("{} times for a batch of {n}", t.len())));
    }
    let row = y0.len() / n;
    let mut out = Vec::with_capacity(y0.len());
    for (s, &ts) in t.iter().enumerate() {
        check_t(ts)?;
        let (a, b) = (T::of(ts), T::of(1.0 - ts));
        let range = s * row..(s + 1) * row;
        out.extend(y0.data()[range.clone()].iter().zip(&y1.data()[range]).map(|(&u, &v)| a * u + b * v));
    }
    Ok(Tensor::new(y0.shape(), out))
}

pub fn velocity_target<T: Real>(y0: &Tensor<T>, y1: &Tensor<T>) -> Result<VelocityTarget<T>> {
    same_shape(y0, y1, "velocity_target")?;
    let data = y0.data().iter().zip(y1.data()).map(|(&a, &b)| b - a).collect();
    Ok(VelocityTarget {
        v: Tensor::new(y0.shape(), data),
    })
}

/// `ŷ1 = y_t + t * v_hat`, which returns `y1` for the true velocity at every `t`.
pub fn reconstruct_endpoint<T: Real>(state: &FlowState<T>, v_hat: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(&state.y_t, v_hat, "reconstruct_endpoint")?;
    let t = T::of(state.t);
    let data = state.y_t.data().iter().zip(v_hat.data()).map(|(&y, &v)| y + t * v).collect();
    Ok(Tensor::new(v_hat.shape(), data))
}

/// Integrate `dy = -v dt` from `t = 1` down to `t = 0` with `steps` explicit
/// Euler steps: `y <- y + dt * v(y, t)`, `t <- t - dt`.
///
/// `velocity` receives the current state and time; conditioning inputs are
/// captured by the closure.
pub fn euler_sample<T, F>(y0: &Tensor<T>, steps: usize, mut velocity: F) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    if steps == 0 {
        return Err(Error::arg("euler_sample needs at least one step"));
    }
    let dt = 1.0 / steps as f64;
    let dtr = T::of(dt);
    let mut y = y0.clone();
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let v = velocity(&y, t)?;
        same_shape(&y, &v, "euler_sample")?;
        for (a, &b) in y.data_mut().iter_mut().zip(v.data()) {
            *a += dtr * b;
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1], &[v])
    }

    fn random(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[n], (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    #[test]
    fn endpoints_and_midpoint() {
        let (y0, y1) = (random(16, 1), random(16, 2));
        assert_eq!(interpolate(&y0, &y1, 1.0).unwrap().y_t, y0);
        assert_eq!(interpolate(&y0, &y1, 0.0).unwrap().y_t, y1);
        assert_eq!(interpolate(&scalar(2.0), &scalar(6.0), 0.25).unwrap().y_t.item(), 5.0);
        assert!(interpolate(&y0, &random(3, 0), 0.5).is_err());
        assert!(interpolate(&y0, &y1, 1.5).is_err());
    }

    #[test]
    fn velocity_adds_back() {
        let (y0, y1) = (random(64, 3), random(64, 4));
        let v = velocity_target(&y0, &y1).unwrap().v;
        for ((a, b), c) in y0.data().iter().zip(v.data()).zip(y1.data()) {
            assert!((a + b - c).abs() < 1e-15);
        }
        assert!(velocity_target(&y0, &y0).unwrap().v.data().iter().all(|&v| v == 0.0));
        assert_eq!(velocity_target(&scalar(2.0), &scalar(6.0)).unwrap().v.item(), 4.0);
    }

    #[test]
    fn endpoint_reconstruction() {
        let s = interpolate(&scalar(2.0), &scalar(6.0), 0.5).unwrap();
        assert_eq!(s.y_t.item(), 4.0);
        assert_eq!(reconstruct_endpoint(&s, &scalar(4.0)).unwrap().item(), 6.0);

        let (y0, y1) = (random(32, 5), random(32, 6));
        let v = velocity_target(&y0, &y1).unwrap().v;
        for k in 0..=10 {
            let s = interpolate(&y0, &y1, k as f64 / 10.0).unwrap();
            assert!(reconstruct_endpoint(&s, &v).unwrap().max_abs_diff(&y1) < 1e-6);
        }
        let arbitrary = random(32, 7);
        let s = interpolate(&y0, &y1, 1.0).unwrap();
        let expect: Vec<f64> = y0.data().iter().zip(arbitrary.data()).map(|(a, b)| a + b).collect();
        assert_eq!(reconstruct_endpoint(&s, &arbitrary).unwrap().data(), &expect[..]);
    }

    #[test]
    fn batch_interpolation_matches_single() {
        let y0 = Tensor::new(&[2, 3], random(6, 8).into_data());
        let y1 = Tensor::new(&[2, 3], random(6, 9).into_data());
        let out = interpolate_batch(&y0, &y1, &[0.2, 0.9]).unwrap();
        let a = interpolate(&y0.slice_leading(0, 1), &y1.slice_leading(0, 1), 0.2).unwrap().y_t;
        let b = interpolate(&y0.slice_leading(1, 1), &y1.slice_leading(1, 1), 0.9).unwrap().y_t;
        assert_eq!(&out.data()[..3], a.data());
        assert_eq!(&out.data()[3..], b.data());
    }

    #[test]
    fn euler_special_cases() {
        let y0 = random(8, 10);
        let c = random(8, 11);
        let one = euler_sample(&y0, 1, |y, t| {
            assert_eq!(t, 1.0);
            Ok(Tensor::new(y.shape(), y.data().iter().map(|v| v * 0.5).collect()))
        })
        .unwrap();
        let direct: Vec<f64> = y0.data().iter().map(|v| v + v * 0.5).collect();
        assert_eq!(one.data(), &direct[..]);
        for k in [1, 3, 17] {
            let out = euler_sample(&y0, k, |_, _| Ok(c.clone())).unwrap();
            for ((o, a), b) in out.data().iter().zip(y0.data()).zip(c.data()) {
                assert!((o - (a + b)).abs() < 1e-12);
            }
        }
        assert!(euler_sample(&y0, 0, |_, _| Ok(c.clone())).is_err());
    }

    #[test]
    fn euler_first_order_convergence() {
        // dy/ds = a - y with s = 1 - t, so y(s=1) = a + (y0 - a) e^{-1}.
        let (a, y0) = (0.7, 2.0);
        let exact = a + (y0 - a) * (-1.0f64).exp();
        let errs: Vec<f64> = [10usize, 20, 40, 80]
            .iter()
            .map(|&k| {
                let out = euler_sample(&scalar(y0), k, |y, _| Ok(scalar(a - y.item()))).unwrap();
                (out.item() - exact).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let slope = (w[0] / w[1]).log2();
            assert!((0.8..=1.2).contains(&slope), "slope {slope}");
        }
    }
}
