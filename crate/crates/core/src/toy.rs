//! Two-dimensional Gaussian transport problem for checking that the
//! mapping/potential game recovers an optimal transport map.

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::networks::ParamSet;
use crate::optim::AdamW;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian2 {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

fn sqrtm(m: &Matrix2<f64>) -> Matrix2<f64> {
    let e = SymmetricEigen::new(*m);
    let d = Matrix2::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    e.eigenvectors * d * e.eigenvectors.transpose()
}

impl Gaussian2 {
    pub fn new(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Result<Self> {
        let cov = Matrix2::new(cov[0][0], cov[0][1], cov[1][0], cov[1][1]);
        if (cov[(0, 1)] - cov[(1, 0)]).abs() > 1e-12 || cov[(0, 0)] <= 0.0 || cov.determinant() <= 0.0 {
            return Err(Error::arg("covariance must be symmetric positive definite"));
        }
        Ok(Self {
            mean: Vector2::new(mean[0], mean[1]),
            cov,
        })
    }

    /// `n × 2` row-major samples.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let l = self.cov.cholesky().expect("positive definite").l();
        let mut out = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let z = Vector2::new(StandardNormal.sample(rng), StandardNormal.sample(rng));
            let x = self.mean + l * z;
            out.extend_from_slice(&[x[0], x[1]]);
        }
        out
    }
}

/// Squared 2-Wasserstein distance between two Gaussians.
pub fn bures_wasserstein(a: &Gaussian2, b: &Gaussian2) -> f64 {
    let rb = sqrtm(&b.cov);
    let cross = sqrtm(&(rb * a.cov * rb));
    (a.mean - b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr_mapping: f64,
    pub lr_potential: f64,
    /// Multiplies the squared distance inside the transport cost.
    pub cost_scale: f64,
    pub exp_clamp: f64,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 4000,
            batch: 512,
            lr_mapping: 1e-3,
            lr_potential: 1e-3,
            cost_scale: 0.05,
            exp_clamp: 30.0,
            eval_samples: 20_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyOutcome {
    /// `E |x - T(x)|²` on fresh source samples.
    pub transport_cost: f64,
    pub closed_form: f64,
    /// `E |x - y|²` for independently drawn pairs.
    pub independent_cost: f64,
    /// Mean and covariance of the pushed-forward samples.
    pub pushed_mean: [f64; 2],
    pub pushed_cov: [[f64; 2]; 2],
}

/// Dense SiLU network on `[N, 2]` rows.
struct Mlp {
    layers: usize,
}

impl Mlp {
    fn new(dims: &[usize], zero_last: bool, rng: &mut ChaCha8Rng) -> (Self, ParamSet<f32>) {
        use rand::Rng;
        let mut ps = ParamSet::new();
        for (i, pair) in dims.windows(2).enumerate() {
            let (cin, cout) = (pair[0], pair[1]);
            let bound = 1.0 / (cin as f64).sqrt();
            let w = if zero_last && i + 2 == dims.len() {
                Tensor::zeros(&[cin, cout])
            } else {
                Tensor::new(&[cin, cout], (0..cin * cout).map(|_| rng.gen_range(-bound..bound) as f32).collect())
            };
            ps.push(format!("l{i}.w"), w);
            ps.push(format!("l{i}.b"), Tensor::zeros(&[cout]));
        }
        (Self { layers: dims.len() - 1 }, ps)
    }

    fn forward<'t>(&self, p: &[Var<'t, f32>], x: &Var<'t, f32>) -> Var<'t, f32> {
        let mut h = *x;
        for i in 0..self.layers {
            h = h.linear(&p[2 * i], Some(&p[2 * i + 1]));
            if i + 1 < self.layers {
                h = h.silu();
            }
        }
        h
    }
}

fn rows(data: &[f64]) -> Tensor<f32> {
    Tensor::new(&[data.len() / 2, 2], data.iter().map(|&v| v as f32).collect())
}

/// Per-row `scale · |a - b|²`.
fn cost<'t>(a: &Var<'t, f32>, b: &Var<'t, f32>, scale: f64) -> Var<'t, f32> {
    a.sub(b).square().mean_per_sample().scale(2.0 * scale)
}

/// Train a residual map `T(x) = x + s(x)` against a potential on samples of
/// `source` and `target`, then measure its transport cost.
pub fn train_toy(source: &Gaussian2, target: &Gaussian2, cfg: &ToyConfig) -> Result<ToyOutcome> {
    if cfg.batch == 0 || cfg.hidden == 0 || cfg.eval_samples < 2 || !(cfg.cost_scale > 0.0) {
        return Err(Error::arg("toy config needs positive batch, width, cost scale and at least 2 eval samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.hidden;
    let (map, mut theta) = Mlp::new(&[2, h, h, 2], true, &mut rng);
    let (pot, mut phi) = Mlp::new(&[2, h, h, 1], false, &mut rng);
    let mut opt_t = AdamW::new(&theta, cfg.lr_mapping, 0.0)?;
    let mut opt_p = AdamW::new(&phi, cfg.lr_potential, 0.0)?;
    for step in 0..cfg.steps {
        // Linear decay to zero quiets the game near its equilibrium.
        let decay = 1.0 - step as f64 / cfg.steps as f64;
        opt_t.lr = cfg.lr_mapping * decay;
        opt_p.lr = cfg.lr_potential * decay;
        let x = rows(&source.sample(cfg.batch, &mut rng));
        let y = rows(&target.sample(cfg.batch, &mut rng));

        let tape = Tape::new();
        let tp = theta.bind(&tape, true);
        let pp = phi.bind(&tape, false);
        let xv = tape.constant(x);
        let tx = xv.add(&map.forward(&tp, &xv));
        let c = cost(&xv, &tx, cfg.cost_scale);
        let v = pot.forward(&pp, &tx).reshape(&[cfg.batch]);
        let l_t = c.sub(&v).mean_all();
        let mut g = tape.backward(l_t);
        let grads: Vec<_> = tp.iter().map(|p| g.take(*p)).collect();
        opt_t.step(&mut theta, &grads)?;
        let (tx, c, lt) = (tx.value(), c.value(), l_t.value().item());

        let tape = Tape::new();
        let pp = phi.bind(&tape, true);
        let fake = pot.forward(&pp, &tape.constant_rc(tx)).reshape(&[cfg.batch]);
        let real = pot.forward(&pp, &tape.constant(y)).reshape(&[cfg.batch]);
        let c = tape.constant_rc(c);
        let l_v = fake
            .sub(&c)
            .exp_clamped(cfg.exp_clamp)
            .mean_all()
            .add(&real.scale(-1.0).exp_clamped(cfg.exp_clamp).mean_all());
        if !l_v.value().item().is_finite() || !lt.is_finite() {
            return Err(Error::Numerical("toy transport training diverged".into()));
        }
        let mut g = tape.backward(l_v);
        let grads: Vec<_> = pp.iter().map(|p| g.take(*p)).collect();
        opt_p.step(&mut phi, &grads)?;
    }

    let n = cfg.eval_samples;
    let xs = source.sample(n, &mut rng);
    let ys = target.sample(n, &mut rng);
    let tape = Tape::new();
    let tp = theta.bind(&tape, false);
    let xv = tape.constant(rows(&xs));
    let pushed: Vec<f64> = xv.add(&map.forward(&tp, &xv)).value().data().iter().map(|&v| v as f64).collect();
    let sq = |a: &[f64], b: &[f64]| a.chunks(2).zip(b.chunks(2)).map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sum::<f64>() / n as f64;
    let mean = [0, 1].map(|k| pushed.iter().skip(k).step_by(2).sum::<f64>() / n as f64);
    let mut cov = [[0.0; 2]; 2];
    for p in pushed.chunks(2) {
        for a in 0..2 {
            for b in 0..2 {
                cov[a][b] += (p[a] - mean[a]) * (p[b] - mean[b]) / n as f64;
            }
        }
    }
    Ok(ToyOutcome {
        transport_cost: sq(&xs, &pushed),
        closed_form: bures_wasserstein(source, target),
        independent_cost: sq(&xs, &ys),
        pushed_mean: mean,
        pushed_cov: cov,
    })
}
