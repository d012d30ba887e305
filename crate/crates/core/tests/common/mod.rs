//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod gradients;

use std::time::Instant;

use otfm::checkpoint::Checkpoint;
use otfm::config::RunConfig;
use otfm::imagery::{synth_scene, SampleTriplet};
use otfm::networks::ParamSet;
use otfm::tensor::{Tape, Tensor, Var};
use otfm::trainer::{Trainer, TrainingSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// `Σ r ⊙ y` for a fixed random probe `r`, turning any output into a scalar.
pub fn probe<'t>(y: &Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let r = random_tensor(&y.shape(), seed, -1.0, 1.0);
    y.mul(&y.tape().constant(r)).sum_all()
}

/// Evenly spread coordinate indices, at most `max` of them.
fn coords(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|k| k * len / max).collect()
    }
}

const FD_EPS: f64 = 1e-5;

fn relative(pairs: &[(f64, f64)]) -> f64 {
    let num: f64 = pairs.iter().map(|(g, fd)| (g - fd).powi(2)).sum();
    let den: f64 = pairs.iter().map(|(_, fd)| fd * fd).sum();
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        f64::NAN
    }
}

/// Relative error between the analytic and central-difference gradient of
/// the scalar `f` at `x`.
pub fn input_grad_error(x: &Tensor<f64>, max_coords: usize, f: impl for<'t> Fn(Var<'t, f64>) -> Var<'t, f64>) -> f64 {
    let eval = |x: &Tensor<f64>| {
        let tape = Tape::new();
        f(tape.leaf(x.clone())).value().item()
    };
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let grads = tape.backward(f(xv));
    let g = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let pairs: Vec<(f64, f64)> = coords(x.len(), max_coords)
        .into_iter()
        .map(|i| {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += FD_EPS;
            xm.data_mut()[i] -= FD_EPS;
            (g.data()[i], (eval(&xp) - eval(&xm)) / (2.0 * FD_EPS))
        })
        .collect();
    relative(&pairs)
}

/// As [`input_grad_error`], over the parameters of `ps`.
pub fn param_grad_error(
    ps: &ParamSet<f64>,
    max_per_tensor: usize,
    f: impl for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>,
) -> f64 {
    let eval = |ps: &ParamSet<f64>| {
        let tape = Tape::new();
        f(&ps.bind(&tape, false)).value().item()
    };
    let tape = Tape::new();
    let vars = ps.bind(&tape, true);
    let mut grads = tape.backward(f(&vars));
    let mut pairs = Vec::new();
    for (k, v) in vars.iter().enumerate() {
        let g = grads.take(*v).unwrap_or_else(|| Tensor::zeros(ps.get(k).shape()));
        for i in coords(g.len(), max_per_tensor) {
            let (mut pp, mut pm) = (ps.clone(), ps.clone());
            pp.get_mut(k).data_mut()[i] += FD_EPS;
            pm.get_mut(k).data_mut()[i] -= FD_EPS;
            pairs.push((g.data()[i], (eval(&pp) - eval(&pm)) / (2.0 * FD_EPS)));
        }
    }
    relative(&pairs)
}

/// Add deterministic noise to every parameter so zero-initialised branches
/// carry gradient.
pub fn perturb(ps: &mut ParamSet<f64>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..ps.len() {
        for v in ps.get_mut(k).data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

pub struct DeskRun {
    pub checkpoint: Checkpoint,
    /// `L_flow` of every step, index 0 is step 1.
    pub flows: Vec<f64>,
    /// Every step's log line.
    pub log: String,
    pub seconds: f64,
}

/// Train `cfg` from scratch, recording every step.
pub fn desk_run(cfg: &RunConfig, data: &TrainingSet) -> otfm::Result<DeskRun> {
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg.clone())?;
    let (mut flows, mut log) = (Vec::new(), String::new());
    trainer.fit(data, |_, rec| {
        flows.push(rec.losses.flow);
        log.push_str(&rec.log_line());
        log.push('\n');
        Ok(())
    })?;
    Ok(DeskRun {
        checkpoint: trainer.checkpoint(),
        flows,
        log,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// `count` synthetic scenes with seeds `first..first + count`.
pub fn scenes(first: u64, count: u64, bands: usize, hr: usize, ratio: usize) -> Vec<SampleTriplet> {
    (first..first + count).map(|s| synth_scene(s, bands, hr, ratio).unwrap()).collect()
}
