//! One-step and multi-step fusion with a trained mapping network, plus
//! latency measurement.

use std::path::Path;
use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::degradation::bicubic_resize;
use crate::error::{Error, Result};
use crate::flow::euler_sample;
use crate::imagery::{stack_nhwc, unstack_nhwc, RasterImage};
use crate::networks::{MappingNet, ParamSet};
use crate::tensor::{Tape, Tensor};
use crate::trainer::condition;

#[derive(Clone, Debug)]
pub struct FusionRequest {
    pub pan: RasterImage,
    pub lrms: RasterImage,
    /// Euler steps; 1 is the one-step map.
    pub steps: usize,
    pub use_ema: bool,
}

impl FusionRequest {
    /// One step with the EMA weights.
    pub fn new(pan: RasterImage, lrms: RasterImage) -> Self {
        Self {
            pan,
            lrms,
            steps: 1,
            use_ema: true,
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }
}

/// A mapping network bound to one parameter set, ready for inference.
#[derive(Clone, Debug)]
pub struct FusionModel {
    pub config: RunConfig,
    mapping: MappingNet,
    theta: ParamSet<f32>,
}

impl FusionModel {
    pub fn new(ck: &Checkpoint, use_ema: bool) -> Result<Self> {
        let (mapping, theta0) = MappingNet::new::<f32>(ck.config.model.clone(), ck.config.train.seed)?;
        let theta = if use_ema { &ck.state.theta_ema } else { &ck.state.theta };
        if !theta.same_structure(&theta0) {
            return Err(Error::arg("checkpoint parameters do not match its mapping architecture"));
        }
        Ok(Self {
            config: ck.config.clone(),
            mapping,
            theta: theta.clone(),
        })
    }

    pub fn load(path: impl AsRef<Path>, use_ema: bool) -> Result<Self> {
        Self::new(&Checkpoint::load(path)?, use_ema)
    }

    pub fn bands(&self) -> usize {
        self.config.model.bands
    }

    pub fn ratio(&self) -> usize {
        self.config.mtf.ratio
    }

    fn check_inputs(&self, pan: &RasterImage, lrms: &RasterImage) -> Result<()> {
        if lrms.bands() != self.bands() {
            return Err(Error::arg(format!(
                "model expects {} bands, LRMS has {}",
                self.bands(),
                lrms.bands()
            )));
        }
        let r = self.ratio();
        if pan.bands() != 1 || pan.height() != lrms.height() * r || pan.width() != lrms.width() * r {
            return Err(Error::arg(format!(
                "PAN {:?} and LRMS {:?} are not consistent with ratio {r}",
                pan.shape(),
                lrms.shape()
            )));
        }
        let m = self.mapping.size_multiple();
        if pan.height() % m != 0 || pan.width() % m != 0 {
            return Err(Error::arg(format!(
                "HR size {}x{} not divisible by {m}",
                pan.height(),
                pan.width()
            )));
        }
        Ok(())
    }

    /// Integrate from the bicubic upsampling of `lrms` with `steps` Euler
    /// steps and clip to `[0, 1]`.
    pub fn fuse(&self, pan: &RasterImage, lrms: &RasterImage, steps: usize) -> Result<RasterImage> {
        if steps == 0 {
            return Err(Error::arg("steps must be at least 1"));
        }
        self.check_inputs(pan, lrms)?;
        let y0 = bicubic_resize(lrms, self.ratio(), 1)?;
        let cond = stack_nhwc::<f32>(&[&condition(&y0, pan)?])?;
        let start = stack_nhwc::<f32>(&[&y0])?;
        let out = euler_sample(&start, steps, |y, t| self.velocity(y, t, &cond))?;
        let img = unstack_nhwc(&out)?.remove(0);
        Ok(img.clipped().with_sensor_tag(pan.sensor_tag().map(str::to_string)))
    }

    fn velocity(&self, y: &Tensor<f32>, t: f64, cond: &Tensor<f32>) -> Result<Tensor<f32>> {
        let tape = Tape::new();
        let p = self.theta.bind(&tape, false);
        let s = self.mapping.forward(&p, &tape.constant(y.clone()), &[t], &tape.constant(cond.clone()))?;
        Ok(s.value().as_ref().clone())
    }
}

pub fn fuse(req: &FusionRequest, ck: &Checkpoint) -> Result<RasterImage> {
    FusionModel::new(ck, req.use_ema)?.fuse(&req.pan, &req.lrms, req.steps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyRow {
    pub steps: usize,
    /// Median wall time of one fusion, seconds.
    pub seconds: f64,
    /// Standard deviation over mean of the timed repeats.
    pub cv: f64,
}

/// Time `fuse` on a fixed synthetic input of `hr_size × hr_size` for each
/// step count. One untimed warm-up call precedes each configuration.
pub fn bench_latency(ck: &Checkpoint, hr_size: usize, steps_list: &[usize], repeats: usize) -> Result<Vec<LatencyRow>> {
    if repeats < 3 {
        return Err(Error::arg(format!("repeats must be at least 3, got {repeats}")));
    }
    if steps_list.is_empty() || steps_list.contains(&0) {
        return Err(Error::arg("step counts must be a non-empty list of values >= 1"));
    }
    let model = FusionModel::new(ck, true)?;
    let r = model.ratio();
    if hr_size == 0 || hr_size % r != 0 {
        return Err(Error::arg(format!("hr_size {hr_size} is not a positive multiple of the ratio {r}")));
    }
    let scene = crate::imagery::synth_scene(0, model.bands(), hr_size, r)?;
    let mut rows = Vec::with_capacity(steps_list.len());
    for &steps in steps_list {
        model.fuse(&scene.pan, &scene.lrms, steps)?;
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            model.fuse(&scene.pan, &scene.lrms, steps)?;
            times.push(start.elapsed().as_secs_f64());
        }
        let mean = times.iter().sum::<f64>() / repeats as f64;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / repeats as f64;
        times.sort_by(f64::total_cmp);
        let seconds = if repeats % 2 == 1 {
            times[repeats / 2]
        } else {
            0.5 * (times[repeats / 2 - 1] + times[repeats / 2])
        };
        rows.push(LatencyRow {
            steps,
            seconds,
            cv: if mean > 0.0 { var.sqrt() / mean } else { 0.0 },
        });
    }
    let mut sorted: Vec<&LatencyRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.steps);
    if sorted.windows(2).any(|w| w[1].seconds < w[0].seconds) {
        let table: Vec<String> = sorted.iter().map(|r| format!("{}:{:.4}s", r.steps, r.seconds)).collect();
        return Err(Error::Numerical(format!("latency is not monotone in steps ({})", table.join(", "))));
    }
    Ok(rows)
}
