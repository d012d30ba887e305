//! Alternating training of the velocity/mapping network and the potential:
//! flow-matching regression plus the transport objective on the one-step
//! endpoint estimate, followed by a potential update on that same estimate.

use std::io::Write;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::degradation::{bicubic_resize, MtfSpec};
use crate::error::{Error, Result};
use crate::flow::{interpolate_batch, velocity_target};
use crate::imagery::{extract_patches, stack_nhwc, DatasetManifest, RasterImage, SampleTriplet};
use crate::networks::{ema_update, BnMode, MappingNet, ParamSet, PotentialNet};
use crate::optim::{clip_global_norm, AdamW};
use crate::tensor::{Tape, Tensor, Var};
use crate::uot::{mapping_loss, potential_loss, regularized_cost_batch, sample_prior, CostConfig, CostContext, CostTerms, LossBreakdown, SamplePrior};

const PERMUTATION_SALT: u64 = 0x7065_726d_7574_6521;
const TIME_SALT: u64 = 0x7469_6d65_7374_6570;
const POTENTIAL_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_mapping: f64,
    pub lr_potential: f64,
    pub max_steps: u64,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub seed: u64,
    pub cost: CostConfig,
    pub weight_flow: f64,
    pub weight_mapping: f64,
    pub weight_decay: f64,
    /// Global gradient norm bound applied to each network separately.
    pub grad_clip: f64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Abort once this many consecutive steps have failed.
    pub max_failed_steps: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_mapping: 2e-4,
            lr_potential: 1e-4,
            max_steps: 100_000,
            batch_size: 52,
            ema_decay: 0.99,
            seed: 0,
            cost: CostConfig::default(),
            weight_flow: 1.0,
            weight_mapping: 1.0,
            weight_decay: 0.01,
            grad_clip: 1.0,
            checkpoint_every: 1000,
            log_every: 100,
            max_failed_steps: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_mapping > 0.0 && self.lr_mapping.is_finite()) {
            return Err(Error::arg(format!("lr_mapping must be > 0, got {}", self.lr_mapping)));
        }
        // Zero freezes the potential, which the flow-matching ablation relies on.
        if !(self.lr_potential >= 0.0 && self.lr_potential.is_finite()) {
            return Err(Error::arg(format!("lr_potential must be >= 0, got {}", self.lr_potential)));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::arg(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        for (name, v) in [
            ("weight_flow", self.weight_flow),
            ("weight_mapping", self.weight_mapping),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::arg(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::arg(format!("grad_clip must be > 0, got {}", self.grad_clip)));
        }
        if self.log_every == 0 {
            return Err(Error::arg("log_every must be at least 1"));
        }
        self.cost.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainStepRecord {
    /// 1-based index of the step this record describes.
    pub step: u64,
    pub losses: LossBreakdown,
    /// Pre-clipping global gradient norms of (mapping, potential).
    pub grad_norms: (f64, f64),
    pub wall_time: f64,
    pub failed: bool,
}

impl TrainStepRecord {
    /// `step=<n> flow=<f> map=<f> pot=<f>`, plus `failed=1` on rolled-back steps.
    pub fn log_line(&self) -> String {
        let l = &self.losses;
        let mut s = format!("step={} flow={} map={} pot={}", self.step, l.flow, l.mapping, l.potential);
        if self.failed {
            s.push_str(" failed=1");
        }
        s
    }
}

/// Parse a log line written by [`TrainStepRecord::log_line`] into
/// `(step, flow, map, pot)`.
pub fn parse_log_line(line: &str) -> Option<(u64, f64, f64, f64)> {
    let mut it = line.split_whitespace();
    let mut field = |key: &str| it.next()?.strip_prefix(key)?.strip_prefix('=').map(str::to_string);
    let step = field("step")?.parse().ok()?;
    let flow = field("flow")?.parse().ok()?;
    let map = field("map")?.parse().ok()?;
    let pot = field("pot")?.parse().ok()?;
    Some((step, flow, map, pot))
}

/// One training patch with its observation-only constants precomputed.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub triplet: SampleTriplet,
    /// Bicubic-upsampled LRMS.
    pub y0: RasterImage,
    /// `[y0, pan]`, `B + 1` bands.
    pub cond: RasterImage,
    pub prior: SamplePrior,
}

impl PreparedSample {
    pub fn new(triplet: SampleTriplet, mtf: &MtfSpec, cost: &CostConfig) -> Result<Self> {
        if triplet.hrms_ref.is_none() {
            return Err(Error::arg("training triplets need an HRMS reference"));
        }
        let y0 = bicubic_resize(&triplet.lrms, triplet.ratio, 1)?;
        let prior = sample_prior(&triplet.pan, &y0, mtf, cost.spectral_variant)?;
        let cond = condition(&y0, &triplet.pan)?;
        Ok(Self {
            triplet,
            y0,
            cond,
            prior,
        })
    }
}

/// `[up(m), p]` as one `B + 1` band image.
pub fn condition(y0: &RasterImage, pan: &RasterImage) -> Result<RasterImage> {
    if (y0.height(), y0.width()) != (pan.height(), pan.width()) || pan.bands() != 1 {
        return Err(Error::arg("condition needs an HR image and a single-band PAN of the same size"));
    }
    let mut data = Vec::with_capacity(y0.data().len() + pan.data().len());
    data.extend_from_slice(y0.data());
    data.extend_from_slice(pan.data());
    RasterImage::new(y0.bands() + 1, y0.height(), y0.width(), data)
}

/// Patches ready for batching, all sharing one shape and one MTF.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub samples: Vec<PreparedSample>,
    pub mtf: MtfSpec,
}

impl TrainingSet {
    pub fn new(triplets: &[SampleTriplet], cfg: &RunConfig) -> Result<Self> {
        let first = triplets.first().ok_or_else(|| Error::arg("training set is empty"))?;
        let tag = first.pan.sensor_tag();
        let mtf = cfg.mtf_for(tag).clone();
        let mut samples = Vec::new();
        for t in triplets {
            if cfg.mtf_for(t.pan.sensor_tag()) != &mtf {
                return Err(Error::arg("training triplets mix sensors with different MTFs"));
            }
            if t.ratio != mtf.ratio || t.bands() != cfg.model.bands {
                return Err(Error::arg(format!(
                    "triplet with {} bands at ratio {} does not match the config ({} bands, ratio {})",
                    t.bands(),
                    t.ratio,
                    cfg.model.bands,
                    mtf.ratio
                )));
            }
            let (h, w) = t.hr_size();
            let ps = cfg.data.patch_size;
            let patches = if ps == 0 || (ps == h && ps == w && cfg.data.patch_stride_or_size() == ps) {
                vec![t.clone()]
            } else {
                extract_patches(t, ps, cfg.data.patch_stride_or_size())?
            };
            for p in patches {
                samples.push(PreparedSample::new(p, &mtf, &cfg.train.cost)?);
            }
        }
        let shape = samples[0].y0.shape();
        if samples.iter().any(|s| s.y0.shape() != shape) {
            return Err(Error::arg("training patches differ in size; set data.patch_size"));
        }
        let multiple = 1 << (cfg.model.levels - 1);
        if shape.1 % multiple != 0 || shape.2 % multiple != 0 {
            return Err(Error::arg(format!(
                "patch size {}x{} not divisible by {multiple}",
                shape.1, shape.2
            )));
        }
        if samples.len() < cfg.train.batch_size {
            return Err(Error::arg(format!(
                "{} training patches for a batch of {}",
                samples.len(),
                cfg.train.batch_size
            )));
        }
        Ok(Self { samples, mtf })
    }

    pub fn from_manifest(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::arg("manifest lists no triplets"));
        }
        Self::new(&manifest.load_all()?, cfg)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices for 0-based step `step`: consecutive slices of a
    /// per-epoch seeded permutation, dropping the incomplete tail batch.
    pub fn batch_indices(&self, seed: u64, step: u64, batch: usize) -> Vec<usize> {
        let per_epoch = (self.len() / batch).max(1) as u64;
        let (epoch, slot) = (step / per_epoch, (step % per_epoch) as usize);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PERMUTATION_SALT);
        rng.set_stream(epoch);
        let mut perm: Vec<usize> = (0..self.len()).collect();
        perm.shuffle(&mut rng);
        perm[slot * batch..(slot + 1) * batch].to_vec()
    }
}

/// Flow times for 1-based step `step`, one per batch element, in `[0, 1)`.
pub fn step_times(seed: u64, step: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ TIME_SALT);
    rng.set_stream(step);
    (0..n).map(|_| rng.gen::<f64>()).collect()
}

/// NHWC tensors for one batch.
pub struct Batch {
    pub y0: Rc<Tensor<f32>>,
    pub y1: Tensor<f32>,
    pub cond: Tensor<f32>,
    pub ctx: CostContext<f32>,
}

impl Batch {
    pub fn new(samples: &[&PreparedSample], mtf: &MtfSpec) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let mut refs = Vec::with_capacity(samples.len());
        for s in samples {
            refs.push(
                s.triplet
                    .hrms_ref
                    .as_ref()
                    .ok_or_else(|| Error::arg("training triplets need an HRMS reference"))?,
            );
        }
        let y0 = Rc::new(stack_nhwc(&samples.iter().map(|s| &s.y0).collect::<Vec<_>>())?);
        let pan = Rc::new(stack_nhwc(&samples.iter().map(|s| &s.triplet.pan).collect::<Vec<_>>())?);
        let lrms = Rc::new(stack_nhwc(&samples.iter().map(|s| &s.triplet.lrms).collect::<Vec<_>>())?);
        let priors: Vec<&SamplePrior> = samples.iter().map(|s| &s.prior).collect();
        let ctx = CostContext::new(y0.clone(), pan, lrms, &priors, mtf)?;
        Ok(Self {
            y1: stack_nhwc(&refs)?,
            cond: stack_nhwc(&samples.iter().map(|s| &s.cond).collect::<Vec<_>>())?,
            y0,
            ctx,
        })
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of steps taken, including rolled-back ones.
    pub step: u64,
    pub failed_streak: u32,
    pub theta: ParamSet<f32>,
    pub theta_ema: ParamSet<f32>,
    pub phi: ParamSet<f32>,
    pub phi_ema: ParamSet<f32>,
    /// BatchNorm running statistics of the potential.
    pub bn: ParamSet<f32>,
    pub opt_theta: AdamW<f32>,
    pub opt_phi: AdamW<f32>,
}

pub struct Trainer {
    pub config: RunConfig,
    pub mapping: MappingNet,
    pub potential: PotentialNet,
    pub state: TrainState,
}

/// Build both networks from a config; parameters are the seeded initialisation.
pub fn build_networks(cfg: &RunConfig) -> Result<(MappingNet, ParamSet<f32>, PotentialNet, ParamSet<f32>, ParamSet<f32>)> {
    cfg.validate()?;
    let (mapping, theta) = MappingNet::new::<f32>(cfg.model.clone(), cfg.train.seed)?;
    let (potential, phi, bn) =
        PotentialNet::new::<f32>(cfg.potential.clone(), cfg.train.seed.wrapping_add(POTENTIAL_SEED_OFFSET))?;
    Ok((mapping, theta, potential, phi, bn))
}

struct MappingPass {
    flow: f64,
    mapping: f64,
    terms: CostTerms,
    grads: Vec<Option<Tensor<f32>>>,
    norm: f64,
    y_hat: Rc<Tensor<f32>>,
    cost: Rc<Tensor<f32>>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        let (mapping, theta, potential, phi, bn) = build_networks(&config)?;
        let t = &config.train;
        let state = TrainState {
            step: 0,
            failed_streak: 0,
            opt_theta: AdamW::new(&theta, t.lr_mapping, t.weight_decay)?,
            opt_phi: AdamW::new(&phi, t.lr_potential, t.weight_decay)?,
            theta_ema: theta.clone(),
            phi_ema: phi.clone(),
            theta,
            phi,
            bn,
        };
        Ok(Self {
            config,
            mapping,
            potential,
            state,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut trainer = Self::new(ck.config)?;
        let s = &trainer.state;
        let st = &ck.state;
        let structure_ok = st.theta.same_structure(&s.theta)
            && st.theta_ema.same_structure(&s.theta)
            && st.phi.same_structure(&s.phi)
            && st.phi_ema.same_structure(&s.phi)
            && st.bn.same_structure(&s.bn)
            && st.opt_theta.m.same_structure(&s.theta)
            && st.opt_theta.v.same_structure(&s.theta)
            && st.opt_phi.m.same_structure(&s.phi)
            && st.opt_phi.v.same_structure(&s.phi);
        if !structure_ok {
            return Err(Error::arg("checkpoint parameters do not match the architecture in its config"));
        }
        trainer.state = ck.state;
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            state: self.state.clone(),
        }
    }

    /// One full iteration on a raw batch of triplets.
    pub fn train_step(&mut self, batch: &[SampleTriplet]) -> Result<TrainStepRecord> {
        let set = TrainingSet::new(batch, &self.config)?;
        let refs: Vec<&PreparedSample> = set.samples.iter().collect();
        self.step_on(&refs, &set.mtf)
    }

    /// One iteration: θ update on `weight_flow·L_flow + weight_mapping·L_T`,
    /// then φ update on `L_v` with the same detached endpoint estimate, then EMA.
    /// A non-finite loss, gradient or parameter rolls the whole state back.
    pub fn step_on(&mut self, samples: &[&PreparedSample], mtf: &MtfSpec) -> Result<TrainStepRecord> {
        let start = Instant::now();
        let step = self.state.step + 1;
        let batch = Batch::new(samples, mtf)?;
        let t = step_times(self.config.train.seed, step, samples.len());
        let snapshot = self.state.clone();
        let outcome = self.update(&batch, &t);
        let (losses, norms, ok) = match outcome {
            Ok((losses, norms)) => (losses, norms, true),
            Err(Failed(losses, norms)) => (losses, norms, false),
        };
        if ok {
            self.state.step = step;
            self.state.failed_streak = 0;
        } else {
            self.state = snapshot;
            self.state.step = step;
            self.state.failed_streak += 1;
        }
        Ok(TrainStepRecord {
            step,
            losses,
            grad_norms: norms,
            wall_time: start.elapsed().as_secs_f64(),
            failed: !ok,
        })
    }

    fn update(&mut self, batch: &Batch, t: &[f64]) -> std::result::Result<(LossBreakdown, (f64, f64)), Failed> {
        let cfg = self.config.train.clone();
        let nan = LossBreakdown {
            flow: f64::NAN,
            mapping: f64::NAN,
            potential: f64::NAN,
            cost_terms: CostTerms::default(),
        };
        let fail = |l: &LossBreakdown, n: (f64, f64)| Failed(l.clone(), n);

        let pass = self.mapping_pass(batch, t, &cfg).map_err(|_| fail(&nan, (f64::NAN, f64::NAN)))?;
        let mut losses = LossBreakdown {
            flow: pass.flow,
            mapping: pass.mapping,
            potential: f64::NAN,
            cost_terms: pass.terms,
        };
        if !(pass.flow.is_finite() && pass.mapping.is_finite() && pass.norm.is_finite()) {
            return Err(fail(&losses, (pass.norm, f64::NAN)));
        }
        self.state
            .opt_theta
            .step(&mut self.state.theta, &pass.grads)
            .map_err(|_| fail(&losses, (pass.norm, f64::NAN)))?;

        let (pot, phi_norm) = self
            .potential_pass(batch, t, &pass, &cfg)
            .map_err(|_| fail(&losses, (pass.norm, f64::NAN)))?;
        losses.potential = pot;
        let norms = (pass.norm, phi_norm);
        if !(pot.is_finite() && phi_norm.is_finite()) {
            return Err(fail(&losses, norms));
        }
        let s = &mut self.state;
        ema_update(&mut s.theta_ema, &s.theta, cfg.ema_decay).map_err(|_| fail(&losses, norms))?;
        ema_update(&mut s.phi_ema, &s.phi, cfg.ema_decay).map_err(|_| fail(&losses, norms))?;
        if !(s.theta.all_finite() && s.phi.all_finite() && s.bn.all_finite()) {
            return Err(fail(&losses, norms));
        }
        Ok((losses, norms))
    }

    fn mapping_pass(&self, batch: &Batch, t: &[f64], cfg: &TrainConfig) -> Result<MappingPass> {
        let n = t.len();
        let y_t = interpolate_batch(&batch.y0, &batch.y1, t)?;
        let target = velocity_target(&batch.y0, &batch.y1)?.v;
        let tape = Tape::new();
        let theta = self.state.theta.bind(&tape, true);
        let phi = self.state.phi.bind(&tape, false);
        let y_t = tape.constant(y_t);
        let cond = tape.constant(batch.cond.clone());
        let s = self.mapping.forward(&theta, &y_t, t, &cond)?;
        let l_flow = s.sub(&tape.constant(target)).square().mean_all();

        // The single endpoint evaluation of the step.
        let times = tape.constant(Tensor::new(&[n], t.iter().map(|&v| v as f32).collect()));
        let y_hat = y_t.add(&s.mul_per_sample(&times));
        let cost = regularized_cost_batch(&batch.ctx, &y_hat, &cfg.cost)?;
        let pot_cond = self.config.potential.conditioned.then_some(&cond);
        let (v_fake, _) = self.potential.forward(&phi, &self.state.bn, &y_hat, t, pot_cond, BnMode::Train)?;
        let l_map = mapping_loss(&cost.total, &v_fake);

        let mut root = weighted(&l_flow, cfg.weight_flow);
        if cfg.weight_mapping != 0.0 {
            root = root.add(&weighted(&l_map, cfg.weight_mapping));
        }
        let flow = l_flow.value().item() as f64;
        let mapping = l_map.value().item() as f64;
        let mut grads_all = tape.backward(root);
        let mut grads: Vec<Option<Tensor<f32>>> = theta.iter().map(|v| grads_all.take(*v)).collect();
        let norm = clip_global_norm(&mut grads, cfg.grad_clip);
        Ok(MappingPass {
            flow,
            mapping,
            terms: cost.terms(),
            grads,
            norm,
            y_hat: y_hat.value(),
            cost: cost.total.value(),
        })
    }

    fn potential_pass(&mut self, batch: &Batch, t: &[f64], pass: &MappingPass, cfg: &TrainConfig) -> Result<(f64, f64)> {
        let tape = Tape::new();
        let phi = self.state.phi.bind(&tape, true);
        let fake = tape.constant_rc(pass.y_hat.clone());
        let real = tape.constant(batch.y1.clone());
        let cost = tape.constant_rc(pass.cost.clone());
        let cond = tape.constant(batch.cond.clone());
        let pot_cond = self.config.potential.conditioned.then_some(&cond);
        let (v_fake, stats_fake) = self.potential.forward(&phi, &self.state.bn, &fake, t, pot_cond, BnMode::Train)?;
        let (v_real, stats_real) = self.potential.forward(&phi, &self.state.bn, &real, t, pot_cond, BnMode::Train)?;
        let l_pot = potential_loss(&cost, &v_fake, &v_real, &cfg.cost);
        let value = l_pot.value().item() as f64;
        if !value.is_finite() {
            return Ok((value, f64::NAN));
        }
        let mut grads_all = tape.backward(l_pot);
        let mut grads: Vec<Option<Tensor<f32>>> = phi.iter().map(|v| grads_all.take(*v)).collect();
        let norm = clip_global_norm(&mut grads, cfg.grad_clip);
        if !norm.is_finite() {
            return Ok((value, norm));
        }
        self.state.opt_phi.step(&mut self.state.phi, &grads)?;
        self.potential.update_running_stats(&mut self.state.bn, &stats_fake)?;
        self.potential.update_running_stats(&mut self.state.bn, &stats_real)?;
        Ok((value, norm))
    }

    /// Run steps until `max_steps`, calling `on_step` after each one.
    pub fn fit(
        &mut self,
        data: &TrainingSet,
        mut on_step: impl FnMut(&Trainer, &TrainStepRecord) -> Result<()>,
    ) -> Result<()> {
        let cfg = self.config.train.clone();
        while self.state.step < cfg.max_steps {
            let idx = data.batch_indices(cfg.seed, self.state.step, cfg.batch_size);
            let samples: Vec<&PreparedSample> = idx.iter().map(|&i| &data.samples[i]).collect();
            let record = self.step_on(&samples, &data.mtf)?;
            on_step(self, &record)?;
            if self.state.failed_streak > cfg.max_failed_steps {
                return Err(Error::Numerical(format!(
                    "{} consecutive failed steps ending at step {} (last: {})",
                    self.state.failed_streak,
                    record.step,
                    record.log_line()
                )));
            }
        }
        Ok(())
    }
}

struct Failed(LossBreakdown, (f64, f64));

fn weighted<'t>(v: &Var<'t, f32>, w: f64) -> Var<'t, f32> {
    if w == 1.0 {
        *v
    } else {
        v.scale(w)
    }
}

/// Train from scratch (or continue `resume`) on `data`, writing log lines to
/// `log` and checkpoints under `run_dir`. Returns the final checkpoint.
pub fn train_loop(
    data: &TrainingSet,
    cfg: &RunConfig,
    resume: Option<Checkpoint>,
    run_dir: Option<&Path>,
    log: &mut dyn Write,
) -> Result<Checkpoint> {
    let mut trainer = match resume {
        Some(ck) => {
            let mut t = Trainer::from_checkpoint(ck)?;
            t.config.train.max_steps = cfg.train.max_steps;
            t
        }
        None => Trainer::new(cfg.clone())?,
    };
    let every = trainer.config.train.checkpoint_every;
    let log_every = trainer.config.train.log_every;
    trainer.fit(data, |tr, rec| {
        if rec.step % log_every == 0 || rec.failed {
            writeln!(log, "{}", rec.log_line()).map_err(|e| Error::io("<log>", e))?;
        }
        if let Some(dir) = run_dir {
            if every > 0 && rec.step % every == 0 {
                tr.checkpoint().save(dir.join(format!("ckpt-{:07}.otfm", rec.step)))?;
            }
        }
        Ok(())
    })?;
    let ck = trainer.checkpoint();
    if let Some(dir) = run_dir {
        ck.save(dir.join("final.otfm"))?;
    }
    Ok(ck)
}
