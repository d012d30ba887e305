//! The conditional U-net velocity network and the t-conditioned patch
//! potential, built on the tape substrate, plus parameter sets and EMA.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-6;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Named, ordered collection of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real> {
    names: Vec<String>,
    values: Vec<Rc<Tensor<T>>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.values.push(Rc::new(value));
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.values[i])
    }

    pub fn set(&mut self, i: usize, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[i].shape() {
            return Err(Error::arg(format!(
                "parameter {} expects shape {:?}, got {:?}",
                self.names[i],
                self.values[i].shape(),
                value.shape()
            )));
        }
        self.values[i] = Rc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Rc::new(v.cast())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.all_finite())
    }

    /// Same names and shapes in the same order.
    pub fn same_structure(&self, other: &ParamSet<T>) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a.shape() == b.shape())
    }

    /// Put every tensor on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Vec<Var<'t, T>> {
        self.values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf_rc(v.clone())
                } else {
                    tape.constant_rc(v.clone())
                }
            })
            .collect()
    }
}

/// `shadow <- decay * shadow + (1 - decay) * live`, elementwise.
pub fn ema_update<T: Real>(shadow: &mut ParamSet<T>, live: &ParamSet<T>, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::arg(format!("EMA decay {decay} outside [0, 1)")));
    }
    if !shadow.same_structure(live) {
        return Err(Error::arg("EMA shadow and live parameters differ in structure"));
    }
    let (d, e) = (T::of(decay), T::of(1.0 - decay));
    for i in 0..live.len() {
        let src = live.get(i).data();
        for (s, &l) in shadow.get_mut(i).data_mut().iter_mut().zip(src) {
            *s = d * *s + e * l;
        }
    }
    Ok(())
}

/// Sinusoidal embedding of `1000 t` with base 10000: `[sin(ω_k τ), cos(ω_k τ)]`.
pub fn timestep_embedding<T: Real>(t: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ts in t {
        let tau = 1000.0 * ts;
        let mut row = vec![T::zero(); dim];
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            row[k] = T::of((tau * freq).sin());
            row[half + k] = T::of((tau * freq).cos());
        }
        out.extend(row);
    }
    Tensor::new(&[t.len(), dim], out)
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| T::of(self.rng.gen_range(-bound..bound))).collect())
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

impl Dense {
    fn new<T: Real>(ps: &mut ParamSet<T>, init: &mut Init, name: &str, cin: usize, cout: usize, zero: bool) -> Self {
        let w = if zero {
            Tensor::zeros(&[cin, cout])
        } else {
            init.uniform(&[cin, cout], cin)
        };
        Self {
            w: ps.push(format!("{name}.w"), w),
            b: ps.push(format!("{name}.b"), Tensor::zeros(&[cout])),
        }
    }

    fn apply<'t, T: Real>(&self, p: &[Var<'t, T>], x: &Var<'t, T>) -> Var<'t, T> {
        x.linear(&p[self.w], Some(&p[self.b]))
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
    kernel: usize,
    stride: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        ps: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        zero: bool,
    ) -> Self {
        let fan = kernel * kernel * cin;
        let w = if zero {
            Tensor::zeros(&[fan, cout])
        } else {
            init.uniform(&[fan, cout], fan)
        };
        Self {
            w: ps.push(format!("{name}.w"), w),
            b: ps.push(format!("{name}.b"), Tensor::zeros(&[cout])),
            kernel,
            stride,
        }
    }

    fn apply<'t, T: Real>(&self, p: &[Var<'t, T>], x: &Var<'t, T>) -> Var<'t, T> {
        x.conv2d(&p[self.w], Some(&p[self.b]), self.kernel, self.stride, self.kernel / 2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MappingNetConfig {
    /// Multispectral band count `B`; the condition has `B + 1` bands.
    pub bands: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub blocks_per_level: usize,
    pub attention_window: usize,
    pub heads: usize,
    pub time_embed_dim: usize,
    pub ffn_expansion: usize,
}

impl MappingNetConfig {
    pub fn new(bands: usize, base_channels: usize, levels: usize) -> Self {
        Self {
            bands,
            base_channels,
            levels,
            blocks_per_level: 2,
            attention_window: 7,
            heads: 4,
            time_embed_dim: 4 * base_channels,
            ffn_expansion: 2,
        }
    }

    pub fn cond_bands(&self) -> usize {
        self.bands + 1
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 || self.base_channels == 0 || self.time_embed_dim < 2 || self.ffn_expansion == 0 {
            return Err(Error::arg("mapping network sizes must be positive"));
        }
        if self.levels == 0 {
            return Err(Error::arg("mapping network needs at least one level"));
        }
        if self.attention_window % 2 == 0 {
            return Err(Error::arg(format!("attention window {} must be odd", self.attention_window)));
        }
        if self.heads == 0 || self.base_channels % self.heads != 0 {
            return Err(Error::arg(format!(
                "base channels {} not divisible by {} heads",
                self.base_channels, self.heads
            )));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::arg("time embedding dimension must be even"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum BlockOp {
    Attention { qkv: Dense, proj: Dense },
    Ffn { l1: Dense, l2: Dense, l3: Dense },
}

/// One AdaLN-zero conditioned residual sub-block.
#[derive(Clone, Debug)]
struct AdaLnBlock {
    time: Dense,
    modulation: Dense,
    channels: usize,
    op: BlockOp,
}

impl AdaLnBlock {
    /// `(α, β, γ)` maps, each `[N, H, W, C]`.
    fn modulation<'t, T: Real>(
        &self,
        p: &[Var<'t, T>],
        cond_ln: &Var<'t, T>,
        temb_act: &Var<'t, T>,
    ) -> (Var<'t, T>, Var<'t, T>, Var<'t, T>) {
        let tproj = self.time.apply(p, temb_act);
        let m = self.modulation.apply(p, &cond_ln.add_channel_bias(&tproj).silu());
        let c = self.channels;
        (m.slice_last(0, c), m.slice_last(c, c), m.slice_last(2 * c, c))
    }

    fn op<'t, T: Real>(&self, p: &[Var<'t, T>], h: &Var<'t, T>, heads: usize, window: usize) -> Var<'t, T> {
        match &self.op {
            BlockOp::Attention { qkv, proj } => proj.apply(p, &qkv.apply(p, h).neighborhood_attention(heads, window)),
            BlockOp::Ffn { l1, l2, l3 } => l3.apply(p, &l2.apply(p, &l1.apply(p, h).gelu()).gelu()),
        }
    }
}

/// `x + γ ⊙ ((1 + α) ⊙ op + β)`.
pub fn adaln_combine<'t, T: Real>(
    x: &Var<'t, T>,
    op: &Var<'t, T>,
    alpha: &Var<'t, T>,
    beta: &Var<'t, T>,
    gamma: &Var<'t, T>,
) -> Var<'t, T> {
    let modulated = op.add(&alpha.mul(op)).add(beta);
    x.add(&gamma.mul(&modulated))
}

#[derive(Clone, Debug)]
struct Level {
    blocks: Vec<AdaLnBlock>,
}

/// Conditional U-net `s_θ(y_t, t, [up(m), p])`.
#[derive(Clone, Debug)]
pub struct MappingNet {
    pub cfg: MappingNetConfig,
    temb1: Dense,
    temb2: Dense,
    cond1: Conv,
    cond2: Conv,
    stem: Conv,
    encoder: Vec<Level>,
    down: Vec<Conv>,
    up_merge: Vec<Conv>,
    decoder: Vec<Level>,
    head: Conv,
}

impl MappingNet {
    /// Build the graph description and freshly initialised parameters.
    pub fn new<T: Real>(cfg: MappingNetConfig, seed: u64) -> Result<(Self, ParamSet<T>)> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c0 = cfg.base_channels;
        let td = cfg.time_embed_dim;
        let temb1 = Dense::new(&mut ps, &mut init, "time.l1", td, td, false);
        let temb2 = Dense::new(&mut ps, &mut init, "time.l2", td, td, false);
        let cond1 = Conv::new(&mut ps, &mut init, "cond.c1", cfg.cond_bands(), c0, 3, 1, false);
        let cond2 = Conv::new(&mut ps, &mut init, "cond.c2", c0, c0, 3, 1, false);
        let stem = Conv::new(&mut ps, &mut init, "stem", cfg.bands, c0, 3, 1, false);

        let make_level = |ps: &mut ParamSet<T>, init: &mut Init, prefix: &str, level: usize| {
            let c = cfg.channels(level);
            let e = cfg.ffn_expansion * c;
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_level {
                let name = format!("{prefix}{level}.block{b}");
                let attn_op = BlockOp::Attention {
                    qkv: Dense::new(ps, init, &format!("{name}.attn.qkv"), c, 3 * c, false),
                    proj: Dense::new(ps, init, &format!("{name}.attn.proj"), c, c, false),
                };
                blocks.push(AdaLnBlock {
                    time: Dense::new(ps, init, &format!("{name}.attn.time"), td, c0, false),
                    modulation: Dense::new(ps, init, &format!("{name}.attn.mod"), c0, 3 * c, true),
                    channels: c,
                    op: attn_op,
                });
                let ffn_op = BlockOp::Ffn {
                    l1: Dense::new(ps, init, &format!("{name}.ffn.l1"), c, e, false),
                    l2: Dense::new(ps, init, &format!("{name}.ffn.l2"), e, e, false),
                    l3: Dense::new(ps, init, &format!("{name}.ffn.l3"), e, c, false),
                };
                blocks.push(AdaLnBlock {
                    time: Dense::new(ps, init, &format!("{name}.ffn.time"), td, c0, false),
                    modulation: Dense::new(ps, init, &format!("{name}.ffn.mod"), c0, 3 * c, true),
                    channels: c,
                    op: ffn_op,
                });
            }
            Level { blocks }
        };

        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for l in 0..cfg.levels {
            encoder.push(make_level(&mut ps, &mut init, "enc", l));
            if l + 1 < cfg.levels {
                down.push(Conv::new(
                    &mut ps,
                    &mut init,
                    &format!("down{l}"),
                    cfg.channels(l),
                    cfg.channels(l + 1),
                    3,
                    2,
                    false,
                ));
            }
        }
        let mut up_merge = Vec::new();
        let mut decoder = Vec::new();
        for l in (0..cfg.levels.saturating_sub(1)).rev() {
            up_merge.push(Conv::new(
                &mut ps,
                &mut init,
                &format!("up{l}"),
                cfg.channels(l + 1) + cfg.channels(l),
                cfg.channels(l),
                1,
                1,
                false,
            ));
            decoder.push(make_level(&mut ps, &mut init, "dec", l));
        }
        let head = Conv::new(&mut ps, &mut init, "head", c0, cfg.bands, 3, 1, true);
        Ok((
            Self {
                cfg,
                temb1,
                temb2,
                cond1,
                cond2,
                stem,
                encoder,
                down,
                up_merge,
                decoder,
                head,
            },
            ps,
        ))
    }

    /// HR sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.cfg.levels - 1)
    }

    /// Velocity for `y_t` `[N, H, W, B]` at times `t` given `cond = [up(m), p]`
    /// `[N, H, W, B + 1]`.
    pub fn forward<'t, T: Real>(
        &self,
        p: &[Var<'t, T>],
        y_t: &Var<'t, T>,
        t: &[f64],
        cond: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.forward_impl(p, y_t, t, cond, false)
    }

    /// The forward pass with every conditioned residual branch removed.
    pub fn forward_skeleton<'t, T: Real>(
        &self,
        p: &[Var<'t, T>],
        y_t: &Var<'t, T>,
        t: &[f64],
        cond: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.forward_impl(p, y_t, t, cond, true)
    }

    fn forward_impl<'t, T: Real>(
        &self,
        p: &[Var<'t, T>],
        y_t: &Var<'t, T>,
        t: &[f64],
        cond: &Var<'t, T>,
        skip_blocks: bool,
    ) -> Result<Var<'t, T>> {
        let shape = y_t.shape();
        if shape.len() != 4 || shape[3] != self.cfg.bands {
            return Err(Error::arg(format!("mapping input {shape:?} does not have {} bands", self.cfg.bands)));
        }
        let (n, h, w) = (shape[0], shape[1], shape[2]);
        let mult = self.size_multiple();
        if h % mult != 0 || w % mult != 0 {
            return Err(Error::arg(format!("input {h}x{w} not divisible by {mult}")));
        }
        if cond.shape() != [n, h, w, self.cfg.cond_bands()] {
            return Err(Error::arg(format!("condition shape {:?} does not match input {shape:?}", cond.shape())));
        }
        if t.len() != n {
            return Err(Error::arg(format!("{} times for a batch of {n}", t.len())));
        }
        let tape = y_t.tape();
        let temb = tape.constant(timestep_embedding(t, self.cfg.time_embed_dim));
        let temb = self.temb2.apply(p, &self.temb1.apply(p, &temb).silu());
        let temb_act = temb.silu();

        let cond0 = self.cond2.apply(p, &self.cond1.apply(p, cond).silu());
        let mut cond_levels = vec![cond0.layer_norm(LN_EPS)];
        let mut pooled = cond0;
        for _ in 1..self.cfg.levels {
            pooled = pooled.avg_pool2();
            cond_levels.push(pooled.layer_norm(LN_EPS));
        }

        let run_level = |x: Var<'t, T>, level: &Level, l: usize| -> Var<'t, T> {
            if skip_blocks {
                return x;
            }
            let mut x = x;
            for blk in &level.blocks {
                let (a, b, g) = blk.modulation(p, &cond_levels[l], &temb_act);
                let op = blk.op(p, &x.layer_norm(LN_EPS), self.cfg.heads, self.cfg.attention_window);
                x = adaln_combine(&x, &op, &a, &b, &g);
            }
            x
        };

        let mut x = self.stem.apply(p, y_t);
        let mut skips = Vec::new();
        for l in 0..self.cfg.levels {
            x = run_level(x, &self.encoder[l], l);
            if l + 1 < self.cfg.levels {
                skips.push(x);
                x = self.down[l].apply(p, &x);
            }
        }
        for (i, l) in (0..self.cfg.levels - 1).rev().enumerate() {
            let skip = skips.pop().expect("skip per level");
            x = self.up_merge[i].apply(p, &Var::concat_last(&[x.upsample2(), skip]));
            x = run_level(x, &self.decoder[i], l);
        }
        Ok(self.head.apply(p, &x))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PotentialNetConfig {
    pub bands: usize,
    pub channels: usize,
    pub blocks: usize,
    pub time_embed_dim: usize,
    /// Concatenate `[up(m), p]` to the input.
    pub conditioned: bool,
    pub slope: f64,
}

impl PotentialNetConfig {
    pub fn new(bands: usize, channels: usize) -> Self {
        Self {
            bands,
            channels,
            blocks: 3,
            time_embed_dim: 4 * channels,
            conditioned: false,
            slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 || self.channels == 0 || self.blocks == 0 {
            return Err(Error::arg("potential network sizes must be positive"));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::arg("time embedding dimension must be even"));
        }
        Ok(())
    }

    fn stride(&self, block: usize) -> usize {
        if block < 2 {
            2
        } else {
            1
        }
    }

    fn width(&self, block: usize) -> usize {
        self.channels << block.min(2)
    }
}

/// How BatchNorm layers normalise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; the caller may fold them into the running buffers.
    Train,
    /// Running statistics.
    Eval,
}

/// Per-layer batch mean and unbiased variance from a training-mode pass.
pub type BatchStats<T> = Vec<(Vec<T>, Vec<T>)>;

#[derive(Clone, Debug)]
struct BnLayer {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

/// Patch critic `v_φ(y, t)` returning one scalar per sample.
#[derive(Clone, Debug)]
pub struct PotentialNet {
    pub cfg: PotentialNetConfig,
    convs: Vec<Conv>,
    norms: Vec<BnLayer>,
    temb1: Dense,
    temb2: Dense,
    out: Conv,
}

impl PotentialNet {
    /// Returns the network, its trainable parameters and its BatchNorm buffers.
    pub fn new<T: Real>(cfg: PotentialNetConfig, seed: u64) -> Result<(Self, ParamSet<T>, ParamSet<T>)> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut buffers = ParamSet::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut cin = if cfg.conditioned { 2 * cfg.bands + 1 } else { cfg.bands };
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for b in 0..cfg.blocks {
            let cout = cfg.width(b);
            convs.push(Conv::new(&mut ps, &mut init, &format!("block{b}.conv"), cin, cout, 3, cfg.stride(b), false));
            norms.push(BnLayer {
                gamma: ps.push(format!("block{b}.bn.gamma"), Tensor::full(&[cout], T::one())),
                beta: ps.push(format!("block{b}.bn.beta"), Tensor::zeros(&[cout])),
                mean: buffers.push(format!("block{b}.bn.running_mean"), Tensor::zeros(&[cout])),
                var: buffers.push(format!("block{b}.bn.running_var"), Tensor::full(&[cout], T::one())),
            });
            cin = cout;
        }
        let td = cfg.time_embed_dim;
        let temb1 = Dense::new(&mut ps, &mut init, "time.l1", td, td, false);
        let temb2 = Dense::new(&mut ps, &mut init, "time.l2", td, cfg.width(0), false);
        let out = Conv::new(&mut ps, &mut init, "out", cin, 1, 1, 1, false);
        Ok((
            Self {
                cfg,
                convs,
                norms,
                temb1,
                temb2,
                out,
            },
            ps,
            buffers,
        ))
    }

    /// `y` is `[N, H, W, B]`; `cond` is required iff the config is conditioned.
    pub fn forward<'t, T: Real>(
        &self,
        p: &[Var<'t, T>],
        buffers: &ParamSet<T>,
        y: &Var<'t, T>,
        t: &[f64],
        cond: Option<&Var<'t, T>>,
        mode: BnMode,
    ) -> Result<(Var<'t, T>, BatchStats<T>)> {
        let shape = y.shape();
        if shape.len() != 4 || shape[3] != self.cfg.bands {
            return Err(Error::arg(format!("potential input {shape:?} does not have {} bands", self.cfg.bands)));
        }
        if t.len() != shape[0] {
            return Err(Error::arg(format!("{} times for a batch of {}", t.len(), shape[0])));
        }
        let mut x = match (cond, self.cfg.conditioned) {
            (Some(c), true) => Var::concat_last(&[*y, *c]),
            (None, false) => *y,
            _ => return Err(Error::arg("potential conditioning input does not match its config")),
        };
        let tape = y.tape();
        let temb = tape.constant(timestep_embedding(t, self.cfg.time_embed_dim));
        let temb = self.temb2.apply(p, &self.temb1.apply(p, &temb).silu());
        let mut stats = Vec::new();
        for (b, (conv, bn)) in self.convs.iter().zip(&self.norms).enumerate() {
            let z = conv.apply(p, &x);
            let z = match mode {
                BnMode::Train => {
                    let (z, mean, var) = z.batch_norm_train(&p[bn.gamma], &p[bn.beta], BN_EPS);
                    stats.push((mean, var));
                    z
                }
                BnMode::Eval => z.batch_norm_eval(
                    &p[bn.gamma],
                    &p[bn.beta],
                    buffers.get(bn.mean).data(),
                    buffers.get(bn.var).data(),
                    BN_EPS,
                ),
            };
            x = z.leaky_relu(self.cfg.slope);
            if b == 0 {
                x = x.add_channel_bias(&temb);
            }
        }
        Ok((self.out.apply(p, &x).mean_per_sample(), stats))
    }

    /// Fold batch statistics into the running buffers.
    pub fn update_running_stats<T: Real>(&self, buffers: &mut ParamSet<T>, stats: &BatchStats<T>) -> Result<()> {
        if stats.len() != self.norms.len() {
            return Err(Error::arg("batch statistics do not match the BatchNorm layers"));
        }
        let (keep, take) = (T::of(1.0 - BN_MOMENTUM), T::of(BN_MOMENTUM));
        for (bn, (mean, var)) in self.norms.iter().zip(stats) {
            for (r, &m) in buffers.get_mut(bn.mean).data_mut().iter_mut().zip(mean) {
                *r = keep * *r + take * m;
            }
            for (r, &v) in buffers.get_mut(bn.var).data_mut().iter_mut().zip(var) {
                *r = keep * *r + take * v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
    }

    fn small_mapping() -> MappingNetConfig {
        MappingNetConfig::new(4, 8, 2)
    }

    #[test]
    fn ema_cases() {
        let mut live = ParamSet::<f64>::new();
        live.push("a", random(&[3], 1, -1.0, 1.0));
        let mut shadow = ParamSet::<f64>::new();
        shadow.push("a", random(&[3], 2, -1.0, 1.0));
        let mut s0 = shadow.clone();
        ema_update(&mut s0, &live, 0.0).unwrap();
        assert_eq!(s0, live);

        let start = shadow.get(0).clone();
        for _ in 0..5 {
            ema_update(&mut shadow, &live, 0.9).unwrap();
        }
        for i in 0..3 {
            let expect = 0.9f64.powi(5) * (start.data()[i] - live.get(0).data()[i]);
            assert!((shadow.get(0).data()[i] - live.get(0).data()[i] - expect).abs() < 1e-12);
        }
        assert!(ema_update(&mut shadow, &live, 1.0).is_err());
        let mut other = ParamSet::<f64>::new();
        other.push("b", Tensor::zeros(&[3]));
        assert!(ema_update(&mut other, &live, 0.5).is_err());
    }

    #[test]
    fn ema_matches_scalar_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut live = ParamSet::<f64>::new();
        live.push("w", Tensor::zeros(&[4]));
        let mut shadow = live.clone();
        let mut oracle = [0.0f64; 4];
        for _ in 0..50 {
            let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            live.set(0, Tensor::new(&[4], v.clone())).unwrap();
            ema_update(&mut shadow, &live, 0.99).unwrap();
            for i in 0..4 {
                oracle[i] = 0.99 * oracle[i] + 0.01 * v[i];
            }
        }
        for i in 0..4 {
            assert!((shadow.get(0).data()[i] - oracle[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn timestep_embedding_shape_and_values() {
        let e: Tensor<f64> = timestep_embedding(&[0.0, 0.5], 8);
        assert_eq!(e.shape(), &[2, 8]);
        assert_eq!(&e.data()[..8], &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!((e.data()[8] - 500f64.sin()).abs() < 1e-12);
    }

    #[test]
    fn adaln_specialisations() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(random(&[1, 2, 2, 3], 4, -1.0, 1.0));
        let op = tape.constant(random(&[1, 2, 2, 3], 5, -1.0, 1.0));
        let zero = tape.constant(Tensor::zeros(&[1, 2, 2, 3]));
        let one = tape.constant(Tensor::full(&[1, 2, 2, 3], 1.0));
        assert_eq!(*adaln_combine(&x, &op, &zero, &zero, &zero).value(), *x.value());
        let plain = adaln_combine(&x, &op, &zero, &zero, &one).value();
        for ((o, a), b) in plain.data().iter().zip(x.value().data()).zip(op.value().data()) {
            assert!((o - (a + b)).abs() < 1e-15);
        }
    }

    #[test]
    fn adaln_alpha_gradient_is_gamma_times_op() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(random(&[1, 2, 2, 3], 6, -1.0, 1.0));
        let op = tape.constant(random(&[1, 2, 2, 3], 7, -1.0, 1.0));
        let alpha = tape.leaf(random(&[1, 2, 2, 3], 8, -1.0, 1.0));
        let beta = tape.constant(random(&[1, 2, 2, 3], 9, -1.0, 1.0));
        let gamma = tape.constant(random(&[1, 2, 2, 3], 10, -1.0, 1.0));
        let y = adaln_combine(&x, &op, &alpha, &beta, &gamma).sum_all();
        let g = tape.backward(y).get(alpha).unwrap().clone();
        for ((d, a), b) in g.data().iter().zip(gamma.value().data()).zip(op.value().data()) {
            assert!((d - a * b).abs() < 1e-12);
        }
    }

    fn mapping_inputs<'t>(tape: &'t Tape<f64>, n: usize, size: usize) -> (Var<'t, f64>, Var<'t, f64>) {
        (
            tape.constant(random(&[n, size, size, 4], 11, 0.0, 1.0)),
            tape.constant(random(&[n, size, size, 5], 12, 0.0, 1.0)),
        )
    }

    #[test]
    fn mapping_is_zero_and_skeleton_at_init() {
        let (net, ps) = MappingNet::new::<f64>(small_mapping(), 0).unwrap();
        let tape = Tape::new();
        let p = ps.bind(&tape, false);
        let (y, c) = mapping_inputs(&tape, 2, 8);
        let out = net.forward(&p, &y, &[0.3, 0.9], &c).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));

        // With a non-zero head, the conditioned branches still contribute nothing.
        let mut ps = ps;
        let head_w = ps.names().iter().position(|n| n == "head.w").unwrap();
        let shape = ps.get(head_w).shape().to_vec();
        ps.set(head_w, random(&shape, 13, -0.5, 0.5)).unwrap();
        let p = ps.bind(&tape, false);
        let full = net.forward(&p, &y, &[0.3, 0.9], &c).unwrap().value();
        let skel = net.forward_skeleton(&p, &y, &[0.3, 0.9], &c).unwrap().value();
        assert!(full.data().iter().any(|&v| v != 0.0));
        assert_eq!(full.max_abs_diff(&skel), 0.0);
    }

    #[test]
    fn mapping_is_deterministic_per_sample_and_checks_shapes() {
        let (net, mut ps) = MappingNet::new::<f64>(small_mapping(), 1).unwrap();
        perturb(&mut ps, 14);
        let tape = Tape::new();
        let p = ps.bind(&tape, false);
        let y1 = random(&[1, 8, 8, 4], 15, 0.0, 1.0);
        let c1 = random(&[1, 8, 8, 5], 16, 0.0, 1.0);
        let y = tape.constant(Tensor::stack(&[y1.clone().reshaped(&[8, 8, 4]), y1.reshaped(&[8, 8, 4])]));
        let c = tape.constant(Tensor::stack(&[c1.clone().reshaped(&[8, 8, 5]), c1.reshaped(&[8, 8, 5])]));
        let out = net.forward(&p, &y, &[0.4, 0.4], &c).unwrap().value();
        let half = out.len() / 2;
        assert_eq!(&out.data()[..half], &out.data()[half..]);
        let odd = tape.constant(random(&[1, 7, 8, 4], 17, 0.0, 1.0));
        let odd_c = tape.constant(random(&[1, 7, 8, 5], 18, 0.0, 1.0));
        assert!(net.forward(&p, &odd, &[0.1], &odd_c).is_err());
    }

    /// Give every parameter, including the zero-initialised ones, some mass.
    fn perturb(ps: &mut ParamSet<f64>, seed: u64) {
        for i in 0..ps.len() {
            let shape = ps.get(i).shape().to_vec();
            let noise = random(&shape, seed + i as u64, -0.2, 0.2);
            let v: Vec<f64> = ps.get(i).data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            ps.set(i, Tensor::new(&shape, v)).unwrap();
        }
    }

    #[test]
    fn desk_parameter_count_is_stable() {
        let (_, ps) = MappingNet::new::<f32>(MappingNetConfig::new(4, 16, 2), 0).unwrap();
        let (_, pp, buf) = PotentialNet::new::<f32>(PotentialNetConfig::new(4, 16), 0).unwrap();
        assert_eq!(ps.num_scalars(), MAPPING_DESK_PARAMS);
        assert_eq!(pp.num_scalars(), POTENTIAL_DESK_PARAMS);
        assert_eq!(buf.num_scalars(), 2 * (16 + 32 + 64));
        let (_, again) = MappingNet::new::<f32>(MappingNetConfig::new(4, 16, 2), 0).unwrap();
        assert_eq!(ps, again);
    }

    const MAPPING_DESK_PARAMS: usize = 81524;
    const POTENTIAL_DESK_PARAMS: usize = 29217;

    #[test]
    fn attention_receptive_field_is_the_window() {
        let (h, w, c, win) = (9, 10, 4, 3);
        for (qi, qj) in [(0usize, 0usize), (4, 5), (8, 9)] {
            let tape = Tape::<f64>::new();
            let x = tape.leaf(random(&[1, h, w, 3 * c], 19, -1.0, 1.0));
            let out = x.neighborhood_attention(2, win);
            let mut probe = vec![0.0; h * w * c];
            probe[(qi * w + qj) * c] = 1.0;
            let l = out.mul(&tape.constant(Tensor::new(&[1, h, w, c], probe))).sum_all();
            let g = tape.backward(l).get(x).unwrap().clone();
            let (si, _) = crate::tensor::nn::window_span(qi, h, win);
            let (sj, _) = crate::tensor::nn::window_span(qj, w, win);
            for i in 0..h {
                for j in 0..w {
                    let inside = (si..si + win).contains(&i) && (sj..sj + win).contains(&j);
                    let touched = g.data()[(i * w + j) * 3 * c..(i * w + j + 1) * 3 * c].iter().any(|&v| v != 0.0);
                    assert_eq!(inside, touched, "query ({qi},{qj}) key ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn potential_modes() {
        let cfg = PotentialNetConfig::new(4, 4);
        let (net, ps, buf) = PotentialNet::new::<f64>(cfg, 2).unwrap();
        let tape = Tape::new();
        let p = ps.bind(&tape, false);
        let y = random(&[3, 16, 16, 4], 20, 0.0, 1.0);
        let yv = tape.constant(y.clone());
        let t = [0.1, 0.5, 0.9];
        let (train, stats) = net.forward(&p, &buf, &yv, &t, None, BnMode::Train).unwrap();
        let (eval, _) = net.forward(&p, &buf, &yv, &t, None, BnMode::Eval).unwrap();
        assert_eq!(stats.len(), 3);
        assert!(train.value().max_abs_diff(&eval.value()) > 1e-6);
        assert!(eval.value().data().iter().all(|v| v.is_finite()));

        let single = tape.constant(y.slice_leading(1, 1));
        let (one, _) = net.forward(&p, &buf, &single, &[0.5], None, BnMode::Eval).unwrap();
        assert!((one.value().item() - eval.value().data()[1]).abs() < 1e-12);

        let mut buf2 = buf.clone();
        net.update_running_stats(&mut buf2, &stats).unwrap();
        assert_ne!(buf2, buf);
    }
}
