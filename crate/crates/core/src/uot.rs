//! Regularised transport cost and the two adversarial objectives of the
//! unbalanced-OT dual: the mapping loss `L_T` and the potential loss `L_v`
//! with `f = exp`.
//!
//! Every norm is a mean over elements so loss magnitudes do not depend on
//! patch or batch size.

use std::rc::Rc;

use crate::degradation::{bicubic_resize, pan_lowpass, spectral_match, MtfSpec, RATIO_EPS};
use crate::error::{Error, Result};
use crate::imagery::{stack_nhwc, RasterImage};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Which spectral-consistency term enters the cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectralVariant {
    /// `mean(degrade_spatial(ŷ) - m)²` at LRMS resolution.
    Observation,
    /// `mean(ŷ - blur(ŷ) ⊙ p̂ / p̂_L - up(m))²` at HRMS resolution.
    DetailRatio,
}

impl SpectralVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            SpectralVariant::Observation => "observation",
            SpectralVariant::DetailRatio => "detail_ratio",
        }
    }
}

impl std::str::FromStr for SpectralVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "observation" => Ok(SpectralVariant::Observation),
            "detail_ratio" => Ok(SpectralVariant::DetailRatio),
            other => Err(Error::arg(format!("unknown spectral variant '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostConfig {
    pub lambda_base: f64,
    pub lambda_spatial: f64,
    pub lambda_spectral: f64,
    pub spectral_variant: SpectralVariant,
    pub exp_clamp: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            lambda_base: 1.0,
            lambda_spatial: 1.0,
            lambda_spectral: 1.0,
            spectral_variant: SpectralVariant::Observation,
            exp_clamp: 30.0,
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_base", self.lambda_base),
            ("lambda_spatial", self.lambda_spatial),
            ("lambda_spectral", self.lambda_spectral),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::arg(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.exp_clamp > 0.0) {
            return Err(Error::arg(format!("exp_clamp must be > 0, got {}", self.exp_clamp)));
        }
        Ok(())
    }
}

/// Values of the three weighted cost components (already multiplied by their λ).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CostTerms {
    pub base: f64,
    pub spatial: f64,
    pub spectral: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub flow: f64,
    pub mapping: f64,
    pub potential: f64,
    pub cost_terms: CostTerms,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [
            self.flow,
            self.mapping,
            self.potential,
            self.cost_terms.base,
            self.cost_terms.spatial,
            self.cost_terms.spectral,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Mean squared difference.
pub fn quadratic_cost(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::arg(format!("quadratic_cost: lengths {} and {}", x.len(), y.len())));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// Per-sample constants of the cost that depend only on the observations.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePrior {
    /// PAN ≈ Σ_b weights[b] · y_b + bias, with the re-standardisation folded in.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub rank_deficient: bool,
    /// `p̂ / max(p̂_L, ε)` at HR resolution, only for the detail-ratio variant.
    pub detail_gain: Option<Vec<f32>>,
}

/// Fit the spectral match of `pan` against `lrms_up` and derive the cost constants.
pub fn sample_prior(pan: &RasterImage, lrms_up: &RasterImage, mtf: &MtfSpec, variant: SpectralVariant) -> Result<SamplePrior> {
    let (fit, p_hat) = spectral_match(pan, lrms_up)?;
    let raw = fit.combine(lrms_up);
    let n = raw.len() as f64;
    let fm = raw.iter().sum::<f64>() / n;
    let fs = (raw.iter().map(|v| (v - fm) * (v - fm)).sum::<f64>() / n).sqrt();
    let pan_f: Vec<f64> = pan.data().iter().map(|&v| v as f64).collect();
    let pm = pan_f.iter().sum::<f64>() / n;
    let ps = (pan_f.iter().map(|v| (v - pm) * (v - pm)).sum::<f64>() / n).sqrt();
    let a = if fs > 1e-12 { ps / fs } else { 0.0 };
    let detail_gain = match variant {
        SpectralVariant::Observation => None,
        SpectralVariant::DetailRatio => {
            let low = pan_lowpass(&p_hat, mtf)?;
            Some(
                p_hat
                    .data()
                    .iter()
                    .zip(low.data())
                    .map(|(&p, &l)| (p as f64 / (l as f64).max(RATIO_EPS)) as f32)
                    .collect(),
            )
        }
    };
    Ok(SamplePrior {
        weights: fit.weights.iter().map(|w| a * w).collect(),
        bias: a * (fit.bias - fm) + pm,
        rank_deficient: fit.rank_deficient,
        detail_gain,
    })
}

/// Batched constants for evaluating the cost on an NHWC batch.
#[derive(Clone, Debug)]
pub struct CostContext<T: Real> {
    /// Bicubic-upsampled LRMS, `[N, H, W, B]`.
    pub y0: Rc<Tensor<T>>,
    pub pan: Rc<Tensor<T>>,
    /// LRMS, `[N, h, w, B]`.
    pub lrms: Rc<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
    pub detail_gain: Option<Rc<Tensor<T>>>,
    pub kernels: Vec<Vec<T>>,
    pub ratio: usize,
}

impl<T: Real> CostContext<T> {
    pub fn new(
        y0: Rc<Tensor<T>>,
        pan: Rc<Tensor<T>>,
        lrms: Rc<Tensor<T>>,
        priors: &[&SamplePrior],
        mtf: &MtfSpec,
    ) -> Result<Self> {
        let (n, h, w, b) = y0.dims4();
        if pan.shape() != [n, h, w, 1] {
            return Err(Error::arg(format!("PAN batch shape {:?} does not match {:?}", pan.shape(), y0.shape())));
        }
        let r = mtf.ratio;
        if h % r != 0 || w % r != 0 || lrms.shape() != [n, h / r, w / r, b] {
            return Err(Error::arg(format!("LRMS batch shape {:?} inconsistent with {:?}", lrms.shape(), y0.shape())));
        }
        if priors.len() != n || mtf.bands() != b {
            return Err(Error::arg("cost priors or MTF bands do not match the batch"));
        }
        let mut weights = Vec::with_capacity(n * b);
        for p in priors {
            if p.weights.len() != b {
                return Err(Error::arg("spectral weights do not match the band count"));
            }
            weights.extend(p.weights.iter().map(|&v| T::of(v)));
        }
        let detail_gain = if priors.iter().all(|p| p.detail_gain.is_some()) {
            let mut g = Vec::with_capacity(n * h * w * b);
            for p in priors {
                for &v in p.detail_gain.as_ref().unwrap() {
                    g.extend(std::iter::repeat(T::of(v as f64)).take(b));
                }
            }
            Some(Rc::new(Tensor::new(&[n, h, w, b], g)))
        } else {
            None
        };
        let kernels = mtf
            .band_taps()?
            .into_iter()
            .map(|k| k.into_iter().map(T::of).collect())
            .collect();
        Ok(Self {
            y0,
            pan,
            lrms,
            weights: Tensor::new(&[n, b], weights),
            bias: priors.iter().map(|p| T::of(p.bias)).collect(),
            detail_gain,
            kernels,
            ratio: r,
        })
    }
}

/// Per-sample cost `[N]` together with its weighted components.
pub struct CostEval<'t, T: Real> {
    pub total: Var<'t, T>,
    pub base: Var<'t, T>,
    pub spatial: Var<'t, T>,
    pub spectral: Var<'t, T>,
}

impl<T: Real> CostEval<'_, T> {
    /// Batch means of the weighted components.
    pub fn terms(&self) -> CostTerms {
        let mean = |v: &Var<'_, T>| {
            let t = v.value();
            t.data().iter().map(|x| x.as_f64()).sum::<f64>() / t.len() as f64
        };
        CostTerms {
            base: mean(&self.base),
            spatial: mean(&self.spatial),
            spectral: mean(&self.spectral),
        }
    }
}

/// `c̃(y0, ŷ)` per sample, differentiable in `ŷ`.
pub fn regularized_cost_batch<'t, T: Real>(
    ctx: &CostContext<T>,
    y_hat: &Var<'t, T>,
    cfg: &CostConfig,
) -> Result<CostEval<'t, T>> {
    let tape = y_hat.tape();
    if y_hat.shape() != ctx.y0.shape() {
        return Err(Error::arg(format!("ŷ shape {:?} does not match {:?}", y_hat.shape(), ctx.y0.shape())));
    }
    let n = ctx.y0.shape()[0];
    let zero = || tape.constant(Tensor::zeros(&[n]));

    let base = if cfg.lambda_base > 0.0 {
        let y0 = tape.constant_rc(ctx.y0.clone());
        y0.sub(y_hat).square().mean_per_sample().scale(cfg.lambda_base)
    } else {
        zero()
    };
    let spatial = if cfg.lambda_spatial > 0.0 {
        let pan = tape.constant_rc(ctx.pan.clone());
        pan.sub(&y_hat.band_combine(&ctx.weights, &ctx.bias))
            .square()
            .mean_per_sample()
            .scale(cfg.lambda_spatial)
    } else {
        zero()
    };
    let spectral = if cfg.lambda_spectral > 0.0 {
        let blurred = y_hat.blur_reflect(&ctx.kernels);
        let diff = match cfg.spectral_variant {
            SpectralVariant::Observation => blurred.decimate(ctx.ratio).sub(&tape.constant_rc(ctx.lrms.clone())),
            SpectralVariant::DetailRatio => {
                let gain = ctx
                    .detail_gain
                    .clone()
                    .ok_or_else(|| Error::arg("detail-ratio cost needs p̂ / p̂_L priors"))?;
                y_hat
                    .sub(&blurred.mul(&tape.constant_rc(gain)))
                    .sub(&tape.constant_rc(ctx.y0.clone()))
            }
        };
        diff.square().mean_per_sample().scale(cfg.lambda_spectral)
    } else {
        zero()
    };
    let total = base.add(&spatial).add(&spectral);
    Ok(CostEval {
        total,
        base,
        spatial,
        spectral,
    })
}

/// Single-image cost on rasters. `y0_up` and `y_hat` are HR, `p` is the PAN
/// and `m` the LRMS.
pub fn regularized_cost(
    y0_up: &RasterImage,
    y_hat: &RasterImage,
    p: &RasterImage,
    m: &RasterImage,
    cfg: &CostConfig,
    mtf: &MtfSpec,
) -> Result<(f64, CostTerms)> {
    cfg.validate()?;
    if y0_up.shape() != y_hat.shape() {
        return Err(Error::arg("y0_up and ŷ must share a shape"));
    }
    let m_up = bicubic_resize(m, mtf.ratio, 1)?;
    let prior = sample_prior(p, &m_up, mtf, cfg.spectral_variant)?;
    let ctx = CostContext::<f64>::new(
        Rc::new(stack_nhwc(&[y0_up])?),
        Rc::new(stack_nhwc(&[p])?),
        Rc::new(stack_nhwc(&[m])?),
        &[&prior],
        mtf,
    )?;
    let tape = Tape::new();
    let y = tape.constant(stack_nhwc(&[y_hat])?);
    let eval = regularized_cost_batch(&ctx, &y, cfg)?;
    Ok((eval.total.value().item(), eval.terms()))
}

/// `L_T = mean_n [c̃_n - v_n]`. The potential should enter as a constant with
/// respect to its own parameters.
pub fn mapping_loss<'t, T: Real>(cost: &Var<'t, T>, potential: &Var<'t, T>) -> Var<'t, T> {
    cost.sub(potential).mean_all()
}

/// `L_v = mean f(-c̃ + v_fake) + mean f(-v_real)` with `f(z) = exp(clamp(z))`.
pub fn potential_loss<'t, T: Real>(
    cost: &Var<'t, T>,
    v_fake: &Var<'t, T>,
    v_real: &Var<'t, T>,
    cfg: &CostConfig,
) -> Var<'t, T> {
    let fake = v_fake.sub(cost).exp_clamped(cfg.exp_clamp).mean_all();
    let real = v_real.scale(-1.0).exp_clamped(cfg.exp_clamp).mean_all();
    fake.add(&real)
}
