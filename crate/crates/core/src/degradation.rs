//! Observation model linking a high-resolution multispectral image to its PAN
//! and LRMS observations: MTF-matched Gaussian blur, decimation, spectral
//! matching of the PAN band, and the detail-ratio spectral estimate.
//!
//! All convolutions use half-sample symmetric boundaries, which keep constant
//! images constant. Arithmetic is carried out in `f64` and rounded to the
//! raster's `f32` storage once per operator.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::imagery::RasterImage;
use crate::tensor::image_ops::blur_plane;

/// Default Nyquist gain of a multispectral band's MTF.
pub const DEFAULT_MS_GAIN: f64 = 0.29;
/// Default Nyquist gain of the PAN MTF.
pub const DEFAULT_PAN_GAIN: f64 = 0.15;
pub const DEFAULT_KERNEL_SIZE: usize = 41;
/// Lower bound applied to `p̂_L` before dividing by it.
pub const RATIO_EPS: f64 = 1e-4;

/// Sensor MTF description.
#[derive(Clone, Debug, PartialEq)]
pub struct MtfSpec {
    pub ms_gains: Vec<f64>,
    pub pan_gain: f64,
    pub kernel_size: usize,
    pub ratio: usize,
}

impl MtfSpec {
    pub fn new(ms_gains: Vec<f64>, pan_gain: f64, kernel_size: usize, ratio: usize) -> Result<Self> {
        let spec = Self {
            ms_gains,
            pan_gain,
            kernel_size,
            ratio,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Uniform default gains for `bands` multispectral bands.
    pub fn uniform(bands: usize, ratio: usize) -> Self {
        Self {
            ms_gains: vec![DEFAULT_MS_GAIN; bands],
            pan_gain: DEFAULT_PAN_GAIN,
            kernel_size: DEFAULT_KERNEL_SIZE,
            ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ms_gains.is_empty() {
            return Err(Error::arg("MTF spec needs at least one band gain"));
        }
        for &g in self.ms_gains.iter().chain(std::iter::once(&self.pan_gain)) {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::arg(format!("MTF gain {g} outside (0, 1)")));
            }
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::arg(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.ratio == 0 {
            return Err(Error::arg("ratio must be positive"));
        }
        Ok(())
    }

    pub fn bands(&self) -> usize {
        self.ms_gains.len()
    }

    /// 1-D factors of every band's MTF kernel.
    pub fn band_taps(&self) -> Result<Vec<Vec<f64>>> {
        self.ms_gains
            .iter()
            .map(|&g| gaussian_taps(g, self.ratio, self.kernel_size))
            .collect()
    }

    pub fn pan_taps(&self) -> Result<Vec<f64>> {
        gaussian_taps(self.pan_gain, self.ratio, self.kernel_size)
    }
}

/// Square convolution kernel, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2d {
    pub size: usize,
    pub weights: Vec<f64>,
}

impl Kernel2d {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }
}

fn taps_for_sigma(sigma: f64, size: usize) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut taps: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|v| *v /= s);
    taps
}

/// Discrete-time frequency response of a symmetric odd-length kernel.
pub fn frequency_response(taps: &[f64], freq: f64) -> f64 {
    let r = (taps.len() / 2) as f64;
    taps.iter()
        .enumerate()
        .map(|(i, &v)| v * (2.0 * std::f64::consts::PI * freq * (i as f64 - r)).cos())
        .sum()
}

/// Normalised 1-D Gaussian whose response at `1 / (2 ratio)` cycles/pixel equals `gain`.
///
/// The width is found by bisection on the sampled, truncated kernel, so the
/// gain is matched for the discrete filter rather than its continuous model.
pub fn gaussian_taps(gain: f64, ratio: usize, size: usize) -> Result<Vec<f64>> {
    if !(gain > 0.0 && gain < 1.0) {
        return Err(Error::arg(format!("MTF gain {gain} outside (0, 1)")));
    }
    if size % 2 == 0 || size == 0 {
        return Err(Error::arg(format!("kernel size {size} must be odd")));
    }
    if ratio == 0 {
        return Err(Error::arg("ratio must be positive"));
    }
    let freq = 1.0 / (2.0 * ratio as f64);
    let response = |sigma: f64| frequency_response(&taps_for_sigma(sigma, size), freq);
    let (mut lo, mut hi) = (1e-3, size as f64);
    if response(hi) > gain {
        return Err(Error::arg(format!(
            "kernel size {size} too small to reach gain {gain} at ratio {ratio}"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if response(mid) > gain {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(taps_for_sigma(0.5 * (lo + hi), size))
}

/// Isotropic Gaussian MTF kernel, normalised to unit sum.
pub fn mtf_kernel(gain: f64, ratio: usize, size: usize) -> Result<Kernel2d> {
    let taps = gaussian_taps(gain, ratio, size)?;
    let mut weights = Vec::with_capacity(size * size);
    for a in &taps {
        for b in &taps {
            weights.push(a * b);
        }
    }
    Ok(Kernel2d { size, weights })
}

fn blur_with_taps(img: &RasterImage, taps: &[Vec<f64>]) -> RasterImage {
    let (h, w) = (img.height(), img.width());
    let mut out = Vec::with_capacity(img.data().len());
    for (b, plane) in img.planes().enumerate() {
        let src: Vec<f64> = plane.iter().map(|&v| v as f64).collect();
        out.extend(blur_plane(&src, h, w, &taps[b]).into_iter().map(|v| v as f32));
    }
    img.with_data(img.bands(), h, w, out)
}

/// Per-band MTF blur of a multispectral image.
pub fn blur(img: &RasterImage, mtf: &MtfSpec) -> Result<RasterImage> {
    if img.bands() != mtf.bands() {
        return Err(Error::arg(format!(
            "image has {} bands but the MTF spec has {} gains",
            img.bands(),
            mtf.bands()
        )));
    }
    Ok(blur_with_taps(img, &mtf.band_taps()?))
}

/// MTF blur of a single-band PAN image with the PAN gain.
pub fn blur_pan(img: &RasterImage, mtf: &MtfSpec) -> Result<RasterImage> {
    if img.bands() != 1 {
        return Err(Error::arg("PAN blur expects a single-band image"));
    }
    Ok(blur_with_taps(img, &[mtf.pan_taps()?]))
}

/// Keep pixel `(r/2, r/2)` of every `r × r` block.
pub fn decimate(img: &RasterImage, ratio: usize) -> Result<RasterImage> {
    if ratio == 0 || img.height() % ratio != 0 || img.width() % ratio != 0 {
        return Err(Error::arg(format!(
            "{}x{} image not divisible by ratio {ratio}",
            img.height(),
            img.width()
        )));
    }
    let (h, w) = (img.height() / ratio, img.width() / ratio);
    let off = ratio / 2;
    let mut out = Vec::with_capacity(img.bands() * h * w);
    for plane in img.planes() {
        for i in 0..h {
            for j in 0..w {
                out.push(plane[(i * ratio + off) * img.width() + j * ratio + off]);
            }
        }
    }
    Ok(img.with_data(img.bands(), h, w, out))
}

/// `yBS`: blur then decimate, the LRMS observation of an HRMS image.
pub fn degrade_spatial(y: &RasterImage, mtf: &MtfSpec) -> Result<RasterImage> {
    decimate(&blur(y, mtf)?, mtf.ratio)
}

/// PAN counterpart of [`degrade_spatial`].
pub fn degrade_pan(p: &RasterImage, mtf: &MtfSpec) -> Result<RasterImage> {
    decimate(&blur_pan(p, mtf)?, mtf.ratio)
}

/// Least-squares band weights reproducing PAN from the upsampled LRMS.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralMatchWeights {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Set when the design matrix was rank deficient and the minimum-norm
    /// solution was returned.
    pub rank_deficient: bool,
}

impl SpectralMatchWeights {
    /// Apply the fitted combination to a multispectral image.
    pub fn combine(&self, img: &RasterImage) -> Vec<f64> {
        let n = img.height() * img.width();
        let mut out = vec![self.bias; n];
        for (plane, &w) in img.planes().zip(&self.weights) {
            for (o, &v) in out.iter_mut().zip(plane) {
                *o += w * v as f64;
            }
        }
        out
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fit `pan ≈ Σ_b w_b · lrms_up_b + bias` and return the fitted combination
/// re-standardised to PAN's mean and standard deviation.
pub fn spectral_match(pan: &RasterImage, lrms_up: &RasterImage) -> Result<(SpectralMatchWeights, RasterImage)> {
    if pan.bands() != 1 {
        return Err(Error::arg("spectral matching expects a single-band PAN"));
    }
    if pan.height() != lrms_up.height() || pan.width() != lrms_up.width() {
        return Err(Error::arg("spectral matching needs LRMS upsampled to PAN resolution"));
    }
    let b = lrms_up.bands();
    let dim = b + 1;
    let mut ata = DMatrix::<f64>::zeros(dim, dim);
    let mut atb = DVector::<f64>::zeros(dim);
    let planes: Vec<&[f32]> = lrms_up.planes().collect();
    let mut row = vec![0.0; dim];
    for (p, &target) in pan.data().iter().enumerate() {
        for (k, plane) in planes.iter().enumerate() {
            row[k] = plane[p] as f64;
        }
        row[b] = 1.0;
        for i in 0..dim {
            atb[i] += row[i] * target as f64;
            for j in 0..dim {
                ata[(i, j)] += row[i] * row[j];
            }
        }
    }
    let svd = ata.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * dim as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let sol = svd
        .solve(&atb, tol)
        .map_err(|e| Error::Numerical(format!("spectral matching solve failed: {e}")))?;
    let weights = SpectralMatchWeights {
        weights: sol.iter().take(b).copied().collect(),
        bias: sol[b],
        rank_deficient: rank < dim,
    };
    let fit = weights.combine(lrms_up);
    let pan_f: Vec<f64> = pan.data().iter().map(|&v| v as f64).collect();
    let (pm, ps) = mean_std(&pan_f);
    let (fm, fs) = mean_std(&fit);
    let restd: Vec<f32> = fit
        .iter()
        .map(|&v| if fs > 1e-12 { ((v - fm) / fs * ps + pm) as f32 } else { pm as f32 })
        .collect();
    Ok((weights, pan.with_data(1, pan.height(), pan.width(), restd)))
}

/// `p̂_L`: PAN-MTF blur, decimation and bicubic re-expansion of `p̂`.
pub fn pan_lowpass(p_hat: &RasterImage, mtf: &MtfSpec) -> Result<RasterImage> {
    let low = decimate(&blur_pan(p_hat, mtf)?, mtf.ratio)?;
    bicubic_resize(&low, mtf.ratio, 1)
}

/// Detail-ratio spectral estimate `y − blur(y) ⊙ (p̂ ⊘ max(p̂_L, ε))`.
pub fn degrade_spectral(
    y: &RasterImage,
    p_hat: &RasterImage,
    p_low: &RasterImage,
    mtf: &MtfSpec,
) -> Result<RasterImage> {
    if p_hat.bands() != 1 || p_low.bands() != 1 {
        return Err(Error::arg("p_hat and p_low must be single-band"));
    }
    if p_hat.height() != y.height() || p_low.height() != y.height() || p_hat.width() != y.width() || p_low.width() != y.width() {
        return Err(Error::arg("detail ratio inputs must share the HRMS resolution"));
    }
    let blurred = blur(y, mtf)?;
    let ratio: Vec<f64> = p_hat
        .data()
        .iter()
        .zip(p_low.data())
        .map(|(&a, &b)| a as f64 / (b as f64).max(RATIO_EPS))
        .collect();
    let n = y.height() * y.width();
    let mut out = Vec::with_capacity(y.data().len());
    for (yp, bp) in y.planes().zip(blurred.planes()) {
        for p in 0..n {
            out.push((yp[p] as f64 - bp[p] as f64 * ratio[p]) as f32);
        }
    }
    Ok(y.with_data(y.bands(), y.height(), y.width(), out))
}

/// Catmull-Rom cubic convolution weight (`a = -0.5`).
#[inline]
pub fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

struct AxisTaps {
    index: Vec<[usize; 4]>,
    weight: Vec<[f64; 4]>,
}

fn axis_taps(src_len: usize, dst_len: usize) -> AxisTaps {
    let scale = src_len as f64 / dst_len as f64;
    let mut index = Vec::with_capacity(dst_len);
    let mut weight = Vec::with_capacity(dst_len);
    for d in 0..dst_len {
        let s = (d as f64 + 0.5) * scale - 0.5;
        let base = s.floor();
        let frac = s - base;
        let mut idx = [0usize; 4];
        let mut wts = [0.0; 4];
        for k in 0..4 {
            let off = k as f64 - 1.0;
            let pos = (base as isize + k as isize - 1).clamp(0, src_len as isize - 1);
            idx[k] = pos as usize;
            wts[k] = cubic_weight(frac - off);
        }
        index.push(idx);
        weight.push(wts);
    }
    AxisTaps { index, weight }
}

/// Separable bicubic resampling by the rational factor `num / den`,
/// half-pixel aligned with clamped edges.
pub fn bicubic_resize(img: &RasterImage, num: usize, den: usize) -> Result<RasterImage> {
    if num == 0 || den == 0 {
        return Err(Error::arg("resize factor must be positive"));
    }
    let (h, w) = (img.height(), img.width());
    if (h * num) % den != 0 || (w * num) % den != 0 {
        return Err(Error::arg(format!(
            "resizing {h}x{w} by {num}/{den} does not give integer dimensions"
        )));
    }
    let (ho, wo) = (h * num / den, w * num / den);
    if ho == 0 || wo == 0 {
        return Err(Error::arg("resize would produce an empty image"));
    }
    let rows = axis_taps(h, ho);
    let cols = axis_taps(w, wo);
    let mut out = Vec::with_capacity(img.bands() * ho * wo);
    let mut tmp = vec![0.0f64; h * wo];
    for plane in img.planes() {
        for y in 0..h {
            for x in 0..wo {
                let (ix, wx) = (&cols.index[x], &cols.weight[x]);
                tmp[y * wo + x] = (0..4).map(|k| wx[k] * plane[y * w + ix[k]] as f64).sum();
            }
        }
        for y in 0..ho {
            let (iy, wy) = (&rows.index[y], &rows.weight[y]);
            for x in 0..wo {
                let v: f64 = (0..4).map(|k| wy[k] * tmp[iy[k] * wo + x]).sum();
                out.push(v as f32);
            }
        }
    }
    Ok(img.with_data(img.bands(), ho, wo, out))
}
