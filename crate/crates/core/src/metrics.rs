//! Reduced-resolution quality indices (SAM, ERGAS, SCC, Q2n) and the
//! no-reference ones (spectral and spatial distortion, HQNR), with report
//! aggregation over a dataset.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::degradation::{bicubic_resize, degrade_pan, degrade_spatial, MtfSpec};
use crate::error::{Error, Result};
use crate::imagery::{DatasetManifest, RasterImage, SampleTriplet};
use crate::sampler::FusionModel;

/// Window and stride of Q2n and of the single-band Q index.
pub const Q_WINDOW: usize = 32;
pub const ERGAS_EPS: f64 = 1e-12;
/// Below this, a variance or mean-energy denominator counts as zero.
const Q_EPS: f64 = 1e-18;

fn same_shape(a: &RasterImage, b: &RasterImage, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::arg(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean spectral angle in degrees. Pixels where either vector is zero count as 0.
pub fn sam(fused: &RasterImage, reference: &RasterImage) -> Result<f64> {
    same_shape(fused, reference, "sam")?;
    if fused.bands() < 2 {
        return Err(Error::arg("sam needs at least two bands"));
    }
    let n = fused.height() * fused.width();
    let (a, b) = (fused.data(), reference.data());
    let mut total = 0.0;
    for p in 0..n {
        let (mut na, mut nb) = (0.0f64, 0.0f64);
        for k in 0..fused.bands() {
            na += (a[k * n + p] as f64).powi(2);
            nb += (b[k * n + p] as f64).powi(2);
        }
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        // 2·atan2(|u - v|, |u + v|) on unit vectors avoids acos cancellation near 0.
        let (na, nb) = (na.sqrt(), nb.sqrt());
        let (mut diff, mut sum) = (0.0f64, 0.0f64);
        for k in 0..fused.bands() {
            let (x, y) = (a[k * n + p] as f64 / na, b[k * n + p] as f64 / nb);
            diff += (x - y).powi(2);
            sum += (x + y).powi(2);
        }
        total += 2.0 * diff.sqrt().atan2(sum.sqrt());
    }
    Ok((total / n as f64).to_degrees())
}

pub fn ergas(fused: &RasterImage, reference: &RasterImage, ratio: usize) -> Result<f64> {
    same_shape(fused, reference, "ergas")?;
    if ratio == 0 {
        return Err(Error::arg("ergas ratio must be at least 1"));
    }
    let n = (fused.height() * fused.width()) as f64;
    let mut acc = 0.0;
    for (f, r) in fused.planes().zip(reference.planes()) {
        let mse = f.iter().zip(r).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n;
        let mean = r.iter().map(|&y| y as f64).sum::<f64>() / n;
        acc += mse / mean.abs().max(ERGAS_EPS).powi(2);
    }
    Ok(100.0 / ratio as f64 * (acc / fused.bands() as f64).sqrt())
}

/// Laplacian response on interior pixels.
fn laplacian(plane: &[f32], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h.saturating_sub(2) * w.saturating_sub(2));
    for i in 1..h.saturating_sub(1) {
        for j in 1..w.saturating_sub(1) {
            let at = |r: usize, c: usize| plane[r * w + c] as f64;
            out.push(4.0 * at(i, j) - at(i - 1, j) - at(i + 1, j) - at(i, j - 1) - at(i, j + 1));
        }
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SccResult {
    pub value: f64,
    /// Bands whose high-pass detail has zero variance; they count as 0.
    pub flat_bands: Vec<usize>,
}

/// Spatial correlation coefficient of Laplacian details, averaged over bands.
pub fn scc_detail(fused: &RasterImage, reference: &RasterImage) -> Result<SccResult> {
    same_shape(fused, reference, "scc")?;
    let (_, h, w) = fused.shape();
    if h < 3 || w < 3 {
        return Err(Error::arg("scc needs images of at least 3x3"));
    }
    let mut total = 0.0;
    let mut flat_bands = Vec::new();
    for (b, (f, r)) in fused.planes().zip(reference.planes()).enumerate() {
        match pearson(&laplacian(f, h, w), &laplacian(r, h, w)) {
            Some(c) => total += c,
            None => flat_bands.push(b),
        }
    }
    Ok(SccResult {
        value: total / fused.bands() as f64,
        flat_bands,
    })
}

pub fn scc(fused: &RasterImage, reference: &RasterImage) -> Result<f64> {
    Ok(scc_detail(fused, reference)?.value)
}

/// Cayley-Dickson conjugate.
fn hc_conj(x: &[f64]) -> Vec<f64> {
    let mut out = x.iter().map(|v| -v).collect::<Vec<_>>();
    out[0] = x[0];
    out
}

/// Cayley-Dickson product of two 2^k-ons: `(a, b)(c, d) = (ac - d*b, da + bc*)`.
pub fn hc_mul(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    debug_assert!(n.is_power_of_two() && y.len() == n);
    if n == 1 {
        return vec![x[0] * y[0]];
    }
    let (a, b) = x.split_at(n / 2);
    let (c, d) = y.split_at(n / 2);
    let ac = hc_mul(a, c);
    let dsb = hc_mul(&hc_conj(d), b);
    let da = hc_mul(d, a);
    let bcs = hc_mul(b, &hc_conj(c));
    let mut out = Vec::with_capacity(n);
    out.extend(ac.iter().zip(&dsb).map(|(p, q)| p - q));
    out.extend(da.iter().zip(&bcs).map(|(p, q)| p + q));
    out
}

/// Window origins along one axis; the whole axis when it is shorter than a window.
fn window_starts(len: usize, window: usize) -> Vec<(usize, usize)> {
    if len < window {
        return vec![(0, len)];
    }
    (0..=len - window).step_by(window).map(|s| (s, window)).collect()
}

fn windows(h: usize, w: usize, window: usize) -> Vec<(usize, usize, usize, usize)> {
    let (rows, cols) = (window_starts(h, window), window_starts(w, window));
    if h < window || w < window {
        return vec![(0, h, 0, w)];
    }
    rows.iter().flat_map(|&(r, eh)| cols.iter().map(move |&(c, ew)| (r, eh, c, ew))).collect()
}

/// Hypercomplex quality index of one window; pixels are `n`-vectors, `n` a power of two.
fn q_hypercomplex(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let n = x[0].len();
    let count = x.len() as f64;
    let mean = |v: &[Vec<f64>]| -> Vec<f64> {
        let mut m = vec![0.0; n];
        for p in v {
            for (a, b) in m.iter_mut().zip(p) {
                *a += b;
            }
        }
        m.iter().map(|a| a / count).collect()
    };
    let norm2 = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let (mx, my) = (mean(x), mean(y));
    let (ex, ey) = (norm2(&mx), norm2(&my));
    let var_x = x.iter().map(|p| norm2(p)).sum::<f64>() / count - ex;
    let var_y = y.iter().map(|p| norm2(p)).sum::<f64>() / count - ey;
    let mut cov = vec![0.0; n];
    for (p, q) in x.iter().zip(y) {
        for (a, b) in cov.iter_mut().zip(hc_mul(p, &hc_conj(q))) {
            *a += b;
        }
    }
    let mm = hc_mul(&mx, &hc_conj(&my));
    let cov: Vec<f64> = cov.iter().zip(&mm).map(|(c, m)| c / count - m).collect();
    let luminance = if ex + ey > Q_EPS { 2.0 * (ex * ey).sqrt() / (ex + ey) } else { 1.0 };
    let structure = if var_x + var_y > Q_EPS { 2.0 * norm2(&cov).sqrt() / (var_x + var_y) } else { 1.0 };
    luminance * structure
}

/// Q2n: hypercomplex quality index averaged over `window × window` tiles with
/// stride `window`; bands are zero-padded to a power of two. An image smaller
/// than a window is scored as a single tile.
pub fn q2n(fused: &RasterImage, reference: &RasterImage, window: usize) -> Result<f64> {
    same_shape(fused, reference, "q2n")?;
    if window == 0 {
        return Err(Error::arg("q2n window must be at least 1"));
    }
    let (bands, h, w) = fused.shape();
    let dim = bands.next_power_of_two();
    let pixel = |img: &RasterImage, i: usize, j: usize| -> Vec<f64> {
        let mut v = vec![0.0; dim];
        for (b, slot) in v.iter_mut().enumerate().take(bands) {
            *slot = img.plane(b)[i * w + j] as f64;
        }
        v
    };
    let tiles = windows(h, w, window);
    let mut total = 0.0;
    for &(r, eh, c, ew) in &tiles {
        let mut x = Vec::with_capacity(eh * ew);
        let mut y = Vec::with_capacity(eh * ew);
        for i in r..r + eh {
            for j in c..c + ew {
                x.push(pixel(fused, i, j));
                y.push(pixel(reference, i, j));
            }
        }
        total += q_hypercomplex(&x, &y);
    }
    Ok(total / tiles.len() as f64)
}

/// Universal image quality index of two single-band planes, averaged over tiles.
pub fn uiqi(x: &[f32], y: &[f32], h: usize, w: usize, window: usize) -> Result<f64> {
    if x.len() != h * w || y.len() != h * w || window == 0 {
        return Err(Error::arg("uiqi: planes do not match the given size"));
    }
    let tiles = windows(h, w, window);
    let mut total = 0.0;
    for &(r, eh, c, ew) in &tiles {
        let n = (eh * ew) as f64;
        let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in r..r + eh {
            for j in c..c + ew {
                let (a, b) = (x[i * w + j] as f64, y[i * w + j] as f64);
                sx += a;
                sy += b;
                sxx += a * a;
                syy += b * b;
                sxy += a * b;
            }
        }
        let (mx, my) = (sx / n, sy / n);
        let (vx, vy) = (sxx / n - mx * mx, syy / n - my * my);
        let cov = sxy / n - mx * my;
        let luminance = if mx * mx + my * my > Q_EPS { 2.0 * mx * my / (mx * mx + my * my) } else { 1.0 };
        let structure = if vx + vy > Q_EPS { 2.0 * cov / (vx + vy) } else { 1.0 };
        total += luminance * structure;
    }
    Ok(total / tiles.len() as f64)
}

/// Spectral distortion: `1 - Q2n(degrade(fused), lrms)`.
pub fn d_lambda(fused: &RasterImage, lrms: &RasterImage, mtf: &MtfSpec) -> Result<f64> {
    let low = degrade_spatial(fused, mtf)?;
    same_shape(&low, lrms, "d_lambda")?;
    Ok((1.0 - q2n(&low, lrms, Q_WINDOW)?).clamp(0.0, 1.0))
}

/// Spatial distortion: mean over bands of `|Q(fused_b, pan) - Q(lrms_b, degrade(pan))|`.
pub fn d_s(fused: &RasterImage, lrms: &RasterImage, pan: &RasterImage, mtf: &MtfSpec) -> Result<f64> {
    if pan.bands() != 1 || (pan.height(), pan.width()) != (fused.height(), fused.width()) {
        return Err(Error::arg("d_s: PAN must be single-band at the fused resolution"));
    }
    if lrms.bands() != fused.bands() {
        return Err(Error::arg("d_s: LRMS and fused band counts differ"));
    }
    let pan_low = degrade_pan(pan, mtf)?;
    if (pan_low.height(), pan_low.width()) != (lrms.height(), lrms.width()) {
        return Err(Error::arg("d_s: degraded PAN does not match the LRMS size"));
    }
    let (h, w) = (fused.height(), fused.width());
    let (lh, lw) = (lrms.height(), lrms.width());
    let mut total = 0.0;
    for b in 0..fused.bands() {
        let high = uiqi(fused.plane(b), pan.data(), h, w, Q_WINDOW)?;
        let low = uiqi(lrms.plane(b), pan_low.data(), lh, lw, Q_WINDOW)?;
        total += (high - low).abs();
    }
    Ok((total / fused.bands() as f64).clamp(0.0, 1.0))
}

pub fn hqnr(d_lambda: f64, d_s: f64) -> Result<f64> {
    for (name, v) in [("d_lambda", d_lambda), ("d_s", d_s)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::arg(format!("{name} = {v} outside [0, 1]")));
        }
    }
    Ok((1.0 - d_lambda) * (1.0 - d_s))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Against a reference HRMS.
    Reduced,
    /// No reference; distortion indices against the inputs.
    Full,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Reduced => "reduced",
            Protocol::Full => "full",
        }
    }

    pub fn metric_names(self) -> &'static [&'static str] {
        match self {
            Protocol::Reduced => &["sam", "ergas", "q2n", "scc"],
            Protocol::Full => &["d_lambda", "d_s", "hqnr"],
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reduced" | "rr" => Ok(Protocol::Reduced),
            "full" | "fr" => Ok(Protocol::Full),
            _ => Err(Error::arg(format!("unknown protocol {s:?} (expected reduced or full)"))),
        }
    }
}

/// Metrics of one fused image under `protocol`.
pub fn image_metrics(
    fused: &RasterImage,
    triplet: &SampleTriplet,
    mtf: &MtfSpec,
    protocol: Protocol,
) -> Result<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    match protocol {
        Protocol::Reduced => {
            let r = triplet
                .hrms_ref
                .as_ref()
                .ok_or_else(|| Error::arg("the reduced protocol needs a reference HRMS"))?;
            m.insert("sam".into(), sam(fused, r)?);
            m.insert("ergas".into(), ergas(fused, r, triplet.ratio)?);
            m.insert("q2n".into(), q2n(fused, r, Q_WINDOW)?);
            m.insert("scc".into(), scc(fused, r)?);
        }
        Protocol::Full => {
            let dl = d_lambda(fused, &triplet.lrms, mtf)?;
            let ds = d_s(fused, &triplet.lrms, &triplet.pan, mtf)?;
            m.insert("d_lambda".into(), dl);
            m.insert("d_s".into(), ds);
            m.insert("hqnr".into(), hqnr(dl, ds)?);
        }
    }
    Ok(m)
}

/// Anything that turns a triplet into an HR estimate.
pub trait Fuser {
    fn fuse(&self, triplet: &SampleTriplet) -> Result<RasterImage>;
}

impl Fuser for FusionModel {
    fn fuse(&self, t: &SampleTriplet) -> Result<RasterImage> {
        FusionModel::fuse(self, &t.pan, &t.lrms, 1)
    }
}

/// Bicubic upsampling of the LRMS.
pub struct BicubicFuser;

impl Fuser for BicubicFuser {
    fn fuse(&self, t: &SampleTriplet) -> Result<RasterImage> {
        bicubic_resize(&t.lrms, t.ratio, 1)
    }
}

/// Returns the reference itself.
pub struct OracleFuser;

impl Fuser for OracleFuser {
    fn fuse(&self, t: &SampleTriplet) -> Result<RasterImage> {
        t.hrms_ref.clone().ok_or_else(|| Error::arg("oracle fusion needs a reference HRMS"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub protocol: Protocol,
    pub images: Vec<String>,
    pub per_image: Vec<BTreeMap<String, f64>>,
    /// Mean and population standard deviation per metric.
    pub aggregate: BTreeMap<String, (f64, f64)>,
}

impl MetricReport {
    pub fn from_images(protocol: Protocol, images: Vec<String>, per_image: Vec<BTreeMap<String, f64>>) -> Self {
        let mut aggregate = BTreeMap::new();
        let n = per_image.len() as f64;
        for &name in protocol.metric_names() {
            let vals: Vec<f64> = per_image.iter().filter_map(|m| m.get(name).copied()).collect();
            if vals.is_empty() {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            aggregate.insert(name.to_string(), (mean, var.sqrt()));
        }
        Self {
            protocol,
            images,
            per_image,
            aggregate,
        }
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        self.aggregate.get(name).map(|a| a.0)
    }

    /// `metric=<name> mean=<v> std=<v>` per metric.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for &name in self.protocol.metric_names() {
            if let Some((m, sd)) = self.aggregate.get(name) {
                writeln!(s, "metric={name} mean={m} std={sd}").unwrap();
            }
        }
        s
    }

    pub fn to_table(&self) -> String {
        let names = self.protocol.metric_names();
        let mut s = format!("{:<16}", "image");
        for n in names {
            write!(s, " {n:>12}").unwrap();
        }
        s.push('\n');
        for (img, m) in self.images.iter().zip(&self.per_image) {
            write!(s, "{img:<16}").unwrap();
            for n in names {
                write!(s, " {:>12.6}", m.get(*n).copied().unwrap_or(f64::NAN)).unwrap();
            }
            s.push('\n');
        }
        write!(s, "{:<16}", "mean±std").unwrap();
        for n in names {
            let (m, sd) = self.aggregate.get(*n).copied().unwrap_or((f64::NAN, f64::NAN));
            write!(s, " {:>12}", format!("{m:.4}±{sd:.4}")).unwrap();
        }
        s.push('\n');
        s
    }
}

/// Score labelled triplets. MTFs come from `cfg` by sensor tag.
pub fn evaluate_triplets(
    triplets: &[(String, SampleTriplet)],
    fuser: &dyn Fuser,
    cfg: &RunConfig,
    protocol: Protocol,
) -> Result<MetricReport> {
    if triplets.is_empty() {
        return Err(Error::arg("nothing to evaluate"));
    }
    let mut names = Vec::new();
    let mut per = Vec::new();
    for (name, t) in triplets {
        if protocol == Protocol::Reduced && t.hrms_ref.is_none() {
            return Err(Error::arg(format!("{name}: the reduced protocol needs a reference HRMS")));
        }
        let mtf = cfg.mtf_for(t.pan.sensor_tag());
        let fused = fuser.fuse(t)?;
        per.push(image_metrics(&fused, t, mtf, protocol)?);
        names.push(name.clone());
    }
    Ok(MetricReport::from_images(protocol, names, per))
}

/// Fuse every manifest entry in one step and score it.
pub fn evaluate(manifest: &DatasetManifest, fuser: &dyn Fuser, cfg: &RunConfig, protocol: Protocol) -> Result<MetricReport> {
    let triplets = manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| Ok((e.clone(), manifest.triplet(i)?)))
        .collect::<Result<Vec<_>>>()?;
    evaluate_triplets(&triplets, fuser, cfg, protocol)
}
