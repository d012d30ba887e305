//! Raster images, the on-disk container, dataset manifests, patch extraction
//! and synthetic scenes.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degradation::{degrade_spatial, MtfSpec};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"OTFM";
pub const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 1 + 2 + 4 + 4;

/// Multi-band image stored band-sequentially as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    bands: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    sensor_tag: Option<String>,
}

impl RasterImage {
    /// Build an image, checking the length and that every value is finite.
    pub fn new(bands: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if bands == 0 || height == 0 || width == 0 {
            return Err(Error::arg(format!("empty raster shape {bands}x{height}x{width}")));
        }
        if data.len() != bands * height * width {
            return Err(Error::arg(format!(
                "raster data has {} values, expected {bands}x{height}x{width}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::arg(format!("raster value at index {i} is not finite")));
        }
        Ok(Self {
            bands,
            height,
            width,
            data,
            sensor_tag: None,
        })
    }

    pub fn zeros(bands: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(bands, height, width, vec![0.0; bands * height * width])
    }

    /// Same metadata, new pixels. Used by operators whose outputs are finite by construction.
    pub(crate) fn with_data(&self, bands: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), bands * height * width);
        Self {
            bands,
            height,
            width,
            data,
            sensor_tag: self.sensor_tag.clone(),
        }
    }

    pub fn with_sensor_tag(mut self, tag: Option<String>) -> Self {
        self.sensor_tag = tag;
        self
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.bands, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn sensor_tag(&self) -> Option<&str> {
        self.sensor_tag.as_deref()
    }

    pub fn plane(&self, band: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[band * n..(band + 1) * n]
    }

    pub fn planes(&self) -> std::slice::Chunks<'_, f32> {
        self.data.chunks(self.height * self.width)
    }

    /// Single-band copy of `band`.
    pub fn band(&self, band: usize) -> RasterImage {
        self.with_data(1, self.height, self.width, self.plane(band).to_vec())
    }

    /// Rectangular window `[top, top + h) × [left, left + w)` of every band.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<RasterImage> {
        if top + h > self.height || left + w > self.width || h == 0 || w == 0 {
            return Err(Error::arg(format!(
                "crop {h}x{w} at ({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Vec::with_capacity(self.bands * h * w);
        for plane in self.planes() {
            for y in top..top + h {
                out.extend_from_slice(&plane[y * self.width + left..y * self.width + left + w]);
            }
        }
        Ok(self.with_data(self.bands, h, w, out))
    }

    pub fn clipped(&self) -> RasterImage {
        self.with_data(
            self.bands,
            self.height,
            self.width,
            self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &RasterImage) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max)
    }
}

/// Sample precision of a stored raster.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    U8,
    U16,
    F32,
}

impl BitDepth {
    pub fn bits(self) -> u8 {
        match self {
            BitDepth::U8 => 8,
            BitDepth::U16 => 16,
            BitDepth::F32 => 32,
        }
    }

    fn from_bits(bits: u8) -> Option<Self> {
        match bits {
            8 => Some(BitDepth::U8),
            16 => Some(BitDepth::U16),
            32 => Some(BitDepth::F32),
            _ => None,
        }
    }

    fn bytes(self) -> usize {
        self.bits() as usize / 8
    }
}

/// Read a raster, scaling integer payloads to `[0, 1]` by `2^bits - 1`.
pub fn load_raster(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes).map_err(|e| match e {
        DecodeError::Format(msg) => Error::Format {
            path: path.to_path_buf(),
            msg,
        },
        DecodeError::Corruption(msg) => Error::Corruption {
            path: path.to_path_buf(),
            msg,
        },
    })
}

enum DecodeError {
    Format(String),
    Corruption(String),
}

fn decode_raster(bytes: &[u8]) -> std::result::Result<RasterImage, DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::Format(format!("header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(DecodeError::Format("bad magic".into()));
    }
    let mut cur = &bytes[4..HEADER_LEN];
    let version = cur.read_u8().unwrap();
    if version != FORMAT_VERSION {
        return Err(DecodeError::Format(format!("unsupported version {version}")));
    }
    let bits = cur.read_u8().unwrap();
    let depth = BitDepth::from_bits(bits).ok_or_else(|| DecodeError::Format(format!("unsupported bit depth {bits}")))?;
    let bands = cur.read_u16::<LittleEndian>().unwrap() as usize;
    let height = cur.read_u32::<LittleEndian>().unwrap() as usize;
    let width = cur.read_u32::<LittleEndian>().unwrap() as usize;
    if bands == 0 || height == 0 || width == 0 {
        return Err(DecodeError::Format(format!("empty shape {bands}x{height}x{width}")));
    }
    let count = bands
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| DecodeError::Format("shape overflows".into()))?;
    let mut payload = &bytes[HEADER_LEN..];
    if payload.len() != count * depth.bytes() {
        return Err(DecodeError::Corruption(format!(
            "payload is {} bytes, header implies {}",
            payload.len(),
            count * depth.bytes()
        )));
    }
    let mut data = Vec::with_capacity(count);
    match depth {
        BitDepth::U8 => data.extend(payload.iter().map(|&v| v as f32 / 255.0)),
        BitDepth::U16 => {
            for _ in 0..count {
                data.push(payload.read_u16::<LittleEndian>().unwrap() as f32 / 65535.0);
            }
        }
        BitDepth::F32 => {
            for _ in 0..count {
                let v = payload.read_f32::<LittleEndian>().unwrap();
                if !v.is_finite() {
                    return Err(DecodeError::Corruption("non-finite sample".into()));
                }
                data.push(v);
            }
        }
    }
    Ok(RasterImage {
        bands,
        height,
        width,
        data,
        sensor_tag: None,
    })
}

/// Write a lossless 32-bit float raster.
pub fn save_raster(img: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    save_raster_as(img, path, BitDepth::F32)
}

/// Write a raster at the given precision. Integer depths quantise `[0, 1]`
/// (values outside are clamped).
pub fn save_raster_as(img: &RasterImage, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("cannot save a raster holding non-finite values"));
    }
    if img.bands > u16::MAX as usize || img.height > u32::MAX as usize || img.width > u32::MAX as usize {
        return Err(Error::arg("raster dimensions exceed the container limits"));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + img.data.len() * depth.bytes());
    buf.extend_from_slice(MAGIC);
    buf.push(FORMAT_VERSION);
    buf.push(depth.bits());
    buf.write_u16::<LittleEndian>(img.bands as u16).unwrap();
    buf.write_u32::<LittleEndian>(img.height as u32).unwrap();
    buf.write_u32::<LittleEndian>(img.width as u32).unwrap();
    for &v in &img.data {
        match depth {
            BitDepth::U8 => buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8),
            BitDepth::U16 => buf
                .write_u16::<LittleEndian>((v.clamp(0.0, 1.0) * 65535.0).round() as u16)
                .unwrap(),
            BitDepth::F32 => buf.write_f32::<LittleEndian>(v).unwrap(),
        }
    }
    write_atomic(path, &buf)
}

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        w.into_inner()
            .map_err(|e| Error::io(&tmp, e.into_error()))?
            .sync_all()
            .map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Aligned PAN / LRMS / optional HRMS group.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTriplet {
    pub pan: RasterImage,
    pub lrms: RasterImage,
    pub hrms_ref: Option<RasterImage>,
    pub ratio: usize,
}

impl SampleTriplet {
    pub fn new(pan: RasterImage, lrms: RasterImage, hrms_ref: Option<RasterImage>, ratio: usize) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::arg("ratio must be positive"));
        }
        if pan.bands() != 1 {
            return Err(Error::arg(format!("PAN must have 1 band, got {}", pan.bands())));
        }
        if pan.height() != ratio * lrms.height() || pan.width() != ratio * lrms.width() {
            return Err(Error::arg(format!(
                "PAN {}x{} is not {ratio}x LRMS {}x{}",
                pan.height(),
                pan.width(),
                lrms.height(),
                lrms.width()
            )));
        }
        if let Some(h) = &hrms_ref {
            if h.bands() != lrms.bands() || h.height() != pan.height() || h.width() != pan.width() {
                return Err(Error::arg("HRMS reference does not match PAN size and LRMS bands"));
            }
        }
        Ok(Self {
            pan,
            lrms,
            hrms_ref,
            ratio,
        })
    }

    pub fn bands(&self) -> usize {
        self.lrms.bands()
    }

    pub fn hr_size(&self) -> (usize, usize) {
        (self.pan.height(), self.pan.width())
    }
}

/// Tile a triplet into HR patches of `patch_hr` pixels at `stride_hr`, row-major.
pub fn extract_patches(triplet: &SampleTriplet, patch_hr: usize, stride_hr: usize) -> Result<Vec<SampleTriplet>> {
    let r = triplet.ratio;
    let (h, w) = triplet.hr_size();
    if patch_hr == 0 || stride_hr == 0 || patch_hr % r != 0 || stride_hr % r != 0 {
        return Err(Error::arg(format!(
            "patch {patch_hr} and stride {stride_hr} must be positive multiples of ratio {r}"
        )));
    }
    if patch_hr > h.min(w) {
        return Err(Error::arg(format!("patch {patch_hr} larger than image {h}x{w}")));
    }
    let offsets = |n: usize| (0..=(n - patch_hr) / stride_hr).map(move |k| k * stride_hr);
    let mut out = Vec::new();
    for top in offsets(h) {
        for left in offsets(w) {
            let lr = patch_hr / r;
            out.push(SampleTriplet {
                pan: triplet.pan.crop(top, left, patch_hr, patch_hr)?,
                lrms: triplet.lrms.crop(top / r, left / r, lr, lr)?,
                hrms_ref: triplet
                    .hrms_ref
                    .as_ref()
                    .map(|x| x.crop(top, left, patch_hr, patch_hr))
                    .transpose()?,
                ratio: r,
            });
        }
    }
    Ok(out)
}

/// Amplitude bound of the noise added to the synthetic PAN.
pub const SYNTH_PAN_NOISE: f32 = 0.01;

/// Deterministic synthetic scene built from spectrally correlated Gaussian blobs.
pub fn synth_scene(seed: u64, bands: usize, hr_size: usize, ratio: usize) -> Result<SampleTriplet> {
    if bands < 1 {
        return Err(Error::arg("synthetic scenes need at least one band"));
    }
    if ratio < 2 {
        return Err(Error::arg("synthetic scenes need ratio >= 2"));
    }
    if hr_size == 0 || hr_size % ratio != 0 {
        return Err(Error::arg(format!("hr_size {hr_size} not divisible by ratio {ratio}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = hr_size * hr_size;
    let size = hr_size as f64;
    let scale = size / 64.0;
    let mut field = vec![0.0f64; bands * n];

    for b in 0..bands {
        let base = rng.gen_range(0.1..0.3);
        field[b * n..(b + 1) * n].iter_mut().for_each(|v| *v = base);
    }

    // Smooth ramp shared across bands with per-band strength.
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let ramp: Vec<f64> = (0..bands).map(|_| rng.gen_range(0.0..0.15)).collect();
    for y in 0..hr_size {
        for x in 0..hr_size {
            let u = ((x as f64 - size / 2.0) * dx + (y as f64 - size / 2.0) * dy) / size;
            for b in 0..bands {
                field[b * n + y * hr_size + x] += ramp[b] * u;
            }
        }
    }

    let add_blob = |rng: &mut ChaCha8Rng, field: &mut [f64], amps: &[f64], sigma: f64| {
        let cy = rng.gen_range(0.0..size);
        let cx = rng.gen_range(0.0..size);
        let reach = (3.5 * sigma).ceil() as isize;
        let y0 = (cy as isize - reach).max(0) as usize;
        let y1 = ((cy as isize + reach + 1).max(0) as usize).min(hr_size);
        let x0 = (cx as isize - reach).max(0) as usize;
        let x1 = ((cx as isize + reach + 1).max(0) as usize).min(hr_size);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in y0..y1 {
            for x in x0..x1 {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let g = (-d2 * inv).exp();
                for (b, &a) in amps.iter().enumerate() {
                    if a != 0.0 {
                        field[b * n + y * hr_size + x] += a * g;
                    }
                }
            }
        }
    };

    // Shared blobs: one spatial footprint, one spectral signature.
    for _ in 0..12 {
        let sigma = rng.gen_range(1.0..7.0) * scale;
        let amp = rng.gen_range(-0.2..0.5);
        let amps: Vec<f64> = (0..bands).map(|_| amp * rng.gen_range(0.3..1.0)).collect();
        add_blob(&mut rng, &mut field, &amps, sigma);
    }
    // Band-specific detail.
    for _ in 0..6 {
        let sigma = rng.gen_range(0.8..3.0) * scale;
        let band = rng.gen_range(0..bands);
        let mut amps = vec![0.0; bands];
        amps[band] = rng.gen_range(-0.15..0.15);
        add_blob(&mut rng, &mut field, &amps, sigma);
    }

    let hrms_data: Vec<f32> = field.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    let hrms = RasterImage::new(bands, hr_size, hr_size, hrms_data)?;

    let pan_data: Vec<f32> = (0..n)
        .map(|p| {
            let mean = (0..bands).map(|b| hrms.data[b * n + p] as f64).sum::<f64>() / bands as f64;
            let noise = rng.gen_range(-1.0..1.0) * SYNTH_PAN_NOISE as f64;
            (mean + noise).clamp(0.0, 1.0) as f32
        })
        .collect();
    let pan = RasterImage::new(1, hr_size, hr_size, pan_data)?;
    let lrms = degrade_spatial(&hrms, &MtfSpec::uniform(bands, ratio))?;
    SampleTriplet::new(pan, lrms, Some(hrms), ratio)
}

/// Which evaluation split a manifest describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::arg(format!("unknown split '{other}'"))),
        }
    }
}

/// Ordered list of triplet stems relative to the manifest's directory. A
/// stem `s` names the files `s_pan.otfm`, `s_lrms.otfm` and, when present,
/// `s_hrms.otfm`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<String>,
    pub split: Split,
    pub ratio: usize,
    pub bands: usize,
}

const MANIFEST_HEADER: &str = "#otfm-manifest v1";

pub fn triplet_paths(root: &Path, stem: &str) -> [PathBuf; 3] {
    [
        root.join(format!("{stem}_pan.otfm")),
        root.join(format!("{stem}_lrms.otfm")),
        root.join(format!("{stem}_hrms.otfm")),
    ]
}

pub fn save_triplet(t: &SampleTriplet, root: &Path, stem: &str) -> Result<()> {
    let [pan, lrms, hrms] = triplet_paths(root, stem);
    if let Some(parent) = pan.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_raster(&t.pan, pan)?;
    save_raster(&t.lrms, lrms)?;
    if let Some(h) = &t.hrms_ref {
        save_raster(h, hrms)?;
    }
    Ok(())
}

pub fn load_triplet(root: &Path, stem: &str, ratio: usize) -> Result<SampleTriplet> {
    let [pan, lrms, hrms] = triplet_paths(root, stem);
    let hrms_ref = if hrms.exists() { Some(load_raster(&hrms)?) } else { None };
    let pan_img = load_raster(&pan)?;
    SampleTriplet::new(pan_img, load_raster(&lrms)?, hrms_ref, ratio).map_err(|e| Error::Format {
        path: pan,
        msg: e.to_string(),
    })
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, split: Split, ratio: usize, bands: usize) -> Self {
        Self {
            root: root.into(),
            entries: Vec::new(),
            split,
            ratio,
            bands,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{MANIFEST_HEADER} ratio={} bands={} split={}\n",
            self.ratio,
            self.bands,
            self.split.as_str()
        );
        for e in &self.entries {
            s.push_str(e);
            s.push('\n');
        }
        s
    }

    /// Write the manifest file; entries are resolved against its directory.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_text().as_bytes())
    }

    /// Parse a manifest, checking that every referenced triplet exists and
    /// shares the declared ratio and band count.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut text = String::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_string(&mut text))
            .map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, root).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })?;
        for stem in &m.entries {
            let t = load_triplet(&m.root, stem, m.ratio)?;
            if t.bands() != m.bands {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("entry '{stem}' has {} bands, manifest declares {}", t.bands(), m.bands),
                });
            }
        }
        Ok(m)
    }

    fn parse(text: &str, root: PathBuf) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty manifest")?;
        let rest = header
            .strip_prefix(MANIFEST_HEADER)
            .ok_or_else(|| format!("missing '{MANIFEST_HEADER}' header"))?;
        let (mut ratio, mut bands, mut split) = (None, None, Split::Train);
        for field in rest.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| format!("bad header field '{field}'"))?;
            match k {
                "ratio" => ratio = Some(v.parse::<usize>().map_err(|_| format!("bad ratio '{v}'"))?),
                "bands" => bands = Some(v.parse::<usize>().map_err(|_| format!("bad bands '{v}'"))?),
                "split" => split = v.parse().map_err(|e: Error| e.to_string())?,
                _ => return Err(format!("unknown header field '{k}'")),
            }
        }
        let ratio = ratio.filter(|&r| r > 0).ok_or("header lacks a positive ratio")?;
        let bands = bands.filter(|&b| b > 0).ok_or("header lacks a positive band count")?;
        let entries = lines
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect();
        Ok(Self {
            root,
            entries,
            split,
            ratio,
            bands,
        })
    }

    pub fn triplet(&self, index: usize) -> Result<SampleTriplet> {
        load_triplet(&self.root, &self.entries[index], self.ratio)
    }

    pub fn load_all(&self) -> Result<Vec<SampleTriplet>> {
        (0..self.len()).map(|i| self.triplet(i)).collect()
    }
}

/// Stack same-shaped images into an NHWC tensor.
pub fn stack_nhwc<T: Real>(imgs: &[&RasterImage]) -> Result<Tensor<T>> {
    let first = imgs.first().ok_or_else(|| Error::arg("cannot stack an empty image list"))?;
    let (b, h, w) = first.shape();
    let mut data = Vec::with_capacity(imgs.len() * b * h * w);
    for img in imgs {
        if img.shape() != (b, h, w) {
            return Err(Error::arg(format!("cannot stack {:?} with {:?}", img.shape(), (b, h, w))));
        }
        for p in 0..h * w {
            for band in 0..b {
                data.push(T::of(img.data[band * h * w + p] as f64));
            }
        }
    }
    Ok(Tensor::new(&[imgs.len(), h, w, b], data))
}

/// Split an NHWC tensor back into band-sequential images.
pub fn unstack_nhwc<T: Real>(t: &Tensor<T>) -> Result<Vec<RasterImage>> {
    let (n, h, w, b) = t.dims4();
    (0..n)
        .map(|s| {
            let mut data = vec![0.0f32; b * h * w];
            let src = &t.data()[s * h * w * b..(s + 1) * h * w * b];
            for p in 0..h * w {
                for band in 0..b {
                    data[band * h * w + p] = src[p * b + band].as_f64() as f32;
                }
            }
            RasterImage::new(b, h, w, data).map_err(|_| Error::Numerical("non-finite values in network output".into()))
        })
        .collect()
}
