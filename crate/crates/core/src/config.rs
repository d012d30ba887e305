//! Run configuration file: `[section]` headers, `key = value` lines and `#`
//! comments. The canonical text form is echoed into checkpoints and run
//! directories, and parses back to the same configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::degradation::MtfSpec;
use crate::error::{Error, Result};
use crate::networks::{MappingNetConfig, PotentialNetConfig};
use crate::trainer::TrainConfig;
use crate::uot::SpectralVariant;

/// Where training data comes from and how it is tiled.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    /// HR patch edge; 0 trains on whole images.
    pub patch_size: usize,
    /// HR patch stride; 0 means equal to `patch_size`.
    pub patch_stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: MappingNetConfig,
    pub potential: PotentialNetConfig,
    pub train: TrainConfig,
    pub mtf: MtfSpec,
    /// Per-sensor MTF overrides keyed by raster sensor tag.
    pub sensors: BTreeMap<String, MtfSpec>,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bands = 4;
        Self {
            model: MappingNetConfig::new(bands, 16, 3),
            potential: PotentialNetConfig::new(bands, 64),
            train: TrainConfig::default(),
            mtf: MtfSpec::uniform(bands, 4),
            sensors: BTreeMap::new(),
            data: DataConfig {
                manifest: None,
                patch_size: 64,
                patch_stride: 0,
            },
        }
    }
}

impl RunConfig {
    /// The scaled-down configuration used for CPU experiments.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.model = MappingNetConfig::new(4, 16, 2);
        cfg.potential = PotentialNetConfig::new(4, 16);
        cfg.train.batch_size = 8;
        cfg.train.max_steps = 2000;
        // At 1:1 the critic term swamps the flow regression on small synthetic sets.
        cfg.train.weight_mapping = 0.01;
        cfg.train.checkpoint_every = 500;
        cfg.train.log_every = 10;
        cfg.data.patch_size = 32;
        cfg
    }

    /// Change the band count everywhere it appears.
    pub fn set_bands(&mut self, bands: usize) {
        self.model.bands = bands;
        self.potential.bands = bands;
        self.mtf.ms_gains = vec![self.mtf.ms_gains.first().copied().unwrap_or(0.29); bands];
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.potential.validate()?;
        self.train.validate()?;
        self.train.cost.validate()?;
        self.mtf.validate()?;
        if self.potential.bands != self.model.bands {
            return Err(Error::arg("potential and mapping band counts differ"));
        }
        for (tag, spec) in std::iter::once(("default", &self.mtf)).chain(self.sensors.iter().map(|(k, v)| (k.as_str(), v))) {
            spec.validate()?;
            if spec.bands() != self.model.bands {
                return Err(Error::arg(format!(
                    "MTF '{tag}' lists {} band gains for {} bands",
                    spec.bands(),
                    self.model.bands
                )));
            }
            if spec.ratio != self.mtf.ratio {
                return Err(Error::arg(format!("MTF '{tag}' ratio differs from the default ratio")));
            }
        }
        let r = self.mtf.ratio;
        let stride = self.data.patch_stride_or_size();
        if self.data.patch_size % r != 0 || stride % r != 0 {
            return Err(Error::arg(format!("patch size and stride must be multiples of ratio {r}")));
        }
        Ok(())
    }

    /// MTF for a raster carrying `tag`, falling back to the default.
    pub fn mtf_for(&self, tag: Option<&str>) -> &MtfSpec {
        tag.and_then(|t| self.sensors.get(t)).unwrap_or(&self.mtf)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        let mut seen: BTreeMap<(String, String), usize> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config {
                        line: line_no,
                        msg: format!("malformed section header '{line}'"),
                    })?
                    .trim();
                if !is_known_section(name) {
                    return Err(Error::Config {
                        line: line_no,
                        msg: format!("unknown section [{name}]"),
                    });
                }
                if let Some(tag) = name.strip_prefix("mtf.") {
                    cfg.sensors.entry(tag.to_string()).or_insert_with(|| cfg.mtf.clone());
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if section.is_empty() {
                return Err(Error::Config {
                    line: line_no,
                    msg: format!("key '{key}' outside any section"),
                });
            }
            if let Some(first) = seen.insert((section.clone(), key.to_string()), line_no) {
                return Err(Error::Config {
                    line: line_no,
                    msg: format!("duplicate key '{key}' (first set on line {first})"),
                });
            }
            cfg.apply(&section, key, value).map_err(|msg| Error::Config { line: line_no, msg })?;
        }
        // A sensor table only overrides gains; bands and kernel follow the default.
        for spec in cfg.sensors.values_mut() {
            spec.ratio = cfg.mtf.ratio;
        }
        cfg.validate().map_err(|e| Error::Config {
            line: 0,
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply a `section.key=value` override, e.g. `train.max_steps=0`.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::arg(format!("override '{assignment}' is not section.key=value")))?;
        let (section, key) = path
            .trim()
            .rsplit_once('.')
            .ok_or_else(|| Error::arg(format!("override '{assignment}' is not section.key=value")))?;
        if !is_known_section(section) {
            return Err(Error::arg(format!("unknown section '{section}' in override")));
        }
        if let Some(tag) = section.strip_prefix("mtf.") {
            let base = self.mtf.clone();
            self.sensors.entry(tag.to_string()).or_insert(base);
        }
        self.apply(section, key.trim(), value.trim())
            .map_err(|msg| Error::arg(format!("override {path}: {msg}")))?;
        self.validate()
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        let unknown = || Err(format!("unknown key '{key}' in [{section}]"));
        match section {
            "model" => {
                let m = &mut self.model;
                match key {
                    "bands" => {
                        let b = num(value)?;
                        self.set_bands(b);
                    }
                    "base_channels" => m.base_channels = num(value)?,
                    "levels" => m.levels = num(value)?,
                    "blocks_per_level" => m.blocks_per_level = num(value)?,
                    "attention_window" => m.attention_window = num(value)?,
                    "heads" => m.heads = num(value)?,
                    "time_embed_dim" => m.time_embed_dim = num(value)?,
                    "ffn_expansion" => m.ffn_expansion = num(value)?,
                    _ => return unknown(),
                }
            }
            "potential" => {
                let p = &mut self.potential;
                match key {
                    "channels" => p.channels = num(value)?,
                    "blocks" => p.blocks = num(value)?,
                    "time_embed_dim" => p.time_embed_dim = num(value)?,
                    "conditioned" => p.conditioned = num(value)?,
                    "slope" => p.slope = num(value)?,
                    _ => return unknown(),
                }
            }
            "train" => {
                let t = &mut self.train;
                match key {
                    "lr_mapping" => t.lr_mapping = num(value)?,
                    "lr_potential" => t.lr_potential = num(value)?,
                    "max_steps" => t.max_steps = num(value)?,
                    "batch_size" => t.batch_size = num(value)?,
                    "ema_decay" => t.ema_decay = num(value)?,
                    "seed" => t.seed = num(value)?,
                    "weight_flow" => t.weight_flow = num(value)?,
                    "weight_mapping" => t.weight_mapping = num(value)?,
                    "weight_decay" => t.weight_decay = num(value)?,
                    "grad_clip" => t.grad_clip = num(value)?,
                    "checkpoint_every" => t.checkpoint_every = num(value)?,
                    "log_every" => t.log_every = num(value)?,
                    "max_failed_steps" => t.max_failed_steps = num(value)?,
                    _ => return unknown(),
                }
            }
            "cost" => {
                let c = &mut self.train.cost;
                match key {
                    "lambda_base" => c.lambda_base = num(value)?,
                    "lambda_spatial" => c.lambda_spatial = num(value)?,
                    "lambda_spectral" => c.lambda_spectral = num(value)?,
                    "spectral_variant" => c.spectral_variant = value.parse::<SpectralVariant>().map_err(|e| e.to_string())?,
                    "exp_clamp" => c.exp_clamp = num(value)?,
                    _ => return unknown(),
                }
            }
            "mtf" => match key {
                "ms_gains" => self.mtf.ms_gains = list(value)?,
                "pan_gain" => self.mtf.pan_gain = num(value)?,
                "kernel_size" => {
                    self.mtf.kernel_size = num(value)?;
                    for s in self.sensors.values_mut() {
                        s.kernel_size = self.mtf.kernel_size;
                    }
                }
                "ratio" => self.mtf.ratio = num(value)?,
                _ => return unknown(),
            },
            "data" => match key {
                "manifest" => self.data.manifest = (!value.is_empty()).then(|| PathBuf::from(value)),
                "patch_size" => self.data.patch_size = num(value)?,
                "patch_stride" => self.data.patch_stride = num(value)?,
                _ => return unknown(),
            },
            s => {
                let tag = s.strip_prefix("mtf.").ok_or_else(|| format!("unknown section [{s}]"))?;
                let spec = self.sensors.get_mut(tag).ok_or_else(|| format!("unknown sensor '{tag}'"))?;
                match key {
                    "ms_gains" => spec.ms_gains = list(value)?,
                    "pan_gain" => spec.pan_gain = num(value)?,
                    _ => return unknown(),
                }
            }
        }
        Ok(())
    }

    /// Canonical text form listing every key.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let _ = writeln!(s, "[model]");
        kv(&mut s, "bands", m.bands);
        kv(&mut s, "base_channels", m.base_channels);
        kv(&mut s, "levels", m.levels);
        kv(&mut s, "blocks_per_level", m.blocks_per_level);
        kv(&mut s, "attention_window", m.attention_window);
        kv(&mut s, "heads", m.heads);
        kv(&mut s, "time_embed_dim", m.time_embed_dim);
        kv(&mut s, "ffn_expansion", m.ffn_expansion);
        let p = &self.potential;
        let _ = writeln!(s, "\n[potential]");
        kv(&mut s, "channels", p.channels);
        kv(&mut s, "blocks", p.blocks);
        kv(&mut s, "time_embed_dim", p.time_embed_dim);
        kv(&mut s, "conditioned", p.conditioned);
        kv(&mut s, "slope", p.slope);
        let t = &self.train;
        let _ = writeln!(s, "\n[train]");
        kv(&mut s, "lr_mapping", t.lr_mapping);
        kv(&mut s, "lr_potential", t.lr_potential);
        kv(&mut s, "max_steps", t.max_steps);
        kv(&mut s, "batch_size", t.batch_size);
        kv(&mut s, "ema_decay", t.ema_decay);
        kv(&mut s, "seed", t.seed);
        kv(&mut s, "weight_flow", t.weight_flow);
        kv(&mut s, "weight_mapping", t.weight_mapping);
        kv(&mut s, "weight_decay", t.weight_decay);
        kv(&mut s, "grad_clip", t.grad_clip);
        kv(&mut s, "checkpoint_every", t.checkpoint_every);
        kv(&mut s, "log_every", t.log_every);
        kv(&mut s, "max_failed_steps", t.max_failed_steps);
        let c = &t.cost;
        let _ = writeln!(s, "\n[cost]");
        kv(&mut s, "lambda_base", c.lambda_base);
        kv(&mut s, "lambda_spatial", c.lambda_spatial);
        kv(&mut s, "lambda_spectral", c.lambda_spectral);
        kv(&mut s, "spectral_variant", c.spectral_variant.as_str());
        kv(&mut s, "exp_clamp", c.exp_clamp);
        let _ = writeln!(s, "\n[mtf]");
        kv(&mut s, "ms_gains", join(&self.mtf.ms_gains));
        kv(&mut s, "pan_gain", self.mtf.pan_gain);
        kv(&mut s, "kernel_size", self.mtf.kernel_size);
        kv(&mut s, "ratio", self.mtf.ratio);
        for (tag, spec) in &self.sensors {
            let _ = writeln!(s, "\n[mtf.{tag}]");
            kv(&mut s, "ms_gains", join(&spec.ms_gains));
            kv(&mut s, "pan_gain", spec.pan_gain);
        }
        let _ = writeln!(s, "\n[data]");
        let manifest = self.data.manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        kv(&mut s, "manifest", manifest);
        kv(&mut s, "patch_size", self.data.patch_size);
        kv(&mut s, "patch_stride", self.data.patch_stride);
        s
    }
}

impl DataConfig {
    pub fn patch_stride_or_size(&self) -> usize {
        if self.patch_stride == 0 {
            self.patch_size
        } else {
            self.patch_stride
        }
    }
}

fn is_known_section(name: &str) -> bool {
    matches!(name, "model" | "potential" | "train" | "cost" | "mtf" | "data")
        || name
            .strip_prefix("mtf.")
            .is_some_and(|t| !t.is_empty() && t.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-'))
}

fn num<V: FromStr>(value: &str) -> std::result::Result<V, String> {
    value.parse().map_err(|_| format!("cannot parse '{value}'"))
}

fn list(value: &str) -> std::result::Result<Vec<f64>, String> {
    value.split(',').map(|v| num(v.trim())).collect()
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn kv(s: &mut String, key: &str, value: impl std::fmt::Display) {
    let _ = writeln!(s, "{key} = {value}");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = RunConfig::desk();
        cfg.train.lr_mapping = 1.5e-7;
        cfg.train.cost.spectral_variant = SpectralVariant::DetailRatio;
        cfg.sensors.insert("WV3".into(), MtfSpec::new(vec![0.3, 0.31, 0.32, 0.33], 0.11, 41, 4).unwrap());
        cfg.data.manifest = Some("data/train.txt".into());
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_file_with_comments() {
        let text = "# desk run\n[train]\nmax_steps = 7   # short\nseed=3\n\n[model]\nbands = 8\n[mtf.GF2]\npan_gain = 0.12\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train.max_steps, 7);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.model.bands, 8);
        assert_eq!(cfg.potential.bands, 8);
        assert_eq!(cfg.mtf.ms_gains.len(), 8);
        let gf2 = cfg.mtf_for(Some("GF2"));
        assert_eq!(gf2.pan_gain, 0.12);
        assert_eq!(gf2.ms_gains.len(), 8);
        assert_eq!(cfg.mtf_for(Some("QB")), &cfg.mtf);
        assert_eq!(cfg.mtf_for(None), &cfg.mtf);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let line_of = |text: &str| match RunConfig::parse(text) {
            Err(Error::Config { line, .. }) => line,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(line_of("[train]\nmax_steps = 1\nbogus = 2\n"), 3);
        assert_eq!(line_of("\n\n[nope]\n"), 3);
        assert_eq!(line_of("[train]\nseed = x\n"), 2);
        assert_eq!(line_of("seed = 1\n"), 1);
        assert_eq!(line_of("[train]\nseed = 1\nseed = 2\n"), 3);
        assert_eq!(line_of("[train\n"), 1);
        assert_eq!(line_of("[train]\njust words\n"), 2);
        assert_eq!(line_of("[mtf]\nms_gains = 0.3, 0.3\n"), 0);
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::desk();
        cfg.set("train.max_steps=0").unwrap();
        assert_eq!(cfg.train.max_steps, 0);
        cfg.set("cost.spectral_variant = detail_ratio").unwrap();
        assert_eq!(cfg.train.cost.spectral_variant, SpectralVariant::DetailRatio);
        cfg.set("mtf.QB.pan_gain=0.2").unwrap();
        assert_eq!(cfg.mtf_for(Some("QB")).pan_gain, 0.2);
        assert!(matches!(cfg.set("train.nope=1"), Err(Error::Argument(_))));
        assert!(cfg.set("max_steps").is_err());
        assert!(cfg.set("train.ema_decay=1.0").is_err());
    }
}
