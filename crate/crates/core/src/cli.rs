//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::degradation::{degrade_pan, degrade_spatial};
use crate::error::{Error, Result};
use crate::imagery::{
    load_raster, save_raster, save_triplet, synth_scene, write_atomic, DatasetManifest, SampleTriplet, Split,
};
use crate::metrics::{evaluate, BicubicFuser, Fuser, OracleFuser, Protocol};
use crate::sampler::{bench_latency, FusionModel};
use crate::trainer::{train_loop, TrainingSet};

#[derive(Debug, Parser)]
#[command(name = "otfm", version, about = "One-step pansharpening: data synthesis, training, fusion, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic (PAN, LRMS, HRMS) triplets and a manifest.
    Synth(SynthArgs),
    /// Turn a full-resolution (PAN, MS) pair into a reduced-resolution triplet.
    Degrade(DegradeArgs),
    /// Train on a manifest.
    Train(TrainArgs),
    /// Fuse one PAN/LRMS pair.
    Fuse(FuseArgs),
    /// Score a fusion method on a manifest.
    Eval(EvalArgs),
    /// Time fusion for several Euler step counts.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 4)]
    pub bands: usize,
    #[arg(long, default_value_t = 64)]
    pub hr_size: usize,
    #[arg(long, default_value_t = 4)]
    pub ratio: usize,
    /// Split recorded in the manifest (train, val or test).
    #[arg(long, default_value = "train")]
    pub split: Split,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    /// Input stem: reads <IN>_pan.otfm and <IN>_ms.otfm.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output stem for the reduced-resolution triplet.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub ratio: usize,
    /// Sensor tag selecting an MTF from the config.
    #[arg(long)]
    pub sensor: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the scaled-down CPU preset instead of the defaults.
    #[arg(long)]
    pub desk: bool,
    /// Config override, section.key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub pan: PathBuf,
    #[arg(long)]
    pub lrms: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub steps: usize,
    /// Use the live weights instead of the EMA copy.
    #[arg(long)]
    pub live: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Trained model; omit to score --method.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Baseline used without a checkpoint: bicubic or oracle.
    #[arg(long, default_value = "bicubic")]
    pub method: String,
    /// reduced or full.
    #[arg(long, default_value = "reduced")]
    pub protocol: Protocol,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory receiving report.txt and run.txt.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub hr_size: usize,
    /// Comma-separated Euler step counts.
    #[arg(long, value_delimiter = ',', default_value = "1,25")]
    pub steps: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn load_config(path: Option<&Path>, desk: bool) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None if desk => Ok(RunConfig::desk()),
        None => Ok(RunConfig::default()),
    }
}

fn stem_with(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn split_stem(path: &Path) -> Result<(PathBuf, String)> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::arg(format!("{} is not a usable stem", path.display())))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((root, name.to_string()))
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    if a.count == 0 {
        return Err(Error::arg("--count must be at least 1"));
    }
    if a.out_dir.exists() {
        let non_empty = fs::read_dir(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?.next().is_some();
        if non_empty && !a.force {
            return Err(Error::arg(format!("{} is not empty; pass --force to overwrite", a.out_dir.display())));
        }
    }
    ensure_dir(&a.out_dir)?;
    let mut manifest = DatasetManifest::new(&a.out_dir, a.split, a.ratio, a.bands);
    for i in 0..a.count {
        let t = synth_scene(a.seed.wrapping_add(i as u64), a.bands, a.hr_size, a.ratio)?;
        let stem = format!("scene{i:04}");
        save_triplet(&t, &a.out_dir, &stem)?;
        manifest.entries.push(stem);
    }
    let path = a.out_dir.join("manifest.txt");
    manifest.save(&path)?;
    writeln!(out, "wrote {} triplets and {}", a.count, path.display()).map_err(|e| Error::io("<stdout>", e))
}

pub fn cmd_degrade(a: &DegradeArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), false)?;
    let pan = load_raster(stem_with(&a.input, "_pan.otfm"))?;
    let ms = load_raster(stem_with(&a.input, "_ms.otfm"))?;
    if cfg.model.bands != ms.bands() {
        cfg.set_bands(ms.bands());
    }
    let mut mtf = cfg.mtf_for(a.sensor.as_deref()).clone();
    if let Some(tag) = &a.sensor {
        if !cfg.sensors.contains_key(tag) {
            return Err(Error::arg(format!("no MTF configured for sensor '{tag}'")));
        }
    }
    if mtf.ms_gains.len() != ms.bands() {
        return Err(Error::arg(format!("MTF lists {} gains for {} bands", mtf.ms_gains.len(), ms.bands())));
    }
    mtf.ratio = a.ratio;
    let tag = a.sensor.clone().or_else(|| pan.sensor_tag().map(str::to_string));
    let pan_low = degrade_pan(&pan, &mtf)?.with_sensor_tag(tag.clone());
    let ms_low = degrade_spatial(&ms, &mtf)?.with_sensor_tag(tag.clone());
    let triplet = SampleTriplet::new(pan_low, ms_low, Some(ms.with_sensor_tag(tag)), a.ratio)?;
    let (root, stem) = split_stem(&a.out)?;
    save_triplet(&triplet, &root, &stem)?;
    let (b, h, w) = triplet.lrms.shape();
    writeln!(out, "wrote {} (lrms {b}x{h}x{w})", a.out.display()).map_err(|e| Error::io("<stdout>", e))
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), a.desk)?;
    for kv in &a.overrides {
        cfg.set(kv)?;
    }
    if let Some(m) = &a.manifest {
        cfg.data.manifest = Some(m.clone());
    }
    if let Some(s) = a.max_steps {
        cfg.train.max_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let manifest_path = cfg
        .data
        .manifest
        .clone()
        .ok_or_else(|| Error::arg("no training manifest: pass --manifest or set data.manifest"))?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    if manifest.bands != cfg.model.bands {
        cfg.set_bands(manifest.bands);
    }
    let resume = a.resume.as_ref().map(Checkpoint::load).transpose()?;
    ensure_dir(&a.run_dir)?;
    write_text(&a.run_dir.join("run.txt"), &cfg.to_text())?;
    let data = TrainingSet::from_manifest(&manifest, &cfg)?;
    let log_path = a.run_dir.join("log.txt");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let ck = train_loop(&data, &cfg, resume, Some(&a.run_dir), &mut log)?;
    writeln!(
        out,
        "trained {} steps; final checkpoint {}",
        ck.state.step,
        a.run_dir.join("final.otfm").display()
    )
    .map_err(|e| Error::io("<stdout>", e))
}

pub fn cmd_fuse(a: &FuseArgs, out: &mut dyn Write) -> Result<()> {
    let model = FusionModel::load(&a.checkpoint, !a.live)?;
    let pan = load_raster(&a.pan)?;
    let lrms = load_raster(&a.lrms)?;
    let fused = model.fuse(&pan, &lrms, a.steps)?;
    save_raster(&fused, &a.out)?;
    let (b, h, w) = fused.shape();
    writeln!(out, "wrote {} ({b}x{h}x{w}, {} step(s))", a.out.display(), a.steps).map_err(|e| Error::io("<stdout>", e))
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let (fuser, cfg): (Box<dyn Fuser>, RunConfig) = match &a.checkpoint {
        Some(p) => {
            let model = FusionModel::load(p, true)?;
            let cfg = model.config.clone();
            (Box::new(model), cfg)
        }
        None => {
            let mut cfg = load_config(a.config.as_deref(), false)?;
            if cfg.model.bands != manifest.bands {
                cfg.set_bands(manifest.bands);
            }
            cfg.mtf.ratio = manifest.ratio;
            let f: Box<dyn Fuser> = match a.method.as_str() {
                "bicubic" => Box::new(BicubicFuser),
                "oracle" => Box::new(OracleFuser),
                m => return Err(Error::arg(format!("unknown method '{m}' (expected bicubic or oracle)"))),
            };
            (f, cfg)
        }
    };
    let report = evaluate(&manifest, fuser.as_ref(), &cfg, a.protocol)?;
    let text = format!("{}{}", report.to_table(), report.to_lines());
    if let Some(dir) = &a.out_dir {
        ensure_dir(dir)?;
        write_text(&dir.join("report.txt"), &text)?;
        write_text(&dir.join("run.txt"), &cfg.to_text())?;
    }
    write!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

pub fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let rows = bench_latency(&ck, a.hr_size, &a.steps, a.repeats)?;
    let mut text = format!("{:>6} {:>12} {:>8}\n", "steps", "seconds", "cv");
    for r in &rows {
        text.push_str(&format!("{:>6} {:>12.6} {:>8.4}\n", r.steps, r.seconds, r.cv));
    }
    write!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Degrade(a) => cmd_degrade(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Fuse(a) => cmd_fuse(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Bench(a) => cmd_bench(a, out),
    }
}

/// The one-line form printed on failure.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error kind={} code={} msg={msg}", e.kind(), e.exit_code())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("otfm").chain(args.iter().copied()))
    }

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_parse() {
        let cli = parse(&["bench", "--checkpoint", "c.otfm", "--steps", "1,25"]).unwrap();
        match cli.command {
            Command::Bench(b) => assert_eq!(b.steps, vec![1, 25]),
            _ => panic!("wrong command"),
        }
        let cli = parse(&["train", "--run-dir", "r", "--set", "train.seed=3", "--set", "train.max_steps=0"]).unwrap();
        match cli.command {
            Command::Train(t) => assert_eq!(t.overrides.len(), 2),
            _ => panic!("wrong command"),
        }
        assert!(parse(&["synth", "--out-dir", "x", "--bogus"]).is_err());
        assert!(parse(&["eval", "--manifest", "m", "--protocol", "sideways"]).is_err());
    }

    #[test]
    fn error_line_is_single_line() {
        let e = Error::Config {
            line: 7,
            msg: "bad\nvalue".into(),
        };
        let line = error_line(&e);
        assert!(!line.contains('\n'));
        assert!(line.starts_with("error kind=config code=2"));
        assert!(line.contains("line 7"));
    }
}
