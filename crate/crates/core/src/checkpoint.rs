//! Versioned training checkpoint with a SHA-256 trailer.
//!
//! Layout (little-endian): magic `OTFMCKPT`, `u32` version, config text,
//! step, failure streak, the parameter sets (live and EMA mapping, live and
//! EMA potential, BatchNorm buffers), both optimizer states, then the
//! 32-byte digest of everything before it.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::imagery::write_atomic;
use crate::networks::ParamSet;
use crate::optim::AdamW;
use crate::tensor::Tensor;
use crate::trainer::{build_networks, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OTFMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const MAX_RANK: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

fn put_params(out: &mut Vec<u8>, p: &ParamSet<f32>) {
    out.write_u32::<LE>(p.len() as u32).unwrap();
    for (name, t) in p.iter() {
        out.write_u32::<LE>(name.len() as u32).unwrap();
        out.extend_from_slice(name.as_bytes());
        out.write_u32::<LE>(t.shape().len() as u32).unwrap();
        for &d in t.shape() {
            out.write_u64::<LE>(d as u64).unwrap();
        }
        for &v in t.data() {
            out.write_f32::<LE>(v).unwrap();
        }
    }
}

fn put_adam(out: &mut Vec<u8>, a: &AdamW<f32>) {
    out.write_u64::<LE>(a.t).unwrap();
    put_params(out, &a.m);
    put_params(out, &a.v);
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    path: &'a Path,
}

impl Reader<'_> {
    fn bad(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        self.cur.read_u32::<LE>().map_err(|_| self.bad("truncated"))
    }

    fn u64(&mut self) -> Result<u64> {
        self.cur.read_u64::<LE>().map_err(|_| self.bad("truncated"))
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let left = self.cur.get_ref().len() - self.cur.position() as usize;
        if n > left {
            return Err(self.bad("truncated"));
        }
        let mut buf = vec![0u8; n];
        self.cur.read_exact(&mut buf).map_err(|_| self.bad("truncated"))?;
        Ok(buf)
    }

    fn params(&mut self) -> Result<ParamSet<f32>> {
        let count = self.u32()?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = String::from_utf8(self.bytes(len)?).map_err(|_| self.bad("parameter name is not UTF-8"))?;
            let rank = self.u32()?;
            if rank > MAX_RANK {
                return Err(self.bad(format!("parameter {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| self.bad("parameter size overflows"))?;
            let raw = self.bytes(n.checked_mul(4).ok_or_else(|| self.bad("parameter size overflows"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            set.push(name, Tensor::new(&shape, data));
        }
        Ok(set)
    }

    fn adam(&mut self, lr: f64, wd: f64) -> Result<AdamW<f32>> {
        let t = self.u64()?;
        let m = self.params()?;
        let v = self.params()?;
        Ok(AdamW {
            lr,
            weight_decay: wd,
            m,
            v,
            t,
        })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u32::<LE>(CHECKPOINT_VERSION).unwrap();
        let text = self.config.to_text();
        out.write_u32::<LE>(text.len() as u32).unwrap();
        out.extend_from_slice(text.as_bytes());
        let s = &self.state;
        out.write_u64::<LE>(s.step).unwrap();
        out.write_u32::<LE>(s.failed_streak).unwrap();
        for p in [&s.theta, &s.theta_ema, &s.phi, &s.phi_ema, &s.bn] {
            put_params(&mut out, p);
        }
        put_adam(&mut out, &s.opt_theta);
        put_adam(&mut out, &s.opt_phi);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parse and verify. `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let format = |msg: &str| Error::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        };
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + DIGEST_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(format("not a checkpoint (bad magic)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Corruption {
                path: path.to_path_buf(),
                msg: "checksum mismatch".into(),
            });
        }
        let mut r = Reader {
            cur: Cursor::new(body),
            path,
        };
        r.cur.set_position(8);
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format(&format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let text = String::from_utf8(r.bytes(len)?).map_err(|_| format("config echo is not UTF-8"))?;
        let config = RunConfig::parse(&text)?;
        let step = r.u64()?;
        let failed_streak = r.u32()?;
        let theta = r.params()?;
        let theta_ema = r.params()?;
        let phi = r.params()?;
        let phi_ema = r.params()?;
        let bn = r.params()?;
        let t = &config.train;
        let opt_theta = r.adam(t.lr_mapping, t.weight_decay)?;
        let opt_phi = r.adam(t.lr_potential, t.weight_decay)?;
        if r.cur.position() as usize != body.len() {
            return Err(format("trailing bytes after optimizer state"));
        }
        let (_, theta0, _, phi0, bn0) = build_networks(&config)?;
        let ok = [&theta, &theta_ema, &opt_theta.m, &opt_theta.v].iter().all(|p| p.same_structure(&theta0))
            && [&phi, &phi_ema, &opt_phi.m, &opt_phi.v].iter().all(|p| p.same_structure(&phi0))
            && bn.same_structure(&bn0);
        if !ok {
            return Err(format("parameters do not match the architecture in the config echo"));
        }
        Ok(Self {
            config,
            state: TrainState {
                step,
                failed_streak,
                theta,
                theta_ema,
                phi,
                phi_ema,
                bn,
                opt_theta,
                opt_phi,
            },
        })
    }

    /// Atomic write (temporary file, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Lower-case hex SHA-256 of a file.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
