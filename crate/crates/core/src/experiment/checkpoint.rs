//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, then tagged sections
//! (`[u8; 4]` tag, `u64` length, payload), an `END_` section, and a trailing
//! SHA-256 of everything before it. Integers and floats are little-endian;
//! floats are stored as raw bits so a load/save cycle is byte-exact.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::config::{parse_config, ConfigError, RunConfig};
use crate::augment::{Catalog, DaPolicy};
use crate::data::StreamState;
use crate::hpo::{Bounds, HyperParams};
use crate::nas::{ArchState, CellOp, Edge, Genotype, IstaConfig, ParamStore};
use crate::scheduler::{RngStreams, TrainState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DHACKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint section {section}: {msg}")]
    Malformed { section: String, msg: String },
    #[error("missing checkpoint section {0}")]
    MissingSection(&'static str),
    #[error("checkpoint state is not finite")]
    NonFinite,
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// A run's config together with its state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

#[derive(Default)]
struct Buf(Vec<u8>);

impl Buf {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.0.extend_from_slice(v);
    }
}

struct Reader<'a> {
    data: &'a [u8],
    at: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8], section: &'static str) -> Self {
        Reader { data, at: 0, section }
    }

    fn malformed(&self, msg: impl Into<String>) -> CheckpointError {
        CheckpointError::Malformed {
            section: self.section.to_string(),
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.at < n {
            return Err(self.malformed(format!("needs {n} more bytes at offset {}", self.at)));
        }
        let s = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.data.len())
            .ok_or_else(|| self.malformed(format!("implausible length {n}")))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| self.malformed("invalid UTF-8"))
    }
    fn finish(&self) -> Result<()> {
        if self.at != self.data.len() {
            return Err(self.malformed(format!("{} trailing bytes", self.data.len() - self.at)));
        }
        Ok(())
    }
}

fn section(out: &mut Buf, tag: &[u8; 4], payload: Buf) {
    out.0.extend_from_slice(tag);
    out.u64(payload.0.len() as u64);
    out.0.extend_from_slice(&payload.0);
}

fn rng_bytes(b: &mut Buf, r: &ChaCha8Rng) {
    b.0.extend_from_slice(&r.get_seed());
    b.u64(r.get_stream());
    b.u128(r.get_word_pos());
}

fn read_rng(r: &mut Reader) -> Result<ChaCha8Rng> {
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(r.u128()?);
    Ok(rng)
}

fn stream_bytes(b: &mut Buf, s: &StreamState) {
    b.u64(s.epoch);
    b.u64(s.cursor as u64);
    b.u64(s.seq);
}

fn read_stream(r: &mut Reader) -> Result<StreamState> {
    Ok(StreamState {
        epoch: r.u64()?,
        cursor: r.u64()? as usize,
        seq: r.u64()?,
    })
}

/// Serializes a checkpoint. Fails on non-finite state.
pub fn to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let s = &ck.state;
    if !s.all_finite() {
        return Err(CheckpointError::NonFinite);
    }
    let mut out = Buf::default();
    out.0.extend_from_slice(MAGIC);
    out.u32(FORMAT_VERSION);

    let mut p = Buf::default();
    p.bytes(ck.config.to_text().as_bytes());
    section(&mut out, b"CONF", p);

    let mut p = Buf::default();
    p.u64(s.t);
    p.u64(s.phase as u64);
    p.u64(s.phase_t);
    p.f64(s.last_holdout);
    section(&mut out, b"META", p);

    let mut p = Buf::default();
    p.u64(s.params.len() as u64);
    for (name, t) in s.params.iter() {
        p.bytes(name.as_bytes());
        p.u64(t.shape().len() as u64);
        for &d in t.shape() {
            p.u64(d as u64);
        }
        p.f64s(t.data());
    }
    section(&mut out, b"THET", p);

    let mut p = Buf::default();
    p.u8(match s.policy.catalog() {
        Catalog::Image => 0,
        Catalog::Vector => 1,
    });
    p.f64(s.policy.temperature());
    p.f64s(s.policy.tau());
    section(&mut out, b"TAU_", p);

    let mut p = Buf::default();
    let h = &s.hparams;
    for v in [h.lr, h.wd, h.bounds.lr_min, h.bounds.lr_max, h.bounds.wd_min, h.bounds.wd_max, h.meta_lr] {
        p.f64(v);
    }
    section(&mut out, b"ETA_", p);

    let mut p = Buf::default();
    let ista = s.arch.ista();
    p.f64(ista.lambda);
    p.u64(ista.max_iters as u64);
    p.f64(ista.tol);
    p.u64(s.arch.num_nodes() as u64);
    for node in s.arch.nodes() {
        p.u64(node.m() as u64);
        p.u64(node.n() as u64);
        p.f64s(node.a.as_slice());
        p.f64s(&node.b);
        p.f64s(&node.alpha);
    }
    section(&mut out, b"ARCH", p);

    let mut p = Buf::default();
    for r in [&s.rngs.gumbel, &s.rngs.aug, &s.rngs.init] {
        rng_bytes(&mut p, r);
    }
    stream_bytes(&mut p, &s.theta_stream);
    stream_bytes(&mut p, &s.eta_stream);
    section(&mut out, b"RNG_", p);

    let mut p = Buf::default();
    match &s.fixed_genotype {
        None => p.u8(0),
        Some(g) => {
            p.u8(1);
            p.u64(g.nodes.len() as u64);
            for e in g.nodes.iter().flatten() {
                p.u64(e.pred as u64);
                p.u8(e.op.index() as u8);
            }
        }
    }
    section(&mut out, b"GENO", p);
    section(&mut out, b"END_", Buf::default());

    let digest = Sha256::digest(&out.0);
    out.0.extend_from_slice(&digest);
    Ok(out.0)
}

/// Splits the container into sections, checking framing and checksum.
fn sections(bytes: &[u8]) -> Result<Vec<([u8; 4], &[u8])>> {
    if bytes.len() < MAGIC.len() {
        return Err(CheckpointError::Truncated(format!("{} bytes", bytes.len())));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 4 {
        return Err(CheckpointError::Truncated("no version field".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut at = 12;
    let mut out = Vec::new();
    loop {
        if bytes.len() < at + 12 {
            return Err(CheckpointError::Truncated(format!("section header at offset {at}")));
        }
        let tag: [u8; 4] = bytes[at..at + 4].try_into().expect("4 bytes");
        let len = u64::from_le_bytes(bytes[at + 4..at + 12].try_into().expect("8 bytes"));
        at += 12;
        let len = usize::try_from(len).unwrap_or(usize::MAX);
        if bytes.len() - at < len {
            return Err(CheckpointError::Truncated(format!(
                "section {} needs {len} bytes, {} left",
                String::from_utf8_lossy(&tag),
                bytes.len() - at
            )));
        }
        out.push((tag, &bytes[at..at + len]));
        at += len;
        if &tag == b"END_" {
            break;
        }
    }
    if bytes.len() < at + CHECKSUM_LEN {
        return Err(CheckpointError::Truncated("missing checksum".into()));
    }
    if bytes.len() > at + CHECKSUM_LEN {
        return Err(CheckpointError::Malformed {
            section: "trailer".into(),
            msg: format!("{} bytes after checksum", bytes.len() - at - CHECKSUM_LEN),
        });
    }
    if Sha256::digest(&bytes[..at]).as_slice() != &bytes[at..] {
        return Err(CheckpointError::Checksum);
    }
    Ok(out)
}

/// Parses a checkpoint; nothing is returned unless every check passes.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let secs = sections(bytes)?;
    let find = |tag: &'static str| -> Result<Reader> {
        secs.iter()
            .find(|(t, _)| t == tag.as_bytes())
            .map(|(_, p)| Reader::new(p, tag))
            .ok_or(CheckpointError::MissingSection(tag))
    };

    let mut r = find("CONF")?;
    let config = parse_config(&r.string()?)?;
    r.finish()?;

    let mut r = find("META")?;
    let (t, phase, phase_t, last_holdout) = (r.u64()?, r.u64()? as usize, r.u64()?, r.f64()?);
    r.finish()?;

    let mut r = find("THET")?;
    let mut params = ParamStore::new();
    for _ in 0..r.len()? {
        let name = r.string()?;
        let ndim = r.len()?;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = r.f64s()?;
        let tensor = Tensor::new(shape, data).map_err(|e| r.malformed(e.to_string()))?;
        params.insert(name, tensor);
    }
    r.finish()?;

    let mut r = find("TAU_")?;
    let catalog = match r.u8()? {
        0 => Catalog::Image,
        1 => Catalog::Vector,
        k => return Err(r.malformed(format!("unknown catalog {k}"))),
    };
    let temperature = r.f64()?;
    let tau = r.f64s()?;
    r.finish()?;
    let policy = DaPolicy::from_logits(catalog, tau, temperature).map_err(|e| CheckpointError::Malformed {
        section: "TAU_".into(),
        msg: e.to_string(),
    })?;

    let mut r = find("ETA_")?;
    let v: Vec<f64> = (0..7).map(|_| r.f64()).collect::<Result<_>>()?;
    r.finish()?;
    let hparams = HyperParams {
        lr: v[0],
        wd: v[1],
        bounds: Bounds {
            lr_min: v[2],
            lr_max: v[3],
            wd_min: v[4],
            wd_max: v[5],
        },
        meta_lr: v[6],
    };

    let mut r = find("ARCH")?;
    let ista = IstaConfig {
        lambda: r.f64()?,
        max_iters: r.u64()? as usize,
        tol: r.f64()?,
    };
    let mut parts = Vec::new();
    for _ in 0..r.len()? {
        let (m, n) = (r.len()?, r.len()?);
        let a = r.f64s()?;
        if a.len() != m * n {
            return Err(r.malformed(format!("matrix of {} entries for {m}x{n}", a.len())));
        }
        parts.push((DMatrix::from_column_slice(m, n, &a), r.f64s()?, r.f64s()?));
    }
    r.finish()?;
    let arch = ArchState::from_parts(parts, ista).map_err(|e| CheckpointError::Malformed {
        section: "ARCH".into(),
        msg: e.to_string(),
    })?;

    let mut r = find("RNG_")?;
    let rngs = RngStreams {
        gumbel: read_rng(&mut r)?,
        aug: read_rng(&mut r)?,
        init: read_rng(&mut r)?,
    };
    let theta_stream = read_stream(&mut r)?;
    let eta_stream = read_stream(&mut r)?;
    r.finish()?;

    let mut r = find("GENO")?;
    let fixed_genotype = match r.u8()? {
        0 => None,
        1 => {
            let nodes = r.len()?;
            let mut g = Genotype { nodes: Vec::with_capacity(nodes) };
            for _ in 0..nodes {
                let mut pair = [Edge {
                    pred: 0,
                    op: CellOp::Identity,
                }; 2];
                for e in &mut pair {
                    e.pred = r.u64()? as usize;
                    let k = r.u8()? as usize;
                    e.op = *CellOp::ALL.get(k).ok_or_else(|| r.malformed(format!("op index {k}")))?;
                }
                g.nodes.push(pair);
            }
            Some(g)
        }
        k => return Err(r.malformed(format!("genotype flag {k}"))),
    };
    r.finish()?;

    let state = TrainState {
        t,
        phase,
        phase_t,
        params,
        policy,
        hparams,
        arch,
        fixed_genotype,
        rngs,
        theta_stream,
        eta_stream,
        last_holdout,
    };
    if !state.all_finite() {
        return Err(CheckpointError::NonFinite);
    }
    Ok(Checkpoint { config, state })
}

pub fn checkpoint_save(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ck)?;
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}
