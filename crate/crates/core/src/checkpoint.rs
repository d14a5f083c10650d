//! Binary checkpoint format.
//!
//! ```text
//! "POFM"  u32 version  u32 section-count
//! repeated: u32 name-len, name, u64 payload-len, payload
//! 32-byte SHA-256 of everything above
//! ```
//!
//! All integers and floats are little-endian; floats are IEEE-754 `f64`.
//! Sections, in order: `config` (JSON), `step`, `rng`, `params`, `adamw`.

use std::path::Path;

use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, AdamWState};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::Rng;

pub const MAGIC: &[u8; 4] = b"POFM";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Exact position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
    pub optimizer: AdamWState,
    pub rng: RngState,
    pub step: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated {} data", self.what)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("invalid UTF-8 in {}", self.what)))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Checkpoint("tensor shape overflows".into()))?;
        if numel.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(Error::Checkpoint(format!("truncated {} data", self.what)));
        }
        let data = (0..numel).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint(format!("trailing bytes in {}", self.what)));
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sections: Vec<(&str, Vec<u8>)> = Vec::new();
        sections.push(("config", serde_json::to_vec(&self.config).expect("config serializes")));

        let mut w = Writer(Vec::new());
        w.u64(self.step);
        sections.push(("step", w.0));

        let mut w = Writer(Vec::new());
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.bytes(&self.rng.word_pos.to_le_bytes());
        sections.push(("rng", w.0));

        let mut w = Writer(Vec::new());
        w.u32(self.params.len() as u32);
        for (name, t) in self.params.iter() {
            w.str(name);
            w.tensor(t);
        }
        sections.push(("params", w.0));

        let mut w = Writer(Vec::new());
        let o = &self.optimizer;
        w.f64(o.config.beta1);
        w.f64(o.config.beta2);
        w.f64(o.config.eps);
        w.f64(o.config.weight_decay);
        w.u64(o.step);
        w.u32(o.first_moment.len() as u32);
        for (m, v) in o.first_moment.iter().zip(&o.second_moment) {
            w.tensor(m);
            w.tensor(v);
        }
        sections.push(("adamw", w.0));

        let mut w = Writer(Vec::new());
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(sections.len() as u32);
        for (name, payload) in &sections {
            w.str(name);
            w.u64(payload.len() as u64);
            w.bytes(payload);
        }
        let digest = Sha256::digest(&w.0);
        w.bytes(&digest);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let count = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let name = r.str()?;
            let len = r.u64()? as usize;
            sections.push((name, r.take(len)?));
        }
        let body_len = r.pos;
        let digest = r.take(DIGEST_LEN)?;
        r.finish()?;
        if Sha256::digest(&bytes[..body_len]).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }

        let section = |name: &str| {
            sections
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, p)| *p)
                .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
        };

        let config: RunConfig = serde_json::from_slice(section("config")?)
            .map_err(|e| Error::Checkpoint(format!("bad config section: {e}")))?;

        let mut r = Reader::new(section("step")?, "step");
        let step = r.u64()?;
        r.finish()?;

        let mut r = Reader::new(section("rng")?, "rng");
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let rng = RngState {
            seed,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        r.finish()?;

        let mut r = Reader::new(section("params")?, "params");
        let n = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.str()?;
            params.add(name, r.tensor()?);
        }
        r.finish()?;

        let mut r = Reader::new(section("adamw")?, "adamw");
        let config_o = AdamWConfig {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
            weight_decay: r.f64()?,
        };
        let opt_step = r.u64()?;
        let n = r.u32()? as usize;
        if n != params.len() {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        let mut first_moment = Vec::with_capacity(n);
        let mut second_moment = Vec::with_capacity(n);
        for (_, p) in params.iter() {
            let (m, v) = (r.tensor()?, r.tensor()?);
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::Checkpoint("moment shape does not match parameter".into()));
            }
            first_moment.push(m);
            second_moment.push(v);
        }
        r.finish()?;

        Ok(Self {
            config,
            params,
            optimizer: AdamWState {
                config: config_o,
                step: opt_step,
                first_moment,
                second_moment,
            },
            rng,
            step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
