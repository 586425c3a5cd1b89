//! `.cstck` network checkpoints.
//!
//! ```text
//! "CSTK" | version: u16 LE
//! config: u32 LE byte length | UTF-8 `key=value` lines (model.* keys)
//! count: u32 LE | count × (name: u32 LE length + UTF-8 | .cst tensor)
//! ```
//!
//! Tensors are written in the network's fixed parameter order, so saving a
//! loaded checkpoint reproduces the file byte for byte.

use std::path::Path;

use cstn_core::model::{CstnConfig, CstnWeights, CONFIG_KEYS};

use crate::cst;
use crate::error::{self, Error, Result};

pub const MAGIC: &[u8; 4] = b"CSTK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: CstnConfig,
    pub weights: CstnWeights,
}

fn config_text(cfg: &CstnConfig) -> String {
    cfg.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn encode(cfg: &CstnConfig, weights: &CstnWeights) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config_text(cfg);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let named = weights.named_tensors();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in &named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        cst::encode_into(t, &mut out);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], String> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| format!("truncated {what} at byte {}", self.pos))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn utf8(&mut self, what: &str) -> Result<&'a str, String> {
        let n = self.u32(what)?;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| format!("{what} is not UTF-8"))
    }
}

fn parse_config(text: &str) -> Result<CstnConfig> {
    let mut cfg = CstnConfig::default();
    let mut seen = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| cstn_core::Error::BadValue {
                key: "checkpoint config".into(),
                value: line.into(),
            })?;
        cfg.set(k.trim(), v)?;
        seen.push(k.trim().to_string());
    }
    if let Some(missing) = CONFIG_KEYS.iter().find(|k| !seen.iter().any(|s| s == *k)) {
        return Err(cstn_core::Error::MissingTensor(format!("config key {missing}")).into());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fmt = |r: String| Error::format(path, r);
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(4, "magic").map_err(fmt)? != MAGIC {
        return Err(fmt("not a CSTK checkpoint".into()));
    }
    let version = u16::from_le_bytes(rd.take(2, "version").map_err(fmt)?.try_into().unwrap());
    if version != VERSION {
        return Err(fmt(format!("unsupported checkpoint version {version}")));
    }
    let config = parse_config(rd.utf8("config").map_err(fmt)?)?;
    let count = rd.u32("tensor count").map_err(fmt)?;
    let mut named = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = rd.utf8("tensor name").map_err(fmt)?.to_string();
        let (t, used) = cst::decode_prefix(&bytes[rd.pos..]).map_err(|r| fmt(format!("tensor {name}: {r}")))?;
        rd.pos += used;
        named.push((name, t));
    }
    if rd.pos != bytes.len() {
        return Err(fmt(format!("{} trailing bytes", bytes.len() - rd.pos)));
    }
    let weights = CstnWeights::from_named(&config, named)?;
    Ok(Checkpoint { config, weights })
}

pub fn save(path: &Path, cfg: &CstnConfig, weights: &CstnWeights) -> Result<()> {
    error::write(path, &encode(cfg, weights))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&error::read(path)?, path)
}

/// Loads a checkpoint and checks it against an expected configuration.
pub fn load_matching(path: &Path, expected: &CstnConfig) -> Result<Checkpoint> {
    let ck = load(path)?;
    expected.ensure_matches(&ck.config)?;
    Ok(ck)
}
