//! Run configuration: flat, namespaced `key=value` settings.
//!
//! Files hold one `key=value` per line; `#` starts a comment. Command-line
//! overrides use the same syntax and are applied after the file. Unknown
//! keys are rejected by name.

use std::fmt::Write as _;
use std::path::Path;

use cstn_core::model::CstnConfig;
use cstn_core::smwi::SmwiParams;
use cstn_core::train::TrainConfig;
use cstn_core::Error as CoreError;

use crate::error::{self, Error, Result};

/// The two truncation sizes evaluated for 384×384 acquisitions.
pub const PROTOCOLS: [usize; 2] = [192, 256];

/// Keys whose defaults are taken from the published method; every other
/// default is a local choice.
pub const PUBLISHED_KEYS: [&str; 5] = [
    "model.num_rstb",
    "model.in_echoes",
    "model.target_height",
    "model.target_width",
    "eval.protocol",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// k-space side kept by truncation.
    pub protocol: usize,
    pub test_phantoms: usize,
    /// Base seed for generated held-out phantoms.
    pub seed: u64,
    pub phantom_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: 256,
            test_phantoms: 16,
            seed: 1,
            phantom_size: 384,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !PROTOCOLS.contains(&self.protocol) {
            return Err(bad("eval.protocol", &self.protocol.to_string()));
        }
        if self.test_phantoms == 0 {
            return Err(bad("eval.test_phantoms", "0"));
        }
        if self.phantom_size < self.protocol {
            return Err(bad("eval.phantom_size", &self.phantom_size.to_string()));
        }
        Ok(())
    }
}

fn bad(key: &str, value: &str) -> Error {
    CoreError::BadValue {
        key: key.into(),
        value: value.into(),
    }
    .into()
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| bad(key, value))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunConfig {
    pub model: CstnConfig,
    pub train: TrainConfig,
    pub smwi: SmwiParams,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key.split_once('.').map(|(ns, _)| ns) {
            Some("model") => self.model.set(key, value)?,
            Some("train") => self.train.set(key, value)?,
            Some("smwi") => match key {
                "smwi.kernel" => self.smwi.highpass_kernel = parse(key, value)?,
                "smwi.cutoff" => self.smwi.phase_cutoff = parse(key, value)?,
                "smwi.power" => self.smwi.mask_power = parse(key, value)?,
                "smwi.combine" => self.smwi.echo_combine = value.parse()?,
                "smwi.negative_phase" => self.smwi.negative_phase = parse(key, value)?,
                _ => return Err(CoreError::UnknownKey(key.into()).into()),
            },
            Some("eval") => match key {
                "eval.protocol" => self.eval.protocol = parse(key, value)?,
                "eval.test_phantoms" => self.eval.test_phantoms = parse(key, value)?,
                "eval.seed" => self.eval.seed = parse(key, value)?,
                "eval.phantom_size" => self.eval.phantom_size = parse(key, value)?,
                _ => return Err(CoreError::UnknownKey(key.into()).into()),
            },
            _ => return Err(CoreError::UnknownKey(key.into()).into()),
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn assign(&mut self, line: &str) -> Result<()> {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("expected key=value, got {line:?}")))?;
        self.set(k, v.trim())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                self.assign(line)?;
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Reads `path` (if given) on top of the defaults, then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut c = Self::default();
        if let Some(p) = path {
            let text = String::from_utf8(error::read(p)?).map_err(|_| Error::format(p, "not UTF-8"))?;
            c.apply_text(&text)?;
        }
        for o in overrides {
            c.assign(o)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.smwi.validate()?;
        self.eval.validate()
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = self.model.entries();
        out.extend(self.train.entries());
        let s = &self.smwi;
        out.extend([
            ("smwi.kernel", s.highpass_kernel.to_string()),
            ("smwi.cutoff", s.phase_cutoff.to_string()),
            ("smwi.power", s.mask_power.to_string()),
            ("smwi.combine", s.echo_combine.to_string()),
            ("smwi.negative_phase", s.negative_phase.to_string()),
        ]);
        let e = &self.eval;
        out.extend([
            ("eval.protocol", e.protocol.to_string()),
            ("eval.test_phantoms", e.test_phantoms.to_string()),
            ("eval.seed", e.seed.to_string()),
            ("eval.phantom_size", e.phantom_size.to_string()),
        ]);
        out
    }

    /// Every effective setting, with non-published defaults flagged.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            if PUBLISHED_KEYS.contains(&k) {
                writeln!(s, "{k}={v}").unwrap();
            } else {
                writeln!(s, "{k}={v}  # not from paper").unwrap();
            }
        }
        s
    }
}

/// Thread cap from `CSTN_THREADS`, else the hardware count.
pub fn thread_count() -> usize {
    std::env::var("CSTN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}
