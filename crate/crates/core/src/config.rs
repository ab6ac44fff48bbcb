//! Run configuration: a preset overlaid with flat `section.key = value`
//! entries. Every key must name an existing field; anything else is
//! rejected before work starts.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{invalid, Error, Result};
use crate::pretrain::TrainConfig;
use crate::probe::ProbeConfig;
use crate::signal::{Band, ClassSpec, SynthSpec};
use crate::ssm::{BenchConfig, SsmConfig};
use crate::tokenizer::TokenizerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            _ => invalid(format!("unknown preset {s:?} (expected desk or paper)")),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::Paper => "paper",
        })
    }
}

/// Where stage-2 targets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Targets {
    /// Tokens of a trained stage-1 tokenizer.
    Tokenizer,
    /// Dominant-bin tokens computed from the signal; no stage 1 needed.
    Planted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out: PathBuf,
    /// Periodic checkpoint interval in steps; `None` keeps only the final
    /// and last-good checkpoints.
    pub checkpoint_every: Option<usize>,
    pub data: SynthSpec,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Record directory for training commands; defaults to `<out>/data`.
    pub data_dir: Option<PathBuf>,
    pub tokenizer: TokenizerConfig,
    pub stage1: TrainConfig,
    pub ssm: SsmConfig,
    pub stage2: TrainConfig,
    pub targets: Targets,
    pub probe: ProbeConfig,
    pub probe_seeds: usize,
    pub bench: BenchConfig,
    /// Dominance threshold for the class-specific token ratio.
    pub tau: f64,
    /// Stage-1 checkpoint; defaults to `<out>/tokenizer/final`.
    pub tokenizer_path: Option<PathBuf>,
    /// Stage-2 checkpoint; defaults to `<out>/ssm/final`.
    pub backbone_path: Option<PathBuf>,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (data, tokenizer, stage1, ssm, stage2, probe) = match preset {
            Preset::Desk => (
                SynthSpec::desk(),
                TokenizerConfig::desk(),
                TrainConfig::tokenizer_desk(),
                SsmConfig::desk(),
                TrainConfig::ssm_desk(),
                ProbeConfig::desk(),
            ),
            Preset::Paper => (
                SynthSpec::paper(),
                TokenizerConfig::paper(),
                TrainConfig::tokenizer_paper(),
                SsmConfig::paper(),
                TrainConfig::ssm_paper(),
                ProbeConfig::paper(),
            ),
        };
        Self {
            preset,
            seed: 0,
            out: PathBuf::from("runs"),
            checkpoint_every: None,
            data,
            val_fraction: 0.2,
            test_fraction: 0.2,
            data_dir: None,
            tokenizer,
            stage1,
            ssm,
            stage2,
            targets: Targets::Tokenizer,
            probe,
            probe_seeds: 5,
            bench: BenchConfig::desk(),
            tau: 1.0,
            tokenizer_path: None,
            backbone_path: None,
        }
    }

    /// Applies `entries` in order (later entries win) on top of `preset`.
    /// Section seeds that are not set explicitly follow `run.seed`.
    pub fn resolve(preset: Preset, entries: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::preset(preset);
        let mut sections: [(&str, Vec<(&str, &str)>); 6] = [
            ("tokenizer", vec![]),
            ("stage1", vec![]),
            ("ssm", vec![]),
            ("stage2", vec![]),
            ("probe", vec![]),
            ("bench", vec![]),
        ];
        let mut data_fields = Vec::new();
        let mut explicit = BTreeSet::new();
        let mut class_count = None;
        let mut class_bands: Vec<(usize, Vec<Band>)> = Vec::new();
        for (key, raw) in entries {
            let (section, name) = key
                .split_once('.')
                .ok_or_else(|| Error::InvalidArgument(format!("key {key:?} has no section prefix")))?;
            explicit.insert(key.as_str());
            let raw = raw.as_str();
            match (section, name) {
                ("run", "seed") => cfg.seed = parse_num(key, raw)?,
                ("run", "out") => cfg.out = parse_path(key, raw)?,
                ("run", "checkpoint_every") => cfg.checkpoint_every = parse_opt(key, raw)?,
                ("data", "classes") => class_count = Some(parse_num::<usize>(key, raw)?),
                ("data", "val_fraction") => cfg.val_fraction = parse_num(key, raw)?,
                ("data", "test_fraction") => cfg.test_fraction = parse_num(key, raw)?,
                ("data", "dir") => cfg.data_dir = Some(parse_path(key, raw)?),
                ("data", n) if n.starts_with("class") && n[5..].parse::<usize>().is_ok() => {
                    class_bands.push((n[5..].parse().expect("checked"), parse_bands(key, raw)?));
                }
                ("data", _) => data_fields.push((name, raw)),
                ("stage2", "targets") => {
                    cfg.targets = match raw {
                        "tokenizer" => Targets::Tokenizer,
                        "planted" => Targets::Planted,
                        _ => return invalid(format!("{key}: expected tokenizer or planted, got {raw:?}")),
                    }
                }
                ("probe", "seeds") => cfg.probe_seeds = parse_num(key, raw)?,
                ("analyze", "tau") => cfg.tau = parse_num(key, raw)?,
                ("paths", "tokenizer") => cfg.tokenizer_path = Some(parse_path(key, raw)?),
                ("paths", "backbone") => cfg.backbone_path = Some(parse_path(key, raw)?),
                _ => match sections.iter_mut().find(|(s, _)| *s == section) {
                    Some((_, list)) => list.push((name, raw)),
                    None => return invalid(format!("unknown key {key:?}")),
                },
            }
        }
        cfg.data = overlay(&cfg.data, "data", &data_fields)?;
        if let Some(k) = class_count {
            if k != cfg.data.classes.len() {
                cfg.data.classes = banded_classes(k, cfg.data.sample_rate)?;
            }
        }
        for (i, bands) in class_bands {
            let n = cfg.data.classes.len();
            let class = cfg
                .data
                .classes
                .get_mut(i)
                .ok_or_else(|| Error::InvalidArgument(format!("data.class{i}: only {n} classes configured")))?;
            class.bands = bands;
        }
        let [tok, s1, ssm, s2, probe, bench] = &sections;
        cfg.tokenizer = overlay(&cfg.tokenizer, tok.0, &tok.1)?;
        cfg.stage1 = overlay(&cfg.stage1, s1.0, &s1.1)?;
        cfg.ssm = overlay(&cfg.ssm, ssm.0, &ssm.1)?;
        cfg.stage2 = overlay(&cfg.stage2, s2.0, &s2.1)?;
        cfg.probe = overlay(&cfg.probe, probe.0, &probe.1)?;
        cfg.bench = overlay(&cfg.bench, bench.0, &bench.1)?;
        if !explicit.contains("stage1.seed") {
            cfg.stage1.seed = cfg.seed;
        }
        if !explicit.contains("stage2.seed") {
            cfg.stage2.seed = cfg.seed;
        }
        if !explicit.contains("probe.seed") {
            cfg.probe.seed = cfg.seed;
        }
        if !explicit.contains("bench.seed") {
            cfg.bench.seed = cfg.seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.tokenizer.validate()?;
        self.stage1.validate()?;
        self.ssm.validate()?;
        self.stage2.validate()?;
        self.probe.validate()?;
        if self.data.records == 0 {
            return invalid("data.records must be positive");
        }
        let (v, t) = (self.val_fraction, self.test_fraction);
        if !(v > 0.0 && t > 0.0 && v + t < 1.0) {
            return invalid(format!("split fractions val {v} and test {t} must be positive and leave training records"));
        }
        if self.probe_seeds == 0 {
            return invalid("probe.seeds must be positive");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return invalid(format!("analyze.tau {} outside (0, 1]", self.tau));
        }
        if self.bench.seq_lens.is_empty() || self.bench.repeats == 0 {
            return invalid("bench needs at least one sequence length and one repeat");
        }
        if self.tokenizer.patch_len != self.ssm.patch_len {
            return invalid("tokenizer.patch_len and ssm.patch_len differ");
        }
        if self.targets == Targets::Tokenizer && self.tokenizer.codebook_size != self.ssm.codebook_size {
            return invalid("ssm.codebook_size must match tokenizer.codebook_size");
        }
        if self.out.as_os_str().is_empty() {
            return invalid("run.out is empty");
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn tokenizer_path(&self) -> PathBuf {
        self.tokenizer_path.clone().unwrap_or_else(|| self.out.join("tokenizer").join("final"))
    }

    pub fn backbone_path(&self) -> PathBuf {
        self.backbone_path.clone().unwrap_or_else(|| self.out.join("ssm").join("final"))
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("run config encodes")
    }
}

/// Parses `key = value` lines. Blank lines and lines starting with `#`
/// are skipped; a key may appear once.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key = value", no + 1)))?;
        let key = k.trim();
        let valid = key.contains('.')
            && !key.starts_with('.')
            && !key.ends_with('.')
            && key.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.');
        if !valid {
            return invalid(format!("line {}: malformed key {key:?}", no + 1));
        }
        if out.iter().any(|(k, _)| k == key) {
            return invalid(format!("line {}: duplicate key {key:?}", no + 1));
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits `key=value` from a command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let mut e = parse_entries(s)?;
    match e.pop() {
        Some(kv) if e.is_empty() => Ok(kv),
        _ => invalid(format!("override {s:?} is not key=value")),
    }
}

/// `k` classes with one strong and one weak band each, spread evenly
/// below 48 Hz (or just under Nyquist for low sample rates).
pub fn banded_classes(k: usize, sample_rate: u32) -> Result<Vec<ClassSpec>> {
    if k < 2 {
        return invalid(format!("data.classes = {k}; need at least two"));
    }
    let top = (sample_rate as f64 / 2.0 - 2.0).min(48.0);
    let w = (top - 1.0) / k as f64;
    Ok((0..k)
        .map(|i| {
            let lo = 1.0 + i as f64 * w;
            ClassSpec {
                name: format!("class{i}"),
                bands: vec![
                    Band { lo_hz: lo, hi_hz: lo + 0.55 * w, amplitude_uv: 30.0 },
                    Band { lo_hz: lo + 0.6 * w, hi_hz: lo + 0.95 * w, amplitude_uv: 12.0 },
                ],
            }
        })
        .collect())
}

/// `lo-hi:amplitude` items separated by commas.
fn parse_bands(key: &str, raw: &str) -> Result<Vec<Band>> {
    let bad = || Error::InvalidArgument(format!("{key}: expected lo-hi:amplitude[,...], got {raw:?}"));
    raw.split(',')
        .map(|item| {
            let (range, amp) = item.trim().split_once(':').ok_or_else(bad)?;
            let (lo, hi) = range.split_once('-').ok_or_else(bad)?;
            let num = |s: &str| s.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(bad);
            Ok(Band { lo_hz: num(lo)?, hi_hz: num(hi)?, amplitude_uv: num(amp)? })
        })
        .collect()
}

fn parse_num<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse {raw:?}")))
}

fn parse_opt<T: FromStr>(key: &str, raw: &str) -> Result<Option<T>> {
    if raw == "none" {
        Ok(None)
    } else {
        parse_num(key, raw).map(Some)
    }
}

fn parse_path(key: &str, raw: &str) -> Result<PathBuf> {
    if raw.is_empty() {
        return invalid(format!("{key} is empty"));
    }
    Ok(PathBuf::from(raw))
}

fn scalar(key: &str, raw: &str) -> Result<Value> {
    if let Ok(u) = raw.parse::<u64>() {
        return Ok(Value::from(u));
    }
    match raw.parse::<f64>() {
        Ok(f) if f.is_finite() => Ok(Value::from(f)),
        _ => invalid(format!("{key}: expected a number, got {raw:?}")),
    }
}

/// Converts `raw` to the JSON kind of the field it replaces.
fn convert(key: &str, current: &Value, raw: &str) -> Result<Value> {
    if raw == "none" {
        return Ok(Value::Null);
    }
    match current {
        Value::Bool(_) => raw
            .parse::<bool>()
            .map(Value::Bool)
            .map_err(|_| Error::InvalidArgument(format!("{key}: expected true or false, got {raw:?}"))),
        Value::Number(n) if n.is_f64() => match raw.parse::<f64>() {
            Ok(f) if f.is_finite() => Ok(Value::from(f)),
            _ => invalid(format!("{key}: expected a number, got {raw:?}")),
        },
        Value::Number(_) | Value::Null => scalar(key, raw),
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Array(_) => raw.split(',').map(|s| scalar(key, s.trim())).collect::<Result<Vec<_>>>().map(Value::Array),
        Value::Object(_) => invalid(format!("{key} is not a scalar setting")),
    }
}

fn overlay<T: Serialize + DeserializeOwned>(base: &T, section: &str, entries: &[(&str, &str)]) -> Result<T> {
    if entries.is_empty() {
        return Ok(serde_json::from_value(serde_json::to_value(base)?)?);
    }
    let mut v = serde_json::to_value(base)?;
    let obj = v.as_object_mut().expect("config sections are structs");
    for (name, raw) in entries {
        let key = format!("{section}.{name}");
        let slot = obj.get_mut(*name).ok_or_else(|| Error::InvalidArgument(format!("unknown key {key:?}")))?;
        *slot = convert(&key, slot, raw)?;
    }
    serde_json::from_value(v).map_err(|e| Error::InvalidArgument(format!("section {section}: {e}")))
}
