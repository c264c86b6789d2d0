//! Plain-text `key = value` configuration.
//!
//! ```text
//! # defaults
//! backend = mock
//! zeta = 0.4
//! bilateral = 2,20
//! detector.teed = python3 teed.py {input} {output} {alpha}
//! saliency.u2net = ./u2net-cli {input} {output}
//! output_dir = results
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::contour::{CommandDetector, DetectorRegistry};
use crate::pipeline::JobParams;
use crate::rcd::BilateralParams;
use crate::scene::{CommandSaliency, SaliencyRegistry};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {message}")]
    Value { line: usize, key: String, message: String },
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("adapter registration: {0}")]
    Register(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    /// Values applied on top of [`JobParams::default`].
    pub overrides: BTreeMap<String, String>,
    pub detectors: BTreeMap<String, String>,
    pub saliency: BTreeMap<String, String>,
    pub output_dir: Option<PathBuf>,
    pub bw_finetune: Option<String>,
}

const PARAM_KEYS: &[&str] = &[
    "backend",
    "zeta",
    "beta",
    "alpha",
    "method",
    "steps",
    "guidance_scale",
    "resolution",
    "seed",
    "target_sites",
    "binarize_threshold",
    "bilateral",
    "contrast",
    "rcd",
    "strict",
    "initial_contour",
    "msa",
    "dct",
];

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let (key, value) = s.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim().to_string());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            if let Some(name) = key.strip_prefix("detector.") {
                cfg.detectors.insert(name.to_string(), value);
            } else if let Some(name) = key.strip_prefix("saliency.") {
                cfg.saliency.insert(name.to_string(), value);
            } else if key == "output_dir" {
                cfg.output_dir = Some(PathBuf::from(value));
            } else if key == "bw_finetune" {
                cfg.bw_finetune = Some(value);
            } else if PARAM_KEYS.contains(&key) {
                let mut probe = JobParams::default();
                apply_param(&mut probe, key, &value).map_err(|message| ConfigError::Value {
                    line,
                    key: key.into(),
                    message,
                })?;
                cfg.overrides.insert(key.to_string(), value);
            } else {
                return Err(ConfigError::UnknownKey { line, key: key.into() });
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn apply(&self, params: &mut JobParams) {
        for (k, v) in &self.overrides {
            apply_param(params, k, v).expect("validated at parse time");
        }
    }

    /// Registers the configured command adapters next to the built-ins.
    pub fn registries(&self) -> Result<(DetectorRegistry, SaliencyRegistry), ConfigError> {
        let mut detectors = DetectorRegistry::default();
        for (name, cmd) in &self.detectors {
            let det = CommandDetector::from_command_line(cmd)
                .ok_or_else(|| ConfigError::Register(format!("detector `{name}` has an empty command")))?;
            detectors
                .register_detector(name, Arc::new(det))
                .map_err(|e| ConfigError::Register(e.to_string()))?;
        }
        let mut saliency = SaliencyRegistry::default();
        for (name, cmd) in &self.saliency {
            let mut parts = cmd.split_whitespace();
            let program = parts
                .next()
                .ok_or_else(|| ConfigError::Register(format!("saliency `{name}` has an empty command")))?;
            saliency
                .register(
                    name,
                    Arc::new(CommandSaliency {
                        program: program.into(),
                        args: parts.map(str::to_string).collect(),
                    }),
                )
                .map_err(|e| ConfigError::Register(e.to_string()))?;
        }
        Ok((detectors, saliency))
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "on" | "yes" => Ok(true),
        "0" | "false" | "off" | "no" => Ok(false),
        _ => Err(format!("expected on/off, got `{v}`")),
    }
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

/// `off` or `spatial,range`.
pub fn parse_bilateral(v: &str) -> Result<BilateralParams, String> {
    if v.eq_ignore_ascii_case("off") {
        return Ok(BilateralParams {
            enabled: false,
            ..BilateralParams::default()
        });
    }
    let (s, r) = v.split_once(',').ok_or_else(|| format!("expected `off` or `spatial,range`, got `{v}`"))?;
    let (s, r): (f64, f64) = (num(s.trim())?, num(r.trim())?);
    if !(s > 0.0 && r > 0.0) {
        return Err("bilateral sigmas must be positive".into());
    }
    Ok(BilateralParams {
        enabled: true,
        spatial_sigma: s,
        range_sigma: r,
    })
}

/// Sets one named parameter from its text form.
pub fn apply_param(p: &mut JobParams, key: &str, v: &str) -> Result<(), String> {
    match key {
        "backend" => p.backend = v.to_string(),
        "zeta" => p.mix.zeta = num(v)?,
        "beta" => p.mix.beta = num(v)?,
        "alpha" => p.contour.alpha = num(v)?,
        "method" => p.contour.method = v.to_string(),
        "steps" => p.steps = num(v)?,
        "guidance_scale" => p.guidance_scale = num(v)?,
        "resolution" => p.resolution = num(v)?,
        "seed" => p.seed = num(v)?,
        "target_sites" => {
            p.mix.target_sites = v
                .split(',')
                .map(|s| num::<usize>(s.trim()))
                .collect::<Result<_, _>>()?
        }
        "binarize_threshold" => {
            let t: u8 = num(v)?;
            if !(1..=254).contains(&t) {
                return Err("threshold must be in [1,254]".into());
            }
            p.rcd.binarize_threshold = t;
        }
        "bilateral" => p.rcd.bilateral = parse_bilateral(v)?,
        "contrast" => {
            if let Ok(on) = parse_bool(v) {
                p.rcd.contrast.enabled = on;
            } else {
                p.rcd.contrast.enabled = true;
                p.rcd.contrast.strength = num(v)?;
            }
        }
        "rcd" => p.rcd.enabled = parse_bool(v)?,
        "strict" => p.strict = parse_bool(v)?,
        "initial_contour" => p.ablation.initial_contour = parse_bool(v)?,
        "msa" => p.ablation.msa = parse_bool(v)?,
        "dct" => p.ablation.dct = parse_bool(v)?,
        _ => return Err(format!("unknown parameter `{key}`")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_apply() {
        let cfg = Config::parse(
            "# c\nzeta = 0.7\nbilateral = off\ntarget_sites = 9, 10\ndetector.teed = /bin/true {input}\noutput_dir = out\n",
        )
        .unwrap();
        let mut p = JobParams::default();
        cfg.apply(&mut p);
        assert_eq!(p.mix.zeta, 0.7);
        assert!(!p.rcd.bilateral.enabled);
        assert_eq!(p.mix.target_sites.iter().copied().collect::<Vec<_>>(), vec![9, 10]);
        assert_eq!(cfg.output_dir, Some(PathBuf::from("out")));
        let (det, _) = cfg.registries().unwrap();
        assert!(det.contains("teed") && det.contains("canny"));
    }

    #[test]
    fn errors_carry_line() {
        assert!(matches!(Config::parse("zeta 0.4"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(Config::parse("\nfoo = 1"), Err(ConfigError::UnknownKey { line: 2, .. })));
        assert!(matches!(Config::parse("zeta = x"), Err(ConfigError::Value { line: 1, .. })));
        assert!(matches!(Config::parse("binarize_threshold = 255"), Err(ConfigError::Value { .. })));
    }

    #[test]
    fn bilateral_forms() {
        assert_eq!(parse_bilateral("3, 25").unwrap().spatial_sigma, 3.0);
        assert!(parse_bilateral("3").is_err());
        assert!(parse_bilateral("-1,2").is_err());
    }
}
