//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known; a key may appear at most once.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::SyntheticSpec;
use crate::registration::RegistrationInit;
use crate::trainer::{HistogramFeatures, TrainConfig};

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

fn entries(text: &str) -> Result<Vec<Entry<'_>>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected 'key = value'", i + 1)))?;
        let key = key.trim();
        if !seen.insert(key) {
            return Err(Error::config(format!("line {}: duplicate key '{key}'", i + 1)));
        }
        out.push(Entry {
            line: i + 1,
            key,
            value: value.trim(),
        });
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(e: &Entry<'_>) -> Result<T> {
    e.value.parse().map_err(|_| {
        Error::config(format!(
            "line {}: invalid value '{}' for '{}'",
            e.line, e.value, e.key
        ))
    })
}

fn parse_bool(e: &Entry<'_>) -> Result<bool> {
    match e.value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!(
            "line {}: invalid boolean '{}' for '{}'",
            e.line, e.value, e.key
        ))),
    }
}

fn parse_list(e: &Entry<'_>) -> Result<Vec<f64>> {
    e.value
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .map(|s| {
            s.trim().parse::<f64>().map_err(|_| {
                Error::config(format!("line {}: invalid list entry '{}' for '{}'", e.line, s.trim(), e.key))
            })
        })
        .collect()
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses a training config; keys not present keep their defaults.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for e in entries(text)? {
        match e.key {
            "alpha" => cfg.alpha = parse(&e)?,
            "beta" => cfg.beta = parse(&e)?,
            "refinement_rounds" => cfg.refinement_rounds = parse(&e)?,
            "thresholds" => cfg.thresholds = parse_list(&e)?,
            "epochs" => cfg.epochs = parse(&e)?,
            "batch_size" => cfg.batch_size = parse(&e)?,
            "learning_rate" => cfg.learning_rate = parse(&e)?,
            "bins" => cfg.bins = parse(&e)?,
            "seed" => cfg.seed = parse(&e)?,
            "registration_steps" => cfg.registration_steps = parse(&e)?,
            "registration_lr" => cfg.registration_lr = parse(&e)?,
            "registration_tolerance" => cfg.registration_tolerance = parse(&e)?,
            "registration_init" => {
                cfg.registration_init = RegistrationInit::parse(e.value).ok_or_else(|| {
                    Error::config(format!(
                        "line {}: registration_init must be difference, source or midpoint",
                        e.line
                    ))
                })?
            }
            "enable_registration" => cfg.enable_registration = parse_bool(&e)?,
            "enable_histogram" => cfg.enable_histogram = parse_bool(&e)?,
            "enable_pseudo" => cfg.enable_pseudo = parse_bool(&e)?,
            "histogram_features" => {
                cfg.histogram_features = HistogramFeatures::parse(e.value).ok_or_else(|| {
                    Error::config(format!(
                        "line {}: histogram_features must be logits or embedding",
                        e.line
                    ))
                })?
            }
            "record_wall_time" => cfg.record_wall_time = parse_bool(&e)?,
            other => {
                return Err(Error::config(format!("line {}: unknown key '{other}'", e.line)));
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_train_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    parse_train_config(&read(path)?).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Renders a config in the format read by [`parse_train_config`].
pub fn format_train_config(cfg: &TrainConfig) -> String {
    let thresholds: Vec<String> = cfg.thresholds.iter().map(|p| p.to_string()).collect();
    let mut s = String::new();
    let _ = writeln!(s, "alpha = {}", cfg.alpha);
    let _ = writeln!(s, "beta = {}", cfg.beta);
    let _ = writeln!(s, "refinement_rounds = {}", cfg.refinement_rounds);
    let _ = writeln!(s, "thresholds = {}", thresholds.join(", "));
    let _ = writeln!(s, "epochs = {}", cfg.epochs);
    let _ = writeln!(s, "batch_size = {}", cfg.batch_size);
    let _ = writeln!(s, "learning_rate = {}", cfg.learning_rate);
    let _ = writeln!(s, "bins = {}", cfg.bins);
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "registration_steps = {}", cfg.registration_steps);
    let _ = writeln!(s, "registration_lr = {}", cfg.registration_lr);
    let _ = writeln!(s, "registration_tolerance = {}", cfg.registration_tolerance);
    let _ = writeln!(s, "registration_init = {}", cfg.registration_init.name());
    let _ = writeln!(s, "enable_registration = {}", cfg.enable_registration);
    let _ = writeln!(s, "enable_histogram = {}", cfg.enable_histogram);
    let _ = writeln!(s, "enable_pseudo = {}", cfg.enable_pseudo);
    let _ = writeln!(s, "histogram_features = {}", cfg.histogram_features.name());
    let _ = writeln!(s, "record_wall_time = {}", cfg.record_wall_time);
    s
}

/// Parses a synthetic benchmark spec; keys not present keep their defaults.
pub fn parse_synthetic_spec(text: &str) -> Result<SyntheticSpec> {
    let mut spec = SyntheticSpec::default();
    for e in entries(text)? {
        match e.key {
            "classes" => spec.classes = parse(&e)?,
            "dim" => spec.dim = parse(&e)?,
            "samples_per_class" => spec.samples_per_class = parse(&e)?,
            "separation" => spec.separation = parse(&e)?,
            "covariance_scale" => spec.covariance_scale = parse(&e)?,
            "shift_translation" => spec.shift_translation = parse(&e)?,
            "shift_rotation" => spec.shift_rotation = parse(&e)?,
            "shift_scale" => spec.shift_scale = parse(&e)?,
            "label_noise" => spec.label_noise = parse(&e)?,
            "seed" => spec.seed = parse(&e)?,
            other => {
                return Err(Error::config(format!("line {}: unknown key '{other}'", e.line)));
            }
        }
    }
    spec.validate()?;
    Ok(spec)
}

pub fn load_synthetic_spec(path: impl AsRef<Path>) -> Result<SyntheticSpec> {
    parse_synthetic_spec(&read(path.as_ref())?)
}
