//! Flat `key = value` configuration text: one assignment per line, `#`
//! comments, duplicate keys rejected with their line number. [`ConfigMap`]
//! is just the parsed key-value view; binding onto [`DepConfig`] lives in
//! [`update_dep_config`], which tolerates and reports keys it does not own
//! so callers can layer their own settings on the same file.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::engine::{DepConfig, ScheduleMode};
use crate::error::{DepError, Result};
use crate::probe::StrategyKind;

/// Parsed configuration text. Keys are unique; iteration is sorted, and
/// [`ConfigMap::to_text`] emits a canonical form that reparses to the same
/// map.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn new() -> Self {
        ConfigMap::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (ix, raw) in text.lines().enumerate() {
            let line = ix + 1;
            let content = match raw.split_once('#') {
                Some((before, _)) => before,
                None => raw,
            }
            .trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| {
                DepError::Config(format!("line {line}: expected `key = value`, got {raw:?}"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(DepError::Config(format!(
                    "line {line}: malformed key {key:?}"
                )));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(DepError::Config(format!(
                    "line {line}: duplicate key {key:?}"
                )));
            }
        }
        Ok(ConfigMap { entries })
    }

    /// Inserts or overwrites; later layers win by calling this on top of a
    /// parsed base.
    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.trim().into(), value.trim().into());
    }

    /// Applies one `KEY=VALUE` assignment, as passed on a command line.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            DepError::Config(format!("expected KEY=VALUE, got {assignment:?}"))
        })?;
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(DepError::Config(format!("malformed key {key:?}")));
        }
        self.set(key, value);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Canonical rendering: sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, value) in &self.entries {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, kind: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| DepError::Config(format!("{key}: {value:?} is not {kind}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(DepError::Config(format!(
            "{key}: {value:?} is not `true` or `false`"
        ))),
    }
}

fn mode_name(mode: ScheduleMode) -> &'static str {
    match mode {
        ScheduleMode::AdaptiveNeff => "adaptive_neff",
        ScheduleMode::FixedP => "fixed_p",
    }
}

fn parse_mode(value: &str) -> Result<ScheduleMode> {
    match value {
        "adaptive_neff" => Ok(ScheduleMode::AdaptiveNeff),
        "fixed_p" => Ok(ScheduleMode::FixedP),
        _ => Err(DepError::Config(format!(
            "mode: {value:?} is not `adaptive_neff` or `fixed_p`"
        ))),
    }
}

fn strategy_name(kind: StrategyKind) -> &'static str {
    match kind {
        StrategyKind::AttributeWeaken => "attribute_weaken",
        StrategyKind::HighFreqReplace => "high_freq_replace",
        StrategyKind::CooccurAdversarial => "cooccur_adversarial",
        StrategyKind::Identity => "identity",
    }
}

fn parse_strategy(value: &str) -> Result<StrategyKind> {
    match value {
        "attribute_weaken" => Ok(StrategyKind::AttributeWeaken),
        "high_freq_replace" => Ok(StrategyKind::HighFreqReplace),
        "cooccur_adversarial" => Ok(StrategyKind::CooccurAdversarial),
        "identity" => Ok(StrategyKind::Identity),
        _ => Err(DepError::Config(format!(
            "fixed_alt: {value:?} is not a strategy name"
        ))),
    }
}

/// Renders every decoder key. The output reparses into an equal config.
pub fn dep_config_to_map(cfg: &DepConfig) -> ConfigMap {
    let mut map = ConfigMap::new();
    map.set("m", &cfg.m.to_string());
    map.set("delta", &cfg.delta.to_string());
    map.set("mode", mode_name(cfg.mode));
    map.set("fixed_p", &cfg.fixed_p.to_string());
    map.set("fixed_alt", strategy_name(cfg.fixed_alt));
    map.set("enable_ve", &cfg.enable_ve.to_string());
    map.set("alpha", &cfg.alpha.to_string());
    map.set("gamma", &cfg.gamma.to_string());
    map.set("conf_evidence", &cfg.conf_evidence.to_string());
    map.set("conf_attention", &cfg.conf_attention.to_string());
    map.set("conf_stability", &cfg.conf_stability.to_string());
    map.set("evidence_quantile", &cfg.evidence_quantile.to_string());
    map.set("suspicious_quantile", &cfg.suspicious_quantile.to_string());
    map.set("sigma_blur", &cfg.sigma_blur.to_string());
    map.set("enable_pc", &cfg.enable_pc.to_string());
    map.set("beta", &cfg.beta.to_string());
    map.set("max_len", &cfg.max_len.to_string());
    map.set("seed", &cfg.seed.to_string());
    map
}

/// Applies every decoder key present in the map onto `cfg` and returns the
/// keys the decoder does not own, in sorted order. The final configuration
/// is validated.
pub fn update_dep_config(cfg: &mut DepConfig, map: &ConfigMap) -> Result<Vec<String>> {
    let mut foreign = Vec::new();
    for (key, value) in map.iter() {
        match key {
            "m" => cfg.m = parse_value(key, value, "a positive integer")?,
            "delta" => cfg.delta = parse_value(key, value, "a real")?,
            "mode" => cfg.mode = parse_mode(value)?,
            "fixed_p" => cfg.fixed_p = parse_value(key, value, "a real")?,
            "fixed_alt" => cfg.fixed_alt = parse_strategy(value)?,
            "enable_ve" => cfg.enable_ve = parse_bool(key, value)?,
            "alpha" => cfg.alpha = parse_value(key, value, "a real")?,
            "gamma" => cfg.gamma = parse_value(key, value, "a real")?,
            "conf_evidence" => cfg.conf_evidence = parse_value(key, value, "a real")?,
            "conf_attention" => cfg.conf_attention = parse_value(key, value, "a real")?,
            "conf_stability" => cfg.conf_stability = parse_value(key, value, "a real")?,
            "evidence_quantile" => cfg.evidence_quantile = parse_value(key, value, "a real")?,
            "suspicious_quantile" => cfg.suspicious_quantile = parse_value(key, value, "a real")?,
            "sigma_blur" => cfg.sigma_blur = parse_value(key, value, "a real")?,
            "enable_pc" => cfg.enable_pc = parse_bool(key, value)?,
            "beta" => cfg.beta = parse_value(key, value, "a real")?,
            "max_len" => cfg.max_len = parse_value(key, value, "a positive integer")?,
            "seed" => cfg.seed = parse_value(key, value, "an unsigned integer")?,
            _ => foreign.push(key.to_string()),
        }
    }
    cfg.validate()?;
    Ok(foreign)
}
