//! Run configuration: every hyperparameter, ablation toggle, and data path
//! in one flat `key = value` file. Lines whose first non-space character is
//! `#` are comments. Unknown keys, duplicate keys, and out-of-range values
//! are rejected with the offending line number.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::model::UpdateScope;
use crate::reliability::SelectionMode;

/// Where reliability maps come from during adaptation. `Off` is the
/// self-supervised default; the other two exist for analysis and read
/// ground-truth labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    Off,
    Perfect,
    /// Perfect reliability with exactly P% of bits flipped per image.
    Noisy(u32),
}

/// Training objective used during adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossChoice {
    S4t,
    EntMin,
    CeAll,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub seed: u64,
    pub num_classes: usize,
    /// Per-class confidence percentile: the top K% most confident pixels of
    /// each predicted class clear the threshold.
    pub k_percent: u32,
    pub alpha: f32,
    pub beta: f32,
    pub eta: f64,
    /// Interpolation window side length; odd, at least 3.
    pub neighborhood: usize,
    pub weight_decay: f32,
    /// Ring-buffer length for the running class-frequency estimate.
    pub q_batches: usize,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub source_epochs: usize,
    pub source_lr: f32,
    pub scope: UpdateScope,
    pub selection_mode: SelectionMode,
    pub ie_reg: bool,
    pub confidence: bool,
    pub consistency: bool,
    pub loss_weights: bool,
    pub interpolation: bool,
    oracle: OracleKind,
    oracle_p: u32,
    pub loss: LossChoice,
    /// Evaluation scale factors relative to native resolution.
    pub eval_scales: Vec<f64>,
    pub source_manifest: Option<String>,
    pub target_manifest: Option<String>,
    pub eval_manifest: Option<String>,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OracleKind {
    Off,
    Perfect,
    Noisy,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            seed: 1234,
            num_classes: 8,
            k_percent: 50,
            alpha: 0.1,
            beta: 0.1,
            eta: 0.5,
            neighborhood: 3,
            weight_decay: 5e-4,
            q_batches: 100,
            epochs: 1,
            lr: 1e-3,
            batch_size: 4,
            source_epochs: 4,
            source_lr: 2e-3,
            scope: UpdateScope::BnOnly,
            selection_mode: SelectionMode::Or,
            ie_reg: true,
            confidence: true,
            consistency: true,
            loss_weights: true,
            interpolation: true,
            oracle: OracleKind::Off,
            oracle_p: 0,
            loss: LossChoice::S4t,
            eval_scales: alloc::vec![1.0, 1.25, 1.5, 1.75],
            source_manifest: None,
            target_manifest: None,
            eval_manifest: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    /// 1-based line in the config text, 0 when not tied to a line.
    pub line: usize,
    pub message: String,
}

impl core::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ConfigError {}

fn general(message: String) -> ConfigError {
    ConfigError { line: 0, message }
}

fn parse_num<T: core::str::FromStr>(value: &str, what: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("expected {what}, got `{value}`"))
}

fn parse_float32(value: &str) -> Result<f32, String> {
    let v: f32 = parse_num(value, "a number")?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("expected a finite number, got `{value}`"))
    }
}

fn parse_float64(value: &str) -> Result<f64, String> {
    let v: f64 = parse_num(value, "a number")?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("expected a finite number, got `{value}`"))
    }
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{value}`")),
    }
}

fn parse_scales(value: &str) -> Result<Vec<f64>, String> {
    let mut out = Vec::new();
    for part in value.split(',') {
        let s = parse_float64(part.trim())?;
        out.push(s);
    }
    Ok(out)
}

impl AdaptConfig {
    /// Parse a config file body on top of the defaults, then validate.
    pub fn parse(text: &str) -> Result<AdaptConfig, ConfigError> {
        let mut cfg = AdaptConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError {
                line: lineno,
                message: "expected `key = value`".to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|s| s == key) {
                return Err(ConfigError {
                    line: lineno,
                    message: format!("duplicate key `{key}`"),
                });
            }
            seen.push(key.to_string());
            cfg.set(key, value).map_err(|message| ConfigError { line: lineno, message })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Assign one key; used by both file parsing and command-line overrides.
    /// Range checks live in [`AdaptConfig::validate`], called after the last
    /// override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        if value.is_empty() {
            return Err(format!("empty value for `{key}`"));
        }
        match key {
            "seed" => self.seed = parse_num(value, "an unsigned integer")?,
            "num_classes" => self.num_classes = parse_num(value, "an unsigned integer")?,
            "k_percent" => self.k_percent = parse_num(value, "an unsigned integer")?,
            "alpha" => self.alpha = parse_float32(value)?,
            "beta" => self.beta = parse_float32(value)?,
            "eta" => self.eta = parse_float64(value)?,
            "neighborhood" => self.neighborhood = parse_num(value, "an unsigned integer")?,
            "weight_decay" => self.weight_decay = parse_float32(value)?,
            "q_batches" => self.q_batches = parse_num(value, "an unsigned integer")?,
            "epochs" => self.epochs = parse_num(value, "an unsigned integer")?,
            "lr" => self.lr = parse_float32(value)?,
            "batch_size" => self.batch_size = parse_num(value, "an unsigned integer")?,
            "source_epochs" => self.source_epochs = parse_num(value, "an unsigned integer")?,
            "source_lr" => self.source_lr = parse_float32(value)?,
            "scope" => {
                self.scope = match value {
                    "bn_only" => UpdateScope::BnOnly,
                    "all_params" => UpdateScope::AllParams,
                    _ => return Err(format!("expected bn_only or all_params, got `{value}`")),
                }
            }
            "selection_mode" => {
                self.selection_mode = match value {
                    "or" => SelectionMode::Or,
                    "and_vs_rest" => SelectionMode::AndVsRest,
                    "and_vs_and" => SelectionMode::AndVsAnd,
                    _ => {
                        return Err(format!(
                            "expected or, and_vs_rest, or and_vs_and, got `{value}`"
                        ))
                    }
                }
            }
            "ie_reg" => self.ie_reg = parse_bool(value)?,
            "confidence" => self.confidence = parse_bool(value)?,
            "consistency" => self.consistency = parse_bool(value)?,
            "loss_weights" => self.loss_weights = parse_bool(value)?,
            "interpolation" => self.interpolation = parse_bool(value)?,
            "oracle" => {
                self.oracle = match value {
                    "off" => OracleKind::Off,
                    "perfect" => OracleKind::Perfect,
                    "noisy" => OracleKind::Noisy,
                    _ => return Err(format!("expected off, perfect, or noisy, got `{value}`")),
                }
            }
            "oracle_p" => self.oracle_p = parse_num(value, "an unsigned integer")?,
            "loss" => {
                self.loss = match value {
                    "s4t" => LossChoice::S4t,
                    "entmin" => LossChoice::EntMin,
                    "ce_all" => LossChoice::CeAll,
                    _ => return Err(format!("expected s4t, entmin, or ce_all, got `{value}`")),
                }
            }
            "eval_scales" => self.eval_scales = parse_scales(value)?,
            "source_manifest" => self.source_manifest = Some(value.to_string()),
            "target_manifest" => self.target_manifest = Some(value.to_string()),
            "eval_manifest" => self.eval_manifest = Some(value.to_string()),
            "checkpoint" => self.checkpoint = Some(value.to_string()),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    // Negated float comparisons are load-bearing: `!(x > 0.0)` rejects NaN
    // where `x <= 0.0` would let it through.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(general(m));
        if self.num_classes < 2 || self.num_classes > 256 {
            return err(format!("num_classes must be in 2..=256, got {}", self.num_classes));
        }
        if self.k_percent == 0 || self.k_percent > 100 {
            return err(format!("k_percent must be in 1..=100, got {}", self.k_percent));
        }
        if self.alpha < 0.0 {
            return err(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        if self.beta < 0.0 {
            return err(format!("beta must be nonnegative, got {}", self.beta));
        }
        if self.eta < 0.0 {
            return err(format!("eta must be nonnegative, got {}", self.eta));
        }
        if self.neighborhood < 3 || self.neighborhood.is_multiple_of(2) {
            return err(format!(
                "neighborhood must be odd and at least 3, got {}",
                self.neighborhood
            ));
        }
        if self.weight_decay < 0.0 {
            return err(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.q_batches == 0 {
            return err("q_batches must be at least 1".to_string());
        }
        if self.epochs == 0 {
            return err("epochs must be at least 1".to_string());
        }
        if self.source_epochs == 0 {
            return err("source_epochs must be at least 1".to_string());
        }
        if !(self.lr > 0.0) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.source_lr > 0.0) {
            return err(format!("source_lr must be positive, got {}", self.source_lr));
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".to_string());
        }
        if self.oracle_p > 100 {
            return err(format!("oracle_p must be in 0..=100, got {}", self.oracle_p));
        }
        if self.eval_scales.is_empty() {
            return err("eval_scales must list at least one scale".to_string());
        }
        for &s in &self.eval_scales {
            if !(s > 0.0) || s > 8.0 {
                return err(format!("eval scales must be in (0, 8], got {s}"));
            }
        }
        Ok(())
    }

    pub fn oracle_mode(&self) -> OracleMode {
        match self.oracle {
            OracleKind::Off => OracleMode::Off,
            OracleKind::Perfect => OracleMode::Perfect,
            OracleKind::Noisy => OracleMode::Noisy(self.oracle_p),
        }
    }

    pub fn set_oracle(&mut self, mode: OracleMode) {
        match mode {
            OracleMode::Off => self.oracle = OracleKind::Off,
            OracleMode::Perfect => self.oracle = OracleKind::Perfect,
            OracleMode::Noisy(p) => {
                self.oracle = OracleKind::Noisy;
                self.oracle_p = p;
            }
        }
    }

    /// Render the effective configuration in a fixed key order so echoed
    /// configs diff cleanly; output parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("seed", self.seed.to_string());
        kv("num_classes", self.num_classes.to_string());
        kv("k_percent", self.k_percent.to_string());
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("eta", self.eta.to_string());
        kv("neighborhood", self.neighborhood.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("q_batches", self.q_batches.to_string());
        kv("epochs", self.epochs.to_string());
        kv("lr", self.lr.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("source_epochs", self.source_epochs.to_string());
        kv("source_lr", self.source_lr.to_string());
        kv(
            "scope",
            match self.scope {
                UpdateScope::BnOnly => "bn_only",
                UpdateScope::AllParams => "all_params",
            }
            .to_string(),
        );
        kv(
            "selection_mode",
            match self.selection_mode {
                SelectionMode::Or => "or",
                SelectionMode::AndVsRest => "and_vs_rest",
                SelectionMode::AndVsAnd => "and_vs_and",
            }
            .to_string(),
        );
        kv("ie_reg", self.ie_reg.to_string());
        kv("confidence", self.confidence.to_string());
        kv("consistency", self.consistency.to_string());
        kv("loss_weights", self.loss_weights.to_string());
        kv("interpolation", self.interpolation.to_string());
        kv(
            "oracle",
            match self.oracle {
                OracleKind::Off => "off",
                OracleKind::Perfect => "perfect",
                OracleKind::Noisy => "noisy",
            }
            .to_string(),
        );
        kv("oracle_p", self.oracle_p.to_string());
        kv(
            "loss",
            match self.loss {
                LossChoice::S4t => "s4t",
                LossChoice::EntMin => "entmin",
                LossChoice::CeAll => "ce_all",
            }
            .to_string(),
        );
        let scales: Vec<String> = self.eval_scales.iter().map(|s| s.to_string()).collect();
        kv("eval_scales", scales.join(","));
        for (k, v) in [
            ("source_manifest", &self.source_manifest),
            ("target_manifest", &self.target_manifest),
            ("eval_manifest", &self.eval_manifest),
            ("checkpoint", &self.checkpoint),
        ] {
            if let Some(v) = v {
                kv(k, v.clone());
            }
        }
        out
    }
}
