//! Experiment configuration: schema, defaults, validation and file IO.
//!
//! Configs are TOML (or JSON, chosen by file extension). Scalar top-level
//! fields can be overridden from the environment with `SCALESSL_<FIELD>`,
//! e.g. `SCALESSL_SEED=3` or `SCALESSL_LABEL_FRACTION=0.2`.

use crate::types::CropDivisor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::ops::Deref;
use std::path::Path;
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;
pub const ENV_PREFIX: &str = "SCALESSL_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config field '{field}': {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("environment override {var}: {reason}")]
    Env { var: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ConfigError {
    /// Name of the offending field for validation errors.
    pub fn field(&self) -> Option<&'static str> {
        match self {
            ConfigError::Invalid { field, .. } => Some(field),
            _ => None,
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslMethod {
    Simclr,
    Byol,
    Vicreg,
    None,
}

impl SslMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SslMethod::Simclr => "simclr",
            SslMethod::Byol => "byol",
            SslMethod::Vicreg => "vicreg",
            SslMethod::None => "none",
        }
    }
}

impl fmt::Display for SslMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Random,
    Proximity,
    FullView,
}

impl Sampling {
    pub fn as_str(self) -> &'static str {
        match self {
            Sampling::Random => "random",
            Sampling::Proximity => "proximity",
            Sampling::FullView => "full_view",
        }
    }
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Lars,
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderArch {
    ToyCnn,
    Resnet18,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderStyle {
    PlainUpsample,
    DeeplabAspp,
}

/// Loss hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveParams {
    pub temperature: f64,
    pub vicreg_lambda: f64,
    pub vicreg_mu: f64,
    pub vicreg_nu: f64,
    pub vicreg_gamma: f64,
    pub variance_eps: f64,
    pub ema_momentum: f64,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            vicreg_lambda: 25.0,
            vicreg_mu: 25.0,
            vicreg_nu: 1.0,
            vicreg_gamma: 1.0,
            variance_eps: 1e-4,
            ema_momentum: 0.99,
        }
    }
}

/// Augmentation magnitudes. Intensity shift is a fraction of the patch's
/// intensity range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub enabled: bool,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub affine_prob: f64,
    pub max_rotation_deg: f64,
    pub max_shear_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub intensity_scale_min: f64,
    pub intensity_scale_max: f64,
    pub intensity_shift: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            enabled: true,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            affine_prob: 0.5,
            max_rotation_deg: 15.0,
            max_shear_deg: 5.0,
            scale_min: 0.9,
            scale_max: 1.1,
            intensity_scale_min: 0.8,
            intensity_scale_max: 1.2,
            intensity_shift: 0.1,
        }
    }
}

impl AugmentParams {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub ssl_method: SslMethod,
    pub sampling: Sampling,
    /// `None` for full-view runs.
    pub crop_divisor: Option<CropDivisor>,
    /// Proximity radius in pixels; `None` resolves to the crop size.
    pub delta: Option<f64>,
    pub label_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Peak pretraining learning rate; `None` resolves to `0.3 * batch / 256`.
    pub learning_rate: Option<f64>,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
    pub finetune_epochs: usize,
    pub finetune_batch_size: usize,
    pub finetune_optimizer: OptimizerKind,
    pub finetune_lr: f64,
    pub frozen_encoder: bool,
    pub seed: u64,
    pub encoder: EncoderArch,
    pub feature_dim: usize,
    /// Per-stage strides of the toy encoder; ignored by resnet18.
    pub stage_strides: Vec<usize>,
    pub decoder: DecoderStyle,
    pub embedding_dim: usize,
    pub views_per_image: usize,
    pub patches_per_image: usize,
    /// Sliding-window stride for inference; `None` resolves to half the patch.
    pub stride: Option<usize>,
    pub dice_epsilon: f64,
    pub metric_cap: f64,
    pub val_every: usize,
    pub checkpoint_every: usize,
    pub objective: ObjectiveParams,
    pub augment: AugmentParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            ssl_method: SslMethod::Simclr,
            sampling: Sampling::Random,
            crop_divisor: Some(CropDivisor::Eighth),
            delta: None,
            label_fraction: 0.1,
            epochs: 100,
            batch_size: 128,
            optimizer: OptimizerKind::Lars,
            learning_rate: None,
            warmup_epochs: 10,
            momentum: 0.9,
            weight_decay: 1e-6,
            trust_coefficient: 0.001,
            finetune_epochs: 50,
            finetune_batch_size: 16,
            finetune_optimizer: OptimizerKind::Adam,
            finetune_lr: 1e-3,
            frozen_encoder: false,
            seed: 0,
            encoder: EncoderArch::ToyCnn,
            feature_dim: 64,
            stage_strides: vec![1, 2, 2],
            decoder: DecoderStyle::PlainUpsample,
            embedding_dim: 32,
            views_per_image: 1,
            patches_per_image: 4,
            stride: None,
            dice_epsilon: 1.0,
            metric_cap: 200.0,
            val_every: 1,
            checkpoint_every: 10,
            objective: ObjectiveParams::default(),
            augment: AugmentParams::default(),
        }
    }
}

/// A config that passed [`validate_config`]. Immutable; dereferences to the
/// underlying [`ExperimentConfig`].
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ValidatedConfig(ExperimentConfig);

impl Deref for ValidatedConfig {
    type Target = ExperimentConfig;

    fn deref(&self) -> &ExperimentConfig {
        &self.0
    }
}

impl ValidatedConfig {
    pub fn into_inner(self) -> ExperimentConfig {
        self.0
    }

    /// Proximity radius for a given crop side.
    pub fn effective_delta(&self, crop_size: usize) -> f64 {
        self.delta.unwrap_or(crop_size as f64)
    }

    pub fn effective_learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(0.3 * self.batch_size as f64 / 256.0)
    }

    pub fn effective_stride(&self, patch: usize) -> usize {
        self.stride.unwrap_or((patch / 2).max(1))
    }

    pub fn stride_product(&self) -> usize {
        match self.encoder {
            EncoderArch::ToyCnn => self.stage_strides.iter().product(),
            EncoderArch::Resnet18 => 32,
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.0).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Re-validates after `f` edits a copy.
    pub fn with(&self, f: impl FnOnce(&mut ExperimentConfig)) -> Result<Self, ConfigError> {
        let mut c = self.0.clone();
        f(&mut c);
        validate_config(c)
    }
}

fn positive(field: &'static str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive and finite, got {v}")))
    }
}

fn non_negative(field: &'static str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be non-negative and finite, got {v}")))
    }
}

fn probability(field: &'static str, v: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(field, format!("must lie in [0, 1], got {v}")))
    }
}

fn at_least(field: &'static str, v: usize, min: usize) -> Result<(), ConfigError> {
    if v >= min {
        Ok(())
    } else {
        Err(invalid(field, format!("must be at least {min}, got {v}")))
    }
}

/// Checks every invariant and returns the frozen config. Errors name the
/// first violated field in declaration order.
pub fn validate_config(config: ExperimentConfig) -> Result<ValidatedConfig, ConfigError> {
    let c = &config;
    if c.schema_version != SCHEMA_VERSION {
        return Err(invalid(
            "schema_version",
            format!("expected {SCHEMA_VERSION}, got {}", c.schema_version),
        ));
    }
    match (c.sampling, c.crop_divisor) {
        (Sampling::FullView, Some(_)) => return Err(invalid("crop_divisor", "must be unset for full_view sampling")),
        (Sampling::Random | Sampling::Proximity, None) => {
            return Err(invalid("crop_divisor", "required for patch sampling"))
        }
        _ => {}
    }
    if let Some(d) = c.delta {
        if c.sampling == Sampling::Proximity && !(d.is_finite() && d > 0.0) {
            return Err(invalid("delta", format!("must be > 0 for proximity sampling, got {d}")));
        }
    }
    if !(c.label_fraction > 0.0 && c.label_fraction <= 1.0) {
        return Err(invalid(
            "label_fraction",
            format!("must lie in (0, 1], got {}", c.label_fraction),
        ));
    }
    if c.seed > i64::MAX as u64 {
        return Err(invalid("seed", "must fit in a signed 64-bit integer"));
    }
    at_least("batch_size", c.batch_size, 2)?;
    if let Some(lr) = c.learning_rate {
        positive("learning_rate", lr)?;
    }
    probability("momentum", c.momentum)?;
    non_negative("weight_decay", c.weight_decay)?;
    positive("trust_coefficient", c.trust_coefficient)?;
    at_least("finetune_batch_size", c.finetune_batch_size, 1)?;
    positive("finetune_lr", c.finetune_lr)?;
    at_least("feature_dim", c.feature_dim, 1)?;
    if c.encoder == EncoderArch::ToyCnn
        && (c.stage_strides.is_empty() || c.stage_strides.iter().any(|&s| s == 0 || s > 2))
    {
        return Err(invalid(
            "stage_strides",
            format!(
                "need at least one stage with strides in {{1, 2}}, got {:?}",
                c.stage_strides
            ),
        ));
    }
    at_least("embedding_dim", c.embedding_dim, 2)?;
    at_least("views_per_image", c.views_per_image, 1)?;
    at_least("patches_per_image", c.patches_per_image, 1)?;
    if let Some(s) = c.stride {
        at_least("stride", s, 1)?;
    }
    positive("dice_epsilon", c.dice_epsilon)?;
    positive("metric_cap", c.metric_cap)?;
    at_least("val_every", c.val_every, 1)?;
    at_least("checkpoint_every", c.checkpoint_every, 1)?;

    let o = &c.objective;
    positive("objective.temperature", o.temperature)?;
    non_negative("objective.vicreg_lambda", o.vicreg_lambda)?;
    non_negative("objective.vicreg_mu", o.vicreg_mu)?;
    non_negative("objective.vicreg_nu", o.vicreg_nu)?;
    non_negative("objective.vicreg_gamma", o.vicreg_gamma)?;
    positive("objective.variance_eps", o.variance_eps)?;
    probability("objective.ema_momentum", o.ema_momentum)?;

    let a = &c.augment;
    probability("augment.hflip_prob", a.hflip_prob)?;
    probability("augment.vflip_prob", a.vflip_prob)?;
    probability("augment.affine_prob", a.affine_prob)?;
    non_negative("augment.max_rotation_deg", a.max_rotation_deg)?;
    non_negative("augment.max_shear_deg", a.max_shear_deg)?;
    positive("augment.scale_min", a.scale_min)?;
    if !(a.scale_max >= a.scale_min) {
        return Err(invalid("augment.scale_max", "must be >= scale_min"));
    }
    positive("augment.intensity_scale_min", a.intensity_scale_min)?;
    if !(a.intensity_scale_max >= a.intensity_scale_min) {
        return Err(invalid("augment.intensity_scale_max", "must be >= intensity_scale_min"));
    }
    non_negative("augment.intensity_shift", a.intensity_shift)?;

    Ok(ValidatedConfig(config))
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let has_divisor = table.contains_key("crop_divisor");
        let c: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        Ok(c.unset_absent_divisor(has_divisor))
    }

    /// An absent divisor key leaves a full-view config without a divisor.
    fn unset_absent_divisor(mut self, present: bool) -> Self {
        if !present && self.sampling == Sampling::FullView {
            self.crop_divisor = None;
        }
        self
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn from_json_str(s: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value = serde_json::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let has_divisor = value.get("crop_divisor").is_some();
        let c: Self = serde_json::from_value(value).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Ok(c.unset_absent_divisor(has_divisor))
    }

    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = if path.extension().is_some_and(|e| e == "json") {
            serde_json::to_string_pretty(self).expect("config serializes to JSON")
        } else {
            self.to_toml_string()
        };
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Applies `SCALESSL_<FIELD>` overrides for scalar top-level fields.
    pub fn apply_env_overrides<I, K, V>(self, vars: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut value = serde_json::to_value(&self).expect("config serializes");
        let obj = value.as_object_mut().expect("config is an object");
        let mut touched = false;
        for (k, v) in vars {
            let Some(field) = k.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let field = field.to_ascii_lowercase();
            let Some(slot) = obj.get_mut(&field) else {
                return Err(ConfigError::Env {
                    var: k.as_ref().to_string(),
                    reason: "no such field".into(),
                });
            };
            if slot.is_object() || slot.is_array() {
                return Err(ConfigError::Env {
                    var: k.as_ref().to_string(),
                    reason: "only scalar fields can be overridden".into(),
                });
            }
            let raw = v.as_ref();
            *slot = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            touched = true;
        }
        if !touched {
            return Ok(self);
        }
        serde_json::from_value(value).map_err(|e| ConfigError::Env {
            var: "SCALESSL_*".into(),
            reason: e.to_string(),
        })
    }

    pub fn apply_process_env(self) -> Result<Self, ConfigError> {
        self.apply_env_overrides(std::env::vars())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        ExperimentConfig::default()
    }

    #[test]
    fn proximity_protocol_is_valid() {
        let c = ExperimentConfig {
            label_fraction: 0.1,
            sampling: Sampling::Proximity,
            delta: Some(16.0),
            ..base()
        };
        let v = validate_config(c).unwrap();
        assert_eq!(v.effective_delta(12), 16.0);
    }

    #[test]
    fn zero_label_fraction_names_field() {
        let c = ExperimentConfig {
            label_fraction: 0.0,
            ..base()
        };
        assert_eq!(validate_config(c).unwrap_err().field(), Some("label_fraction"));
    }

    #[test]
    fn zero_delta_for_proximity_names_field() {
        let c = ExperimentConfig {
            sampling: Sampling::Proximity,
            delta: Some(0.0),
            ..base()
        };
        assert_eq!(validate_config(c).unwrap_err().field(), Some("delta"));
    }

    #[test]
    fn first_violation_wins() {
        let c = ExperimentConfig {
            label_fraction: 2.0,
            finetune_lr: -1.0,
            ..base()
        };
        assert_eq!(validate_config(c).unwrap_err().field(), Some("label_fraction"));
    }

    #[test]
    fn divisor_must_match_sampling() {
        let c = ExperimentConfig {
            sampling: Sampling::FullView,
            ..base()
        };
        assert_eq!(validate_config(c).unwrap_err().field(), Some("crop_divisor"));
        let c = ExperimentConfig {
            sampling: Sampling::FullView,
            crop_divisor: None,
            ..base()
        };
        assert!(validate_config(c).is_ok());
    }

    #[test]
    fn defaults_resolve() {
        let v = validate_config(base()).unwrap();
        assert_eq!(v.effective_delta(12), 12.0);
        assert!((v.effective_learning_rate() - 0.15).abs() < 1e-12);
        assert_eq!(v.effective_stride(12), 6);
        assert_eq!(v.stride_product(), 4);
        assert_eq!(v.metric_cap, 200.0);
    }

    #[test]
    fn toml_round_trip() {
        let v = validate_config(ExperimentConfig {
            sampling: Sampling::Proximity,
            delta: Some(7.5),
            seed: 42,
            ..base()
        })
        .unwrap();
        let text = v.to_toml_string();
        let back = validate_config(ExperimentConfig::from_toml_str(&text).unwrap()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
    }

    #[test]
    fn full_view_file_without_divisor_loads() {
        let c = ExperimentConfig::from_toml_str("sampling = \"full_view\"\n").unwrap();
        assert_eq!(c.crop_divisor, None);
        assert!(validate_config(c).is_ok());
        let p = ExperimentConfig::from_toml_str("sampling = \"random\"\n").unwrap();
        assert_eq!(p.crop_divisor, Some(CropDivisor::Eighth));
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = ExperimentConfig::from_toml_str("seed = 9\nsampling = \"full_view\"\ncrop_divisor = 2\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.epochs, 100);
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn env_overrides_scalars() {
        let c = base()
            .apply_env_overrides([
                ("SCALESSL_SEED", "17"),
                ("SCALESSL_SAMPLING", "proximity"),
                ("SCALESSL_DELTA", "3.5"),
                ("UNRELATED", "x"),
            ])
            .unwrap();
        assert_eq!(c.seed, 17);
        assert_eq!(c.sampling, Sampling::Proximity);
        assert_eq!(c.delta, Some(3.5));
        assert!(base().apply_env_overrides([("SCALESSL_OBJECTIVE", "1")]).is_err());
        assert!(base().apply_env_overrides([("SCALESSL_NOPE", "1")]).is_err());
    }
}
