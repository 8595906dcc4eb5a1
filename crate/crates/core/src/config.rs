//! Run configuration: model shape, stage plan, optimizer and diagnostics
//! thresholds, read from TOML.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::curriculum::{build_stage_plan, DataOptions, OptimizerConfig, Schedule, StageSpec, TrainOptions};
use crate::diagnostics::VanishRule;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::parse_groups;

/// Published JSON schema for the config file.
pub const SCHEMA: &str = include_str!("../schema/run_config.schema.json");

/// Replacement values for one stage of the default plan.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverride {
    pub stage: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters_per_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable_groups: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scale_divisor: usize,
    pub stages: Vec<usize>,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub lr_scale: f64,
    pub halt_on_bad: bool,
    pub vanish: VanishRule,
    pub data: DataOptions,
    pub stage_overrides: Vec<StageOverride>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scale_divisor: 200,
            stages: vec![1, 2, 3, 4],
            batch_size: 4,
            optimizer: OptimizerConfig::Sgd,
            lr_scale: 1.0,
            halt_on_bad: true,
            vanish: VanishRule::default(),
            data: DataOptions::default(),
            stage_overrides: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Extra model widths run through the same five configurations.
    pub widths: Vec<usize>,
    /// Q/K init scale for the logit-saturation probe.
    pub probe_std: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            widths: vec![64],
            probe_std: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out_dir: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn field_err(field: String, e: Error) -> Error {
    match e {
        Error::Config { .. } => e,
        Error::Schedule(m) | Error::InvalidArgument(m) => Error::Config { field, message: m },
        Error::UnknownGroup(names) => Error::Config {
            field,
            message: format!("unknown parameter group(s): {}", names.join(", ")),
        },
        other => Error::Config {
            field,
            message: other.to_string(),
        },
    }
}

impl RunConfig {
    /// Parses and validates; every problem names the offending field.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            field: e
                .span()
                .map(|s| format!("line {}", text[..s.start].matches('\n').count() + 1))
                .unwrap_or_else(|| "<document>".into()),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            optimizer: self.train.optimizer,
            lr_scale: self.train.lr_scale,
            batch_size: self.train.batch_size,
            vanish: self.train.vanish,
            halt_on_bad: self.train.halt_on_bad,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(t.lr_scale.is_finite() && t.lr_scale >= 0.0) {
            return Err(Error::config("train.lr_scale", "must be finite and non-negative"));
        }
        if t.vanish.window == 0 {
            return Err(Error::config("train.vanish.window", "must be at least 1"));
        }
        if !(t.vanish.threshold >= 0.0) {
            return Err(Error::config("train.vanish.threshold", "must be non-negative"));
        }
        if t.data.pool == 0 {
            return Err(Error::config("train.data.pool", "must be at least 1"));
        }
        if t.data.image_pool == 0 {
            return Err(Error::config("train.data.image_pool", "must be at least 1"));
        }
        if t.stages.is_empty() {
            return Err(Error::config("train.stages", "must list at least one stage"));
        }
        if let OptimizerConfig::Adam { beta1, beta2, eps } = t.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::config(
                    "train.optimizer",
                    "adam needs 0 <= beta1, beta2 < 1 and eps > 0",
                ));
            }
        }
        if self.ablation.widths.iter().any(|&w| w == 0 || w % self.model.block.n_heads != 0) {
            return Err(Error::config(
                "ablation.widths",
                format!("every width must be a positive multiple of n_heads ({})", self.model.block.n_heads),
            ));
        }
        if !(self.ablation.probe_std > 0.0) {
            return Err(Error::config("ablation.probe_std", "must be positive"));
        }
        self.plan().map(|_| ())
    }

    /// Stage specs in run order, with overrides applied.
    pub fn plan(&self) -> Result<Vec<StageSpec>> {
        let t = &self.train;
        for (i, o) in t.stage_overrides.iter().enumerate() {
            if !t.stages.contains(&o.stage) {
                return Err(Error::config(
                    format!("train.stage_overrides[{i}].stage"),
                    format!("stage {} is not in train.stages", o.stage),
                ));
            }
        }
        t.stages
            .iter()
            .enumerate()
            .map(|(k, &s)| {
                let mut spec = build_stage_plan(s, t.scale_divisor).map_err(|e| {
                    let field = if (1..=4).contains(&s) {
                        "train.scale_divisor".to_string()
                    } else {
                        format!("train.stages[{k}]")
                    };
                    field_err(field, e)
                })?;
                for (i, o) in t.stage_overrides.iter().enumerate().filter(|(_, o)| o.stage == s) {
                    apply_override(&mut spec, o).map_err(|(f, e)| field_err(format!("train.stage_overrides[{i}].{f}"), e))?;
                }
                Ok(spec)
            })
            .collect()
    }
}

fn apply_override(spec: &mut StageSpec, o: &StageOverride) -> std::result::Result<(), (&'static str, Error)> {
    if let Some(e) = o.epochs {
        spec.epochs = e;
    }
    if let Some(n) = o.iters_per_epoch {
        spec.iters_per_epoch = n;
    }
    if let Some(r) = o.resolution {
        spec.resolution = r;
    }
    if let Some(names) = &o.trainable_groups {
        spec.trainable_groups = parse_groups(names).map_err(|e| ("trainable_groups", e))?;
    }
    let total = spec.total_steps();
    if total == 0 {
        return Err(("epochs", Error::Schedule("stage must have at least one step".into())));
    }
    match &mut spec.schedule {
        Schedule::Sawtooth(s) => {
            for (name, v) in [("warmup_steps", o.warmup_steps.is_some()), ("warmup_lr", o.warmup_lr.is_some()), ("init_lr", o.init_lr.is_some()), ("min_lr", o.min_lr.is_some())] {
                if v {
                    return Err((name, Error::Schedule("not a sawtooth parameter".into())));
                }
            }
            s.period = spec.iters_per_epoch;
            s.lr_start = o.lr_start.unwrap_or(s.lr_start);
            s.lr_end = o.lr_end.unwrap_or(s.lr_end);
            s.validate().map_err(|e| ("iters_per_epoch", e))?;
        }
        Schedule::WarmupCosine(s) => {
            for (name, v) in [("lr_start", o.lr_start.is_some()), ("lr_end", o.lr_end.is_some())] {
                if v {
                    return Err((name, Error::Schedule("not a warmup-cosine parameter".into())));
                }
            }
            s.total_steps = total;
            s.warmup_steps = o.warmup_steps.unwrap_or(s.warmup_steps.min(total));
            s.warmup_lr = o.warmup_lr.unwrap_or(s.warmup_lr);
            s.init_lr = o.init_lr.unwrap_or(s.init_lr);
            s.min_lr = o.min_lr.unwrap_or(s.min_lr);
            s.validate().map_err(|e| {
                let field = match &e {
                    Error::Schedule(m) if m.starts_with("min_lr") => "min_lr",
                    Error::Schedule(m) if m.starts_with("warmup_lr") => "warmup_lr",
                    Error::Schedule(m) if m.starts_with("warmup_steps") => "warmup_steps",
                    _ => "init_lr",
                };
                (field, e)
            })?;
        }
    }
    spec.validate().map_err(|e| ("resolution", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_fields_take_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\n[model.block]\nd_model = 64\n[train]\nscale_divisor = 100\n").unwrap();
        let mut want = RunConfig::default();
        want.seed = 3;
        want.model.block.d_model = 64;
        want.train.scale_divisor = 100;
        assert_eq!(cfg, want);
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.plan().unwrap().len(), 4);
    }

    #[test]
    fn rising_cosine_override_names_field() {
        let mut cfg = RunConfig::default();
        cfg.train.stage_overrides.push(StageOverride {
            stage: 4,
            min_lr: Some(8e-5),
            ..Default::default()
        });
        match cfg.validate() {
            Err(Error::Config { field, message }) => {
                assert_eq!(field, "train.stage_overrides[0].min_lr");
                assert!(message.contains("must not exceed init_lr"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_fields_and_groups_rejected() {
        let text = RunConfig::default().to_toml().unwrap().replace("seed = 7", "seed = 7\nbogus = 1");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config { .. })));
        let mut cfg = RunConfig::default();
        cfg.train.stage_overrides.push(StageOverride {
            stage: 3,
            trainable_groups: Some(vec!["lora".into(), "heads".into()]),
            ..Default::default()
        });
        match cfg.validate() {
            Err(Error::Config { field, message }) => {
                assert_eq!(field, "train.stage_overrides[0].trainable_groups");
                assert!(message.contains("heads"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_divisor_names_field() {
        let mut cfg = RunConfig::default();
        cfg.train.scale_divisor = 7;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "train.scale_divisor"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_rescale_schedule() {
        let mut cfg = RunConfig::default();
        cfg.train.stages = vec![3];
        cfg.train.stage_overrides.push(StageOverride {
            stage: 3,
            epochs: Some(1),
            iters_per_epoch: Some(500),
            warmup_steps: Some(25),
            init_lr: Some(1e-2),
            min_lr: Some(1e-3),
            ..Default::default()
        });
        let plan = cfg.plan().unwrap();
        assert_eq!(plan[0].total_steps(), 500);
        assert_eq!(plan[0].schedule.lr(25).unwrap(), 1e-2);
        assert_eq!(plan[0].schedule.lr(500).unwrap(), 1e-3);
    }

    #[test]
    fn schema_lists_every_top_level_field() {
        let schema: serde_json::Value = serde_json::from_str(SCHEMA).unwrap();
        let props = schema["properties"].as_object().unwrap();
        let mut cfg = RunConfig::default();
        cfg.out_dir = Some("x".into());
        let value = serde_json::to_value(&cfg).unwrap();
        for key in value.as_object().unwrap().keys() {
            assert!(props.contains_key(key), "schema misses {key}");
        }
        for key in value["train"].as_object().unwrap().keys() {
            assert!(
                props["train"]["properties"].as_object().unwrap().contains_key(key),
                "schema misses train.{key}"
            );
        }
    }
}
