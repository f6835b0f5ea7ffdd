//! Toolkit configuration: one human-readable TOML file with sections
//! mirroring the module configs, plus dotted-path overrides
//! (`trainer.max_epochs=2`) for reproducible runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Validate, Violation};
use crate::geometry::HomographySamplerConfig;
use crate::matching::RegisterConfig;
use crate::network::NetworkConfig;
use crate::trainer::{LrSchedule, TrainConfig};

/// Top-level configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ToolkitConfig {
    pub network: NetworkConfig,
    pub trainer: TrainConfig,
    pub register: RegisterConfig,
}

impl ToolkitConfig {
    /// Full-scale preset: 768² working size, paper-scale widths, σ = 0.2
    /// heatmaps (σ = 2.0 is the desk preset's alternative).
    pub fn full() -> Self {
        Self::default()
    }

    /// Desk-scale preset: 256² working size, tiny widths, broad heatmaps,
    /// cross-polarity augmentation for synthetic multimodal data.
    pub fn desk() -> Self {
        Self {
            network: NetworkConfig::tiny(256),
            trainer: TrainConfig {
                learning_rate: 1e-3,
                max_epochs: 20,
                heatmap_sigma: 2.0,
                nms_radius: 5.0,
                expansion_min_separation: 5.0,
                candidate_cap: 256,
                polarity_jitter_prob: 0.5,
                checkpoint_every: 10,
                lr_schedule: LrSchedule::Constant,
                sampler: HomographySamplerConfig {
                    max_corner_shift: 0.03,
                    rotation_range: 8.0,
                    scale_range: (0.95, 1.05),
                    translation_range: 0.03,
                    seed: 0,
                },
                ..TrainConfig::default()
            },
            register: RegisterConfig {
                nms_radius: 5.0,
                ..RegisterConfig::default()
            },
        }
    }
}

impl Validate for ToolkitConfig {
    fn validate(&self) -> std::result::Result<(), Violation> {
        self.network.validate()?;
        self.trainer.validate()?;
        Ok(())
    }
}

/// Parses a TOML config with dotted-path overrides applied before
/// deserialization.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ToolkitConfig> {
    let table: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    let mut value = toml::Value::Table(table);
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    let cfg: ToolkitConfig = value
        .try_into()
        .map_err(|e| Error::Config(format!("config field error: {e}")))?;
    cfg.validate().map_err(|v| Error::Config(v.to_string()))?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ToolkitConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text, overrides)
}

/// Serializes the resolved configuration (run-directory snapshot).
pub fn to_toml_string(cfg: &ToolkitConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("config serialize: {e}")))
}

/// Applies one `path.to.field=value` override onto a TOML tree.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` must be key.path=value")))?;
    let segments: Vec<&str> = path.split('.').map(str::trim).collect();
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty path")));
    }
    // Parse the value through a TOML fragment; fall back to a string.
    let parsed: toml::Value = match format!("v = {raw_value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw_value.to_string()),
    };
    let mut node = root;
    for seg in &segments[..segments.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{spec}`: `{seg}` is not a table")))?;
        node = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override `{spec}`: parent is not a table")))?;
    table.insert(segments.last().unwrap().to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        assert!(ToolkitConfig::full().validate().is_ok());
        assert!(ToolkitConfig::desk().validate().is_ok());
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = parse_config("[trainer]\nmax_epochs = 7\n", &[]).unwrap();
        assert_eq!(cfg.trainer.max_epochs, 7);
        assert_eq!(cfg.trainer.batch_size, 2);
        assert_eq!(cfg.network.working_size, (768, 768));
    }

    #[test]
    fn overrides_apply_dotted_paths() {
        let cfg = parse_config(
            "",
            &[
                "trainer.max_epochs=3".to_string(),
                "trainer.weights.w_ssl=0.0".to_string(),
                "network.working_size=[256, 256]".to_string(),
                "trainer.lr_schedule=\"cosine\"".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.trainer.max_epochs, 3);
        assert_eq!(cfg.trainer.weights.w_ssl, 0.0);
        assert_eq!(cfg.network.working_size, (256, 256));
        assert_eq!(cfg.trainer.lr_schedule, LrSchedule::Cosine);
    }

    #[test]
    fn invalid_field_is_config_error() {
        let err = parse_config("[trainer]\nbatch_size = 1\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = parse_config("", &["network.working_size=[100, 100]".into()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn round_trip_through_toml() {
        let cfg = ToolkitConfig::desk();
        let text = to_toml_string(&cfg).unwrap();
        let back = parse_config(&text, &[]).unwrap();
        assert_eq!(cfg, back);
    }
}
