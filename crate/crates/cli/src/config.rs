//! Run configuration: defaults, then an optional TOML file, then `--set`
//! overrides, then dedicated flags. Unknown keys are rejected at every layer.

use std::path::{Path, PathBuf};

use aesfield::distill::DistillConfig;
use aesfield::geometry::CameraIntrinsics;
use aesfield::search::SearchConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntrinsicsConfig {
    pub width: u32,
    pub height: u32,
    pub fov_deg: f64,
}

impl Default for IntrinsicsConfig {
    fn default() -> Self {
        IntrinsicsConfig {
            width: 56,
            height: 56,
            fov_deg: 50.0,
        }
    }
}

impl IntrinsicsConfig {
    pub fn build(&self) -> aesfield::Result<CameraIntrinsics> {
        CameraIntrinsics::from_fov(self.width, self.height, self.fov_deg.to_radians())
    }
}

/// File locations. Command-line path flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cameras: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub maps: Option<PathBuf>,
    /// Decoder sidecar; defaults to `<scene>.json`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub intrinsics: IntrinsicsConfig,
    pub distill: DistillConfig,
    pub search: SearchConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            intrinsics: IntrinsicsConfig::default(),
            // a fresh decoder has zero readout, so without calibration every
            // view would score 0.5
            distill: DistillConfig {
                calibrate_decoder: true,
                ..DistillConfig::default()
            },
            search: SearchConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::usage(format!("--set: malformed key '{key}'")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::usage(format!("--set: '{p}' in '{key}' is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, layer: toml::Table) {
    for (k, v) in layer {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(l)) => merge(b, l),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Builds the effective configuration. `overrides` are `section.key=value`
/// strings applied in order.
pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table = toml::Table::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let layer: toml::Table = text
            .parse()
            .map_err(|e| CliError::malformed(format!("{}: {e}", path.display())))?;
        merge(&mut table, layer);
    }
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--set expects KEY=VALUE, got '{o}'")))?;
        set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
    }
    let mut full = match toml::Value::try_from(RunConfig::default()).expect("defaults serialize") {
        toml::Value::Table(t) => t,
        _ => unreachable!("a struct serializes to a table"),
    };
    merge(&mut full, table);
    let cfg: RunConfig = toml::Value::Table(full)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::usage(format!("config: {}", e.message())))?;
    Ok(cfg)
}
