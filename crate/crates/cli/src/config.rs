//! Run configuration: strict JSON plus dotted-key overrides.

use std::path::{Path, PathBuf};

use nvdephase::protocols::ProtocolConfig;
use nvdephase::spin_model::SpinSystemParams;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "NVDEPHASE_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
    Svg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputOptions {
    /// Output directory. Falls back to `$NVDEPHASE_OUT`, then `out`.
    pub dir: Option<PathBuf>,
    pub formats: Vec<Format>,
    /// File stem for written traces.
    pub stem: String,
}

impl Default for OutputOptions {
    fn default() -> Self {
        Self {
            dir: None,
            formats: vec![Format::Csv, Format::Json],
            stem: "trace".into(),
        }
    }
}

impl OutputOptions {
    pub fn resolved_dir(&self) -> PathBuf {
        self.dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// Fit settings. A `fix_*` value holds that parameter; absent means free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub fix_kappa: Option<f64>,
    pub fix_d0: Option<f64>,
    pub fix_c0: Option<f64>,
    /// Also run the one-pass fit of the whole trace.
    pub global: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub spin: SpinSystemParams,
    pub protocol: ProtocolConfig,
    pub fit: FitOptions,
    pub output: OutputOptions,
}

impl RunConfig {
    /// Loads a config file. A simulation record (an object holding `config`
    /// and `trace`) is accepted too, so outputs can be re-run directly.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut v: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        if let Value::Object(map) = &v {
            if map.contains_key("config") && map.contains_key("trace") {
                v = map["config"].clone();
            }
        }
        Self::from_value(v)
    }

    fn from_value(v: Value) -> Result<Self, CliError> {
        serde_json::from_value(v).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    /// Applies `a.b.c=value` overrides. The value is read as JSON when it
    /// parses, otherwise as a string. Unknown keys are errors.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        if overrides.is_empty() {
            return Ok(());
        }
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut root;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| CliError::Config(format!("`{key}`: `{part}` is not inside an object")))?;
                if !obj.contains_key(*part) {
                    return Err(CliError::Config(format!("unknown key `{key}`")));
                }
                if i + 1 == parts.len() {
                    obj.insert(part.to_string(), value.clone());
                    break;
                }
                node = obj.get_mut(*part).unwrap();
            }
        }
        *self = Self::from_value(root)?;
        Ok(())
    }
}
