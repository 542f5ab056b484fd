//! Named models, hardware and experiment configs.
//!
//! Lookup checks `$HIERMEM_PRESET_DIR/<name>.json` first and falls back to
//! the built-in table, so a directory can shadow or extend the defaults.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::footprint::TransformerConfig;
use crate::lockfree::ToyConfig;
use crate::simengine::{HardwareProfile, UpdateMode};

pub const PRESET_DIR_ENV: &str = "HIERMEM_PRESET_DIR";

pub const MODEL_PRESETS: &[&str] = &["gpt3-175b", "gpt3-175b-eval", "gpt3-1.7b", "tiny-2l"];
pub const HARDWARE_PRESETS: &[&str] = &["a100-server"];
pub const EXPERIMENT_PRESETS: &[&str] = &["tiny", "gpt3-1.7b"];

/// Built-in model shapes.
pub fn builtin_model(name: &str) -> Option<TransformerConfig> {
    let cfg = |batch_size, seq_len, d_model, d_ffn, num_layers, num_heads| TransformerConfig {
        batch_size,
        seq_len,
        d_model,
        d_ffn,
        num_layers,
        num_heads,
    };
    match name {
        // The shape whose per-layer footprint sums to 648/162/1944 GiB.
        "gpt3-175b" => Some(cfg(1, 2048, 12288, 49152, 96, 96)),
        // The row used in the throughput evaluation.
        "gpt3-175b-eval" => Some(cfg(1, 2048, 14336, 57344, 70, 112)),
        "gpt3-1.7b" => Some(cfg(16, 2048, 2304, 9216, 24, 24)),
        "tiny-2l" => Some(cfg(1, 64, 256, 1024, 2, 4)),
        _ => None,
    }
}

pub fn builtin_hardware(name: &str) -> Option<HardwareProfile> {
    match name {
        "a100-server" | "a100" => Some(HardwareProfile::a100_server()),
        _ => None,
    }
}

pub fn builtin_experiment(name: &str) -> Option<ExperimentConfig> {
    match name {
        "tiny" => Some(ExperimentConfig {
            model: Named::Preset("tiny-2l".into()),
            gpu_budget: 64 << 20,
            page_bytes: 64 << 10,
            ..ExperimentConfig::default()
        }),
        "gpt3-1.7b" => Some(ExperimentConfig {
            model: Named::Preset("gpt3-1.7b".into()),
            recompute: true,
            full_iteration: true,
            iterations: 3,
            update: UpdateMode::SyncCpu,
            ..ExperimentConfig::default()
        }),
        _ => None,
    }
}

fn preset_file(name: &str) -> Option<PathBuf> {
    let dir = std::env::var_os(PRESET_DIR_ENV)?;
    let path = Path::new(&dir).join(format!("{name}.json"));
    path.is_file().then_some(path)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn lookup<T: DeserializeOwned>(
    name: &str,
    builtin: impl Fn(&str) -> Option<T>,
    known: &[&str],
) -> Result<T> {
    if let Some(path) = preset_file(name) {
        return read_json(&path);
    }
    builtin(name).ok_or_else(|| {
        Error::Usage(format!(
            "unknown preset '{name}' (known: {})",
            known.join(", ")
        ))
    })
}

pub fn model(name: &str) -> Result<TransformerConfig> {
    lookup(name, builtin_model, MODEL_PRESETS)
}

pub fn hardware(name: &str) -> Result<HardwareProfile> {
    lookup(name, builtin_hardware, HARDWARE_PRESETS)
}

pub fn experiment(name: &str) -> Result<ExperimentConfig> {
    lookup(name, builtin_experiment, EXPERIMENT_PRESETS)
}

/// Load `preset:<name>` through `preset`, anything else as a JSON file.
pub fn load_or_preset<T: DeserializeOwned>(
    arg: &str,
    preset: impl Fn(&str) -> Result<T>,
) -> Result<T> {
    match arg.strip_prefix("preset:") {
        Some(name) => preset(name),
        None => read_json(Path::new(arg)),
    }
}

/// Either a preset name or an inline value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Named<T> {
    Preset(String),
    Inline(T),
}

impl Named<TransformerConfig> {
    pub fn resolve(&self) -> Result<TransformerConfig> {
        match self {
            Named::Preset(name) => model(name),
            Named::Inline(cfg) => Ok(*cfg),
        }
    }
}

impl Named<HardwareProfile> {
    pub fn resolve(&self) -> Result<HardwareProfile> {
        match self {
            Named::Preset(name) => hardware(name),
            Named::Inline(hw) => Ok(hw.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseSelection {
    #[default]
    Both,
    Phase1,
    Phase2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Named<TransformerConfig>,
    pub hardware: Named<HardwareProfile>,
    pub gpu_budget: u64,
    pub recompute: bool,
    pub phases: PhaseSelection,
    pub full_iteration: bool,
    pub world_size: u32,
    pub rank: u32,
    pub page_bytes: u64,
    pub iterations: usize,
    pub update: UpdateMode,
    pub seed: u64,
    /// Also run the toy trainer in both modes when set.
    pub toy: Option<ToyRun>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: Named::Preset("tiny-2l".into()),
            hardware: Named::Preset("a100-server".into()),
            gpu_budget: 40 << 30,
            recompute: false,
            phases: PhaseSelection::Both,
            full_iteration: false,
            world_size: 8,
            rank: 0,
            page_bytes: crate::pagemem::DEFAULT_PAGE_BYTES,
            iterations: 1,
            update: UpdateMode::None,
            seed: 0,
            toy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyRun {
    pub config: ToyConfig,
    pub delays: String,
    pub iterations: u64,
}

impl Default for ToyRun {
    fn default() -> Self {
        ToyRun {
            config: ToyConfig::default(),
            delays: "ssd".into(),
            iterations: 200,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gpu_budget == 0 {
            return Err(Error::InvalidConfig("gpu_budget must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be positive".into()));
        }
        self.model.resolve()?.validate()?;
        self.hardware.resolve()?.validate()?;
        if let Some(toy) = &self.toy {
            toy.config.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::footprint::param_count;

    #[test]
    fn builtins_resolve() {
        for name in MODEL_PRESETS {
            model(name).unwrap().validate().unwrap();
        }
        for name in EXPERIMENT_PRESETS {
            experiment(name).unwrap().validate().unwrap();
        }
        assert!(matches!(model("gpt4"), Err(Error::Usage(_))));
    }

    #[test]
    fn small_model_param_count() {
        assert_eq!(
            param_count(&model("gpt3-1.7b").unwrap()).unwrap(),
            1_528_823_808
        );
    }

    #[test]
    fn config_accepts_inline_or_named() {
        let c: ExperimentConfig =
            serde_json::from_str(r#"{"model": "gpt3-1.7b", "gpu_budget": 1024}"#).unwrap();
        assert_eq!(c.model, Named::Preset("gpt3-1.7b".into()));
        let inline = r#"{"model": {"batch_size":1,"seq_len":8,"d_model":8,"d_ffn":32,"num_layers":1,"num_heads":2}}"#;
        let c: ExperimentConfig = serde_json::from_str(inline).unwrap();
        assert_eq!(c.model.resolve().unwrap().d_model, 8);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"budget": 1}"#).is_err());
    }
}
