//! Run configuration: one TOML file drives every pipeline, with dotted-path
//! `--set key=value` overrides applied before deserialization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controls::ControlKind;
use crate::error::{Error, Result};
use crate::networks::UNetConfig;
use crate::schedule::ScheduleKind;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// `f32` (training default) or `f64`.
    pub precision: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 0, out_dir: PathBuf::from("runs/default"), precision: "f32".into() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub path: PathBuf,
    pub eval_path: PathBuf,
    pub resolution: usize,
    pub count: usize,
    pub eval_count: usize,
    pub antialias: bool,
    pub master_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: PathBuf::from("data/train"),
            eval_path: PathBuf::from("data/eval"),
            resolution: 32,
            count: 4096,
            eval_count: 512,
            antialias: false,
            master_seed: 7,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { steps: 1000, kind: ScheduleKind::Linear, beta_min: 1e-4, beta_max: 0.02 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    PretrainBase,
    PretrainControlnet,
    Finetune,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub stage: StageName,
    pub control_kind: ControlKind,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ckpt_every: usize,
    /// Probability of replacing the class label with the null index.
    pub guidance_drop_prob: f64,
    pub grad_clip: f64,
    /// Unfreeze the base UNet during control-branch stages (ablation).
    pub joint_base: bool,
    /// Sample `t` inside the reward threshold instead of gating (ablation).
    pub restrict_t_sampling: bool,
    pub base_ckpt: PathBuf,
    pub control_ckpt: PathBuf,
    pub probe_ckpt: PathBuf,
    /// Reward-model probe (depth task only).
    pub reward_probe_ckpt: PathBuf,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            stage: StageName::PretrainBase,
            control_kind: ControlKind::Depth,
            iterations: 2000,
            batch_size: 32,
            lr: 1e-4,
            ckpt_every: 500,
            guidance_drop_prob: 0.1,
            grad_clip: 1.0,
            joint_base: false,
            restrict_t_sampling: false,
            base_ckpt: PathBuf::new(),
            control_ckpt: PathBuf::new(),
            probe_ckpt: PathBuf::new(),
            reward_probe_ckpt: PathBuf::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    /// Steps, or a fraction of T when <= 1.0.
    pub tau_reward: f64,
    /// Steps, or a fraction of T when <= 1.0.
    pub tau_align: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        // depth-task defaults; edge tasks use alpha = 1.0, tau_reward = 200
        LossSection { alpha: 0.5, beta: 1.0, tau_reward: 400.0, tau_align: 920.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSource {
    Base,
    Controlled,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSection {
    pub bottleneck: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub source: ProbeSource,
    pub model_ckpt: PathBuf,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            bottleneck: 64,
            iterations: 2000,
            batch_size: 8,
            lr: 1e-3,
            source: ProbeSource::Controlled,
            model_ckpt: PathBuf::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub samples: usize,
    pub sample_steps: usize,
    pub guidance_scale: f64,
    pub seeds: Vec<u64>,
    pub ancestral: bool,
    pub checkpoint: PathBuf,
    /// Evaluation-model probe (depth extraction from generated images).
    pub probe_ckpt: PathBuf,
    pub dump_images: bool,
    /// Batch size used while sampling.
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            samples: 256,
            sample_steps: 50,
            guidance_scale: 3.0,
            seeds: vec![0, 1, 2, 3],
            ancestral: false,
            checkpoint: PathBuf::new(),
            probe_ckpt: PathBuf::new(),
            dump_images: false,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct StudySection {
    /// Timesteps (or fractions of T when <= 1.0) to probe.
    pub t_grid: Vec<f64>,
    pub samples: usize,
    pub seeds: Vec<u64>,
    pub base_ckpt: PathBuf,
    pub control_ckpt: PathBuf,
    pub base_probe_ckpt: PathBuf,
    pub control_probe_ckpt: PathBuf,
    /// Reward-model probe used for depth extraction from one-step predictions.
    pub reward_probe_ckpt: PathBuf,
    pub control_kind: ControlKind,
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection {
            t_grid: vec![0.01, 0.1, 0.2, 0.4, 0.6, 0.8, 0.9, 0.99],
            samples: 256,
            seeds: vec![0, 1, 2, 3],
            base_ckpt: PathBuf::new(),
            control_ckpt: PathBuf::new(),
            base_probe_ckpt: PathBuf::new(),
            control_probe_ckpt: PathBuf::new(),
            reward_probe_ckpt: PathBuf::new(),
            control_kind: ControlKind::Depth,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateSection {
    pub tau_align_list: Vec<f64>,
    pub tau_reward_list: Vec<f64>,
    pub iterations: usize,
    /// Run evaluation on each grid point's final checkpoint.
    pub evaluate: bool,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            tau_align_list: vec![0.0, 0.92],
            tau_reward_list: vec![0.0, 0.2, 0.4, 0.92],
            iterations: 1000,
            evaluate: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotSection {
    pub csv: PathBuf,
    pub x: String,
    pub y: Vec<String>,
    /// Optional column whose values split rows into separate series.
    pub group: String,
    pub out: PathBuf,
}

impl Default for PlotSection {
    fn default() -> Self {
        PlotSection {
            csv: PathBuf::new(),
            x: "step".into(),
            y: vec!["loss_total".into()],
            group: String::new(),
            out: PathBuf::new(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub run: RunSection,
    pub data: DataSection,
    pub model: UNetConfig,
    pub schedule: ScheduleSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub probe: ProbeSection,
    pub eval: EvalSection,
    pub study: StudySection,
    pub ablate: AblateSection,
    pub plot: PlotSection,
}

impl Config {
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Config> {
        let mut value: toml::Value = text
            .parse()
            .map_err(|e| Error::Config(format!("config parse: {e}")))?;
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        let mut cfg: Config = value
            .try_into()
            .map_err(|e| Error::Config(format!("config decode: {e}")))?;
        // keep the model resolution in lockstep with the dataset resolution
        cfg.model.resolution = cfg.data.resolution;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.run.precision != "f32" && self.run.precision != "f64" {
            return Err(Error::Config(format!(
                "run.precision must be f32 or f64, got {}",
                self.run.precision
            )));
        }
        if self.schedule.steps < 2 {
            return Err(Error::Config("schedule.steps must be >= 2".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.train.guidance_drop_prob) {
            return Err(Error::Config("train.guidance_drop_prob must be in [0, 1]".into()));
        }
        if self.loss.alpha < 0.0 || self.loss.beta < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Parses `raw` as a TOML literal (bool, integer, float, array, string) and
/// writes it at the dotted path `key`.
fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parsed: toml::Value = {
        let attempt = format!("v = {raw}");
        match attempt.parse::<toml::Value>() {
            Ok(toml::Value::Table(mut t)) => t.remove("v").unwrap(),
            _ => toml::Value::String(raw.to_string()),
        }
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.len() < 2 {
        return Err(Error::Config(format!(
            "override key '{key}' must be a dotted path like train.lr"
        )));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': not a table at '{part}'")))?;
        node = table
            .entry((*part).to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override '{key}': parent is not a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}
