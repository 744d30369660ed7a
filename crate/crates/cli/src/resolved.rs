//! Resolved run configurations: one serializable struct per command, fully
//! populated after merging flags over an optional `--config` file. Unknown
//! keys in config files are rejected; every run echoes its resolved config
//! next to the primary output so it can be replayed exactly.

use std::path::{Path, PathBuf};

use ditail_core::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub trait CommandConfig: Serialize + DeserializeOwned {
    const COMMAND: &'static str;
    fn command_field(&self) -> &str;
}

/// Loads and validates a `--config` file for one command.
pub fn load_config<C: CommandConfig>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path)?;
    let cfg: C =
        toml::from_str(&text).map_err(|e| Error::Config(format!("config {path:?}: {e}")))?;
    if cfg.command_field() != C::COMMAND {
        return Err(Error::Config(format!(
            "config {path:?} is for command {:?}, expected {:?}",
            cfg.command_field(),
            C::COMMAND
        )));
    }
    Ok(cfg)
}

/// Writes the resolved-config echo as `<out>.config.toml`, atomically.
pub fn write_echo<C: CommandConfig>(out: &Path, cfg: &C) -> Result<()> {
    let text =
        toml::to_string_pretty(cfg).map_err(|e| Error::Format(format!("config echo: {e}")))?;
    let mut name = out.as_os_str().to_owned();
    name.push(".config.toml");
    ditail_core::codec::atomic_write(&PathBuf::from(name), text.as_bytes())
}

/// flag > config file > default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: Option<T>, name: &str) -> Result<T> {
    flag.or(file)
        .or(default)
        .ok_or_else(|| Error::Usage(format!("missing required --{name}")))
}

macro_rules! command_config {
    ($name:ident, $cmd:literal { $($(#[$meta:meta])* pub $field:ident : $ty:ty,)* }) => {
        #[derive(Debug, Clone, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            pub command: String,
            pub seed: u64,
            pub out: PathBuf,
            $($(#[$meta])* pub $field: $ty,)*
        }

        impl CommandConfig for $name {
            const COMMAND: &'static str = $cmd;
            fn command_field(&self) -> &str {
                &self.command
            }
        }
    };
}

command_config!(DatagenConfig, "datagen" {
    pub style: String,
    pub n: usize,
    pub size: usize,
    pub patch: usize,
});

command_config!(TrainConfig, "train" {
    pub data: PathBuf,
    pub steps: u64,
    pub lr: f64,
    pub layers: usize,
    pub dim: usize,
    pub patch: usize,
    pub cond_dim: usize,
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
    pub embed_seed: u64,
});

command_config!(FinetuneConfig, "finetune" {
    pub base: PathBuf,
    pub style: String,
    pub steps: u64,
    pub lr: f64,
});

command_config!(GenerateConfig, "generate" {
    pub model: PathBuf,
    pub prompt: String,
    pub negative: String,
    pub omega: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub save_latents: Option<PathBuf>,
    pub capture_mode: String,
});

command_config!(InvertConfig, "invert" {
    pub model: PathBuf,
    pub image: PathBuf,
    pub prompt: String,
    pub negative: String,
    pub alpha: f64,
    pub beta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inv_steps: Option<usize>,
    pub capture_mode: String,
});

command_config!(DitailConfig, "ditail" {
    pub src_latents: PathBuf,
    pub target: PathBuf,
    pub prompt: String,
    pub negative: String,
    pub omega: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub res_layers: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attn_layers: Option<String>,
    pub thresh_res: f64,
    pub thresh_attn: f64,
});

command_config!(MatrixConfig, "matrix" {
    pub models: Vec<PathBuf>,
    pub prompt: String,
    pub negative: String,
    pub omega: f64,
});

command_config!(EditConfig, "edit" {
    pub image: PathBuf,
    pub invert_with: PathBuf,
    pub target: PathBuf,
    pub prompt: String,
    pub negative: String,
    pub inv_prompt: String,
    pub inv_negative: String,
    pub alpha: f64,
    pub beta: f64,
    pub omega: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
});

command_config!(MetricsConfig, "metrics" {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_a: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_b: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub set_a: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub set_b: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    pub probe: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_probe: Option<usize>,
});
