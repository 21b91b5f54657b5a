//! Run configuration: every option can come from `--config run.json` or from
//! a flag, and flags win. JSON keys are the snake_case field names below.

use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};

use mvt_core::dataset::SynthConfig;
use mvt_core::model::{Arch, ModelConfig, Readout};
use mvt_core::training::{LrSchedule, TrainConfig};

macro_rules! overlay {
    ($t:ident { $($f:ident),* $(,)? }) => {
        impl $t {
            /// Fields set here take precedence over `base`.
            pub fn overlay(self, base: Self) -> Self {
                Self { $($f: self.$f.or(base.$f)),* }
            }
        }
    };
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct ModelArgs {
    /// Architecture preset.
    #[arg(long, value_parser = parse_from_str::<Arch>)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub local_blocks: Option<usize>,
    #[arg(long)]
    pub global_blocks: Option<usize>,
    /// Class-token readout: first (LCC token) or mean (all four).
    #[arg(long, value_parser = parse_from_str::<Readout>)]
    pub readout: Option<Readout>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub d_embed: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub mlp_ratio: Option<usize>,
}

overlay!(ModelArgs {
    arch,
    local_blocks,
    global_blocks,
    readout,
    image_size,
    patch_size,
    channels,
    d_embed,
    heads,
    mlp_ratio,
});

impl ModelArgs {
    pub fn is_empty(&self) -> bool {
        self.arch.is_none()
            && self.local_blocks.is_none()
            && self.global_blocks.is_none()
            && self.readout.is_none()
            && self.image_size.is_none()
            && self.patch_size.is_none()
            && self.channels.is_none()
            && self.d_embed.is_none()
            && self.heads.is_none()
            && self.mlp_ratio.is_none()
    }

    /// Expands the preset (toy by default) and applies overrides.
    pub fn build(&self) -> ModelConfig {
        let mut cfg = ModelConfig::preset(self.arch.unwrap_or(Arch::Toy));
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut cfg.local_blocks, self.local_blocks);
        set(&mut cfg.global_blocks, self.global_blocks);
        set(&mut cfg.image_size, self.image_size);
        set(&mut cfg.patch_size, self.patch_size);
        set(&mut cfg.channels, self.channels);
        set(&mut cfg.d_embed, self.d_embed);
        set(&mut cfg.heads, self.heads);
        set(&mut cfg.mlp_ratio, self.mlp_ratio);
        if let Some(r) = self.readout {
            cfg.readout = r;
        }
        cfg
    }
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// cosine or constant.
    #[arg(long, value_parser = parse_from_str::<LrSchedule>)]
    pub lr_schedule: Option<LrSchedule>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
}

overlay!(TrainArgs {
    epochs,
    batch_size,
    learning_rate,
    weight_decay,
    lr_schedule,
    warmup_epochs,
    folds,
});

impl TrainArgs {
    pub fn build(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            lr_schedule: self.lr_schedule.unwrap_or(d.lr_schedule),
            warmup_epochs: self.warmup_epochs.unwrap_or(d.warmup_epochs),
            seed,
            folds: self.folds.unwrap_or(d.folds),
        }
    }
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub cases: Option<usize>,
    #[arg(long)]
    pub malignant_fraction: Option<f64>,
    #[arg(long)]
    pub blob_intensity: Option<f64>,
    #[arg(long)]
    pub blob_radius: Option<f64>,
    #[arg(long)]
    pub distractor_rate: Option<f64>,
    #[arg(long)]
    pub noise_scale: Option<f64>,
    #[arg(long)]
    pub jitter: Option<usize>,
    #[arg(long)]
    pub bit_depth: Option<u8>,
    /// Side length of the generated square views.
    #[arg(long = "synth-image-size")]
    pub synth_image_size: Option<usize>,
}

overlay!(SynthArgs {
    cases,
    malignant_fraction,
    blob_intensity,
    blob_radius,
    distractor_rate,
    noise_scale,
    jitter,
    bit_depth,
    synth_image_size,
});

impl SynthArgs {
    pub fn build(&self, seed: u64) -> SynthConfig {
        let d = SynthConfig::default();
        SynthConfig {
            image_size: self.synth_image_size.unwrap_or(d.image_size),
            cases: self.cases.unwrap_or(d.cases),
            malignant_fraction: self.malignant_fraction.unwrap_or(d.malignant_fraction),
            blob_intensity: self.blob_intensity.unwrap_or(d.blob_intensity),
            blob_radius: self.blob_radius.unwrap_or(d.blob_radius),
            distractor_rate: self.distractor_rate.unwrap_or(d.distractor_rate),
            noise_scale: self.noise_scale.unwrap_or(d.noise_scale),
            jitter: self.jitter.unwrap_or(d.jitter),
            bit_depth: self.bit_depth.unwrap_or(d.bit_depth),
            seed,
        }
    }
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long = "config")]
    #[serde(skip)]
    pub config_path: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "data")]
    pub data_dir: Option<PathBuf>,
    #[arg(long = "out")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub run_name: Option<String>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

overlay!(CommonArgs {
    config_path,
    seed,
    data_dir,
    out_dir,
    run_name,
    jobs,
});

/// Everything a `--config` file may hold.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub common: CommonArgs,
    #[serde(flatten)]
    pub model: ModelArgs,
    #[serde(flatten)]
    pub train: TrainArgs,
    #[serde(flatten)]
    pub synth: SynthArgs,
    #[serde(default)]
    pub splits: Option<String>,
}

impl RunConfig {
    pub fn load(path: Option<&PathBuf>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).map_err(|e| crate::usage(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let obj = value.as_object().ok_or("expected a JSON object")?;
        // Flattened structs cannot reject unknown keys themselves.
        let known = serde_json::to_value(Self::default()).map_err(|e| e.to_string())?;
        if let Some(key) = obj.keys().find(|k| !known.as_object().is_some_and(|m| m.contains_key(*k))) {
            return Err(format!("unknown key {key:?}"));
        }
        serde_json::from_value(value).map_err(|e| e.to_string())
    }
}

fn parse_from_str<T>(s: &str) -> Result<T, String>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

pub fn parse_splits(s: &str) -> anyhow::Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|part| {
            let (l, g) = part
                .trim()
                .split_once(':')
                .ok_or_else(|| crate::usage(format!("split {part:?} is not LOCAL:GLOBAL")))?;
            let num = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| crate::usage(format!("split {part:?} is not LOCAL:GLOBAL")))
            };
            Ok((num(l)?, num(g)?))
        })
        .collect()
}
