//! Run configuration: one JSON file plus dotted-path overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use vpgc_core::decoder::ModelConfig;
use vpgc_core::scene::SceneConfig;
use vpgc_core::tokenizer::Vocab;
use vpgc_core::evalkit::Shuffle;
use vpgc_core::trainpipe::{DatasetConfig, TargetRule, TrainConfig, Upsample};
use vpgc_core::vpgc::{BackboneConfig, CompletionConfig};

/// Environment variable naming the directory all outputs go under.
pub const OUT_ROOT_ENV: &str = "VPGC_OUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub upsample: Upsample,
    /// How gen-data picks the edited object.
    pub target: TargetRule,
    /// Random-target pairs for backbone training.
    pub pretrain_pairs: usize,
    pub captions: usize,
    /// Least-significance pairs for completion training.
    pub train_pairs: usize,
    pub heldout_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            upsample: Upsample::Area,
            target: TargetRule::MinSignificance,
            pretrain_pairs: 4000,
            captions: 2000,
            train_pairs: 500,
            heldout_pairs: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponderKind {
    Model,
    /// Answers with the gold response; checks the scoring plumbing.
    Echo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Records scored per task.
    pub cap: usize,
    pub max_tokens: usize,
    pub responder: ResponderKind,
    /// Also run the image-order shuffle probe.
    pub shuffle_probe: bool,
    pub shuffle: Shuffle,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cap: 500,
            max_tokens: 24,
            responder: ResponderKind::Model,
            shuffle_probe: true,
            shuffle: Shuffle::Random { seed: 0 },
        }
    }
}

/// Where each command reads and writes. Relative paths live under the
/// output root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub backbone: PathBuf,
    pub train: PathBuf,
    pub eval: PathBuf,
    pub probe: PathBuf,
    pub attn: PathBuf,
    /// Completion checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Defaults to `eval.jsonl` in the data directory.
    pub records: Option<PathBuf>,
    /// Image for dump-attn; defaults to the first held-out original.
    pub image: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: "data".into(),
            backbone: "backbone".into(),
            train: "train".into(),
            eval: "eval".into(),
            probe: "probe".into(),
            attn: "attn".into(),
            resume: None,
            records: None,
            image: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Insertion layers to sweep.
    pub layers: Vec<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { layers: vec![2, 4, 6] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub completion: CompletionConfig,
    pub data: DataConfig,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
    pub paths: PathsConfig,
    /// Stop training after this step, checkpoint included; the schedule
    /// still spans the configured step count.
    pub stop_at: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vocab = Vocab::default_vocab();
        Self {
            seed: 0,
            backbone: BackboneConfig {
                model: ModelConfig {
                    vocab: vocab.len(),
                    ..BackboneConfig::default().model
                },
                ..BackboneConfig::default()
            },
            completion: CompletionConfig::default(),
            data: DataConfig::default(),
            pretrain: TrainConfig {
                steps: 6000,
                warmup_steps: 300,
                optimizer: numkit::AdamWConfig {
                    lr_peak: 2e-3,
                    weight_decay: 0.0,
                    ..Default::default()
                },
                ..TrainConfig::default()
            },
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            probe: ProbeConfig::default(),
            paths: PathsConfig::default(),
            stop_at: None,
        }
    }
}

/// Sets `path` (dot-separated) in `root` to `raw`, parsed as JSON when it
/// parses and as a string otherwise. The key must already exist.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("{} is not an object", parts[..i].join(".")))?;
        node = obj.get_mut(*key).ok_or_else(|| anyhow!("unknown config key {path:?}"))?;
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    *node = value;
    Ok(())
}

impl RunConfig {
    /// Defaults, then `file` if given, then each `key=value` override.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(f) = file {
            let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
            let from_file: RunConfig =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", f.display()))?;
            value = serde_json::to_value(from_file)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("override {o:?} is not key=value"))?;
            apply_override(&mut value, k.trim(), v.trim())?;
        }
        let cfg: RunConfig = serde_json::from_value(value).context("resolved config is invalid")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.model.validate()?;
        let vocab = Vocab::default_vocab();
        if self.backbone.model.vocab != vocab.len() {
            bail!(
                "backbone.model.vocab is {} but the vocabulary has {} tokens",
                self.backbone.model.vocab,
                vocab.len()
            );
        }
        if self.backbone.image_size != self.data.scene.width || self.data.scene.width != self.data.scene.height {
            bail!("images must be square and match backbone.image_size");
        }
        Ok(())
    }

    pub fn dataset(&self, target: TargetRule) -> DatasetConfig {
        DatasetConfig {
            scene: self.data.scene.clone(),
            seed: self.seed,
            target,
            upsample: self.data.upsample,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}

/// `path` under the output root when relative and the root is set.
pub fn out_dir(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}
