#![allow(dead_code)]

use std::path::Path;

use vpgc_cli::RunConfig;

/// Overrides for a model and dataset small enough to train in seconds.
pub fn tiny_overrides(root: &Path) -> Vec<String> {
    let p = |name: &str| format!("paths.{name}={}", root.join(name).display());
    let mut v: Vec<String> = [
        "backbone.model.layers=4",
        "backbone.model.width=16",
        "backbone.model.heads=2",
        "backbone.model.prompts=2",
        "backbone.model.max_len=128",
        "backbone.image_size=32",
        "backbone.patch=4",
        "backbone.resampler_blocks=1",
        "data.scene.width=32",
        "data.scene.height=32",
        "data.scene.n_objects=[2,3]",
        "data.scene.size_range=[5,9]",
        "data.pretrain_pairs=24",
        "data.captions=16",
        "data.train_pairs=10",
        "data.heldout_pairs=6",
        "pretrain.steps=3",
        "pretrain.warmup_steps=1",
        "pretrain.batch_disc=2",
        "pretrain.batch_cap=2",
        "train.steps=4",
        "train.warmup_steps=1",
        "train.batch_disc=2",
        "train.batch_cap=2",
        "eval.max_tokens=6",
        "probe.layers=[1,2,3]",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for name in ["data", "backbone", "train", "eval", "probe", "attn"] {
        v.push(p(name));
    }
    v
}

pub fn tiny(root: &Path, extra: &[&str]) -> RunConfig {
    let mut o = tiny_overrides(root);
    o.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::resolve(None, &o).unwrap()
}

/// Tiny config with a pretrained backbone and generated data under `root`.
pub fn prepared(root: &Path, extra: &[&str]) -> RunConfig {
    let cfg = tiny(root, extra);
    vpgc_cli::commands::pretrain(&cfg).unwrap();
    vpgc_cli::commands::gen_data(&cfg).unwrap();
    cfg
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
