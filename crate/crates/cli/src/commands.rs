//! One function per subcommand. Each resolves its directories, writes the
//! resolved config next to its outputs and returns a summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use vpgc_core::evalkit::{
    evaluate, probe_csv, read_records, report_csv, shuffle_probe, EchoResponder, EvalRecord, EvalResult, ModelResponder,
    ProbeResult, Responder, SegmentRef,
};
use vpgc_core::nn::Module;
use vpgc_core::prompt::{CAPTION_INSTRUCTION, DIFFERENCE_INSTRUCTION};
use vpgc_core::scene::{caption, Raster, SceneSpec};
use vpgc_core::svg;
use vpgc_core::tokenizer::Vocab;
use vpgc_core::trainpipe::dataset::{
    build_captions, load_captions, load_pairs, write_captions, write_manifest, BuildSummary,
};
use vpgc_core::trainpipe::train::{restore, save_module, trace_csv};
use vpgc_core::trainpipe::{
    build_pairs, caption_example, difference_example, token_accuracy, Example, Phase, TargetRule, TrainPair, Trainer,
};
use vpgc_core::vpg::avg_attention;
use vpgc_core::vpgc::{Backbone, Completion, Variant};

use crate::config::{out_dir, ResponderKind, RunConfig};

pub const PRETRAIN_STREAM: u64 = 10;
pub const CAPTION_STREAM: u64 = 11;
pub const TRAIN_STREAM: u64 = 20;
pub const HELDOUT_STREAM: u64 = 21;

pub const BACKBONE_FILE: &str = "backbone.ck";
pub const COMPLETION_FILE: &str = "completion.ck";
pub const LOSS_FILE: &str = "loss.csv";

fn prepare(dir: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = out_dir(dir);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.write(&dir)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn histogram(s: &BuildSummary) -> String {
    s.kinds.iter().map(|(k, n)| format!("{k}={n}")).collect::<Vec<_>>().join(" ")
}

/// Backbone with the weights of `<paths.backbone>/backbone.ck`. The insert
/// layer comes from `cfg`, so a sweep can reuse one checkpoint.
pub fn load_backbone(cfg: &RunConfig) -> Result<Backbone> {
    let path = out_dir(&cfg.paths.backbone).join(BACKBONE_FILE);
    let ck = numkit::checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let mut bb = Backbone::new(cfg.backbone.clone())?;
    restore(&ck, &mut bb.params_mut()).with_context(|| format!("restoring {}", path.display()))?;
    bb.set_trainable(false);
    Ok(bb)
}

pub fn load_completion(cfg: &RunConfig, bb: &Backbone) -> Result<Completion> {
    let mut comp = Completion::new(bb, &cfg.completion)?;
    if comp.variant() != Variant::Off {
        let path = out_dir(&cfg.paths.train).join(COMPLETION_FILE);
        let ck = numkit::checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
        restore(&ck, &mut comp.params_mut()).with_context(|| format!("restoring {}", path.display()))?;
    }
    comp.set_trainable(false);
    Ok(comp)
}

fn difference_examples(vocab: &Vocab, bb: &Backbone, pairs: &[TrainPair]) -> Result<Vec<Example>> {
    Ok(pairs
        .iter()
        .map(|p| difference_example(vocab, bb, p))
        .collect::<vpgc_core::Result<_>>()?)
}

fn caption_examples(vocab: &Vocab, bb: &Backbone, scenes: &[(u64, SceneSpec)]) -> Result<Vec<Example>> {
    Ok(scenes
        .iter()
        .map(|(_, s)| caption_example(vocab, bb, s))
        .collect::<vpgc_core::Result<_>>()?)
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainSummary {
    pub steps: u64,
    pub trainable: usize,
    pub final_loss_disc: Option<f64>,
    pub final_loss_cap: Option<f64>,
    pub pairs: BuildSummary,
}

/// Trains generator and decoder on random-target pairs plus captions.
pub fn pretrain(cfg: &RunConfig) -> Result<PretrainSummary> {
    let dir = prepare(&cfg.paths.backbone, cfg)?;
    let vocab = Vocab::default_vocab();
    let dcfg = cfg.dataset(TargetRule::Random);
    let (pairs, built) = build_pairs(cfg.data.pretrain_pairs, PRETRAIN_STREAM, None, &dcfg)?;
    let scenes = build_captions(cfg.data.captions, CAPTION_STREAM, &dcfg)?;
    log::info!("pretrain data: {} pairs ({})", built.pairs, histogram(&built));
    write_manifest(&dir, "pairs", &pairs)?;

    let mut bb = Backbone::new(cfg.backbone.clone())?;
    let disc = difference_examples(&vocab, &bb, &pairs)?;
    let caps = caption_examples(&vocab, &bb, &scenes)?;
    let mut off = Completion::Off;
    let mut tr = Trainer::new(Phase::Backbone, cfg.pretrain.clone(), &mut bb, &mut off)?;
    let trainable = tr.trainable_count(&mut bb, &mut off);
    let until = cfg.stop_at.unwrap_or(cfg.pretrain.steps);
    let result = tr.run(&mut bb, &mut off, &disc, &caps, until);
    fs::write(dir.join(LOSS_FILE), trace_csv(&tr.trace))?;
    result?;
    bb.set_trainable(false);
    let header = serde_json::json!({ "backbone": cfg.backbone });
    save_module(&dir.join(BACKBONE_FILE), &header, &bb.params())?;
    let last = tr.trace.last();
    let summary = PretrainSummary {
        steps: tr.step,
        trainable,
        final_loss_disc: last.map(|r| r.loss_disc),
        final_loss_cap: last.map(|r| r.loss_cap),
        pairs: built,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct GenDataSummary {
    pub train: BuildSummary,
    pub heldout: BuildSummary,
    pub captions: usize,
    pub records: usize,
}

impl GenDataSummary {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (name, b) in [("train", &self.train), ("heldout", &self.heldout)] {
            let _ = writeln!(s, "{name}: pairs={} skipped={} kinds: {}", b.pairs, b.skipped, histogram(b));
        }
        let _ = writeln!(s, "captions: {}", self.captions);
        let _ = write!(s, "eval records: {}", self.records);
        s
    }
}

/// Eval records built from held-out pairs: an open difference task over
/// both images and a caption choice task over the original.
pub fn eval_records(heldout: &[TrainPair]) -> Vec<EvalRecord> {
    let img = |i: usize, which: &str| SegmentRef::Image {
        img: format!("heldout/{i:05}_{which}.ppm"),
    };
    let mut out = Vec::with_capacity(2 * heldout.len());
    for (i, p) in heldout.iter().enumerate() {
        out.push(EvalRecord {
            id: format!("difference-{i:05}"),
            task_id: "difference".into(),
            category: "discriminative".into(),
            task_instruction: DIFFERENCE_INSTRUCTION.into(),
            task_instance: vec![img(i, "before"), img(i, "after")],
            options: None,
            answer: None,
            response: p.difference_sentence.clone(),
        });
    }
    for (i, p) in heldout.iter().enumerate() {
        let gold = caption(&p.before);
        let mut options = vec![gold.clone()];
        for k in 1..heldout.len() {
            if options.len() == 4 {
                break;
            }
            let c = caption(&heldout[(i + k) % heldout.len()].before);
            if !options.contains(&c) {
                options.push(c);
            }
        }
        if options.len() < 2 {
            continue;
        }
        let answer = i % options.len();
        options.swap(0, answer);
        out.push(EvalRecord {
            id: format!("caption-{i:05}"),
            task_id: "caption_choice".into(),
            category: "captioning".into(),
            task_instruction: CAPTION_INSTRUCTION.into(),
            task_instance: vec![img(i, "before")],
            options: Some(options),
            answer: Some(answer),
            response: gold,
        });
    }
    out
}

fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

/// Completion-phase data: train and held-out pairs, captions, eval records.
pub fn gen_data(cfg: &RunConfig) -> Result<GenDataSummary> {
    let bb = match cfg.data.target {
        TargetRule::MinSignificance => Some(load_backbone(cfg).context("significance targeting needs a backbone")?),
        TargetRule::Random => None,
    };
    let dir = prepare(&cfg.paths.data, cfg)?;
    let dcfg = cfg.dataset(cfg.data.target);
    let (train, train_sum) = build_pairs(cfg.data.train_pairs, TRAIN_STREAM, bb.as_ref(), &dcfg)?;
    let (heldout, held_sum) = build_pairs(cfg.data.heldout_pairs, HELDOUT_STREAM, bb.as_ref(), &dcfg)?;
    let scenes = build_captions(cfg.data.captions, CAPTION_STREAM, &dcfg)?;
    write_manifest(&dir, "train", &train)?;
    write_manifest(&dir, "heldout", &heldout)?;
    write_captions(&dir, "captions", &scenes)?;
    let records = eval_records(&heldout);
    write_records(&dir.join("eval.jsonl"), &records)?;
    let summary = GenDataSummary {
        train: train_sum,
        heldout: held_sum,
        captions: scenes.len(),
        records: records.len(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub variant: String,
    pub insert_layer: usize,
    pub steps: u64,
    pub trainable: usize,
    /// Held-out token accuracy of the frozen backbone alone.
    pub baseline_accuracy: Option<f64>,
    pub accuracy: Option<f64>,
}

struct TrainData {
    disc: Vec<Example>,
    caps: Vec<Example>,
    heldout: Option<Vec<Example>>,
}

fn train_data(cfg: &RunConfig, vocab: &Vocab, bb: &Backbone) -> Result<TrainData> {
    let data = out_dir(&cfg.paths.data);
    let pairs = load_pairs(&data.join("train.jsonl")).context("loading the train manifest")?;
    let scenes = load_captions(&data.join("captions.jsonl")).context("loading captions")?;
    let held_path = data.join("heldout.jsonl");
    let heldout = if held_path.exists() {
        Some(difference_examples(vocab, bb, &load_pairs(&held_path)?)?)
    } else {
        None
    };
    Ok(TrainData {
        disc: difference_examples(vocab, bb, &pairs)?,
        caps: caption_examples(vocab, bb, &scenes)?,
        heldout,
    })
}

/// Trains a completion module on a frozen backbone; returns the summary and
/// the trained module.
fn train_completion(
    cfg: &RunConfig,
    bb: &mut Backbone,
    data: &TrainData,
    dir: &Path,
    resume: Option<&Path>,
) -> Result<(TrainSummary, Completion)> {
    let mut comp = Completion::new(bb, &cfg.completion)?;
    let mut tr = match resume {
        Some(p) => Trainer::resume(p, cfg.train.clone(), bb, &mut comp)
            .with_context(|| format!("resuming from {}", p.display()))?,
        None => Trainer::new(Phase::Completion, cfg.train.clone(), bb, &mut comp)?,
    };
    let trainable = tr.trainable_count(bb, &mut comp);
    let until = cfg.stop_at.unwrap_or(cfg.train.steps);
    let result = tr.run(bb, &mut comp, &data.disc, &data.caps, until);
    fs::write(dir.join(LOSS_FILE), trace_csv(&tr.trace))?;
    result?;
    tr.save(&dir.join(COMPLETION_FILE), bb, &mut comp, serde_json::to_value(&cfg.completion)?)?;
    comp.set_trainable(false);
    let (baseline_accuracy, accuracy) = match &data.heldout {
        Some(h) => (
            Some(token_accuracy(bb, &Completion::Off, h)?),
            Some(token_accuracy(bb, &comp, h)?),
        ),
        None => (None, None),
    };
    let summary = TrainSummary {
        variant: cfg.completion.variant.name().into(),
        insert_layer: bb.insert_layer()?,
        steps: tr.step,
        trainable,
        baseline_accuracy,
        accuracy,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok((summary, comp))
}

pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    let vocab = Vocab::default_vocab();
    let mut bb = load_backbone(cfg)?;
    let data = train_data(cfg, &vocab, &bb)?;
    let dir = prepare(&cfg.paths.train, cfg)?;
    let resume = cfg.paths.resume.as_deref().map(out_dir);
    Ok(train_completion(cfg, &mut bb, &data, &dir, resume.as_deref())?.0)
}

fn records_path(cfg: &RunConfig) -> PathBuf {
    out_dir(
        &cfg
            .paths
            .records
            .clone()
            .unwrap_or_else(|| cfg.paths.data.join("eval.jsonl")),
    )
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub result: EvalResult,
    pub probe: Option<ProbeResult>,
}

fn run_eval(cfg: &RunConfig, records: &[EvalRecord], base: &Path, responder: &mut dyn Responder) -> Result<EvalSummary> {
    let result = evaluate(records, responder, base, cfg.eval.cap)?;
    let probe = if cfg.eval.shuffle_probe {
        Some(shuffle_probe(records, responder, base, cfg.eval.cap, cfg.eval.shuffle)?)
    } else {
        None
    };
    Ok(EvalSummary { result, probe })
}

/// Scores the records and writes `report.csv`, `report.svg` and, with the
/// probe on, `probe.csv`.
pub fn eval(cfg: &RunConfig) -> Result<EvalSummary> {
    let path = records_path(cfg);
    let records = read_records(&path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let summary = match cfg.eval.responder {
        ResponderKind::Echo => run_eval(cfg, &records, &base, &mut EchoResponder)?,
        ResponderKind::Model => {
            let vocab = Vocab::default_vocab();
            let bb = load_backbone(cfg)?;
            let comp = load_completion(cfg, &bb)?;
            let mut responder = ModelResponder {
                vocab: &vocab,
                backbone: &bb,
                completion: &comp,
                max_tokens: cfg.eval.max_tokens,
            };
            run_eval(cfg, &records, &base, &mut responder)?
        }
    };
    let dir = prepare(&cfg.paths.eval, cfg)?;
    let rows = &summary.result.rows;
    fs::write(dir.join("report.csv"), report_csv(rows))?;
    let labels: Vec<String> = rows.iter().map(|r| format!("{}/{}", r.task, r.category)).collect();
    let values: Vec<f64> = rows.iter().map(|r| r.score).collect();
    fs::write(dir.join("report.svg"), svg::bar_chart("scores", &labels, &values))?;
    if let Some(p) = &summary.probe {
        fs::write(dir.join("probe.csv"), probe_csv(&p.rows))?;
    }
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerRow {
    pub layer: usize,
    pub token_accuracy: f64,
}

pub const LAYER_HEADER: &str = "layer,token_accuracy";

pub fn layer_csv(rows: &[LayerRow]) -> String {
    let mut s = String::from(LAYER_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{:.17e}", r.layer, r.token_accuracy);
    }
    s
}

/// One fresh completion module per insert layer, all from the same seed,
/// scored by held-out token accuracy.
pub fn probe_layers(cfg: &RunConfig) -> Result<Vec<LayerRow>> {
    if cfg.probe.layers.is_empty() {
        bail!("probe.layers is empty");
    }
    let vocab = Vocab::default_vocab();
    let base = load_backbone(cfg)?;
    let data = train_data(cfg, &vocab, &base)?;
    if data.heldout.is_none() {
        bail!("probe-layers needs a held-out manifest");
    }
    let dir = prepare(&cfg.paths.probe, cfg)?;
    let mut rows = Vec::new();
    for &layer in &cfg.probe.layers {
        let mut run = cfg.clone();
        run.backbone.model.insert_layer = Some(layer);
        run.validate().with_context(|| format!("insert layer {layer}"))?;
        let mut bb = base.clone();
        bb.config.model.insert_layer = Some(layer);
        bb.decoder.config.insert_layer = Some(layer);
        let sub = dir.join(format!("layer_{layer}"));
        fs::create_dir_all(&sub)?;
        run.write(&sub)?;
        let (s, _) = train_completion(&run, &mut bb, &data, &sub, None)?;
        let acc = s.accuracy.expect("held-out set checked above");
        log::info!("insert layer {layer}: token accuracy {acc:.4}");
        rows.push(LayerRow {
            layer,
            token_accuracy: acc,
        });
    }
    fs::write(dir.join("layers.csv"), layer_csv(&rows))?;
    let points = rows.iter().map(|r| (r.layer as f64, r.token_accuracy)).collect();
    fs::write(
        dir.join("layers.svg"),
        svg::line_chart("held-out token accuracy by insert layer", &[("accuracy".into(), points)]),
    )?;
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct AttnSummary {
    pub side: usize,
    pub layers: usize,
    pub queries: usize,
    pub global_sum: f64,
}

pub const ATTN_HEADER: &str = "layer,query,row,col,weight";

/// Grey-scale heatmap, one pixel per cell, brightest at the map maximum.
pub fn heatmap(side: usize, values: &[f64]) -> Raster {
    let max = values.iter().copied().fold(0.0, f64::max);
    let mut r = Raster::filled(side as u32, side as u32, [0, 0, 0]);
    for (i, &v) in values.iter().enumerate() {
        let g = if max > 0.0 { (255.0 * v / max).round() as u8 } else { 0 };
        r.pixels[3 * i..3 * i + 3].copy_from_slice(&[g, g, g]);
    }
    r
}

/// Writes the generator's cross-attention for one image as CSV plus a
/// heatmap of the global map.
pub fn dump_attn(cfg: &RunConfig) -> Result<AttnSummary> {
    let bb = load_backbone(cfg)?;
    let image = out_dir(
        &cfg.paths
            .image
            .clone()
            .unwrap_or_else(|| cfg.paths.data.join("heldout/00000_before.ppm")),
    );
    let raster = Raster::load_ppm(&image).with_context(|| format!("reading {}", image.display()))?;
    let grid = bb.encode(&raster)?;
    let (_, trace) = bb.resampler()?.resample(&grid)?;
    let global = avg_attention(&trace)?;
    let dir = prepare(&cfg.paths.attn, cfg)?;
    let side = trace.side;
    let mut csv = String::from(ATTN_HEADER);
    csv.push('\n');
    for layer in 0..trace.layers() {
        for q in 0..trace.queries {
            for (cell, w) in trace.map(layer, q).iter().enumerate() {
                let _ = writeln!(csv, "{layer},{q},{},{},{w:.17e}", cell / side, cell % side);
            }
        }
    }
    fs::write(dir.join("attention.csv"), csv)?;
    let mut gcsv = String::from("row,col,weight\n");
    for (cell, w) in global.values.iter().enumerate() {
        let _ = writeln!(gcsv, "{},{},{w:.17e}", cell / side, cell % side);
    }
    fs::write(dir.join("global.csv"), gcsv)?;
    heatmap(side, &global.values).save_ppm(&dir.join("global.ppm"))?;
    Ok(AttnSummary {
        side,
        layers: trace.layers(),
        queries: trace.queries,
        global_sum: global.values.iter().sum(),
    })
}
