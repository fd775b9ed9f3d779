//! Discriminative pair generation: find the object the generator attends
//! to least, edit it, and describe the edit.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{
    add_candidate, apply_edit, caption, describe_edit, fits_on_background, gen_scene, owner_map, render, AttrChange,
    Color, EditKind, EditOp, NewObject, ObjectMask, SceneConfig, SceneSpec, Shape,
};
use crate::vpg::GlobalMap;
use crate::vpgc::Backbone;

/// How the coarse attention grid is spread over pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    /// Each pixel takes the area-weighted mean of the cells it overlaps, so
    /// a mask aligned to the grid averages whole cells.
    #[default]
    Area,
    /// Bilinear interpolation between cell centres, edges clamped.
    Bilinear,
}

/// `A` resampled to `width × height`, row-major.
pub fn upsample(map: &GlobalMap, width: u32, height: u32, mode: Upsample) -> Vec<f64> {
    let p = map.side;
    let xs = axis_weights(p, width as usize, mode);
    let ys = axis_weights(p, height as usize, mode);
    let mut out = Vec::with_capacity((width * height) as usize);
    for wy in &ys {
        for wx in &xs {
            let mut v = 0.0;
            for &(r, a) in wy {
                for &(c, b) in wx {
                    v += a * b * map.values[r * p + c];
                }
            }
            out.push(v);
        }
    }
    out
}

/// Per output pixel, `(cell, weight)` pairs along one axis.
fn axis_weights(cells: usize, pixels: usize, mode: Upsample) -> Vec<Vec<(usize, f64)>> {
    let scale = cells as f64 / pixels as f64;
    (0..pixels)
        .map(|i| match mode {
            Upsample::Area => {
                let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
                let mut w = Vec::new();
                let mut c = lo.floor() as usize;
                while c < cells && (c as f64) < hi {
                    let overlap = hi.min((c + 1) as f64) - lo.max(c as f64);
                    if overlap > 0.0 {
                        w.push((c, overlap / scale));
                    }
                    c += 1;
                }
                w
            }
            Upsample::Bilinear => {
                let u = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (cells - 1) as f64);
                let c0 = u.floor() as usize;
                let t = u - c0 as f64;
                if c0 + 1 < cells && t > 0.0 {
                    vec![(c0, 1.0 - t), (c0 + 1, t)]
                } else {
                    vec![(c0, 1.0)]
                }
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSignificance {
    pub object_id: u32,
    pub phi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub objects: Vec<ObjectSignificance>,
}

/// Mean of the upsampled map over each object's mask pixels.
pub fn significance(map: &GlobalMap, masks: &[ObjectMask], mode: Upsample) -> Result<SignificanceReport> {
    let mut cache: Option<(u32, u32, Vec<f64>)> = None;
    let mut objects = Vec::with_capacity(masks.len());
    for m in masks {
        let n = m.count();
        if n == 0 {
            return Err(Error::Invalid(format!("mask of object {} is empty", m.object_id)));
        }
        if cache.as_ref().is_none_or(|c| (c.0, c.1) != (m.width, m.height)) {
            cache = Some((m.width, m.height, upsample(map, m.width, m.height, mode)));
        }
        let up = &cache.as_ref().expect("just filled").2;
        let sum: f64 = m.grid.iter().zip(up).filter(|(b, _)| **b).map(|(_, v)| v).sum();
        objects.push(ObjectSignificance {
            object_id: m.object_id,
            phi: sum / n as f64,
        });
    }
    Ok(SignificanceReport { objects })
}

/// Least significant object, lowest id on ties.
pub fn select_target(report: &SignificanceReport) -> Result<u32> {
    report
        .objects
        .iter()
        .min_by(|a, b| a.phi.total_cmp(&b.phi).then(a.object_id.cmp(&b.object_id)))
        .map(|o| o.object_id)
        .ok_or_else(|| Error::Invalid("no objects to select from".into()))
}

const ADD_TRIES: usize = 200;

/// Rule-based edit on `target`: kind drawn uniformly among the feasible
/// ones.
pub fn propose_edit(scene: &SceneSpec, target: u32, seed: u64, config: &SceneConfig) -> Result<EditOp> {
    let obj = scene
        .object(target)
        .ok_or_else(|| Error::Edit(format!("object {target} not in scene")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kinds = EditKind::ALL.to_vec();
    while !kinds.is_empty() {
        let i = rng.random_range(0..kinds.len());
        let kind = kinds[i];
        let proposal = match kind {
            EditKind::Delete => Some(EditOp::Delete { target }),
            EditKind::Swap => {
                let others: Vec<u32> = scene.objects.iter().map(|o| o.id).filter(|&id| id != target).collect();
                others.choose(&mut rng).map(|&b| EditOp::Swap { a: target, b })
            }
            EditKind::Modify => propose_modify(scene, obj, &mut rng),
            EditKind::Add => propose_add(scene, config, &mut rng),
        };
        match proposal {
            Some(e) => return Ok(e),
            None => {
                kinds.remove(i);
            }
        }
    }
    Err(Error::Edit("no feasible edit for this scene".into()))
}

fn label_taken(scene: &SceneSpec, skip: u32, shape: Shape, color: Color) -> bool {
    scene
        .objects
        .iter()
        .any(|o| o.id != skip && o.shape == shape && o.color == color)
}

fn propose_modify<R: Rng>(scene: &SceneSpec, obj: &crate::scene::SceneObject, rng: &mut R) -> Option<EditOp> {
    let colors: Vec<Color> = Color::ALL
        .into_iter()
        .filter(|&c| c != obj.color && !label_taken(scene, obj.id, obj.shape, c))
        .collect();
    let shapes: Vec<Shape> = Shape::ALL
        .into_iter()
        .filter(|&s| s != obj.shape && !label_taken(scene, obj.id, s, obj.color))
        .collect();
    let by_color = rng.random_bool(0.5);
    let change = match (by_color, colors.choose(rng), shapes.choose(rng)) {
        (true, Some(&c), _) | (false, Some(&c), None) => AttrChange::Color(c),
        (false, _, Some(&s)) | (true, None, Some(&s)) => AttrChange::Shape(s),
        _ => return None,
    };
    Some(EditOp::Modify { target: obj.id, change })
}

fn propose_add<R: Rng>(scene: &SceneSpec, config: &SceneConfig, rng: &mut R) -> Option<EditOp> {
    let free: Vec<(Shape, Color)> = Shape::ALL
        .into_iter()
        .flat_map(|s| Color::ALL.into_iter().map(move |c| (s, c)))
        .filter(|&(s, c)| !label_taken(scene, u32::MAX, s, c))
        .collect();
    let &(shape, color) = free.choose(rng)?;
    let size = rng.random_range(config.size_range.0..=config.size_range.1);
    let object = NewObject { shape, color, size };
    let owner = owner_map(scene);
    let r = (size as i32 + 1) / 2;
    let (w, h) = (scene.width as i32, scene.height as i32);
    if w - 1 - r < r || h - 1 - r < r {
        return None;
    }
    for _ in 0..ADD_TRIES {
        let center = (rng.random_range(r..=w - 1 - r), rng.random_range(r..=h - 1 - r));
        let cand = add_candidate(scene, object, center);
        if fits_on_background(scene, &owner, &cand, 1) {
            return Some(EditOp::Add { object, center });
        }
    }
    None
}

/// How the edited object is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// The object with the smallest significance under the backbone's
    /// generator.
    MinSignificance,
    /// A uniformly random object; needs no backbone.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub seed: u64,
    pub target: TargetRule,
    pub upsample: Upsample,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            seed: 0,
            target: TargetRule::MinSignificance,
            upsample: Upsample::Area,
        }
    }
}

/// Independent seed for item `i` of stream `stream`.
pub fn sub_seed(seed: u64, stream: u64, i: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One original/edited pair and its target sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPair {
    pub seed: u64,
    pub before: SceneSpec,
    pub after: SceneSpec,
    pub edit: EditOp,
    pub target: u32,
    pub significance: Vec<ObjectSignificance>,
    pub difference_sentence: String,
    pub caption_before: String,
}

impl TrainPair {
    /// Checks the stored sentence against the stored edit.
    pub fn check(&self) -> Result<()> {
        if describe_edit(&self.edit, &self.before)? != self.difference_sentence {
            return Err(Error::Invalid(format!("pair {} sentence does not match its edit", self.seed)));
        }
        if apply_edit(&self.before, &self.edit)? != self.after {
            return Err(Error::Invalid(format!("pair {} edited scene does not match its edit", self.seed)));
        }
        Ok(())
    }
}

/// Builds the pair for one seed.
pub fn make_pair(seed: u64, backbone: Option<&Backbone>, config: &DatasetConfig) -> Result<TrainPair> {
    let before = gen_scene(seed, &config.scene)?;
    let (raster, masks) = render(&before);
    let (target, significance) = match config.target {
        TargetRule::MinSignificance => {
            let bb = backbone.ok_or_else(|| Error::Config("significance targeting needs a backbone".into()))?;
            let grid = bb.encode(&raster)?;
            let map = bb.global_map(&grid)?;
            let report = significance(&map, &masks, config.upsample)?;
            (select_target(&report)?, report.objects)
        }
        TargetRule::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 3, 0));
            let ids: Vec<u32> = before.objects.iter().map(|o| o.id).collect();
            let &t = ids
                .choose(&mut rng)
                .ok_or_else(|| Error::Invalid("scene has no objects".into()))?;
            (t, Vec::new())
        }
    };
    let edit = propose_edit(&before, target, sub_seed(seed, 4, 0), &config.scene)?;
    let after = apply_edit(&before, &edit)?;
    Ok(TrainPair {
        seed,
        difference_sentence: describe_edit(&edit, &before)?,
        caption_before: caption(&before),
        before,
        after,
        edit,
        target,
        significance,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub pairs: usize,
    pub skipped: usize,
    pub kinds: BTreeMap<String, usize>,
}

/// Collects `n` pairs from consecutive seeds of stream `stream`, skipping
/// (and counting) seeds whose scene admits no pair.
pub fn build_pairs(
    n: usize,
    stream: u64,
    backbone: Option<&Backbone>,
    config: &DatasetConfig,
) -> Result<(Vec<TrainPair>, BuildSummary)> {
    let mut pairs = Vec::with_capacity(n);
    let mut summary = BuildSummary::default();
    let mut i = 0u64;
    let limit = 4 * n as u64 + 100;
    while pairs.len() < n {
        if i >= limit {
            return Err(Error::Invalid(format!("only {} of {n} pairs after {limit} seeds", pairs.len())));
        }
        match make_pair(sub_seed(config.seed, stream, i), backbone, config) {
            Ok(p) => {
                *summary.kinds.entry(p.edit.kind().name().to_string()).or_default() += 1;
                pairs.push(p);
            }
            Err(e @ (Error::Config(_) | Error::Io(_) | Error::Num(_))) => return Err(e),
            Err(e) => {
                log::debug!("seed {i} skipped: {e}");
                summary.skipped += 1;
            }
        }
        i += 1;
    }
    summary.pairs = pairs.len();
    Ok((pairs, summary))
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seed: u64,
    pub scene_file: String,
    pub edited_file: String,
    pub before_image: String,
    pub after_image: String,
    pub edit: EditOp,
    pub target: u32,
    pub significance: Vec<ObjectSignificance>,
    pub difference_sentence: String,
    pub caption_before: String,
}

/// Writes scenes, rasters and `<name>.jsonl` under `dir`. Paths in the
/// manifest are relative to `dir`.
pub fn write_manifest(dir: &Path, name: &str, pairs: &[TrainPair]) -> Result<PathBuf> {
    let sub = dir.join(name);
    fs::create_dir_all(&sub)?;
    let path = dir.join(format!("{name}.jsonl"));
    let mut out = BufWriter::new(File::create(&path)?);
    for (i, p) in pairs.iter().enumerate() {
        let rel = |suffix: &str| format!("{name}/{i:05}_{suffix}");
        let entry = ManifestEntry {
            seed: p.seed,
            scene_file: rel("before.json"),
            edited_file: rel("after.json"),
            before_image: rel("before.ppm"),
            after_image: rel("after.ppm"),
            edit: p.edit.clone(),
            target: p.target,
            significance: p.significance.clone(),
            difference_sentence: p.difference_sentence.clone(),
            caption_before: p.caption_before.clone(),
        };
        p.before.save_json(&dir.join(&entry.scene_file))?;
        p.after.save_json(&dir.join(&entry.edited_file))?;
        render(&p.before).0.save_ppm(&dir.join(&entry.before_image))?;
        render(&p.after).0.save_ppm(&dir.join(&entry.after_image))?;
        serde_json::to_writer(&mut out, &entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Reloads the pairs a manifest describes.
pub fn load_pairs(path: &Path) -> Result<Vec<TrainPair>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?
        .into_iter()
        .map(|e| {
            Ok(TrainPair {
                seed: e.seed,
                before: SceneSpec::load_json(&dir.join(&e.scene_file))?,
                after: SceneSpec::load_json(&dir.join(&e.edited_file))?,
                edit: e.edit,
                target: e.target,
                significance: e.significance,
                difference_sentence: e.difference_sentence,
                caption_before: e.caption_before,
            })
        })
        .collect()
}

/// A captioning sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub seed: u64,
    pub scene_file: String,
    pub image: String,
    pub caption: String,
}

pub fn build_captions(n: usize, stream: u64, config: &DatasetConfig) -> Result<Vec<(u64, SceneSpec)>> {
    (0..n as u64)
        .map(|i| {
            let seed = sub_seed(config.seed, stream, i);
            Ok((seed, gen_scene(seed, &config.scene)?))
        })
        .collect()
}

pub fn write_captions(dir: &Path, name: &str, scenes: &[(u64, SceneSpec)]) -> Result<PathBuf> {
    let sub = dir.join(name);
    fs::create_dir_all(&sub)?;
    let path = dir.join(format!("{name}.jsonl"));
    let mut out = BufWriter::new(File::create(&path)?);
    for (i, (seed, s)) in scenes.iter().enumerate() {
        let entry = CaptionEntry {
            seed: *seed,
            scene_file: format!("{name}/{i:05}.json"),
            image: format!("{name}/{i:05}.ppm"),
            caption: caption(s),
        };
        s.save_json(&dir.join(&entry.scene_file))?;
        render(s).0.save_ppm(&dir.join(&entry.image))?;
        serde_json::to_writer(&mut out, &entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(path)
}

pub fn load_captions(path: &Path) -> Result<Vec<(u64, SceneSpec)>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: CaptionEntry = serde_json::from_str(&line)?;
        out.push((e.seed, SceneSpec::load_json(&dir.join(&e.scene_file))?));
    }
    Ok(out)
}
