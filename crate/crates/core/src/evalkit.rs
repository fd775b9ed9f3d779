//! Scoring model responses on instruction records.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{instruction_sequence, Piece};
use crate::scene::Raster;
use crate::tokenizer::{Vocab, EOS};
use crate::trainpipe::dataset::sub_seed;
use crate::vpgc::{generate, Backbone, Completion};

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F1 over lowercased whitespace tokens; 0 when either side is empty.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (tokens(candidate), tokens(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&c, &r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rec) = (l / c.len() as f64, l / r.len() as f64);
    2.0 * p * rec / (p + rec)
}

/// How a response was mapped to an option.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// An option label such as `B`, `(2)` or `the answer is B`.
    Label,
    /// The response is one option's text, up to case and spacing.
    Exact,
    Tfidf,
    /// No option shares a weighted term with the response.
    Fallback,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionMatch {
    pub index: usize,
    pub rule: MatchRule,
}

/// Label forms accepted for option `i`: `A`, `A.`, `A)`, `(A)`, and the
/// same around the 1-based number.
fn labels(i: usize) -> Vec<String> {
    let mut base = vec![(i + 1).to_string()];
    if i < 26 {
        base.push(((b'A' + i as u8) as char).to_string());
    }
    base.iter()
        .flat_map(|b| [b.clone(), format!("{b}."), format!("{b})"), format!("({b})")])
        .collect()
}

const ANSWER_PREFIXES: [&str; 4] = ["the answer is", "answer:", "answer is", "option"];

fn label_match(response: &str, n: usize) -> Option<usize> {
    let t = response.trim().trim_end_matches('.').trim();
    let lower = t.to_lowercase();
    let mut tails = vec![t];
    for p in ANSWER_PREFIXES {
        if lower.starts_with(p) {
            tails.push(t[p.len()..].trim());
        }
    }
    (0..n).find(|&i| {
        let ls = labels(i);
        tails.iter().any(|tail| ls.iter().any(|l| l == tail))
    })
}

/// Maps a free-form response to one of `options`.
///
/// Labels are tried first, then exact text, then TF-IDF cosine with raw
/// counts and `idf = ln(N / (df + 1))` over the options. Ties go to the
/// lowest index.
pub fn match_option(response: &str, options: &[String]) -> Result<OptionMatch> {
    if options.is_empty() {
        return Err(Error::Invalid("no options to match".into()));
    }
    if let Some(index) = label_match(response, options.len()) {
        return Ok(OptionMatch { index, rule: MatchRule::Label });
    }
    let resp = tokens(response);
    let docs: Vec<Vec<String>> = options.iter().map(|o| tokens(o)).collect();
    if let Some(index) = docs.iter().position(|d| !d.is_empty() && *d == resp) {
        return Ok(OptionMatch { index, rule: MatchRule::Exact });
    }
    let n = docs.len() as f64;
    let mut df: HashMap<&str, usize> = HashMap::new();
    for d in &docs {
        let mut seen: Vec<&str> = d.iter().map(String::as_str).collect();
        seen.sort_unstable();
        seen.dedup();
        for t in seen {
            *df.entry(t).or_default() += 1;
        }
    }
    let idf = |t: &str| (n / (df.get(t).copied().unwrap_or(0) as f64 + 1.0)).ln();
    let weights = |d: &[String]| -> BTreeMap<String, f64> {
        let mut tf: BTreeMap<String, f64> = BTreeMap::new();
        for t in d {
            *tf.entry(t.clone()).or_default() += 1.0;
        }
        tf.into_iter().map(|(t, c)| {
            let w = c * idf(&t);
            (t, w)
        }).collect()
    };
    let norm = |w: &BTreeMap<String, f64>| w.values().map(|x| x * x).sum::<f64>().sqrt();
    let q = weights(&resp);
    let qn = norm(&q);
    let mut best: Option<(usize, f64)> = None;
    for (i, d) in docs.iter().enumerate() {
        let w = weights(d);
        let dn = norm(&w);
        let score = if qn == 0.0 || dn == 0.0 {
            0.0
        } else {
            q.iter().map(|(t, x)| x * w.get(t).copied().unwrap_or(0.0)).sum::<f64>() / (qn * dn)
        };
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((i, score));
        }
    }
    let (index, score) = best.expect("options are non-empty");
    Ok(if score == 0.0 {
        OptionMatch { index: 0, rule: MatchRule::Fallback }
    } else {
        OptionMatch { index, rule: MatchRule::Tfidf }
    })
}

/// A record segment: literal text or an image path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SegmentRef {
    Text { t: String },
    Image { img: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub id: String,
    pub task_id: String,
    pub category: String,
    pub task_instruction: String,
    pub task_instance: Vec<SegmentRef>,
    /// Present for choice tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    /// Index of the right option for choice tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<usize>,
    /// Gold text; for choice tasks, the right option's text.
    pub response: String,
}

impl EvalRecord {
    pub fn image_paths(&self) -> Vec<&str> {
        self.task_instance
            .iter()
            .filter_map(|s| match s {
                SegmentRef::Image { img } => Some(img.as_str()),
                SegmentRef::Text { .. } => None,
            })
            .collect()
    }

    pub fn pieces(&self) -> Vec<Piece> {
        let mut j = 0;
        self.task_instance
            .iter()
            .map(|s| match s {
                SegmentRef::Text { t } => Piece::Text(t.clone()),
                SegmentRef::Image { .. } => {
                    j += 1;
                    Piece::Image(j - 1)
                }
            })
            .collect()
    }

    pub fn metric(&self) -> Result<&'static str> {
        match (&self.options, self.answer) {
            (Some(o), Some(a)) if a < o.len() && o.len() >= 2 => Ok("accuracy"),
            (None, None) => Ok("rouge_l"),
            _ => Err(Error::Invalid(format!("record {} is neither a choice nor an open task", self.id))),
        }
    }
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: EvalRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        r.metric()?;
        out.push(r);
    }
    Ok(out)
}

/// Anything that answers a record given its decoded images.
pub trait Responder {
    fn respond(&mut self, record: &EvalRecord, images: &[Raster]) -> Result<String>;
}

/// Answers every record with its gold response.
pub struct EchoResponder;

impl Responder for EchoResponder {
    fn respond(&mut self, record: &EvalRecord, _images: &[Raster]) -> Result<String> {
        Ok(record.response.clone())
    }
}

/// Greedy decoding with a backbone and completion module.
pub struct ModelResponder<'a> {
    pub vocab: &'a Vocab,
    pub backbone: &'a Backbone,
    pub completion: &'a Completion,
    pub max_tokens: usize,
}

impl Responder for ModelResponder<'_> {
    fn respond(&mut self, record: &EvalRecord, images: &[Raster]) -> Result<String> {
        let grids = images.iter().map(|r| self.backbone.encode(r)).collect::<Result<Vec<_>>>()?;
        let seq = instruction_sequence(self.vocab, &record.pieces(), &record.task_instruction);
        let ids = generate(
            self.backbone,
            self.completion,
            &seq,
            &grids,
            self.vocab.special(EOS),
            self.max_tokens,
        )?;
        Ok(self.vocab.decode(&ids))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub id: String,
    pub task: String,
    pub category: String,
    pub response: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched: Option<OptionMatch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    /// `all` for the per-task roll-up.
    pub category: String,
    pub metric: String,
    pub n: usize,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub rows: Vec<ReportRow>,
    pub outcomes: Vec<RecordOutcome>,
    /// Records dropped because an image could not be loaded.
    pub skipped_missing_image: usize,
    /// Records beyond the per-task cap.
    pub capped: usize,
}

impl EvalResult {
    pub fn task_score(&self, task: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.task == task && r.category == "all")
            .map(|r| r.score)
    }
}

fn load_images(record: &EvalRecord, base: &Path) -> Option<Vec<Raster>> {
    record
        .image_paths()
        .iter()
        .map(|p| Raster::load_ppm(&base.join(p)).ok())
        .collect()
}

fn score_one(record: &EvalRecord, response: String) -> Result<RecordOutcome> {
    let (score, matched) = match record.metric()? {
        "accuracy" => {
            let m = match_option(&response, record.options.as_deref().unwrap_or_default())?;
            (f64::from(u8::from(Some(m.index) == record.answer)), Some(m))
        }
        _ => (rouge_l(&response, &record.response), None),
    };
    Ok(RecordOutcome {
        id: record.id.clone(),
        task: record.task_id.clone(),
        category: record.category.clone(),
        response,
        score,
        matched,
    })
}

fn capped<'a>(records: &'a [EvalRecord], cap: usize) -> (Vec<&'a EvalRecord>, usize) {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut kept = Vec::new();
    let mut dropped = 0;
    for r in records {
        let c = seen.entry(r.task_id.as_str()).or_default();
        if *c < cap {
            *c += 1;
            kept.push(r);
        } else {
            dropped += 1;
        }
    }
    (kept, dropped)
}

fn roll_up(records: &[&EvalRecord], outcomes: &[RecordOutcome]) -> Result<Vec<ReportRow>> {
    let metric: HashMap<&str, &'static str> = records
        .iter()
        .map(|r| Ok((r.id.as_str(), r.metric()?)))
        .collect::<Result<_>>()?;
    let mut groups: BTreeMap<(String, String, &'static str), (usize, f64)> = BTreeMap::new();
    for o in outcomes {
        let m = metric[o.id.as_str()];
        for cat in [o.category.clone(), "all".to_string()] {
            let g = groups.entry((o.task.clone(), cat, m)).or_default();
            g.0 += 1;
            g.1 += o.score;
        }
    }
    let mut tasks: HashMap<&str, &'static str> = HashMap::new();
    for ((task, _, m), _) in &groups {
        if let Some(prev) = tasks.insert(task, m) {
            if prev != *m {
                return Err(Error::Invalid(format!("task {task} mixes choice and open records")));
            }
        }
    }
    Ok(groups
        .into_iter()
        .map(|((task, category, metric), (n, sum))| ReportRow {
            task,
            category,
            metric: metric.to_string(),
            n,
            score: sum / n as f64,
        })
        .collect())
}

/// Scores up to `cap` records per task. Image paths resolve against
/// `base`; records whose images fail to load are skipped.
pub fn evaluate(records: &[EvalRecord], responder: &mut dyn Responder, base: &Path, cap: usize) -> Result<EvalResult> {
    let (kept, capped_n) = capped(records, cap);
    let mut outcomes = Vec::with_capacity(kept.len());
    let mut used = Vec::with_capacity(kept.len());
    let mut missing = 0;
    for r in kept {
        let Some(images) = load_images(r, base) else {
            log::warn!("record {}: unresolvable image, skipped", r.id);
            missing += 1;
            continue;
        };
        let response = responder.respond(r, &images)?;
        outcomes.push(score_one(r, response)?);
        used.push(r);
    }
    Ok(EvalResult {
        rows: roll_up(&used, &outcomes)?,
        outcomes,
        skipped_missing_image: missing,
        capped: capped_n,
    })
}

/// How the image order is disturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shuffle {
    /// A seeded random permutation other than the identity.
    Random { seed: u64 },
    Reverse,
    Identity,
}

impl Shuffle {
    pub fn permutation(self, n: usize, item: u64) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        match self {
            Shuffle::Identity => {}
            Shuffle::Reverse => p.reverse(),
            Shuffle::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 13, item));
                if n >= 2 {
                    while p.iter().enumerate().all(|(i, &x)| i == x) {
                        p.shuffle(&mut rng);
                    }
                }
            }
        }
        p
    }
}

/// `record` with its image paths permuted by `perm`; text stays put.
pub fn permute_images(record: &EvalRecord, perm: &[usize]) -> EvalRecord {
    let paths = record.image_paths();
    let mut j = 0;
    let task_instance = record
        .task_instance
        .iter()
        .map(|s| match s {
            SegmentRef::Image { .. } => {
                j += 1;
                SegmentRef::Image {
                    img: paths[perm[j - 1]].to_string(),
                }
            }
            t => t.clone(),
        })
        .collect();
    EvalRecord {
        task_instance,
        ..record.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub task: String,
    pub metric: String,
    pub n: usize,
    pub original: f64,
    pub shuffled: f64,
    /// `original - shuffled`.
    pub delta: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub rows: Vec<ProbeRow>,
    /// Records with fewer than two images.
    pub skipped_single_image: usize,
    pub skipped_missing_image: usize,
}

/// Scores each multi-image record in its original and permuted image
/// order.
pub fn shuffle_probe(
    records: &[EvalRecord],
    responder: &mut dyn Responder,
    base: &Path,
    cap: usize,
    shuffle: Shuffle,
) -> Result<ProbeResult> {
    let (multi, single): (Vec<EvalRecord>, Vec<EvalRecord>) =
        records.iter().cloned().partition(|r| r.image_paths().len() >= 2);
    let (multi, _) = capped(&multi, cap);
    let multi: Vec<EvalRecord> = multi.into_iter().cloned().collect();
    let permuted: Vec<EvalRecord> = multi
        .iter()
        .enumerate()
        .map(|(i, r)| permute_images(r, &shuffle.permutation(r.image_paths().len(), i as u64)))
        .collect();
    let before = evaluate(&multi, responder, base, usize::MAX)?;
    let after = evaluate(&permuted, responder, base, usize::MAX)?;
    let rows = before
        .rows
        .iter()
        .filter(|r| r.category == "all")
        .map(|b| {
            let a = after
                .rows
                .iter()
                .find(|a| a.task == b.task && a.category == "all")
                .map_or(0.0, |a| a.score);
            ProbeRow {
                task: b.task.clone(),
                metric: b.metric.clone(),
                n: b.n,
                original: b.score,
                shuffled: a,
                delta: b.score - a,
            }
        })
        .collect();
    Ok(ProbeResult {
        rows,
        skipped_single_image: single.len(),
        skipped_missing_image: before.skipped_missing_image,
    })
}

pub const REPORT_HEADER: &str = "task,category,metric,n,score";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6}",
            csv_field(&r.task),
            csv_field(&r.category),
            r.metric,
            r.n,
            r.score
        );
    }
    s
}

pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut s = String::from("task,metric,n,original,shuffled,delta\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6}",
            csv_field(&r.task),
            r.metric,
            r.n,
            r.original,
            r.shuffled,
            r.delta
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn rouge_worked_example() {
        assert!((rouge_l("a red circle was added", "a red circle appeared") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l("", "x"), 0.0);
        assert_eq!(rouge_l("x", "  "), 0.0);
        assert_eq!(rouge_l("Blue Square", "blue square"), 1.0);
    }

    #[test]
    fn tfidf_picks_the_shared_words() {
        let m = match_option("it is a blue square I think", &opts(&["red circle", "blue square", "green star"])).unwrap();
        assert_eq!(m, OptionMatch { index: 1, rule: MatchRule::Tfidf });
    }

    #[test]
    fn labels_win() {
        let o = opts(&["red circle", "blue square", "green star"]);
        assert_eq!(match_option("the answer is B", &o).unwrap().index, 1);
        assert_eq!(match_option("(3)", &o).unwrap().index, 2);
        assert_eq!(match_option("A.", &o).unwrap().index, 0);
        assert_eq!(match_option("C", &o).unwrap().rule, MatchRule::Label);
        assert_ne!(match_option("D", &o).unwrap().rule, MatchRule::Label);
    }

    #[test]
    fn nothing_shared_falls_back_to_first() {
        let m = match_option("purple hexagon", &opts(&["red circle", "blue square"])).unwrap();
        assert_eq!(m, OptionMatch { index: 0, rule: MatchRule::Fallback });
        assert!(match_option("x", &[]).is_err());
    }

    #[test]
    fn exact_text_beats_a_superset_option() {
        let o = opts(&["red circle left", "red circle"]);
        assert_eq!(match_option("Red  circle", &o).unwrap(), OptionMatch { index: 1, rule: MatchRule::Exact });
    }

    #[test]
    fn record_roundtrip() {
        let line = r#"{"id":"0","task_id":"diff","category":"add","task_instruction":"describe","task_instance":[{"img":"a.ppm"},{"t":"then"},{"img":"b.ppm"}],"response":"x"}"#;
        let r: EvalRecord = serde_json::from_str(line).unwrap();
        assert_eq!(r.image_paths(), vec!["a.ppm", "b.ppm"]);
        assert_eq!(r.pieces(), vec![Piece::Image(0), Piece::Text("then".into()), Piece::Image(1)]);
        assert_eq!(r.metric().unwrap(), "rouge_l");
        assert_eq!(serde_json::to_string(&r).unwrap(), line);
    }

    #[test]
    fn permutations() {
        assert_eq!(Shuffle::Identity.permutation(3, 0), vec![0, 1, 2]);
        assert_eq!(Shuffle::Reverse.permutation(3, 0), vec![2, 1, 0]);
        for i in 0..20 {
            let p = Shuffle::Random { seed: 4 }.permutation(2, i);
            assert_eq!(p, vec![1, 0]);
        }
    }
}
