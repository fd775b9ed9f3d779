use std::collections::HashMap;
use std::path::Path;

use proptest::prelude::*;

use vpgc_core::evalkit::{
    evaluate, match_option, EchoResponder, read_records, report_csv, rouge_l, shuffle_probe, EvalRecord, MatchRule, Responder,
    SegmentRef, Shuffle,
};
use vpgc_core::scene::{Background, Raster};

const WORDS: [&str; 8] = ["red", "blue", "circle", "square", "the", "a", "was", "added"];

/// Memoised recursive LCS, independent of the table-filling version.
fn lcs_oracle(a: &[String], b: &[String], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let key = (a.len(), b.len());
    if let Some(&v) = memo.get(&key) {
        return v;
    }
    let v = if a[0] == b[0] {
        1 + lcs_oracle(&a[1..], &b[1..], memo)
    } else {
        lcs_oracle(&a[1..], b, memo).max(lcs_oracle(a, &b[1..], memo))
    };
    memo.insert(key, v);
    v
}

fn rouge_oracle(c: &str, r: &str) -> f64 {
    let c: Vec<String> = c.split_whitespace().map(|w| w.to_lowercase()).collect();
    let r: Vec<String> = r.split_whitespace().map(|w| w.to_lowercase()).collect();
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let l = lcs_oracle(&c, &r, &mut HashMap::new()) as f64;
    if l == 0.0 {
        0.0
    } else {
        2.0 * l / (c.len() + r.len()) as f64
    }
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS.to_vec()), 0..10).prop_map(|w| w.join(" "))
}

/// Direct TF-IDF cosine argmax.
fn tfidf_oracle(resp: &str, options: &[String]) -> (usize, bool) {
    let tok = |s: &str| s.split_whitespace().map(|w| w.to_lowercase()).collect::<Vec<_>>();
    let docs: Vec<Vec<String>> = options.iter().map(|o| tok(o)).collect();
    let q = tok(resp);
    let n = docs.len() as f64;
    let mut vocab: Vec<String> = docs.iter().flatten().chain(q.iter()).cloned().collect();
    vocab.sort();
    vocab.dedup();
    let vec_of = |d: &[String]| -> Vec<f64> {
        vocab
            .iter()
            .map(|t| {
                let tf = d.iter().filter(|w| *w == t).count() as f64;
                let df = docs.iter().filter(|d| d.contains(t)).count() as f64;
                tf * (n / (df + 1.0)).ln()
            })
            .collect()
    };
    let qv = vec_of(&q);
    let qn = qv.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scores: Vec<f64> = docs
        .iter()
        .map(|d| {
            let dv = vec_of(d);
            let dn = dv.iter().map(|x| x * x).sum::<f64>().sqrt();
            if qn == 0.0 || dn == 0.0 {
                0.0
            } else {
                qv.iter().zip(&dv).map(|(a, b)| a * b).sum::<f64>() / (qn * dn)
            }
        })
        .collect();
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    (best, scores[best] == 0.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn rouge_matches_recursive_lcs(c in sentence(), r in sentence()) {
        prop_assert!((rouge_l(&c, &r) - rouge_oracle(&c, &r)).abs() < 1e-12);
    }

    #[test]
    fn rouge_is_symmetric_and_bounded(c in sentence(), r in sentence()) {
        let (a, b) = (rouge_l(&c, &r), rouge_l(&r, &c));
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn string_equal_responses_pick_their_option(
        options in prop::collection::vec(sentence().prop_filter("non-empty", |s| !s.is_empty()), 2..6),
        pick in 0usize..6,
    ) {
        let mut options = options;
        options.dedup();
        let pick = pick % options.len();
        let first = options.iter().position(|o| *o == options[pick]).unwrap();
        let m = match_option(&options[pick], &options).unwrap();
        prop_assert_eq!(m.index, first);
    }

    #[test]
    fn tfidf_matches_direct_computation(
        resp in sentence(),
        options in prop::collection::vec(sentence(), 2..6),
    ) {
        let m = match_option(&resp, &options).unwrap();
        if m.rule == MatchRule::Tfidf || m.rule == MatchRule::Fallback {
            let (idx, zero) = tfidf_oracle(&resp, &options);
            prop_assert_eq!(m.rule == MatchRule::Fallback, zero);
            prop_assert_eq!(m.index, if zero { 0 } else { idx });
        }
    }
}

struct Echo(HashMap<String, String>);

impl Responder for Echo {
    fn respond(&mut self, record: &EvalRecord, _images: &[Raster]) -> vpgc_core::Result<String> {
        Ok(self.0.get(&record.id).cloned().unwrap_or_default())
    }
}

struct Constant;

impl Responder for Constant {
    fn respond(&mut self, _: &EvalRecord, _: &[Raster]) -> vpgc_core::Result<String> {
        Ok("a red circle".into())
    }
}

/// Answers with the name of the first image, so order matters.
struct FirstImage;

impl Responder for FirstImage {
    fn respond(&mut self, _: &EvalRecord, images: &[Raster]) -> vpgc_core::Result<String> {
        Ok(if images[0].pixel(0, 0) == Background::Gray.rgb() { "gray" } else { "black" }.into())
    }
}

fn write_images(dir: &Path) {
    Raster::filled(4, 4, Background::Gray.rgb()).save_ppm(&dir.join("g.ppm")).unwrap();
    Raster::filled(4, 4, Background::Black.rgb()).save_ppm(&dir.join("w.ppm")).unwrap();
}

const RECORDS: &str = r#"{"id":"c0","task_id":"kind","category":"x","task_instruction":"which","task_instance":[{"img":"g.ppm"},{"img":"w.ppm"}],"options":["red circle","blue square"],"answer":0,"response":"red circle"}
{"id":"c1","task_id":"kind","category":"y","task_instruction":"which","task_instance":[{"img":"g.ppm"},{"img":"w.ppm"}],"options":["red circle","blue square"],"answer":1,"response":"blue square"}
{"id":"o0","task_id":"diff","category":"x","task_instruction":"describe","task_instance":[{"img":"g.ppm"},{"t":"and"},{"img":"w.ppm"}],"response":"gray"}
{"id":"o1","task_id":"diff","category":"x","task_instruction":"describe","task_instance":[{"img":"w.ppm"},{"img":"g.ppm"}],"response":"black"}
{"id":"o2","task_id":"diff","category":"x","task_instruction":"describe","task_instance":[{"img":"missing.ppm"},{"img":"g.ppm"}],"response":"black"}
{"id":"s0","task_id":"single","category":"x","task_instruction":"describe","task_instance":[{"img":"g.ppm"}],"response":"gray"}
"#;

fn fixture() -> (tempfile::TempDir, Vec<EvalRecord>) {
    let dir = tempfile::tempdir().unwrap();
    write_images(dir.path());
    let path = dir.path().join("records.jsonl");
    std::fs::write(&path, RECORDS).unwrap();
    let records = read_records(&path).unwrap();
    (dir, records)
}

#[test]
fn evaluate_rolls_up_by_category() {
    let (dir, records) = fixture();
    let answers = [("c0", "A"), ("c1", "red circle"), ("o0", "gray"), ("o1", "black one"), ("s0", "")];
    let mut r = Echo(answers.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect());
    let res = evaluate(&records, &mut r, dir.path(), 500).unwrap();
    assert_eq!(res.skipped_missing_image, 1);
    assert_eq!(res.task_score("kind"), Some(0.5));
    assert!((res.task_score("diff").unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert_eq!(res.task_score("single"), Some(0.0));
    let csv = report_csv(&res.rows);
    assert!(csv.starts_with("task,category,metric,n,score\n"));
    assert!(csv.contains("kind,x,accuracy,1,1.000000"));
    assert!(csv.contains("kind,all,accuracy,2,0.500000"));
}

#[test]
fn echo_scores_one_everywhere() {
    let (dir, records) = fixture();
    let res = evaluate(&records, &mut EchoResponder, dir.path(), 500).unwrap();
    assert!(res.rows.iter().all(|r| r.score == 1.0), "{:?}", res.rows);
}

#[test]
fn cap_applies_per_task() {
    let (dir, records) = fixture();
    let res = evaluate(&records, &mut Constant, dir.path(), 1).unwrap();
    assert_eq!(res.capped, 3);
    assert_eq!(res.outcomes.len(), 3);
}

#[test]
fn empty_records_give_empty_result() {
    let res = evaluate(&[], &mut Constant, Path::new("."), 500).unwrap();
    assert!(res.rows.is_empty() && res.outcomes.is_empty());
}

#[test]
fn probe_deltas() {
    let (dir, records) = fixture();
    let id = shuffle_probe(&records, &mut FirstImage, dir.path(), 500, Shuffle::Identity).unwrap();
    assert!(id.rows.iter().all(|r| r.delta == 0.0));
    assert_eq!(id.skipped_single_image, 1);
    let c = shuffle_probe(&records, &mut Constant, dir.path(), 500, Shuffle::Random { seed: 1 }).unwrap();
    assert!(c.rows.iter().all(|r| r.delta == 0.0));
    let s = shuffle_probe(&records, &mut FirstImage, dir.path(), 500, Shuffle::Reverse).unwrap();
    let diff = s.rows.iter().find(|r| r.task == "diff").unwrap();
    assert_eq!((diff.original, diff.shuffled, diff.delta), (1.0, 0.0, 1.0));
}

#[test]
fn malformed_record_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    std::fs::write(&path, r#"{"id":"x","task_id":"t","category":"c","task_instruction":"i","task_instance":[],"options":["a","b"],"answer":3,"response":"a"}"#).unwrap();
    assert!(read_records(&path).is_err());
    let seg: SegmentRef = serde_json::from_str(r#"{"t":"hi"}"#).unwrap();
    assert_eq!(seg, SegmentRef::Text { t: "hi".into() });
}
