//! Labeled question corpora: loading, statistics, splitting, and a synthetic
//! generator for desk-scale runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::objectives::Corpus;
use crate::tokenizer::{wordpiece_tokenize, Vocab, CLS, MASK, PAD, SEP, UNK};

pub const HEADER: [&str; 3] = ["qid", "question_text", "target"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LabeledExample {
    pub qid: String,
    pub question_text: String,
    pub target: u8,
}

impl LabeledExample {
    pub fn label(&self) -> f64 {
        self.target as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RejectedRow {
    /// 1-based line in the source file.
    pub line: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadedDataset {
    pub examples: Vec<LabeledExample>,
    pub rejected: Vec<RejectedRow>,
}

fn parse_row(record: &csv::StringRecord) -> std::result::Result<LabeledExample, String> {
    if record.len() != 3 {
        return Err(format!("expected 3 fields, found {}", record.len()));
    }
    let text = record[1].trim();
    if text.is_empty() {
        return Err("empty question_text".into());
    }
    let target = match record[2].trim() {
        "0" => 0,
        "1" => 1,
        other => return Err(format!("target must be 0 or 1, got {other:?}")),
    };
    Ok(LabeledExample {
        qid: record[0].trim().to_string(),
        question_text: text.to_string(),
        target,
    })
}

/// Reads `qid,question_text,target` rows. Malformed rows are collected with
/// their line numbers instead of aborting the load.
pub fn parse_dataset(text: &str, path: &Path) -> Result<LoadedDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: e.to_string(),
            })
        }
        None => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "missing header".into(),
            })
        }
    };
    let names: Vec<String> = header.iter().map(|h| h.trim().trim_start_matches('\u{feff}').to_ascii_lowercase()).collect();
    if names != HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("missing header {}; found {:?}", HEADER.join(","), names),
        });
    }
    let mut out = LoadedDataset::default();
    for rec in records {
        match rec {
            Ok(r) => {
                let line = r.position().map(|p| p.line()).unwrap_or(0);
                match parse_row(&r) {
                    Ok(ex) => out.examples.push(ex),
                    Err(reason) => out.rejected.push(RejectedRow { line, reason }),
                }
            }
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                out.rejected.push(RejectedRow {
                    line,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LoadedDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_dataset(&text, path)
}

pub fn write_dataset(path: impl AsRef<Path>, examples: &[LabeledExample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    for ex in examples {
        w.write_record([ex.qid.as_str(), ex.question_text.as_str(), &ex.target.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub total: usize,
    pub positives: usize,
    pub positive_rate: f64,
    /// Token count → number of questions. Counts are WordPiece pieces when a
    /// vocabulary is supplied, whitespace words otherwise.
    pub length_histogram: BTreeMap<usize, usize>,
}

pub fn class_stats(data: &[LabeledExample], vocab: Option<&Vocab>) -> Result<DatasetStats> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot describe an empty dataset".into()));
    }
    let positives = data.iter().filter(|e| e.target == 1).count();
    let mut hist = BTreeMap::new();
    for e in data {
        let n = match vocab {
            Some(v) => wordpiece_tokenize(&e.question_text, v, true).len(),
            None => e.question_text.split_whitespace().count(),
        };
        *hist.entry(n).or_insert(0) += 1;
    }
    Ok(DatasetStats {
        total: data.len(),
        positives,
        positive_rate: positives as f64 / data.len() as f64,
        length_histogram: hist,
    })
}

fn class_indices(data: &[LabeledExample]) -> [Vec<usize>; 2] {
    let mut by = [Vec::new(), Vec::new()];
    for (i, e) in data.iter().enumerate() {
        by[e.target as usize].push(i);
    }
    by
}

fn take_in_order(data: &[LabeledExample], mut idx: Vec<usize>) -> Vec<LabeledExample> {
    idx.sort_unstable();
    idx.into_iter().map(|i| data[i].clone()).collect()
}

/// Splits each class separately: `round(fraction * n_c)` members, clamped to
/// `[1, n_c - 1]`, go to validation. Both parts keep the input order.
pub fn stratified_split(
    data: &[LabeledExample],
    validation_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(invalid(format!(
            "validation fraction must be in (0, 1), got {validation_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (class, mut idx) in class_indices(data).into_iter().enumerate() {
        let n = idx.len();
        if n < 2 {
            return Err(Error::Dataset(format!(
                "class {class} has {n} example(s); stratified split needs at least 2"
            )));
        }
        let k = ((validation_fraction * n as f64).round() as usize).clamp(1, n - 1);
        idx.shuffle(&mut rng);
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    Ok((take_in_order(data, train), take_in_order(data, val)))
}

/// Seeded sample of `limit` examples with class proportions kept (each
/// present class keeps at least one member).
pub fn stratified_sample(data: &[LabeledExample], limit: usize, seed: u64) -> Result<Vec<LabeledExample>> {
    if limit >= data.len() {
        return Ok(data.to_vec());
    }
    if limit == 0 {
        return Err(invalid("limit must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by = class_indices(data);
    let pos_share = by[1].len() as f64 / data.len() as f64;
    let mut k1 = (pos_share * limit as f64).round() as usize;
    if !by[1].is_empty() && limit >= 2 {
        k1 = k1.max(1);
    }
    if !by[0].is_empty() && limit >= 2 {
        k1 = k1.min(limit - 1);
    }
    let k1 = k1.min(by[1].len());
    let k0 = (limit - k1).min(by[0].len());
    let mut picked = Vec::with_capacity(limit);
    for (mut idx, k) in by.into_iter().zip([k0, k1]) {
        idx.shuffle(&mut rng);
        picked.extend_from_slice(&idx[..k]);
    }
    Ok(take_in_order(data, picked))
}

/// Plain text, one segment per line, blank lines between documents.
pub fn parse_corpus(text: &str, vocab: &Vocab) -> Corpus {
    let mut docs: Corpus = Vec::new();
    let mut current = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
            continue;
        }
        let ids: Vec<u32> = wordpiece_tokenize(line, vocab, true)
            .iter()
            .map(|t| vocab.id(t).unwrap_or(vocab.unk_id()))
            .collect();
        if !ids.is_empty() {
            current.push(ids);
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    docs
}

pub fn load_corpus(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Corpus> {
    let text = fs::read_to_string(path.as_ref())?;
    let corpus = parse_corpus(&text, vocab);
    if corpus.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: corpus has no segments",
            path.as_ref().display()
        )));
    }
    Ok(corpus)
}

/// Key=value settings, one per line, `#` starts a comment.
pub fn parse_config_text(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: format!("expected key = value, got {line:?}"),
        })?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: "empty key".into(),
            });
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

pub fn load_config_file(path: &PathBuf) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    parse_config_text(&text, path)
}

/// Word the synthetic generator uses to mark insincere questions.
pub const TRIGGER_WORD: &str = "zorblax";

const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn filler_words(n: usize) -> Vec<String> {
    let mut words = Vec::with_capacity(n);
    'outer: for a in ONSETS {
        for b in VOWELS {
            for c in ONSETS {
                for d in VOWELS {
                    if words.len() == n {
                        break 'outer;
                    }
                    words.push(format!("{a}{b}{c}{d}"));
                }
            }
        }
    }
    words
}

/// Synthetic questions whose label is 1 exactly when [`TRIGGER_WORD`]
/// appears. Positives make up `round(n * positive_rate)` of the rows.
/// Returns the examples and a vocabulary covering every word.
pub fn synthetic_questions(n: usize, positive_rate: f64, seed: u64) -> Result<(Vec<LabeledExample>, Vocab)> {
    if !(0.0..=1.0).contains(&positive_rate) {
        return Err(invalid("positive rate must be in [0, 1]"));
    }
    let words = filler_words(120);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positives = (n as f64 * positive_rate).round() as usize;
    let mut labels: Vec<u8> = (0..n).map(|i| (i < positives) as u8).collect();
    labels.shuffle(&mut rng);
    let examples = labels
        .into_iter()
        .enumerate()
        .map(|(i, target)| {
            let len = rng.gen_range(4..=12);
            let mut toks: Vec<&str> = (0..len).map(|_| words[rng.gen_range(0..words.len())].as_str()).collect();
            if target == 1 {
                let at = rng.gen_range(0..=toks.len());
                toks.insert(at, TRIGGER_WORD);
            }
            LabeledExample {
                qid: format!("q{i:05}"),
                question_text: format!("{}?", toks.join(" ")),
                target,
            }
        })
        .collect();
    let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, MASK].iter().map(|s| s.to_string()).collect();
    tokens.push("?".into());
    tokens.push(TRIGGER_WORD.into());
    tokens.extend(words);
    Ok((examples, Vocab::from_tokens(tokens)?))
}

/// Documents of synthetic segments for pretraining runs.
pub fn synthetic_corpus_text(documents: usize, segments: usize, seed: u64) -> Result<String> {
    let (qs, _) = synthetic_questions(documents * segments, 0.1, seed)?;
    let mut out = String::new();
    for doc in qs.chunks(segments.max(1)) {
        for q in doc {
            out.push_str(&q.question_text);
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out)
}
