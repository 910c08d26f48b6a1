//! Dataset ingestion: label-space files and line-delimited sample records.
//!
//! Single-label records look like
//! `{"id": "d1", "context": ["Hi."], "utterance": "I got the job!", "label": "joy"}`
//! and multi-label records like
//! `{"id": "p1", "title": "tired", "text": "...", "labels": ["sadness"]}`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::domain::{LabelMode, LabelSet, LabelSpace, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DatasetDescriptor {
    pub name: String,
    /// Label-space file.
    pub path: PathBuf,
    pub mode: LabelMode,
    pub label_space: LabelSpace,
    pub splits: BTreeMap<String, PathBuf>,
}

impl DatasetDescriptor {
    pub fn open(
        name: impl Into<String>,
        label_file: impl AsRef<Path>,
        splits: impl IntoIterator<Item = (String, PathBuf)>,
    ) -> Result<Self> {
        let path = label_file.as_ref().to_path_buf();
        let label_space = load_label_space(&path)?;
        let splits: BTreeMap<_, _> = splits.into_iter().collect();
        for (split, file) in &splits {
            if !file.is_file() {
                return Err(Error::Config(format!(
                    "split {split:?}: file {} does not exist",
                    file.display()
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            path,
            mode: label_space.mode(),
            label_space,
            splits,
        })
    }

    pub fn load(&self, split: &str) -> Result<Vec<Sample>> {
        load_samples(self, split)
    }
}

/// Parse a label-space file: `mode: single|multi` on the first non-blank
/// line, then one label per line.
pub fn load_label_space(path: &Path) -> Result<LabelSpace> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_label_space(&text, path)
}

pub fn parse_label_space(text: &str, path: &Path) -> Result<LabelSpace> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let (line_no, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty label-space file".into()))?;
    let mode = match header.split_once(':') {
        Some((key, value)) if key.trim().eq_ignore_ascii_case("mode") => match value.trim() {
            "single" => LabelMode::Single,
            "multi" => LabelMode::Multi,
            other => return Err(parse_err(line_no, format!("unknown mode {other:?}"))),
        },
        _ => return Err(parse_err(line_no, "first line must be `mode: single` or `mode: multi`".into())),
    };
    let labels: Vec<&str> = lines.map(|(_, l)| l).collect();
    LabelSpace::from_raw(&labels, mode).map_err(|e| parse_err(line_no, e.to_string()))
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: String,
    #[serde(default)]
    context: Option<Vec<String>>,
    #[serde(default)]
    utterance: Option<String>,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    labels: Option<Vec<String>>,
}

fn gold_set(id: &str, raw: &[String], space: &LabelSpace) -> Result<LabelSet> {
    raw.iter()
        .map(|r| {
            space.resolve(r).cloned().ok_or_else(|| Error::Schema {
                id: id.to_string(),
                message: format!("label {r:?} is not in the label space"),
            })
        })
        .collect()
}

fn to_sample(rec: RawRecord, space: &LabelSpace) -> Result<Sample> {
    let schema = |message: &str| Error::Schema {
        id: rec.id.clone(),
        message: message.to_string(),
    };
    let (context, focus_text, gold) = match space.mode() {
        LabelMode::Single => {
            let focus = rec.utterance.clone().ok_or_else(|| schema("missing `utterance`"))?;
            let label = rec.label.clone().ok_or_else(|| schema("missing `label`"))?;
            let gold = gold_set(&rec.id, &[label], space)?;
            (rec.context.clone().unwrap_or_default(), focus, gold)
        }
        LabelMode::Multi => {
            let focus = rec.text.clone().ok_or_else(|| schema("missing `text`"))?;
            let labels = rec.labels.clone().ok_or_else(|| schema("missing `labels`"))?;
            let gold = gold_set(&rec.id, &labels, space)?;
            if gold.is_empty() {
                return Err(schema("multi-label sample needs at least one gold label"));
            }
            let context = rec
                .title
                .clone()
                .filter(|t| !t.trim().is_empty())
                .into_iter()
                .collect();
            (context, focus, gold)
        }
    };
    if focus_text.trim().is_empty() {
        return Err(schema("empty text to classify"));
    }
    Ok(Sample {
        id: rec.id,
        context,
        focus_text,
        gold,
    })
}

pub fn load_samples(descriptor: &DatasetDescriptor, split: &str) -> Result<Vec<Sample>> {
    let path = descriptor
        .splits
        .get(split)
        .ok_or_else(|| Error::Argument(format!("dataset {:?} has no split {split:?}", descriptor.name)))?;
    load_sample_file(path, &descriptor.label_space)
}

pub fn load_sample_file(path: &Path, space: &LabelSpace) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_samples(&text, path, space)
}

pub fn parse_samples(text: &str, path: &Path, space: &LabelSpace) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let sample = to_sample(rec, space)?;
        if !ids.insert(sample.id.clone()) {
            return Err(Error::Schema {
                id: sample.id,
                message: "duplicate sample id".into(),
            });
        }
        samples.push(sample);
    }
    Ok(samples)
}

#[derive(Debug, Deserialize)]
struct PredictionRecord {
    id: String,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    labels: Option<Vec<String>>,
}

/// Predicted label sets keyed by sample id, from JSON lines carrying `id`
/// and `label` or `labels`. Other fields are ignored, so a dataset file is
/// also a valid prediction file. An empty `labels` list is an abstention.
pub fn load_predictions(path: &Path, space: &LabelSpace) -> Result<BTreeMap<String, LabelSet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let raw: Vec<String> = match (rec.labels, rec.label) {
            (Some(ls), _) => ls,
            (None, Some(l)) => vec![l],
            (None, None) => {
                return Err(Error::Schema {
                    id: rec.id,
                    message: "missing `label` or `labels`".into(),
                })
            }
        };
        let set = gold_set(&rec.id, &raw, space)?;
        if out.insert(rec.id.clone(), set).is_some() {
            return Err(Error::Schema {
                id: rec.id,
                message: "duplicate sample id".into(),
            });
        }
    }
    Ok(out)
}

/// Seeded selection of `k` samples without replacement. Chosen samples keep
/// their relative input order.
pub fn subsample(samples: &[Sample], k: usize, seed: u64) -> Result<Vec<Sample>> {
    if k < 1 || k > samples.len() {
        return Err(Error::Argument(format!(
            "subsample size {k} outside 1..={}",
            samples.len()
        )));
    }
    if k == samples.len() {
        return Ok(samples.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, samples.len(), k).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| samples[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_space() -> LabelSpace {
        LabelSpace::from_raw(&["joy", "sadness", "neutral"], LabelMode::Single).unwrap()
    }

    fn multi_space() -> LabelSpace {
        LabelSpace::from_raw(&["worthlessness", "sadness", "loneliness"], LabelMode::Multi).unwrap()
    }

    #[test]
    fn single_record_maps_fields() {
        let line = r#"{"id":"d1","context":["Hi."],"utterance":"I got the job!","label":"joy"}"#;
        let s = parse_samples(line, Path::new("x"), &single_space()).unwrap();
        assert_eq!(s[0].context, vec!["Hi."]);
        assert_eq!(s[0].focus_text, "I got the job!");
        assert_eq!(s[0].gold.iter().next().unwrap().as_str(), "joy");
    }

    #[test]
    fn context_is_optional_and_labels_normalize() {
        let line = r#"{"id":"d2","utterance":"yay","label":"Joy"}"#;
        let s = parse_samples(line, Path::new("x"), &single_space()).unwrap();
        assert!(s[0].context.is_empty());
        assert_eq!(s[0].gold.iter().next().unwrap().as_str(), "joy");
    }

    #[test]
    fn multi_record_maps_title_into_context() {
        let line = r#"{"id":"p1","title":"tired","text":"I feel like a waste of space","labels":["worthlessness","sadness"]}"#;
        let s = parse_samples(line, Path::new("x"), &multi_space()).unwrap();
        assert_eq!(s[0].gold.len(), 2);
        assert_eq!(s[0].context, vec!["tired"]);
    }

    #[test]
    fn errors_name_line_and_sample() {
        let text = "{\"id\":\"a\",\"utterance\":\"x\",\"label\":\"joy\"}\n\nnot json\n";
        match parse_samples(text, Path::new("f.jsonl"), &single_space()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let text = r#"{"id":"bad","utterance":"x","label":"anger"}"#;
        match parse_samples(text, Path::new("f"), &single_space()) {
            Err(Error::Schema { id, .. }) => assert_eq!(id, "bad"),
            other => panic!("unexpected {other:?}"),
        }
        let dup = "{\"id\":\"a\",\"utterance\":\"x\",\"label\":\"joy\"}\n{\"id\":\"a\",\"utterance\":\"y\",\"label\":\"joy\"}";
        assert!(matches!(
            parse_samples(dup, Path::new("f"), &single_space()),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn label_space_file_format() {
        let s = parse_label_space("mode: multi\nSadness\nanger\n\n", Path::new("l")).unwrap();
        assert_eq!(s.mode(), LabelMode::Multi);
        assert_eq!(s.labels().len(), 2);
        assert!(parse_label_space("sadness\nanger", Path::new("l")).is_err());
        assert!(parse_label_space("mode: both\na\nb", Path::new("l")).is_err());
    }

    fn five() -> Vec<Sample> {
        (0..5)
            .map(|i| Sample {
                id: format!("s{i}"),
                context: vec![],
                focus_text: "x".into(),
                gold: LabelSet::new(),
            })
            .collect()
    }

    #[test]
    fn subsample_contract() {
        let all = five();
        assert_eq!(subsample(&all, 5, 3).unwrap(), all);
        let a = subsample(&all, 2, 7).unwrap();
        assert_eq!(a, subsample(&all, 2, 7).unwrap());
        assert_eq!(a.len(), 2);
        let b = subsample(&all, 2, 8).unwrap();
        assert_eq!(b.len(), 2);
        assert!(subsample(&all, 0, 1).is_err());
        assert!(subsample(&all, 6, 1).is_err());
    }
}
