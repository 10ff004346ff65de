//! JSON Lines records written by the pipeline and the stage subcommands.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::fluency_filter::FilterResult;
use crate::grouping::GroupingRecord;
use crate::retrieval::{ScoredDescription, TopKRecord};
use crate::summarization::{Candidate, PseudoSentenceSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Retrieve,
    Group,
    Summarize,
    Refine,
    Filter,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Retrieve => "retrieve",
            Stage::Group => "group",
            Stage::Summarize => "summarize",
            Stage::Refine => "refine",
            Stage::Filter => "filter",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub scores: Vec<f64>,
    pub selected_index: usize,
    pub selected_sentence: String,
}

/// Everything the pipeline produced for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub topk: Vec<ScoredDescription>,
    pub head: Vec<String>,
    pub tail_groups: Vec<Vec<String>>,
    pub candidates: Vec<Candidate>,
    pub filter: Option<FilterOutcome>,
}

impl ImageRecord {
    pub fn topk_record(&self) -> TopKRecord {
        TopKRecord {
            image_id: self.image_id.clone(),
            topk: self.topk.clone(),
        }
    }

    pub fn grouping_record(&self) -> GroupingRecord {
        GroupingRecord {
            image_id: self.image_id.clone(),
            head: self.head.clone(),
            tail_groups: self.tail_groups.clone(),
        }
    }

    pub fn candidate_set(&self) -> PseudoSentenceSet {
        PseudoSentenceSet {
            image_id: self.image_id.clone(),
            candidates: self.candidates.clone(),
        }
    }

    pub fn filter_result(&self) -> Option<FilterResult> {
        self.filter.as_ref().map(|f| FilterResult {
            image_id: self.image_id.clone(),
            scores: f.scores.clone(),
            selected_index: f.selected_index,
            selected_sentence: f.selected_sentence.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub image_id: String,
    pub stage: Stage,
    pub message: String,
}

/// One line of `dataset.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum DatasetRecord {
    Ok(ImageRecord),
    Error(ImageFailure),
}

impl DatasetRecord {
    pub fn image_id(&self) -> &str {
        match self {
            Self::Ok(r) => &r.image_id,
            Self::Error(f) => &f.image_id,
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, Self::Ok(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub prediction: String,
}

/// Captioner predictions in file order, plus an id index.
#[derive(Debug, Clone, Default)]
pub struct Predictions {
    pub records: Vec<PredictionRecord>,
    index: HashMap<String, usize>,
}

impl Predictions {
    pub fn new(records: Vec<PredictionRecord>) -> Result<Self, PipelineError> {
        let mut index = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.image_id.clone(), i).is_some() {
                return Err(PipelineError::Input(format!(
                    "duplicate prediction for image {:?}",
                    r.image_id
                )));
            }
        }
        Ok(Self { records, index })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::new(read_jsonl(path)?)
    }

    pub fn get(&self, image_id: &str) -> Option<&str> {
        self.index.get(image_id).map(|&i| self.records[i].prediction.as_str())
    }

    pub fn texts(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.prediction.as_str()).collect()
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
    parse_jsonl(&text).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

pub fn to_jsonl<'a, T: Serialize + 'a, I: IntoIterator<Item = &'a T>>(items: I) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("records serialize");
        out.write_all(b"\n").unwrap();
    }
    out
}

pub fn write_jsonl<'a, T: Serialize + 'a, I: IntoIterator<Item = &'a T>>(
    path: &Path,
    items: I,
) -> Result<(), PipelineError> {
    write_atomic(path, &to_jsonl(items))
}

/// Write through a temporary sibling and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, bytes)
        .and_then(|_| std::fs::rename(&tmp, path))
        .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}
