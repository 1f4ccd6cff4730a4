use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PsptError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassageRecord {
    pub passage_id: String,
    pub text: String,
    pub relevant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub question_id: String,
    pub question_text: String,
    pub passages: Vec<PassageRecord>,
}

impl QaRecord {
    pub fn relevant_ids(&self) -> HashSet<&str> {
        self.passages
            .iter()
            .filter(|p| p.relevant)
            .map(|p| p.passage_id.as_str())
            .collect()
    }

    pub fn passage(&self, id: &str) -> Option<&PassageRecord> {
        self.passages.iter().find(|p| p.passage_id == id)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QaDataset {
    pub records: Vec<QaRecord>,
}

impl QaDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, question_id: &str) -> Option<&QaRecord> {
        self.records.iter().find(|r| r.question_id == question_id)
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.records.iter().flat_map(|r| {
            std::iter::once(r.question_text.as_str()).chain(r.passages.iter().map(|p| p.text.as_str()))
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| PsptError::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| PsptError::io(path, e))
    }
}

/// Parses JSON-lines text; `path` is only used in error messages.
pub fn parse_dataset(text: &str, path: &Path) -> Result<QaDataset> {
    let mut records = Vec::new();
    let mut question_ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| PsptError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: QaRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if rec.passages.is_empty() {
            return Err(err(format!("question {} has no passages", rec.question_id)));
        }
        let mut seen = HashSet::new();
        for p in &rec.passages {
            if !seen.insert(p.passage_id.as_str()) {
                return Err(err(format!(
                    "duplicate passage_id {} in question {}",
                    p.passage_id, rec.question_id
                )));
            }
        }
        if !question_ids.insert(rec.question_id.clone()) {
            return Err(err(format!("duplicate question_id {}", rec.question_id)));
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(PsptError::Data(format!(
            "{} contains no questions",
            path.display()
        )));
    }
    Ok(QaDataset { records })
}

pub fn load_dataset(path: &Path) -> Result<QaDataset> {
    let text = fs::read_to_string(path).map_err(|e| PsptError::io(path, e))?;
    parse_dataset(&text, path)
}
