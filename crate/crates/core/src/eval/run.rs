//! Retrieval runs and their TREC / JSON-lines encodings.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PsptError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub passage_id: String,
    pub rank: usize,
    pub score: f64,
}

/// Ranked candidates per query, keyed by query id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievalRun {
    pub tag: String,
    pub queries: BTreeMap<String, Vec<RunEntry>>,
}

#[derive(Serialize, Deserialize)]
struct JsonLine {
    query_id: String,
    passage_id: String,
    rank: usize,
    score: f64,
    tag: String,
}

impl RetrievalRun {
    pub fn new(tag: &str) -> Self {
        RetrievalRun {
            tag: tag.to_string(),
            queries: BTreeMap::new(),
        }
    }

    /// Appends `(passage_id, score)` pairs in rank order.
    pub fn insert_ranked<I>(&mut self, query_id: &str, ranked: I)
    where
        I: IntoIterator<Item = (String, f64)>,
    {
        let entries = ranked
            .into_iter()
            .enumerate()
            .map(|(i, (passage_id, score))| RunEntry {
                passage_id,
                rank: i + 1,
                score,
            })
            .collect();
        self.queries.insert(query_id.to_string(), entries);
    }

    pub fn ranking(&self, query_id: &str) -> Option<Vec<&str>> {
        self.queries
            .get(query_id)
            .map(|es| es.iter().map(|e| e.passage_id.as_str()).collect())
    }

    pub fn validate(&self) -> Result<()> {
        for (q, entries) in &self.queries {
            let mut seen = HashSet::new();
            for (i, e) in entries.iter().enumerate() {
                if e.rank != i + 1 {
                    return Err(PsptError::Input(format!(
                        "query {q}: ranks are not contiguous from 1 (found {} at position {})",
                        e.rank,
                        i + 1
                    )));
                }
                if !seen.insert(e.passage_id.as_str()) {
                    return Err(PsptError::Input(format!(
                        "query {q}: passage {} listed twice",
                        e.passage_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// `qid Q0 pid rank score tag`, one line per entry.
    pub fn to_trec(&self) -> String {
        let mut out = String::new();
        for (q, entries) in &self.queries {
            for e in entries {
                out.push_str(&format!(
                    "{q} Q0 {} {} {} {}\n",
                    e.passage_id, e.rank, e.score, self.tag
                ));
            }
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (q, entries) in &self.queries {
            for e in entries {
                let line = JsonLine {
                    query_id: q.clone(),
                    passage_id: e.passage_id.clone(),
                    rank: e.rank,
                    score: e.score,
                    tag: self.tag.clone(),
                };
                out.push_str(&serde_json::to_string(&line).expect("run lines serialize"));
                out.push('\n');
            }
        }
        out
    }

    /// Parses either encoding; lines starting with `{` are JSON.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut run = RetrievalRun::default();
        let mut tags = Vec::<String>::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| PsptError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let rec = if line.starts_with('{') {
                serde_json::from_str::<JsonLine>(line).map_err(|e| err(e.to_string()))?
            } else {
                let cols: Vec<&str> = line.split_whitespace().collect();
                if cols.len() != 6 {
                    return Err(err(format!("expected 6 columns, found {}", cols.len())));
                }
                JsonLine {
                    query_id: cols[0].to_string(),
                    passage_id: cols[2].to_string(),
                    rank: cols[3]
                        .parse()
                        .map_err(|_| err(format!("bad rank {:?}", cols[3])))?,
                    score: cols[4]
                        .parse()
                        .map_err(|_| err(format!("bad score {:?}", cols[4])))?,
                    tag: cols[5].to_string(),
                }
            };
            if !tags.contains(&rec.tag) {
                tags.push(rec.tag.clone());
            }
            run.queries.entry(rec.query_id).or_default().push(RunEntry {
                passage_id: rec.passage_id,
                rank: rec.rank,
                score: rec.score,
            });
        }
        if tags.len() > 1 {
            return Err(PsptError::Input(format!(
                "{} mixes run tags {tags:?}",
                path.display()
            )));
        }
        run.tag = tags.pop().unwrap_or_default();
        for entries in run.queries.values_mut() {
            entries.sort_by_key(|e| e.rank);
        }
        run.validate()?;
        Ok(run)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PsptError::io(path, e))?;
        RetrievalRun::parse(&text, path)
    }

    /// Writes JSON-lines for `.jsonl` paths and TREC otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = if path.extension().is_some_and(|e| e == "jsonl") {
            self.to_jsonl()
        } else {
            self.to_trec()
        };
        fs::write(path, body).map_err(|e| PsptError::io(path, e))
    }
}
