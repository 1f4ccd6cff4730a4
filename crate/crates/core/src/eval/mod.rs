//! Datasets, a BM25 first stage, run files, R@k / H@k and paired t-tests.

mod bm25;
mod dataset;
mod metrics;
mod run;
mod stats;

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use log::info;
use serde::{Deserialize, Serialize};

pub use bm25::{Bm25Index, Hit, B as BM25_B, K1 as BM25_K1};
pub use dataset::{load_dataset, parse_dataset, PassageRecord, QaDataset, QaRecord};
pub use metrics::{hit_at_k, recall_at_k, RecallMode};
pub use run::{RetrievalRun, RunEntry};
pub use stats::paired_t_test;

use crate::error::{PsptError, Result};

/// Where BM25 looks for candidates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    /// Each question's own passage list.
    #[default]
    Question,
    /// Every distinct passage in the dataset.
    Corpus,
}

/// BM25 run over `dataset`, keeping the top `k` per question.
pub fn bm25_run(dataset: &QaDataset, k: usize, pool: PoolMode, tag: &str) -> Result<RetrievalRun> {
    let mut run = RetrievalRun::new(tag);
    let corpus = match pool {
        PoolMode::Corpus => {
            let mut seen = HashSet::new();
            let docs: Vec<(&str, &str)> = dataset
                .records
                .iter()
                .flat_map(|r| r.passages.iter())
                .filter(|p| seen.insert(p.passage_id.as_str()))
                .map(|p| (p.passage_id.as_str(), p.text.as_str()))
                .collect();
            Some(Bm25Index::build(docs))
        }
        PoolMode::Question => None,
    };
    for r in &dataset.records {
        let local;
        let index = match &corpus {
            Some(c) => c,
            None => {
                local = Bm25Index::build(
                    r.passages
                        .iter()
                        .map(|p| (p.passage_id.as_str(), p.text.as_str())),
                );
                &local
            }
        };
        let hits = index.retrieve(&r.question_text, k)?;
        run.insert_ranked(&r.question_id, hits.into_iter().map(|h| (h.passage_id, h.score)));
    }
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub question_id: String,
    pub recall: Vec<f64>,
    pub hit: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub tag: String,
    /// Macro means, aligned with [`MetricReport::ks`].
    pub recall: Vec<f64>,
    pub hit: Vec<f64>,
    pub per_query: Vec<QueryMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PValue {
    pub tag: String,
    pub metric: String,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ks: Vec<usize>,
    pub recall_mode: RecallMode,
    pub baseline: Option<String>,
    pub evaluated_queries: usize,
    /// Queries without any judged-relevant passage.
    pub excluded_queries: Vec<String>,
    pub runs: Vec<RunMetrics>,
    pub p_values: Vec<PValue>,
}

/// Macro R@k and H@k for every run over the union of their queries, plus
/// paired t-tests of each run against `baseline`.
pub fn evaluate(
    runs: &[RetrievalRun],
    dataset: &QaDataset,
    ks: &[usize],
    baseline: Option<&str>,
    recall_mode: RecallMode,
) -> Result<MetricReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(PsptError::Input("cutoffs must be positive and non-empty".into()));
    }
    let known: HashSet<&str> = dataset
        .records
        .iter()
        .flat_map(|r| r.passages.iter().map(|p| p.passage_id.as_str()))
        .collect();
    let mut queries = BTreeMap::new();
    for run in runs {
        for (q, entries) in &run.queries {
            let rec = dataset
                .get(q)
                .ok_or_else(|| PsptError::Input(format!("run {} references unknown query {q}", run.tag)))?;
            if let Some(e) = entries.iter().find(|e| !known.contains(e.passage_id.as_str())) {
                return Err(PsptError::Input(format!(
                    "run {} references unknown passage {} for query {q}",
                    run.tag, e.passage_id
                )));
            }
            queries.insert(q.as_str(), rec);
        }
    }
    let mut excluded = Vec::new();
    let judged: Vec<(&str, HashSet<&str>)> = queries
        .into_iter()
        .filter_map(|(q, rec)| {
            let rel = rec.relevant_ids();
            if rel.is_empty() {
                excluded.push(q.to_string());
                None
            } else {
                Some((q, rel))
            }
        })
        .collect();
    if !excluded.is_empty() {
        info!("{} queries without relevant passages excluded", excluded.len());
    }
    let mut out_runs = Vec::new();
    for run in runs {
        let mut per_query = Vec::new();
        for (q, rel) in &judged {
            let ranking = run.ranking(q).unwrap_or_default();
            per_query.push(QueryMetrics {
                question_id: q.to_string(),
                recall: ks
                    .iter()
                    .map(|&k| recall_at_k(&ranking, rel, k, recall_mode).expect("judged"))
                    .collect(),
                hit: ks
                    .iter()
                    .map(|&k| hit_at_k(&ranking, rel, k).expect("judged"))
                    .collect(),
            });
        }
        let mean = |f: &dyn Fn(&QueryMetrics) -> f64| {
            if per_query.is_empty() {
                0.0
            } else {
                per_query.iter().map(f).sum::<f64>() / per_query.len() as f64
            }
        };
        out_runs.push(RunMetrics {
            tag: run.tag.clone(),
            recall: (0..ks.len()).map(|i| mean(&|m| m.recall[i])).collect(),
            hit: (0..ks.len()).map(|i| mean(&|m| m.hit[i])).collect(),
            per_query,
        });
    }
    let mut p_values = Vec::new();
    if let Some(base_tag) = baseline {
        let base = out_runs
            .iter()
            .find(|r| r.tag == base_tag)
            .ok_or_else(|| PsptError::Input(format!("baseline tag {base_tag} not among the runs")))?;
        if judged.len() >= 2 {
            for r in out_runs.iter().filter(|r| r.tag != base_tag) {
                for (i, k) in ks.iter().enumerate() {
                    for (name, pick) in [("R", 0), ("H", 1)] {
                        let col = |m: &RunMetrics| -> Vec<f64> {
                            m.per_query
                                .iter()
                                .map(|q| if pick == 0 { q.recall[i] } else { q.hit[i] })
                                .collect()
                        };
                        p_values.push(PValue {
                            tag: r.tag.clone(),
                            metric: format!("{name}@{k}"),
                            p: paired_t_test(&col(r), &col(base))?,
                        });
                    }
                }
            }
        }
    }
    Ok(MetricReport {
        ks: ks.to_vec(),
        recall_mode,
        baseline: baseline.map(str::to_string),
        evaluated_queries: judged.len(),
        excluded_queries: excluded,
        runs: out_runs,
        p_values,
    })
}

impl MetricReport {
    pub fn run(&self, tag: &str) -> Option<&RunMetrics> {
        self.runs.iter().find(|r| r.tag == tag)
    }

    pub fn p_value(&self, tag: &str, metric: &str) -> Option<f64> {
        self.p_values
            .iter()
            .find(|p| p.tag == tag && p.metric == metric)
            .map(|p| p.p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Percentages per run; `*` marks p < 0.05 against the baseline.
    pub fn to_table(&self) -> String {
        let mut header = vec!["run".to_string()];
        for k in &self.ks {
            header.push(format!("R@{k}"));
            header.push(format!("H@{k}"));
        }
        let mut rows = vec![header];
        for r in &self.runs {
            let mut row = vec![r.tag.clone()];
            for (i, k) in self.ks.iter().enumerate() {
                for (name, v) in [("R", r.recall[i]), ("H", r.hit[i])] {
                    let mark = match self.p_value(&r.tag, &format!("{name}@{k}")) {
                        Some(p) if p < 0.05 => "*",
                        _ => "",
                    };
                    row.push(format!("{:.2}{mark}", 100.0 * v));
                }
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, w))| {
                    if c == 0 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        let _ = writeln!(
            out,
            "{} queries evaluated, {} without relevant passages excluded",
            self.evaluated_queries,
            self.excluded_queries.len()
        );
        if let Some(b) = &self.baseline {
            let _ = writeln!(out, "* p < 0.05 vs {b} (paired t-test)");
        }
        out
    }
}
