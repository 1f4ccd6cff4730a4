//! Okapi BM25 over a small in-memory pool.

use std::collections::HashMap;

use crate::error::{PsptError, Result};
use crate::model::split_words;

pub const K1: f64 = 0.9;
pub const B: f64 = 0.4;

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub passage_id: String,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct Bm25Index {
    ids: Vec<String>,
    tfs: Vec<HashMap<String, usize>>,
    lens: Vec<usize>,
    df: HashMap<String, usize>,
    avgdl: f64,
}

impl Bm25Index {
    pub fn build<'a, I>(docs: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut ids = Vec::new();
        let mut tfs = Vec::new();
        let mut lens = Vec::new();
        let mut df: HashMap<String, usize> = HashMap::new();
        for (id, text) in docs {
            let words = split_words(text);
            let mut tf: HashMap<String, usize> = HashMap::new();
            for w in &words {
                *tf.entry(w.clone()).or_default() += 1;
            }
            for w in tf.keys() {
                *df.entry(w.clone()).or_default() += 1;
            }
            ids.push(id.to_string());
            lens.push(words.len());
            tfs.push(tf);
        }
        let avgdl = if lens.is_empty() {
            0.0
        } else {
            lens.iter().sum::<usize>() as f64 / lens.len() as f64
        };
        Bm25Index {
            ids,
            tfs,
            lens,
            df,
            avgdl,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `ln(1 + (N - n + 0.5) / (n + 0.5))`, never negative.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.df.get(term).copied().unwrap_or(0) as f64;
        let total = self.ids.len() as f64;
        (1.0 + (total - n + 0.5) / (n + 0.5)).ln()
    }

    /// Scores every document; each distinct query term counts once.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let mut terms = split_words(query);
        terms.sort();
        terms.dedup();
        let idfs: Vec<f64> = terms.iter().map(|t| self.idf(t)).collect();
        let avgdl = self.avgdl.max(f64::MIN_POSITIVE);
        self.tfs
            .iter()
            .zip(&self.lens)
            .map(|(tf, &len)| {
                let norm = K1 * (1.0 - B + B * len as f64 / avgdl);
                terms
                    .iter()
                    .zip(&idfs)
                    .map(|(t, idf)| {
                        let f = tf.get(t).copied().unwrap_or(0) as f64;
                        idf * f * (K1 + 1.0) / (f + norm)
                    })
                    .sum()
            })
            .collect()
    }

    /// Top `k` documents, ties broken by passage id.
    pub fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Hit>> {
        if self.is_empty() {
            return Err(PsptError::Data("BM25 index is empty".into()));
        }
        if k == 0 {
            return Err(PsptError::Input("k must be at least 1".into()));
        }
        let mut hits: Vec<Hit> = self
            .ids
            .iter()
            .zip(self.scores(query))
            .map(|(id, score)| Hit {
                passage_id: id.clone(),
                score,
            })
            .collect();
        hits.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.passage_id.cmp(&b.passage_id))
        });
        hits.truncate(k);
        Ok(hits)
    }
}
