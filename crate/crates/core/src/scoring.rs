//! Question log-likelihood scoring and reranking.
//!
//! A passage is scored by `Σ_l log P(q_l | prompt, passage, "question :", q_<l)`
//! under the frozen model. The prompt is either the learned soft prompt with
//! the adapted passage embeddings ([`PsptScorer`]) or a literal instruction
//! with plain passage embeddings ([`UprScorer`]).

use std::collections::HashSet;

use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::adapter::{fit_passage, layout, AssembledInput, PsptParams, SEPARATOR};
use crate::error::{PsptError, Result};
use crate::model::{BoundModel, MicroLM};
use crate::tensor::{Graph, Real, Var};

pub const UPR_INST_PROMPT: &str = "please generate question for this passage based on the example";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub value: f64,
    pub mode: ScoreMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub passage_id: String,
    pub text: String,
    pub retriever_rank: usize,
    pub retriever_score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub candidate: Candidate,
    pub score: Score,
}

/// Scalar log-likelihood of the assembled question targets.
pub(crate) fn question_loglik<T: Real>(
    g: &mut Graph<T>,
    model: &BoundModel,
    assembled: &AssembledInput,
    mode: ScoreMode,
) -> Result<Var> {
    let n = assembled.target_ids.len();
    if n == 0 {
        return Err(PsptError::Contract("cannot score an empty question".into()));
    }
    let lp = model.target_logprobs(
        g,
        assembled.input,
        &assembled.target_positions,
        &assembled.target_ids,
    )?;
    let total = g.sum(lp);
    Ok(match mode {
        ScoreMode::Sum => total,
        ScoreMode::Mean => g.scale(total, T::from_f64_lossy(1.0 / n as f64)),
    })
}

fn finish<T: Real>(g: &Graph<T>, v: Var, mode: ScoreMode) -> Result<Score> {
    let value = g.value(v).item().to_f64_lossy();
    if !value.is_finite() {
        return Err(PsptError::Numeric(format!("score is not finite ({value})")));
    }
    Ok(Score { value, mode })
}

pub fn score_pspt<T: Real>(
    question: &[u32],
    passage: &[u32],
    params: &PsptParams<T>,
    model: &MicroLM<T>,
    mode: ScoreMode,
) -> Result<Score> {
    let sep = model.tokenize(SEPARATOR);
    pspt_with_separator(question, passage, params, model, &sep, mode)
}

fn pspt_with_separator<T: Real>(
    question: &[u32],
    passage: &[u32],
    params: &PsptParams<T>,
    model: &MicroLM<T>,
    sep: &[u32],
    mode: ScoreMode,
) -> Result<Score> {
    if question.is_empty() {
        return Err(PsptError::Contract("cannot score an empty question".into()));
    }
    let mut g = Graph::new();
    let bm = model.bind(&mut g, false);
    let bp = params.bind(&mut g, false);
    let a = bp.assemble(&mut g, &bm, sep, passage, question, model.config().max_seq_len)?;
    let v = question_loglik(&mut g, &bm, &a, mode)?;
    finish(&g, v, mode)
}

/// Scores with `[prompt ids ; passage ; sep ; question]`, all plain embeddings.
pub fn score_with_prompt_ids<T: Real>(
    question: &[u32],
    passage: &[u32],
    prompt: &[u32],
    model: &MicroLM<T>,
    mode: ScoreMode,
) -> Result<Score> {
    let sep = model.tokenize(SEPARATOR);
    upr_with_separator(question, passage, prompt, model, &sep, mode)
}

fn upr_with_separator<T: Real>(
    question: &[u32],
    passage: &[u32],
    prompt: &[u32],
    model: &MicroLM<T>,
    sep: &[u32],
    mode: ScoreMode,
) -> Result<Score> {
    if question.is_empty() {
        return Err(PsptError::Contract("cannot score an empty question".into()));
    }
    let mut g = Graph::new();
    let bm = model.bind(&mut g, false);
    let passage = fit_passage(
        prompt.len(),
        sep,
        passage,
        question,
        1,
        model.config().max_seq_len,
    )?;
    let prefix = bm.embed(&mut g, prompt)?;
    let e4 = bm.embed(&mut g, passage)?;
    let a = layout(&mut g, &bm, prefix, &[e4], sep, question)?;
    let v = question_loglik(&mut g, &bm, &a, mode)?;
    finish(&g, v, mode)
}

pub fn score_upr<T: Real>(
    question: &[u32],
    passage: &[u32],
    model: &MicroLM<T>,
    prompt_text: &str,
    mode: ScoreMode,
) -> Result<Score> {
    let prompt = model.tokenize(prompt_text);
    if prompt.is_empty() {
        return Err(PsptError::Config(format!(
            "prompt {prompt_text:?} tokenizes to nothing"
        )));
    }
    score_with_prompt_ids(question, passage, &prompt, model, mode)
}

/// `tok(instruction) + tok(example passage) + sep + tok(example question)`.
pub fn upr_inst_prompt<T: Real>(
    model: &MicroLM<T>,
    instruction: &str,
    example_passage: &str,
    example_question: &str,
) -> Vec<u32> {
    let mut ids = model.tokenize(instruction);
    ids.extend(model.tokenize(example_passage));
    ids.extend(model.tokenize(SEPARATOR));
    ids.extend(model.tokenize(example_question));
    ids
}

pub trait Scorer: Sync {
    fn name(&self) -> &str;
    fn tokenize(&self, text: &str) -> Vec<u32>;
    fn score(&self, question: &[u32], passage: &[u32]) -> Result<Score>;
}

pub struct PsptScorer<'a, T> {
    model: &'a MicroLM<T>,
    params: &'a PsptParams<T>,
    sep: Vec<u32>,
    mode: ScoreMode,
}

impl<'a, T: Real> PsptScorer<'a, T> {
    pub fn new(model: &'a MicroLM<T>, params: &'a PsptParams<T>, mode: ScoreMode) -> Self {
        PsptScorer {
            model,
            params,
            sep: model.tokenize(SEPARATOR),
            mode,
        }
    }
}

impl<T: Real> Scorer for PsptScorer<'_, T> {
    fn name(&self) -> &str {
        "pspt"
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        self.model.tokenize(text)
    }

    fn score(&self, question: &[u32], passage: &[u32]) -> Result<Score> {
        pspt_with_separator(question, passage, self.params, self.model, &self.sep, self.mode)
    }
}

pub struct UprScorer<'a, T> {
    model: &'a MicroLM<T>,
    prompt: Vec<u32>,
    sep: Vec<u32>,
    mode: ScoreMode,
    name: &'static str,
}

impl<'a, T: Real> UprScorer<'a, T> {
    pub fn new(model: &'a MicroLM<T>, prompt_text: &str, mode: ScoreMode) -> Result<Self> {
        let prompt = model.tokenize(prompt_text);
        if prompt.is_empty() {
            return Err(PsptError::Config(format!(
                "prompt {prompt_text:?} tokenizes to nothing"
            )));
        }
        Ok(UprScorer {
            model,
            prompt,
            sep: model.tokenize(SEPARATOR),
            mode,
            name: "upr",
        })
    }

    /// Instruction followed by one worked (passage, question) example.
    pub fn instructed(
        model: &'a MicroLM<T>,
        instruction: &str,
        example_passage: &str,
        example_question: &str,
        mode: ScoreMode,
    ) -> Result<Self> {
        let mut s = UprScorer::new(model, instruction, mode)?;
        s.prompt = upr_inst_prompt(model, instruction, example_passage, example_question);
        s.name = "upr_inst";
        Ok(s)
    }

    pub fn prompt_ids(&self) -> &[u32] {
        &self.prompt
    }
}

impl<T: Real> Scorer for UprScorer<'_, T> {
    fn name(&self) -> &str {
        self.name
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        self.model.tokenize(text)
    }

    fn score(&self, question: &[u32], passage: &[u32]) -> Result<Score> {
        upr_with_separator(question, passage, &self.prompt, self.model, &self.sep, self.mode)
    }
}

pub fn worker_pool(workers: usize) -> Result<ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PsptError::Config(format!("cannot start {workers} workers: {e}")))
}

/// Scores every candidate once and sorts by score (descending), breaking ties
/// by retriever rank. The result does not depend on the pool size.
pub fn rerank(
    question: &str,
    candidates: Vec<Candidate>,
    scorer: &dyn Scorer,
    pool: &ThreadPool,
) -> Result<Vec<Scored>> {
    if candidates.is_empty() {
        return Err(PsptError::Input("no candidates to rerank".into()));
    }
    let mut seen = HashSet::new();
    for c in &candidates {
        if !seen.insert(c.passage_id.as_str()) {
            return Err(PsptError::Input(format!(
                "duplicate passage id {:?} in candidate list",
                c.passage_id
            )));
        }
    }
    let q = scorer.tokenize(question);
    let scores: Vec<Score> = pool.install(|| {
        candidates
            .par_iter()
            .map(|c| scorer.score(&q, &scorer.tokenize(&c.text)))
            .collect::<Result<_>>()
    })?;
    let mut out: Vec<Scored> = candidates
        .into_iter()
        .zip(scores)
        .map(|(candidate, score)| Scored { candidate, score })
        .collect();
    sort_scored(&mut out);
    Ok(out)
}

pub(crate) fn sort_scored(items: &mut [Scored]) {
    items.sort_by(|a, b| {
        b.score
            .value
            .total_cmp(&a.score.value)
            .then(a.candidate.retriever_rank.cmp(&b.candidate.retriever_rank))
    });
}
