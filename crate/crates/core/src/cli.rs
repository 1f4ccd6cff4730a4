//! Command-line workflows. Each command is a function of the JSON run spec,
//! its input files and the seed, and writes its artifacts byte-for-byte
//! reproducibly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::adapter::{trainable_count, trainable_fraction, AdapterSettings, PsptParams, DEFAULT_HARD_PROMPT, SEPARATOR};
use crate::error::{PsptError, Result};
use crate::eval::{
    bm25_run, evaluate, load_dataset, PoolMode, QaDataset, RecallMode, RetrievalRun,
};
use crate::model::checkpoint::Checkpoint;
use crate::model::{pretrain_micro_lm, MicroLM, ModelConfig, PretrainConfig, Vocabulary};
use crate::scoring::{rerank, worker_pool, Candidate, PsptScorer, ScoreMode, Scorer, UprScorer, UPR_INST_PROMPT};
use crate::trainer::{build_instances, train, write_log, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ScorerKind {
    #[default]
    Pspt,
    Upr,
    UprInst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSpec {
    pub soft_prompt_len: usize,
    pub rank: usize,
    pub alpha: f64,
    pub hard_prompt: String,
    pub literal_concat: bool,
    pub score_mode: ScoreMode,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        let s = AdapterSettings::default();
        AdapterSpec {
            soft_prompt_len: s.soft_prompt_len,
            rank: s.rank,
            alpha: s.alpha,
            hard_prompt: DEFAULT_HARD_PROMPT.to_string(),
            literal_concat: s.literal_concat,
            score_mode: ScoreMode::Sum,
        }
    }
}

/// Worked example shown to the `upr_inst` scorer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UprInstSpec {
    pub instruction: String,
    pub example_passage: String,
    pub example_question: String,
}

impl Default for UprInstSpec {
    fn default() -> Self {
        UprInstSpec {
            instruction: UPR_INST_PROMPT.to_string(),
            example_passage: String::new(),
            example_question: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathSpec {
    pub dataset: Option<PathBuf>,
    /// Plain text, one pretraining sequence per line. Defaults to the
    /// dataset's questions and passages.
    pub pretrain_corpus: Option<PathBuf>,
    pub model_checkpoint: PathBuf,
    pub pspt_checkpoint: PathBuf,
    /// Candidate run to rerank. Without it BM25 over the dataset is used.
    pub run_in: Option<PathBuf>,
    pub run_out: PathBuf,
    pub train_log: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathSpec {
    fn default() -> Self {
        PathSpec {
            dataset: None,
            pretrain_corpus: None,
            model_checkpoint: "model.ckpt".into(),
            pspt_checkpoint: "pspt.ckpt".into(),
            run_in: None,
            run_out: "rerank.run".into(),
            train_log: "train_log.jsonl".into(),
            output_dir: "report".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub ks: Vec<usize>,
    pub baseline: Option<String>,
    pub recall_mode: RecallMode,
    pub pool_mode: PoolMode,
    pub bm25_k: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            ks: vec![1, 5, 10],
            baseline: None,
            recall_mode: RecallMode::default(),
            pool_mode: PoolMode::default(),
            bm25_k: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    pub seed: u64,
    pub workers: usize,
    pub scorer: ScorerKind,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub adapter: AdapterSpec,
    pub upr_inst: UprInstSpec,
    pub paths: PathSpec,
    pub eval: EvalSpec,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            seed: 0,
            workers: 1,
            scorer: ScorerKind::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            adapter: AdapterSpec::default(),
            upr_inst: UprInstSpec::default(),
            paths: PathSpec::default(),
            eval: EvalSpec::default(),
        }
    }
}

impl RunSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| PsptError::Config(format!("run spec: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PsptError::io(path, e))?;
        Self::from_json(&text)
    }

    /// A single seed drives every random stream.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.train.seed = seed;
    }

    pub fn adapter_settings(&self) -> AdapterSettings {
        AdapterSettings {
            soft_prompt_len: self.adapter.soft_prompt_len,
            rank: self.adapter.rank,
            alpha: self.adapter.alpha,
            literal_concat: self.adapter.literal_concat,
            seed: self.seed,
        }
    }

    /// Every problem found, joined into one configuration error.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (section, r) in [
            ("model", self.model.validate()),
            ("train", self.train.validate()),
        ] {
            if let Err(e) = r {
                problems.push(format!("{section}: {e}"));
            }
        }
        let a = &self.adapter;
        if a.soft_prompt_len == 0 {
            problems.push("adapter.soft_prompt_len must be at least 1".into());
        }
        if a.rank == 0 || a.rank > self.model.dim {
            problems.push(format!("adapter.rank must be in 1..={}", self.model.dim));
        }
        if !(a.alpha.is_finite() && a.alpha > 0.0) {
            problems.push("adapter.alpha must be positive".into());
        }
        if a.hard_prompt.trim().is_empty() {
            problems.push("adapter.hard_prompt must not be empty".into());
        }
        if self.pretrain.batch_size == 0 {
            problems.push("pretrain.batch_size must be at least 1".into());
        }
        if !(self.pretrain.lr.is_finite() && self.pretrain.lr > 0.0) {
            problems.push("pretrain.lr must be positive".into());
        }
        if self.workers == 0 {
            problems.push("workers must be at least 1".into());
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            problems.push("eval.ks must be a non-empty list of positive cutoffs".into());
        }
        if self.eval.bm25_k == 0 {
            problems.push("eval.bm25_k must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(PsptError::Config(problems.join("; ")))
        }
    }

    fn dataset_path(&self) -> Result<&Path> {
        self.paths
            .dataset
            .as_deref()
            .ok_or_else(|| PsptError::Config("paths.dataset is required".into()))
    }
}

#[derive(Debug, Parser)]
#[command(name = "pspt", version, about = "Passage-specific prompt tuning for passage reranking")]
pub struct Cli {
    /// JSON run spec; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the run spec.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the vocabulary, initialize (and optionally pretrain) the model.
    InitModel {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain an existing model checkpoint on next-token prediction.
    Pretrain {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the soft prompt and passage adapter.
    Train,
    /// Rerank a candidate run.
    Rerank {
        #[arg(long)]
        run_in: Option<PathBuf>,
        #[arg(long)]
        run_out: Option<PathBuf>,
        #[arg(long, value_enum)]
        scorer: Option<ScorerKind>,
    },
    /// Score runs against the dataset.
    Eval {
        /// Run files; their tags label the report rows.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let mut spec = match &cli.config {
        Some(p) => RunSpec::load(p)?,
        None => RunSpec::default(),
    };
    if let Some(s) = cli.seed {
        spec.override_seed(s);
    }
    if let Some(w) = cli.workers {
        spec.workers = w;
    }
    match cli.command {
        Command::InitModel { out: path } => {
            if let Some(p) = path {
                spec.paths.model_checkpoint = p;
            }
            cmd_init_model(&spec, out)
        }
        Command::Pretrain { out: path } => {
            let dest = path.unwrap_or_else(|| spec.paths.model_checkpoint.clone());
            cmd_pretrain(&spec, &dest, out)
        }
        Command::Train => cmd_train(&spec, out),
        Command::Rerank {
            run_in,
            run_out,
            scorer,
        } => {
            if run_in.is_some() {
                spec.paths.run_in = run_in;
            }
            if let Some(p) = run_out {
                spec.paths.run_out = p;
            }
            if let Some(s) = scorer {
                spec.scorer = s;
            }
            cmd_rerank(&spec, out)
        }
        Command::Eval {
            runs,
            baseline,
            output_dir,
        } => {
            if baseline.is_some() {
                spec.eval.baseline = baseline;
            }
            if let Some(p) = output_dir {
                spec.paths.output_dir = p;
            }
            cmd_eval(&spec, &runs, out)
        }
    }
}

fn say(out: &mut dyn Write, line: String) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| PsptError::io("<stdout>", e))
}

fn load_model(spec: &RunSpec) -> Result<MicroLM<f32>> {
    Checkpoint::load(&spec.paths.model_checkpoint)?.model()
}

fn pretraining_sequences(spec: &RunSpec, vocab: &Vocabulary) -> Result<Vec<Vec<u32>>> {
    let lines: Vec<String> = match &spec.paths.pretrain_corpus {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| PsptError::io(p, e))?
            .lines()
            .map(str::to_string)
            .collect(),
        None => load_dataset(spec.dataset_path()?)?
            .texts()
            .map(str::to_string)
            .collect(),
    };
    Ok(lines
        .iter()
        .map(|l| vocab.tokenize(l))
        .filter(|s| !s.is_empty())
        .collect())
}

/// Φ and θ sizes plus θ/Φ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamReport {
    pub frozen: usize,
    pub trainable: usize,
    pub fraction: f64,
}

pub fn param_report(spec: &RunSpec, model: &MicroLM<f32>) -> ParamReport {
    let c = model.config();
    let frozen = model.num_params();
    let trainable = trainable_count(spec.adapter.soft_prompt_len, c.vocab_size, spec.adapter.rank, c.dim);
    ParamReport {
        frozen,
        trainable,
        fraction: trainable_fraction(trainable, frozen),
    }
}

pub fn cmd_init_model(spec: &RunSpec, out: &mut dyn Write) -> Result<()> {
    spec.validate()?;
    let ds = load_dataset(spec.dataset_path()?)?;
    let required = [
        spec.adapter.hard_prompt.as_str(),
        SEPARATOR,
        spec.upr_inst.instruction.as_str(),
    ];
    let extra = match &spec.paths.pretrain_corpus {
        Some(p) => fs::read_to_string(p).map_err(|e| PsptError::io(p, e))?,
        None => String::new(),
    };
    let vocab = Vocabulary::build(ds.texts().chain(extra.lines()), &required, spec.model.vocab_size)?;
    let mut model = MicroLM::<f32>::init(spec.model, vocab, spec.seed)?;
    if spec.pretrain.steps > 0 {
        let corpus = pretraining_sequences(spec, model.vocab())?;
        model = pretrain_micro_lm(model, &corpus, &spec.pretrain)?;
    }
    Checkpoint::from_model(&model).save(&spec.paths.model_checkpoint)?;
    let r = param_report(spec, &model);
    say(out, format!("vocabulary: {} tokens", model.vocab().len()))?;
    say(out, format!("frozen parameters: {}", r.frozen))?;
    say(out, format!("trainable parameters: {}", r.trainable))?;
    say(out, format!("trainable fraction: {:.6}%", 100.0 * r.fraction))?;
    say(out, format!("checksum: {}", model.checksum()))?;
    say(out, format!("wrote {}", spec.paths.model_checkpoint.display()))
}

pub fn cmd_pretrain(spec: &RunSpec, dest: &Path, out: &mut dyn Write) -> Result<()> {
    spec.validate()?;
    let model = load_model(spec)?;
    let corpus = pretraining_sequences(spec, model.vocab())?;
    let model = pretrain_micro_lm(model, &corpus, &spec.pretrain)?;
    Checkpoint::from_model(&model).save(dest)?;
    say(out, format!("checksum: {}", model.checksum()))?;
    say(out, format!("wrote {}", dest.display()))
}

/// θ checkpoint: the model's config and vocabulary plus the adapter buffers.
fn pspt_checkpoint(model: &MicroLM<f32>, params: &PsptParams<f32>) -> Checkpoint {
    let mut ckpt = Checkpoint {
        config: *model.config(),
        vocab: model.vocab().clone(),
        scalars: Vec::new(),
        buffers: Vec::new(),
    };
    params.write_to(&mut ckpt);
    ckpt
}

fn load_pspt(spec: &RunSpec, model: &MicroLM<f32>) -> Result<PsptParams<f32>> {
    let ckpt = Checkpoint::load(&spec.paths.pspt_checkpoint)?;
    if ckpt.config != *model.config() || ckpt.vocab != *model.vocab() {
        return Err(PsptError::Input(format!(
            "{} was trained against a different model",
            spec.paths.pspt_checkpoint.display()
        )));
    }
    PsptParams::from_checkpoint(&ckpt)
}

pub fn cmd_train(spec: &RunSpec, out: &mut dyn Write) -> Result<()> {
    spec.validate()?;
    let model = load_model(spec)?;
    let ds = load_dataset(spec.dataset_path()?)?;
    let instances = build_instances(&ds, model.vocab(), spec.train.seed, spec.train.train_sample_size)?;
    let params = PsptParams::init(&model, &spec.adapter.hard_prompt, &spec.adapter_settings())?;
    let checksum = model.checksum();
    let outcome = train(&spec.train, &instances, &model, params)?;
    if model.checksum() != checksum {
        return Err(PsptError::Contract("frozen model changed during training".into()));
    }
    pspt_checkpoint(&model, &outcome.params).save(&spec.paths.pspt_checkpoint)?;
    let log_path = &spec.paths.train_log;
    let mut log = Vec::new();
    write_log(&outcome.log, &mut log).map_err(|e| PsptError::io(log_path, e))?;
    fs::write(log_path, log).map_err(|e| PsptError::io(log_path, e))?;
    say(out, format!(
        "trained {} instances for {} epochs ({} steps); best epoch {} dev loss {:.6} (initial {:.6})",
        instances.len(),
        outcome.epochs_run,
        outcome.steps,
        outcome.best_epoch,
        outcome.best_dev_loss,
        outcome.initial_dev_loss
    ))?;
    say(out, format!("wrote {}", spec.paths.pspt_checkpoint.display()))
}

fn candidate_run(spec: &RunSpec, ds: &QaDataset) -> Result<RetrievalRun> {
    match &spec.paths.run_in {
        Some(p) => RetrievalRun::load(p),
        None => bm25_run(ds, spec.eval.bm25_k, spec.eval.pool_mode, "bm25"),
    }
}

/// Reorders every query of `input` with `scorer`.
pub fn rerank_run(
    ds: &QaDataset,
    input: &RetrievalRun,
    scorer: &dyn Scorer,
    workers: usize,
) -> Result<RetrievalRun> {
    input.validate()?;
    let pool = worker_pool(workers)?;
    let mut run = RetrievalRun::new(scorer.name());
    for (qid, entries) in &input.queries {
        let rec = ds
            .get(qid)
            .ok_or_else(|| PsptError::Input(format!("run query {qid:?} is not in the dataset")))?;
        let mut candidates = Vec::with_capacity(entries.len());
        for e in entries {
            let p = rec.passage(&e.passage_id).ok_or_else(|| {
                PsptError::Input(format!("passage {:?} is not in the pool of query {qid:?}", e.passage_id))
            })?;
            candidates.push(Candidate {
                passage_id: e.passage_id.clone(),
                text: p.text.clone(),
                retriever_rank: e.rank,
                retriever_score: e.score,
            });
        }
        if candidates.is_empty() {
            continue;
        }
        let ranked = rerank(&rec.question_text, candidates, scorer, &pool)?;
        run.insert_ranked(qid, ranked.into_iter().map(|s| (s.candidate.passage_id, s.score.value)));
    }
    Ok(run)
}

pub fn cmd_rerank(spec: &RunSpec, out: &mut dyn Write) -> Result<()> {
    spec.validate()?;
    let model = load_model(spec)?;
    let ds = load_dataset(spec.dataset_path()?)?;
    let input = candidate_run(spec, &ds)?;
    let mode = spec.adapter.score_mode;
    let run = match spec.scorer {
        ScorerKind::Pspt => {
            let params = load_pspt(spec, &model)?;
            rerank_run(&ds, &input, &PsptScorer::new(&model, &params, mode), spec.workers)?
        }
        ScorerKind::Upr => {
            let s = UprScorer::new(&model, &spec.adapter.hard_prompt, mode)?;
            rerank_run(&ds, &input, &s, spec.workers)?
        }
        ScorerKind::UprInst => {
            let u = &spec.upr_inst;
            let s = UprScorer::instructed(&model, &u.instruction, &u.example_passage, &u.example_question, mode)?;
            rerank_run(&ds, &input, &s, spec.workers)?
        }
    };
    run.save(&spec.paths.run_out)?;
    info!("reranked {} queries", run.queries.len());
    say(out, format!("wrote {} ({} queries, tag {})", spec.paths.run_out.display(), run.queries.len(), run.tag))
}

pub fn cmd_eval(spec: &RunSpec, runs: &[PathBuf], out: &mut dyn Write) -> Result<()> {
    spec.validate()?;
    let ds = load_dataset(spec.dataset_path()?)?;
    let runs = runs.iter().map(|p| RetrievalRun::load(p)).collect::<Result<Vec<_>>>()?;
    let report = evaluate(&runs, &ds, &spec.eval.ks, spec.eval.baseline.as_deref(), spec.eval.recall_mode)?;
    let dir = &spec.paths.output_dir;
    fs::create_dir_all(dir).map_err(|e| PsptError::io(dir, e))?;
    let table = report.to_table();
    for (name, body) in [("report.json", report.to_json()), ("report.txt", table.clone())] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| PsptError::io(&p, e))?;
    }
    write!(out, "{table}").map_err(|e| PsptError::io("<stdout>", e))
}
