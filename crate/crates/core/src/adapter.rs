//! The trainable parameters: a soft prompt initialized from a hard prompt's
//! token embeddings, and a rank-`r` passage embedding adapter whose output is
//! added (scaled by `alpha / r`) to the frozen passage token embeddings.
//!
//! Input layout fed to the frozen model:
//!
//! ```text
//! [ soft prompt (l_s rows) ; adapted passage ; (frozen passage, literal mode) ; "question :" ; question ]
//! ```
//!
//! The row *before* each question token predicts that token.

use crate::error::{PsptError, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::{BoundModel, MicroLM};
use crate::tensor::{Graph, Real, SeededRng, Tensor, Var};

pub const DEFAULT_HARD_PROMPT: &str = "please generate question for this passage";
pub const SEPARATOR: &str = "question :";
pub const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct SoftPrompt<T> {
    pub e1: Tensor<T>,
    pub init_text: String,
}

impl<T: Real> SoftPrompt<T> {
    pub fn len(&self) -> usize {
        self.e1.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter<T> {
    /// `|V|×r`, one rank-`r` code per vocabulary entry.
    pub a: Tensor<T>,
    /// `r×dim`, zero at initialization.
    pub b: Tensor<T>,
    pub rank: usize,
    pub alpha: f64,
}

impl<T: Real> LowRankAdapter<T> {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsptParams<T> {
    pub soft_prompt: SoftPrompt<T>,
    pub adapter: LowRankAdapter<T>,
    /// Feed the frozen passage embeddings a second time after the adapted ones.
    pub literal_concat: bool,
}

pub fn init_soft_prompt<T: Real>(
    hard_prompt: &str,
    length: usize,
    model: &MicroLM<T>,
) -> Result<SoftPrompt<T>> {
    if length == 0 {
        return Err(PsptError::Config("soft prompt length must be at least 1".into()));
    }
    let ids = model.tokenize(hard_prompt);
    if ids.is_empty() {
        return Err(PsptError::Config(format!(
            "hard prompt {hard_prompt:?} tokenizes to nothing"
        )));
    }
    let cycled: Vec<u32> = ids.iter().copied().cycle().take(length).collect();
    Ok(SoftPrompt {
        e1: model.embed(&cycled)?,
        init_text: hard_prompt.to_string(),
    })
}

pub fn init_adapter<T: Real>(
    vocab_size: usize,
    rank: usize,
    dim: usize,
    alpha: f64,
    seed: u64,
) -> Result<LowRankAdapter<T>> {
    if rank == 0 {
        return Err(PsptError::Config("adapter rank must be at least 1".into()));
    }
    if rank > dim {
        return Err(PsptError::Config(format!(
            "adapter rank {rank} exceeds embedding width {dim}"
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(PsptError::Config(format!("adapter alpha {alpha} must be positive")));
    }
    let mut rng = SeededRng::new(seed);
    Ok(LowRankAdapter {
        a: rng.normal_tensor(&[vocab_size, rank], ADAPTER_INIT_STD),
        b: Tensor::zeros(&[rank, dim]),
        rank,
        alpha,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterSettings {
    pub soft_prompt_len: usize,
    pub rank: usize,
    pub alpha: f64,
    pub literal_concat: bool,
    pub seed: u64,
}

impl Default for AdapterSettings {
    fn default() -> Self {
        AdapterSettings {
            soft_prompt_len: 50,
            rank: 1,
            alpha: 16.0,
            literal_concat: false,
            seed: 0,
        }
    }
}

impl<T: Real> PsptParams<T> {
    pub fn init(model: &MicroLM<T>, hard_prompt: &str, settings: &AdapterSettings) -> Result<Self> {
        Ok(PsptParams {
            soft_prompt: init_soft_prompt(hard_prompt, settings.soft_prompt_len, model)?,
            adapter: init_adapter(
                model.config().vocab_size,
                settings.rank,
                model.dim(),
                settings.alpha,
                settings.seed,
            )?,
            literal_concat: settings.literal_concat,
        })
    }

    pub fn num_params(&self) -> usize {
        self.soft_prompt.e1.numel() + self.adapter.a.numel() + self.adapter.b.numel()
    }

    /// `[e1, A, B]`, the order used for gradients and optimizer state.
    pub fn tensors(&self) -> [&Tensor<T>; 3] {
        [&self.soft_prompt.e1, &self.adapter.a, &self.adapter.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 3] {
        [
            &mut self.soft_prompt.e1,
            &mut self.adapter.a,
            &mut self.adapter.b,
        ]
    }

    /// Places θ on `g`, trainable or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundPspt {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundPspt {
            e1: leaf(&self.soft_prompt.e1),
            a: leaf(&self.adapter.a),
            b: leaf(&self.adapter.b),
            scale: self.adapter.scale(),
            literal_concat: self.literal_concat,
        }
    }

    pub fn cast<U: Real>(&self) -> PsptParams<U> {
        PsptParams {
            soft_prompt: SoftPrompt {
                e1: self.soft_prompt.e1.cast(),
                init_text: self.soft_prompt.init_text.clone(),
            },
            adapter: LowRankAdapter {
                a: self.adapter.a.cast(),
                b: self.adapter.b.cast(),
                rank: self.adapter.rank,
                alpha: self.adapter.alpha,
            },
            literal_concat: self.literal_concat,
        }
    }

    /// Stores θ as `pspt.e1`, `pspt.A`, `pspt.B` plus the `l_s`, `r`, `alpha`
    /// and `literal_concat` scalars.
    pub fn write_to(&self, ckpt: &mut Checkpoint) {
        ckpt.set_buffer("pspt.e1", self.soft_prompt.e1.cast());
        ckpt.set_buffer("pspt.A", self.adapter.a.cast());
        ckpt.set_buffer("pspt.B", self.adapter.b.cast());
        ckpt.set_scalar("l_s", self.soft_prompt.len() as f64);
        ckpt.set_scalar("r", self.adapter.rank as f64);
        ckpt.set_scalar("alpha", self.adapter.alpha);
        ckpt.set_scalar("literal_concat", if self.literal_concat { 1.0 } else { 0.0 });
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let missing = |what: &str| PsptError::CheckpointFormat {
            field: "index".into(),
            detail: format!("checkpoint holds no adapter parameter {what}"),
        };
        let e1 = ckpt.buffer("pspt.e1").ok_or_else(|| missing("pspt.e1"))?;
        let a = ckpt.buffer("pspt.A").ok_or_else(|| missing("pspt.A"))?;
        let b = ckpt.buffer("pspt.B").ok_or_else(|| missing("pspt.B"))?;
        let rank = ckpt.scalar("r").ok_or_else(|| missing("r"))? as usize;
        let alpha = ckpt.scalar("alpha").ok_or_else(|| missing("alpha"))?;
        let l_s = ckpt.scalar("l_s").ok_or_else(|| missing("l_s"))? as usize;
        let (v, d) = (ckpt.config.vocab_size, ckpt.config.dim);
        if e1.shape() != [l_s, d] || a.shape() != [v, rank] || b.shape() != [rank, d] {
            return Err(PsptError::CheckpointFormat {
                field: "index".into(),
                detail: format!(
                    "adapter shapes e1 {:?}, A {:?}, B {:?} inconsistent with l_s={l_s}, r={rank}, |V|={v}, dim={d}",
                    e1.shape(),
                    a.shape(),
                    b.shape()
                ),
            });
        }
        Ok(PsptParams {
            soft_prompt: SoftPrompt {
                e1: e1.cast(),
                init_text: String::new(),
            },
            adapter: LowRankAdapter {
                a: a.cast(),
                b: b.cast(),
                rank,
                alpha,
            },
            literal_concat: ckpt.scalar("literal_concat").unwrap_or(0.0) != 0.0,
        })
    }
}

/// `l_s·dim + |V|·r + r·dim`.
pub fn trainable_count(soft_prompt_len: usize, vocab_size: usize, rank: usize, dim: usize) -> usize {
    soft_prompt_len * dim + vocab_size * rank + rank * dim
}

/// Trainable parameters as a fraction of the frozen model's parameters.
pub fn trainable_fraction(trainable: usize, frozen: usize) -> f64 {
    trainable as f64 / frozen as f64
}

/// Graph handles for θ.
#[derive(Clone, Copy, Debug)]
pub struct BoundPspt {
    pub e1: Var,
    pub a: Var,
    pub b: Var,
    scale: f64,
    literal_concat: bool,
}

/// Model input plus the teacher-forcing targets for the question.
#[derive(Clone, Debug)]
pub struct AssembledInput {
    pub input: Var,
    pub target_positions: Vec<usize>,
    pub target_ids: Vec<u32>,
}

impl BoundPspt {
    /// `e2 = (A[d]·B)·(alpha/r) + E[d]`.
    pub fn passage_embedding<T: Real>(
        &self,
        g: &mut Graph<T>,
        model: &BoundModel,
        passage: &[u32],
    ) -> Result<Var> {
        let e4 = model.embed(g, passage)?;
        let rows: Vec<usize> = passage.iter().map(|&i| i as usize).collect();
        let codes = g.gather_rows(self.a, &rows)?;
        let e3 = g.matmul(codes, self.b)?;
        let e3 = g.scale(e3, T::from_f64_lossy(self.scale));
        g.add(e3, e4)
    }

    pub fn assemble<T: Real>(
        &self,
        g: &mut Graph<T>,
        model: &BoundModel,
        separator: &[u32],
        passage: &[u32],
        question: &[u32],
        max_seq_len: usize,
    ) -> Result<AssembledInput> {
        let copies = if self.literal_concat { 2 } else { 1 };
        let prompt_rows = g.value(self.e1).rows();
        let passage = fit_passage(prompt_rows, separator, passage, question, copies, max_seq_len)?;
        let e2 = self.passage_embedding(g, model, passage)?;
        let mut blocks = vec![e2];
        if self.literal_concat {
            blocks.push(model.embed(g, passage)?);
        }
        layout(g, model, self.e1, &blocks, separator, question)
    }
}

/// Right-truncates `passage` so the whole sequence fits; the question is never cut.
pub(crate) fn fit_passage<'a>(
    prefix_rows: usize,
    separator: &[u32],
    passage: &'a [u32],
    question: &[u32],
    copies: usize,
    max_seq_len: usize,
) -> Result<&'a [u32]> {
    let fixed = prefix_rows + separator.len() + question.len();
    if fixed > max_seq_len {
        return Err(PsptError::SequenceLength {
            len: fixed,
            max: max_seq_len,
        });
    }
    let room = (max_seq_len - fixed) / copies;
    Ok(&passage[..passage.len().min(room)])
}

/// Concatenates `[prefix ; passage blocks ; separator ; question]` and computes
/// the rows whose next-token distribution scores each question token.
pub(crate) fn layout<T: Real>(
    g: &mut Graph<T>,
    model: &BoundModel,
    prefix: Var,
    passage_blocks: &[Var],
    separator: &[u32],
    question: &[u32],
) -> Result<AssembledInput> {
    let sep = model.embed(g, separator)?;
    let q = model.embed(g, question)?;
    let mut parts = vec![prefix];
    parts.extend_from_slice(passage_blocks);
    parts.push(sep);
    parts.push(q);
    let first_question_row = parts[..parts.len() - 1]
        .iter()
        .map(|&p| g.value(p).rows())
        .sum::<usize>();
    let input = g.concat_rows(&parts)?;
    if first_question_row == 0 {
        return Err(PsptError::Contract(
            "the first question token needs a preceding position".into(),
        ));
    }
    Ok(AssembledInput {
        input,
        target_positions: (0..question.len()).map(|i| first_question_row + i - 1).collect(),
        target_ids: question.to_vec(),
    })
}

/// Tensor-level `e2` for one passage.
pub fn passage_embedding<T: Real>(
    passage: &[u32],
    params: &PsptParams<T>,
    model: &MicroLM<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bm = model.bind(&mut g, false);
    let bp = params.bind(&mut g, false);
    let e2 = bp.passage_embedding(&mut g, &bm, passage)?;
    Ok(g.value(e2).clone())
}

/// Tensor-level input assembly: `(input embeddings, target positions, target ids)`.
pub fn assemble_input<T: Real>(
    params: &PsptParams<T>,
    passage: &[u32],
    question: &[u32],
    model: &MicroLM<T>,
) -> Result<(Tensor<T>, Vec<usize>, Vec<u32>)> {
    let mut g = Graph::new();
    let bm = model.bind(&mut g, false);
    let bp = params.bind(&mut g, false);
    let sep = model.tokenize(SEPARATOR);
    let a = bp.assemble(&mut g, &bm, &sep, passage, question, model.config().max_seq_len)?;
    Ok((g.value(a.input).clone(), a.target_positions, a.target_ids))
}
