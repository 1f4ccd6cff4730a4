//! Frozen micro decoder-only language model: pre-LN transformer blocks,
//! learned absolute positions and an output head tied to the token
//! embedding table.

pub mod checkpoint;
mod pretrain;
pub mod vocab;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use pretrain::{mean_next_token_loss, pretrain_micro_lm, PretrainConfig};
pub use vocab::{split_words, Vocabulary};

use crate::error::{PsptError, Result};
use crate::tensor::{Graph, Real, SeededRng, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2048,
            dim: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 256,
            ffn_mult: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("dim", self.dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
            ("ffn_mult", self.ffn_mult),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.vocab_size < 4 {
            problems.push("vocab_size must be at least 4".to_string());
        }
        if self.n_heads > 0 && !self.dim.is_multiple_of(self.n_heads) {
            problems.push(format!(
                "dim {} not divisible by n_heads {}",
                self.dim, self.n_heads
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(PsptError::Config(problems.join("; ")))
        }
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.ffn_mult
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_gamma: Tensor<T>,
    pub final_beta: Tensor<T>,
}

impl<T: Real> ModelParams<T> {
    fn init(config: &ModelConfig, rng: &mut SeededRng) -> Self {
        let (d, h) = (config.dim, config.hidden());
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                ln1_gamma: Tensor::filled(&[d], T::one()),
                ln1_beta: Tensor::zeros(&[d]),
                wq: rng.normal_tensor(&[d, d], INIT_STD),
                wk: rng.normal_tensor(&[d, d], INIT_STD),
                wv: rng.normal_tensor(&[d, d], INIT_STD),
                wo: rng.normal_tensor(&[d, d], INIT_STD),
                ln2_gamma: Tensor::filled(&[d], T::one()),
                ln2_beta: Tensor::zeros(&[d]),
                w1: rng.normal_tensor(&[d, h], INIT_STD),
                b1: Tensor::zeros(&[h]),
                w2: rng.normal_tensor(&[h, d], INIT_STD),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        ModelParams {
            tok_emb: rng.normal_tensor(&[config.vocab_size, d], INIT_STD),
            pos_emb: rng.normal_tensor(&[config.max_seq_len, d], INIT_STD),
            blocks,
            final_gamma: Tensor::filled(&[d], T::one()),
            final_beta: Tensor::zeros(&[d]),
        }
    }

    /// Buffers in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("ln1.gamma", &b.ln1_gamma),
                ("ln1.beta", &b.ln1_beta),
                ("attn.wq", &b.wq),
                ("attn.wk", &b.wk),
                ("attn.wv", &b.wv),
                ("attn.wo", &b.wo),
                ("ln2.gamma", &b.ln2_gamma),
                ("ln2.beta", &b.ln2_beta),
                ("ffn.w1", &b.w1),
                ("ffn.b1", &b.b1),
                ("ffn.w2", &b.w2),
                ("ffn.b2", &b.b2),
            ] {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("final_norm.gamma".to_string(), &self.final_gamma));
        out.push(("final_norm.beta".to_string(), &self.final_beta));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in [
                ("ln1.gamma", &mut b.ln1_gamma),
                ("ln1.beta", &mut b.ln1_beta),
                ("attn.wq", &mut b.wq),
                ("attn.wk", &mut b.wk),
                ("attn.wv", &mut b.wv),
                ("attn.wo", &mut b.wo),
                ("ln2.gamma", &mut b.ln2_gamma),
                ("ln2.beta", &mut b.ln2_beta),
                ("ffn.w1", &mut b.w1),
                ("ffn.b1", &mut b.b1),
                ("ffn.w2", &mut b.w2),
                ("ffn.b2", &mut b.b2),
            ] {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("final_norm.gamma".to_string(), &mut self.final_gamma));
        out.push(("final_norm.beta".to_string(), &mut self.final_beta));
        out
    }
}

/// Graph handles for a model's weights.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<[Var; 12]>,
    final_gamma: Var,
    final_beta: Var,
    max_seq_len: usize,
    n_heads: usize,
}

impl BoundModel {
    /// Handles in the same order as [`ModelParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            out.extend_from_slice(b);
        }
        out.push(self.final_gamma);
        out.push(self.final_beta);
        out
    }

    /// Final-normalized hidden states `[L×dim]` for input embeddings `[L×dim]`.
    pub fn hidden<T: Real>(&self, g: &mut Graph<T>, input: Var) -> Result<Var> {
        let len = g.value(input).rows();
        if len > self.max_seq_len {
            return Err(PsptError::SequenceLength {
                len,
                max: self.max_seq_len,
            });
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.gather_rows(self.pos_emb, &positions)?;
        let mut x = g.add(input, pos)?;
        for &[ln1g, ln1b, wq, wk, wv, wo, ln2g, ln2b, w1, b1, w2, b2] in &self.blocks {
            let h = g.layer_norm(x, ln1g, ln1b, eps)?;
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let att = g.causal_attention(q, k, v, self.n_heads)?;
            let att = g.matmul(att, wo)?;
            x = g.add(x, att)?;
            let h = g.layer_norm(x, ln2g, ln2b, eps)?;
            let f = g.matmul(h, w1)?;
            let f = g.add_row(f, b1)?;
            let f = g.gelu(f);
            let f = g.matmul(f, w2)?;
            let f = g.add_row(f, b2)?;
            x = g.add(x, f)?;
        }
        g.layer_norm(x, self.final_gamma, self.final_beta, eps)
    }

    /// Next-token log-distribution at every position, `[L×|V|]`.
    pub fn forward_logprobs<T: Real>(&self, g: &mut Graph<T>, input: Var) -> Result<Var> {
        let h = self.hidden(g, input)?;
        let logits = g.matmul_transpose_b(h, self.tok_emb)?;
        g.log_softmax_rows(logits)
    }

    /// `log P(targets[i] | prefix up to positions[i])` as a vector. Only the
    /// selected rows go through the output head.
    pub fn target_logprobs<T: Real>(
        &self,
        g: &mut Graph<T>,
        input: Var,
        positions: &[usize],
        targets: &[u32],
    ) -> Result<Var> {
        if positions.len() != targets.len() {
            return Err(PsptError::Contract(
                "positions and targets differ in length".into(),
            ));
        }
        let h = self.hidden(g, input)?;
        let sel = g.gather_rows(h, positions)?;
        let logits = g.matmul_transpose_b(sel, self.tok_emb)?;
        let lp = g.log_softmax_rows(logits)?;
        let cols: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        g.pick_cols(lp, &cols)
    }

    pub fn embed<T: Real>(&self, g: &mut Graph<T>, ids: &[u32]) -> Result<Var> {
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let vocab = g.value(self.tok_emb).rows();
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(PsptError::Vocabulary {
                id: bad,
                vocab_size: vocab,
            });
        }
        g.gather_rows(self.tok_emb, &rows)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroLM<T> {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ModelParams<T>,
}

impl<T: Real> MicroLM<T> {
    /// Random initialization; `config.vocab_size` is taken from `vocab`.
    pub fn init(mut config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let params = ModelParams::init(&config, &mut rng);
        Ok(MicroLM {
            config,
            vocab,
            params,
        })
    }

    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(PsptError::Config(format!(
                "vocabulary has {} entries but vocab_size is {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let fresh = ModelParams::<T>::init(&config, &mut SeededRng::new(0));
        for ((name, want), (_, got)) in fresh.named().iter().zip(params.named()) {
            if want.shape() != got.shape() {
                return Err(PsptError::Dimension(format!(
                    "buffer {name}: expected {:?}, got {:?}",
                    want.shape(),
                    got.shape()
                )));
            }
        }
        Ok(MicroLM {
            config,
            vocab,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    /// Mutable weights, for pretraining and test fixtures only. Nothing in the
    /// adapter training path calls this.
    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn num_params(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.vocab.tokenize(text)
    }

    /// Rows of the frozen embedding table.
    pub fn embed(&self, ids: &[u32]) -> Result<Tensor<T>> {
        self.vocab.check_ids(ids)?;
        let d = self.config.dim;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(self.params.tok_emb.row(id as usize));
        }
        Tensor::new(vec![ids.len(), d], data)
    }

    /// Places the weights on `g`: as trainable leaves when `trainable`,
    /// otherwise as constants that never receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundModel {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let tok_emb = leaf(&self.params.tok_emb);
        let pos_emb = leaf(&self.params.pos_emb);
        let blocks = self
            .params
            .blocks
            .iter()
            .map(|b| {
                [
                    leaf(&b.ln1_gamma),
                    leaf(&b.ln1_beta),
                    leaf(&b.wq),
                    leaf(&b.wk),
                    leaf(&b.wv),
                    leaf(&b.wo),
                    leaf(&b.ln2_gamma),
                    leaf(&b.ln2_beta),
                    leaf(&b.w1),
                    leaf(&b.b1),
                    leaf(&b.w2),
                    leaf(&b.b2),
                ]
            })
            .collect();
        BoundModel {
            tok_emb,
            pos_emb,
            blocks,
            final_gamma: leaf(&self.params.final_gamma),
            final_beta: leaf(&self.params.final_beta),
            max_seq_len: self.config.max_seq_len,
            n_heads: self.config.n_heads,
        }
    }

    /// Convenience wrapper: `[L×|V|]` next-token log-probabilities for
    /// `input_embeddings [L×dim]`.
    pub fn forward_logprobs(&self, input_embeddings: &Tensor<T>) -> Result<Tensor<T>> {
        if input_embeddings.shape().len() != 2 || input_embeddings.cols() != self.config.dim {
            return Err(PsptError::Dimension(format!(
                "input embeddings {:?} do not have width {}",
                input_embeddings.shape(),
                self.config.dim
            )));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(input_embeddings.clone());
        let out = bound.forward_logprobs(&mut g, x)?;
        Ok(g.value(out).clone())
    }

    /// SHA-256 over every weight buffer, in named order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.named() {
            h.update(name.as_bytes());
            for &v in t.data() {
                h.update(v.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Real>(&self) -> MicroLM<U> {
        let c = |t: &Tensor<T>| t.cast::<U>();
        MicroLM {
            config: self.config,
            vocab: self.vocab.clone(),
            params: ModelParams {
                tok_emb: c(&self.params.tok_emb),
                pos_emb: c(&self.params.pos_emb),
                blocks: self
                    .params
                    .blocks
                    .iter()
                    .map(|b| BlockParams {
                        ln1_gamma: c(&b.ln1_gamma),
                        ln1_beta: c(&b.ln1_beta),
                        wq: c(&b.wq),
                        wk: c(&b.wk),
                        wv: c(&b.wv),
                        wo: c(&b.wo),
                        ln2_gamma: c(&b.ln2_gamma),
                        ln2_beta: c(&b.ln2_beta),
                        w1: c(&b.w1),
                        b1: c(&b.b1),
                        w2: c(&b.w2),
                        b2: c(&b.b2),
                    })
                    .collect(),
                final_gamma: c(&self.params.final_gamma),
                final_beta: c(&self.params.final_beta),
            },
        }
    }
}

#[cfg(test)]
pub(crate) mod tests;
