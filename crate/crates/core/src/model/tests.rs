use super::*;

pub(crate) fn tiny_vocab(n_words: usize) -> Vocabulary {
    Vocabulary::from_tokens((0..n_words).map(|i| format!("w{i}"))).unwrap()
}

fn model(dim: usize, layers: usize, seed: u64) -> MicroLM<f64> {
    let cfg = ModelConfig {
        dim,
        n_layers: layers,
        n_heads: 4,
        max_seq_len: 16,
        ffn_mult: 4,
        ..ModelConfig::default()
    };
    let mut m = MicroLM::<f64>::init(cfg, tiny_vocab(26), seed).unwrap();
    // Non-trivial norms and biases so the oracle covers them.
    let mut rng = SeededRng::new(seed + 100);
    for (name, t) in m.params_mut().named_mut() {
        if name.contains("gamma") || name.contains("beta") || name.contains(".b") {
            let noise: Tensor<f64> = rng.normal_tensor(t.shape(), 0.3);
            for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *v += n;
            }
        }
    }
    m
}

/// Straightforward re-implementation with nested loops and no graph.
fn reference_forward(m: &MicroLM<f64>, input: &Tensor<f64>) -> Vec<Vec<f64>> {
    let p = m.params();
    let cfg = m.config();
    let (l, d) = (input.rows(), cfg.dim);
    let dh = d / cfg.n_heads;
    let mm = |x: &[Vec<f64>], w: &Tensor<f64>| -> Vec<Vec<f64>> {
        let (k, n) = (w.shape()[0], w.shape()[1]);
        x.iter()
            .map(|row| {
                (0..n)
                    .map(|j| (0..k).map(|i| row[i] * w.data()[i * n + j]).sum())
                    .collect()
            })
            .collect()
    };
    let ln = |x: &[Vec<f64>], g: &Tensor<f64>, b: &Tensor<f64>| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mu = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(c, v)| (v - mu) / (var + 1e-5).sqrt() * g.data()[c] + b.data()[c])
                    .collect()
            })
            .collect()
    };
    let mut x: Vec<Vec<f64>> = (0..l)
        .map(|i| {
            (0..d)
                .map(|c| input.data()[i * d + c] + p.pos_emb.data()[i * d + c])
                .collect()
        })
        .collect();
    for b in &p.blocks {
        let h = ln(&x, &b.ln1_gamma, &b.ln1_beta);
        let (q, k, v) = (mm(&h, &b.wq), mm(&h, &b.wk), mm(&h, &b.wv));
        let mut att = vec![vec![0.0; d]; l];
        for head in 0..cfg.n_heads {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..l {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    for c in cols.clone() {
                        att[i][c] += s.exp() / z * v[j][c];
                    }
                }
            }
        }
        let att = mm(&att, &b.wo);
        for i in 0..l {
            for c in 0..d {
                x[i][c] += att[i][c];
            }
        }
        let h = ln(&x, &b.ln2_gamma, &b.ln2_beta);
        let mut f = mm(&h, &b.w1);
        for row in f.iter_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                let z = *v + b.b1.data()[c];
                *v = 0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z.powi(3))).tanh());
            }
        }
        let f = mm(&f, &b.w2);
        for i in 0..l {
            for c in 0..d {
                x[i][c] += f[i][c] + b.b2.data()[c];
            }
        }
    }
    let h = ln(&x, &p.final_gamma, &p.final_beta);
    h.iter()
        .map(|row| {
            let logits: Vec<f64> = (0..cfg.vocab_size)
                .map(|t| (0..d).map(|c| row[c] * p.tok_emb.data()[t * d + c]).sum())
                .collect();
            let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
            logits.iter().map(|z| z - lse).collect()
        })
        .collect()
}

#[test]
fn forward_matches_reference_implementation() {
    let m = model(32, 2, 3);
    let input: Tensor<f64> = SeededRng::new(4).normal_tensor(&[6, 32], 0.5);
    let out = m.forward_logprobs(&input).unwrap();
    let reference = reference_forward(&m, &input);
    for (i, row) in reference.iter().enumerate() {
        for (a, b) in out.row(i).iter().zip(row) {
            assert!((a - b).abs() < 1e-5, "row {i}: {a} vs {b}");
        }
    }
}

#[test]
fn forward_matches_reference_in_f32() {
    let m64 = model(32, 2, 5);
    let m32: MicroLM<f32> = m64.cast();
    let input: Tensor<f64> = SeededRng::new(6).normal_tensor(&[6, 32], 0.5);
    let out = m32.forward_logprobs(&input.cast()).unwrap();
    let reference = reference_forward(&m64, &input);
    for (i, row) in reference.iter().enumerate() {
        for (a, b) in out.row(i).iter().zip(row) {
            assert!((*a as f64 - b).abs() < 1e-4, "row {i}: {a} vs {b}");
        }
    }
}

#[test]
fn perturbing_a_position_leaves_earlier_rows_unchanged() {
    let m: MicroLM<f32> = model(32, 2, 8).cast();
    let input: Tensor<f32> = SeededRng::new(9).normal_tensor(&[7, 32], 0.5);
    let base = m.forward_logprobs(&input).unwrap();
    for t in 0..7 {
        let mut perturbed = input.clone();
        for v in &mut perturbed.data_mut()[t * 32..(t + 1) * 32] {
            *v += 0.75;
        }
        let out = m.forward_logprobs(&perturbed).unwrap();
        for r in 0..t {
            assert_eq!(out.row(r), base.row(r), "row {r} changed after perturbing {t}");
        }
        if t < 6 {
            assert_ne!(out.row(t), base.row(t));
        }
    }
}

#[test]
fn output_rows_are_log_distributions() {
    let m: MicroLM<f32> = model(32, 1, 10).cast();
    let input: Tensor<f32> = SeededRng::new(1).normal_tensor(&[5, 32], 1.0);
    let out = m.forward_logprobs(&input).unwrap();
    for r in 0..5 {
        let s: f64 = out.row(r).iter().map(|v| (*v as f64).exp()).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}

#[test]
fn over_length_input_is_rejected() {
    let m: MicroLM<f32> = model(32, 1, 10).cast();
    let input = Tensor::<f32>::zeros(&[17, 32]);
    assert!(matches!(
        m.forward_logprobs(&input),
        Err(PsptError::SequenceLength { len: 17, max: 16 })
    ));
}

#[test]
fn embed_is_direct_lookup() {
    let m: MicroLM<f32> = model(32, 1, 12).cast();
    assert_eq!(m.embed(&[]).unwrap().shape(), &[0, 32]);
    let e = m.embed(&[5, 5]).unwrap();
    assert_eq!(e.row(0), e.row(1));
    let ids = [0u32, 7, 29, 3, 12];
    let e = m.embed(&ids).unwrap();
    for (i, &id) in ids.iter().enumerate() {
        assert_eq!(e.row(i), m.params().tok_emb.row(id as usize));
    }
    assert!(matches!(m.embed(&[30]), Err(PsptError::Vocabulary { id: 30, .. })));
}

#[test]
fn bound_constants_receive_no_gradient() {
    let m: MicroLM<f64> = model(32, 1, 13);
    let mut g = Graph::new();
    let bound = m.bind(&mut g, false);
    let x = g.param(SeededRng::new(2).normal_tensor(&[4, 32], 1.0));
    let lp = bound.target_logprobs(&mut g, x, &[1, 2], &[5, 6]).unwrap();
    let s = g.sum(lp);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.len(), 1);
    for v in bound.vars() {
        assert!(grads.get(v).is_none());
    }
}

#[test]
fn target_logprobs_gather_from_full_forward() {
    let m: MicroLM<f64> = model(32, 2, 14);
    let input: Tensor<f64> = SeededRng::new(3).normal_tensor(&[6, 32], 0.5);
    let full = m.forward_logprobs(&input).unwrap();
    let mut g = Graph::new();
    let bound = m.bind(&mut g, false);
    let x = g.constant(input);
    let lp = bound.target_logprobs(&mut g, x, &[4, 0, 2], &[9, 3, 25]).unwrap();
    let got = g.value(lp).data();
    assert!((got[0] - full.row(4)[9]).abs() < 1e-12);
    assert!((got[1] - full.row(0)[3]).abs() < 1e-12);
    assert!((got[2] - full.row(2)[25]).abs() < 1e-12);
}

#[test]
fn config_validation_lists_problems() {
    let cfg = ModelConfig {
        dim: 30,
        n_heads: 4,
        vocab_size: 2,
        ..ModelConfig::default()
    };
    let msg = cfg.validate().unwrap_err().to_string();
    assert!(msg.contains("vocab_size") && msg.contains("divisible"), "{msg}");
}

#[test]
fn init_is_deterministic_and_checksum_tracks_weights() {
    let a = model(32, 1, 42);
    let b = model(32, 1, 42);
    assert_eq!(a.checksum(), b.checksum());
    let mut c = b.clone();
    c.params_mut().final_beta.data_mut()[0] += 1e-3;
    assert_ne!(a.checksum(), c.checksum());
}
