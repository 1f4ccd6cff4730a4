//! Acceptance criteria, one line each. Runs without the libtest harness so
//! the verdicts are always printed; exits nonzero if any criterion fails.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use pspt::adapter::{passage_embedding, AdapterSettings, PsptParams, DEFAULT_HARD_PROMPT};
use pspt::eval::{
    bm25_run, evaluate, hit_at_k, paired_t_test, recall_at_k, PoolMode, QaDataset, RecallMode,
    RetrievalRun,
};
use pspt::model::{pretrain_micro_lm, MicroLM, ModelConfig, PretrainConfig, Vocabulary};
use pspt::scoring::{rerank, score_pspt, score_upr, worker_pool, Candidate, PsptScorer, ScoreMode, Scorer, UprScorer};
use pspt::synthetic::{generate_dataset, pretraining_corpus, SyntheticConfig, TASK_MARKER};
use pspt::tensor::{SeededRng, Tensor};
use pspt::trainer::{build_instances, loss_and_grad, loss_pair, loss_point, train, LossWeights, TrainConfig};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn check(cond: bool, ok: String, fail: String) -> Verdict {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn vocab_of(words: &[String]) -> Vocabulary {
    Vocabulary::from_tokens(words.iter().map(String::as_str)).unwrap()
}

/// Hard-prompt words, the separator and fillers, `total` ids with specials.
fn padded_vocab(total: usize) -> Vocabulary {
    let mut words: Vec<String> = DEFAULT_HARD_PROMPT.split(' ').map(str::to_string).collect();
    words.push(":".into());
    let mut i = 0;
    while words.len() + 4 < total {
        words.push(format!("w{i}"));
        i += 1;
    }
    vocab_of(&words)
}

fn random_ids(rng: &mut SeededRng, vocab: usize, min: usize, max: usize) -> Vec<u32> {
    let n = min + rng.below(max - min + 1);
    (0..n).map(|_| 4 + rng.below(vocab - 4) as u32).collect()
}

// 1. Analytic gradients of the total loss against central differences.
fn gradient_correctness() -> Verdict {
    const EPS: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let vocab = padded_vocab(50);
    let cfg = ModelConfig { dim: 32, n_layers: 1, n_heads: 2, max_seq_len: 64, ffn_mult: 4, ..ModelConfig::default() };
    let model = MicroLM::<f64>::init(cfg, vocab, 21).unwrap();
    let settings = AdapterSettings { soft_prompt_len: 4, rank: 1, ..AdapterSettings::default() };
    let mut params = PsptParams::init(&model, DEFAULT_HARD_PROMPT, &settings).unwrap();
    params.adapter.b = SeededRng::new(22).normal_tensor(&[1, 32], 0.1);
    let mut rng = SeededRng::new(23);
    let q = random_ids(&mut rng, 50, 4, 4);
    let dp = random_ids(&mut rng, 50, 6, 6);
    // A negative that keeps the hinge active and away from its kink.
    let (dn, margin) = loop {
        let dn = random_ids(&mut rng, 50, 6, 6);
        let m = loss_pair(&q, &dp, &dn, &params, &model).unwrap();
        if m > 1e-2 {
            break (dn, m);
        }
    };
    let (_, grads) = loss_and_grad(&q, &dp, &dn, &params, &model, LossWeights::default()).unwrap();
    let objective = |p: &PsptParams<f64>| -> f64 {
        loss_and_grad(&q, &dp, &dn, p, &model, LossWeights::default()).unwrap().0.total
    };
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for (slot, grad) in grads.iter().enumerate() {
        for i in 0..grad.numel() {
            let mut plus = params.clone();
            plus.tensors_mut()[slot].data_mut()[i] += EPS;
            let mut minus = params.clone();
            minus.tensors_mut()[slot].data_mut()[i] -= EPS;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * EPS);
            let a = grad.data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(FLOOR));
            coords += 1;
        }
    }
    let msg = format!("{coords} coordinates, hinge margin {margin:.3}, max relative error {worst:.2e} (floor {FLOOR:e})");
    check(coords == 4 * 32 + 50 + 32 && worst < 1e-4, msg.clone(), msg)
}

fn small_setup(entities: usize) -> (QaDataset, MicroLM<f32>) {
    let cfg = SyntheticConfig { entities, ..SyntheticConfig::default() };
    let ds = generate_dataset(&cfg);
    let vocab = Vocabulary::build(ds.texts(), &[DEFAULT_HARD_PROMPT, "question :"], 2048).unwrap();
    let mcfg = ModelConfig { dim: 16, n_layers: 1, n_heads: 2, max_seq_len: 64, ffn_mult: 2, ..ModelConfig::default() };
    (ds, MicroLM::init(mcfg, vocab, 31).unwrap())
}

// 2. A full training run leaves every frozen buffer bit-identical.
fn frozen_invariance() -> Verdict {
    let (ds, model) = small_setup(12);
    let before = model.checksum();
    let snapshot = model.params().clone();
    let settings = AdapterSettings { soft_prompt_len: 6, ..AdapterSettings::default() };
    let params = PsptParams::init(&model, DEFAULT_HARD_PROMPT, &settings).unwrap();
    let cfg = TrainConfig { epochs: 3, train_sample_size: 40, ..TrainConfig::default() };
    let insts = build_instances(&ds, model.vocab(), 0, 40).unwrap();
    let out = train(&cfg, &insts, &model, params).unwrap();
    let bitwise = model
        .params()
        .named()
        .iter()
        .zip(snapshot.named())
        .all(|((_, a), (_, b))| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let msg = format!("{} steps, checksum {}", out.steps, &before[..16]);
    check(out.steps > 0 && model.checksum() == before && bitwise, msg.clone(), format!("{msg}: Φ changed"))
}

// 3. Fresh θ with l_s = |tok(s)| reproduces UPR exactly.
fn init_identity() -> Verdict {
    let vocab = padded_vocab(40);
    let cfg = ModelConfig { dim: 32, n_layers: 2, n_heads: 4, max_seq_len: 64, ffn_mult: 2, ..ModelConfig::default() };
    let model = MicroLM::<f32>::init(cfg, vocab, 41).unwrap();
    let l_s = model.tokenize(DEFAULT_HARD_PROMPT).len();
    let settings = AdapterSettings { soft_prompt_len: l_s, seed: 42, ..AdapterSettings::default() };
    let params = PsptParams::init(&model, DEFAULT_HARD_PROMPT, &settings).unwrap();
    let mut rng = SeededRng::new(43);
    let (mut score_gap, mut emb_gap): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let q = random_ids(&mut rng, 40, 1, 8);
        let d = random_ids(&mut rng, 40, 1, 20);
        let a = score_pspt(&q, &d, &params, &model, ScoreMode::Sum).unwrap().value;
        let b = score_upr(&q, &d, &model, DEFAULT_HARD_PROMPT, ScoreMode::Sum).unwrap().value;
        score_gap = score_gap.max((a - b).abs());
        let e2 = passage_embedding(&d, &params, &model).unwrap();
        let e4: Tensor<f32> = model.embed(&d).unwrap();
        for (x, y) in e2.data().iter().zip(e4.data()) {
            emb_gap = emb_gap.max((x - y).abs() as f64);
        }
    }
    let msg = format!("100 fixtures, max |ΔI| {score_gap:.2e}, max |e2 - e4| {emb_gap:.2e}");
    check(score_gap < 1e-5 && emb_gap < 1e-7, msg.clone(), msg)
}

fn rerun(ds: &QaDataset, base: &RetrievalRun, scorer: &dyn Scorer) -> RetrievalRun {
    let pool = worker_pool(1).unwrap();
    let mut out = RetrievalRun::new(scorer.name());
    for (q, entries) in &base.queries {
        let rec = ds.get(q).unwrap();
        let cands: Vec<Candidate> = entries
            .iter()
            .map(|e| Candidate {
                passage_id: e.passage_id.clone(),
                text: rec.passage(&e.passage_id).unwrap().text.clone(),
                retriever_rank: e.rank,
                retriever_score: e.score,
            })
            .collect();
        let ranked = rerank(&rec.question_text, cands, scorer, &pool).unwrap();
        out.insert_ranked(q, ranked.into_iter().map(|s| (s.candidate.passage_id, s.score.value)));
    }
    out
}

// 4. Train on held-in entities, rerank BM25 top-10 of held-out entities.
fn synthetic_improvement() -> Verdict {
    let scfg = SyntheticConfig::default();
    let ds = generate_dataset(&scfg);
    let corpus = pretraining_corpus(&scfg, 4000, 11);
    let required = [DEFAULT_HARD_PROMPT, "question :", "none", TASK_MARKER];
    let vocab = Vocabulary::build(ds.texts().chain(corpus.iter().map(String::as_str)), &required, 2048).unwrap();
    let mcfg = ModelConfig { dim: 64, n_layers: 2, n_heads: 4, max_seq_len: 64, ffn_mult: 4, ..ModelConfig::default() };
    let model = MicroLM::<f32>::init(mcfg, vocab, 1).unwrap();
    let ids: Vec<Vec<u32>> = corpus.iter().map(|s| model.tokenize(s)).collect();
    let pcfg = PretrainConfig { steps: 1500, batch_size: 16, lr: 3e-3, seed: 2 };
    let model = pretrain_micro_lm(model, &ids, &pcfg).unwrap();

    let split = (scfg.entities - 16) * scfg.relations_per_entity;
    let train_ds = QaDataset { records: ds.records[..split].to_vec() };
    let test_ds = QaDataset { records: ds.records[split..].to_vec() };
    let bm25 = bm25_run(&test_ds, 10, PoolMode::Question, "bm25").unwrap();
    let upr = UprScorer::new(&model, DEFAULT_HARD_PROMPT, ScoreMode::Sum).unwrap();
    let upr_run = rerun(&test_ds, &bm25, &upr);

    let settings = AdapterSettings { soft_prompt_len: 10, ..AdapterSettings::default() };
    let params = PsptParams::init(&model, DEFAULT_HARD_PROMPT, &settings).unwrap();
    let tcfg = TrainConfig::default();
    let insts = build_instances(&train_ds, model.vocab(), tcfg.seed, tcfg.train_sample_size).unwrap();
    let out = train(&tcfg, &insts, &model, params).unwrap();
    let scorer = PsptScorer::new(&model, &out.params, ScoreMode::Sum);
    let pspt_run = rerun(&test_ds, &bm25, &scorer);
    let report = evaluate(&[bm25, upr_run, pspt_run], &test_ds, &[5], Some("bm25"), RecallMode::Standard).unwrap();
    let h5 = |tag: &str| 100.0 * report.run(tag).unwrap().hit[0];

    let (mut correct, mut total) = (0usize, 0usize);
    for rec in &test_ds.records {
        let q = model.tokenize(&rec.question_text);
        let pos = rec.passages.iter().find(|p| p.relevant).unwrap();
        let sp = scorer.score(&q, &model.tokenize(&pos.text)).unwrap().value;
        for neg in rec.passages.iter().filter(|p| !p.relevant) {
            total += 1;
            correct += (sp > scorer.score(&q, &model.tokenize(&neg.text)).unwrap().value) as usize;
        }
    }
    let acc = correct as f64 / total as f64;
    let (b, u, p) = (h5("bm25"), h5("upr"), h5("pspt"));
    let msg = format!(
        "H@5 bm25 {b:.2} upr {u:.2} pspt {p:.2}; pairwise {acc:.3} over {total} pairs; best epoch {} of {}",
        out.best_epoch, out.epochs_run
    );
    check(p - b >= 10.0 && p - u >= 10.0 && acc >= 0.85, msg.clone(), msg)
}

// 5. Loss semantics as properties over random triples.
fn loss_semantics() -> Verdict {
    let vocab = padded_vocab(30);
    let cfg = ModelConfig { dim: 16, n_layers: 1, n_heads: 2, max_seq_len: 64, ffn_mult: 2, ..ModelConfig::default() };
    let model = MicroLM::<f64>::init(cfg, vocab, 51).unwrap();
    let settings = AdapterSettings { soft_prompt_len: 3, ..AdapterSettings::default() };
    let base = PsptParams::init(&model, DEFAULT_HARD_PROMPT, &settings).unwrap();
    let ids = || prop::collection::vec(4u32..30, 1..8);
    let mut runner = TestRunner::new_with_rng(PropConfig { cases: 128, failure_persistence: None, ..PropConfig::default() }, proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha));
    let result = runner.run(&(ids(), ids(), ids(), 0u64..1000), |(q, dp, dn, seed)| {
        let mut p = base.clone();
        p.adapter.b = SeededRng::new(seed).normal_tensor(&[1, 16], 0.2);
        let pair = loss_pair(&q, &dp, &dn, &p, &model).unwrap();
        prop_assert!(pair >= 0.0);
        prop_assert_eq!(loss_pair(&q, &dp, &dp, &p, &model).unwrap(), 0.0);
        let (parts, _) = loss_and_grad(&q, &dp, &dn, &p, &model, LossWeights::default()).unwrap();
        let point = loss_point(&q, &dp, &p, &model).unwrap();
        prop_assert!((parts.total - (point + pair)).abs() <= 1e-12 * parts.total.abs().max(1.0));
        Ok(())
    });
    if let Err(e) = result {
        return Err(format!("property failed: {e}"));
    }
    let mut uniform = model.clone();
    uniform.params_mut().tok_emb = Tensor::zeros(&[30, 16]);
    let p = PsptParams::init(&uniform, DEFAULT_HARD_PROMPT, &settings).unwrap();
    let q = [5, 9, 12, 7, 20];
    let point = loss_point(&q, &[6, 8], &p, &uniform).unwrap();
    let expected = q.len() as f64 * (30f64).ln();
    let msg = format!("128 random triples; uniform-model loss_point {point:.6} vs |q|·ln|V| {expected:.6}");
    check((point - expected).abs() < 1e-4, msg.clone(), msg)
}

// 6. Metrics against explicit top-k set enumeration.
fn metric_oracle() -> Verdict {
    let mut rng = SeededRng::new(61);
    let mut mismatches = 0;
    let mut monotone_failures = 0;
    for _ in 0..1000 {
        let universe = 1 + rng.below(25);
        let docs: Vec<String> = (0..universe).map(|i| format!("d{i}")).collect();
        let relevant: HashSet<&str> = docs.iter().filter(|_| rng.below(3) == 0).map(String::as_str).collect();
        let mut ranking: Vec<&str> = docs.iter().map(String::as_str).collect();
        rng.shuffle(&mut ranking);
        ranking.truncate(rng.below(universe + 1));
        let k = 1 + rng.below(universe + 3);
        let top: HashSet<&str> = ranking.iter().take(k).copied().collect();
        let found = relevant.iter().filter(|r| top.contains(*r)).count();
        let (want_r, want_rc, want_h) = if relevant.is_empty() {
            (None, None, None)
        } else {
            let n = relevant.len();
            (
                Some(found as f64 / n as f64),
                Some(found as f64 / n.min(k) as f64),
                Some(if found > 0 { 1.0 } else { 0.0 }),
            )
        };
        if recall_at_k(&ranking, &relevant, k, RecallMode::Standard) != want_r
            || recall_at_k(&ranking, &relevant, k, RecallMode::Capped) != want_rc
            || hit_at_k(&ranking, &relevant, k) != want_h
        {
            mismatches += 1;
        }
        if !relevant.is_empty() {
            for k in 1..=universe + 1 {
                let r0 = recall_at_k(&ranking, &relevant, k, RecallMode::Standard).unwrap();
                let r1 = recall_at_k(&ranking, &relevant, k + 1, RecallMode::Standard).unwrap();
                let h0 = hit_at_k(&ranking, &relevant, k).unwrap();
                let h1 = hit_at_k(&ranking, &relevant, k + 1).unwrap();
                if r1 < r0 || h1 < h0 {
                    monotone_failures += 1;
                }
            }
        }
    }
    let msg = format!("1000 cases, {mismatches} mismatches, {monotone_failures} monotonicity violations");
    check(mismatches == 0 && monotone_failures == 0, msg.clone(), msg)
}

/// ln Γ(x) by the Lanczos approximation (g = 7, 9 terms).
fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let x = x - 1.0;
    let mut s = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        s += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + s.ln()
}

/// Two-sided tail mass of Student's t beyond |t|, by Simpson's rule on the density.
fn two_sided_tail(t: f64, nu: f64) -> f64 {
    let norm = (ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0)).exp() / (nu * std::f64::consts::PI).sqrt();
    let pdf = |x: f64| norm * (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0);
    let n = 200_000;
    let h = t.abs() / n as f64;
    let mut s = pdf(0.0) + pdf(t.abs());
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(i as f64 * h);
    }
    (1.0 - 2.0 * s * h / 3.0).clamp(0.0, 1.0)
}

// 7. Paired t-test p-values against a hand-integrated t distribution.
fn significance() -> Verdict {
    let mut rng = SeededRng::new(71);
    let mut worst: f64 = 0.0;
    let mut fixtures = 0;
    for i in 0..48 {
        let n = 2 + rng.below(40);
        let shift = (i % 6) as f64 * 0.05;
        let a: Vec<f64> = (0..n).map(|_| rng.unit()).collect();
        let b: Vec<f64> = a.iter().map(|x| x - shift + 0.3 * (rng.unit() - 0.5)).collect();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let ss: f64 = d.iter().map(|v| (v - mean) * (v - mean)).sum();
        let t = mean / (ss / ((n - 1) * n) as f64).sqrt();
        let want = two_sided_tail(t, (n - 1) as f64);
        worst = worst.max((paired_t_test(&a, &b).unwrap() - want).abs());
        fixtures += 1;
    }
    let same = [0.2, 0.4, 0.9, 0.1];
    let shifted: Vec<f64> = same.iter().map(|x| x + 0.25).collect();
    let conventions = paired_t_test(&same, &same).unwrap() == 1.0
        && paired_t_test(&shifted, &same).unwrap() == 0.0;
    fixtures += 2;
    let msg = format!("{fixtures} fixtures, max |Δp| {worst:.2e}, zero-variance conventions {conventions}");
    check(worst < 1e-4 && conventions, msg.clone(), msg)
}

fn pspt_bin(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pspt"))
        .current_dir(dir)
        .args(["--config", "spec.json"])
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn write_workspace(dir: &Path, spec: serde_json::Value) {
    let cfg = SyntheticConfig { entities: 10, ..SyntheticConfig::default() };
    generate_dataset(&cfg).save(&dir.join("data.jsonl")).unwrap();
    fs::write(dir.join("spec.json"), spec.to_string()).unwrap();
}

// 8. Reruns of train and rerank are byte-identical; worker count is irrelevant.
fn reproducibility() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    write_workspace(
        d,
        serde_json::json!({
            "model": {"dim": 16, "n_layers": 1, "n_heads": 2, "max_seq_len": 64},
            "pretrain": {"steps": 30},
            "train": {"epochs": 2, "train_sample_size": 24},
            "adapter": {"soft_prompt_len": 8},
            "paths": {"dataset": "data.jsonl"},
            "eval": {"bm25_k": 10}
        }),
    );
    let read = |name: &str| fs::read(d.join(name)).unwrap();
    pspt_bin(d, &["init-model"])?;
    pspt_bin(d, &["train"])?;
    let (ckpt, log) = (read("pspt.ckpt"), read("train_log.jsonl"));
    pspt_bin(d, &["train"])?;
    let train_same = ckpt == read("pspt.ckpt") && log == read("train_log.jsonl");
    pspt_bin(d, &["--workers", "1", "rerank", "--run-out", "a.run"])?;
    pspt_bin(d, &["--workers", "1", "rerank", "--run-out", "b.run"])?;
    pspt_bin(d, &["--workers", "4", "rerank", "--run-out", "c.run"])?;
    let rerank_same = read("a.run") == read("b.run");
    let workers_same = read("a.run") == read("c.run");
    let msg = format!("train rerun identical {train_same}, rerank rerun identical {rerank_same}, 1 vs 4 workers identical {workers_same}");
    check(train_same && rerank_same && workers_same, msg.clone(), msg)
}

fn field<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key))
        .unwrap_or_default()
        .trim()
}

// 9. Printed θ/Φ against the closed form, with the default micro model.
fn trainable_fraction() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    write_workspace(d, serde_json::json!({"paths": {"dataset": "data.jsonl"}}));
    let stdout = pspt_bin(d, &["init-model"])?;
    let v: usize = field(&stdout, "vocabulary:").trim_end_matches(" tokens").parse().unwrap();
    let frozen: usize = field(&stdout, "frozen parameters:").parse().unwrap();
    let trainable: usize = field(&stdout, "trainable parameters:").parse().unwrap();
    let percent: f64 = field(&stdout, "trainable fraction:").trim_end_matches('%').parse().unwrap();
    let (dim, layers, ctx, hidden, l_s, r) = (64, 2, 256, 256, 50, 1);
    let per_layer = 2 * dim + 4 * dim * dim + 2 * dim + dim * hidden + hidden + hidden * dim + dim;
    let phi = v * dim + ctx * dim + layers * per_layer + 2 * dim;
    let theta = l_s * dim + v * r + r * dim;
    let expected = 100.0 * theta as f64 / phi as f64;
    let exact = frozen == phi && trainable == theta && (percent - expected).abs() < 5e-7;
    let msg = format!("|V| {v}, θ {trainable}, Φ {frozen}, printed {percent}% vs closed form {expected:.6}%");
    if !exact {
        return Err(format!("{msg}: mismatch"));
    }
    check(percent < 1.0, msg.clone(), format!("{msg}: not under 1%"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradient_correctness),
        ("frozen-Φ invariance", frozen_invariance),
        ("init identity", init_identity),
        ("synthetic end-to-end improvement", synthetic_improvement),
        ("loss semantics", loss_semantics),
        ("metric oracle equivalence", metric_oracle),
        ("significance test correctness", significance),
        ("reproducibility", reproducibility),
        ("trainable-fraction report", trainable_fraction),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|s| name.contains(s.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let verdict = f();
        let secs = t0.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail}) [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail}) [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
