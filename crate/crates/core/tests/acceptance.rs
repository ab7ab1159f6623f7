//! Acceptance suite: runs criteria 1-8 in order and prints one PASS/FAIL line
//! for each. Runs without the libtest harness so the lines always appear and
//! the timing criteria never share the core with another test.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gloss_core::attention::{gloss_attention, AttentionVariant, HeadProjections};
use gloss_core::data::{generate_corpus, read_features, write_features, write_corpus, Corpus, FeatureSequence, Split, SyntheticSpec};
use gloss_core::harness::{bench_variant, evaluate, train, EvalReport, TrainConfig, TrainOutcome};
use gloss_core::metrics::{asd, bleu, cad_matrix, rouge_l, SimilarityMatrix};
use gloss_core::model::{DecodeMode, ModelConfig, Translator, VariantKind};
use gloss_core::numerics::{Graph, Tensor, Var};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|p| a.at(i, p) * b.at(p, j)).sum();
        }
    }
    Tensor::matrix(n, m, out)
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    diff / scale
}

// ---- criterion 1 -----------------------------------------------------------

fn gloss_loss(g: &mut Graph, v: &[Var], readout: &Tensor, t: usize) -> (Var, Var) {
    let p = HeadProjections { w_q: v[1], w_k: v[2], w_v: v[3] };
    let out = gloss_attention(g, v[0], &p, v[4], &vec![true; t]).unwrap();
    let r = g.constant(readout.clone());
    let prod = g.mul(out.output, r).unwrap();
    (g.sum(prod), out.positions.unwrap())
}

fn gradient_fidelity() -> Outcome {
    let (t, d, n, h) = (11, 8, 3, 1e-5);
    let names = ["X", "W_q", "W_k", "W_v", "W_o"];
    let mut worst = [0.0f64; 5];
    let (mut checked, mut skipped, mut seed) = (0, 0, 0u64);
    while checked < 20 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        seed += 1;
        let inputs = [
            rand_matrix(&mut rng, t, d, 1.0),
            rand_matrix(&mut rng, d, d, 0.6),
            rand_matrix(&mut rng, d, d, 0.6),
            rand_matrix(&mut rng, d, d, 0.6),
            rand_matrix(&mut rng, n, d, 0.5),
        ];
        let readout = rand_matrix(&mut rng, t, d, 1.0);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
        let (loss, pos) = gloss_loss(&mut g, &vars, &readout, t);
        // interpolation is not differentiable at integer positions
        if g.value(pos).data().iter().any(|p| (p - p.round()).abs() < 1e-3) {
            skipped += 1;
            continue;
        }
        let grads = g.backward(loss).unwrap();
        for which in 0..inputs.len() {
            let eval = |x: &Tensor| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, v)| g.constant(if i == which { x.clone() } else { v.clone() }))
                    .collect();
                let (loss, _) = gloss_loss(&mut g, &vars, &readout, t);
                g.value(loss).item()
            };
            let base = &inputs[which];
            let mut numeric = vec![0.0; base.len()];
            let mut probe = base.clone();
            for i in 0..base.len() {
                let orig = base.data()[i];
                probe.data_mut()[i] = orig + h;
                let up = eval(&probe);
                probe.data_mut()[i] = orig - h;
                let down = eval(&probe);
                probe.data_mut()[i] = orig;
                numeric[i] = (up - down) / (2.0 * h);
            }
            let numeric = Tensor::new(base.shape().to_vec(), numeric).unwrap();
            worst[which] = worst[which].max(rel_err(&grads.get(vars[which]).unwrap(), &numeric));
        }
        checked += 1;
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    let per: Vec<String> = names.iter().zip(worst).map(|(n, e)| format!("{n}={e:.1e}")).collect();
    outcome(
        max < 1e-5,
        format!("instances={checked} skipped={skipped} max_rel_err={max:.2e} ({})", per.join(" ")),
    )
}

// ---- criterion 2 -----------------------------------------------------------

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut queries = 0;
    for _ in 0..50 {
        let n = rng.random_range(1..=7usize);
        let t = rng.random_range((2 * n).max(2)..=16usize);
        let d = rng.random_range(1..=8usize);
        let x = rand_matrix(&mut rng, t, d, 1.5);
        let w: Vec<Tensor> = (0..3).map(|_| rand_matrix(&mut rng, d, d, 1.0)).collect();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let p = HeadProjections {
            w_q: g.constant(w[0].clone()),
            w_k: g.constant(w[1].clone()),
            w_v: g.constant(w[2].clone()),
        };
        let wo = g.constant(Tensor::zeros(&[n, d]));
        let out = gloss_attention(&mut g, xv, &p, wo, &vec![true; t]).unwrap();
        let got = g.value(out.output);
        let (q, k, v) = (matmul(&x, &w[0]), matmul(&x, &w[1]), matmul(&x, &w[2]));
        // query t attends to frames t - ceil(N/2) .. t - ceil(N/2) + N - 1
        let half = n.div_ceil(2);
        for qi in half..=(t - n + half).min(t - 1) {
            let band: Vec<usize> = (qi - half..qi - half + n).collect();
            let scores: Vec<f64> = band
                .iter()
                .map(|&j| (0..d).map(|c| q.at(qi, c) * k.at(j, c)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for c in 0..d {
                let want: f64 = band.iter().zip(&scores).map(|(&j, s)| (s - m).exp() / z * v.at(j, c)).sum();
                worst = worst.max((got.at(qi, c) - want).abs());
            }
            queries += 1;
        }
    }
    outcome(worst < 1e-9, format!("instances=50 queries={queries} max_abs_diff={worst:.2e}"))
}

// ---- criterion 3 -----------------------------------------------------------

fn complexity() -> Outcome {
    let (n, d, repeats) = (7, 64, 5);
    let gloss = AttentionVariant::Gloss { positions: n };
    let self_v = AttentionVariant::SelfAttention;
    let g1 = bench_variant(gloss, 2048, d, repeats, 7).unwrap();
    let g2 = bench_variant(gloss, 4096, d, repeats, 7).unwrap();
    let s1 = bench_variant(self_v, 2048, d, repeats, 7).unwrap();
    let s2 = bench_variant(self_v, 4096, d, repeats, 7).unwrap();
    let counters = g1.score_evals == n * 2048
        && g2.score_evals == n * 4096
        && s1.score_evals == 2048 * 2048
        && s2.score_evals == 4096 * 4096;
    let (rg, rs) = (g2.median_secs / g1.median_secs, s2.median_secs / s1.median_secs);
    outcome(
        counters && rg <= 2.5 && rs >= 3.5,
        format!(
            "counters_exact={counters} gloss_ratio={rg:.2} ({:.4}s->{:.4}s) self_ratio={rs:.2} ({:.3}s->{:.3}s)",
            g1.median_secs, g2.median_secs, s1.median_secs, s2.median_secs
        ),
    )
}

// ---- criterion 4 -----------------------------------------------------------

fn metric_oracles() -> Outcome {
    let b1 = bleu(&["a b c d"], &["a b c d e"], 1).unwrap()[0];
    // four of four unigrams match; brevity penalty exp(1 - 5/4)
    let b1_oracle = (1.0f64 - 5.0 / 4.0).exp();
    let r = rouge_l("a b c", "a c", 1.2).unwrap();
    let (p, rec, beta2) = (2.0 / 3.0, 1.0, 1.44);
    let r_oracle = (1.0 + beta2) * p * rec / (rec + beta2 * p);
    let ids = vec!["x".to_string(), "y".to_string()];
    let s = SimilarityMatrix::new(ids.clone(), vec![1.0, 0.5, 0.5, 1.0]).unwrap();
    let s_hat = SimilarityMatrix::new(ids, vec![1.0, 0.3, 0.3, 1.0]).unwrap();
    let a = asd(&s_hat, &s).unwrap();
    let c = cad_matrix(&Tensor::full(&[10, 10], 0.1), 0.1);
    let pass = (b1 - 0.7788).abs() < 1e-4
        && (b1 - b1_oracle).abs() < 1e-12
        && (r - 0.8299).abs() < 1e-4
        && (r - r_oracle).abs() < 1e-12
        && (a - 0.2).abs() < 1e-12
        && (c - 0.28).abs() < 1e-12;
    outcome(pass, format!("bleu1={b1:.6} rouge_l={r:.6} asd={a} cad={c}"))
}

// ---- criterion 8 -----------------------------------------------------------

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        glosses: 6,
        feature_dim: 8,
        segment_min: 3,
        segment_max: 6,
        sentence_min: 2,
        sentence_max: 4,
        train_size: 24,
        dev_size: 6,
        test_size: 6,
        ..SyntheticSpec::default()
    }
}

fn small_model(variant: VariantKind) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        ff_dim: 32,
        gloss_positions: 3,
        window: 3,
        dropout: 0.1,
        variant,
        max_output_len: 10,
        ..ModelConfig::default()
    }
}

fn determinism_and_io() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();

    let (da, db) = (tmp.path().join("corpus_a"), tmp.path().join("corpus_b"));
    write_corpus(&generate_corpus(&SyntheticSpec::default()).unwrap(), &da).unwrap();
    write_corpus(&generate_corpus(&SyntheticSpec::default()).unwrap(), &db).unwrap();
    let (fa, fb) = (files_under(&da), files_under(&db));
    let corpora = fa == fb && fa.len() > 600;
    notes.push(format!("corpora_identical={corpora} files={}", fa.len()));

    let corpus = generate_corpus(&small_spec()).unwrap();
    let (s_tr, s_dev) = (corpus.similarity(Split::Train).unwrap(), corpus.similarity(Split::Dev).unwrap());
    let cfg = TrainConfig {
        model: small_model(VariantKind::Gloss),
        batch_size: 8,
        learning_rate: 2e-3,
        epochs: 3,
        ..TrainConfig::default()
    };
    let (ra, rb) = (tmp.path().join("run_a"), tmp.path().join("run_b"));
    train(&cfg, &corpus, &s_tr, &s_dev, Some(&ra), |_| {}).unwrap();
    train(&cfg, &corpus, &s_tr, &s_dev, Some(&rb), |_| {}).unwrap();
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    let logs = read(&ra, "log.txt") == read(&rb, "log.txt");
    let ckpts = read(&ra, "best.ckpt") == read(&rb, "best.ckpt");
    notes.push(format!("logs_identical={logs} checkpoints_identical={ckpts}"));

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut values: Vec<f32> = (0..37 * 13).map(|_| rng.random_range(-1e6f32..1e6)).collect();
    values[..6].copy_from_slice(&[0.0, -0.0, f32::MIN_POSITIVE, 1e-45, f32::MAX, f32::MIN]);
    let seq = FeatureSequence::new(37, 13, values).unwrap();
    let path = tmp.path().join("seq.gasl");
    write_features(&path, &seq).unwrap();
    let back = read_features(&path).unwrap();
    let bits = |s: &FeatureSequence| s.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let round_trip = back.frames() == 37 && back.dim() == 13 && bits(&back) == bits(&seq);
    notes.push(format!("feature_round_trip_bit_exact={round_trip}"));

    let mut pad_worst = 0.0f64;
    for variant in [VariantKind::Gloss, VariantKind::SelfAttention, VariantKind::Sliding] {
        let m = Translator::new(ModelConfig { vocab_size: 12, input_dim: 8, ..small_model(variant) }, 3).unwrap();
        let clip = rand_matrix(&mut rng, 10, 8, 1.0);
        let mut padded = clip.data().to_vec();
        padded.extend((0..5 * 8).map(|_| rng.random_range(-4.0..4.0)));
        let padded = Tensor::matrix(15, 8, padded);
        let valid: Vec<bool> = (0..15).map(|t| t < 10).collect();
        let a = m.encode(&clip, &[true; 10]).unwrap();
        let b = m.encode(&padded, &valid).unwrap();
        for t in 0..10 {
            for j in 0..16 {
                pad_worst = pad_worst.max((a.hidden.at(t, j) - b.hidden.at(t, j)).abs());
            }
        }
        for (x, y) in a.embedding.iter().zip(&b.embedding) {
            pad_worst = pad_worst.max((x - y).abs());
        }
    }
    notes.push(format!("padding_max_abs_diff={pad_worst:.1e}"));
    outcome(corpora && logs && ckpts && round_trip && pad_worst < 1e-9, notes.join(" "))
}

// ---- criteria 5-7 ----------------------------------------------------------

const EPOCHS: usize = 30;

fn synthetic_config(variant: VariantKind, seed: u64, lambda_kt: f64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            d_model: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_dim: 256,
            gloss_positions: 7,
            window: 7,
            dropout: 0.1,
            variant,
            ..ModelConfig::default()
        },
        lambda_kt,
        epochs: EPOCHS,
        seed,
        ..TrainConfig::default()
    }
}

struct Run {
    outcome: TrainOutcome,
    test: EvalReport,
    secs: f64,
}

struct Trainer {
    corpus: Corpus,
    sims: [SimilarityMatrix; 3],
}

impl Trainer {
    fn new() -> Self {
        let corpus = generate_corpus(&SyntheticSpec::default()).unwrap();
        let sims = Split::ALL.map(|s| corpus.similarity(s).unwrap());
        Self { corpus, sims }
    }

    fn run(&self, variant: VariantKind, seed: u64, lambda_kt: f64) -> Run {
        let start = Instant::now();
        let cfg = synthetic_config(variant, seed, lambda_kt);
        eprintln!("  training {variant} seed={seed} lambda_kt={lambda_kt} epochs={EPOCHS}");
        let outcome = train(&cfg, &self.corpus, &self.sims[0], &self.sims[1], None, |_| {}).unwrap();
        let test = evaluate(&outcome.model, &self.corpus.test, &self.corpus.vocab, &self.sims[2], DecodeMode::Greedy).unwrap();
        Run {
            outcome,
            test,
            secs: start.elapsed().as_secs_f64(),
        }
    }
}

fn last_logged(run: &Run, key: &str) -> f64 {
    let line = run.outcome.log.last().unwrap();
    line.split(' ')
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap()
        .parse()
        .unwrap()
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let secs = start.elapsed().as_secs_f64();
        println!(
            "criterion {n} {name}: {} ({secs:.1}s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o, secs));
    };

    record(1, "gradient_fidelity", &mut || {
        let start = Instant::now();
        let mut o = gradient_fidelity();
        if start.elapsed().as_secs_f64() >= 10.0 {
            o.pass = false;
            o.detail.push_str(" runtime>=10s");
        }
        o
    });
    record(2, "oracle_equivalence", &mut oracle_equivalence);
    record(3, "complexity", &mut || {
        let start = Instant::now();
        let mut o = complexity();
        if start.elapsed().as_secs_f64() >= 120.0 {
            o.pass = false;
            o.detail.push_str(" runtime>=120s");
        }
        o
    });
    record(4, "metric_oracles", &mut metric_oracles);

    let trainer = Trainer::new();
    let mut gloss_runs = Vec::new();
    record(5, "synthetic_translation", &mut || {
        let r = trainer.run(VariantKind::Gloss, 42, 1.0);
        let (b1, b4) = (r.test.bleu[0], r.test.bleu4());
        let o = outcome(
            b1 >= 0.85 && b4 >= 0.5 && r.secs < 1800.0,
            format!(
                "test_bleu1={b1:.4} test_bleu4={b4:.4} best_epoch={} epochs={EPOCHS} train_eval_secs={:.0}",
                r.outcome.best_epoch, r.secs
            ),
        );
        gloss_runs.push(r);
        o
    });
    record(6, "diagonality_gloss_vs_self", &mut || {
        let mut wins = 0;
        let mut parts = Vec::new();
        for seed in [42, 43, 44] {
            if seed != 42 {
                gloss_runs.push(trainer.run(VariantKind::Gloss, seed, 1.0));
            }
            let g = gloss_runs.iter().find(|r| r.outcome.config.seed == seed).unwrap();
            let s = trainer.run(VariantKind::SelfAttention, seed, 1.0);
            if g.test.cad > s.test.cad {
                wins += 1;
            }
            parts.push(format!("seed{seed}: gloss={:.4} self={:.4}", g.test.cad, s.test.cad));
        }
        outcome(wins >= 2, format!("wins={wins}/3 {}", parts.join(" ")))
    });
    record(7, "kt_loss_lowers_asd", &mut || {
        let with = gloss_runs.iter().find(|r| r.outcome.config.seed == 42).unwrap();
        let without = trainer.run(VariantKind::Gloss, 42, 0.0);
        let (a1, a0) = (last_logged(with, "dev_asd"), last_logged(&without, "dev_asd"));
        let kt_zero = without.outcome.losses.iter().all(|l| l.kt == 0.0);
        outcome(
            a1 < a0 && kt_zero,
            format!("dev_asd lambda1={a1:.4} lambda0={a0:.4} (epoch {EPOCHS}) kt_logged_zero_at_lambda0={kt_zero}"),
        )
    });
    record(8, "determinism_and_io", &mut determinism_and_io);

    results.sort_by_key(|r| r.0);
    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| r.0.to_string()).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
