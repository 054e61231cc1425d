//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Built without the libtest harness so the lines always print.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use emomtl_core::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
use emomtl_core::data::{decode_features, encode_features, generate_corpus, split_corpus, GeneratorConfig};
use emomtl_core::evalkit::{classification_metrics, run_ablation, render_table, AblationGrid};
use emomtl_core::fusion::{fuse_layers, select_last, FusionParams, LayerStack};
use emomtl_core::gradcheck::{grad_check_ops, run_grad_checks, GRAD_CHECK_POINTS, GRAD_CHECK_TOLERANCE};
use emomtl_core::losses::{ctc_loss, swfc_loss, ObjectiveConfig, SwfcConfig, SwfcVariant, WeightMode};
use emomtl_core::model::ModelDims;
use emomtl_core::pooling::{attentive_stats_pool, PoolingParams, POOLING_EPS};
use emomtl_core::trainer::{fit, EpochLog, TrainConfig, TrainState};
use emomtl_core::{Error, Tensor};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let reports = match run_grad_checks(GRAD_CHECK_POINTS, 0, GRAD_CHECK_TOLERANCE) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("suite error: {e}")),
    };
    let elapsed = start.elapsed();
    for r in &reports {
        println!("    {r}");
    }
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    let in_time = elapsed < Duration::from_secs(120);
    verdict(
        failed.is_empty() && in_time && reports.len() == grad_check_ops().len(),
        format!(
            "{} ops x {GRAD_CHECK_POINTS} points, worst rel err {worst:.2e} (tol {GRAD_CHECK_TOLERANCE:.0e}), failed {failed:?}, {:.1} s",
            reports.len(),
            elapsed.as_secs_f64()
        ),
    )
}

/// Every (V+1)^T frame path, kept when it collapses to `target`.
fn ctc_brute_force(logits: &[Vec<f64>], target: &[usize]) -> f64 {
    let t_len = logits.len();
    let v = logits[0].len();
    let probs: Vec<Vec<f64>> = logits
        .iter()
        .map(|row| {
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            row.iter().map(|x| x.exp() / z).collect()
        })
        .collect();
    let mut total = 0.0;
    let mut path = vec![0usize; t_len];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &s in &path {
            if Some(s) != prev && s != 0 {
                collapsed.push(s);
            }
            prev = Some(s);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(t, &s)| probs[t][s]).product::<f64>();
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == t_len {
                return total;
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn all_targets(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for t in &frontier {
            for s in 1..=vocab {
                let mut u: Vec<usize> = t.clone();
                u.push(s);
                next.push(u);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn ctc_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut checked, mut infeasible, mut worst) = (0usize, 0usize, 0.0f64);
    let mut problems = Vec::new();
    for t_len in 1..=6 {
        for vocab in 1..=3 {
            for target in all_targets(vocab, 3) {
                let rows: Vec<Vec<f64>> = (0..t_len)
                    .map(|_| (0..=vocab).map(|_| rng.random_range(-3.0..3.0)).collect())
                    .collect();
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                let logits = Tensor::matrix(t_len, vocab + 1, flat).unwrap();
                let p = ctc_brute_force(&rows, &target);
                match ctc_loss(&logits, &target) {
                    Ok(l) => {
                        let diff = (l + p.ln()).abs();
                        worst = worst.max(diff);
                        if !(diff <= 1e-9) {
                            problems.push(format!("T={t_len} target {target:?}: {l} vs {}", -p.ln()));
                        }
                        checked += 1;
                    }
                    Err(Error::InfeasibleTarget { .. }) if p == 0.0 => infeasible += 1,
                    Err(e) => problems.push(format!("T={t_len} target {target:?}: {e}")),
                }
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        problems.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{checked} instances within {worst:.1e} of enumeration (tol 1e-9), {infeasible} infeasible rejected, {} problems, {:.2} s",
            problems.len(),
            elapsed.as_secs_f64()
        ) + &problems.first().map(|p| format!("; first: {p}")).unwrap_or_default(),
    )
}

fn swfc_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let literal = |gamma: f64, weight_mode| SwfcConfig {
        tau: 0.07,
        gamma,
        variant: SwfcVariant::Eq2Literal,
        weight_mode,
    };
    let random = |rng: &mut ChaCha8Rng, n: usize| {
        Tensor::matrix(n, 4, (0..4 * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let mut pair_max = 0.0f64;
    let mut gamma0_exact = true;
    for _ in 0..200 {
        let e = random(&mut rng, 2);
        let labels = [rng.random_range(0..2), rng.random_range(0..2)];
        let l = swfc_loss(&e, &labels, &literal(2.0, WeightMode::InverseFrequency), &[3, 5]).unwrap();
        pair_max = pair_max.max(l.abs());

        let n = rng.random_range(2..12);
        let e = random(&mut rng, n);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let l = swfc_loss(&e, &labels, &literal(0.0, WeightMode::Uniform), &[1, 1, 1]).unwrap();
        gamma0_exact &= l == -1.0;
    }
    // Three unit vectors 120 degrees apart: every pairwise similarity is -1/2.
    let s = 3f64.sqrt() / 2.0;
    let tri = Tensor::from_rows(&[[1.0, 0.0], [-0.5, s], [-0.5, -s]]).unwrap();
    let eq = swfc_loss(&tri, &[0, 1, 2], &literal(2.0, WeightMode::Uniform), &[1, 1, 1]).unwrap();
    let eq_ok = (eq + 0.25).abs() <= 1e-12;
    verdict(
        pair_max == 0.0 && gamma0_exact && eq_ok,
        format!(
            "N=2 max |loss| {pair_max:e}; gamma=0 exactly -1 on 200 batches: {gamma0_exact}; equal-similarity N=3: {eq:.15}"
        ),
    )
}

fn small_corpus(n: usize, seed: u64) -> Vec<emomtl_core::data::Utterance> {
    let cfg = GeneratorConfig {
        n_utterances: n,
        n_speakers: 6,
        test_speakers: 1,
        frames_min: 6,
        frames_max: 9,
        feat_dim: 8,
        layers: 3,
        seed,
        ..GeneratorConfig::default()
    };
    generate_corpus(&cfg).unwrap()
}

fn run_log(corpus: &[emomtl_core::data::Utterance], cfg: &TrainConfig) -> (TrainState, Vec<EpochLog>) {
    let dims = ModelDims::infer(corpus, &cfg.model).unwrap();
    let mut state = TrainState::new(&dims, cfg.seed);
    let log = fit(&mut state, corpus, cfg, |_, _| Ok(())).unwrap();
    (state, log)
}

fn eq1_reductions() -> Verdict {
    let corpus = small_corpus(64, 11);
    let zero = TrainConfig {
        objective: ObjectiveConfig { alpha: 0.0, beta: 0.0 },
        epochs: 3,
        seed: 4,
        ..TrainConfig::default()
    };
    let single = TrainConfig {
        epochs: 3,
        seed: 4,
        ..TrainConfig::baseline()
    };
    let (_, a) = run_log(&corpus, &zero);
    let (_, b) = run_log(&corpus, &single);
    let mut max_diff = 0.0f64;
    for (ea, eb) in a.iter().zip(&b) {
        for (x, y) in ea.batches.iter().zip(&eb.batches).chain([(&ea.loss, &eb.loss)]) {
            max_diff = max_diff.max((x.total - y.total).abs()).max((x.total - x.l_emotion).abs());
        }
    }
    let same_shape = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.batches.len() == y.batches.len());

    let mut recombine_max = 0.0f64;
    let mut tasks_cfg = TrainConfig {
        epochs: 2,
        objective: ObjectiveConfig { alpha: 0.2, beta: 0.3 },
        ..TrainConfig::default()
    };
    tasks_cfg.tasks.speaker = false;
    for cfg in [TrainConfig { epochs: 2, ..TrainConfig::default() }, tasks_cfg] {
        let (_, log) = run_log(&corpus, &cfg);
        for e in &log {
            for b in e.batches.iter().chain([&e.loss]) {
                recombine_max = recombine_max.max((b.total - b.recombine()).abs());
            }
        }
    }
    verdict(
        same_shape && max_diff <= 1e-12 && recombine_max <= 1e-12,
        format!("alpha=beta=0 vs single-task max diff {max_diff:e}; recombination max diff {recombine_max:e}"),
    )
}

fn metric_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let c = rng.random_range(2..10);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let m = classification_metrics(&preds, &labels, c).unwrap();
        if m.f1_micro != m.accuracy {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{mismatches} of 1000 random sets with f1_micro != accuracy"))
}

fn fusion_pooling_limits() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut fusion_max = 0.0f64;
    let mut pool_plain = 0.0f64;
    let mut pool_floor = 0.0f64;
    for _ in 0..200 {
        let (l, t, d) = (rng.random_range(1..6), rng.random_range(1..10), rng.random_range(1..6));
        let data = (0..l * t * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let stack = LayerStack::new(Tensor::new(vec![l, t, d], data).unwrap()).unwrap();
        let mut logits = vec![-1e4; l];
        logits[l - 1] = 0.0;
        let fused = fuse_layers(&stack, &FusionParams { layer_logits: Tensor::vector(logits) }).unwrap();
        let last = select_last(&stack);
        for (a, b) in fused.data().iter().zip(last.data()) {
            fusion_max = fusion_max.max((a - b).abs());
        }

        let seq = last;
        let mean: Vec<f64> = (0..d).map(|k| (0..t).map(|i| seq.row(i)[k]).sum::<f64>() / t as f64).collect();
        let var: Vec<f64> = (0..d)
            .map(|k| (0..t).map(|i| (seq.row(i)[k] - mean[k]).powi(2)).sum::<f64>() / t as f64)
            .collect();
        for (eps, worst) in [(1e-300, &mut pool_plain), (POOLING_EPS, &mut pool_floor)] {
            let out = attentive_stats_pool(&seq, &PoolingParams::uniform(d, 2, eps)).unwrap();
            for k in 0..d {
                // the eps floor is part of the pooled std by definition
                let std = if eps == POOLING_EPS { (var[k] + eps).sqrt() } else { var[k].sqrt() };
                *worst = worst.max((out.data()[k] - mean[k]).abs()).max((out.data()[d + k] - std).abs());
            }
        }
    }
    verdict(
        fusion_max <= 1e-12 && pool_plain <= 1e-9 && pool_floor <= 1e-9,
        format!(
            "one-hot fusion vs last layer {fusion_max:e}; zero-attention pooling vs mean/population std {pool_plain:.1e} (eps -> 0), {pool_floor:.1e} (default eps floor)"
        ),
    )
}

fn determinism_and_resume() -> Verdict {
    let corpus = small_corpus(64, 12);
    let cfg = TrainConfig {
        epochs: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let (_, a) = run_log(&corpus, &cfg);
    let (_, b) = run_log(&corpus, &cfg);
    let max_log_diff = a
        .iter()
        .zip(&b)
        .flat_map(|(x, y)| x.batches.iter().zip(&y.batches))
        .map(|(x, y)| (x.total - y.total).abs())
        .fold(0.0, f64::max);
    let identical = a == b;

    let five = TrainConfig { epochs: 5, ..cfg.clone() };
    let (full_state, full_log) = run_log(&corpus, &five);
    let three = TrainConfig { epochs: 3, ..cfg.clone() };
    let (mid, _) = run_log(&corpus, &three);
    let bytes = encode_checkpoint(&Checkpoint::new(&five, &mid));
    let restored = decode_checkpoint(&bytes, Path::new("resume")).unwrap();
    let resumed_ok = restored.ensure_compatible(&five, &ModelDims::infer(&corpus, &five.model).unwrap()).is_ok();
    let mut state = restored.state;
    let tail = fit(&mut state, &corpus, &five, |_, _| Ok(())).unwrap();
    let resume_match = tail == full_log[3..] && state == full_state;
    verdict(
        identical && max_log_diff <= 1e-12 && resumed_ok && resume_match,
        format!(
            "repeat run identical: {identical} (max diff {max_log_diff:e}); resume at epoch 3 of 5 matches: {resume_match}"
        ),
    )
}

struct AblationOutcome {
    verdict: Verdict,
    speaker: Verdict,
}

fn directional_ablation() -> AblationOutcome {
    let start = Instant::now();
    let gen = GeneratorConfig::default();
    let splits = split_corpus(generate_corpus(&gen).unwrap(), &gen);
    let mut full = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };
    full.swfc.variant = SwfcVariant::FocalSupcon;
    full.model.dropout = 0.3;
    let mut grid = AblationGrid::components(&full);
    grid.configs.retain(|c| ["baseline", "no_coattention", "full"].contains(&c.name.as_str()));
    let seeds = [0, 1, 2, 3, 4];
    let table = match run_ablation(&grid, &splits.train, &splits.test, &seeds) {
        Ok(t) => t,
        Err(e) => {
            let v = || verdict(false, format!("ablation failed: {e}"));
            return AblationOutcome {
                verdict: v(),
                speaker: v(),
            };
        }
    };
    let elapsed = start.elapsed();
    for line in render_table(&table).lines() {
        println!("    {line}");
    }
    let f1 = |name: &str| table.row(name).unwrap().median.emotion.f1_macro;
    let (b, nc, f) = (f1("baseline"), f1("no_coattention"), f1("full"));
    let ok = f > b && f >= nc && f - b >= 0.02 && elapsed < Duration::from_secs(15 * 60);
    let verdict_main = verdict(
        ok,
        format!(
            "median emotion F1-macro over 5 seeds: full {:.2}, no_coattention {:.2}, baseline {:.2} (gain {:+.2} points), {} train / {} test, {:.0} s",
            100.0 * f,
            100.0 * nc,
            100.0 * b,
            100.0 * (f - b),
            splits.train.len(),
            splits.test.len(),
            elapsed.as_secs_f64()
        ),
    );

    let n_train_speakers = ModelDims::infer(&splits.train, &full.model).unwrap().n_speakers;
    let chance = 1.0 / n_train_speakers as f64;
    let spk = table.row("full").unwrap().median.speaker.map(|m| m.accuracy);
    let speaker = match spk {
        Some(acc) => verdict(
            acc <= 2.0 * chance,
            format!(
                "held-out speaker accuracy {:.2}% vs chance {:.2}% over {n_train_speakers} training speakers",
                100.0 * acc,
                100.0 * chance
            ),
        ),
        None => verdict(false, "speaker head missing from the full config"),
    };
    AblationOutcome {
        verdict: verdict_main,
        speaker,
    }
}

fn format_round_trips() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut features_exact = true;
    for _ in 0..50 {
        let (l, t, d) = (rng.random_range(1..5), rng.random_range(1..20), rng.random_range(1..8));
        let data = (0..l * t * d).map(|_| rng.random_range(-5.0f32..5.0) as f64).collect();
        let stack = LayerStack::new(Tensor::new(vec![l, t, d], data).unwrap()).unwrap();
        let bytes = encode_features(&stack);
        let back = decode_features(&bytes, Path::new("mem")).unwrap();
        features_exact &= back == stack && encode_features(&back) == bytes;
    }
    for u in small_corpus(20, 13) {
        let back = decode_features(&encode_features(&u.stack), Path::new("mem")).unwrap();
        features_exact &= back == u.stack;
    }

    let corpus = small_corpus(32, 14);
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let (state, _) = run_log(&corpus, &cfg);
    let ckpt = Checkpoint::new(&cfg, &state);
    let bytes = encode_checkpoint(&ckpt);
    let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
    let ckpt_exact = back == ckpt && encode_checkpoint(&back) == bytes;

    let feat = encode_features(&corpus[0].stack);
    let mut errors_ok = true;
    for (name, bytes) in [("features", feat), ("checkpoint", bytes)] {
        let p = Path::new(name);
        let decode = |b: &[u8]| -> Result<(), Error> {
            if name == "features" {
                decode_features(b, p).map(|_| ())
            } else {
                decode_checkpoint(b, p).map(|_| ())
            }
        };
        let mut magic = bytes.clone();
        magic[1] ^= 0xff;
        let mut version = bytes.clone();
        version[4] = 200;
        let short = &bytes[..bytes.len() - 1];
        errors_ok &= matches!(decode(&magic), Err(Error::BadMagic { .. }));
        errors_ok &= matches!(decode(&version), Err(Error::VersionMismatch { .. }));
        errors_ok &= matches!(decode(short), Err(Error::Truncated { .. }));
        errors_ok &= matches!(decode(&bytes[..3]), Err(Error::Truncated { .. }));
    }
    verdict(
        features_exact && ckpt_exact && errors_ok,
        format!(
            "feature files bit-exact: {features_exact}; checkpoints bit-exact: {ckpt_exact}; bad magic / version / truncation errors: {errors_ok}"
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |n: usize, name: &'static str, v: Verdict| {
        println!(
            "criterion {n:>2} {:<28} {}  {}",
            name,
            if v.passed { "PASS" } else { "FAIL" },
            v.detail
        );
        results.push((n, name, v));
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "ctc oracle", ctc_oracle());
    report(3, "swfc literal identities", swfc_identities());
    report(4, "objective reductions", eq1_reductions());
    report(5, "micro-F1 equals accuracy", metric_identity());
    report(6, "fusion and pooling limits", fusion_pooling_limits());
    let ablation = directional_ablation();
    report(7, "directional ablation", ablation.verdict);
    report(8, "determinism and resume", determinism_and_resume());
    report(9, "held-out speakers", ablation.speaker);
    report(10, "format round trips", format_round_trips());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
