//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any failed.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use giftsw::model::{init_params, ModelConfig, ParamSet};
use giftsw::noise::{compute_noise_scale, inject, NoisePlan};
use giftsw::partition::SalientPartition;
use giftsw::pipeline::{self, hex_sha256, ExperimentSpec, Regime};
use giftsw::quantizer::{search_scale, BitWidth, QuantSpec, DEFAULT_GRID_POINTS};
use giftsw::sensitivity::{
    calibrate, capture_inputs, column_sensitivity, partitions_of, select_from_inputs, select_salient, ActivationStats,
    MetricConfig, PerturbationSource, WeightTerm,
};
use giftsw::tensor::{sample_gaussian, NormOrder, SeededRng, Tensor};
use giftsw::trainer::{self, lr_at, Batch, SteScales, TrainConfig, TrainMode, TrainRun, Trainer};

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn random_batch(rng: &mut SeededRng, n: usize, len: usize, vocab: usize) -> Vec<Vec<usize>> {
    (0..n).map(|_| (0..len).map(|_| rng.below(vocab)).collect()).collect()
}

// 1 ─────────────────────────────────────────────────────────────────────────

fn gradient_oracle() -> Outcome {
    let steps = [1e-2, 3e-3, 1e-3, 3e-4, 1e-4];
    let mut rng = SeededRng::new(2024);
    let mut lines = Vec::new();
    for i in 0..3 {
        let cfg = ModelConfig {
            vocab_size: 3 + rng.below(6),
            context_length: 2 + rng.below(4),
            d_model: 2 + rng.below(6),
            n_layers: 1 + rng.below(2),
            n_heads: 1,
            d_ff: 2 + rng.below(8),
            seed: i,
            init_std: 0.5,
        };
        let params = init_params(&cfg, &mut rng).map_err(|e| e.to_string())?;
        let len = 1 + rng.below(cfg.context_length);
        let tokens = random_batch(&mut rng, 2, len, cfg.vocab_size);
        let targets = random_batch(&mut rng, 2, len, cfg.vocab_size);
        let (h, r) = common::check_gradients(&cfg, &params, &tokens, &targets, &steps, 1e-8);
        if r.max_rel > 1e-5 {
            return Err(format!("config {i}: max rel {:.2e} at {}", r.max_rel, r.worst));
        }
        lines.push(format!("{} params, h={h:e}, max rel {:.1e}", r.checked, r.max_rel));
    }
    Ok(lines.join("; "))
}

// 2 ─────────────────────────────────────────────────────────────────────────

/// Independent exhaustive minimizer over `α_g = max|w|·g/G`.
fn brute_force_delta(row: &[f64], bits: u32, grid: usize) -> f64 {
    let q_max = ((1i64 << (bits - 1)) - 1) as f64;
    let q_min = -((1i64 << (bits - 1)) as f64);
    let mut max_abs = 0.0f64;
    for &w in row {
        if w.abs() > max_abs {
            max_abs = w.abs();
        }
    }
    if max_abs == 0.0 {
        return 1e-8;
    }
    let mut best_delta = f64::NAN;
    let mut best_err = f64::INFINITY;
    for g in 1..=grid {
        let alpha = max_abs * g as f64 / grid as f64;
        let delta = alpha / q_max;
        let mut err = 0.0;
        for &w in row {
            let mut q = (w / delta).round_ties_even();
            if q > q_max {
                q = q_max;
            }
            if q < q_min {
                q = q_min;
            }
            let e = w - delta * q;
            err += e * e;
        }
        if err < best_err {
            best_err = err;
            best_delta = delta;
        }
    }
    best_delta
}

fn quantizer_oracle() -> Outcome {
    let mut rng = SeededRng::new(77);
    let widths = [2u32, 3, 4, 8];
    for i in 0..1000 {
        let bits = widths[i % 4];
        let len = 1 + rng.below(48);
        let row: Vec<f64> = match i % 10 {
            // integers and halves create exact rounding ties
            0 => (0..len).map(|_| (rng.below(17) as f64 - 8.0) * 0.5).collect(),
            1 => vec![0.0; len],
            _ => (0..len).map(|_| rng.gaussian() * (1.0 + rng.below(4) as f64)).collect(),
        };
        let grid = if i % 7 == 0 { 2 + rng.below(20) } else { DEFAULT_GRID_POINTS };
        let got = search_scale(&row, BitWidth::new(bits).unwrap(), grid).map_err(|e| e.to_string())?;
        let want = brute_force_delta(&row, bits, grid);
        if got.delta.to_bits() != want.to_bits() {
            return Err(format!("row {i} ({bits}-bit, G={grid}): got Δ={} want Δ={}", got.delta, want));
        }
    }
    Ok("1000/1000 rows exact".into())
}

// 3 ─────────────────────────────────────────────────────────────────────────

fn column_hash(w: &Tensor, cols: &[usize]) -> String {
    hex_sha256(&w.select_columns(cols).to_le_bytes())
}

fn frozen_weight_invariance() -> Outcome {
    let spec = ExperimentSpec::default();
    let data = pipeline::ingest(&spec).map_err(|e| e.to_string())?;
    let cfg = spec.model_config(&data.vocab).map_err(|e| e.to_string())?;
    let params = init_params(&cfg, &mut SeededRng::new(5)).map_err(|e| e.to_string())?;
    let qspec = QuantSpec::new(BitWidth::new(4).unwrap());
    let sel = calibrate(&params, &data.calibration, &spec.metric, spec.k, Some(&qspec)).map_err(|e| e.to_string())?;
    let parts = partitions_of(&sel).map_err(|e| e.to_string())?;
    let plan = NoisePlan::build(&params, &parts, BitWidth::new(4).unwrap(), DEFAULT_GRID_POINTS).map_err(|e| e.to_string())?;
    let before: BTreeMap<String, String> = parts
        .iter()
        .map(|(n, p)| (n.clone(), column_hash(params.get(n).unwrap(), p.non_salient())))
        .collect();
    let train_cfg = TrainConfig {
        mode: TrainMode::Giftsw,
        steps: 300,
        peak_lr: 1e-2,
        seed: 3,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let mut sampler = data.train.clone();
    let (after, log) = trainer::train(
        params.clone(),
        TrainRun {
            cfg: &train_cfg,
            partitions: &parts,
            plan: Some(&plan),
            ste: None,
            sampler: &mut sampler,
            eval: None,
        },
    )
    .map_err(|e| e.to_string())?;
    for (name, p) in &parts {
        if column_hash(after.get(name).unwrap(), p.non_salient()) != before[name] {
            return Err(format!("{name}: non-salient hash changed"));
        }
        if column_hash(after.get(name).unwrap(), p.salient()) == column_hash(params.get(name).unwrap(), p.salient()) {
            return Err(format!("{name}: salient columns never moved"));
        }
    }
    let (l0, lt) = (log.steps[0].train_loss, log.steps[299].train_loss);
    Ok(format!("{} tensors, 300 steps, train loss {l0:.3} → {lt:.3}", parts.len()))
}

// 4 ─────────────────────────────────────────────────────────────────────────

fn noise_statistics() -> Outcome {
    let mut rng = SeededRng::new(404);
    let w = sample_gaussian(&[4, 3], &mut rng);
    let p = SalientPartition::new(3, vec![1]).unwrap();
    let delta = compute_noise_scale(&w, &p, BitWidth::new(3).unwrap(), 100, "w").map_err(|e| e.to_string())?;
    let injections = 200_000;
    let mut sum = [0.0; 4];
    let mut sum_sq = [0.0; 4];
    for _ in 0..injections {
        let noisy = inject(&w, &p, &delta, &mut rng).map_err(|e| e.to_string())?;
        for r in 0..4 {
            for &c in p.non_salient() {
                let d = noisy.get(r, c) - w.get(r, c);
                sum[r] += d;
                sum_sq[r] += d * d;
            }
        }
    }
    let n = (injections * p.non_salient().len()) as f64;
    let mut worst_std: f64 = 0.0;
    for r in 0..4 {
        let target = delta[r] / 2.0;
        let mean = sum[r] / n;
        let std = (sum_sq[r] / n - mean * mean).sqrt();
        let rel = (std / target - 1.0).abs();
        worst_std = worst_std.max(rel);
        if rel > 0.01 {
            return Err(format!("row {r}: std {std} vs Δ/2 {target}"));
        }
        if mean.abs() > 5.0 * target / n.sqrt() {
            return Err(format!("row {r}: mean {mean} exceeds 5σ/√N"));
        }
    }
    Ok(format!("N={n} per row, worst std deviation {:.3}%", worst_std * 100.0))
}

// 5 ─────────────────────────────────────────────────────────────────────────

fn metric_equivalences() -> Outcome {
    let mut rng = SeededRng::new(55);
    let plain = MetricConfig::new(NormOrder::L2, NormOrder::L2, 1.0, PerturbationSource::Quantization, WeightTerm::Norm).unwrap();
    let owq = MetricConfig::owq();
    let quik = MetricConfig::quik();
    let (mut agree_owq, mut agree_quik) = (0, 0);
    for _ in 0..100 {
        let rows = 1 + rng.below(12);
        let cols = 2 + rng.below(30);
        let d = sample_gaussian(&[rows, cols], &mut rng);
        let x = sample_gaussian(&[1 + rng.below(40), cols], &mut rng);
        let stats = ActivationStats::from_inputs(&x).unwrap();
        let k = 1 + rng.below(cols);
        let top = |m: &MetricConfig| select_salient(&column_sensitivity(&d, &stats, m).unwrap(), k).unwrap();
        if top(&plain) == top(&owq) {
            agree_owq += 1;
        }
        if top(&quik) == select_salient(&stats.linf, k).unwrap() {
            agree_quik += 1;
        }
    }
    check(
        agree_owq == 100 && agree_quik == 100,
        format!("owq {agree_owq}/100, quik {agree_quik}/100"),
        format!("owq {agree_owq}/100, quik {agree_quik}/100"),
    )
}

// 6 ─────────────────────────────────────────────────────────────────────────

fn activation_scaling_invariance() -> Outcome {
    let cfg = ModelConfig {
        init_std: 0.2,
        ..ModelConfig::tiny(24)
    };
    let mut rng = SeededRng::new(66);
    let params = init_params(&cfg, &mut rng).unwrap();
    let batch = random_batch(&mut rng, 16, 32, 24);
    let inputs = capture_inputs(&params, &batch).map_err(|e| e.to_string())?;
    let spec = QuantSpec::new(BitWidth::new(4).unwrap());
    let mut metrics = vec![MetricConfig::quik(), MetricConfig::owq(), MetricConfig::wanda()];
    for g in [0.5, 1.0, 2.0] {
        metrics.push(MetricConfig::giftsw_default().with_gamma(g).unwrap());
    }
    let mut compared = 0;
    for m in &metrics {
        let reference = select_from_inputs(&params, &inputs, m, 4, Some(&spec)).map_err(|e| e.to_string())?;
        for c in [0.1, 10.0] {
            let scaled: BTreeMap<String, Tensor> = inputs.iter().map(|(n, x)| (n.clone(), x.scale(c))).collect();
            let sel = select_from_inputs(&params, &scaled, m, 4, Some(&spec)).map_err(|e| e.to_string())?;
            for (name, s) in &sel {
                compared += 1;
                if s.salient != reference[name].salient {
                    return Err(format!("{m:?} c={c} {name}: {:?} vs {:?}", s.salient, reference[name].salient));
                }
            }
        }
    }
    Ok(format!("{compared} layer selections identical across {} metrics × 2 scales", metrics.len()))
}

// 7 ─────────────────────────────────────────────────────────────────────────

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec_path = dir.path().join("spec.json");
    let corpus = concat!(env!("CARGO_MANIFEST_DIR"), "/data/tiny_corpus.txt");
    let spec = serde_json::json!({
        "task": {"kind": "char_lm", "corpus": corpus},
        "bits": [2, 4],
        "seeds": [0, 1],
        "pretrain": {"mode": "full_ft", "steps": 200, "peak_lr": 0.01, "eval_every": 100},
        "train": {"steps": 40, "peak_lr": 0.01, "eval_every": 20}
    });
    std::fs::write(&spec_path, spec.to_string()).unwrap();
    let run = |name: &str| -> Result<std::path::PathBuf, String> {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_giftsw"))
            .args(["sweep", "--spec"])
            .arg(&spec_path)
            .args(["--seed", "7", "--out-dir"])
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        Ok(out)
    };
    let (a, b) = (run("a")?, run("b")?);
    let read = |root: &Path, rel: &str| std::fs::read(root.join(rel)).map_err(|e| format!("{rel}: {e}"));
    let manifest: pipeline::Manifest = serde_json::from_slice(&read(&a, "manifest.json")?).map_err(|e| e.to_string())?;
    let mut archives = 0;
    for rel in manifest.artifacts.keys() {
        if read(&a, rel)? != read(&b, rel)? {
            return Err(format!("{rel} differs"));
        }
        archives += usize::from(rel.ends_with(".archive"));
    }
    for rel in ["report.json", "report.csv"] {
        if read(&a, rel)? != read(&b, rel)? {
            return Err(format!("{rel} differs"));
        }
    }
    Ok(format!("{} files byte-identical ({archives} archives)", manifest.artifacts.len()))
}

// 8 ─────────────────────────────────────────────────────────────────────────

fn desk_scale_direction() -> Outcome {
    let spec = ExperimentSpec {
        bits: vec![BitWidth::new(2).unwrap()],
        seeds: vec![0, 1, 2, 3, 4],
        ..ExperimentSpec::default()
    };
    let outcome = pipeline::sweep(&spec, None).map_err(|e| e.to_string())?;
    let mean = |r: Regime| {
        outcome
            .report
            .aggregate_for(r, 2)
            .and_then(|a| a.eval_loss_mean)
            .ok_or_else(|| format!("{} has no successful cells", r.name()))
    };
    let base = mean(Regime::BaselineFrozen)?;
    let sft = mean(Regime::SalientFtPost)?;
    let post = mean(Regime::PostGiftsw)?;
    let pre = mean(Regime::PreGiftsw)?;
    let summary = format!(
        "baseline_frozen {base:.4}, salient_ft_post {sft:.4}, post_giftsw {post:.4} (reported only: pre_giftsw {pre:.4}, fp {:.4})",
        outcome.prepared.reference.eval_loss
    );
    check(base > sft && base > post, summary.clone(), summary)
}

// 9 ─────────────────────────────────────────────────────────────────────────

fn run_steps(
    mode: TrainMode,
    start: &ParamSet,
    parts: &BTreeMap<String, SalientPartition>,
    ste: &SteScales,
    batches: &[Batch],
) -> Result<Vec<ParamSet>, String> {
    let cfg = TrainConfig {
        mode,
        steps: batches.len(),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&cfg, start, parts, None, Some(ste)).map_err(|e| e.to_string())?;
    let mut params = start.clone();
    let mut states = Vec::new();
    for (t, b) in batches.iter().enumerate() {
        trainer.step(&mut params, b, t).map_err(|e| e.to_string())?;
        states.push(params.clone());
    }
    Ok(states)
}

fn ste_consistency() -> Outcome {
    let cfg = ModelConfig {
        init_std: 0.3,
        ..ModelConfig::tiny(16)
    };
    let mut rng = SeededRng::new(99);
    let raw = init_params(&cfg, &mut rng).unwrap();
    let parts: BTreeMap<String, SalientPartition> = raw
        .eligible_names()
        .into_iter()
        .map(|n| {
            let w = raw.get(&n).unwrap().cols();
            (n, SalientPartition::none_salient(w))
        })
        .collect();
    let ste = SteScales::build(&raw, &parts, &QuantSpec::new(BitWidth::new(8).unwrap())).map_err(|e| e.to_string())?;
    let snapped = ste.quantized_view(&raw, &parts).map_err(|e| e.to_string())?;
    let exact = ste.quantized_view(&snapped, &parts).map_err(|e| e.to_string())? == snapped;
    let batches: Vec<Batch> = (0..3)
        .map(|_| {
            let seqs = random_batch(&mut rng, 4, 33, 16);
            Batch {
                inputs: seqs.iter().map(|s| s[..32].to_vec()).collect(),
                targets: seqs.iter().map(|s| s[1..].to_vec()).collect(),
            }
        })
        .collect();
    let full = run_steps(TrainMode::FullFt, &snapped, &parts, &ste, &batches)?;
    let straight = run_steps(TrainMode::Ste, &snapped, &parts, &ste, &batches)?;
    let matching = full
        .iter()
        .zip(&straight)
        .take_while(|(a, b)| a.iter().zip(b.iter()).all(|((_, x), (_, y))| x.to_le_bytes() == y.to_le_bytes()))
        .count();
    check(
        exact && matching == 3,
        "3/3 steps bit-identical".into(),
        format!("snapped grid exact under Q: {exact}; bit-identical for {matching}/3 steps"),
    )
}

// 10 ────────────────────────────────────────────────────────────────────────

fn schedule_checks() -> Outcome {
    let mut checked = 0;
    for (steps, ratio, eta) in [(200, 0.03, 1e-3), (1000, 0.03, 2e-4), (300, 0.1, 0.5), (64, 0.0625, 3.0)] {
        let cfg = TrainConfig {
            steps,
            warmup_ratio: ratio,
            peak_lr: eta,
            ..TrainConfig::default()
        };
        let w = cfg.warmup_steps();
        if (steps - w) % 2 != 0 {
            return Err(format!("T={steps}: decay phase {} has no integer midpoint", steps - w));
        }
        let at = |t| lr_at(t, &cfg).unwrap();
        if at(w) != eta {
            return Err(format!("T={steps}: lr_at(warmup_end={w}) = {} ≠ {eta}", at(w)));
        }
        if at(steps) > 1e-12 * eta {
            return Err(format!("T={steps}: lr_at(T) = {}", at(steps)));
        }
        let mid = w + (steps - w) / 2;
        if (at(mid) - eta / 2.0).abs() > 1e-12 {
            return Err(format!("T={steps}: lr_at(mid={mid}) = {}", at(mid)));
        }
        checked += 1;
    }
    Ok(format!("{checked} schedules"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 10] = [
        ("C1 gradient oracle", gradient_oracle, Duration::from_secs(60)),
        ("C2 quantizer oracle", quantizer_oracle, Duration::from_secs(30)),
        ("C3 frozen-weight invariance", frozen_weight_invariance, Duration::from_secs(120)),
        ("C4 noise statistics", noise_statistics, Duration::from_secs(30)),
        ("C5 metric-family equivalences", metric_equivalences, Duration::MAX),
        ("C6 activation-scaling invariance", activation_scaling_invariance, Duration::MAX),
        ("C7 determinism", determinism, Duration::MAX),
        ("C8 desk-scale direction (b=2)", desk_scale_direction, Duration::from_secs(600)),
        ("C9 STE/full-FT consistency", ste_consistency, Duration::MAX),
        ("C10 schedule checks", schedule_checks, Duration::MAX),
    ];
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; over time budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{:.1}s]", elapsed.as_secs_f64()),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {name}: {reason} [{:.1}s]", elapsed.as_secs_f64());
            }
        }
    }
    println!("acceptance: {}/10 passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
