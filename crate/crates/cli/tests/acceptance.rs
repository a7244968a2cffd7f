//! Acceptance criteria 1 to 9. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero if any fails.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use adacos::adaptive_scale::fixed_scale;
use adacos::analysis::{find_inflection, probability_curve, range_bounds, BModel, CurveSpec};
use adacos::eval::{roc, Pair, PairSet};
use adacos::geometry::{ClassWeightMatrix, EmbeddingBatch};
use adacos::losses::{forward, gradients, LossKind, LossSpec};
use adacos::trainer::{generate_task, train, SyntheticTask, TrainConfig};
use adacos::Matrix;
use adacos_cli::cmd_compare;
use adacos_cli::config::{load, CompareConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within_budget(start: Instant, budget: Duration, detail: String) -> Outcome {
    let took = start.elapsed();
    let detail = format!("{detail}; {:.1}s of {}s budget", took.as_secs_f64(), budget.as_secs());
    check(took < budget, detail)
}

fn criterion_1_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut draws = 0;
    let mut failures = Vec::new();
    while draws < 120 {
        let kind = LossKind::ALL[draws % 6];
        let (n, c, d) = (rng.random_range(1..=16), rng.random_range(3..=50), rng.random_range(2..=32));
        let x = Matrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = Matrix::from_fn(c, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let s = rng.random_range(1.0..32.0);
        let (spec, over) = match kind {
            LossKind::PlainSoftmax => (LossSpec::PlainSoftmax, None),
            LossKind::ScaledCosine => (LossSpec::ScaledCosine { scale: s }, None),
            LossKind::CosFaceMargin => (LossSpec::CosFaceMargin { scale: s, margin: rng.random_range(0.0..0.5) }, None),
            LossKind::ArcFaceMargin => (LossSpec::ArcFaceMargin { scale: s, margin: rng.random_range(0.0..0.8) }, None),
            LossKind::AdaCosFixed => (LossSpec::AdaCosFixed, Some(fixed_scale(c).unwrap())),
            LossKind::AdaCosDynamic => (LossSpec::AdaCosDynamic, Some(s)),
        };
        let loss = |x: &Matrix, w: &Matrix| {
            forward(
                &spec,
                &EmbeddingBatch::new(x.clone(), labels.clone()).unwrap(),
                &ClassWeightMatrix::new(w.clone()).unwrap(),
                over,
            )
            .unwrap()
            .loss
        };
        let g = gradients(
            &spec,
            &EmbeddingBatch::new(x.clone(), labels.clone()).unwrap(),
            &ClassWeightMatrix::new(w.clone()).unwrap(),
            over,
        )
        .unwrap();
        let mut draw_worst: f64 = 0.0;
        for (which, analytic) in [(0, &g.d_features), (1, &g.d_weights)] {
            let mut p = if which == 0 { x.clone() } else { w.clone() };
            for k in 0..p.as_slice().len() {
                let orig = p.as_slice()[k];
                p.as_mut_slice()[k] = orig + h;
                let up = if which == 0 { loss(&p, &w) } else { loss(&x, &p) };
                p.as_mut_slice()[k] = orig - h;
                let down = if which == 0 { loss(&p, &w) } else { loss(&x, &p) };
                p.as_mut_slice()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.as_slice()[k];
                // Floor of 1e-3 on the denominator: below it the central
                // difference is dominated by ε·|L|/h rounding.
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                draw_worst = draw_worst.max(err);
            }
        }
        if draw_worst >= 1e-5 {
            failures.push(format!("{} N={n} C={c} d={d}: {draw_worst:.2e}", spec.label()));
        }
        worst = worst.max(draw_worst);
        draws += 1;
    }
    let detail = format!("{draws} draws over 6 kinds, max relative error {worst:.2e} (< 1e-5)");
    if !failures.is_empty() {
        return Err(format!("{detail}; failing draws: {}", failures.join(", ")));
    }
    within_budget(start, Duration::from_secs(30), detail)
}

fn criterion_2_range_bound() -> Outcome {
    let upper = range_bounds(5.0, 10).unwrap().upper;
    check((upper - 0.9428).abs() <= 0.0005, format!("upper bound at s=5, C=10 is {upper:.6} (0.9428 ± 0.0005)"))
}

fn criterion_3_scale_failure_modes() -> Outcome {
    let curve = |s: f64, grid: Vec<f64>| {
        let mut spec = CurveSpec::scaled(s, 20000);
        spec.b_model = BModel::ConstantB;
        spec.theta_grid = grid;
        probability_curve(&spec).unwrap()
    };
    let small = curve(10.0, adacos::analysis::uniform_grid(512));
    let max_small = small.iter().map(|&(_, p)| p).fold(f64::NEG_INFINITY, f64::max);
    let at_zero = small[0].1;
    let large = curve(64.0, vec![0.0, 1.4]);
    let p14 = large[1].1;
    // Direct evaluation, independent of the curve code.
    let e = (64.0 * 1.4f64.cos()).exp();
    let oracle = e / (e + 19999.0);
    check(
        (at_zero - 0.524).abs() <= 0.002 && max_small == at_zero && p14 > 0.9,
        format!(
            "s=10: max P = P(0) = {at_zero:.5} (0.524 ± 0.002); s=64: P(1.4) = {p14:.5} (> 0.9; direct evaluation gives {oracle:.5})"
        ),
    )
}

fn criterion_4_fixed_scale_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    for c in [10usize, 100, 2001, 20001] {
        let spec = CurveSpec {
            kind: LossKind::AdaCosFixed,
            scale: fixed_scale(c).unwrap(),
            margin: 0.0,
            classes: c,
            b_model: BModel::ConstantB,
            theta_grid: vec![0.0, FRAC_PI_4, FRAC_PI_2],
        };
        let p = probability_curve(&spec).unwrap()[1].1;
        worst = worst.max((p - 0.5).abs());
    }
    check(worst <= 1e-12, format!("max |P(π/4) − 0.5| over C ∈ {{10, 100, 2001, 20001}} is {worst:.1e} (≤ 1e-12)"))
}

fn criterion_5_inflection() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for c in [2000usize, 20000] {
        let r = find_inflection(fixed_scale(c).unwrap(), (c - 1) as f64).unwrap();
        ok &= r.relative_error < 0.05;
        parts.push(format!("C={c}: {:.4}", r.relative_error));
    }
    check(ok, format!("relative error {} (< 0.05)", parts.join(", ")))
}

fn criterion_6_dynamic_scale() -> Outcome {
    let start = Instant::now();
    let ds = generate_task(&SyntheticTask::reference(0)).unwrap();
    let trace = train(&ds, &TrainConfig::reference(LossSpec::AdaCosDynamic, 0)).map_err(|e| e.to_string())?;
    let r = &trace.records;
    let t = r.len();
    let s0 = r[0].s_used.unwrap();
    let s_end = r[t - 1].s_used.unwrap();
    let expected_s0 = std::f64::consts::SQRT_2 * 99f64.ln();
    let (med_tenth, med_end) = (r[t / 10].theta_med, r[t - 1].theta_med);
    let noncorr_dev = r[200..]
        .iter()
        .map(|x| (x.theta_mean_noncorr - FRAC_PI_2).abs())
        .fold(0.0, f64::max);
    let ok = (s0 - expected_s0).abs() <= 1e-9 && s_end < s0 && med_end < med_tenth && noncorr_dev <= 0.2;
    let detail = format!(
        "s(0) = {s0:.9} (√2·ln 99 = {expected_s0:.9}), s(T) = {s_end:.4}; θ_med(T/10) = {med_tenth:.4}, θ_med(T) = {med_end:.4}; max |θ_noncorr − π/2| after t=200: {noncorr_dev:.4}"
    );
    if !ok {
        return Err(detail);
    }
    within_budget(start, Duration::from_secs(300), detail)
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn criterion_7_convergence_ordering() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg: CompareConfig = load(&repo_root().join("configs/compare_reference.toml")).map_err(|e| e.to_string())?;
    cfg.output_dir = tmp.path().to_path_buf();
    cfg.losses = vec![LossSpec::AdaCosDynamic, LossSpec::AdaCosFixed, LossSpec::PlainSoftmax];
    if cfg.seeds.len() != 3 || cfg.threshold != 0.9 {
        return Err("reference compare config must use 3 seeds at threshold 0.9".into());
    }
    let entries = cmd_compare(&cfg).map_err(|e| e.to_string())?;
    let med = |i: usize| entries[i].median.unwrap_or(usize::MAX);
    let show = |i: usize| {
        format!(
            "{} {:?} → {}",
            entries[i].loss,
            entries[i].per_seed,
            entries[i].median.map_or("never".into(), |m| m.to_string())
        )
    };
    let ok = entries.iter().all(|e| e.median.is_some()) && med(0) <= med(1) && med(1) <= med(2);
    let detail = format!("iterations to 90% held-out accuracy: {}; {}; {}", show(0), show(1), show(2));
    if !ok {
        return Err(detail);
    }
    within_budget(start, Duration::from_secs(900), detail)
}

fn criterion_8_roc_oracle() -> Outcome {
    let start = Instant::now();
    for set_idx in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + set_idx);
        let dim = 8;
        let pairs: Vec<Pair> = (0..1000)
            .map(|k| {
                let a: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let same = k % 2 == 0;
                let b: Vec<f64> = if same {
                    a.iter().map(|v| v + 1.2 * rng.sample::<f64, _>(StandardNormal)).collect()
                } else {
                    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
                };
                Pair { a, b, same }
            })
            .collect();
        let set = PairSet::new(pairs).unwrap();
        let levels = [1e-3, 1e-2, 1e-1];
        let report = roc(&set, &levels).unwrap();

        let score = |p: &Pair| {
            let d: f64 = p.a.iter().zip(&p.b).map(|(x, y)| x * y).sum();
            let na = p.a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = p.b.iter().map(|x| x * x).sum::<f64>().sqrt();
            (d / (na * nb)).clamp(-1.0, 1.0)
        };
        let scores: Vec<f64> = set.pairs().iter().map(score).collect();
        let mut thresholds = scores.clone();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let (np, nn) = (set.positives(), set.negatives());
        if report.points.len() != thresholds.len() + 1 {
            return Err(format!("set {set_idx}: {} points, oracle has {}", report.points.len(), thresholds.len() + 1));
        }
        let mut best = nn;
        for (pt, &t) in report.points[1..].iter().zip(&thresholds) {
            let (mut tp, mut fp) = (0usize, 0usize);
            for (pair, &s) in set.pairs().iter().zip(&scores) {
                if s >= t {
                    if pair.same {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            if pt.threshold != Some(t) || pt.tar != tp as f64 / np as f64 || pt.far != fp as f64 / nn as f64 {
                return Err(format!("set {set_idx}: mismatch at threshold {t}"));
            }
            best = best.max(tp + nn - fp);
        }
        if report.verification_accuracy != best as f64 / (np + nn) as f64 {
            return Err(format!("set {set_idx}: accuracy mismatch"));
        }
        for entry in &report.tar_at_far {
            let oracle = report
                .points
                .iter()
                .filter(|p| p.far <= entry.far_level)
                .map(|p| p.tar)
                .fold(0.0, f64::max);
            if entry.tar != oracle {
                return Err(format!("set {set_idx}: TAR@FAR {} mismatch", entry.far_level));
            }
        }
    }
    within_budget(start, Duration::from_secs(10), "10 sets of 1000 pairs match the double-loop oracle exactly".into())
}

fn criterion_9_determinism() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = repo_root().join("configs/train_reference.toml");
    let mut traces = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_adacos"))
            .arg("train")
            .arg(&config)
            .env("ADACOS_OUTPUT_DIR", &out)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("train exited with {:?}", status.status.code()));
        }
        traces.push(std::fs::read(out.join("trace.csv")).map_err(|e| e.to_string())?);
    }
    let detail = format!("two reference train runs, trace.csv {} bytes each", traces[0].len());
    if traces[0] != traces[1] {
        return Err(format!("{detail}; contents differ"));
    }
    within_budget(start, Duration::from_secs(600), detail)
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "gradient finite-difference suite", criterion_1_gradients),
        (2, "range bound at s=5, C=10", criterion_2_range_bound),
        (3, "small-s and large-s curve failure modes", criterion_3_scale_failure_modes),
        (4, "fixed-scale curve passes through (π/4, 0.5)", criterion_4_fixed_scale_identity),
        (5, "inflection approximation", criterion_5_inflection),
        (6, "dynamic-scale and angle dynamics", criterion_6_dynamic_scale),
        (7, "convergence ordering", criterion_7_convergence_ordering),
        (8, "ROC brute-force oracle", criterion_8_roc_oracle),
        (9, "train determinism", criterion_9_determinism),
    ];
    // Independent criteria run concurrently; lines print in criterion order.
    let results: Vec<Outcome> = std::thread::scope(|scope| {
        let handles: Vec<_> = criteria
            .iter()
            .map(|&(_, _, f)| scope.spawn(move || std::panic::catch_unwind(f)))
            .collect();
        handles
            .into_iter()
            .map(|h| match h.join().expect("criterion thread") {
                Ok(outcome) => outcome,
                Err(panic) => Err(format!(
                    "panicked: {}",
                    panic
                        .downcast_ref::<String>()
                        .cloned()
                        .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                        .unwrap_or_default()
                )),
            })
            .collect()
    });

    let mut failed = 0;
    for ((n, name, _), outcome) in criteria.iter().zip(&results) {
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
