//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs with a plain `main` so every line is printed even when
//! everything passes.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;

use cpls_core::calibration::{ece, reliability_bins};
use cpls_core::data::{
    generate_confusable_blobs, stratified_split_indices, BlobSpec, LabeledDataset, SplitSpec,
};
use cpls_core::math::{finite_difference_gradient, softmax, Matrix, RngSeed};
use cpls_core::par::Execution;
use cpls_core::runner::{
    cmd_compare, prepare_data, run_grid, summarize, ExperimentConfig, PreparedData,
};
use cpls_core::smoothing::{
    cpls_ce, hard_ce, hybrid_loss, hybrid_target, soft_ce, vanilla_ls_target, ConfusionTracker,
    Phase, TargetStrategy,
};
use cpls_core::trainer::{
    batch_gradient, fit, init_params, predict_proba, train_epoch, MlpConfig, Objective,
    StrategyState, TrainConfig,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure(
        (a - b).abs() <= tol,
        format!("{what}: {a} vs {b} (|diff| {:e} > {tol:e})", (a - b).abs()),
    )
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// 1 ------------------------------------------------------------------------

/// `0.925·(−ln 0.7) + 0.075·(−ln 0.1)`, evaluated once and frozen.
const VANILLA_ORACLE: f64 = 0.502_618_205_1;

fn loss_oracles() -> Check {
    let uniform = vec![0.125; 8];
    close(
        ok(hard_ce(&uniform, 3))?,
        8f64.ln(),
        1e-12,
        "hard CE of uniform",
    )?;

    let p = [0.7, 0.1, 0.1, 0.1];
    let target = ok(vanilla_ls_target(0, 0.1, 4))?;
    let vanilla = ok(soft_ce(&p, target.probs()))?;
    close(vanilla, VANILLA_ORACLE, 1e-6, "vanilla soft CE")?;

    let mut tracker = ConfusionTracker::new(4);
    ok(tracker.accumulate_counts(&ok(Matrix::from_rows(&[
        [3.0, 1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]))?))?;
    tracker.normalize();
    let h = ok(hard_ce(&p, 0))?;
    let c = ok(cpls_ce(&p, &tracker, 0))?;
    let mid = ok(hybrid_loss(&p, 0, &tracker, 0.5))?;
    close(mid, (h + c) / 2.0, 1e-12, "hybrid midpoint")?;
    Ok(format!("ln 8, vanilla {vanilla:.10}, hybrid {mid:.10}"))
}

// 2 ------------------------------------------------------------------------

fn random_probs(rng: &mut impl Rng, c: usize) -> Vec<f64> {
    let z: Vec<f64> = (0..c).map(|_| rng.gen_range(-4.0..4.0)).collect();
    softmax(&z).expect("finite logits")
}

fn acceptance_data(seed: u64) -> Result<PreparedData, String> {
    ok(prepare_data(&ExperimentConfig::default(), RngSeed(seed)))
}

fn equivalence_identities() -> Check {
    let mut rng = RngSeed(2).rng();
    let identity = ConfusionTracker::new(8);
    let mut tracker = ConfusionTracker::new(8);
    let counts: Vec<f64> = (0..64).map(|_| rng.gen_range(0..6) as f64).collect();
    ok(tracker.accumulate_counts(&ok(Matrix::from_vec(8, 8, counts))?))?;
    tracker.normalize();
    for _ in 0..200 {
        let p = random_probs(&mut rng, 8);
        let y = rng.gen_range(0..8);
        let hard = ok(hard_ce(&p, y))?;
        ensure(
            ok(cpls_ce(&p, &identity, y))? == hard,
            "CPLS with identity tracker differs from hard CE",
        )?;
        let t = ok(vanilla_ls_target(y, 0.0, 8))?;
        ensure(
            ok(soft_ce(&p, t.probs()))? == hard,
            "vanilla with alpha 0 differs from hard CE",
        )?;
        ensure(
            ok(hybrid_loss(&p, y, &tracker, 1.0))? == hard,
            "hybrid at beta 1 differs from hard CE",
        )?;
        ensure(
            ok(hybrid_loss(&p, y, &tracker, 0.0))? == ok(cpls_ce(&p, &tracker, y))?,
            "hybrid at beta 0 differs from CPLS CE",
        )?;
    }

    let data = acceptance_data(1)?;
    let mlp = MlpConfig::new(data.train.dimension(), &[32], data.train.num_classes());
    let epochs = 10;
    let hard_cfg = TrainConfig {
        epochs,
        strategy: TargetStrategy::Hard,
        seed: RngSeed(1),
        ..TrainConfig::default()
    };
    let init = ok(init_params(&mlp, hard_cfg.seed.derive("init")))?;
    for warmup_epochs in [epochs, 50] {
        let cpls_cfg = TrainConfig {
            strategy: TargetStrategy::Cpls {
                beta: 0.5,
                warmup_epochs,
            },
            ..hard_cfg.clone()
        };
        let (mut a, mut b) = (init.clone(), init.clone());
        let (mut sa, mut sb) = (StrategyState::new(8), StrategyState::new(8));
        for epoch in 1..=epochs {
            ok(train_epoch(&mut a, &data.train, &mut sa, &hard_cfg, epoch))?;
            ok(train_epoch(&mut b, &data.train, &mut sb, &cpls_cfg, epoch))?;
            ensure(
                a.same_weights(&b),
                format!("N={warmup_epochs}: trajectories split at epoch {epoch}"),
            )?;
        }
        let fa = ok(fit(&data.train, &data.val, &mlp, &hard_cfg))?;
        let fb = ok(fit(&data.train, &data.val, &mlp, &cpls_cfg))?;
        ensure(
            fa.params.same_weights(&fb.params) && fa.metrics == fb.metrics,
            format!("N={warmup_epochs}: fitted runs differ"),
        )?;
    }
    Ok("loss identities bit-exact; N>=epochs trajectory equals Hard".into())
}

// 3 ------------------------------------------------------------------------

fn gradient_suite() -> Check {
    let started = Instant::now();
    let data = acceptance_data(3)?;
    let c = data.train.num_classes();
    ensure(c == 8, format!("expected 8 classes, got {c}"))?;
    let mlp = MlpConfig::new(data.train.dimension(), &[6, 5], c);
    let params = ok(init_params(&mlp, RngSeed(3)))?;

    // Mature, non-trivial state for the soft strategies.
    let mut state = StrategyState::new(c);
    let mut rng = RngSeed(33).rng();
    for _ in 0..60 {
        let y = rng.gen_range(0..c);
        let pred = if rng.gen_bool(0.6) {
            y
        } else {
            rng.gen_range(0..c)
        };
        ok(state.tracker.accumulate(y, pred))?;
        ok(state.ols.update(&random_probs(&mut rng, c), y))?;
    }
    state.tracker.normalize();
    state.ols.end_epoch();

    let batch: Vec<usize> = (0..5).collect();
    let cases = [
        (TargetStrategy::Hard, Phase::Warmup),
        (TargetStrategy::vanilla(), Phase::Warmup),
        (TargetStrategy::ols(), Phase::Hybrid),
        (TargetStrategy::cpls(), Phase::Hybrid),
    ];
    let mut worst: f64 = 0.0;
    for (strategy, phase) in cases {
        let objective = Objective::new(strategy, phase, &state);
        let analytic = ok(batch_gradient(
            &params,
            &data.train,
            &batch,
            &objective,
            Execution::Sequential,
        ))?
        .gradient
        .to_flat();
        let loss = |flat: &[f64]| {
            let mut q = params.clone();
            q.set_flat(flat).expect("same shape");
            batch_gradient(&q, &data.train, &batch, &objective, Execution::Sequential)
                .expect("valid batch")
                .mean_loss
        };
        let numeric = ok(finite_difference_gradient(loss, &params.to_flat(), 1e-5))?;
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
            worst = worst.max(rel);
            ensure(rel < 1e-5, format!("{strategy}: param {i}: {a} vs {n}"))?;
        }
    }

    // With no hidden layer, the bias gradient of one sample is exactly the
    // logit gradient, which must equal p − target.
    let mut rng = RngSeed(34).rng();
    for case in 0..100 {
        let c = rng.gen_range(2..=8);
        let d = rng.gen_range(1..=5);
        let linear = MlpConfig::new(d, &[], c);
        let p0 = ok(init_params(&linear, RngSeed(case)))?;
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y = rng.gen_range(0..c);
        let one = ok(LabeledDataset::new(
            ok(Matrix::from_vec(1, d, x.clone()))?,
            vec![y],
            c,
        ))?;

        let mut state = StrategyState::new(c);
        let counts: Vec<f64> = (0..c * c).map(|_| rng.gen_range(0..9) as f64).collect();
        ok(state
            .tracker
            .accumulate_counts(&ok(Matrix::from_vec(c, c, counts))?))?;
        state.tracker.normalize();
        let beta = rng.gen::<f64>();
        let strategy = TargetStrategy::Cpls {
            beta,
            warmup_epochs: 0,
        };
        let objective = Objective::new(strategy, Phase::Hybrid, &state);
        let out = ok(batch_gradient(
            &p0,
            &one,
            &[0],
            &objective,
            Execution::Sequential,
        ))?;
        let p = ok(predict_proba(&p0, &x))?;
        let target = ok(hybrid_target(&state.tracker, y, beta))?;
        let bias_grad = &out.gradient.to_flat()[c * d..];
        for k in 0..c {
            close(
                bias_grad[k],
                p[k] - target.probs()[k],
                1e-12,
                &format!("case {case}, class {k}"),
            )?;
        }
    }
    let elapsed = started.elapsed();
    ensure(
        elapsed.as_secs_f64() < 10.0,
        format!("took {elapsed:?}, budget 10 s"),
    )?;
    Ok(format!(
        "worst FD relative error {worst:.2e}; 100 p-target cases; {elapsed:.2?}"
    ))
}

// 4 ------------------------------------------------------------------------

/// Direct-summation ECE written independently of the library.
fn ece_by_hand(probs: &[Vec<f64>], labels: &[usize], n: usize) -> f64 {
    let total = labels.len() as f64;
    let mut sum = 0.0;
    for m in 0..n {
        let lo = m as f64 / n as f64;
        let hi = (m + 1) as f64 / n as f64;
        let mut members = Vec::new();
        for (row, &y) in probs.iter().zip(labels) {
            let mut pred = 0;
            for k in 1..row.len() {
                if row[k] > row[pred] {
                    pred = k;
                }
            }
            let conf = row[pred];
            let inside = if m == 0 {
                conf >= lo && conf <= hi
            } else {
                conf > lo && conf <= hi
            };
            if inside {
                members.push((conf, pred == y));
            }
        }
        if members.is_empty() {
            continue;
        }
        let k = members.len() as f64;
        let conf = members.iter().map(|m| m.0).sum::<f64>() / k;
        let acc = members.iter().filter(|m| m.1).count() as f64 / k;
        sum += k / total * (acc - conf).abs();
    }
    sum
}

fn ece_oracle() -> Check {
    let four = ok(Matrix::from_rows(&[
        [0.9, 0.1],
        [0.8, 0.2],
        [0.6, 0.4],
        [0.55, 0.45],
    ]))?;
    let hand = ok(ece(&four, &[0, 1, 0, 1], 10))?;
    close(hand, 0.2625, 1e-12, "four-sample ECE")?;

    let mut rng = RngSeed(4).rng();
    for case in 0..200 {
        let len = rng.gen_range(1..=20);
        let c = rng.gen_range(2..=6);
        let n = rng.gen_range(1..=10);
        let rows: Vec<Vec<f64>> = (0..len)
            .map(|_| {
                // Some rows land exactly on bin edges.
                if rng.gen_bool(0.2) {
                    let top = rng.gen_range(1..=n) as f64 / n as f64;
                    let top = top.max(1.0 / c as f64);
                    let mut row = vec![(1.0 - top) / (c - 1) as f64; c];
                    row[rng.gen_range(0..c)] = top;
                    row
                } else {
                    random_probs(&mut rng, c)
                }
            })
            .collect();
        let labels: Vec<usize> = (0..len).map(|_| rng.gen_range(0..c)).collect();
        let probs = ok(Matrix::from_rows(&rows))?;
        let lib = ok(ece(&probs, &labels, n))?;
        close(
            lib,
            ece_by_hand(&rows, &labels, n),
            1e-12,
            &format!("case {case}"),
        )?;

        let single = ok(reliability_bins(&probs, &labels, 1))?;
        let b = &single.bins[0];
        close(
            ok(ece(&probs, &labels, 1))?,
            (b.accuracy - b.mean_confidence).abs(),
            1e-12,
            &format!("case {case}, n=1"),
        )?;
    }
    Ok(format!(
        "0.2625 case gives {hand}; 200 random instances agree"
    ))
}

// 5 ------------------------------------------------------------------------

fn confusion_tracker() -> Check {
    let mut rng = RngSeed(5).rng();
    for trial in 0..100 {
        let c = rng.gen_range(2..=10);
        let mut tracker = ConfusionTracker::new(c);
        for _ in 0..rng.gen_range(0..4) {
            for _ in 0..rng.gen_range(0..3 * c) {
                // Skewed towards low classes so some rows stay empty.
                let y = rng.gen_range(0..c).min(rng.gen_range(0..c));
                ok(tracker.accumulate(y, rng.gen_range(0..c)))?;
            }
            let counts = tracker.counts().clone();
            tracker.normalize();
            for y in 0..c {
                let row = ok(tracker.row(y))?;
                close(
                    row.iter().sum(),
                    1.0,
                    1e-12,
                    &format!("trial {trial}, row {y}"),
                )?;
                if counts.row(y).iter().all(|&v| v == 0.0) {
                    ensure(
                        row.iter()
                            .enumerate()
                            .all(|(k, &v)| v == if k == y { 1.0 } else { 0.0 }),
                        format!("trial {trial}: empty row {y} is not the identity row"),
                    )?;
                }
            }
        }
    }
    let mut t = ConfusionTracker::new(4);
    for pred in [0, 0, 0, 1] {
        ok(t.accumulate(0, pred))?;
    }
    t.normalize();
    ensure(
        ok(t.row(0))? == [0.75, 0.25, 0.0, 0.0],
        format!("row [3,1,0,0] normalized to {:?}", ok(t.row(0))?),
    )?;
    Ok("row sums 1 over 100 sequences; [3,1,0,0] -> [0.75,0.25,0,0]".into())
}

// 6 and 7 ------------------------------------------------------------------

fn directional_and_confusion_mass() -> (Check, Check) {
    let started = Instant::now();
    let grid = (|| {
        let config = ok(ExperimentConfig::parse(
            "strategies = hard,cpls",
            std::path::Path::new(""),
        ))?;
        let outcomes = ok(run_grid(&config, Execution::default()))?;
        Ok::<_, String>((summarize(&config, &outcomes), outcomes))
    })();
    let (summaries, outcomes) = match grid {
        Ok(v) => v,
        Err(e) => return (Err(e.clone()), Err(e)),
    };
    let elapsed = started.elapsed();

    let (hard, cpls) = (&summaries[0], &summaries[1]);
    let directional = (|| {
        ensure(
            cpls.median_ece <= hard.median_ece,
            format!(
                "median ECE x100: CPLS {:.3} > Hard {:.3}",
                100.0 * cpls.median_ece,
                100.0 * hard.median_ece
            ),
        )?;
        ensure(
            cpls.median_accuracy >= hard.median_accuracy - 0.02,
            format!(
                "median accuracy: CPLS {:.4} < Hard {:.4} - 0.02",
                cpls.median_accuracy, hard.median_accuracy
            ),
        )?;
        Ok(format!(
            "median ECE x100 CPLS {:.3} vs Hard {:.3}; median acc CPLS {:.4} vs Hard {:.4}; {elapsed:.2?}",
            100.0 * cpls.median_ece,
            100.0 * hard.median_ece,
            cpls.median_accuracy,
            hard.median_accuracy
        ))
    })();

    let mass = (|| {
        let mut hits = 0;
        let mut total = 0;
        for run in outcomes.iter().filter(|o| o.spec.label == "cpls") {
            total += 1;
            let row = ok(run.tracker.row(0))?;
            let others = row[4..8].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if row[1] > others {
                hits += 1;
            }
        }
        ensure(
            hits >= 8,
            format!("row 0 favours class 1 in {hits}/{total} seeds"),
        )?;
        Ok(format!(
            "row 0 favours class 1 over classes 4-7 in {hits}/{total} seeds"
        ))
    })();
    (directional, mass)
}

// 8 ------------------------------------------------------------------------

fn split_protocol() -> Check {
    let spec = ok(BlobSpec::new(8, 100, 16, 1.0, vec![(0, 1), (2, 3)]))?;
    let ds = ok(generate_confusable_blobs(&spec, RngSeed(8)))?;
    let split = SplitSpec::default();
    for trial in 0..50 {
        let seed = RngSeed(1000 + trial);
        let idx = ok(stratified_split_indices(&ds, &split, seed))?;
        ensure(
            idx == ok(stratified_split_indices(&ds, &split, seed))?,
            format!("trial {trial}: not deterministic"),
        )?;
        for (part, want) in [(&idx.train, 70), (&idx.val, 15), (&idx.test, 15)] {
            let mut per_class = [0usize; 8];
            for &i in part {
                per_class[ds.labels()[i]] += 1;
            }
            ensure(
                per_class.iter().all(|&n| n == want),
                format!("trial {trial}: per-class sizes {per_class:?}, want {want}"),
            )?;
        }
        let mut all: Vec<usize> = [&idx.train[..], &idx.val[..], &idx.test[..]].concat();
        all.sort_unstable();
        ensure(
            all == (0..ds.len()).collect::<Vec<_>>(),
            format!("trial {trial}: parts are not a partition"),
        )?;
    }
    Ok("70/15/15 per class; partition and determinism over 50 trials".into())
}

// 9 ------------------------------------------------------------------------

fn end_to_end_determinism() -> Check {
    let dir = ok(tempfile::tempdir())?;
    let config = ok(ExperimentConfig::parse(
        "data.samples_per_class = 40\n\
         train.epochs = 8\n\
         strategies = hard,vanilla,ols,cpls\n\
         seeds = 1,2,3",
        std::path::Path::new(""),
    ))?;
    let a = ok(cmd_compare(&config, &dir.path().join("a")))?;
    let b = ok(cmd_compare(&config, &dir.path().join("b")))?;
    let (ca, cb) = (ok(fs::read(&a.csv_path))?, ok(fs::read(&b.csv_path))?);
    ensure(ca == cb, "comparison.csv differs between runs")?;
    Ok(format!("two compare runs, {} identical bytes", ca.len()))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let (directional, mass) = directional_and_confusion_mass();
    let results: Vec<(&str, Check)> = vec![
        ("loss oracles", loss_oracles()),
        ("equivalence identities", equivalence_identities()),
        ("gradient suite", gradient_suite()),
        ("ECE oracle", ece_oracle()),
        ("confusion tracker", confusion_tracker()),
        ("directional trend, CPLS vs Hard", directional),
        ("confusion mass on class 1", mass),
        ("split protocol", split_protocol()),
        ("end-to-end determinism", end_to_end_determinism()),
    ];
    let mut failed = 0;
    for (i, (name, result)) in results.iter().enumerate() {
        match result {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{} passed in {:.2?}",
        results.len() - failed,
        results.len(),
        started.elapsed()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
