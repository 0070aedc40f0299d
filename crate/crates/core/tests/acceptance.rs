//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to the
//! real stderr (bypassing the harness capture) and then asserts.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use mgicnn::evaluation::{confusion_counts, cpm_average, froc, sensitivity_at, Confusion, FrocCurve, FrocPoint, CPM_FPS};
use mgicnn::experiment::{run_synthetic, ExperimentConfig};
use mgicnn::model::{Model, ModelConfig, Variant};
use mgicnn::nn::kernels::conv3d_forward;
use mgicnn::nn::{softmax, Tensor};
use mgicnn::patching::{enumerate_augmentations, AUGMENTATIONS_PER_NODULE};
use mgicnn::synthetic::{generate, SyntheticSpec};
use mgicnn::training::{check_gradients, make_folds, stream_len};
use mgicnn::volume_io::Candidate;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Serialises the criteria so each runtime is measured without contention.
static SERIAL: Mutex<()> = Mutex::new(());

/// Experiment results per (variant, seed), shared by the experiment criteria.
static RUNS: Mutex<BTreeMap<(&'static str, u64), RunSummary>> = Mutex::new(BTreeMap::new());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: usize, name: &str, ok: bool, detail: &str) {
    let tag = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] criterion {n}: {name} -- {detail}");
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

#[test]
fn criterion_1_augmentation_arithmetic() {
    let _g = serial();
    let t = Instant::now();
    let mut spec = SyntheticSpec {
        num_scans: 1,
        ..SyntheticSpec::default()
    };
    spec.seed = 1;
    let data = generate(&spec).unwrap();
    let nodule = data.candidates.iter().find(|c| c.is_nodule()).unwrap();
    let aug = enumerate_augmentations(&data.volumes[0], nodule).unwrap();
    let table = [(1_205, 97_605), (1_262, 102_222), (1_260, 102_060), (1_217, 98_577), (1_284, 104_004)];
    let cells_ok = table
        .iter()
        .all(|&(nodules, augmented)| stream_len(nodules, 0) - nodules == augmented && AUGMENTATIONS_PER_NODULE * nodules == augmented);
    let elapsed = t.elapsed();
    let ok = aug.len() == 81 && cells_ok && elapsed < Duration::from_secs(1);
    verdict(
        1,
        "augmentation arithmetic",
        ok,
        &format!("{} samples per nodule, 5/5 fold cells {} in {}", aug.len(), if cells_ok { "match" } else { "DIFFER" }, secs(elapsed)),
    );
}

#[test]
fn criterion_2_cpm_arithmetic() {
    let _g = serial();
    let t = Instant::now();
    let rows = [
        ([0.904, 0.931, 0.943, 0.947, 0.952, 0.956, 0.962], 0.942),
        ([0.880, 0.894, 0.907, 0.912, 0.914, 0.919, 0.927], 0.908),
    ];
    let mut detail = Vec::new();
    let mut ok = true;
    for (sens, want) in rows {
        // through a curve whose operating points sit on the CPM abscissae
        let curve = FrocCurve {
            points: CPM_FPS
                .iter()
                .zip(sens)
                .map(|(&f, s)| FrocPoint {
                    fp_per_scan: f,
                    sensitivity: s,
                    threshold: 0.5,
                })
                .collect(),
            num_scans: 1,
            num_gt: 1,
        };
        let read = CPM_FPS.map(|f| sensitivity_at(&curve, f));
        let avg = cpm_average(&read);
        ok &= read == sens && (avg - want).abs() <= 0.0005 && (cpm_average(&sens) - want).abs() <= 0.0005;
        detail.push(format!("{avg:.4} vs {want}"));
    }
    ok &= t.elapsed() < Duration::from_secs(1);
    verdict(2, "CPM arithmetic", ok, &detail.join(", "));
}

#[test]
fn criterion_3_parameter_parity() {
    let _g = serial();
    let t = Instant::now();
    let counts: BTreeMap<&str, usize> = Variant::ALL
        .iter()
        .map(|&v| (v.as_str(), Model::<f32>::build(ModelConfig::default_for(v)).unwrap().count_parameters()))
        .collect();
    let max = *counts.values().max().unwrap() as f64;
    let min = *counts.values().min().unwrap() as f64;
    let spread = (max - min) / max;
    let mgi = counts["MGI"] as f64;
    let band = (mgi - 9_472_000.0).abs() / 9_472_000.0;
    let elapsed = t.elapsed();
    let ok = spread <= 0.005 && band <= 0.05 && counts["ZI"] == counts["ZO"] && elapsed < Duration::from_secs(10);
    verdict(
        3,
        "parameter-count parity",
        ok,
        &format!(
            "{counts:?}, spread {:.3}%, MGI off reference by {:.3}%, {}",
            spread * 100.0,
            band * 100.0,
            secs(elapsed)
        ),
    );
}

#[test]
fn criterion_4_gradient_correctness() {
    let _g = serial();
    let t = Instant::now();
    let tiny = |v| ModelConfig {
        stage_channels: vec![2, 3, 4],
        head_channels: vec![4],
        fc_widths: vec![8],
        ..ModelConfig::small(v)
    };
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for (v, seed) in [(Variant::Mgi, 21), (Variant::Ri, 22)] {
        for c in check_gradients(tiny(v), seed, 2, 60, 1e-5).unwrap() {
            worst = worst.max(c.relative_error(1e-8));
            n += 1;
        }
    }
    let elapsed = t.elapsed();
    let ok = n >= 100 && worst < 1e-4 && elapsed < Duration::from_secs(120);
    verdict(
        4,
        "gradient correctness",
        ok,
        &format!("{n} parameters, worst relative error {worst:.2e}, {}", secs(elapsed)),
    );
}

#[test]
fn criterion_5_froc_oracle_equivalence() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    let instances = 1000;
    for _ in 0..instances {
        let (preds, gt, scans) = common::random_instance(&mut rng);
        let curve = froc(&preds, &gt, scans).unwrap();
        let got: Vec<(f64, f64, f64)> = curve.points.iter().map(|p| (p.fp_per_scan, p.sensitivity, p.threshold)).collect();
        let mut same = got == common::brute_froc(&preds, &gt, scans);
        for th in [0.1, 0.5, 0.9] {
            let (tp, fp) = common::brute_counts(&preds, &gt, th);
            same &= confusion_counts(&preds, &gt, th).unwrap() == Confusion { tp_in_gt: tp, fp, fn_: gt.len() - tp };
        }
        mismatches += usize::from(!same);
    }
    let elapsed = t.elapsed();
    verdict(
        5,
        "FROC/CPM oracle equivalence",
        mismatches == 0 && elapsed < Duration::from_secs(60),
        &format!("{instances} instances, {mismatches} mismatches, {}", secs(elapsed)),
    );
}

#[derive(Debug, Clone, Copy)]
struct RunSummary {
    cpm: f64,
    sensitivity_at_one: f64,
    parameters: usize,
    epochs: usize,
    elapsed: Duration,
}

/// Held-out results of the default synthetic experiment for `variant` and
/// `seed`; each configuration runs once per test binary.
fn experiment(variant: Variant, seed: u64) -> RunSummary {
    let key = (variant.as_str(), seed);
    if let Some(&r) = RUNS.lock().unwrap().get(&key) {
        return r;
    }
    let mut cfg = ExperimentConfig {
        model: ModelConfig::small(variant),
        ..ExperimentConfig::default()
    };
    cfg.synthetic.seed = seed;
    cfg.train.seed = seed;
    let t = Instant::now();
    let out = run_synthetic(&cfg).unwrap();
    let r = RunSummary {
        cpm: out.report.cpm.average,
        sensitivity_at_one: sensitivity_at(&out.curve, 1.0),
        parameters: out.num_parameters,
        epochs: cfg.train.epochs,
        elapsed: t.elapsed(),
    };
    RUNS.lock().unwrap().insert(key, r);
    r
}

#[test]
fn criterion_6_end_to_end_synthetic() {
    let _g = serial();
    let r = experiment(Variant::Mgi, 0);
    let ok = r.cpm >= 0.90
        && r.sensitivity_at_one >= 0.95
        && r.parameters <= 200_000
        && r.epochs <= 10
        && r.elapsed <= Duration::from_secs(15 * 60);
    verdict(
        6,
        "end-to-end synthetic experiment",
        ok,
        &format!(
            "CPM {:.4}, sensitivity at 1 FP/scan {:.4}, {} parameters, {} epochs, {}",
            r.cpm,
            r.sensitivity_at_one,
            r.parameters,
            r.epochs,
            secs(r.elapsed)
        ),
    );
}

#[test]
fn criterion_7_ablation_ordering_probe() {
    let _g = serial();
    let seeds = [0u64, 1, 2, 3, 4];
    let mut rows = Vec::new();
    for v in [Variant::Mgi, Variant::Ri] {
        let cpms: Vec<f64> = seeds.iter().map(|&s| experiment(v, s).cpm).collect();
        rows.push((v, cpms.iter().sum::<f64>() / cpms.len() as f64, cpms));
    }
    let (mgi, ri) = (rows[0].1, rows[1].1);
    let ordered = mgi >= ri;
    let report = serde_json::json!({
        "seeds": seeds,
        "MGI": { "mean_cpm": mgi, "cpm": rows[0].2 },
        "RI": { "mean_cpm": ri, "cpm": rows[1].2 },
        "ordering_holds": ordered,
    });
    let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("ablation_report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report).unwrap()).unwrap();
    // soft criterion: an inverted ordering is flagged, not failed
    let detail = format!(
        "mean CPM MGI {mgi:.4} vs RI {ri:.4} over {} seeds{}; report {}",
        seeds.len(),
        if ordered { "" } else { " -- ORDERING INVERTED, flagged for investigation" },
        path.display()
    );
    verdict(7, "ablation ordering probe", true, &detail);
}

#[test]
fn criterion_8_determinism() {
    let _g = serial();
    let t = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    common::quick_pipeline(a.path());
    common::quick_pipeline(b.path());
    let da = common::artifact_digests(a.path());
    let db = common::artifact_digests(b.path());
    let ckpts = da.iter().filter(|(p, _)| p.ends_with(".ckpt")).count();
    let csvs = da.iter().filter(|(p, _)| p.ends_with(".csv")).count();
    let differing: Vec<&String> = da.iter().zip(&db).filter(|(x, y)| x != y).map(|(x, _)| &x.0).collect();
    let ok = da.len() == db.len() && differing.is_empty() && ckpts == 5 && csvs >= 9;
    verdict(
        8,
        "determinism",
        ok,
        &format!(
            "{} artifacts ({ckpts} checkpoints, {csvs} CSVs) compared, {} differ, {}",
            da.len(),
            differing.len(),
            secs(t.elapsed())
        ),
    );
}

#[test]
fn criterion_9_invariant_suite() {
    let _g = serial();
    let mut results = Vec::new();

    let mut runner = TestRunner::new(Config::with_cases(64));
    let padding = runner.run(&(1usize..4, 1usize..9, 1usize..9, 1usize..9, 1usize..4, prop::sample::select(vec![1usize, 3, 5]), any::<u64>()), |(cin, d, h, w, cout, k, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_vec([cin, d, h, w], (0..cin * d * h * w).map(|_| rand::Rng::gen_range(&mut rng, -1.0f32..1.0)).collect());
        let wt: Vec<f32> = (0..cout * cin * k * k * k).map(|_| rand::Rng::gen_range(&mut rng, -1.0f32..1.0)).collect();
        let y = conv3d_forward(&x, &wt, &vec![0.0; cout], cout, k);
        prop_assert_eq!(y.spatial(), [d, h, w]);
        prop_assert_eq!(y.channels(), cout);
        Ok(())
    });
    results.push(("zero-padding keeps spatial size", padding.is_ok()));

    let mut runner = TestRunner::new(Config::with_cases(256));
    let soft = runner.run(&prop::collection::vec(-80.0f64..80.0, 2..8), |logits| {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        Ok(())
    });
    results.push(("softmax normalisation", soft.is_ok()));

    let mut runner = TestRunner::new(Config::with_cases(256));
    let mono = runner.run(&any::<u64>(), |seed| {
        let (preds, gt, scans) = common::random_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        let c = froc(&preds, &gt, scans).unwrap();
        prop_assert!(c.check_invariants().is_ok());
        let s = CPM_FPS.map(|f| sensitivity_at(&c, f));
        prop_assert!(s.windows(2).all(|w| w[0] <= w[1]));
        Ok(())
    });
    results.push(("FROC monotonicity", mono.is_ok()));

    let mut runner = TestRunner::new(Config::with_cases(128));
    let leak = runner.run(&(5usize..40, 2usize..6, 1usize..6, any::<u64>()), |(n, k, per, seed)| {
        prop_assume!(k <= n);
        let ids: Vec<String> = (0..n).map(|i| format!("scan-{i}")).collect();
        let cands: Vec<Candidate> = ids
            .iter()
            .flat_map(|s| (0..per).map(move |j| Candidate::new(s.as_str(), [j as f64, 0.0, 0.0], None)))
            .collect();
        let plan = make_folds(&ids, k, seed).unwrap();
        prop_assert!(plan.check_no_leakage(&cands).is_ok());
        for f in &plan.folds {
            let train: std::collections::BTreeSet<&str> = f.train_candidates(&cands).iter().map(|c| c.series_id.as_str()).collect();
            prop_assert!(f.test_candidates(&cands).iter().all(|c| !train.contains(c.series_id.as_str())));
        }
        // a plan that tests one scan twice is caught
        let mut bad = plan.clone();
        let dup = bad.folds[0].test.iter().next().unwrap().clone();
        bad.folds[1].test.insert(dup);
        prop_assert!(bad.check_no_leakage(&cands).is_err());
        Ok(())
    });
    results.push(("scan-level fold leakage", leak.is_ok()));

    let ok = results.iter().all(|r| r.1);
    let detail = results
        .iter()
        .map(|(n, ok)| format!("{n}: {}", if *ok { "green" } else { "RED" }))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(9, "invariant suite", ok, &detail);
}
