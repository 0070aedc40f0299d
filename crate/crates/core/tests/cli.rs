mod common;

use std::collections::BTreeSet;
use std::fs;

use common::{code, quick_config, run};
use mgicnn::evaluation::{read_ground_truth, read_predictions, write_predictions};
use mgicnn::model::{Model, Variant};
use mgicnn::volume_io::{read_candidates, write_candidates, Candidate, Label};

fn path_arg(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn default_synth_writes_forty_scans() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = run(&["--data-dir", path_arg(&data), "synth"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mhd = fs::read_dir(data.join("volumes"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "mhd"))
        .count();
    assert_eq!(mhd, 40);
    let cands = read_candidates(data.join("candidates.csv")).unwrap();
    assert_eq!(cands.len(), 40 * 18);
    assert_eq!(read_ground_truth(data.join("annotations.csv")).unwrap().len(), 120);
    assert!(data.join("synth.config.toml").exists());
}

#[test]
fn synth_into_invalid_dir_fails_without_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let target = blocker.join("data");
    let o = run(&["--data-dir", path_arg(&target), "synth", "--num-scans", "2"]);
    assert_ne!(code(&o), 0);
    assert!(!target.join("candidates.csv").exists());
    assert!(!target.join("annotations.csv").exists());
}

#[test]
fn synth_is_reproducible_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let digest = |name: &str, seed: &str| {
        let d = dir.path().join(name);
        let o = run(&["--seed", seed, "--data-dir", path_arg(&d), "synth", "--num-scans", "3"]);
        assert_eq!(code(&o), 0);
        common::artifact_digests(&d)
    };
    let a = digest("a", "7");
    assert_eq!(a, digest("b", "7"));
    assert_ne!(a, digest("c", "8"));
    // worker count does not change the dataset
    let d = dir.path().join("w");
    assert_eq!(code(&run(&["--seed", "7", "--workers", "3", "--data-dir", path_arg(&d), "synth", "--num-scans", "3"])), 0);
    assert_eq!(a, common::artifact_digests(&d));
}

#[test]
fn extract_reports_degenerate_and_missing_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let c = path_arg(&cfg);
    assert_eq!(code(&run(&["--config", c, "synth"])), 0);
    let o = run(&["--config", c, "extract"]);
    assert_eq!(code(&o), 0);
    let cands = read_candidates(dir.path().join("data/candidates.csv")).unwrap();
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains(&format!("{} candidates, {} records", cands.len(), cands.len())), "{stdout}");

    let cache = dir.path().join("cache/patches.bin");
    let before = (fs::read(&cache).unwrap(), fs::metadata(&cache).unwrap().modified().unwrap());
    let o = run(&["--workers", "2", "--config", c, "extract"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("cache unchanged"));
    assert_eq!(before, (fs::read(&cache).unwrap(), fs::metadata(&cache).unwrap().modified().unwrap()));

    let mut extra = cands.clone();
    extra.push(Candidate::new(&cands[0].series_id, [5000.0, 0.0, 0.0], Some(Label::NonNodule)));
    write_candidates(dir.path().join("data/candidates.csv"), &extra).unwrap();
    let o = run(&["--config", c, "extract"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("degenerate"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("1 degenerate"));

    extra.push(Candidate::new("no-such-series", [0.0; 3], Some(Label::NonNodule)));
    write_candidates(dir.path().join("data/candidates.csv"), &extra).unwrap();
    let o = run(&["--config", c, "extract"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no-such-series"));
    assert!(String::from_utf8_lossy(&o.stdout).contains(&format!("{} records", cands.len())));
}

#[test]
fn closed_pipeline_covers_every_candidate_once() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::quick_pipeline(dir.path());
    let runs = dir.path().join("runs");
    let cands = read_candidates(dir.path().join("data/candidates.csv")).unwrap();
    let mut seen = Vec::new();
    for k in 0..5 {
        let preds = read_predictions(runs.join(format!("fold-{k}/predictions.csv"))).unwrap();
        let series: BTreeSet<&str> = preds.iter().map(|p| p.series_id.as_str()).collect();
        let expected = cands.iter().filter(|c| series.contains(c.series_id.as_str())).count();
        assert_eq!(preds.len(), expected);
        assert!(preds.iter().all(|p| (0.0..=1.0).contains(&p.probability().unwrap())));
        seen.extend(preds.into_iter().map(|p| (p.series_id.clone(), p.world_mm.map(f64::to_bits))));
    }
    let all: BTreeSet<_> = seen.iter().cloned().collect();
    assert_eq!(seen.len(), cands.len());
    assert_eq!(all, cands.iter().map(|c| (c.series_id.clone(), c.world_mm.map(f64::to_bits))).collect());

    let eval = runs.join("evaluation");
    for f in ["report.json", "froc.csv", "froc.svg", "triage.csv", "evaluate.config.toml"] {
        assert!(eval.join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["triage_counts"].as_object().unwrap().len(), 3);
    assert_eq!(report["cpm"]["sensitivities"].as_array().unwrap().len(), 7);

    let o = run(&["--config", path_arg(&cfg), "evaluate"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("CPM") && text.contains("LC [0.5, 0.7)") && text.contains("HC [0.9, 1]"), "{text}");
}

#[test]
fn train_echoes_flags_and_predict_checks_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let c = path_arg(&cfg);
    for cmd in ["synth", "extract"] {
        assert_eq!(code(&run(&["--config", c, cmd])), 0);
    }
    let o = run(&["--config", c, "train", "--variant", "MGI", "--fusion", "sum", "--fold", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = dir.path().join("runs/fold-0/model.ckpt");
    let m = Model::<f32>::load(&ckpt).unwrap();
    assert_eq!((m.config().variant, m.config().fusion.as_str()), (Variant::Mgi, "sum"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("runs/fold-0/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["model"]["variant"], "MGI");
    assert_eq!(manifest["train"]["epochs"], 1);
    let echo = fs::read_to_string(dir.path().join("runs/train.config.toml")).unwrap();
    assert!(echo.contains("fold = 0") && echo.contains("variant = \"MGI\""), "{echo}");

    let o = run(&["--config", c, "predict", "--variant", "RI", "--fold", "0"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["--config", c, "predict", "--checkpoint", path_arg(&ckpt)]);
    assert_eq!(code(&o), 1);
    let o = run(&["--config", c, "predict", "--fold", "0", "--checkpoint", path_arg(&ckpt)]);
    assert_eq!(code(&o), 0);
}

#[test]
fn zo_and_zi_runs_have_equal_parameter_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path());
    let c = path_arg(&cfg);
    for cmd in ["synth", "extract"] {
        assert_eq!(code(&run(&["--config", c, cmd])), 0);
    }
    let mut counts = Vec::new();
    for v in ["ZI", "ZO"] {
        let out = dir.path().join(v);
        let o = run(&["--config", c, "--output-dir", path_arg(&out), "train", "--variant", v, "--fold", "1"]);
        assert_eq!(code(&o), 0);
        counts.push(Model::<f32>::load(out.join("fold-1/model.ckpt")).unwrap().count_parameters());
    }
    assert_eq!(counts[0], counts[1]);
}

#[test]
fn evaluate_perfect_predictions_and_empty_gt() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&run(&["--data-dir", path_arg(&data), "synth", "--num-scans", "4"])), 0);
    let cands = read_candidates(data.join("candidates.csv")).unwrap();
    let perfect: Vec<Candidate> = cands
        .iter()
        .map(|c| c.clone().with_probability(if c.is_nodule() { 1.0 } else { 0.0 }).unwrap())
        .collect();
    let preds = dir.path().join("perfect.csv");
    write_predictions(&preds, &perfect).unwrap();
    let out = dir.path().join("out");
    let o = run(&["--data-dir", path_arg(&data), "--output-dir", path_arg(&out), "evaluate", "--predictions", path_arg(&preds), "--bootstrap", "50"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("evaluation/report.json")).unwrap()).unwrap();
    assert_eq!(report["cpm"]["average"], 1.0);
    assert_eq!(report["confusion"]["fp"], 0);

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "seriesuid,coordX,coordY,coordZ,diameter_mm\n").unwrap();
    let o = run(&["--output-dir", path_arg(&out), "evaluate", "--predictions", path_arg(&preds), "--gt", path_arg(&empty)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("ground-truth"));
}

#[test]
fn env_overrides_path_roots_only() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("env-data");
    let o = std::process::Command::new(common::bin())
        .args(["synth", "--num-scans", "1"])
        .env("MGICNN_DATA_DIR", &data)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(data.join("candidates.csv").exists());
}
