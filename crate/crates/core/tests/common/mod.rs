#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mgicnn::evaluation::GroundTruthNodule;
use mgicnn::volume_io::Candidate;
use rand::Rng;
use sha2::{Digest, Sha256};

/// Independent scorer: walks every distinct probability as a threshold and
/// counts hits by direct distance checks. Returns `(fp/scan, sensitivity,
/// threshold)` per operating point, keeping the best sensitivity per FP
/// level and the highest threshold that reaches it.
pub fn brute_froc(preds: &[Candidate], gt: &[GroundTruthNodule], num_scans: usize) -> Vec<(f64, f64, f64)> {
    let mut ts: Vec<f64> = preds.iter().map(|p| p.probability().unwrap()).collect();
    ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ts.dedup();
    let mut out: Vec<(f64, f64, f64)> = Vec::new();
    let mut last: Option<(usize, usize)> = None;
    for t in ts {
        let (tp, fp) = brute_counts(preds, gt, t);
        if last == Some((fp, tp)) {
            continue;
        }
        let pt = (fp as f64 / num_scans as f64, tp as f64 / gt.len() as f64, t);
        match (last, out.last_mut()) {
            (Some((lfp, _)), Some(prev)) if lfp == fp => *prev = pt,
            _ => out.push(pt),
        }
        last = Some((fp, tp));
    }
    out
}

fn hits(p: &Candidate, g: &GroundTruthNodule) -> bool {
    if p.series_id != g.series_id {
        return false;
    }
    let d2: f64 = (0..3).map(|k| (p.world_mm[k] - g.center_mm[k]) * (p.world_mm[k] - g.center_mm[k])).sum();
    d2 < g.radius_mm() * g.radius_mm()
}

/// `(detected GT, false positives)` among predictions with `p >= t`.
pub fn brute_counts(preds: &[Candidate], gt: &[GroundTruthNodule], t: f64) -> (usize, usize) {
    let positive: Vec<&Candidate> = preds.iter().filter(|p| p.probability().unwrap() >= t).collect();
    let tp = gt.iter().filter(|g| positive.iter().any(|p| hits(p, g))).count();
    let fp = positive.iter().filter(|p| !gt.iter().any(|g| hits(p, g))).count();
    (tp, fp)
}

/// Small instance on an integer grid with quantised probabilities, so that
/// boundary distances and tied scores both occur.
pub fn random_instance(rng: &mut impl Rng) -> (Vec<Candidate>, Vec<GroundTruthNodule>, usize) {
    let scans = rng.gen_range(1..=5);
    let n_gt = rng.gen_range(1..=10);
    let n_pred = rng.gen_range(0..=30);
    let series = |rng: &mut dyn rand::RngCore| format!("s{}", rng.gen_range(0..scans));
    let point = |rng: &mut dyn rand::RngCore| [0; 3].map(|_: i32| rng.gen_range(0..6) as f64);
    let gt = (0..n_gt)
        .map(|_| GroundTruthNodule::new(series(rng), point(rng), rng.gen_range(1..=6) as f64 * 0.5).unwrap())
        .collect();
    let preds = (0..n_pred)
        .map(|_| {
            Candidate::new(series(rng), point(rng), None)
                .with_probability(rng.gen_range(0..=10) as f64 / 10.0)
                .unwrap()
        })
        .collect();
    (preds, gt, scans)
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_mgicnn"))
}

/// Runs the binary with path-root variables cleared.
pub fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("MGICNN_DATA_DIR")
        .env_remove("MGICNN_CACHE_DIR")
        .env_remove("MGICNN_OUTPUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

pub fn sha256(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Quick desk run: few small scans, one short epoch.
pub const QUICK_CONFIG: &str = r#"
seed = 5
folds = 5

[synthetic]
num_scans = 5
volume_shape = [64, 64, 32]

[synthetic.nodules]
count = 2

[synthetic.distractors]
count = 4

[train]
epochs = 1
batch_size = 16
"#;

/// Writes [`QUICK_CONFIG`] with paths rooted at `root`.
pub fn quick_config(root: &Path) -> PathBuf {
    let text = format!(
        "{QUICK_CONFIG}\n[paths]\ndata_dir = {:?}\ncache_dir = {:?}\noutput_dir = {:?}\n",
        root.join("data"),
        root.join("cache"),
        root.join("runs")
    );
    let path = root.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

/// synth, extract, train, predict and evaluate with the quick config.
pub fn quick_pipeline(root: &Path) -> PathBuf {
    let cfg = quick_config(root);
    let c = cfg.to_str().unwrap();
    for cmd in ["synth", "extract", "train", "predict", "evaluate"] {
        let o = run(&["--config", c, cmd]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    cfg
}

/// Every CSV and checkpoint under `root`, relative path to digest.
pub fn artifact_digests(root: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|s| s.to_str()), Some("csv" | "ckpt" | "bin" | "raw" | "mhd")) {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), sha256(&p)));
            }
        }
    }
    out.sort();
    out
}
