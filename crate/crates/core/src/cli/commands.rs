use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use super::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{self, read_ground_truth, read_predictions, render_froc_svg, write_froc_csv, write_predictions, EvaluationReport, TriageReport};
use crate::experiment::{predict, test_records, train_fold};
use crate::model::{Model, Variant};
use crate::patching::{read_cache, write_cache, PatchRecord};
use crate::synthetic::{self, generate_scan, ExportedPaths, SyntheticDataset, CANDIDATES_FILE, GROUND_TRUTH_FILE, VOLUME_DIR};
use crate::training::{make_folds, FoldPlan, RunManifest};
use crate::volume_io::{load_volume, read_candidates, Candidate, MAX_SLICE_THICKNESS_MM};

pub const CACHE_FILE: &str = "patches.bin";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

/// Runs `f(0..n)` on `workers` threads and returns results in index order.
fn par_map<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let f = &f;
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers.min(n))
            .map(|w| s.spawn(move || (w..n).step_by(workers).map(|i| (i, f(i))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, v) in h.join().expect("worker panicked") {
                slots[i] = Some(v);
            }
        }
    });
    slots.into_iter().map(|v| v.expect("every index produced")).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn fold_dir(cfg: &RunConfig, fold: usize) -> PathBuf {
    cfg.paths.output_dir.join(format!("fold-{fold}"))
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<ExportedPaths> {
    let dir = &cfg.paths.data_dir;
    create_dir(dir)?;
    let scans = par_map(cfg.synthetic.num_scans, cfg.workers, |i| generate_scan(&cfg.synthetic, i));
    let mut data = SyntheticDataset {
        volumes: Vec::with_capacity(scans.len()),
        ground_truth: Vec::new(),
        candidates: Vec::new(),
    };
    for s in scans {
        let s = s?;
        data.volumes.push(s.volume);
        data.ground_truth.extend(s.ground_truth);
        data.candidates.extend(s.candidates);
    }
    let paths = synthetic::export(&data, dir)?;
    cfg.echo(dir, "synth")?;
    println!(
        "synth: {} scans, {} nodules, {} candidates -> {}",
        data.volumes.len(),
        data.ground_truth.len(),
        data.candidates.len(),
        dir.display()
    );
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractSummary {
    pub candidates: usize,
    pub records: usize,
    pub nodules: usize,
    /// Candidates skipped because their crop would be degenerate.
    pub degenerate: Vec<Candidate>,
    /// Series named by candidates but absent from the volume directory.
    pub missing_series: Vec<String>,
    /// Series excluded for slices thicker than the limit.
    pub thick_series: Vec<String>,
    pub cache_path: PathBuf,
    pub cache_unchanged: bool,
}

impl ExtractSummary {
    pub fn summary_line(&self) -> String {
        format!(
            "extract: {} candidates, {} records ({} nodules), {} degenerate, {} missing series, {} thick-slice series{}",
            self.candidates,
            self.records,
            self.nodules,
            self.degenerate.len(),
            self.missing_series.len(),
            self.thick_series.len(),
            if self.cache_unchanged { ", cache unchanged" } else { "" }
        )
    }
}

enum SeriesOutcome {
    Missing,
    Thick,
    Done(Vec<std::result::Result<PatchRecord, Candidate>>),
}

pub fn cmd_extract(cfg: &RunConfig) -> Result<ExtractSummary> {
    let data = &cfg.paths.data_dir;
    let candidates = read_candidates(data.join(CANDIDATES_FILE))?;
    let mut by_series: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in candidates.iter().enumerate() {
        by_series.entry(c.series_id.as_str()).or_default().push(i);
    }
    let series: Vec<(&str, Vec<usize>)> = by_series.into_iter().collect();
    let volume_dir = data.join(VOLUME_DIR);
    let outcomes = par_map(series.len(), cfg.workers, |s| -> Result<SeriesOutcome> {
        let (id, idx) = &series[s];
        let path = volume_dir.join(format!("{id}.mhd"));
        if !path.exists() {
            return Ok(SeriesOutcome::Missing);
        }
        let volume = load_volume(&path)?;
        if volume.slice_thickness_mm() > MAX_SLICE_THICKNESS_MM {
            return Ok(SeriesOutcome::Thick);
        }
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            let c = &candidates[i];
            match PatchRecord::extract(&volume, c) {
                Ok(r) => out.push(Ok(r)),
                Err(Error::DegenerateCandidate { .. }) => out.push(Err(c.clone())),
                Err(e) => return Err(e),
            }
        }
        Ok(SeriesOutcome::Done(out))
    });

    let mut slots: Vec<Option<PatchRecord>> = (0..candidates.len()).map(|_| None).collect();
    let mut degenerate = Vec::new();
    let mut missing_series = Vec::new();
    let mut thick_series = Vec::new();
    for ((id, idx), outcome) in series.iter().zip(outcomes) {
        match outcome? {
            SeriesOutcome::Missing => missing_series.push(id.to_string()),
            SeriesOutcome::Thick => thick_series.push(id.to_string()),
            SeriesOutcome::Done(items) => {
                for (&i, item) in idx.iter().zip(items) {
                    match item {
                        Ok(r) => slots[i] = Some(r),
                        Err(c) => degenerate.push(c),
                    }
                }
            }
        }
    }
    let records: Vec<PatchRecord> = slots.into_iter().flatten().collect();
    for c in &degenerate {
        eprintln!("skipped degenerate candidate {} at {:?}", c.series_id, c.world_mm);
    }
    for s in &missing_series {
        eprintln!("missing series {s}: no {s}.mhd in {}", volume_dir.display());
    }
    for s in &thick_series {
        eprintln!("excluded series {s}: slices thicker than {MAX_SLICE_THICKNESS_MM} mm");
    }

    let dir = &cfg.paths.cache_dir;
    create_dir(dir)?;
    let cache_path = dir.join(CACHE_FILE);
    let tmp = dir.join(format!("{CACHE_FILE}.tmp"));
    write_cache(&tmp, &records)?;
    let fresh = fs::read(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let cache_unchanged = fs::read(&cache_path).map(|old| old == fresh).unwrap_or(false);
    if cache_unchanged {
        fs::remove_file(&tmp).map_err(|e| Error::io(&tmp, e))?;
    } else {
        fs::rename(&tmp, &cache_path).map_err(|e| Error::io(&cache_path, e))?;
    }
    cfg.echo(dir, "extract")?;
    Ok(ExtractSummary {
        candidates: candidates.len(),
        records: records.len(),
        nodules: records.iter().filter(|r| r.triple.candidate.is_nodule()).count(),
        degenerate,
        missing_series,
        thick_series,
        cache_path,
        cache_unchanged,
    })
}

fn load_records(cfg: &RunConfig) -> Result<(Vec<PatchRecord>, Vec<Candidate>, FoldPlan)> {
    let records = read_cache(cfg.paths.cache_dir.join(CACHE_FILE))?;
    let candidates: Vec<Candidate> = records.iter().map(|r| r.triple.candidate.clone()).collect();
    let series: Vec<String> = candidates.iter().map(|c| c.series_id.clone()).collect();
    let plan = make_folds(&series, cfg.folds, cfg.seed)?;
    plan.check_no_leakage(&candidates)?;
    Ok((records, candidates, plan))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<RunManifest>> {
    let (records, candidates, plan) = load_records(cfg)?;
    let model_cfg = cfg.model_config()?;
    create_dir(&cfg.paths.output_dir)?;
    let folds_path = cfg.paths.output_dir.join("folds.json");
    let tests: Vec<&BTreeSet<String>> = plan.folds.iter().map(|f| &f.test).collect();
    let text = serde_json::to_string_pretty(&tests).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&folds_path, text + "\n").map_err(|e| Error::io(&folds_path, e))?;
    cfg.echo(&cfg.paths.output_dir, "train")?;
    let mut manifests = Vec::new();
    for fold in cfg.selected_folds() {
        let (model, manifest) = train_fold(&plan, fold, &candidates, &records, &model_cfg, &cfg.train)?;
        let dir = fold_dir(cfg, fold);
        create_dir(&dir)?;
        model.save(dir.join(CHECKPOINT_FILE))?;
        manifest.write(dir.join(MANIFEST_FILE))?;
        println!(
            "train: fold {fold}, {} {} parameters, {} samples/epoch, final loss {:.5}",
            model_cfg.variant,
            model.count_parameters(),
            manifest.samples_per_epoch,
            manifest.epoch_losses.last().copied().unwrap_or(f64::NAN)
        );
        manifests.push(manifest);
    }
    Ok(manifests)
}

pub fn cmd_predict(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<PathBuf>> {
    let folds = cfg.selected_folds();
    if checkpoint.is_some() && folds.len() != 1 {
        return Err(Error::InvalidArgument("--checkpoint needs a single --fold".into()));
    }
    let (records, _, plan) = load_records(cfg)?;
    let want = cfg.model_config()?;
    let mut written = Vec::new();
    let mut all = Vec::new();
    for &fold in &folds {
        let dir = fold_dir(cfg, fold);
        let ckpt = checkpoint.map_or_else(|| dir.join(CHECKPOINT_FILE), Path::to_path_buf);
        let model = Model::<f32>::load(&ckpt)?;
        let got = model.config();
        if got.variant != want.variant || (got.variant == Variant::Mgi && got.fusion != want.fusion) {
            return Err(Error::InvalidConfig(format!(
                "{} holds a {} ({}) model but the configuration asks for {} ({})",
                ckpt.display(),
                got.variant,
                got.fusion,
                want.variant,
                want.fusion
            )));
        }
        let preds = predict(&model, &test_records(&plan, fold, &records))?;
        create_dir(&dir)?;
        let path = dir.join(PREDICTIONS_FILE);
        write_predictions(&path, &preds)?;
        info!("fold {fold}: {} predictions -> {}", preds.len(), path.display());
        println!("predict: fold {fold}, {} candidates -> {}", preds.len(), path.display());
        written.push(path);
        all.extend(preds);
    }
    if folds.len() == cfg.folds {
        let path = cfg.paths.output_dir.join(PREDICTIONS_FILE);
        write_predictions(&path, &all)?;
        println!("predict: {} candidates -> {}", all.len(), path.display());
        written.push(path);
    }
    cfg.echo(&cfg.paths.output_dir, "predict")?;
    Ok(written)
}

fn write_triage(path: &Path, triage: &TriageReport) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["band", "seriesuid", "coordX", "coordY", "coordZ", "probability"]).map_err(csv_err)?;
    for b in &triage.bands {
        for c in &b.false_positives {
            let p = c.probability().unwrap_or(f64::NAN);
            let [x, y, z] = c.world_mm;
            w.write_record([b.name.clone(), c.series_id.clone(), x.to_string(), y.to_string(), z.to_string(), p.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cmd_evaluate(cfg: &RunConfig, predictions: Option<&Path>, gt: Option<&Path>) -> Result<EvaluationReport> {
    let pred_path = predictions.map_or_else(|| cfg.paths.output_dir.join(PREDICTIONS_FILE), Path::to_path_buf);
    let gt_path = gt.map_or_else(|| cfg.paths.data_dir.join(GROUND_TRUTH_FILE), Path::to_path_buf);
    let preds = read_predictions(&pred_path)?;
    let gt = read_ground_truth(&gt_path)?;
    let num_scans = cfg.evaluation.num_scans.unwrap_or_else(|| {
        let ids: BTreeSet<&str> = preds.iter().map(|p| p.series_id.as_str()).chain(gt.iter().map(|g| g.series_id.as_str())).collect();
        ids.len()
    });
    let (report, curve, triage) = evaluation::evaluate(
        &preds,
        &gt,
        num_scans,
        cfg.evaluation.bootstrap,
        cfg.seed,
        cfg.evaluation.threshold,
    )?;
    let dir = cfg.paths.output_dir.join("evaluation");
    create_dir(&dir)?;
    let json = dir.join("report.json");
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    write_froc_csv(dir.join("froc.csv"), &curve)?;
    write_triage(&dir.join("triage.csv"), &triage)?;
    render_froc_svg(&curve, dir.join("froc.svg"), "FROC")?;
    cfg.echo(&dir, "evaluate")?;
    print!("{}", render_report(&report, &triage));
    Ok(report)
}

/// Human-readable report as printed by `evaluate`.
pub fn render_report(report: &EvaluationReport, triage: &TriageReport) -> String {
    let mut s = format!(
        "scans {}  nodules {}  predictions {}\n",
        report.num_scans, report.num_gt, report.num_predictions
    );
    for (f, v) in report.fps_per_scan.iter().zip(&report.cpm.sensitivities) {
        s += &format!("  sensitivity at {f:>5} FP/scan: {v:.4}\n");
    }
    let c = &report.cpm;
    s += &format!(
        "CPM {:.4} (95% CI {:.4}-{:.4}, {} bootstrap replicates)\n",
        c.average, c.ci_low, c.ci_high, c.replicates_used
    );
    s += &format!(
        "at p >= {}: TP {}  FP {}  FN {}\n",
        report.threshold, report.confusion.tp_in_gt, report.confusion.fp, report.confusion.fn_
    );
    s += "FP triage:";
    for b in &triage.bands {
        let close = if b.closed_high { "]" } else { ")" };
        s += &format!("  {} [{}, {}{} {}", b.name, b.low, b.high, close, b.count());
    }
    s.push('\n');
    s
}

#[cfg(test)]
pub(super) fn par_map_for_tests<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    par_map(n, workers, f)
}
