//! FROC analysis, CPM with scan-level bootstrap, confusion counts at an
//! operating threshold and confidence-band triage of false positives.

mod io;
mod plot;

pub use io::{read_ground_truth, read_predictions, write_froc_csv, write_ground_truth, write_predictions};
pub use plot::render_froc_svg;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::Candidate;

/// FP/scan abscissae averaged by the CPM.
pub const CPM_FPS: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];
pub const DEFAULT_BOOTSTRAP: usize = 1000;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthNodule {
    pub series_id: String,
    pub center_mm: [f64; 3],
    radius_mm: f64,
}

impl GroundTruthNodule {
    pub fn new(series_id: impl Into<String>, center_mm: [f64; 3], radius_mm: f64) -> Result<Self> {
        if !(radius_mm > 0.0) || !radius_mm.is_finite() {
            return Err(Error::InvalidArgument(format!("radius must be > 0, got {radius_mm}")));
        }
        Ok(GroundTruthNodule {
            series_id: series_id.into(),
            center_mm,
            radius_mm,
        })
    }

    pub fn radius_mm(&self) -> f64 {
        self.radius_mm
    }

    pub fn diameter_mm(&self) -> f64 {
        2.0 * self.radius_mm
    }

    /// Strict hit rule: distance < radius on the same series.
    pub fn is_hit_by(&self, c: &Candidate) -> bool {
        c.series_id == self.series_id && distance(c.world_mm, self.center_mm) < self.radius_mm
    }
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn prob(c: &Candidate) -> Result<f64> {
    c.probability()
        .ok_or_else(|| Error::Evaluation(format!("prediction for `{}` at {:?} has no probability", c.series_id, c.world_mm)))
}

/// For every prediction, the indices of the GT nodules it hits.
pub fn match_hits(predictions: &[Candidate], gt: &[GroundTruthNodule]) -> Vec<Vec<usize>> {
    let mut by_series: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in gt.iter().enumerate() {
        by_series.entry(g.series_id.as_str()).or_default().push(i);
    }
    predictions
        .iter()
        .map(|p| {
            by_series
                .get(p.series_id.as_str())
                .map(|ids| ids.iter().copied().filter(|&i| gt[i].is_hit_by(p)).collect())
                .unwrap_or_default()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub fp_per_scan: f64,
    pub sensitivity: f64,
    /// Highest probability threshold (inclusive) at which this point is reached.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    pub points: Vec<FrocPoint>,
    pub num_scans: usize,
    pub num_gt: usize,
}

impl FrocCurve {
    /// Checks strict FP ordering and monotone sensitivity.
    pub fn check_invariants(&self) -> Result<()> {
        for w in self.points.windows(2) {
            if !(w[1].fp_per_scan > w[0].fp_per_scan) || w[1].sensitivity < w[0].sensitivity {
                return Err(Error::Evaluation(format!("curve not monotone at {:?} -> {:?}", w[0], w[1])));
            }
        }
        Ok(())
    }
}

/// Scoring summary of one scan: best hitting probability per GT nodule and
/// the probabilities of predictions hitting nothing.
#[derive(Debug, Clone, Default, PartialEq)]
struct ScanScore {
    gt_best: Vec<f64>,
    fp_probs: Vec<f64>,
}

/// Per-scan scores keyed by series, padded with empty scans up to `num_scans`.
fn scan_scores(predictions: &[Candidate], gt: &[GroundTruthNodule], num_scans: usize) -> Result<Vec<ScanScore>> {
    let hits = match_hits(predictions, gt);
    let mut scans: BTreeMap<&str, ScanScore> = BTreeMap::new();
    let mut gt_slot = Vec::with_capacity(gt.len());
    for g in gt {
        let s = scans.entry(g.series_id.as_str()).or_default();
        gt_slot.push(s.gt_best.len());
        s.gt_best.push(f64::NEG_INFINITY);
    }
    for (p, h) in predictions.iter().zip(&hits) {
        let pr = prob(p)?;
        let s = scans.entry(p.series_id.as_str()).or_default();
        if h.is_empty() {
            s.fp_probs.push(pr);
        }
        for &gi in h {
            let slot = &mut s.gt_best[gt_slot[gi]];
            *slot = slot.max(pr);
        }
    }
    if scans.len() > num_scans {
        return Err(Error::Evaluation(format!(
            "{} distinct series in predictions/GT but num_scans = {num_scans}",
            scans.len()
        )));
    }
    let mut out: Vec<ScanScore> = scans.into_values().collect();
    out.resize(num_scans, ScanScore::default());
    Ok(out)
}

fn froc_from_scores<'a>(scans: impl IntoIterator<Item = &'a ScanScore>) -> Result<FrocCurve> {
    let mut gt_best = Vec::new();
    let mut fps = Vec::new();
    let mut num_scans = 0;
    for s in scans {
        gt_best.extend_from_slice(&s.gt_best);
        fps.extend_from_slice(&s.fp_probs);
        num_scans += 1;
    }
    if gt_best.is_empty() {
        return Err(Error::Evaluation("no ground-truth nodules: sensitivity is undefined".into()));
    }
    if num_scans == 0 {
        return Err(Error::Evaluation("num_scans must be >= 1".into()));
    }
    let desc = |v: &mut Vec<f64>| v.sort_by(|a, b| b.total_cmp(a));
    desc(&mut gt_best);
    desc(&mut fps);
    let mut thresholds: Vec<f64> = gt_best.iter().chain(&fps).copied().filter(|p| p.is_finite()).collect();
    desc(&mut thresholds);
    thresholds.dedup();

    let (n_gt, n_scans) = (gt_best.len() as f64, num_scans as f64);
    let (mut gi, mut fi) = (0, 0);
    let mut points: Vec<FrocPoint> = Vec::with_capacity(thresholds.len());
    for t in thresholds {
        while gi < gt_best.len() && gt_best[gi] >= t {
            gi += 1;
        }
        while fi < fps.len() && fps[fi] >= t {
            fi += 1;
        }
        let p = FrocPoint {
            fp_per_scan: fi as f64 / n_scans,
            sensitivity: gi as f64 / n_gt,
            threshold: t,
        };
        match points.last_mut() {
            // equal FP rate: the lower threshold detects at least as much
            Some(last) if last.fp_per_scan == p.fp_per_scan => *last = p,
            _ => points.push(p),
        }
    }
    let curve = FrocCurve {
        points,
        num_scans,
        num_gt: gt_best.len(),
    };
    curve.check_invariants()?;
    Ok(curve)
}

/// FROC over every distinct prediction probability (`p >= t` is positive).
pub fn froc(predictions: &[Candidate], gt: &[GroundTruthNodule], num_scans: usize) -> Result<FrocCurve> {
    if num_scans == 0 {
        return Err(Error::Evaluation("num_scans must be >= 1".into()));
    }
    froc_from_scores(&scan_scores(predictions, gt, num_scans)?)
}

/// Sensitivity at `fps` false positives per scan, linearly interpolated;
/// below the first point the curve starts at (0, 0), above the last it
/// saturates.
pub fn sensitivity_at(curve: &FrocCurve, fps: f64) -> f64 {
    let pts = &curve.points;
    let Some(first) = pts.first() else { return 0.0 };
    if fps <= first.fp_per_scan {
        return if fps == first.fp_per_scan || first.fp_per_scan == 0.0 {
            first.sensitivity
        } else {
            first.sensitivity * fps / first.fp_per_scan
        };
    }
    let last = pts[pts.len() - 1];
    if fps >= last.fp_per_scan {
        return last.sensitivity;
    }
    let i = pts.partition_point(|p| p.fp_per_scan <= fps);
    let (a, b) = (pts[i - 1], pts[i]);
    a.sensitivity + (b.sensitivity - a.sensitivity) * (fps - a.fp_per_scan) / (b.fp_per_scan - a.fp_per_scan)
}

/// Arithmetic mean of the seven operating-point sensitivities.
pub fn cpm_average(sensitivities: &[f64; 7]) -> f64 {
    sensitivities.iter().sum::<f64>() / 7.0
}

fn seven_points(curve: &FrocCurve) -> [f64; 7] {
    CPM_FPS.map(|f| sensitivity_at(curve, f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpmResult {
    /// Sensitivity at each entry of [`CPM_FPS`].
    pub sensitivities: [f64; 7],
    pub average: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Bootstrap replicates that contained at least one GT nodule.
    pub replicates_used: usize,
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// CPM point estimate plus a 95% percentile bootstrap interval from
/// resampling scans with replacement. Replicate `r` draws from a stream
/// derived from `(seed, r)`; replicates without GT are skipped.
pub fn cpm(predictions: &[Candidate], gt: &[GroundTruthNodule], num_scans: usize, bootstrap_n: usize, seed: u64) -> Result<CpmResult> {
    if bootstrap_n == 0 {
        return Err(Error::InvalidArgument("bootstrap_n must be >= 1".into()));
    }
    if num_scans == 0 {
        return Err(Error::Evaluation("num_scans must be >= 1".into()));
    }
    let scans = scan_scores(predictions, gt, num_scans)?;
    let sensitivities = seven_points(&froc_from_scores(&scans)?);
    let average = cpm_average(&sensitivities);
    let mut reps = Vec::with_capacity(bootstrap_n);
    for r in 0..bootstrap_n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let sample: Vec<&ScanScore> = (0..scans.len()).map(|_| &scans[rng.gen_range(0..scans.len())]).collect();
        if sample.iter().all(|s| s.gt_best.is_empty()) {
            continue;
        }
        reps.push(cpm_average(&seven_points(&froc_from_scores(sample)?)));
    }
    reps.sort_by(f64::total_cmp);
    let (ci_low, ci_high) = if reps.is_empty() {
        (average, average)
    } else {
        (percentile(&reps, 0.025).min(average), percentile(&reps, 0.975).max(average))
    };
    Ok(CpmResult {
        sensitivities,
        average,
        ci_low,
        ci_high,
        replicates_used: reps.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp_in_gt: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Counts at `p >= threshold`.
pub fn confusion_counts(predictions: &[Candidate], gt: &[GroundTruthNodule], threshold: f64) -> Result<Confusion> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let hits = match_hits(predictions, gt);
    let mut detected = vec![false; gt.len()];
    let mut fp = 0;
    for (p, h) in predictions.iter().zip(&hits) {
        if prob(p)? < threshold {
            continue;
        }
        if h.is_empty() {
            fp += 1;
        }
        for &g in h {
            detected[g] = true;
        }
    }
    let tp = detected.iter().filter(|&&d| d).count();
    Ok(Confusion {
        tp_in_gt: tp,
        fp,
        fn_: gt.len() - tp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageBand {
    pub name: String,
    pub low: f64,
    pub high: f64,
    /// Whether `high` itself belongs to the band.
    pub closed_high: bool,
    pub false_positives: Vec<Candidate>,
}

impl TriageBand {
    pub fn contains(&self, p: f64) -> bool {
        p >= self.low && (p < self.high || (self.closed_high && p == self.high))
    }

    pub fn count(&self) -> usize {
        self.false_positives.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageReport {
    pub bands: Vec<TriageBand>,
}

impl TriageReport {
    pub fn counts(&self) -> Vec<usize> {
        self.bands.iter().map(TriageBand::count).collect()
    }
}

/// False positives in the LC `[0.5, 0.7)`, MC `[0.7, 0.9)` and HC `[0.9, 1]`
/// bands; FPs below 0.5 are not reported.
pub fn triage_fps(predictions: &[Candidate], gt: &[GroundTruthNodule]) -> Result<TriageReport> {
    let band = |name: &str, low, high, closed_high| TriageBand {
        name: name.into(),
        low,
        high,
        closed_high,
        false_positives: Vec::new(),
    };
    let mut bands = vec![band("LC", 0.5, 0.7, false), band("MC", 0.7, 0.9, false), band("HC", 0.9, 1.0, true)];
    let hits = match_hits(predictions, gt);
    for (p, h) in predictions.iter().zip(&hits) {
        if !h.is_empty() {
            continue;
        }
        let pr = prob(p)?;
        if let Some(b) = bands.iter_mut().find(|b| b.contains(pr)) {
            b.false_positives.push(p.clone());
        }
    }
    Ok(TriageReport { bands })
}

/// Everything the evaluate command reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub num_scans: usize,
    pub num_gt: usize,
    pub num_predictions: usize,
    pub fps_per_scan: Vec<f64>,
    pub cpm: CpmResult,
    pub threshold: f64,
    pub confusion: Confusion,
    pub triage_counts: BTreeMap<String, usize>,
}

/// Full report: CPM with bootstrap CI, confusion at `threshold`, triage.
pub fn evaluate(
    predictions: &[Candidate],
    gt: &[GroundTruthNodule],
    num_scans: usize,
    bootstrap_n: usize,
    seed: u64,
    threshold: f64,
) -> Result<(EvaluationReport, FrocCurve, TriageReport)> {
    let curve = froc(predictions, gt, num_scans)?;
    let cpm = cpm(predictions, gt, num_scans, bootstrap_n, seed)?;
    let confusion = confusion_counts(predictions, gt, threshold)?;
    let triage = triage_fps(predictions, gt)?;
    let report = EvaluationReport {
        num_scans,
        num_gt: gt.len(),
        num_predictions: predictions.len(),
        fps_per_scan: CPM_FPS.to_vec(),
        cpm,
        threshold,
        confusion,
        triage_counts: triage.bands.iter().map(|b| (b.name.clone(), b.count())).collect(),
    };
    Ok((report, curve, triage))
}
