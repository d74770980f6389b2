//! Tracking metric suite: position accuracy over distance thresholds,
//! occlusion accuracy, and average Jaccard, pooled over tracks and frames,
//! plus the full evaluation protocol (stratified bins, corruption sweeps)
//! and report emission.
//!
//! All metrics are percentages in `[0, 100]`, computed in a fixed 256x256
//! coordinate frame. Position thresholds are applied inclusively (an error of
//! exactly 4 px counts at the 4 px threshold) and visibility probabilities
//! are classified with a strict `> 0.5` rule.

use crate::datagen::{self, CorruptionKind, GroundTruthTrack, MotionBin, ReappearanceBin, SyntheticClip};
use crate::error::{Error, Result};
use crate::numerics::Point2D;
use crate::refiner::{TrackOutput, TrackQuery, Tracker};
use std::collections::BTreeMap;
use std::path::Path;

/// Pixel distance thresholds of the accuracy sweep.
pub const DELTA_THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

/// Probability above which a point counts as predicted visible.
pub const VIS_THRESHOLD: f64 = 0.5;

/// One predicted track aligned frame-by-frame with its ground truth.
///
/// Positions are in the evaluation pixel frame; `pred_vis` holds visibility
/// probabilities in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct TrackEval {
    pub pred_pos: Vec<Point2D<f32>>,
    pub pred_vis: Vec<f32>,
    pub gt_pos: Vec<Point2D<f32>>,
    pub gt_vis: Vec<bool>,
}

impl TrackEval {
    /// A track with no visibility head: every frame predicted fully visible.
    pub fn positions_only(pred: Vec<Point2D<f32>>, gt_pos: Vec<Point2D<f32>>, gt_vis: Vec<bool>) -> Self {
        let n = pred.len();
        TrackEval { pred_pos: pred, pred_vis: vec![1.0; n], gt_pos, gt_vis }
    }

    fn frames(&self) -> usize {
        self.pred_pos.len()
    }
}

fn validate(tracks: &[TrackEval]) -> Result<()> {
    if tracks.is_empty() {
        return Err(Error::invalid("metric computation needs at least one track"));
    }
    for (i, t) in tracks.iter().enumerate() {
        let n = t.frames();
        if n == 0 {
            return Err(Error::invalid(format!("track {i} has no frames")));
        }
        if t.pred_vis.len() != n || t.gt_pos.len() != n || t.gt_vis.len() != n {
            return Err(Error::invalid(format!(
                "track {i} is misaligned: positions {n}, vis {}, gt {}, gt_vis {}",
                t.pred_vis.len(),
                t.gt_pos.len(),
                t.gt_vis.len()
            )));
        }
    }
    Ok(())
}

fn within(t: &TrackEval, frame: usize, tau: f64) -> bool {
    let d = t.pred_pos[frame].distance(t.gt_pos[frame]) as f64;
    d <= tau
}

fn pred_visible(t: &TrackEval, frame: usize) -> bool {
    (t.pred_vis[frame] as f64) > VIS_THRESHOLD
}

/// Fraction of ground-truth-visible frames tracked within each threshold,
/// as percentages ordered like [`DELTA_THRESHOLDS`].
///
/// Frames whose ground truth is occluded never contribute. If the set has no
/// visible frames at all there is nothing to get wrong and every entry is 100.
pub fn delta_per_threshold(tracks: &[TrackEval]) -> Result<[f64; 5]> {
    validate(tracks)?;
    let mut out = [0.0f64; 5];
    for (slot, &tau) in out.iter_mut().zip(DELTA_THRESHOLDS.iter()) {
        let mut hits = 0usize;
        let mut total = 0usize;
        for t in tracks {
            for f in 0..t.frames() {
                if !t.gt_vis[f] {
                    continue;
                }
                total += 1;
                if within(t, f, tau) {
                    hits += 1;
                }
            }
        }
        *slot = if total == 0 { 100.0 } else { 100.0 * hits as f64 / total as f64 };
    }
    Ok(out)
}

/// Mean of [`delta_per_threshold`] over the five thresholds.
pub fn delta_x_avg(tracks: &[TrackEval]) -> Result<f64> {
    let per = delta_per_threshold(tracks)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Fraction of frames whose visibility classification matches the ground
/// truth, over all frames of all tracks.
pub fn occlusion_accuracy(tracks: &[TrackEval]) -> Result<f64> {
    validate(tracks)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for t in tracks {
        for f in 0..t.frames() {
            total += 1;
            if pred_visible(t, f) == t.gt_vis[f] {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / total as f64)
}

/// Jaccard index of correctly tracked visible points, averaged over the five
/// thresholds.
///
/// Per threshold: true positives are frames that are ground-truth visible,
/// predicted visible, and within the threshold; false positives are predicted
/// visible without being a true positive; false negatives are ground-truth
/// visible without being a true positive (a visible prediction that misses by
/// more than the threshold counts as both). Frames occluded on both sides are
/// ignored. An empty union counts as a perfect 100.
pub fn average_jaccard(tracks: &[TrackEval]) -> Result<f64> {
    validate(tracks)?;
    let mut sum = 0.0f64;
    for &tau in DELTA_THRESHOLDS.iter() {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for t in tracks {
            for f in 0..t.frames() {
                let gt = t.gt_vis[f];
                let pv = pred_visible(t, f);
                let ok = gt && pv && within(t, f, tau);
                if ok {
                    tp += 1;
                } else {
                    if pv {
                        fp += 1;
                    }
                    if gt {
                        fn_ += 1;
                    }
                }
            }
        }
        let union = tp + fp + fn_;
        sum += if union == 0 { 100.0 } else { 100.0 * tp as f64 / union as f64 };
    }
    Ok(sum / DELTA_THRESHOLDS.len() as f64)
}

/// The three headline metrics of one evaluation pool.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricSummary {
    pub aj: f64,
    pub delta_avg: f64,
    pub per_threshold: [f64; 5],
    pub oa: f64,
    /// Number of (track, frame) pairs pooled.
    pub frames: usize,
}

/// Computes all metrics over one pool of aligned tracks.
pub fn compute_metrics(tracks: &[TrackEval]) -> Result<MetricSummary> {
    let per_threshold = delta_per_threshold(tracks)?;
    Ok(MetricSummary {
        aj: average_jaccard(tracks)?,
        delta_avg: per_threshold.iter().sum::<f64>() / per_threshold.len() as f64,
        per_threshold,
        oa: occlusion_accuracy(tracks)?,
        frames: tracks.iter().map(TrackEval::frames).sum(),
    })
}

/// Side length in pixels of the square frame all metrics are computed in.
pub const EVAL_RESOLUTION: usize = 256;

/// Per-axis factors mapping native `(x, y)` pixel coordinates of an
/// `height x width` clip into the evaluation frame: `(256/W, 256/H)`.
pub fn eval_scale(height: usize, width: usize) -> (f32, f32) {
    (EVAL_RESOLUTION as f32 / width as f32, EVAL_RESOLUTION as f32 / height as f32)
}

fn to_eval_frame(p: Point2D<f32>, scale: (f32, f32)) -> Point2D<f32> {
    Point2D::new(p.x * scale.0, p.y * scale.1)
}

/// Aligns predicted tracks with their ground truth by id and rescales both
/// sides from the native `height x width` frame into the evaluation frame.
///
/// Every prediction must have a ground-truth counterpart; ground-truth tracks
/// without a prediction are ignored.
pub fn pair_predictions(
    preds: &[TrackOutput<f32>],
    gts: &[GroundTruthTrack],
    height: usize,
    width: usize,
) -> Result<Vec<TrackEval>> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("native clip dimensions must be positive"));
    }
    let scale = eval_scale(height, width);
    let by_id: BTreeMap<i64, &GroundTruthTrack> = gts.iter().map(|t| (t.id as i64, t)).collect();
    if by_id.len() != gts.len() {
        return Err(Error::invalid("ground-truth track ids are not unique"));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(preds.len());
    for pred in preds {
        let id = pred.query.id;
        if !seen.insert(id) {
            return Err(Error::invalid(format!("duplicate predicted track id {id}")));
        }
        let gt = by_id
            .get(&id)
            .ok_or_else(|| Error::invalid(format!("predicted track id {id} has no ground-truth counterpart")))?;
        if pred.positions.len() != gt.positions.len() {
            return Err(Error::invalid(format!(
                "track {id}: prediction spans {} frames, ground truth {}",
                pred.positions.len(),
                gt.positions.len()
            )));
        }
        out.push(TrackEval {
            pred_pos: pred.positions.iter().map(|&p| to_eval_frame(p, scale)).collect(),
            pred_vis: pred.vis.clone(),
            gt_pos: gt.positions.iter().map(|&p| to_eval_frame(p, scale)).collect(),
            gt_vis: gt.visible.clone(),
        });
    }
    Ok(out)
}

/// One query per ground-truth track, placed at its first visible frame.
/// Positions are clamped into the tracker's valid query range.
pub fn first_visible_queries(clip: &SyntheticClip) -> Result<Vec<TrackQuery<f32>>> {
    let (h, w) = (clip.height(), clip.width());
    let mut queries = Vec::new();
    for track in &clip.tracks {
        let Some(frame) = track.first_visible() else { continue };
        let p = track.positions[frame];
        let pos = Point2D::new(p.x.clamp(0.0, (w - 1) as f32), p.y.clamp(0.0, (h - 1) as f32));
        queries.push(TrackQuery { id: track.id as i64, frame, pos });
    }
    if queries.is_empty() {
        return Err(Error::invalid("clip has no track with a visible frame to query"));
    }
    Ok(queries)
}

/// Metrics of one difficulty bin.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StratumMetrics {
    pub aj: f64,
    pub delta_avg: f64,
    pub oa: f64,
    pub tracks: usize,
    /// Pooled (track, frame) points.
    pub points: usize,
}

/// Full evaluation report.
///
/// `strata` and `counts` are keyed `motion/{low,mid,high}` and
/// `reappearance/{low,mid,high}`; each axis partitions its in-range tracks.
/// `corruption_curves` is keyed `kind:severity`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub aj: f64,
    pub delta_avg: f64,
    pub per_threshold: BTreeMap<u32, f64>,
    pub oa: f64,
    pub strata: BTreeMap<String, StratumMetrics>,
    pub corruption_curves: BTreeMap<String, f64>,
    /// Pooled (track, frame) points per stratum cell.
    pub counts: BTreeMap<String, usize>,
    pub clips: usize,
    pub tracks: usize,
    pub points: usize,
    /// Tracks whose mean visible motion is at least 5% of the frame diagonal.
    /// They stay in the overall pool and the reappearance axis but are left
    /// out of the motion bins.
    pub excluded_tracks: usize,
    /// Exact per-axis factors `[256/W, 256/H]` applied to the coordinates of
    /// each native `HxW` size before any metric was computed.
    pub coordinate_scales: BTreeMap<String, [f64; 2]>,
}

impl EvalReport {
    /// Checks internal consistency: every percentage in `[0, 100]`, the
    /// threshold sweep over exactly {1, 2, 4, 8, 16} px, and `delta_avg`
    /// equal to the mean of the per-threshold values within 1e-9.
    pub fn validate(&self) -> Result<()> {
        let pct = |name: &str, v: f64| -> Result<()> {
            if v.is_finite() && (0.0..=100.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} is not a percentage in [0, 100]")))
            }
        };
        pct("aj", self.aj)?;
        pct("delta_avg", self.delta_avg)?;
        pct("oa", self.oa)?;
        let expected: Vec<u32> = DELTA_THRESHOLDS.iter().map(|&t| t as u32).collect();
        let got: Vec<u32> = self.per_threshold.keys().copied().collect();
        if got != expected {
            return Err(Error::invalid(format!("per_threshold keys {got:?} differ from {expected:?}")));
        }
        for (tau, &v) in &self.per_threshold {
            pct(&format!("per_threshold[{tau}]"), v)?;
        }
        let mean = self.per_threshold.values().sum::<f64>() / self.per_threshold.len() as f64;
        if (mean - self.delta_avg).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "delta_avg {} differs from the per-threshold mean {mean}",
                self.delta_avg
            )));
        }
        for (key, s) in &self.strata {
            pct(&format!("strata[{key}].aj"), s.aj)?;
            pct(&format!("strata[{key}].delta_avg"), s.delta_avg)?;
            pct(&format!("strata[{key}].oa"), s.oa)?;
        }
        for (key, &v) in &self.corruption_curves {
            pct(&format!("corruption_curves[{key}]"), v)?;
        }
        Ok(())
    }
}

/// Switches of a full evaluation run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalOptions {
    /// Emit per-difficulty-bin metrics.
    pub stratify: bool,
    /// `(kind, severity in 1..=5)` cells to sweep; each cell re-runs tracking
    /// on a corrupted copy of every clip.
    pub corruptions: Vec<(CorruptionKind, u8)>,
    /// Base seed of the corruption noise streams.
    pub corruption_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { stratify: true, corruptions: Vec::new(), corruption_seed: 0 }
    }
}

fn motion_cell(bin: MotionBin) -> Option<&'static str> {
    match bin {
        MotionBin::Low => Some("motion/low"),
        MotionBin::Mid => Some("motion/mid"),
        MotionBin::High => Some("motion/high"),
        MotionBin::OutOfRange => None,
    }
}

fn reappearance_cell(bin: ReappearanceBin) -> &'static str {
    match bin {
        ReappearanceBin::Low => "reappearance/low",
        ReappearanceBin::Mid => "reappearance/mid",
        ReappearanceBin::High => "reappearance/high",
    }
}

/// Runs a tracker over an evaluation set and assembles the full report.
///
/// Each ground-truth track is queried once, at its first visible frame.
/// Clips keep their native resolution for inference; predicted and
/// ground-truth coordinates are then mapped into the 256x256 evaluation frame
/// with the exact factors recorded in the report, and every metric is
/// computed there.
pub fn evaluate(tracker: &Tracker<f32>, clips: &[SyntheticClip], opts: &EvalOptions) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::invalid("evaluation needs at least one clip"));
    }
    let queryable: Vec<(usize, &SyntheticClip)> = clips
        .iter()
        .enumerate()
        .filter(|(_, c)| c.tracks.iter().any(|t| t.first_visible().is_some()))
        .collect();
    if queryable.is_empty() {
        return Err(Error::invalid("no clip has a track with a visible frame to query"));
    }
    let mut pooled: Vec<TrackEval> = Vec::new();
    let mut labels: Vec<datagen::StratumLabel> = Vec::new();
    let mut queries_per_clip: Vec<Vec<TrackQuery<f32>>> = Vec::new();
    let mut coordinate_scales = BTreeMap::new();
    for &(_, clip) in &queryable {
        let (h, w) = (clip.height(), clip.width());
        let scale = eval_scale(h, w);
        coordinate_scales.insert(format!("{h}x{w}"), [scale.0 as f64, scale.1 as f64]);
        let queries = first_visible_queries(clip)?;
        let outputs = tracker.track(&clip.video, &queries)?;
        let evals = pair_predictions(&outputs, &clip.tracks, h, w)?;
        let diag = ((h * h + w * w) as f32).sqrt();
        for (output, eval) in outputs.iter().zip(evals) {
            let gt = clip
                .tracks
                .iter()
                .find(|t| t.id as i64 == output.query.id)
                .expect("pairing guarantees a counterpart");
            labels.push(datagen::stratify(gt, diag)?);
            pooled.push(eval);
        }
        queries_per_clip.push(queries);
    }
    let mut corruption_curves = BTreeMap::new();
    for &(kind, severity) in &opts.corruptions {
        let kind_idx =
            CorruptionKind::ALL.iter().position(|&k| k == kind).expect("kind is one of ALL") as u64;
        let mut cell: Vec<TrackEval> = Vec::new();
        for (pos, &(clip_idx, clip)) in queryable.iter().enumerate() {
            let seed = opts
                .corruption_seed
                .wrapping_add(kind_idx << 48)
                .wrapping_add((severity as u64) << 40)
                .wrapping_add(clip_idx as u64);
            let video = datagen::corrupt(&clip.video, kind, severity, seed)?;
            let outputs = tracker.track(&video, &queries_per_clip[pos])?;
            cell.extend(pair_predictions(&outputs, &clip.tracks, clip.height(), clip.width())?);
        }
        corruption_curves.insert(format!("{}:{severity}", kind.name()), delta_x_avg(&cell)?);
    }

    assemble_report(
        &pooled,
        if opts.stratify { Some(&labels) } else { None },
        corruption_curves,
        coordinate_scales,
        queryable.len(),
    )
}

/// Builds a validated [`EvalReport`] from already-paired tracks. `labels`
/// turns on the stratified tables and must align with `pooled`.
pub fn assemble_report(
    pooled: &[TrackEval],
    labels: Option<&[datagen::StratumLabel]>,
    corruption_curves: BTreeMap<String, f64>,
    coordinate_scales: BTreeMap<String, [f64; 2]>,
    clips: usize,
) -> Result<EvalReport> {
    let overall = compute_metrics(pooled)?;
    let mut strata = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut excluded_tracks = 0usize;
    if let Some(labels) = labels {
        if labels.len() != pooled.len() {
            return Err(Error::invalid(format!(
                "{} stratum labels for {} tracks",
                labels.len(),
                pooled.len()
            )));
        }
        let mut bins: BTreeMap<&'static str, Vec<usize>> = BTreeMap::new();
        for (i, label) in labels.iter().enumerate() {
            match motion_cell(label.motion) {
                Some(key) => bins.entry(key).or_default().push(i),
                None => excluded_tracks += 1,
            }
            bins.entry(reappearance_cell(label.reappearance)).or_default().push(i);
        }
        for (key, members) in bins {
            let evals: Vec<TrackEval> = members.iter().map(|&i| pooled[i].clone()).collect();
            let m = compute_metrics(&evals)?;
            counts.insert(key.to_string(), m.frames);
            strata.insert(
                key.to_string(),
                StratumMetrics {
                    aj: m.aj,
                    delta_avg: m.delta_avg,
                    oa: m.oa,
                    tracks: members.len(),
                    points: m.frames,
                },
            );
        }
    }
    let per_threshold: BTreeMap<u32, f64> = DELTA_THRESHOLDS
        .iter()
        .zip(overall.per_threshold.iter())
        .map(|(&t, &v)| (t as u32, v))
        .collect();
    let report = EvalReport {
        aj: overall.aj,
        delta_avg: overall.delta_avg,
        per_threshold,
        oa: overall.oa,
        strata,
        corruption_curves,
        counts,
        clips,
        tracks: pooled.len(),
        points: overall.frames,
        excluded_tracks,
        coordinate_scales,
    };
    report.validate()?;
    Ok(report)
}

const MOTION_ROWS: [(&str, &str); 3] =
    [("motion/low", "[0, 0.5)"), ("motion/mid", "[0.5, 1.5)"), ("motion/high", "[1.5, 5)")];
const REAPPEARANCE_ROWS: [(&str, &str); 3] =
    [("reappearance/low", "0"), ("reappearance/mid", "1-2"), ("reappearance/high", "3+")];

fn stratum_row(md: &mut String, report: &EvalReport, key: &str, label: &str) {
    use std::fmt::Write;
    match report.strata.get(key) {
        Some(s) => {
            let _ = writeln!(
                md,
                "| {label} | {:.2} | {:.2} | {:.2} | {} | {} |",
                s.aj, s.delta_avg, s.oa, s.tracks, s.points
            );
        }
        None => {
            let _ = writeln!(md, "| {label} | - | - | - | 0 | 0 |");
        }
    }
}

/// Renders the report as the markdown table bundle written next to
/// `report.json`. The header documents the exact coordinate factors.
pub fn render_markdown(report: &EvalReport) -> String {
    use std::fmt::Write;
    let mut md = String::new();
    let _ = writeln!(md, "# Tracking evaluation");
    let _ = writeln!(md);
    let _ = writeln!(
        md,
        "All metrics are percentages computed in the {0}x{0} evaluation frame.",
        EVAL_RESOLUTION
    );
    let _ = writeln!(
        md,
        "Native coordinates are mapped per axis as `x * 256/W`, `y * 256/H` with the exact factors below."
    );
    let _ = writeln!(md);
    let _ = writeln!(md, "| native (HxW) | scale x | scale y |");
    let _ = writeln!(md, "|---|---|---|");
    for (native, s) in &report.coordinate_scales {
        let _ = writeln!(md, "| {native} | {} | {} |", s[0], s[1]);
    }
    let _ = writeln!(md);
    let _ = writeln!(md, "## Overall");
    let _ = writeln!(md);
    let _ = writeln!(md, "| AJ | delta_avg | OA | clips | tracks | points |");
    let _ = writeln!(md, "|---|---|---|---|---|---|");
    let _ = writeln!(
        md,
        "| {:.2} | {:.2} | {:.2} | {} | {} | {} |",
        report.aj, report.delta_avg, report.oa, report.clips, report.tracks, report.points
    );
    let _ = writeln!(md);
    let _ = writeln!(md, "### Accuracy per threshold (px)");
    let _ = writeln!(md);
    let keys: Vec<String> = report.per_threshold.keys().map(|k| k.to_string()).collect();
    let _ = writeln!(md, "| {} |", keys.join(" | "));
    let _ = writeln!(md, "|{}", "---|".repeat(keys.len()));
    let vals: Vec<String> = report.per_threshold.values().map(|v| format!("{v:.2}")).collect();
    let _ = writeln!(md, "| {} |", vals.join(" | "));
    if !report.strata.is_empty() {
        let _ = writeln!(md);
        let _ = writeln!(md, "## Motion dynamics");
        let _ = writeln!(md);
        let _ = writeln!(md, "Mean visible-pair displacement as a percentage of the frame diagonal.");
        let _ = writeln!(md);
        let _ = writeln!(md, "| bin (%) | AJ | delta_avg | OA | tracks | points |");
        let _ = writeln!(md, "|---|---|---|---|---|---|");
        for (key, label) in MOTION_ROWS {
            stratum_row(&mut md, report, key, label);
        }
        let _ = writeln!(md);
        let _ = writeln!(
            md,
            "Tracks at 5% or more: {} (kept in the overall pool, excluded from these bins).",
            report.excluded_tracks
        );
        let _ = writeln!(md);
        let _ = writeln!(md, "## Reappearances");
        let _ = writeln!(md);
        let _ = writeln!(md, "Occluded-to-visible transitions per track.");
        let _ = writeln!(md);
        let _ = writeln!(md, "| bin | AJ | delta_avg | OA | tracks | points |");
        let _ = writeln!(md, "|---|---|---|---|---|---|");
        for (key, label) in REAPPEARANCE_ROWS {
            stratum_row(&mut md, report, key, label);
        }
    }
    if !report.corruption_curves.is_empty() {
        let _ = writeln!(md);
        let _ = writeln!(md, "## Corruption sweep");
        let _ = writeln!(md);
        let _ = writeln!(md, "| kind | severity | delta_avg |");
        let _ = writeln!(md, "|---|---|---|");
        for (key, &v) in &report.corruption_curves {
            let (kind, severity) = key.split_once(':').unwrap_or((key.as_str(), "?"));
            let _ = writeln!(md, "| {kind} | {severity} | {v:.2} |");
        }
    }
    md
}

/// Writes `report.json` and `report.md` into `dir`, creating it if needed.
pub fn write_reports(report: &EvalReport, dir: &Path) -> Result<()> {
    report.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::CorruptArtifact { path: json_path.clone(), reason: e.to_string() })?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let md_path = dir.join("report.md");
    std::fs::write(&md_path, render_markdown(report)).map_err(|e| Error::io(&md_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn perfect_track(n: usize) -> TrackEval {
        let pos: Vec<_> = (0..n).map(|i| Point2D::new(i as f32 * 3.0, 7.0)).collect();
        TrackEval {
            pred_pos: pos.clone(),
            pred_vis: vec![1.0; n],
            gt_pos: pos,
            gt_vis: vec![true; n],
        }
    }

    #[test]
    fn perfect_predictions_score_100_everywhere() {
        let tracks = vec![perfect_track(4), perfect_track(2)];
        let m = compute_metrics(&tracks).unwrap();
        assert_eq!(m.per_threshold, [100.0; 5]);
        assert_eq!(m.delta_avg, 100.0);
        assert_eq!(m.oa, 100.0);
        assert_eq!(m.aj, 100.0);
        assert_eq!(m.frames, 6);
    }

    #[test]
    fn two_frame_error_case_averages_80() {
        let t = TrackEval {
            pred_pos: vec![Point2D::new(0.5, 0.0), Point2D::new(3.0, 0.0)],
            pred_vis: vec![1.0, 1.0],
            gt_pos: vec![Point2D::new(0.0, 0.0), Point2D::new(0.0, 0.0)],
            gt_vis: vec![true, true],
        };
        let per = delta_per_threshold(&[t.clone()]).unwrap();
        assert_eq!(per, [50.0, 50.0, 100.0, 100.0, 100.0]);
        assert_abs_diff_eq!(delta_x_avg(&[t]).unwrap(), 80.0, epsilon = 1e-12);
    }

    #[test]
    fn mixed_visibility_case_gives_aj_30() {
        let t = TrackEval {
            pred_pos: vec![Point2D::new(3.0, 0.0), Point2D::new(0.0, 0.0)],
            pred_vis: vec![1.0, 1.0],
            gt_pos: vec![Point2D::new(0.0, 0.0), Point2D::new(0.0, 0.0)],
            gt_vis: vec![true, false],
        };
        assert_abs_diff_eq!(average_jaccard(&[t]).unwrap(), 30.0, epsilon = 1e-12);
    }

    #[test]
    fn occluded_gt_frames_do_not_affect_delta() {
        let base = TrackEval {
            pred_pos: vec![Point2D::new(0.0, 0.0), Point2D::new(100.0, 100.0)],
            pred_vis: vec![1.0, 0.0],
            gt_pos: vec![Point2D::new(0.0, 0.0), Point2D::new(0.0, 0.0)],
            gt_vis: vec![true, false],
        };
        let mut moved = base.clone();
        moved.pred_pos[1] = Point2D::new(-40.0, 3.0);
        assert_eq!(
            delta_per_threshold(&[base]).unwrap(),
            delta_per_threshold(&[moved]).unwrap()
        );
    }

    #[test]
    fn threshold_is_inclusive() {
        let t = TrackEval {
            pred_pos: vec![Point2D::new(4.0, 0.0)],
            pred_vis: vec![1.0],
            gt_pos: vec![Point2D::new(0.0, 0.0)],
            gt_vis: vec![true],
        };
        let per = delta_per_threshold(&[t]).unwrap();
        assert_eq!(per, [0.0, 0.0, 100.0, 100.0, 100.0]);
    }

    #[test]
    fn visibility_boundary_is_strictly_above_half() {
        let t = TrackEval {
            pred_pos: vec![Point2D::new(0.0, 0.0); 2],
            pred_vis: vec![0.5, 0.5],
            gt_pos: vec![Point2D::new(0.0, 0.0); 2],
            gt_vis: vec![true, false],
        };
        assert_eq!(occlusion_accuracy(&[t]).unwrap(), 50.0);
    }

    #[test]
    fn complemented_visibility_flips_accuracy() {
        let t = TrackEval {
            pred_pos: vec![Point2D::new(0.0, 0.0); 4],
            pred_vis: vec![0.9, 0.2, 0.7, 0.1],
            gt_pos: vec![Point2D::new(0.0, 0.0); 4],
            gt_vis: vec![true, true, false, false],
        };
        let mut flipped = t.clone();
        for v in &mut flipped.pred_vis {
            *v = 1.0 - *v;
        }
        let a = occlusion_accuracy(&[t]).unwrap();
        let b = occlusion_accuracy(&[flipped]).unwrap();
        assert_abs_diff_eq!(a + b, 100.0, epsilon = 1e-12);
    }

    #[test]
    fn all_occluded_predictions_zero_jaccard() {
        let t = TrackEval {
            pred_pos: vec![Point2D::new(0.0, 0.0); 3],
            pred_vis: vec![0.0; 3],
            gt_pos: vec![Point2D::new(0.0, 0.0); 3],
            gt_vis: vec![true, true, false],
        };
        assert_eq!(average_jaccard(&[t]).unwrap(), 0.0);
    }

    #[test]
    fn aj_equals_delta_when_every_threshold_is_all_hit_or_all_miss() {
        // With perfect visibility, a visible prediction outside a threshold
        // counts as a false positive and a false negative at once, so the two
        // metrics only coincide per threshold when misses are absent (both
        // 100) or hits are absent (both 0).
        let t = TrackEval {
            pred_pos: vec![Point2D::new(3.0, 0.0); 3],
            pred_vis: vec![1.0; 3],
            gt_pos: vec![Point2D::new(0.0, 0.0); 3],
            gt_vis: vec![true; 3],
        };
        let aj = average_jaccard(&[t.clone()]).unwrap();
        let davg = delta_x_avg(&[t]).unwrap();
        assert_abs_diff_eq!(aj, 60.0, epsilon = 1e-12);
        assert_abs_diff_eq!(aj, davg, epsilon = 1e-12);
    }

    #[test]
    fn metrics_are_order_independent() {
        let a = TrackEval {
            pred_pos: vec![Point2D::new(1.5, 0.0), Point2D::new(0.0, 9.0)],
            pred_vis: vec![0.9, 0.3],
            gt_pos: vec![Point2D::new(0.0, 0.0); 2],
            gt_vis: vec![true, true],
        };
        let b = TrackEval {
            pred_pos: vec![Point2D::new(0.0, 0.2)],
            pred_vis: vec![0.6],
            gt_pos: vec![Point2D::new(0.0, 0.0)],
            gt_vis: vec![false],
        };
        let fwd = compute_metrics(&[a.clone(), b.clone()]).unwrap();
        let rev = compute_metrics(&[b, a]).unwrap();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn misaligned_tracks_are_rejected() {
        let t = TrackEval {
            pred_pos: vec![Point2D::new(0.0, 0.0); 2],
            pred_vis: vec![1.0],
            gt_pos: vec![Point2D::new(0.0, 0.0); 2],
            gt_vis: vec![true, true],
        };
        assert!(compute_metrics(&[t]).is_err());
        assert!(compute_metrics(&[]).is_err());
    }

    #[test]
    fn positions_only_marks_everything_visible() {
        let t = TrackEval::positions_only(
            vec![Point2D::new(1.0, 1.0); 3],
            vec![Point2D::new(1.0, 1.0); 3],
            vec![true, false, true],
        );
        assert_eq!(t.pred_vis, vec![1.0; 3]);
        assert_eq!(occlusion_accuracy(&[t]).unwrap(), 100.0 * 2.0 / 3.0);
    }

    #[test]
    fn metrics_match_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let n_tracks = rng.random_range(1..=3usize);
            let tracks: Vec<TrackEval> = (0..n_tracks)
                .map(|_| {
                    let frames = rng.random_range(1..=6usize);
                    TrackEval {
                        pred_pos: (0..frames)
                            .map(|_| Point2D::new(rng.random_range(-4.0..20.0), rng.random_range(-4.0..20.0)))
                            .collect(),
                        pred_vis: (0..frames).map(|_| rng.random_range(0.0..1.0)).collect(),
                        gt_pos: (0..frames)
                            .map(|_| Point2D::new(rng.random_range(0.0..16.0), rng.random_range(0.0..16.0)))
                            .collect(),
                        gt_vis: (0..frames).map(|_| rng.random_bool(0.7)).collect(),
                    }
                })
                .collect();

            let mut flat: Vec<(f64, bool, bool)> = Vec::new();
            for t in &tracks {
                for f in 0..t.pred_pos.len() {
                    let dx = (t.pred_pos[f].x - t.gt_pos[f].x) as f64;
                    let dy = (t.pred_pos[f].y - t.gt_pos[f].y) as f64;
                    flat.push((dx.hypot(dy), t.pred_vis[f] as f64 > 0.5, t.gt_vis[f]));
                }
            }
            let mut naive_per = [0.0f64; 5];
            for (slot, tau) in naive_per.iter_mut().zip(DELTA_THRESHOLDS) {
                let total = flat.iter().filter(|(_, _, gt)| *gt).count();
                let hits = flat.iter().filter(|(d, _, gt)| *gt && *d <= tau).count();
                *slot = if total == 0 { 100.0 } else { 100.0 * hits as f64 / total as f64 };
            }
            assert_eq!(delta_per_threshold(&tracks).unwrap(), naive_per);

            let matches = flat.iter().filter(|(_, pv, gt)| pv == gt).count();
            assert_eq!(
                occlusion_accuracy(&tracks).unwrap(),
                100.0 * matches as f64 / flat.len() as f64
            );

            let mut naive_aj = 0.0f64;
            for tau in DELTA_THRESHOLDS {
                let tp = flat.iter().filter(|(d, pv, gt)| *gt && *pv && *d <= tau).count();
                let fp = flat.iter().filter(|(d, pv, gt)| *pv && !(*gt && *d <= tau)).count();
                let fn_ = flat.iter().filter(|(d, pv, gt)| *gt && !(*pv && *d <= tau)).count();
                let union = tp + fp + fn_;
                naive_aj += if union == 0 { 100.0 } else { 100.0 * tp as f64 / union as f64 };
            }
            assert_eq!(average_jaccard(&tracks).unwrap(), naive_aj / 5.0);
        }
    }

    fn tiny_report() -> EvalReport {
        let per_threshold: BTreeMap<u32, f64> =
            [(1, 50.0), (2, 75.0), (4, 100.0), (8, 100.0), (16, 100.0)].into_iter().collect();
        let delta_avg = per_threshold.values().sum::<f64>() / 5.0;
        let cell = StratumMetrics { aj: 60.0, delta_avg: 85.0, oa: 90.0, tracks: 2, points: 8 };
        let strata: BTreeMap<String, StratumMetrics> =
            [("motion/low".to_string(), cell.clone()), ("reappearance/low".to_string(), cell)]
                .into_iter()
                .collect();
        let counts = strata.keys().map(|k| (k.clone(), 8usize)).collect();
        EvalReport {
            aj: 70.0,
            delta_avg,
            per_threshold,
            oa: 90.0,
            strata,
            corruption_curves: [("gaussian_noise:1".to_string(), 80.0)].into_iter().collect(),
            counts,
            clips: 1,
            tracks: 2,
            points: 8,
            excluded_tracks: 0,
            coordinate_scales: [("24x24".to_string(), [(256.0f32 / 24.0) as f64; 2])]
                .into_iter()
                .collect(),
        }
    }

    #[test]
    fn report_validation_pins_internal_consistency() {
        tiny_report().validate().unwrap();

        let mut r = tiny_report();
        r.delta_avg += 1e-6;
        assert!(r.validate().is_err());

        let mut r = tiny_report();
        r.oa = 100.5;
        assert!(r.validate().is_err());

        let mut r = tiny_report();
        r.per_threshold.remove(&16);
        assert!(r.validate().is_err());

        let mut r = tiny_report();
        r.corruption_curves.insert("motion_blur:2".to_string(), -0.1);
        assert!(r.validate().is_err());
    }

    #[test]
    fn pairing_rescales_each_axis_into_the_evaluation_frame() {
        // Native 256x128 (HxW): x stretches by 2, y stays.
        let gt = GroundTruthTrack {
            id: 7,
            positions: vec![Point2D::new(10.0, 50.0), Point2D::new(10.0, 50.0)],
            visible: vec![true, true],
        };
        let pred = TrackOutput {
            query: TrackQuery { id: 7, frame: 0, pos: Point2D::new(10.0, 50.0) },
            positions: vec![Point2D::new(11.0, 50.0), Point2D::new(10.0, 51.5)],
            vis: vec![1.0, 1.0],
            conf: vec![0.5, 0.5],
        };
        let evals = pair_predictions(&[pred], &[gt], 256, 128).unwrap();
        let per = delta_per_threshold(&evals).unwrap();
        assert_eq!(per, [0.0, 100.0, 100.0, 100.0, 100.0]);
    }

    #[test]
    fn pairing_rejects_mismatched_inputs() {
        let gt = GroundTruthTrack {
            id: 1,
            positions: vec![Point2D::new(1.0, 1.0); 2],
            visible: vec![true; 2],
        };
        let pred = |id: i64, frames: usize| TrackOutput {
            query: TrackQuery { id, frame: 0, pos: Point2D::new(1.0, 1.0) },
            positions: vec![Point2D::new(1.0, 1.0); frames],
            vis: vec![1.0; frames],
            conf: vec![0.5; frames],
        };
        assert!(pair_predictions(&[pred(9, 2)], &[gt.clone()], 16, 16).is_err());
        assert!(pair_predictions(&[pred(1, 3)], &[gt.clone()], 16, 16).is_err());
        assert!(pair_predictions(&[pred(1, 2), pred(1, 2)], &[gt], 16, 16).is_err());
    }

    fn tiny_tracker() -> crate::refiner::Tracker<f32> {
        use crate::matching::{FusionMode, PyramidConfig, COST_EMBED_DIM};
        use crate::refiner::{RefinerConfig, TrackerConfig};
        let config = TrackerConfig {
            dit: crate::dit::DiTConfig {
                layers: 2,
                heads: 2,
                d_head: 8,
                patch_stride: 4,
                d_video: 6,
                max_frames: 8,
                lora_rank: 2,
                extract_layer: 2,
                extract_head: 0,
            },
            pyramid: PyramidConfig { num_scales: 2, radius: 1, stride: 4 },
            fusion: FusionMode::CostConcat,
            refiner: RefinerConfig {
                width: 32,
                heads: 2,
                blocks: 1,
                num_bands: 3,
                iterations: 2,
                d_embed: COST_EMBED_DIM,
            },
            conv_channels: 6,
            use_lora: true,
            chunk_len: 8,
        };
        Tracker::new(config, 3).unwrap()
    }

    fn eval_clips(n: usize) -> Vec<SyntheticClip> {
        use crate::datagen::{generate_clip, GeneratorConfig};
        (0..n)
            .map(|i| {
                let cfg = GeneratorConfig {
                    frames: 3,
                    height: 24,
                    width: 24,
                    num_objects: (1, 2),
                    tracks_per_object: 2,
                    speed_range: (0.2, 1.0),
                    occluders: 0,
                    size_range: (3.0, 6.0),
                    ..GeneratorConfig::default()
                };
                generate_clip(&cfg, 90 + i as u64).unwrap()
            })
            .collect()
    }

    #[test]
    fn evaluate_emits_a_consistent_deterministic_report() {
        let tracker = tiny_tracker();
        let clips = eval_clips(2);
        let opts = EvalOptions {
            stratify: true,
            corruptions: vec![(CorruptionKind::Brightness, 2)],
            corruption_seed: 5,
        };
        let report = evaluate(&tracker, &clips, &opts).unwrap();
        report.validate().unwrap();

        assert_eq!(report.clips, 2);
        let total_tracks: usize = clips.iter().map(|c| c.tracks.len()).sum();
        assert_eq!(report.tracks, total_tracks);
        assert_eq!(report.points, 3 * total_tracks);
        assert_eq!(report.coordinate_scales["24x24"], [(256.0f32 / 24.0) as f64; 2]);

        let axis_points = |prefix: &str| -> usize {
            report
                .counts
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(_, &v)| v)
                .sum()
        };
        assert_eq!(axis_points("reappearance/"), report.points);
        assert_eq!(axis_points("motion/") + 3 * report.excluded_tracks, report.points);

        assert_eq!(report.corruption_curves.len(), 1);
        assert!(report.corruption_curves.contains_key("brightness:2"));

        let again = evaluate(&tracker, &clips, &opts).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn stratification_partitions_tracks_and_excludes_teleporters() {
        use ndarray::Array3;
        let frames = 4;
        let video: Vec<crate::numerics::Grid2D<f32>> = (0..frames)
            .map(|t| {
                crate::numerics::Grid2D::new(Array3::from_elem((32, 32, 3), 0.2 + 0.1 * t as f32))
                    .unwrap()
            })
            .collect();
        let slow = GroundTruthTrack {
            id: 0,
            positions: vec![Point2D::new(5.5, 7.0); 4],
            visible: vec![true; 4],
        };
        let teleporter = GroundTruthTrack {
            id: 1,
            positions: vec![
                Point2D::new(2.0, 2.0),
                Point2D::new(28.0, 28.0),
                Point2D::new(2.0, 2.0),
                Point2D::new(28.0, 28.0),
            ],
            visible: vec![true; 4],
        };
        let reappearing = GroundTruthTrack {
            id: 2,
            positions: vec![
                Point2D::new(10.0, 10.0),
                Point2D::new(10.2, 10.0),
                Point2D::new(10.4, 10.0),
                Point2D::new(10.6, 10.0),
            ],
            visible: vec![true, false, true, true],
        };
        let clip = SyntheticClip { video, tracks: vec![slow, teleporter, reappearing], seed: 0 };

        let report = evaluate(&tiny_tracker(), &[clip], &EvalOptions::default()).unwrap();
        assert_eq!(report.tracks, 3);
        assert_eq!(report.points, 12);
        assert_eq!(report.excluded_tracks, 1);
        assert_eq!(report.counts.get("motion/low"), Some(&8));
        assert!(!report.counts.contains_key("motion/mid"));
        assert!(!report.counts.contains_key("motion/high"));
        assert_eq!(report.counts.get("reappearance/low"), Some(&8));
        assert_eq!(report.counts.get("reappearance/mid"), Some(&4));
        assert_eq!(report.strata["reappearance/mid"].tracks, 1);
    }

    #[test]
    fn markdown_report_documents_exact_scales_and_all_tables() {
        let md = render_markdown(&tiny_report());
        assert!(md.contains("## Overall"));
        assert!(md.contains("## Motion dynamics"));
        assert!(md.contains("## Reappearances"));
        assert!(md.contains("## Corruption sweep"));
        assert!(md.contains("| gaussian_noise | 1 | 80.00 |"));
        let exact = format!("| 24x24 | {0} | {0} |", (256.0f32 / 24.0) as f64);
        assert!(md.contains(&exact));
        assert!(md.contains("| [0, 0.5) | 60.00 |"));
        assert!(md.contains("| [0.5, 1.5) | - | - | - | 0 | 0 |"));
    }

    #[test]
    fn report_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let report = tiny_report();
        write_reports(&report, dir.path()).unwrap();
        let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert!(dir.path().join("report.md").exists());
        let mut bad = report;
        bad.aj = f64::NAN;
        assert!(write_reports(&bad, dir.path()).is_err());
    }
}
