//! Loss terms and the training loop for the tracker.
//!
//! Training optimizes the unit-weighted sum of three losses over the
//! refinement iterations, each discounted by `gamma^(T - t)` so later
//! iterations dominate: a Huber penalty on position error with occluded
//! frames down-weighted 5x, binary cross-entropy on visibility, and binary
//! cross-entropy on confidence against labels that re-derive from each
//! iteration's own positions.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::autograd::{Adam, Graph, ParamStore, Var};
use crate::checkpoint::{self, Manifest};
use crate::datagen::SyntheticClip;
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::refiner::{TapeTrack, TrackQuery, Tracker};

/// Constants of the three-term loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Pixel threshold where the position penalty turns linear.
    pub huber_threshold: f64,
    /// Weight on position error at occluded frames.
    pub occluded_weight: f64,
    /// Per-iteration discount.
    pub gamma: f64,
    /// Positive confidence label inside this radius (strict).
    pub conf_radius: f64,
    /// Refinement iterations the estimates must cover.
    pub iterations: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            huber_threshold: 6.0,
            occluded_weight: 0.2,
            gamma: 0.8,
            conf_radius: 12.0,
            iterations: 4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.huber_threshold <= 0.0 || self.conf_radius <= 0.0 {
            return Err(Error::invalid("loss thresholds must be positive"));
        }
        if self.occluded_weight <= 0.0 || self.occluded_weight > 1.0 {
            return Err(Error::invalid("occluded weight must be in (0, 1]"));
        }
        if self.gamma <= 0.0 || self.gamma > 1.0 {
            return Err(Error::invalid("gamma must be in (0, 1]"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("at least one refinement iteration is required"));
        }
        Ok(())
    }
}

/// Ground truth laid out like the estimate rows: point outer, frame inner.
#[derive(Debug, Clone)]
pub struct TrackTargets<S> {
    /// `[rows, 2]` positions.
    pub pos: Array2<S>,
    /// Per-row visibility flags.
    pub vis: Vec<bool>,
}

impl<S: Scalar> TrackTargets<S> {
    /// Stacks the ground-truth tracks selected for each query, in query
    /// order. Every track must span `frames` frames.
    pub fn from_tracks(
        clip_tracks: &[crate::datagen::GroundTruthTrack],
        selection: &[usize],
        frames: usize,
    ) -> Result<Self> {
        let rows = selection.len() * frames;
        let mut pos = Array2::<S>::zeros((rows, 2));
        let mut vis = Vec::with_capacity(rows);
        for (n, &ti) in selection.iter().enumerate() {
            let track = clip_tracks
                .get(ti)
                .ok_or_else(|| Error::invalid(format!("track index {ti} out of range")))?;
            if track.positions.len() != frames || track.visible.len() != frames {
                return Err(Error::invalid(format!(
                    "track {ti} spans {} frames, expected {frames}",
                    track.positions.len()
                )));
            }
            for f in 0..frames {
                pos[(n * frames + f, 0)] = S::from_f64_c(track.positions[f].x as f64);
                pos[(n * frames + f, 1)] = S::from_f64_c(track.positions[f].y as f64);
                vis.push(track.visible[f]);
            }
        }
        Ok(TrackTargets { pos, vis })
    }
}

/// The three loss terms and their sum, live on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub track: Var,
    pub vis: Var,
    pub conf: Var,
    pub total: Var,
}

/// Scalar loss values read off the tape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub track: f64,
    pub vis: f64,
    pub conf: f64,
    pub total: f64,
}

impl LossVars {
    pub fn breakdown<S: Scalar>(&self, g: &Graph<S>) -> LossBreakdown {
        LossBreakdown {
            track: g.scalar_value(self.track).to_f64(),
            vis: g.scalar_value(self.vis).to_f64(),
            conf: g.scalar_value(self.conf).to_f64(),
            total: g.scalar_value(self.total).to_f64(),
        }
    }
}

/// Builds all three loss terms over the recorded iterations.
///
/// Iteration `t` (1-based) carries weight `gamma^(T-t)`. Position error is
/// the Huber penalty of the per-frame distance, occluded frames scaled by
/// `occluded_weight`, averaged over rows. Visibility and confidence use
/// binary cross-entropy on the logits; confidence labels are whether that
/// iteration's own position landed strictly inside `conf_radius`, recomputed
/// from the tape values at every iteration.
pub fn losses_on_tape<S: Scalar>(
    g: &mut Graph<S>,
    tape: &TapeTrack<S>,
    targets: &TrackTargets<S>,
    cfg: &LossConfig,
) -> Result<LossVars> {
    cfg.validate()?;
    let rows = tape.num_points * tape.frames;
    if tape.iterations.len() != cfg.iterations {
        return Err(Error::invalid(format!(
            "expected {} refinement iterations on the tape, found {}",
            cfg.iterations,
            tape.iterations.len()
        )));
    }
    if targets.pos.dim() != (rows, 2) || targets.vis.len() != rows {
        return Err(Error::invalid(format!(
            "targets cover {} rows, estimates cover {rows}",
            targets.vis.len()
        )));
    }

    let gt = g.constant2(targets.pos.clone());
    let mut weights = Array2::<S>::zeros((rows, 1));
    let mut vis_labels = ArrayD::<S>::zeros(IxDyn(&[rows, 1]));
    for (i, &v) in targets.vis.iter().enumerate() {
        weights[(i, 0)] = S::from_f64_c(if v { 1.0 } else { cfg.occluded_weight });
        vis_labels[[i, 0]] = S::from_f64_c(if v { 1.0 } else { 0.0 });
    }
    let weights = g.constant2(weights);

    let t_total = cfg.iterations;
    let delta = S::from_f64_c(cfg.huber_threshold);
    let radius = cfg.conf_radius;
    let mut track_term: Option<Var> = None;
    let mut vis_term: Option<Var> = None;
    let mut conf_term: Option<Var> = None;
    let accum = |g: &mut Graph<S>, slot: &mut Option<Var>, v: Var| {
        *slot = Some(match slot.take() {
            Some(prev) => g.add(prev, v),
            None => v,
        });
    };
    for (idx, est) in tape.iterations.iter().enumerate() {
        let discount = S::from_f64_c(cfg.gamma.powi((t_total - 1 - idx) as i32));

        let err = g.sub(est.pos, gt);
        let hub = g.huber_norm(err, delta);
        let weighted = g.mul(hub, weights);
        let mean = g.mean_all(weighted);
        let term = g.scale(mean, discount);
        accum(g, &mut track_term, term);

        let vis_bce = g.bce_with_logits(est.vis, vis_labels.clone());
        let mean = g.mean_all(vis_bce);
        let term = g.scale(mean, discount);
        accum(g, &mut vis_term, term);

        let pos_now = g.value2(est.pos).to_owned();
        let mut conf_labels = ArrayD::<S>::zeros(IxDyn(&[rows, 1]));
        for i in 0..rows {
            let dx = (pos_now[(i, 0)] - targets.pos[(i, 0)]).to_f64();
            let dy = (pos_now[(i, 1)] - targets.pos[(i, 1)]).to_f64();
            let within = (dx * dx + dy * dy).sqrt() < radius;
            conf_labels[[i, 0]] = S::from_f64_c(if within { 1.0 } else { 0.0 });
        }
        let conf_bce = g.bce_with_logits(est.conf, conf_labels);
        let mean = g.mean_all(conf_bce);
        let term = g.scale(mean, discount);
        accum(g, &mut conf_term, term);
    }

    let track = track_term.expect("at least one iteration");
    let vis = vis_term.expect("at least one iteration");
    let conf = conf_term.expect("at least one iteration");
    let tv = g.add(track, vis);
    let total = g.add(tv, conf);
    Ok(LossVars { track, vis, conf, total })
}

/// Schedule and batch shape of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Peak learning rate; decays to zero on a half-cosine.
    pub lr: f64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub queries_per_clip: usize,
    pub loss: LossConfig,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 3e-4,
            clip_norm: 1.0,
            queries_per_clip: 16,
            loss: LossConfig::default(),
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.queries_per_clip == 0 {
            return Err(Error::invalid("queries_per_clip must be positive"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if !self.clip_norm.is_finite() || self.clip_norm <= 0.0 {
            return Err(Error::invalid("clip_norm must be a positive finite number"));
        }
        Ok(())
    }
}

/// Per-step loss curve of a completed run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub losses: Vec<LossBreakdown>,
}

/// Draws query points for one clip: a uniformly chosen track, then a visible
/// frame of that track weighted toward early frames (weight `F - f`).
/// Returns the queries and the index of the track each one came from.
pub fn sample_queries<S: Scalar>(
    clip: &SyntheticClip,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<TrackQuery<S>>, Vec<usize>)> {
    let frames = clip.frames();
    let candidates: Vec<usize> = (0..clip.tracks.len())
        .filter(|&i| clip.tracks[i].visible.iter().any(|&v| v))
        .collect();
    if candidates.is_empty() {
        return Err(Error::invalid("clip has no visible track points to query"));
    }
    let mut queries = Vec::with_capacity(count);
    let mut selection = Vec::with_capacity(count);
    for _ in 0..count {
        let ti = candidates[rng.random_range(0..candidates.len())];
        let track = &clip.tracks[ti];
        let visible_frames: Vec<usize> = (0..frames).filter(|&f| track.visible[f]).collect();
        let total: usize = visible_frames.iter().map(|&f| frames - f).sum();
        let mut draw = rng.random_range(0..total);
        let mut frame = visible_frames[0];
        for &f in &visible_frames {
            let w = frames - f;
            if draw < w {
                frame = f;
                break;
            }
            draw -= w;
        }
        let p = track.positions[frame];
        queries.push(TrackQuery {
            id: track.id as i64,
            frame,
            pos: crate::numerics::Point2D::new(S::from_f64_c(p.x as f64), S::from_f64_c(p.y as f64)),
        });
        selection.push(ti);
    }
    Ok((queries, selection))
}

/// Runs the optimization loop over the corpus, mutating the tracker in
/// place. One step draws one clip (uniformly), samples queries, runs the
/// differentiable pipeline and applies one clipped optimizer update with a
/// half-cosine learning-rate schedule. `on_step` observes every step's
/// losses; checkpoints go to `checkpoint_dir` when configured.
pub fn train(
    tracker: &mut Tracker<f32>,
    corpus: &[SyntheticClip],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    corpus_hash: Option<&str>,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::MissingPrerequisite("training corpus is empty".into()));
    }
    if cfg.loss.iterations != tracker.config.refiner.iterations {
        return Err(Error::invalid(format!(
            "loss expects {} iterations, refiner runs {}",
            cfg.loss.iterations, tracker.config.refiner.iterations
        )));
    }
    let usable: Vec<&SyntheticClip> = corpus
        .iter()
        .filter(|c| c.tracks.iter().any(|t| t.visible.iter().any(|&v| v)))
        .collect();
    if usable.is_empty() {
        return Err(Error::MissingPrerequisite(
            "no clip in the corpus has a visible track point".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let clip = usable[rng.random_range(0..usable.len())];
        let (queries, selection) = sample_queries::<f32>(clip, cfg.queries_per_clip, &mut rng)?;
        let mut g = Graph::new();
        let tape = tracker.track_on_tape(&mut g, &clip.video, &queries, true)?;
        let targets = TrackTargets::from_tracks(&clip.tracks, &selection, clip.frames())?;
        let loss = losses_on_tape(&mut g, &tape, &targets, &cfg.loss)?;
        let grads = g.backward(loss.total)?;

        let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        {
            let mut stores: Vec<&mut ParamStore<f32>> = Vec::with_capacity(4);
            stores.push(&mut tracker.dit.store);
            if let Some(conv) = tracker.conv.as_mut() {
                stores.push(&mut conv.store);
            }
            stores.push(&mut tracker.cost_mlp.store);
            stores.push(&mut tracker.refiner.store);
            adam.step_multi(&mut stores, &grads, lr as f32, Some(cfg.clip_norm as f32));
        }

        let breakdown = loss.breakdown(&g);
        on_step(step, &breakdown);
        losses.push(breakdown);

        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = checkpoint_dir {
                let path = dir.join(format!("tracker_step{:06}.dtck", step + 1));
                save_tracker(tracker, (step + 1) as u64, cfg.seed, corpus_hash, &path)?;
            }
        }
    }
    Ok(TrainReport { steps: cfg.steps, losses })
}

const TRACKER_KIND: &str = "tracker";

/// Writes every component's parameters into one checkpoint, names prefixed
/// by component.
pub fn save_tracker(
    tracker: &Tracker<f32>,
    step: u64,
    seed: u64,
    corpus_hash: Option<&str>,
    path: &Path,
) -> Result<()> {
    let mut merged = ParamStore::<f32>::new();
    let mut add = |prefix: &str, store: &ParamStore<f32>| {
        for (_, p) in store.iter() {
            merged.register(format!("{prefix}/{}", p.name), p.value.clone(), p.trainable);
        }
    };
    add("dit", &tracker.dit.store);
    if let Some(conv) = &tracker.conv {
        add("conv", &conv.store);
    }
    add("mlp", &tracker.cost_mlp.store);
    add("ref", &tracker.refiner.store);
    let manifest = Manifest {
        kind: TRACKER_KIND.into(),
        config: serde_json::to_value(&tracker.config)
            .map_err(|e| Error::invalid(format!("unserializable tracker config: {e}")))?,
        seed,
        step,
        corpus_hash: corpus_hash.map(str::to_owned),
    };
    checkpoint::save(&merged, &manifest, path)
}

/// Restores a tracker checkpoint written by [`save_tracker`].
pub fn load_tracker(path: &Path) -> Result<(Tracker<f32>, Manifest)> {
    let (merged, manifest) = checkpoint::load(path)?;
    let corrupt = |reason: String| Error::CorruptArtifact { path: path.to_path_buf(), reason };
    if manifest.kind != TRACKER_KIND {
        return Err(corrupt(format!("checkpoint kind {:?} is not a tracker", manifest.kind)));
    }
    let config: crate::refiner::TrackerConfig = serde_json::from_value(manifest.config.clone())
        .map_err(|e| corrupt(format!("bad tracker config: {e}")))?;
    let mut tracker = Tracker::new(config, manifest.seed)?;
    let mut restored = 0usize;
    for (_, p) in merged.iter() {
        let (prefix, name) = p
            .name
            .split_once('/')
            .ok_or_else(|| corrupt(format!("parameter {:?} has no component prefix", p.name)))?;
        let store: &mut ParamStore<f32> = match prefix {
            "dit" => &mut tracker.dit.store,
            "conv" => {
                let conv = tracker
                    .conv
                    .as_mut()
                    .ok_or_else(|| corrupt("checkpoint has conv weights but fusion is off".into()))?;
                &mut conv.store
            }
            "mlp" => &mut tracker.cost_mlp.store,
            "ref" => &mut tracker.refiner.store,
            other => return Err(corrupt(format!("unknown component {other:?}"))),
        };
        let id = store
            .find(name)
            .ok_or_else(|| corrupt(format!("parameter {:?} does not exist in this config", p.name)))?;
        if store.value(id).shape() != p.value.shape() {
            return Err(corrupt(format!(
                "parameter {:?} has shape {:?}, expected {:?}",
                p.name,
                p.value.shape(),
                store.value(id).shape()
            )));
        }
        store.value_mut(id).assign(&p.value);
        restored += 1;
    }
    let expected = tracker.dit.store.len()
        + tracker.conv.as_ref().map(|c| c.store.len()).unwrap_or(0)
        + tracker.cost_mlp.store.len()
        + tracker.refiner.store.len();
    if restored != expected {
        return Err(corrupt(format!(
            "checkpoint restored {restored} of {expected} parameters"
        )));
    }
    Ok((tracker, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_clip, GeneratorConfig};
    use crate::matching::{FusionMode, PyramidConfig, COST_EMBED_DIM};
    use crate::numerics::Point2D;
    use crate::refiner::{EstimateVars, RefinerConfig, TrackerConfig};
    use approx::assert_relative_eq;
    use ndarray::arr2;

    fn single_frame_tape(
        g: &mut Graph<f64>,
        positions: &[[f64; 2]],
        vis_logit: f64,
        conf_logit: f64,
    ) -> TapeTrack<f64> {
        let iterations = positions
            .iter()
            .map(|p| {
                let pos = g.constant2(arr2(&[[p[0], p[1]]]));
                let vis = g.constant(ArrayD::from_elem(IxDyn(&[1, 1]), vis_logit));
                let conf = g.constant(ArrayD::from_elem(IxDyn(&[1, 1]), conf_logit));
                EstimateVars { pos, vis, conf }
            })
            .collect();
        TapeTrack { iterations, sample_centers: vec![], num_points: 1, frames: 1 }
    }

    fn single_target(x: f64, y: f64, visible: bool) -> TrackTargets<f64> {
        TrackTargets { pos: arr2(&[[x, y]]), vis: vec![visible] }
    }

    fn one_iter_cfg() -> LossConfig {
        LossConfig { iterations: 1, ..LossConfig::default() }
    }

    #[test]
    fn perfect_predictions_have_zero_position_loss() {
        let mut g = Graph::new();
        let tape = single_frame_tape(&mut g, &[[4.0, 5.0]], 10.0, 10.0);
        let targets = single_target(4.0, 5.0, true);
        let l = losses_on_tape(&mut g, &tape, &targets, &one_iter_cfg()).unwrap();
        assert_eq!(g.scalar_value(l.track), 0.0);
    }

    #[test]
    fn two_pixel_error_costs_two_visible_and_point_four_occluded() {
        let mut g = Graph::new();
        let tape = single_frame_tape(&mut g, &[[2.0, 0.0]], 0.0, 0.0);
        let targets = single_target(0.0, 0.0, true);
        let l = losses_on_tape(&mut g, &tape, &targets, &one_iter_cfg()).unwrap();
        assert_relative_eq!(g.scalar_value(l.track), 2.0, epsilon = 1e-12);

        let mut g = Graph::new();
        let tape = single_frame_tape(&mut g, &[[2.0, 0.0]], 0.0, 0.0);
        let targets = single_target(0.0, 0.0, false);
        let l = losses_on_tape(&mut g, &tape, &targets, &one_iter_cfg()).unwrap();
        assert_relative_eq!(g.scalar_value(l.track), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn position_loss_turns_linear_past_the_threshold() {
        let mut g = Graph::new();
        let tape = single_frame_tape(&mut g, &[[10.0, 0.0]], 0.0, 0.0);
        let targets = single_target(0.0, 0.0, true);
        let l = losses_on_tape(&mut g, &tape, &targets, &one_iter_cfg()).unwrap();
        assert_relative_eq!(g.scalar_value(l.track), 6.0 * (10.0 - 3.0), epsilon = 1e-12);
    }

    #[test]
    fn zero_logit_visibility_costs_ln_two() {
        let mut g = Graph::new();
        let tape = single_frame_tape(&mut g, &[[0.0, 0.0]], 0.0, 0.0);
        let targets = single_target(0.0, 0.0, true);
        let l = losses_on_tape(&mut g, &tape, &targets, &one_iter_cfg()).unwrap();
        assert_relative_eq!(g.scalar_value(l.vis), std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn discount_weights_follow_the_geometric_series() {
        // A constant per-iteration loss c sums to c * (1 + 0.8 + 0.64 + 0.512).
        let mut g = Graph::new();
        let tape = single_frame_tape(&mut g, &[[0.0; 2]; 4], 0.0, 0.0);
        let targets = single_target(0.0, 0.0, true);
        let cfg = LossConfig::default();
        let l = losses_on_tape(&mut g, &tape, &targets, &cfg).unwrap();
        let series: f64 = (0..4).map(|t| 0.8f64.powi(3 - t)).sum();
        assert_relative_eq!(
            g.scalar_value(l.vis),
            std::f64::consts::LN_2 * series,
            epsilon = 1e-12
        );
        let weights: Vec<f64> = (1..=4).map(|t| 0.8f64.powi(4 - t)).collect();
        assert_eq!(weights, vec![0.8f64.powi(3), 0.8f64.powi(2), 0.8, 1.0]);
    }

    #[test]
    fn confidence_labels_use_a_strict_twelve_pixel_rule() {
        // BCE at logit 0 is ln 2 regardless of the label; read the label
        // through the gradient instead: d/dx BCE(x, t) at x = 0 is 0.5 - t.
        for (err, label) in [(11.9, 1.0), (12.1, 0.0), (12.0, 0.0)] {
            let targets = single_target(0.0, 0.0, true);
            let mut g = Graph::new();
            let mut store = ParamStore::<f64>::new();
            let c = store.register("c", ArrayD::zeros(IxDyn(&[1, 1])), true);
            let cv = g.param(&store, c);
            let pos = g.constant2(arr2(&[[err, 0.0]]));
            let vis = g.constant(ArrayD::zeros(IxDyn(&[1, 1])));
            let tape = TapeTrack {
                iterations: vec![EstimateVars { pos, vis, conf: cv }],
                sample_centers: vec![],
                num_points: 1,
                frames: 1,
            };
            let l = losses_on_tape(&mut g, &tape, &targets, &one_iter_cfg()).unwrap();
            let grads = g.backward(l.conf).unwrap();
            assert_relative_eq!(grads.get(c).unwrap()[[0, 0]], 0.5 - label, epsilon = 1e-12);
        }
    }

    #[test]
    fn confidence_labels_can_flip_between_iterations() {
        let mut g = Graph::new();
        let mut store = ParamStore::<f64>::new();
        let c = store.register("c", ArrayD::zeros(IxDyn(&[1, 1])), true);
        let cv = g.param(&store, c);
        let vis = g.constant(ArrayD::zeros(IxDyn(&[1, 1])));
        let far = g.constant2(arr2(&[[20.0, 0.0]]));
        let near = g.constant2(arr2(&[[1.0, 0.0]]));
        let tape = TapeTrack {
            iterations: vec![
                EstimateVars { pos: far, vis, conf: cv },
                EstimateVars { pos: near, vis, conf: cv },
            ],
            sample_centers: vec![],
            num_points: 1,
            frames: 1,
        };
        let targets = single_target(0.0, 0.0, true);
        let cfg = LossConfig { iterations: 2, ..LossConfig::default() };
        let l = losses_on_tape(&mut g, &tape, &targets, &cfg).unwrap();
        let grads = g.backward(l.conf).unwrap();
        // Iteration 1 (weight 0.8) labels negative, iteration 2 (weight 1)
        // labels positive: gradient 0.8 * 0.5 + 1.0 * (-0.5).
        assert_relative_eq!(grads.get(c).unwrap()[[0, 0]], 0.8 * 0.5 - 0.5, epsilon = 1e-12);
    }

    #[test]
    fn losses_validate_their_inputs() {
        let mut g = Graph::new();
        let tape = single_frame_tape(&mut g, &[[0.0, 0.0]], 0.0, 0.0);
        let targets = single_target(0.0, 0.0, true);
        let cfg = LossConfig { iterations: 2, ..LossConfig::default() };
        assert!(losses_on_tape(&mut g, &tape, &targets, &cfg).is_err());

        let bad_targets = TrackTargets { pos: arr2(&[[0.0, 0.0], [1.0, 1.0]]), vis: vec![true, true] };
        assert!(losses_on_tape(&mut g, &tape, &bad_targets, &one_iter_cfg()).is_err());
    }

    fn tiny_tracker_config() -> TrackerConfig {
        TrackerConfig {
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
        }
    }

    fn tiny_corpus(n: usize) -> Vec<SyntheticClip> {
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
                generate_clip(&cfg, 100 + i as u64).unwrap()
            })
            .collect()
    }

    fn train_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            queries_per_clip: 2,
            loss: LossConfig { iterations: 2, ..LossConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_all_parameters() {
        let mut tracker = Tracker::<f32>::new(tiny_tracker_config(), 7).unwrap();
        let corpus = tiny_corpus(2);
        let before: Vec<Vec<u32>> = tracker
            .stores()
            .iter()
            .flat_map(|s| s.iter().map(|(_, p)| p.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
            .collect();
        let cfg = TrainConfig { lr: 0.0, ..train_cfg(2) };
        train(&mut tracker, &corpus, &cfg, None, None, |_, _| {}).unwrap();
        let after: Vec<Vec<u32>> = tracker
            .stores()
            .iter()
            .flat_map(|s| s.iter().map(|(_, p)| p.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn frozen_base_weights_stay_bit_identical() {
        let mut tracker = Tracker::<f32>::new(tiny_tracker_config(), 3).unwrap();
        let corpus = tiny_corpus(2);
        let frozen_before: Vec<(String, Vec<u32>)> = tracker
            .dit
            .store
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(_, p)| (p.name.clone(), p.value.iter().map(|v| v.to_bits()).collect()))
            .collect();
        assert!(!frozen_before.is_empty());
        train(&mut tracker, &corpus, &train_cfg(3), None, None, |_, _| {}).unwrap();
        let frozen_after: Vec<(String, Vec<u32>)> = tracker
            .dit
            .store
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(_, p)| (p.name.clone(), p.value.iter().map(|v| v.to_bits()).collect()))
            .collect();
        assert_eq!(frozen_before, frozen_after);

        // And the trainable adapters did move.
        let moved = tracker.dit.store.trainable_ids();
        assert!(!moved.is_empty());
    }

    #[test]
    fn training_reduces_the_loss_on_its_corpus() {
        let mut tracker = Tracker::new(tiny_tracker_config(), 11).unwrap();
        let corpus = tiny_corpus(2);
        let cfg = TrainConfig { lr: 3e-3, ..train_cfg(12) };
        let report = train(&mut tracker, &corpus, &cfg, None, None, |_, _| {}).unwrap();
        assert_eq!(report.losses.len(), 12);
        let first: f64 = report.losses[..3].iter().map(|l| l.total).sum::<f64>() / 3.0;
        let last: f64 = report.losses[9..].iter().map(|l| l.total).sum::<f64>() / 3.0;
        assert!(
            last < first,
            "loss did not decrease: first {first:.4} vs last {last:.4}"
        );
    }

    #[test]
    fn training_is_deterministic_given_a_seed() {
        let run = || {
            let mut tracker = Tracker::new(tiny_tracker_config(), 5).unwrap();
            let corpus = tiny_corpus(2);
            let report = train(&mut tracker, &corpus, &train_cfg(3), None, None, |_, _| {}).unwrap();
            report.losses.last().unwrap().total
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn tracker_checkpoints_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tracker.dtck");
        let mut tracker = Tracker::new(tiny_tracker_config(), 9).unwrap();
        let corpus = tiny_corpus(1);
        train(&mut tracker, &corpus, &train_cfg(2), None, None, |_, _| {}).unwrap();
        save_tracker(&tracker, 2, 9, Some("abc123"), &path).unwrap();

        let (restored, manifest) = load_tracker(&path).unwrap();
        assert_eq!(manifest.kind, "tracker");
        assert_eq!(manifest.step, 2);
        assert_eq!(manifest.corpus_hash.as_deref(), Some("abc123"));
        assert_eq!(restored.config, tracker.config);

        let video = &corpus[0].video;
        let queries = [TrackQuery { id: 0, frame: 0, pos: Point2D::new(7.0, 7.0) }];
        let a = tracker.track(video, &queries).unwrap();
        let b = restored.track(video, &queries).unwrap();
        for (x, y) in a[0].positions.iter().zip(&b[0].positions) {
            assert_eq!(x.x.to_bits(), y.x.to_bits());
            assert_eq!(x.y.to_bits(), y.y.to_bits());
        }
    }

    #[test]
    fn loading_a_non_tracker_checkpoint_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("other.dtck");
        let mut store = ParamStore::<f32>::new();
        store.register("w", ArrayD::zeros(IxDyn(&[2, 2])), true);
        let manifest = Manifest {
            kind: "dit".into(),
            config: serde_json::json!({}),
            seed: 0,
            step: 0,
            corpus_hash: None,
        };
        checkpoint::save(&store, &manifest, &path).unwrap();
        assert!(load_tracker(&path).is_err());
    }

    #[test]
    fn query_sampling_respects_visibility_and_weighting() {
        let corpus = tiny_corpus(1);
        let clip = &corpus[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (queries, selection) = sample_queries::<f32>(clip, 64, &mut rng).unwrap();
        assert_eq!(queries.len(), 64);
        for (q, &ti) in queries.iter().zip(&selection) {
            let track = &clip.tracks[ti];
            assert!(track.visible[q.frame], "query landed on an occluded frame");
            assert_eq!(q.pos.x, track.positions[q.frame].x);
            assert_eq!(q.id, track.id as i64);
        }
        // Early frames dominate under the F - f weighting.
        let early = queries.iter().filter(|q| q.frame == 0).count();
        let late = queries.iter().filter(|q| q.frame == clip.frames() - 1).count();
        assert!(early > late);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut config = tiny_tracker_config();
        config.refiner.iterations = 1;
        let tracker = Tracker::<f64>::new(config, 21).unwrap();
        let clip = tiny_corpus(1).remove(0);
        let video: Vec<crate::numerics::Grid2D<f64>> = clip
            .video
            .iter()
            .map(|fr| crate::numerics::Grid2D::new(fr.data().mapv(|v| v as f64)).unwrap())
            .collect();
        let queries = [
            TrackQuery { id: 0, frame: 0, pos: Point2D::new(6.0, 9.0) },
            TrackQuery { id: 1, frame: 1, pos: Point2D::new(10.0, 4.0) },
        ];
        let selection = [0usize, 1];
        let targets = TrackTargets::<f64>::from_tracks(&clip.tracks, &selection, clip.frames()).unwrap();
        let loss_cfg = LossConfig { iterations: 1, ..LossConfig::default() };

        let eval = |t: &Tracker<f64>| -> f64 {
            let mut g = Graph::new();
            let tape = t.track_on_tape(&mut g, &video, &queries, true).unwrap();
            let l = losses_on_tape(&mut g, &tape, &targets, &loss_cfg).unwrap();
            g.scalar_value(l.total)
        };

        let mut g = Graph::new();
        let tape = tracker.track_on_tape(&mut g, &video, &queries, true).unwrap();
        let l = losses_on_tape(&mut g, &tape, &targets, &loss_cfg).unwrap();
        let grads = g.backward(l.total).unwrap();

        // One parameter per component, probed at a fixed flat index.
        enum Comp {
            Dit,
            Conv,
            Mlp,
            Ref,
        }
        let probes = [
            (Comp::Dit, "blk1.lora.q.a", 3),
            (Comp::Conv, "cnn.blk0.conv1.w", 5),
            (Comp::Mlp, "cost_mlp.w1", 11),
            (Comp::Ref, "ref.proj.w", 7),
            (Comp::Ref, "ref.blk0.time.wq", 2),
            (Comp::Ref, "ref.out.w", 1),
        ];
        for (comp, name, idx) in probes {
            let store = match comp {
                Comp::Dit => &tracker.dit.store,
                Comp::Conv => &tracker.conv.as_ref().unwrap().store,
                Comp::Mlp => &tracker.cost_mlp.store,
                Comp::Ref => &tracker.refiner.store,
            };
            let id = store.find(name).unwrap_or_else(|| panic!("missing {name}"));
            let analytic = grads.get(id).map(|a| a.as_slice().unwrap()[idx]).unwrap_or(0.0);
            let h = 1e-4;
            let numeric = {
                let probe = |sign: f64| {
                    let mut t2 = tracker.clone();
                    let s2 = match comp {
                        Comp::Dit => &mut t2.dit.store,
                        Comp::Conv => &mut t2.conv.as_mut().unwrap().store,
                        Comp::Mlp => &mut t2.cost_mlp.store,
                        Comp::Ref => &mut t2.refiner.store,
                    };
                    let id2 = s2.find(name).unwrap();
                    s2.value_mut(id2).as_slice_mut().unwrap()[idx] += sign * h;
                    eval(&t2)
                };
                (probe(1.0) - probe(-1.0)) / (2.0 * h)
            };
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic - numeric).abs() / denom < 1e-3,
                "{name}[{idx}]: analytic {analytic:.8e} vs numeric {numeric:.8e}"
            );
        }
    }
}
