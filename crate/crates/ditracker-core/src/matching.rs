//! Cost construction between frames: zero-shot argmax tracking on attention
//! features, feature pyramids, local window sampling, four-dimensional local
//! matching costs from either backbone, cost-level fusion, and the MLP that
//! projects stacked costs to per-frame embeddings. Also home to the
//! layer/head sweep that picks the extraction point of a pretrained
//! transformer.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::datagen::SyntheticClip;
use crate::dit::{QKFeatures, VideoDiT};
use crate::error::{Error, Result};
use crate::evalkit::{self, TrackEval};
use crate::numerics::{Grid2D, Point2D, Scalar};

/// Embedding width produced by [`CostMlp`].
pub const COST_EMBED_DIM: usize = 128;
/// Hidden width of the cost MLP.
pub const COST_MLP_HIDDEN: usize = 256;

/// Geometry of the multi-scale cost search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PyramidConfig {
    /// Number of pyramid scales S; scale `s` (1-based) halves the feature
    /// grid `s - 1` times.
    pub num_scales: usize,
    /// Window radius: offsets with `max(|dx|, |dy|) <= radius` are sampled.
    pub radius: usize,
    /// Pixel stride of the scale-1 feature grid.
    pub stride: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig { num_scales: 4, radius: 3, stride: 4 }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scales == 0 {
            return Err(Error::invalid("pyramid needs at least one scale"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("pyramid stride must be positive"));
        }
        Ok(())
    }

    /// Side length of the sampling window.
    pub fn window(&self) -> usize {
        2 * self.radius + 1
    }

    /// Entries in one single-source local cost vector: `(2Δ+1)^4`.
    pub fn cost_len(&self) -> usize {
        self.window().pow(4)
    }

    /// Pixels per feature cell at 1-based scale `s`.
    pub fn cell_size(&self, scale: usize) -> f32 {
        (self.stride * (1usize << (scale - 1))) as f32
    }
}

/// Builds per-scale copies of per-frame feature grids. The result is indexed
/// `[scale - 1][frame]`; scale 1 is the input itself and every further scale
/// bilinearly halves the previous height and width (floor, minimum 1).
pub fn build_pyramid<S: Scalar>(frames: &[Grid2D<S>], num_scales: usize) -> Result<Vec<Vec<Grid2D<S>>>> {
    if frames.is_empty() {
        return Err(Error::invalid("cannot build a pyramid from zero frames"));
    }
    if num_scales == 0 {
        return Err(Error::invalid("pyramid needs at least one scale"));
    }
    let mut levels = Vec::with_capacity(num_scales);
    levels.push(frames.to_vec());
    for s in 1..num_scales {
        let prev: &Vec<Grid2D<S>> = &levels[s - 1];
        let mut level = Vec::with_capacity(prev.len());
        for grid in prev {
            let oh = (grid.h() / 2).max(1);
            let ow = (grid.w() / 2).max(1);
            level.push(crate::numerics::interpolate_to(grid, oh, ow)?);
        }
        levels.push(level);
    }
    Ok(levels)
}

/// Row-stochastic similarity between every cell of frame `i` and every cell
/// of frame `j`, rows ordered row-major over the query grid.
#[derive(Debug, Clone)]
pub struct AttentionCost {
    pub matrix: Array2<f32>,
    pub h: usize,
    pub w: usize,
}

/// Full softmax matching cost between two frames: each row is the scaled
/// softmax of one query cell's dot products against every key cell,
/// temperature `1/sqrt(d_head)`. Frame indices are 0-based.
pub fn global_cost(qk: &QKFeatures, i: usize, j: usize) -> Result<AttentionCost> {
    let frames = qk.q.len();
    if i >= frames || j >= frames {
        return Err(Error::invalid(format!(
            "frame pair ({i}, {j}) out of range for {frames} frames"
        )));
    }
    let (h, w, d) = (qk.q[i].h(), qk.q[i].w(), qk.q[i].channels());
    let n = h * w;
    let mut matrix = Array2::<f32>::zeros((n, n));
    let q = qk.q[i].data();
    let k = qk.k[j].data();
    let mut logits = vec![0.0f32; n];
    for (qy, qx) in row_major(h, w) {
        for (idx, (ky, kx)) in row_major(h, w).enumerate() {
            let mut dot = 0.0f32;
            for c in 0..d {
                dot += q[(qy, qx, c)] * k[(ky, kx, c)];
            }
            logits[idx] = dot;
        }
        let row = crate::numerics::scaled_softmax(&logits, d)?;
        matrix.row_mut(qy * w + qx).assign(&ndarray::ArrayView1::from(&row[..]));
    }
    Ok(AttentionCost { matrix, h, w })
}

fn row_major(h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..h).flat_map(move |y| (0..w).map(move |x| (y, x)))
}

/// Training-free tracking: the starting point is mapped to its feature cell
/// in frame 0 and every later frame's position is the argmax of that cell's
/// matching-cost row, mapped back to pixels.
///
/// `out_h`/`out_w` give the pixel frame of both `start` and the returned
/// trajectory; feature cell `(cy, cx)` corresponds to pixel
/// `(cy * out_h / h, cx * out_w / w)`. The first trajectory point is `start`
/// itself, kept verbatim. Argmax ties resolve to the smallest row-major cell
/// index, making the output deterministic.
pub fn zero_shot_track(
    qk: &QKFeatures,
    start: Point2D<f32>,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<Point2D<f32>>> {
    if qk.q.is_empty() {
        return Err(Error::invalid("zero-shot tracking needs at least one frame"));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("output frame must be non-empty"));
    }
    if !start.x.is_finite() || !start.y.is_finite() {
        return Err(Error::invalid("start point must be finite"));
    }
    if start.x < 0.0 || start.y < 0.0 || start.x > (out_w - 1) as f32 || start.y > (out_h - 1) as f32 {
        return Err(Error::invalid(format!(
            "start ({}, {}) lies outside a {out_w}x{out_h} frame",
            start.x, start.y
        )));
    }
    let (h, w, d) = (qk.q[0].h(), qk.q[0].w(), qk.q[0].channels());
    let scale_x = out_w as f32 / w as f32;
    let scale_y = out_h as f32 / h as f32;
    let cx = ((start.x / scale_x).round() as isize).clamp(0, w as isize - 1) as usize;
    let cy = ((start.y / scale_y).round() as isize).clamp(0, h as isize - 1) as usize;
    let q_row = qk.q[0].at(cy, cx).to_owned();

    let mut track = Vec::with_capacity(qk.q.len());
    track.push(start);
    for j in 1..qk.k.len() {
        let k = qk.k[j].data();
        let mut best_idx = 0usize;
        let mut best = f32::NEG_INFINITY;
        for (idx, (ky, kx)) in row_major(h, w).enumerate() {
            let mut dot = 0.0f32;
            for c in 0..d {
                dot += q_row[c] * k[(ky, kx, c)];
            }
            if dot > best {
                best = dot;
                best_idx = idx;
            }
        }
        let (by, bx) = (best_idx / w, best_idx % w);
        track.push(Point2D::new(bx as f32 * scale_x, by as f32 * scale_y));
    }
    Ok(track)
}

/// Tracking accuracy of every (layer, head) extraction point of a model.
#[derive(Debug, Clone)]
pub struct SweepResult {
    /// `delta_avg[(l - 1, m)]` holds the score of 1-based layer `l`,
    /// 0-based head `m`.
    pub delta_avg: Array2<f64>,
    pub best_layer: usize,
    pub best_head: usize,
}

/// Runs zero-shot tracking on every clip with features from every layer and
/// head, scoring each cell by position accuracy against the ground-truth
/// tracks. Per clip, only tracks visible in frame 0 are queried (at their
/// frame-0 position). The best cell becomes `(best_layer, best_head)`; ties
/// resolve to the smaller layer, then head.
pub fn sweep_layers_heads(model: &VideoDiT<f32>, clips: &[SyntheticClip]) -> Result<SweepResult> {
    if clips.is_empty() {
        return Err(Error::invalid("the layer/head sweep needs at least one clip"));
    }
    let layers = model.config.layers;
    let heads = model.config.heads;
    let mut pools: Vec<Vec<TrackEval>> = vec![Vec::new(); layers * heads];
    for clip in clips {
        let latents = model.encode_frames(&clip.video)?;
        let (out_h, out_w) = (clip.height(), clip.width());
        for layer in 1..=layers {
            let per_head = model.extract_qk_all_heads(&latents, layer)?;
            for (m, qk) in per_head.iter().enumerate() {
                let pool = &mut pools[(layer - 1) * heads + m];
                for track in &clip.tracks {
                    if !track.visible[0] {
                        continue;
                    }
                    let pred = zero_shot_track(qk, track.positions[0], out_h, out_w)?;
                    pool.push(TrackEval::positions_only(
                        pred,
                        track.positions.clone(),
                        track.visible.clone(),
                    ));
                }
            }
        }
    }
    if pools[0].is_empty() {
        return Err(Error::MissingPrerequisite(
            "no sweep queries: no ground-truth track is visible in frame 0 of any clip".into(),
        ));
    }
    let mut delta_avg = Array2::<f64>::zeros((layers, heads));
    let (mut best_layer, mut best_head, mut best) = (1usize, 0usize, f64::NEG_INFINITY);
    for l in 1..=layers {
        for m in 0..heads {
            let score = evalkit::delta_x_avg(&pools[(l - 1) * heads + m])?;
            delta_avg[(l - 1, m)] = score;
            if score > best {
                best = score;
                best_layer = l;
                best_head = m;
            }
        }
    }
    Ok(SweepResult { delta_avg, best_layer, best_head })
}

/// Writes a sweep grid as `layer,head,delta_avg` CSV rows.
pub fn write_sweep_csv(result: &SweepResult, path: &Path) -> Result<()> {
    let mut out = String::from("layer,head,delta_avg\n");
    for l in 0..result.delta_avg.nrows() {
        for m in 0..result.delta_avg.ncols() {
            out.push_str(&format!("{},{},{:.6}\n", l + 1, m, result.delta_avg[(l, m)]));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Square window of integer offsets with `max(|dx|, |dy|) <= radius`,
/// row-major by `(dy, dx)`, as an `[(2Δ+1)², 2]` array of `(x, y)` columns.
fn offset_grid<S: Scalar>(radius: usize) -> Array2<S> {
    let side = 2 * radius + 1;
    let mut out = Array2::<S>::zeros((side * side, 2));
    let r = radius as isize;
    let mut row = 0;
    for dy in -r..=r {
        for dx in -r..=r {
            out[(row, 0)] = S::from_f64_c(dx as f64);
            out[(row, 1)] = S::from_f64_c(dy as f64);
            row += 1;
        }
    }
    out
}

/// Bilinearly samples the window of features around an already-mapped center
/// on the tape. `feat` is an `[h, w, d]` grid variable and `center` a `[1, 2]`
/// variable holding `(x, y)` in the grid's own cell coordinates; the result
/// is `[(2Δ+1)², d]` with rows ordered row-major by `(dy, dx)`. Gradients
/// flow into both the features and the center.
pub fn sample_local_on_tape<S: Scalar>(g: &mut Graph<S>, feat: Var, center: Var, radius: usize) -> Var {
    let offsets = offset_grid::<S>(radius);
    let n = offsets.nrows();
    let centers = g.broadcast_rows(center, n);
    let coords = g.add_const(centers, &offsets.into_dyn());
    g.grid_sample(feat, coords)
}

/// Samples the local feature window around a pixel-space center at a pyramid
/// scale. The center is first mapped to the scale's cell coordinates by
/// dividing by `stride * 2^{scale-1}`; out-of-bounds samples clamp to the
/// border. Returns `[(2Δ+1)², d]`.
pub fn sample_local<S: Scalar>(
    feat: &Grid2D<S>,
    center: Point2D<S>,
    radius: usize,
    scale: usize,
    stride: usize,
) -> Result<Array2<S>> {
    if scale == 0 || stride == 0 {
        return Err(Error::invalid("scale and stride are 1-based positive integers"));
    }
    let divisor = S::from_f64_c((stride * (1usize << (scale - 1))) as f64);
    let mut g = Graph::<S>::new();
    let fv = g.constant(feat.data().clone().into_dyn());
    let mut c = Array2::<S>::zeros((1, 2));
    c[(0, 0)] = center.x / divisor;
    c[(0, 1)] = center.y / divisor;
    let cv = g.constant2(c);
    let patch = sample_local_on_tape(&mut g, fv, cv, radius);
    Ok(g.value2(patch).to_owned())
}

/// Local 4D matching cost on the tape: `q_patch` and `k_patch` are
/// `[(2Δ+1)², d]` windows; each query-offset row of `q·kᵀ / sqrt(scale_dim)`
/// is softmaxed and the matrix is flattened row-major (query offset outer,
/// key offset inner) into a `[1, (2Δ+1)^4]` variable.
pub fn local_cost_on_tape<S: Scalar>(
    g: &mut Graph<S>,
    q_patch: Var,
    k_patch: Var,
    scale_dim: usize,
) -> Result<Var> {
    if scale_dim == 0 {
        return Err(Error::invalid("scale_dim must be positive"));
    }
    let qs = g.value(q_patch).shape().to_vec();
    let ks = g.value(k_patch).shape().to_vec();
    if qs.len() != 2 || ks.len() != 2 || qs != ks {
        return Err(Error::invalid(format!(
            "patch shapes {qs:?} and {ks:?} must be equal 2-d windows"
        )));
    }
    let n = qs[0];
    let kt = g.transpose(k_patch);
    let logits = g.matmul(q_patch, kt);
    let scaled = g.scale(logits, S::one() / S::from_f64_c(scale_dim as f64).sqrt());
    let soft = g.softmax_rows(scaled);
    Ok(g.reshape(soft, &[1, n * n]))
}

/// [`local_cost_on_tape`] without a caller-provided tape.
pub fn local_cost<S: Scalar>(q_patch: &Array2<S>, k_patch: &Array2<S>, scale_dim: usize) -> Result<Vec<S>> {
    let mut g = Graph::<S>::new();
    let qv = g.constant2(q_patch.clone());
    let kv = g.constant2(k_patch.clone());
    let cost = local_cost_on_tape(&mut g, qv, kv, scale_dim)?;
    Ok(g.value(cost).iter().copied().collect())
}

/// Which backbone produced a cost volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CostSource {
    Dit,
    Conv,
    Fused,
}

/// Flattened local matching costs for one query point: `costs[scale][frame]`
/// holds `(2Δ+1)^4` entries from a single backbone or twice that after
/// fusion.
#[derive(Debug, Clone)]
pub struct LocalCostVolume {
    pub source: CostSource,
    pub radius: usize,
    pub costs: Vec<Vec<Vec<f32>>>,
}

impl LocalCostVolume {
    fn expect_single(&self, role: &str) -> Result<()> {
        if self.source == CostSource::Fused {
            return Err(Error::invalid(format!("{role} volume is already fused")));
        }
        Ok(())
    }
}

/// Concatenates two single-source volumes per scale and frame, transformer
/// block first. Both must share the radius, scale count, frame counts, and
/// entry length; the output length doubles and is never re-normalized.
pub fn fuse_costs(dit: &LocalCostVolume, conv: &LocalCostVolume) -> Result<LocalCostVolume> {
    dit.expect_single("first")?;
    conv.expect_single("second")?;
    if dit.radius != conv.radius || dit.costs.len() != conv.costs.len() {
        return Err(Error::invalid(format!(
            "cost volumes disagree: radius {} vs {}, scales {} vs {}",
            dit.radius,
            conv.radius,
            dit.costs.len(),
            conv.costs.len()
        )));
    }
    let mut costs = Vec::with_capacity(dit.costs.len());
    for (s, (ds, cs)) in dit.costs.iter().zip(&conv.costs).enumerate() {
        if ds.len() != cs.len() {
            return Err(Error::invalid(format!(
                "scale {} frame counts disagree: {} vs {}",
                s + 1,
                ds.len(),
                cs.len()
            )));
        }
        let mut frames = Vec::with_capacity(ds.len());
        for (f, (dv, cv)) in ds.iter().zip(cs).enumerate() {
            if dv.len() != cv.len() {
                return Err(Error::invalid(format!(
                    "scale {} frame {f} cost lengths disagree: {} vs {}",
                    s + 1,
                    dv.len(),
                    cv.len()
                )));
            }
            let mut fused = Vec::with_capacity(dv.len() * 2);
            fused.extend_from_slice(dv);
            fused.extend_from_slice(cv);
            frames.push(fused);
        }
        costs.push(frames);
    }
    Ok(LocalCostVolume { source: CostSource::Fused, radius: dit.radius, costs })
}

/// How the two backbones are combined into the cost fed to the refiner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Transformer costs only.
    None,
    /// Concatenate feature channels before a single cost computation.
    FeatureConcat,
    /// Element-wise sum of the two cost volumes.
    CostSum,
    /// Concatenate the two cost volumes (the shipped configuration).
    CostConcat,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] =
        [FusionMode::None, FusionMode::FeatureConcat, FusionMode::CostSum, FusionMode::CostConcat];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::FeatureConcat => "feature_concat",
            FusionMode::CostSum => "cost_sum",
            FusionMode::CostConcat => "cost_concat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown fusion mode `{s}`")))
    }

    /// Cost entries per scale and frame under this mode.
    pub fn cost_len(self, radius: usize) -> usize {
        let single = (2 * radius + 1).pow(4);
        match self {
            FusionMode::CostConcat => 2 * single,
            _ => single,
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Two-layer MLP projecting the concatenation of all scales' cost vectors to
/// a fixed-width embedding per frame.
#[derive(Debug, Clone)]
pub struct CostMlp<S: Scalar = f32> {
    pub store: ParamStore<S>,
    pub d_in: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl<S: Scalar> CostMlp<S> {
    /// `d_in` must equal `num_scales * cost_len` of the volumes that will be
    /// embedded.
    pub fn new(d_in: usize, seed: u64) -> Result<Self> {
        if d_in == 0 {
            return Err(Error::invalid("cost MLP input width must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let xavier = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            let std = (2.0 / (rows + cols) as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            Array2::from_shape_fn((rows, cols), |_| S::from_f64_c(dist.sample(rng)))
        };
        let w1 = store.register("cost_mlp.w1", xavier(&mut rng, d_in, COST_MLP_HIDDEN).into_dyn(), true);
        let b1 = store.register(
            "cost_mlp.b1",
            ndarray::Array1::<S>::zeros(COST_MLP_HIDDEN).into_dyn(),
            true,
        );
        let w2 = store.register(
            "cost_mlp.w2",
            xavier(&mut rng, COST_MLP_HIDDEN, COST_EMBED_DIM).into_dyn(),
            true,
        );
        let b2 = store.register("cost_mlp.b2", ndarray::Array1::<S>::zeros(COST_EMBED_DIM).into_dyn(), true);
        Ok(CostMlp { store, d_in, w1, b1, w2, b2 })
    }

    /// Embeds `[frames, d_in]` stacked costs to `[frames, 128]` on the tape.
    pub fn embed_on_tape(&self, g: &mut Graph<S>, costs: Var) -> Result<Var> {
        let shape = g.value(costs).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(Error::invalid(format!(
                "cost stack shape {shape:?} does not match the MLP input width {}; \
                 a scale is missing or the fusion mode changed",
                self.d_in
            )));
        }
        let w1 = g.param(&self.store, self.w1);
        let b1 = g.param(&self.store, self.b1);
        let w2 = g.param(&self.store, self.w2);
        let b2 = g.param(&self.store, self.b2);
        let h = g.matmul(costs, w1);
        let h = g.add_row_vec(h, b1);
        let h = g.gelu(h);
        let out = g.matmul(h, w2);
        Ok(g.add_row_vec(out, b2))
    }

    /// [`CostMlp::embed_on_tape`] without a caller-provided tape.
    pub fn embed(&self, costs: &Array2<S>) -> Result<Array2<S>> {
        let mut g = Graph::<S>::new();
        let cv = g.constant2(costs.clone());
        let out = self.embed_on_tape(&mut g, cv)?;
        Ok(g.value2(out).to_owned())
    }
}

/// Stacks a volume's scales per frame and embeds every frame. The volume
/// must carry exactly the scales the MLP was sized for.
pub fn embed_costs<S: Scalar>(mlp: &CostMlp<S>, volume: &LocalCostVolume) -> Result<Array2<S>>
where
    S: Scalar,
{
    if volume.costs.is_empty() || volume.costs[0].is_empty() {
        return Err(Error::invalid("cost volume has no scales or no frames"));
    }
    let frames = volume.costs[0].len();
    let per_scale = volume.costs[0][0].len();
    if volume.costs.len() * per_scale != mlp.d_in {
        return Err(Error::invalid(format!(
            "volume provides {} scales of {} entries but the MLP expects {} inputs; a scale is missing",
            volume.costs.len(),
            per_scale,
            mlp.d_in
        )));
    }
    let mut stacked = Array2::<S>::zeros((frames, mlp.d_in));
    for (s, scale) in volume.costs.iter().enumerate() {
        if scale.len() != frames {
            return Err(Error::invalid(format!(
                "scale {} has {} frames, expected {frames}",
                s + 1,
                scale.len()
            )));
        }
        for (f, vec) in scale.iter().enumerate() {
            if vec.len() != per_scale {
                return Err(Error::invalid(format!(
                    "scale {} frame {f} has {} entries, expected {per_scale}",
                    s + 1,
                    vec.len()
                )));
            }
            for (i, &v) in vec.iter().enumerate() {
                stacked[(f, s * per_scale + i)] = S::from_f64_c(v as f64);
            }
        }
    }
    mlp.embed(&stacked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_clip, GeneratorConfig};
    use crate::dit::DiTConfig;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    fn grid_from_fn(h: usize, w: usize, d: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Grid2D<f32> {
        Grid2D::new(Array3::from_shape_fn((h, w, d), |(y, x, c)| f(y, x, c))).unwrap()
    }

    fn one_hot_features(h: usize, w: usize) -> Grid2D<f32> {
        let n = h * w;
        grid_from_fn(h, w, n, |y, x, c| if c == y * w + x { 1.0 } else { 0.0 })
    }

    fn random_grid(h: usize, w: usize, d: usize, seed: u64) -> Grid2D<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0).unwrap();
        grid_from_fn(h, w, d, |_, _, _| dist.sample(&mut rng) as f32)
    }

    fn qk_from_grids(q: Vec<Grid2D<f32>>, k: Vec<Grid2D<f32>>) -> QKFeatures {
        QKFeatures { q, k, source_layer: 1, source_head: 0 }
    }

    #[test]
    fn pyramid_halves_dimensions_per_scale() {
        let frames = vec![random_grid(8, 12, 3, 0), random_grid(8, 12, 3, 1)];
        let pyr = build_pyramid(&frames, 4).unwrap();
        assert_eq!(pyr.len(), 4);
        let dims: Vec<_> = pyr.iter().map(|level| (level[0].h(), level[0].w())).collect();
        assert_eq!(dims, vec![(8, 12), (4, 6), (2, 3), (1, 1)]);
        assert_eq!(pyr[0][1].data(), frames[1].data());
        assert!(build_pyramid(&frames, 0).is_err());
        assert!(build_pyramid::<f32>(&[], 2).is_err());
    }

    #[test]
    fn pyramid_of_constant_map_stays_constant() {
        let frames = vec![Grid2D::from_elem(8, 8, 2, 0.37f32).unwrap()];
        let pyr = build_pyramid(&frames, 3).unwrap();
        for level in &pyr {
            for v in level[0].data().iter() {
                assert_abs_diff_eq!(*v, 0.37, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn global_cost_orthogonal_features_match_themselves() {
        let g = one_hot_features(3, 4);
        let qk = qk_from_grids(vec![g.clone()], vec![g]);
        let cost = global_cost(&qk, 0, 0).unwrap();
        assert_eq!(cost.matrix.dim(), (12, 12));
        for r in 0..12 {
            let row = cost.matrix.row(r);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, r);
        }
    }

    #[test]
    fn global_cost_constant_features_are_uniform() {
        let g = Grid2D::from_elem(2, 3, 5, 0.8f32).unwrap();
        let qk = qk_from_grids(vec![g.clone()], vec![g]);
        let cost = global_cost(&qk, 0, 0).unwrap();
        for v in cost.matrix.iter() {
            assert_abs_diff_eq!(*v, 1.0 / 6.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn global_cost_rows_are_stochastic() {
        let qk = qk_from_grids(vec![random_grid(6, 8, 16, 2)], vec![random_grid(6, 8, 16, 3)]);
        let cost = global_cost(&qk, 0, 0).unwrap();
        for row in cost.matrix.rows() {
            let sum: f32 = row.sum();
            assert!((sum - 1.0).abs() <= 1e-5, "row sum {sum}");
            assert!(row.iter().all(|v| *v >= 0.0));
        }
        assert!(global_cost(&qk, 0, 1).is_err());
        assert!(global_cost(&qk, 1, 0).is_err());
    }

    #[test]
    fn identical_frames_give_constant_trajectory() {
        let g = random_grid(4, 6, 8, 4);
        let qk = qk_from_grids(vec![g.clone(); 5], vec![g; 5]);
        let track = zero_shot_track(&qk, Point2D::new(9.0, 6.0), 16, 24).unwrap();
        assert_eq!(track.len(), 5);
        for p in &track[2..] {
            assert_eq!((p.x, p.y), (track[1].x, track[1].y));
        }
    }

    #[test]
    fn circular_shift_moves_track_by_cell_multiples() {
        // Build key frames that shift the frame-0 pattern right by 2 cells
        // per frame; the argmax must follow at 2 * (pixels per cell) per
        // frame until it leaves the border region.
        let (h, w, d) = (5, 8, 20);
        let base = random_grid(h, w, d, 5);
        let shift = |by: usize| {
            grid_from_fn(h, w, d, |y, x, c| {
                let src = (x + w - by % w) % w;
                base.data()[(y, src, c)]
            })
        };
        let q = vec![base.clone(); 4];
        let k = vec![shift(0), shift(2), shift(4), shift(6)];
        let qk = qk_from_grids(q, k);
        let r = 4.0;
        let start = Point2D::new(1.0 * r, 2.0 * r);
        let track = zero_shot_track(&qk, start, h * 4, w * 4).unwrap();
        assert_eq!(track[1].x, (1.0 + 2.0) * r);
        assert_eq!(track[2].x, (1.0 + 4.0) * r);
        for p in &track[1..] {
            assert_eq!(p.y, 2.0 * r);
        }
    }

    #[test]
    fn ties_resolve_to_smallest_row_major_cell() {
        let q = random_grid(3, 3, 4, 6);
        let k = Grid2D::from_elem(3, 3, 4, 0.4f32).unwrap();
        let qk = qk_from_grids(vec![q.clone(), q], vec![k.clone(), k]);
        let track = zero_shot_track(&qk, Point2D::new(8.0, 8.0), 12, 12).unwrap();
        assert_eq!((track[1].x, track[1].y), (0.0, 0.0));
    }

    #[test]
    fn monotone_logit_transforms_keep_the_trajectory() {
        let q = random_grid(4, 5, 6, 7);
        let ks: Vec<_> = (0..4).map(|i| random_grid(4, 5, 6, 20 + i)).collect();
        let qk = qk_from_grids(vec![q.clone(); 4], ks.clone());
        let doubled = qk_from_grids(
            vec![grid_from_fn(4, 5, 6, |y, x, c| 2.0 * q.data()[(y, x, c)]); 4],
            ks,
        );
        let start = Point2D::new(10.0, 7.0);
        let a = zero_shot_track(&qk, start, 16, 20).unwrap();
        let b = zero_shot_track(&doubled, start, 16, 20).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert_eq!((p.x, p.y), (q.x, q.y));
        }
    }

    #[test]
    fn zero_shot_agrees_with_full_cost_argmax() {
        let q = random_grid(4, 6, 10, 8);
        let ks: Vec<_> = (0..3).map(|i| random_grid(4, 6, 10, 30 + i)).collect();
        let qk = qk_from_grids(vec![q; 3], ks);
        let (out_h, out_w) = (16, 24);
        let start = Point2D::new(11.0, 5.0);
        let track = zero_shot_track(&qk, start, out_h, out_w).unwrap();
        let (cx, cy) = (3usize, 1usize);
        for j in 1..3 {
            let cost = global_cost(&qk, 0, j).unwrap();
            let row = cost.matrix.row(cy * 6 + cx);
            let mut best = 0usize;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            let (by, bx) = (best / 6, best % 6);
            assert_eq!(track[j].x, bx as f32 * 4.0, "frame {j}");
            assert_eq!(track[j].y, by as f32 * 4.0, "frame {j}");
        }
    }

    #[test]
    fn zero_shot_rejects_out_of_frame_starts() {
        let g = random_grid(4, 4, 4, 9);
        let qk = qk_from_grids(vec![g.clone(); 2], vec![g; 2]);
        assert!(zero_shot_track(&qk, Point2D::new(-1.0, 0.0), 16, 16).is_err());
        assert!(zero_shot_track(&qk, Point2D::new(0.0, 16.0), 16, 16).is_err());
        assert!(zero_shot_track(&qk, Point2D::new(f32::NAN, 0.0), 16, 16).is_err());
        assert!(zero_shot_track(&qk, Point2D::new(15.0, 15.0), 16, 16).is_ok());
    }

    fn sweep_fixture() -> (VideoDiT<f32>, Vec<SyntheticClip>) {
        let config = DiTConfig {
            layers: 2,
            heads: 2,
            d_head: 8,
            d_video: 8,
            max_frames: 4,
            extract_layer: 1,
            ..DiTConfig::default()
        };
        let model = VideoDiT::new(config, 11).unwrap();
        let gen = GeneratorConfig {
            frames: 3,
            height: 16,
            width: 16,
            num_objects: (1, 2),
            tracks_per_object: 2,
            occluders: 0,
            size_range: (2.0, 4.0),
            ..GeneratorConfig::default()
        };
        let clips: Vec<_> = (0..3).map(|s| generate_clip(&gen, 100 + s).unwrap()).collect();
        (model, clips)
    }

    #[test]
    fn sweep_scores_every_cell_and_selects_the_maximum() {
        let (model, clips) = sweep_fixture();
        let result = sweep_layers_heads(&model, &clips).unwrap();
        assert_eq!(result.delta_avg.dim(), (2, 2));
        let best = result.delta_avg[(result.best_layer - 1, result.best_head)];
        for v in result.delta_avg.iter() {
            assert!(best >= *v);
            assert!(*v >= 0.0 && *v <= 100.0);
        }
        assert!(sweep_layers_heads(&model, &[]).is_err());
    }

    #[test]
    fn sweep_csv_has_one_row_per_cell() {
        let (model, clips) = sweep_fixture();
        let result = sweep_layers_heads(&model, &clips).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep_csv(&result, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * 2);
        assert_eq!(lines[0], "layer,head,delta_avg");
        assert!(lines[1].starts_with("1,0,"));
    }

    #[test]
    fn sample_local_window_sizes() {
        let feat = random_grid(9, 9, 5, 12);
        let single = sample_local(&feat, Point2D::new(16.0, 12.0), 0, 1, 4).unwrap();
        assert_eq!(single.dim(), (1, 5));
        let win = sample_local(&feat, Point2D::new(16.0, 12.0), 3, 1, 4).unwrap();
        assert_eq!(win.dim(), (49, 5));
        assert!(sample_local(&feat, Point2D::new(0.0, 0.0), 1, 0, 4).is_err());
    }

    #[test]
    fn sample_local_at_integer_center_reads_the_grid_directly() {
        let feat = random_grid(9, 9, 3, 13);
        let center = Point2D::new(16.0, 20.0);
        let patch = sample_local(&feat, center, 1, 1, 4).unwrap();
        let (cy, cx) = (5usize, 4usize);
        let mut row = 0;
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let y = (cy as i32 + dy) as usize;
                let x = (cx as i32 + dx) as usize;
                for c in 0..3 {
                    assert_abs_diff_eq!(patch[(row, c)], feat.data()[(y, x, c)], epsilon = 1e-6);
                }
                row += 1;
            }
        }
    }

    #[test]
    fn sample_local_scale_mapping_divides_twice_per_level() {
        let feat = random_grid(6, 6, 2, 14);
        let a = sample_local(&feat, Point2D::new(24.0, 16.0), 0, 2, 4).unwrap();
        let b = sample_local(&feat, Point2D::new(12.0, 8.0), 0, 1, 4).unwrap();
        assert_abs_diff_eq!(a[(0, 0)], b[(0, 0)], epsilon = 1e-6);
        assert_abs_diff_eq!(a[(0, 1)], b[(0, 1)], epsilon = 1e-6);
    }

    #[test]
    fn sample_local_constant_map_ignores_center() {
        let feat = Grid2D::from_elem(7, 7, 3, 0.61f32).unwrap();
        for center in [Point2D::new(0.0, 0.0), Point2D::new(13.0, 9.0), Point2D::new(200.0, -50.0)] {
            let patch = sample_local(&feat, center, 2, 1, 4).unwrap();
            for v in patch.iter() {
                assert_abs_diff_eq!(*v, 0.61, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn local_cost_length_and_row_sums() {
        let q = sample_local(&random_grid(10, 10, 6, 15), Point2D::new(20.0, 20.0), 3, 1, 4).unwrap();
        let k = sample_local(&random_grid(10, 10, 6, 16), Point2D::new(24.0, 16.0), 3, 1, 4).unwrap();
        let cost = local_cost(&q, &k, 6).unwrap();
        assert_eq!(cost.len(), 2401);
        for row in cost.chunks(49) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-5, "row sum {sum}");
        }
    }

    #[test]
    fn local_cost_self_similarity_peaks_on_the_diagonal() {
        let n = 9;
        let patch = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0f32 } else { 0.0 });
        let cost = local_cost(&patch, &patch, n).unwrap();
        for (r, row) in cost.chunks(n).enumerate() {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, r);
        }
    }

    #[test]
    fn local_cost_matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let q = Array2::from_shape_fn((9, 4), |_| dist.sample(&mut rng) as f32);
        let k = Array2::from_shape_fn((9, 4), |_| dist.sample(&mut rng) as f32);
        let cost = local_cost(&q, &k, 4).unwrap();
        let scale = 1.0 / (4.0f64).sqrt();
        for a in 0..9 {
            let logits: Vec<f64> =
                (0..9).map(|b| (0..4).map(|c| (q[(a, c)] * k[(b, c)]) as f64).sum::<f64>() * scale).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for b in 0..9 {
                let reference = exps[b] / z;
                assert!(
                    (cost[a * 9 + b] as f64 - reference).abs() <= 1e-6,
                    "entry ({a}, {b}): {} vs {reference}",
                    cost[a * 9 + b]
                );
            }
        }
    }

    #[test]
    fn local_cost_rejects_mismatched_patches() {
        let q = Array2::<f32>::zeros((9, 4));
        let k = Array2::<f32>::zeros((9, 5));
        assert!(local_cost(&q, &k, 4).is_err());
        assert!(local_cost(&q, &Array2::<f32>::zeros((25, 4)), 4).is_err());
        assert!(local_cost(&q, &q.clone(), 0).is_err());
    }

    fn volume(source: CostSource, scales: usize, frames: usize, len: usize, fill: f32) -> LocalCostVolume {
        LocalCostVolume {
            source,
            radius: 3,
            costs: vec![vec![vec![fill; len]; frames]; scales],
        }
    }

    #[test]
    fn fusion_concatenates_transformer_block_first() {
        let dit = volume(CostSource::Dit, 2, 3, 2401, 0.25);
        let conv = volume(CostSource::Conv, 2, 3, 2401, 0.75);
        let fused = fuse_costs(&dit, &conv).unwrap();
        assert_eq!(fused.source, CostSource::Fused);
        let v = &fused.costs[1][2];
        assert_eq!(v.len(), 4802);
        assert!(v[..2401].iter().all(|x| *x == 0.25));
        assert!(v[2401..].iter().all(|x| *x == 0.75));
    }

    #[test]
    fn fusing_a_volume_with_itself_duplicates_it() {
        let dit = volume(CostSource::Dit, 1, 2, 16, 0.5);
        let fused = fuse_costs(&dit, &dit).unwrap();
        assert_eq!(&fused.costs[0][0][..16], &fused.costs[0][0][16..]);
    }

    #[test]
    fn fusion_rejects_mismatches_and_refusion() {
        let dit = volume(CostSource::Dit, 2, 3, 16, 0.1);
        assert!(fuse_costs(&dit, &volume(CostSource::Conv, 1, 3, 16, 0.1)).is_err());
        assert!(fuse_costs(&dit, &volume(CostSource::Conv, 2, 2, 16, 0.1)).is_err());
        assert!(fuse_costs(&dit, &volume(CostSource::Conv, 2, 3, 81, 0.1)).is_err());
        let fused = fuse_costs(&dit, &volume(CostSource::Conv, 2, 3, 16, 0.2)).unwrap();
        assert!(fuse_costs(&fused, &dit).is_err());
    }

    #[test]
    fn fusion_mode_lengths_and_names_round_trip() {
        assert_eq!(FusionMode::None.cost_len(3), 2401);
        assert_eq!(FusionMode::FeatureConcat.cost_len(3), 2401);
        assert_eq!(FusionMode::CostSum.cost_len(3), 2401);
        assert_eq!(FusionMode::CostConcat.cost_len(3), 4802);
        for mode in FusionMode::ALL {
            assert_eq!(FusionMode::parse(mode.name()).unwrap(), mode);
        }
        assert!(FusionMode::parse("gated").is_err());
    }

    #[test]
    fn cost_mlp_projects_full_width_stacks() {
        let d_in = 4 * 4802;
        let mlp = CostMlp::<f32>::new(d_in, 0).unwrap();
        assert_eq!(d_in, 19208);
        let volume = LocalCostVolume {
            source: CostSource::Fused,
            radius: 3,
            costs: vec![vec![vec![0.01; 4802]; 2]; 4],
        };
        let out = embed_costs(&mlp, &volume).unwrap();
        assert_eq!(out.dim(), (2, 128));
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cost_mlp_zero_weights_reduce_to_bias() {
        let mut mlp = CostMlp::<f32>::new(8, 1).unwrap();
        for name in ["cost_mlp.w1", "cost_mlp.w2"] {
            let id = mlp.store.find(name).unwrap();
            mlp.store.value_mut(id).fill(0.0);
        }
        let b2 = mlp.store.find("cost_mlp.b2").unwrap();
        mlp.store.value_mut(b2).fill(0.125);
        let out = mlp.embed(&Array2::from_elem((3, 8), 42.0f32)).unwrap();
        for v in out.iter() {
            assert_abs_diff_eq!(*v, 0.125, epsilon = 1e-7);
        }
    }

    #[test]
    fn cost_mlp_is_deterministic_and_validates_width() {
        let mlp = CostMlp::<f32>::new(32, 2).unwrap();
        let costs = Array2::from_shape_fn((2, 32), |(i, j)| (i * 32 + j) as f32 * 0.01);
        let a = mlp.embed(&costs).unwrap();
        let b = mlp.embed(&costs).unwrap();
        assert_eq!(a, b);
        assert!(mlp.embed(&Array2::<f32>::zeros((2, 16))).is_err());
        let bad = volume(CostSource::Dit, 1, 2, 16, 0.0);
        assert!(embed_costs(&mlp, &bad).is_err());
    }

    #[test]
    fn gradients_flow_through_sampling_into_the_center() {
        let feat = random_grid(8, 8, 4, 18);
        let mut g = Graph::<f32>::new();
        let mut store = ParamStore::new();
        let center = store.register(
            "center",
            ndarray::arr2(&[[3.3f32, 2.7]]).into_dyn(),
            true,
        );
        let cv = g.param(&store, center);
        let fv = g.constant(feat.data().clone().into_dyn());
        let q = sample_local_on_tape(&mut g, fv, cv, 1);
        let k = g.constant2(Array2::from_elem((9, 4), 0.3f32));
        let cost = local_cost_on_tape(&mut g, q, k, 4).unwrap();
        let loss = g.sum_all(cost);
        let grads = g.backward(loss).unwrap();
        let grad = grads.get(center).expect("center gradient");
        assert!(grad.iter().all(|v| v.is_finite()));
    }
}
