//! Iterative trajectory refiner and the tracker that drives it.
//!
//! The refiner is a small transformer that alternates attention over time
//! (within one track) and over points (within one frame). Each call emits a
//! residual update to every per-frame estimate of position, visibility and
//! confidence; running it for a few iterations turns the coarse query
//! broadcast into a full trajectory. [`Tracker`] wires the refiner to the
//! feature backbones and the local cost pipeline.

use ndarray::{Array1, Array2, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::convnet::{ConvNet, CONV_STRIDE};
use crate::dit::VideoDiT;
use crate::error::{Error, Result};
use crate::matching::{
    sample_local_on_tape, CostMlp, FusionMode, PyramidConfig, COST_EMBED_DIM,
};
use crate::numerics::{Grid2D, Point2D, Scalar};

const LN_EPS: f64 = 1e-5;

/// Shape of the refiner transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerConfig {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Fourier bands per displacement encoding.
    pub num_bands: usize,
    /// Refinement iterations per tracking call.
    pub iterations: usize,
    /// Width of the cost embedding slot in each token.
    pub d_embed: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            width: 256,
            heads: 4,
            blocks: 3,
            num_bands: 8,
            iterations: 4,
            d_embed: COST_EMBED_DIM,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.blocks == 0 {
            return Err(Error::invalid("refiner width, heads and blocks must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "refiner width {} must be divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.width % 2 != 0 {
            return Err(Error::invalid("refiner width must be even"));
        }
        if self.num_bands == 0 || self.iterations == 0 || self.d_embed == 0 {
            return Err(Error::invalid(
                "refiner bands, iterations and embedding width must be positive",
            ));
        }
        Ok(())
    }

    /// Width of one input token: two displacement encodings, the visibility
    /// and confidence logits, and the cost embedding.
    pub fn token_dim(&self) -> usize {
        2 * (4 * self.num_bands + 2) + 2 + self.d_embed
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    time: AttnIds,
    ln2: (ParamId, ParamId),
    point: AttnIds,
    ln3: (ParamId, ParamId),
    mlp: (ParamId, ParamId, ParamId, ParamId),
}

/// Factorized-attention transformer producing residual track updates.
///
/// The output head starts at zero, so a freshly built refiner is the
/// identity on its input estimates.
#[derive(Debug, Clone)]
pub struct Refiner<S: Scalar = f32> {
    pub config: RefinerConfig,
    pub store: ParamStore<S>,
    proj: (ParamId, ParamId),
    blocks: Vec<BlockIds>,
    out_ln: (ParamId, ParamId),
    out: (ParamId, ParamId),
}

impl<S: Scalar> Refiner<S> {
    pub fn new(config: RefinerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.width;
        let mat = |rng: &mut ChaCha8Rng, name: String, rows: usize, cols: usize, store: &mut ParamStore<S>| {
            let std = (2.0 / (rows + cols) as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            let w = Array2::from_shape_fn((rows, cols), |_| S::from_f64_c(dist.sample(rng)));
            store.register(name, w.into_dyn(), true)
        };
        let vec_zero = |name: String, len: usize, store: &mut ParamStore<S>| {
            store.register(name, Array1::<S>::zeros(len).into_dyn(), true)
        };
        let norm = |name: &str, store: &mut ParamStore<S>| {
            let g = store.register(format!("{name}.g"), Array1::<S>::ones(d).into_dyn(), true);
            let b = store.register(format!("{name}.b"), Array1::<S>::zeros(d).into_dyn(), true);
            (g, b)
        };

        let proj = (
            mat(&mut rng, "ref.proj.w".into(), config.token_dim(), d, &mut store),
            vec_zero("ref.proj.b".into(), d, &mut store),
        );
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let attn = |tag: &str, rng: &mut ChaCha8Rng, store: &mut ParamStore<S>| AttnIds {
                wq: mat(rng, format!("ref.blk{i}.{tag}.wq"), d, d, store),
                bq: vec_zero(format!("ref.blk{i}.{tag}.bq"), d, store),
                wk: mat(rng, format!("ref.blk{i}.{tag}.wk"), d, d, store),
                bk: vec_zero(format!("ref.blk{i}.{tag}.bk"), d, store),
                wv: mat(rng, format!("ref.blk{i}.{tag}.wv"), d, d, store),
                bv: vec_zero(format!("ref.blk{i}.{tag}.bv"), d, store),
                wo: mat(rng, format!("ref.blk{i}.{tag}.wo"), d, d, store),
                bo: vec_zero(format!("ref.blk{i}.{tag}.bo"), d, store),
            };
            let ln1 = norm(&format!("ref.blk{i}.ln1"), &mut store);
            let time = attn("time", &mut rng, &mut store);
            let ln2 = norm(&format!("ref.blk{i}.ln2"), &mut store);
            let point = attn("point", &mut rng, &mut store);
            let ln3 = norm(&format!("ref.blk{i}.ln3"), &mut store);
            let mlp = (
                mat(&mut rng, format!("ref.blk{i}.mlp.w1"), d, 4 * d, &mut store),
                vec_zero(format!("ref.blk{i}.mlp.b1"), 4 * d, &mut store),
                mat(&mut rng, format!("ref.blk{i}.mlp.w2"), 4 * d, d, &mut store),
                vec_zero(format!("ref.blk{i}.mlp.b2"), d, &mut store),
            );
            blocks.push(BlockIds { ln1, time, ln2, point, ln3, mlp });
        }
        let out_ln = norm("ref.out.ln", &mut store);
        let out = (
            store.register("ref.out.w", Array2::<S>::zeros((d, 4)).into_dyn(), true),
            vec_zero("ref.out.b".into(), 4, &mut store),
        );
        Ok(Refiner { config, store, proj, blocks, out_ln, out })
    }

    fn project(&self, g: &mut Graph<S>, x: Var, w: ParamId, b: ParamId) -> Var {
        let wv = g.param(&self.store, w);
        let bv = g.param(&self.store, b);
        let m = g.matmul(x, wv);
        g.add_row_vec(m, bv)
    }

    fn norm(&self, g: &mut Graph<S>, x: Var, ids: (ParamId, ParamId)) -> Var {
        let gain = g.param(&self.store, ids.0);
        let bias = g.param(&self.store, ids.1);
        g.layer_norm_rows(x, gain, bias, S::from_f64_c(LN_EPS))
    }

    /// One refinement pass over `n_points * frames` tokens laid out with the
    /// point index outer (row `n * frames + f`). Returns the `[rows, 4]`
    /// residuals `(dx, dy, dvis, dconf)`.
    pub fn refine_step_on_tape(
        &self,
        g: &mut Graph<S>,
        tokens: Var,
        n_points: usize,
        frames: usize,
    ) -> Result<Var> {
        let rows = n_points * frames;
        let shape = g.value(tokens).shape().to_vec();
        if rows == 0 || shape != [rows, self.config.token_dim()] {
            return Err(Error::invalid(format!(
                "token matrix {:?} does not match {} points x {} frames x dim {}",
                shape,
                n_points,
                frames,
                self.config.token_dim()
            )));
        }
        let mut x = self.project(g, tokens, self.proj.0, self.proj.1);
        let pe = temporal_encoding::<S>(n_points, frames, self.config.width);
        x = g.add_const(x, &pe.into_dyn());

        let heads = self.config.heads;
        for blk in &self.blocks {
            let h = self.norm(g, x, blk.ln1);
            let q = self.project(g, h, blk.time.wq, blk.time.bq);
            let k = self.project(g, h, blk.time.wk, blk.time.bk);
            let v = self.project(g, h, blk.time.wv, blk.time.bv);
            let mut parts = Vec::with_capacity(n_points);
            for n in 0..n_points {
                let qn = g.slice_rows(q, n * frames, frames);
                let kn = g.slice_rows(k, n * frames, frames);
                let vn = g.slice_rows(v, n * frames, frames);
                parts.push(g.attention(qn, kn, vn, heads));
            }
            let cat = g.concat_rows(&parts);
            let o = self.project(g, cat, blk.time.wo, blk.time.bo);
            x = g.add(x, o);

            let h = self.norm(g, x, blk.ln2);
            let q = self.project(g, h, blk.point.wq, blk.point.bq);
            let k = self.project(g, h, blk.point.wk, blk.point.bk);
            let v = self.project(g, h, blk.point.wv, blk.point.bv);
            let mut parts = Vec::with_capacity(frames);
            for f in 0..frames {
                let idx: Vec<usize> = (0..n_points).map(|n| n * frames + f).collect();
                let qf = g.gather_rows(q, &idx);
                let kf = g.gather_rows(k, &idx);
                let vf = g.gather_rows(v, &idx);
                parts.push(g.attention(qf, kf, vf, heads));
            }
            let cat = g.concat_rows(&parts);
            let mut inv = vec![0usize; rows];
            for n in 0..n_points {
                for f in 0..frames {
                    inv[n * frames + f] = f * n_points + n;
                }
            }
            let restored = g.gather_rows(cat, &inv);
            let o = self.project(g, restored, blk.point.wo, blk.point.bo);
            x = g.add(x, o);

            let h = self.norm(g, x, blk.ln3);
            let h1 = self.project(g, h, blk.mlp.0, blk.mlp.1);
            let h1 = g.gelu(h1);
            let h2 = self.project(g, h1, blk.mlp.2, blk.mlp.3);
            x = g.add(x, h2);
        }

        let h = self.norm(g, x, self.out_ln);
        Ok(self.project(g, h, self.out.0, self.out.1))
    }
}

/// Sinusoidal frame-index encoding replicated across points, `[rows, width]`.
fn temporal_encoding<S: Scalar>(n_points: usize, frames: usize, width: usize) -> Array2<S> {
    let half = width / 2;
    let mut pe = Array2::<S>::zeros((n_points * frames, width));
    for f in 0..frames {
        let mut row = Array1::<f64>::zeros(width);
        for i in 0..half {
            let freq = 1.0 / 10000f64.powf(i as f64 / half as f64);
            row[2 * i] = (f as f64 * freq).sin();
            row[2 * i + 1] = (f as f64 * freq).cos();
        }
        for n in 0..n_points {
            for (j, &v) in row.iter().enumerate() {
                pe[(n * frames + f, j)] = S::from_f64_c(v);
            }
        }
    }
    pe
}

/// Fourier features of a `[rows, 2]` displacement variable. Row order matches
/// [`crate::numerics::fourier_encode`]: the raw displacement followed by
/// `sin`/`cos` pairs per octave, x before y.
pub fn fourier_on_tape<S: Scalar>(g: &mut Graph<S>, disp: Var, num_bands: usize) -> Var {
    let mut parts = vec![disp];
    for b in 0..num_bands {
        let scaled = g.scale(disp, S::from_f64_c(2.0f64.powi(b as i32)));
        let sin = g.sin(scaled);
        let cos = g.cos(scaled);
        let sdx = g.slice_cols(sin, 0, 1);
        let cdx = g.slice_cols(cos, 0, 1);
        let sdy = g.slice_cols(sin, 1, 1);
        let cdy = g.slice_cols(cos, 1, 1);
        parts.extend([sdx, cdx, sdy, cdy]);
    }
    g.concat_cols(&parts)
}

/// Builds one track's refiner tokens from its current estimates.
///
/// `pos` is `[frames, 2]`, `vis`, `conf` are `[frames, 1]` logits and
/// `embeds` is `[frames, d_embed]`. Each token holds the encoded displacement
/// from the previous frame and to the next one; the slots that fall off
/// either end of the clip stay all-zero, which keeps them distinct from a
/// genuine zero displacement (whose encoding has unit cosines).
pub fn assemble_tokens_on_tape<S: Scalar>(
    g: &mut Graph<S>,
    pos: Var,
    vis: Var,
    conf: Var,
    embeds: Var,
    num_bands: usize,
) -> Result<Var> {
    let shape = g.value(pos).shape().to_vec();
    if shape.len() != 2 || shape[1] != 2 || shape[0] == 0 {
        return Err(Error::invalid(format!("positions must be [frames, 2], got {shape:?}")));
    }
    let frames = shape[0];
    let enc_dim = 4 * num_bands + 2;
    let zero_wide = g.constant(ArrayD::<S>::zeros(ndarray::IxDyn(&[1, enc_dim])));
    let (eta_prev, eta_next) = if frames == 1 {
        (zero_wide, zero_wide)
    } else {
        let tail = g.slice_rows(pos, 1, frames - 1);
        let head = g.slice_rows(pos, 0, frames - 1);
        let diff = g.sub(tail, head);
        let eta = fourier_on_tape(g, diff, num_bands);
        (g.concat_rows(&[zero_wide, eta]), g.concat_rows(&[eta, zero_wide]))
    };
    Ok(g.concat_cols(&[eta_prev, eta_next, vis, conf, embeds]))
}

/// A point to track: `pos` in pixels on frame `frame`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackQuery<S = f32> {
    pub id: i64,
    pub frame: usize,
    pub pos: Point2D<S>,
}

/// Final trajectory for one query. Visibility and confidence are
/// probabilities.
#[derive(Debug, Clone)]
pub struct TrackOutput<S = f32> {
    pub query: TrackQuery<S>,
    pub positions: Vec<Point2D<S>>,
    pub vis: Vec<S>,
    pub conf: Vec<S>,
}

/// One iteration's estimates, still on the tape. Rows are laid out point
/// outer, frame inner; `vis` and `conf` are logits.
#[derive(Debug, Clone, Copy)]
pub struct EstimateVars {
    pub pos: Var,
    pub vis: Var,
    pub conf: Var,
}

/// Everything a tracking pass leaves on the tape, plus the positions each
/// iteration sampled its cost windows at (entry 0 is the query broadcast).
#[derive(Debug, Clone)]
pub struct TapeTrack<S: Scalar = f32> {
    pub iterations: Vec<EstimateVars>,
    pub sample_centers: Vec<Array2<S>>,
    pub num_points: usize,
    pub frames: usize,
}

/// Feature sources, cost pipeline and refiner bundled behind one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub dit: crate::dit::DiTConfig,
    pub pyramid: PyramidConfig,
    pub fusion: FusionMode,
    pub refiner: RefinerConfig,
    /// Channels produced by the convolutional backbone.
    pub conv_channels: usize,
    /// Adapt the attention projections of the extraction layers instead of
    /// leaving the video model frozen.
    pub use_lora: bool,
    /// Frames per chunk when extracting features off the tape.
    pub chunk_len: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            dit: crate::dit::DiTConfig::default(),
            pyramid: PyramidConfig::default(),
            fusion: FusionMode::CostConcat,
            refiner: RefinerConfig::default(),
            conv_channels: 64,
            use_lora: true,
            chunk_len: 8,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        self.refiner.validate()?;
        if self.refiner.d_embed != COST_EMBED_DIM {
            return Err(Error::invalid(format!(
                "refiner embedding width {} must match the cost embedding width {}",
                self.refiner.d_embed, COST_EMBED_DIM
            )));
        }
        if self.pyramid.stride != self.dit.patch_stride {
            return Err(Error::invalid(format!(
                "pyramid stride {} must match the video model's patch stride {}",
                self.pyramid.stride, self.dit.patch_stride
            )));
        }
        if self.fusion != FusionMode::None && self.dit.patch_stride != CONV_STRIDE {
            return Err(Error::invalid(format!(
                "fusing conv features requires patch stride {CONV_STRIDE}, got {}",
                self.dit.patch_stride
            )));
        }
        if self.chunk_len < 2 {
            return Err(Error::invalid("chunk_len must be >= 2"));
        }
        Ok(())
    }

    /// Input width of the cost MLP under this fusion mode.
    pub fn cost_input_dim(&self) -> usize {
        self.pyramid.num_scales * self.fusion.cost_len(self.pyramid.radius)
    }
}

/// The full point tracker.
#[derive(Debug, Clone)]
pub struct Tracker<S: Scalar = f32> {
    pub config: TrackerConfig,
    pub dit: VideoDiT<S>,
    pub conv: Option<ConvNet<S>>,
    pub cost_mlp: CostMlp<S>,
    pub refiner: Refiner<S>,
}

impl<S: Scalar> Tracker<S> {
    pub fn new(config: TrackerConfig, seed: u64) -> Result<Self> {
        let dit = VideoDiT::new(config.dit.clone(), seed)?;
        Self::with_dit(dit, config, seed)
    }

    /// Builds the tracker around an existing video model, e.g. one restored
    /// from a checkpoint. Attaches adapters when the config asks for them
    /// and the model does not have any yet.
    pub fn with_dit(mut dit: VideoDiT<S>, config: TrackerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if dit.config != config.dit {
            return Err(Error::invalid(
                "video model configuration does not match the tracker configuration",
            ));
        }
        if config.use_lora && dit.lora().is_none() {
            dit.attach_lora(config.dit.lora_rank, config.dit.extract_layer)?;
        }
        let conv = if config.fusion == FusionMode::None {
            None
        } else {
            Some(ConvNet::new(config.conv_channels, seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?)
        };
        let cost_mlp = CostMlp::new(config.cost_input_dim(), seed.wrapping_add(0x2545_f491_4f6c_dd1d))?;
        let refiner = Refiner::new(config.refiner, seed.wrapping_add(0x94d0_49bb_1331_11eb))?;
        Ok(Tracker { config, dit, conv, cost_mlp, refiner })
    }

    /// All trainable parameter stores, for the optimizer.
    pub fn stores(&self) -> Vec<&ParamStore<S>> {
        let mut v = vec![&self.dit.store, &self.cost_mlp.store, &self.refiner.store];
        if let Some(conv) = &self.conv {
            v.insert(1, &conv.store);
        }
        v
    }

    /// Runs the full pipeline on the tape and returns the per-iteration
    /// estimates. With `train` set, feature extraction stays differentiable
    /// (the whole clip must then fit in one pass); otherwise features are
    /// extracted in chunks off the tape and enter as constants.
    pub fn track_on_tape(
        &self,
        g: &mut Graph<S>,
        video: &[Grid2D<S>],
        queries: &[TrackQuery<S>],
        train: bool,
    ) -> Result<TapeTrack<S>> {
        if queries.is_empty() {
            return Err(Error::invalid("at least one query is required"));
        }
        if video.is_empty() {
            return Err(Error::invalid("cannot track in an empty video"));
        }
        let frames = video.len();
        let (px_h, px_w) = (video[0].h(), video[0].w());
        for q in queries {
            if q.frame >= frames {
                return Err(Error::invalid(format!(
                    "query frame {} out of range for a {frames}-frame clip",
                    q.frame
                )));
            }
            let (x, y) = (q.pos.x.to_f64(), q.pos.y.to_f64());
            if !x.is_finite() || !y.is_finite() || x < 0.0 || y < 0.0 || x > (px_w - 1) as f64 || y > (px_h - 1) as f64 {
                return Err(Error::invalid(format!(
                    "query ({x}, {y}) outside the {px_w}x{px_h} frame"
                )));
            }
        }

        let layer = self.config.dit.extract_layer;
        let head = self.config.dit.extract_head;
        let scales = self.config.pyramid.num_scales;
        let radius = self.config.pyramid.radius;
        let stride = self.config.dit.patch_stride;
        let query_frames: BTreeSet<usize> = queries.iter().map(|q| q.frame).collect();

        // Scale-1 feature grids per frame, on the tape.
        let (dit_q1, dit_k1) = if train {
            let latents = self.dit.encode_frames(video)?;
            let (qv, kv) = self.dit.extract_qk_on_tape(g, &latents, layer, head)?;
            let (_, lh, lw, _) = latents.data.dim();
            let d = self.config.dit.d_head;
            let grid = |g: &mut Graph<S>, v: Var, f: usize| {
                let rows = g.slice_rows(v, f * lh * lw, lh * lw);
                g.reshape(rows, &[lh, lw, d])
            };
            let q1: Vec<Option<Var>> = (0..frames)
                .map(|f| query_frames.contains(&f).then(|| grid(g, qv, f)))
                .collect();
            let k1: Vec<Var> = (0..frames).map(|f| grid(g, kv, f)).collect();
            (q1, k1)
        } else {
            let feats = self.dit.chunked_extract(video, self.config.chunk_len, layer, head)?;
            let q1 = (0..frames)
                .map(|f| {
                    query_frames
                        .contains(&f)
                        .then(|| g.constant(feats.q[f].data().clone().into_dyn()))
                })
                .collect();
            let k1 = feats
                .k
                .iter()
                .map(|grid| g.constant(grid.data().clone().into_dyn()))
                .collect();
            (q1, k1)
        };

        let conv1: Option<Vec<Var>> = match &self.conv {
            None => None,
            Some(conv) => {
                let mut grids = Vec::with_capacity(frames);
                if train {
                    for frame in video {
                        let centered = frame.data().mapv(|v| v - S::from_f64_c(0.5));
                        let fv = g.constant(centered.into_dyn());
                        grids.push(conv.features_on_tape(g, fv)?);
                    }
                } else {
                    for grid in conv.extract(video)? {
                        grids.push(g.constant(grid.data().clone().into_dyn()));
                    }
                }
                Some(grids)
            }
        };

        let pyramid = |g: &mut Graph<S>, base: Var| -> Vec<Var> {
            let mut levels = vec![base];
            for _ in 1..scales {
                let prev = *levels.last().unwrap();
                let shape = g.value(prev).shape().to_vec();
                let (oh, ow) = ((shape[0] / 2).max(1), (shape[1] / 2).max(1));
                levels.push(g.resize_bilinear(prev, oh, ow));
            }
            levels
        };
        // Indexed [frame][scale - 1].
        let dit_k: Vec<Vec<Var>> = dit_k1.into_iter().map(|v| pyramid(g, v)).collect();
        let dit_q: Vec<Option<Vec<Var>>> = dit_q1.into_iter().map(|o| o.map(|v| pyramid(g, v))).collect();
        let conv_k: Option<Vec<Vec<Var>>> =
            conv1.map(|grids| grids.into_iter().map(|v| pyramid(g, v)).collect());
        let conv_q: Option<&Vec<Vec<Var>>> = conv_k.as_ref();

        let d_head = self.config.dit.d_head;
        let d_conv = self.config.conv_channels;
        let fusion = self.config.fusion;

        // Query-side windows never move, so sample them once per scale.
        struct QueryWindows {
            dit: Vec<Var>,
            conv: Vec<Var>,
        }
        let mut query_windows = Vec::with_capacity(queries.len());
        for q in queries {
            let mut dit_w = Vec::with_capacity(scales);
            let mut conv_w = Vec::with_capacity(scales);
            for s in 1..=scales {
                let divisor = S::from_f64_c((stride * (1usize << (s - 1))) as f64);
                let mut c = Array2::<S>::zeros((1, 2));
                c[(0, 0)] = q.pos.x / divisor;
                c[(0, 1)] = q.pos.y / divisor;
                let center = g.constant2(c);
                let q_grid = dit_q[q.frame].as_ref().expect("query frame features")[s - 1];
                dit_w.push(sample_local_on_tape(g, q_grid, center, radius));
                if let Some(cq) = conv_q {
                    conv_w.push(sample_local_on_tape(g, cq[q.frame][s - 1], center, radius));
                }
            }
            query_windows.push(QueryWindows { dit: dit_w, conv: conv_w });
        }

        let n_points = queries.len();
        let rows = n_points * frames;
        let mut init = Array2::<S>::zeros((rows, 2));
        for (n, q) in queries.iter().enumerate() {
            for f in 0..frames {
                init[(n * frames + f, 0)] = q.pos.x;
                init[(n * frames + f, 1)] = q.pos.y;
            }
        }
        let mut pos = g.constant2(init);
        let mut vis = g.constant(ArrayD::<S>::zeros(ndarray::IxDyn(&[rows, 1])));
        let mut conf = vis;

        let mut iterations = Vec::with_capacity(self.config.refiner.iterations);
        let mut sample_centers = Vec::with_capacity(self.config.refiner.iterations);
        for _ in 0..self.config.refiner.iterations {
            sample_centers.push(g.value2(pos).to_owned());
            let mut cost_rows = Vec::with_capacity(rows);
            for (n, q) in queries.iter().enumerate() {
                for f in 0..frames {
                    let center_px = g.slice_rows(pos, n * frames + f, 1);
                    let mut parts = Vec::new();
                    for s in 1..=scales {
                        let inv = S::one() / S::from_f64_c((stride * (1usize << (s - 1))) as f64);
                        let center = g.scale(center_px, inv);
                        let k_dit = sample_local_on_tape(g, dit_k[f][s - 1], center, radius);
                        match fusion {
                            FusionMode::None => {
                                parts.push(crate::matching::local_cost_on_tape(
                                    g,
                                    query_windows[n].dit[s - 1],
                                    k_dit,
                                    d_head,
                                )?);
                            }
                            FusionMode::FeatureConcat => {
                                let ck = conv_k.as_ref().expect("conv features")[f][s - 1];
                                let k_conv = sample_local_on_tape(g, ck, center, radius);
                                let q_cat = g.concat_cols(&[
                                    query_windows[n].dit[s - 1],
                                    query_windows[n].conv[s - 1],
                                ]);
                                let k_cat = g.concat_cols(&[k_dit, k_conv]);
                                parts.push(crate::matching::local_cost_on_tape(
                                    g,
                                    q_cat,
                                    k_cat,
                                    d_head + d_conv,
                                )?);
                            }
                            FusionMode::CostSum | FusionMode::CostConcat => {
                                let ck = conv_k.as_ref().expect("conv features")[f][s - 1];
                                let k_conv = sample_local_on_tape(g, ck, center, radius);
                                let c_dit = crate::matching::local_cost_on_tape(
                                    g,
                                    query_windows[n].dit[s - 1],
                                    k_dit,
                                    d_head,
                                )?;
                                let c_conv = crate::matching::local_cost_on_tape(
                                    g,
                                    query_windows[n].conv[s - 1],
                                    k_conv,
                                    d_conv,
                                )?;
                                if fusion == FusionMode::CostSum {
                                    parts.push(g.add(c_dit, c_conv));
                                } else {
                                    parts.push(c_dit);
                                    parts.push(c_conv);
                                }
                            }
                        }
                    }
                    cost_rows.push(g.concat_cols(&parts));
                }
                let _ = q;
            }
            let stacked = g.concat_rows(&cost_rows);
            let embeds = self.cost_mlp.embed_on_tape(g, stacked)?;

            let mut token_parts = Vec::with_capacity(n_points);
            for n in 0..n_points {
                let pos_n = g.slice_rows(pos, n * frames, frames);
                let vis_n = g.slice_rows(vis, n * frames, frames);
                let conf_n = g.slice_rows(conf, n * frames, frames);
                let emb_n = g.slice_rows(embeds, n * frames, frames);
                token_parts.push(assemble_tokens_on_tape(
                    g,
                    pos_n,
                    vis_n,
                    conf_n,
                    emb_n,
                    self.config.refiner.num_bands,
                )?);
            }
            let tokens = g.concat_rows(&token_parts);
            let delta = self.refiner.refine_step_on_tape(g, tokens, n_points, frames)?;
            let d_pos = g.slice_cols(delta, 0, 2);
            let d_vis = g.slice_cols(delta, 2, 1);
            let d_conf = g.slice_cols(delta, 3, 1);
            pos = g.add(pos, d_pos);
            vis = g.add(vis, d_vis);
            conf = g.add(conf, d_conf);
            iterations.push(EstimateVars { pos, vis, conf });
        }

        Ok(TapeTrack { iterations, sample_centers, num_points: n_points, frames })
    }

    /// Tracks the queries through the clip and returns per-frame positions
    /// with visibility/confidence probabilities.
    pub fn track(&self, video: &[Grid2D<S>], queries: &[TrackQuery<S>]) -> Result<Vec<TrackOutput<S>>> {
        let mut g = Graph::new();
        let tape = self.track_on_tape(&mut g, video, queries, false)?;
        let last = tape.iterations.last().expect("at least one iteration");
        let pos = g.value2(last.pos).to_owned();
        let vis = g.value2(last.vis).to_owned();
        let conf = g.value2(last.conf).to_owned();
        let frames = tape.frames;
        let sigmoid = |v: S| S::one() / (S::one() + (-v).exp());
        let mut out = Vec::with_capacity(queries.len());
        for (n, q) in queries.iter().enumerate() {
            let positions = (0..frames)
                .map(|f| Point2D::new(pos[(n * frames + f, 0)], pos[(n * frames + f, 1)]))
                .collect();
            out.push(TrackOutput {
                query: *q,
                positions,
                vis: (0..frames).map(|f| sigmoid(vis[(n * frames + f, 0)])).collect(),
                conf: (0..frames).map(|f| sigmoid(conf[(n * frames + f, 0)])).collect(),
            });
        }
        Ok(out)
    }
}

/// One line of a predictions file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredRecord {
    pub id: i64,
    /// `[frame, x, y]` the track was queried at.
    pub query: (usize, f32, f32),
    pub xy: Vec<(f32, f32)>,
    pub vis: Vec<f32>,
    pub conf: Vec<f32>,
}

impl PredRecord {
    pub fn from_output(out: &TrackOutput<f32>) -> Self {
        PredRecord {
            id: out.query.id,
            query: (out.query.frame, out.query.pos.x, out.query.pos.y),
            xy: out.positions.iter().map(|p| (p.x, p.y)).collect(),
            vis: out.vis.clone(),
            conf: out.conf.clone(),
        }
    }
}

/// Writes predictions as one JSON object per line.
pub fn save_predictions(path: &Path, outputs: &[TrackOutput<f32>]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for out in outputs {
        let rec = PredRecord::from_output(out);
        let line = serde_json::to_string(&rec)
            .map_err(|e| Error::CorruptArtifact { path: path.to_path_buf(), reason: e.to_string() })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredRecord = serde_json::from_str(&line).map_err(|e| Error::CorruptArtifact {
            path: path.to_path_buf(),
            reason: format!("line {}: bad prediction record: {e}", i + 1),
        })?;
        if rec.xy.len() != rec.vis.len() || rec.xy.len() != rec.conf.len() {
            return Err(Error::CorruptArtifact {
                path: path.to_path_buf(),
                reason: format!("line {}: track arrays disagree on length", i + 1),
            });
        }
        out.push(rec);
    }
    Ok(out)
}
