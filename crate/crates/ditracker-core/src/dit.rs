//! Toy video diffusion transformer with full 3D attention.
//!
//! The model encodes each frame independently into a latent grid (a frozen
//! strided convolution, so clip latents are a fixed function of the video),
//! flattens all frames into one token sequence, and runs pre-norm
//! transformer blocks where every token attends to every token of every
//! frame. It is pretrained generatively with flow matching and then used as
//! a feature extractor: the per-head query/key projections of a chosen
//! layer, computed on clean latents at the minimal-noise timestep, drive
//! point tracking downstream.
//!
//! Long clips that exceed the attention budget are handled by chunked
//! extraction: the first frame is prepended to every later chunk as a shared
//! anchor so all chunks key against common content, and the anchor's
//! duplicate features are discarded.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::autograd::{Adam, Graph, ParamId, ParamStore, Var};
use crate::checkpoint::{self, Manifest};
use crate::datagen::SyntheticClip;
use crate::error::{Error, Result};
use crate::numerics::{Grid2D, Scalar};

const ENCODER_KERNEL: usize = 5;
const ENCODER_PAD: usize = 2;
const MLP_RATIO: usize = 4;
const TIME_EMBED_DIM: usize = 32;
const LN_EPS: f64 = 1e-5;

/// Architecture settings. `d_model = heads * d_head`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiTConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_head: usize,
    /// Spatial downsampling factor of the frame encoder.
    pub patch_stride: usize,
    /// Latent channels per token (the flow-matching state dimension).
    pub d_video: usize,
    /// Longest token sequence the model accepts, in frames.
    pub max_frames: usize,
    pub lora_rank: usize,
    /// Default extraction layer, 1-based (1..=layers).
    pub extract_layer: usize,
    /// Default extraction head, 0-based (0..heads).
    pub extract_head: usize,
}

impl Default for DiTConfig {
    fn default() -> Self {
        DiTConfig {
            layers: 6,
            heads: 4,
            d_head: 32,
            patch_stride: 4,
            d_video: 48,
            max_frames: 12,
            lora_rank: 16,
            extract_layer: 4,
            extract_head: 0,
        }
    }
}

impl DiTConfig {
    pub fn d_model(&self) -> usize {
        self.heads * self.d_head
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_head", self.d_head),
            ("patch_stride", self.patch_stride),
            ("d_video", self.d_video),
            ("max_frames", self.max_frames),
            ("lora_rank", self.lora_rank),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("DiT config field {name} must be positive")));
            }
        }
        if self.d_model() % 16 != 0 {
            return Err(Error::invalid(format!(
                "d_model = heads*d_head = {} must be divisible by 16 so the factorized positional encoding splits into even sin/cos pairs",
                self.d_model()
            )));
        }
        if self.extract_layer == 0 || self.extract_layer > self.layers {
            return Err(Error::invalid(format!(
                "extract_layer {} out of range 1..={}",
                self.extract_layer, self.layers
            )));
        }
        if self.extract_head >= self.heads {
            return Err(Error::invalid(format!(
                "extract_head {} out of range 0..{}",
                self.extract_head, self.heads
            )));
        }
        if self.lora_rank > self.d_model() {
            return Err(Error::invalid(format!(
                "lora_rank {} exceeds d_model {}",
                self.lora_rank,
                self.d_model()
            )));
        }
        Ok(())
    }
}

/// Per-frame latent grid stack: `[frames, h, w, d_video]`.
#[derive(Debug, Clone)]
pub struct LatentVideo<S = f32> {
    pub data: Array4<S>,
}

impl<S: Scalar> LatentVideo<S> {
    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w, _) = self.data.dim();
        (h, w)
    }

    fn tokens(&self) -> Array2<S> {
        let (f, h, w, d) = self.data.dim();
        self.data
            .view()
            .into_shape_with_order((f * h * w, d))
            .expect("latents not contiguous")
            .to_owned()
    }

    fn slice_frames(&self, idx: &[usize]) -> LatentVideo<S> {
        let views: Vec<_> = idx.iter().map(|&i| self.data.index_axis(ndarray::Axis(0), i)).collect();
        LatentVideo { data: ndarray::stack(ndarray::Axis(0), &views).expect("frame stack") }
    }
}

/// Query/key feature maps of one attention head: `frames × h × w × d_head`
/// grids for both projections.
#[derive(Debug, Clone)]
pub struct QKFeatures<S = f32> {
    pub q: Vec<Grid2D<S>>,
    pub k: Vec<Grid2D<S>>,
    /// 1-based layer the features came from.
    pub source_layer: usize,
    /// 0-based head the features came from.
    pub source_head: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct LoraBlockIds {
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
}

/// Low-rank adapter state; present once [`VideoDiT::attach_lora`] has run.
#[derive(Debug, Clone)]
pub struct LoraState {
    pub rank: usize,
    /// Adapters cover layers `1..=up_to_layer`.
    pub up_to_layer: usize,
    blocks: Vec<LoraBlockIds>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LoraManifest {
    rank: usize,
    up_to_layer: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DiTManifestConfig {
    dit: DiTConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lora: Option<LoraManifest>,
}

/// The transformer plus its parameter store.
#[derive(Debug, Clone)]
pub struct VideoDiT<S: Scalar = f32> {
    pub config: DiTConfig,
    pub store: ParamStore<S>,
    enc_w: ParamId,
    enc_b: ParamId,
    in_w: ParamId,
    in_b: ParamId,
    time_w: ParamId,
    time_b: ParamId,
    blocks: Vec<BlockIds>,
    final_ln_g: ParamId,
    final_ln_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    lora: Option<LoraState>,
}

fn normal_mat<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<S> {
    let dist = Normal::new(0.0, std).unwrap();
    Array2::from_shape_fn((rows, cols), |_| S::from_f64_c(dist.sample(rng)))
}

impl<S: Scalar> VideoDiT<S> {
    /// Builds a model with freshly initialized parameters. The frame encoder
    /// is initialized and permanently frozen; everything else is trainable
    /// until LoRA attachment flips the base to frozen.
    pub fn new(config: DiTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model();
        let dv = config.d_video;
        let mut store = ParamStore::new();

        let enc_fan_in = ENCODER_KERNEL * ENCODER_KERNEL * 3;
        let enc_std = (12.0 / enc_fan_in as f64).sqrt();
        let dist = Normal::new(0.0, enc_std).unwrap();
        let enc_w = store.register(
            "enc.w",
            Array4::from_shape_fn((dv, ENCODER_KERNEL, ENCODER_KERNEL, 3), |_| {
                S::from_f64_c(dist.sample(&mut rng))
            })
            .into_dyn(),
            false,
        );
        let enc_b = store.register("enc.b", Array1::<S>::zeros(dv).into_dyn(), false);

        let xavier = |fan_in: usize, fan_out: usize| (2.0 / (fan_in + fan_out) as f64).sqrt();
        let in_w = store.register(
            "in_proj.w",
            normal_mat(&mut rng, dv, d, xavier(dv, d)).into_dyn(),
            true,
        );
        let in_b = store.register("in_proj.b", Array1::<S>::zeros(d).into_dyn(), true);
        let time_w = store.register(
            "time.w",
            normal_mat(&mut rng, TIME_EMBED_DIM, d, xavier(TIME_EMBED_DIM, d)).into_dyn(),
            true,
        );
        let time_b = store.register("time.b", Array1::<S>::zeros(d).into_dyn(), true);

        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
                normal_mat(rng, rows, cols, xavier(rows, cols)).into_dyn()
            };
            let wq = store.register(format!("blk{l}.attn.wq"), p(&mut rng, d, d), true);
            let bq = store.register(format!("blk{l}.attn.bq"), Array1::<S>::zeros(d).into_dyn(), true);
            let wk = store.register(format!("blk{l}.attn.wk"), p(&mut rng, d, d), true);
            let bk = store.register(format!("blk{l}.attn.bk"), Array1::<S>::zeros(d).into_dyn(), true);
            let wv = store.register(format!("blk{l}.attn.wv"), p(&mut rng, d, d), true);
            let bv = store.register(format!("blk{l}.attn.bv"), Array1::<S>::zeros(d).into_dyn(), true);
            let wo = store.register(format!("blk{l}.attn.wo"), p(&mut rng, d, d), true);
            let bo = store.register(format!("blk{l}.attn.bo"), Array1::<S>::zeros(d).into_dyn(), true);
            let ln1_g = store.register(format!("blk{l}.ln1.g"), Array1::<S>::ones(d).into_dyn(), true);
            let ln1_b = store.register(format!("blk{l}.ln1.b"), Array1::<S>::zeros(d).into_dyn(), true);
            let ln2_g = store.register(format!("blk{l}.ln2.g"), Array1::<S>::ones(d).into_dyn(), true);
            let ln2_b = store.register(format!("blk{l}.ln2.b"), Array1::<S>::zeros(d).into_dyn(), true);
            let hidden = MLP_RATIO * d;
            let mlp_w1 = store.register(format!("blk{l}.mlp.w1"), p(&mut rng, d, hidden), true);
            let mlp_b1 =
                store.register(format!("blk{l}.mlp.b1"), Array1::<S>::zeros(hidden).into_dyn(), true);
            let mlp_w2 = store.register(format!("blk{l}.mlp.w2"), p(&mut rng, hidden, d), true);
            let mlp_b2 = store.register(format!("blk{l}.mlp.b2"), Array1::<S>::zeros(d).into_dyn(), true);
            blocks.push(BlockIds {
                ln1_g,
                ln1_b,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_g,
                ln2_b,
                mlp_w1,
                mlp_b1,
                mlp_w2,
                mlp_b2,
            });
        }
        let final_ln_g = store.register("final_ln.g", Array1::<S>::ones(d).into_dyn(), true);
        let final_ln_b = store.register("final_ln.b", Array1::<S>::zeros(d).into_dyn(), true);
        let head_w = store.register("head.w", Array2::<S>::zeros((d, dv)).into_dyn(), true);
        let head_b = store.register("head.b", Array1::<S>::zeros(dv).into_dyn(), true);

        Ok(VideoDiT {
            config,
            store,
            enc_w,
            enc_b,
            in_w,
            in_b,
            time_w,
            time_b,
            blocks,
            final_ln_g,
            final_ln_b,
            head_w,
            head_b,
            lora: None,
        })
    }

    pub fn lora(&self) -> Option<&LoraState> {
        self.lora.as_ref()
    }

    /// Encodes each frame independently with the frozen strided convolution.
    /// Frames are centered to `[-0.5, 0.5]` first; the latent grid cell
    /// `(cy, cx)` is centered on pixel `(r*cy, r*cx)`.
    pub fn encode_frames(&self, video: &[Grid2D<S>]) -> Result<LatentVideo<S>> {
        if video.is_empty() {
            return Err(Error::invalid("cannot encode an empty video"));
        }
        let r = self.config.patch_stride;
        let (h, w) = (video[0].h(), video[0].w());
        if h % r != 0 || w % r != 0 {
            return Err(Error::invalid(format!(
                "frame size {h}x{w} not divisible by patch stride {r}"
            )));
        }
        for frame in video {
            if frame.h() != h || frame.w() != w || frame.channels() != 3 {
                return Err(Error::invalid("all frames must be RGB with identical size"));
            }
        }
        let dv = self.config.d_video;
        let (oh, ow) = (h / r, w / r);
        let wgt = self.store.value(self.enc_w).view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let bias = self.store.value(self.enc_b);
        let mut latents = Array4::<S>::zeros((video.len(), oh, ow, dv));
        let half = S::from_f64_c(0.5);
        for (f, frame) in video.iter().enumerate() {
            let px = frame.data();
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..dv {
                        let mut acc = bias[co];
                        for ky in 0..ENCODER_KERNEL {
                            let iy = (oy * r + ky) as isize - ENCODER_PAD as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..ENCODER_KERNEL {
                                let ix = (ox * r + kx) as isize - ENCODER_PAD as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                for ci in 0..3 {
                                    acc += wgt[(co, ky, kx, ci)]
                                        * (px[(iy as usize, ix as usize, ci)] - half);
                                }
                            }
                        }
                        latents[(f, oy, ox, co)] = acc;
                    }
                }
            }
        }
        Ok(LatentVideo { data: latents })
    }

    /// Factorized sinusoidal positional encoding over (frame, y, x), one row
    /// per token in `(f, y, x)` row-major order.
    fn positional_encoding(&self, f: usize, h: usize, w: usize) -> Array2<S> {
        let d = self.config.d_model();
        let (df, dy) = (d / 4, 3 * d / 8);
        let mut pe = Array2::<S>::zeros((f * h * w, d));
        for fi in 0..f {
            for yi in 0..h {
                for xi in 0..w {
                    let row = (fi * h + yi) * w + xi;
                    let mut out = pe.row_mut(row);
                    let slice = out.as_slice_mut().unwrap();
                    sin_cos_fill(S::from_f64_c(fi as f64), &mut slice[..df]);
                    sin_cos_fill(S::from_f64_c(yi as f64), &mut slice[df..df + dy]);
                    sin_cos_fill(S::from_f64_c(xi as f64), &mut slice[df + dy..]);
                }
            }
        }
        pe
    }

    fn lora_for(&self, layer_idx: usize) -> Option<&LoraBlockIds> {
        self.lora.as_ref().and_then(|l| l.blocks.get(layer_idx))
    }

    /// Applies `x W + b` with the block's optional low-rank residual
    /// `x A B` on the same tape.
    fn project(
        &self,
        g: &mut Graph<S>,
        x: Var,
        w: ParamId,
        b: ParamId,
        adapter: Option<(ParamId, ParamId)>,
    ) -> Var {
        let wv = g.param(&self.store, w);
        let bv = g.param(&self.store, b);
        let mut out = g.matmul(x, wv);
        if let Some((a_id, b_id)) = adapter {
            let av = g.param(&self.store, a_id);
            let bvv = g.param(&self.store, b_id);
            let down = g.matmul(x, av);
            let up = g.matmul(down, bvv);
            out = g.add(out, up);
        }
        g.add_row_vec(out, bv)
    }

    fn layer_norm(&self, g: &mut Graph<S>, x: Var, gain: ParamId, bias: ParamId) -> Var {
        let gv = g.param(&self.store, gain);
        let bv = g.param(&self.store, bias);
        g.layer_norm_rows(x, gv, bv, S::from_f64_c(LN_EPS))
    }

    /// Runs the token stack on the tape. With `stop_at_qk = Some(l)`
    /// (1-based layer) it returns that layer's full pre-attention query/key
    /// projections `[n, d_model]` and skips all later work; otherwise it
    /// runs all blocks and returns the velocity prediction `[n, d_video]`.
    fn run(
        &self,
        g: &mut Graph<S>,
        latent_tokens: Var,
        dims: (usize, usize, usize),
        t: S,
        stop_at_qk: Option<usize>,
    ) -> RunOutput {
        let (f, h, w) = dims;
        let n = f * h * w;
        let d = self.config.d_model();

        let mut x = self.project(g, latent_tokens, self.in_w, self.in_b, None);
        let pe = self.positional_encoding(f, h, w);
        x = g.add_const(x, &pe.into_dyn());
        let temb = time_features(t);
        let temb_v = g.constant2(temb.insert_axis(ndarray::Axis(0)).into_dimensionality().unwrap());
        let tw = g.param(&self.store, self.time_w);
        let tb = g.param(&self.store, self.time_b);
        let trow = g.matmul(temb_v, tw);
        let trow = g.add_row_vec(trow, tb);
        let tfull = g.broadcast_rows(trow, n);
        x = g.add(x, tfull);

        for (idx, blk) in self.blocks.iter().enumerate() {
            let adapters = self.lora_for(idx);
            let normed = self.layer_norm(g, x, blk.ln1_g, blk.ln1_b);
            let q = self.project(g, normed, blk.wq, blk.bq, adapters.map(|a| a.q));
            let k = self.project(g, normed, blk.wk, blk.bk, adapters.map(|a| a.k));
            if stop_at_qk == Some(idx + 1) {
                return RunOutput::QK(q, k);
            }
            let v = self.project(g, normed, blk.wv, blk.bv, adapters.map(|a| a.v));
            let attn = g.attention(q, k, v, self.config.heads);
            let attn_out = self.project(g, attn, blk.wo, blk.bo, adapters.map(|a| a.o));
            x = g.add(x, attn_out);

            let normed2 = self.layer_norm(g, x, blk.ln2_g, blk.ln2_b);
            let w1 = g.param(&self.store, blk.mlp_w1);
            let b1 = g.param(&self.store, blk.mlp_b1);
            let hid = g.matmul(normed2, w1);
            let hid = g.add_row_vec(hid, b1);
            let hid = g.gelu(hid);
            let w2 = g.param(&self.store, blk.mlp_w2);
            let b2 = g.param(&self.store, blk.mlp_b2);
            let mlp_out = g.matmul(hid, w2);
            let mlp_out = g.add_row_vec(mlp_out, b2);
            x = g.add(x, mlp_out);
        }
        debug_assert!(stop_at_qk.is_none(), "extraction layer beyond block count");
        let normed = self.layer_norm(g, x, self.final_ln_g, self.final_ln_b);
        let v = self.project(g, normed, self.head_w, self.head_b, None);
        let _ = d;
        RunOutput::Velocity(v)
    }

    fn validate_extraction(&self, latents: &LatentVideo<S>, layer: usize, head: usize) -> Result<()> {
        if layer == 0 || layer > self.config.layers {
            return Err(Error::invalid(format!(
                "extraction layer {layer} out of range 1..={}",
                self.config.layers
            )));
        }
        if head >= self.config.heads {
            return Err(Error::invalid(format!(
                "extraction head {head} out of range 0..{}",
                self.config.heads
            )));
        }
        if latents.frames() == 0 {
            return Err(Error::invalid("cannot extract from an empty latent video"));
        }
        if latents.frames() > self.config.max_frames {
            return Err(Error::invalid(format!(
                "{} frames exceed max_frames {}; use chunked extraction",
                latents.frames(),
                self.config.max_frames
            )));
        }
        Ok(())
    }

    /// Tape-building extraction: returns `[f*h*w, d_head]` query and key
    /// variables so downstream losses can differentiate through the adapters.
    pub fn extract_qk_on_tape(
        &self,
        g: &mut Graph<S>,
        latents: &LatentVideo<S>,
        layer: usize,
        head: usize,
    ) -> Result<(Var, Var)> {
        self.validate_extraction(latents, layer, head)?;
        let (f, h, w, _) = latents.data.dim();
        let tokens = g.constant2(latents.tokens());
        match self.run(g, tokens, (f, h, w), S::zero(), Some(layer)) {
            RunOutput::QK(q, k) => {
                let start = head * self.config.d_head;
                let qh = g.slice_cols(q, start, self.config.d_head);
                let kh = g.slice_cols(k, start, self.config.d_head);
                Ok((qh, kh))
            }
            RunOutput::Velocity(_) => unreachable!(),
        }
    }

    /// Extracts the query/key grids of `(layer, head)` on clean latents at
    /// the minimal-noise timestep.
    pub fn extract_qk(&self, latents: &LatentVideo<S>, layer: usize, head: usize) -> Result<QKFeatures<S>> {
        let mut g = Graph::new();
        let (qv, kv) = self.extract_qk_on_tape(&mut g, latents, layer, head)?;
        let (f, h, w, _) = latents.data.dim();
        Ok(QKFeatures {
            q: split_frame_grids(g.value2(qv), f, h, w),
            k: split_frame_grids(g.value2(kv), f, h, w),
            source_layer: layer,
            source_head: head,
        })
    }

    /// One forward pass to `layer`, returning the features of every head.
    /// Equivalent to calling [`VideoDiT::extract_qk`] per head, but the
    /// transformer runs once; used by the layer/head sweep.
    pub fn extract_qk_all_heads(&self, latents: &LatentVideo<S>, layer: usize) -> Result<Vec<QKFeatures<S>>> {
        self.validate_extraction(latents, layer, 0)?;
        let (f, h, w, _) = latents.data.dim();
        let mut g = Graph::new();
        let tokens = g.constant2(latents.tokens());
        let (q, k) = match self.run(&mut g, tokens, (f, h, w), S::zero(), Some(layer)) {
            RunOutput::QK(q, k) => (q, k),
            RunOutput::Velocity(_) => unreachable!(),
        };
        let qm = g.value2(q);
        let km = g.value2(k);
        Ok((0..self.config.heads)
            .map(|m| {
                let start = m * self.config.d_head;
                QKFeatures {
                    q: split_frame_grids(qm.slice(ndarray::s![.., start..start + self.config.d_head]), f, h, w),
                    k: split_frame_grids(km.slice(ndarray::s![.., start..start + self.config.d_head]), f, h, w),
                    source_layer: layer,
                    source_head: m,
                }
            })
            .collect())
    }

    /// Splits long videos into chunks of `chunk_len` frames, prepends the
    /// first frame to every chunk after the first as the shared anchor, and
    /// stitches per-chunk features back in original frame order. When
    /// `chunk_len >= F` this is a single un-chunked pass.
    pub fn chunked_extract(
        &self,
        video: &[Grid2D<S>],
        chunk_len: usize,
        layer: usize,
        head: usize,
    ) -> Result<QKFeatures<S>> {
        if chunk_len < 2 {
            return Err(Error::invalid(format!("chunk_len must be >= 2, got {chunk_len}")));
        }
        let latents = self.encode_frames(video)?;
        let f = latents.frames();
        if chunk_len >= f {
            return self.extract_qk(&latents, layer, head);
        }
        if chunk_len + 1 > self.config.max_frames {
            return Err(Error::invalid(format!(
                "chunk_len {} plus the anchor exceeds max_frames {}",
                chunk_len, self.config.max_frames
            )));
        }
        let mut q = Vec::with_capacity(f);
        let mut k = Vec::with_capacity(f);
        let mut start = 0;
        while start < f {
            let end = (start + chunk_len).min(f);
            let mut idx: Vec<usize> = Vec::new();
            let anchored = start > 0;
            if anchored {
                idx.push(0);
            }
            idx.extend(start..end);
            let part = self.extract_qk(&latents.slice_frames(&idx), layer, head)?;
            let skip = anchored as usize;
            q.extend(part.q.into_iter().skip(skip));
            k.extend(part.k.into_iter().skip(skip));
            start = end;
        }
        Ok(QKFeatures { q, k, source_layer: layer, source_head: head })
    }

    /// Adds zero-initialized low-rank adapters to the query, key, value and
    /// output projections of layers `1..=up_to_layer`, freezes the base, and
    /// leaves only the adapters trainable. The adapted forward pass equals
    /// the frozen one until the up-projections move away from zero.
    pub fn attach_lora(&mut self, rank: usize, up_to_layer: usize) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::invalid("LoRA adapters are already attached"));
        }
        if rank == 0 {
            return Err(Error::invalid("LoRA rank must be >= 1"));
        }
        let d = self.config.d_model();
        if rank > d {
            return Err(Error::invalid(format!("LoRA rank {rank} exceeds d_model {d}")));
        }
        if up_to_layer == 0 || up_to_layer > self.config.layers {
            return Err(Error::invalid(format!(
                "LoRA up_to_layer {} out of range 1..={}",
                up_to_layer, self.config.layers
            )));
        }
        let base_ids: Vec<_> = self.store.ids().collect();
        for id in base_ids {
            self.store.set_trainable(id, false);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0xD17A);
        let std = (1.0 / d as f64).sqrt();
        let mut blocks = Vec::with_capacity(up_to_layer);
        for l in 0..up_to_layer {
            let pair = |name: &str, rng: &mut ChaCha8Rng, store: &mut ParamStore<S>| {
                let a = store.register(
                    format!("blk{l}.lora.{name}.a"),
                    normal_mat(rng, d, rank, std).into_dyn(),
                    true,
                );
                let b = store.register(
                    format!("blk{l}.lora.{name}.b"),
                    Array2::<S>::zeros((rank, d)).into_dyn(),
                    true,
                );
                (a, b)
            };
            blocks.push(LoraBlockIds {
                q: pair("q", &mut rng, &mut self.store),
                k: pair("k", &mut rng, &mut self.store),
                v: pair("v", &mut rng, &mut self.store),
                o: pair("o", &mut rng, &mut self.store),
            });
        }
        self.lora = Some(LoraState { rank, up_to_layer, blocks });
        Ok(())
    }

    /// Writes the parameter blob plus a manifest recording the architecture
    /// and, when attached, the adapter shape.
    pub fn save(&self, path: &Path, seed: u64, step: u64, corpus_hash: Option<String>) -> Result<()> {
        let config = DiTManifestConfig {
            dit: self.config.clone(),
            lora: self.lora.as_ref().map(|l| LoraManifest { rank: l.rank, up_to_layer: l.up_to_layer }),
        };
        let manifest = Manifest {
            kind: "dit".into(),
            config: serde_json::to_value(&config).expect("config serializes"),
            seed,
            step,
            corpus_hash,
        };
        checkpoint::save(&self.store, &manifest, path)
    }

}

impl VideoDiT<f32> {
    /// Rebuilds a model from a checkpoint, restoring the architecture from
    /// the manifest and every tensor by name.
    pub fn load(path: &Path) -> Result<Self> {
        let (loaded, manifest) = checkpoint::load(path)?;
        if manifest.kind != "dit" {
            return Err(Error::CorruptArtifact {
                path: path.to_path_buf(),
                reason: format!("checkpoint kind '{}' is not 'dit'", manifest.kind),
            });
        }
        let config: DiTManifestConfig =
            serde_json::from_value(manifest.config.clone()).map_err(|e| Error::CorruptArtifact {
                path: path.to_path_buf(),
                reason: format!("bad manifest config: {e}"),
            })?;
        let mut model = VideoDiT::new(config.dit, manifest.seed)?;
        if let Some(lora) = &config.lora {
            model.attach_lora(lora.rank, lora.up_to_layer)?;
        }
        if model.store.len() != loaded.len() {
            return Err(Error::CorruptArtifact {
                path: path.to_path_buf(),
                reason: format!(
                    "checkpoint has {} tensors, architecture expects {}",
                    loaded.len(),
                    model.store.len()
                ),
            });
        }
        for (_, param) in loaded.iter() {
            let id = model.store.find(&param.name).ok_or_else(|| Error::CorruptArtifact {
                path: path.to_path_buf(),
                reason: format!("unexpected tensor '{}' in checkpoint", param.name),
            })?;
            if model.store.value(id).shape() != param.value.shape() {
                return Err(Error::CorruptArtifact {
                    path: path.to_path_buf(),
                    reason: format!(
                        "tensor '{}' has shape {:?}, expected {:?}",
                        param.name,
                        param.value.shape(),
                        model.store.value(id).shape()
                    ),
                });
            }
            model.store.value_mut(id).assign(&param.value);
        }
        Ok(model)
    }
}

enum RunOutput {
    Velocity(Var),
    QK(Var, Var),
}

/// Splits a `[f*h*w, d]` token matrix back into per-frame grids.
fn split_frame_grids<S: Scalar>(mat: ndarray::ArrayView2<'_, S>, f: usize, h: usize, w: usize) -> Vec<Grid2D<S>> {
    let d = mat.ncols();
    (0..f)
        .map(|fi| {
            Grid2D::new(Array3::from_shape_fn((h, w, d), |(y, x, c)| mat[((fi * h + y) * w + x, c)]))
                .expect("frame grid")
        })
        .collect()
}

/// Sinusoidal features of the flow time, spread over `[0, 1]` by scaling to
/// a nominal 1000-step grid.
fn time_features<S: Scalar>(t: S) -> Array1<S> {
    let mut out = Array1::<S>::zeros(TIME_EMBED_DIM);
    sin_cos_fill(t * S::from_f64_c(1000.0), out.as_slice_mut().unwrap());
    out
}

/// Interleaved sin/cos features with geometrically spaced frequencies, the
/// standard transformer encoding. `out.len()` must be even.
fn sin_cos_fill<S: Scalar>(pos: S, out: &mut [S]) {
    let half = out.len() / 2;
    debug_assert_eq!(half * 2, out.len());
    let base = S::from_f64_c(10000.0);
    for i in 0..half {
        let omega = base.powf(-S::from_f64_c(i as f64) / S::from_f64_c(half as f64));
        out[2 * i] = (pos * omega).sin();
        out[2 * i + 1] = (pos * omega).cos();
    }
}

/// Linear interpolation between clean latents and noise, the forward
/// corruption path of flow matching.
pub fn interpolate_latents<S: Scalar>(z0: &Array2<S>, eps: &Array2<S>, t: S) -> Array2<S> {
    z0.mapv(|v| v * (S::one() - t)) + eps.mapv(|v| v * t)
}

/// Settings for [`pretrain_flow_matching`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSettings {
    pub steps: usize,
    pub lr: f32,
    pub seed: u64,
    /// Clips reserved from the end of the corpus for the held-out MSE probe.
    pub holdout_clips: usize,
    /// Loss-curve sampling interval in steps.
    pub log_every: usize,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings { steps: 2000, lr: 3e-4, seed: 0, holdout_clips: 8, log_every: 25 }
    }
}

/// Loss curve and held-out probe results from a pretraining run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub loss_curve: Vec<(u64, f32)>,
    /// Held-out velocity MSE of the model before any update.
    pub untrained_holdout_mse: f32,
    /// Held-out velocity MSE after the final step, same noise draws.
    pub final_holdout_mse: f32,
}

fn velocity_mse_value<S: Scalar>(model: &VideoDiT<S>, z0: &Array2<S>, eps: &Array2<S>, t: S, dims: (usize, usize, usize)) -> S {
    let mut g = Graph::new();
    let loss = velocity_mse_on_tape(model, &mut g, z0, eps, t, dims);
    g.scalar_value(loss)
}

fn velocity_mse_on_tape<S: Scalar>(
    model: &VideoDiT<S>,
    g: &mut Graph<S>,
    z0: &Array2<S>,
    eps: &Array2<S>,
    t: S,
    dims: (usize, usize, usize),
) -> Var {
    let zt = interpolate_latents(z0, eps, t);
    let target = eps - z0;
    let zt_v = g.constant2(zt);
    let pred = match model.run(g, zt_v, dims, t, None) {
        RunOutput::Velocity(v) => v,
        RunOutput::QK(..) => unreachable!(),
    };
    let tgt_v = g.constant2(target);
    let diff = g.sub(pred, tgt_v);
    let sq = g.mul(diff, diff);
    g.mean_all(sq)
}

/// Generative pretraining: regresses the velocity field `eps - z0` at
/// uniformly drawn interpolation times, one clip per step, Adam with
/// gradient clipping. Returns the loss curve and the held-out probe pair.
pub fn pretrain_flow_matching(
    model: &mut VideoDiT<f32>,
    corpus: &[SyntheticClip],
    settings: &PretrainSettings,
) -> Result<PretrainReport> {
    if corpus.is_empty() {
        return Err(Error::invalid("pretraining corpus is empty"));
    }
    let holdout_n = settings.holdout_clips.min(corpus.len().saturating_sub(1));
    let (train, holdout) = corpus.split_at(corpus.len() - holdout_n);
    let train = if train.is_empty() { corpus } else { train };

    let mut latents = Vec::with_capacity(train.len());
    for clip in train {
        if clip.frames() > model.config.max_frames {
            return Err(Error::invalid(format!(
                "clip has {} frames, model max_frames is {}",
                clip.frames(),
                model.config.max_frames
            )));
        }
        latents.push(model.encode_frames(&clip.video)?);
    }
    let holdout_latents: Vec<LatentVideo<f32>> = holdout
        .iter()
        .map(|c| model.encode_frames(&c.video))
        .collect::<Result<_>>()?;

    let probe_sets: Vec<&LatentVideo<f32>> = if holdout_latents.is_empty() {
        latents.iter().take(2).collect()
    } else {
        holdout_latents.iter().collect()
    };
    let probe = |model: &VideoDiT<f32>| -> f32 {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x9E3779B97F4A7C15);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut total = 0.0;
        for lat in &probe_sets {
            let (f, h, w, _) = lat.data.dim();
            let z0 = lat.tokens();
            let eps = Array2::from_shape_fn(z0.dim(), |_| normal.sample(&mut rng) as f32);
            let t: f32 = rand::Rng::random_range(&mut rng, 0.0..1.0);
            total += velocity_mse_value(model, &z0, &eps, t, (f, h, w));
        }
        total / probe_sets.len() as f32
    };

    let untrained_holdout_mse = probe(model);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut opt = Adam::new();
    let mut loss_curve = Vec::new();
    let log_every = settings.log_every.max(1);
    for step in 0..settings.steps {
        let clip_idx = rand::Rng::random_range(&mut rng, 0..train.len());
        let lat = &latents[clip_idx];
        let (f, h, w, _) = lat.data.dim();
        let z0 = lat.tokens();
        let eps = Array2::from_shape_fn(z0.dim(), |_| normal.sample(&mut rng) as f32);
        let t: f32 = rand::Rng::random_range(&mut rng, 0.0..1.0);
        let mut g = Graph::new();
        let loss = velocity_mse_on_tape(model, &mut g, &z0, &eps, t, (f, h, w));
        let loss_val = g.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(Error::invalid(format!("pretraining loss diverged at step {step}")));
        }
        let grads = g.backward(loss)?;
        opt.step(&mut model.store, &grads, settings.lr, Some(1.0));
        if step % log_every == 0 || step + 1 == settings.steps {
            loss_curve.push((step as u64, loss_val));
        }
    }
    let final_holdout_mse = probe(model);
    Ok(PretrainReport { loss_curve, untrained_holdout_mse, final_holdout_mse })
}
