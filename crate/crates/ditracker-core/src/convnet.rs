//! Per-frame residual convolutional feature extractor.
//!
//! Four residual blocks (strides 2, 2, 1, 1; kernel 3, instance norm, ReLU)
//! downsample each frame by 4 so the output grid lines up cell-for-cell with
//! the transformer's latent grid. Frames never mix: this branch supplies the
//! fine-grained, high-frequency complement to the transformer features and
//! is trained end-to-end with the tracker.

use ndarray::{Array1, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::numerics::{Grid2D, Scalar};

const KERNEL: usize = 3;
const IN_EPS: f64 = 1e-5;
/// Total spatial downsampling of the extractor.
pub const CONV_STRIDE: usize = 4;

/// Feature grids for every frame: `frames × H/4 × W/4 × d_out`.
pub type ConvFeatures<S = f32> = Vec<Grid2D<S>>;

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    conv1: (ParamId, ParamId),
    norm1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    norm2: (ParamId, ParamId),
    skip: Option<(ParamId, ParamId)>,
    stride: usize,
}

/// The extractor's parameters. All tensors are trainable; unlike the
/// transformer there is no generative pretraining stage for this branch.
#[derive(Debug, Clone)]
pub struct ConvNet<S: Scalar = f32> {
    pub store: ParamStore<S>,
    pub d_out: usize,
    blocks: Vec<BlockIds>,
}

fn he_conv<S: Scalar>(rng: &mut ChaCha8Rng, k: usize, cin: usize, cout: usize) -> Array4<S> {
    let std = (2.0 / (k * k * cin) as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Array4::from_shape_fn((k, k, cin, cout), |_| S::from_f64_c(dist.sample(rng)))
}

impl<S: Scalar> ConvNet<S> {
    /// Builds the four-block network producing `d_out` channels. `d_out`
    /// must be even (the first block uses `d_out / 2` channels).
    pub fn new(d_out: usize, seed: u64) -> Result<Self> {
        if d_out == 0 || d_out % 2 != 0 {
            return Err(Error::invalid(format!("d_out must be positive and even, got {d_out}")));
        }
        let mid = d_out / 2;
        let plan = [(3usize, mid, 2usize), (mid, d_out, 2), (d_out, d_out, 1), (d_out, d_out, 1)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut blocks = Vec::with_capacity(plan.len());
        for (i, &(cin, cout, stride)) in plan.iter().enumerate() {
            let conv = |name: &str, k: usize, ci: usize, co: usize, store: &mut ParamStore<S>, rng: &mut ChaCha8Rng| {
                let w = store.register(
                    format!("cnn.blk{i}.{name}.w"),
                    he_conv(rng, k, ci, co).into_dyn(),
                    true,
                );
                let b = store.register(format!("cnn.blk{i}.{name}.b"), Array1::<S>::zeros(co).into_dyn(), true);
                (w, b)
            };
            let norm = |name: &str, co: usize, store: &mut ParamStore<S>| {
                let g = store.register(format!("cnn.blk{i}.{name}.g"), Array1::<S>::ones(co).into_dyn(), true);
                let b = store.register(format!("cnn.blk{i}.{name}.b"), Array1::<S>::zeros(co).into_dyn(), true);
                (g, b)
            };
            let conv1 = conv("conv1", KERNEL, cin, cout, &mut store, &mut rng);
            let norm1 = norm("norm1", cout, &mut store);
            let conv2 = conv("conv2", KERNEL, cout, cout, &mut store, &mut rng);
            let norm2 = norm("norm2", cout, &mut store);
            let skip = if stride != 1 || cin != cout {
                Some(conv("skip", 1, cin, cout, &mut store, &mut rng))
            } else {
                None
            };
            blocks.push(BlockIds { conv1, norm1, conv2, norm2, skip, stride });
        }
        Ok(ConvNet { store, d_out, blocks })
    }

    fn instance_norm(&self, g: &mut Graph<S>, x: Var, ids: (ParamId, ParamId)) -> Var {
        let dims = g.value(x).shape().to_vec();
        let (h, w, c) = (dims[0], dims[1], dims[2]);
        let flat = g.reshape(x, &[h * w, c]);
        let gain = g.param(&self.store, ids.0);
        let bias = g.param(&self.store, ids.1);
        let normed = g.col_norm(flat, gain, bias, S::from_f64_c(IN_EPS));
        g.reshape(normed, &[h, w, c])
    }

    /// Builds the feature extraction for one frame on the tape. `frame` must
    /// be an `[h, w, 3]` variable with `h`, `w` divisible by 4; the result is
    /// `[h/4, w/4, d_out]`.
    pub fn features_on_tape(&self, g: &mut Graph<S>, frame: Var) -> Result<Var> {
        let dims = g.value(frame).shape().to_vec();
        if dims.len() != 3 || dims[2] != 3 {
            return Err(Error::invalid("conv input must be [h, w, 3]"));
        }
        if dims[0] % CONV_STRIDE != 0 || dims[1] % CONV_STRIDE != 0 {
            return Err(Error::invalid(format!(
                "frame size {}x{} not divisible by the conv stride {}",
                dims[0], dims[1], CONV_STRIDE
            )));
        }
        let mut x = frame;
        for blk in &self.blocks {
            let w1 = g.param(&self.store, blk.conv1.0);
            let b1 = g.param(&self.store, blk.conv1.1);
            let mut y = g.conv2d(x, w1, b1, blk.stride, 1);
            y = self.instance_norm(g, y, blk.norm1);
            y = g.relu(y);
            let w2 = g.param(&self.store, blk.conv2.0);
            let b2 = g.param(&self.store, blk.conv2.1);
            y = g.conv2d(y, w2, b2, 1, 1);
            y = self.instance_norm(g, y, blk.norm2);
            let skip = match blk.skip {
                Some((ws, bs)) => {
                    let wv = g.param(&self.store, ws);
                    let bv = g.param(&self.store, bs);
                    g.conv2d(x, wv, bv, blk.stride, 0)
                }
                None => x,
            };
            let sum = g.add(y, skip);
            x = g.relu(sum);
        }
        Ok(x)
    }

    /// Extracts features for every frame of a video. Frames are centered to
    /// `[-0.5, 0.5]` before the first convolution.
    pub fn extract(&self, video: &[Grid2D<S>]) -> Result<ConvFeatures<S>> {
        if video.is_empty() {
            return Err(Error::invalid("cannot extract features from an empty video"));
        }
        let mut out = Vec::with_capacity(video.len());
        for frame in video {
            let mut g = Graph::new();
            let centered = frame.data().mapv(|v| v - S::from_f64_c(0.5));
            let fv = g.constant(centered.into_dyn());
            let feat = self.features_on_tape(&mut g, fv)?;
            let arr = g
                .value(feat)
                .clone()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("conv features are 3-d");
            out.push(Grid2D::new(arr)?);
        }
        Ok(out)
    }
}
