//! Synthetic video generator with exact ground-truth tracks, plus the
//! corruption suite and difficulty stratification used by evaluation.
//!
//! Clips contain textured rigid shapes translating along piecewise-linear
//! trajectories over a textured static background, rendered back-to-front
//! into an RGB frame and an object-id buffer. Track visibility is defined
//! pixel-exactly: a point is visible in a frame iff its rounded pixel lies
//! inside the frame and the id buffer at that pixel belongs to the point's
//! object. Occluded frames keep the geometric position, so tracks stay
//! supervised through occlusions and frame exits.
//!
//! All randomness is drawn from a ChaCha stream seeded by the caller:
//! the same seed and config reproduce a clip byte for byte.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{bilinear_sample, Grid2D, Point2D};

/// Settings for [`generate_clip`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Frames per clip.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range for the number of tracked shapes.
    pub num_objects: (usize, usize),
    /// Ground-truth tracks attached to each shape's interior.
    pub tracks_per_object: usize,
    /// Per-frame speed range in pixels.
    pub speed_range: (f32, f32),
    /// Number of velocity re-draws along the trajectory (piecewise-linear).
    pub direction_changes: usize,
    /// Untracked shapes rendered on top of everything else.
    pub occluders: usize,
    /// Shape radius range in pixels (rect half-extent or disc radius).
    pub size_range: (f32, f32),
    /// Texture granularity: side length in pixels of one noise cell.
    pub texture_cells: f32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            frames: 8,
            height: 64,
            width: 96,
            num_objects: (2, 8),
            tracks_per_object: 3,
            speed_range: (0.5, 3.0),
            direction_changes: 2,
            occluders: 1,
            size_range: (5.0, 12.0),
            texture_cells: 4.0,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::invalid("clip must have at least one frame"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid(format!(
                "frame size must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.num_objects.0 == 0 || self.num_objects.0 > self.num_objects.1 {
            return Err(Error::invalid(format!(
                "object count range must be non-empty and start at >= 1, got {:?}",
                self.num_objects
            )));
        }
        if self.tracks_per_object == 0 {
            return Err(Error::invalid("tracks_per_object must be >= 1"));
        }
        if !(self.speed_range.0 <= self.speed_range.1 && self.speed_range.0 >= 0.0) {
            return Err(Error::invalid(format!("bad speed range {:?}", self.speed_range)));
        }
        if !(self.size_range.0 <= self.size_range.1 && self.size_range.0 > 0.0) {
            return Err(Error::invalid(format!("bad size range {:?}", self.size_range)));
        }
        Ok(())
    }
}

/// One ground-truth track: geometric positions for every frame (kept during
/// occlusion and frame exits) and per-frame pixel-exact visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthTrack {
    pub id: usize,
    pub positions: Vec<Point2D<f32>>,
    pub visible: Vec<bool>,
}

impl GroundTruthTrack {
    /// Index of the first visible frame (the query frame), if any.
    pub fn first_visible(&self) -> Option<usize> {
        self.visible.iter().position(|&v| v)
    }
}

/// A rendered clip with ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticClip {
    /// RGB frames in `[0, 1]`, each `h × w × 3`.
    pub video: Vec<Grid2D<f32>>,
    pub tracks: Vec<GroundTruthTrack>,
    pub seed: u64,
}

impl SyntheticClip {
    pub fn frames(&self) -> usize {
        self.video.len()
    }

    pub fn height(&self) -> usize {
        self.video[0].h()
    }

    pub fn width(&self) -> usize {
        self.video[0].w()
    }
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Disc { radius: f32 },
    Rect { half_w: f32, half_h: f32 },
}

impl ShapeKind {
    fn contains(&self, center: Point2D<f32>, p: Point2D<f32>) -> bool {
        let dx = p.x - center.x;
        let dy = p.y - center.y;
        match *self {
            ShapeKind::Disc { radius } => dx * dx + dy * dy <= radius * radius,
            ShapeKind::Rect { half_w, half_h } => dx.abs() <= half_w && dy.abs() <= half_h,
        }
    }

    fn extent(&self) -> (f32, f32) {
        match *self {
            ShapeKind::Disc { radius } => (radius, radius),
            ShapeKind::Rect { half_w, half_h } => (half_w, half_h),
        }
    }
}

#[derive(Debug, Clone)]
struct Shape {
    kind: ShapeKind,
    /// Center position per frame.
    centers: Vec<Point2D<f32>>,
    texture: Grid2D<f32>,
    texture_cells: f32,
    tracked: bool,
}

impl Shape {
    fn color_at(&self, frame: usize, p: Point2D<f32>) -> [f32; 3] {
        let c = self.centers[frame];
        let (ex, ey) = self.kind.extent();
        let local = Point2D::new((p.x - c.x + ex) / self.texture_cells, (p.y - c.y + ey) / self.texture_cells);
        let v = bilinear_sample(&self.texture, local).expect("texture sample");
        [v[0], v[1], v[2]]
    }
}

fn value_noise_texture(rng: &mut ChaCha8Rng, h_px: f32, w_px: f32, cell: f32) -> Grid2D<f32> {
    let gh = ((h_px / cell).ceil() as usize + 2).max(2);
    let gw = ((w_px / cell).ceil() as usize + 2).max(2);
    Grid2D::new(Array3::from_shape_fn((gh, gw, 3), |_| rng.random_range(0.0f32..1.0))).unwrap()
}

fn simulate_centers(
    rng: &mut ChaCha8Rng,
    cfg: &GeneratorConfig,
    extent: (f32, f32),
) -> Vec<Point2D<f32>> {
    let w = cfg.width as f32;
    let h = cfg.height as f32;
    // shapes wider than the frame get a degenerate band pinned to the center
    let center_band = |lo: f32, hi: f32, mid: f32| if lo <= hi { (lo, hi) } else { (mid, mid) };
    let (min_x, max_x) = center_band(extent.0 * 0.5, w - 1.0 - extent.0 * 0.5, (w - 1.0) / 2.0);
    let (min_y, max_y) = center_band(extent.1 * 0.5, h - 1.0 - extent.1 * 0.5, (h - 1.0) / 2.0);
    let mut pos = Point2D::new(rng.random_range(min_x..=max_x), rng.random_range(min_y..=max_y));
    let draw_vel = |rng: &mut ChaCha8Rng| {
        let speed = rng.random_range(cfg.speed_range.0..=cfg.speed_range.1);
        let angle = rng.random_range(0.0f32..std::f32::consts::TAU);
        (speed * angle.cos(), speed * angle.sin())
    };
    let mut vel = draw_vel(rng);
    let segments = cfg.direction_changes + 1;
    let seg_len = (cfg.frames.max(2) - 1).div_ceil(segments).max(1);
    let mut centers = Vec::with_capacity(cfg.frames);
    centers.push(pos);
    for t in 1..cfg.frames {
        if t % seg_len == 0 && t + 1 < cfg.frames {
            vel = draw_vel(rng);
        }
        let mut nx = pos.x + vel.0;
        let mut ny = pos.y + vel.1;
        if nx < min_x || nx > max_x {
            vel.0 = -vel.0;
            nx = (pos.x + vel.0).clamp(min_x.min(max_x), max_x.max(min_x));
        }
        if ny < min_y || ny > max_y {
            vel.1 = -vel.1;
            ny = (pos.y + vel.1).clamp(min_y.min(max_y), max_y.max(min_y));
        }
        pos = Point2D::new(nx, ny);
        centers.push(pos);
    }
    centers
}

fn build_shapes(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Vec<Shape> {
    let n_tracked = rng.random_range(cfg.num_objects.0..=cfg.num_objects.1);
    let total = n_tracked + cfg.occluders;
    let mut shapes = Vec::with_capacity(total);
    for i in 0..total {
        let size = rng.random_range(cfg.size_range.0..=cfg.size_range.1);
        let kind = if rng.random_range(0..2u32) == 0 {
            ShapeKind::Disc { radius: size }
        } else {
            let aspect = rng.random_range(0.6f32..1.6);
            ShapeKind::Rect { half_w: size, half_h: (size * aspect).clamp(cfg.size_range.0 * 0.5, cfg.size_range.1 * 1.6) }
        };
        let (ex, ey) = kind.extent();
        let centers = simulate_centers(rng, cfg, (ex * 2.0, ey * 2.0));
        let texture = value_noise_texture(rng, ey * 2.0 + 2.0, ex * 2.0 + 2.0, cfg.texture_cells);
        shapes.push(Shape {
            kind,
            centers,
            texture,
            texture_cells: cfg.texture_cells,
            tracked: i < n_tracked,
        });
    }
    shapes
}

/// Renders the id buffer of one frame: `-1` for background, otherwise the
/// index (z-order) of the topmost shape covering the pixel center.
fn render_id_buffer(shapes: &[Shape], frame: usize, h: usize, w: usize) -> Array2<i32> {
    let mut ids = Array2::from_elem((h, w), -1i32);
    for (idx, shape) in shapes.iter().enumerate() {
        let c = shape.centers[frame];
        let (ex, ey) = shape.kind.extent();
        let y0 = ((c.y - ey).floor().max(0.0)) as usize;
        let y1 = ((c.y + ey).ceil().min(h as f32 - 1.0)) as usize;
        let x0 = ((c.x - ex).floor().max(0.0)) as usize;
        let x1 = ((c.x + ex).ceil().min(w as f32 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                if shape.kind.contains(c, Point2D::new(x as f32, y as f32)) {
                    ids[(y, x)] = idx as i32;
                }
            }
        }
    }
    ids
}

/// Topmost shape at a pixel center, found by walking shapes from the top of
/// the z-order down and testing interiors directly. This is the independent
/// visibility oracle used to cross-check the painted id buffer.
pub fn topmost_shape_at(clip_shapes: &ClipShapes, frame: usize, x: usize, y: usize) -> i32 {
    let p = Point2D::new(x as f32, y as f32);
    for idx in (0..clip_shapes.shapes.len()).rev() {
        let s = &clip_shapes.shapes[idx];
        if s.kind.contains(s.centers[frame], p) {
            return idx as i32;
        }
    }
    -1
}

/// Opaque scene geometry retained for cross-checking visibility; produced by
/// [`generate_clip_with_scene`].
#[derive(Debug, Clone)]
pub struct ClipShapes {
    shapes: Vec<Shape>,
    /// Shape index each track is attached to.
    pub track_shape: Vec<usize>,
}

/// Generates a clip; see the module docs for the scene model.
pub fn generate_clip(cfg: &GeneratorConfig, seed: u64) -> Result<SyntheticClip> {
    generate_clip_with_scene(cfg, seed).map(|(clip, _)| clip)
}

/// [`generate_clip`] variant that also returns the scene geometry so tests
/// can re-derive visibility independently of the rendered id buffers.
pub fn generate_clip_with_scene(
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<(SyntheticClip, ClipShapes)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = value_noise_texture(&mut rng, cfg.height as f32, cfg.width as f32, cfg.texture_cells * 2.0);
    let shapes = build_shapes(&mut rng, cfg);

    let mut video = Vec::with_capacity(cfg.frames);
    let mut id_buffers = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let ids = render_id_buffer(&shapes, t, cfg.height, cfg.width);
        let mut frame = Array3::zeros((cfg.height, cfg.width, 3));
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let p = Point2D::new(x as f32, y as f32);
                let rgb = match ids[(y, x)] {
                    -1 => {
                        let local = Point2D::new(
                            p.x / (cfg.texture_cells * 2.0),
                            p.y / (cfg.texture_cells * 2.0),
                        );
                        let v = bilinear_sample(&background, local)?;
                        [v[0], v[1], v[2]]
                    }
                    idx => shapes[idx as usize].color_at(t, p),
                };
                for c in 0..3 {
                    frame[(y, x, c)] = rgb[c];
                }
            }
        }
        video.push(Grid2D::new(frame)?);
        id_buffers.push(ids);
    }

    let mut tracks = Vec::new();
    let mut track_shape = Vec::new();
    let mut next_id = 0;
    for (idx, shape) in shapes.iter().enumerate() {
        if !shape.tracked {
            continue;
        }
        let (ex, ey) = shape.kind.extent();
        for _ in 0..cfg.tracks_per_object {
            // rejection-sample a point strictly inside the shape
            let mut offset = None;
            for _ in 0..64 {
                let ox = rng.random_range(-ex * 0.9..=ex * 0.9);
                let oy = rng.random_range(-ey * 0.9..=ey * 0.9);
                if shape.kind.contains(Point2D::new(0.0, 0.0), Point2D::new(ox, oy)) {
                    offset = Some((ox, oy));
                    break;
                }
            }
            let Some((ox, oy)) = offset else { continue };
            let positions: Vec<Point2D<f32>> = shape
                .centers
                .iter()
                .map(|c| Point2D::new(c.x + ox, c.y + oy))
                .collect();
            let visible: Vec<bool> = positions
                .iter()
                .enumerate()
                .map(|(t, p)| {
                    let rx = p.x.round();
                    let ry = p.y.round();
                    if rx < 0.0 || ry < 0.0 || rx >= cfg.width as f32 || ry >= cfg.height as f32 {
                        return false;
                    }
                    id_buffers[t][(ry as usize, rx as usize)] == idx as i32
                })
                .collect();
            if visible.iter().any(|&v| v) {
                tracks.push(GroundTruthTrack { id: next_id, positions, visible });
                track_shape.push(idx);
                next_id += 1;
            }
        }
    }

    Ok((SyntheticClip { video, tracks, seed }, ClipShapes { shapes, track_shape }))
}

/// Corruption families applied to evaluation clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    MotionBlur,
    Brightness,
    Contrast,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::MotionBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian_noise" => Ok(CorruptionKind::GaussianNoise),
            "motion_blur" => Ok(CorruptionKind::MotionBlur),
            "brightness" => Ok(CorruptionKind::Brightness),
            "contrast" => Ok(CorruptionKind::Contrast),
            other => Err(Error::invalid(format!(
                "unknown corruption kind '{other}' (expected one of gaussian_noise, motion_blur, brightness, contrast)"
            ))),
        }
    }
}

/// Gaussian noise standard deviation per severity 1..=5.
pub const NOISE_SIGMA: [f32; 5] = [0.04, 0.06, 0.09, 0.13, 0.19];
/// Motion blur kernel length (taps) per severity 1..=5.
pub const BLUR_LENGTH: [usize; 5] = [3, 5, 9, 13, 17];
/// Additive brightness shift per severity 1..=5.
pub const BRIGHTNESS_SHIFT: [f32; 5] = [0.05, 0.10, 0.15, 0.20, 0.30];
/// Contrast gain about the per-frame mean per severity 1..=5.
pub const CONTRAST_GAIN: [f32; 5] = [0.75, 0.60, 0.45, 0.30, 0.20];

/// Applies one corruption at `severity` in 1..=5 to a copy of `video`.
/// Randomized corruptions draw from a ChaCha stream over `seed`, so the same
/// call is reproducible byte for byte.
pub fn corrupt(video: &[Grid2D<f32>], kind: CorruptionKind, severity: u8, seed: u64) -> Result<Vec<Grid2D<f32>>> {
    if !(1..=5).contains(&severity) {
        return Err(Error::invalid(format!("severity must be in 1..=5, got {severity}")));
    }
    if video.is_empty() {
        return Err(Error::invalid("cannot corrupt an empty video"));
    }
    let s = severity as usize - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(video.len());
    match kind {
        CorruptionKind::GaussianNoise => {
            let sigma = NOISE_SIGMA[s];
            for frame in video {
                let mut f = frame.data().clone();
                f.mapv_inplace(|v| {
                    let z: f32 = rng.sample(StandardNormal);
                    (v + sigma * z).clamp(0.0, 1.0)
                });
                out.push(Grid2D::new(f)?);
            }
        }
        CorruptionKind::MotionBlur => {
            let len = BLUR_LENGTH[s];
            let angle = rng.random_range(0.0f32..std::f32::consts::PI);
            let (dx, dy) = (angle.cos(), angle.sin());
            let inv = 1.0 / len as f32;
            for frame in video {
                let (h, w, c) = frame.data().dim();
                let mut f = Array3::zeros((h, w, c));
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = [0.0f32; 3];
                        for tap in 0..len {
                            let t = tap as f32 - (len as f32 - 1.0) / 2.0;
                            let p = Point2D::new(x as f32 + t * dx, y as f32 + t * dy);
                            let v = bilinear_sample(frame, p)?;
                            for ch in 0..c {
                                acc[ch] += v[ch];
                            }
                        }
                        for ch in 0..c {
                            f[(y, x, ch)] = acc[ch] * inv;
                        }
                    }
                }
                out.push(Grid2D::new(f)?);
            }
        }
        CorruptionKind::Brightness => {
            let shift = BRIGHTNESS_SHIFT[s];
            for frame in video {
                out.push(Grid2D::new(frame.data().mapv(|v| (v + shift).clamp(0.0, 1.0)))?);
            }
        }
        CorruptionKind::Contrast => {
            let gain = CONTRAST_GAIN[s];
            for frame in video {
                let mean = frame.data().iter().sum::<f32>() / frame.data().len() as f32;
                out.push(Grid2D::new(
                    frame.data().mapv(|v| ((v - mean) * gain + mean).clamp(0.0, 1.0)),
                )?);
            }
        }
    }
    Ok(out)
}

/// Motion-dynamics bin of a track: mean visible-pair displacement as a
/// percentage of the frame diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionBin {
    /// `[0, 0.5)`% of the frame diagonal per frame.
    Low,
    /// `[0.5, 1.5)`%.
    Mid,
    /// `[1.5, 5)`%.
    High,
    /// `>= 5`%: excluded from stratified reporting.
    OutOfRange,
}

/// Reappearance-count bin of a track (occluded → visible transitions).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReappearanceBin {
    /// 0 reappearances.
    Low,
    /// 1 or 2.
    Mid,
    /// 3 to 999.
    High,
}

/// Difficulty stratum of one ground-truth track.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumLabel {
    pub motion: MotionBin,
    pub reappearance: ReappearanceBin,
}

/// Assigns a track to its motion and reappearance bins. `frame_diag` is the
/// diagonal of the frame the positions are expressed in, in pixels.
pub fn stratify(track: &GroundTruthTrack, frame_diag: f32) -> Result<StratumLabel> {
    if track.positions.len() != track.visible.len() || track.positions.is_empty() {
        return Err(Error::invalid("track positions/visibility length mismatch or empty"));
    }
    if frame_diag <= 0.0 {
        return Err(Error::invalid("frame diagonal must be positive"));
    }
    let mut disp_sum = 0.0f32;
    let mut pairs = 0usize;
    for i in 0..track.positions.len() - 1 {
        if track.visible[i] && track.visible[i + 1] {
            disp_sum += track.positions[i + 1].distance(track.positions[i]);
            pairs += 1;
        }
    }
    let mean_pct = if pairs == 0 { 0.0 } else { disp_sum / pairs as f32 / frame_diag * 100.0 };
    let motion = if mean_pct < 0.5 {
        MotionBin::Low
    } else if mean_pct < 1.5 {
        MotionBin::Mid
    } else if mean_pct < 5.0 {
        MotionBin::High
    } else {
        MotionBin::OutOfRange
    };
    let mut reappearances = 0usize;
    for i in 0..track.visible.len() - 1 {
        if !track.visible[i] && track.visible[i + 1] {
            reappearances += 1;
        }
    }
    let reappearance = if reappearances == 0 {
        ReappearanceBin::Low
    } else if reappearances < 3 {
        ReappearanceBin::Mid
    } else if reappearances < 1000 {
        ReappearanceBin::High
    } else {
        return Err(Error::invalid(format!("reappearance count {reappearances} out of range")));
    };
    Ok(StratumLabel { motion, reappearance })
}

#[derive(Serialize, Deserialize)]
struct ClipMeta {
    frames: usize,
    height: usize,
    width: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TrackRecord {
    id: usize,
    xy: Vec<[f32; 2]>,
    visible: Vec<bool>,
}

/// Writes a clip directory: `frames/%05d.png`, `tracks.jsonl`, `meta.json`.
/// Frames are quantized to 8-bit RGB; ground truth is stored losslessly.
pub fn save_clip(clip: &SyntheticClip, dir: &Path) -> Result<()> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for (t, frame) in clip.video.iter().enumerate() {
        let (h, w, _) = frame.data().dim();
        let mut buf = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    buf.push((frame.data()[(y, x, c)].clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        let path = frames_dir.join(format!("{t:05}.png"));
        image::save_buffer(&path, &buf, w as u32, h as u32, image::ColorType::Rgb8)
            .map_err(|e| Error::CorruptArtifact { path: path.clone(), reason: e.to_string() })?;
    }
    let tracks_path = dir.join("tracks.jsonl");
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(&tracks_path).map_err(|e| Error::io(&tracks_path, e))?,
    );
    for track in &clip.tracks {
        let rec = TrackRecord {
            id: track.id,
            xy: track.positions.iter().map(|p| [p.x, p.y]).collect(),
            visible: track.visible.clone(),
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| Error::CorruptArtifact { path: tracks_path.clone(), reason: e.to_string() })?;
        writeln!(out, "{line}").map_err(|e| Error::io(&tracks_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&tracks_path, e))?;
    let meta_path = dir.join("meta.json");
    let meta = ClipMeta {
        frames: clip.frames(),
        height: clip.height(),
        width: clip.width(),
        seed: clip.seed,
    };
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap())
        .map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

/// Reads a clip directory written by [`save_clip`] (or any directory
/// following the same layout).
pub fn load_clip(dir: &Path) -> Result<SyntheticClip> {
    let meta_path = dir.join("meta.json");
    let meta_txt = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: ClipMeta = serde_json::from_str(&meta_txt)
        .map_err(|e| Error::CorruptArtifact { path: meta_path.clone(), reason: e.to_string() })?;
    let mut video = Vec::with_capacity(meta.frames);
    for t in 0..meta.frames {
        let path = dir.join("frames").join(format!("{t:05}.png"));
        let img = image::open(&path)
            .map_err(|e| Error::CorruptArtifact { path: path.clone(), reason: e.to_string() })?
            .into_rgb8();
        if (img.height() as usize, img.width() as usize) != (meta.height, meta.width) {
            return Err(Error::CorruptArtifact {
                path,
                reason: format!(
                    "frame is {}x{}, meta says {}x{}",
                    img.height(),
                    img.width(),
                    meta.height,
                    meta.width
                ),
            });
        }
        let mut frame = Array3::zeros((meta.height, meta.width, 3));
        for y in 0..meta.height {
            for x in 0..meta.width {
                let px = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    frame[(y, x, c)] = px[c] as f32 / 255.0;
                }
            }
        }
        video.push(Grid2D::new(frame)?);
    }
    let tracks_path = dir.join("tracks.jsonl");
    let tracks = load_tracks(&tracks_path)?;
    for track in &tracks {
        if track.positions.len() != meta.frames {
            return Err(Error::CorruptArtifact {
                path: tracks_path,
                reason: format!("track {} length mismatch with meta.frames", track.id),
            });
        }
    }
    Ok(SyntheticClip { video, tracks, seed: meta.seed })
}

/// Reads a standalone `tracks.jsonl` file (one [`save_clip`] track record per
/// line) without requiring the surrounding clip directory.
pub fn load_tracks(path: &Path) -> Result<Vec<GroundTruthTrack>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tracks = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrackRecord = serde_json::from_str(&line)
            .map_err(|e| Error::CorruptArtifact { path: path.to_path_buf(), reason: e.to_string() })?;
        if rec.xy.len() != rec.visible.len() || rec.xy.is_empty() {
            return Err(Error::CorruptArtifact {
                path: path.to_path_buf(),
                reason: format!("track {} has mismatched or empty position/visibility lists", rec.id),
            });
        }
        tracks.push(GroundTruthTrack {
            id: rec.id,
            positions: rec.xy.into_iter().map(Point2D::from_xy).collect(),
            visible: rec.visible,
        });
    }
    Ok(tracks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            frames: 8,
            height: 48,
            width: 64,
            num_objects: (2, 4),
            tracks_per_object: 3,
            occluders: 1,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn static_object_yields_constant_visible_track() {
        let cfg = GeneratorConfig {
            frames: 8,
            num_objects: (1, 1),
            tracks_per_object: 2,
            speed_range: (0.0, 0.0),
            occluders: 0,
            ..GeneratorConfig::default()
        };
        let clip = generate_clip(&cfg, 3).unwrap();
        assert!(!clip.tracks.is_empty());
        for track in &clip.tracks {
            for t in 1..cfg.frames {
                assert_eq!(track.positions[t], track.positions[0]);
            }
            assert!(track.visible.iter().all(|&v| v), "static interior point must stay visible");
        }
    }

    #[test]
    fn same_seed_reproduces_clip_exactly() {
        let cfg = small_cfg();
        let a = generate_clip(&cfg, 17).unwrap();
        let b = generate_clip(&cfg, 17).unwrap();
        assert_eq!(a.tracks, b.tracks);
        for (fa, fb) in a.video.iter().zip(&b.video) {
            assert_eq!(fa.data(), fb.data());
        }
        let c = generate_clip(&cfg, 18).unwrap();
        assert!(a.video[0].data() != c.video[0].data());
    }

    #[test]
    fn visibility_agrees_with_independent_depth_oracle() {
        let cfg = small_cfg();
        for seed in 0..50 {
            let (clip, scene) = generate_clip_with_scene(&cfg, seed).unwrap();
            for (track, &shape_idx) in clip.tracks.iter().zip(&scene.track_shape) {
                for (t, (&vis, pos)) in track.visible.iter().zip(&track.positions).enumerate() {
                    let rx = pos.x.round();
                    let ry = pos.y.round();
                    let in_frame = rx >= 0.0
                        && ry >= 0.0
                        && rx < clip.width() as f32
                        && ry < clip.height() as f32;
                    let oracle = in_frame
                        && topmost_shape_at(&scene, t, rx as usize, ry as usize)
                            == shape_idx as i32;
                    assert_eq!(vis, oracle, "seed {seed} track {} frame {t}", track.id);
                }
            }
        }
    }

    #[test]
    fn occluder_crossing_produces_reappearance() {
        // Dense fast-moving scene with occluders; scan seeds for a track that
        // goes visible -> occluded -> visible while staying inside the frame,
        // then check the stratifier counts the reappearance.
        let cfg = GeneratorConfig {
            frames: 10,
            num_objects: (3, 5),
            occluders: 2,
            speed_range: (2.0, 4.0),
            ..small_cfg()
        };
        let mut found = false;
        'seeds: for seed in 0..40 {
            let clip = generate_clip(&cfg, seed).unwrap();
            for track in &clip.tracks {
                let v = &track.visible;
                let first_vis = v.iter().position(|&b| b);
                let occ_after = first_vis.and_then(|f| v[f..].iter().position(|&b| !b).map(|i| f + i));
                let revis = occ_after.map(|o| v[o..].iter().any(|&b| b)).unwrap_or(false);
                if revis {
                    let diag = ((clip.width() * clip.width() + clip.height() * clip.height()) as f32).sqrt();
                    let label = stratify(track, diag).unwrap();
                    assert!(label.reappearance != ReappearanceBin::Low);
                    found = true;
                    break 'seeds;
                }
            }
        }
        assert!(found, "no visible->occluded->visible track in 40 seeds");
    }

    #[test]
    fn offscreen_positions_are_flagged_invisible() {
        let cfg = GeneratorConfig { speed_range: (3.0, 6.0), ..small_cfg() };
        for seed in 0..20 {
            let clip = generate_clip(&cfg, seed).unwrap();
            for track in &clip.tracks {
                for (pos, &vis) in track.positions.iter().zip(&track.visible) {
                    let rx = pos.x.round();
                    let ry = pos.y.round();
                    let inside = rx >= 0.0
                        && ry >= 0.0
                        && rx < clip.width() as f32
                        && ry < clip.height() as f32;
                    if !inside {
                        assert!(!vis, "out-of-frame position must be occluded");
                    }
                }
            }
        }
    }

    #[test]
    fn every_track_has_a_query_frame() {
        let cfg = small_cfg();
        for seed in 0..20 {
            let clip = generate_clip(&cfg, seed).unwrap();
            assert!(!clip.tracks.is_empty());
            for track in &clip.tracks {
                assert!(track.first_visible().is_some());
            }
        }
    }

    #[test]
    fn generator_rejects_bad_configs() {
        let mut cfg = small_cfg();
        cfg.frames = 0;
        assert!(generate_clip(&cfg, 0).is_err());
        let mut cfg = small_cfg();
        cfg.num_objects = (3, 2);
        assert!(generate_clip(&cfg, 0).is_err());
        let mut cfg = small_cfg();
        cfg.num_objects = (0, 2);
        assert!(generate_clip(&cfg, 0).is_err());
    }

    #[test]
    fn noise_severity_matches_sigma_table() {
        let frames = vec![Grid2D::from_elem(64, 64, 3, 0.5f32).unwrap(); 8];
        for (s, &sigma) in NOISE_SIGMA.iter().enumerate() {
            let noisy = corrupt(&frames, CorruptionKind::GaussianNoise, (s + 1) as u8, 99).unwrap();
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            let mut n = 0usize;
            for f in &noisy {
                for &v in f.data().iter() {
                    let d = (v - 0.5) as f64;
                    sum += d;
                    sum_sq += d * d;
                    n += 1;
                }
            }
            let mean = sum / n as f64;
            let std = (sum_sq / n as f64 - mean * mean).sqrt();
            let rel = (std - sigma as f64).abs() / sigma as f64;
            assert!(rel < 0.05, "severity {}: std {} vs sigma {}", s + 1, std, sigma);
        }
    }

    #[test]
    fn blur_keeps_constant_video_unchanged() {
        let frames = vec![Grid2D::from_elem(16, 16, 3, 0.25f32).unwrap(); 3];
        for severity in 1..=5 {
            let blurred = corrupt(&frames, CorruptionKind::MotionBlur, severity, 7).unwrap();
            for (a, b) in frames.iter().zip(&blurred) {
                assert_eq!(a.data(), b.data());
            }
        }
    }

    #[test]
    fn corruption_mean_abs_difference_grows_with_severity() {
        let clip = generate_clip(&small_cfg(), 5).unwrap();
        for kind in [CorruptionKind::GaussianNoise, CorruptionKind::MotionBlur] {
            let mut prev = 0.0f64;
            for severity in 1..=5u8 {
                let out = corrupt(&clip.video, kind, severity, 42).unwrap();
                let mut mad = 0.0f64;
                let mut n = 0usize;
                for (a, b) in clip.video.iter().zip(&out) {
                    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
                        mad += (x - y).abs() as f64;
                        n += 1;
                    }
                }
                mad /= n as f64;
                assert!(
                    mad >= prev,
                    "{:?} severity {}: mad {} < previous {}",
                    kind,
                    severity,
                    mad,
                    prev
                );
                prev = mad;
            }
        }
    }

    #[test]
    fn brightness_shift_is_monotone_on_ramp() {
        let ramp = Grid2D::new(Array3::from_shape_fn((16, 16, 3), |(y, x, _)| {
            (x + y) as f32 / 30.0
        }))
        .unwrap();
        let frames = vec![ramp];
        let base: f32 = frames[0].data().iter().sum();
        let mut prev = 0.0f32;
        for severity in 1..=5u8 {
            let out = corrupt(&frames, CorruptionKind::Brightness, severity, 1).unwrap();
            let shifted: f32 = out[0].data().iter().sum();
            let delta = shifted - base;
            assert!(delta > prev);
            prev = delta;
        }
    }

    #[test]
    fn contrast_pulls_values_toward_frame_mean() {
        let clip = generate_clip(&small_cfg(), 9).unwrap();
        let frame = &clip.video[0];
        let mean = frame.data().iter().sum::<f32>() / frame.data().len() as f32;
        let out = corrupt(&clip.video[..1], CorruptionKind::Contrast, 5, 1).unwrap();
        for (&orig, &low) in frame.data().iter().zip(out[0].data().iter()) {
            assert!((low - mean).abs() <= (orig - mean).abs() + 1e-6);
        }
    }

    #[test]
    fn corruption_is_deterministic_per_seed() {
        let clip = generate_clip(&small_cfg(), 11).unwrap();
        let a = corrupt(&clip.video, CorruptionKind::GaussianNoise, 3, 5).unwrap();
        let b = corrupt(&clip.video, CorruptionKind::GaussianNoise, 3, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn corrupt_rejects_bad_severity() {
        let frames = vec![Grid2D::from_elem(8, 8, 3, 0.5f32).unwrap()];
        assert!(corrupt(&frames, CorruptionKind::GaussianNoise, 0, 1).is_err());
        assert!(corrupt(&frames, CorruptionKind::GaussianNoise, 6, 1).is_err());
    }

    #[test]
    fn stratify_hand_cases() {
        let diag = 100.0;
        // 1% of the diagonal per frame -> Mid motion; one reappearance -> Mid.
        let track = GroundTruthTrack {
            id: 0,
            positions: (0..5).map(|i| Point2D::new(i as f32 * 1.0, 0.0)).collect(),
            visible: vec![true, true, false, true, true],
        };
        let label = stratify(&track, diag).unwrap();
        assert_eq!(label.motion, MotionBin::Mid);
        assert_eq!(label.reappearance, ReappearanceBin::Mid);

        // 6% per frame -> excluded from motion bins.
        let fast = GroundTruthTrack {
            id: 1,
            positions: (0..4).map(|i| Point2D::new(i as f32 * 6.0, 0.0)).collect(),
            visible: vec![true; 4],
        };
        assert_eq!(stratify(&fast, diag).unwrap().motion, MotionBin::OutOfRange);

        // Static and always visible -> Low / Low.
        let still = GroundTruthTrack {
            id: 2,
            positions: vec![Point2D::new(5.0, 5.0); 4],
            visible: vec![true; 4],
        };
        let label = stratify(&still, diag).unwrap();
        assert_eq!(label.motion, MotionBin::Low);
        assert_eq!(label.reappearance, ReappearanceBin::Low);

        // Three reappearances -> High.
        let flicker = GroundTruthTrack {
            id: 3,
            positions: vec![Point2D::new(0.0, 0.0); 7],
            visible: vec![true, false, true, false, true, false, true],
        };
        assert_eq!(stratify(&flicker, diag).unwrap().reappearance, ReappearanceBin::High);
    }

    #[test]
    fn stratify_boundary_percentages() {
        let diag = 200.0;
        let mk = |step: f32| GroundTruthTrack {
            id: 0,
            positions: (0..3).map(|i| Point2D::new(i as f32 * step, 0.0)).collect(),
            visible: vec![true; 3],
        };
        // exactly 0.5% -> Mid (half-open bins)
        assert_eq!(stratify(&mk(1.0), diag).unwrap().motion, MotionBin::Mid);
        // exactly 1.5% -> High
        assert_eq!(stratify(&mk(3.0), diag).unwrap().motion, MotionBin::High);
        // exactly 5% -> OutOfRange
        assert_eq!(stratify(&mk(10.0), diag).unwrap().motion, MotionBin::OutOfRange);
    }

    #[test]
    fn clip_roundtrips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let clip = generate_clip(&small_cfg(), 23).unwrap();
        save_clip(&clip, dir.path()).unwrap();
        let loaded = load_clip(dir.path()).unwrap();
        assert_eq!(loaded.seed, clip.seed);
        assert_eq!(loaded.tracks, clip.tracks);
        assert_eq!(loaded.frames(), clip.frames());
        for (a, b) in clip.video.iter().zip(&loaded.video) {
            for (&x, &y) in a.data().iter().zip(b.data().iter()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6, "quantization bound exceeded");
            }
        }
    }

    #[test]
    fn load_clip_reports_missing_directory() {
        let err = load_clip(Path::new("/nonexistent/clip")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
