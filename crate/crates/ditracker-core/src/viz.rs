//! PNG plot emission: trajectory overlays on clip frames, the layer/head
//! sweep heatmap, and corruption degradation curves.
//!
//! Everything here is deterministic rasterization; the same inputs produce
//! byte-identical files.

use crate::error::{Error, Result};
use crate::numerics::{Grid2D, Point2D};
use crate::refiner::TrackOutput;
use image::RgbImage;
use ndarray::Array2;
use std::collections::BTreeMap;
use std::path::Path;

/// Distinct track/series colors, cycled by index.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 57, 70],
    [29, 130, 196],
    [106, 190, 48],
    [255, 165, 0],
    [155, 93, 229],
    [0, 187, 173],
    [255, 105, 180],
    [255, 214, 10],
];

/// Color assigned to the track or series at `index`.
pub fn track_color(index: usize) -> [u8; 3] {
    PALETTE[index % PALETTE.len()]
}

fn dimmed(c: [u8; 3]) -> [u8; 3] {
    [c[0] / 2 + 48, c[1] / 2 + 48, c[2] / 2 + 48]
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, image::Rgb(color));
    }
}

fn draw_segment(img: &mut RgbImage, a: (f32, f32), b: (f32, f32), color: [u8; 3]) {
    let (mut x0, mut y0) = (a.0.round() as i64, a.1.round() as i64);
    let (x1, y1) = (b.0.round() as i64, b.1.round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, color);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn draw_cross(img: &mut RgbImage, center: (f32, f32), arm: i64, color: [u8; 3]) {
    let (cx, cy) = (center.0.round() as i64, center.1.round() as i64);
    for d in -arm..=arm {
        put(img, cx + d, cy, color);
        put(img, cx, cy + d, color);
    }
}

fn frame_to_image(frame: &Grid2D<f32>, scale: usize) -> RgbImage {
    let (h, w, _) = frame.data().dim();
    let mut img = RgbImage::new((w * scale) as u32, (h * scale) as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb([
                (frame.data()[(y, x, 0)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (frame.data()[(y, x, 1)].clamp(0.0, 1.0) * 255.0).round() as u8,
                (frame.data()[(y, x, 2)].clamp(0.0, 1.0) * 255.0).round() as u8,
            ]);
            for sy in 0..scale {
                for sx in 0..scale {
                    img.put_pixel((x * scale + sx) as u32, (y * scale + sy) as u32, px);
                }
            }
        }
    }
    img
}

fn to_canvas(p: Point2D<f32>, scale: usize) -> (f32, f32) {
    let s = scale as f32;
    (p.x * s + (s - 1.0) / 2.0, p.y * s + (s - 1.0) / 2.0)
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::CorruptArtifact { path: path.to_path_buf(), reason: e.to_string() })
}

/// Writes one `overlay_%05d.png` per frame into `dir`: every predicted track
/// is drawn as its trail up to that frame plus a cross at the current
/// position, in a per-track color that is dimmed on frames the track is
/// predicted occluded. `scale` upsamples small clips by nearest neighbor.
pub fn overlay_tracks(
    video: &[Grid2D<f32>],
    tracks: &[TrackOutput<f32>],
    scale: usize,
    dir: &Path,
) -> Result<()> {
    if scale == 0 {
        return Err(Error::invalid("overlay scale must be at least 1"));
    }
    if video.is_empty() {
        return Err(Error::invalid("cannot render an overlay for an empty video"));
    }
    for (i, t) in tracks.iter().enumerate() {
        if t.positions.len() != video.len() || t.vis.len() != video.len() {
            return Err(Error::invalid(format!(
                "track {i} spans {} frames, video {}",
                t.positions.len(),
                video.len()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (f, frame) in video.iter().enumerate() {
        let mut img = frame_to_image(frame, scale);
        for (i, track) in tracks.iter().enumerate() {
            let color = track_color(i);
            for seg in 1..=f {
                draw_segment(
                    &mut img,
                    to_canvas(track.positions[seg - 1], scale),
                    to_canvas(track.positions[seg], scale),
                    color,
                );
            }
            let marker = if track.vis[f] > 0.5 { color } else { dimmed(color) };
            draw_cross(&mut img, to_canvas(track.positions[f], scale), 2 * scale as i64, marker);
        }
        save_png(&img, &dir.join(format!("overlay_{f:05}.png")))?;
    }
    Ok(())
}

const HEAT_CELL: u32 = 32;
const HEAT_GAP: u32 = 2;

fn colormap(t: f64) -> [u8; 3] {
    const ANCHORS: [[f64; 3]; 5] = [
        [68.0, 1.0, 84.0],
        [59.0, 82.0, 139.0],
        [33.0, 145.0, 140.0],
        [94.0, 201.0, 98.0],
        [253.0, 231.0, 37.0],
    ];
    let t = t.clamp(0.0, 1.0) * (ANCHORS.len() - 1) as f64;
    let i = (t.floor() as usize).min(ANCHORS.len() - 2);
    let frac = t - i as f64;
    let mut c = [0u8; 3];
    for (k, slot) in c.iter_mut().enumerate() {
        *slot = (ANCHORS[i][k] + (ANCHORS[i + 1][k] - ANCHORS[i][k]) * frac).round() as u8;
    }
    c
}

/// Renders a score grid as a heatmap PNG. Rows are layers top to bottom
/// (top row = layer 1), columns are heads left to right; cells are colored
/// from the lowest score (dark violet) to the highest (yellow), and the best
/// cell gets a white outline. Ties resolve to the smaller layer, then head.
pub fn sweep_heatmap(delta_avg: &Array2<f64>, path: &Path) -> Result<()> {
    let (rows, cols) = delta_avg.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("heatmap needs a non-empty grid"));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in delta_avg.iter() {
        if !v.is_finite() {
            return Err(Error::invalid("heatmap scores must be finite"));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-12);
    let width = cols as u32 * (HEAT_CELL + HEAT_GAP) + HEAT_GAP;
    let height = rows as u32 * (HEAT_CELL + HEAT_GAP) + HEAT_GAP;
    let mut img = RgbImage::from_pixel(width, height, image::Rgb([24, 24, 28]));
    let mut best = (0usize, 0usize);
    for r in 0..rows {
        for c in 0..cols {
            if delta_avg[(r, c)] > delta_avg[best] {
                best = (r, c);
            }
            let color = colormap((delta_avg[(r, c)] - lo) / span);
            let (x0, y0) = (
                HEAT_GAP + c as u32 * (HEAT_CELL + HEAT_GAP),
                HEAT_GAP + r as u32 * (HEAT_CELL + HEAT_GAP),
            );
            for y in y0..y0 + HEAT_CELL {
                for x in x0..x0 + HEAT_CELL {
                    img.put_pixel(x, y, image::Rgb(color));
                }
            }
        }
    }
    let (x0, y0) = (
        HEAT_GAP + best.1 as u32 * (HEAT_CELL + HEAT_GAP),
        HEAT_GAP + best.0 as u32 * (HEAT_CELL + HEAT_GAP),
    );
    let white = image::Rgb([255u8, 255, 255]);
    for d in 0..HEAT_CELL {
        for edge in [0, 1, HEAT_CELL - 2, HEAT_CELL - 1] {
            img.put_pixel(x0 + d, y0 + edge, white);
            img.put_pixel(x0 + edge, y0 + d, white);
        }
    }
    save_png(&img, path)
}

const CHART_W: u32 = 360;
const CHART_H: u32 = 240;
const CHART_MARGIN: u32 = 24;

/// Plots `kind:severity -> delta_avg` cells as one polyline per corruption
/// kind over severity 1..=5, in sorted key order through [`PALETTE`], with
/// gridlines every 25 percentage points. Keys must be `kind:severity` with a
/// severity in 1..=5 and values must be percentages.
pub fn corruption_chart(curves: &BTreeMap<String, f64>, path: &Path) -> Result<()> {
    if curves.is_empty() {
        return Err(Error::invalid("corruption chart needs at least one cell"));
    }
    let mut per_kind: BTreeMap<&str, BTreeMap<u8, f64>> = BTreeMap::new();
    for (key, &value) in curves {
        let (kind, sev) = key
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("corruption key '{key}' is not 'kind:severity'")))?;
        let severity: u8 = sev
            .parse()
            .map_err(|_| Error::invalid(format!("corruption key '{key}' has a non-numeric severity")))?;
        if !(1..=5).contains(&severity) {
            return Err(Error::invalid(format!("corruption key '{key}' severity must be in 1..=5")));
        }
        if !value.is_finite() || !(0.0..=100.0).contains(&value) {
            return Err(Error::invalid(format!("corruption value {value} for '{key}' is not a percentage")));
        }
        per_kind.entry(kind).or_default().insert(severity, value);
    }
    let mut img = RgbImage::from_pixel(CHART_W, CHART_H, image::Rgb([250, 250, 250]));
    let plot_w = (CHART_W - 2 * CHART_MARGIN) as f32;
    let plot_h = (CHART_H - 2 * CHART_MARGIN) as f32;
    let x_at = |severity: u8| CHART_MARGIN as f32 + (severity - 1) as f32 / 4.0 * plot_w;
    let y_at = |pct: f64| CHART_MARGIN as f32 + (1.0 - pct / 100.0) as f32 * plot_h;
    for line in 0..=4 {
        let y = y_at(25.0 * line as f64).round() as i64;
        for x in CHART_MARGIN..CHART_W - CHART_MARGIN {
            put(&mut img, x as i64, y, [210, 210, 210]);
        }
    }
    for severity in 1..=5u8 {
        let x = x_at(severity).round() as i64;
        for y in CHART_MARGIN..CHART_H - CHART_MARGIN {
            put(&mut img, x, y as i64, [230, 230, 230]);
        }
    }
    for (i, (_, cells)) in per_kind.iter().enumerate() {
        let color = track_color(i);
        let pts: Vec<(f32, f32)> =
            cells.iter().map(|(&s, &v)| (x_at(s), y_at(v))).collect();
        for pair in pts.windows(2) {
            draw_segment(&mut img, pair[0], pair[1], color);
        }
        for &p in &pts {
            draw_cross(&mut img, p, 2, color);
        }
    }
    save_png(&img, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refiner::TrackQuery;
    use ndarray::Array3;

    fn gray_video(frames: usize, h: usize, w: usize) -> Vec<Grid2D<f32>> {
        (0..frames)
            .map(|t| Grid2D::new(Array3::from_elem((h, w, 3), 0.1 + 0.05 * t as f32)).unwrap())
            .collect()
    }

    fn moving_track(frames: usize) -> TrackOutput<f32> {
        TrackOutput {
            query: TrackQuery { id: 0, frame: 0, pos: Point2D::new(3.0, 3.0) },
            positions: (0..frames).map(|t| Point2D::new(3.0 + 2.0 * t as f32, 3.0)).collect(),
            vis: vec![1.0; frames],
            conf: vec![0.9; frames],
        }
    }

    #[test]
    fn overlay_writes_one_scaled_png_per_frame() {
        let dir = tempfile::tempdir().unwrap();
        let video = gray_video(3, 16, 16);
        overlay_tracks(&video, &[moving_track(3)], 4, dir.path()).unwrap();
        for f in 0..3 {
            let path = dir.path().join(format!("overlay_{f:05}.png"));
            let img = image::open(&path).unwrap().into_rgb8();
            assert_eq!((img.width(), img.height()), (64, 64));
        }
        let img = image::open(dir.path().join("overlay_00002.png")).unwrap().into_rgb8();
        // Cross center of the visible track at frame 2: native (7, 3).
        let (cx, cy) = to_canvas(Point2D::new(7.0, 3.0), 4);
        assert_eq!(
            img.get_pixel(cx.round() as u32, cy.round() as u32).0,
            track_color(0)
        );
    }

    #[test]
    fn overlay_dims_occluded_markers_and_draws_trails() {
        let dir = tempfile::tempdir().unwrap();
        let video = gray_video(2, 16, 16);
        let mut track = moving_track(2);
        track.positions = vec![Point2D::new(3.0, 3.0), Point2D::new(6.0, 3.0)];
        track.vis[1] = 0.2;
        overlay_tracks(&video, &[track], 4, dir.path()).unwrap();
        let img = image::open(dir.path().join("overlay_00001.png")).unwrap().into_rgb8();
        let (cx, cy) = to_canvas(Point2D::new(6.0, 3.0), 4);
        assert_eq!(
            img.get_pixel(cx.round() as u32, cy.round() as u32).0,
            dimmed(track_color(0))
        );
        // The start of the trail sits beyond the marker arms and keeps the
        // full color.
        let (tx, ty) = to_canvas(Point2D::new(3.0, 3.0), 4);
        assert_eq!(img.get_pixel(tx.round() as u32, ty.round() as u32).0, track_color(0));
    }

    #[test]
    fn overlay_rejects_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let video = gray_video(2, 8, 8);
        assert!(overlay_tracks(&video, &[moving_track(3)], 2, dir.path()).is_err());
        assert!(overlay_tracks(&video, &[moving_track(2)], 0, dir.path()).is_err());
        assert!(overlay_tracks(&[], &[], 2, dir.path()).is_err());
    }

    #[test]
    fn overlays_are_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let video = gray_video(2, 12, 10);
        let tracks = vec![moving_track(2)];
        overlay_tracks(&video, &tracks, 3, dir_a.path()).unwrap();
        overlay_tracks(&video, &tracks, 3, dir_b.path()).unwrap();
        for f in 0..2 {
            let name = format!("overlay_{f:05}.png");
            assert_eq!(
                std::fs::read(dir_a.path().join(&name)).unwrap(),
                std::fs::read(dir_b.path().join(&name)).unwrap()
            );
        }
    }

    #[test]
    fn heatmap_colors_extremes_and_outlines_the_best_cell() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.png");
        let grid =
            Array2::from_shape_vec((2, 3), vec![10.0, 40.0, 55.0, 20.0, 90.0, 35.0]).unwrap();
        sweep_heatmap(&grid, &path).unwrap();
        let img = image::open(&path).unwrap().into_rgb8();
        assert_eq!((img.width(), img.height()), (3 * 34 + 2, 2 * 34 + 2));
        let center = |r: u32, c: u32| (2 + c * 34 + 16, 2 + r * 34 + 16);
        let (x, y) = center(0, 0);
        assert_eq!(img.get_pixel(x, y).0, [68, 1, 84]);
        let (x, y) = center(1, 1);
        assert_eq!(img.get_pixel(x, y).0, [253, 231, 37]);
        // Outline of the best cell (layer 2, head 1) is white at its top edge.
        assert_eq!(img.get_pixel(2 + 34 + 5, 2 + 34).0, [255, 255, 255]);
        assert!(sweep_heatmap(&Array2::zeros((0, 2)), &path).is_err());
    }

    #[test]
    fn corruption_chart_validates_keys_and_renders() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.png");
        let curves: BTreeMap<String, f64> = [
            ("gaussian_noise:1".to_string(), 80.0),
            ("gaussian_noise:3".to_string(), 62.0),
            ("gaussian_noise:5".to_string(), 50.0),
            ("brightness:2".to_string(), 74.0),
        ]
        .into_iter()
        .collect();
        corruption_chart(&curves, &path).unwrap();
        let img = image::open(&path).unwrap().into_rgb8();
        assert_eq!((img.width(), img.height()), (CHART_W, CHART_H));

        let bad: BTreeMap<String, f64> = [("noise".to_string(), 10.0)].into_iter().collect();
        assert!(corruption_chart(&bad, &path).is_err());
        let bad: BTreeMap<String, f64> = [("blur:9".to_string(), 10.0)].into_iter().collect();
        assert!(corruption_chart(&bad, &path).is_err());
        let bad: BTreeMap<String, f64> = [("blur:2".to_string(), 120.0)].into_iter().collect();
        assert!(corruption_chart(&bad, &path).is_err());
    }
}
