//! Overlap measures, greedy NMS and feature-map resampling.

use crate::anchor_grid::Roi;
use crate::box_codec::{corners_bev, OrientedBox3D, Point2};
use crate::error::{Error, Result};

/// Half-plane tolerance for polygon clipping.
const CLIP_EPS: f64 = 1e-12;
/// Intersections smaller than this are treated as empty.
const AREA_EPS: f64 = 1e-12;

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl AxisRect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    /// BEV footprint of a box, ignoring yaw.
    pub fn bev_footprint(b: &OrientedBox3D) -> Self {
        let [x0, y0, x1, y1] = b.bev_bounds();
        Self { x0, y0, x1, y1 }
    }
}

pub fn iou_axis_aligned(a: &AxisRect, b: &AxisRect) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if inter <= 0.0 || union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area, positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[Point2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

/// Sutherland-Hodgman clipping of `subject` by the counter-clockwise convex
/// polygon `clip`.
pub fn clip_convex(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (cp, cq) = (cross(a, b, p), cross(a, b, q));
            let p_in = cp >= -CLIP_EPS;
            let q_in = cq >= -CLIP_EPS;
            if p_in {
                output.push(p);
            }
            if p_in != q_in {
                let t = cp / (cp - cq);
                output.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    output
}

/// Intersection area of two BEV footprints.
pub fn bev_intersection_area(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let area = polygon_area(&clip_convex(&corners_bev(a), &corners_bev(b))).abs();
    if area < AREA_EPS {
        0.0
    } else {
        area
    }
}

pub fn iou_rotated_bev(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if inter <= 0.0 || union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn iou_3d(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let overlap_z = (a.top().min(b.top()) - a.bottom().max(b.bottom())).max(0.0);
    if overlap_z <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * overlap_z;
    let union = a.volume() + b.volume() - inter;
    if inter <= 0.0 || union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Indices ordered by descending score, ties by ascending index.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order
}

/// Greedy non-maximum suppression. A box is dropped when its IoU with an
/// already kept box is strictly greater than `threshold`. Returns kept
/// indices in score order, at most `max_keep` of them.
pub fn nms<B>(boxes: &[B], scores: &[f64], iou: impl Fn(&B, &B) -> f64, threshold: f64, max_keep: usize) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::Parameter(format!("{} boxes but {} scores", boxes.len(), scores.len())));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Parameter(format!("NMS threshold {threshold} outside [0, 1]")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Parameter("NaN score".into()));
    }
    let mut keep: Vec<usize> = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for i in score_order(scores) {
        if keep.len() >= max_keep {
            break;
        }
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for (j, s) in suppressed.iter_mut().enumerate() {
            if !*s && j != i && iou(&boxes[i], &boxes[j]) > threshold {
                *s = true;
            }
        }
    }
    Ok(keep)
}

/// Dense `height x width x depth` grid, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub data: Vec<f64>,
}

/// Fixed-size resampled region of a feature map.
pub type FeatureCrop = FeatureMap;

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, depth: usize) -> Self {
        Self { height, width, depth, data: vec![0.0; height * width * depth] }
    }

    pub fn from_vec(height: usize, width: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * depth {
            return Err(Error::Parameter(format!(
                "{} values for a {height}x{width}x{depth} map",
                data.len()
            )));
        }
        Ok(Self { height, width, depth, data })
    }

    pub fn filled(height: usize, width: usize, depth: usize, value: f64) -> Self {
        Self { height, width, depth, data: vec![value; height * width * depth] }
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.depth + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        let i = self.index(row, col, ch);
        self.data[i] = v;
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.depth)
    }
}

/// Source coordinate of output sample `i` (align-corners convention).
fn sample_coord(lo: f64, hi: f64, i: usize, n_out: usize, n_in: usize) -> f64 {
    let span = (n_in - 1) as f64;
    if n_out > 1 {
        lo * span + i as f64 * ((hi - lo) * span / (n_out - 1) as f64)
    } else {
        0.5 * (lo + hi) * span
    }
}

/// Bilinear crop of `roi` (normalized, `x` along columns) into `out_size`
/// `(rows, cols)`. Samples that fall outside the map read zero.
pub fn crop_and_resize(map: &FeatureMap, roi: &Roi, out_size: (usize, usize)) -> Result<FeatureCrop> {
    if roi.degenerate || !(roi.x1 > roi.x0 && roi.y1 > roi.y0) {
        return Err(Error::Parameter(format!("degenerate ROI {roi:?}")));
    }
    let (out_h, out_w) = out_size;
    if out_h == 0 || out_w == 0 || map.height == 0 || map.width == 0 {
        return Err(Error::Parameter("empty crop or feature map".into()));
    }
    let mut crop = FeatureMap::zeros(out_h, out_w, map.depth);
    let (max_y, max_x) = ((map.height - 1) as f64, (map.width - 1) as f64);
    for i in 0..out_h {
        let in_y = sample_coord(roi.y0, roi.y1, i, out_h, map.height);
        if !(0.0..=max_y).contains(&in_y) {
            continue;
        }
        let (top, bottom) = (in_y.floor() as usize, in_y.ceil() as usize);
        let ly = in_y - top as f64;
        for j in 0..out_w {
            let in_x = sample_coord(roi.x0, roi.x1, j, out_w, map.width);
            if !(0.0..=max_x).contains(&in_x) {
                continue;
            }
            let (left, right) = (in_x.floor() as usize, in_x.ceil() as usize);
            let lx = in_x - left as f64;
            for c in 0..map.depth {
                let tl = map.get(top, left, c);
                let tr = map.get(top, right, c);
                let bl = map.get(bottom, left, c);
                let br = map.get(bottom, right, c);
                let t = tl + (tr - tl) * lx;
                let b = bl + (br - bl) * lx;
                crop.set(i, j, c, t + (b - t) * ly);
            }
        }
    }
    Ok(crop)
}

/// Element-wise mean of equally shaped crops.
pub fn fuse_mean(crops: &[FeatureCrop]) -> Result<FeatureCrop> {
    let first = crops.first().ok_or_else(|| Error::Parameter("no crops to fuse".into()))?;
    if let Some(bad) = crops.iter().find(|c| c.shape() != first.shape()) {
        return Err(Error::Parameter(format!("shape {:?} does not match {:?}", bad.shape(), first.shape())));
    }
    let mut out = first.clone();
    for c in &crops[1..] {
        for (o, v) in out.data.iter_mut().zip(&c.data) {
            *o += v;
        }
    }
    let n = crops.len() as f64;
    out.data.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}
