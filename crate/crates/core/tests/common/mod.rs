//! Brute-force reference implementations used by the integration tests.
#![allow(dead_code)]

use avod_core::anchor_grid::{Anchor3D, Roi};
use avod_core::bev::{BevExtents, BevGrid};
use avod_core::box_codec::OrientedBox3D;
use avod_core::geom::FeatureMap;
use avod_core::kitti_io::{CalibrationSet, LidarPoint, PointCloud};
use avod_core::net_shapes::{ConvTransposeWeights, ConvWeights, FcLayer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Points spread a little beyond `extents` with heights in `[-1, 3.5]`.
pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extents: &BevExtents) -> PointCloud {
    let (x0, x1) = (extents.x.0 - 2.0, extents.x.1 + 2.0);
    let (y0, y1) = (extents.y.0 - 2.0, extents.y.1 + 2.0);
    PointCloud::new(
        (0..n)
            .map(|_| {
                LidarPoint::new(
                    rng.random_range(x0..x1) as f32,
                    rng.random_range(y0..y1) as f32,
                    rng.random_range(-1.0..3.5) as f32,
                    rng.random::<f32>(),
                )
            })
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// BEV

fn cell_index(v: f64, lo: f64, hi: f64, res: f64) -> Option<usize> {
    if v < lo || v >= hi {
        return None;
    }
    Some(((v - lo) / res).floor() as usize)
}

/// Per-cell buckets of point heights, `[row][col]` flattened.
pub fn bucket_points(cloud: &PointCloud, grid: &BevGrid) -> Vec<Vec<f64>> {
    let mut buckets = vec![Vec::new(); grid.width * grid.height];
    let e = &grid.extents;
    for p in &cloud.points {
        let (Some(row), Some(col)) =
            (cell_index(p.x as f64, e.x.0, e.x.1, grid.resolution), cell_index(p.y as f64, e.y.0, e.y.1, grid.resolution))
        else {
            continue;
        };
        if row < grid.height && col < grid.width {
            buckets[row * grid.width + col].push(p.z as f64);
        }
    }
    buckets
}

/// Channels `[ch][row * W + col]`: one max relative height per slice, then
/// density.
pub fn bev_oracle(cloud: &PointCloud, grid: &BevGrid, slice_range: (f64, f64), n_slices: usize) -> Vec<Vec<f64>> {
    let (lo, hi) = slice_range;
    let thickness = (hi - lo) / n_slices as f64;
    let bounds: Vec<f64> = (0..=n_slices).map(|k| lo + thickness * k as f64).collect();
    let buckets = bucket_points(cloud, grid);
    let mut channels = vec![vec![0.0; buckets.len()]; n_slices + 1];
    for (cell, zs) in buckets.iter().enumerate() {
        let mut count = 0u32;
        for &z in zs {
            if z < lo || z > hi {
                continue;
            }
            count += 1;
            for k in 0..n_slices {
                let last = k == n_slices - 1;
                if z >= bounds[k] && (z < bounds[k + 1] || last) {
                    let h = (z - bounds[k]).max(0.0);
                    if h > channels[k][cell] {
                        channels[k][cell] = h;
                    }
                    break;
                }
            }
        }
        channels[n_slices][cell] = (count as f64 + 1.0).ln() / 16f64.ln();
        if channels[n_slices][cell] > 1.0 {
            channels[n_slices][cell] = 1.0;
        }
    }
    channels
}

/// Point counts per cell, `[row * W + col]`.
pub fn occupancy_counts(cloud: &PointCloud, grid: &BevGrid) -> Vec<u32> {
    bucket_points(cloud, grid).iter().map(|b| b.len() as u32).collect()
}

// ---------------------------------------------------------------------------
// Anchors

/// Outward-snapped cell rectangle `(col0, row0, col1, row1)` of a footprint.
pub fn footprint_cell_rect(a: &Anchor3D, grid: &BevGrid) -> (usize, usize, usize, usize) {
    let e = &grid.extents;
    let snap = |lo: f64, hi: f64, min: f64, n: usize| {
        let first = ((lo - min) / grid.resolution).floor().max(0.0).min(n as f64) as usize;
        let last = ((hi - min) / grid.resolution).ceil().max(0.0).min(n as f64) as usize;
        (first, last.max(first))
    };
    let (c0, c1) = snap(a.ty - a.dy / 2.0, a.ty + a.dy / 2.0, e.y.0, grid.width);
    let (r0, r1) = snap(a.tx - a.dx / 2.0, a.tx + a.dx / 2.0, e.x.0, grid.height);
    (c0, r0, c1, r1)
}

/// Indices of anchors with at least one point in their footprint cells,
/// scanning every point per anchor.
pub fn naive_nonempty(anchors: &[Anchor3D], cloud: &PointCloud, grid: &BevGrid) -> Vec<usize> {
    let e = grid.extents;
    let cells: Vec<(usize, usize)> = cloud
        .points
        .iter()
        .filter_map(|p| {
            let row = cell_index(p.x as f64, e.x.0, e.x.1, grid.resolution)?;
            let col = cell_index(p.y as f64, e.y.0, e.y.1, grid.resolution)?;
            (row < grid.height && col < grid.width).then_some((col, row))
        })
        .collect();
    anchors
        .iter()
        .enumerate()
        .filter(|(_, a)| {
            let (c0, r0, c1, r1) = footprint_cell_rect(a, grid);
            cells.iter().any(|&(c, r)| c >= c0 && c < c1 && r >= r0 && r < r1)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Rasterized axis-aligned IoU of two rectangles `(x0, y0, x1, y1)` sampled
/// at cell centers of a `step` grid.
pub fn raster_iou(a: [f64; 4], b: [f64; 4], step: f64) -> f64 {
    let x0 = a[0].min(b[0]);
    let y0 = a[1].min(b[1]);
    let nx = ((a[2].max(b[2]) - x0) / step).ceil() as usize;
    let ny = ((a[3].max(b[3]) - y0) / step).ceil() as usize;
    let inside = |r: &[f64; 4], x: f64, y: f64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..nx {
        let x = x0 + (i as f64 + 0.5) * step;
        for j in 0..ny {
            let y = y0 + (j as f64 + 0.5) * step;
            let (ia, ib) = (inside(&a, x, y), inside(&b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

// ---------------------------------------------------------------------------
// Projection

fn mat4_mul(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                m[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    m
}

/// `P2 · R0 · Tr · [x y z 1]` with every matrix padded to 4x4. Returns
/// `(u, v, w, z_cam)`.
pub fn homogeneous_project(calib: &CalibrationSet, p: [f64; 3]) -> (f64, f64, f64, f64) {
    let mut p2 = [[0.0; 4]; 4];
    let mut r0 = [[0.0; 4]; 4];
    let mut tr = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..4 {
            p2[i][j] = calib.p2[(i, j)];
            tr[i][j] = calib.tr_velo_to_cam[(i, j)];
        }
        for j in 0..3 {
            r0[i][j] = calib.r0[(i, j)];
        }
    }
    p2[3][3] = 1.0;
    r0[3][3] = 1.0;
    tr[3][3] = 1.0;
    let cam = mat4_mul(&r0, &tr);
    let full = mat4_mul(&p2, &cam);
    let x = [p[0], p[1], p[2], 1.0];
    let apply = |m: &[[f64; 4]; 4], r: usize| (0..4).map(|k| m[r][k] * x[k]).sum::<f64>();
    let w = apply(&full, 2);
    (apply(&full, 0) / w, apply(&full, 1) / w, w, apply(&cam, 2))
}

// ---------------------------------------------------------------------------
// IoU

pub fn inside_bev(b: &OrientedBox3D, x: f64, y: f64) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.x, y - b.y);
    let lx = dx * c + dy * s;
    let ly = -dx * s + dy * c;
    lx.abs() <= b.dx / 2.0 && ly.abs() <= b.dy / 2.0
}

fn bev_aabb(b: &OrientedBox3D) -> [f64; 4] {
    let (s, c) = b.yaw.sin_cos();
    let hx = (b.dx * c.abs() + b.dy * s.abs()) / 2.0;
    let hy = (b.dx * s.abs() + b.dy * c.abs()) / 2.0;
    [b.x - hx, b.y - hy, b.x + hx, b.y + hy]
}

/// Jittered stratified Monte-Carlo BEV IoU with `n x n` samples over the
/// joint bounding rectangle.
pub fn mc_iou_bev(a: &OrientedBox3D, b: &OrientedBox3D, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (ra, rb) = (bev_aabb(a), bev_aabb(b));
    let (x0, y0) = (ra[0].min(rb[0]), ra[1].min(rb[1]));
    let (sx, sy) = ((ra[2].max(rb[2]) - x0) / n as f64, (ra[3].max(rb[3]) - y0) / n as f64);
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..n {
        for j in 0..n {
            let x = x0 + (i as f64 + rng.random::<f64>()) * sx;
            let y = y0 + (j as f64 + rng.random::<f64>()) * sy;
            let (ia, ib) = (inside_bev(a, x, y), inside_bev(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Jittered stratified Monte-Carlo 3D IoU with `n³` samples.
pub fn mc_iou_3d(a: &OrientedBox3D, b: &OrientedBox3D, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (ra, rb) = (bev_aabb(a), bev_aabb(b));
    let (x0, y0) = (ra[0].min(rb[0]), ra[1].min(rb[1]));
    let z0 = (a.z - a.dz / 2.0).min(b.z - b.dz / 2.0);
    let z1 = (a.z + a.dz / 2.0).max(b.z + b.dz / 2.0);
    let (sx, sy, sz) = ((ra[2].max(rb[2]) - x0) / n as f64, (ra[3].max(rb[3]) - y0) / n as f64, (z1 - z0) / n as f64);
    let in_z = |bx: &OrientedBox3D, z: f64| (z - bx.z).abs() <= bx.dz / 2.0;
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let x = x0 + (i as f64 + rng.random::<f64>()) * sx;
                let y = y0 + (j as f64 + rng.random::<f64>()) * sy;
                let z = z0 + (k as f64 + rng.random::<f64>()) * sz;
                let ia = in_z(a, z) && inside_bev(a, x, y);
                let ib = in_z(b, z) && inside_bev(b, x, y);
                inter += (ia && ib) as u64;
                union += (ia || ib) as u64;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

// ---------------------------------------------------------------------------
// NMS

/// Repeatedly keeps the best remaining box (highest score, then lowest
/// index) and discards everything overlapping it by more than `threshold`.
pub fn reference_nms<B>(boxes: &[B], scores: &[f64], iou: impl Fn(&B, &B) -> f64, threshold: f64, max_keep: usize) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !remaining.is_empty() && keep.len() < max_keep {
        let mut best = remaining[0];
        for &i in &remaining[1..] {
            if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
                best = i;
            }
        }
        keep.push(best);
        remaining.retain(|&j| j != best && !(iou(&boxes[best], &boxes[j]) > threshold));
    }
    keep
}

// ---------------------------------------------------------------------------
// Crop and resize

/// Scalar bilinear crop with explicit corner weights.
pub fn bilinear_crop_oracle(map: &FeatureMap, roi: &Roi, out_h: usize, out_w: usize) -> Vec<f64> {
    let (h, w) = (map.height as f64, map.width as f64);
    let coord = |lo: f64, hi: f64, i: usize, n: usize, size: f64| {
        if n == 1 {
            (lo + hi) / 2.0 * (size - 1.0)
        } else {
            lo * (size - 1.0) + i as f64 * (hi - lo) * (size - 1.0) / (n as f64 - 1.0)
        }
    };
    let mut out = Vec::with_capacity(out_h * out_w * map.depth);
    for i in 0..out_h {
        let y = coord(roi.y0, roi.y1, i, out_h, h);
        for j in 0..out_w {
            let x = coord(roi.x0, roi.x1, j, out_w, w);
            for c in 0..map.depth {
                if y < 0.0 || y > h - 1.0 || x < 0.0 || x > w - 1.0 {
                    out.push(0.0);
                    continue;
                }
                let (yt, xl) = (y.floor(), x.floor());
                let (fy, fx) = (y - yt, x - xl);
                let (yb, xr) = (y.ceil(), x.ceil());
                let at = |r: f64, col: f64| map.get(r as usize, col as usize, c);
                out.push(
                    (1.0 - fy) * (1.0 - fx) * at(yt, xl)
                        + (1.0 - fy) * fx * at(yt, xr)
                        + fy * (1.0 - fx) * at(yb, xl)
                        + fy * fx * at(yb, xr),
                );
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Matching and recall

/// Among all injective assignments of detections to ground truth with IoU at
/// or above `threshold`, the one whose per-detection IoU vector (detections
/// in descending score, unmatched = -1) is lexicographically largest.
pub fn exhaustive_greedy_match(ious: &[Vec<f64>], scores: &[f64], threshold: f64) -> Vec<Option<usize>> {
    let n_det = ious.len();
    let n_gt = ious.first().map_or(0, |r| r.len());
    let mut order: Vec<usize> = (0..n_det).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let mut best: Option<(Vec<f64>, Vec<Option<usize>>)> = None;
    let mut current = vec![None; n_det];
    fn recurse(
        k: usize,
        order: &[usize],
        ious: &[Vec<f64>],
        threshold: f64,
        used: &mut Vec<bool>,
        current: &mut Vec<Option<usize>>,
        best: &mut Option<(Vec<f64>, Vec<Option<usize>>)>,
    ) {
        if k == order.len() {
            let key: Vec<f64> = order.iter().map(|&d| current[d].map_or(-1.0, |g| ious[d][g])).collect();
            let better = match best {
                None => true,
                Some((bk, _)) => key.iter().zip(bk.iter()).find(|(a, b)| a != b).is_some_and(|(a, b)| a > b),
            };
            if better {
                *best = Some((key, current.clone()));
            }
            return;
        }
        let d = order[k];
        current[d] = None;
        recurse(k + 1, order, ious, threshold, used, current, best);
        for g in 0..used.len() {
            if !used[g] && ious[d][g] >= threshold {
                used[g] = true;
                current[d] = Some(g);
                recurse(k + 1, order, ious, threshold, used, current, best);
                used[g] = false;
                current[d] = None;
            }
        }
    }
    recurse(0, &order, ious, threshold, &mut vec![false; n_gt], &mut current, &mut best);
    best.map(|(_, a)| a).unwrap_or_default()
}

/// For each `n`: covered ground truth over total, checking every pair.
pub fn all_pairs_recall(
    proposals: &[Vec<OrientedBox3D>],
    gts: &[Vec<OrientedBox3D>],
    n_values: &[usize],
    iou: impl Fn(&OrientedBox3D, &OrientedBox3D) -> f64,
    threshold: f64,
) -> Vec<(usize, f64)> {
    let total: usize = gts.iter().map(Vec::len).sum();
    n_values
        .iter()
        .map(|&n| {
            let mut covered = 0;
            for (props, frame) in proposals.iter().zip(gts) {
                for g in frame {
                    let mut hit = false;
                    for p in props.iter().take(n) {
                        if iou(p, g) >= threshold {
                            hit = true;
                        }
                    }
                    covered += hit as usize;
                }
            }
            (n, if total == 0 { 0.0 } else { covered as f64 / total as f64 })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Network forwards

fn zero_padded(map: &FeatureMap, pad: usize) -> Vec<Vec<Vec<f64>>> {
    let mut p = vec![vec![vec![0.0; map.depth]; map.width + 2 * pad]; map.height + 2 * pad];
    for r in 0..map.height {
        for c in 0..map.width {
            for ch in 0..map.depth {
                p[r + pad][c + pad][ch] = map.get(r, c, ch);
            }
        }
    }
    p
}

pub fn loop_conv(map: &FeatureMap, w: &ConvWeights) -> FeatureMap {
    let k = w.kernel;
    let padded = zero_padded(map, k / 2);
    let mut out = FeatureMap::zeros(map.height, map.width, w.out_channels);
    for r in 0..map.height {
        for c in 0..map.width {
            for co in 0..w.out_channels {
                let mut acc = w.bias[co];
                for ky in 0..k {
                    for kx in 0..k {
                        for ci in 0..w.in_channels {
                            let wi = ((ky * k + kx) * w.in_channels + ci) * w.out_channels + co;
                            acc += padded[r + ky][c + kx][ci] * w.weights[wi];
                        }
                    }
                }
                out.set(r, c, co, acc);
            }
        }
    }
    out
}

pub fn loop_conv_transpose(map: &FeatureMap, w: &ConvTransposeWeights) -> FeatureMap {
    let mut out = FeatureMap::zeros(map.height * 2, map.width * 2, w.out_channels);
    for r in 0..out.height {
        for c in 0..out.width {
            let tap = (r % 2) * 2 + c % 2;
            for co in 0..w.out_channels {
                let mut acc = w.bias[co];
                for ci in 0..w.in_channels {
                    acc += map.get(r / 2, c / 2, ci) * w.weights[(tap * w.in_channels + ci) * w.out_channels + co];
                }
                out.set(r, c, co, acc);
            }
        }
    }
    out
}

pub fn loop_concat(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    let mut out = FeatureMap::zeros(a.height, a.width, a.depth + b.depth);
    for r in 0..a.height {
        for c in 0..a.width {
            for ch in 0..a.depth {
                out.set(r, c, ch, a.get(r, c, ch));
            }
            for ch in 0..b.depth {
                out.set(r, c, a.depth + ch, b.get(r, c, ch));
            }
        }
    }
    out
}

pub fn loop_fc(layer: &FcLayer, x: &[f64], relu: bool) -> Vec<f64> {
    let mut out = vec![0.0; layer.n_out];
    for o in 0..layer.n_out {
        let mut acc = layer.bias[o];
        for i in 0..layer.n_in {
            acc += layer.weights[o * layer.n_in + i] * x[i];
        }
        out[o] = if relu && acc < 0.0 { 0.0 } else { acc };
    }
    out
}

pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureMap {
    FeatureMap::from_vec(h, w, d, (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_box(rng: &mut ChaCha8Rng) -> OrientedBox3D {
    OrientedBox3D::new(
        [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-2.0..2.0)],
        [rng.random_range(0.5..6.0), rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)],
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
}

/// A box near `base`: centroid shifted by up to `shift`, dims scaled by up
/// to `scale`, yaw turned by up to `turn`.
pub fn jitter_box(rng: &mut ChaCha8Rng, base: &OrientedBox3D, shift: f64, scale: f64, turn: f64) -> OrientedBox3D {
    let mut j = |m: f64| if m > 0.0 { rng.random_range(-m..m) } else { 0.0 };
    OrientedBox3D::new(
        [base.x + j(shift), base.y + j(shift), base.z + j(shift)],
        [base.dx * (1.0 + j(scale)), base.dy * (1.0 + j(scale)), base.dz * (1.0 + j(scale))],
        base.yaw + j(turn),
    )
}

/// Rotating-scanner sweep: 64 rings between -24.8° and +2° elevation from a
/// sensor 1.73 m above flat ground, a fifth of rays stopped by obstacles.
pub fn synthetic_scan(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let sensor_h = 1.73;
    let points = (0..n)
        .map(|i| {
            let ring = i % 64;
            let el = (-24.8 + 26.8 * ring as f64 / 63.0).to_radians();
            let az = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let ground_range = if el < 0.0 { (sensor_h / (-el).tan()).min(120.0) } else { 120.0 };
            let range = if rng.random::<f64>() < 0.2 { rng.random_range(3.0..60.0f64).min(ground_range) } else { ground_range };
            let horiz = range;
            let z = if range < ground_range { (range * el.tan()).max(-sensor_h) } else if el < 0.0 { -sensor_h } else { range * el.tan() };
            LidarPoint::new(
                (horiz * az.cos()) as f32,
                (horiz * az.sin()) as f32,
                (z + rng.random_range(-0.02..0.02)) as f32,
                rng.random::<f32>(),
            )
        })
        .collect();
    PointCloud::new(points)
}
