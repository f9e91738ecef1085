//! 3D anchor grid: size clustering, placement on the ground plane, emptiness
//! filtering through the occupancy integral, ROI projection and label
//! assignment.

use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::bev::{BevExtents, BevGrid, CellRect, OccupancyIntegral};
use crate::box_codec::OrientedBox3D;
use crate::error::{Error, Result};
use crate::geom::{iou_axis_aligned, iou_rotated_bev, AxisRect};
use crate::kitti_io::{CalibrationSet, GroundPlane, LabeledObject};

pub const DEFAULT_STRIDE: f64 = 0.5;

/// Cluster centers `(dx, dy, dz)` used when no cluster file is given: two
/// for cars, one for pedestrians and cyclists.
pub fn default_anchor_sizes(class_name: &str) -> Option<Vec<[f64; 3]>> {
    match class_name.to_ascii_lowercase().as_str() {
        "car" => Some(vec![[3.514, 1.581, 1.511], [4.236, 1.653, 1.547]]),
        "pedestrian" => Some(vec![[0.818, 0.628, 1.768]]),
        "cyclist" => Some(vec![[1.769, 0.596, 1.737]]),
        _ => None,
    }
}

const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_TOL: f64 = 1e-8;

/// Axis-aligned anchor: centroid `(tx, ty, tz)` and extents `(dx, dy, dz)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor3D {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Anchor3D {
    pub fn new(centroid: [f64; 3], dims: [f64; 3]) -> Self {
        Self { tx: centroid[0], ty: centroid[1], tz: centroid[2], dx: dims[0], dy: dims[1], dz: dims[2] }
    }

    pub fn footprint(&self) -> AxisRect {
        AxisRect::new(self.tx - self.dx / 2.0, self.ty - self.dy / 2.0, self.tx + self.dx / 2.0, self.ty + self.dy / 2.0)
    }

    pub fn to_box(&self) -> OrientedBox3D {
        OrientedBox3D::new([self.tx, self.ty, self.tz], [self.dx, self.dy, self.dz], 0.0)
    }

    /// Cells of the occupancy grid touched by the footprint.
    pub fn footprint_cells(&self, grid: &BevGrid) -> CellRect {
        let f = self.footprint();
        grid.footprint_cells(f.x0, f.x1, f.y0, f.y1)
    }

    pub fn offsets(&self) -> [f64; 6] {
        [self.tx, self.ty, self.tz, self.dx, self.dy, self.dz]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoiView {
    Bev,
    Image,
}

/// Normalized region `[x0, x1] x [y0, y1]` in `[0, 1]`. In BEV, `x` runs
/// along map columns (LIDAR `y`) and `y` along rows (LIDAR `x`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi {
    pub view: RoiView,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub degenerate: bool,
}

impl Roi {
    fn clamped(view: RoiView, x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        let c = |v: f64| v.clamp(0.0, 1.0);
        let (x0, y0, x1, y1) = (c(x0), c(y0), c(x1), c(y1));
        Self { view, x0, y0, x1, y1, degenerate: !(x1 > x0 && y1 > y0) }
    }

    fn degenerate(view: RoiView) -> Self {
        Self { view, x0: 0.0, y0: 0.0, x1: 0.0, y1: 0.0, degenerate: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    Object { gt_index: usize, iou: f64 },
    Background,
    Ignore,
}

/// k-means over `(l, w, h)` of one class, returned as `(dx, dy, dz)` sorted by
/// volume. Initialization is deterministic: the sample nearest the mean, then
/// repeatedly the sample farthest from all chosen centers.
pub fn cluster_dimensions(labels: &[LabeledObject], class_name: &str, k: usize) -> Result<Vec<[f64; 3]>> {
    let samples: Vec<[f64; 3]> = labels
        .iter()
        .filter(|o| o.class_name.eq_ignore_ascii_case(class_name))
        .map(|o| [o.dims[2], o.dims[1], o.dims[0]])
        .collect();
    if k == 0 || samples.len() < k {
        return Err(Error::Parameter(format!(
            "need at least {k} {class_name} samples to form {k} clusters, found {}",
            samples.len()
        )));
    }
    Ok(kmeans(&samples, k))
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

fn mean_of<'a>(pts: impl Iterator<Item = &'a [f64; 3]>) -> Option<[f64; 3]> {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for p in pts {
        for i in 0..3 {
            sum[i] += p[i];
        }
        n += 1;
    }
    (n > 0).then(|| sum.map(|s| s / n as f64))
}

fn kmeans(samples: &[[f64; 3]], k: usize) -> Vec<[f64; 3]> {
    let mean = mean_of(samples.iter()).expect("non-empty");
    let first = (0..samples.len())
        .min_by(|&i, &j| sq_dist(&samples[i], &mean).total_cmp(&sq_dist(&samples[j], &mean)))
        .expect("non-empty");
    let mut centers = vec![samples[first]];
    while centers.len() < k {
        let next = (0..samples.len())
            .max_by(|&i, &j| {
                let di = centers.iter().map(|c| sq_dist(&samples[i], c)).fold(f64::INFINITY, f64::min);
                let dj = centers.iter().map(|c| sq_dist(&samples[j], c)).fold(f64::INFINITY, f64::min);
                // earliest sample wins ties
                di.total_cmp(&dj).then(j.cmp(&i))
            })
            .expect("non-empty");
        centers.push(samples[next]);
    }

    let mut assignment = vec![0usize; samples.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        for (a, s) in assignment.iter_mut().zip(samples) {
            *a = (0..k)
                .min_by(|&i, &j| sq_dist(s, &centers[i]).total_cmp(&sq_dist(s, &centers[j])))
                .expect("k >= 1");
        }
        let mut moved = 0.0f64;
        for (c, center) in centers.iter_mut().enumerate() {
            // an empty cluster keeps its previous center
            if let Some(m) = mean_of(samples.iter().zip(&assignment).filter(|(_, &a)| a == c).map(|(s, _)| s)) {
                moved = moved.max(sq_dist(&m, center).sqrt());
                *center = m;
            }
        }
        if moved <= KMEANS_TOL {
            break;
        }
    }
    centers.sort_by(|a, b| (a[0] * a[1] * a[2]).total_cmp(&(b[0] * b[1] * b[2])));
    centers
}

/// Centers at `min + stride/2 + i·stride`, strictly below `max`.
fn grid_centers(lo: f64, hi: f64, stride: f64) -> Vec<f64> {
    (0..)
        .map(|i| lo + stride * (i as f64 + 0.5))
        .take_while(|&c| c < hi)
        .collect()
}

/// Places every size (and its footprint-swapped twin, when distinct) at each
/// grid position, resting on `plane` (LIDAR frame).
pub fn generate_anchor_grid(extents: &BevExtents, stride: f64, sizes: &[[f64; 3]], plane: &GroundPlane) -> Result<Vec<Anchor3D>> {
    if !(stride.is_finite() && stride > 0.0) {
        return Err(Error::Parameter(format!("stride must be positive, got {stride}")));
    }
    if sizes.is_empty() {
        return Err(Error::Parameter("no anchor sizes".into()));
    }
    if let Some(bad) = sizes.iter().find(|s| !s.iter().all(|&d| d > 0.0)) {
        return Err(Error::Parameter(format!("anchor size {bad:?} has a non-positive extent")));
    }
    extents.validate()?;
    let xs = grid_centers(extents.x.0, extents.x.1, stride);
    let ys = grid_centers(extents.y.0, extents.y.1, stride);
    let mut variants: Vec<[f64; 3]> = Vec::with_capacity(sizes.len() * 2);
    for &[dx, dy, dz] in sizes {
        variants.push([dx, dy, dz]);
        if dx != dy {
            variants.push([dy, dx, dz]);
        }
    }
    let mut anchors = Vec::with_capacity(xs.len() * ys.len() * variants.len());
    for &x in &xs {
        for &y in &ys {
            let ground = plane.z_at(x, y)?;
            for &[dx, dy, dz] in &variants {
                anchors.push(Anchor3D { tx: x, ty: y, tz: ground + dz / 2.0, dx, dy, dz });
            }
        }
    }
    Ok(anchors)
}

/// Indices of anchors whose footprint cells hold at least one point.
pub fn non_empty_anchor_indices(anchors: &[Anchor3D], integral: &OccupancyIntegral) -> Vec<usize> {
    anchors
        .iter()
        .enumerate()
        .filter(|(_, a)| {
            let r = a.footprint_cells(&integral.grid);
            !r.is_empty() && integral.area_sum_unchecked(r) > 0
        })
        .map(|(i, _)| i)
        .collect()
}

pub fn filter_empty_anchors(anchors: &[Anchor3D], integral: &OccupancyIntegral) -> Vec<Anchor3D> {
    non_empty_anchor_indices(anchors, integral).into_iter().map(|i| anchors[i]).collect()
}

pub fn project_anchor_to_bev(anchor: &Anchor3D, extents: &BevExtents) -> Roi {
    let f = anchor.footprint();
    let (xr, yr) = (extents.x.1 - extents.x.0, extents.y.1 - extents.y.0);
    let overlaps = f.x1 > extents.x.0 && f.x0 < extents.x.1 && f.y1 > extents.y.0 && f.y0 < extents.y.1;
    if !overlaps {
        return Roi::degenerate(RoiView::Bev);
    }
    Roi::clamped(
        RoiView::Bev,
        (f.y0 - extents.y.0) / yr,
        (f.x0 - extents.x.0) / xr,
        (f.y1 - extents.y.0) / yr,
        (f.x1 - extents.x.0) / xr,
    )
}

/// Bounding rectangle of the projected corners that lie in front of the
/// camera, normalized by the image size.
pub fn project_anchor_to_image(anchor: &Anchor3D, calib: &CalibrationSet, image_size: (f64, f64)) -> Roi {
    let tf = calib.lidar_to_rect();
    let mut rect = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    let mut any = false;
    for corner in anchor.to_box().corners_3d() {
        let (u, v, valid) = calib.project_rect(tf.apply(Vector3::from(corner)));
        if valid {
            any = true;
            rect = [rect[0].min(u), rect[1].min(v), rect[2].max(u), rect[3].max(v)];
        }
    }
    if !any {
        return Roi::degenerate(RoiView::Image);
    }
    let (w, h) = image_size;
    Roi::clamped(RoiView::Image, rect[0] / w, rect[1] / h, rect[2] / w, rect[3] / h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelThresholds {
    /// IoU strictly below this is background.
    pub background_below: f64,
    /// IoU strictly above this is an object.
    pub object_above: f64,
}

impl LabelThresholds {
    /// 0.3 / 0.5 for cars, 0.3 / 0.45 for pedestrians and cyclists.
    pub fn for_class(class_name: &str) -> Self {
        if class_name.eq_ignore_ascii_case("car") {
            Self { background_below: 0.3, object_above: 0.5 }
        } else {
            Self { background_below: 0.3, object_above: 0.45 }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnchorIouMode {
    /// Ground truth replaced by its axis-aligned BEV bounding rectangle.
    #[default]
    AxisAligned,
    Rotated,
}

pub fn assign_anchor_labels(anchors: &[Anchor3D], gt_boxes: &[OrientedBox3D], class_name: &str) -> Vec<AnchorLabel> {
    assign_anchor_labels_with(anchors, gt_boxes, LabelThresholds::for_class(class_name), AnchorIouMode::default())
}

pub fn assign_anchor_labels_with(
    anchors: &[Anchor3D],
    gt_boxes: &[OrientedBox3D],
    thresholds: LabelThresholds,
    mode: AnchorIouMode,
) -> Vec<AnchorLabel> {
    let gt_rects: Vec<AxisRect> = gt_boxes.iter().map(AxisRect::bev_footprint).collect();
    anchors
        .iter()
        .map(|a| {
            let footprint = a.footprint();
            let anchor_box = a.to_box();
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gt_boxes.iter().enumerate() {
                let iou = match mode {
                    AnchorIouMode::AxisAligned => iou_axis_aligned(&footprint, &gt_rects[g]),
                    AnchorIouMode::Rotated => iou_rotated_bev(&anchor_box, gt),
                };
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((gt_index, iou)) if iou > thresholds.object_above => AnchorLabel::Object { gt_index, iou },
                Some((_, iou)) if iou >= thresholds.background_below => AnchorLabel::Ignore,
                _ => AnchorLabel::Background,
            }
        })
        .collect()
}

/// `gt − anchor`, componentwise.
pub fn compute_axis_aligned_offsets(anchor: &Anchor3D, gt: &Anchor3D) -> [f64; 6] {
    let (a, g) = (anchor.offsets(), gt.offsets());
    std::array::from_fn(|i| g[i] - a[i])
}

pub fn apply_axis_aligned_offsets(anchor: &Anchor3D, offsets: &[f64; 6]) -> Anchor3D {
    let a = anchor.offsets();
    let v: [f64; 6] = std::array::from_fn(|i| a[i] + offsets[i]);
    Anchor3D { tx: v[0], ty: v[1], tz: v[2], dx: v[3], dy: v[4], dz: v[5] }
}

pub const ANCHOR_CSV_HEADER: &str = "tx,ty,tz,dx,dy,dz";

pub fn anchors_to_csv(anchors: &[Anchor3D]) -> String {
    let mut s = String::with_capacity(anchors.len() * 48 + 20);
    s.push_str(ANCHOR_CSV_HEADER);
    s.push('\n');
    for a in anchors {
        let _ = writeln!(s, "{},{},{},{},{},{}", a.tx, a.ty, a.tz, a.dx, a.dy, a.dz);
    }
    s
}

fn csv_reals<const N: usize>(fields: &[&str], line: usize) -> Result<[f64; N]> {
    if fields.len() != N {
        return Err(Error::MalformedLine { line, message: format!("expected {N} fields, found {}", fields.len()) });
    }
    let mut out = [0.0; N];
    for (o, f) in out.iter_mut().zip(fields) {
        *o = f.trim().parse().map_err(|_| Error::MalformedLine { line, message: format!("bad number {f:?}") })?;
    }
    Ok(out)
}

pub fn anchors_from_csv(text: &str) -> Result<Vec<Anchor3D>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == ANCHOR_CSV_HEADER => {}
        _ => return Err(Error::MalformedInput(format!("anchor CSV must start with `{ANCHOR_CSV_HEADER}`"))),
    }
    lines
        .map(|(i, l)| {
            let fields: Vec<&str> = l.split(',').collect();
            let v = csv_reals::<6>(&fields, i + 1)?;
            Ok(Anchor3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]))
        })
        .collect()
}

pub const CLUSTER_CSV_HEADER: &str = "class,k_index,dx,dy,dz";

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterEntry {
    pub class_name: String,
    pub k_index: usize,
    pub dims: [f64; 3],
}

pub fn clusters_to_csv(entries: &[ClusterEntry]) -> String {
    let mut s = format!("{CLUSTER_CSV_HEADER}\n");
    for e in entries {
        let _ = writeln!(s, "{},{},{},{},{}", e.class_name, e.k_index, e.dims[0], e.dims[1], e.dims[2]);
    }
    s
}

pub fn clusters_from_csv(text: &str) -> Result<Vec<ClusterEntry>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == CLUSTER_CSV_HEADER => {}
        _ => return Err(Error::MalformedInput(format!("cluster CSV must start with `{CLUSTER_CSV_HEADER}`"))),
    }
    lines
        .map(|(i, l)| {
            let fields: Vec<&str> = l.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::MalformedLine { line: i + 1, message: format!("expected 5 fields, found {}", fields.len()) });
            }
            let k_index = fields[1]
                .trim()
                .parse()
                .map_err(|_| Error::MalformedLine { line: i + 1, message: format!("bad index {:?}", fields[1]) })?;
            Ok(ClusterEntry { class_name: fields[0].trim().to_string(), k_index, dims: csv_reals::<3>(&fields[2..], i + 1)? })
        })
        .collect()
}
