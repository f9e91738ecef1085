//! Oriented 3D boxes and their regression encodings.
//!
//! The four-corner encoding keeps one BEV footprint (four corners) plus two
//! heights above the ground plane, so top and bottom faces can never drift
//! apart. The eight-corner encoding regresses every corner independently and
//! is kept as the comparison codec. Both match ground-truth corners to
//! proposal corners by cyclic rotation, which loses the heading; the heading
//! is recovered from a separately regressed `(cos θ, sin θ)` vector.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::kitti_io::GroundPlane;
use crate::wrap_angle;

pub type Point2 = [f64; 2];

/// Yaw-only 3D box. `(x, y, z)` is the centroid, `dx` runs along the heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub yaw: f64,
}

impl OrientedBox3D {
    /// Yaw is wrapped into `[-π, π]`.
    pub fn new(centroid: [f64; 3], dims: [f64; 3], yaw: f64) -> Self {
        Self {
            x: centroid[0],
            y: centroid[1],
            z: centroid[2],
            dx: dims[0],
            dy: dims[1],
            dz: dims[2],
            yaw: wrap_angle(yaw),
        }
    }

    pub fn bottom(&self) -> f64 {
        self.z - self.dz / 2.0
    }

    pub fn top(&self) -> f64 {
        self.z + self.dz / 2.0
    }

    pub fn bev_area(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn volume(&self) -> f64 {
        self.dx * self.dy * self.dz
    }

    /// Four bottom corners followed by the four top corners, each face in
    /// `corners_bev` order.
    pub fn corners_3d(&self) -> [[f64; 3]; 8] {
        let bev = corners_bev(self);
        std::array::from_fn(|i| {
            let c = bev[i % 4];
            [c[0], c[1], if i < 4 { self.bottom() } else { self.top() }]
        })
    }

    /// Axis-aligned BEV bounding rectangle `(x_min, y_min, x_max, y_max)`.
    pub fn bev_bounds(&self) -> [f64; 4] {
        let c = corners_bev(self);
        let xs = c.map(|p| p[0]);
        let ys = c.map(|p| p[1]);
        let min = |v: [f64; 4]| v.into_iter().fold(f64::INFINITY, f64::min);
        let max = |v: [f64; 4]| v.into_iter().fold(f64::NEG_INFINITY, f64::max);
        [min(xs), min(ys), max(xs), max(ys)]
    }
}

/// BEV corners, counter-clockwise from the local `(+dx/2, +dy/2)` corner.
pub fn corners_bev(b: &OrientedBox3D) -> [Point2; 4] {
    let (s, c) = b.yaw.sin_cos();
    let (hx, hy) = (b.dx / 2.0, b.dy / 2.0);
    [(hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy)].map(|(lx, ly)| [b.x + c * lx - s * ly, b.y + s * lx + c * ly])
}

/// Footprint corners plus top (`h1`) and bottom (`h2`) offsets above the
/// ground plane, measured at the footprint center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourCornerBox {
    pub corners: [Point2; 4],
    pub h1: f64,
    pub h2: f64,
}

impl FourCornerBox {
    pub fn from_box(b: &OrientedBox3D, plane: &GroundPlane) -> Self {
        Self {
            corners: corners_bev(b),
            h1: plane.signed_distance([b.x, b.y, b.top()]),
            h2: plane.signed_distance([b.x, b.y, b.bottom()]),
        }
    }

    pub fn center(&self) -> Point2 {
        let mut c = [0.0; 2];
        for p in &self.corners {
            c[0] += p[0] / 4.0;
            c[1] += p[1] / 4.0;
        }
        c
    }
}

/// `(Δx1..Δx4, Δy1..Δy4, Δh1, Δh2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerRegressionTarget(pub [f64; CornerRegressionTarget::DIM]);

impl CornerRegressionTarget {
    pub const DIM: usize = 10;
}

/// `(Δx1..Δx8, Δy1..Δy8, Δz1..Δz8)`, corners ordered as `corners_3d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EightCornerTarget(pub [f64; EightCornerTarget::DIM]);

impl EightCornerTarget {
    pub const DIM: usize = 24;
}

const _: () = assert!(CornerRegressionTarget::DIM == 10 && EightCornerTarget::DIM == 24);

fn dist2(a: Point2, b: Point2) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Cyclic shift that brings the ground-truth corner nearest to proposal
/// corner 1 into first position. Ties go to the lowest index.
fn closest_corner_shift(proposal: &[Point2; 4], gt: &[Point2; 4]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, g) in gt.iter().enumerate() {
        let d = dist2(*g, proposal[0]);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

fn rotate_corners(c: &[Point2; 4], shift: usize) -> [Point2; 4] {
    std::array::from_fn(|m| c[(m + shift) % 4])
}

pub fn encode_four_corner(proposal: &OrientedBox3D, gt: &OrientedBox3D, plane: &GroundPlane) -> CornerRegressionTarget {
    let p = FourCornerBox::from_box(proposal, plane);
    let g = FourCornerBox::from_box(gt, plane);
    let g_corners = rotate_corners(&g.corners, closest_corner_shift(&p.corners, &g.corners));
    let mut t = [0.0; CornerRegressionTarget::DIM];
    for m in 0..4 {
        t[m] = g_corners[m][0] - p.corners[m][0];
        t[4 + m] = g_corners[m][1] - p.corners[m][1];
    }
    t[8] = g.h1 - p.h1;
    t[9] = g.h2 - p.h2;
    CornerRegressionTarget(t)
}

pub fn decode_four_corner(proposal: &OrientedBox3D, target: &CornerRegressionTarget, plane: &GroundPlane) -> FourCornerBox {
    let p = FourCornerBox::from_box(proposal, plane);
    let t = &target.0;
    FourCornerBox {
        corners: std::array::from_fn(|m| [p.corners[m][0] + t[m], p.corners[m][1] + t[4 + m]]),
        h1: p.h1 + t[8],
        h2: p.h2 + t[9],
    }
}

pub fn encode_eight_corner(proposal: &OrientedBox3D, gt: &OrientedBox3D) -> EightCornerTarget {
    let pc = proposal.corners_3d();
    let gc = gt.corners_3d();
    let shift = closest_corner_shift(&corners_bev(proposal), &corners_bev(gt));
    let mut t = [0.0; EightCornerTarget::DIM];
    for i in 0..8 {
        let j = (i / 4) * 4 + (i % 4 + shift) % 4;
        for axis in 0..3 {
            t[axis * 8 + i] = gc[j][axis] - pc[i][axis];
        }
    }
    EightCornerTarget(t)
}

pub fn decode_eight_corner(proposal: &OrientedBox3D, target: &EightCornerTarget) -> [[f64; 3]; 8] {
    let pc = proposal.corners_3d();
    std::array::from_fn(|i| std::array::from_fn(|axis| pc[i][axis] + target.0[axis * 8 + i]))
}

/// Best-fit rectangle for a decoded four-corner box. `base_yaw` is the
/// direction of the first edge pair; candidate `k` is `base_yaw + k·π/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FittedBox {
    pub center: [f64; 3],
    pub base_yaw: f64,
    /// Extent along `base_yaw`.
    pub length: f64,
    /// Extent along `base_yaw + π/2`.
    pub width: f64,
    pub height: f64,
}

impl FittedBox {
    /// `{θ*, θ* + π/2, θ* + π, θ* − π/2}`, wrapped.
    pub fn candidates(&self) -> [f64; 4] {
        [0.0, FRAC_PI_2, PI, -FRAC_PI_2].map(|off| wrap_angle(self.base_yaw + off))
    }

    /// Box for candidate `k`; odd quarter turns swap the footprint extents.
    pub fn candidate_box(&self, k: usize) -> OrientedBox3D {
        let (dx, dy) = if k.is_multiple_of(2) { (self.length, self.width) } else { (self.width, self.length) };
        OrientedBox3D::new(self.center, [dx, dy, self.height], self.candidates()[k])
    }

    /// Picks the candidate closest to the regressed orientation vector.
    pub fn resolve(&self, regressed: OrientationVector) -> Result<OrientedBox3D> {
        let (k, _) = resolve_orientation(&self.candidates(), regressed)?;
        Ok(self.candidate_box(k))
    }
}

fn signed_area(c: &[Point2; 4]) -> f64 {
    (0..4)
        .map(|i| {
            let (a, b) = (c[i], c[(i + 1) % 4]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

/// Fits an oriented box to four (near-rectangular) corners. The direction is
/// the length-weighted mean of both opposite-edge pairs, the second pair
/// turned by a quarter so both point the same way.
pub fn fit_oriented_box(fc: &FourCornerBox, plane: &GroundPlane) -> Result<FittedBox> {
    let c = &fc.corners;
    let area = signed_area(c);
    let scale = (0..4).map(|i| dist2(c[i], c[(i + 1) % 4])).fold(0.0, f64::max);
    if !(area.abs() > 1e-9 * scale.max(1e-300)) {
        return Err(Error::DegenerateGeometry(format!("corners {c:?} are collinear")));
    }
    let edge = |i: usize| [c[(i + 1) % 4][0] - c[i][0], c[(i + 1) % 4][1] - c[i][1]];
    let (e0, e1, e2, e3) = (edge(0), edge(1), edge(2), edge(3));
    let u = [e0[0] - e2[0], e0[1] - e2[1]];
    let v = [e1[0] - e3[0], e1[1] - e3[1]];
    // counter-clockwise: e1 is e0 turned +90°, so turn v back by −90°
    let v_turned = if area > 0.0 { [v[1], -v[0]] } else { [-v[1], v[0]] };
    let dir = [u[0] + v_turned[0], u[1] + v_turned[1]];
    if dir[0].hypot(dir[1]) < 1e-12 {
        return Err(Error::DegenerateGeometry("edge directions cancel".into()));
    }
    let base_yaw = dir[1].atan2(dir[0]);

    let center = fc.center();
    let (s, co) = base_yaw.sin_cos();
    let (mut length, mut width) = (0.0, 0.0);
    for p in c {
        let (rx, ry) = (p[0] - center[0], p[1] - center[1]);
        length += (rx * co + ry * s).abs() / 2.0;
        width += (-rx * s + ry * co).abs() / 2.0;
    }
    if fc.h1 <= fc.h2 {
        return Err(Error::DegenerateGeometry(format!("top offset {} not above bottom {}", fc.h1, fc.h2)));
    }
    let bottom = plane.z_for_height(center[0], center[1], fc.h2)?;
    let top = plane.z_for_height(center[0], center[1], fc.h1)?;
    Ok(FittedBox {
        center: [center[0], center[1], (bottom + top) / 2.0],
        base_yaw: wrap_angle(base_yaw),
        length,
        width,
        height: top - bottom,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientationVector {
    pub x: f64,
    pub y: f64,
}

impl OrientationVector {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

pub fn orientation_to_vector(theta: f64) -> OrientationVector {
    let (s, c) = theta.sin_cos();
    OrientationVector { x: c, y: s }
}

pub fn vector_to_angle(v: OrientationVector) -> Result<f64> {
    let n = v.norm();
    if !(n > 1e-6) {
        return Err(Error::DegenerateOrientation(n));
    }
    Ok(v.y.atan2(v.x))
}

/// Absolute wrapped difference in `[0, π]`.
pub fn angular_distance(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// Returns `(index, yaw)` of the candidate nearest the regressed direction.
pub fn resolve_orientation(candidates: &[f64; 4], regressed: OrientationVector) -> Result<(usize, f64)> {
    let target = vector_to_angle(regressed)?;
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, &c) in candidates.iter().enumerate() {
        let d = angular_distance(c, target);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    Ok((best, candidates[best]))
}

/// Heading without an orientation vector: the longer footprint side, folded
/// into `[-π/2, π/2)`. Wrong by π for roughly half of all headings.
pub fn longer_side_heading(fit: &FittedBox) -> f64 {
    let yaw = if fit.length >= fit.width { fit.base_yaw } else { fit.base_yaw + FRAC_PI_2 };
    let folded = wrap_angle(yaw);
    if folded >= FRAC_PI_2 {
        folded - PI
    } else if folded < -FRAC_PI_2 {
        folded + PI
    } else {
        folded
    }
}
