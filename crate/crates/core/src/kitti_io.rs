//! KITTI object-devkit ingestion: velodyne point clouds, calibration, labels
//! and ground planes, plus camera projection and field-of-view cropping.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Vector3};

use crate::bev::BevExtents;
use crate::box_codec::OrientedBox3D;
use crate::error::{Error, Result};
use crate::wrap_angle;

/// Sensor height used when a frame has no plane file.
pub const DEFAULT_SENSOR_HEIGHT: f64 = 1.73;

const ORTHONORMAL_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    /// Reflectance in [0, 1].
    pub r: f32,
}

impl LidarPoint {
    pub fn new(x: f32, y: f32, z: f32, r: f32) -> Self {
        Self { x, y, z, r }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn new(points: Vec<LidarPoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Serializes to the velodyne `.bin` layout: little-endian f32 quadruplets.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * 16);
        for p in &self.points {
            for v in [p.x, p.y, p.z, p.r] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Parses a velodyne `.bin` buffer.
pub fn load_point_cloud(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::MalformedInput(format!(
            "point cloud byte length {} is not a multiple of 16",
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (i, chunk) in bytes.chunks_exact(16).enumerate() {
        let f = |k: usize| f32::from_le_bytes([chunk[k], chunk[k + 1], chunk[k + 2], chunk[k + 3]]);
        let p = LidarPoint::new(f(0), f(4), f(8), f(12));
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.r.is_finite()) {
            return Err(Error::MalformedInput(format!("point {i} has a non-finite field")));
        }
        points.push(p);
    }
    Ok(PointCloud { points })
}

pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    load_point_cloud(&std::fs::read(path)?)
}

/// Rigid transform `p' = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    /// Nominal LIDAR to camera axis permutation (x_c = -y_l, y_c = -z_l,
    /// z_c = x_l), with no offset. IoU and heading differences are invariant
    /// under any rigid transform, so evaluation uses this when no
    /// calibration is at hand.
    pub fn nominal_lidar_to_camera() -> Self {
        Self {
            rotation: Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Uses the true inverse: calibration rotations are orthonormal only to
    /// the printed precision.
    pub fn apply_inverse(&self, p: Vector3<f64>) -> Vector3<f64> {
        let inv = self.rotation.try_inverse().unwrap_or_else(|| self.rotation.transpose());
        inv * (p - self.translation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub p2: Matrix3x4<f64>,
    pub r0: Matrix3<f64>,
    pub tr_velo_to_cam: Matrix3x4<f64>,
}

fn orthonormality_error(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).abs().max()
}

impl CalibrationSet {
    pub fn identity() -> Self {
        Self {
            p2: Matrix3x4::identity(),
            r0: Matrix3::identity(),
            tr_velo_to_cam: Matrix3x4::identity(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r0_err = orthonormality_error(&self.r0);
        if r0_err > ORTHONORMAL_TOL {
            return Err(Error::MalformedInput(format!(
                "R0_rect is not orthonormal (max deviation {r0_err:e})"
            )));
        }
        let tr_rot: Matrix3<f64> = self.tr_velo_to_cam.fixed_view::<3, 3>(0, 0).into_owned();
        let tr_err = orthonormality_error(&tr_rot);
        if tr_err > ORTHONORMAL_TOL {
            return Err(Error::MalformedInput(format!(
                "Tr_velo_to_cam rotation is not orthonormal (max deviation {tr_err:e})"
            )));
        }
        if !self.p2.iter().all(|v| v.is_finite()) {
            return Err(Error::MalformedInput("P2 has non-finite entries".into()));
        }
        Ok(())
    }

    /// LIDAR frame to rectified camera frame.
    pub fn lidar_to_rect(&self) -> RigidTransform {
        let tr_rot: Matrix3<f64> = self.tr_velo_to_cam.fixed_view::<3, 3>(0, 0).into_owned();
        let tr_t: Vector3<f64> = self.tr_velo_to_cam.column(3).into_owned();
        RigidTransform {
            rotation: self.r0 * tr_rot,
            translation: self.r0 * tr_t,
        }
    }

    /// Projects a rectified-camera point. Returns `(u, v, valid)`.
    pub fn project_rect(&self, p: Vector3<f64>) -> (f64, f64, bool) {
        let h = self.p2 * p.push(1.0);
        let valid = p.z > 0.0 && h.z > 0.0;
        (h.x / h.z, h.y / h.z, valid)
    }

    pub fn project_lidar(&self, p: Vector3<f64>) -> (f64, f64, bool) {
        self.project_rect(self.lidar_to_rect().apply(p))
    }
}

fn parse_reals(values: &str, key: &str) -> Result<Vec<f64>> {
    values
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::MalformedInput(format!("{key}: cannot parse {tok:?}")))
        })
        .collect()
}

/// Parses a KITTI object calibration file.
pub fn load_calibration(text: &str) -> Result<CalibrationSet> {
    let mut p2 = None;
    let mut r0 = None;
    let mut tr = None;
    for line in text.lines() {
        let Some((key, values)) = line.split_once(':') else {
            continue;
        };
        let key = key.trim();
        let slot = match key {
            "P2" => &mut p2,
            "R0_rect" => &mut r0,
            "Tr_velo_to_cam" => &mut tr,
            _ => continue,
        };
        *slot = Some(parse_reals(values, key)?);
    }
    let take = |v: Option<Vec<f64>>, key: &str, n: usize| -> Result<Vec<f64>> {
        let v = v.ok_or_else(|| Error::MalformedInput(format!("missing calibration key {key}")))?;
        if v.len() != n {
            return Err(Error::MalformedInput(format!(
                "{key}: expected {n} values, found {}",
                v.len()
            )));
        }
        Ok(v)
    };
    let calib = CalibrationSet {
        p2: Matrix3x4::from_row_slice(&take(p2, "P2", 12)?),
        r0: Matrix3::from_row_slice(&take(r0, "R0_rect", 9)?),
        tr_velo_to_cam: Matrix3x4::from_row_slice(&take(tr, "Tr_velo_to_cam", 12)?),
    };
    calib.validate()?;
    Ok(calib)
}

pub fn read_calibration(path: impl AsRef<Path>) -> Result<CalibrationSet> {
    load_calibration(&std::fs::read_to_string(path)?)
}

/// One KITTI label line. A 16th field, when present, is a detection score.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledObject {
    pub class_name: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    /// (left, top, right, bottom) in pixels.
    pub bbox2d: [f64; 4],
    /// (h, w, l) in meters.
    pub dims: [f64; 3],
    /// Bottom-face center in the camera frame.
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl LabeledObject {
    pub fn is_dont_care(&self) -> bool {
        self.class_name == "DontCare"
    }

    pub fn bbox_height(&self) -> f64 {
        self.bbox2d[3] - self.bbox2d[1]
    }

    /// Converts to an oriented box in the frame reached by `lidar_to_cam`
    /// inverted. Dimensions map (l, w, h) -> (dx, dy, dz).
    pub fn to_box(&self, lidar_to_cam: &RigidTransform) -> OrientedBox3D {
        let [h, w, l] = self.dims;
        let [x, y, z] = self.location;
        let center_cam = Vector3::new(x, y - h / 2.0, z);
        let c = lidar_to_cam.apply_inverse(center_cam);
        let heading_cam = Vector3::new(self.rotation_y.cos(), 0.0, -self.rotation_y.sin());
        let heading = lidar_to_cam.rotation.transpose() * heading_cam;
        OrientedBox3D::new([c.x, c.y, c.z], [l, w, h], heading.y.atan2(heading.x))
    }

    /// Calibration-free conversion for evaluation.
    pub fn to_box_nominal(&self) -> OrientedBox3D {
        self.to_box(&RigidTransform::nominal_lidar_to_camera())
    }

    fn validate(&self, line: usize) -> Result<()> {
        let err = |message: String| Err(Error::MalformedLine { line, message });
        let [l, t, r, b] = self.bbox2d;
        if !(r > l && b > t) {
            return err(format!("bbox ({l}, {t}, {r}, {b}) is not well ordered"));
        }
        if !self.is_dont_care() && !self.dims.iter().all(|&d| d > 0.0) {
            return err(format!("non-positive dimensions {:?}", self.dims));
        }
        Ok(())
    }
}

/// Builds a label line for a LIDAR-frame box. `rotation_y` is the box yaw
/// carried into the camera frame; the 2D box is the clamped projection.
pub fn box_to_label(
    bbox: &OrientedBox3D,
    class_name: &str,
    score: Option<f64>,
    calib: &CalibrationSet,
    image_size: (f64, f64),
) -> LabeledObject {
    let tf = calib.lidar_to_rect();
    let c = tf.apply(Vector3::new(bbox.x, bbox.y, bbox.z));
    let heading = tf.rotation * Vector3::new(bbox.yaw.cos(), bbox.yaw.sin(), 0.0);
    let rotation_y = (-heading.z).atan2(heading.x);
    let location = [c.x, c.y + bbox.dz / 2.0, c.z];

    let mut rect = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for corner in bbox.corners_3d() {
        let (u, v, valid) = calib.project_lidar(Vector3::from(corner));
        if valid {
            rect = [rect[0].min(u), rect[1].min(v), rect[2].max(u), rect[3].max(v)];
        }
    }
    let bbox2d = if rect[0].is_finite() {
        [
            rect[0].clamp(0.0, image_size.0),
            rect[1].clamp(0.0, image_size.1),
            rect[2].clamp(0.0, image_size.0),
            rect[3].clamp(0.0, image_size.1),
        ]
    } else {
        [0.0; 4]
    };

    LabeledObject {
        class_name: class_name.to_string(),
        truncation: 0.0,
        occlusion: 0,
        alpha: wrap_angle(rotation_y - c.x.atan2(c.z)),
        bbox2d,
        dims: [bbox.dz, bbox.dy, bbox.dx],
        location,
        rotation_y: wrap_angle(rotation_y),
        score,
    }
}

/// Parses KITTI label text (15 fields, optional 16th score).
pub fn load_labels(text: &str) -> Result<Vec<LabeledObject>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 15 {
            return Err(Error::MalformedLine {
                line: line_no,
                message: format!("expected at least 15 fields, found {}", fields.len()),
            });
        }
        let real = |i: usize| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|_| Error::MalformedLine {
                line: line_no,
                message: format!("field {} ({:?}) is not a number", i + 1, fields[i]),
            })
        };
        let occlusion = fields[2].parse::<i32>().or_else(|_| {
            // some exporters write occlusion as a float
            real(2).map(|v| v as i32)
        })?;
        let obj = LabeledObject {
            class_name: fields[0].to_string(),
            truncation: real(1)?,
            occlusion,
            alpha: real(3)?,
            bbox2d: [real(4)?, real(5)?, real(6)?, real(7)?],
            dims: [real(8)?, real(9)?, real(10)?],
            location: [real(11)?, real(12)?, real(13)?],
            rotation_y: real(14)?,
            score: if fields.len() > 15 { Some(real(15)?) } else { None },
        };
        obj.validate(line_no)?;
        out.push(obj);
    }
    Ok(out)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<LabeledObject>> {
    load_labels(&std::fs::read_to_string(path)?)
}

pub fn format_label_line(obj: &LabeledObject) -> String {
    let mut s = format!(
        "{} {:.2} {} {:.6} {:.2} {:.2} {:.2} {:.2} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
        obj.class_name,
        obj.truncation,
        obj.occlusion,
        obj.alpha,
        obj.bbox2d[0],
        obj.bbox2d[1],
        obj.bbox2d[2],
        obj.bbox2d[3],
        obj.dims[0],
        obj.dims[1],
        obj.dims[2],
        obj.location[0],
        obj.location[1],
        obj.location[2],
        obj.rotation_y,
    );
    if let Some(score) = obj.score {
        let _ = write!(s, " {score:.6}");
    }
    s
}

/// Plane `a x + b y + c z + d = 0` with unit normal `(a, b, c)`. The normal
/// points up, so `signed_distance` is the height above the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundPlane {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl GroundPlane {
    /// Normalizes the coefficients so that `(a, b, c)` has unit norm.
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        let n = (a * a + b * b + c * c).sqrt();
        if !(n.is_finite() && n > 1e-12) || !d.is_finite() {
            return Err(Error::MalformedInput(format!("degenerate plane ({a}, {b}, {c}, {d})")));
        }
        Ok(Self { a: a / n, b: b / n, c: c / n, d: d / n })
    }

    /// Flat ground `DEFAULT_SENSOR_HEIGHT` below the camera, camera frame.
    pub fn default_camera() -> Self {
        Self { a: 0.0, b: -1.0, c: 0.0, d: DEFAULT_SENSOR_HEIGHT }
    }

    pub fn normal(&self) -> Vector3<f64> {
        Vector3::new(self.a, self.b, self.c)
    }

    pub fn signed_distance(&self, p: [f64; 3]) -> f64 {
        self.a * p[0] + self.b * p[1] + self.c * p[2] + self.d
    }

    /// Re-expresses a camera-frame plane in the frame `lidar_to_cam` maps from.
    pub fn to_lidar(&self, lidar_to_cam: &RigidTransform) -> Self {
        let n = self.normal();
        let n_l = lidar_to_cam.rotation.transpose() * n;
        let d_l = n.dot(&lidar_to_cam.translation) + self.d;
        let norm = n_l.norm();
        Self { a: n_l.x / norm, b: n_l.y / norm, c: n_l.z / norm, d: d_l / norm }
    }

    /// Height `z` of the plane above LIDAR point `(x, y)`.
    pub fn z_at(&self, x: f64, y: f64) -> Result<f64> {
        if self.c.abs() < 1e-9 {
            return Err(Error::Parameter("ground plane is vertical in this frame".into()));
        }
        Ok(-(self.a * x + self.b * y + self.d) / self.c)
    }

    /// `z` at which a point above `(x, y)` sits `height` above the plane.
    pub fn z_for_height(&self, x: f64, y: f64, height: f64) -> Result<f64> {
        Ok(self.z_at(x, y)? + height / self.c)
    }
}

/// Parses a KITTI plane file: the last line holding exactly four reals.
pub fn load_ground_plane(text: &str) -> Result<GroundPlane> {
    let coeffs = text
        .lines()
        .filter_map(|line| {
            let vals: Option<Vec<f64>> = line.split_whitespace().map(|t| t.parse().ok()).collect();
            vals.filter(|v| v.len() == 4)
        })
        .next_back()
        .ok_or_else(|| Error::MalformedInput("no plane coefficients found".into()))?;
    GroundPlane::new(coeffs[0], coeffs[1], coeffs[2], coeffs[3])
}

pub fn read_ground_plane(path: impl AsRef<Path>) -> Result<GroundPlane> {
    load_ground_plane(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
    pub valid: bool,
}

/// Projects every point into the image. Points behind the camera are kept
/// with `valid == false`.
pub fn project_to_image(cloud: &PointCloud, calib: &CalibrationSet) -> Vec<ImagePoint> {
    let tf = calib.lidar_to_rect();
    cloud
        .points
        .iter()
        .map(|p| {
            let rect = tf.apply(Vector3::new(p.x as f64, p.y as f64, p.z as f64));
            let (u, v, valid) = calib.project_rect(rect);
            ImagePoint { u, v, valid }
        })
        .collect()
}

/// Keeps points that project inside the image and lie inside the BEV extents.
pub fn filter_fov(
    cloud: &PointCloud,
    calib: &CalibrationSet,
    image_size: (f64, f64),
    extents: &BevExtents,
) -> PointCloud {
    let (w, h) = image_size;
    let points = cloud
        .points
        .iter()
        .zip(project_to_image(cloud, calib))
        .filter(|(p, ip)| {
            ip.valid
                && (0.0..w).contains(&ip.u)
                && (0.0..h).contains(&ip.v)
                && extents.contains(p.x as f64, p.y as f64)
        })
        .map(|(p, _)| *p)
        .collect();
    PointCloud { points }
}
