//! Non-learned computational core of a two-stage LIDAR + camera 3D object
//! detector: KITTI ingestion, bird's-eye-view encoding, 3D anchors, box
//! encodings, oriented IoU / NMS / crop-and-resize, evaluation metrics and
//! network shape accounting.
//!
//! Frames: LIDAR points and all BEV / anchor / box geometry are in the LIDAR
//! frame (x forward, y left, z up). KITTI labels and ground planes are in the
//! rectified camera frame (x right, y down, z forward).

pub mod anchor_grid;
pub mod bev;
pub mod box_codec;
pub mod error;
pub mod geom;
pub mod kitti_io;
pub mod metrics;
pub mod net_shapes;

pub use error::{Error, Result};

/// Wraps an angle into `[-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    if (-PI..=PI).contains(&theta) {
        return theta;
    }
    let wrapped = (theta + PI).rem_euclid(TAU) - PI;
    // rem_euclid can land exactly on TAU through rounding
    if wrapped > PI {
        wrapped - TAU
    } else {
        wrapped
    }
}
