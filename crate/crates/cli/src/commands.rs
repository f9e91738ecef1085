//! Subcommand implementations. Each returns the text for standard output;
//! data files go under the configured output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use avod_core::anchor_grid::*;
use avod_core::bev::*;
use avod_core::box_codec::*;
use avod_core::geom::{iou_3d, iou_axis_aligned, iou_rotated_bev, nms, AxisRect};
use avod_core::kitti_io::*;
use avod_core::metrics::*;
use avod_core::net_shapes::*;
use rayon::prelude::*;

use crate::config::{HeightReference, IouMode, ObjectClass, RunConfig};
use crate::frames::{frame_path, frame_stem, resolve, FrameSelection};

type IouFn = fn(&OrientedBox3D, &OrientedBox3D) -> f64;

fn iou_fn(mode: IouMode) -> IouFn {
    match mode {
        IouMode::ThreeD => iou_3d,
        IouMode::Bev => iou_rotated_bev,
    }
}

fn out_dir(cfg: &RunConfig, sub: Option<&str>) -> Result<PathBuf> {
    let dir = match sub {
        Some(s) => cfg.output_dir.join(s),
        None => cfg.output_dir.clone(),
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_calib(cfg: &RunConfig, id: u32) -> Result<CalibrationSet> {
    let path = frame_path(&cfg.frame_dir(&cfg.calib_dir), id, "txt");
    read_calibration(&path).with_context(|| format!("calibration {}", path.display()))
}

/// Ground plane in the LIDAR frame; flat ground at the nominal sensor height
/// when the frame has no plane file.
fn read_plane(cfg: &RunConfig, id: u32, calib: &CalibrationSet) -> Result<GroundPlane> {
    let path = frame_path(&cfg.frame_dir(&cfg.plane_dir), id, "txt");
    let camera = if path.exists() {
        read_ground_plane(&path).with_context(|| format!("ground plane {}", path.display()))?
    } else {
        GroundPlane::default_camera()
    };
    Ok(camera.to_lidar(&calib.lidar_to_rect()))
}

fn read_label_file(path: &Path) -> Result<Vec<LabeledObject>> {
    read_labels(path).with_context(|| format!("labels {}", path.display()))
}

/// Labels of frame `id` in `dir`; empty when the file is absent.
fn read_optional_labels(dir: &Path, id: u32) -> Result<Vec<LabeledObject>> {
    let path = frame_path(dir, id, "txt");
    if path.exists() {
        read_label_file(&path)
    } else {
        Ok(Vec::new())
    }
}

struct Prepared {
    total: usize,
    /// Points kept by the FOV crop (or inside the extents without it).
    view: PointCloud,
    calib: CalibrationSet,
    plane: GroundPlane,
}

fn prepare_frame(cfg: &RunConfig, id: u32) -> Result<Prepared> {
    let path = frame_path(&cfg.frame_dir(&cfg.velodyne_dir), id, "bin");
    let cloud = read_point_cloud(&path).with_context(|| format!("point cloud {}", path.display()))?;
    let calib = read_calib(cfg, id)?;
    let plane = read_plane(cfg, id, &calib)?;
    let view = if cfg.fov_crop {
        filter_fov(&cloud, &calib, cfg.image_size, &cfg.extents)
    } else {
        PointCloud::new(cloud.points.iter().copied().filter(|p| cfg.extents.contains(p.x as f64, p.y as f64)).collect())
    };
    Ok(Prepared { total: cloud.len(), view, calib, plane })
}

// ---------------------------------------------------------------------------
// bev

struct BevFrame {
    id: u32,
    total: usize,
    in_view: usize,
    /// `(nonzero cells, sum)` per channel.
    stats: Vec<(usize, f64)>,
}

pub fn cmd_bev(cfg: &RunConfig, frames: &FrameSelection) -> Result<String> {
    let ids = resolve(frames, &cfg.frame_dir(&cfg.velodyne_dir), "bin")?;
    let dump_dir = out_dir(cfg, Some("bev"))?;
    let results: Vec<BevFrame> = ids
        .par_iter()
        .map(|&id| {
            let frame = prepare_frame(cfg, id)?;
            let cloud = match cfg.height_reference {
                HeightReference::Ground => heights_above_plane(&frame.view, &frame.plane),
                HeightReference::Sensor => frame.view.clone(),
            };
            let map = build_bev_map(&cloud, cfg.extents, cfg.resolution, cfg.height_range, cfg.height_slices)?;
            write_bev_dump(&map, &dump_dir, &frame_stem(id))?;
            let stats = (0..=map.n_slices())
                .map(|ch| {
                    let c = map.channel(ch);
                    (c.iter().filter(|&&v| v != 0.0).count(), c.iter().sum())
                })
                .collect();
            Ok(BevFrame { id, total: frame.total, in_view: frame.view.len(), stats })
        })
        .collect::<Result<_>>()?;

    let mut counts = String::from("frame,points,in_view\n");
    let mut stats = String::from("frame,channel,nonzero,sum\n");
    let mut stdout = String::new();
    for f in &results {
        let stem = frame_stem(f.id);
        let _ = writeln!(counts, "{stem},{},{}", f.total, f.in_view);
        for (ch, (nz, sum)) in f.stats.iter().enumerate() {
            let _ = writeln!(stats, "{stem},{ch},{nz},{sum:.6}");
        }
        let nonzero: Vec<String> = f.stats.iter().map(|s| s.0.to_string()).collect();
        let _ = writeln!(stdout, "{stem} points={} in_view={} nonzero={}", f.total, f.in_view, nonzero.join(","));
    }
    let dir = out_dir(cfg, None)?;
    write(&dir.join("bev_counts.csv"), counts)?;
    write(&dir.join("bev_stats.csv"), stats)?;
    Ok(stdout)
}

// ---------------------------------------------------------------------------
// anchors

struct AnchorRow {
    id: u32,
    class: ObjectClass,
    total: usize,
    kept: usize,
    /// Object / background / ignore counts when the frame has labels.
    labels: Option<[usize; 3]>,
}

pub fn cmd_anchors(cfg: &RunConfig, frames: &FrameSelection) -> Result<String> {
    let ids = resolve(frames, &cfg.frame_dir(&cfg.velodyne_dir), "bin")?;
    let dump_dir = out_dir(cfg, Some("anchors"))?;
    let label_dir = cfg.frame_dir(&cfg.label_dir);
    let rows: Vec<Vec<AnchorRow>> = ids
        .par_iter()
        .map(|&id| {
            let frame = prepare_frame(cfg, id)?;
            let integral = build_occupancy_integral(&frame.view, cfg.extents, cfg.resolution)?;
            let label_path = frame_path(&label_dir, id, "txt");
            let labels = if label_path.exists() { Some(read_label_file(&label_path)?) } else { None };
            let to_rect = frame.calib.lidar_to_rect();
            let mut rows = Vec::new();
            for &class in &cfg.classes {
                let anchors = generate_anchor_grid(&cfg.extents, cfg.anchor_stride, cfg.anchor_sizes.get(class), &frame.plane)?;
                let kept = filter_empty_anchors(&anchors, &integral);
                write(&dump_dir.join(format!("{}_{}.csv", frame_stem(id), class.key())), anchors_to_csv(&kept))?;
                let label_counts = labels.as_ref().map(|objs| {
                    let gts: Vec<OrientedBox3D> = objs
                        .iter()
                        .filter(|o| o.class_name.eq_ignore_ascii_case(class.label_name()))
                        .map(|o| o.to_box(&to_rect))
                        .collect();
                    let mut n = [0usize; 3];
                    for l in assign_anchor_labels_with(&kept, &gts, cfg.thresholds(class), cfg.anchor_iou_mode) {
                        n[match l {
                            AnchorLabel::Object { .. } => 0,
                            AnchorLabel::Background => 1,
                            AnchorLabel::Ignore => 2,
                        }] += 1;
                    }
                    n
                });
                rows.push(AnchorRow { id, class, total: anchors.len(), kept: kept.len(), labels: label_counts });
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;

    let mut csv = String::from("frame,class,anchors,non_empty,object,background,ignore\n");
    let mut stdout = String::new();
    for r in rows.iter().flatten() {
        let stem = frame_stem(r.id);
        let labels = r.labels.map_or(",,".to_string(), |n| format!("{},{},{}", n[0], n[1], n[2]));
        let _ = writeln!(csv, "{stem},{},{},{},{labels}", r.class.key(), r.total, r.kept);
        let _ = write!(stdout, "{stem} {} anchors={} non_empty={}", r.class.key(), r.total, r.kept);
        if let Some(n) = r.labels {
            let _ = write!(stdout, " object={} background={} ignore={}", n[0], n[1], n[2]);
        }
        stdout.push('\n');
    }
    write(&out_dir(cfg, None)?.join("anchor_counts.csv"), csv)?;
    Ok(stdout)
}

// ---------------------------------------------------------------------------
// eval

pub fn cmd_eval(cfg: &RunConfig, frames: &FrameSelection, detection_dir: &Path, gt_dir: Option<&Path>) -> Result<String> {
    if !detection_dir.is_dir() {
        anyhow::bail!("detection directory {} does not exist", detection_dir.display());
    }
    let gt_dir = gt_dir.map_or_else(|| cfg.frame_dir(&cfg.label_dir), Path::to_path_buf);
    let ids = resolve(frames, &gt_dir, "txt")?;
    let tf = RigidTransform::nominal_lidar_to_camera();
    let inputs: Vec<(Vec<LabeledObject>, Vec<Detection>)> = ids
        .par_iter()
        .map(|&id| {
            let gts = read_label_file(&frame_path(&gt_dir, id, "txt"))?;
            let dets = read_optional_labels(detection_dir, id)?.iter().filter(|o| !o.is_dont_care()).map(|o| Detection::from_label(o, &tf)).collect();
            Ok((gts, dets))
        })
        .collect::<Result<_>>()?;

    let dir = out_dir(cfg, None)?;
    let iou = iou_fn(cfg.eval_iou_mode);
    let mut summary = String::from("class,difficulty,num_gt,num_det,ap,ahs\n");
    let mut stdout = String::new();
    for &class in &cfg.classes {
        for level in [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard] {
            let matchings: Vec<FrameMatching> = inputs
                .iter()
                .map(|(labels, dets)| {
                    let gts = prepare_ground_truth(labels, class.label_name(), level, &cfg.difficulty, &tf);
                    let mut dets = prepare_detections(dets, class.label_name(), level, &cfg.difficulty);
                    if cfg.eval_nms {
                        let boxes: Vec<OrientedBox3D> = dets.iter().map(|d| d.bbox).collect();
                        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
                        let keep = nms(&boxes, &scores, iou_rotated_bev, cfg.final_nms_iou, usize::MAX)?;
                        dets = keep.into_iter().map(|i| dets[i].clone()).collect();
                    }
                    Ok(match_detections(&dets, &gts, iou, *cfg.eval_iou.get(class)))
                })
                .collect::<Result<_>>()?;
            let curve = pr_curve(&matchings);
            let num_det: usize = matchings.iter().map(|m| m.true_positives() + m.false_positives()).sum();
            let ap = 100.0 * average_precision(&curve, cfg.interpolation);
            let ahs = 100.0 * average_heading_similarity(&curve, cfg.interpolation);
            write(&dir.join(format!("pr_{}_{}.csv", class.key(), level.name())), pr_curve_to_csv(&curve))?;
            let _ = writeln!(summary, "{},{},{},{num_det},{ap:.4},{ahs:.4}", class.key(), level.name(), curve.num_gt);
            let _ = writeln!(stdout, "{:<10} {:<8} gt={:<5} det={:<5} AP={ap:7.2} AHS={ahs:7.2}", class.key(), level.name(), curve.num_gt, num_det);
        }
    }
    write(&dir.join("eval_summary.csv"), summary)?;
    Ok(stdout)
}

// ---------------------------------------------------------------------------
// recall

fn bev_axis_iou(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    iou_axis_aligned(&AxisRect::bev_footprint(a), &AxisRect::bev_footprint(b))
}

pub fn cmd_recall(cfg: &RunConfig, frames: &FrameSelection, proposal_dir: &Path, gt_dir: Option<&Path>) -> Result<String> {
    if !proposal_dir.is_dir() {
        anyhow::bail!("proposal directory {} does not exist", proposal_dir.display());
    }
    let gt_dir = gt_dir.map_or_else(|| cfg.frame_dir(&cfg.label_dir), Path::to_path_buf);
    let ids = resolve(frames, &gt_dir, "txt")?;
    let tf = RigidTransform::nominal_lidar_to_camera();
    let inputs: Vec<(Vec<LabeledObject>, Vec<LabeledObject>)> = ids
        .par_iter()
        .map(|&id| Ok((read_label_file(&frame_path(&gt_dir, id, "txt"))?, read_optional_labels(proposal_dir, id)?)))
        .collect::<Result<_>>()?;

    let dir = out_dir(cfg, None)?;
    let mut stdout = String::new();
    for &class in &cfg.classes {
        let of_class = |objs: &[LabeledObject]| -> Vec<LabeledObject> {
            objs.iter().filter(|o| o.class_name.eq_ignore_ascii_case(class.label_name())).cloned().collect()
        };
        let mut proposals = Vec::with_capacity(inputs.len());
        let mut gts = Vec::with_capacity(inputs.len());
        for (labels, props) in &inputs {
            let props = of_class(props);
            let boxes: Vec<OrientedBox3D> = props.iter().map(|o| o.to_box(&tf)).collect();
            let scores: Vec<f64> = props.iter().map(|o| o.score.unwrap_or(0.0)).collect();
            let order = if cfg.recall_nms {
                nms(&boxes, &scores, bev_axis_iou, cfg.rpn_nms_iou, cfg.rpn_nms_keep)?
            } else {
                avod_core::geom::score_order(&scores)
            };
            proposals.push(order.into_iter().map(|i| boxes[i]).collect::<Vec<_>>());
            gts.push(of_class(labels).iter().map(|o| o.to_box(&tf)).collect::<Vec<_>>());
        }
        let curve = recall_curve(&proposals, &gts, &cfg.recall_n, iou_fn(cfg.recall_iou_mode), cfg.recall_iou)?;
        write(&dir.join(format!("recall_{}.csv", class.key())), recall_curve_to_csv(&curve))?;
        let total: usize = gts.iter().map(Vec::len).sum();
        for (n, r) in curve {
            let _ = writeln!(stdout, "{} gt={total} n={n} recall={r:.4}", class.key());
        }
    }
    Ok(stdout)
}

// ---------------------------------------------------------------------------
// encode

fn cyclic_corner_error(got: &[Point2; 4], want: &[Point2; 4]) -> f64 {
    (0..4)
        .map(|s| (0..4).map(|m| (got[m][0] - want[(m + s) % 4][0]).hypot(got[m][1] - want[(m + s) % 4][1])).fold(0.0, f64::max))
        .fold(f64::INFINITY, f64::min)
}

fn corner_set_error(got: &[[f64; 3]; 8], want: &[[f64; 3]; 8]) -> f64 {
    got.iter()
        .map(|c| want.iter().map(|w| (0..3).map(|k| (c[k] - w[k]).powi(2)).sum::<f64>().sqrt()).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

/// Anchor of the class's first size at the grid position nearest `g`.
fn nearest_anchor(cfg: &RunConfig, class: ObjectClass, g: &OrientedBox3D, plane: &GroundPlane) -> Result<Anchor3D> {
    let s = cfg.anchor_stride;
    let snap = |v: f64, lo: f64| lo + s * (((v - lo) / s).floor() + 0.5);
    let (tx, ty) = (snap(g.x, cfg.extents.x.0), snap(g.y, cfg.extents.y.0));
    let dims = cfg.anchor_sizes.get(class)[0];
    Ok(Anchor3D::new([tx, ty, plane.z_at(tx, ty)? + dims[2] / 2.0], dims))
}

pub fn cmd_encode(cfg: &RunConfig, frames: &FrameSelection) -> Result<String> {
    let label_dir = cfg.frame_dir(&cfg.label_dir);
    let ids = resolve(frames, &label_dir, "txt")?;
    let rows: Vec<Vec<String>> = ids
        .par_iter()
        .map(|&id| {
            let labels = read_label_file(&frame_path(&label_dir, id, "txt"))?;
            let calib = read_calib(cfg, id)?;
            let plane = read_plane(cfg, id, &calib)?;
            let to_rect = calib.lidar_to_rect();
            let mut rows = Vec::new();
            for (k, obj) in labels.iter().enumerate() {
                let Some(class) = cfg.classes.iter().copied().find(|c| obj.class_name.eq_ignore_ascii_case(c.label_name())) else {
                    continue;
                };
                let g = obj.to_box(&to_rect);
                let p = nearest_anchor(cfg, class, &g, &plane)?.to_box();
                let t4 = encode_four_corner(&p, &g, &plane);
                let d4 = decode_four_corner(&p, &t4, &plane);
                let err4 = cyclic_corner_error(&d4.corners, &FourCornerBox::from_box(&g, &plane).corners);
                let err8 = corner_set_error(&decode_eight_corner(&p, &encode_eight_corner(&p, &g)), &g.corners_3d());
                let fit = fit_oriented_box(&d4, &plane)?;
                let yaw_err = angular_distance(fit.resolve(orientation_to_vector(g.yaw))?.yaw, g.yaw);
                let targets: Vec<String> = t4.0.iter().map(|v| format!("{v:.6}")).collect();
                rows.push(format!("{},{k},{},{},{err4:.3e},{err8:.3e},{yaw_err:.3e}", frame_stem(id), class.key(), targets.join(",")));
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let mut csv = String::from("frame,object,class");
    for i in 0..10 {
        let _ = write!(csv, ",t{i}");
    }
    csv.push_str(",corner_error_4,corner_error_8,yaw_error\n");
    let n: usize = rows.iter().map(Vec::len).sum();
    for r in rows.iter().flatten() {
        csv.push_str(r);
        csv.push('\n');
    }
    write(&out_dir(cfg, None)?.join("encode.csv"), csv)?;
    Ok(format!("encoded {n} objects from {} frames\n", ids.len()))
}

// ---------------------------------------------------------------------------
// cluster

pub fn cmd_cluster(cfg: &RunConfig, frames: &FrameSelection) -> Result<String> {
    let label_dir = cfg.frame_dir(&cfg.label_dir);
    let ids = resolve(frames, &label_dir, "txt")?;
    let labels: Vec<Vec<LabeledObject>> =
        ids.par_iter().map(|&id| read_label_file(&frame_path(&label_dir, id, "txt"))).collect::<Result<_>>()?;
    let all: Vec<LabeledObject> = labels.into_iter().flatten().collect();
    let mut entries = Vec::new();
    let mut stdout = String::new();
    for &class in &cfg.classes {
        let k = *cfg.cluster_k.get(class);
        let centers = cluster_dimensions(&all, class.label_name(), k).with_context(|| format!("clustering {}", class.key()))?;
        for (i, dims) in centers.into_iter().enumerate() {
            let _ = writeln!(stdout, "{} {i}: {:.3}x{:.3}x{:.3}", class.key(), dims[0], dims[1], dims[2]);
            entries.push(ClusterEntry { class_name: class.key().to_string(), k_index: i, dims });
        }
    }
    write(&out_dir(cfg, None)?.join("clusters.csv"), clusters_to_csv(&entries))?;
    Ok(stdout)
}

// ---------------------------------------------------------------------------
// netinfo

pub fn cmd_netinfo(cfg: &RunConfig) -> Result<String> {
    let network = match &cfg.network_file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            config_from_text(&text).with_context(|| format!("network {}", path.display()))?
        }
        None => NetworkConfig::avod_default(cfg.height_slices + 1, cfg.classes.len() + 1),
    };
    let input = Shape::new(cfg.network_input.0, cfg.network_input.1, cfg.height_slices + 1);
    let report = propagate_shapes(&network, input)?;
    let memory = memory_estimate(cfg.mem_rois, (cfg.mem_crop, cfg.mem_crop), cfg.mem_depth, cfg.mem_bytes)?;

    let mut csv = String::from("branch,index,layer,input,output,params,flops\n");
    let mut stdout = format!("{:<16} {:>3}  {:<28} {:>14} {:>14} {:>12} {:>16}\n", "branch", "#", "layer", "input", "output", "params", "flops");
    for l in &report.layers {
        let _ = writeln!(csv, "{},{},{},{},{},{},{}", l.branch, l.index, l.spec, l.input, l.output, l.params, l.flops);
        let _ = writeln!(
            stdout,
            "{:<16} {:>3}  {:<28} {:>14} {:>14} {:>12} {:>16}",
            l.branch,
            l.index,
            l.spec.to_string(),
            l.input.to_string(),
            l.output.to_string(),
            l.params,
            l.flops
        );
    }
    let _ = writeln!(csv, "total,,,,,{},{}", report.total_params(), report.total_flops());
    let _ = writeln!(csv, "memory_estimate,{},{}x{},{},{},{memory}", cfg.mem_rois, cfg.mem_crop, cfg.mem_crop, cfg.mem_depth, cfg.mem_bytes);
    let _ = writeln!(stdout, "total parameters {}  flops {}", report.total_params(), report.total_flops());
    let _ = writeln!(
        stdout,
        "crop memory {} rois x {}x{} x {} x {} bytes = {memory} bytes",
        cfg.mem_rois, cfg.mem_crop, cfg.mem_crop, cfg.mem_depth, cfg.mem_bytes
    );
    write(&out_dir(cfg, None)?.join("netinfo.csv"), csv)?;
    Ok(stdout)
}
