//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use avod_core::anchor_grid::{default_anchor_sizes, AnchorIouMode, LabelThresholds};
use avod_core::bev::BevExtents;
use avod_core::metrics::{DifficultyTable, InterpolationMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::Cyclist];

    pub fn key(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Cyclist => "cyclist",
        }
    }

    /// Class name as written in label files.
    pub fn label_name(self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Pedestrian => "Pedestrian",
            ObjectClass::Cyclist => "Cyclist",
        }
    }
}

impl FromStr for ObjectClass {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectClass::ALL
            .into_iter()
            .find(|c| c.key().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| anyhow!("unknown class {s:?} (expected car, pedestrian or cyclist)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeightReference {
    /// Heights measured from the ground plane.
    Ground,
    /// Raw LIDAR `z`.
    Sensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IouMode {
    ThreeD,
    Bev,
}

/// Per-class triple, indexed by `ObjectClass as usize`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerClass<T>(pub [T; 3]);

impl<T> PerClass<T> {
    pub fn get(&self, class: ObjectClass) -> &T {
        &self.0[class as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
    pub velodyne_dir: String,
    pub calib_dir: String,
    pub label_dir: String,
    pub plane_dir: String,
    pub classes: Vec<ObjectClass>,

    pub image_size: (f64, f64),
    pub fov_crop: bool,
    pub extents: BevExtents,
    pub resolution: f64,
    pub height_range: (f64, f64),
    pub height_slices: usize,
    pub height_reference: HeightReference,

    pub anchor_stride: f64,
    pub anchor_sizes: PerClass<Vec<[f64; 3]>>,
    pub anchor_iou_mode: AnchorIouMode,
    pub rpn_neg_iou: f64,
    pub rpn_pos_iou: PerClass<f64>,
    pub rpn_nms_iou: f64,
    pub rpn_nms_keep: usize,
    pub final_nms_iou: f64,

    pub eval_nms: bool,
    pub eval_iou: PerClass<f64>,
    pub eval_iou_mode: IouMode,
    pub interpolation: InterpolationMode,
    pub difficulty: DifficultyTable,

    pub recall_iou: f64,
    pub recall_iou_mode: IouMode,
    pub recall_n: Vec<usize>,
    pub recall_nms: bool,

    pub cluster_k: PerClass<usize>,

    pub network_file: Option<PathBuf>,
    pub network_input: (usize, usize),
    pub mem_rois: u64,
    pub mem_crop: u64,
    pub mem_depth: u64,
    pub mem_bytes: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sizes = |c: &str| default_anchor_sizes(c).expect("known class");
        let difficulty = DifficultyTable::default();
        Self {
            data_root: PathBuf::from("."),
            output_dir: PathBuf::from("out"),
            velodyne_dir: "velodyne".into(),
            calib_dir: "calib".into(),
            label_dir: "label_2".into(),
            plane_dir: "planes".into(),
            classes: vec![ObjectClass::Car],
            image_size: (1242.0, 375.0),
            fov_crop: true,
            extents: BevExtents::default(),
            resolution: avod_core::bev::DEFAULT_RESOLUTION,
            height_range: avod_core::bev::DEFAULT_SLICE_RANGE,
            height_slices: avod_core::bev::DEFAULT_SLICES,
            height_reference: HeightReference::Ground,
            anchor_stride: avod_core::anchor_grid::DEFAULT_STRIDE,
            anchor_sizes: PerClass([sizes("car"), sizes("pedestrian"), sizes("cyclist")]),
            anchor_iou_mode: AnchorIouMode::AxisAligned,
            rpn_neg_iou: 0.3,
            rpn_pos_iou: PerClass([0.5, 0.45, 0.45]),
            rpn_nms_iou: 0.8,
            rpn_nms_keep: 1024,
            final_nms_iou: 0.01,
            eval_nms: false,
            eval_iou: PerClass([0.7, 0.5, 0.5]),
            eval_iou_mode: IouMode::ThreeD,
            interpolation: InterpolationMode::ElevenPoint,
            difficulty,
            recall_iou: 0.5,
            recall_iou_mode: IouMode::ThreeD,
            recall_n: vec![10, 20, 50, 100, 200, 300, 500, 1024],
            recall_nms: true,
            cluster_k: PerClass([2, 1, 1]),
            network_file: None,
            network_input: (704, 800),
            mem_rois: 100_000,
            mem_crop: 7,
            mem_depth: 256,
            mem_bytes: 4,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse::<T>().map_err(|_| anyhow!("{key}: cannot parse {v:?}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => bail!("{key}: expected true or false, got {v:?}"),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_num(key, s)).collect()
}

fn parse_triple<T: FromStr + Copy>(key: &str, v: &str) -> Result<[T; 3]> {
    let items: Vec<T> = parse_list(key, v)?;
    items.try_into().map_err(|_| anyhow!("{key}: expected three comma-separated values, got {v:?}"))
}

/// `LxWxH` entries separated by commas.
fn parse_sizes(key: &str, v: &str) -> Result<Vec<[f64; 3]>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|entry| {
            let dims: Vec<f64> = entry.split('x').map(|d| parse_num(key, d)).collect::<Result<_>>()?;
            dims.try_into().map_err(|_| anyhow!("{key}: size {entry:?} is not LxWxH"))
        })
        .collect()
}

fn parse_iou_mode(key: &str, v: &str) -> Result<IouMode> {
    match v.trim() {
        "3d" => Ok(IouMode::ThreeD),
        "bev" => Ok(IouMode::Bev),
        _ => bail!("{key}: expected 3d or bev, got {v:?}"),
    }
}

fn parse_pair(key: &str, v: &str) -> Result<(usize, usize)> {
    let (h, w) = v.split_once('x').ok_or_else(|| anyhow!("{key}: expected HxW, got {v:?}"))?;
    Ok((parse_num(key, h)?, parse_num(key, w)?))
}

fn per_class_key(key: &str, prefix: &str) -> Option<ObjectClass> {
    key.strip_prefix(prefix).and_then(|rest| rest.parse().ok())
}

impl RunConfig {
    /// Parses config text over the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key = value", n + 1))?;
            cfg.set(k.trim(), v.trim()).with_context(|| format!("line {}", n + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    /// Applies one `key = value` setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data_root" => self.data_root = PathBuf::from(v),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "velodyne_dir" => self.velodyne_dir = v.into(),
            "calib_dir" => self.calib_dir = v.into(),
            "label_dir" => self.label_dir = v.into(),
            "plane_dir" => self.plane_dir = v.into(),
            "classes" => self.classes = parse_list(key, v)?,
            "image_width" => self.image_size.0 = parse_num(key, v)?,
            "image_height" => self.image_size.1 = parse_num(key, v)?,
            "fov_crop" => self.fov_crop = parse_bool(key, v)?,
            "bev_x_min" => self.extents.x.0 = parse_num(key, v)?,
            "bev_x_max" => self.extents.x.1 = parse_num(key, v)?,
            "bev_y_min" => self.extents.y.0 = parse_num(key, v)?,
            "bev_y_max" => self.extents.y.1 = parse_num(key, v)?,
            "bev_resolution" => self.resolution = parse_num(key, v)?,
            "height_min" => self.height_range.0 = parse_num(key, v)?,
            "height_max" => self.height_range.1 = parse_num(key, v)?,
            "height_slices" => self.height_slices = parse_num(key, v)?,
            "height_reference" => {
                self.height_reference = match v {
                    "ground" => HeightReference::Ground,
                    "sensor" => HeightReference::Sensor,
                    _ => bail!("{key}: expected ground or sensor, got {v:?}"),
                }
            }
            "anchor_stride" => self.anchor_stride = parse_num(key, v)?,
            "anchor_iou_mode" => {
                self.anchor_iou_mode = match v {
                    "axis_aligned" => AnchorIouMode::AxisAligned,
                    "rotated" => AnchorIouMode::Rotated,
                    _ => bail!("{key}: expected axis_aligned or rotated, got {v:?}"),
                }
            }
            "rpn_neg_iou" => self.rpn_neg_iou = parse_num(key, v)?,
            "rpn_nms_iou" => self.rpn_nms_iou = parse_num(key, v)?,
            "rpn_nms_keep" => self.rpn_nms_keep = parse_num(key, v)?,
            "final_nms_iou" => self.final_nms_iou = parse_num(key, v)?,
            "eval_nms" => self.eval_nms = parse_bool(key, v)?,
            "eval_iou_mode" => self.eval_iou_mode = parse_iou_mode(key, v)?,
            "interpolation" => self.interpolation = v.parse().map_err(|e| anyhow!("{key}: {e}"))?,
            "difficulty_min_height" => self.difficulty.min_height = parse_triple(key, v)?,
            "difficulty_max_occlusion" => self.difficulty.max_occlusion = parse_triple(key, v)?,
            "difficulty_max_truncation" => self.difficulty.max_truncation = parse_triple(key, v)?,
            "recall_iou" => self.recall_iou = parse_num(key, v)?,
            "recall_iou_mode" => self.recall_iou_mode = parse_iou_mode(key, v)?,
            "recall_n" => self.recall_n = parse_list(key, v)?,
            "recall_nms" => self.recall_nms = parse_bool(key, v)?,
            "network_file" => self.network_file = (!v.is_empty()).then(|| PathBuf::from(v)),
            "network_input" => self.network_input = parse_pair(key, v)?,
            "mem_rois" => self.mem_rois = parse_num(key, v)?,
            "mem_crop" => self.mem_crop = parse_num(key, v)?,
            "mem_depth" => self.mem_depth = parse_num(key, v)?,
            "mem_bytes" => self.mem_bytes = parse_num(key, v)?,
            _ => {
                if let Some(c) = per_class_key(key, "anchor_sizes_") {
                    self.anchor_sizes.0[c as usize] = parse_sizes(key, v)?;
                } else if let Some(c) = per_class_key(key, "rpn_pos_iou_") {
                    self.rpn_pos_iou.0[c as usize] = parse_num(key, v)?;
                } else if let Some(c) = per_class_key(key, "eval_iou_") {
                    self.eval_iou.0[c as usize] = parse_num(key, v)?;
                } else if let Some(c) = per_class_key(key, "cluster_k_") {
                    self.cluster_k.0[c as usize] = parse_num(key, v)?;
                } else {
                    bail!("unknown config key {key:?}");
                }
            }
        }
        Ok(())
    }

    /// Applies `key=value` overrides and re-validates.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("override {o:?} is not key=value"))?;
            self.set(k.trim(), v.trim()).with_context(|| format!("override {o:?}"))?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                bail!("{name} must lie in [0, 1], got {v}");
            }
            Ok(())
        };
        let positive = |name: &str, v: f64| -> Result<()> {
            if !(v.is_finite() && v > 0.0) {
                bail!("{name} must be positive, got {v}");
            }
            Ok(())
        };
        if self.classes.is_empty() {
            bail!("classes must name at least one class");
        }
        positive("image_width", self.image_size.0)?;
        positive("image_height", self.image_size.1)?;
        self.extents.validate().map_err(|e| anyhow!("BEV extents: {e}"))?;
        positive("bev_resolution", self.resolution)?;
        if !(self.height_range.0.is_finite() && self.height_range.1 > self.height_range.0) {
            bail!("height_min must be below height_max");
        }
        if self.height_slices == 0 {
            bail!("height_slices must be at least 1");
        }
        positive("anchor_stride", self.anchor_stride)?;
        for c in ObjectClass::ALL {
            let sizes = self.anchor_sizes.get(c);
            if sizes.is_empty() || sizes.iter().flatten().any(|&d| !(d.is_finite() && d > 0.0)) {
                bail!("anchor_sizes_{} needs at least one positive LxWxH size", c.key());
            }
            unit(&format!("rpn_pos_iou_{}", c.key()), *self.rpn_pos_iou.get(c))?;
            unit(&format!("eval_iou_{}", c.key()), *self.eval_iou.get(c))?;
            if *self.rpn_pos_iou.get(c) < self.rpn_neg_iou {
                bail!("rpn_pos_iou_{} is below rpn_neg_iou", c.key());
            }
            if *self.cluster_k.get(c) == 0 {
                bail!("cluster_k_{} must be at least 1", c.key());
            }
        }
        unit("rpn_neg_iou", self.rpn_neg_iou)?;
        unit("rpn_nms_iou", self.rpn_nms_iou)?;
        unit("final_nms_iou", self.final_nms_iou)?;
        unit("recall_iou", self.recall_iou)?;
        if self.rpn_nms_keep == 0 {
            bail!("rpn_nms_keep must be at least 1");
        }
        self.difficulty.validate().map_err(|e| anyhow!("difficulty table: {e}"))?;
        if self.recall_n.is_empty() || self.recall_n.contains(&0) {
            bail!("recall_n must list positive proposal counts");
        }
        if self.network_input.0 == 0 || self.network_input.1 == 0 {
            bail!("network_input must be positive");
        }
        if [self.mem_rois, self.mem_crop, self.mem_depth, self.mem_bytes].contains(&0) {
            bail!("memory estimate settings must be positive");
        }
        Ok(())
    }

    pub fn thresholds(&self, class: ObjectClass) -> LabelThresholds {
        LabelThresholds { background_below: self.rpn_neg_iou, object_above: *self.rpn_pos_iou.get(class) }
    }

    pub fn frame_dir(&self, sub: &str) -> PathBuf {
        self.data_root.join(sub)
    }

    /// Effective configuration in the same text format `parse` reads.
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let mode = |m: IouMode| if m == IouMode::ThreeD { "3d" } else { "bev" };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("data_root", self.data_root.display().to_string());
        kv("output_dir", self.output_dir.display().to_string());
        kv("velodyne_dir", self.velodyne_dir.clone());
        kv("calib_dir", self.calib_dir.clone());
        kv("label_dir", self.label_dir.clone());
        kv("plane_dir", self.plane_dir.clone());
        kv("classes", self.classes.iter().map(|c| c.key()).collect::<Vec<_>>().join(","));
        kv("image_width", self.image_size.0.to_string());
        kv("image_height", self.image_size.1.to_string());
        kv("fov_crop", self.fov_crop.to_string());
        kv("bev_x_min", self.extents.x.0.to_string());
        kv("bev_x_max", self.extents.x.1.to_string());
        kv("bev_y_min", self.extents.y.0.to_string());
        kv("bev_y_max", self.extents.y.1.to_string());
        kv("bev_resolution", self.resolution.to_string());
        kv("height_min", self.height_range.0.to_string());
        kv("height_max", self.height_range.1.to_string());
        kv("height_slices", self.height_slices.to_string());
        kv("height_reference", if self.height_reference == HeightReference::Ground { "ground" } else { "sensor" }.into());
        kv("anchor_stride", self.anchor_stride.to_string());
        kv("anchor_iou_mode", if self.anchor_iou_mode == AnchorIouMode::Rotated { "rotated" } else { "axis_aligned" }.into());
        kv("rpn_neg_iou", self.rpn_neg_iou.to_string());
        kv("rpn_nms_iou", self.rpn_nms_iou.to_string());
        kv("rpn_nms_keep", self.rpn_nms_keep.to_string());
        kv("final_nms_iou", self.final_nms_iou.to_string());
        kv("eval_nms", self.eval_nms.to_string());
        kv("eval_iou_mode", mode(self.eval_iou_mode).into());
        kv("interpolation", if self.interpolation == InterpolationMode::FortyPoint { "40" } else { "11" }.into());
        kv("difficulty_min_height", join(&self.difficulty.min_height));
        kv("difficulty_max_occlusion", self.difficulty.max_occlusion.map(|o| o.to_string()).join(","));
        kv("difficulty_max_truncation", join(&self.difficulty.max_truncation));
        kv("recall_iou", self.recall_iou.to_string());
        kv("recall_iou_mode", mode(self.recall_iou_mode).into());
        kv("recall_n", self.recall_n.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
        kv("recall_nms", self.recall_nms.to_string());
        for c in ObjectClass::ALL {
            let sizes = self.anchor_sizes.get(c).iter().map(|d| format!("{}x{}x{}", d[0], d[1], d[2])).collect::<Vec<_>>();
            kv(&format!("anchor_sizes_{}", c.key()), sizes.join(","));
            kv(&format!("rpn_pos_iou_{}", c.key()), self.rpn_pos_iou.get(c).to_string());
            kv(&format!("eval_iou_{}", c.key()), self.eval_iou.get(c).to_string());
            kv(&format!("cluster_k_{}", c.key()), self.cluster_k.get(c).to_string());
        }
        kv("network_file", self.network_file.as_ref().map_or(String::new(), |p| p.display().to_string()));
        kv("network_input", format!("{}x{}", self.network_input.0, self.network_input.1));
        kv("mem_rois", self.mem_rois.to_string());
        kv("mem_crop", self.mem_crop.to_string());
        kv("mem_depth", self.mem_depth.to_string());
        kv("mem_bytes", self.mem_bytes.to_string());
        s
    }
}
