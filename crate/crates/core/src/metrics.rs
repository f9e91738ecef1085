//! KITTI-style evaluation: difficulty stratification, greedy matching,
//! precision/recall sweeps, interpolated AP, average heading similarity and
//! proposal recall curves.

use crate::box_codec::OrientedBox3D;
use crate::error::{Error, Result};
use crate::geom::AxisRect;
use crate::kitti_io::{LabeledObject, RigidTransform};
use crate::wrap_angle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    Excluded,
}

impl Difficulty {
    pub const LEVELS: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
            Difficulty::Excluded => "excluded",
        }
    }

    fn level(self) -> Option<usize> {
        match self {
            Difficulty::Easy => Some(0),
            Difficulty::Moderate => Some(1),
            Difficulty::Hard => Some(2),
            Difficulty::Excluded => None,
        }
    }
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Ok(Difficulty::Easy),
            "moderate" | "medium" => Ok(Difficulty::Moderate),
            "hard" => Ok(Difficulty::Hard),
            _ => Err(Error::Parameter(format!("unknown difficulty {s:?}"))),
        }
    }
}

/// Per-level limits, indexed easy / moderate / hard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyTable {
    pub min_height: [f64; 3],
    pub max_occlusion: [i32; 3],
    pub max_truncation: [f64; 3],
}

impl Default for DifficultyTable {
    /// KITTI devkit constants.
    fn default() -> Self {
        Self { min_height: [40.0, 25.0, 25.0], max_occlusion: [0, 1, 2], max_truncation: [0.15, 0.30, 0.50] }
    }
}

impl DifficultyTable {
    pub fn validate(&self) -> Result<()> {
        for l in 0..3 {
            if !(self.min_height[l] >= 0.0 && self.max_truncation[l] >= 0.0 && self.max_occlusion[l] >= 0) {
                return Err(Error::Parameter(format!("difficulty table level {l} has negative limits")));
            }
        }
        Ok(())
    }

    /// Whether `obj` meets the limits of `level`. Harder levels admit every
    /// object an easier one does when the table is monotone.
    pub fn qualifies(&self, obj: &LabeledObject, level: Difficulty) -> bool {
        let Some(l) = level.level() else { return false };
        obj.bbox_height() >= self.min_height[l]
            && obj.occlusion <= self.max_occlusion[l]
            && obj.truncation <= self.max_truncation[l]
    }

    /// The easiest level `obj` qualifies for.
    pub fn difficulty_of(&self, obj: &LabeledObject) -> Difficulty {
        Difficulty::LEVELS.into_iter().find(|&d| self.qualifies(obj, d)).unwrap_or(Difficulty::Excluded)
    }
}

pub fn difficulty_of(obj: &LabeledObject) -> Difficulty {
    DifficultyTable::default().difficulty_of(obj)
}

/// Classes whose detections are neither rewarded nor penalized when
/// evaluating `class_name`.
pub fn neighbor_classes(class_name: &str) -> &'static [&'static str] {
    match class_name.to_ascii_lowercase().as_str() {
        "car" => &["Van"],
        "pedestrian" => &["Person_sitting"],
        _ => &[],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_name: String,
    pub bbox: OrientedBox3D,
    pub score: f64,
    /// Image-plane box, used for DontCare overlap and the height filter.
    pub bbox2d: Option<[f64; 4]>,
}

impl Detection {
    pub fn new(class_name: impl Into<String>, bbox: OrientedBox3D, score: f64) -> Self {
        Self { class_name: class_name.into(), bbox, score, bbox2d: None }
    }

    /// Label lines without a score field get score 1.
    pub fn from_label(obj: &LabeledObject, lidar_to_cam: &RigidTransform) -> Self {
        Self {
            class_name: obj.class_name.clone(),
            bbox: obj.to_box(lidar_to_cam),
            score: obj.score.unwrap_or(1.0),
            bbox2d: Some(obj.bbox2d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GtState {
    Valid,
    /// Same or neighboring class outside the evaluated difficulty.
    Ignored,
    DontCare,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub bbox: OrientedBox3D,
    pub bbox2d: [f64; 4],
    pub state: GtState,
}

impl GroundTruth {
    pub fn valid(bbox: OrientedBox3D) -> Self {
        Self { bbox, bbox2d: [0.0; 4], state: GtState::Valid }
    }
}

/// Selects the ground truth relevant to `class_name` at `level`. Objects of
/// unrelated classes are dropped.
pub fn prepare_ground_truth(
    labels: &[LabeledObject],
    class_name: &str,
    level: Difficulty,
    table: &DifficultyTable,
    lidar_to_cam: &RigidTransform,
) -> Vec<GroundTruth> {
    let neighbors = neighbor_classes(class_name);
    labels
        .iter()
        .filter_map(|obj| {
            let state = if obj.is_dont_care() {
                GtState::DontCare
            } else if obj.class_name.eq_ignore_ascii_case(class_name) {
                if table.qualifies(obj, level) {
                    GtState::Valid
                } else {
                    GtState::Ignored
                }
            } else if neighbors.contains(&obj.class_name.as_str()) {
                GtState::Ignored
            } else {
                return None;
            };
            Some(GroundTruth { bbox: obj.to_box(lidar_to_cam), bbox2d: obj.bbox2d, state })
        })
        .collect()
}

/// Detections of `class_name`, dropping those whose image box is shorter
/// than the level's minimum height.
pub fn prepare_detections(dets: &[Detection], class_name: &str, level: Difficulty, table: &DifficultyTable) -> Vec<Detection> {
    let min_h = level.level().map_or(f64::INFINITY, |l| table.min_height[l]);
    dets.iter()
        .filter(|d| d.class_name.eq_ignore_ascii_case(class_name))
        .filter(|d| d.bbox2d.is_none_or(|b| b[3] - b[1] >= min_h))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    TruePositive { gt_index: usize, iou: f64, heading_delta: f64 },
    FalsePositive,
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatching {
    /// `(score, outcome)` per detection, in input order.
    pub outcomes: Vec<(f64, Outcome)>,
    pub num_gt: usize,
}

impl FrameMatching {
    pub fn true_positives(&self) -> usize {
        self.outcomes.iter().filter(|(_, o)| matches!(o, Outcome::TruePositive { .. })).count()
    }

    pub fn false_positives(&self) -> usize {
        self.outcomes.iter().filter(|(_, o)| matches!(o, Outcome::FalsePositive)).count()
    }

    pub fn false_negatives(&self) -> usize {
        self.num_gt - self.true_positives()
    }
}

/// Intersection over the detection's own area.
fn coverage_2d(det: &[f64; 4], region: &[f64; 4]) -> f64 {
    let a = AxisRect::new(det[0], det[1], det[2], det[3]);
    let iw = (det[2].min(region[2]) - det[0].max(region[0])).max(0.0);
    let ih = (det[3].min(region[3]) - det[1].max(region[1])).max(0.0);
    if a.area() > 0.0 {
        iw * ih / a.area()
    } else {
        0.0
    }
}

/// Greedy matching in descending score (ties by input order). Each detection
/// takes the unmatched valid ground truth of highest IoU at or above
/// `threshold`; failing that, a detection overlapping an ignored object or
/// covering a DontCare region is ignored; otherwise it is a false positive.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou: impl Fn(&OrientedBox3D, &OrientedBox3D) -> f64,
    threshold: f64,
) -> FrameMatching {
    let mut outcomes = vec![(0.0, Outcome::FalsePositive); dets.len()];
    let mut taken = vec![false; gts.len()];
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    for i in crate::geom::score_order(&scores) {
        let det = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        let mut hits_ignored = false;
        for (g, gt) in gts.iter().enumerate() {
            match gt.state {
                GtState::Valid if !taken[g] => {
                    let v = iou(&det.bbox, &gt.bbox);
                    if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                        best = Some((g, v));
                    }
                }
                GtState::Ignored => hits_ignored |= iou(&det.bbox, &gt.bbox) >= threshold,
                GtState::DontCare => {
                    if let Some(b) = &det.bbox2d {
                        hits_ignored |= coverage_2d(b, &gt.bbox2d) > threshold;
                    }
                }
                GtState::Valid => {}
            }
        }
        let outcome = match best {
            Some((g, v)) => {
                taken[g] = true;
                Outcome::TruePositive { gt_index: g, iou: v, heading_delta: wrap_angle(det.bbox.yaw - gts[g].bbox.yaw) }
            }
            None if hits_ignored => Outcome::Ignored,
            None => Outcome::FalsePositive,
        };
        outcomes[i] = (det.score, outcome);
    }
    let num_gt = gts.iter().filter(|g| g.state == GtState::Valid).count();
    FrameMatching { outcomes, num_gt }
}

/// Weight of a true positive in the heading similarity.
pub fn heading_weight(delta: f64) -> f64 {
    (1.0 + delta.cos()) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
    /// Heading-weighted true positives over detections.
    pub heading_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrCurve {
    /// One point per distinct score, descending.
    pub points: Vec<PrPoint>,
    /// Yaw differences of true positives in sweep order.
    pub heading_deltas: Vec<f64>,
    pub num_gt: usize,
}

pub fn pr_curve(frames: &[FrameMatching]) -> PrCurve {
    let num_gt = frames.iter().map(|f| f.num_gt).sum();
    let mut scored: Vec<(f64, Outcome)> = frames
        .iter()
        .flat_map(|f| f.outcomes.iter().copied())
        .filter(|(_, o)| !matches!(o, Outcome::Ignored))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut curve = PrCurve { num_gt, ..Default::default() };
    let (mut tp, mut fp, mut weighted) = (0usize, 0usize, 0.0f64);
    let mut i = 0;
    while i < scored.len() {
        let threshold = scored[i].0;
        while i < scored.len() && scored[i].0 == threshold {
            match scored[i].1 {
                Outcome::TruePositive { heading_delta, .. } => {
                    tp += 1;
                    weighted += heading_weight(heading_delta);
                    curve.heading_deltas.push(heading_delta);
                }
                _ => fp += 1,
            }
            i += 1;
        }
        let n = (tp + fp) as f64;
        curve.points.push(PrPoint {
            threshold,
            recall: if num_gt > 0 { tp as f64 / num_gt as f64 } else { 0.0 },
            precision: tp as f64 / n,
            heading_precision: weighted / n,
        });
    }
    curve
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InterpolationMode {
    /// Recall points 0, 0.1, ..., 1.
    #[default]
    ElevenPoint,
    /// Recall points 1/40, 2/40, ..., 1.
    FortyPoint,
}

impl InterpolationMode {
    pub fn recall_points(self) -> Vec<f64> {
        match self {
            InterpolationMode::ElevenPoint => (0..=10).map(|k| k as f64 / 10.0).collect(),
            InterpolationMode::FortyPoint => (1..=40).map(|k| k as f64 / 40.0).collect(),
        }
    }
}

impl std::str::FromStr for InterpolationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "11" | "11-point" => Ok(InterpolationMode::ElevenPoint),
            "40" | "40-point" => Ok(InterpolationMode::FortyPoint),
            _ => Err(Error::Parameter(format!("unknown interpolation mode {s:?}"))),
        }
    }
}

fn interpolated_mean(curve: &PrCurve, mode: InterpolationMode, value: impl Fn(&PrPoint) -> f64) -> f64 {
    if curve.num_gt == 0 {
        return 0.0;
    }
    let rs = mode.recall_points();
    let total: f64 = rs
        .iter()
        .map(|&r| {
            curve
                .points
                .iter()
                .filter(|p| p.recall >= r - 1e-12)
                .map(&value)
                .fold(0.0, f64::max)
        })
        .sum();
    total / rs.len() as f64
}

pub fn average_precision(curve: &PrCurve, mode: InterpolationMode) -> f64 {
    interpolated_mean(curve, mode, |p| p.precision)
}

pub fn average_heading_similarity(curve: &PrCurve, mode: InterpolationMode) -> f64 {
    interpolated_mean(curve, mode, |p| p.heading_precision)
}

/// Fraction of ground truth covered (IoU at or above `threshold`) by at
/// least one of the top-`n` proposals of its frame, for each `n`.
/// Proposals are ranked best first.
pub fn recall_curve(
    proposals: &[Vec<OrientedBox3D>],
    gts: &[Vec<OrientedBox3D>],
    n_values: &[usize],
    iou: impl Fn(&OrientedBox3D, &OrientedBox3D) -> f64,
    threshold: f64,
) -> Result<Vec<(usize, f64)>> {
    if proposals.len() != gts.len() {
        return Err(Error::Parameter(format!("{} proposal frames for {} ground-truth frames", proposals.len(), gts.len())));
    }
    // rank of the first proposal covering each ground truth
    let mut first_hit: Vec<usize> = Vec::new();
    for (props, frame_gts) in proposals.iter().zip(gts) {
        for gt in frame_gts {
            first_hit.push(props.iter().position(|p| iou(p, gt) >= threshold).unwrap_or(usize::MAX));
        }
    }
    let total = first_hit.len();
    Ok(n_values
        .iter()
        .map(|&n| {
            let covered = first_hit.iter().filter(|&&r| r < n).count();
            (n, if total > 0 { covered as f64 / total as f64 } else { 0.0 })
        })
        .collect())
}

pub fn pr_curve_to_csv(curve: &PrCurve) -> String {
    let mut s = String::from("recall,precision\n");
    for p in &curve.points {
        s.push_str(&format!("{},{}\n", p.recall, p.precision));
    }
    s
}

pub fn recall_curve_to_csv(points: &[(usize, f64)]) -> String {
    let mut s = String::from("n,recall\n");
    for (n, r) in points {
        s.push_str(&format!("{n},{r}\n"));
    }
    s
}
