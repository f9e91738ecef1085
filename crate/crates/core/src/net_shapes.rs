//! Forward-only shape and cost accounting for the two-stage detector, plus
//! reference numeric forwards for the decoder fusion step and the fully
//! connected heads, and the loss functions.
//!
//! Tensors are `(height, width, channels)`. Fully connected layers flatten
//! their input row-major with channels innermost and produce `(1, 1, n)`.
//! One FLOP is one multiply or one add; pooling, concatenation, cropping and
//! fusion are not counted.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geom::FeatureMap;

pub const DECODER_DEPTH: usize = 32;
pub const ENCODER_DEPTH: usize = 256;
pub const RPN_CROP: usize = 3;
pub const SECOND_STAGE_CROP: usize = 7;
pub const SECOND_STAGE_FC: usize = 2048;
pub const RPN_FC: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerRef {
    pub branch: String,
    pub index: usize,
}

impl fmt::Display for LayerRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.branch, self.index)
    }
}

impl FromStr for LayerRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (branch, index) = s
            .rsplit_once('.')
            .ok_or_else(|| Error::Parameter(format!("layer reference {s:?} is not <branch>.<index>")))?;
        let index = index.parse().map_err(|_| Error::Parameter(format!("bad layer index in {s:?}")))?;
        Ok(Self { branch: branch.to_string(), index })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    /// 2x2 kernel, stride 2.
    ConvTranspose2x,
    MaxPool2x,
    /// Channel concatenation with the output of an earlier layer.
    Concat { skip: LayerRef },
    Fc,
    CropResize { height: usize, width: usize },
    FuseMean,
}

impl LayerKind {
    fn kernel(&self) -> Option<usize> {
        match self {
            LayerKind::Conv3x3 => Some(3),
            LayerKind::Conv1x1 => Some(1),
            LayerKind::ConvTranspose2x => Some(2),
            _ => None,
        }
    }

    fn keyword(&self) -> &'static str {
        match self {
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::Conv1x1 => "conv1x1",
            LayerKind::ConvTranspose2x => "conv_transpose2x",
            LayerKind::MaxPool2x => "maxpool2x",
            LayerKind::Concat { .. } => "concat",
            LayerKind::Fc => "fc",
            LayerKind::CropResize { .. } => "crop_resize",
            LayerKind::FuseMean => "fuse_mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        Self { kind, in_channels, out_channels, stride: 1 }
    }

    pub fn conv3x3(cin: usize, cout: usize) -> Self {
        Self::new(LayerKind::Conv3x3, cin, cout)
    }

    pub fn conv1x1(cin: usize, cout: usize) -> Self {
        Self::new(LayerKind::Conv1x1, cin, cout)
    }

    pub fn conv_transpose2x(cin: usize, cout: usize) -> Self {
        Self::new(LayerKind::ConvTranspose2x, cin, cout)
    }

    pub fn maxpool2x(c: usize) -> Self {
        Self::new(LayerKind::MaxPool2x, c, c)
    }

    pub fn concat(cin: usize, skip_channels: usize, branch: &str, index: usize) -> Self {
        Self::new(LayerKind::Concat { skip: LayerRef { branch: branch.into(), index } }, cin, cin + skip_channels)
    }

    pub fn fc(n_in: usize, n_out: usize) -> Self {
        Self::new(LayerKind::Fc, n_in, n_out)
    }

    pub fn crop_resize(c: usize, height: usize, width: usize) -> Self {
        Self::new(LayerKind::CropResize { height, width }, c, c)
    }

    pub fn fuse_mean(c: usize) -> Self {
        Self::new(LayerKind::FuseMean, c, c)
    }

    pub fn parameters(&self) -> u64 {
        let (cin, cout) = (self.in_channels as u64, self.out_channels as u64);
        match self.kind {
            LayerKind::Fc => cin * cout + cout,
            _ => match self.kind.kernel() {
                Some(k) => (k * k) as u64 * cin * cout + cout,
                None => 0,
            },
        }
    }

    fn flops(&self, output: Shape) -> u64 {
        let (cin, cout) = (self.in_channels as u64, self.out_channels as u64);
        match self.kind {
            LayerKind::Fc => 2 * cin * cout,
            LayerKind::ConvTranspose2x => 2 * cin * cout * output.spatial(),
            _ => match self.kind.kernel() {
                Some(k) => 2 * (k * k) as u64 * cin * cout * output.spatial(),
                None => 0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    fn spatial(&self) -> u64 {
        (self.height * self.width) as u64
    }

    pub fn elements(&self) -> usize {
        self.height * self.width * self.channels
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BranchInput {
    Network,
    Branch(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Branch {
    pub name: String,
    pub input: BranchInput,
    pub layers: Vec<LayerSpec>,
}

impl Branch {
    pub fn new(name: &str, input: BranchInput, layers: Vec<LayerSpec>) -> Self {
        Self { name: name.into(), input, layers }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NetworkConfig {
    pub branches: Vec<Branch>,
}

impl NetworkConfig {
    /// Halved VGG-16 cut at conv-4 as encoder, three upsampling stages as
    /// decoder, a 1x1 bottleneck feeding the proposal heads, and a shared
    /// three-layer trunk for the second stage.
    pub fn avod_default(input_depth: usize, num_classes: usize) -> Self {
        use LayerSpec as L;
        let encoder = vec![
            L::conv3x3(input_depth, 32),
            L::conv3x3(32, 32),
            L::maxpool2x(32),
            L::conv3x3(32, 64),
            L::conv3x3(64, 64),
            L::maxpool2x(64),
            L::conv3x3(64, 128),
            L::conv3x3(128, 128),
            L::conv3x3(128, 128),
            L::maxpool2x(128),
            L::conv3x3(128, 256),
            L::conv3x3(256, 256),
            L::conv3x3(256, ENCODER_DEPTH),
        ];
        let decoder = vec![
            L::conv_transpose2x(ENCODER_DEPTH, 128),
            L::concat(128, 128, "encoder", 8),
            L::conv3x3(256, 64),
            L::conv_transpose2x(64, 64),
            L::concat(64, 64, "encoder", 4),
            L::conv3x3(128, 32),
            L::conv_transpose2x(32, 32),
            L::concat(32, 32, "encoder", 1),
            L::conv3x3(64, DECODER_DEPTH),
        ];
        let rpn_in = RPN_CROP * RPN_CROP;
        let second_in = SECOND_STAGE_CROP * SECOND_STAGE_CROP * DECODER_DEPTH;
        let from = |b: &str| BranchInput::Branch(b.into());
        Self {
            branches: vec![
                Branch::new("encoder", BranchInput::Network, encoder),
                Branch::new("decoder", from("encoder"), decoder),
                Branch::new("rpn_reduce", from("decoder"), vec![L::conv1x1(DECODER_DEPTH, 1)]),
                Branch::new("rpn_crop", from("rpn_reduce"), vec![L::crop_resize(1, RPN_CROP, RPN_CROP), L::fuse_mean(1)]),
                Branch::new("rpn_objectness", from("rpn_crop"), vec![L::fc(rpn_in, RPN_FC), L::fc(RPN_FC, RPN_FC), L::fc(RPN_FC, 2)]),
                Branch::new("rpn_regression", from("rpn_crop"), vec![L::fc(rpn_in, RPN_FC), L::fc(RPN_FC, RPN_FC), L::fc(RPN_FC, 6)]),
                Branch::new(
                    "second_crop",
                    from("decoder"),
                    vec![L::crop_resize(DECODER_DEPTH, SECOND_STAGE_CROP, SECOND_STAGE_CROP), L::fuse_mean(DECODER_DEPTH)],
                ),
                Branch::new(
                    "second_fc",
                    from("second_crop"),
                    vec![L::fc(second_in, SECOND_STAGE_FC), L::fc(SECOND_STAGE_FC, SECOND_STAGE_FC), L::fc(SECOND_STAGE_FC, SECOND_STAGE_FC)],
                ),
                Branch::new("box_out", from("second_fc"), vec![L::fc(SECOND_STAGE_FC, 10)]),
                Branch::new("orientation_out", from("second_fc"), vec![L::fc(SECOND_STAGE_FC, 2)]),
                Branch::new("class_out", from("second_fc"), vec![L::fc(SECOND_STAGE_FC, num_classes)]),
            ],
        }
    }

    pub fn branch(&self, name: &str) -> Option<&Branch> {
        self.branches.iter().find(|b| b.name == name)
    }

    /// Branches of `self` followed by those of `other`.
    pub fn concat(&self, other: &NetworkConfig) -> NetworkConfig {
        NetworkConfig { branches: self.branches.iter().chain(&other.branches).cloned().collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub branch: String,
    pub index: usize,
    pub spec: LayerSpec,
    pub input: Shape,
    pub output: Shape,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeReport {
    pub input: Shape,
    pub layers: Vec<LayerReport>,
    pub branch_outputs: Vec<(String, Shape)>,
}

impl ShapeReport {
    pub fn output_of(&self, branch: &str) -> Option<Shape> {
        self.branch_outputs.iter().find(|(n, _)| n == branch).map(|&(_, s)| s)
    }

    /// Output of the last branch, or the input when there are none.
    pub fn final_output(&self) -> Shape {
        self.branch_outputs.last().map_or(self.input, |&(_, s)| s)
    }

    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.flops).sum()
    }
}

fn halve(dim: usize, what: &str) -> Result<usize> {
    if !dim.is_multiple_of(2) {
        return Err(Error::Parameter(format!("{what} on odd extent {dim}")));
    }
    Ok(dim / 2)
}

fn layer_output(spec: &LayerSpec, cur: Shape, outputs: &[LayerReport]) -> Result<Shape> {
    let mismatch = |expected: usize| {
        Err(Error::Parameter(format!("{} expects {expected} input channels, got {}", spec.kind.keyword(), cur.channels)))
    };
    if spec.kind != LayerKind::Fc && spec.in_channels != cur.channels {
        return mismatch(spec.in_channels);
    }
    let stride = spec.stride.max(1);
    let strided = |d: usize| -> Result<usize> {
        if !d.is_multiple_of(stride) {
            return Err(Error::Parameter(format!("stride {stride} does not divide extent {d}")));
        }
        Ok(d / stride)
    };
    Ok(match &spec.kind {
        LayerKind::Conv3x3 | LayerKind::Conv1x1 => Shape::new(strided(cur.height)?, strided(cur.width)?, spec.out_channels),
        LayerKind::ConvTranspose2x => Shape::new(cur.height * 2, cur.width * 2, spec.out_channels),
        LayerKind::MaxPool2x => Shape::new(halve(cur.height, "max pooling")?, halve(cur.width, "max pooling")?, cur.channels),
        LayerKind::Concat { skip } => {
            let s = outputs
                .iter()
                .find(|l| l.branch == skip.branch && l.index == skip.index)
                .map(|l| l.output)
                .ok_or_else(|| Error::Parameter(format!("concat refers to unknown or later layer {skip}")))?;
            if (s.height, s.width) != (cur.height, cur.width) {
                return Err(Error::Parameter(format!("concat of {cur} with {skip} of shape {s}")));
            }
            if spec.out_channels != cur.channels + s.channels {
                return Err(Error::Parameter(format!(
                    "concat output {} does not match {} + {}",
                    spec.out_channels, cur.channels, s.channels
                )));
            }
            Shape::new(cur.height, cur.width, spec.out_channels)
        }
        LayerKind::Fc => {
            if cur.elements() != spec.in_channels {
                return Err(Error::Parameter(format!("fc expects {} inputs, got {} ({cur})", spec.in_channels, cur.elements())));
            }
            Shape::new(1, 1, spec.out_channels)
        }
        LayerKind::CropResize { height, width } => Shape::new(*height, *width, cur.channels),
        LayerKind::FuseMean => cur,
    })
}

/// Shapes, parameters and FLOPs of every layer for an `(M, N, D)` input.
pub fn propagate_shapes(config: &NetworkConfig, input: Shape) -> Result<ShapeReport> {
    let mut report = ShapeReport { input, layers: Vec::new(), branch_outputs: Vec::new() };
    for branch in &config.branches {
        if report.output_of(&branch.name).is_some() {
            return Err(Error::Parameter(format!("duplicate branch {:?}", branch.name)));
        }
        let mut cur = match &branch.input {
            BranchInput::Network => input,
            BranchInput::Branch(name) => report
                .output_of(name)
                .ok_or_else(|| Error::Parameter(format!("branch {:?} reads unknown or later branch {name:?}", branch.name)))?,
        };
        for (index, spec) in branch.layers.iter().enumerate() {
            if spec.in_channels == 0 || spec.out_channels == 0 {
                return Err(Error::Parameter(format!("{}.{index} has zero channels", branch.name)));
            }
            let output = layer_output(spec, cur, &report.layers)
                .map_err(|e| Error::Parameter(format!("{}.{index}: {e}", branch.name)))?;
            report.layers.push(LayerReport {
                branch: branch.name.clone(),
                index,
                spec: spec.clone(),
                input: cur,
                output,
                params: spec.parameters(),
                flops: spec.flops(output),
            });
            cur = output;
        }
        report.branch_outputs.push((branch.name.clone(), cur));
    }
    Ok(report)
}

pub fn count_parameters(config: &NetworkConfig) -> u64 {
    config.branches.iter().flat_map(|b| &b.layers).map(LayerSpec::parameters).sum()
}

pub fn count_flops(config: &NetworkConfig, input: Shape) -> Result<u64> {
    Ok(propagate_shapes(config, input)?.total_flops())
}

/// Bytes needed to hold `n_rois` crops of `crop` x `depth` elements.
pub fn memory_estimate(n_rois: u64, crop: (u64, u64), depth: u64, bytes_per_element: u64) -> Result<u64> {
    let factors = [n_rois, crop.0, crop.1, depth, bytes_per_element];
    if factors.contains(&0) {
        return Err(Error::Parameter(format!("memory estimate needs positive arguments, got {factors:?}")));
    }
    factors
        .iter()
        .try_fold(1u64, |acc, &f| acc.checked_mul(f))
        .ok_or_else(|| Error::Parameter("memory estimate overflows u64".into()))
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.kind.keyword(), self.in_channels, self.out_channels)?;
        match &self.kind {
            LayerKind::Concat { skip } => write!(f, " {skip}")?,
            LayerKind::CropResize { height, width } => write!(f, " {height}x{width}")?,
            _ => {}
        }
        if self.stride != 1 {
            write!(f, " stride={}", self.stride)?;
        }
        Ok(())
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let tokens: Vec<&str> = s.split_whitespace().collect();
        if tokens.len() < 3 {
            return Err(Error::Parameter(format!("layer {s:?} needs <kind> <in> <out>")));
        }
        let num = |t: &str| t.parse::<usize>().map_err(|_| Error::Parameter(format!("bad channel count {t:?} in {s:?}")));
        let (cin, cout) = (num(tokens[1])?, num(tokens[2])?);
        let mut rest = tokens[3..].to_vec();
        let mut stride = 1;
        if let Some(pos) = rest.iter().position(|t| t.starts_with("stride=")) {
            stride = num(&rest.remove(pos)["stride=".len()..])?;
        }
        let extra = |n: usize| -> Result<()> {
            if rest.len() != n {
                return Err(Error::Parameter(format!("layer {s:?} has {} extra fields, expected {n}", rest.len())));
            }
            Ok(())
        };
        let kind = match tokens[0] {
            "conv3x3" => LayerKind::Conv3x3,
            "conv1x1" => LayerKind::Conv1x1,
            "conv_transpose2x" => LayerKind::ConvTranspose2x,
            "maxpool2x" => LayerKind::MaxPool2x,
            "fc" => LayerKind::Fc,
            "fuse_mean" => LayerKind::FuseMean,
            "concat" => {
                extra(1)?;
                LayerKind::Concat { skip: rest[0].parse()? }
            }
            "crop_resize" => {
                extra(1)?;
                let (h, w) = rest[0]
                    .split_once('x')
                    .ok_or_else(|| Error::Parameter(format!("crop size {:?} is not <h>x<w>", rest[0])))?;
                LayerKind::CropResize { height: num(h)?, width: num(w)? }
            }
            other => return Err(Error::Parameter(format!("unknown layer kind {other:?}"))),
        };
        if !matches!(kind, LayerKind::Concat { .. } | LayerKind::CropResize { .. }) {
            extra(0)?;
        }
        if stride == 0 {
            return Err(Error::Parameter(format!("zero stride in {s:?}")));
        }
        Ok(LayerSpec { kind, in_channels: cin, out_channels: cout, stride })
    }
}

/// Flat text form: `branch.<name> = input|<branch>` lines in order, then
/// `layer.<name>.<i> = <kind> <in> <out> [extra] [stride=s]`.
pub fn config_to_text(config: &NetworkConfig) -> String {
    let mut s = String::new();
    for b in &config.branches {
        let input = match &b.input {
            BranchInput::Network => "input",
            BranchInput::Branch(n) => n.as_str(),
        };
        s.push_str(&format!("branch.{} = {input}\n", b.name));
    }
    for b in &config.branches {
        for (i, l) in b.layers.iter().enumerate() {
            s.push_str(&format!("layer.{}.{i} = {l}\n", b.name));
        }
    }
    s
}

pub fn config_from_text(text: &str) -> Result<NetworkConfig> {
    let mut branches: Vec<Branch> = Vec::new();
    let mut layers: Vec<(String, usize, LayerSpec, usize)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| Error::MalformedLine { line: n + 1, message };
        let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("expected key = value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if let Some(name) = key.strip_prefix("branch.") {
            if branches.iter().any(|b| b.name == name) {
                return Err(bad(format!("branch {name:?} declared twice")));
            }
            let input = if value == "input" { BranchInput::Network } else { BranchInput::Branch(value.to_string()) };
            branches.push(Branch::new(name, input, Vec::new()));
        } else if let Some(rest) = key.strip_prefix("layer.") {
            let r: LayerRef = rest.parse().map_err(|e: Error| bad(e.to_string()))?;
            let spec: LayerSpec = value.parse().map_err(|e: Error| bad(e.to_string()))?;
            layers.push((r.branch, r.index, spec, n + 1));
        } else {
            return Err(bad(format!("unknown key {key:?}")));
        }
    }
    layers.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
    for (branch, index, spec, line) in layers {
        let b = branches
            .iter_mut()
            .find(|b| b.name == branch)
            .ok_or_else(|| Error::MalformedLine { line, message: format!("layer for undeclared branch {branch:?}") })?;
        if index != b.layers.len() {
            return Err(Error::MalformedLine { line, message: format!("layer {branch}.{index} breaks the index sequence") });
        }
        b.layers.push(spec);
    }
    Ok(NetworkConfig { branches })
}

// ---------------------------------------------------------------------------
// Numeric forwards

/// Square convolution with zero "same" padding and stride 1. Weights are
/// laid out `[ky][kx][cin][cout]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvWeights {
    pub fn from_fn(kernel: usize, cin: usize, cout: usize, mut f: impl FnMut() -> f64) -> Self {
        Self {
            kernel,
            in_channels: cin,
            out_channels: cout,
            weights: (0..kernel * kernel * cin * cout).map(|_| f()).collect(),
            bias: (0..cout).map(|_| f()).collect(),
        }
    }

    pub fn zeros(kernel: usize, cin: usize, cout: usize) -> Self {
        Self::from_fn(kernel, cin, cout, || 0.0)
    }

    fn check(&self) -> Result<()> {
        let k = self.kernel;
        if k.is_multiple_of(2)
            || self.weights.len() != k * k * self.in_channels * self.out_channels
            || self.bias.len() != self.out_channels
        {
            return Err(Error::Parameter(format!(
                "convolution weights inconsistent with {k}x{k} {} -> {}",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check()?;
        if x.depth != self.in_channels {
            return Err(Error::Parameter(format!("convolution expects {} channels, got {}", self.in_channels, x.depth)));
        }
        let (k, cin, cout) = (self.kernel, self.in_channels, self.out_channels);
        let pad = (k / 2) as isize;
        let mut out = FeatureMap::zeros(x.height, x.width, cout);
        for r in 0..x.height {
            for c in 0..x.width {
                let acc = &mut out.data[(r * x.width + c) * cout..][..cout];
                acc.copy_from_slice(&self.bias);
                for ky in 0..k {
                    let rr = r as isize + ky as isize - pad;
                    if rr < 0 || rr >= x.height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let cc = c as isize + kx as isize - pad;
                        if cc < 0 || cc >= x.width as isize {
                            continue;
                        }
                        let px = &x.data[(rr as usize * x.width + cc as usize) * cin..][..cin];
                        let w = &self.weights[(ky * k + kx) * cin * cout..][..cin * cout];
                        for (ci, &v) in px.iter().enumerate() {
                            for (a, &wv) in acc.iter_mut().zip(&w[ci * cout..(ci + 1) * cout]) {
                                *a += v * wv;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// 2x2 stride-2 transposed convolution, weights `[ky][kx][cin][cout]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTransposeWeights {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvTransposeWeights {
    pub fn from_fn(cin: usize, cout: usize, mut f: impl FnMut() -> f64) -> Self {
        Self {
            in_channels: cin,
            out_channels: cout,
            weights: (0..4 * cin * cout).map(|_| f()).collect(),
            bias: (0..cout).map(|_| f()).collect(),
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let (cin, cout) = (self.in_channels, self.out_channels);
        if self.weights.len() != 4 * cin * cout || self.bias.len() != cout || x.depth != cin {
            return Err(Error::Parameter(format!(
                "transposed convolution {cin} -> {cout} applied to depth {}",
                x.depth
            )));
        }
        let mut out = FeatureMap::zeros(x.height * 2, x.width * 2, cout);
        for r in 0..x.height {
            for c in 0..x.width {
                let px = &x.data[(r * x.width + c) * cin..][..cin];
                for ky in 0..2 {
                    for kx in 0..2 {
                        let base = ((2 * r + ky) * out.width + 2 * c + kx) * cout;
                        let acc = &mut out.data[base..base + cout];
                        acc.copy_from_slice(&self.bias);
                        let w = &self.weights[(ky * 2 + kx) * cin * cout..][..cin * cout];
                        for (ci, &v) in px.iter().enumerate() {
                            for (a, &wv) in acc.iter_mut().zip(&w[ci * cout..(ci + 1) * cout]) {
                                *a += v * wv;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderFuseWeights {
    pub upsample: ConvTransposeWeights,
    /// 3x3 convolution over `[upsampled, skip]` channels.
    pub fuse: ConvWeights,
}

/// Upsample `low` 2x, concatenate `skip` along channels, mix with a 3x3
/// convolution. No activation.
pub fn decoder_fuse_forward(low: &FeatureMap, skip: &FeatureMap, w: &DecoderFuseWeights) -> Result<FeatureMap> {
    if (skip.height, skip.width) != (low.height * 2, low.width * 2) {
        return Err(Error::Parameter(format!(
            "skip {:?} is not twice the spatial size of {:?}",
            skip.shape(),
            low.shape()
        )));
    }
    if w.fuse.kernel != 3 {
        return Err(Error::Parameter(format!("fusion kernel must be 3, got {}", w.fuse.kernel)));
    }
    let up = w.upsample.forward(low)?;
    let depth = up.depth + skip.depth;
    let mut cat = FeatureMap::zeros(up.height, up.width, depth);
    for (i, px) in cat.data.chunks_exact_mut(depth).enumerate() {
        px[..up.depth].copy_from_slice(&up.data[i * up.depth..(i + 1) * up.depth]);
        px[up.depth..].copy_from_slice(&skip.data[i * skip.depth..(i + 1) * skip.depth]);
    }
    w.fuse.forward(&cat)
}

/// Dense layer, weights `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FcLayer {
    pub fn from_fn(n_in: usize, n_out: usize, mut f: impl FnMut() -> f64) -> Self {
        Self { n_in, n_out, weights: (0..n_in * n_out).map(|_| f()).collect(), bias: (0..n_out).map(|_| f()).collect() }
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self::from_fn(n_in, n_out, || 0.0)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_in || self.weights.len() != self.n_in * self.n_out || self.bias.len() != self.n_out {
            return Err(Error::Parameter(format!("fc {} -> {} applied to {} inputs", self.n_in, self.n_out, x.len())));
        }
        Ok(self
            .weights
            .chunks_exact(self.n_in)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect())
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}

/// Hidden layers with ReLU, last layer linear.
fn mlp_forward(layers: &[FcLayer], x: &[f64]) -> Result<Vec<f64>> {
    let mut cur = x.to_vec();
    for (i, l) in layers.iter().enumerate() {
        cur = l.forward(&cur)?;
        if i + 1 < layers.len() {
            relu_in_place(&mut cur);
        }
    }
    Ok(cur)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpnHeadWeights {
    pub objectness: Vec<FcLayer>,
    pub regression: Vec<FcLayer>,
}

impl RpnHeadWeights {
    pub fn from_fn(crop: (usize, usize, usize), hidden: &[usize], mut f: impl FnMut() -> f64) -> Self {
        let n_in = crop.0 * crop.1 * crop.2;
        let mut branch = |n_out: usize| {
            let mut sizes = vec![n_in];
            sizes.extend_from_slice(hidden);
            sizes.push(n_out);
            sizes.windows(2).map(|w| FcLayer::from_fn(w[0], w[1], &mut f)).collect::<Vec<_>>()
        };
        let objectness = branch(2);
        let regression = branch(6);
        Self { objectness, regression }
    }
}

/// Objectness logits and axis-aligned anchor offsets for one fused crop.
pub fn rpn_head_forward(fused: &FeatureMap, w: &RpnHeadWeights) -> Result<([f64; 2], [f64; 6])> {
    let obj = mlp_forward(&w.objectness, &fused.data)?;
    let reg = mlp_forward(&w.regression, &fused.data)?;
    let obj: [f64; 2] = obj.try_into().map_err(|v: Vec<f64>| Error::Parameter(format!("objectness head yields {} values", v.len())))?;
    let reg: [f64; 6] = reg.try_into().map_err(|v: Vec<f64>| Error::Parameter(format!("regression head yields {} values", v.len())))?;
    Ok((obj, reg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondStageWeights {
    pub trunk: Vec<FcLayer>,
    pub box_out: FcLayer,
    pub orientation_out: FcLayer,
    pub class_out: FcLayer,
}

impl SecondStageWeights {
    pub fn from_fn(crop: (usize, usize, usize), hidden: &[usize], num_classes: usize, mut f: impl FnMut() -> f64) -> Self {
        let mut sizes = vec![crop.0 * crop.1 * crop.2];
        sizes.extend_from_slice(hidden);
        let trunk = sizes.windows(2).map(|w| FcLayer::from_fn(w[0], w[1], &mut f)).collect();
        let last = *sizes.last().expect("non-empty");
        Self {
            trunk,
            box_out: FcLayer::from_fn(last, 10, &mut f),
            orientation_out: FcLayer::from_fn(last, 2, &mut f),
            class_out: FcLayer::from_fn(last, num_classes, &mut f),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondStageOutput {
    pub boxes: [f64; 10],
    pub orientation: [f64; 2],
    pub class_scores: Vec<f64>,
}

/// ReLU trunk then three linear heads.
pub fn second_stage_head_forward(fused: &FeatureMap, w: &SecondStageWeights) -> Result<SecondStageOutput> {
    let mut h = fused.data.clone();
    for l in &w.trunk {
        h = l.forward(&h)?;
        relu_in_place(&mut h);
    }
    let boxes = w.box_out.forward(&h)?;
    let orientation = w.orientation_out.forward(&h)?;
    Ok(SecondStageOutput {
        boxes: boxes.try_into().map_err(|v: Vec<f64>| Error::Parameter(format!("box head yields {} values", v.len())))?,
        orientation: orientation
            .try_into()
            .map_err(|v: Vec<f64>| Error::Parameter(format!("orientation head yields {} values", v.len())))?,
        class_scores: w.class_out.forward(&h)?,
    })
}

// ---------------------------------------------------------------------------
// Losses

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_sum(xs: &[f64]) -> f64 {
    xs.iter().map(|&x| smooth_l1(x)).sum()
}

pub fn cross_entropy(probabilities: &[f64], target: usize) -> Result<f64> {
    if target >= probabilities.len() {
        return Err(Error::Parameter(format!("target {target} outside {} classes", probabilities.len())));
    }
    let sum: f64 = probabilities.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || probabilities.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::Parameter(format!("{probabilities:?} is not a probability vector")));
    }
    Ok(0.0 - probabilities[target].ln())
}
