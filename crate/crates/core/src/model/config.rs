//! Network, training and tracking configuration, with the toy and
//! full-scale profiles and the `key = value` loader.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::config::{parse_key_values, Field};
use crate::data::frame::DEFAULT_MEAN_PIXEL;
use crate::error::{DanError, Result};
use crate::tensor::kernels::out_extent;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    BatchNorm2d,
    Relu,
    MaxPool2d,
}

/// One indexed layer. Convolutions carry the batch-norm/ReLU flags of the
/// block they open; the following indices hold those layers themselves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_bn: bool,
    pub has_relu: bool,
}

impl LayerSpec {
    fn simple(kind: LayerKind, c: usize) -> Self {
        LayerSpec {
            kind,
            in_channels: c,
            out_channels: c,
            kernel: 0,
            stride: 1,
            padding: 0,
            has_bn: false,
            has_relu: false,
        }
    }

    pub fn maxpool(c: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec {
            kernel,
            stride,
            padding,
            ..Self::simple(LayerKind::MaxPool2d, c)
        }
    }
}

/// A convolution followed by optional batch norm and ReLU, expanded into
/// separately indexed layers.
pub fn conv_block(inc: usize, outc: usize, k: usize, s: usize, p: usize, bn: bool, relu: bool) -> Vec<LayerSpec> {
    let mut v = vec![LayerSpec {
        kind: LayerKind::Conv2d,
        in_channels: inc,
        out_channels: outc,
        kernel: k,
        stride: s,
        padding: p,
        has_bn: bn,
        has_relu: relu,
    }];
    if bn {
        v.push(LayerSpec::simple(LayerKind::BatchNorm2d, outc));
    }
    if relu {
        v.push(LayerSpec::simple(LayerKind::Relu, outc));
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Backbone,
    Extension,
}

/// Tap the output of `stage[index]` and reduce it to `out_channels`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Reduction {
    pub stage: Stage,
    pub index: usize,
    pub out_channels: usize,
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.stage {
            Stage::Backbone => 'b',
            Stage::Extension => 'e',
        };
        write!(f, "{s}{}:{}", self.index, self.out_channels)
    }
}

impl FromStr for Reduction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        let (layer, out) = s.split_once(':').ok_or_else(|| format!("{s:?} is not `<b|e><index>:<channels>`"))?;
        let stage = match layer.chars().next() {
            Some('b') => Stage::Backbone,
            Some('e') => Stage::Extension,
            _ => return Err(format!("{s:?} must start with b or e")),
        };
        let index = layer[1..].parse().map_err(|_| format!("bad layer index in {s:?}"))?;
        let out_channels = out.trim().parse().map_err(|_| format!("bad channel count in {s:?}"))?;
        if out_channels == 0 {
            return Err(format!("{s:?} reduces to zero channels"));
        }
        Ok(Reduction {
            stage,
            index,
            out_channels,
        })
    }
}

pub fn format_plan(plan: &[Reduction]) -> String {
    plan.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",")
}

pub fn parse_plan(s: &str) -> std::result::Result<Vec<Reduction>, String> {
    s.split(',').map(str::parse).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssembleMode {
    Max,
    Mean,
}

impl FromStr for AssembleMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "max" => Ok(AssembleMode::Max),
            "mean" => Ok(AssembleMode::Mean),
            _ => Err(format!("assemble_mode must be max or mean, got {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DanConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub n_m: usize,
    pub gamma: f32,
    pub backbone: Vec<LayerSpec>,
    pub extension: Vec<LayerSpec>,
    pub reduction_plan: Vec<Reduction>,
    /// Hidden widths of the compression stack, ending in 1.
    pub compression_widths: Vec<usize>,
    /// Number of leading compression layers with batch norm.
    pub compression_bn: usize,
    /// ReLU after the last compression layer.
    pub final_relu: bool,
    pub assemble_mode: AssembleMode,
    pub mean_pixel: [u8; 3],
}

/// Shape of one layer's output: channels and spatial extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl DanConfig {
    /// Desk-scale profile: 128×128 input, 8 objects, 72-dimensional features.
    pub fn toy() -> Self {
        let mut backbone = Vec::new();
        backbone.extend(conv_block(3, 8, 3, 2, 1, true, true)); // 0-2
        backbone.push(LayerSpec::maxpool(8, 2, 2, 0)); // 3
        backbone.extend(conv_block(8, 16, 3, 1, 1, true, true)); // 4-6
        backbone.push(LayerSpec::maxpool(16, 2, 2, 0)); // 7
        backbone.extend(conv_block(16, 32, 3, 1, 1, true, true)); // 8-10
        backbone.push(LayerSpec::maxpool(32, 2, 2, 0)); // 11
        backbone.extend(conv_block(32, 32, 3, 1, 1, true, true)); // 12-14
        let mut extension = conv_block(32, 16, 1, 1, 0, true, true); // 0-2
        extension.extend(conv_block(16, 32, 3, 2, 1, true, true)); // 3-5
        DanConfig {
            input_h: 128,
            input_w: 128,
            n_m: 8,
            gamma: 10.0,
            backbone,
            extension,
            reduction_plan: parse_plan("b10:24,b14:24,e5:24").expect("static plan"),
            compression_widths: vec![64, 32, 16, 8, 1],
            compression_bn: 3,
            final_relu: true,
            assemble_mode: AssembleMode::Max,
            mean_pixel: DEFAULT_MEAN_PIXEL,
        }
    }

    /// Full-scale profile: 900×900 input, 80 objects, 520-dimensional
    /// features. The backbone is a VGG-style stack whose layer indices 16,
    /// 23 and 36 carry 256, 512 and 1024 channels.
    pub fn full() -> Self {
        let mut b = Vec::new();
        let vgg_block = |b: &mut Vec<LayerSpec>, inc: usize, outc: usize, convs: usize| {
            let mut c = inc;
            for _ in 0..convs {
                b.extend(conv_block(c, outc, 3, 1, 1, false, true));
                c = outc;
            }
        };
        vgg_block(&mut b, 3, 64, 2); // 0-3
        b.push(LayerSpec::maxpool(64, 2, 2, 0)); // 4
        vgg_block(&mut b, 64, 128, 2); // 5-8
        b.push(LayerSpec::maxpool(128, 2, 2, 0)); // 9
        vgg_block(&mut b, 128, 256, 3); // 10-15
        b.push(LayerSpec::maxpool(256, 2, 2, 0)); // 16
        vgg_block(&mut b, 256, 512, 3); // 17-22
        b.push(LayerSpec::maxpool(512, 2, 2, 0)); // 23
        vgg_block(&mut b, 512, 512, 3); // 24-29
        b.push(LayerSpec::maxpool(512, 3, 1, 1)); // 30
        b.extend(conv_block(512, 1024, 3, 1, 1, false, true)); // 31-32
        b.extend(conv_block(1024, 1024, 1, 1, 0, false, true)); // 33-34
        b.extend(conv_block(1024, 1024, 1, 1, 0, false, true)); // 35-36

        let mut e = Vec::new();
        let rows = [
            (1024, 256, 1, 1, 0),
            (256, 512, 3, 2, 1),
            (512, 128, 1, 1, 0),
            (128, 256, 3, 2, 1),
            (256, 128, 1, 1, 0),
            (128, 256, 3, 2, 1),
            (256, 128, 1, 1, 0),
            (128, 256, 3, 2, 1),
            (256, 128, 1, 1, 0),
            (128, 256, 3, 2, 1),
            (256, 128, 1, 1, 0),
            (128, 256, 3, 2, 1),
        ];
        for (i, o, k, s, p) in rows {
            e.extend(conv_block(i, o, k, s, p, true, true));
        }
        DanConfig {
            input_h: 900,
            input_w: 900,
            n_m: 80,
            gamma: 10.0,
            backbone: b,
            extension: e,
            reduction_plan: parse_plan("b16:60,b23:80,b36:100,e5:80,e11:60,e17:50,e23:40,e29:30,e35:20")
                .expect("static plan"),
            compression_widths: vec![512, 256, 128, 64, 1],
            compression_bn: 3,
            final_relu: true,
            assemble_mode: AssembleMode::Max,
            mean_pixel: DEFAULT_MEAN_PIXEL,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.reduction_plan.iter().map(|r| r.out_channels).sum()
    }

    pub fn compression(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        let mut c = 2 * self.feature_dim();
        let last = self.compression_widths.len().saturating_sub(1);
        for (i, &w) in self.compression_widths.iter().enumerate() {
            let relu = i < last || self.final_relu;
            out.extend(conv_block(c, w, 1, 1, 0, i < self.compression_bn, relu));
            c = w;
        }
        out
    }

    fn stage_shapes(layers: &[LayerSpec], input: MapShape, stage: &str) -> Result<Vec<MapShape>> {
        let mut cur = input;
        let mut out = Vec::with_capacity(layers.len());
        for (i, l) in layers.iter().enumerate() {
            if l.in_channels != cur.channels {
                return Err(DanError::Config(format!(
                    "{stage} layer {i} expects {} channels, receives {}",
                    l.in_channels, cur.channels
                )));
            }
            cur = match l.kind {
                LayerKind::Conv2d | LayerKind::MaxPool2d => {
                    let k = l.kernel;
                    if l.stride == 0 || k == 0 {
                        return Err(DanError::Config(format!("{stage} layer {i} has zero kernel or stride")));
                    }
                    match (
                        out_extent(cur.height, k, l.stride, l.padding),
                        out_extent(cur.width, k, l.stride, l.padding),
                    ) {
                        (Some(h), Some(w)) => MapShape {
                            channels: l.out_channels,
                            height: h,
                            width: w,
                        },
                        _ => {
                            return Err(DanError::Config(format!(
                                "{stage} layer {i}: {k}x{k} window does not fit {}x{}",
                                cur.height, cur.width
                            )))
                        }
                    }
                }
                LayerKind::BatchNorm2d | LayerKind::Relu => cur,
            };
            out.push(cur);
        }
        Ok(out)
    }

    /// Output shapes of every backbone and extension layer.
    pub fn layer_shapes(&self) -> Result<(Vec<MapShape>, Vec<MapShape>)> {
        let input = MapShape {
            channels: 3,
            height: self.input_h,
            width: self.input_w,
        };
        let b = Self::stage_shapes(&self.backbone, input, "backbone")?;
        let last = *b
            .last()
            .ok_or_else(|| DanError::Config("backbone has no layers".into()))?;
        let e = Self::stage_shapes(&self.extension, last, "extension")?;
        Ok((b, e))
    }

    /// Shape of the map tapped by a reduction.
    pub fn tap_shape(&self, r: &Reduction) -> Result<MapShape> {
        let (b, e) = self.layer_shapes()?;
        let list = match r.stage {
            Stage::Backbone => &b,
            Stage::Extension => &e,
        };
        list.get(r.index)
            .copied()
            .ok_or_else(|| DanError::Config(format!("reduction {r} references a missing layer")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_m == 0 {
            return Err(DanError::Config("n_m must be positive".into()));
        }
        if !self.gamma.is_finite() {
            return Err(DanError::Config("gamma must be finite".into()));
        }
        if self.reduction_plan.is_empty() {
            return Err(DanError::Config("reduction_plan is empty".into()));
        }
        for r in &self.reduction_plan {
            self.tap_shape(r)?;
        }
        if self.compression_widths.last() != Some(&1) {
            return Err(DanError::Config("compression must end with one channel".into()));
        }
        if self.compression_widths.contains(&0) {
            return Err(DanError::Config("compression widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (1-based) from which the rate is divided by ten.
    pub lr_drops: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Largest frame gap of a training pair.
    pub n_v: u32,
    pub pairs: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drops: vec![50, 80, 100],
            epochs: 120,
            batch_size: 8,
            n_v: 30,
            pairs: 2000,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drops.iter().filter(|&&d| epoch >= d).count();
        self.lr / 10f64.powi(drops as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrackConfig {
    pub delta_b: usize,
    pub delta_w: usize,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig { delta_b: 15, delta_w: 12 }
    }
}

/// Everything a run needs, loadable from a `key = value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: DanConfig,
    pub train: TrainConfig,
    pub track: TrackConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: DanConfig::toy(),
            train: TrainConfig::default(),
            track: TrackConfig::default(),
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "profile",
    "n_m",
    "gamma",
    "input_h",
    "input_w",
    "assemble_mode",
    "reduction_plan",
    "compression_widths",
    "compression_bn",
    "final_relu",
    "mean_pixel",
    "lr",
    "momentum",
    "weight_decay",
    "lr_drops",
    "epochs",
    "batch_size",
    "n_v",
    "pairs",
    "augment",
    "delta_b",
    "delta_w",
];

impl RunConfig {
    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let entries = parse_key_values(text, path)?;
        let mut cfg = RunConfig::default();
        if let Some(e) = entries.iter().find(|e| e.key == "profile") {
            cfg.model = match e.value.as_str() {
                "toy" => DanConfig::toy(),
                "full" => DanConfig::full(),
                v => return Err(Field { entry: e, path }.error(format!("unknown profile {v:?}"))),
            };
        }
        for entry in &entries {
            let f = Field { entry, path };
            let m = &mut cfg.model;
            let t = &mut cfg.train;
            match entry.key.as_str() {
                "profile" => {}
                "n_m" => m.n_m = f.parse()?,
                "gamma" => m.gamma = f.parse()?,
                "input_h" => m.input_h = f.parse()?,
                "input_w" => m.input_w = f.parse()?,
                "assemble_mode" => m.assemble_mode = entry.value.parse().map_err(|e: String| f.error(e))?,
                "reduction_plan" => m.reduction_plan = parse_plan(&entry.value).map_err(|e| f.error(e))?,
                "compression_widths" => m.compression_widths = f.list()?,
                "compression_bn" => m.compression_bn = f.parse()?,
                "final_relu" => m.final_relu = f.bool()?,
                "mean_pixel" => {
                    let v: Vec<u8> = f.list()?;
                    m.mean_pixel = v.try_into().map_err(|_| f.error("expected three values"))?;
                }
                "lr" => t.lr = f.parse()?,
                "momentum" => t.momentum = f.parse()?,
                "weight_decay" => t.weight_decay = f.parse()?,
                "lr_drops" => t.lr_drops = f.list()?,
                "epochs" => t.epochs = f.parse()?,
                "batch_size" => t.batch_size = f.parse()?,
                "n_v" => t.n_v = f.parse()?,
                "pairs" => t.pairs = f.parse()?,
                "augment" => t.augment = f.bool()?,
                "delta_b" => cfg.track.delta_b = f.parse()?,
                "delta_w" => cfg.track.delta_w = f.parse()?,
                k => return Err(f.error(format!("unknown key {k:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.batch_size == 0 {
            return Err(DanError::Config("batch_size must be positive".into()));
        }
        if self.track.delta_b == 0 {
            return Err(DanError::Config("delta_b must be positive".into()));
        }
        Ok(())
    }
}
