//! Architecture IR for the Xception family, the SqueezeNet-style rewrite
//! passes that shrink it, and the per-layer parameter accountant.
//!
//! A graph is an ordered list of [`Module`]s, each tagged with the flow it
//! belongs to, plus residual links between module boundaries and a
//! classification head. Boundary `k` is the input of module `k`; the output
//! of the last module is boundary `modules.len() + 1`.

mod infer;
mod params;
pub mod passes;
mod text;
mod xception;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Padding, TensorError};

pub use infer::{reinfer_channels, validate, FeatureShape, ShapeRow, ShapeTable};
pub use params::{count_params, group_thousands, LayerParams, ParamReport};
pub use passes::{
    apply_channel_reduction, apply_strategy1, rewrite_fire_modules, ChannelReduction, Pass, PassRegistry,
};
pub use xception::{
    build_proposed, build_xception_baseline, calibrate_proposed, Calibration, BASELINE_WIDTHS,
    PROPOSED_ENTRY_DIVISOR, PROPOSED_MIDDLE_WIDTH, TARGET_PARAMS, TARGET_TOLERANCE,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArchError {
    #[error("layer `{id}`: {detail}")]
    IllegalLayer { id: String, detail: String },
    #[error("layer `{id}` declares {declared} input channels but receives {inferred}")]
    ChannelMismatch {
        id: String,
        declared: usize,
        inferred: usize,
    },
    #[error("layer `{id}`: {source}")]
    Shape { id: String, source: TensorError },
    #[error("residual from boundary {from} to boundary {to} joins main branch {main} with skip branch {skip}")]
    ResidualMismatch {
        from: usize,
        to: usize,
        main: FeatureShape,
        skip: FeatureShape,
    },
    #[error("residual from boundary {from} to boundary {to} does not wrap a module")]
    ResidualSpan { from: usize, to: usize },
    #[error("head: {0}")]
    Head(String),
    #[error("pass `{pass}` was already applied to this graph (fingerprint {fingerprint})")]
    PassAlreadyApplied { pass: String, fingerprint: String },
    #[error("channel reduction leaves layer `{id}` with {width} channels (minimum 8)")]
    TooFewChannels { id: String, width: usize },
    #[error("channel divisor {0} must be finite and >= 1")]
    BadDivisor(f64),
    #[error("middle module {module} has {found} rewritable layers; a fire module needs 3")]
    FireModuleTooShort { module: usize, found: usize },
    #[error("calibration failed: closest total {achieved} (middle width {width}) lies outside [{lo}, {hi}]")]
    Calibration {
        achieved: u64,
        width: usize,
        lo: u64,
        hi: u64,
    },
    #[error("unknown pass `{0}`")]
    UnknownPass(String),
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, ArchError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flow {
    Entry,
    Middle,
    Exit,
}

impl Flow {
    pub const ALL: [Flow; 3] = [Flow::Entry, Flow::Middle, Flow::Exit];

    pub fn as_str(self) -> &'static str {
        match self {
            Flow::Entry => "entry",
            Flow::Middle => "middle",
            Flow::Exit => "exit",
        }
    }
}

impl std::fmt::Display for Flow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

impl std::str::FromStr for Flow {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Flow::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown flow `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    SeparableConv,
    BatchNorm,
    Relu,
    MaxPool,
    GlobalAvgPool,
    Dense,
    Dropout,
    Sigmoid,
}

impl LayerKind {
    pub const ALL: [LayerKind; 9] = [
        LayerKind::Conv,
        LayerKind::SeparableConv,
        LayerKind::BatchNorm,
        LayerKind::Relu,
        LayerKind::MaxPool,
        LayerKind::GlobalAvgPool,
        LayerKind::Dense,
        LayerKind::Dropout,
        LayerKind::Sigmoid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::SeparableConv => "separable_conv",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Dense => "dense",
            LayerKind::Dropout => "dropout",
            LayerKind::Sigmoid => "sigmoid",
        }
    }

    /// Kinds carrying a spatial kernel.
    pub fn is_conv_like(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::SeparableConv)
    }
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

impl std::str::FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown layer kind `{s}`"))
    }
}

/// One layer record.
///
/// `in_channels`/`out_channels` are N and M in the parameter formula; for
/// pass-through kinds both equal the channel count flowing through. `kernel`
/// is set only for conv-like kinds, `window` only for max pooling and `rate`
/// only for dropout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: Option<(usize, usize)>,
    pub window: Option<usize>,
    pub stride: usize,
    pub padding: Padding,
    pub rate: Option<f64>,
}

impl LayerSpec {
    fn base(id: impl Into<String>, kind: LayerKind, channels: usize) -> Self {
        Self {
            id: id.into(),
            kind,
            in_channels: channels,
            out_channels: channels,
            kernel: None,
            window: None,
            stride: 1,
            padding: Padding::Same,
            rate: None,
        }
    }

    pub fn conv(id: impl Into<String>, n: usize, m: usize, k: usize, stride: usize, padding: Padding) -> Self {
        Self {
            in_channels: n,
            out_channels: m,
            kernel: Some((k, k)),
            stride,
            padding,
            ..Self::base(id, LayerKind::Conv, n)
        }
    }

    pub fn separable(id: impl Into<String>, n: usize, m: usize, k: usize) -> Self {
        Self {
            in_channels: n,
            out_channels: m,
            kernel: Some((k, k)),
            ..Self::base(id, LayerKind::SeparableConv, n)
        }
    }

    pub fn batch_norm(id: impl Into<String>, channels: usize) -> Self {
        Self::base(id, LayerKind::BatchNorm, channels)
    }

    pub fn relu(id: impl Into<String>, channels: usize) -> Self {
        Self::base(id, LayerKind::Relu, channels)
    }

    pub fn max_pool(id: impl Into<String>, channels: usize, window: usize, stride: usize) -> Self {
        Self {
            window: Some(window),
            stride,
            ..Self::base(id, LayerKind::MaxPool, channels)
        }
    }

    pub fn global_avg_pool(id: impl Into<String>, channels: usize) -> Self {
        Self::base(id, LayerKind::GlobalAvgPool, channels)
    }

    pub fn dropout(id: impl Into<String>, channels: usize, rate: f64) -> Self {
        Self {
            rate: Some(rate),
            ..Self::base(id, LayerKind::Dropout, channels)
        }
    }

    pub fn dense(id: impl Into<String>, n: usize, m: usize) -> Self {
        Self {
            in_channels: n,
            out_channels: m,
            ..Self::base(id, LayerKind::Dense, n)
        }
    }

    pub fn sigmoid(id: impl Into<String>, channels: usize) -> Self {
        Self::base(id, LayerKind::Sigmoid, channels)
    }

    /// Kernel area (kh·kw), 1 for kernel-less kinds.
    pub fn kernel_area(&self) -> usize {
        self.kernel.map_or(1, |(h, w)| h * w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Module {
    /// 1-based position in the graph.
    pub index: usize,
    pub flow: Flow,
    pub layers: Vec<LayerSpec>,
}

impl Module {
    pub fn conv_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.kind.is_conv_like())
    }
}

/// Skip connection from boundary `from` to boundary `to`. An empty
/// projection is the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualLink {
    pub from: usize,
    pub to: usize,
    pub projection: Vec<LayerSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for InputSpec {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 224,
            width: 224,
        }
    }
}

/// Record of a rewrite applied to produce a graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassRecord {
    pub name: String,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchGraph {
    pub input: InputSpec,
    pub modules: Vec<Module>,
    pub residuals: Vec<ResidualLink>,
    pub head: Vec<LayerSpec>,
    /// Passes applied so far, oldest first.
    pub passes: Vec<PassRecord>,
}

impl ArchGraph {
    pub fn modules_in(&self, flow: Flow) -> impl Iterator<Item = &Module> {
        self.modules.iter().filter(move |m| m.flow == flow)
    }

    pub fn residual_into(&self, module_index: usize) -> Option<&ResidualLink> {
        self.residuals.iter().find(|r| r.from == module_index)
    }

    /// Every layer in execution order: modules (main branch then
    /// projection), then head.
    pub fn layers(&self) -> impl Iterator<Item = (Option<Flow>, &LayerSpec)> {
        self.modules
            .iter()
            .flat_map(move |m| {
                let proj = self
                    .residual_into(m.index)
                    .map(|r| r.projection.as_slice())
                    .unwrap_or(&[]);
                m.layers.iter().chain(proj).map(move |l| (Some(m.flow), l))
            })
            .chain(self.head.iter().map(|l| (None, l)))
    }

    pub fn has_pass(&self, name: &str) -> bool {
        self.passes.iter().any(|p| p.name == name)
    }

    /// Canonical text form; see [`ArchGraph::from_text`].
    pub fn to_text(&self) -> String {
        text::write(self)
    }

    pub fn from_text(src: &str) -> Result<Self> {
        text::parse(src)
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn content_hash(&self) -> String {
        text::hash_hex(&self.to_text())
    }

    pub fn content_hash_bytes(&self) -> [u8; 32] {
        text::hash(&self.to_text())
    }

    /// Same topology with every conv-like width divided by `divisor` and
    /// rounded to a multiple of 8 (minimum 8). Used to get desk-sized
    /// variants of a graph for training experiments.
    pub fn width_scaled(&self, divisor: usize) -> Result<Self> {
        if divisor <= 1 {
            return Ok(self.clone());
        }
        let mut g = self.clone();
        let scale = |w: usize| passes::round_to_eight(w as f64 / divisor as f64).max(8);
        for m in &mut g.modules {
            for l in m.layers.iter_mut().filter(|l| l.kind.is_conv_like()) {
                l.out_channels = scale(l.out_channels);
            }
        }
        for r in &mut g.residuals {
            for l in r.projection.iter_mut().filter(|l| l.kind.is_conv_like()) {
                l.out_channels = scale(l.out_channels);
            }
        }
        reinfer_channels(&mut g)?;
        g.passes.push(PassRecord {
            name: format!("width-scale/{divisor}"),
            fingerprint: String::new(),
        });
        let fp = g.content_hash()[..16].to_string();
        g.passes.last_mut().expect("just pushed").fingerprint = fp;
        validate(&g)?;
        Ok(g)
    }

    /// Same graph on a `side` x `side` input.
    pub fn with_input_side(&self, side: usize) -> Result<Self> {
        let mut g = self.clone();
        g.input.height = side;
        g.input.width = side;
        validate(&g)?;
        Ok(g)
    }
}
