//! Executable models compiled from an [`ArchGraph`], the optimizer and the
//! checkpoint format.

mod checkpoint;
mod optim;

use std::collections::HashMap;

use rand::distributions::{Distribution, Uniform};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arch::{count_params, validate, ArchError, ArchGraph, LayerKind, LayerSpec};
use crate::tensor::{BatchNormMode, RunningStats, Tape, Tensor, TensorError, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, BlobKind, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{Optimizer, OptimizerKind, OptimizerState};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("layer `{id}`: {kind} is not supported {place}")]
    Unsupported {
        id: String,
        kind: LayerKind,
        place: &'static str,
    },
    #[error("input batch has shape {got:?}, model expects [B, {}, {}, {}]", expected[0], expected[1], expected[2])]
    InputShape { expected: [usize; 3], got: Vec<usize> },
    #[error("{targets} targets for a batch of {batch}")]
    Targets { batch: usize, targets: usize },
    #[error("checkpoint was written for graph {found}, this graph is {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint is missing `{0}`")]
    MissingBlob(String),
    #[error("blob `{name}` has shape {found:?}, expected {expected:?}")]
    BlobShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("gradient count {got} does not match {expected} parameters")]
    GradientCount { expected: usize, got: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBuffer {
    pub layer: String,
    pub stats: RunningStats,
}

/// Loss and per-sample probabilities of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub loss: f32,
    pub probs: Vec<f32>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameter tensors a layer owns, as `(suffix, shape, fan_in, gain)`. A
/// zero fan-in marks tensors with constant initialization. The depthwise
/// stage is linear into the pointwise stage, so it gets unit gain.
fn layer_tensors(l: &LayerSpec) -> Vec<(&'static str, Vec<usize>, usize, f64)> {
    let (n, m) = (l.in_channels, l.out_channels);
    let (kh, kw) = l.kernel.unwrap_or((1, 1));
    match l.kind {
        LayerKind::Conv => vec![("kernel", vec![m, n, kh, kw], n * kh * kw, 2.0)],
        LayerKind::SeparableConv => vec![
            ("depthwise", vec![n, 1, kh, kw], kh * kw, 1.0),
            ("pointwise", vec![m, n, 1, 1], n, 2.0),
        ],
        LayerKind::BatchNorm => vec![("gamma", vec![n], 0, 0.0), ("beta", vec![n], 0, 0.0)],
        LayerKind::Dense => vec![("weight", vec![n, m], n, 1.0), ("bias", vec![m], 0, 0.0)],
        _ => Vec::new(),
    }
}

fn check_supported(graph: &ArchGraph) -> Result<()> {
    let unsupported = |l: &LayerSpec, place| ModelError::Unsupported {
        id: l.id.clone(),
        kind: l.kind,
        place,
    };
    let body = graph
        .modules
        .iter()
        .flat_map(|m| m.layers.iter())
        .chain(graph.residuals.iter().flat_map(|r| r.projection.iter()));
    for l in body {
        if matches!(l.kind, LayerKind::Dense | LayerKind::GlobalAvgPool | LayerKind::Sigmoid) {
            return Err(unsupported(l, "inside a module"));
        }
    }
    let last = graph.head.len().saturating_sub(1);
    for (i, l) in graph.head.iter().enumerate() {
        match l.kind {
            LayerKind::Sigmoid if i == last => {}
            LayerKind::GlobalAvgPool | LayerKind::Dropout | LayerKind::Dense | LayerKind::Relu | LayerKind::BatchNorm => {}
            _ => return Err(unsupported(l, "in the head")),
        }
    }
    Ok(())
}

/// Per-call execution state.
struct Exec<'a> {
    tape: Tape,
    vars: Vec<Var>,
    stats: &'a mut [RunningStats],
    mode: BatchNormMode,
    rng: Option<&'a mut dyn RngCore>,
}

/// A compiled graph: parameters, batch-norm buffers and the execution plan.
///
/// `forward` is read-only and always runs with inference semantics (running
/// batch-norm statistics, no dropout), so it may be shared across threads.
/// Training goes through [`Model::step`], which needs exclusive access.
#[derive(Clone, Debug)]
pub struct Model {
    graph: ArchGraph,
    graph_hash: [u8; 32],
    params: Vec<Param>,
    index: HashMap<String, usize>,
    buffers: Vec<BnBuffer>,
    bn_index: HashMap<String, usize>,
    dropout: f64,
}

impl Model {
    /// Validates `graph` and initializes every parameter from `seed`:
    /// fan-in variance scaling with uniform draws (He gain for weights
    /// feeding a rectifier, unit gain for depthwise kernels and the dense
    /// head), zero biases, batch-norm beta 0 and gamma 1, except the batch
    /// norm that closes a residual branch, whose gamma starts at 0.
    pub fn compile(graph: &ArchGraph, seed: u64) -> Result<Self> {
        validate(graph)?;
        check_supported(graph)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // the batch norm closing each residual branch starts at gamma 0, so
        // every residual module begins as its skip path
        let closing: Vec<&str> = graph
            .modules
            .iter()
            .filter(|m| graph.residual_into(m.index).is_some())
            .filter_map(|m| m.layers.iter().rev().find(|l| l.kind.is_conv_like() || l.kind == LayerKind::BatchNorm))
            .filter(|l| l.kind == LayerKind::BatchNorm)
            .map(|l| l.id.as_str())
            .collect();
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        for (_, l) in graph.layers() {
            for (suffix, shape, fan_in, gain) in layer_tensors(l) {
                let numel: usize = shape.iter().product();
                let data = if fan_in > 0 {
                    let bound = (3.0 * gain / fan_in as f64).sqrt() as f32;
                    let dist = Uniform::new_inclusive(-bound, bound);
                    (0..numel).map(|_| dist.sample(&mut rng)).collect()
                } else {
                    let one = suffix == "gamma" && !closing.contains(&l.id.as_str());
                    vec![if one { 1.0 } else { 0.0 }; numel]
                };
                params.push(Param {
                    name: format!("{}.{suffix}", l.id),
                    value: Tensor::new(shape, data)?,
                });
            }
            if l.kind == LayerKind::BatchNorm {
                buffers.push(BnBuffer {
                    layer: l.id.clone(),
                    stats: RunningStats::new(l.in_channels),
                });
            }
        }
        let dropout = graph
            .head
            .iter()
            .find(|l| l.kind == LayerKind::Dropout)
            .and_then(|l| l.rate)
            .unwrap_or(0.0);
        Ok(Self::assemble(graph.clone(), params, buffers, dropout))
    }

    fn assemble(graph: ArchGraph, params: Vec<Param>, buffers: Vec<BnBuffer>, dropout: f64) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        let bn_index = buffers.iter().enumerate().map(|(i, b)| (b.layer.clone(), i)).collect();
        Self {
            graph_hash: graph.content_hash_bytes(),
            graph,
            params,
            index,
            buffers,
            bn_index,
            dropout,
        }
    }

    pub fn graph(&self) -> &ArchGraph {
        &self.graph
    }

    pub fn graph_hash(&self) -> [u8; 32] {
        self.graph_hash
    }

    pub fn graph_hash_hex(&self) -> String {
        hex(&self.graph_hash)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn buffers(&self) -> &[BnBuffer] {
        &self.buffers
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> u64 {
        self.params.iter().map(|p| p.value.numel() as u64).sum()
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    /// Overrides the rate of every dropout layer.
    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::DropoutRate(rate).into());
        }
        self.dropout = rate;
        Ok(())
    }

    /// `[C, H, W]` the model accepts.
    pub fn input_dims(&self) -> [usize; 3] {
        let i = self.graph.input;
        [i.channels, i.height, i.width]
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        if s.len() != 4 || s[0] == 0 || s[1..] != self.input_dims() {
            return Err(ModelError::InputShape {
                expected: self.input_dims(),
                got: s.to_vec(),
            });
        }
        Ok(())
    }

    fn layer(&self, ex: &mut Exec<'_>, l: &LayerSpec, x: Var) -> Result<Var> {
        let p = |suffix: &str| ex.vars[self.index[&format!("{}.{suffix}", l.id)]];
        let t = &mut ex.tape;
        let y = match l.kind {
            LayerKind::Conv => t.conv2d(x, p("kernel"), l.stride, l.padding)?,
            LayerKind::SeparableConv => t.separable_conv2d(x, p("depthwise"), p("pointwise"), l.stride, l.padding)?,
            LayerKind::BatchNorm => {
                let (g, b) = (p("gamma"), p("beta"));
                let stats = &mut ex.stats[self.bn_index[&l.id]];
                t.batch_norm(x, g, b, stats, ex.mode, BN_EPSILON)?
            }
            LayerKind::Relu => t.relu(x)?,
            LayerKind::MaxPool => t.max_pool(x, l.window.unwrap_or(1), l.stride, l.padding)?,
            LayerKind::GlobalAvgPool => t.global_avg_pool(x)?,
            LayerKind::Dropout => match ex.rng.as_deref_mut() {
                Some(rng) => t.dropout(x, self.dropout, true, rng)?,
                None => x,
            },
            LayerKind::Dense => t.dense(x, p("weight"), p("bias"))?,
            // the final sigmoid is folded into the loss or applied by `forward`
            LayerKind::Sigmoid => x,
        };
        Ok(y)
    }

    fn logits(&self, ex: &mut Exec<'_>, input: Var) -> Result<Var> {
        let mut x = input;
        for m in &self.graph.modules {
            let mut y = x;
            for l in &m.layers {
                y = self.layer(ex, l, y)?;
            }
            if let Some(link) = self.graph.residual_into(m.index) {
                let mut skip = x;
                for l in &link.projection {
                    skip = self.layer(ex, l, skip)?;
                }
                y = ex.tape.add(y, skip)?;
            }
            x = y;
        }
        for l in &self.graph.head {
            x = self.layer(ex, l, x)?;
        }
        Ok(x)
    }

    /// Eval-mode probabilities, shape `[B, 1]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let mut stats: Vec<RunningStats> = self.buffers.iter().map(|b| b.stats.clone()).collect();
        let mut tape = Tape::inference();
        let vars = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let input = tape.constant(batch.clone());
        let mut ex = Exec {
            tape,
            vars,
            stats: &mut stats,
            mode: BatchNormMode::Eval,
            rng: None,
        };
        let z = self.logits(&mut ex, input)?;
        let p = ex.tape.sigmoid(z)?;
        Ok(ex.tape.value(p).clone())
    }

    /// One training-mode pass: batch statistics (folded into the running
    /// buffers), dropout from `rng`, mean binary cross-entropy against
    /// `targets`. Returns the loss, the per-sample probabilities and one
    /// gradient per parameter in [`Model::params`] order.
    pub fn step(&mut self, batch: &Tensor, targets: &[f32], rng: &mut dyn RngCore) -> Result<(StepOutput, Vec<Tensor>)> {
        self.check_input(batch)?;
        if targets.len() != batch.shape()[0] {
            return Err(ModelError::Targets {
                batch: batch.shape()[0],
                targets: targets.len(),
            });
        }
        let mut stats: Vec<RunningStats> = self.buffers.iter().map(|b| b.stats.clone()).collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p.value.clone())).collect();
        let input = tape.constant(batch.clone());
        let mut ex = Exec {
            tape,
            vars,
            stats: &mut stats,
            mode: BatchNormMode::Train { momentum: BN_MOMENTUM },
            rng: Some(rng),
        };
        let z = self.logits(&mut ex, input)?;
        let loss = ex.tape.bce_with_logits(z, targets)?;
        let output = StepOutput {
            loss: ex.tape.value(loss).data()[0],
            probs: ex.tape.value(z).data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
        };
        let Exec { tape, vars, .. } = ex;
        let mut grads = tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape()).expect("non-empty")))
            .collect();
        for (b, s) in self.buffers.iter_mut().zip(stats) {
            b.stats = s;
        }
        Ok((output, grads))
    }

    /// Packages weights, buffers, optimizer state and bookkeeping.
    pub fn to_checkpoint(&self, optimizer: &OptimizerState, epoch: u64, rng: RngState, meta: String) -> Checkpoint {
        let mut buffers = Vec::with_capacity(self.buffers.len() * 2);
        for b in &self.buffers {
            let c = b.stats.mean.len();
            buffers.push((format!("{}.moving_mean", b.layer), Tensor::new([c], b.stats.mean.clone()).expect("len")));
            buffers.push((format!("{}.moving_var", b.layer), Tensor::new([c], b.stats.var.clone()).expect("len")));
        }
        Checkpoint {
            graph_hash: self.graph_hash,
            epoch,
            rng,
            dropout: self.dropout,
            params: self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            buffers,
            optimizer: optimizer.clone(),
            meta,
        }
    }

    /// Rebuilds a model for `graph` from checkpointed weights. The graph's
    /// content hash must match the one recorded in the checkpoint.
    pub fn from_checkpoint(graph: &ArchGraph, ckpt: &Checkpoint) -> Result<Self> {
        let expected = graph.content_hash_bytes();
        if expected != ckpt.graph_hash {
            return Err(ModelError::HashMismatch {
                expected: hex(&expected),
                found: hex(&ckpt.graph_hash),
            });
        }
        let template = Self::compile(graph, 0)?;
        let lookup = |list: &[(String, Tensor)], name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = list
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| ModelError::MissingBlob(name.to_string()))?;
            if t.shape() != shape {
                return Err(ModelError::BlobShape {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            Ok(t)
        };
        let params = template
            .params
            .iter()
            .map(|p| {
                Ok(Param {
                    name: p.name.clone(),
                    value: lookup(&ckpt.params, &p.name, p.value.shape())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let buffers = template
            .buffers
            .iter()
            .map(|b| {
                let c = [b.stats.mean.len()];
                Ok(BnBuffer {
                    layer: b.layer.clone(),
                    stats: RunningStats {
                        mean: lookup(&ckpt.buffers, &format!("{}.moving_mean", b.layer), &c)?.into_data(),
                        var: lookup(&ckpt.buffers, &format!("{}.moving_var", b.layer), &c)?.into_data(),
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(graph.clone(), params, buffers, ckpt.dropout))
    }

    /// Brute-force trainable-scalar count cross-checked against the
    /// accountant; used by tests and `arch describe`.
    pub fn agrees_with_counter(&self) -> Result<bool> {
        Ok(count_params(&self.graph)?.total == self.scalar_count())
    }
}
