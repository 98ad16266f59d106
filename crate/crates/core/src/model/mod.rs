//! TCN encoder and the class-incremental linear head.
//!
//! The encoder runs `gLN → 1×1 bottleneck → (residual blocks) × repeats →
//! mean pool over frames → gLN`, producing the embedding consumed by both the
//! classifier and the feature-level distillation term. Block `k` within a
//! repeat uses dilation `2^k`. The head grows by whole rows when a task
//! introduces new classes; existing rows are never touched by growth.

mod checkpoint;
pub mod layers;

use std::ops::Deref;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_FORMAT};
use layers::{
    uniform, visit, visit_mut, BlockCache, Conv1x1, GlnCache, GlobalLayerNorm, ResidualBlock,
    Visitor, VisitorMut,
};

use crate::error::{CilError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default, deny_unknown_fields)]
pub struct TcnConfig {
    pub input_channels: usize,
    pub hidden_channels: usize,
    pub bottleneck_channels: usize,
    pub blocks_per_repeat: usize,
    pub repeats: usize,
    pub depthwise_kernel: usize,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig {
            input_channels: 40,
            hidden_channels: 128,
            bottleneck_channels: 64,
            blocks_per_repeat: 5,
            repeats: 2,
            depthwise_kernel: 3,
        }
    }
}

impl TcnConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.input_channels,
            self.hidden_channels,
            self.bottleneck_channels,
            self.blocks_per_repeat,
            self.repeats,
            self.depthwise_kernel,
        ];
        if counts.contains(&0) {
            return Err(CilError::Config(format!("TCN sizes must be positive: {self:?}")));
        }
        if self.depthwise_kernel % 2 == 0 {
            return Err(CilError::Config(format!(
                "depthwise kernel must be odd for symmetric padding, got {}",
                self.depthwise_kernel
            )));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.bottleneck_channels
    }

    pub fn dilation(&self, block: usize) -> usize {
        1 << (block % self.blocks_per_repeat)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub input_norm: GlobalLayerNorm,
    pub bottleneck: Conv1x1,
    pub blocks: Vec<ResidualBlock>,
    pub output_norm: GlobalLayerNorm,
}

pub struct EncoderTrace {
    input_norm: GlnCache,
    normed_input: Array2<f64>,
    blocks: Vec<BlockCache>,
    frames: usize,
    output_norm: GlnCache,
}

impl Encoder {
    fn init(cfg: &TcnConfig, rng: &mut ChaCha8Rng) -> Self {
        let n_blocks = cfg.blocks_per_repeat * cfg.repeats;
        Encoder {
            input_norm: GlobalLayerNorm::new(cfg.input_channels),
            bottleneck: Conv1x1::init(cfg.input_channels, cfg.bottleneck_channels, rng),
            blocks: (0..n_blocks)
                .map(|b| {
                    ResidualBlock::init(
                        cfg.bottleneck_channels,
                        cfg.hidden_channels,
                        cfg.depthwise_kernel,
                        cfg.dilation(b),
                        rng,
                    )
                })
                .collect(),
            output_norm: GlobalLayerNorm::new(cfg.bottleneck_channels),
        }
    }

    fn zeros(cfg: &TcnConfig) -> Self {
        let n_blocks = cfg.blocks_per_repeat * cfg.repeats;
        Encoder {
            input_norm: GlobalLayerNorm::zeros(cfg.input_channels),
            bottleneck: Conv1x1::zeros(cfg.input_channels, cfg.bottleneck_channels),
            blocks: (0..n_blocks)
                .map(|b| {
                    ResidualBlock::zeros(
                        cfg.bottleneck_channels,
                        cfg.hidden_channels,
                        cfg.depthwise_kernel,
                        cfg.dilation(b),
                    )
                })
                .collect(),
            output_norm: GlobalLayerNorm::zeros(cfg.bottleneck_channels),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array1<f64>, EncoderTrace) {
        let (normed_input, input_norm) = self.input_norm.forward(x);
        let mut h = self.bottleneck.forward(&normed_input);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&h);
            blocks.push(cache);
            h = next;
        }
        let frames = h.ncols();
        let pooled = h.mean_axis(Axis(1)).expect("at least one frame");
        let column = pooled.insert_axis(Axis(1));
        let (embedded, output_norm) = self.output_norm.forward(&column);
        let embedding = embedded.index_axis(Axis(1), 0).to_owned();
        let trace = EncoderTrace {
            input_norm,
            normed_input,
            blocks,
            frames,
            output_norm,
        };
        (embedding, trace)
    }

    pub fn backward(&self, trace: &EncoderTrace, d_embedding: &Array1<f64>, grad: &mut Encoder) {
        let column = d_embedding.clone().insert_axis(Axis(1));
        let d_pooled = self
            .output_norm
            .backward(&trace.output_norm, &column, &mut grad.output_norm);
        let scale = 1.0 / trace.frames as f64;
        let mut d = Array2::from_shape_fn((d_pooled.nrows(), trace.frames), |(c, _)| {
            d_pooled[[c, 0]] * scale
        });
        for ((block, cache), g) in self
            .blocks
            .iter()
            .zip(&trace.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            d = block.backward(cache, &d, g);
        }
        let d = self
            .bottleneck
            .backward(&trace.normed_input, &d, &mut grad.bottleneck);
        // Input features carry no parameters; the gradient stops here.
        let _ = self.input_norm.backward(&trace.input_norm, &d, &mut grad.input_norm);
    }

    fn visit(&self, f: &mut Visitor) {
        self.input_norm.visit("encoder.input_norm.", f);
        self.bottleneck.visit("encoder.bottleneck.", f);
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(&format!("encoder.blocks.{i}."), f);
        }
        self.output_norm.visit("encoder.output_norm.", f);
    }

    fn visit_mut(&mut self, f: &mut VisitorMut) {
        self.input_norm.visit_mut("encoder.input_norm.", f);
        self.bottleneck.visit_mut("encoder.bottleneck.", f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&format!("encoder.blocks.{i}."), f);
        }
        self.output_norm.visit_mut("encoder.output_norm.", f);
    }
}

/// Linear classifier; row `i` scores class `classes[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `[classes × embedding]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Head {
    fn init(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Head {
            weight: uniform((rows, dim), bound, rng),
            bias: uniform(rows, bound, rng),
        }
    }
}

/// Encoder parameters θ plus head parameters φ, and the class id of every
/// head row. The same type doubles as a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: TcnConfig,
    pub encoder: Encoder,
    pub head: Head,
    pub classes: Vec<usize>,
}

/// Output of one forward pass, kept for the backward pass.
pub struct Forward {
    pub embedding: Array1<f64>,
    pub logits: Array1<f64>,
    trace: EncoderTrace,
}

fn check_features(cfg: &TcnConfig, features: &ArrayView2<f64>) -> Result<()> {
    if features.nrows() != cfg.input_channels {
        return Err(CilError::Shape(format!(
            "expected {} feature rows, got {}",
            cfg.input_channels,
            features.nrows()
        )));
    }
    if features.ncols() == 0 {
        return Err(CilError::Shape("features have no frames".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(CilError::NonFinite("input features"));
    }
    Ok(())
}

/// Fresh model whose head covers `initial_classes` (in order).
pub fn init_model(cfg: &TcnConfig, initial_classes: &[usize], seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    if initial_classes.is_empty() {
        return Err(CilError::Config("a model needs at least one class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Encoder::init(cfg, &mut rng);
    let head = Head::init(initial_classes.len(), cfg.embedding_dim(), &mut rng);
    Ok(ModelParams {
        config: cfg.clone(),
        encoder,
        head,
        classes: initial_classes.to_vec(),
    })
}

/// Appends freshly initialized head rows for `new_classes`; every existing
/// parameter is carried over unchanged.
pub fn expand_head(params: &ModelParams, new_classes: &[usize], seed: u64) -> Result<ModelParams> {
    if new_classes.is_empty() {
        return Err(CilError::Config("head expansion needs at least one class".into()));
    }
    if let Some(dup) = new_classes.iter().find(|c| params.classes.contains(c)) {
        return Err(CilError::Config(format!("class {dup} already has a head row")));
    }
    let dim = params.config.embedding_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fresh = Head::init(new_classes.len(), dim, &mut rng);
    let mut out = params.clone();
    out.head.weight = ndarray::concatenate![Axis(0), params.head.weight, fresh.weight];
    out.head.bias = ndarray::concatenate![Axis(0), params.head.bias, fresh.bias];
    out.classes.extend_from_slice(new_classes);
    Ok(out)
}

impl ModelParams {
    /// Zero-valued parameters of identical layout, used to accumulate gradients.
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            config: self.config.clone(),
            encoder: Encoder::zeros(&self.config),
            head: Head {
                weight: Array2::zeros(self.head.weight.raw_dim()),
                bias: Array1::zeros(self.head.bias.len()),
            },
            classes: self.classes.clone(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Head row of class `label`, if the head knows it.
    pub fn row_of(&self, label: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == label)
    }

    pub fn forward(&self, features: ArrayView2<f64>) -> Result<Forward> {
        check_features(&self.config, &features)?;
        let (embedding, trace) = self.encoder.forward(&features.to_owned());
        let logits = self.head.weight.dot(&embedding) + &self.head.bias;
        Ok(Forward {
            embedding,
            logits,
            trace,
        })
    }

    pub fn forward_f32(&self, features: &Array2<f32>) -> Result<Forward> {
        self.forward(features.mapv(f64::from).view())
    }

    /// Embedding after mean pooling and the final gLN, before the head.
    pub fn encode(&self, features: ArrayView2<f64>) -> Result<Array1<f64>> {
        check_features(&self.config, &features)?;
        Ok(self.encoder.forward(&features.to_owned()).0)
    }

    pub fn classify(&self, embedding: &Array1<f64>) -> Result<Array1<f64>> {
        if embedding.len() != self.config.embedding_dim() {
            return Err(CilError::Shape(format!(
                "embedding has {} entries, head expects {}",
                embedding.len(),
                self.config.embedding_dim()
            )));
        }
        Ok(self.head.weight.dot(embedding) + &self.head.bias)
    }

    /// Accumulates parameter gradients into `grad` given upstream gradients
    /// w.r.t. the logits and (additively) w.r.t. the embedding.
    pub fn backward(
        &self,
        fwd: &Forward,
        d_logits: &Array1<f64>,
        d_embedding_extra: Option<&Array1<f64>>,
        grad: &mut ModelParams,
    ) {
        let d_col = d_logits.view().insert_axis(Axis(1));
        let e_row = fwd.embedding.view().insert_axis(Axis(0));
        grad.head.weight += &d_col.dot(&e_row);
        grad.head.bias += d_logits;
        let mut d_embedding = self.head.weight.t().dot(d_logits);
        if let Some(extra) = d_embedding_extra {
            d_embedding += extra;
        }
        self.encoder.backward(&fwd.trace, &d_embedding, &mut grad.encoder);
    }

    pub fn visit(&self, f: &mut Visitor) {
        self.encoder.visit(f);
        visit("head.", "weight", &self.head.weight, f);
        visit("head.", "bias", &self.head.bias, f);
    }

    pub fn visit_mut(&mut self, f: &mut VisitorMut) {
        self.encoder.visit_mut(f);
        visit_mut("head.", "weight", &mut self.head.weight, f);
        visit_mut("head.", "bias", &mut self.head.bias, f);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, data| n += data.len());
        n
    }

    /// All parameters concatenated in visiting order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, _, data| out.extend_from_slice(data));
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(CilError::Shape(format!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        self.visit_mut(&mut |_, _, data| {
            data.copy_from_slice(&flat[offset..offset + data.len()]);
            offset += data.len();
        });
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.visit_mut(&mut |_, _, data| data.iter_mut().for_each(|v| *v *= factor));
    }
}

/// Frozen copy of a model taken at the end of a task.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot(Arc<ModelParams>);

pub fn snapshot(params: &ModelParams) -> TeacherSnapshot {
    TeacherSnapshot(Arc::new(params.clone()))
}

impl TeacherSnapshot {
    pub fn snapshot(&self) -> TeacherSnapshot {
        self.clone()
    }
}

impl Deref for TeacherSnapshot {
    type Target = ModelParams;

    fn deref(&self) -> &ModelParams {
        &self.0
    }
}
