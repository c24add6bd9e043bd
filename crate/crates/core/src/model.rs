//! Model variants: from mean-pool baselines up to the full three-block
//! attention network, plus checkpointing.
//!
//! Every variant is a flat stack of [`LayerKind`] steps executed in order
//! over a [`GraphBatch`]. The shared skeleton is:
//!
//! ```text
//! encoder   linear(d_in -> d_enc) + relu + batch norm      (node-wise)
//! blocks    dropout + message passing + relu + size norm    (0, 1, or 3)
//! readout   global mean pool or gated attention pool        (graph-wise)
//! decoder   dropout + linear + relu + batch norm + linear    (+ softmax)
//! ```
//!
//! The two pool-first baselines skip message passing entirely: they average
//! node features immediately and regress from the pooled vector (directly,
//! or through the encoder/decoder pair).
//!
//! Parameters are owned by the model between steps. A forward pass first
//! *binds* them onto a tape — leaves when gradients are wanted, constants
//! otherwise — in one fixed traversal order that is shared by gradient
//! collection, the optimizer, and the checkpoint format.

use crate::graph::GraphBatch;
use crate::layers::{
    batch_norm_eval, batch_norm_train, dropout, gat_forward, gatp_forward, gcn_forward,
    global_mean_pool, graph_size_norm, linear_forward, Aggregate, BatchNorm, GatBindings,
    GatLayer, GatPool, HeadCombine, LayerError, LinearLayer, Mode,
};
use crate::tape::{Tape, TapeError, TapeResult, Value};
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("model expects input feature width {expected}, got {got}")]
    InputWidth { expected: usize, got: usize },
    #[error("invalid model spec: {field}: {reason}")]
    BadSpec { field: &'static str, reason: String },
}

/// The six architectures the training and ablation tooling knows about.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Mean-pool the raw node features, single linear head.
    AvgPoolFc,
    /// Mean-pool the raw node features, full encoder/decoder stack.
    AvgPoolEd,
    /// Encoder, one graph-convolution block, mean-pool readout.
    GcnGmp,
    /// Encoder, one attention block, mean-pool readout.
    Gat1Gmp,
    /// Encoder, one attention block, gated attention readout.
    Gat1Gatp,
    /// Encoder, three attention blocks, gated attention readout.
    Gat3Gatp,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::AvgPoolFc,
        Variant::AvgPoolEd,
        Variant::GcnGmp,
        Variant::Gat1Gmp,
        Variant::Gat1Gatp,
        Variant::Gat3Gatp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::AvgPoolFc => "avg_pool_fc",
            Variant::AvgPoolEd => "avg_pool_ed",
            Variant::GcnGmp => "gcn_gmp",
            Variant::Gat1Gmp => "gat1_gmp",
            Variant::Gat1Gatp => "gat1_gatp",
            Variant::Gat3Gatp => "gat3_gatp",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Message-passing blocks this variant stacks.
    pub fn blocks(self) -> usize {
        match self {
            Variant::AvgPoolFc | Variant::AvgPoolEd => 0,
            Variant::GcnGmp | Variant::Gat1Gmp | Variant::Gat1Gatp => 1,
            Variant::Gat3Gatp => 3,
        }
    }

    fn uses_attention(self) -> bool {
        matches!(
            self,
            Variant::Gat1Gmp | Variant::Gat1Gatp | Variant::Gat3Gatp
        )
    }

    fn uses_gated_pool(self) -> bool {
        matches!(self, Variant::Gat1Gatp | Variant::Gat3Gatp)
    }
}

/// Hyperparameters defining a model. Defaults are the full-size network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Node feature width coming in.
    pub d_in: usize,
    /// Encoder output width (and message-passing width).
    pub d_enc: usize,
    /// Per-head attention score width.
    pub d_att: usize,
    /// Attention heads, both in message passing and in the gated readout.
    pub heads: usize,
    /// Decoder hidden width.
    pub d_dec: usize,
    /// Output bins (10 for distributions, 1 for a scalar head).
    pub bins: usize,
    /// Dropout probability in front of each block and the decoder.
    pub drop_p: f64,
    /// Normalize the output row to a distribution.
    pub final_softmax: bool,
    /// Let attention nodes attend to themselves.
    pub self_loops: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            variant: Variant::Gat3Gatp,
            d_in: 16928,
            d_enc: 2048,
            d_att: 64,
            heads: 16,
            d_dec: 1024,
            bins: 10,
            drop_p: 0.8,
            final_softmax: true,
            self_loops: false,
        }
    }
}

impl ModelSpec {
    pub fn for_variant(variant: Variant) -> Self {
        ModelSpec {
            variant,
            ..ModelSpec::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive: [(&'static str, usize); 5] = [
            ("d_in", self.d_in),
            ("d_enc", self.d_enc),
            ("d_dec", self.d_dec),
            ("bins", self.bins),
            ("heads", self.heads),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(ModelError::BadSpec {
                    field,
                    reason: "must be at least 1".into(),
                });
            }
        }
        if !(0.0..1.0).contains(&self.drop_p) {
            return Err(ModelError::BadSpec {
                field: "drop_p",
                reason: format!("must lie in [0, 1), got {}", self.drop_p),
            });
        }
        if self.variant.uses_attention() {
            if self.d_att == 0 {
                return Err(ModelError::BadSpec {
                    field: "d_att",
                    reason: "must be at least 1 for attention variants".into(),
                });
            }
            if self.d_enc % self.heads != 0 {
                return Err(ModelError::BadSpec {
                    field: "heads",
                    reason: format!(
                        "d_enc {} must be divisible by heads {} (heads concatenate)",
                        self.d_enc, self.heads
                    ),
                });
            }
        }
        if self.bins == 1 && self.final_softmax {
            return Err(ModelError::BadSpec {
                field: "final_softmax",
                reason: "softmax over a single bin is constant; disable it for a scalar head"
                    .into(),
            });
        }
        Ok(())
    }

    /// Attention output width per head (heads concatenate back to `d_enc`).
    pub fn d_head(&self) -> usize {
        self.d_enc / self.heads
    }
}

enum LayerKind<T> {
    Linear { name: String, layer: LinearLayer<T> },
    Relu,
    BatchNorm { name: String, layer: BatchNorm<T> },
    Dropout { p: f64 },
    Gat { name: String, layer: GatLayer<T> },
    Gcn { name: String, layer: LinearLayer<T>, aggregate: Aggregate },
    GraphSizeNorm,
    GlobalMeanPool,
    GatPool { name: String, layer: GatPool<T> },
    FinalSoftmax,
}

/// A built model: spec plus the layer stack with its parameters.
pub struct Model<T> {
    spec: ModelSpec,
    layers: Vec<LayerKind<T>>,
}

/// Leaf/constant values for every trainable tensor, in traversal order.
pub struct ParamBindings {
    values: Vec<Value>,
}

impl ParamBindings {
    pub fn values(&self) -> &[Value] {
        &self.values
    }

    /// Wraps caller-created values. They must follow the parameter traversal
    /// order of the model the bindings will drive ([`Model::visit_params`]).
    pub fn from_values(values: Vec<Value>) -> Self {
        ParamBindings { values }
    }
}

/// Result of a gradient-carrying forward pass.
pub struct TrainPass {
    /// `[batch_graphs, bins]` network output.
    pub output: Value,
    pub bindings: ParamBindings,
    /// `(layer_index, graph, head, alpha)` for every attention block.
    pub attention: Vec<(usize, usize, usize, Value)>,
}

/// Train/eval selector for a bound forward pass; train mode carries the RNG
/// that draws dropout masks.
pub enum Pass<'r> {
    Train { rng: &'r mut ChaCha8Rng },
    Eval,
}

struct ForwardRaw<T> {
    output: Value,
    attention: Vec<(usize, usize, usize, Value)>,
    bn_updates: Vec<(usize, Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Model<T> {
    /// Builds a model with seeded initialization; the same `(spec, seed)`
    /// always yields identical parameters.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers: Vec<LayerKind<T>> = Vec::new();

        let push_encoder = |layers: &mut Vec<LayerKind<T>>, rng: &mut ChaCha8Rng, d_in: usize| {
            layers.push(LayerKind::Linear {
                name: "encoder.linear".into(),
                layer: LinearLayer::new(d_in, spec.d_enc, rng),
            });
            layers.push(LayerKind::Relu);
            layers.push(LayerKind::BatchNorm {
                name: "encoder.bn".into(),
                layer: BatchNorm::new(spec.d_enc),
            });
        };
        let push_decoder = |layers: &mut Vec<LayerKind<T>>, rng: &mut ChaCha8Rng| {
            layers.push(LayerKind::Dropout { p: spec.drop_p });
            layers.push(LayerKind::Linear {
                name: "decoder.fc1".into(),
                layer: LinearLayer::new(spec.d_enc, spec.d_dec, rng),
            });
            layers.push(LayerKind::Relu);
            layers.push(LayerKind::BatchNorm {
                name: "decoder.bn".into(),
                layer: BatchNorm::new(spec.d_dec),
            });
            layers.push(LayerKind::Linear {
                name: "decoder.fc2".into(),
                layer: LinearLayer::new(spec.d_dec, spec.bins, rng),
            });
            if spec.final_softmax {
                layers.push(LayerKind::FinalSoftmax);
            }
        };

        match spec.variant {
            Variant::AvgPoolFc => {
                layers.push(LayerKind::GlobalMeanPool);
                layers.push(LayerKind::Linear {
                    name: "head".into(),
                    layer: LinearLayer::new(spec.d_in, spec.bins, &mut rng),
                });
                if spec.final_softmax {
                    layers.push(LayerKind::FinalSoftmax);
                }
            }
            Variant::AvgPoolEd => {
                layers.push(LayerKind::GlobalMeanPool);
                push_encoder(&mut layers, &mut rng, spec.d_in);
                push_decoder(&mut layers, &mut rng);
            }
            Variant::GcnGmp => {
                push_encoder(&mut layers, &mut rng, spec.d_in);
                layers.push(LayerKind::Dropout { p: spec.drop_p });
                layers.push(LayerKind::Gcn {
                    name: "gcn1".into(),
                    layer: LinearLayer::new(spec.d_enc, spec.d_enc, &mut rng),
                    aggregate: Aggregate::Mean,
                });
                layers.push(LayerKind::Relu);
                layers.push(LayerKind::GraphSizeNorm);
                layers.push(LayerKind::GlobalMeanPool);
                push_decoder(&mut layers, &mut rng);
            }
            Variant::Gat1Gmp | Variant::Gat1Gatp | Variant::Gat3Gatp => {
                push_encoder(&mut layers, &mut rng, spec.d_in);
                for i in 1..=spec.variant.blocks() {
                    layers.push(LayerKind::Dropout { p: spec.drop_p });
                    let mut gat = GatLayer::new(
                        spec.d_enc,
                        spec.d_head(),
                        spec.d_att,
                        spec.heads,
                        HeadCombine::Concat,
                        &mut rng,
                    );
                    gat.self_loops = spec.self_loops;
                    layers.push(LayerKind::Gat {
                        name: format!("gat{i}"),
                        layer: gat,
                    });
                    layers.push(LayerKind::Relu);
                    layers.push(LayerKind::GraphSizeNorm);
                }
                if spec.variant.uses_gated_pool() {
                    layers.push(LayerKind::GatPool {
                        name: "gatp".into(),
                        layer: GatPool::new(spec.d_enc, spec.heads, &mut rng),
                    });
                } else {
                    layers.push(LayerKind::GlobalMeanPool);
                }
                push_decoder(&mut layers, &mut rng);
            }
        }
        Ok(Model { spec, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Visits every trainable tensor in the fixed traversal order shared by
    /// [`Model::bind_params`], gradient collection, and checkpoints.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor<T>)) {
        for layer in &self.layers {
            match layer {
                LayerKind::Linear { name, layer } | LayerKind::Gcn { name, layer, .. } => {
                    f(&format!("{name}.weight"), &layer.weight);
                    f(&format!("{name}.bias"), &layer.bias);
                }
                LayerKind::BatchNorm { name, layer } => {
                    f(&format!("{name}.scale"), &layer.scale);
                    f(&format!("{name}.shift"), &layer.shift);
                }
                LayerKind::Gat { name, layer } => {
                    for k in 0..layer.heads() {
                        f(&format!("{name}.h{k}.value_w"), &layer.value_w[k]);
                        f(&format!("{name}.h{k}.attn_u"), &layer.attn_u[k]);
                        f(&format!("{name}.h{k}.attn_a"), &layer.attn_a[k]);
                    }
                }
                LayerKind::GatPool { name, layer } => {
                    for (k, gate) in layer.gates.iter().enumerate() {
                        f(&format!("{name}.h{k}.weight"), &gate.weight);
                        f(&format!("{name}.h{k}.bias"), &gate.bias);
                    }
                }
                _ => {}
            }
        }
    }

    /// Mutable twin of [`Model::visit_params`], same order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        for layer in &mut self.layers {
            match layer {
                LayerKind::Linear { name, layer } | LayerKind::Gcn { name, layer, .. } => {
                    f(&format!("{name}.weight"), &mut layer.weight);
                    f(&format!("{name}.bias"), &mut layer.bias);
                }
                LayerKind::BatchNorm { name, layer } => {
                    f(&format!("{name}.scale"), &mut layer.scale);
                    f(&format!("{name}.shift"), &mut layer.shift);
                }
                LayerKind::Gat { name, layer } => {
                    for k in 0..layer.value_w.len() {
                        f(&format!("{name}.h{k}.value_w"), &mut layer.value_w[k]);
                        f(&format!("{name}.h{k}.attn_u"), &mut layer.attn_u[k]);
                        f(&format!("{name}.h{k}.attn_a"), &mut layer.attn_a[k]);
                    }
                }
                LayerKind::GatPool { name, layer } => {
                    for (k, gate) in layer.gates.iter_mut().enumerate() {
                        f(&format!("{name}.h{k}.weight"), &mut gate.weight);
                        f(&format!("{name}.h{k}.bias"), &mut gate.bias);
                    }
                }
                _ => {}
            }
        }
    }

    /// Visits non-trainable state (batch norm running moments).
    pub fn visit_buffers(&self, mut f: impl FnMut(&str, &Tensor<T>)) {
        for layer in &self.layers {
            if let LayerKind::BatchNorm { name, layer } = layer {
                f(&format!("{name}.running_mean"), &layer.running_mean);
                f(&format!("{name}.running_var"), &layer.running_var);
            }
        }
    }

    pub fn visit_buffers_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        for layer in &mut self.layers {
            if let LayerKind::BatchNorm { name, layer } = layer {
                f(&format!("{name}.running_mean"), &mut layer.running_mean);
                f(&format!("{name}.running_var"), &mut layer.running_var);
            }
        }
    }

    /// Trainable parameter count.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, t| n += t.numel());
        n
    }

    /// Binds every trainable tensor onto `tape`, as leaves (gradient-carrying)
    /// or constants.
    pub fn bind_params(&self, tape: &Tape<T>, as_leaves: bool) -> TapeResult<ParamBindings> {
        let mut values = Vec::new();
        let mut err = None;
        self.visit_params(|_, t| {
            if err.is_some() {
                return;
            }
            let r = if as_leaves {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            };
            match r {
                Ok(v) => values.push(v),
                Err(e) => err = Some(e),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(ParamBindings { values }),
        }
    }

    fn forward_raw(
        &self,
        tape: &Tape<T>,
        batch: &GraphBatch,
        mut pass: Pass<'_>,
        bindings: &ParamBindings,
    ) -> Result<ForwardRaw<T>, ModelError> {
        if batch.feature_dim() != self.spec.d_in {
            return Err(ModelError::InputWidth {
                expected: self.spec.d_in,
                got: batch.feature_dim(),
            });
        }
        let mode = match pass {
            Pass::Train { .. } => Mode::Train,
            Pass::Eval => Mode::Eval,
        };
        let mut cursor = bindings.values.iter().copied();
        let mut next = || {
            cursor
                .next()
                .expect("binding list shorter than the model's parameter walk")
        };
        let counts = &batch.counts;
        let mut cur = tape.constant(batch.nodes.cast::<T>())?;
        let mut attention = Vec::new();
        let mut bn_updates = Vec::new();

        for (idx, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerKind::Linear { .. } => {
                    let (w, b) = (next(), next());
                    linear_forward(tape, cur, w, b)?
                }
                LayerKind::Relu => tape.relu(cur)?,
                LayerKind::BatchNorm { layer, .. } => {
                    let (scale, shift) = (next(), next());
                    match mode {
                        Mode::Train => {
                            let out = batch_norm_train(tape, cur, scale, shift, layer.epsilon)?;
                            bn_updates.push((idx, out.batch_mean, out.batch_var));
                            out.out
                        }
                        Mode::Eval => batch_norm_eval(tape, cur, layer)?,
                    }
                }
                LayerKind::Dropout { p } => match &mut pass {
                    Pass::Train { rng } => dropout(tape, cur, *p, Mode::Train, *rng)?,
                    Pass::Eval => cur,
                },
                LayerKind::Gat { layer, .. } => {
                    let heads = layer.heads();
                    let mut binds = GatBindings {
                        value_w: Vec::with_capacity(heads),
                        attn_u: Vec::with_capacity(heads),
                        attn_a: Vec::with_capacity(heads),
                    };
                    for _ in 0..heads {
                        binds.value_w.push(next());
                        binds.attn_u.push(next());
                        binds.attn_a.push(next());
                    }
                    let out = gat_forward(
                        tape,
                        cur,
                        &binds,
                        counts,
                        T::from_f64(layer.slope),
                        layer.combine,
                        layer.self_loops,
                    )?;
                    for (g, k, alpha) in out.attention {
                        attention.push((idx, g, k, alpha));
                    }
                    out.nodes
                }
                LayerKind::Gcn { aggregate, .. } => {
                    let (w, b) = (next(), next());
                    gcn_forward(tape, cur, w, b, counts, *aggregate)?
                }
                LayerKind::GraphSizeNorm => graph_size_norm(tape, cur, counts)?,
                LayerKind::GlobalMeanPool => global_mean_pool(tape, cur, counts)?,
                LayerKind::GatPool { layer, .. } => {
                    let gates: Vec<(Value, Value)> =
                        (0..layer.heads()).map(|_| (next(), next())).collect();
                    gatp_forward(tape, cur, &gates, counts)?
                }
                LayerKind::FinalSoftmax => tape.row_softmax(cur)?,
            };
        }
        Ok(ForwardRaw {
            output: cur,
            attention,
            bn_updates,
        })
    }

    /// Gradient-free forward in eval mode (running batch-norm moments, no
    /// dropout). Output is `[graphs, bins]`.
    pub fn forward_eval(&self, tape: &Tape<T>, batch: &GraphBatch) -> Result<Value, ModelError> {
        let binds = self.bind_params(tape, false)?;
        Ok(self.forward_raw(tape, batch, Pass::Eval, &binds)?.output)
    }

    /// Convenience: eval forward on a private tape, returning the output tensor.
    pub fn predict(&self, batch: &GraphBatch) -> Result<Tensor<T>, ModelError> {
        let tape = Tape::new();
        let out = self.forward_eval(&tape, batch)?;
        Ok(tape.value(out))
    }

    /// Train-mode forward: parameters become gradient-carrying leaves,
    /// dropout draws from `rng`, and fresh batch statistics are folded into
    /// the running batch-norm moments before returning.
    pub fn forward_train(
        &mut self,
        tape: &Tape<T>,
        batch: &GraphBatch,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrainPass, ModelError> {
        let bindings = self.bind_params(tape, true)?;
        let raw = self.forward_raw(tape, batch, Pass::Train { rng }, &bindings)?;
        for (idx, mean, var) in raw.bn_updates {
            if let LayerKind::BatchNorm { layer, .. } = &mut self.layers[idx] {
                layer.update_running(&mean, &var);
            }
        }
        Ok(TrainPass {
            output: raw.output,
            bindings,
            attention: raw.attention,
        })
    }

    /// Forward with caller-managed bindings and mode; the gradient-check
    /// harness uses this to treat parameters as external inputs. Batch-norm
    /// running moments are *not* updated.
    pub fn forward_bound(
        &self,
        tape: &Tape<T>,
        batch: &GraphBatch,
        pass: Pass<'_>,
        bindings: &ParamBindings,
    ) -> Result<Value, ModelError> {
        Ok(self.forward_raw(tape, batch, pass, bindings)?.output)
    }

    /// Gradients for every binding, in traversal order.
    pub fn collect_grads(&self, tape: &Tape<T>, bindings: &ParamBindings) -> Vec<Tensor<T>> {
        bindings.values.iter().map(|&v| tape.grad(v)).collect()
    }
}

// ---------------------------------------------------------------- checkpoints

const CKPT_MAGIC: &[u8; 8] = b"GATCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad magic (not a checkpoint file)")]
    BadMagic { path: PathBuf },
    #[error("{path}: malformed checkpoint: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn ckpt_header(spec: &ModelSpec, trained_epochs: Option<u32>) -> String {
    let mut s = String::new();
    s.push_str(&format!("variant={}\n", spec.variant.name()));
    s.push_str(&format!("d_in={}\n", spec.d_in));
    s.push_str(&format!("d_enc={}\n", spec.d_enc));
    s.push_str(&format!("d_att={}\n", spec.d_att));
    s.push_str(&format!("heads={}\n", spec.heads));
    s.push_str(&format!("d_dec={}\n", spec.d_dec));
    s.push_str(&format!("bins={}\n", spec.bins));
    s.push_str(&format!("drop_p={}\n", spec.drop_p));
    s.push_str(&format!("final_softmax={}\n", spec.final_softmax));
    s.push_str(&format!("self_loops={}\n", spec.self_loops));
    if let Some(e) = trained_epochs {
        s.push_str(&format!("trained_epochs={e}\n"));
    }
    s
}

/// Serializes a model: a text header with the spec (and optionally how many
/// epochs it has been trained), then every trainable tensor and every buffer
/// in traversal order. Writing, loading, and writing again is byte-stable.
pub fn checkpoint_save(
    model: &Model<f32>,
    trained_epochs: Option<u32>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let header = ckpt_header(model.spec(), trained_epochs);
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());

    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
    model.visit_params(|name, t| tensors.push((name.to_string(), t.clone())));
    model.visit_buffers(|name, t| tensors.push((name.to_string(), t.clone())));
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| CheckpointError::File {
        path: path.to_path_buf(),
        source: e,
    })?;
    f.write_all(&buf).map_err(|e| CheckpointError::File {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Loads a checkpoint saved by [`checkpoint_save`], returning the model and
/// the stored epoch count (if any).
pub fn checkpoint_load(path: &Path) -> Result<(Model<f32>, Option<u32>), CheckpointError> {
    let bytes = fs::read(path).map_err(|e| CheckpointError::File {
        path: path.to_path_buf(),
        source: e,
    })?;
    let malformed = |reason: String| CheckpointError::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 || &bytes[0..8] != CKPT_MAGIC {
        if bytes.len() >= 8 && &bytes[0..8] != CKPT_MAGIC {
            return Err(CheckpointError::BadMagic {
                path: path.to_path_buf(),
            });
        }
        return Err(malformed("file too short".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(malformed("header is truncated".into()));
    }
    let header = std::str::from_utf8(&bytes[12..12 + header_len])
        .map_err(|_| malformed("header is not UTF-8".into()))?;

    let mut fields: HashMap<&str, &str> = HashMap::new();
    for line in header.lines() {
        let Some((k, v)) = line.split_once('=') else {
            return Err(malformed(format!("header line '{line}' is not key=value")));
        };
        if fields.insert(k, v).is_some() {
            return Err(malformed(format!("duplicate header key '{k}'")));
        }
    }
    let take = |k: &str| -> Result<&str, CheckpointError> {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| malformed(format!("missing header key '{k}'")))
    };
    let parse_usize = |k: &str| -> Result<usize, CheckpointError> {
        take(k)?
            .parse()
            .map_err(|_| malformed(format!("header key '{k}' is not an integer")))
    };
    let parse_bool = |k: &str| -> Result<bool, CheckpointError> {
        match take(k)? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(malformed(format!("header key '{k}' is not a bool: {other}"))),
        }
    };
    let variant = Variant::parse(take("variant")?)
        .ok_or_else(|| malformed(format!("unknown variant '{}'", fields["variant"])))?;
    let spec = ModelSpec {
        variant,
        d_in: parse_usize("d_in")?,
        d_enc: parse_usize("d_enc")?,
        d_att: parse_usize("d_att")?,
        heads: parse_usize("heads")?,
        d_dec: parse_usize("d_dec")?,
        bins: parse_usize("bins")?,
        drop_p: take("drop_p")?
            .parse()
            .map_err(|_| malformed("drop_p is not a float".into()))?,
        final_softmax: parse_bool("final_softmax")?,
        self_loops: parse_bool("self_loops")?,
    };
    let trained_epochs = match fields.get("trained_epochs") {
        Some(v) => Some(
            v.parse::<u32>()
                .map_err(|_| malformed("trained_epochs is not an integer".into()))?,
        ),
        None => None,
    };

    // Parse the tensor table.
    let mut off = 12 + header_len;
    let need = |off: usize, n: usize| -> Result<(), CheckpointError> {
        if bytes.len() < off + n {
            Err(CheckpointError::Malformed {
                path: path.to_path_buf(),
                reason: format!("unexpected end of file at offset {off}"),
            })
        } else {
            Ok(())
        }
    };
    need(off, 4)?;
    let count = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    off += 4;
    let mut stored: HashMap<String, Tensor<f32>> = HashMap::new();
    for _ in 0..count {
        need(off, 4)?;
        let name_len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        need(off, name_len + 8)?;
        let name = std::str::from_utf8(&bytes[off..off + name_len])
            .map_err(|_| malformed("tensor name is not UTF-8".into()))?
            .to_string();
        off += name_len;
        let rows = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as usize;
        off += 8;
        let numel = rows
            .checked_mul(cols)
            .ok_or_else(|| malformed(format!("tensor '{name}' has overflowing shape")))?;
        need(off, numel * 4)?;
        let mut data = Vec::with_capacity(numel);
        for chunk in bytes[off..off + numel * 4].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        off += numel * 4;
        if stored
            .insert(name.clone(), Tensor::from_vec(&[rows, cols], data))
            .is_some()
        {
            return Err(malformed(format!("duplicate tensor '{name}'")));
        }
    }
    if off != bytes.len() {
        return Err(malformed(format!(
            "{} trailing bytes after the tensor table",
            bytes.len() - off
        )));
    }

    // Pour the stored tensors into a freshly built model.
    let mut model: Model<f32> = Model::build(spec, 0)?;
    let mut missing: Vec<String> = Vec::new();
    let mut fill = |name: &str, t: &mut Tensor<f32>| match stored.remove(name) {
        Some(loaded) => {
            if loaded.shape() != t.shape() {
                missing.push(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    loaded.shape(),
                    t.shape()
                ));
            } else {
                *t = loaded;
            }
        }
        None => missing.push(format!("missing tensor '{name}'")),
    };
    model.visit_params_mut(|name, t| fill(name, t));
    model.visit_buffers_mut(|name, t| fill(name, t));
    if let Some(first) = missing.first() {
        return Err(malformed(first.clone()));
    }
    if let Some(extra) = stored.keys().next() {
        return Err(malformed(format!("unexpected tensor '{extra}'")));
    }
    Ok((model, trained_epochs))
}
