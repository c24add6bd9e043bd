//! Neural layers over batched feature graphs.
//!
//! Every forward here is a pure function from tape values to a tape value;
//! parameter structs (`LinearLayer`, `GatLayer`, ...) own the tensors between
//! steps, and the caller binds them onto a tape (as leaves when training,
//! constants when not) before calling the forward.
//!
//! Graphs arrive batched: one `[total_nodes, d]` matrix plus per-graph row
//! counts (see [`crate::graph::GraphBatch`]). Within-graph operations —
//! attention, size normalization, pooled readouts — are computed on each
//! graph's contiguous row block, so a batched pass and a sequence of
//! single-graph passes produce the same arithmetic. Attention in particular
//! never materializes a matrix larger than `n_g × n_g` for graph `g`.
//!
//! Batch norm and dropout are deliberately *compositions* of tape primitives
//! rather than primitives of their own: batch statistics flow through the
//! same reverse sweep as everything else, and dropout is a constant mask.

use crate::graph::GraphError;
use crate::tape::{Tape, TapeError, Value};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{layer}: input width {got} does not match expected {expected}")]
    WidthMismatch {
        layer: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("attention head {head} expects a score vector of length {expected}, got {got}")]
    BadAttentionVector {
        head: usize,
        expected: usize,
        got: usize,
    },
    #[error("attention produced non-finite coefficients (graph {graph}, head {head})")]
    NonFiniteAttention { graph: usize, head: usize },
    #[error("{layer}: needs at least one head")]
    NoHeads { layer: &'static str },
    #[error("batch norm in train mode needs at least 2 rows, got {rows}")]
    DegenerateBatch { rows: usize },
    #[error("dropout probability must lie in [0, 1), got {p}")]
    BadDropProb { p: f64 },
}

pub type LayerResult<V> = Result<V, LayerError>;

/// Train/eval switch for layers whose behavior differs between the two.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Uniform init on `±sqrt(1/fan_in)`, drawn as `f64` and cast, so `f32` and
/// `f64` models built from the same seed agree to cast precision.
pub fn init_uniform<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data)
}

// ---------------------------------------------------------------- linear

/// Affine map `x @ weight + bias`.
#[derive(Clone)]
pub struct LinearLayer<T> {
    /// `[d_in, d_out]`
    pub weight: Tensor<T>,
    /// `[1, d_out]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        LinearLayer {
            weight: init_uniform(&[d_in, d_out], d_in, rng),
            bias: Tensor::zeros(&[1, d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }
}

pub fn linear_forward<T: Scalar>(
    tape: &Tape<T>,
    x: Value,
    weight: Value,
    bias: Value,
) -> LayerResult<Value> {
    let xw = tape.shape(x)[1];
    let ww = tape.shape(weight)[0];
    if xw != ww {
        return Err(LayerError::WidthMismatch {
            layer: "linear",
            expected: ww,
            got: xw,
        });
    }
    Ok(tape.add_row(tape.matmul(x, weight)?, bias)?)
}

// ---------------------------------------------------------------- gcn

/// How a message-passing layer folds neighbor rows together.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Aggregate {
    Sum,
    Mean,
}

/// Plain graph convolution on complete graphs without self loops: transform
/// every node, then replace it with the sum (or mean) of all *other* nodes
/// in its graph. On a complete graph that is `segment_sum − self`, so no
/// adjacency structure is ever materialized. A single-node graph has no
/// neighbors and yields a zero row.
pub fn gcn_forward<T: Scalar>(
    tape: &Tape<T>,
    x: Value,
    weight: Value,
    bias: Value,
    counts: &[usize],
    aggregate: Aggregate,
) -> LayerResult<Value> {
    let h = linear_forward(tape, x, weight, bias)?;
    let per_graph = tape.segment_sum(h, counts)?;
    let spread = tape.segment_broadcast(per_graph, counts)?;
    let neighbors = tape.sub(spread, h)?;
    match aggregate {
        Aggregate::Sum => Ok(neighbors),
        Aggregate::Mean => {
            // Divisor is n_g - 1 per graph (floored at 1 so single-node
            // graphs stay the zero row instead of dividing zero by zero).
            let mut parts = Vec::with_capacity(counts.len());
            let mut row = 0;
            for &c in counts {
                let g = tape.narrow(neighbors, 0, row, c)?;
                let inv = T::one() / T::from_f64(c.saturating_sub(1).max(1) as f64);
                parts.push(tape.scale(g, inv)?);
                row += c;
            }
            Ok(tape.concat(0, &parts)?)
        }
    }
}

// ---------------------------------------------------------------- gat

/// How the per-head outputs of an attention layer are merged.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum HeadCombine {
    /// Feature-wise concatenation; output width is `heads * d_head`.
    Concat,
    /// Element-wise mean; output width is `d_head`.
    Average,
}

/// Multi-head self-attention over each graph's complete neighborhood.
///
/// Per head `k`, node pair `(i, j)` gets the raw score
/// `leaky_relu(a_src·(U x_i) + a_dst·(U x_j))` — the concatenation-style
/// scoring split into its two halves so it costs two matrix-vector products
/// instead of an `n²`-row concat. Scores are softmax-normalized over each
/// node's neighbors (self excluded unless `self_loops`), and the node's new
/// feature is the attention-weighted sum of transformed neighbors.
#[derive(Clone)]
pub struct GatLayer<T> {
    /// Per head: value transform `[d_in, d_head]`.
    pub value_w: Vec<Tensor<T>>,
    /// Per head: score transform `[d_in, d_att]`.
    pub attn_u: Vec<Tensor<T>>,
    /// Per head: score vector `[2*d_att, 1]` (source half then destination half).
    pub attn_a: Vec<Tensor<T>>,
    pub slope: f64,
    pub combine: HeadCombine,
    pub self_loops: bool,
}

impl<T: Scalar> GatLayer<T> {
    pub fn new(
        d_in: usize,
        d_head: usize,
        d_att: usize,
        heads: usize,
        combine: HeadCombine,
        rng: &mut impl Rng,
    ) -> Self {
        let mut value_w = Vec::with_capacity(heads);
        let mut attn_u = Vec::with_capacity(heads);
        let mut attn_a = Vec::with_capacity(heads);
        for _ in 0..heads {
            value_w.push(init_uniform(&[d_in, d_head], d_in, rng));
            attn_u.push(init_uniform(&[d_in, d_att], d_in, rng));
            attn_a.push(init_uniform(&[2 * d_att, 1], 2 * d_att, rng));
        }
        GatLayer {
            value_w,
            attn_u,
            attn_a,
            slope: 0.2,
            combine,
            self_loops: false,
        }
    }

    pub fn heads(&self) -> usize {
        self.value_w.len()
    }

    pub fn d_in(&self) -> usize {
        self.value_w[0].rows()
    }

    pub fn d_out(&self) -> usize {
        match self.combine {
            HeadCombine::Concat => self.heads() * self.value_w[0].cols(),
            HeadCombine::Average => self.value_w[0].cols(),
        }
    }
}

/// Tape bindings for one [`GatLayer`]'s parameters, in the same head order.
pub struct GatBindings {
    pub value_w: Vec<Value>,
    pub attn_u: Vec<Value>,
    pub attn_a: Vec<Value>,
}

/// Forward result: new node features plus every attention matrix, exposed
/// so callers can audit the coefficients (each is `[n_g, n_g]`).
pub struct GatOutput {
    pub nodes: Value,
    /// `(graph, head, alpha)` triples.
    pub attention: Vec<(usize, usize, Value)>,
}

pub fn gat_forward<T: Scalar>(
    tape: &Tape<T>,
    x: Value,
    params: &GatBindings,
    counts: &[usize],
    slope: T,
    combine: HeadCombine,
    self_loops: bool,
) -> LayerResult<GatOutput> {
    let heads = params.value_w.len();
    if heads == 0 || params.attn_u.len() != heads || params.attn_a.len() != heads {
        return Err(LayerError::NoHeads { layer: "gat" });
    }
    let d_in = tape.shape(x)[1];

    // Per-head projections over the whole batch.
    let mut values = Vec::with_capacity(heads);
    let mut src_scores = Vec::with_capacity(heads);
    let mut dst_scores = Vec::with_capacity(heads);
    for k in 0..heads {
        let w_rows = tape.shape(params.value_w[k])[0];
        if w_rows != d_in {
            return Err(LayerError::WidthMismatch {
                layer: "gat value transform",
                expected: w_rows,
                got: d_in,
            });
        }
        let u_shape = tape.shape(params.attn_u[k]);
        if u_shape[0] != d_in {
            return Err(LayerError::WidthMismatch {
                layer: "gat score transform",
                expected: u_shape[0],
                got: d_in,
            });
        }
        let d_att = u_shape[1];
        let a_shape = tape.shape(params.attn_a[k]);
        if a_shape != vec![2 * d_att, 1] {
            return Err(LayerError::BadAttentionVector {
                head: k,
                expected: 2 * d_att,
                got: a_shape[0],
            });
        }
        let u = tape.matmul(x, params.attn_u[k])?; // (N, d_att)
        let a_src = tape.narrow(params.attn_a[k], 0, 0, d_att)?;
        let a_dst = tape.narrow(params.attn_a[k], 0, d_att, d_att)?;
        values.push(tape.matmul(x, params.value_w[k])?);
        src_scores.push(tape.matmul(u, a_src)?); // (N, 1)
        dst_scores.push(tape.matmul(u, a_dst)?); // (N, 1)
    }

    let mut graph_outputs = Vec::with_capacity(counts.len());
    let mut attention = Vec::new();
    let mut row = 0;
    for (g, &n) in counts.iter().enumerate() {
        let ones_row = tape.constant(Tensor::filled(&[1, n], T::one()))?;
        let mask = neighborhood_mask(n, self_loops);
        let mut head_outs = Vec::with_capacity(heads);
        for k in 0..heads {
            let s = tape.narrow(src_scores[k], 0, row, n)?;
            let t = tape.narrow(dst_scores[k], 0, row, n)?;
            // pre[i][j] = s_i + t_j
            let left = tape.matmul(s, ones_row)?;
            let pre = tape.add_row(left, tape.transpose(t)?)?;
            let scores = tape.leaky_relu(pre, slope)?;
            let alpha = tape.masked_row_softmax(scores, &mask)?;
            if !tape.with_value(alpha, Tensor::all_finite) {
                return Err(LayerError::NonFiniteAttention { graph: g, head: k });
            }
            let v = tape.narrow(values[k], 0, row, n)?;
            head_outs.push(tape.matmul(alpha, v)?);
            attention.push((g, k, alpha));
        }
        let combined = match combine {
            HeadCombine::Concat => tape.concat(1, &head_outs)?,
            HeadCombine::Average => {
                let mut acc = head_outs[0];
                for &h in &head_outs[1..] {
                    acc = tape.add(acc, h)?;
                }
                tape.scale(acc, T::one() / T::from_f64(heads as f64))?
            }
        };
        graph_outputs.push(combined);
        row += n;
    }
    Ok(GatOutput {
        nodes: tape.concat(0, &graph_outputs)?,
        attention,
    })
}

/// Row-major `n x n` mask admitting every ordered pair of distinct nodes
/// (plus the diagonal when `self_loops`).
fn neighborhood_mask(n: usize, self_loops: bool) -> Vec<bool> {
    let mut mask = vec![true; n * n];
    if !self_loops {
        for i in 0..n {
            mask[i * n + i] = false;
        }
    }
    mask
}

// ---------------------------------------------------------------- norms

/// Divides every node row by its graph's node count.
pub fn graph_size_norm<T: Scalar>(
    tape: &Tape<T>,
    x: Value,
    counts: &[usize],
) -> LayerResult<Value> {
    let mut parts = Vec::with_capacity(counts.len());
    let mut row = 0;
    for &c in counts {
        let g = tape.narrow(x, 0, row, c)?;
        parts.push(tape.scale(g, T::one() / T::from_f64(c as f64))?);
        row += c;
    }
    Ok(tape.concat(0, &parts)?)
}

/// Batch normalization state. `scale`/`shift` are trainable; the running
/// moments are buffers updated outside the tape after each training step.
/// Variance is biased (divides by `n`) in both the batch statistics and the
/// running estimate.
#[derive(Clone)]
pub struct BatchNorm<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(d: usize) -> Self {
        BatchNorm {
            scale: Tensor::filled(&[1, d], T::one()),
            shift: Tensor::zeros(&[1, d]),
            running_mean: Tensor::zeros(&[1, d]),
            running_var: Tensor::filled(&[1, d], T::one()),
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.cols()
    }

    /// Folds fresh batch moments into the running estimates:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&mut self, batch_mean: &Tensor<T>, batch_var: &Tensor<T>) {
        let m = T::from_f64(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in self
            .running_mean
            .data_mut()
            .iter_mut()
            .zip(batch_mean.data())
        {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(batch_var.data()) {
            *r = keep * *r + m * b;
        }
    }
}

/// Train-mode batch norm output plus the batch moments the caller should
/// fold into the running estimates.
pub struct BnTrainOutput<T> {
    pub out: Value,
    pub batch_mean: Tensor<T>,
    pub batch_var: Tensor<T>,
}

/// Train-mode batch norm, differentiable through the batch statistics.
///
/// Built from tape primitives: the mean is a `(1/n)·ones @ x` matmul, the
/// inverse std is `exp(-0.5 * log(var + eps))`, and broadcasts are ones-column
/// matmuls. Needs at least two rows — a single-row batch has zero variance
/// everywhere and trains nothing.
pub fn batch_norm_train<T: Scalar>(
    tape: &Tape<T>,
    x: Value,
    scale: Value,
    shift: Value,
    epsilon: f64,
) -> LayerResult<BnTrainOutput<T>> {
    let shape = tape.shape(x);
    let (n, d) = (shape[0], shape[1]);
    if n < 2 {
        return Err(LayerError::DegenerateBatch { rows: n });
    }
    let mean_weights = tape.constant(Tensor::filled(&[1, n], T::one() / T::from_f64(n as f64)))?;
    let ones_col = tape.constant(Tensor::filled(&[n, 1], T::one()))?;
    let mu = tape.matmul(mean_weights, x)?; // (1, d)
    let centered = tape.add_row(x, tape.scale(mu, -T::one())?)?;
    let var = tape.matmul(mean_weights, tape.mul(centered, centered)?)?; // biased
    let eps_row = tape.constant(Tensor::filled(&[1, d], T::from_f64(epsilon)))?;
    let inv_std = tape.exp(tape.scale(tape.log(tape.add(var, eps_row)?)?, T::from_f64(-0.5))?)?;
    let eff_scale = tape.mul(inv_std, scale)?;
    let normalized = tape.mul(centered, tape.matmul(ones_col, eff_scale)?)?;
    let out = tape.add_row(normalized, shift)?;
    Ok(BnTrainOutput {
        out,
        batch_mean: tape.value(mu),
        batch_var: tape.value(var),
    })
}

/// Eval-mode batch norm using the running moments; everything but `x` enters
/// as constants, collapsed to one multiply and one row add.
pub fn batch_norm_eval<T: Scalar>(tape: &Tape<T>, x: Value, bn: &BatchNorm<T>) -> LayerResult<Value> {
    let n = tape.shape(x)[0];
    let d = bn.dim();
    let got = tape.shape(x)[1];
    if got != d {
        return Err(LayerError::WidthMismatch {
            layer: "batch norm",
            expected: d,
            got,
        });
    }
    let mut a = Vec::with_capacity(d);
    let mut b = Vec::with_capacity(d);
    for j in 0..d {
        let inv = 1.0 / (bn.running_var.data()[j].to_f64() + bn.epsilon).sqrt();
        let aj = bn.scale.data()[j].to_f64() * inv;
        a.push(T::from_f64(aj));
        b.push(T::from_f64(
            bn.shift.data()[j].to_f64() - bn.running_mean.data()[j].to_f64() * aj,
        ));
    }
    let a = tape.constant(Tensor::from_vec(&[1, d], a))?;
    let b = tape.constant(Tensor::from_vec(&[1, d], b))?;
    let ones_col = tape.constant(Tensor::filled(&[n, 1], T::one()))?;
    Ok(tape.add_row(tape.mul(x, tape.matmul(ones_col, a)?)?, b)?)
}

// ---------------------------------------------------------------- pooling

/// Mean of each graph's node rows: `[total_nodes, d] -> [graphs, d]`.
pub fn global_mean_pool<T: Scalar>(
    tape: &Tape<T>,
    x: Value,
    counts: &[usize],
) -> LayerResult<Value> {
    Ok(tape.segment_mean(x, counts)?)
}

/// Gated attention readout: `K` scoring heads, each softmax-normalized over
/// a graph's nodes and used as pooling weights; head results are averaged.
#[derive(Clone)]
pub struct GatPool<T> {
    /// Per head: a `d -> 1` scoring map.
    pub gates: Vec<LinearLayer<T>>,
}

impl<T: Scalar> GatPool<T> {
    pub fn new(d_in: usize, heads: usize, rng: &mut impl Rng) -> Self {
        GatPool {
            gates: (0..heads).map(|_| LinearLayer::new(d_in, 1, rng)).collect(),
        }
    }

    pub fn heads(&self) -> usize {
        self.gates.len()
    }
}

/// Forward for [`GatPool`]; `gates` binds each head's `(weight, bias)`.
pub fn gatp_forward<T: Scalar>(
    tape: &Tape<T>,
    x: Value,
    gates: &[(Value, Value)],
    counts: &[usize],
) -> LayerResult<Value> {
    if gates.is_empty() {
        return Err(LayerError::NoHeads { layer: "gated pool" });
    }
    let heads = gates.len();
    let mut score_cols = Vec::with_capacity(heads);
    for &(w, b) in gates {
        score_cols.push(linear_forward(tape, x, w, b)?); // (N, 1)
    }
    let scores = if heads == 1 {
        score_cols[0]
    } else {
        tape.concat(1, &score_cols)? // (N, K)
    };
    let head_mean = tape.constant(Tensor::filled(
        &[1, heads],
        T::one() / T::from_f64(heads as f64),
    ))?;
    let mut pooled = Vec::with_capacity(counts.len());
    let mut row = 0;
    for &n in counts {
        let s = tape.narrow(scores, 0, row, n)?; // (n, K)
        let weights = tape.row_softmax(tape.transpose(s)?)?; // (K, n), rows sum to 1
        let xg = tape.narrow(x, 0, row, n)?;
        let per_head = tape.matmul(weights, xg)?; // (K, d)
        pooled.push(tape.matmul(head_mean, per_head)?); // (1, d)
        row += n;
    }
    Ok(tape.concat(0, &pooled)?)
}

// ---------------------------------------------------------------- dropout

/// Inverted dropout: in train mode each element is zeroed with probability
/// `p` and survivors are scaled by `1/(1-p)`; eval mode (or `p == 0`) passes
/// `x` through untouched. The mask comes from the caller's RNG, so a fixed
/// seed gives a fixed mask.
pub fn dropout<T: Scalar>(
    tape: &Tape<T>,
    x: Value,
    p: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> LayerResult<Value> {
    if !(0.0..1.0).contains(&p) {
        return Err(LayerError::BadDropProb { p });
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x);
    let keep_scale = T::from_f64(1.0 / (1.0 - p));
    let n = shape[0] * shape[1];
    let mask_data = (0..n)
        .map(|_| {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    let mask = tape.constant(Tensor::from_vec(&shape, mask_data))?;
    Ok(tape.mul(x, mask)?)
}
