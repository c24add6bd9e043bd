//! Training: the decayed learning-rate schedule, an Adam optimizer, the two
//! loss heads, and the epoch loop with optional checkpointing.
//!
//! Everything downstream of the seed is deterministic. One generator drives
//! the whole run and is consumed in a fixed order — per epoch: the shuffle,
//! then per batch the per-graph augmentation choices (when enabled) followed
//! by the dropout masks inside the forward pass. Rerunning with the same
//! seed, data, and config reproduces every loss value bit for bit.

use crate::graph::{augment, batch, AugmentPolicy, FeatureGraph, GraphError, BINS};
use crate::metrics::{
    mean_score, plcc, predict_augmented, predict_plain, row_score, srcc, MetricsError,
};
use crate::model::{checkpoint_save, CheckpointError, Model, ModelError};
use crate::tape::{Tape, TapeError, TapeResult, Value};
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("gradient {index} is not finite; refusing to update parameters")]
    NonFiniteGrad { index: usize },
    #[error("optimizer got {got} gradients for {expected} parameters")]
    GradCount { expected: usize, got: usize },
    #[error("training batch size must be at least 2 (batch statistics need two rows)")]
    BatchTooSmall,
    #[error("{loss} loss needs {need} output bins, model has {got}")]
    LossShape {
        loss: &'static str,
        need: usize,
        got: usize,
    },
    #[error("graph '{id}' has no label")]
    MissingLabel { id: String },
    #[error("empty training set")]
    EmptyTrainSet,
}

// ---------------------------------------------------------------- schedule

/// Polynomially decayed learning rate: `lr0 * (1 - epoch/epochs)^lambda`.
/// Reaches exactly zero at `epoch == epochs`.
pub fn lr_at(lr0: f64, lambda: f64, epochs: usize, epoch: usize) -> f64 {
    let frac = 1.0 - (epoch.min(epochs) as f64) / (epochs as f64);
    lr0 * frac.powf(lambda)
}

// ------------------------------------------------------------------- losses

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Mean squared error between the predicted and labeled histograms.
    MseHistogram,
    /// Binary cross-entropy on "mean score above 5", for scalar heads.
    BceBinary,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::MseHistogram => "mse_histogram",
            LossKind::BceBinary => "bce_binary",
        }
    }

    pub fn parse(s: &str) -> Option<LossKind> {
        match s {
            "mse_histogram" => Some(LossKind::MseHistogram),
            "bce_binary" => Some(LossKind::BceBinary),
            _ => None,
        }
    }
}

/// Mean over every entry of the squared difference to the target rows.
pub fn mse_histogram_loss<T: Scalar>(
    tape: &Tape<T>,
    pred: Value,
    target: &Tensor<T>,
) -> TapeResult<Value> {
    let t = tape.constant(target.clone())?;
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    tape.mean_all(sq)
}

/// Binary cross-entropy of "score above 5". `pred` is a `[n, 1]` scalar-head
/// output on the 1..=10 scale; `target` holds 0/1 rows. The logit is the
/// score shifted down by 5 and clamped to ±30 (the sigmoid is saturated far
/// earlier), and the loss uses the softplus identity
/// `bce = log(1 + exp(-x)) + (1 - y) * x` to stay finite everywhere.
pub fn bce_binary_loss<T: Scalar>(
    tape: &Tape<T>,
    pred: Value,
    target: &Tensor<T>,
) -> TapeResult<Value> {
    let n = target.rows();
    let fives = tape.constant(Tensor::filled(&[n, 1], T::from_f64(5.0)))?;
    let shifted = tape.sub(pred, fives)?;
    let x = tape.clamp(shifted, T::from_f64(-30.0), T::from_f64(30.0))?;
    let neg_x = tape.scale(x, T::from_f64(-1.0))?;
    let e = tape.exp(neg_x)?;
    let ones = tape.constant(Tensor::filled(&[n, 1], T::one()))?;
    let softplus = tape.log(tape.add(e, ones)?)?;
    let one_minus_y = {
        let y = tape.constant(target.clone())?;
        tape.sub(ones, y)?
    };
    let linear = tape.mul(one_minus_y, x)?;
    tape.mean_all(tape.add(softplus, linear)?)
}

// --------------------------------------------------------------------- adam

/// Adam with bias correction. Moment state is allocated lazily on the first
/// step and kept in parameter-traversal order.
pub struct Adam<T> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Validates the gradient set and advances the step counter. Refuses —
    /// without touching any state — if a gradient is non-finite or the count
    /// disagrees with earlier steps. Must be followed by [`Adam::update`]
    /// for each index.
    pub fn prepare(&mut self, grads: &[Tensor<T>]) -> Result<(), TrainError> {
        for (index, g) in grads.iter().enumerate() {
            if !g.all_finite() {
                return Err(TrainError::NonFiniteGrad { index });
            }
        }
        if !self.m.is_empty() && self.m.len() != grads.len() {
            return Err(TrainError::GradCount {
                expected: self.m.len(),
                got: grads.len(),
            });
        }
        if self.m.is_empty() {
            for g in grads {
                self.m.push(Tensor::zeros(g.shape()));
                self.v.push(Tensor::zeros(g.shape()));
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Applies the update for parameter `index` under learning rate `lr`.
    /// Arithmetic runs in f64 regardless of the parameter precision.
    pub fn update(&mut self, index: usize, lr: f64, param: &mut Tensor<T>, grad: &Tensor<T>) {
        debug_assert_eq!(param.shape(), grad.shape());
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let m = self.m[index].data_mut();
        let v = self.v[index].data_mut();
        let p = param.data_mut();
        for i in 0..p.len() {
            let g = grad.data()[i].to_f64();
            let mi = self.beta1 * m[i].to_f64() + (1.0 - self.beta1) * g;
            let vi = self.beta2 * v[i].to_f64() + (1.0 - self.beta2) * g * g;
            m[i] = T::from_f64(mi);
            v[i] = T::from_f64(vi);
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p[i] = T::from_f64(p[i].to_f64() - lr * m_hat / (v_hat.sqrt() + self.eps));
        }
    }

    /// Convenience for aligned slices (the epoch loop walks the model's
    /// parameter traversal instead).
    pub fn step_tensors(
        &mut self,
        lr: f64,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
    ) -> Result<(), TrainError> {
        if params.len() != grads.len() {
            return Err(TrainError::GradCount {
                expected: params.len(),
                got: grads.len(),
            });
        }
        self.prepare(grads)?;
        for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            self.update(i, lr, p, g);
        }
        Ok(())
    }
}

// ------------------------------------------------------------------ config

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossKind,
    pub seed: u64,
    /// First epoch index to run. Resuming from a checkpoint sets this to the
    /// number of epochs already trained, so the decay schedule and the epoch
    /// numbering continue where they left off.
    pub start_epoch: usize,
    /// Random crop/flip view per graph per step.
    pub augment: bool,
    /// Validation scoring through all eight views (slower) instead of one.
    pub eval_augment: bool,
    /// Stop once validation linear correlation reaches this value.
    pub stop_at_val_plcc: Option<f64>,
    /// When set: per-epoch checkpoints, a `best.ckpt`, and `train_log.csv`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            lambda: 2.5,
            epochs: 30,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossKind::MseHistogram,
            seed: 0,
            start_epoch: 0,
            augment: true,
            eval_augment: false,
            stop_at_val_plcc: None,
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_plcc: Option<f64>,
    pub val_srcc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    /// Epoch with the best validation linear correlation, if any was scored.
    pub best_epoch: Option<usize>,
    pub best_val_plcc: Option<f64>,
}

/// Renders epoch records as the `train_log.csv` table.
pub fn epoch_log_csv(records: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("epoch,lr,train_loss,val_plcc,val_srcc\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch,
            r.lr,
            r.train_loss,
            opt(r.val_plcc),
            opt(r.val_srcc)
        ));
    }
    s
}

fn loss_targets(
    kind: LossKind,
    bins: usize,
    graphs: &[FeatureGraph],
) -> Result<Tensor<f32>, TrainError> {
    match kind {
        LossKind::MseHistogram => {
            if bins != BINS {
                return Err(TrainError::LossShape {
                    loss: "mse_histogram",
                    need: BINS,
                    got: bins,
                });
            }
            let mut data = Vec::with_capacity(graphs.len() * BINS);
            for g in graphs {
                let label = g.label.as_ref().ok_or_else(|| TrainError::MissingLabel {
                    id: g.id.clone(),
                })?;
                data.extend_from_slice(label.bins());
            }
            Ok(Tensor::from_vec(&[graphs.len(), BINS], data))
        }
        LossKind::BceBinary => {
            if bins != 1 {
                return Err(TrainError::LossShape {
                    loss: "bce_binary",
                    need: 1,
                    got: bins,
                });
            }
            let mut data = Vec::with_capacity(graphs.len());
            for g in graphs {
                let label = g.label.as_ref().ok_or_else(|| TrainError::MissingLabel {
                    id: g.id.clone(),
                })?;
                data.push(if mean_score(label) >= 5.0 { 1.0 } else { 0.0 });
            }
            Ok(Tensor::from_vec(&[graphs.len(), 1], data))
        }
    }
}

fn apply_loss(
    kind: LossKind,
    tape: &Tape<f32>,
    pred: Value,
    target: &Tensor<f32>,
) -> TapeResult<Value> {
    match kind {
        LossKind::MseHistogram => mse_histogram_loss(tape, pred, target),
        LossKind::BceBinary => bce_binary_loss(tape, pred, target),
    }
}

fn val_scores(
    model: &Model<f32>,
    val: &[FeatureGraph],
    cfg: &TrainConfig,
) -> Result<(Option<f64>, Option<f64>), TrainError> {
    let rows = if cfg.eval_augment {
        predict_augmented(model, val, cfg.batch_size)?
    } else {
        predict_plain(model, val, cfg.batch_size)?
    };
    let pred: Vec<f64> = rows.iter().map(|r| row_score(r)).collect();
    let gt: Vec<f64> = val
        .iter()
        .map(|g| match &g.label {
            Some(h) => Ok(mean_score(h)),
            None => Err(TrainError::MissingLabel { id: g.id.clone() }),
        })
        .collect::<Result<_, _>>()?;
    let soft = |r: Result<f64, MetricsError>| match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricsError::ZeroVariance | MetricsError::TooFew { .. }) => Ok(None),
        Err(e) => Err(TrainError::from(e)),
    };
    Ok((soft(plcc(&pred, &gt))?, soft(srcc(&pred, &gt))?))
}

/// Runs the full training loop. Trailing batches of a single graph are
/// skipped — batch statistics are undefined over one row — so two epochs
/// can differ in step count only through the shuffle.
pub fn train(
    model: &mut Model<f32>,
    train_set: &[FeatureGraph],
    val_set: &[FeatureGraph],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    if cfg.batch_size < 2 {
        return Err(TrainError::BatchTooSmall);
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| TrainError::File {
            path: dir.clone(),
            source: e,
        })?;
    }
    let bins = model.spec().bins;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam: Adam<f32> = Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut indices: Vec<usize> = (0..train_set.len()).collect();

    for epoch in cfg.start_epoch..cfg.epochs {
        let lr = lr_at(cfg.lr0, cfg.lambda, cfg.epochs, epoch);
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;

        for chunk in indices.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut views: Vec<FeatureGraph> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let g = &train_set[i];
                views.push(if cfg.augment {
                    let pick = rng.random_range(0..AugmentPolicy::COUNT);
                    augment(g, AugmentPolicy::from_index(pick)?)?
                } else {
                    g.clone()
                });
            }
            let b = batch(&views)?;
            let target = loss_targets(cfg.loss, bins, &views)?;

            let tape: Tape<f32> = Tape::new();
            let pass = model.forward_train(&tape, &b, &mut rng)?;
            let loss = apply_loss(cfg.loss, &tape, pass.output, &target)?;
            let loss_v = tape.value(loss).at(0, 0) as f64;
            tape.backward(loss)?;
            let grads = model.collect_grads(&tape, &pass.bindings);
            drop(tape);

            adam.prepare(&grads)?;
            let mut i = 0;
            model.visit_params_mut(|_, p| {
                adam.update(i, lr, p, &grads[i]);
                i += 1;
            });
            if i != grads.len() {
                return Err(TrainError::GradCount {
                    expected: i,
                    got: grads.len(),
                });
            }
            loss_sum += loss_v * chunk.len() as f64;
            seen += chunk.len();
        }

        let train_loss = if seen > 0 { loss_sum / seen as f64 } else { f64::NAN };
        let (val_plcc, val_srcc) = if val_set.is_empty() {
            (None, None)
        } else {
            val_scores(model, val_set, cfg)?
        };
        records.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_plcc,
            val_srcc,
        });
        if let Some(p) = val_plcc {
            if best.map(|(_, b)| p > b).unwrap_or(true) {
                best = Some((epoch, p));
            }
        }

        if let Some(dir) = &cfg.checkpoint_dir {
            let path = dir.join(format!("epoch_{epoch:03}.ckpt"));
            checkpoint_save(model, Some(epoch as u32 + 1), &path)?;
            if best.map(|(e, _)| e == epoch).unwrap_or(false) {
                let best_path = dir.join("best.ckpt");
                std::fs::copy(&path, &best_path).map_err(|e| TrainError::File {
                    path: best_path,
                    source: e,
                })?;
            }
            let log_path = dir.join("train_log.csv");
            std::fs::write(&log_path, epoch_log_csv(&records)).map_err(|e| TrainError::File {
                path: log_path,
                source: e,
            })?;
        }

        if let (Some(target), Some(p)) = (cfg.stop_at_val_plcc, val_plcc) {
            if p >= target {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        records,
        best_epoch: best.map(|(e, _)| e),
        best_val_plcc: best.map(|(_, p)| p),
    })
}
