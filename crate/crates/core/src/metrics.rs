//! Evaluation: correlation coefficients, threshold classification metrics,
//! the augmented test-time prediction protocol, and a sharded evaluator.
//!
//! Correlations are computed in f64 throughout. The linear coefficient uses
//! a single Welford-style pass; the rank coefficient assigns average ranks
//! to ties and reuses the linear path on the ranks.

use crate::graph::{augment, batch, AugmentPolicy, FeatureGraph, GraphError, ScoreHistogram, BINS};
use crate::model::{Model, ModelError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {need} samples, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("an input is constant; correlation is undefined")]
    ZeroVariance,
    #[error("graph '{id}' has no label")]
    MissingLabel { id: String },
    #[error("empty evaluation set")]
    EmptySet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Mean of the 1..=10 score scale under a histogram label.
pub fn mean_score(h: &ScoreHistogram) -> f64 {
    h.bins()
        .iter()
        .enumerate()
        .map(|(i, &p)| (i + 1) as f64 * p as f64)
        .sum()
}

/// Mean score of one predicted output row: a distribution row is folded
/// against the 1..=10 scale, a single-column scalar head passes through.
pub fn row_score(row: &[f64]) -> f64 {
    if row.len() == 1 {
        row[0]
    } else {
        row.iter()
            .enumerate()
            .map(|(i, &p)| (i + 1) as f64 * p)
            .sum()
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(MetricsError::TooFew {
            need: 2,
            got: x.len(),
        });
    }
    for (i, v) in x.iter().chain(y.iter()).enumerate() {
        if !v.is_finite() {
            return Err(MetricsError::NonFinite { index: i % x.len() });
        }
    }
    Ok(())
}

/// Linear correlation coefficient (one pass, f64).
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_pair(x, y)?;
    let mut mean_x = 0.0;
    let mut mean_y = 0.0;
    let mut m2x = 0.0;
    let mut m2y = 0.0;
    let mut cxy = 0.0;
    for (i, (&a, &b)) in x.iter().zip(y.iter()).enumerate() {
        let n = (i + 1) as f64;
        let dx = a - mean_x;
        let dy = b - mean_y;
        mean_x += dx / n;
        mean_y += dy / n;
        // Update the co-moment with one delta pre-update and one post-update.
        cxy += dx * (b - mean_y);
        m2x += dx * (a - mean_x);
        m2y += dy * (b - mean_y);
    }
    if m2x <= 0.0 || m2y <= 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok(cxy / (m2x * m2y).sqrt())
}

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("ranks over finite values"));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the average 1-based rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

/// Rank correlation coefficient with average-rank tie handling.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_pair(x, y)?;
    plcc(&ranks(x), &ranks(y))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub true_pos: usize,
    pub true_neg: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

#[derive(Clone, Debug)]
pub struct ThresholdReport {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub confusion: Confusion,
    /// One of the two classes never occurs in the ground truth; the balanced
    /// accuracy then degrades to the recall of the class that is present.
    pub class_absent: bool,
}

/// Two-class metrics after thresholding both mean scores at `threshold`
/// (scoring at least the threshold counts as the positive class).
pub fn threshold_metrics(
    pred: &[f64],
    gt: &[f64],
    threshold: f64,
) -> Result<ThresholdReport, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::TooFew { need: 1, got: 0 });
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p >= threshold, g >= threshold) {
            (true, true) => c.true_pos += 1,
            (false, false) => c.true_neg += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
        }
    }
    let n = pred.len() as f64;
    let accuracy = (c.true_pos + c.true_neg) as f64 / n;
    let pos = c.true_pos + c.false_neg;
    let neg = c.true_neg + c.false_pos;
    let (balanced_accuracy, class_absent) = match (pos, neg) {
        (0, _) => (c.true_neg as f64 / neg as f64, true),
        (_, 0) => (c.true_pos as f64 / pos as f64, true),
        _ => {
            let tpr = c.true_pos as f64 / pos as f64;
            let tnr = c.true_neg as f64 / neg as f64;
            ((tpr + tnr) / 2.0, false)
        }
    };
    Ok(ThresholdReport {
        accuracy,
        balanced_accuracy,
        confusion: c,
        class_absent,
    })
}

// ------------------------------------------------------------- prediction

/// Test-time prediction: every graph is run through all eight crop/flip
/// views, the output rows are averaged in f64, and distribution rows are
/// renormalized to sum to exactly one. Returns one row per graph, in input
/// order. Deterministic: no RNG is involved.
pub fn predict_augmented(
    model: &Model<f32>,
    graphs: &[FeatureGraph],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>, MetricsError> {
    if graphs.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let bins = model.spec().bins;
    let chunk = batch_size.max(1);
    let mut acc = vec![vec![0.0f64; bins]; graphs.len()];
    for policy in AugmentPolicy::all() {
        let views: Vec<FeatureGraph> = graphs
            .iter()
            .map(|g| augment(g, policy))
            .collect::<Result<_, _>>()?;
        for (start, group) in views.chunks(chunk).enumerate().map(|(i, c)| (i * chunk, c)) {
            let b = batch(group)?;
            let out = model.predict(&b)?;
            for r in 0..out.rows() {
                for c in 0..bins {
                    acc[start + r][c] += out.at(r, c) as f64;
                }
            }
        }
    }
    let k = AugmentPolicy::COUNT as f64;
    for row in &mut acc {
        for v in row.iter_mut() {
            *v /= k;
        }
        if bins > 1 {
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
    }
    Ok(acc)
}

/// Single-view prediction: each graph is evaluated once, uncropped and
/// unflipped. Cheaper than [`predict_augmented`]; used for per-epoch
/// validation scoring.
pub fn predict_plain(
    model: &Model<f32>,
    graphs: &[FeatureGraph],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>, MetricsError> {
    if graphs.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let bins = model.spec().bins;
    let chunk = batch_size.max(1);
    let mut rows = Vec::with_capacity(graphs.len());
    for group in graphs.chunks(chunk) {
        let b = batch(group)?;
        let out = model.predict(&b)?;
        for r in 0..out.rows() {
            rows.push((0..bins).map(|c| out.at(r, c) as f64).collect());
        }
    }
    Ok(rows)
}

// -------------------------------------------------------------- evaluation

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub count: usize,
    pub plcc: Option<f64>,
    pub srcc: Option<f64>,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub confusion: Confusion,
    pub class_absent: bool,
    /// Predicted mean score per graph, input order.
    pub pred_means: Vec<f64>,
    /// Label mean score per graph, input order.
    pub label_means: Vec<f64>,
    /// Element-wise mean of the predicted score distributions.
    pub mean_pred_bins: [f64; BINS],
    /// Element-wise mean of the label histograms.
    pub mean_label_bins: [f64; BINS],
    pub warnings: Vec<String>,
}

impl EvalReport {
    /// Two-column `metric,value` table; undefined metrics leave the value
    /// column empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("metric,value\n");
        s.push_str(&format!("count,{}\n", self.count));
        s.push_str(&format!("plcc,{}\n", opt(self.plcc)));
        s.push_str(&format!("srcc,{}\n", opt(self.srcc)));
        s.push_str(&format!("accuracy,{}\n", self.accuracy));
        s.push_str(&format!("balanced_accuracy,{}\n", self.balanced_accuracy));
        s.push_str(&format!("true_pos,{}\n", self.confusion.true_pos));
        s.push_str(&format!("true_neg,{}\n", self.confusion.true_neg));
        s.push_str(&format!("false_pos,{}\n", self.confusion.false_pos));
        s.push_str(&format!("false_neg,{}\n", self.confusion.false_neg));
        s.push_str(&format!("class_absent,{}\n", self.class_absent));
        s
    }

    /// Three-column `bin,predicted_mean,label_mean` table over the ten score
    /// bins, averaging the distributions across the evaluated set.
    pub fn distributions_csv(&self) -> String {
        let mut s = String::from("bin,predicted_mean,label_mean\n");
        for i in 0..BINS {
            s.push_str(&format!(
                "{},{},{}\n",
                i + 1,
                self.mean_pred_bins[i],
                self.mean_label_bins[i]
            ));
        }
        s
    }
}

fn worker_cap() -> usize {
    std::env::var("GATIAA_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(usize::MAX)
}

/// Evaluates a model on labeled graphs with the augmented prediction
/// protocol. `workers > 1` shards the set across threads; per-graph outputs
/// do not depend on batch composition in eval mode, so any worker count
/// produces bit-identical reports. The `GATIAA_THREADS` environment variable
/// caps the worker count.
pub fn evaluate(
    model: &Model<f32>,
    graphs: &[FeatureGraph],
    batch_size: usize,
    workers: usize,
) -> Result<EvalReport, MetricsError> {
    if graphs.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let label_means: Vec<f64> = graphs
        .iter()
        .map(|g| match &g.label {
            Some(h) => Ok(mean_score(h)),
            None => Err(MetricsError::MissingLabel { id: g.id.clone() }),
        })
        .collect::<Result<_, _>>()?;

    let workers = workers.clamp(1, worker_cap()).min(graphs.len());
    let rows: Vec<Vec<f64>> = if workers <= 1 {
        predict_augmented(model, graphs, batch_size)?
    } else {
        let per = graphs.len().div_ceil(workers);
        let shards: Vec<&[FeatureGraph]> = graphs.chunks(per).collect();
        let results: Vec<Result<Vec<Vec<f64>>, MetricsError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = shards
                .iter()
                .map(|shard| scope.spawn(|| predict_augmented(model, shard, batch_size)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        let mut merged = Vec::with_capacity(graphs.len());
        for r in results {
            merged.extend(r?);
        }
        merged
    };

    let pred_means: Vec<f64> = rows.iter().map(|r| row_score(r)).collect();
    let inv = 1.0 / graphs.len() as f64;
    let mut mean_pred_bins = [0.0f64; BINS];
    for row in &rows {
        for (m, &p) in mean_pred_bins.iter_mut().zip(row.iter()) {
            *m += p * inv;
        }
    }
    let mut mean_label_bins = [0.0f64; BINS];
    for g in graphs {
        let label = g.label.as_ref().expect("labels were checked above");
        for (m, &p) in mean_label_bins.iter_mut().zip(label.bins().iter()) {
            *m += p as f64 * inv;
        }
    }
    let mut warnings = Vec::new();
    let plcc_v = match plcc(&pred_means, &label_means) {
        Ok(v) => Some(v),
        Err(e @ (MetricsError::ZeroVariance | MetricsError::TooFew { .. })) => {
            warnings.push(format!("linear correlation undefined: {e}"));
            None
        }
        Err(e) => return Err(e),
    };
    let srcc_v = match srcc(&pred_means, &label_means) {
        Ok(v) => Some(v),
        Err(e @ (MetricsError::ZeroVariance | MetricsError::TooFew { .. })) => {
            warnings.push(format!("rank correlation undefined: {e}"));
            None
        }
        Err(e) => return Err(e),
    };
    let th = threshold_metrics(&pred_means, &label_means, 5.0)?;
    if th.class_absent {
        warnings.push(
            "one score class is absent from the labels; balanced accuracy covers one class"
                .into(),
        );
    }
    Ok(EvalReport {
        count: graphs.len(),
        plcc: plcc_v,
        srcc: srcc_v,
        accuracy: th.accuracy,
        balanced_accuracy: th.balanced_accuracy,
        confusion: th.confusion,
        class_absent: th.class_absent,
        pred_means,
        label_means,
        mean_pred_bins,
        mean_label_bins,
        warnings,
    })
}
