//! Feature graphs built from stacks of CNN-style feature maps.
//!
//! A [`FeatureMap`] is a `depth × width × height` activation volume. A
//! [`FeatureGraph`] flattens a stack of maps into one node matrix: every
//! spatial cell of the reference grid becomes a node whose feature vector is
//! the concatenation of all channels of all maps at that cell. Maps of
//! different spatial sizes are first resampled onto the grid of the *last*
//! map in the stack, which preserves that map's aspect ratio. Graphs are
//! complete and undirected with no self loops, so edges never need to be
//! stored — only the node count matters.
//!
//! The module also carries the training-time data plumbing: normalized
//! ten-bin score histograms ([`ScoreHistogram`]), corner-crop/flip
//! augmentation on node grids, and dense batching of several graphs into one
//! node matrix with contiguous per-graph row groups ([`GraphBatch`]).

use crate::tensor::Tensor;
use thiserror::Error;

/// Number of score bins a label histogram carries.
pub const BINS: usize = 10;

/// Area fraction retained by a corner crop.
pub const CROP_AREA_FRACTION: f64 = 0.85;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("feature map dimensions must be at least 1, got {depth}x{width}x{height}")]
    BadMapDims {
        depth: usize,
        width: usize,
        height: usize,
    },
    #[error("feature map data length {got} does not match {depth}x{width}x{height}")]
    BadMapLength {
        depth: usize,
        width: usize,
        height: usize,
        got: usize,
    },
    #[error("feature values must be finite")]
    NonFiniteFeature,
    #[error("resize target must be at least 1x1, got {width}x{height}")]
    BadResizeTarget { width: usize, height: usize },
    #[error("cannot build a graph from an empty map stack")]
    EmptyMapList,
    #[error("histogram bin {bin} is negative or non-finite: {value}")]
    BadBin { bin: usize, value: f32 },
    #[error("histogram must sum to 1 within 1e-6, got {sum}")]
    Unnormalized { sum: f64 },
    #[error("histogram weights must have a positive finite sum, got {sum}")]
    BadWeights { sum: f64 },
    #[error("crop corner must be 0..=3, got {corner}")]
    BadCorner { corner: u8 },
    #[error("cannot batch an empty graph list")]
    EmptyBatch,
    #[error("graph '{id}' has feature width {got}, batch expects {expected}")]
    MixedFeatureWidth {
        id: String,
        got: usize,
        expected: usize,
    },
}

/// Normalized distribution over the ten score bins (scores 1 through 10).
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreHistogram {
    bins: [f32; BINS],
}

impl ScoreHistogram {
    /// Validates that bins are finite, nonnegative, and sum to 1 within 1e-6.
    pub fn new(bins: [f32; BINS]) -> Result<Self, GraphError> {
        for (i, &b) in bins.iter().enumerate() {
            if !b.is_finite() || b < 0.0 {
                return Err(GraphError::BadBin { bin: i, value: b });
            }
        }
        let sum: f64 = bins.iter().map(|&b| b as f64).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(GraphError::Unnormalized { sum });
        }
        Ok(ScoreHistogram { bins })
    }

    /// Normalizes arbitrary nonnegative weights into a histogram. The sum is
    /// taken in `f64` so the result passes [`ScoreHistogram::new`] validation.
    pub fn from_weights(weights: &[f64; BINS]) -> Result<Self, GraphError> {
        let mut sum = 0.0f64;
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(GraphError::BadBin {
                    bin: i,
                    value: w as f32,
                });
            }
            sum += w;
        }
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(GraphError::BadWeights { sum });
        }
        let mut bins = [0.0f32; BINS];
        for (b, &w) in bins.iter_mut().zip(weights.iter()) {
            *b = (w / sum) as f32;
        }
        ScoreHistogram::new(bins)
    }

    pub fn bins(&self) -> &[f32; BINS] {
        &self.bins
    }
}

/// A `depth × width × height` activation volume, channel-major: the value of
/// channel `c` at column `x`, row `y` sits at `c*(w*h) + y*w + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    depth: usize,
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(depth: usize, width: usize, height: usize, data: Vec<f32>) -> Result<Self, GraphError> {
        if depth == 0 || width == 0 || height == 0 {
            return Err(GraphError::BadMapDims {
                depth,
                width,
                height,
            });
        }
        if data.len() != depth * width * height {
            return Err(GraphError::BadMapLength {
                depth,
                width,
                height,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GraphError::NonFiniteFeature);
        }
        Ok(FeatureMap {
            depth,
            width,
            height,
            data,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[c * (self.width * self.height) + y * self.width + x]
    }
}

/// Corner-aligned bilinear resampling to `tw × th`.
///
/// Target corners map exactly onto source corners; interpolation uses the
/// `a + t*(b-a)` form so a constant map stays bit-for-bit constant and a
/// same-size resize is the identity. A target axis of length 1 samples the
/// leading source position.
pub fn resize_map(map: &FeatureMap, tw: usize, th: usize) -> Result<FeatureMap, GraphError> {
    if tw == 0 || th == 0 {
        return Err(GraphError::BadResizeTarget {
            width: tw,
            height: th,
        });
    }
    let (w, h, d) = (map.width, map.height, map.depth);
    let src_pos = |t: usize, tn: usize, sn: usize| -> f64 {
        if tn <= 1 {
            0.0
        } else {
            t as f64 * (sn - 1) as f64 / (tn - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(d * tw * th);
    for c in 0..d {
        for ty in 0..th {
            let sy = src_pos(ty, th, h);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = (sy - y0 as f64) as f32;
            for tx in 0..tw {
                let sx = src_pos(tx, tw, w);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = (sx - x0 as f64) as f32;
                let v00 = map.at(c, x0, y0);
                let v10 = map.at(c, x1, y0);
                let v01 = map.at(c, x0, y1);
                let v11 = map.at(c, x1, y1);
                let top = v00 + fx * (v10 - v00);
                let bot = v01 + fx * (v11 - v01);
                out.push(top + fy * (bot - top));
            }
        }
    }
    FeatureMap::new(d, tw, th, out)
}

/// Complete graph over the cells of a feature grid.
///
/// Node `y*grid_w + x` (row-major) carries the concatenated channels of all
/// source maps at cell `(x, y)`. Edges are implicit: every pair of distinct
/// nodes is connected, no self loops.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGraph {
    /// `[node_count, feature_dim]` node features.
    pub nodes: Tensor<f32>,
    pub grid_w: usize,
    pub grid_h: usize,
    pub label: Option<ScoreHistogram>,
    pub id: String,
}

impl FeatureGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.nodes.cols()
    }

    /// Edges of the complete graph without self loops: `n*(n-1)/2`.
    pub fn edge_count(&self) -> usize {
        let n = self.node_count();
        n * (n - 1) / 2
    }

    #[inline]
    fn node_row(&self, x: usize, y: usize) -> &[f32] {
        self.nodes.row(y * self.grid_w + x)
    }
}

/// Builds a feature graph from a stack of maps. All maps are resampled onto
/// the grid of the **last** map; feature vectors concatenate map channels in
/// stack order.
pub fn build_feature_graph(
    maps: &[FeatureMap],
    label: Option<ScoreHistogram>,
    id: &str,
) -> Result<FeatureGraph, GraphError> {
    let Some(reference) = maps.last() else {
        return Err(GraphError::EmptyMapList);
    };
    let (gw, gh) = (reference.width, reference.height);
    let mut resized: Vec<FeatureMap> = Vec::with_capacity(maps.len());
    for m in maps {
        if m.width == gw && m.height == gh {
            resized.push(m.clone());
        } else {
            resized.push(resize_map(m, gw, gh)?);
        }
    }
    let feature_dim: usize = resized.iter().map(|m| m.depth).sum();
    let n = gw * gh;
    let mut data = Vec::with_capacity(n * feature_dim);
    for y in 0..gh {
        for x in 0..gw {
            for m in &resized {
                for c in 0..m.depth {
                    data.push(m.at(c, x, y));
                }
            }
        }
    }
    Ok(FeatureGraph {
        nodes: Tensor::from_vec(&[n, feature_dim], data),
        grid_w: gw,
        grid_h: gh,
        label,
        id: id.to_string(),
    })
}

/// One of the eight train/test-time views of a graph: a corner crop keeping
/// [`CROP_AREA_FRACTION`] of the grid area, optionally mirrored.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct AugmentPolicy {
    /// 0 = top-left, 1 = top-right, 2 = bottom-left, 3 = bottom-right.
    pub corner: u8,
    /// Horizontal mirror of the cropped grid.
    pub flip: bool,
}

impl AugmentPolicy {
    pub const COUNT: usize = 8;

    /// Fixed enumeration: indices 0..=3 are the four corners unflipped,
    /// 4..=7 the same corners mirrored.
    pub fn from_index(i: usize) -> Result<Self, GraphError> {
        if i >= Self::COUNT {
            return Err(GraphError::BadCorner { corner: i as u8 });
        }
        Ok(AugmentPolicy {
            corner: (i % 4) as u8,
            flip: i >= 4,
        })
    }

    pub fn all() -> [AugmentPolicy; Self::COUNT] {
        let mut out = [AugmentPolicy {
            corner: 0,
            flip: false,
        }; Self::COUNT];
        for (i, p) in out.iter_mut().enumerate() {
            *p = AugmentPolicy::from_index(i).unwrap();
        }
        out
    }
}

/// Crop side length: keep `sqrt(CROP_AREA_FRACTION)` of the axis, floored,
/// never below one cell.
pub fn crop_extent(full: usize) -> usize {
    ((full as f64 * CROP_AREA_FRACTION.sqrt()).floor() as usize).max(1)
}

/// Applies a corner crop plus optional mirror to a graph's node grid.
/// Labels and ids carry over unchanged.
pub fn augment(g: &FeatureGraph, policy: AugmentPolicy) -> Result<FeatureGraph, GraphError> {
    if policy.corner > 3 {
        return Err(GraphError::BadCorner {
            corner: policy.corner,
        });
    }
    let (cw, ch) = (crop_extent(g.grid_w), crop_extent(g.grid_h));
    let ox = match policy.corner {
        0 | 2 => 0,
        _ => g.grid_w - cw,
    };
    let oy = match policy.corner {
        0 | 1 => 0,
        _ => g.grid_h - ch,
    };
    let d = g.feature_dim();
    let mut data = Vec::with_capacity(cw * ch * d);
    for y in 0..ch {
        for x in 0..cw {
            let sx = if policy.flip { cw - 1 - x } else { x };
            data.extend_from_slice(g.node_row(ox + sx, oy + y));
        }
    }
    Ok(FeatureGraph {
        nodes: Tensor::from_vec(&[cw * ch, d], data),
        grid_w: cw,
        grid_h: ch,
        label: g.label.clone(),
        id: g.id.clone(),
    })
}

/// Several graphs packed into one node matrix. Rows of graph `g` are the
/// contiguous block starting at `row_offset(g)`; `counts` feeds the
/// per-group tape reductions, so batched and one-by-one forward passes see
/// exactly the same arithmetic.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub nodes: Tensor<f32>,
    /// Graph index of every node row (nondecreasing).
    pub graph_index: Vec<usize>,
    /// Node count per graph; sums to `nodes.rows()`.
    pub counts: Vec<usize>,
    pub grids: Vec<(usize, usize)>,
    pub labels: Vec<Option<ScoreHistogram>>,
    pub ids: Vec<String>,
}

/// Packs graphs into a batch. All graphs must share one feature width.
pub fn batch(graphs: &[FeatureGraph]) -> Result<GraphBatch, GraphError> {
    let Some(first) = graphs.first() else {
        return Err(GraphError::EmptyBatch);
    };
    let d = first.feature_dim();
    let total: usize = graphs.iter().map(FeatureGraph::node_count).sum();
    let mut data = Vec::with_capacity(total * d);
    let mut graph_index = Vec::with_capacity(total);
    let mut counts = Vec::with_capacity(graphs.len());
    let mut grids = Vec::with_capacity(graphs.len());
    let mut labels = Vec::with_capacity(graphs.len());
    let mut ids = Vec::with_capacity(graphs.len());
    for (gi, g) in graphs.iter().enumerate() {
        if g.feature_dim() != d {
            return Err(GraphError::MixedFeatureWidth {
                id: g.id.clone(),
                got: g.feature_dim(),
                expected: d,
            });
        }
        data.extend_from_slice(g.nodes.data());
        graph_index.extend(std::iter::repeat(gi).take(g.node_count()));
        counts.push(g.node_count());
        grids.push((g.grid_w, g.grid_h));
        labels.push(g.label.clone());
        ids.push(g.id.clone());
    }
    Ok(GraphBatch {
        nodes: Tensor::from_vec(&[total, d], data),
        graph_index,
        counts,
        grids,
        labels,
        ids,
    })
}

impl GraphBatch {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total_nodes(&self) -> usize {
        self.nodes.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.nodes.cols()
    }

    pub fn row_offset(&self, graph: usize) -> usize {
        self.counts[..graph].iter().sum()
    }

    /// Recovers the original graphs; an exact inverse of [`batch`].
    pub fn unbatch(&self) -> Vec<FeatureGraph> {
        let d = self.feature_dim();
        let mut out = Vec::with_capacity(self.len());
        let mut row = 0;
        for (gi, &c) in self.counts.iter().enumerate() {
            let data = self.nodes.data()[row * d..(row + c) * d].to_vec();
            out.push(FeatureGraph {
                nodes: Tensor::from_vec(&[c, d], data),
                grid_w: self.grids[gi].0,
                grid_h: self.grids[gi].1,
                label: self.labels[gi].clone(),
                id: self.ids[gi].clone(),
            });
            row += c;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_from_fn(d: usize, w: usize, h: usize, f: impl Fn(usize, usize, usize) -> f32) -> FeatureMap {
        let mut data = Vec::with_capacity(d * w * h);
        for c in 0..d {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(c, x, y));
                }
            }
        }
        FeatureMap::new(d, w, h, data).unwrap()
    }

    #[test]
    fn histogram_validation() {
        let mut bins = [0.1f32; 10];
        assert!(ScoreHistogram::new(bins).is_ok());
        bins[0] = -0.1;
        assert!(matches!(
            ScoreHistogram::new(bins),
            Err(GraphError::BadBin { bin: 0, .. })
        ));
        let bins = [0.2f32; 10];
        assert!(matches!(
            ScoreHistogram::new(bins),
            Err(GraphError::Unnormalized { .. })
        ));
    }

    #[test]
    fn from_weights_normalizes_and_rejects_degenerate() {
        let h = ScoreHistogram::from_weights(&[1.0; 10]).unwrap();
        for &b in h.bins() {
            assert!((b - 0.1).abs() < 1e-7);
        }
        assert!(matches!(
            ScoreHistogram::from_weights(&[0.0; 10]),
            Err(GraphError::BadWeights { .. })
        ));
    }

    #[test]
    fn resize_constant_map_stays_constant() {
        let m = map_from_fn(2, 5, 4, |c, _, _| if c == 0 { 3.25 } else { -1.5 });
        let r = resize_map(&m, 3, 7).unwrap();
        for c in 0..2 {
            let want = if c == 0 { 3.25 } else { -1.5 };
            for y in 0..7 {
                for x in 0..3 {
                    assert_eq!(r.at(c, x, y), want, "constant drifted at {c},{x},{y}");
                }
            }
        }
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let m = map_from_fn(3, 4, 5, |c, x, y| (c * 100 + y * 10 + x) as f32 * 0.37);
        let r = resize_map(&m, 4, 5).unwrap();
        assert_eq!(r, m);
    }

    #[test]
    fn resize_corners_align_exactly() {
        let m = map_from_fn(1, 6, 4, |_, x, y| (x * 17 + y * 3) as f32 + 0.125);
        let r = resize_map(&m, 3, 9).unwrap();
        assert_eq!(r.at(0, 0, 0), m.at(0, 0, 0));
        assert_eq!(r.at(0, 2, 0), m.at(0, 5, 0));
        assert_eq!(r.at(0, 0, 8), m.at(0, 0, 3));
        assert_eq!(r.at(0, 2, 8), m.at(0, 5, 3));
    }

    #[test]
    fn resize_1d_linear_midpoint() {
        // Two columns [0, 1] widened to 3 puts 0.5 in the middle.
        let m = FeatureMap::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let r = resize_map(&m, 3, 1).unwrap();
        assert_eq!(r.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn resize_rejects_zero_target() {
        let m = FeatureMap::new(1, 2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(
            resize_map(&m, 0, 3),
            Err(GraphError::BadResizeTarget { .. })
        ));
    }

    #[test]
    fn graph_uses_last_map_grid_and_concatenates_channels() {
        // First map is 4x2, second (reference) is 2x2; graph must be 2x2
        // with 3+2 = 5 features per node.
        let a = map_from_fn(3, 4, 2, |c, x, y| (c as f32) + (x as f32) * 0.1 + (y as f32) * 0.01);
        let b = map_from_fn(2, 2, 2, |c, x, y| 10.0 * (c as f32) + (x + 2 * y) as f32);
        let g = build_feature_graph(&[a.clone(), b.clone()], None, "t").unwrap();
        assert_eq!((g.grid_w, g.grid_h), (2, 2));
        assert_eq!(g.node_count(), 4);
        assert_eq!(g.feature_dim(), 5);
        assert_eq!(g.edge_count(), 6);
        // Node (x=1, y=0) is row 1; its last two features come straight from
        // map b at that cell, no resampling involved.
        assert_eq!(g.nodes.row(1)[3], b.at(0, 1, 0));
        assert_eq!(g.nodes.row(1)[4], b.at(1, 1, 0));
        // And its first three features are map a corner-aligned onto x=1 of
        // 2 columns, i.e. source column 3.
        for c in 0..3 {
            assert_eq!(g.nodes.row(1)[c], a.at(c, 3, 0));
        }
    }

    #[test]
    fn edge_counts_follow_complete_graph_formula() {
        for (w, h, want) in [(2, 2, 6), (1, 1, 0), (3, 4, 66)] {
            let m = map_from_fn(1, w, h, |_, _, _| 0.0);
            let g = build_feature_graph(&[m], None, "t").unwrap();
            assert_eq!(g.edge_count(), want, "{w}x{h}");
        }
    }

    #[test]
    fn empty_map_stack_is_rejected() {
        assert!(matches!(
            build_feature_graph(&[], None, "t"),
            Err(GraphError::EmptyMapList)
        ));
    }

    #[test]
    fn non_finite_features_are_rejected() {
        assert!(matches!(
            FeatureMap::new(1, 2, 1, vec![0.0, f32::NAN]),
            Err(GraphError::NonFiniteFeature)
        ));
    }

    #[test]
    fn crop_extent_keeps_area_fraction() {
        // sqrt(0.85) ≈ 0.92195
        assert_eq!(crop_extent(4), 3);
        assert_eq!(crop_extent(3), 2);
        assert_eq!(crop_extent(8), 7);
        assert_eq!(crop_extent(1), 1);
    }

    #[test]
    fn corner_crops_pick_the_right_cells() {
        let m = map_from_fn(1, 4, 3, |_, x, y| (y * 4 + x) as f32);
        let g = build_feature_graph(&[m], None, "t").unwrap();
        // crop is 3x2
        let tl = augment(&g, AugmentPolicy { corner: 0, flip: false }).unwrap();
        assert_eq!((tl.grid_w, tl.grid_h), (3, 2));
        assert_eq!(
            tl.nodes.data(),
            &[0.0, 1.0, 2.0, 4.0, 5.0, 6.0],
            "top-left crop"
        );
        let br = augment(&g, AugmentPolicy { corner: 3, flip: false }).unwrap();
        assert_eq!(
            br.nodes.data(),
            &[5.0, 6.0, 7.0, 9.0, 10.0, 11.0],
            "bottom-right crop"
        );
        let tl_flip = augment(&g, AugmentPolicy { corner: 0, flip: true }).unwrap();
        assert_eq!(
            tl_flip.nodes.data(),
            &[2.0, 1.0, 0.0, 6.0, 5.0, 4.0],
            "mirrored top-left crop"
        );
    }

    #[test]
    fn single_cell_grid_survives_augmentation() {
        let m = map_from_fn(2, 1, 1, |c, _, _| c as f32 + 0.5);
        let g = build_feature_graph(&[m], None, "t").unwrap();
        for p in AugmentPolicy::all() {
            let a = augment(&g, p).unwrap();
            assert_eq!(a, g, "1x1 grid must be untouched by {p:?}");
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let m = map_from_fn(2, 5, 4, |c, x, y| (c * 31 + x * 7 + y) as f32 * 0.11);
        let g = build_feature_graph(&[m], None, "t").unwrap();
        let cropped = augment(&g, AugmentPolicy { corner: 1, flip: false }).unwrap();
        let flipped = augment(&g, AugmentPolicy { corner: 1, flip: true }).unwrap();
        // Mirroring the flipped crop by hand restores the unflipped crop.
        let d = flipped.feature_dim();
        let mut back = Vec::with_capacity(flipped.nodes.numel());
        for y in 0..flipped.grid_h {
            for x in 0..flipped.grid_w {
                back.extend_from_slice(flipped.node_row(flipped.grid_w - 1 - x, y));
            }
        }
        assert_eq!(
            Tensor::from_vec(&[flipped.node_count(), d], back),
            cropped.nodes
        );
    }

    #[test]
    fn policy_index_enumeration_is_stable() {
        let all = AugmentPolicy::all();
        assert_eq!(all[0], AugmentPolicy { corner: 0, flip: false });
        assert_eq!(all[3], AugmentPolicy { corner: 3, flip: false });
        assert_eq!(all[4], AugmentPolicy { corner: 0, flip: true });
        assert_eq!(all[7], AugmentPolicy { corner: 3, flip: true });
        assert!(AugmentPolicy::from_index(8).is_err());
    }

    #[test]
    fn batch_then_unbatch_is_exact() {
        let g1 = build_feature_graph(
            &[map_from_fn(2, 3, 2, |c, x, y| (c + x * 2 + y * 7) as f32)],
            Some(ScoreHistogram::from_weights(&[1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 4.0, 3.0, 2.0, 1.0]).unwrap()),
            "g1",
        )
        .unwrap();
        let g2 = build_feature_graph(
            &[map_from_fn(2, 1, 1, |c, _, _| c as f32 - 0.25)],
            None,
            "g2",
        )
        .unwrap();
        let b = batch(&[g1.clone(), g2.clone()]).unwrap();
        assert_eq!(b.total_nodes(), 7);
        assert_eq!(b.counts, vec![6, 1]);
        assert_eq!(b.graph_index, vec![0, 0, 0, 0, 0, 0, 1]);
        assert_eq!(b.row_offset(1), 6);
        let back = b.unbatch();
        assert_eq!(back, vec![g1, g2]);
    }

    #[test]
    fn batch_rejects_empty_and_mixed_widths() {
        assert!(matches!(batch(&[]), Err(GraphError::EmptyBatch)));
        let g1 = build_feature_graph(&[map_from_fn(1, 2, 2, |_, _, _| 0.0)], None, "a").unwrap();
        let g2 = build_feature_graph(&[map_from_fn(2, 2, 2, |_, _, _| 0.0)], None, "b").unwrap();
        assert!(matches!(
            batch(&[g1, g2]),
            Err(GraphError::MixedFeatureWidth { .. })
        ));
    }
}
