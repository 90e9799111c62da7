//! Data-free compensation: every pruned channel `p` is replaced by a scaled
//! copy of a kept channel `r` of the same layer, and the scale is pushed into
//! the successor's input slice of `r`.
//!
//! With batch-norm and ReLU after the layer, `relu(bn_p(z_p)) ≈ s·relu(bn_r(z_r))`
//! when `W_p ∥ W_r`, where
//! `s = (‖W_p‖/‖W_r‖)·(σ_r/γ_r)·(γ_p/σ_p)`. The residual bias term
//! `b = s(γ_r/σ_r·μ_r − β_r) − γ_p/σ_p·μ_p + β_p` and the cosine distance
//! between the two weight vectors score how well `r` stands in for `p`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BnParams, ChannelRows, LayerNode, ModelGraph};
use crate::pruner::{check_decision, input_group, rebuild_inputs, shrink_outputs, PruneDecision};

/// Added to the selection score of candidates with a negative scale.
pub const NEGATIVE_SCALE_PENALTY: f64 = 2.0;
/// Offset keeping normalized bias strictly positive.
pub const BIAS_NORM_EPS: f64 = 1e-12;

/// One output channel's weights, flattened, in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVec {
    pub layer: usize,
    pub index: usize,
    pub v: Vec<f64>,
    pub norm: f64,
}

impl ChannelVec {
    pub fn new(layer: usize, index: usize, v: Vec<f64>) -> Self {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Self { layer, index, v, norm }
    }
}

pub fn channel_vecs(layer: usize, rows: &dyn ChannelRows) -> Vec<ChannelVec> {
    (0..rows.out_channels())
        .map(|o| ChannelVec::new(layer, o, rows.row(o).iter().map(|&x| x as f64).collect()))
        .collect()
}

/// Batch-norm statistics of one channel in f64; identity when the layer has none.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelAffine {
    pub gamma: f64,
    pub beta: f64,
    pub mean: f64,
    pub sigma: f64,
}

impl ChannelAffine {
    pub const IDENTITY: Self = Self {
        gamma: 1.0,
        beta: 0.0,
        mean: 0.0,
        sigma: 1.0,
    };

    /// `γ/σ·μ − β`
    fn offset(&self) -> f64 {
        self.gamma / self.sigma * self.mean - self.beta
    }
}

pub fn channel_affines(bn: Option<&BnParams>, channels: usize) -> Vec<ChannelAffine> {
    match bn {
        Some(bn) => (0..bn.len())
            .map(|j| ChannelAffine {
                gamma: bn.gamma[j] as f64,
                beta: bn.beta[j] as f64,
                mean: bn.mean[j] as f64,
                sigma: bn.sigma(j),
            })
            .collect(),
        None => vec![ChannelAffine::IDENTITY; channels],
    }
}

fn degenerate_reason(c: &ChannelVec, a: &ChannelAffine) -> Option<&'static str> {
    if c.norm == 0.0 {
        Some("zero weight norm")
    } else if a.gamma == 0.0 {
        Some("zero batch-norm scale")
    } else if a.sigma.is_nan() || a.sigma <= 0.0 {
        Some("non-positive batch-norm sigma")
    } else {
        None
    }
}

pub fn compute_spr(p: &ChannelVec, r: &ChannelVec, ap: &ChannelAffine, ar: &ChannelAffine) -> Result<f64> {
    if let Some(reason) = degenerate_reason(r, ar) {
        return Err(Error::DegenerateChannel {
            channel: r.index,
            reason,
        });
    }
    if ap.sigma.is_nan() || ap.sigma <= 0.0 {
        return Err(Error::DegenerateChannel {
            channel: p.index,
            reason: "non-positive batch-norm sigma",
        });
    }
    Ok((p.norm / r.norm) * (ar.sigma / ar.gamma) * (ap.gamma / ap.sigma))
}

/// `s·(γ_r/σ_r·μ_r − β_r) − γ_p/σ_p·μ_p + β_p`
pub fn bias_term(s: f64, ap: &ChannelAffine, ar: &ChannelAffine) -> f64 {
    s * ar.offset() - ap.offset()
}

/// `(‖𝓔‖, |𝓑|)` for reconstructing `p` from `r` with scale `s`.
pub fn reconstruction_diagnostics(
    p: &ChannelVec,
    r: &ChannelVec,
    s: f64,
    ap: &ChannelAffine,
    ar: &ChannelAffine,
) -> Result<(f64, f64)> {
    if degenerate_reason(r, ar).is_some() || ap.gamma == 0.0 || (ap.sigma.is_nan() || ap.sigma <= 0.0) {
        return Err(Error::DegenerateChannel {
            channel: if degenerate_reason(r, ar).is_some() {
                r.index
            } else {
                p.index
            },
            reason: "diagnostics need non-zero norms and batch-norm scales",
        });
    }
    let k = s * (ar.gamma * ap.sigma) / (ar.sigma * ap.gamma);
    let e =
        p.v.iter()
            .zip(&r.v)
            .map(|(a, b)| (a - k * b).powi(2))
            .sum::<f64>()
            .sqrt();
    Ok((e, bias_term(s, ap, ar).abs()))
}

/// Dense row-major `n × n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape(format!(
                "{n}x{n} matrix needs {} values, got {}",
                n * n,
                data.len()
            )));
        }
        Ok(Self { n, data })
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..n * n).map(|k| f(k / n, k % n)).collect();
        Self { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// `d_ij = 1 − cos(v_i, v_j)`, clamped to `[0, 2]`. Zero-norm channels sit at
/// distance 2 from everything but themselves.
pub fn cosine_distance_matrix(channels: &[ChannelVec]) -> SquareMatrix {
    let n = channels.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&channels[i], &channels[j]);
            let d = if a.norm == 0.0 || b.norm == 0.0 {
                2.0
            } else {
                let dot: f64 = a.v.iter().zip(&b.v).map(|(x, y)| x * y).sum();
                (1.0 - dot / (a.norm * b.norm)).clamp(0.0, 2.0)
            };
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    SquareMatrix { n, data }
}

/// Pairwise scales, bias terms and normalized bias of one layer.
/// Entry `(i, j)` describes reconstructing channel `i` from channel `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasMatrix {
    pub scale: SquareMatrix,
    pub b: SquareMatrix,
    pub norm: SquareMatrix,
    /// Channels that can never be reconstruction targets.
    pub degenerate: Vec<bool>,
}

impl BiasMatrix {
    pub fn n(&self) -> usize {
        self.b.n()
    }
}

/// Degenerate channels get `+∞` bias in their row and column (their own
/// diagonal stays 0) and normalized bias 1.
pub fn bias_matrix(channels: &[ChannelVec], affines: &[ChannelAffine]) -> Result<BiasMatrix> {
    let n = channels.len();
    if affines.len() != n {
        return Err(Error::Shape(format!(
            "{n} channels but {} batch-norm entries",
            affines.len()
        )));
    }
    let degenerate: Vec<bool> = channels
        .iter()
        .zip(affines)
        .map(|(c, a)| degenerate_reason(c, a).is_some())
        .collect();
    let mut scale = vec![0.0; n * n];
    let mut b = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if degenerate[i] || degenerate[j] {
                if i != j {
                    b[i * n + j] = f64::INFINITY;
                }
                continue;
            }
            let s = compute_spr(&channels[i], &channels[j], &affines[i], &affines[j])?;
            scale[i * n + j] = s;
            b[i * n + j] = bias_term(s, &affines[i], &affines[j]);
        }
    }
    let max = b.iter().filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs()));
    let norm = b
        .iter()
        .map(|v| {
            if v.is_finite() {
                (v.abs() + BIAS_NORM_EPS) / (max + BIAS_NORM_EPS)
            } else {
                1.0
            }
        })
        .collect();
    Ok(BiasMatrix {
        scale: SquareMatrix { n, data: scale },
        b: SquareMatrix { n, data: b },
        norm: SquareMatrix { n, data: norm },
        degenerate,
    })
}

/// `λ·D[p][j] + (1−λ)·Bnorm[p][j]`, plus the negative-scale penalty.
pub fn selection_score(p: usize, j: usize, lambda: f64, d: &SquareMatrix, bias: &BiasMatrix) -> f64 {
    let mut score = lambda * d.get(p, j) + (1.0 - lambda) * bias.norm.get(p, j);
    if bias.scale.get(p, j) < 0.0 {
        score += NEGATIVE_SCALE_PENALTY;
    }
    score
}

/// Exhaustive argmin of [`selection_score`] over non-degenerate kept
/// channels; ties go to the lowest index.
pub fn select_reconstruction_channel(
    p: usize,
    kept: &[usize],
    lambda: f64,
    d: &SquareMatrix,
    bias: &BiasMatrix,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must be in [0, 1], got {lambda}")));
    }
    let mut best: Option<(usize, f64)> = None;
    for &j in kept {
        if bias.degenerate[j] {
            continue;
        }
        let score = selection_score(p, j, lambda, d, bias);
        let better = match best {
            None => true,
            Some((bj, bs)) => score < bs || (score == bs && j < bj),
        };
        if better {
            best = Some((j, score));
        }
    }
    best.map(|(j, _)| j).ok_or(Error::NoCandidate(p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub pruned: usize,
    pub target: usize,
    pub scale: f64,
    /// False when no valid target existed and the channel is dropped with `s = 0`.
    pub compensated: bool,
}

/// Sparse `N × N̂` matrix with exactly one entry per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliverMatrix {
    pub rows: usize,
    pub cols: usize,
    /// `(row, col, value)` sorted by row.
    pub entries: Vec<(usize, usize, f64)>,
}

impl DeliverMatrix {
    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            entries: (0..n).map(|i| (i, i, 1.0)).collect(),
        }
    }

    /// Checks the row invariants against the kept set.
    pub fn validate(&self, kept: &[usize]) -> Result<()> {
        if kept.len() != self.cols {
            return Err(Error::DeliverMatrix(format!(
                "{} columns for {} kept channels",
                self.cols,
                kept.len()
            )));
        }
        if self.entries.len() != self.rows {
            return Err(Error::DeliverMatrix(format!(
                "{} entries for {} rows",
                self.entries.len(),
                self.rows
            )));
        }
        let mut col_of = vec![None; self.rows];
        for (c, &k) in kept.iter().enumerate() {
            col_of[k] = Some(c);
        }
        for (expect_row, &(row, col, value)) in self.entries.iter().enumerate() {
            if row != expect_row {
                return Err(Error::DeliverMatrix(format!(
                    "row {expect_row} has no entry or a duplicate"
                )));
            }
            if col >= self.cols {
                return Err(Error::DeliverMatrix(format!("column {col} out of range")));
            }
            if let Some(c) = col_of[row] {
                if col != c || value != 1.0 {
                    return Err(Error::DeliverMatrix(format!(
                        "kept row {row} must be 1 at column {c}, found {value} at {col}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Dense form, for tests and reports.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.cols]; self.rows];
        for &(i, j, v) in &self.entries {
            m[i][j] += v;
        }
        m
    }
}

pub fn build_deliver_matrix(decision: &PruneDecision, selections: &[Selection]) -> Result<DeliverMatrix> {
    let n = decision.channels;
    let mut col_of = vec![None; n];
    for (c, &k) in decision.kept.iter().enumerate() {
        col_of[k] = Some(c);
    }
    let mut entries: Vec<Option<(usize, usize, f64)>> = vec![None; n];
    for &k in &decision.kept {
        entries[k] = Some((k, col_of[k].unwrap(), 1.0));
    }
    for sel in selections {
        if sel.pruned >= n || col_of[sel.pruned].is_some() {
            return Err(Error::DeliverMatrix(format!(
                "selection for channel {} which is not pruned",
                sel.pruned
            )));
        }
        let col = col_of.get(sel.target).copied().flatten().ok_or_else(|| {
            Error::DeliverMatrix(format!(
                "channel {} targets {} which is not kept",
                sel.pruned, sel.target
            ))
        })?;
        if entries[sel.pruned].is_some() {
            return Err(Error::DeliverMatrix(format!("channel {} selected twice", sel.pruned)));
        }
        if !sel.scale.is_finite() {
            return Err(Error::NonFinite(format!(
                "scale for channel {} is {}",
                sel.pruned, sel.scale
            )));
        }
        entries[sel.pruned] = Some((sel.pruned, col, sel.scale));
    }
    let entries = entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| e.ok_or_else(|| Error::DeliverMatrix(format!("pruned channel {i} has no selection"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(DeliverMatrix {
        rows: n,
        cols: decision.kept.len(),
        entries,
    })
}

/// New input slice `j` of the successor is `Σ_i S[i][j]·W_i`, accumulated in f64.
/// `group` is the slice width of one input channel (`k²` for a convolution).
pub fn reconstruct_successor(node: &LayerNode, group: usize, s: &DeliverMatrix) -> Result<LayerNode> {
    let (width, inp) = match node {
        LayerNode::Conv(c) => (
            c.weights.in_channels() * c.weights.kernel().pow(2),
            c.weights.in_channels(),
        ),
        LayerNode::Linear(l) => (l.weights.in_features(), l.weights.in_features() / group.max(1)),
        other => return Err(Error::Shape(format!("cannot reconstruct a {} node", other.kind()))),
    };
    if group == 0 || inp * group != width || inp != s.rows {
        return Err(Error::Shape(format!(
            "successor has {inp} input channels of width {group}, deliver matrix has {} rows",
            s.rows
        )));
    }
    let mut by_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); s.cols];
    for &(i, j, v) in &s.entries {
        if v != 0.0 {
            by_col[j].push((i, v));
        }
    }
    let mut acc = vec![0.0f64; group];
    rebuild_inputs(node, s.cols, group, |o, j, dst| {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for &(i, v) in &by_col[j] {
            for (a, &w) in acc.iter_mut().zip(crate::pruner::input_slice(node, o, i, group)) {
                *a += v * w as f64;
            }
        }
        for (d, a) in dst.iter_mut().zip(&acc) {
            *d = *a as f32;
        }
    })
}

/// Per-layer similarity data shared by the state features and reconstruction.
#[derive(Debug, Clone)]
pub struct LayerAnalysis {
    pub channels: Vec<ChannelVec>,
    pub affines: Vec<ChannelAffine>,
    pub distances: SquareMatrix,
    pub bias: BiasMatrix,
}

pub fn analyze_layer(graph: &ModelGraph, layer: usize) -> Result<LayerAnalysis> {
    let node = &graph
        .layer(layer)
        .ok_or_else(|| Error::Config(format!("layer index {layer} out of range")))?
        .node;
    let rows = node
        .channel_rows()
        .ok_or_else(|| Error::Shape(format!("{} node has no output channels", node.kind())))?;
    let channels = channel_vecs(layer, rows);
    let affines = channel_affines(node.bn(), channels.len());
    let distances = cosine_distance_matrix(&channels);
    let bias = bias_matrix(&channels, &affines)?;
    Ok(LayerAnalysis {
        channels,
        affines,
        distances,
        bias,
    })
}

/// Picks a target for every pruned channel. Channels without a valid target
/// fall back to the first kept channel with scale 0.
pub fn select_all(analysis: &LayerAnalysis, decision: &PruneDecision, lambda: f64) -> Result<Vec<Selection>> {
    decision
        .pruned
        .iter()
        .map(
            |&p| match select_reconstruction_channel(p, &decision.kept, lambda, &analysis.distances, &analysis.bias) {
                Ok(r) => Ok(Selection {
                    pruned: p,
                    target: r,
                    scale: analysis.bias.scale.get(p, r),
                    compensated: true,
                }),
                Err(Error::NoCandidate(_)) => Ok(Selection {
                    pruned: p,
                    target: decision.kept[0],
                    scale: 0.0,
                    compensated: false,
                }),
                Err(e) => Err(e),
            },
        )
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReconstruction {
    pub layer: usize,
    pub lambda: f64,
    pub selections: Vec<Selection>,
    /// Pruned channels dropped without compensation.
    pub uncompensated: usize,
    /// Selections whose scale is negative.
    pub negative_scales: usize,
}

/// Prunes `decision.layer` and folds each selected channel into the successor.
pub fn apply_selections(graph: &ModelGraph, decision: &PruneDecision, selections: &[Selection]) -> Result<ModelGraph> {
    let succ = check_decision(graph, decision)?;
    let s = build_deliver_matrix(decision, selections)?;
    let group = input_group(graph, succ, decision.channels)?;
    let layer = shrink_outputs(&graph.layers()[decision.layer].node, &decision.kept)?;
    let successor = reconstruct_successor(&graph.layers()[succ].node, group, &s)?;
    graph.with_layers(vec![(decision.layer, layer), (succ, successor)])
}

/// Selects targets with trade-off `lambda`, then applies them.
pub fn apply_reconstruction(
    graph: &ModelGraph,
    decision: &PruneDecision,
    analysis: &LayerAnalysis,
    lambda: f64,
) -> Result<(ModelGraph, LayerReconstruction)> {
    if analysis.channels.len() != decision.channels {
        return Err(Error::Decision(format!(
            "analysis covers {} channels, decision {}",
            analysis.channels.len(),
            decision.channels
        )));
    }
    let selections = select_all(analysis, decision, lambda)?;
    let pruned = apply_selections(graph, decision, &selections)?;
    let report = LayerReconstruction {
        layer: decision.layer,
        lambda,
        uncompensated: selections.iter().filter(|s| !s.compensated).count(),
        negative_scales: selections.iter().filter(|s| s.scale < 0.0).count(),
        selections,
    };
    Ok((pruned, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::conv;

    fn cv(index: usize, v: &[f64]) -> ChannelVec {
        ChannelVec::new(0, index, v.to_vec())
    }

    fn aff(gamma: f64, beta: f64, mean: f64, sigma: f64) -> ChannelAffine {
        ChannelAffine {
            gamma,
            beta,
            mean,
            sigma,
        }
    }

    #[test]
    fn spr_examples() {
        let a = aff(1.3, 0.2, 0.1, 0.7);
        let w = cv(0, &[1.0, -2.0, 0.5]);
        assert!((compute_spr(&w, &w, &a, &a).unwrap() - 1.0).abs() < 1e-15);
        let w2 = cv(1, &[2.0, -4.0, 1.0]);
        assert!((compute_spr(&w2, &w, &a, &a).unwrap() - 2.0).abs() < 1e-15);
        // norms 3 and 6
        let p = cv(0, &[3.0, 0.0]);
        let r = cv(1, &[0.0, 6.0]);
        let s = compute_spr(&p, &r, &aff(4.0, 0.0, 0.0, 1.0), &aff(1.0, 0.0, 0.0, 2.0)).unwrap();
        assert!((s - 4.0).abs() < 1e-15);
    }

    #[test]
    fn spr_rejects_degenerate_target() {
        let a = ChannelAffine::IDENTITY;
        let p = cv(0, &[1.0]);
        assert!(matches!(
            compute_spr(&p, &cv(1, &[0.0]), &a, &a),
            Err(Error::DegenerateChannel { channel: 1, .. })
        ));
        assert!(compute_spr(&p, &cv(1, &[1.0]), &a, &aff(0.0, 0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn bias_matrix_examples() {
        let chans = [cv(0, &[1.0, 0.0]), cv(1, &[0.0, 1.0])];
        let zero = [aff(1.0, 0.0, 0.0, 1.0); 2];
        let b = bias_matrix(&chans, &zero).unwrap();
        assert!(b.b.data().iter().all(|&v| v == 0.0));

        // i = 0 (mu 0, beta 0), j = 1 (mu 2, beta 1): b_01 = 1 * (2 - 1) = 1
        let affs = [aff(1.0, 0.0, 0.0, 1.0), aff(1.0, 1.0, 2.0, 1.0)];
        let b = bias_matrix(&chans, &affs).unwrap();
        assert!((b.b.get(0, 1) - 1.0).abs() < 1e-15);
        assert_eq!(b.b.get(0, 0), 0.0);
        assert!((b.norm.get(0, 1) - 1.0).abs() < 1e-15);
        assert!(b.norm.data().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn degenerate_channels_are_flagged() {
        let chans = [cv(0, &[1.0]), cv(1, &[0.0]), cv(2, &[2.0])];
        let b = bias_matrix(&chans, &[ChannelAffine::IDENTITY; 3]).unwrap();
        assert_eq!(b.degenerate, vec![false, true, false]);
        assert!(b.b.get(0, 1).is_infinite() && b.b.get(1, 2).is_infinite());
        assert_eq!(b.b.get(1, 1), 0.0);
        assert_eq!(b.norm.get(0, 1), 1.0);
        let d = cosine_distance_matrix(&chans);
        assert_eq!(d.get(0, 1), 2.0);
        assert_eq!(d.get(1, 1), 0.0);
    }

    #[test]
    fn cosine_examples() {
        let d = cosine_distance_matrix(&[
            cv(0, &[1.0, 0.0]),
            cv(1, &[1.0, 1.0]),
            cv(2, &[2.0, 0.0]),
            cv(3, &[-1.0, 0.0]),
        ]);
        assert!((d.get(0, 1) - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-12);
        assert_eq!(d.get(0, 2), 0.0);
        assert_eq!(d.get(0, 3), 2.0);
        assert_eq!(d.get(1, 0), d.get(0, 1));
    }

    #[test]
    fn selection_examples() {
        let d = SquareMatrix::new(3, vec![0.0, 0.2, 0.4, 0.2, 0.0, 0.0, 0.4, 0.0, 0.0]).unwrap();
        let bias = BiasMatrix {
            scale: SquareMatrix::from_fn(3, |_, _| 1.0),
            b: SquareMatrix::from_fn(3, |_, _| 0.0),
            norm: SquareMatrix::new(3, vec![0.0, 0.9, 0.1, 0.9, 0.0, 0.0, 0.1, 0.0, 0.0]).unwrap(),
            degenerate: vec![false; 3],
        };
        assert_eq!(select_reconstruction_channel(0, &[1, 2], 0.5, &d, &bias).unwrap(), 2);
        assert_eq!(select_reconstruction_channel(0, &[1, 2], 1.0, &d, &bias).unwrap(), 1);
        assert_eq!(select_reconstruction_channel(0, &[1, 2], 0.0, &d, &bias).unwrap(), 2);

        let mut neg = bias.clone();
        neg.scale = SquareMatrix::from_fn(3, |_, j| if j == 1 { -1.0 } else { 1.0 });
        assert_eq!(select_reconstruction_channel(0, &[1, 2], 1.0, &d, &neg).unwrap(), 2);

        let mut all_bad = bias;
        all_bad.degenerate = vec![false, true, true];
        assert!(matches!(
            select_reconstruction_channel(0, &[1, 2], 0.5, &d, &all_bad),
            Err(Error::NoCandidate(0))
        ));
    }

    #[test]
    fn deliver_matrix_example() {
        let dec = PruneDecision::new(0, 3, vec![0, 2]).unwrap();
        let sel = [Selection {
            pruned: 1,
            target: 0,
            scale: 0.7,
            compensated: true,
        }];
        let s = build_deliver_matrix(&dec, &sel).unwrap();
        assert_eq!(s.entries, vec![(0, 0, 1.0), (1, 0, 0.7), (2, 1, 1.0)]);
        s.validate(&dec.kept).unwrap();

        let bad = [Selection {
            pruned: 1,
            target: 1,
            scale: 0.7,
            compensated: true,
        }];
        assert!(build_deliver_matrix(&dec, &bad).is_err());
        assert!(build_deliver_matrix(&dec, &[]).is_err());
    }

    #[test]
    fn shared_target_column() {
        let dec = PruneDecision::new(0, 4, vec![1, 3]).unwrap();
        let sel: Vec<_> = [0, 2]
            .iter()
            .map(|&p| Selection {
                pruned: p,
                target: 3,
                scale: 0.5,
                compensated: true,
            })
            .collect();
        let s = build_deliver_matrix(&dec, &sel).unwrap();
        s.validate(&dec.kept).unwrap();
        let dense = s.to_dense();
        assert_eq!(dense.iter().map(|r| r[1]).collect::<Vec<_>>(), vec![0.5, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn reconstruct_hand_example() {
        // 2-in / 1-out 1x1 conv, slices [1] and [4]
        let node = conv(1, 2, 1, vec![1.0, 4.0]);
        let s = DeliverMatrix {
            rows: 2,
            cols: 1,
            entries: vec![(0, 0, 1.0), (1, 0, 0.5)],
        };
        let out = reconstruct_successor(&node, 1, &s).unwrap();
        match out {
            LayerNode::Conv(c) => assert_eq!(c.weights.data(), &[3.0]),
            _ => unreachable!(),
        }
        let same = reconstruct_successor(&node, 1, &DeliverMatrix::identity(2)).unwrap();
        assert_eq!(same, node);
    }

    #[test]
    fn diagnostics_parallel_case() {
        let a = aff(1.5, 0.0, 0.0, 0.8);
        let r = cv(1, &[1.0, -2.0, 3.0]);
        let p = cv(0, &[2.5, -5.0, 7.5]);
        let s = compute_spr(&p, &r, &a, &a).unwrap();
        let (e, b) = reconstruction_diagnostics(&p, &r, s, &a, &a).unwrap();
        assert!(e < 1e-12 && b == 0.0);
    }
}
