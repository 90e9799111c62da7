//! Channel ranking, preserved-count rounding, the global budget clamp and
//! structural surgery.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ActShape, ChannelRows, ConvLayer, LayerNode, LinearLayer, LinearWeights, ModelGraph};
use crate::plan::PrunablePlan;

pub const DEFAULT_P_MIN: f64 = 0.2;
pub const DEFAULT_P_MAX: f64 = 1.0;

/// L2 norm of every output channel.
pub fn importance_l2(weights: &dyn ChannelRows) -> Vec<f64> {
    (0..weights.out_channels())
        .map(|o| {
            weights
                .row(o)
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// `round(p * n)` with halves away from zero, clamped to `[1, n]`.
pub fn preserved_count(p: f64, n: usize) -> usize {
    ((p * n as f64).round() as usize).clamp(1, n.max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    pub layer: usize,
    pub channels: usize,
    pub kept: Vec<usize>,
    pub pruned: Vec<usize>,
}

impl PruneDecision {
    /// Validates an explicit kept set against an `channels`-wide layer.
    pub fn new(layer: usize, channels: usize, kept: Vec<usize>) -> Result<Self> {
        if kept.is_empty() {
            return Err(Error::Decision("at least one channel must be kept".into()));
        }
        if kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Decision(format!(
                "kept channels must be strictly ascending: {kept:?}"
            )));
        }
        if let Some(&last) = kept.last() {
            if last >= channels {
                return Err(Error::Decision(format!(
                    "kept channel {last} out of range for {channels} channels"
                )));
            }
        }
        let mut is_kept = vec![false; channels];
        for &k in &kept {
            is_kept[k] = true;
        }
        let pruned = (0..channels).filter(|&i| !is_kept[i]).collect();
        Ok(Self {
            layer,
            channels,
            kept,
            pruned,
        })
    }

    /// Keeps the `keep` highest-scoring channels; equal scores keep the lower index.
    pub fn top_k(layer: usize, scores: &[f64], keep: usize) -> Result<Self> {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
        kept.sort_unstable();
        Self::new(layer, scores.len(), kept)
    }

    pub fn p_effective(&self) -> f64 {
        self.kept.len() as f64 / self.channels as f64
    }

    pub fn keeps_all(&self) -> bool {
        self.pruned.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    /// Lower bound only, exactly as in the layer-wise clamp.
    LowerBound,
    /// Also caps each layer so the remaining layers at `p_min` can still land
    /// on the budget; the final ratio ends at `p_r` up to rounding.
    #[default]
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerLayer {
    pub params: usize,
    pub channels: usize,
}

/// Global preserve-ratio bookkeeping across one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub p_r: f64,
    pub p_min: f64,
    pub p_max: f64,
    /// `W_all`: every parameter of the model.
    pub total_params: usize,
    /// Prunable layers in plan order.
    pub layers: Vec<LedgerLayer>,
    /// Committed (effective) ratios of the first `history.len()` layers.
    pub history: Vec<f64>,
}

impl BudgetLedger {
    pub fn new(p_r: f64, p_min: f64, p_max: f64, total_params: usize, layers: Vec<LedgerLayer>) -> Result<Self> {
        if !(p_r > 0.0 && p_r <= 1.0) {
            return Err(Error::Config(format!("p_r must be in (0, 1], got {p_r}")));
        }
        if !(p_min > 0.0 && p_min <= p_max && p_max <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 < p_min <= p_max <= 1, got p_min {p_min}, p_max {p_max}"
            )));
        }
        let plan: usize = layers.iter().map(|l| l.params).sum();
        if plan > total_params {
            return Err(Error::Config(format!(
                "plan parameters {plan} exceed model total {total_params}"
            )));
        }
        if layers.iter().any(|l| l.params == 0 || l.channels == 0) {
            return Err(Error::Config("prunable layers need weights and channels".into()));
        }
        Ok(Self {
            p_r,
            p_min,
            p_max,
            total_params,
            layers,
            history: Vec::new(),
        })
    }

    pub fn from_plan(plan: &PrunablePlan, p_r: f64, p_min: f64, p_max: f64) -> Result<Self> {
        let layers = plan
            .entries
            .iter()
            .map(|e| LedgerLayer {
                params: e.params,
                channels: e.channels,
            })
            .collect();
        Self::new(p_r, p_min, p_max, plan.total_params, layers)
    }

    /// Parameters outside the plan, counted as preserved.
    pub fn fixed_params(&self) -> usize {
        self.total_params - self.layers.iter().map(|l| l.params).sum::<usize>()
    }

    fn target_remaining(&self, position: usize, future_ratio: f64) -> f64 {
        let committed: f64 = self.history[..position]
            .iter()
            .zip(&self.layers)
            .map(|(p, l)| p * l.params as f64)
            .sum();
        let future: f64 = self.layers[position + 1..].iter().map(|l| l.params as f64).sum();
        self.p_r * self.total_params as f64 - self.fixed_params() as f64 - future_ratio * future - committed
    }

    /// `(p_r W_all - p_max Σ_{k>l} W_k - Σ_{k<l} p_k W_k) / W_l`, with the
    /// unprunable parameters entering the committed sum at ratio 1.
    pub fn lower_bound(&self, position: usize) -> f64 {
        self.target_remaining(position, self.p_max) / self.layers[position].params as f64
    }

    /// Largest ratio that still lets the remaining layers at `p_min` meet the budget.
    pub fn upper_bound(&self, position: usize) -> f64 {
        self.target_remaining(position, self.p_min) / self.layers[position].params as f64
    }

    fn check_position(&self, position: usize) -> Result<()> {
        if position >= self.layers.len() {
            return Err(Error::Config(format!(
                "plan position {position} out of range for {} layers",
                self.layers.len()
            )));
        }
        if self.history.len() < position {
            return Err(Error::Config(format!(
                "ledger has {} committed layers, position {position} needs all earlier ones",
                self.history.len()
            )));
        }
        Ok(())
    }

    /// Slack the lower bound may exceed `p_max` by from half-channel rounding
    /// of the committed layers.
    fn rounding_allowance(&self, position: usize) -> f64 {
        let slack: f64 = self.layers[..position]
            .iter()
            .map(|l| 0.5 * l.params as f64 / l.channels as f64)
            .sum();
        slack / self.layers[position].params as f64 + 1e-9
    }

    /// Layer-wise clamp: `min(p_max, max(p, p_min, lower_bound))`.
    pub fn clamp_ratio(&self, p_proposed: f64, position: usize) -> Result<f64> {
        self.check_position(position)?;
        let lower = self.lower_bound(position);
        if lower > self.p_max + self.rounding_allowance(position) {
            return Err(Error::BudgetInfeasible {
                position,
                lower,
                p_max: self.p_max,
            });
        }
        Ok(self.p_max.min(p_proposed.max(self.p_min).max(lower)))
    }

    /// Clamp under `mode`; `Exact` adds the upper cap from [`Self::upper_bound`].
    pub fn clamp(&self, p_proposed: f64, position: usize, mode: BudgetMode) -> Result<f64> {
        let p = self.clamp_ratio(p_proposed, position)?;
        match mode {
            BudgetMode::LowerBound => Ok(p),
            BudgetMode::Exact => {
                let lo = self.p_max.min(self.p_min.max(self.lower_bound(position)));
                let hi = lo.max(self.p_max.min(self.upper_bound(position)));
                Ok(p.clamp(lo, hi))
            }
        }
    }

    pub fn commit(&mut self, p_effective: f64) {
        self.history.push(p_effective);
    }

    /// `(fixed + Σ p_k W_k) / W_all` over committed layers.
    pub fn preserved_ratio(&self) -> f64 {
        let committed: f64 = self
            .history
            .iter()
            .zip(&self.layers)
            .map(|(p, l)| p * l.params as f64)
            .sum();
        (self.fixed_params() as f64 + committed) / self.total_params as f64
    }

    /// One channel per layer, as a fraction of `W_all`.
    pub fn rounding_slack(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.params as f64 / l.channels as f64)
            .sum::<f64>()
            / self.total_params as f64
    }
}

fn select_rows(rows: &dyn ChannelRows, keep: &[usize]) -> Vec<f32> {
    keep.iter().flat_map(|&o| rows.row(o).iter().copied()).collect()
}

/// Number of input features each input channel of `succ` owns (`k*k` for
/// conv, `features / channels` for a linear layer after flatten).
pub(crate) fn input_group(graph: &ModelGraph, succ: usize, channels: usize) -> Result<usize> {
    match (&graph.layers()[succ].node, graph.input_shape_of(succ)?) {
        (LayerNode::Conv(c), ActShape::Map { c: inc, .. }) if inc == channels => {
            Ok(c.weights.kernel() * c.weights.kernel())
        }
        (LayerNode::Linear(l), ActShape::Flat { features, channels: ch })
            if ch == channels && features == l.weights.in_features() =>
        {
            Ok(features / channels)
        }
        (node, shape) => Err(Error::Shape(format!(
            "successor `{}` ({}) cannot take {channels} channels from {shape:?}",
            graph.layers()[succ].name,
            node.kind()
        ))),
    }
}

/// Layer `layer` restricted to the kept output channels (attached batch-norm
/// shrinks identically).
pub(crate) fn shrink_outputs(node: &LayerNode, keep: &[usize]) -> Result<LayerNode> {
    match node {
        LayerNode::Conv(conv) => {
            let w = &conv.weights;
            Ok(LayerNode::Conv(ConvLayer {
                weights: w.with_data(keep.len(), w.in_channels(), select_rows(w, keep))?,
                bn: conv.bn.as_ref().map(|bn| bn.select(keep)),
                activation: conv.activation,
            }))
        }
        LayerNode::Linear(lin) => {
            let w = &lin.weights;
            let bias = w.bias().map(|b| keep.iter().map(|&o| b[o]).collect());
            Ok(LayerNode::Linear(LinearLayer {
                weights: LinearWeights::new(keep.len(), w.in_features(), select_rows(w, keep), bias)?,
                activation: lin.activation,
            }))
        }
        other => Err(Error::Decision(format!(
            "cannot prune outputs of a {} node",
            other.kind()
        ))),
    }
}

/// Rebuilds a successor's weights from per-new-channel input slices. `slices`
/// yields, for each output unit and each new input channel, `group` values.
pub(crate) fn rebuild_inputs(
    node: &LayerNode,
    new_channels: usize,
    group: usize,
    mut slice: impl FnMut(usize, usize, &mut [f32]),
) -> Result<LayerNode> {
    match node {
        LayerNode::Conv(conv) => {
            let w = &conv.weights;
            let mut data = vec![0.0f32; w.out_channels() * new_channels * group];
            for o in 0..w.out_channels() {
                for j in 0..new_channels {
                    let start = (o * new_channels + j) * group;
                    slice(o, j, &mut data[start..start + group]);
                }
            }
            Ok(LayerNode::Conv(ConvLayer {
                weights: w.with_data(w.out_channels(), new_channels, data)?,
                bn: conv.bn.clone(),
                activation: conv.activation,
            }))
        }
        LayerNode::Linear(lin) => {
            let w = &lin.weights;
            let inp = new_channels * group;
            let mut data = vec![0.0f32; w.out_features() * inp];
            for o in 0..w.out_features() {
                for j in 0..new_channels {
                    let start = o * inp + j * group;
                    slice(o, j, &mut data[start..start + group]);
                }
            }
            Ok(LayerNode::Linear(LinearLayer {
                weights: LinearWeights::new(w.out_features(), inp, data, w.bias().map(<[f32]>::to_vec))?,
                activation: lin.activation,
            }))
        }
        other => Err(Error::Decision(format!("{} node has no input channels", other.kind()))),
    }
}

/// Slice of input channel `i` for output unit `o` of a successor.
pub(crate) fn input_slice(node: &LayerNode, o: usize, i: usize, group: usize) -> &[f32] {
    match node {
        LayerNode::Conv(c) => {
            let w = &c.weights;
            let start = (o * w.in_channels() + i) * group;
            &w.data()[start..start + group]
        }
        LayerNode::Linear(l) => {
            let w = &l.weights;
            let start = o * w.in_features() + i * group;
            &w.data()[start..start + group]
        }
        _ => &[],
    }
}

pub(crate) fn check_decision(graph: &ModelGraph, decision: &PruneDecision) -> Result<usize> {
    let layer = graph
        .layer(decision.layer)
        .ok_or_else(|| Error::Decision(format!("layer index {} out of range", decision.layer)))?;
    let rows = layer
        .node
        .channel_rows()
        .ok_or_else(|| Error::Decision(format!("layer `{}` has no output channels", layer.name)))?;
    if rows.out_channels() != decision.channels {
        return Err(Error::Decision(format!(
            "decision covers {} channels, layer `{}` has {}",
            decision.channels,
            layer.name,
            rows.out_channels()
        )));
    }
    // re-validate in case the decision was deserialized or hand-built
    PruneDecision::new(decision.layer, decision.channels, decision.kept.clone())?;
    crate::nn::next_weighted(graph, decision.layer)
        .ok_or_else(|| Error::Decision(format!("layer `{}` has no prunable successor", layer.name)))
}

/// Removes the pruned output channels of `decision.layer` (with its
/// batch-norm) and the matching input channels of its successor.
pub fn prune_layer(graph: &ModelGraph, decision: &PruneDecision) -> Result<ModelGraph> {
    let succ = check_decision(graph, decision)?;
    let group = input_group(graph, succ, decision.channels)?;
    let layer = shrink_outputs(&graph.layers()[decision.layer].node, &decision.kept)?;
    let succ_node = &graph.layers()[succ].node;
    let successor = rebuild_inputs(succ_node, decision.kept.len(), group, |o, j, dst| {
        dst.copy_from_slice(input_slice(succ_node, o, decision.kept[j], group));
    })?;
    graph.with_layers(vec![(decision.layer, layer), (succ, successor)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ConvWeights;

    #[test]
    fn l2_importance() {
        let w = ConvWeights::new(2, 1, 1, 1, 0, vec![0.0, 2.0]).unwrap();
        assert_eq!(importance_l2(&w), vec![0.0, 2.0]);
        let w = ConvWeights::new(1, 2, 1, 1, 0, vec![3.0, 4.0]).unwrap();
        assert_eq!(importance_l2(&w), vec![5.0]);
        let a = ConvWeights::new(3, 2, 1, 1, 0, vec![1., 2., -3., 0.5, 0.1, 0.2]).unwrap();
        let b = ConvWeights::new(3, 2, 1, 1, 0, a.data().iter().map(|v| v * 2.0).collect()).unwrap();
        for (x, y) in importance_l2(&a).iter().zip(importance_l2(&b)) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn preserved_count_rounding() {
        assert_eq!(preserved_count(0.5, 10), 5);
        assert_eq!(preserved_count(0.05, 4), 1);
        assert_eq!(preserved_count(1.0, 7), 7);
        assert_eq!(preserved_count(0.25, 2), 1); // 0.5 rounds away from zero
        assert_eq!(preserved_count(0.75, 2), 2);
    }

    #[test]
    fn top_k_breaks_ties_low() {
        let d = PruneDecision::top_k(0, &[1.0, 3.0, 3.0, 3.0], 2).unwrap();
        assert_eq!(d.kept, vec![1, 2]);
        assert_eq!(d.pruned, vec![0, 3]);
        assert_eq!(d.p_effective(), 0.5);
    }

    #[test]
    fn decision_validation() {
        assert!(PruneDecision::new(0, 3, vec![2, 0]).is_err());
        assert!(PruneDecision::new(0, 3, vec![0, 0]).is_err());
        assert!(PruneDecision::new(0, 3, vec![3]).is_err());
        assert!(PruneDecision::new(0, 3, vec![]).is_err());
    }

    fn ledger() -> BudgetLedger {
        let layers = [50, 30, 20]
            .iter()
            .map(|&params| LedgerLayer { params, channels: 10 })
            .collect();
        BudgetLedger::new(0.5, 0.2, 1.0, 100, layers).unwrap()
    }

    #[test]
    fn clamp_first_layer() {
        let l = ledger();
        // (50 - 50 - 0) / 50 = 0
        assert!(l.lower_bound(0).abs() < 1e-12);
        assert_eq!(l.clamp_ratio(0.1, 0).unwrap(), 0.2);
        assert_eq!(l.clamp_ratio(0.6, 0).unwrap(), 0.6);
    }

    #[test]
    fn clamp_last_layer_uses_history() {
        let mut l = ledger();
        l.commit(0.4);
        l.commit(0.4);
        // (50 - 0 - 32) / 20 = 0.9
        assert!((l.lower_bound(2) - 0.9).abs() < 1e-12);
        assert!((l.clamp_ratio(0.3, 2).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(l.clamp_ratio(0.95, 2).unwrap(), 0.95);
        // exact mode lands on the budget at the last layer
        assert!((l.clamp(0.95, 2, BudgetMode::Exact).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn infeasible_budget_errors() {
        let mut l = ledger();
        l.commit(0.2);
        l.commit(0.2);
        // (50 - 0 - 16) / 20 = 1.7 > p_max
        assert!(matches!(
            l.clamp_ratio(0.5, 2),
            Err(Error::BudgetInfeasible { position: 2, .. })
        ));
        let tight = BudgetLedger::new(
            1.0,
            0.2,
            0.9,
            100,
            vec![LedgerLayer {
                params: 100,
                channels: 4,
            }],
        )
        .unwrap();
        assert!(tight.clamp_ratio(1.0, 0).is_err());
    }

    #[test]
    fn ledger_rejects_bad_bounds() {
        let layers = vec![LedgerLayer {
            params: 10,
            channels: 2,
        }];
        assert!(BudgetLedger::new(0.0, 0.2, 1.0, 10, layers.clone()).is_err());
        assert!(BudgetLedger::new(0.5, 0.6, 0.5, 10, layers.clone()).is_err());
        assert!(BudgetLedger::new(0.5, 0.2, 1.0, 5, layers).is_err());
    }
}
