//! Which layers can be pruned, and which layer absorbs each pruning.

use serde::{Deserialize, Serialize};

use crate::nn::{LayerNode, ModelGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerType {
    Conv,
    Linear,
}

impl LayerType {
    pub fn feature(self) -> f64 {
        match self {
            LayerType::Conv => 0.0,
            LayerType::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    /// Index of the prunable layer in the graph.
    pub layer: usize,
    pub layer_type: LayerType,
    /// Weighted layer whose input channels follow this layer's outputs.
    pub successor: usize,
    /// Parameterless or attached nodes pruned along with the layer
    /// (`bn`, `relu`, `global_avg_pool`, `flatten`).
    pub followers: Vec<String>,
    /// Weight count of the layer itself.
    pub params: usize,
    /// Output channels in the original graph.
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunablePlan {
    pub entries: Vec<PlanEntry>,
    /// Every learnable parameter of the model.
    pub total_params: usize,
}

impl PrunablePlan {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn plan_params(&self) -> usize {
        self.entries.iter().map(|e| e.params).sum()
    }

    /// Parameters outside the plan; they are never pruned.
    pub fn fixed_params(&self) -> usize {
        self.total_params - self.plan_params()
    }
}

/// Walks forward from `layer` to the weighted layer consuming its output.
/// Residual markers break the chain: shortcut-coupled outputs are not prunable.
fn successor(graph: &ModelGraph, layer: usize) -> Option<(usize, Vec<String>)> {
    let mut followers = Vec::new();
    match &graph.layers()[layer].node {
        LayerNode::Conv(c) => {
            if c.bn.is_some() {
                followers.push("bn".to_string());
            }
            if c.activation == crate::nn::Activation::Relu {
                followers.push("relu".to_string());
            }
        }
        LayerNode::Linear(l) => {
            if l.activation == crate::nn::Activation::Relu {
                followers.push("relu".to_string());
            }
        }
        _ => return None,
    }
    for (j, next) in graph.layers().iter().enumerate().skip(layer + 1) {
        match &next.node {
            LayerNode::Conv(_) | LayerNode::Linear(_) => return Some((j, followers)),
            LayerNode::GlobalAvgPool | LayerNode::Flatten => followers.push(next.node.kind().to_string()),
            LayerNode::ResidualBegin | LayerNode::ResidualEnd => return None,
        }
    }
    None
}

/// Prunable layers in graph order. The classifier (no successor) and any layer
/// whose output feeds an identity shortcut are excluded.
pub fn build_prunable_plan(graph: &ModelGraph) -> PrunablePlan {
    let mut entries = Vec::new();
    for (i, layer) in graph.layers().iter().enumerate() {
        let (layer_type, params, channels) = match &layer.node {
            LayerNode::Conv(c) => (LayerType::Conv, c.weights.data().len(), c.weights.out_channels()),
            LayerNode::Linear(l) => (LayerType::Linear, l.weights.data().len(), l.weights.out_features()),
            _ => continue,
        };
        if let Some((successor, followers)) = successor(graph, i) {
            entries.push(PlanEntry {
                layer: i,
                layer_type,
                successor,
                followers,
                params,
                channels,
            });
        }
    }
    PrunablePlan {
        entries,
        total_params: graph.param_count(),
    }
}
