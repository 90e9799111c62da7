//! Layer features for the agent: DBSCAN over output channels under cosine
//! distance, silhouette of the clustering, and bias-matrix statistics.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::plan::LayerType;
use crate::reconstruct::{BiasMatrix, LayerAnalysis, SquareMatrix};

pub const NOISE: i32 = -1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub labels: Vec<i32>,
    pub c_num: usize,
    pub c_noise: f64,
    pub c_score: f64,
}

/// DBSCAN over a precomputed distance matrix. Neighborhoods are inclusive
/// (`d <= eps`) and contain the point itself. Clusters are grown breadth-first
/// from core points in index order, so a border point reachable from several
/// clusters joins the lowest-labelled one.
pub fn dbscan_labels(d: &SquareMatrix, eps: f64, min_pts: usize) -> Vec<i32> {
    let n = d.n();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| d.get(i, j) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();
    let mut labels = vec![NOISE; n];
    let mut next = 0;
    for start in 0..n {
        if !core[start] || labels[start] != NOISE {
            continue;
        }
        labels[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            for &j in &neighbors[i] {
                if labels[j] == NOISE {
                    labels[j] = next;
                    if core[j] {
                        queue.push_back(j);
                    }
                }
            }
        }
        next += 1;
    }
    labels
}

/// Mean silhouette over non-noise points; singleton clusters contribute 0.
/// Returns 0 with fewer than two clusters.
pub fn silhouette(labels: &[i32], d: &SquareMatrix) -> f64 {
    let k = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    let mut sizes = vec![0usize; k];
    for &l in labels.iter().filter(|&&l| l >= 0) {
        sizes[l as usize] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &li) in labels.iter().enumerate() {
        if li < 0 {
            continue;
        }
        count += 1;
        let li = li as usize;
        if sizes[li] < 2 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for (j, &lj) in labels.iter().enumerate() {
            if lj >= 0 && j != i {
                sums[lj as usize] += d.get(i, j);
            }
        }
        let a = sums[li] / (sizes[li] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != li && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn dbscan(d: &SquareMatrix, eps: f64, min_pts: usize) -> ClusterResult {
    let labels = dbscan_labels(d, eps, min_pts);
    let c_num = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    let noise = labels.iter().filter(|&&l| l == NOISE).count();
    let c_score = silhouette(&labels, d);
    ClusterResult {
        c_noise: if labels.is_empty() {
            0.0
        } else {
            noise as f64 / labels.len() as f64
        },
        c_num,
        c_score,
        labels,
    }
}

/// `(B_mean, 𝒫_{|b|<t})` over off-diagonal entries. The mean skips the
/// infinite entries of degenerate channels; the proportion counts them as `>= t`.
pub fn bias_stats(bias: &BiasMatrix, t: f64) -> (f64, f64) {
    let n = bias.n();
    if n < 2 {
        return (0.0, 1.0);
    }
    let (mut sum, mut finite, mut below) = (0.0, 0usize, 0usize);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let v = bias.b.get(i, j).abs();
            if v.is_finite() {
                sum += v;
                finite += 1;
            }
            if v < t {
                below += 1;
            }
        }
    }
    let mean = if finite == 0 { 0.0 } else { sum / finite as f64 };
    (mean, below as f64 / (n * (n - 1)) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateConfig {
    pub eps: f64,
    /// `None` means `max(2, ⌈0.05·N⌉)`.
    pub min_pts: Option<usize>,
    pub bias_threshold: f64,
}

impl Default for StateConfig {
    fn default() -> Self {
        Self {
            eps: 0.3,
            min_pts: None,
            bias_threshold: 0.1,
        }
    }
}

impl StateConfig {
    pub fn min_pts_for(&self, n: usize) -> usize {
        self.min_pts.unwrap_or_else(|| 2.max((0.05 * n as f64).ceil() as usize))
    }
}

pub const STATE_DIM: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    /// 1-based position in the prunable plan.
    pub layer: usize,
    #[serde(rename = "type")]
    pub layer_type: LayerType,
    pub n_prev: usize,
    pub n: usize,
    pub b_mean: f64,
    pub p_b_lt_t: f64,
    pub c_num: usize,
    pub c_noise: f64,
    pub c_score: f64,
}

impl LayerState {
    /// Agent input in `[0, 1]`; `plan_len` is the number of prunable layers.
    pub fn normalized(&self, plan_len: usize) -> [f64; STATE_DIM] {
        let log_count = |c: usize| (c.max(1) as f64).log2() / 16.0;
        [
            self.layer as f64 / plan_len.max(1) as f64,
            self.layer_type.feature(),
            log_count(self.n_prev),
            log_count(self.n),
            self.b_mean / (self.b_mean + 1.0),
            self.p_b_lt_t,
            self.c_num as f64 / self.n.max(1) as f64,
            self.c_noise,
            (self.c_score + 1.0) / 2.0,
        ]
    }
}

/// State of the layer at 1-based plan position `position`, whose input has
/// `n_prev` channels.
pub fn layer_state(
    analysis: &LayerAnalysis,
    position: usize,
    layer_type: LayerType,
    n_prev: usize,
    config: &StateConfig,
) -> LayerState {
    let n = analysis.channels.len();
    let clusters = dbscan(&analysis.distances, config.eps, config.min_pts_for(n));
    let (b_mean, p_b_lt_t) = bias_stats(&analysis.bias, config.bias_threshold);
    LayerState {
        layer: position,
        layer_type,
        n_prev,
        n,
        b_mean,
        p_b_lt_t,
        c_num: clusters.c_num,
        c_noise: clusters.c_noise,
        c_score: clusters.c_score,
    }
}
