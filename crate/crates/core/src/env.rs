//! The layer-by-layer pruning episode and the full search loop.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::bundle::{checksum_hex, EvalSet};
use crate::error::{Error, Result};
use crate::nn::{accuracy_with_workers, LayerNode, ModelGraph};
use crate::plan::{build_prunable_plan, PrunablePlan};
use crate::policy::{PolicyContext, SearchPolicy};
use crate::pruner::{
    importance_l2, preserved_count, prune_layer, BudgetLedger, BudgetMode, PruneDecision, DEFAULT_P_MAX, DEFAULT_P_MIN,
};
use crate::reconstruct::{analyze_layer, apply_reconstruction, apply_selections, LayerAnalysis, Selection};
use crate::rng::{stream, STREAM_SUBSET};
use crate::sac::Transition;
use crate::similarity::{layer_state, LayerState, StateConfig, STATE_DIM};

pub const STRATEGY_VERSION: &str = "adfp-strategy/1";
pub const DEFAULT_WARMUP: usize = 200;
pub const DEFAULT_SEARCH_EPISODES: usize = 4800;

/// Preserve ratio and selection trade-off for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneAction {
    pub preserve: f64,
    pub lambda: f64,
}

impl PruneAction {
    /// Maps squashed coordinates in `[-1, 1]²` onto `[p_min, p_max] × [0, 1]`.
    pub fn from_raw(raw: [f64; 2], p_min: f64, p_max: f64) -> Self {
        let unit = |v: f64| ((v.clamp(-1.0, 1.0) + 1.0) / 2.0).clamp(0.0, 1.0);
        Self {
            preserve: p_min + unit(raw[0]) * (p_max - p_min),
            lambda: unit(raw[1]),
        }
    }

    pub fn to_raw(self, p_min: f64, p_max: f64) -> [f64; 2] {
        let p = if p_max > p_min {
            (self.preserve - p_min) / (p_max - p_min)
        } else {
            0.5
        };
        [2.0 * p - 1.0, 2.0 * self.lambda - 1.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconstructionMode {
    /// Fold pruned channels into kept ones using the action's λ.
    Guided,
    /// Drop pruned channels without compensation.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub p_r: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub budget_mode: BudgetMode,
    pub state: StateConfig,
    /// Images used for the reward; the whole set when larger than it.
    pub reward_subset: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            p_r: 0.5,
            p_min: DEFAULT_P_MIN,
            p_max: DEFAULT_P_MAX,
            budget_mode: BudgetMode::Exact,
            state: StateConfig::default(),
            reward_subset: 1000,
            seed: 0,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub layer: usize,
    pub name: String,
    pub state: LayerState,
    /// Squashed action as proposed by the policy.
    pub raw: [f64; 2],
    pub proposed: f64,
    /// Ratio after the budget clamp.
    pub preserve: f64,
    /// Kept channels over channels.
    pub effective: f64,
    /// `None` when reconstruction is disabled.
    pub lambda: Option<f64>,
    pub channels: usize,
    pub kept: Vec<usize>,
    pub selections: Vec<Selection>,
}

/// One pass over the plan on a private copy of the model.
#[derive(Debug, Clone)]
pub struct Episode {
    pub graph: ModelGraph,
    pub ledger: BudgetLedger,
    pub records: Vec<StepRecord>,
    pub reward: Option<f64>,
    /// Reason the episode ended early with reward 0.
    pub aborted: Option<String>,
    analysis: Option<LayerAnalysis>,
    state: Option<LayerState>,
}

impl Episode {
    pub fn position(&self) -> usize {
        self.records.len()
    }

    pub fn is_done(&self) -> bool {
        self.reward.is_some()
    }

    /// Raw state of the layer about to be pruned.
    pub fn current_state(&self) -> Option<&LayerState> {
        self.state.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub struct SearchEnv {
    original: ModelGraph,
    plan: PrunablePlan,
    reward_set: EvalSet,
    config: EnvConfig,
    ledger: BudgetLedger,
    signature: String,
}

/// Analysis and raw state of plan position `position` (0-based) in `graph`.
pub fn observe_layer(
    graph: &ModelGraph,
    plan: &PrunablePlan,
    position: usize,
    config: &StateConfig,
) -> Result<(LayerAnalysis, LayerState)> {
    let entry = &plan.entries[position];
    let analysis = analyze_layer(graph, entry.layer)?;
    let n_prev = graph.input_shape_of(entry.layer)?.channels();
    let state = layer_state(&analysis, position + 1, entry.layer_type, n_prev, config);
    Ok((analysis, state))
}

/// Checksum over layer names and weight shapes.
pub fn model_signature(graph: &ModelGraph) -> String {
    let mut text = format!("{:?}", graph.input());
    for layer in graph.layers() {
        let dims = match &layer.node {
            LayerNode::Conv(c) => format!("{:?}", c.weights.dims()),
            LayerNode::Linear(l) => format!("[{}, {}]", l.weights.out_features(), l.weights.in_features()),
            other => other.kind().to_string(),
        };
        text.push_str(&format!(";{}:{dims}", layer.name));
    }
    checksum_hex(text.as_bytes())
}

/// Multiply-accumulate count of `pruned` over `original`.
pub fn flops_ratio(original: &ModelGraph, pruned: &ModelGraph) -> f64 {
    pruned.macs() as f64 / original.macs() as f64
}

pub fn param_ratio(original: &ModelGraph, pruned: &ModelGraph) -> f64 {
    pruned.param_count() as f64 / original.param_count() as f64
}

impl SearchEnv {
    pub fn new(graph: ModelGraph, evalset: &EvalSet, config: EnvConfig) -> Result<Self> {
        evalset.check_model(&graph)?;
        let plan = build_prunable_plan(&graph);
        if plan.is_empty() {
            return Err(Error::Config("model has no prunable layers".into()));
        }
        if config.reward_subset == 0 {
            return Err(Error::Config("reward subset must be non-empty".into()));
        }
        let ledger = BudgetLedger::from_plan(&plan, config.p_r, config.p_min, config.p_max)?;
        let reward_set = if config.reward_subset >= evalset.len() {
            evalset.clone()
        } else {
            let mut rng = stream(config.seed, STREAM_SUBSET);
            let mut idx = sample(&mut rng, evalset.len(), config.reward_subset).into_vec();
            idx.sort_unstable();
            evalset.select(&idx)?
        };
        Ok(Self {
            signature: model_signature(&graph),
            original: graph,
            plan,
            reward_set,
            config,
            ledger,
        })
    }

    pub fn original(&self) -> &ModelGraph {
        &self.original
    }

    pub fn plan(&self) -> &PrunablePlan {
        &self.plan
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn reward_set(&self) -> &EvalSet {
        &self.reward_set
    }

    pub fn accuracy(&self, graph: &ModelGraph) -> Result<f64> {
        accuracy_with_workers(
            graph,
            &self.reward_set.images,
            &self.reward_set.labels,
            self.config.workers,
        )
    }

    fn observe(&self, graph: &ModelGraph, position: usize) -> Result<(LayerAnalysis, LayerState)> {
        observe_layer(graph, &self.plan, position, &self.config.state)
    }

    pub fn normalized(&self, state: &LayerState) -> Vec<f64> {
        state.normalized(self.plan.len()).to_vec()
    }

    pub fn reset(&self) -> Result<Episode> {
        let (analysis, state) = self.observe(&self.original, 0)?;
        Ok(Episode {
            graph: self.original.clone(),
            ledger: self.ledger.clone(),
            records: Vec::new(),
            reward: None,
            aborted: None,
            analysis: Some(analysis),
            state: Some(state),
        })
    }

    /// Clamp, prune, reconstruct, then observe the next layer. The reward is
    /// the subset accuracy after the last layer and 0 before it.
    pub fn step(
        &self,
        ep: &mut Episode,
        raw: [f64; 2],
        action: PruneAction,
        mode: ReconstructionMode,
    ) -> Result<StepOutcome> {
        if ep.is_done() {
            return Err(Error::Config("step on a finished episode".into()));
        }
        let position = ep.position();
        let entry = &self.plan.entries[position];
        let analysis = ep.analysis.take().expect("analysis for the current layer");
        let state = ep.state.take().expect("state for the current layer");
        let preserve = ep.ledger.clamp(action.preserve, position, self.config.budget_mode)?;
        let channels = analysis.channels.len();
        let scores = importance_l2(
            ep.graph.layers()[entry.layer]
                .node
                .channel_rows()
                .expect("plan entries have output channels"),
        );
        let decision = PruneDecision::top_k(entry.layer, &scores, preserved_count(preserve, channels))?;
        let mut selections = Vec::new();
        let lambda = match mode {
            ReconstructionMode::Guided => Some(action.lambda),
            ReconstructionMode::Disabled => None,
        };
        if !decision.keeps_all() {
            ep.graph = match lambda {
                Some(l) => {
                    let (g, report) = apply_reconstruction(&ep.graph, &decision, &analysis, l)?;
                    selections = report.selections;
                    g
                }
                None => prune_layer(&ep.graph, &decision)?,
            };
        }
        ep.ledger.commit(decision.p_effective());
        ep.records.push(StepRecord {
            layer: entry.layer,
            name: ep.graph.layers()[entry.layer].name.clone(),
            state,
            raw,
            proposed: action.preserve,
            preserve,
            effective: decision.p_effective(),
            lambda,
            channels,
            kept: decision.kept,
            selections,
        });

        let touched = [entry.layer, entry.successor];
        let finite = touched.iter().all(|&i| layer_is_finite(&ep.graph.layers()[i].node));
        if !finite {
            ep.aborted = Some(format!(
                "non-finite weights after reconstructing `{}`",
                ep.graph.layers()[entry.layer].name
            ));
            ep.reward = Some(0.0);
            return Ok(StepOutcome {
                next_state: vec![0.0; STATE_DIM],
                reward: 0.0,
                done: true,
            });
        }
        if position + 1 == self.plan.len() {
            let reward = self.accuracy(&ep.graph)?;
            ep.reward = Some(reward);
            return Ok(StepOutcome {
                next_state: vec![0.0; STATE_DIM],
                reward,
                done: true,
            });
        }
        let (analysis, state) = self.observe(&ep.graph, position + 1)?;
        let next_state = self.normalized(&state);
        ep.analysis = Some(analysis);
        ep.state = Some(state);
        Ok(StepOutcome {
            next_state,
            reward: 0.0,
            done: false,
        })
    }

    pub fn strategy(&self, ep: &Episode, policy: &str, episode: usize) -> Strategy {
        Strategy {
            format_version: STRATEGY_VERSION.into(),
            model_signature: self.signature.clone(),
            policy: policy.to_string(),
            p_r: self.config.p_r,
            episode,
            layers: ep
                .records
                .iter()
                .map(|r| StrategyLayer {
                    layer: r.layer,
                    name: r.name.clone(),
                    channels: r.channels,
                    preserve: r.preserve,
                    lambda: r.lambda,
                    kept: r.kept.clone(),
                    selections: r.selections.clone(),
                })
                .collect(),
            accuracy: ep.reward.unwrap_or(0.0),
            full_accuracy: None,
            param_ratio: param_ratio(&self.original, &ep.graph),
            budget_ratio: ep.ledger.preserved_ratio(),
            flops_ratio: flops_ratio(&self.original, &ep.graph),
        }
    }
}

fn layer_is_finite(node: &LayerNode) -> bool {
    match node {
        LayerNode::Conv(c) => c.weights.data().iter().all(|v| v.is_finite()),
        LayerNode::Linear(l) => {
            l.weights.data().iter().all(|v| v.is_finite())
                && l.weights.bias().is_none_or(|b| b.iter().all(|v| v.is_finite()))
        }
        _ => true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyLayer {
    pub layer: usize,
    pub name: String,
    pub channels: usize,
    pub preserve: f64,
    pub lambda: Option<f64>,
    pub kept: Vec<usize>,
    pub selections: Vec<Selection>,
}

/// A replayable pruning decision for every plan layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub format_version: String,
    pub model_signature: String,
    pub policy: String,
    pub p_r: f64,
    pub episode: usize,
    pub layers: Vec<StrategyLayer>,
    /// Accuracy on the reward subset.
    pub accuracy: f64,
    /// Accuracy on the whole evaluation set, when computed.
    pub full_accuracy: Option<f64>,
    /// Parameters of the pruned model over the original.
    pub param_ratio: f64,
    /// Preserved ratio according to the budget ledger.
    pub budget_ratio: f64,
    pub flops_ratio: f64,
}

/// Replays `strategy` on `graph`, reproducing the graph that earned its reward.
pub fn apply_strategy(graph: &ModelGraph, strategy: &Strategy) -> Result<ModelGraph> {
    if strategy.format_version != STRATEGY_VERSION {
        return Err(Error::Version {
            found: strategy.format_version.clone(),
            expected: STRATEGY_VERSION.into(),
        });
    }
    let signature = model_signature(graph);
    if signature != strategy.model_signature {
        return Err(Error::StrategyMismatch(format!(
            "strategy was made for model {}, this model is {signature}",
            strategy.model_signature
        )));
    }
    let mut g = graph.clone();
    for l in &strategy.layers {
        let name = g.layer(l.layer).map(|x| x.name.as_str());
        if name != Some(l.name.as_str()) {
            return Err(Error::StrategyMismatch(format!(
                "strategy layer `{}` is not at index {}",
                l.name, l.layer
            )));
        }
        let decision = PruneDecision::new(l.layer, l.channels, l.kept.clone())?;
        if decision.keeps_all() {
            continue;
        }
        g = match l.lambda {
            Some(_) => apply_selections(&g, &decision, &l.selections),
            None => prune_layer(&g, &decision),
        }
        .map_err(|e| e.at_layer(l.layer, &l.name))?;
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub warmup: usize,
    pub episodes: usize,
    /// Index of the first episode, for resumed runs.
    pub start_episode: usize,
    /// Stop before this episode index instead of running to the end.
    pub stop_episode: Option<usize>,
    pub seed: u64,
}

impl SearchConfig {
    pub fn new(warmup: usize, episodes: usize, seed: u64) -> Self {
        Self {
            warmup,
            episodes,
            start_episode: 0,
            stop_episode: None,
            seed,
        }
    }

    pub fn total(&self) -> usize {
        self.warmup + self.episodes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAction {
    pub name: String,
    pub raw: [f64; 2],
    pub preserve: f64,
    pub effective: f64,
    pub lambda: Option<f64>,
}

/// One line of the episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub seed: u64,
    pub warmup: bool,
    pub reward: f64,
    pub best_reward: f64,
    pub param_ratio: f64,
    pub aborted: Option<String>,
    pub layers: Vec<LayerAction>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: Strategy,
    pub best_graph: ModelGraph,
    /// Running maximum of the reward after each episode.
    pub best_curve: Vec<f64>,
    pub baseline_accuracy: f64,
}

/// Runs `warmup + episodes` episodes, feeding every transition to the policy
/// and tracking the highest-reward strategy. Ties keep the earlier episode.
pub fn run_search(
    env: &SearchEnv,
    policy: &mut dyn SearchPolicy,
    config: &SearchConfig,
    on_episode: impl FnMut(&EpisodeRecord) -> Result<()>,
) -> Result<SearchOutcome> {
    resume_search(env, policy, config, None, on_episode)
}

/// [`run_search`] seeded with the best strategy of an earlier, interrupted run.
pub fn resume_search(
    env: &SearchEnv,
    policy: &mut dyn SearchPolicy,
    config: &SearchConfig,
    prior_best: Option<(Strategy, ModelGraph)>,
    mut on_episode: impl FnMut(&EpisodeRecord) -> Result<()>,
) -> Result<SearchOutcome> {
    let total = config.stop_episode.map_or(config.total(), |s| s.min(config.total()));
    if total <= config.start_episode {
        return Err(Error::Config(format!(
            "nothing to run: {total} episodes, starting at {}",
            config.start_episode
        )));
    }
    let baseline_accuracy = env.accuracy(env.original())?;
    let mut best: Option<(f64, Strategy, ModelGraph)> = prior_best.map(|(s, g)| (s.accuracy, s, g));
    let mut best_curve = Vec::with_capacity(total - config.start_episode);
    let (p_min, p_max) = (env.config().p_min, env.config().p_max);
    for episode in config.start_episode..total {
        let warmup = episode < config.warmup;
        let mut ep = env.reset()?;
        let mut state = env.normalized(ep.current_state().unwrap());
        let mode = policy.reconstruction();
        while !ep.is_done() {
            let ctx = PolicyContext {
                episode,
                warmup,
                position: ep.position(),
                plan_len: env.plan().len(),
                p_min,
                p_max,
            };
            let act = policy.act(&ctx, &state);
            let out = match env.step(&mut ep, act.raw, act.action, mode) {
                Ok(out) => out,
                Err(e @ Error::NonFinite(_)) => {
                    ep.aborted = Some(e.to_string());
                    ep.reward = Some(0.0);
                    StepOutcome {
                        next_state: vec![0.0; STATE_DIM],
                        reward: 0.0,
                        done: true,
                    }
                }
                Err(e) => return Err(e),
            };
            policy.observe(Transition {
                state: std::mem::take(&mut state),
                action: act.raw,
                reward: out.reward,
                next_state: out.next_state.clone(),
                done: out.done,
            })?;
            state = out.next_state;
        }
        let reward = ep.reward.unwrap_or(0.0);
        if best.as_ref().is_none_or(|(b, _, _)| reward > *b) {
            best = Some((reward, env.strategy(&ep, policy.name(), episode), ep.graph.clone()));
        }
        let best_reward = best.as_ref().map_or(reward, |b| b.0);
        best_curve.push(best_reward);
        on_episode(&EpisodeRecord {
            episode,
            seed: config.seed,
            warmup,
            reward,
            best_reward,
            param_ratio: param_ratio(env.original(), &ep.graph),
            aborted: ep.aborted.clone(),
            layers: ep
                .records
                .iter()
                .map(|r| LayerAction {
                    name: r.name.clone(),
                    raw: r.raw,
                    preserve: r.preserve,
                    effective: r.effective,
                    lambda: r.lambda,
                })
                .collect(),
        })?;
    }
    let (_, best, best_graph) = best.expect("at least one episode ran");
    Ok(SearchOutcome {
        best,
        best_graph,
        best_curve,
        baseline_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_action_mapping() {
        let a = PruneAction::from_raw([0.0, 0.0], 0.2, 1.0);
        assert!((a.preserve - 0.6).abs() < 1e-15 && a.lambda == 0.5);
        let lo = PruneAction::from_raw([-1.0, -1.0], 0.2, 1.0);
        assert_eq!((lo.preserve, lo.lambda), (0.2, 0.0));
        let hi = PruneAction::from_raw([1.0, 1.0], 0.2, 1.0);
        assert_eq!((hi.preserve, hi.lambda), (1.0, 1.0));
        let back = PruneAction::from_raw(a.to_raw(0.2, 1.0), 0.2, 1.0);
        assert!((back.preserve - a.preserve).abs() < 1e-15);
    }
}
