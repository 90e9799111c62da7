//! Search policies behind one trait, registered by name and chosen at run time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::{PruneAction, ReconstructionMode};
use crate::error::{Error, Result};
use crate::plan::PrunablePlan;
use crate::rng::{stream, STREAM_POLICY};
use crate::sac::{SacAgent, SacConfig, Transition};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyContext {
    pub episode: usize,
    pub warmup: bool,
    /// 0-based position in the plan.
    pub position: usize,
    pub plan_len: usize,
    pub p_min: f64,
    pub p_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyAction {
    pub action: PruneAction,
    /// Squashed coordinates stored in transitions.
    pub raw: [f64; 2],
}

impl PolicyAction {
    pub fn from_raw(raw: [f64; 2], ctx: &PolicyContext) -> Self {
        Self {
            action: PruneAction::from_raw(raw, ctx.p_min, ctx.p_max),
            raw,
        }
    }

    pub fn fixed(action: PruneAction, ctx: &PolicyContext) -> Self {
        Self {
            raw: action.to_raw(ctx.p_min, ctx.p_max),
            action,
        }
    }
}

pub trait SearchPolicy {
    fn name(&self) -> &str;

    fn reconstruction(&self) -> ReconstructionMode {
        ReconstructionMode::Guided
    }

    fn act(&mut self, ctx: &PolicyContext, state: &[f64]) -> PolicyAction;

    fn observe(&mut self, _transition: Transition) -> Result<()> {
        Ok(())
    }

    /// Persists learned state, if any.
    fn save(&self, _dir: &Path) -> Result<()> {
        Ok(())
    }
}

/// What a factory needs to build any registered policy.
#[derive(Debug, Clone)]
pub struct PolicySpec {
    pub seed: u64,
    pub p_r: f64,
    pub plan: PrunablePlan,
    pub sac: SacConfig,
    /// Fixed λ for `uniform-recon`.
    pub lambda: f64,
    /// Agent checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

impl PolicySpec {
    pub fn new(seed: u64, p_r: f64, plan: PrunablePlan) -> Self {
        Self {
            seed,
            p_r,
            sac: SacConfig::for_layers(plan.len()),
            plan,
            lambda: 1.0,
            resume: None,
        }
    }

    /// Per-layer ratio that spends the budget evenly over the plan.
    pub fn uniform_ratio(&self) -> f64 {
        let target = self.p_r * self.plan.total_params as f64 - self.plan.fixed_params() as f64;
        target / self.plan.plan_params() as f64
    }
}

/// SAC agent: uniform actions during warm-up, policy samples afterwards,
/// one update per observed step.
pub struct SacPolicy {
    agent: SacAgent,
}

impl SacPolicy {
    pub fn new(agent: SacAgent) -> Self {
        Self { agent }
    }

    pub fn agent(&self) -> &SacAgent {
        &self.agent
    }
}

impl SearchPolicy for SacPolicy {
    fn name(&self) -> &str {
        "sac"
    }

    fn act(&mut self, ctx: &PolicyContext, state: &[f64]) -> PolicyAction {
        let raw = if ctx.warmup {
            self.agent.act_uniform()
        } else {
            self.agent.act(state)
        };
        PolicyAction::from_raw(raw, ctx)
    }

    fn observe(&mut self, transition: Transition) -> Result<()> {
        self.agent.store(transition);
        self.agent.update()?;
        Ok(())
    }

    fn save(&self, dir: &Path) -> Result<()> {
        self.agent.save(dir)
    }
}

/// The same ratio at every layer.
pub struct UniformPolicy {
    name: &'static str,
    preserve: f64,
    lambda: Option<f64>,
}

impl UniformPolicy {
    pub fn new(preserve: f64, lambda: Option<f64>) -> Self {
        Self {
            name: if lambda.is_some() { "uniform-recon" } else { "uniform" },
            preserve,
            lambda,
        }
    }
}

impl SearchPolicy for UniformPolicy {
    fn name(&self) -> &str {
        self.name
    }

    fn reconstruction(&self) -> ReconstructionMode {
        if self.lambda.is_some() {
            ReconstructionMode::Guided
        } else {
            ReconstructionMode::Disabled
        }
    }

    fn act(&mut self, ctx: &PolicyContext, _state: &[f64]) -> PolicyAction {
        let action = PruneAction {
            preserve: self.preserve.clamp(ctx.p_min, ctx.p_max),
            lambda: self.lambda.unwrap_or(1.0),
        };
        PolicyAction::fixed(action, ctx)
    }
}

/// Uniform random actions every episode.
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: stream(seed, STREAM_POLICY),
        }
    }
}

impl SearchPolicy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn act(&mut self, ctx: &PolicyContext, _state: &[f64]) -> PolicyAction {
        let raw = [self.rng.random_range(-1.0..=1.0), self.rng.random_range(-1.0..=1.0)];
        PolicyAction::from_raw(raw, ctx)
    }
}

pub type PolicyFactory = fn(&PolicySpec) -> Result<Box<dyn SearchPolicy>>;

#[derive(Clone)]
struct Entry {
    description: &'static str,
    factory: PolicyFactory,
}

#[derive(Clone, Default)]
pub struct PolicyRegistry {
    entries: BTreeMap<&'static str, Entry>,
}

impl PolicyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_defaults() -> Self {
        let mut r = Self::new();
        r.register("sac", "Soft Actor-Critic search over (p, lambda)", |spec| {
            let agent = match &spec.resume {
                Some(dir) => SacAgent::load(dir)?,
                None => SacAgent::new(spec.sac.clone(), spec.seed)?,
            };
            Ok(Box::new(SacPolicy::new(agent)))
        });
        r.register("uniform", "same ratio everywhere, no reconstruction", |spec| {
            Ok(Box::new(UniformPolicy::new(spec.uniform_ratio(), None)))
        });
        r.register(
            "uniform-recon",
            "same ratio everywhere, fixed-lambda reconstruction",
            |spec| {
                if !(0.0..=1.0).contains(&spec.lambda) {
                    return Err(Error::Config(format!("lambda must be in [0, 1], got {}", spec.lambda)));
                }
                Ok(Box::new(UniformPolicy::new(spec.uniform_ratio(), Some(spec.lambda))))
            },
        );
        r.register("random", "uniformly random (p, lambda) per layer", |spec| {
            Ok(Box::new(RandomPolicy::new(spec.seed)))
        });
        r
    }

    /// Adds or replaces a policy.
    pub fn register(&mut self, name: &'static str, description: &'static str, factory: PolicyFactory) {
        self.entries.insert(name, Entry { description, factory });
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn describe(&self) -> Vec<(&'static str, &'static str)> {
        self.entries.iter().map(|(k, e)| (*k, e.description)).collect()
    }

    pub fn create(&self, name: &str, spec: &PolicySpec) -> Result<Box<dyn SearchPolicy>> {
        let entry = self.entries.get(name).ok_or_else(|| Error::UnknownPolicy {
            name: name.to_string(),
            available: self.names().join(", "),
        })?;
        (entry.factory)(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{LayerType, PlanEntry};

    fn spec() -> PolicySpec {
        let entry = |layer, params| PlanEntry {
            layer,
            layer_type: LayerType::Conv,
            successor: layer + 1,
            followers: vec![],
            params,
            channels: 8,
        };
        PolicySpec::new(
            0,
            0.5,
            PrunablePlan {
                entries: vec![entry(0, 40), entry(1, 40)],
                total_params: 100,
            },
        )
    }

    fn ctx() -> PolicyContext {
        PolicyContext {
            episode: 0,
            warmup: false,
            position: 0,
            plan_len: 2,
            p_min: 0.2,
            p_max: 1.0,
        }
    }

    #[test]
    fn uniform_ratio_counts_fixed_params_as_kept() {
        // (0.5 * 100 - 20) / 80
        assert!((spec().uniform_ratio() - 0.375).abs() < 1e-15);
    }

    #[test]
    fn registry_lookup() {
        let r = PolicyRegistry::with_defaults();
        assert_eq!(r.names(), vec!["random", "sac", "uniform", "uniform-recon"]);
        let mut p = r.create("uniform", &spec()).unwrap();
        assert_eq!(p.reconstruction(), ReconstructionMode::Disabled);
        assert!((p.act(&ctx(), &[]).action.preserve - 0.375).abs() < 1e-12);
        let p = r.create("uniform-recon", &spec()).unwrap();
        assert_eq!(p.reconstruction(), ReconstructionMode::Guided);
        match r.create("ddpg", &spec()) {
            Err(Error::UnknownPolicy { available, .. }) => assert!(available.contains("sac")),
            _ => panic!("unknown policy accepted"),
        }
    }

    #[test]
    fn custom_policy_registers() {
        struct Keep;
        impl SearchPolicy for Keep {
            fn name(&self) -> &str {
                "keep"
            }
            fn act(&mut self, ctx: &PolicyContext, _: &[f64]) -> PolicyAction {
                PolicyAction::from_raw([1.0, 1.0], ctx)
            }
        }
        let mut r = PolicyRegistry::new();
        r.register("keep", "keeps everything", |_| Ok(Box::new(Keep)));
        let mut p = r.create("keep", &spec()).unwrap();
        assert_eq!(p.act(&ctx(), &[]).action.preserve, 1.0);
    }

    #[test]
    fn random_policy_stays_in_box() {
        let mut p = RandomPolicy::new(3);
        for _ in 0..1000 {
            let a = p.act(&ctx(), &[]).action;
            assert!((0.2..=1.0).contains(&a.preserve) && (0.0..=1.0).contains(&a.lambda));
        }
    }
}
