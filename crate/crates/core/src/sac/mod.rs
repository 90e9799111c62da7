//! Soft Actor-Critic over the two-dimensional action `(p, λ)`: one
//! squashed-Gaussian policy, twin Q-networks with soft-updated targets, and a
//! learned entropy coefficient. Everything runs in f64 with hand-written
//! gradients.

mod adam;
pub mod losses;
mod mlp;
mod replay;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use mlp::{param_count, Mlp, Trace};
pub use replay::{ReplayBuffer, Transition};

use crate::bundle::{checksum_hex, read_checked, write_file, BlobRef};
use crate::error::{Error, Result};
use crate::rng::{stream, STREAM_AGENT, STREAM_REPLAY};
use losses::ACTION_DIM;

pub const AGENT_VERSION: &str = "adfp-agent/1";
pub const AGENT_FILE: &str = "agent.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    pub state_dim: usize,
    pub hidden: Vec<usize>,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    pub discount: f64,
    pub tau: f64,
    pub batch: usize,
    pub target_entropy: f64,
    pub initial_alpha: f64,
    pub buffer_capacity: usize,
}

impl SacConfig {
    /// Defaults for a plan of `layers` prunable layers.
    pub fn for_layers(layers: usize) -> Self {
        Self {
            state_dim: crate::similarity::STATE_DIM,
            hidden: vec![256, 256],
            lr_actor: 1e-3,
            lr_critic: 1e-3,
            lr_alpha: 3e-4,
            discount: 1.0,
            tau: 0.01,
            batch: 128,
            target_entropy: -(ACTION_DIM as f64),
            initial_alpha: 0.01,
            buffer_capacity: 100 * layers.max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_actor", self.lr_actor),
            ("lr_critic", self.lr_critic),
            ("lr_alpha", self.lr_alpha),
            ("initial_alpha", self.initial_alpha),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must be in (0, 1], got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::Config(format!(
                "discount must be in [0, 1], got {}",
                self.discount
            )));
        }
        if self.batch == 0 || self.buffer_capacity == 0 || self.state_dim == 0 {
            return Err(Error::Config(
                "batch, buffer capacity and state size must be positive".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layers must be non-empty".into()));
        }
        Ok(())
    }

    fn actor_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.state_dim];
        s.extend(&self.hidden);
        s.push(2 * ACTION_DIM);
        s
    }

    fn critic_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.state_dim + ACTION_DIM];
        s.extend(&self.hidden);
        s.push(1);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub loss_q1: f64,
    pub loss_q2: f64,
    pub loss_pi: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct SacAgent {
    config: SacConfig,
    pub actor: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub log_alpha: f64,
    opt_actor: Adam,
    opt_q1: Adam,
    opt_q2: Adam,
    opt_alpha: Adam,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    updates: u64,
}

impl SacAgent {
    pub fn new(config: SacConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, STREAM_AGENT);
        let actor = Mlp::new(&config.actor_sizes(), &mut rng);
        let q1 = Mlp::new(&config.critic_sizes(), &mut rng);
        let q2 = Mlp::new(&config.critic_sizes(), &mut rng);
        Ok(Self {
            opt_actor: Adam::new(config.lr_actor, actor.params().len()),
            opt_q1: Adam::new(config.lr_critic, q1.params().len()),
            opt_q2: Adam::new(config.lr_critic, q2.params().len()),
            opt_alpha: Adam::new(config.lr_alpha, 1),
            log_alpha: config.initial_alpha.ln(),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            buffer: ReplayBuffer::new(config.buffer_capacity),
            replay_rng: stream(seed, STREAM_REPLAY),
            updates: 0,
            actor,
            q1,
            q2,
            rng,
            config,
        })
    }

    pub fn config(&self) -> &SacConfig {
        &self.config
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    fn check_state(&self, state: &[f64]) {
        assert_eq!(state.len(), self.config.state_dim, "state dimension");
    }

    fn normal_pair(&mut self) -> [f64; ACTION_DIM] {
        [self.rng.sample(StandardNormal), self.rng.sample(StandardNormal)]
    }

    /// Squashed sample from the policy, in `(-1, 1)²`.
    pub fn act(&mut self, state: &[f64]) -> [f64; ACTION_DIM] {
        self.check_state(state);
        let eps = self.normal_pair();
        losses::policy_sample(&self.actor.forward(state), eps).action
    }

    /// `tanh(mean)`.
    pub fn act_deterministic(&self, state: &[f64]) -> [f64; ACTION_DIM] {
        self.check_state(state);
        let out = self.actor.forward(state);
        [out[0].tanh(), out[1].tanh()]
    }

    /// Uniform over the action box, for warm-up.
    pub fn act_uniform(&mut self) -> [f64; ACTION_DIM] {
        [self.rng.random_range(-1.0..=1.0), self.rng.random_range(-1.0..=1.0)]
    }

    pub fn store(&mut self, t: Transition) {
        self.buffer.push(t);
    }

    /// One SAC step; `Ok(None)` while the buffer holds fewer than `batch` transitions.
    pub fn update(&mut self) -> Result<Option<UpdateStats>> {
        let idx = match self.buffer.sample_indices(self.config.batch, &mut self.replay_rng) {
            Ok(idx) => idx,
            Err(Error::NotReady { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let batch: Vec<Transition> = idx.iter().map(|&i| self.buffer.get(i).clone()).collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        self.update_on(&refs).map(Some)
    }

    fn update_on(&mut self, batch: &[&Transition]) -> Result<UpdateStats> {
        let n = batch.len();
        let alpha = self.alpha();
        let next_noise: Vec<_> = (0..n).map(|_| self.normal_pair()).collect();
        let targets = losses::critic_targets(
            batch,
            &self.actor,
            &self.q1_target,
            &self.q2_target,
            alpha,
            self.config.discount,
            &next_noise,
        );
        let (loss_q1, g1) = losses::critic_loss_grad(&self.q1, batch, &targets);
        let (loss_q2, g2) = losses::critic_loss_grad(&self.q2, batch, &targets);
        finite("critic loss", loss_q1 + loss_q2)?;
        self.opt_q1.step(self.q1.params_mut(), &g1);
        self.opt_q2.step(self.q2.params_mut(), &g2);

        let states: Vec<&[f64]> = batch.iter().map(|t| t.state.as_slice()).collect();
        let noise: Vec<_> = (0..n).map(|_| self.normal_pair()).collect();
        let (loss_pi, ga, log_probs) = losses::actor_loss_grad(&self.actor, &self.q1, &self.q2, alpha, &states, &noise);
        finite("policy loss", loss_pi)?;
        self.opt_actor.step(self.actor.params_mut(), &ga);

        let (_, g_alpha) = losses::alpha_loss_grad(self.log_alpha, &log_probs, self.config.target_entropy);
        let mut la = [self.log_alpha];
        self.opt_alpha.step(&mut la, &[g_alpha]);
        self.log_alpha = la[0];
        finite("entropy coefficient", self.log_alpha)?;

        self.q1_target.soft_update_from(&self.q1, self.config.tau);
        self.q2_target.soft_update_from(&self.q2, self.config.tau);
        self.updates += 1;
        for (name, net) in [("actor", &self.actor), ("q1", &self.q1), ("q2", &self.q2)] {
            if net.params().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "{name} parameters after update {}",
                    self.updates
                )));
            }
        }
        Ok(UpdateStats {
            loss_q1,
            loss_q2,
            loss_pi,
            alpha: self.alpha(),
        })
    }

    /// Writes parameters, optimizer moments (little-endian f64 blobs with
    /// checksums), the replay buffer and RNG states.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blobs = BTreeMap::new();
        let mut put = |name: &str, values: &[f64]| -> Result<()> {
            let file = format!("{name}.f64.bin");
            let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            write_file(&dir.join(&file), &bytes)?;
            blobs.insert(
                name.to_string(),
                BlobRef {
                    checksum: checksum_hex(&bytes),
                    blob: file,
                },
            );
            Ok(())
        };
        let nets = [
            ("actor", &self.actor, Some(&self.opt_actor)),
            ("q1", &self.q1, Some(&self.opt_q1)),
            ("q2", &self.q2, Some(&self.opt_q2)),
            ("q1_target", &self.q1_target, None),
            ("q2_target", &self.q2_target, None),
        ];
        for (name, net, opt) in nets {
            put(name, net.params())?;
            if let Some(opt) = opt {
                put(&format!("{name}.adam_m"), &opt.m)?;
                put(&format!("{name}.adam_v"), &opt.v)?;
            }
        }
        let ckpt = Checkpoint {
            format_version: AGENT_VERSION.into(),
            config: self.config.clone(),
            dtype: "f64".into(),
            log_alpha: self.log_alpha,
            updates: self.updates,
            adam_steps: [self.opt_actor.t, self.opt_q1.t, self.opt_q2.t],
            alpha_optimizer: self.opt_alpha.clone(),
            blobs,
            buffer: self.buffer.clone(),
            rng: self.rng.clone(),
            replay_rng: self.replay_rng.clone(),
        };
        let path = dir.join(AGENT_FILE);
        write_file(&path, serde_json::to_string_pretty(&ckpt)?.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(AGENT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format_version != AGENT_VERSION {
            return Err(Error::Version {
                found: ckpt.format_version,
                expected: AGENT_VERSION.into(),
            });
        }
        if ckpt.dtype != "f64" {
            return Err(Error::Manifest(format!(
                "agent blobs must be f64, found {}",
                ckpt.dtype
            )));
        }
        ckpt.config.validate()?;
        let read = |name: &str, len: usize| -> Result<Vec<f64>> {
            let blob = ckpt
                .blobs
                .get(name)
                .ok_or_else(|| Error::Manifest(format!("agent checkpoint is missing `{name}`")))?;
            let bytes = read_checked(dir, blob)?;
            if bytes.len() != 8 * len {
                return Err(Error::BlobLength {
                    tensor: name.into(),
                    blob: blob.blob.clone(),
                    expected: 8 * len,
                    found: bytes.len(),
                });
            }
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let (a_sizes, q_sizes) = (ckpt.config.actor_sizes(), ckpt.config.critic_sizes());
        let net = |name: &str, sizes: &[usize]| -> Result<Mlp> {
            Ok(Mlp::from_params(sizes, read(name, param_count(sizes))?).unwrap())
        };
        let opt = |name: &str, lr: f64, len: usize, t: u64| -> Result<Adam> {
            let mut o = Adam::new(lr, len);
            o.m = read(&format!("{name}.adam_m"), len)?;
            o.v = read(&format!("{name}.adam_v"), len)?;
            o.t = t;
            Ok(o)
        };
        let (na, nq) = (param_count(&a_sizes), param_count(&q_sizes));
        let c = &ckpt.config;
        Ok(Self {
            actor: net("actor", &a_sizes)?,
            q1: net("q1", &q_sizes)?,
            q2: net("q2", &q_sizes)?,
            q1_target: net("q1_target", &q_sizes)?,
            q2_target: net("q2_target", &q_sizes)?,
            opt_actor: opt("actor", c.lr_actor, na, ckpt.adam_steps[0])?,
            opt_q1: opt("q1", c.lr_critic, nq, ckpt.adam_steps[1])?,
            opt_q2: opt("q2", c.lr_critic, nq, ckpt.adam_steps[2])?,
            opt_alpha: ckpt.alpha_optimizer,
            log_alpha: ckpt.log_alpha,
            buffer: ckpt.buffer,
            rng: ckpt.rng,
            replay_rng: ckpt.replay_rng,
            updates: ckpt.updates,
            config: ckpt.config,
        })
    }

    /// Log-std the actor emits for `state`, before clamping.
    pub fn raw_log_std(&self, state: &[f64]) -> [f64; ACTION_DIM] {
        let out = self.actor.forward(state);
        [out[2], out[3]]
    }
}

fn finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} is {v}")))
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: String,
    config: SacConfig,
    dtype: String,
    log_alpha: f64,
    updates: u64,
    adam_steps: [u64; 3],
    alpha_optimizer: Adam,
    blobs: BTreeMap<String, BlobRef>,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
}
