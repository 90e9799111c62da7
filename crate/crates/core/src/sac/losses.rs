//! SAC objectives and their analytic gradients. Noise is passed in explicitly
//! so that each loss is a deterministic function of the parameters, which is
//! what the finite-difference checks perturb.

use super::mlp::Mlp;
use super::replay::Transition;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const ACTION_DIM: usize = 2;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Reparameterized draw from the squashed Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicySample {
    pub mean: [f64; ACTION_DIM],
    /// Clamped log standard deviation.
    pub log_std: [f64; ACTION_DIM],
    /// Whether the raw log-std was outside the clamp range.
    pub clamped: [bool; ACTION_DIM],
    pub u: [f64; ACTION_DIM],
    pub action: [f64; ACTION_DIM],
    pub log_prob: f64,
}

/// `u = m + e^{ls}·ε`, `a = tanh(u)`, with
/// `log π = Σ −ε²/2 − ls − ln√(2π) − log(1 − tanh²u)` and the last term in
/// the stable form `2(ln2 − u − softplus(−2u))`.
pub fn policy_sample(out: &[f64], eps: [f64; ACTION_DIM]) -> PolicySample {
    let mut s = PolicySample {
        mean: [0.0; ACTION_DIM],
        log_std: [0.0; ACTION_DIM],
        clamped: [false; ACTION_DIM],
        u: [0.0; ACTION_DIM],
        action: [0.0; ACTION_DIM],
        log_prob: 0.0,
    };
    for k in 0..ACTION_DIM {
        let raw = out[ACTION_DIM + k];
        s.mean[k] = out[k];
        s.log_std[k] = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
        s.clamped[k] = !(LOG_STD_MIN..=LOG_STD_MAX).contains(&raw);
        s.u[k] = s.mean[k] + s.log_std[k].exp() * eps[k];
        s.action[k] = s.u[k].tanh();
        let squash = 2.0 * (std::f64::consts::LN_2 - s.u[k] - softplus(-2.0 * s.u[k]));
        s.log_prob += -0.5 * eps[k] * eps[k] - s.log_std[k] - HALF_LN_2PI - squash;
    }
    s
}

pub fn q_input(state: &[f64], action: &[f64; ACTION_DIM]) -> Vec<f64> {
    let mut x = Vec::with_capacity(state.len() + ACTION_DIM);
    x.extend_from_slice(state);
    x.extend_from_slice(action);
    x
}

/// `y = r + γ(1−d)(min Q′(s′, ã′) − α log π(ã′|s′))` with `ã′` drawn using `noise`.
pub fn critic_targets(
    batch: &[&Transition],
    actor: &Mlp,
    q1_target: &Mlp,
    q2_target: &Mlp,
    alpha: f64,
    discount: f64,
    noise: &[[f64; ACTION_DIM]],
) -> Vec<f64> {
    batch
        .iter()
        .zip(noise)
        .map(|(t, &eps)| {
            if t.done {
                return t.reward;
            }
            let s = policy_sample(&actor.forward(&t.next_state), eps);
            let x = q_input(&t.next_state, &s.action);
            let q = q1_target.forward(&x)[0].min(q2_target.forward(&x)[0]);
            t.reward + discount * (q - alpha * s.log_prob)
        })
        .collect()
}

/// Mean squared error `mean (Q(s, a) − y)²`.
pub fn critic_loss(q: &Mlp, batch: &[&Transition], targets: &[f64]) -> f64 {
    batch
        .iter()
        .zip(targets)
        .map(|(t, y)| (q.forward(&q_input(&t.state, &t.action))[0] - y).powi(2))
        .sum::<f64>()
        / batch.len() as f64
}

pub fn critic_loss_grad(q: &Mlp, batch: &[&Transition], targets: &[f64]) -> (f64, Vec<f64>) {
    let n = batch.len() as f64;
    let mut grad = vec![0.0; q.params().len()];
    let mut loss = 0.0;
    for (t, y) in batch.iter().zip(targets) {
        let trace = q.trace(&q_input(&t.state, &t.action));
        let err = trace.output()[0] - y;
        loss += err * err / n;
        q.backward(&trace, &[2.0 * err / n], Some(&mut grad));
    }
    (loss, grad)
}

/// `mean α·log π(ã|s) − min Q(s, ã)` over `states`.
pub fn actor_loss(actor: &Mlp, q1: &Mlp, q2: &Mlp, alpha: f64, states: &[&[f64]], noise: &[[f64; ACTION_DIM]]) -> f64 {
    states
        .iter()
        .zip(noise)
        .map(|(s, &eps)| {
            let p = policy_sample(&actor.forward(s), eps);
            let x = q_input(s, &p.action);
            alpha * p.log_prob - q1.forward(&x)[0].min(q2.forward(&x)[0])
        })
        .sum::<f64>()
        / states.len() as f64
}

/// Returns `(loss, actor gradient, per-sample log π)`.
pub fn actor_loss_grad(
    actor: &Mlp,
    q1: &Mlp,
    q2: &Mlp,
    alpha: f64,
    states: &[&[f64]],
    noise: &[[f64; ACTION_DIM]],
) -> (f64, Vec<f64>, Vec<f64>) {
    let n = states.len() as f64;
    let mut grad = vec![0.0; actor.params().len()];
    let mut loss = 0.0;
    let mut log_probs = Vec::with_capacity(states.len());
    for (s, &eps) in states.iter().zip(noise) {
        let trace = actor.trace(s);
        let p = policy_sample(trace.output(), eps);
        log_probs.push(p.log_prob);
        let x = q_input(s, &p.action);
        let (t1, t2) = (q1.trace(&x), q2.trace(&x));
        let (qmin, q, tq) = if t1.output()[0] <= t2.output()[0] {
            (t1.output()[0], q1, &t1)
        } else {
            (t2.output()[0], q2, &t2)
        };
        loss += (alpha * p.log_prob - qmin) / n;
        let dq = q.backward(tq, &[1.0], None);
        let dq_da = &dq[s.len()..];
        let mut dout = vec![0.0; 2 * ACTION_DIM];
        for k in 0..ACTION_DIM {
            let a = p.action[k];
            // d log π / du = 2a (from the squash term); d a / du = 1 − a²
            let du = (alpha * 2.0 * a - dq_da[k] * (1.0 - a * a)) / n;
            dout[k] = du;
            if !p.clamped[k] {
                dout[ACTION_DIM + k] = du * p.log_std[k].exp() * eps[k] - alpha / n;
            }
        }
        actor.backward(&trace, &dout, Some(&mut grad));
    }
    (loss, grad, log_probs)
}

/// `J(α) = −α·mean(log π + H̄)` as a function of `log α`.
pub fn alpha_loss(log_alpha: f64, log_probs: &[f64], target_entropy: f64) -> f64 {
    let m = log_probs.iter().map(|l| l + target_entropy).sum::<f64>() / log_probs.len() as f64;
    -log_alpha.exp() * m
}

/// Derivative of [`alpha_loss`] with respect to `log α`.
pub fn alpha_loss_grad(log_alpha: f64, log_probs: &[f64], target_entropy: f64) -> (f64, f64) {
    let loss = alpha_loss(log_alpha, log_probs, target_entropy);
    (loss, loss)
}
