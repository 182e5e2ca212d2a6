//! Advantage estimation and the scalar training losses. Every loss takes a
//! per-row weight column; weights are `alive / alive_count`, so a weighted
//! sum is a mean over living agents and dead rows contribute nothing.

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// GAE over one agent's sequence. `dones[t]` cuts the bootstrap after step
/// `t`; `bootstrap` is the value after the last step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::shape(
            "compute_gae",
            format!("{} rewards, {} values, {} dones", n, values.len(), dones.len()),
        ));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

pub const ADV_EPS: f64 = 1e-8;

/// Standardize the entries where `mask` is set; others become 0.
pub fn normalize_advantages(adv: &mut [f64], mask: &[bool]) {
    let k = mask.iter().filter(|&&m| m).count();
    if k == 0 {
        adv.fill(0.0);
        return;
    }
    let mean = adv.iter().zip(mask).filter(|(_, &m)| m).map(|(a, _)| a).sum::<f64>() / k as f64;
    let var = adv.iter().zip(mask).filter(|(_, &m)| m).map(|(a, _)| (a - mean).powi(2)).sum::<f64>() / k as f64;
    let sd = var.sqrt();
    for (a, &m) in adv.iter_mut().zip(mask) {
        *a = if m { (*a - mean) / (sd + ADV_EPS) } else { 0.0 };
    }
}

/// One clipped-surrogate term, `min(ρA, clip(ρ, 1-ε, 1+ε)A)`.
pub fn ppo_clip_term(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

fn column(v: &[f64]) -> Result<Tensor> {
    Tensor::new(v.len(), 1, v.to_vec())
}

/// Weighted sum of a column.
fn weighted(tape: &mut Tape, x: Var, weights: &[f64]) -> Result<Var> {
    let w = tape.constant(column(weights)?);
    let y = tape.mul(x, w)?;
    tape.sum(y)
}

/// `-Σ w · min(ρA, clip(ρ)A)` with `ρ = exp(new - old)`.
pub fn ppo_loss(tape: &mut Tape, new_logp: Var, old_logp: &[f64], adv: &[f64], weights: &[f64], eps: f64) -> Result<Var> {
    let old = tape.constant(column(old_logp)?);
    let diff = tape.sub(new_logp, old)?;
    let ratio = tape.exp(diff)?;
    let a = tape.constant(column(adv)?);
    let s1 = tape.mul(ratio, a)?;
    let clipped = tape.clamp(ratio, 1.0 - eps, 1.0 + eps)?;
    let s2 = tape.mul(clipped, a)?;
    let m = tape.min(s1, s2)?;
    let s = weighted(tape, m, weights)?;
    tape.neg(s)
}

/// `Σ w · (v - R)²`.
pub fn value_loss(tape: &mut Tape, values: Var, returns: &[f64], weights: &[f64]) -> Result<Var> {
    let r = tape.constant(column(returns)?);
    let d = tape.sub(values, r)?;
    let sq = tape.square(d)?;
    weighted(tape, sq, weights)
}

/// TD targets `r + γ(1 - done)·q_next`, from detached next-step values.
pub fn td_targets(rewards: &[f64], dones: &[bool], q_next: &[f64], gamma: f64) -> Vec<f64> {
    rewards
        .iter()
        .zip(dones)
        .zip(q_next)
        .map(|((r, &d), q)| if d { *r } else { r + gamma * q })
        .collect()
}

/// `Σ w · (Q(s,a) - target)²`; the target is a constant.
pub fn td_q_loss(tape: &mut Tape, q_taken: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
    value_loss(tape, q_taken, targets, weights)
}

/// `-Σ w · log π(a) · signal`, with the signal held constant.
pub fn ac_policy_loss(tape: &mut Tape, logp: Var, signal: &[f64], weights: &[f64]) -> Result<Var> {
    let s = tape.constant(column(signal)?);
    let x = tape.mul(logp, s)?;
    let total = weighted(tape, x, weights)?;
    tape.neg(total)
}

/// Row entropies of a log-softmax matrix, as a column.
pub fn entropy_rows(tape: &mut Tape, log_probs: Var) -> Result<Var> {
    let p = tape.exp(log_probs)?;
    let plogp = tape.mul(p, log_probs)?;
    let s = tape.sum_rows(plogp)?;
    tape.neg(s)
}

/// `Σ w · H`.
pub fn mean_entropy(tape: &mut Tape, log_probs: Var, weights: &[f64]) -> Result<Var> {
    let h = entropy_rows(tape, log_probs)?;
    weighted(tape, h, weights)
}
