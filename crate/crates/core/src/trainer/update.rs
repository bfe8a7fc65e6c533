use rand::seq::SliceRandom;

use super::config::PpoConfig;
use super::losses::{actor_loss_on, critic_loss_on};
use super::rollout::{RolloutBatch, SampleRecord};
use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, AdamWState, Tape};
use crate::par;
use crate::policy::{Actor, Critic, Reference};
use crate::rng::{stream, Stage};

/// Models and optimizer state carried across iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub actor: Actor,
    pub critic: Critic,
    pub reference: Reference,
    pub actor_opt: AdamWState,
    pub critic_opt: AdamWState,
    /// Iterations completed so far.
    pub iteration: u64,
}

impl TrainerState {
    /// Fresh optimizers around `actor`, with the reference cloned from it.
    pub fn new(actor: Actor, critic: Critic, cfg: &PpoConfig) -> Self {
        let reference = actor.clone_frozen();
        let opt = |lr: f64| AdamWConfig {
            lr,
            max_grad_norm: cfg.max_grad_norm,
            ..AdamWConfig::default()
        };
        let actor_opt = AdamWState::new(opt(cfg.lr), actor.store());
        let critic_opt = AdamWState::new(opt(cfg.critic_lr), critic.store());
        Self {
            actor,
            critic,
            reference,
            actor_opt,
            critic_opt,
            iteration: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    /// Mean minibatch actor loss over all optimizer steps.
    pub actor_loss: f64,
    /// Mean minibatch critic loss over all optimizer steps.
    pub critic_loss: f64,
    /// The update hit a non-finite value and the models were restored.
    pub rolled_back: bool,
}

/// Per-step actor weights: `1 / (n(P_k) · chosen steps)` on the chosen steps
/// of a group-`k` Pareto member, zero elsewhere.
pub fn actor_step_weights(batch: &RolloutBatch, rec: &SampleRecord) -> Vec<f64> {
    let n_len = rec.sample.sequence.len();
    if !rec.member {
        return vec![0.0; n_len];
    }
    let n_p = batch.group(rec.group).iter().filter(|s| s.member).count() as f64;
    let mask = rec.step_mask();
    let chosen: f64 = mask.iter().sum();
    mask.iter().map(|m| m / (n_p * chosen.max(1.0))).collect()
}

struct SampleGrad {
    actor_loss: f64,
    actor_grad: Option<Vec<f64>>,
    critic_loss: f64,
    critic_grad: Vec<f64>,
}

fn sample_grad(actor: &Actor, critic: &Critic, batch: &RolloutBatch, rec: &SampleRecord, cfg: &PpoConfig, mb_len: usize) -> Result<SampleGrad> {
    let (actor_loss, actor_grad) = if rec.member {
        let weights = actor_step_weights(batch, rec);
        let mut tape = Tape::new();
        let logp = actor.logprobs_on(&mut tape, &rec.spec, &rec.sample.sequence)?;
        let loss = actor_loss_on(&mut tape, logp, &rec.sample.old_logprobs, &rec.advantages, &weights, cfg.clip_eps)?;
        let value = tape.value(loss).data()[0];
        let mut g = vec![0.0; actor.store().len()];
        tape.backward(loss)?.accumulate_into(&mut g);
        (value, Some(g))
    } else {
        (0.0, None)
    };
    let mut tape = Tape::new();
    let v = critic.values_on(&mut tape, &rec.spec, &rec.sample.sequence)?;
    let scale = cfg.value_coef / (rec.returns.len() as f64 * mb_len as f64);
    let loss = critic_loss_on(&mut tape, v, &rec.returns, scale)?;
    let critic_loss = tape.value(loss).data()[0];
    let mut critic_grad = vec![0.0; critic.store().len()];
    tape.backward(loss)?.accumulate_into(&mut critic_grad);
    Ok(SampleGrad {
        actor_loss,
        actor_grad,
        critic_loss,
        critic_grad,
    })
}

fn run_update(state: &mut TrainerState, batch: &RolloutBatch, cfg: &PpoConfig, seed: u64) -> Result<UpdateStats> {
    let mut order: Vec<usize> = (0..batch.samples.len()).collect();
    let (mut actor_sum, mut critic_sum, mut steps) = (0.0, 0.0, 0usize);
    for epoch in 0..cfg.ppo_epochs {
        order.shuffle(&mut stream(seed, Stage::Shuffle, state.iteration, epoch as u64));
        for mb in order.chunks(cfg.minibatch) {
            let (actor, critic) = (&state.actor, &state.critic);
            let grads = par::map_slice(mb, |&i| sample_grad(actor, critic, batch, &batch.samples[i], cfg, mb.len()));
            let (mut al, mut cl) = (0.0, 0.0);
            let mut actor_bufs = Vec::new();
            let mut critic_bufs = Vec::with_capacity(mb.len());
            for g in grads {
                let g = g?;
                al += g.actor_loss;
                cl += g.critic_loss;
                actor_bufs.extend(g.actor_grad);
                critic_bufs.push(g.critic_grad);
            }
            if !(al.is_finite() && cl.is_finite()) {
                return Err(Error::Numerical(format!("non-finite loss (actor {al}, critic {cl})")));
            }
            let ag = par::sum_buffers(state.actor.store().len(), actor_bufs);
            let cg = par::sum_buffers(state.critic.store().len(), critic_bufs);
            state.actor.store_mut().zero_grads();
            state.actor.store_mut().accumulate_grads(&ag)?;
            state.actor_opt.step(state.actor.store_mut())?;
            state.critic.store_mut().zero_grads();
            state.critic.store_mut().accumulate_grads(&cg)?;
            state.critic_opt.step(state.critic.store_mut())?;
            actor_sum += al;
            critic_sum += cl / cfg.value_coef.max(f64::MIN_POSITIVE);
            steps += 1;
        }
    }
    let n = steps.max(1) as f64;
    Ok(UpdateStats {
        actor_loss: actor_sum / n,
        critic_loss: critic_sum / n,
        rolled_back: false,
    })
}

/// PPO epochs over shuffled minibatches of sequences. The actor sees only
/// Pareto members (weighted per group); the critic regresses on every
/// sample. On a non-finite loss or gradient the models and optimizers are
/// restored and the update is reported as rolled back.
pub fn ppo_update(state: &mut TrainerState, batch: &RolloutBatch, cfg: &PpoConfig, seed: u64) -> Result<UpdateStats> {
    let snapshot = (
        state.actor.clone(),
        state.critic.clone(),
        state.actor_opt.clone(),
        state.critic_opt.clone(),
    );
    match run_update(state, batch, cfg, seed) {
        Ok(stats) => Ok(stats),
        Err(e @ (Error::Numerical(_) | Error::NonFiniteGradient(_))) => {
            log::warn!("iteration {}: {e}; update rolled back", state.iteration);
            (state.actor, state.critic, state.actor_opt, state.critic_opt) = snapshot;
            Ok(UpdateStats {
                actor_loss: f64::NAN,
                critic_loss: f64::NAN,
                rolled_back: true,
            })
        }
        Err(e) => Err(e),
    }
}
