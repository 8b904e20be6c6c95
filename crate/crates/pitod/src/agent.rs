//! Masked-ensemble soft actor-critic training.
//!
//! Each minibatch term is evaluated under the mask of its experience
//! group, for the policy, both critics, and both target critics. Members
//! a term's mask drops receive exactly zero gradient from that term, and
//! the per-member optimizer leaves untouched members bit-identical, which
//! is what makes flipped-mask influence estimates meaningful.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approx::{
    self, ApproxError, DropoutPlan, Ensemble, MaskedAdam, NetShape, PolicyOutput, TargetPair,
};
use crate::env::{self, EnvSpec, EnvState};
use crate::mask::{self, GroupMask, MaskSpec, Role};
use crate::replay::{Experience, ReplayBuffer, ReplayError};
use crate::seeds;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("non-finite {context} loss at update {update}")]
    NonFiniteLoss { context: &'static str, update: u64 },
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Env(#[from] env::EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    Droq,
    Reset,
}

/// Training hyperparameters. Defaults follow the standard SAC setup for
/// this family: Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub rho: f64,
    pub batch_size: usize,
    pub replay_ratio: u32,
    pub random_start_steps: u64,
    pub iterations_per_epoch: u64,
    pub variant: Variant,
    pub droq_dropout: f64,
    pub reset_interval: u64,
    pub alpha: f64,
    pub auto_alpha: bool,
    pub hidden_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            gamma: 0.99,
            rho: 0.005,
            batch_size: 256,
            replay_ratio: 4,
            random_start_steps: 5000,
            iterations_per_epoch: 5000,
            variant: Variant::Base,
            droq_dropout: 0.01,
            reset_interval: 100_000,
            alpha: 0.2,
            auto_alpha: false,
            hidden_dim: 32,
        }
    }
}

/// Scalar Adam state for the entropy temperature.
#[derive(Debug, Clone, Default)]
struct AlphaAdam {
    m: f64,
    v: f64,
    t: u64,
}

/// The full learner state: policy, two critic pairs, temperature, and
/// per-network optimizers.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub policy: Ensemble,
    pub q1: TargetPair,
    pub q2: TargetPair,
    pub alpha: f64,
    pub gamma: f64,
    pub update_count: u64,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub mask_spec: MaskSpec,
    /// When false every mask is all-ones (plain policy iteration); used by
    /// the leave-one-out oracle.
    pub masking_enabled: bool,
    config: TrainConfig,
    init_seed: u64,
    log_alpha: f64,
    target_entropy: f64,
    opt_policy: MaskedAdam,
    opt_q1: MaskedAdam,
    opt_q2: MaskedAdam,
    alpha_opt: AlphaAdam,
    pub reset_count: u64,
}

impl AgentState {
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        config: &TrainConfig,
        mask_spec: MaskSpec,
        init_seed: u64,
    ) -> Self {
        let members = mask_spec.ensemble_size;
        let policy_shape = NetShape {
            input_dim: obs_dim,
            hidden_dim: config.hidden_dim,
            output_dim: 2 * action_dim,
            members,
        };
        let critic_shape = NetShape {
            input_dim: obs_dim + action_dim,
            hidden_dim: config.hidden_dim,
            output_dim: 1,
            members,
        };
        let policy = Ensemble::init(policy_shape, seeds::derive(init_seed, "init-policy", 0));
        let q1 = TargetPair::new(Ensemble::init(critic_shape, seeds::derive(init_seed, "init-q1", 0)));
        let q2 = TargetPair::new(Ensemble::init(critic_shape, seeds::derive(init_seed, "init-q2", 0)));
        Self {
            opt_policy: MaskedAdam::new(policy_shape, config.learning_rate),
            opt_q1: MaskedAdam::new(critic_shape, config.learning_rate),
            opt_q2: MaskedAdam::new(critic_shape, config.learning_rate),
            policy,
            q1,
            q2,
            alpha: config.alpha,
            log_alpha: config.alpha.ln(),
            target_entropy: -(action_dim as f64),
            gamma: config.gamma,
            update_count: 0,
            obs_dim,
            action_dim,
            mask_spec,
            masking_enabled: true,
            config: config.clone(),
            init_seed,
            alpha_opt: AlphaAdam::default(),
            reset_count: 0,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Mask bits for `(group, role)`; all-ones when masking is disabled.
    pub fn mask_bits(&self, group_id: u64, role: Role) -> Vec<bool> {
        if self.masking_enabled {
            mask::mask_for(group_id, role, &self.mask_spec).bits
        } else {
            vec![true; self.mask_spec.ensemble_size]
        }
    }

    pub fn group_mask(&self, group_id: u64, role: Role) -> GroupMask {
        mask::mask_for(group_id, role, &self.mask_spec)
    }

    pub fn all_ones(&self) -> Vec<bool> {
        vec![true; self.mask_spec.ensemble_size]
    }

    /// Policy head at `state` under `bits`.
    pub fn policy_output(&self, state: &[f64], bits: &[bool]) -> Result<PolicyOutput, ApproxError> {
        Ok(PolicyOutput::from_raw(&self.policy.forward_masked(state, bits)?))
    }

    fn q_input(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.obs_dim + self.action_dim);
        input.extend_from_slice(state);
        input.extend_from_slice(action);
        input
    }

    /// Online critic value (critic 1 or 2) under `bits`.
    pub fn q_value(
        &self,
        critic: Role,
        state: &[f64],
        action: &[f64],
        bits: &[bool],
    ) -> Result<f64, ApproxError> {
        let net = match critic {
            Role::Q1 => &self.q1.online,
            Role::Q2 => &self.q2.online,
            Role::Policy => panic!("policy role has no Q-value"),
        };
        Ok(net.forward_masked(&self.q_input(state, action), bits)?[0])
    }

    /// Target critic value under `bits`.
    pub fn q_target_value(
        &self,
        critic: Role,
        state: &[f64],
        action: &[f64],
        bits: &[bool],
    ) -> Result<f64, ApproxError> {
        let net = match critic {
            Role::Q1 => &self.q1.target,
            Role::Q2 => &self.q2.target,
            Role::Policy => panic!("policy role has no Q-value"),
        };
        Ok(net.forward_masked(&self.q_input(state, action), bits)?[0])
    }

    /// Minimum of the two online critics, each under its own role mask for
    /// the given group selector.
    pub fn q_min(
        &self,
        state: &[f64],
        action: &[f64],
        bits_q1: &[bool],
        bits_q2: &[bool],
    ) -> Result<f64, ApproxError> {
        Ok(self
            .q_value(Role::Q1, state, action, bits_q1)?
            .min(self.q_value(Role::Q2, state, action, bits_q2)?))
    }

    /// Clipped-double-Q TD target for one batch item:
    /// `y = r + gamma * (min_j Qbar_j(s', a') - alpha * log pi(a'|s'))`
    /// with `a'` sampled from the group-masked policy; the bootstrap term
    /// is zero for done transitions.
    pub fn compute_td_target(
        &self,
        item: &Experience,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, AgentError> {
        let bits_pol = self.mask_bits(item.group_id, Role::Policy);
        let out = self.policy_output(&item.next_state, &bits_pol)?;
        let sample = approx::sample_action(&out, rng);
        if item.done {
            return Ok(item.reward);
        }
        let bits_q1 = self.mask_bits(item.group_id, Role::Q1);
        let bits_q2 = self.mask_bits(item.group_id, Role::Q2);
        let qbar1 = self.q_target_value(Role::Q1, &item.next_state, &sample.action, &bits_q1)?;
        let qbar2 = self.q_target_value(Role::Q2, &item.next_state, &sample.action, &bits_q2)?;
        Ok(item.reward + self.gamma * (qbar1.min(qbar2) - self.alpha * sample.log_prob))
    }

    /// One optimizer step per critic on the mean squared TD error, then a
    /// polyak step on both target pairs. Returns the mean TD loss.
    pub fn critic_update(
        &mut self,
        batch: &[Experience],
        round_seed: u64,
    ) -> Result<f64, AgentError> {
        debug_assert!(!batch.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(round_seed, "critic", 0));
        let shape = self.q1.online.shape();
        let mut grads1 = vec![0.0; shape.total_params()];
        let mut grads2 = vec![0.0; shape.total_params()];
        let mut active1 = vec![false; shape.members];
        let mut active2 = vec![false; shape.members];
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let droq = self.config.variant == Variant::Droq;

        for item in batch {
            let y = self.compute_td_target(item, &mut rng)?;
            let input = self.q_input(&item.state, &item.action);
            for j in 0..2 {
                let (net, role, grads, active) = if j == 0 {
                    (&self.q1.online, Role::Q1, &mut grads1, &mut active1)
                } else {
                    (&self.q2.online, Role::Q2, &mut grads2, &mut active2)
                };
                let bits = self.mask_bits(item.group_id, role);
                let plan = droq
                    .then(|| DropoutPlan::sample(&shape, self.config.droq_dropout, &mut rng));
                let trace = net.forward_traced(&input, &bits, plan.as_ref())?;
                let diff = trace.output[0] - y;
                loss += diff * diff / 2.0; // two critics; average below over n
                net.backward(&trace, &[2.0 * diff / n], grads)?;
                for (a, b) in active.iter_mut().zip(&bits) {
                    *a |= *b;
                }
            }
        }
        let mean_loss = loss / n;
        if !mean_loss.is_finite() {
            return Err(AgentError::NonFiniteLoss { context: "critic", update: self.update_count });
        }
        self.opt_q1.step(self.q1.online.params_mut(), &grads1, &active1);
        self.opt_q2.step(self.q2.online.params_mut(), &grads2, &active2);
        self.q1.polyak_update(self.config.rho);
        self.q2.polyak_update(self.config.rho);
        Ok(mean_loss)
    }

    /// One ascent step on the entropy-regularized policy objective
    /// `mean_i [ (Q1 + Q2)/2 (s, a~pi) - alpha * log pi(a|s) ]` with
    /// reparameterized actions. Critic parameters are not touched.
    pub fn actor_update(
        &mut self,
        batch: &[Experience],
        round_seed: u64,
    ) -> Result<f64, AgentError> {
        debug_assert!(!batch.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(round_seed, "actor", 0));
        let shape = self.policy.shape();
        let mut grads = vec![0.0; shape.total_params()];
        let mut active = vec![false; shape.members];
        let n = batch.len() as f64;
        let mut objective = 0.0;
        let mut log_prob_sum = 0.0;

        for item in batch {
            let bits_pol = self.mask_bits(item.group_id, Role::Policy);
            let bits_q1 = self.mask_bits(item.group_id, Role::Q1);
            let bits_q2 = self.mask_bits(item.group_id, Role::Q2);
            let trace = self.policy.forward_traced(&item.state, &bits_pol, None)?;
            let out = PolicyOutput::from_raw(&trace.output);
            let sample = approx::sample_action(&out, &mut rng);
            let input = self.q_input(&item.state, &sample.action);

            let tr1 = self.q1.online.forward_traced(&input, &bits_q1, None)?;
            let tr2 = self.q2.online.forward_traced(&input, &bits_q2, None)?;
            objective += 0.5 * (tr1.output[0] + tr2.output[0]) - self.alpha * sample.log_prob;
            log_prob_sum += sample.log_prob;

            let gin1 = self.q1.online.backward_input_only(&tr1, &[1.0])?;
            let gin2 = self.q2.online.backward_input_only(&tr2, &[1.0])?;
            let (da_mean, da_ls) = approx::action_grad(&out, &sample);
            let (dlp_mean, dlp_ls) = approx::log_prob_grad(&out, &sample);

            // Upstream gradient of the minimized loss (-J / n) on the raw
            // policy outputs [mean; log_std].
            let mut upstream = vec![0.0; 2 * self.action_dim];
            for d in 0..self.action_dim {
                let gq = 0.5 * (gin1[self.obs_dim + d] + gin2[self.obs_dim + d]);
                let dj_mean = gq * da_mean[d] - self.alpha * dlp_mean[d];
                upstream[d] = -dj_mean / n;
                if out.log_std_in_range[d] {
                    let dj_ls = gq * da_ls[d] - self.alpha * dlp_ls[d];
                    upstream[self.action_dim + d] = -dj_ls / n;
                }
            }
            self.policy.backward(&trace, &upstream, &mut grads)?;
            for (a, b) in active.iter_mut().zip(&bits_pol) {
                *a |= *b;
            }
        }
        let mean_objective = objective / n;
        if !mean_objective.is_finite() {
            return Err(AgentError::NonFiniteLoss { context: "actor", update: self.update_count });
        }
        self.opt_policy.step(self.policy.params_mut(), &grads, &active);

        if self.config.auto_alpha {
            self.alpha_step(log_prob_sum / n);
        }
        Ok(mean_objective)
    }

    /// Scalar Adam step on log alpha toward the target entropy.
    fn alpha_step(&mut self, mean_log_prob: f64) {
        let grad = -(mean_log_prob + self.target_entropy);
        let o = &mut self.alpha_opt;
        o.t += 1;
        o.m = 0.9 * o.m + 0.1 * grad;
        o.v = 0.999 * o.v + 0.001 * grad * grad;
        let m_hat = o.m / (1.0 - 0.9f64.powi(o.t as i32));
        let v_hat = o.v / (1.0 - 0.999f64.powi(o.t as i32));
        self.log_alpha -= self.config.learning_rate * m_hat / (v_hat.sqrt() + 1e-8);
        self.alpha = self.log_alpha.exp();
    }

    /// Variant hook, called once per environment step. `Reset` re-draws
    /// all network parameters (and optimizer state) every
    /// `reset_interval` steps, keeping the replay buffer.
    pub fn apply_variant(&mut self, step_index: u64) {
        if self.config.variant == Variant::Reset
            && step_index > 0
            && step_index % self.config.reset_interval == 0
        {
            self.reset_count += 1;
            let seed = seeds::derive(self.init_seed, "reset-init", self.reset_count);
            let fresh = AgentState::new(
                self.obs_dim,
                self.action_dim,
                &self.config,
                self.mask_spec,
                seed,
            );
            self.policy = fresh.policy;
            self.q1 = fresh.q1;
            self.q2 = fresh.q2;
            self.opt_policy = fresh.opt_policy;
            self.opt_q1 = fresh.opt_q1;
            self.opt_q2 = fresh.opt_q2;
            self.alpha = self.config.alpha;
            self.log_alpha = self.config.alpha.ln();
            self.alpha_opt = AlphaAdam::default();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.policy.all_finite()
            && self.q1.online.all_finite()
            && self.q1.target.all_finite()
            && self.q2.online.all_finite()
            && self.q2.target.all_finite()
            && self.alpha.is_finite()
    }
}

/// Per-epoch scalar metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub mean_td_loss: f64,
    pub mean_policy_obj: f64,
    pub mean_return: f64,
}

/// Environment interaction state carried across epochs.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub env_spec: EnvSpec,
    pub trial_seed: u64,
    state: EnvState,
    episode_index: u64,
    episode_return: f64,
    pub clamp_warnings: u64,
}

impl Rollout {
    pub fn new(env_spec: EnvSpec, trial_seed: u64) -> Self {
        let state = env::reset(&env_spec, seeds::derive(trial_seed, "env-episode", 0));
        Self {
            env_spec,
            trial_seed,
            state,
            episode_index: 0,
            episode_return: 0.0,
            clamp_warnings: 0,
        }
    }
}

/// Reward poisoning window: experiences whose group id falls in
/// `groups` are stored with reward `-scale * r` and flagged.
#[derive(Debug, Clone)]
pub struct PoisonPlan {
    pub groups: std::ops::Range<u64>,
    pub scale: f64,
}

/// Run `iterations_per_epoch` environment steps. Each step pushes one
/// experience and, once the warmup is over and the buffer can fill a
/// batch, runs `replay_ratio` critic+actor update rounds. Acting uses the
/// unmasked policy; the first `random_start_steps` of a run act uniformly
/// at random.
pub fn train_epoch(
    agent: &mut AgentState,
    rollout: &mut Rollout,
    buffer: &mut ReplayBuffer,
    epoch: u64,
    poison: Option<&PoisonPlan>,
) -> Result<EpochMetrics, AgentError> {
    let cfg = agent.config.clone();
    let trial = rollout.trial_seed;
    let mut td_losses = Vec::new();
    let mut policy_objs = Vec::new();
    let mut episode_returns = Vec::new();

    for _ in 0..cfg.iterations_per_epoch {
        let step_index = buffer.insertion_count();
        let action = if step_index < cfg.random_start_steps {
            let mut rng = seeds::rng(trial, "explore", step_index);
            (0..agent.action_dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()
        } else {
            let out = agent.policy_output(&rollout.state.observation, &agent.all_ones())?;
            let mut rng = seeds::rng(trial, "act-noise", step_index);
            approx::sample_action(&out, &mut rng).action
        };
        debug_assert!(action.iter().all(|a| (-1.0..=1.0).contains(a)));

        let (next, true_reward, clamped) = env::step(&rollout.env_spec, &rollout.state, &action)?;
        if clamped {
            rollout.clamp_warnings += 1;
        }
        let group_id = mask::group_id_of(step_index, buffer.group_size());
        let poisoned = poison.map_or(false, |p| p.groups.contains(&group_id));
        let stored_reward = if poisoned {
            env::poison_reward(true_reward, poison.unwrap().scale)
        } else {
            true_reward
        };
        buffer.push_transition(
            rollout.state.observation.clone(),
            action,
            stored_reward,
            next.observation.clone(),
            next.done,
            poisoned,
        )?;
        rollout.episode_return += true_reward;
        if next.done {
            episode_returns.push(rollout.episode_return);
            rollout.episode_return = 0.0;
            rollout.episode_index += 1;
            rollout.state =
                env::reset(&rollout.env_spec, seeds::derive(trial, "env-episode", rollout.episode_index));
        } else {
            rollout.state = next;
        }

        if buffer.len() >= cfg.batch_size {
            for _ in 0..cfg.replay_ratio {
                let round = agent.update_count;
                let batch = buffer
                    .sample_minibatch(cfg.batch_size, seeds::derive(trial, "sampler", round))?;
                let round_seed = seeds::derive(trial, "round-noise", round);
                td_losses.push(agent.critic_update(&batch, round_seed)?);
                policy_objs.push(agent.actor_update(&batch, round_seed)?);
                agent.update_count += 1;
            }
        }
        agent.apply_variant(step_index + 1);
    }

    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(EpochMetrics {
        epoch,
        mean_td_loss: mean(&td_losses),
        mean_policy_obj: mean(&policy_objs),
        mean_return: mean(&episode_returns),
    })
}

/// Serialized evaluation state: architecture metadata, all parameter
/// blocks in member-major order, the mask master seed, and counters.
/// Round-trips bit-exactly (JSON floats are shortest-round-trip).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: u64,
    pub total_iterations: u64,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub hidden_dim: usize,
    pub mask_spec: MaskSpec,
    pub alpha: f64,
    pub update_count: u64,
    pub policy: Vec<f64>,
    pub q1_online: Vec<f64>,
    pub q1_target: Vec<f64>,
    pub q2_online: Vec<f64>,
    pub q2_target: Vec<f64>,
}

impl Checkpoint {
    pub fn capture(agent: &AgentState, epoch: u64, total_iterations: u64) -> Self {
        Self {
            version: 1,
            epoch,
            total_iterations,
            obs_dim: agent.obs_dim,
            action_dim: agent.action_dim,
            hidden_dim: agent.config.hidden_dim,
            mask_spec: agent.mask_spec,
            alpha: agent.alpha,
            update_count: agent.update_count,
            policy: agent.policy.params().to_vec(),
            q1_online: agent.q1.online.params().to_vec(),
            q1_target: agent.q1.target.params().to_vec(),
            q2_online: agent.q2.online.params().to_vec(),
            q2_target: agent.q2.target.params().to_vec(),
        }
    }

    /// Rebuild an evaluation-ready agent. Optimizer state is not part of
    /// a checkpoint; restored agents are for evaluation, not resuming.
    pub fn restore(&self, config: &TrainConfig) -> Result<AgentState, ApproxError> {
        let mut cfg = config.clone();
        cfg.hidden_dim = self.hidden_dim;
        let mut agent =
            AgentState::new(self.obs_dim, self.action_dim, &cfg, self.mask_spec, 0);
        let pol_shape = agent.policy.shape();
        let q_shape = agent.q1.online.shape();
        agent.policy = Ensemble::from_params(pol_shape, self.policy.clone())?;
        agent.q1 = TargetPair {
            online: Ensemble::from_params(q_shape, self.q1_online.clone())?,
            target: Ensemble::from_params(q_shape, self.q1_target.clone())?,
        };
        agent.q2 = TargetPair {
            online: Ensemble::from_params(q_shape, self.q2_online.clone())?,
            target: Ensemble::from_params(q_shape, self.q2_target.clone())?,
        };
        agent.alpha = self.alpha;
        agent.log_alpha = self.alpha.ln();
        agent.update_count = self.update_count;
        Ok(agent)
    }
}
