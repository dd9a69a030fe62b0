//! Generator: Gaussian actors with a per-agent value critic, trained by
//! clipped-ratio PPO on discriminator rewards.
//!
//! Every agent conditions on its agent-centric view of the full global state
//! (see [`crate::envs::observe`]). The critic reads the same view, which holds
//! the whole state, and predicts that agent's value.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adversarial::{DiscriminatorSet, Featurizer, GailReward, LogDensity, Variant};
use crate::approx::{clip_grad_norm, Activation, AdamState, Checkpoint, Mlp};
use crate::demos::{ContinuousTuple, Provenance, Source};
use crate::envs::{self, effective_action, observe, EnvKind, EnvSpec, EnvState, Vec2};
use crate::error::{Error, Result};
use crate::group::StructuredVector;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Debug, PartialEq)]
pub struct ActorCritic {
    /// One actor per agent, or a single shared actor.
    pub actors: Vec<Mlp>,
    pub log_std: Vec<f64>,
    pub critic: Mlp,
    pub n_agents: usize,
}

impl ActorCritic {
    pub fn new<R: Rng>(
        obs_dim: usize,
        act_dim: usize,
        n_agents: usize,
        hidden: &[usize],
        shared_actor: bool,
        init_log_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let count = if shared_actor { 1 } else { n_agents };
        let actors = (0..count)
            .map(|_| {
                let mut m = Mlp::with_hidden(
                    obs_dim,
                    hidden,
                    act_dim,
                    Activation::Tanh,
                    Activation::Identity,
                )?;
                m.init(0.01, rng);
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut critic =
            Mlp::with_hidden(obs_dim, hidden, 1, Activation::Tanh, Activation::Identity)?;
        critic.init(1.0, rng);
        Ok(Self {
            actors,
            log_std: vec![init_log_std; act_dim],
            critic,
            n_agents,
        })
    }

    pub fn for_spec<R: Rng>(
        spec: &EnvSpec,
        hidden: &[usize],
        shared_actor: bool,
        init_log_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(
            spec.obs_dim(),
            spec.action_dim(),
            spec.n_agents,
            hidden,
            shared_actor,
            init_log_std,
            rng,
        )
    }

    pub fn shared(&self) -> bool {
        self.actors.len() == 1
    }

    pub fn actor_index(&self, agent: usize) -> usize {
        if self.shared() {
            0
        } else {
            agent
        }
    }

    pub fn act_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.critic.input_dim()
    }

    pub fn mean(&self, agent: usize, obs: &[f64]) -> Result<Vec<f64>> {
        self.actors[self.actor_index(agent)].forward(obs)
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.critic.forward(obs)?[0])
    }

    pub fn log_prob(&self, agent: usize, obs: &[f64], a: &[f64]) -> Result<f64> {
        let mu = self.mean(agent, obs)?;
        Ok(gaussian_log_prob(&mu, &self.log_std, a))
    }

    /// Samples `mean + σ ε`; `deterministic` returns the mean.
    pub fn act<R: Rng>(
        &self,
        agent: usize,
        obs: &[f64],
        deterministic: bool,
        rng: &mut R,
    ) -> Result<(Vec<f64>, f64)> {
        let mu = self.mean(agent, obs)?;
        let a: Vec<f64> = if deterministic {
            mu.clone()
        } else {
            mu.iter()
                .zip(&self.log_std)
                .map(|(m, ls)| {
                    let e: f64 = StandardNormal.sample(rng);
                    m + ls.exp() * e
                })
                .collect()
        };
        let lp = gaussian_log_prob(&mu, &self.log_std, &a);
        Ok((a, lp))
    }

    pub fn entropy(&self) -> f64 {
        self.log_std
            .iter()
            .map(|ls| ls + 0.5 * (LN_2PI + 1.0))
            .sum()
    }

    pub fn write_sections(&self, ck: &mut Checkpoint) {
        ck.put_u64(
            "policy.layout",
            vec![self.actors.len() as u64, self.n_agents as u64],
        );
        for (k, a) in self.actors.iter().enumerate() {
            a.write_sections(&format!("policy.actor{k}"), ck);
        }
        ck.put_f64("policy.log_std", self.log_std.clone());
        self.critic.write_sections("policy.critic", ck);
    }

    pub fn read_sections(ck: &Checkpoint) -> Result<Self> {
        let layout = ck.u64s("policy.layout")?;
        if layout.len() != 2 {
            return Err(Error::Checkpoint("bad policy layout".into()));
        }
        let actors = (0..layout[0])
            .map(|k| Mlp::read_sections(&format!("policy.actor{k}"), ck))
            .collect::<Result<_>>()?;
        Ok(Self {
            actors,
            log_std: ck.f64s("policy.log_std")?.to_vec(),
            critic: Mlp::read_sections("policy.critic", ck)?,
            n_agents: layout[1] as usize,
        })
    }
}

pub fn gaussian_log_prob(mu: &[f64], log_std: &[f64], a: &[f64]) -> f64 {
    mu.iter()
        .zip(log_std)
        .zip(a)
        .map(|((m, ls), x)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

/// The current policy as a density over stored (effective) actions.
pub struct PolicyDensity<'a> {
    pub policy: &'a ActorCritic,
    pub spec: &'a EnvSpec,
}

impl LogDensity for PolicyDensity<'_> {
    fn log_prob(&self, s: &StructuredVector, agent: usize, a: &StructuredVector) -> Result<f64> {
        let st = EnvState::from_structured(self.spec, s, 0)?;
        self.policy
            .log_prob(agent, &observe(self.spec, &st, agent), &a.equ)
    }
}

/// Where buffer rewards came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardOrigin {
    Unlabelled,
    Discriminator,
    /// Test mode only: environment rewards injected directly.
    TrueReward,
}

pub enum RewardSource<'a> {
    TrueReward,
    Discriminator {
        set: &'a DiscriminatorSet,
        featurizer: &'a dyn Featurizer,
        gail_reward: GailReward,
    },
}

/// Rows are indexed `t * n_agents + agent`.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBuffer {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub obs: Vec<f64>,
    /// Raw sampled actions (before the environment's clamp).
    pub actions: Vec<Vec2>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub next_values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub true_rewards: Vec<f64>,
    /// Per step: the episode ended after this step.
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// One generator transition per step with effective actions.
    pub tuples: Vec<ContinuousTuple>,
    pub reward_origin: RewardOrigin,
    /// Per completed episode: summed mean-over-agents true reward.
    pub episode_returns: Vec<f64>,
    /// Per completed episode: final order parameter.
    pub episode_final_order: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(n_agents: usize, obs_dim: usize) -> Self {
        Self {
            n_agents,
            obs_dim,
            obs: Vec::new(),
            actions: Vec::new(),
            log_probs: Vec::new(),
            values: Vec::new(),
            next_values: Vec::new(),
            rewards: Vec::new(),
            true_rewards: Vec::new(),
            dones: Vec::new(),
            advantages: Vec::new(),
            returns: Vec::new(),
            tuples: Vec::new(),
            reward_origin: RewardOrigin::Unlabelled,
            episode_returns: Vec::new(),
            episode_final_order: Vec::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.dones.len()
    }

    pub fn rows(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows() == 0
    }

    pub fn obs_row(&self, r: usize) -> &[f64] {
        &self.obs[r * self.obs_dim..(r + 1) * self.obs_dim]
    }

    /// Overwrites the reward column. The AIRL entropy term uses the stored
    /// log-probability of the raw sampled action, i.e. the density the policy
    /// actually acted with.
    pub fn label_rewards(&mut self, source: &RewardSource) -> Result<()> {
        let n = self.n_agents;
        match source {
            RewardSource::TrueReward => {
                self.rewards.clone_from(&self.true_rewards);
                self.reward_origin = RewardOrigin::TrueReward;
            }
            RewardSource::Discriminator {
                set,
                featurizer,
                gail_reward,
            } => {
                for (t, tup) in self.tuples.iter().enumerate() {
                    for i in 0..n {
                        let lp = match set.variant() {
                            Variant::Airl => Some(self.log_probs[t * n + i]),
                            Variant::Gail => None,
                        };
                        self.rewards[t * n + i] =
                            set.reward(*featurizer, tup, i, lp, *gail_reward)?;
                    }
                }
                self.reward_origin = RewardOrigin::Discriminator;
            }
        }
        Ok(())
    }

    /// Fills advantages and returns per agent; normalizes advantages over the
    /// whole buffer when `normalize`.
    pub fn compute_gae(&mut self, gamma: f64, lambda: f64, normalize: bool) {
        let (n, steps) = (self.n_agents, self.steps());
        self.advantages = vec![0.0; self.rows()];
        self.returns = vec![0.0; self.rows()];
        for i in 0..n {
            let col = |v: &[f64]| (0..steps).map(|t| v[t * n + i]).collect::<Vec<_>>();
            let (adv, ret) = gae(
                &col(&self.rewards),
                &col(&self.values),
                &col(&self.next_values),
                &self.dones,
                gamma,
                lambda,
            );
            for t in 0..steps {
                self.advantages[t * n + i] = adv[t];
                self.returns[t * n + i] = ret[t];
            }
        }
        if normalize && self.rows() > 1 {
            normalize_in_place(&mut self.advantages);
        }
    }
}

fn normalize_in_place(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    let sd = var.sqrt().max(1e-8);
    v.iter_mut().for_each(|x| *x = (*x - m) / sd);
}

/// Generalized advantage estimation over one agent's step sequence. The
/// value after an episode boundary is `next_values[t]` (bootstrapped, since
/// episodes end by truncation), and the recursion restarts there.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut run = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_values[t] - values[t];
        let carry = if dones[t] { 0.0 } else { gamma * lambda * run };
        run = delta + carry;
        adv[t] = run;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Stepping state that persists across collections so episodes continue.
#[derive(Clone, Debug)]
pub struct RolloutWorker {
    pub spec: EnvSpec,
    state: EnvState,
    episode_id: u64,
    episode_return: f64,
    rng: ChaCha8Rng,
}

impl RolloutWorker {
    pub fn new(spec: EnvSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = envs::reset_with(&spec, &mut rng);
        Self {
            spec,
            state,
            episode_id: 0,
            episode_return: 0.0,
            rng,
        }
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Runs `horizon` environment steps under the stochastic policy and labels
    /// rewards from `source`.
    pub fn collect(
        &mut self,
        policy: &ActorCritic,
        horizon: usize,
        source: &RewardSource,
    ) -> Result<RolloutBuffer> {
        let spec = &self.spec;
        let n = spec.n_agents;
        let mut buf = RolloutBuffer::new(n, spec.obs_dim());
        for _ in 0..horizon {
            let mut raw = Vec::with_capacity(n);
            let mut eff = Vec::with_capacity(n);
            for i in 0..n {
                let o = observe(spec, &self.state, i);
                let (a, lp) = policy.act(i, &o, false, &mut self.rng)?;
                let a = [a[0], a[1]];
                buf.values.push(policy.value(&o)?);
                buf.obs.extend_from_slice(&o);
                buf.log_probs.push(lp);
                raw.push(a);
                eff.push(effective_action(spec, a));
            }
            let (next, r) = envs::step(spec, &self.state, &eff)?;
            for i in 0..n {
                buf.next_values
                    .push(policy.value(&observe(spec, &next, i))?);
            }
            buf.true_rewards.extend_from_slice(&r);
            buf.rewards.extend(std::iter::repeat_n(0.0, n));
            buf.actions.extend_from_slice(&raw);
            buf.tuples.push(ContinuousTuple::from_states(
                &self.state,
                &eff,
                &next,
                self.episode_id,
                Provenance::raw(Source::Generator),
            ));
            self.episode_return += r.iter().sum::<f64>() / n as f64;
            let done = next.time_step as usize >= spec.max_steps;
            buf.dones.push(done);
            if done {
                buf.episode_returns.push(self.episode_return);
                buf.episode_final_order.push(envs::order_parameter(&next));
                self.episode_return = 0.0;
                self.episode_id += 1;
                self.state = envs::reset_with(spec, &mut self.rng);
            } else {
                self.state = next;
            }
        }
        buf.label_rewards(source)?;
        Ok(buf)
    }
}

/// One-shot collection from a fresh reset drawn from `rng`.
pub fn collect_rollouts<R: Rng>(
    spec: &EnvSpec,
    policy: &ActorCritic,
    source: &RewardSource,
    horizon: usize,
    rng: &mut R,
) -> Result<RolloutBuffer> {
    RolloutWorker::new(spec.clone(), rng.random()).collect(policy, horizon, source)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    /// The log-std is projected back into this range after every step.
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            epochs: 10,
            minibatch: 256,
            lr: 3e-4,
            value_coef: 0.5,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
            log_std_min: -3.0,
            log_std_max: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpoOptimizer {
    pub actors: Vec<AdamState>,
    pub log_std: AdamState,
    pub critic: AdamState,
}

impl PpoOptimizer {
    pub fn new(ac: &ActorCritic, lr: f64) -> Self {
        Self {
            actors: ac
                .actors
                .iter()
                .map(|a| AdamState::new(a.n_params(), lr))
                .collect(),
            log_std: AdamState::new(ac.log_std.len(), lr),
            critic: AdamState::new(ac.critic.n_params(), lr),
        }
    }

    pub fn write_sections(&self, ck: &mut Checkpoint) {
        for (k, a) in self.actors.iter().enumerate() {
            a.write_sections(&format!("popt.actor{k}"), ck);
        }
        self.log_std.write_sections("popt.log_std", ck);
        self.critic.write_sections("popt.critic", ck);
    }

    pub fn read_sections(ck: &Checkpoint, n_actors: usize) -> Result<Self> {
        Ok(Self {
            actors: (0..n_actors)
                .map(|k| AdamState::read_sections(&format!("popt.actor{k}"), ck))
                .collect::<Result<_>>()?,
            log_std: AdamState::read_sections("popt.log_std", ck)?,
            critic: AdamState::read_sections("popt.critic", ck)?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// `min(ρA, clip(ρ, 1-ε, 1+ε)A)` and its derivative in `ρ`.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (unclipped, adv)
    } else {
        (clipped, 0.0)
    }
}

/// Minibatch objective and its gradients, before clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct PpoGrad {
    /// `policy_loss + value_coef · value_loss - entropy_coef · entropy`.
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub actors: Vec<Vec<f64>>,
    pub log_std: Vec<f64>,
    pub critic: Vec<f64>,
}

/// Clipped-surrogate, value and entropy terms over the buffer rows `rows`.
pub fn ppo_loss_grad(
    ac: &ActorCritic,
    buf: &RolloutBuffer,
    rows: &[usize],
    cfg: &PpoConfig,
) -> Result<PpoGrad> {
    if rows.is_empty() {
        return Err(Error::Input("empty minibatch".into()));
    }
    let n = buf.n_agents;
    let act_dim = ac.act_dim();
    let w = 1.0 / rows.len() as f64;
    let mut g = PpoGrad {
        loss: 0.0,
        policy_loss: 0.0,
        value_loss: 0.0,
        approx_kl: 0.0,
        clip_fraction: 0.0,
        actors: ac.actors.iter().map(|a| vec![0.0; a.n_params()]).collect(),
        log_std: vec![0.0; act_dim],
        critic: vec![0.0; ac.critic.n_params()],
    };
    for &r in rows {
        let agent = r % n;
        let k = ac.actor_index(agent);
        let obs = buf.obs_row(r);
        let a = buf.actions[r];
        let tr = ac.actors[k].forward_trace(obs)?;
        let mu = tr.output();
        let lp = gaussian_log_prob(mu, &ac.log_std, &a);
        let log_ratio = lp - buf.log_probs[r];
        let ratio = log_ratio.exp();
        let (surr, d_ratio) = clipped_surrogate(ratio, buf.advantages[r], cfg.clip_eps);
        g.policy_loss -= w * surr;
        g.approx_kl += w * (ratio - 1.0 - log_ratio);
        if (ratio - 1.0).abs() > cfg.clip_eps {
            g.clip_fraction += w;
        }
        // d(-surr)/d lp = -d_ratio * ratio
        let d_lp = -w * d_ratio * ratio;
        if d_lp != 0.0 {
            let mut d_mu = vec![0.0; act_dim];
            for d in 0..act_dim {
                let var = (2.0 * ac.log_std[d]).exp();
                let diff = a[d] - mu[d];
                d_mu[d] = d_lp * diff / var;
                g.log_std[d] += d_lp * (diff * diff / var - 1.0);
            }
            ac.actors[k].backward(&tr, &d_mu, &mut g.actors[k]);
        }
        let ct = ac.critic.forward_trace(obs)?;
        let err = ct.output()[0] - buf.returns[r];
        g.value_loss += w * 0.5 * err * err;
        ac.critic
            .backward(&ct, &[w * cfg.value_coef * err], &mut g.critic);
    }
    // entropy bonus: d(-c H)/d log_std = -c
    for x in &mut g.log_std {
        *x -= cfg.entropy_coef;
    }
    g.loss = g.policy_loss + cfg.value_coef * g.value_loss - cfg.entropy_coef * ac.entropy();
    Ok(g)
}

/// Several epochs of minibatch descent on the clipped surrogate, a squared
/// value loss and an entropy bonus. Requires advantages to be filled.
pub fn ppo_update<R: Rng>(
    ac: &mut ActorCritic,
    opt: &mut PpoOptimizer,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<PpoStats> {
    if buf.is_empty() {
        return Ok(PpoStats::default());
    }
    if buf.advantages.len() != buf.rows() {
        return Err(Error::Input("advantages not computed".into()));
    }
    let mut order: Vec<usize> = (0..buf.rows()).collect();
    let mut stats = PpoStats::default();
    let mut n_batches = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch.max(1)) {
            let mut g = ppo_loss_grad(ac, buf, chunk, cfg)?;
            for (k, ga) in g.actors.iter_mut().enumerate() {
                clip_grad_norm(ga, cfg.max_grad_norm);
                opt.actors[k].update(ac.actors[k].params_mut(), ga)?;
            }
            clip_grad_norm(&mut g.log_std, cfg.max_grad_norm);
            opt.log_std.update(&mut ac.log_std, &g.log_std)?;
            for x in &mut ac.log_std {
                *x = x.clamp(cfg.log_std_min, cfg.log_std_max);
            }
            clip_grad_norm(&mut g.critic, cfg.max_grad_norm);
            opt.critic.update(ac.critic.params_mut(), &g.critic)?;
            stats.policy_loss += g.policy_loss;
            stats.value_loss += g.value_loss;
            stats.approx_kl += g.approx_kl;
            stats.clip_fraction += g.clip_fraction;
            n_batches += 1;
        }
    }
    let nb = n_batches.max(1) as f64;
    stats.policy_loss /= nb;
    stats.value_loss /= nb;
    stats.approx_kl /= nb;
    stats.clip_fraction /= nb;
    stats.entropy = ac.entropy();
    Ok(stats)
}

/// Salt separating action noise from the reset stream in evaluations, so a
/// given seed yields the same start states for every policy.
pub const EVAL_ACTION_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Episodes from seeded resets. Returns per-episode summed true reward (mean
/// over agents) and final order parameter (NaN outside Vicsek).
pub fn evaluate_policy(
    spec: &EnvSpec,
    ac: &ActorCritic,
    episodes: usize,
    seed: u64,
    deterministic: bool,
) -> Result<Vec<(f64, f64)>> {
    let mut resets = ChaCha8Rng::seed_from_u64(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_ACTION_SALT);
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut s = envs::reset_with(spec, &mut resets);
        let mut total = 0.0;
        for _ in 0..spec.max_steps {
            let a: Vec<Vec2> = (0..spec.n_agents)
                .map(|i| {
                    let (a, _) = ac.act(i, &observe(spec, &s, i), deterministic, &mut rng)?;
                    Ok(effective_action(spec, [a[0], a[1]]))
                })
                .collect::<Result<_>>()?;
            let (next, r) = envs::step(spec, &s, &a)?;
            total += r.iter().sum::<f64>() / r.len() as f64;
            s = next;
        }
        let phi = if spec.kind == EnvKind::Vicsek {
            envs::order_parameter(&s)
        } else {
            f64::NAN
        };
        out.push((total, phi));
    }
    Ok(out)
}
