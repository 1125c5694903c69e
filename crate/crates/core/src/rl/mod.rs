//! Stage 2: policy optimization of the retriever from group rollouts.

mod env;

pub use env::{env_reward, score, EnvKind, Environment, Response, Target};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{CandidatePool, Example};
use crate::encoder::{
    argmax_action, sample_action, softmax_with_log_norm, EmbeddingGrads, EncodedPool,
    ParamGradients, TriEncoder,
};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::structures::LocalStructureSet;
use crate::util::{derive_seed, mean, seeded_rng, Rng};

/// Below this, a group standard deviation is replaced by it.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvantageMethod {
    /// Reinforce without a baseline.
    Nb,
    /// Greedy-rollout reward as the baseline.
    Remax,
    /// Leave-one-out group mean as the baseline.
    Rloo,
    /// Group-normalized rewards.
    Grpo,
}

impl AdvantageMethod {
    pub fn name(self) -> &'static str {
        match self {
            AdvantageMethod::Nb => "nb",
            AdvantageMethod::Remax => "remax",
            AdvantageMethod::Rloo => "rloo",
            AdvantageMethod::Grpo => "grpo",
        }
    }

    fn needs_group(self) -> bool {
        matches!(self, AdvantageMethod::Rloo | AdvantageMethod::Grpo)
    }
}

impl fmt::Display for AdvantageMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdvantageMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nb" => Ok(AdvantageMethod::Nb),
            "remax" => Ok(AdvantageMethod::Remax),
            "rloo" => Ok(AdvantageMethod::Rloo),
            "grpo" => Ok(AdvantageMethod::Grpo),
            other => Err(Error::Config(format!("unknown advantage method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RatioMode {
    /// Clip each step's ratio separately and sum over steps.
    #[default]
    PerStep,
    /// Clip the ratio of whole-trajectory probabilities.
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub method: AdvantageMethod,
    pub group_size: usize,
    /// Queries per update.
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub beta: f64,
    pub ratio_mode: RatioMode,
    /// Gradient steps per sampling round.
    pub inner_updates: usize,
    #[serde(skip)]
    pub k: usize,
    pub optimizer: OptimizerKind,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            method: AdvantageMethod::Grpo,
            group_size: 32,
            batch_size: 16,
            epochs: 8,
            learning_rate: 1e-6,
            epsilon: 0.2,
            beta: 0.04,
            ratio_mode: RatioMode::PerStep,
            inner_updates: 1,
            k: 4,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("rl: {m}")));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        if self.group_size < 1 || self.batch_size < 1 || self.inner_updates < 1 || self.k < 1 {
            return bad("group_size, batch_size, inner_updates and k must be at least 1");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate must be non-negative");
        }
        if self.method.needs_group() && self.group_size < 2 {
            return Err(Error::Config(format!("rl: {} needs group_size >= 2", self.method)));
        }
        Ok(())
    }
}

/// One sampled retrieval sequence. Actions are pool positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub actions: Vec<usize>,
    pub logp_current: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub reward: f64,
    pub prediction: Option<String>,
}

impl Trajectory {
    pub fn sequence_logp_old(&self) -> f64 {
        self.logp_old.iter().sum()
    }

    pub fn sequence_logp_ref(&self) -> f64 {
        self.logp_ref.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub query_id: usize,
    pub query: String,
    /// Pool positions never offered to the policy for this query.
    pub excluded: Vec<usize>,
    pub trajectories: Vec<Trajectory>,
    pub advantages: Vec<f64>,
    pub baseline_reward: Option<f64>,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.reward).collect()
    }
}

/// Advantages for one group of rewards.
pub fn compute_advantages(
    method: AdvantageMethod,
    rewards: &[f64],
    baseline_reward: Option<f64>,
) -> Result<Vec<f64>> {
    let g = rewards.len();
    if method.needs_group() && g < 2 {
        return Err(Error::Domain(format!("{method} needs at least 2 rewards, got {g}")));
    }
    Ok(match method {
        AdvantageMethod::Nb => rewards.to_vec(),
        AdvantageMethod::Remax => {
            let b = baseline_reward
                .ok_or_else(|| Error::Domain("remax needs a greedy baseline reward".into()))?;
            rewards.iter().map(|r| r - b).collect()
        }
        AdvantageMethod::Rloo => {
            let total: f64 = rewards.iter().sum();
            let denom = (g - 1) as f64;
            rewards.iter().map(|r| r - (total - r) / denom).collect()
        }
        AdvantageMethod::Grpo => {
            if is_zero_variance(rewards) {
                return Ok(vec![0.0; g]);
            }
            let m = mean(rewards);
            let var = rewards.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / g as f64;
            let std = var.sqrt().max(STD_FLOOR);
            rewards.iter().map(|r| (r - m) / std).collect()
        }
    })
}

fn is_zero_variance(rewards: &[f64]) -> bool {
    rewards.windows(2).all(|w| w[0] == w[1])
}

/// `D = ρ − ln ρ − 1` for `ρ = π_ref / π_θ`.
pub fn kl_estimate(ratio_ref: f64) -> Result<f64> {
    if !(ratio_ref > 0.0) || !ratio_ref.is_finite() {
        return Err(Error::Domain(format!("KL ratio must be positive, got {ratio_ref}")));
    }
    Ok(kl_from_log_ratio(ratio_ref.ln()))
}

/// The same estimator from `u = ln π_ref − ln π_θ`.
pub fn kl_from_log_ratio(u: f64) -> f64 {
    (u.exp_m1() - u).max(0.0)
}

fn clip(x: f64, eps: f64) -> f64 {
    x.clamp(1.0 - eps, 1.0 + eps)
}

/// Clipped term `min(ρA, clip(ρ)A)`, its derivative in ρ, and whether the
/// clipped branch is the active one.
pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> (f64, f64, bool) {
    let plain = ratio * advantage;
    let clipped = clip(ratio, eps) * advantage;
    if plain <= clipped {
        (plain, advantage, false)
    } else {
        (clipped, 0.0, true)
    }
}

/// Loss and per-step `dL/dlogπ_θ` for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateOutput {
    pub loss: f64,
    pub dlogp: Vec<Vec<f64>>,
    pub clip_fraction: f64,
    pub kl_mean: f64,
}

/// `loss = −(1/G) Σ_i [clipped_i − β·KL_i]`, with the KL term only for GRPO
/// (the other methods fold it into the reward before computing advantages).
pub fn surrogate_objective(
    group: &RolloutGroup,
    method: AdvantageMethod,
    cfg: &RlConfig,
) -> Result<SurrogateOutput> {
    let g = group.trajectories.len();
    if g == 0 || group.advantages.len() != g {
        return Err(Error::Dimension(format!(
            "{g} trajectories with {} advantages",
            group.advantages.len()
        )));
    }
    let beta = if method == AdvantageMethod::Grpo { cfg.beta } else { 0.0 };
    let eps = cfg.epsilon;
    let scale = 1.0 / g as f64;
    let mut objective = 0.0;
    let mut clipped_count = 0usize;
    let mut terms = 0usize;
    let mut kl_total = 0.0;
    let mut dlogp = Vec::with_capacity(g);
    for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
        let steps = traj.actions.len();
        let mut grad = vec![0.0; steps];
        match cfg.ratio_mode {
            RatioMode::PerStep => {
                for t in 0..steps {
                    let ratio = (traj.logp_current[t] - traj.logp_old[t]).exp();
                    let (value, dratio, clipped) = clipped_term(ratio, adv, eps);
                    let u = traj.logp_ref[t] - traj.logp_current[t];
                    let kl = kl_from_log_ratio(u);
                    objective += value - beta * kl;
                    kl_total += kl;
                    grad[t] = -scale * (dratio * ratio - beta * (-u.exp_m1()));
                    clipped_count += clipped as usize;
                    terms += 1;
                }
            }
            RatioMode::Sequence => {
                let cur: f64 = traj.logp_current.iter().sum();
                let ratio = (cur - traj.sequence_logp_old()).exp();
                let (value, dratio, clipped) = clipped_term(ratio, adv, eps);
                let u = traj.sequence_logp_ref() - cur;
                let kl = kl_from_log_ratio(u);
                objective += value - beta * kl;
                kl_total += kl;
                let d = -scale * (dratio * ratio - beta * (-u.exp_m1()));
                grad.iter_mut().for_each(|x| *x = d);
                clipped_count += clipped as usize;
                terms += 1;
            }
        }
        dlogp.push(grad);
    }
    let loss = -objective * scale;
    if !loss.is_finite() {
        return Err(Error::NonFiniteObjective(format!(
            "surrogate loss {loss} for query {}",
            group.query_id
        )));
    }
    Ok(SurrogateOutput {
        loss,
        dlogp,
        clip_fraction: clipped_count as f64 / terms.max(1) as f64,
        kl_mean: kl_total / g as f64,
    })
}

/// KL of a trajectory under the sampling policy, used as a reward penalty.
fn sampling_kl(traj: &Trajectory, mode: RatioMode) -> f64 {
    match mode {
        RatioMode::PerStep => traj
            .logp_ref
            .iter()
            .zip(&traj.logp_old)
            .map(|(r, o)| kl_from_log_ratio(r - o))
            .sum(),
        RatioMode::Sequence => kl_from_log_ratio(traj.sequence_logp_ref() - traj.sequence_logp_old()),
    }
}

/// Fills `group.advantages`; the reward-penalty methods subtract `β·KL`
/// from each reward first. Returns false for a group that carries no
/// learning signal and should be skipped.
pub fn assign_advantages(group: &mut RolloutGroup, method: AdvantageMethod, cfg: &RlConfig) -> Result<bool> {
    let g = group.trajectories.len();
    if g == 0 || (method.needs_group() && g < 2) {
        group.advantages = vec![0.0; g];
        return Ok(false);
    }
    let raw = group.rewards();
    if method == AdvantageMethod::Grpo && is_zero_variance(&raw) {
        group.advantages = vec![0.0; g];
        return Ok(false);
    }
    let rewards: Vec<f64> = if method == AdvantageMethod::Grpo || cfg.beta == 0.0 {
        raw
    } else {
        group
            .trajectories
            .iter()
            .map(|t| t.reward - cfg.beta * sampling_kl(t, cfg.ratio_mode))
            .collect()
    };
    group.advantages = compute_advantages(method, &rewards, group.baseline_reward)?;
    Ok(true)
}

/// A policy with its pool encodings.
#[derive(Clone, Copy)]
pub struct Policy<'a> {
    pub tri: &'a TriEncoder,
    pub pool: &'a EncodedPool,
}

impl<'a> Policy<'a> {
    pub fn new(tri: &'a TriEncoder, pool: &'a EncodedPool) -> Self {
        Policy { tri, pool }
    }

    fn query(&self, text: &str) -> (Vec<usize>, Vec<f64>) {
        self.tri.encode_query(text)
    }

    /// Probabilities and log-normalizer at one step.
    fn step(&self, query_emb: &[f64], selected: &[usize], mask: &[bool]) -> Result<StepEval> {
        let state = self.tri.state(query_emb, selected, self.pool);
        let logits = self.tri.logits_for_state(&state, self.pool, mask);
        let (probs, log_norm) = softmax_with_log_norm(&logits, self.tri.tau)?;
        Ok(StepEval {
            state,
            logits,
            probs,
            log_norm,
        })
    }
}

struct StepEval {
    state: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
    log_norm: f64,
}

impl StepEval {
    fn logp(&self, action: usize, tau: f64) -> f64 {
        self.logits[action] / tau - self.log_norm
    }
}

fn base_mask(pool_len: usize, excluded: &[usize]) -> Vec<bool> {
    let mut mask = vec![false; pool_len];
    for &e in excluded {
        mask[e] = true;
    }
    mask
}

/// Rolls out `k` selections without replacement. Samples when `rng` is
/// given, otherwise decodes greedily. Returns actions with their log-probs
/// under `policy` and `reference`.
pub fn rollout(
    policy: Policy<'_>,
    reference: Policy<'_>,
    query: &str,
    excluded: &[usize],
    k: usize,
    mut rng: Option<&mut Rng>,
) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
    let n = policy.pool.len();
    let available = n - excluded.iter().filter(|&&e| e < n).count();
    if available < k {
        return Err(Error::PoolTooSmall { pool: available, k });
    }
    let (_, q) = policy.query(query);
    let (_, q_ref) = reference.query(query);
    let mut mask = base_mask(n, excluded);
    let mut actions = Vec::with_capacity(k);
    let mut logp = Vec::with_capacity(k);
    let mut logp_ref = Vec::with_capacity(k);
    for _ in 0..k {
        let step = policy.step(&q, &actions, &mask)?;
        let a = match rng.as_deref_mut() {
            Some(r) => sample_action(&step.probs, r),
            None => argmax_action(&step.probs),
        };
        let ref_step = reference.step(&q_ref, &actions, &mask)?;
        logp.push(step.logp(a, policy.tri.tau));
        logp_ref.push(ref_step.logp(a, reference.tri.tau));
        mask[a] = true;
        actions.push(a);
    }
    Ok((actions, logp, logp_ref))
}

/// Everything needed to score contexts for one query.
pub struct RewardContext<'a> {
    pub pool: &'a CandidatePool,
    pub env: &'a Environment,
    pub target: &'a Target,
}

impl RewardContext<'_> {
    pub fn respond(&self, query: &str, actions: &[usize]) -> Result<Response> {
        let ctx: Vec<&Example> = actions.iter().map(|&a| self.pool.get(a)).collect();
        let sets: Vec<&LocalStructureSet> = actions.iter().map(|&a| self.pool.structures(a)).collect();
        self.env
            .respond(&ctx, &sets, query, self.target, self.pool.structure_config())
    }
}

/// Samples `g` trajectories for one query under the old policy. Trajectories
/// whose environment call fails with a client error are dropped.
#[allow(clippy::too_many_arguments)]
pub fn sample_group(
    old: Policy<'_>,
    reference: Policy<'_>,
    rewards: &RewardContext<'_>,
    query: &Example,
    excluded: &[usize],
    g: usize,
    k: usize,
    method: AdvantageMethod,
    rng: &mut Rng,
) -> Result<RolloutGroup> {
    let mut trajectories = Vec::with_capacity(g);
    for _ in 0..g {
        let (actions, logp_old, logp_ref) =
            rollout(old, reference, &query.source, excluded, k, Some(&mut *rng))?;
        match rewards.respond(&query.source, &actions) {
            Ok(resp) => trajectories.push(Trajectory {
                logp_current: logp_old.clone(),
                actions,
                logp_old,
                logp_ref,
                reward: resp.reward,
                prediction: resp.prediction,
            }),
            Err(Error::Client(reason)) => {
                log::warn!("query {}: dropping trajectory ({reason})", query.id);
            }
            Err(e) => return Err(e),
        }
    }
    let baseline_reward = if method == AdvantageMethod::Remax {
        let (actions, _, _) = rollout(old, reference, &query.source, excluded, k, None)?;
        match rewards.respond(&query.source, &actions) {
            Ok(resp) => Some(resp.reward),
            Err(Error::Client(reason)) => {
                log::warn!("query {}: greedy baseline failed ({reason})", query.id);
                trajectories.clear();
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(RolloutGroup {
        query_id: query.id,
        query: query.source.clone(),
        excluded: excluded.to_vec(),
        advantages: vec![0.0; trajectories.len()],
        trajectories,
        baseline_reward,
    })
}

/// Statistics from one evaluation of the policy loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub loss: f64,
    pub clip_fraction: f64,
    pub kl_mean: f64,
}

/// Mean surrogate loss over `groups` under the current parameters, with its
/// gradient. Recomputes current log-probs of every recorded action.
pub fn policy_loss(
    tri: &TriEncoder,
    pool: &CandidatePool,
    groups: &[RolloutGroup],
    method: AdvantageMethod,
    cfg: &RlConfig,
) -> Result<(f64, ParamGradients, Vec<GroupStats>)> {
    let enc = tri.encode_pool(pool);
    let policy = Policy::new(tri, &enc);
    let mut grads = EmbeddingGrads::new(enc.len(), tri.dim());
    let mut total = 0.0;
    let mut stats = Vec::with_capacity(groups.len());
    let scale = 1.0 / groups.len().max(1) as f64;
    let tau = tri.tau;
    for group in groups {
        let (tokens, q) = policy.query(&group.query);
        let slot = grads.add_query(tokens);
        let mut current = group.clone();
        let mut evals = Vec::with_capacity(group.trajectories.len());
        for traj in &mut current.trajectories {
            let mut mask = base_mask(enc.len(), &group.excluded);
            let mut steps = Vec::with_capacity(traj.actions.len());
            for (t, &a) in traj.actions.iter().enumerate() {
                let step = policy.step(&q, &traj.actions[..t], &mask)?;
                traj.logp_current[t] = step.logp(a, tau);
                mask[a] = true;
                steps.push(step);
            }
            evals.push(steps);
        }
        let out = surrogate_objective(&current, method, cfg)?;
        total += out.loss * scale;
        for ((traj, steps), dlogp) in current.trajectories.iter().zip(&evals).zip(&out.dlogp) {
            for (t, step) in steps.iter().enumerate() {
                let g = dlogp[t] * scale;
                if g == 0.0 {
                    continue;
                }
                let a = traj.actions[t];
                let dlogits: Vec<(usize, f64)> = step
                    .probs
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(j, &p)| (j, g * ((j == a) as u8 as f64 - p) / tau))
                    .collect();
                tri.accumulate_logit_grads(&step.state, slot, &traj.actions[..t], &enc, &dlogits, &mut grads);
            }
        }
        stats.push(GroupStats {
            loss: out.loss,
            clip_fraction: out.clip_fraction,
            kl_mean: out.kl_mean,
        });
    }
    Ok((total, tri.finish_grads(&grads, &enc), stats))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlRecord {
    pub epoch: usize,
    pub query_id: usize,
    pub method: AdvantageMethod,
    pub mean_reward: f64,
    pub mean_advantage_abs: f64,
    pub clip_fraction: f64,
    pub kl_mean: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlReport {
    /// Mean sampled reward per epoch.
    pub epoch_mean_rewards: Vec<f64>,
    pub records: Vec<RlRecord>,
}

/// Group-rollout policy optimization against a frozen reference policy.
/// Pool entries identical to a query's own pair are masked.
pub fn train_rl(
    tri: &mut TriEncoder,
    reference: &TriEncoder,
    pool: &CandidatePool,
    queries: &[Example],
    env: &Environment,
    cfg: &RlConfig,
) -> Result<RlReport> {
    cfg.validate()?;
    let method = cfg.method;
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let structure_cfg = pool.structure_config();
    let targets = queries
        .iter()
        .map(|q| Target::new(q.target.as_str(), structure_cfg))
        .collect::<Result<Vec<_>>>()?;
    let excluded: Vec<Vec<usize>> = queries.iter().map(|q| pool.positions_of_pair(q)).collect();
    let ref_enc = reference.encode_pool(pool);
    let reference = Policy::new(reference, &ref_enc);
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..queries.len()).collect();
    let mut shuffle_rng = seeded_rng(cfg.seed);
    let mut report = RlReport {
        epoch_mean_rewards: Vec::with_capacity(cfg.epochs),
        records: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_rewards = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let old = tri.clone();
            let old_enc = old.encode_pool(pool);
            let old_policy = Policy::new(&old, &old_enc);
            let mut groups = Vec::with_capacity(batch.len());
            for &qi in batch {
                let query = &queries[qi];
                let mut rng = seeded_rng(derive_seed(cfg.seed, &[epoch as u64, query.id as u64]));
                let rewards = RewardContext {
                    pool,
                    env,
                    target: &targets[qi],
                };
                let mut group = sample_group(
                    old_policy,
                    reference,
                    &rewards,
                    query,
                    &excluded[qi],
                    cfg.group_size,
                    cfg.k,
                    method,
                    &mut rng,
                )?;
                epoch_rewards.extend(group.rewards());
                if assign_advantages(&mut group, method, cfg)? {
                    groups.push(group);
                }
            }
            if groups.is_empty() {
                continue;
            }
            for inner in 0..cfg.inner_updates {
                let (loss, grads, stats) = policy_loss(tri, pool, &groups, method, cfg)?;
                if !loss.is_finite() || !grads.is_finite() {
                    return Err(Error::NonFiniteObjective(format!(
                        "epoch {epoch}: loss {loss}, finite gradients: {}",
                        grads.is_finite()
                    )));
                }
                if inner == 0 {
                    for (group, st) in groups.iter().zip(&stats) {
                        report.records.push(RlRecord {
                            epoch,
                            query_id: group.query_id,
                            method,
                            mean_reward: mean(&group.rewards()),
                            mean_advantage_abs: mean(
                                &group.advantages.iter().map(|a| a.abs()).collect::<Vec<_>>(),
                            ),
                            clip_fraction: st.clip_fraction,
                            kl_mean: st.kl_mean,
                            loss: st.loss,
                        });
                    }
                }
                if cfg.learning_rate > 0.0 {
                    optimizer.step(tri, &grads, cfg.learning_rate);
                }
            }
        }
        let m = mean(&epoch_rewards);
        log::debug!("rl epoch {epoch}: mean reward {m:.4}");
        report.epoch_mean_rewards.push(m);
    }
    Ok(report)
}
