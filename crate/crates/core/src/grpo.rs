//! Group-relative policy optimization over rollout groups.

use std::path::Path;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Env;
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::policy::{rollout, Mode, ModeControl, PolicyParams, QueryContext};
use crate::rewards::{Judge, RewardKind, RolloutGroup};
use crate::rng::stream;
use crate::world::BenchQuery;

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet {
    pub advantages: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub epsilon: f64,
}

/// Z-scores within the group using the population standard deviation.
pub fn group_advantages(rewards: &[f64], epsilon: f64) -> Result<AdvantageSet> {
    if rewards.len() < 2 {
        return Err(invalid_input(format!("group advantages need at least 2 rewards, got {}", rewards.len())));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    // Equal rewards can still leave a one-ulp spread around the computed mean.
    let constant = rewards.iter().all(|r| *r == rewards[0]);
    let std = if constant { 0.0 } else { var.sqrt() };
    let advantages = if constant {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / (std + epsilon)).collect()
    };
    Ok(AdvantageSet { advantages, mean, std, epsilon })
}

#[derive(Clone, Debug)]
pub struct ScoredGroup {
    pub group: RolloutGroup,
    pub rewards: Vec<f64>,
    pub advantages: AdvantageSet,
}

/// Clipped surrogate averaged over groups and its gradient in the flattened
/// parameter layout.
pub fn surrogate_and_grad(params: &PolicyParams, groups: &[ScoredGroup], clip: f64) -> (f64, Vec<f64>) {
    let dim = params.num_params();
    let parts: Vec<(f64, Vec<f64>)> = groups
        .par_iter()
        .map(|g| {
            let mut grad = vec![0.0; dim];
            let mut value = 0.0;
            for (t, &a) in g.group.samples.iter().zip(&g.advantages.advantages) {
                if a == 0.0 {
                    continue;
                }
                for ((d, &old), &w) in t.decisions.iter().zip(&t.log_probs).zip(&t.weights) {
                    let a = a * w;
                    let ratio = (d.log_prob(params) - old).exp();
                    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
                    let (unclipped_term, clipped_term) = (ratio * a, clipped * a);
                    if !(unclipped_term > clipped_term) {
                        value += unclipped_term;
                        d.add_grad_log_prob(params, ratio * a, &mut grad);
                    } else {
                        value += clipped_term;
                    }
                }
            }
            (value, grad)
        })
        .collect();
    let n = groups.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; dim];
    for (v, g) in parts {
        total += v;
        for (acc, x) in grad.iter_mut().zip(g) {
            *acc += x;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    (total / n, grad)
}

pub fn surrogate(params: &PolicyParams, groups: &[ScoredGroup], clip: f64) -> f64 {
    surrogate_and_grad(params, groups, clip).0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub step: u64,
    pub mean_reward: f64,
    pub tool_rate: f64,
    pub diversity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: PolicyParams,
    pub step: u64,
    pub learning_rate: f64,
    pub clip_range: f64,
    pub reward_history: Vec<HistoryPoint>,
}

impl TrainState {
    pub fn new(params: PolicyParams, learning_rate: f64, clip_range: f64) -> Self {
        TrainState { params, step: 0, learning_rate, clip_range, reward_history: Vec::new() }
    }
}

/// One ascent step on the clipped surrogate.
pub fn policy_update(state: &TrainState, groups: &[ScoredGroup]) -> Result<TrainState> {
    let (_, grad) = surrogate_and_grad(&state.params, groups, state.clip_range);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::UpdateRejected(format!("non-finite gradient at step {}", state.step)));
    }
    let flat: Vec<f64> =
        state.params.flatten().iter().zip(&grad).map(|(w, g)| w + state.learning_rate * g).collect();
    let mut params = state.params.with_flat(&flat);
    params.version += 1;
    Ok(TrainState {
        params,
        step: state.step + 1,
        learning_rate: state.learning_rate,
        clip_range: state.clip_range,
        reward_history: state.reward_history.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Queries per step.
    pub batch_queries: usize,
    /// Rollouts per query (L).
    pub group_size: usize,
    pub n_songs: usize,
    pub learning_rate: f64,
    pub clip_range: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_queries: 32,
            group_size: 8,
            n_songs: 1,
            learning_rate: 0.05,
            clip_range: 0.2,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(invalid_config(format!("group_size must be >= 2, got {}", self.group_size)));
        }
        if self.batch_queries == 0 || self.n_songs == 0 {
            return Err(invalid_config("batch_queries and n_songs must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid_config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.clip_range > 0.0 && self.clip_range < 1.0) {
            return Err(invalid_config(format!("clip_range must lie in (0,1), got {}", self.clip_range)));
        }
        Ok(())
    }
}

/// Samples and scores one group per query.
#[allow(clippy::too_many_arguments)]
pub fn sample_groups(
    params: &PolicyParams,
    env: &Env,
    queries: &[&BenchQuery],
    cfg: &TrainConfig,
    kind: RewardKind,
    mode_control: ModeControl,
    purpose: &str,
    iteration: u64,
) -> Result<Vec<ScoredGroup>> {
    queries
        .par_iter()
        .enumerate()
        .map(|(j, q)| {
            let user = env.world.user(q);
            let ctx = QueryContext::single(&env.space, q, user);
            let mut rng = stream(cfg.seed, purpose, iteration * queries.len() as u64 + j as u64);
            let mut group = rollout(
                params,
                &ctx,
                &env.space,
                env.catalog(),
                &mut rng,
                cfg.group_size,
                mode_control,
                cfg.n_songs,
                &env.tools,
            )?;
            let history = group.history.clone();
            let judge = Judge { catalog: env.catalog(), user, history: &history, weights: &env.weights };
            let rewards = group.score(&judge, kind)?;
            let advantages = group_advantages(&rewards, cfg.epsilon)?;
            Ok(ScoredGroup { group, rewards, advantages })
        })
        .collect()
}

/// Step statistics over sampled groups.
pub fn group_stats(step: u64, groups: &[ScoredGroup]) -> HistoryPoint {
    let (mut reward, mut agentic, mut n, mut div) = (0.0, 0usize, 0usize, 0.0);
    for g in groups {
        reward += g.rewards.iter().sum::<f64>();
        agentic += g.group.samples.iter().filter(|t| t.mode == Mode::Agentic).count();
        n += g.rewards.len();
        let distinct: std::collections::BTreeSet<_> = g
            .group
            .breakdowns
            .iter()
            .flat_map(|b| b.per_song.iter().filter(|s| s.factuality == 1).map(|s| &s.song))
            .collect();
        let emitted: usize = g.group.breakdowns.iter().map(|b| b.per_song.len()).sum();
        div += if emitted == 0 { 0.0 } else { distinct.len() as f64 / emitted as f64 };
    }
    let nf = n.max(1) as f64;
    HistoryPoint {
        step,
        mean_reward: reward / nf,
        tool_rate: agentic as f64 / nf,
        diversity: div / groups.len().max(1) as f64,
    }
}

pub const MAX_CONSECUTIVE_REJECTIONS: usize = 3;

/// Training loop with a per-step hook that may inspect the updated state.
#[allow(clippy::too_many_arguments)]
pub fn train_with(
    cfg: &TrainConfig,
    env: &Env,
    queries: &[BenchQuery],
    kind: RewardKind,
    mode_control: ModeControl,
    steps: usize,
    init: TrainState,
    hook: &mut dyn FnMut(&TrainState, &[ScoredGroup]) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    kind.validate()?;
    if queries.is_empty() {
        return Err(invalid_input("training needs at least one query"));
    }
    let mut state = init;
    let mut rejections = 0;
    let mut iteration = 0u64;
    let mut done = 0;
    while done < steps {
        let mut rng = stream(cfg.seed, "train-batch", iteration);
        let batch: Vec<&BenchQuery> = queries.choose_multiple(&mut rng, cfg.batch_queries.min(queries.len())).collect();
        let groups = sample_groups(&state.params, env, &batch, cfg, kind, mode_control, "train-rollout", iteration)?;
        iteration += 1;
        match policy_update(&state, &groups) {
            Ok(mut next) => {
                rejections = 0;
                next.reward_history.push(group_stats(state.step, &groups));
                state = next;
                hook(&state, &groups)?;
                done += 1;
            }
            Err(Error::UpdateRejected(msg)) => {
                rejections += 1;
                log::warn!("rejected update: {msg}");
                if rejections >= MAX_CONSECUTIVE_REJECTIONS {
                    return Err(Error::UpdateRejected(format!("{rejections} consecutive rejections: {msg}")));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(state)
}

pub fn train(
    cfg: &TrainConfig,
    env: &Env,
    kind: RewardKind,
    mode_control: ModeControl,
    steps: usize,
    init: TrainState,
) -> Result<TrainState> {
    train_with(cfg, env, &env.world.train_queries, kind, mode_control, steps, init, &mut |_, _| Ok(()))
}

pub fn write_metrics_csv(path: &Path, history: &[HistoryPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for h in history {
        w.serialize(h)?;
    }
    w.flush()?;
    Ok(())
}
