//! Agentic boundary learning: cold-start agent training, curriculum
//! supervised fitting on boundary-labelled data, controllable RL with
//! forced-half rollouts, then free-mode RL.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::{
    build_boundary_dataset, classify_boundary, BoundaryDataset, BoundaryKind, BoundaryLabel, BoundaryLabelConfig,
    BoundaryTurn, DatasetConfig,
};
use crate::env::Env;
use crate::error::{invalid_config, invalid_input, Result};
use crate::grpo::{sample_groups, train_with, TrainConfig, TrainState};
use crate::policy::{catalog_features, greedy_mode, Decision, Mode, ModeControl, PolicyParams, QueryContext};
use crate::rewards::{relevance, DialogueTurn, History, RewardKind};
use crate::rng::stream;
use crate::sft::{fit_weighted, SftConfig};
use crate::template::SongRef;
use crate::world::BenchQuery;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryStage {
    AgentZero,
    SftStage1,
    SftStage2,
    ControllableRl,
    UpperBound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryTrainReport {
    pub stage: BoundaryStage,
    pub tool_rate_curve: Vec<(u64, f64)>,
    pub reward_curve: Vec<(u64, f64)>,
    /// Mean reward over the training groups of each step.
    pub train_reward_curve: Vec<(u64, f64)>,
    pub boundary_accuracy: f64,
}

impl BoundaryTrainReport {
    fn new(stage: BoundaryStage) -> Self {
        BoundaryTrainReport {
            stage,
            tool_rate_curve: Vec::new(),
            reward_curve: Vec::new(),
            train_reward_curve: Vec::new(),
            boundary_accuracy: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryConfig {
    pub seed: u64,
    pub gamma: f64,
    pub n_max: usize,
    pub n_songs: usize,
    pub group_size: usize,
    pub batch_queries: usize,
    pub learning_rate: f64,
    pub clip_range: f64,
    pub zero_steps: usize,
    pub controllable_steps: usize,
    pub upper_steps: usize,
    /// Groups per probe query when measuring the reward curve.
    pub probe_group_size: usize,
    /// Give internal and agentic targets equal total weight in fitting.
    pub balance_labels: bool,
    pub label: BoundaryLabelConfig,
    pub dataset: DatasetConfig,
    pub sft: SftConfig,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        BoundaryConfig {
            seed: 0,
            gamma: 0.8,
            n_max: 5,
            n_songs: 5,
            group_size: 8,
            batch_queries: 32,
            learning_rate: 0.01,
            clip_range: 0.2,
            zero_steps: 100,
            controllable_steps: 300,
            upper_steps: 300,
            probe_group_size: 8,
            balance_labels: true,
            label: BoundaryLabelConfig::default(),
            dataset: DatasetConfig::default(),
            sft: SftConfig { epochs: 1, learning_rate: 0.015, ..SftConfig::default() },
        }
    }
}

impl BoundaryConfig {
    pub fn validate(&self) -> Result<()> {
        crate::rewards::validate_gamma(self.gamma)?;
        if self.group_size % 2 == 1 {
            return Err(invalid_config(format!("boundary.group_size must be even, got {}", self.group_size)));
        }
        if self.probe_group_size == 0 {
            return Err(invalid_config("boundary.probe_group_size must be >= 1"));
        }
        self.train_config().validate()?;
        self.label.validate()?;
        self.dataset.validate()?;
        self.sft.validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            batch_queries: self.batch_queries,
            group_size: self.group_size,
            n_songs: self.n_songs,
            learning_rate: self.learning_rate,
            clip_range: self.clip_range,
            ..TrainConfig::default()
        }
    }

    fn agentic_kind(&self) -> RewardKind {
        RewardKind::HybridAgentic { n_max: self.n_max, gamma: self.gamma }
    }
}

/// Ground-truth mode: agentic iff the query is out of knowledge or no
/// in-corpus song reaches the relevance threshold.
pub fn oracle_mode(query: &BenchQuery, env: &Env, threshold: f64) -> Result<Mode> {
    if query.ood {
        return Ok(Mode::Agentic);
    }
    let history = History::single(query.constraints.clone());
    let mut best = 0.0f64;
    for s in env.catalog().in_corpus() {
        let r = SongRef::new(s.title.clone(), s.artist.clone());
        let text = crate::policy::recommendation_text(std::slice::from_ref(&r));
        best = best.max(relevance(&history, &r, Some(s), &text, &env.weights)?.score);
    }
    Ok(if best < threshold { Mode::Agentic } else { Mode::Internal })
}

/// Fraction of queries whose greedy single-turn mode matches the oracle.
pub fn boundary_accuracy(params: &PolicyParams, queries: &[BenchQuery], env: &Env, threshold: f64) -> Result<f64> {
    if queries.is_empty() {
        return Err(invalid_input("boundary accuracy needs queries"));
    }
    let hits: Vec<bool> = queries
        .par_iter()
        .map(|q| {
            let ctx = QueryContext::single(&env.space, q, env.world.user(q));
            Ok(greedy_mode(params, &ctx.psi) == oracle_mode(q, env, threshold)?)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

/// Expected free-mode tool rate over the probe set.
pub fn probe_tool_rate(params: &PolicyParams, env: &Env, probes: &[BenchQuery]) -> f64 {
    if probes.is_empty() {
        return 0.0;
    }
    let s: f64 = probes
        .iter()
        .map(|q| params.tool_prob(&QueryContext::single(&env.space, q, env.world.user(q)).psi))
        .sum();
    s / probes.len() as f64
}

/// Mean discounted list reward of free-mode probe rollouts.
pub fn probe_reward(params: &PolicyParams, env: &Env, probes: &[BenchQuery], cfg: &BoundaryConfig, step: u64) -> Result<f64> {
    let refs: Vec<&BenchQuery> = probes.iter().collect();
    let tc = TrainConfig { group_size: cfg.probe_group_size, ..cfg.train_config() };
    let groups = sample_groups(params, env, &refs, &tc, cfg.agentic_kind(), ModeControl::Free, "probe-rollout", step)?;
    let (s, n) = groups.iter().fold((0.0, 0usize), |(s, n), g| (s + g.rewards.iter().sum::<f64>(), n + g.rewards.len()));
    Ok(s / n.max(1) as f64)
}

fn run_rl(
    params: &PolicyParams,
    cfg: &BoundaryConfig,
    env: &Env,
    steps: usize,
    kind: RewardKind,
    mode_control: ModeControl,
    stage: BoundaryStage,
    probe: bool,
) -> Result<(PolicyParams, BoundaryTrainReport)> {
    cfg.validate()?;
    let mut report = BoundaryTrainReport::new(stage);
    let probes = &env.world.probe_queries;
    let tc = cfg.train_config();
    let init = TrainState::new(params.clone(), tc.learning_rate, tc.clip_range);
    let state = train_with(&tc, env, &env.world.train_queries, kind, mode_control, steps, init, &mut |st, _| {
        let p = st.reward_history.last().expect("history appended before the hook");
        report.train_reward_curve.push((p.step, p.mean_reward));
        if probe {
            report.tool_rate_curve.push((p.step, probe_tool_rate(&st.params, env, probes)));
            report.reward_curve.push((p.step, probe_reward(&st.params, env, probes, cfg, p.step)?));
        } else {
            report.tool_rate_curve.push((p.step, p.tool_rate));
            report.reward_curve.push((p.step, p.mean_reward));
        }
        Ok(())
    })?;
    report.boundary_accuracy = boundary_accuracy(&state.params, &env.world.eval_queries, env, cfg.label.threshold)?;
    Ok((state.params, report))
}

/// Cold-start agent: all-agentic GRPO with the distinct-song bonus.
pub fn train_agent_zero(cfg: &BoundaryConfig, env: &Env, init: &PolicyParams) -> Result<(PolicyParams, BoundaryTrainReport)> {
    run_rl(
        init,
        cfg,
        env,
        cfg.zero_steps,
        RewardKind::AgentZero { n_max: cfg.n_max },
        ModeControl::AllAgentic,
        BoundaryStage::AgentZero,
        false,
    )
}

/// Forced-half rollouts under the discounted reward; tool rate and reward
/// are measured on free-mode probe rollouts after every step.
pub fn controllable_rl(params: &PolicyParams, cfg: &BoundaryConfig, env: &Env, steps: usize) -> Result<(PolicyParams, BoundaryTrainReport)> {
    run_rl(params, cfg, env, steps, cfg.agentic_kind(), ModeControl::ForcedHalf, BoundaryStage::ControllableRl, true)
}

/// Free-mode rollouts: the policy decides when to call tools.
pub fn upper_bound_rl(params: &PolicyParams, cfg: &BoundaryConfig, env: &Env, steps: usize) -> Result<(PolicyParams, BoundaryTrainReport)> {
    run_rl(params, cfg, env, steps, cfg.agentic_kind(), ModeControl::Free, BoundaryStage::UpperBound, true)
}

/// Labels every query, one derived stream per query.
pub fn label_queries(
    internal: &PolicyParams,
    agentic: &PolicyParams,
    queries: &[BenchQuery],
    env: &Env,
    cfg: &BoundaryConfig,
) -> Result<Vec<BoundaryLabel>> {
    queries
        .par_iter()
        .map(|q| {
            let mut rng = stream(cfg.seed, "boundary-label", u64::from(q.query_id.0));
            classify_boundary(internal, agentic, q, env, &mut rng, &cfg.label)
        })
        .collect()
}

/// Target decisions for one turn: the mode, then either the internal songs
/// or the tool and the songs picked from its results.
pub fn turn_decisions(env: &Env, query: &BenchQuery, history: History, turn: &BoundaryTurn) -> Result<Vec<Decision>> {
    let ctx = QueryContext::new(&env.space, query, env.world.user(query), history);
    let mut out = vec![Decision::Mode { psi: ctx.psi.clone(), agentic: turn.target_mode == Mode::Agentic }];
    match (turn.target_mode, &turn.trace) {
        (Mode::Internal, _) => {
            let mut excluded = ctx.excluded.clone();
            for s in &turn.songs {
                let Some(i) = env.space.index_of(s) else { continue };
                if excluded.contains(&i) {
                    continue;
                }
                out.push(Decision::Song { pool: ctx.internal_pool.clone(), excluded: excluded.clone(), chosen: i });
                excluded.push(i);
            }
        }
        (Mode::Agentic, Some(trace)) => {
            let Some(first) = trace.tool_calls.first() else {
                return Err(invalid_input(format!("agentic turn {} has no tool call", turn.query_id)));
            };
            out.push(Decision::Tool { psi: ctx.psi.clone(), chosen: first.tool.index() });
            let results = &trace.tool_calls.last().expect("nonempty").results;
            let pool = Arc::new(catalog_features(query, ctx.user, env.catalog(), results));
            let refs: Vec<SongRef> = results
                .iter()
                .map(|id| {
                    let s = env.catalog().get(*id);
                    SongRef::new(s.title.clone(), s.artist.clone())
                })
                .collect();
            let prior: BTreeSet<&SongRef> = ctx.history.prior_turns().iter().flat_map(|t| t.songs.iter()).collect();
            let mut excluded: Vec<usize> = (0..refs.len()).filter(|&i| prior.contains(&refs[i])).collect();
            if excluded.len() == refs.len() {
                excluded.clear();
            }
            for s in &turn.songs {
                let Some(i) = refs.iter().position(|r| r == s) else { continue };
                if excluded.contains(&i) {
                    continue;
                }
                out.push(Decision::Song { pool: pool.clone(), excluded: excluded.clone(), chosen: i });
                excluded.push(i);
            }
        }
        (Mode::Agentic, None) => {
            return Err(invalid_input(format!("agentic turn {} lacks a trace", turn.query_id)));
        }
    }
    Ok(out)
}

fn query_index(env: &Env) -> HashMap<u32, &BenchQuery> {
    env.world
        .train_queries
        .iter()
        .chain(&env.world.eval_queries)
        .chain(&env.world.probe_queries)
        .map(|q| (q.query_id.0, q))
        .collect()
}

fn lookup<'a>(index: &HashMap<u32, &'a BenchQuery>, id: u32) -> Result<&'a BenchQuery> {
    index.get(&id).copied().ok_or_else(|| invalid_input(format!("unknown query id {id}")))
}

/// Supervised examples with the label of the turn behind every decision.
#[derive(Clone, Debug, Default)]
pub struct SftSet {
    pub examples: Vec<Vec<Decision>>,
    pub labels: Vec<Vec<BoundaryKind>>,
}

impl SftSet {
    fn push(&mut self, decisions: Vec<Decision>, labels: Vec<BoundaryKind>) {
        self.examples.push(decisions);
        self.labels.push(labels);
    }

    /// Per-decision loss weights; with `balance`, each label's turns carry
    /// equal total weight.
    pub fn weights(&self, balance: bool) -> Vec<Vec<f64>> {
        let count = |k: BoundaryKind| self.labels.iter().flatten().filter(|l| **l == k).count();
        let (pos, neg) = (count(BoundaryKind::PosInternal), count(BoundaryKind::NegInternal));
        let total = (pos + neg) as f64;
        let w = |k: BoundaryKind| {
            let n = if k == BoundaryKind::PosInternal { pos } else { neg };
            if !balance || pos == 0 || neg == 0 {
                1.0
            } else {
                total / (2.0 * n as f64)
            }
        };
        self.labels.iter().map(|ls| ls.iter().map(|&k| w(k)).collect()).collect()
    }
}

/// One example per single-turn sample.
pub fn stage1_examples(ds: &BoundaryDataset, env: &Env) -> Result<SftSet> {
    let index = query_index(env);
    let mut set = SftSet::default();
    for s in &ds.stage1 {
        let q = lookup(&index, s.turn.query_id)?;
        let d = turn_decisions(env, q, History::single(q.constraints.clone()), &s.turn)?;
        let n = d.len();
        set.push(d, vec![s.turn.label; n]);
    }
    Ok(set)
}

/// One example per dialogue; each turn is conditioned on the targets of the
/// turns before it.
pub fn stage2_examples(ds: &BoundaryDataset, env: &Env) -> Result<SftSet> {
    let index = query_index(env);
    let mut set = SftSet::default();
    for d in &ds.stage2 {
        let mut prior: Vec<DialogueTurn> = Vec::new();
        let (mut out, mut labels) = (Vec::new(), Vec::new());
        for t in &d.turns {
            let q = lookup(&index, t.query_id)?;
            let mut turns = prior.clone();
            turns.push(DialogueTurn { constraints: q.constraints.clone(), songs: Vec::new(), agentic: false });
            let dec = turn_decisions(env, q, History { turns }, t)?;
            labels.extend(std::iter::repeat_n(t.label, dec.len()));
            out.extend(dec);
            prior.push(DialogueTurn {
                constraints: q.constraints.clone(),
                songs: t.songs.clone(),
                agentic: t.target_mode == Mode::Agentic,
            });
        }
        set.push(out, labels);
    }
    Ok(set)
}

/// Stage 1 then stage 2; accuracy on `heldout` is measured after each.
pub fn fit_boundary_sft(
    init: &PolicyParams,
    ds: &BoundaryDataset,
    env: &Env,
    heldout: &[BenchQuery],
    cfg: &BoundaryConfig,
) -> Result<(PolicyParams, [BoundaryTrainReport; 2])> {
    if ds.stage1.is_empty() || ds.stage2.is_empty() {
        return Err(invalid_input("boundary dataset has an empty stage"));
    }
    let s1 = stage1_examples(ds, env)?;
    let p1 = fit_weighted(init, &s1.examples, &s1.weights(cfg.balance_labels), &SftConfig { seed: cfg.seed, ..cfg.sft.clone() })?;
    let mut r1 = BoundaryTrainReport::new(BoundaryStage::SftStage1);
    r1.boundary_accuracy = boundary_accuracy(&p1, heldout, env, cfg.label.threshold)?;
    let s2 = stage2_examples(ds, env)?;
    let p2 = fit_weighted(&p1, &s2.examples, &s2.weights(cfg.balance_labels), &SftConfig { seed: cfg.seed ^ 0x5f2, ..cfg.sft.clone() })?;
    let mut r2 = BoundaryTrainReport::new(BoundaryStage::SftStage2);
    r2.boundary_accuracy = boundary_accuracy(&p2, heldout, env, cfg.label.threshold)?;
    Ok((p2, [r1, r2]))
}

/// Starting point for supervised fitting: songs from the internal model,
/// tool choice from the cold-start agent, undecided tool head.
pub fn sft_init(internal: &PolicyParams, zero: &PolicyParams) -> PolicyParams {
    let mut p = internal.clone();
    p.tool_select_weights = zero.tool_select_weights.clone();
    p.tool_head_weights = vec![0.0; internal.tool_head_weights.len()];
    p
}

#[derive(Clone, Debug)]
pub struct BoundaryOutputs {
    pub zero: PolicyParams,
    pub labels: Vec<BoundaryLabel>,
    pub dataset: BoundaryDataset,
    pub sft: PolicyParams,
    pub controlled: PolicyParams,
    pub m1: PolicyParams,
    pub reports: Vec<BoundaryTrainReport>,
}

/// The whole boundary pipeline from the internal model.
pub fn run_pipeline(cfg: &BoundaryConfig, env: &Env, internal: &PolicyParams) -> Result<BoundaryOutputs> {
    cfg.validate()?;
    let (zero, zr) = train_agent_zero(cfg, env, &PolicyParams::initial_for(&env.space))?;
    let labels = label_queries(internal, &zero, &env.world.train_queries, env, cfg)?;
    let dataset = build_boundary_dataset(&labels, &DatasetConfig { seed: cfg.seed, ..cfg.dataset.clone() })?;
    let (sft, [r1, r2]) = fit_boundary_sft(&sft_init(internal, &zero), &dataset, env, &env.world.eval_queries, cfg)?;
    let (controlled, cr) = controllable_rl(&sft, cfg, env, cfg.controllable_steps)?;
    let (m1, ur) = upper_bound_rl(&controlled, cfg, env, cfg.upper_steps)?;
    Ok(BoundaryOutputs { zero, labels, dataset, sft, controlled, m1, reports: vec![zr, r1, r2, cr, ur] })
}

/// `step,mean_reward,tool_rate` rows.
pub fn write_report_csv(path: &Path, report: &BoundaryTrainReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "mean_reward", "tool_rate"])?;
    for ((s, r), (_, t)) in report.reward_curve.iter().zip(&report.tool_rate_curve) {
        w.write_record([s.to_string(), r.to_string(), t.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Relative change between the mean of the first and last `window` points
/// of a curve, skipping nothing.
pub fn window_change(curve: &[(u64, f64)], window: usize) -> Option<f64> {
    if window == 0 || curve.len() < window {
        return None;
    }
    let head: f64 = curve[..window].iter().map(|p| p.1).sum::<f64>() / window as f64;
    let tail: f64 = curve[curve.len() - window..].iter().map(|p| p.1).sum::<f64>() / window as f64;
    if head == 0.0 {
        return None;
    }
    Some((tail - head) / head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::{Dialogue, SingleTurnSample};
    use crate::env::WorldConfig;

    fn small_env() -> Env {
        let wc = WorldConfig { n_train_queries: 200, n_eval_queries: 100, n_probe_queries: 20, ..Default::default() };
        Env::generate(21, &wc).unwrap()
    }

    fn internal_turn(env: &Env, q: &BenchQuery) -> BoundaryTurn {
        let songs: Vec<SongRef> = env
            .space
            .items
            .iter()
            .filter(|it| it.catalog_id.is_some() && it.attributes.satisfies_all(&q.constraints))
            .take(3)
            .map(|it| it.song.clone())
            .collect();
        BoundaryTurn {
            query_id: q.query_id.0,
            user_id: q.user_id,
            label: BoundaryKind::PosInternal,
            target_mode: Mode::Internal,
            songs,
            trace: None,
        }
    }

    #[test]
    fn all_internal_data_drives_tool_prob_down() {
        let env = small_env();
        let qs: Vec<&BenchQuery> = env.world.train_queries.iter().filter(|q| !q.ood).take(60).collect();
        let turns: Vec<BoundaryTurn> = qs.iter().map(|q| internal_turn(&env, q)).collect();
        let ds = BoundaryDataset {
            stage1: turns
                .iter()
                .enumerate()
                .map(|(i, t)| SingleTurnSample { stage: 1, dialogue_id: (i / 6) as u32, turn_index: i % 6, turn: t.clone() })
                .collect(),
            stage2: turns
                .chunks(6)
                .enumerate()
                .map(|(d, c)| Dialogue { stage: 2, dialogue_id: d as u32, turns: c.to_vec() })
                .collect(),
        };
        let cfg = BoundaryConfig { sft: SftConfig { epochs: 20, learning_rate: 0.5, ..Default::default() }, ..Default::default() };
        let init = PolicyParams::initial_for(&env.space);
        let heldout: Vec<BenchQuery> = env.world.eval_queries.iter().filter(|q| !q.ood).cloned().collect();
        let (p, _) = fit_boundary_sft(&init, &ds, &env, &heldout, &cfg).unwrap();
        for q in &heldout {
            let ctx = QueryContext::single(&env.space, q, env.world.user(q));
            assert!(p.tool_prob(&ctx.psi) < 0.1);
        }
        let (p2, _) = fit_boundary_sft(&init, &ds, &env, &heldout, &cfg).unwrap();
        assert_eq!(p, p2);
        assert!(fit_boundary_sft(&init, &BoundaryDataset::default(), &env, &heldout, &cfg).is_err());
    }

    #[test]
    fn oracle_matches_partition() {
        let env = small_env();
        for q in env.world.eval_queries.iter().take(40) {
            let m = oracle_mode(q, &env, 0.6).unwrap();
            assert_eq!(m == Mode::Agentic, env.catalog().is_out_of_knowledge(&q.constraints));
        }
    }

    #[test]
    fn zero_step_upper_bound_is_identity() {
        let env = small_env();
        let p = PolicyParams::initial_for(&env.space);
        let (q, r) = upper_bound_rl(&p, &BoundaryConfig::default(), &env, 0).unwrap();
        assert_eq!(p, q);
        assert!(r.tool_rate_curve.is_empty());
    }

    #[test]
    fn controllable_groups_are_half_and_half() {
        let env = small_env();
        let cfg = BoundaryConfig::default();
        let p = PolicyParams::initial_for(&env.space);
        let refs: Vec<&BenchQuery> = env.world.train_queries.iter().take(8).collect();
        let groups =
            sample_groups(&p, &env, &refs, &cfg.train_config(), cfg.agentic_kind(), ModeControl::ForcedHalf, "t", 0).unwrap();
        for g in &groups {
            let agentic = g.group.samples.iter().filter(|t| t.mode == Mode::Agentic).count();
            assert_eq!(agentic, 4);
        }
        let bad = BoundaryConfig { group_size: 7, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = BoundaryConfig { gamma: 1.3, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn window_change_arithmetic() {
        let c: Vec<(u64, f64)> = (0..20).map(|i| (i, if i < 10 { 1.0 } else { 0.5 })).collect();
        assert_eq!(window_change(&c, 10), Some(-0.5));
        assert_eq!(window_change(&c[..5], 10), None);
    }
}
