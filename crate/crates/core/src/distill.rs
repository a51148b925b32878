//! Self-distillation of single-song behaviour into list-wise samples, and
//! boundary labelling of queries into the internal comfort zone versus the
//! zone that needs tools.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::Env;
use crate::error::{invalid_config, invalid_input, Result};
use crate::policy::{
    recommendation_text, sample_agentic, sample_internal, Decision, Mode, PolicyParams, QueryContext, ToolCall,
};
use crate::rewards::{relevance, DialogueTurn, History};
use crate::rng::Rng;
use crate::template::{SongRef, StructuredResponse};
use crate::world::{apportion, BenchQuery, Dim, UserId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Target list length K.
    pub k: usize,
    pub max_rounds: usize,
    pub per_round: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { k: 5, max_rounds: 3, per_round: 5 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.per_round == 0 || self.max_rounds == 0 {
            return Err(invalid_config("distill.k, distill.per_round and distill.max_rounds must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ListwiseSample {
    pub query_id: u32,
    pub user_id: UserId,
    pub history: History,
    pub songs: Vec<SongRef>,
    pub text: String,
    pub rounds_used: usize,
    pub complete: bool,
}

/// Runs up to `max_rounds` rounds, keeping new distinct songs, until `k`
/// are collected or a round comes back empty.
pub fn accumulate_rounds(
    k: usize,
    max_rounds: usize,
    mut round: impl FnMut(usize) -> Result<Option<Vec<SongRef>>>,
) -> Result<(Vec<SongRef>, usize, bool)> {
    let mut songs: Vec<SongRef> = Vec::new();
    let mut seen: BTreeSet<SongRef> = BTreeSet::new();
    let mut rounds = 0;
    while rounds < max_rounds && songs.len() < k {
        let Some(batch) = round(rounds)? else {
            break;
        };
        rounds += 1;
        for s in batch {
            if seen.insert(s.clone()) {
                songs.push(s);
            }
        }
    }
    let complete = songs.len() >= k;
    Ok((songs, rounds, complete))
}

/// Template playlist description, naming the requested mood if any.
pub fn playlist_text(songs: &[SongRef], constraints: &[crate::world::Constraint]) -> String {
    let mood = constraints.iter().find(|c| c.dim == Dim::Mood).map(|c| c.value_name().replace('_', " "));
    let items: Vec<String> = songs.iter().map(|s| format!("{} by {}", s.song_name, s.singer_name)).collect();
    match mood {
        Some(m) => format!("a playlist of {} {} songs: {}", songs.len(), m, items.join("; ")),
        None => format!("a playlist of {} songs: {}", songs.len(), items.join("; ")),
    }
}

/// Would the judge call this song on target for the current request?
fn on_target(env: &Env, history: &History, song: &SongRef, threshold: f64) -> Result<bool> {
    let resolved = env.catalog().lookup(&song.song_name, &song.singer_name);
    if resolved.is_none() {
        return Ok(false);
    }
    let text = recommendation_text(std::slice::from_ref(song));
    Ok(relevance(history, song, resolved, &text, &env.weights)?.score > threshold)
}

/// Repeated exclusion sampling from the internal policy; songs that are not
/// factual and on target are dropped.
pub fn selfdistill(
    params: &PolicyParams,
    ctx: &QueryContext<'_>,
    env: &Env,
    rng: &mut Rng,
    cfg: &DistillConfig,
) -> Result<ListwiseSample> {
    cfg.validate()?;
    let mut local = ctx.clone();
    let (songs, rounds_used, _) = accumulate_rounds(cfg.k, cfg.max_rounds, |_| {
        if local.excluded.len() >= env.space.len() {
            return Ok(None);
        }
        let t = sample_internal(params, &local, &env.space, rng, cfg.per_round)?;
        let mut kept = Vec::new();
        for s in &t.response.music {
            if let Some(i) = env.space.index_of(s) {
                local.excluded.push(i);
            }
            if on_target(env, &ctx.history, s, crate::bench::EFFECTIVE_RELEVANCE)? {
                kept.push(s.clone());
            }
        }
        Ok(Some(kept))
    })?;
    let songs: Vec<SongRef> = songs.into_iter().take(cfg.k).collect();
    Ok(ListwiseSample {
        query_id: ctx.query.query_id.0,
        user_id: ctx.user.user_id,
        history: ctx.history.clone(),
        text: playlist_text(&songs, &ctx.query.constraints),
        complete: songs.len() >= cfg.k,
        songs,
        rounds_used,
    })
}

/// Sliding-window distillation over a dialogue: each turn sees all earlier
/// turns and their synthesized lists.
pub fn selfdistill_multiturn(
    params: &PolicyParams,
    dialogue: &[&BenchQuery],
    env: &Env,
    rng: &mut Rng,
    cfg: &DistillConfig,
) -> Result<Vec<ListwiseSample>> {
    if dialogue.is_empty() {
        return Err(invalid_input("empty dialogue"));
    }
    let mut prior: Vec<DialogueTurn> = Vec::new();
    let mut out = Vec::with_capacity(dialogue.len());
    for q in dialogue {
        let mut turns = prior.clone();
        turns.push(DialogueTurn { constraints: q.constraints.clone(), songs: Vec::new(), agentic: false });
        let ctx = QueryContext::new(&env.space, q, env.world.user(q), History { turns });
        let sample = selfdistill(params, &ctx, env, rng, cfg)?;
        prior.push(DialogueTurn { constraints: q.constraints.clone(), songs: sample.songs.clone(), agentic: false });
        out.push(sample);
    }
    Ok(out)
}

/// Sequential internal song choices reproducing a sample's list.
pub fn listwise_decisions(env: &Env, query: &BenchQuery, sample: &ListwiseSample) -> Vec<Decision> {
    let ctx = QueryContext::new(&env.space, query, env.world.user(query), sample.history.clone());
    let mut excluded = ctx.excluded.clone();
    let mut out = Vec::with_capacity(sample.songs.len());
    for s in &sample.songs {
        let Some(i) = env.space.index_of(s) else { continue };
        if excluded.contains(&i) {
            continue;
        }
        out.push(Decision::Song { pool: ctx.internal_pool.clone(), excluded: excluded.clone(), chosen: i });
        excluded.push(i);
    }
    out
}

/// Distills every query into a list sample (one stream per query) and
/// fits the internal model on the non-empty ones.
pub fn distill_internal(
    base: &PolicyParams,
    queries: &[BenchQuery],
    env: &Env,
    cfg: &DistillConfig,
    sft: &crate::sft::SftConfig,
) -> Result<(Vec<ListwiseSample>, PolicyParams)> {
    use rayon::prelude::*;
    let samples: Vec<ListwiseSample> = queries
        .par_iter()
        .map(|q| {
            let ctx = QueryContext::single(&env.space, q, env.world.user(q));
            let mut rng = crate::rng::stream(sft.seed, "selfdistill", u64::from(q.query_id.0));
            selfdistill(base, &ctx, env, &mut rng, cfg)
        })
        .collect::<Result<_>>()?;
    let examples: Vec<Vec<Decision>> = queries
        .iter()
        .zip(&samples)
        .map(|(q, s)| listwise_decisions(env, q, s))
        .filter(|d| !d.is_empty())
        .collect();
    let fitted = crate::sft::fit(base, &examples, sft)?;
    Ok((samples, fitted))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BoundaryKind {
    #[serde(rename = "Pos_internal")]
    PosInternal,
    #[serde(rename = "Neg_internal")]
    NegInternal,
}

/// Serializable record of an agentic answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub tool_calls: Vec<ToolCall>,
    pub response: StructuredResponse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryLabel {
    pub query_id: u32,
    pub user_id: UserId,
    pub label: BoundaryKind,
    pub best_relevance: f64,
    pub threshold: f64,
    /// Per internal rollout, the relevance of each recommended song.
    pub rollout_relevances: Vec<Vec<f64>>,
    /// Distinct factual internal songs at or above the threshold.
    pub internal_songs: Vec<SongRef>,
    /// The grounded agentic answer standing in for a failed internal one.
    pub replacement: Option<AgentTrace>,
}

impl BoundaryLabel {
    pub fn target_mode(&self) -> Mode {
        match self.label {
            BoundaryKind::PosInternal => Mode::Internal,
            BoundaryKind::NegInternal => Mode::Agentic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryLabelConfig {
    pub threshold: f64,
    pub n_rollouts: usize,
    pub n_songs: usize,
}

impl Default for BoundaryLabelConfig {
    fn default() -> Self {
        BoundaryLabelConfig { threshold: 0.6, n_rollouts: 8, n_songs: 5 }
    }
}

impl BoundaryLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(invalid_config(format!("threshold must lie in (0,1), got {}", self.threshold)));
        }
        if self.n_rollouts == 0 || self.n_songs == 0 {
            return Err(invalid_config("n_rollouts and n_songs must be >= 1"));
        }
        Ok(())
    }
}

/// Labels one query by the best relevance the internal policy reaches over
/// `n_rollouts` attempts; failures get an agentic replacement.
pub fn classify_boundary(
    internal: &PolicyParams,
    agentic: &PolicyParams,
    query: &BenchQuery,
    env: &Env,
    rng: &mut Rng,
    cfg: &BoundaryLabelConfig,
) -> Result<BoundaryLabel> {
    cfg.validate()?;
    let user = env.world.user(query);
    let ctx = QueryContext::single(&env.space, query, user);
    let mut rollout_relevances = Vec::with_capacity(cfg.n_rollouts);
    let mut best = 0.0f64;
    let mut good: Vec<SongRef> = Vec::new();
    for _ in 0..cfg.n_rollouts {
        let t = sample_internal(internal, &ctx, &env.space, rng, cfg.n_songs)?;
        let mut rels = Vec::with_capacity(t.response.music.len());
        for s in &t.response.music {
            let resolved = env.catalog().lookup(&s.song_name, &s.singer_name);
            let r = relevance(&ctx.history, s, resolved, &t.response.text, &env.weights)?.score;
            best = best.max(r);
            if resolved.is_some() && r >= cfg.threshold && !good.contains(s) && good.len() < cfg.n_songs {
                good.push(s.clone());
            }
            rels.push(r);
        }
        rollout_relevances.push(rels);
    }
    let label = if best >= cfg.threshold { BoundaryKind::PosInternal } else { BoundaryKind::NegInternal };
    let replacement = match label {
        BoundaryKind::PosInternal => None,
        BoundaryKind::NegInternal => {
            let t = sample_agentic(agentic, &ctx, env.catalog(), rng, cfg.n_songs, &env.tools)?;
            Some(AgentTrace { tool_calls: t.tool_calls, response: t.response })
        }
    };
    Ok(BoundaryLabel {
        query_id: query.query_id.0,
        user_id: user.user_id,
        label,
        best_relevance: best,
        threshold: cfg.threshold,
        rollout_relevances,
        internal_songs: if label == BoundaryKind::PosInternal { good } else { Vec::new() },
        replacement,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryTurn {
    pub query_id: u32,
    pub user_id: UserId,
    pub label: BoundaryKind,
    pub target_mode: Mode,
    pub songs: Vec<SongRef>,
    pub trace: Option<AgentTrace>,
}

impl From<&BoundaryLabel> for BoundaryTurn {
    fn from(l: &BoundaryLabel) -> Self {
        let songs = match &l.replacement {
            Some(r) => r.response.music.clone(),
            None => l.internal_songs.clone(),
        };
        BoundaryTurn {
            query_id: l.query_id,
            user_id: l.user_id,
            label: l.label,
            target_mode: l.target_mode(),
            songs,
            trace: l.replacement.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub stage: u8,
    pub dialogue_id: u32,
    pub turns: Vec<BoundaryTurn>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleTurnSample {
    pub stage: u8,
    pub dialogue_id: u32,
    pub turn_index: usize,
    pub turn: BoundaryTurn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub min_turns: usize,
    pub max_turns: usize,
    pub stage1_size: usize,
    pub stage2_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { seed: 0, min_turns: 5, max_turns: 10, stage1_size: 2000, stage2_size: 400 }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_turns == 0 || self.min_turns > self.max_turns {
            return Err(invalid_config("dataset turns must satisfy 1 <= min_turns <= max_turns"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoundaryDataset {
    pub stage1: Vec<SingleTurnSample>,
    pub stage2: Vec<Dialogue>,
}

/// Chunks shuffled labels into dialogues, then draws single turns from them
/// stratified by label.
pub fn build_boundary_dataset(labels: &[BoundaryLabel], cfg: &DatasetConfig) -> Result<BoundaryDataset> {
    use rand::Rng as _;
    cfg.validate()?;
    if labels.is_empty() {
        return Err(invalid_input("no boundary labels"));
    }
    let mut rng = crate::rng::stream(cfg.seed, "dialogues", 0);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut rng);
    let mut dialogues: Vec<Vec<usize>> = Vec::new();
    let mut pos = 0;
    while pos < order.len() && dialogues.len() < cfg.stage2_size {
        let len = rng.random_range(cfg.min_turns..=cfg.max_turns);
        let end = (pos + len).min(order.len());
        let chunk = order[pos..end].to_vec();
        pos = end;
        if chunk.len() < cfg.min_turns {
            match dialogues.last_mut() {
                Some(last) if last.len() + chunk.len() <= cfg.max_turns => last.extend(chunk),
                _ => {}
            }
            break;
        }
        dialogues.push(chunk);
    }
    let stage2: Vec<Dialogue> = dialogues
        .iter()
        .enumerate()
        .map(|(d, idx)| Dialogue {
            stage: 2,
            dialogue_id: d as u32,
            turns: idx.iter().map(|&i| BoundaryTurn::from(&labels[i])).collect(),
        })
        .collect();

    let mut strata: Vec<Vec<(u32, usize)>> = vec![Vec::new(), Vec::new()];
    for d in &stage2 {
        for (t, turn) in d.turns.iter().enumerate() {
            strata[usize::from(turn.label == BoundaryKind::NegInternal)].push((d.dialogue_id, t));
        }
    }
    let total: usize = strata.iter().map(|s| s.len()).sum();
    let want = cfg.stage1_size.min(total);
    let weights: Vec<f64> = strata.iter().map(|s| s.len() as f64 / total.max(1) as f64).collect();
    let counts = apportion(want, &weights);
    let mut picked: Vec<(u32, usize)> = Vec::with_capacity(want);
    for (s, n) in strata.iter_mut().zip(counts) {
        s.shuffle(&mut rng);
        picked.extend(s.iter().take(n.min(s.len())));
    }
    picked.sort();
    let stage1 = picked
        .into_iter()
        .map(|(d, t)| SingleTurnSample {
            stage: 1,
            dialogue_id: d,
            turn_index: t,
            turn: stage2[d as usize].turns[t].clone(),
        })
        .collect();
    Ok(BoundaryDataset { stage1, stage2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::WorldConfig;
    use crate::rng::stream;

    fn songs(names: &[&str]) -> Vec<SongRef> {
        names.iter().map(|n| SongRef::new(*n, "a")).collect()
    }

    #[test]
    fn accumulation_hand_cases() {
        let (s, r, c) = accumulate_rounds(5, 3, |_| Ok(Some(songs(&["a", "b", "c", "d", "e"])))).unwrap();
        assert_eq!((s.len(), r, c), (5, 1, true));

        let script = [songs(&["a", "b", "c"]), songs(&["a", "d"]), songs(&["e", "b"])];
        let (s, r, c) = accumulate_rounds(5, 3, |i| Ok(Some(script[i].clone()))).unwrap();
        assert_eq!((s.len(), r, c), (5, 3, true));

        let script = [songs(&["a", "b"]), songs(&["a", "c"]), songs(&["d"]), songs(&["e"])];
        let (s, r, c) = accumulate_rounds(5, 3, |i| Ok(Some(script[i].clone()))).unwrap();
        assert_eq!((s.len(), r, c), (4, 3, false));
    }

    fn label(id: u32, kind: BoundaryKind) -> BoundaryLabel {
        BoundaryLabel {
            query_id: id,
            user_id: UserId(0),
            label: kind,
            best_relevance: if kind == BoundaryKind::PosInternal { 0.75 } else { 0.3 },
            threshold: 0.6,
            rollout_relevances: vec![],
            internal_songs: vec![],
            replacement: None,
        }
    }

    #[test]
    fn dataset_partition_and_membership() {
        let labels: Vec<_> = (0..10).map(|i| label(i, BoundaryKind::PosInternal)).collect();
        let cfg = DatasetConfig { min_turns: 5, max_turns: 5, ..Default::default() };
        let ds = build_boundary_dataset(&labels, &cfg).unwrap();
        assert_eq!(ds.stage2.len(), 2);

        let labels: Vec<_> = (0..300)
            .map(|i| label(i, if i % 3 == 0 { BoundaryKind::NegInternal } else { BoundaryKind::PosInternal }))
            .collect();
        let cfg = DatasetConfig { stage1_size: 100, ..Default::default() };
        let ds = build_boundary_dataset(&labels, &cfg).unwrap();
        assert!(ds.stage2.iter().all(|d| (5..=10).contains(&d.turns.len())));
        for s in &ds.stage1 {
            let hits = ds
                .stage2
                .iter()
                .filter(|d| d.turns.iter().any(|t| t.query_id == s.turn.query_id))
                .count();
            assert_eq!(hits, 1);
            assert_eq!(ds.stage2[s.dialogue_id as usize].turns[s.turn_index], s.turn);
        }
        let neg2 = ds.stage2.iter().flat_map(|d| &d.turns).filter(|t| t.label == BoundaryKind::NegInternal).count();
        let n2 = ds.stage2.iter().map(|d| d.turns.len()).sum::<usize>();
        let neg1 = ds.stage1.iter().filter(|s| s.turn.label == BoundaryKind::NegInternal).count();
        let expect = neg2 as f64 / n2 as f64 * ds.stage1.len() as f64;
        assert!((neg1 as f64 - expect).abs() <= 1.0);
        assert!(build_boundary_dataset(&[], &cfg).is_err());
    }

    fn small_env() -> Env {
        let wc = WorldConfig { n_train_queries: 50, n_eval_queries: 20, n_probe_queries: 10, ..Default::default() };
        Env::generate(11, &wc).unwrap()
    }

    #[test]
    fn selfdistill_invariants_and_multiturn() {
        let env = small_env();
        let p = PolicyParams::initial_for(&env.space);
        let cfg = DistillConfig::default();
        for q in env.world.train_queries.iter().take(20) {
            let ctx = QueryContext::single(&env.space, q, env.world.user(q));
            let mut rng = stream(1, "d", u64::from(q.query_id.0));
            let s = selfdistill(&p, &ctx, &env, &mut rng, &cfg).unwrap();
            let set: BTreeSet<_> = s.songs.iter().collect();
            assert_eq!(set.len(), s.songs.len());
            assert!(s.rounds_used <= 3);
            assert_eq!(s.complete, s.songs.len() >= 5);
        }
        let dialogue: Vec<&BenchQuery> = env.world.train_queries.iter().filter(|q| !q.ood).take(3).collect();
        let mut rng = stream(2, "d", 0);
        let turns = selfdistill_multiturn(&p, &dialogue, &env, &mut rng, &cfg).unwrap();
        assert_eq!(turns[1].history.prior_turns()[0].songs, turns[0].songs);
        let mut rng = stream(2, "d", 0);
        assert_eq!(selfdistill_multiturn(&p, &dialogue, &env, &mut rng, &cfg).unwrap(), turns);
        let mut rng_a = stream(3, "d", 0);
        let mut rng_b = stream(3, "d", 0);
        let one = selfdistill_multiturn(&p, &dialogue[..1], &env, &mut rng_a, &cfg).unwrap();
        let ctx = QueryContext::single(&env.space, dialogue[0], env.world.user(dialogue[0]));
        assert_eq!(one[0], selfdistill(&p, &ctx, &env, &mut rng_b, &cfg).unwrap());
    }

    #[test]
    fn classify_ood_is_negative_with_grounded_replacement() {
        let env = small_env();
        let p = PolicyParams::initial_for(&env.space);
        let cfg = BoundaryLabelConfig::default();
        for q in env.world.train_queries.iter().filter(|q| q.ood).take(10) {
            let mut rng = stream(4, "c", u64::from(q.query_id.0));
            let l = classify_boundary(&p, &p, q, &env, &mut rng, &cfg).unwrap();
            assert_eq!(l.label, BoundaryKind::NegInternal);
            let r = l.replacement.as_ref().unwrap();
            for s in &r.response.music {
                assert!(env.catalog().lookup(&s.song_name, &s.singer_name).is_some());
            }
            let best = l.rollout_relevances.iter().flatten().cloned().fold(0.0, f64::max);
            assert_eq!(best, l.best_relevance);
        }
    }

    #[test]
    fn classify_greedy_on_constraints_is_positive() {
        let env = small_env();
        let mut p = PolicyParams::initial_for(&env.space);
        p.scorer_weights = vec![10.0, 10.0, 0.0, 0.0, 10.0];
        let cfg = BoundaryLabelConfig::default();
        let q = env.world.train_queries.iter().find(|q| !q.ood).unwrap();
        assert!(env.catalog().in_corpus().any(|s| s.attributes.satisfies_all(&q.constraints)));
        let mut rng = stream(5, "c", 0);
        let l = classify_boundary(&p, &p, q, &env, &mut rng, &cfg).unwrap();
        assert_eq!(l.label, BoundaryKind::PosInternal);
        assert!(l.replacement.is_none());
    }
}
