//! The acceptance experiments. `run_repro` executes the stage pipeline into
//! `<out>/repro/pipeline`, evaluates every selected criterion against those
//! artifacts plus a few extra runs and independent oracles, and writes
//! `summary.json`, `summary.txt` and a manifest covering the whole tree.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bench::{diversity_single, evaluate};
use crate::boundary::{controllable_rl, window_change};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::grpo::{group_advantages, policy_update, surrogate, surrogate_and_grad, train, ScoredGroup, TrainState, DEFAULT_EPSILON};
use crate::pipeline::{self, Manifest, Stage};
use crate::policy::{Decision, FeatureMatrix, Mode, ModeControl, PolicyParams, Trajectory, TrajectoryFlags};
use crate::rewards::{
    hybrid_agentic, hybrid_list, hybrid_single, norm_group, relevance, repetition_multipliers, History, RelevanceWeights,
    RewardBreakdown, RewardKind, RolloutGroup, SongScore,
};
use crate::rng::{stream, Rng};
use crate::template::{Intention, SongRef, StructuredResponse};
use crate::world::{gen_catalog, Constraint, Dim, Song};

pub const ORACLE_TOLERANCE: f64 = 1e-12;
pub const ALPHA_RATIO_MIN: f64 = 1.5;
pub const SOFT_OVER_NTP_MIN: f64 = 0.03;
pub const SPEARMAN_MUSIC_MAX: f64 = -0.9;
pub const SPEARMAN_GENERAL_MIN: f64 = 0.7;
pub const REVERSAL_GAIN_MIN: f64 = 0.10;
pub const REVERSAL_DROP_MAX: f64 = 0.02;
pub const BOUNDARY_ACCURACY_MIN: f64 = 0.90;
pub const STAGE_DEGRADATION_MAX: f64 = 0.05;
pub const TOOL_RATE_DROP_MIN: f64 = 0.30;
pub const REWARD_GAIN_MIN: f64 = 0.10;
pub const M1_HIT_MIN: f64 = 0.8;
pub const M1_FACTUALITY_MIN: f64 = 0.99;
pub const FD_RELATIVE_MAX: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub metrics: BTreeMap<String, f64>,
}

impl CriterionResult {
    fn new(id: u8, name: &str, passed: bool, detail: String, metrics: &[(&str, f64)]) -> Self {
        CriterionResult {
            id,
            name: name.to_string(),
            passed,
            detail,
            metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    pub fn metric(&self, key: &str) -> f64 {
        self.metrics.get(key).copied().unwrap_or(f64::NAN)
    }

    pub fn line(&self) -> String {
        format!("criterion {:>2} {} {}: {}", self.id, if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Clone, Debug)]
pub struct ReproRun {
    pub results: Vec<CriterionResult>,
    pub manifest: Manifest,
}

impl ReproRun {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn get(&self, id: u8) -> Option<&CriterionResult> {
        self.results.iter().find(|r| r.id == id)
    }
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() { f64::NAN } else { crate::cptlab::median(xs) }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

// ----------------------------------------------------------------------------
// Criterion 1: reward formulas against a brute-force evaluator.

mod oracle {
    use super::*;

    pub fn minmax(values: &[f64]) -> Vec<f64> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in values {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        if hi == lo {
            return values.iter().map(|_| 0.5).collect();
        }
        values.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    }

    /// Rank of sample `i` among samples sharing its first song, counted as
    /// one plus the number that sort strictly ahead of it.
    pub fn rank(bs: &[RewardBreakdown], i: usize) -> usize {
        let me = &bs[i].per_song[0];
        let key = |s: &SongScore| s.factuality as f64 * s.relevance;
        let mut ahead = 0;
        for (j, b) in bs.iter().enumerate() {
            if j == i || b.per_song.is_empty() || b.per_song[0].song != me.song {
                continue;
            }
            let kj = key(&b.per_song[0]);
            if kj > key(me) || (kj == key(me) && j < i) {
                ahead += 1;
            }
        }
        ahead + 1
    }

    pub fn repetition(bs: &[RewardBreakdown], alpha: f64) -> Vec<f64> {
        (0..bs.len())
            .map(|i| if bs[i].per_song.is_empty() { 0.0 } else { alpha * (rank(bs, i) as f64 - 1.0) })
            .collect()
    }

    pub fn single(bs: &[RewardBreakdown], alpha: f64) -> Vec<f64> {
        let idx: Vec<usize> = (0..bs.len()).filter(|&i| !bs[i].per_song.is_empty()).collect();
        let nr = minmax(&idx.iter().map(|&i| bs[i].per_song[0].relevance).collect::<Vec<_>>());
        let np = minmax(&idx.iter().map(|&i| bs[i].per_song[0].personalization).collect::<Vec<_>>());
        let rep = repetition(bs, alpha);
        let mut out = Vec::new();
        for (i, b) in bs.iter().enumerate() {
            let mut total = b.format;
            if let Some(k) = idx.iter().position(|&x| x == i) {
                let gate = if b.format > 0.0 { 1.0 } else { 0.0 };
                total += (1.0 - rep[i]) * gate * b.per_song[0].factuality as f64 * (nr[k] + np[k]);
            }
            out.push(total);
        }
        out
    }

    pub fn list(bs: &[RewardBreakdown], n_max: usize) -> Vec<f64> {
        let kept: Vec<Vec<&SongScore>> = bs.iter().map(|b| b.per_song.iter().take(n_max).collect()).collect();
        let mut rel = Vec::new();
        let mut pers = Vec::new();
        for songs in &kept {
            for s in songs {
                rel.push(s.relevance);
                pers.push(s.personalization);
            }
        }
        let (nr, np) = (minmax(&rel), minmax(&pers));
        let mut cursor = 0;
        let mut out = Vec::new();
        for (b, songs) in bs.iter().zip(&kept) {
            let mut sum = 0.0;
            for s in songs {
                let gate = if b.format > 0.0 { 1.0 } else { 0.0 };
                sum += gate * s.factuality as f64 * (nr[cursor] + np[cursor]);
                cursor += 1;
            }
            out.push(b.format + songs.len() as f64 / n_max as f64 * sum);
        }
        out
    }

    pub fn agentic(bs: &[RewardBreakdown], modes: &[Mode], n_max: usize, gamma: f64) -> Vec<f64> {
        list(bs, n_max)
            .into_iter()
            .zip(modes)
            .map(|(t, m)| if *m == Mode::Agentic { gamma * t } else { t })
            .collect()
    }

    pub fn agent_zero(bs: &[RewardBreakdown], n_max: usize) -> Vec<f64> {
        list(bs, n_max)
            .into_iter()
            .zip(bs)
            .map(|(t, b)| {
                let mut seen: Vec<&SongRef> = Vec::new();
                for s in b.per_song.iter().take(n_max) {
                    if s.factuality == 1 && !seen.contains(&&s.song) {
                        seen.push(&s.song);
                    }
                }
                t + seen.len() as f64 / n_max as f64
            })
            .collect()
    }

    fn words(s: &str) -> Vec<String> {
        s.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(|w| w.to_lowercase()).collect()
    }

    pub fn relevance(needs: &[Constraint], song: &SongRef, resolved: Option<&Song>, text: &str, l: [f64; 3]) -> [f64; 4] {
        let s1 = match resolved {
            None => 0.0,
            Some(_) if needs.is_empty() => 1.0,
            Some(s) => {
                needs.iter().filter(|c| s.attributes.0[c.dim.index()] == c.value).count() as f64 / needs.len() as f64
            }
        };
        let tw = words(text);
        let s2 = if needs.is_empty() {
            0.0
        } else {
            let hits = needs
                .iter()
                .filter(|c| {
                    let kw = words(c.value_name());
                    !kw.is_empty() && tw.windows(kw.len()).any(|w| w == kw.as_slice())
                })
                .count();
            hits as f64 / needs.len() as f64
        };
        let low = text.to_lowercase();
        let names = [&song.song_name, &song.singer_name];
        let s3 = if names.iter().any(|n| !n.is_empty() && low.contains(&n.to_lowercase())) {
            1.0
        } else if text.chars().any(|c| !c.is_whitespace()) {
            0.5
        } else {
            0.0
        };
        [s1, s2, s3, l[0] * s1 + l[1] * s2 + l[2] * s3]
    }
}

fn quantized(rng: &mut Rng) -> f64 {
    // Coarse grid half the time so ties are common.
    if rng.random_bool(0.5) {
        f64::from(rng.random_range(0..5u8)) / 4.0
    } else {
        rng.random::<f64>()
    }
}

fn random_score(rng: &mut Rng, pool: &[SongRef]) -> SongScore {
    SongScore {
        song: pool.choose(rng).expect("pool").clone(),
        factuality: u8::from(rng.random_bool(0.8)),
        s1: 0.0,
        s2: 0.0,
        s3: 0.0,
        relevance: quantized(rng),
        personalization: quantized(rng),
        normed_relevance: 0.0,
        normed_personalization: 0.0,
    }
}

fn random_breakdown(rng: &mut Rng, pool: &[SongRef], max_songs: usize) -> RewardBreakdown {
    let n = rng.random_range(0..=max_songs);
    RewardBreakdown {
        format: *[0.0, 0.5, 1.0, 1.0].choose(rng).expect("nonempty"),
        per_song: (0..n).map(|_| random_score(rng, pool)).collect(),
        repetition_multiplier: 0.0,
        overflow: false,
        total: 0.0,
    }
}

fn song_pool(n: usize) -> Vec<SongRef> {
    (0..n).map(|i| SongRef::new(format!("song {i}"), format!("artist {}", i % 3))).collect()
}

fn max_err(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_text(rng: &mut Rng, needs: &[Constraint], song: &Song) -> String {
    if rng.random_bool(0.08) {
        return if rng.random_bool(0.5) { String::new() } else { "  \t ".into() };
    }
    let mut parts: Vec<String> = Vec::new();
    for c in needs {
        match rng.random_range(0..4) {
            0 => parts.push(c.value_name().to_string()),
            1 => parts.push(c.value_name().to_uppercase()),
            2 => {
                let v = c.value_name();
                parts.push(v[..v.len().div_ceil(2)].to_string());
            }
            _ => {}
        }
    }
    let d = *Dim::ALL.choose(rng).expect("dims");
    parts.push(d.alphabet().choose(rng).expect("values").to_string());
    if rng.random_bool(0.4) {
        parts.push(song.title.clone());
    }
    if rng.random_bool(0.3) {
        parts.push(song.artist.to_lowercase());
    }
    for f in ["a", "nice", "pick,", "for", "you!", "--"] {
        if rng.random_bool(0.3) {
            parts.push(f.to_string());
        }
    }
    use rand::seq::SliceRandom;
    parts.shuffle(rng);
    parts.join(if rng.random_bool(0.5) { " " } else { ", " })
}

pub fn criterion_reward_oracle(seed: u64, groups: usize) -> Result<CriterionResult> {
    let pool = song_pool(4);
    let mut errs: BTreeMap<&str, f64> = BTreeMap::new();
    let mut bump = |k: &'static str, e: f64| {
        let m = errs.entry(k).or_insert(0.0);
        *m = m.max(e);
    };
    for g in 0..groups as u64 {
        let mut rng = stream(seed, "oracle-rewards", g);
        let size = rng.random_range(1..=10);
        let alpha = *[0.0, 0.1, 0.25].choose(&mut rng).expect("alpha");
        let n_max = rng.random_range(1..=6);
        let gamma = *[0.8, 1.0, 0.35].choose(&mut rng).expect("gamma");
        let single: Vec<RewardBreakdown> = (0..size).map(|_| random_breakdown(&mut rng, &pool, 1)).collect();
        let list: Vec<RewardBreakdown> = (0..size).map(|_| random_breakdown(&mut rng, &pool, 8)).collect();
        let modes: Vec<Mode> = (0..size).map(|_| if rng.random_bool(0.5) { Mode::Agentic } else { Mode::Internal }).collect();
        let values: Vec<f64> = (0..size).map(|_| quantized(&mut rng)).collect();

        bump("norm_group", max_err(&norm_group(&values), &oracle::minmax(&values)));
        bump("repetition_multipliers", max_err(&repetition_multipliers(&single, alpha), &oracle::repetition(&single, alpha)));
        bump("hybrid_single", max_err(&hybrid_single(&mut single.clone(), alpha), &oracle::single(&single, alpha)));
        bump("hybrid_list", max_err(&hybrid_list(&mut list.clone(), n_max), &oracle::list(&list, n_max)));
        let lt = hybrid_list(&mut list.clone(), n_max);
        bump("hybrid_agentic", max_err(&hybrid_agentic(&lt, &modes, gamma)?, &oracle::agentic(&list, &modes, n_max, gamma)));
        let az = RewardKind::AgentZero { n_max }.apply(&mut list.clone(), &modes)?;
        bump("agent_zero", max_err(&az, &oracle::agent_zero(&list, n_max)));
    }
    let catalog = gen_catalog(seed, 120, 0.8)?;
    for g in 0..groups as u64 {
        let mut rng = stream(seed, "oracle-relevance", g);
        let song = catalog.songs().choose(&mut rng).expect("songs").clone();
        let mut dims = Dim::ALL.to_vec();
        use rand::seq::SliceRandom;
        dims.shuffle(&mut rng);
        let needs: Vec<Constraint> = dims[..rng.random_range(0..=3)]
            .iter()
            .map(|&d| {
                // Half the time the song's own value, so matches are common.
                let value = if rng.random_bool(0.5) { song.attributes.0[d.index()] } else { rng.random_range(0..d.alphabet().len() as u8) };
                Constraint { dim: d, value }
            })
            .collect();
        let (sref, resolved) = if rng.random_bool(0.8) {
            (SongRef::new(song.title.clone(), song.artist.clone()), Some(&song))
        } else {
            (SongRef::new("Made Up", "Nobody"), None)
        };
        let text = random_text(&mut rng, &needs, &song);
        let mut cut = [rng.random::<f64>(), rng.random::<f64>()];
        cut.sort_by(f64::total_cmp);
        let l = [cut[0], cut[1] - cut[0], 1.0 - cut[1]];
        let w = RelevanceWeights { need_fit: l[0], text_need: l[1], text_entity: l[2] };
        let r = relevance(&History::single(needs.clone()), &sref, resolved, &text, &w)?;
        let o = oracle::relevance(&needs, &sref, resolved, &text, l);
        bump("relevance", max_err(&[r.s1, r.s2, r.s3, r.score], &o));
    }
    let worst = errs.values().cloned().fold(0.0, f64::max);
    let detail = errs.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    let mut metrics: Vec<(&str, f64)> = errs.iter().map(|(k, v)| (*k, *v)).collect();
    metrics.push(("max_abs_error", worst));
    metrics.push(("groups", groups as f64));
    Ok(CriterionResult::new(
        1,
        "reward formulas match brute-force oracle",
        worst <= ORACLE_TOLERANCE && groups >= 1000,
        format!("{groups} groups, max error {worst:.1e} ({detail})"),
        &metrics,
    ))
}

// ----------------------------------------------------------------------------
// Criterion 2: diversity against pair enumeration.

fn diversity_oracle(samples: &[RewardBreakdown]) -> f64 {
    let valid = |b: &RewardBreakdown| match b.per_song.first() {
        Some(s) => b.format == 1.0 && s.factuality == 1 && s.relevance > 0.6,
        None => false,
    };
    let mut pairs = 0usize;
    let mut hits = 0usize;
    for (p, a) in samples.iter().enumerate() {
        for (q, b) in samples.iter().enumerate() {
            if q <= p {
                continue;
            }
            pairs += 1;
            if valid(a) && valid(b) && a.per_song[0].song != b.per_song[0].song {
                hits += 1;
            }
        }
    }
    hits as f64 / pairs as f64
}

fn hand_sample(song: &str, valid: bool) -> RewardBreakdown {
    RewardBreakdown {
        format: 1.0,
        per_song: vec![SongScore {
            song: SongRef::new(song, "someone"),
            factuality: 1,
            s1: 0.0,
            s2: 0.0,
            s3: 0.0,
            relevance: if valid { 0.9 } else { 0.3 },
            personalization: 0.5,
            normed_relevance: 0.0,
            normed_personalization: 0.0,
        }],
        repetition_multiplier: 0.0,
        overflow: false,
        total: 0.0,
    }
}

pub fn criterion_diversity_oracle(seed: u64, histories: usize) -> Result<CriterionResult> {
    let pool = song_pool(5);
    let mut mismatches = 0usize;
    for h in 0..histories as u64 {
        let mut rng = stream(seed, "oracle-diversity", h);
        let k = rng.random_range(2..=9);
        let samples: Vec<RewardBreakdown> = (0..k)
            .map(|_| {
                let mut b = random_breakdown(&mut rng, &pool, 1);
                for s in &mut b.per_song {
                    s.relevance = *[0.3, 0.6, 0.6000001, 0.75, 0.9, 1.0].choose(&mut rng).expect("grid");
                }
                b
            })
            .collect();
        if diversity_single(&samples)? != diversity_oracle(&samples) {
            mismatches += 1;
        }
    }
    let distinct: Vec<_> = (0..5).map(|i| hand_sample(&format!("s{i}"), true)).collect();
    let same: Vec<_> = (0..5).map(|_| hand_sample("s0", true)).collect();
    let mixed: Vec<_> = (0..5).map(|i| hand_sample(&format!("s{i}"), i < 3)).collect();
    let hand = [diversity_single(&distinct)?, diversity_single(&same)?, diversity_single(&mixed)?];
    let hand_ok = hand[0] == 1.0 && hand[1] == 0.0 && (hand[2] - 0.3).abs() < 1e-15;
    Ok(CriterionResult::new(
        2,
        "diversity matches pair enumeration",
        mismatches == 0 && hand_ok && histories >= 500,
        format!("{mismatches} mismatches over {histories} histories; hand cases {hand:?}"),
        &[
            ("mismatches", mismatches as f64),
            ("histories", histories as f64),
            ("hand_distinct", hand[0]),
            ("hand_identical", hand[1]),
            ("hand_mixed", hand[2]),
        ],
    ))
}

// ----------------------------------------------------------------------------
// Criterion 3: repetition-penalty ablation.

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AlphaRow {
    seed: u64,
    alpha: f64,
    diversity_single: f64,
    hit_at_5: f64,
}

fn criterion_alpha(cfg: &ExperimentConfig, root: &Path, dir: &Path) -> Result<CriterionResult> {
    use rayon::prelude::*;
    let env = pipeline::load_env(root, cfg)?;
    let runs: Vec<(u64, f64)> = (0..cfg.repro.alpha_seeds as u64)
        .flat_map(|i| [(cfg.master_seed.wrapping_add(i), cfg.reward.alpha), (cfg.master_seed.wrapping_add(i), 0.0)])
        .collect();
    let rows: Vec<AlphaRow> = runs
        .par_iter()
        .map(|&(seed, alpha)| {
            let tc = crate::grpo::TrainConfig { seed, ..cfg.base_train() };
            let init = TrainState::new(PolicyParams::initial_for(&env.space), tc.learning_rate, tc.clip_range);
            let st = train(&tc, &env, RewardKind::HybridSingle { alpha }, ModeControl::AllInternal, cfg.repro.alpha_steps, init)?;
            let bc = crate::bench::BenchConfig { seed, ..cfg.bench_config(ModeControl::AllInternal) };
            let rep = evaluate(&st.params, &env.world.eval_queries, &env, &bc)?;
            Ok(AlphaRow { seed, alpha, diversity_single: rep.overall.diversity_single, hit_at_5: rep.overall.hit_at_5 })
        })
        .collect::<Result<_>>()?;
    let mut w = csv::Writer::from_path(dir.join("alpha_ablation.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let with: Vec<f64> = rows.iter().step_by(2).map(|r| r.diversity_single).collect();
    let without: Vec<f64> = rows.iter().skip(1).step_by(2).map(|r| r.diversity_single).collect();
    let ratios: Vec<f64> = with.iter().zip(&without).map(|(a, b)| if *b > 0.0 { a / b } else { f64::INFINITY }).collect();
    let ratio = median(&ratios);
    Ok(CriterionResult::new(
        3,
        "repetition penalty raises diversity",
        ratio >= ALPHA_RATIO_MIN,
        format!(
            "median per-seed ratio {ratio:.3} (alpha={} median {:.3}, alpha=0 median {:.3}), need >= {ALPHA_RATIO_MIN}",
            cfg.reward.alpha,
            median(&with),
            median(&without)
        ),
        &[("median_ratio", ratio), ("median_div_alpha", median(&with)), ("median_div_zero", median(&without))],
    ))
}

// ----------------------------------------------------------------------------
// Criteria 4-7: continual-pretraining lab.

fn cpt_criteria(s: &pipeline::CptlabSummary) -> Vec<CriterionResult> {
    let acc = |k: &str| median(s.probe_accuracy.get(k).map(Vec::as_slice).unwrap_or(&[]));
    let (ntp, hard, soft) = (acc("ntp"), acc("hard_filter"), acc("soft_score"));
    let c4 = CriterionResult::new(
        4,
        "soft scoring beats filtering and plain ntp",
        soft >= hard && hard >= ntp && soft - ntp >= SOFT_OVER_NTP_MIN,
        format!("median probe accuracy soft {soft:.3} >= hard {hard:.3} >= ntp {ntp:.3}, gap {:.3}", soft - ntp),
        &[("median_ntp", ntp), ("median_hard", hard), ("median_soft", soft)],
    );
    let lower = s.general_loss_kl.iter().zip(&s.general_loss_plain).filter(|(k, p)| k < p).count();
    let n = s.general_loss_plain.len();
    let c5 = CriterionResult::new(
        5,
        "BRM KL preserves general loss",
        n > 0 && lower == n,
        format!("kl lower on {lower}/{n} seeds (mean {:.4} vs {:.4})", mean(&s.general_loss_kl), mean(&s.general_loss_plain)),
        &[("seeds_lower", lower as f64), ("seeds", n as f64)],
    );
    let (sm, sg) = (mean(&s.spearman_music), mean(&s.spearman_general));
    let c6 = CriterionResult::new(
        6,
        "mixture ratio trade-off",
        sm <= SPEARMAN_MUSIC_MAX && sg >= SPEARMAN_GENERAL_MIN,
        format!("mean Spearman music {sm:.3} (<= {SPEARMAN_MUSIC_MAX}), general {sg:.3} (>= {SPEARMAN_GENERAL_MIN})"),
        &[("mean_spearman_music", sm), ("mean_spearman_general", sg)],
    );
    let d2s = |r: &[crate::cptlab::ReversalRun]| median(&r.iter().map(|x| x.desc_to_song).collect::<Vec<_>>());
    let s2d = |r: &[crate::cptlab::ReversalRun]| median(&r.iter().map(|x| x.song_to_desc).collect::<Vec<_>>());
    let gain = d2s(&s.reversal_augmented) - d2s(&s.reversal_forward_only);
    let drop = s2d(&s.reversal_forward_only) - s2d(&s.reversal_augmented);
    let c7 = CriterionResult::new(
        7,
        "bidirectional augmentation fixes reversal",
        gain >= REVERSAL_GAIN_MIN && drop <= REVERSAL_DROP_MAX,
        format!("desc->song gain {gain:.3} (>= {REVERSAL_GAIN_MIN}), song->desc drop {drop:.3} (<= {REVERSAL_DROP_MAX})"),
        &[("median_desc_gain", gain), ("median_song_drop", drop)],
    );
    vec![c4, c5, c6, c7]
}

// ----------------------------------------------------------------------------
// Criteria 8-11: boundary pipeline artifacts.

fn criterion_boundary(cfg: &ExperimentConfig, s: &pipeline::BoundarySummary) -> CriterionResult {
    let degradation = s.stage1_accuracy - s.stage2_accuracy;
    let n = cfg.world.n_eval_queries as f64;
    CriterionResult::new(
        8,
        "curriculum SFT boundary accuracy",
        s.stage2_accuracy >= BOUNDARY_ACCURACY_MIN && degradation <= STAGE_DEGRADATION_MAX,
        format!(
            "held-out ({n} queries) accuracy {:.3} after stage 2, {:.3} after stage 1, degradation {degradation:.3}",
            s.stage2_accuracy, s.stage1_accuracy
        ),
        &[
            ("stage2_accuracy", s.stage2_accuracy),
            ("stage1_accuracy", s.stage1_accuracy),
            ("degradation", degradation),
            ("n_heldout", n),
        ],
    )
}

fn criterion_controllable(cfg: &ExperimentConfig, root: &Path, dir: &Path, s: &pipeline::BoundarySummary) -> Result<CriterionResult> {
    let env = pipeline::load_env(root, cfg)?;
    let sft = PolicyParams::load_json(&pipeline::stage_dir(root, Stage::Boundary).join("sft.json"))?;
    let bc = crate::boundary::BoundaryConfig { gamma: 1.0, ..cfg.boundary_config() };
    let (_, control) = controllable_rl(&sft, &bc, &env, bc.controllable_steps)?;
    crate::boundary::write_report_csv(&dir.join("controllable_gamma1.csv"), &control)?;
    let ctool = window_change(&control.tool_rate_curve, pipeline::CURVE_WINDOW).unwrap_or(f64::NAN);
    let creward = window_change(&control.reward_curve, pipeline::CURVE_WINDOW).unwrap_or(f64::NAN);
    let tool = s.controllable_tool_rate_change.unwrap_or(f64::NAN);
    let reward = s.controllable_reward_change.unwrap_or(f64::NAN);
    Ok(CriterionResult::new(
        9,
        "controllable RL lowers tool use and raises reward",
        tool <= -TOOL_RATE_DROP_MIN && reward >= REWARD_GAIN_MIN,
        format!(
            "gamma={}: tool rate {:+.1}% (need <= -{:.0}%), reward {:+.1}% (need >= +{:.0}%); gamma=1 control: tool {:+.1}%, reward {:+.1}%",
            cfg.reward.gamma,
            100.0 * tool,
            100.0 * TOOL_RATE_DROP_MIN,
            100.0 * reward,
            100.0 * REWARD_GAIN_MIN,
            100.0 * ctool,
            100.0 * creward
        ),
        &[("tool_change", tool), ("reward_change", reward), ("control_tool_change", ctool), ("control_reward_change", creward)],
    ))
}

fn criterion_gap(b: &pipeline::BenchSummary) -> CriterionResult {
    let (mo, io) = (b.m1_ood.overall.hit_at_5, b.internal_ood.overall.hit_at_5);
    let (hit, fact) = (b.m1.overall.hit_at_5, b.m1.overall.factuality_rate);
    CriterionResult::new(
        10,
        "agent beats internal-only on ood queries",
        b.m1_ood.overall.n_queries > 0 && mo > io && hit >= M1_HIT_MIN && fact >= M1_FACTUALITY_MIN,
        format!(
            "ood Hit@5 {mo:.3} vs internal {io:.3} ({} queries); full Hit@5 {hit:.3}, factuality {fact:.4}",
            b.m1_ood.overall.n_queries
        ),
        &[
            ("m1_ood_hit", mo),
            ("internal_ood_hit", io),
            ("m1_hit", hit),
            ("m1_factuality", fact),
            ("n_ood", b.m1_ood.overall.n_queries as f64),
        ],
    )
}

fn criterion_distill(cfg: &ExperimentConfig, root: &Path) -> Result<CriterionResult> {
    let all = pipeline::read_listwise(root)?;
    let want = cfg.repro.distill_samples;
    let samples = &all[..want.min(all.len())];
    let k = cfg.reward.k;
    let mut violations = 0usize;
    let mut complete = 0usize;
    let mut max_rounds = 0usize;
    for s in samples {
        let distinct: BTreeSet<&SongRef> = s.songs.iter().collect();
        max_rounds = max_rounds.max(s.rounds_used);
        let dup = distinct.len() != s.songs.len();
        let over = s.rounds_used > cfg.distill.max_rounds || s.rounds_used > 3;
        let short = s.complete && distinct.len() < k;
        if s.complete {
            complete += 1;
        }
        if dup || over || short {
            violations += 1;
        }
    }
    Ok(CriterionResult::new(
        11,
        "self-distillation samples are sound",
        samples.len() >= want && want >= 1000 && violations == 0,
        format!("{} samples ({complete} complete), {violations} violations, max rounds {max_rounds}", samples.len()),
        &[
            ("n_samples", samples.len() as f64),
            ("n_complete", complete as f64),
            ("violations", violations as f64),
            ("max_rounds", max_rounds as f64),
        ],
    ))
}

// ----------------------------------------------------------------------------
// Criterion 12: GRPO numerics.

fn toy_group(rng: &mut Rng, old: &PolicyParams, rewards: &[f64]) -> Result<ScoredGroup> {
    let samples: Vec<Trajectory> = rewards
        .iter()
        .map(|_| {
            let mut decisions = Vec::new();
            let psi_a = Arc::new(vec![1.0, rng.random_range(-1.0..1.0)]);
            let agentic = rng.random_bool(0.5);
            decisions.push(Decision::Mode { psi: psi_a.clone(), agentic });
            if agentic {
                decisions.push(Decision::Tool { psi: psi_a, chosen: rng.random_range(0..3) });
            }
            let rows: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            let pool = Arc::new(FeatureMatrix::from_rows(2, &rows).expect("dim 2"));
            let first = rng.random_range(0..4);
            decisions.push(Decision::Song { pool: pool.clone(), excluded: vec![], chosen: first });
            decisions.push(Decision::Song { pool, excluded: vec![first], chosen: (first + 1 + rng.random_range(0..3)) % 4 });
            let log_probs = decisions.iter().map(|d| d.log_prob(old)).collect::<Vec<_>>();
            let weights = decisions.iter().map(|_| if rng.random_bool(0.2) { 2.0 } else { 1.0 }).collect();
            Trajectory {
                mode: if agentic { Mode::Agentic } else { Mode::Internal },
                tool_calls: Vec::new(),
                response: StructuredResponse { intention: Intention::Chat, music: vec![], text: String::new() },
                decisions,
                log_probs,
                weights,
                flags: TrajectoryFlags::default(),
            }
        })
        .collect();
    Ok(ScoredGroup {
        group: RolloutGroup { history: History::default(), samples, breakdowns: vec![] },
        rewards: rewards.to_vec(),
        advantages: group_advantages(rewards, DEFAULT_EPSILON)?,
    })
}

pub fn criterion_grpo_numerics(seed: u64) -> Result<CriterionResult> {
    let zero = PolicyParams::zeros(2, 2);
    let n = zero.num_params();
    let clip = 0.2;
    let mut worst: f64 = 0.0;
    for inst in 0..20u64 {
        let mut rng = stream(seed, "oracle-grpo", inst);
        let old = zero.with_flat(&(0..n).map(|_| rng.random_range(-0.5..0.5)).collect::<Vec<_>>());
        let groups: Vec<ScoredGroup> = (0..3)
            .map(|_| {
                let rewards: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
                toy_group(&mut rng, &old, &rewards)
            })
            .collect::<Result<_>>()?;
        let theta: Vec<f64> = old.flatten().iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
        let p = old.with_flat(&theta);
        let (_, grad) = surrogate_and_grad(&p, &groups, clip);
        let h = 1e-6;
        let numeric: Vec<f64> = (0..n)
            .map(|i| {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[i] += h;
                dn[i] -= h;
                (surrogate(&old.with_flat(&up), &groups, clip) - surrogate(&old.with_flat(&dn), &groups, clip)) / (2.0 * h)
            })
            .collect();
        let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
        worst = worst.max(max_err(&grad, &numeric) / scale);
    }
    // Constant rewards in every group: the update must be the identity.
    let mut rng = stream(seed, "oracle-grpo-flat", 0);
    let start = zero.with_flat(&(0..n).map(|_| rng.random_range(-0.5..0.5)).collect::<Vec<_>>());
    let flat: Vec<ScoredGroup> = (0..3)
        .map(|g| toy_group(&mut rng, &start, &[0.25 * g as f64; 6]))
        .collect::<Result<_>>()?;
    let next = policy_update(&TrainState::new(start.clone(), 0.05, clip), &flat)?;
    let moved = max_err(&next.params.flatten(), &start.flatten());
    Ok(CriterionResult::new(
        12,
        "GRPO gradient and zero-variance update",
        n == 10 && worst <= FD_RELATIVE_MAX && moved == 0.0,
        format!("{n} params, max relative FD error {worst:.2e} over 20 instances; zero-variance update moved {moved:e}"),
        &[("max_rel_error", worst), ("zero_update_max_abs", moved), ("n_params", n as f64)],
    ))
}

// ----------------------------------------------------------------------------
// Criterion 13: determinism of the stage pipeline.

fn criterion_determinism(cfg: &ExperimentConfig, first: &[Manifest], scratch: &Path) -> Result<CriterionResult> {
    let second = pipeline::run_all(cfg, scratch)?;
    let (mut compared, mut mismatched) = (0usize, Vec::new());
    for (a, b) in first.iter().zip(&second) {
        let (ha, hb) = (a.hashes(), b.hashes());
        for (path, h) in &ha {
            compared += 1;
            if hb.get(path) != Some(h) {
                mismatched.push(format!("{}/{path}", a.stage));
            }
        }
        for path in hb.keys().filter(|p| !ha.contains_key(*p)) {
            mismatched.push(format!("{}/{path}", b.stage));
        }
    }
    std::fs::remove_dir_all(scratch)?;
    Ok(CriterionResult::new(
        13,
        "pipeline reruns are byte-identical",
        mismatched.is_empty() && compared > 0 && first.len() == second.len(),
        if mismatched.is_empty() {
            format!("{compared} artifacts across {} stages hash identically", first.len())
        } else {
            format!("{} of {compared} artifacts differ: {}", mismatched.len(), mismatched.join(", "))
        },
        &[("files_compared", compared as f64), ("mismatched_files", mismatched.len() as f64)],
    ))
}

fn selected(cfg: &ExperimentConfig, id: u8) -> bool {
    cfg.repro.criteria.is_empty() || cfg.repro.criteria.contains(&id)
}

/// Runs the selected criteria; see the module docs for the layout.
pub fn run_repro(cfg: &ExperimentConfig, out_root: &Path) -> Result<ReproRun> {
    cfg.validate()?;
    let dir = pipeline::stage_dir(out_root, Stage::Repro);
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    std::fs::write(dir.join("seed.txt"), format!("{}\n", cfg.master_seed))?;
    let root = dir.join("pipeline");
    std::fs::create_dir_all(&root)?;
    let manifests = pipeline::run_all(cfg, &root)?;
    let mut results = Vec::new();
    let seed = cfg.master_seed;
    let timed = |id: u8, f: &mut dyn FnMut() -> Result<Vec<CriterionResult>>| -> Result<Vec<CriterionResult>> {
        if !selected(cfg, id) {
            return Ok(Vec::new());
        }
        let t = std::time::Instant::now();
        let r = f()?;
        log::info!("criterion {id}: {:.1?}", t.elapsed());
        Ok(r)
    };
    results.extend(timed(1, &mut || Ok(vec![criterion_reward_oracle(seed, cfg.repro.oracle_groups)?]))?);
    results.extend(timed(2, &mut || Ok(vec![criterion_diversity_oracle(seed, cfg.repro.diversity_histories)?]))?);
    results.extend(timed(3, &mut || Ok(vec![criterion_alpha(cfg, &root, &dir)?]))?);
    let cpt = pipeline::read_cptlab_summary(&root)?;
    for r in cpt_criteria(&cpt) {
        if selected(cfg, r.id) {
            results.push(r);
        }
    }
    let bsum = pipeline::read_boundary_summary(&root)?;
    if selected(cfg, 8) {
        results.push(criterion_boundary(cfg, &bsum));
    }
    results.extend(timed(9, &mut || Ok(vec![criterion_controllable(cfg, &root, &dir, &bsum)?]))?);
    if selected(cfg, 10) {
        results.push(criterion_gap(&pipeline::read_bench_summary(&root)?));
    }
    results.extend(timed(11, &mut || Ok(vec![criterion_distill(cfg, &root)?]))?);
    results.extend(timed(12, &mut || Ok(vec![criterion_grpo_numerics(seed)?]))?);
    let scratch = out_root.join("repro.rerun");
    results.extend(timed(13, &mut || Ok(vec![criterion_determinism(cfg, &manifests, &scratch)?]))?);

    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&results)? + "\n")?;
    let text: String = results.iter().map(|r| r.line() + "\n").collect();
    std::fs::write(dir.join("summary.txt"), text)?;
    let manifest = Manifest::build(Stage::Repro.name(), &dir)?;
    manifest.write(&dir)?;
    Ok(ReproRun { results, manifest })
}
