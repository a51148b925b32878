//! Offline evaluation: hit rate, relevance, personalization, factuality,
//! diversity and tool-call rate over a query set.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Env;
use crate::error::{invalid_config, invalid_input, Result};
use crate::policy::{rollout, Mode, ModeControl, PolicyParams, QueryContext};
use crate::rewards::{Judge, RewardBreakdown, SongScore};
use crate::rng::stream;
use crate::template::{parse, SongRef};
use crate::world::{BenchQuery, Catalog};

pub const EFFECTIVE_RELEVANCE: f64 = 0.6;

/// Format-correct, factual and relevance above 0.6.
pub fn is_effective(format: f64, song: &SongScore) -> bool {
    format == 1.0 && song.factuality == 1 && song.relevance > EFFECTIVE_RELEVANCE
}

/// Fraction of the `C(K, 2)` completion pairs that are both effective and
/// recommend different songs. Each breakdown is one single-song completion.
pub fn diversity_single(samples: &[RewardBreakdown]) -> Result<f64> {
    let k = samples.len();
    if k < 2 {
        return Err(invalid_input(format!("diversity needs K >= 2 completions, got {k}")));
    }
    let head: Vec<Option<&SongScore>> = samples
        .iter()
        .map(|b| b.per_song.first().filter(|s| is_effective(b.format, s)))
        .collect();
    let mut count = 0usize;
    for p in 0..k {
        for q in p + 1..k {
            if let (Some(a), Some(b)) = (head[p], head[q]) {
                if a.song != b.song {
                    count += 1;
                }
            }
        }
    }
    Ok(count as f64 / (k * (k - 1) / 2) as f64)
}

/// Distinct effective songs in one list-wise completion.
pub fn diversity_list(sample: &RewardBreakdown) -> usize {
    sample
        .per_song
        .iter()
        .filter(|s| is_effective(sample.format, s))
        .map(|s| &s.song)
        .collect::<BTreeSet<_>>()
        .len()
}

/// 1 iff one of the first `k` factual songs satisfies every constraint.
pub fn hit_at_k(songs: &[SongRef], query: &BenchQuery, catalog: &Catalog, k: usize) -> Result<u8> {
    if k == 0 {
        return Err(invalid_input("k must be >= 1"));
    }
    let hit = songs
        .iter()
        .filter_map(|s| catalog.lookup(&s.song_name, &s.singer_name))
        .take(k)
        .any(|s| s.attributes.satisfies_all(&query.constraints));
    Ok(u8::from(hit))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub seed: u64,
    /// Songs requested in the list-wise completion.
    pub n_songs: usize,
    pub hit_k: usize,
    /// Single-song completions per query for the diversity score.
    pub diversity_k: usize,
    pub diversity_temperature: f64,
    pub mode_control: ModeControl,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seed: 0,
            n_songs: 5,
            hit_k: 5,
            diversity_k: 5,
            diversity_temperature: 1.0,
            mode_control: ModeControl::Free,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_songs == 0 || self.hit_k == 0 {
            return Err(invalid_config("bench.n_songs and bench.hit_k must be >= 1"));
        }
        if self.diversity_k < 2 {
            return Err(invalid_config("bench.diversity_k must be >= 2"));
        }
        if !(self.diversity_temperature > 0.0) {
            return Err(invalid_config("bench.diversity_temperature must be > 0"));
        }
        if self.mode_control == ModeControl::ForcedHalf {
            return Err(invalid_config("bench.mode_control cannot be forced_half"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: u32,
    pub level: u8,
    pub ood: bool,
    pub agentic: bool,
    pub hit_at_k: u8,
    pub avg_relevance: f64,
    pub avg_personalization: f64,
    pub top_personalization: f64,
    pub factuality: f64,
    pub diversity_single: f64,
    pub diversity_list: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_queries: usize,
    pub hit_at_5: f64,
    pub avg_relevance: f64,
    pub avg_personalization: f64,
    pub avg_top_personalization: f64,
    pub factuality_rate: f64,
    pub diversity_single: f64,
    pub diversity_list: f64,
    pub tool_rate: f64,
}

impl Metrics {
    pub fn aggregate<'a>(records: impl IntoIterator<Item = &'a QueryRecord>) -> Metrics {
        let mut m = Metrics::default();
        for r in records {
            m.n_queries += 1;
            m.hit_at_5 += f64::from(r.hit_at_k);
            m.avg_relevance += r.avg_relevance;
            m.avg_personalization += r.avg_personalization;
            m.avg_top_personalization += r.top_personalization;
            m.factuality_rate += r.factuality;
            m.diversity_single += r.diversity_single;
            m.diversity_list += r.diversity_list as f64;
            m.tool_rate += f64::from(r.agentic);
        }
        let n = m.n_queries.max(1) as f64;
        for v in [
            &mut m.hit_at_5,
            &mut m.avg_relevance,
            &mut m.avg_personalization,
            &mut m.avg_top_personalization,
            &mut m.factuality_rate,
            &mut m.diversity_single,
            &mut m.diversity_list,
            &mut m.tool_rate,
        ] {
            *v /= n;
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    #[serde(flatten)]
    pub overall: Metrics,
    pub per_level: BTreeMap<u8, Metrics>,
}

impl BenchReport {
    pub fn from_records(records: &[QueryRecord]) -> BenchReport {
        let mut levels: BTreeMap<u8, Vec<&QueryRecord>> = BTreeMap::new();
        for r in records {
            levels.entry(r.level).or_default().push(r);
        }
        BenchReport {
            overall: Metrics::aggregate(records),
            per_level: levels.into_iter().map(|(l, rs)| (l, Metrics::aggregate(rs))).collect(),
        }
    }

    /// `(metric, x, y)` rows: one per metric and level, x = level.
    pub fn plot_rows(&self) -> Vec<(String, f64, f64)> {
        let mut rows = Vec::new();
        for (level, m) in &self.per_level {
            for (name, v) in m.named() {
                rows.push((name.to_string(), f64::from(*level), v));
            }
        }
        rows
    }
}

impl Metrics {
    pub fn named(&self) -> [(&'static str, f64); 8] {
        [
            ("hit_at_5", self.hit_at_5),
            ("avg_relevance", self.avg_relevance),
            ("avg_personalization", self.avg_personalization),
            ("avg_top_personalization", self.avg_top_personalization),
            ("factuality_rate", self.factuality_rate),
            ("diversity_single", self.diversity_single),
            ("diversity_list", self.diversity_list),
            ("tool_rate", self.tool_rate),
        ]
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores one query: a list-wise completion and `diversity_k` single-song
/// completions, all drawn under `cfg.mode_control`.
pub fn evaluate_query(params: &PolicyParams, query: &BenchQuery, env: &Env, cfg: &BenchConfig) -> Result<QueryRecord> {
    let user = env.world.user(query);
    let ctx = QueryContext::single(&env.space, query, user);
    let judge = Judge { catalog: env.catalog(), user, history: &ctx.history, weights: &env.weights };
    let mut rng = stream(cfg.seed, "bench-list", u64::from(query.query_id.0));
    let main = rollout(params, &ctx, &env.space, env.catalog(), &mut rng, 1, cfg.mode_control, cfg.n_songs, &env.tools)?;
    let t = &main.samples[0];
    let b = judge.score(&parse(&t.wire()))?;

    let mut hot = params.clone();
    hot.temperature = params.temperature * cfg.diversity_temperature;
    let mut rng = stream(cfg.seed, "bench-single", u64::from(query.query_id.0));
    let singles = rollout(&hot, &ctx, &env.space, env.catalog(), &mut rng, cfg.diversity_k, cfg.mode_control, 1, &env.tools)?;
    let single_bd = singles
        .samples
        .iter()
        .map(|s| judge.score(&parse(&s.wire())))
        .collect::<Result<Vec<_>>>()?;

    Ok(QueryRecord {
        query_id: query.query_id.0,
        level: query.level,
        ood: query.ood,
        agentic: t.mode == Mode::Agentic,
        hit_at_k: hit_at_k(&t.response.music, query, env.catalog(), cfg.hit_k)?,
        avg_relevance: mean(b.per_song.iter().map(|s| s.relevance)),
        avg_personalization: mean(b.per_song.iter().map(|s| s.personalization)),
        top_personalization: b.per_song.iter().map(|s| s.personalization).fold(0.0, f64::max),
        factuality: mean(b.per_song.iter().map(|s| f64::from(s.factuality))),
        diversity_single: diversity_single(&single_bd)?,
        diversity_list: diversity_list(&b),
    })
}

pub fn evaluate_records(params: &PolicyParams, queries: &[BenchQuery], env: &Env, cfg: &BenchConfig) -> Result<Vec<QueryRecord>> {
    cfg.validate()?;
    if queries.is_empty() {
        return Err(invalid_input("empty query set"));
    }
    queries.par_iter().map(|q| evaluate_query(params, q, env, cfg)).collect()
}

pub fn evaluate(params: &PolicyParams, queries: &[BenchQuery], env: &Env, cfg: &BenchConfig) -> Result<BenchReport> {
    Ok(BenchReport::from_records(&evaluate_records(params, queries, env, cfg)?))
}

pub fn write_records_csv(path: &Path, records: &[QueryRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<QueryRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

pub fn write_plot_csv(path: &Path, rows: &[(String, f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "x", "y"])?;
    for (m, x, y) in rows {
        w.write_record([m.clone(), x.to_string(), y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::WorldConfig;

    fn s(name: &str, fact: u8, rel: f64) -> SongScore {
        SongScore {
            song: SongRef::new(name, "a"),
            factuality: fact,
            s1: 0.0,
            s2: 0.0,
            s3: 0.0,
            relevance: rel,
            personalization: 0.5,
            normed_relevance: 0.0,
            normed_personalization: 0.0,
        }
    }

    fn bd(songs: Vec<SongScore>) -> RewardBreakdown {
        RewardBreakdown { format: 1.0, per_song: songs, repetition_multiplier: 0.0, overflow: false, total: 0.0 }
    }

    #[test]
    fn diversity_single_hand_cases() {
        let distinct: Vec<_> = (0..5).map(|i| bd(vec![s(&i.to_string(), 1, 0.9)])).collect();
        assert_eq!(diversity_single(&distinct).unwrap(), 1.0);
        let same: Vec<_> = (0..5).map(|_| bd(vec![s("x", 1, 0.9)])).collect();
        assert_eq!(diversity_single(&same).unwrap(), 0.0);
        let mixed = vec![
            bd(vec![s("a", 1, 0.9)]),
            bd(vec![s("b", 1, 0.9)]),
            bd(vec![s("c", 1, 0.9)]),
            bd(vec![s("d", 0, 0.9)]),
            bd(vec![s("e", 1, 0.6)]),
        ];
        assert!((diversity_single(&mixed).unwrap() - 0.3).abs() < 1e-15);
        assert!(diversity_single(&mixed[..1]).is_err());
    }

    #[test]
    fn diversity_list_cases() {
        let five = bd((0..5).map(|i| s(&i.to_string(), 1, 0.9)).collect());
        assert_eq!(diversity_list(&five), 5);
        let messy = bd(vec![s("a", 1, 0.9), s("a", 1, 0.9), s("b", 1, 0.3), s("b", 1, 0.9), s("z", 0, 0.9)]);
        assert_eq!(diversity_list(&messy), 2);
        assert_eq!(diversity_list(&bd(vec![])), 0);
    }

    #[test]
    fn all_internal_on_ood_never_hits_and_reaggregates() {
        let mut wc = WorldConfig::default();
        wc.n_train_queries = 10;
        wc.n_eval_queries = 60;
        wc.n_probe_queries = 10;
        let env = Env::generate(5, &wc).unwrap();
        let ood: Vec<BenchQuery> = env.world.eval_queries.iter().filter(|q| q.ood).cloned().collect();
        let cfg = BenchConfig { mode_control: ModeControl::AllInternal, ..Default::default() };
        let report = evaluate(&PolicyParams::initial(), &ood, &env, &cfg).unwrap();
        assert_eq!(report.overall.hit_at_5, 0.0);

        let records = evaluate_records(&PolicyParams::initial(), &env.world.eval_queries, &env, &BenchConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.csv");
        write_records_csv(&path, &records).unwrap();
        let back = read_records_csv(&path).unwrap();
        let a = BenchReport::from_records(&records);
        let b = BenchReport::from_records(&back);
        for ((_, x), (_, y)) in a.overall.named().iter().zip(b.overall.named().iter()) {
            assert!((x - y).abs() < 1e-9);
        }
        let n = a.overall.n_queries as f64;
        let recombined: f64 = a.per_level.values().map(|m| m.hit_at_5 * m.n_queries as f64).sum::<f64>() / n;
        assert!((recombined - a.overall.hit_at_5).abs() < 1e-9);
        let again = evaluate(&PolicyParams::initial(), &env.world.eval_queries, &env, &BenchConfig::default()).unwrap();
        assert_eq!(a, again);
        assert!(evaluate(&PolicyParams::initial(), &[], &env, &BenchConfig::default()).is_err());
    }
}
