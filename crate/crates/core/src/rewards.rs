//! Reward components and the composite rewards used for optimization.
//!
//! The judge is rule-based: it reads the user's needs off the newest turn's
//! constraint set, scores the emitted entity against the catalog record and
//! scores the response text by keyword and entity mentions. Personalization
//! is a cosine against the listener's preference vector.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Result};
use crate::policy::{Mode, Trajectory};
use crate::template::{Parsed, SongRef};
use crate::world::{Catalog, Constraint, Song, UserProfile};

/// One earlier (or the current) turn of a dialogue.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub constraints: Vec<Constraint>,
    pub songs: Vec<SongRef>,
    pub agentic: bool,
}

/// Dialogue history; the last turn holds the request being answered.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub turns: Vec<DialogueTurn>,
}

impl History {
    pub fn single(constraints: Vec<Constraint>) -> Self {
        History {
            turns: vec![DialogueTurn { constraints, ..Default::default() }],
        }
    }

    /// The judge's reading of the user's needs: the current request.
    pub fn needs(&self) -> &[Constraint] {
        self.turns.last().map(|t| t.constraints.as_slice()).unwrap_or(&[])
    }

    pub fn prior_turns(&self) -> &[DialogueTurn] {
        match self.turns.split_last() {
            Some((_, rest)) => rest,
            None => &[],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceWeights {
    pub need_fit: f64,
    pub text_need: f64,
    pub text_entity: f64,
}

impl RelevanceWeights {
    pub fn new(need_fit: f64, text_need: f64, text_entity: f64) -> Result<Self> {
        let w = RelevanceWeights { need_fit, text_need, text_entity };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.need_fit, self.text_need, self.text_entity];
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || parts.iter().any(|l| !(*l >= 0.0)) {
            return Err(invalid_config(format!("relevance lambdas must be >= 0 and sum to 1, got {parts:?}")));
        }
        Ok(())
    }
}

impl Default for RelevanceWeights {
    fn default() -> Self {
        RelevanceWeights { need_fit: 0.5, text_need: 0.25, text_entity: 0.25 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Relevance {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub score: f64,
}

pub fn factuality(song: &SongRef, catalog: &Catalog) -> u8 {
    u8::from(catalog.lookup(&song.song_name, &song.singer_name).is_some())
}

fn normalize_words(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push(' ');
    for ch in s.chars() {
        if ch.is_alphanumeric() {
            out.extend(ch.to_lowercase());
        } else {
            out.push(' ');
        }
    }
    out.push(' ');
    out
}

fn collapse(s: &str) -> String {
    format!(" {} ", s.split_whitespace().collect::<Vec<_>>().join(" "))
}

fn mentions_keyword(normalized_text: &str, value: &str) -> bool {
    collapse(normalized_text).contains(&collapse(&normalize_words(value)))
}

/// Judge score of one emitted song. `resolved` is the catalog record, if any;
/// unresolvable entities get `s1 = 0`.
pub fn relevance(
    history: &History,
    song: &SongRef,
    resolved: Option<&Song>,
    text: &str,
    weights: &RelevanceWeights,
) -> Result<Relevance> {
    weights.validate()?;
    let needs = history.needs();
    let s1 = match (resolved, needs.len()) {
        (None, _) => 0.0,
        (Some(_), 0) => 1.0,
        (Some(s), n) => s.attributes.match_count(needs) as f64 / n as f64,
    };
    let norm_text = normalize_words(text);
    let s2 = if needs.is_empty() {
        0.0
    } else {
        needs.iter().filter(|c| mentions_keyword(&norm_text, c.value_name())).count() as f64 / needs.len() as f64
    };
    let lower = text.to_lowercase();
    let s3 = if (!song.song_name.is_empty() && lower.contains(&song.song_name.to_lowercase()))
        || (!song.singer_name.is_empty() && lower.contains(&song.singer_name.to_lowercase()))
    {
        1.0
    } else if !text.trim().is_empty() {
        0.5
    } else {
        0.0
    };
    let score = weights.need_fit * s1 + weights.text_need * s2 + weights.text_entity * s3;
    Ok(Relevance { s1, s2, s3, score })
}

/// `(1 + cos) / 2` against the listener's preferences; 0 for unresolved songs.
pub fn personalization(user: &UserProfile, song: Option<&Song>) -> f64 {
    match song {
        Some(s) => ((1.0 + user.preference_cosine(&s.attributes)) / 2.0).clamp(0.0, 1.0),
        None => 0.0,
    }
}

/// Within-group min-max rescale; a constant group maps to 0.5 everywhere.
pub fn norm_group(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SongScore {
    pub song: SongRef,
    pub factuality: u8,
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub relevance: f64,
    pub personalization: f64,
    pub normed_relevance: f64,
    pub normed_personalization: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    pub per_song: Vec<SongScore>,
    pub repetition_multiplier: f64,
    /// Set when a list held more than `N_max` songs and the tail was ignored.
    pub overflow: bool,
    pub total: f64,
}

impl RewardBreakdown {
    fn entity(&self) -> Option<&SongRef> {
        self.per_song.first().map(|s| &s.song)
    }
}

/// Everything the judge needs besides the response itself.
#[derive(Clone, Copy)]
pub struct Judge<'a> {
    pub catalog: &'a Catalog,
    pub user: &'a UserProfile,
    pub history: &'a History,
    pub weights: &'a RelevanceWeights,
}

impl Judge<'_> {
    /// Raw components of one parsed response; composite fields left at 0.
    pub fn score(&self, parsed: &Parsed) -> Result<RewardBreakdown> {
        let text = parsed.partial.text.as_deref().unwrap_or("");
        let per_song = parsed
            .songs()
            .iter()
            .map(|song| {
                let resolved = self.catalog.lookup(&song.song_name, &song.singer_name);
                let rel = relevance(self.history, song, resolved, text, self.weights)?;
                Ok(SongScore {
                    song: song.clone(),
                    factuality: u8::from(resolved.is_some()),
                    s1: rel.s1,
                    s2: rel.s2,
                    s3: rel.s3,
                    relevance: rel.score,
                    personalization: personalization(self.user, resolved),
                    normed_relevance: 0.0,
                    normed_personalization: 0.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RewardBreakdown {
            format: parsed.grade.score,
            per_song,
            repetition_multiplier: 0.0,
            overflow: false,
            total: 0.0,
        })
    }
}

/// `alpha * (rank - 1)` within groups of samples recommending the same entity,
/// ranked by factuality x relevance descending with ties broken by index.
pub fn repetition_multipliers(breakdowns: &[RewardBreakdown], alpha: f64) -> Vec<f64> {
    let mut groups: BTreeMap<&SongRef, Vec<usize>> = BTreeMap::new();
    for (i, b) in breakdowns.iter().enumerate() {
        if let Some(e) = b.entity() {
            groups.entry(e).or_default().push(i);
        }
    }
    let mut out = vec![0.0; breakdowns.len()];
    for members in groups.values() {
        let key = |i: usize| {
            let s = &breakdowns[i].per_song[0];
            f64::from(s.factuality) * s.relevance
        };
        let mut sorted = members.clone();
        sorted.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
        for (rank0, &i) in sorted.iter().enumerate() {
            out[i] = alpha * rank0 as f64;
        }
    }
    out
}

/// Single-song composite; fills normalization, repetition and total fields.
pub fn hybrid_single(breakdowns: &mut [RewardBreakdown], alpha: f64) -> Vec<f64> {
    let with_song: Vec<usize> = (0..breakdowns.len()).filter(|&i| !breakdowns[i].per_song.is_empty()).collect();
    let rel: Vec<f64> = with_song.iter().map(|&i| breakdowns[i].per_song[0].relevance).collect();
    let pers: Vec<f64> = with_song.iter().map(|&i| breakdowns[i].per_song[0].personalization).collect();
    let (nrel, npers) = (norm_group(&rel), norm_group(&pers));
    for (k, &i) in with_song.iter().enumerate() {
        let s = &mut breakdowns[i].per_song[0];
        s.normed_relevance = nrel[k];
        s.normed_personalization = npers[k];
    }
    let reps = repetition_multipliers(breakdowns, alpha);
    breakdowns
        .iter_mut()
        .zip(reps)
        .map(|(b, rep)| {
            b.repetition_multiplier = rep;
            let gated = match b.per_song.first() {
                Some(s) if b.format > 0.0 => {
                    (1.0 - rep) * f64::from(s.factuality) * (s.normed_relevance + s.normed_personalization)
                }
                _ => 0.0,
            };
            b.total = b.format + gated;
            b.total
        })
        .collect()
}

/// List-wise composite with `(K / N_max)` scaling; normalization pools every
/// `(sample, song)` pair of the group. Songs beyond `n_max` are dropped and
/// the sample is flagged.
pub fn hybrid_list(breakdowns: &mut [RewardBreakdown], n_max: usize) -> Vec<f64> {
    let n_max = n_max.max(1);
    for b in breakdowns.iter_mut() {
        if b.per_song.len() > n_max {
            b.per_song.truncate(n_max);
            b.overflow = true;
        }
    }
    let pooled: Vec<(usize, usize)> = breakdowns
        .iter()
        .enumerate()
        .flat_map(|(i, b)| (0..b.per_song.len()).map(move |j| (i, j)))
        .collect();
    let rel: Vec<f64> = pooled.iter().map(|&(i, j)| breakdowns[i].per_song[j].relevance).collect();
    let pers: Vec<f64> = pooled.iter().map(|&(i, j)| breakdowns[i].per_song[j].personalization).collect();
    let (nrel, npers) = (norm_group(&rel), norm_group(&pers));
    for (k, &(i, j)) in pooled.iter().enumerate() {
        breakdowns[i].per_song[j].normed_relevance = nrel[k];
        breakdowns[i].per_song[j].normed_personalization = npers[k];
    }
    breakdowns
        .iter_mut()
        .map(|b| {
            let k = b.per_song.len() as f64;
            let sum: f64 = if b.format > 0.0 {
                b.per_song
                    .iter()
                    .map(|s| f64::from(s.factuality) * (s.normed_relevance + s.normed_personalization))
                    .sum()
            } else {
                0.0
            };
            b.total = b.format + k / n_max as f64 * sum;
            b.total
        })
        .collect()
}

pub fn validate_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(invalid_config(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    Ok(())
}

/// Discounts agentic samples' list totals by `gamma`.
pub fn hybrid_agentic(list_totals: &[f64], modes: &[Mode], gamma: f64) -> Result<Vec<f64>> {
    validate_gamma(gamma)?;
    Ok(list_totals
        .iter()
        .zip(modes)
        .map(|(t, m)| match m {
            Mode::Internal => *t,
            Mode::Agentic => gamma * t,
        })
        .collect())
}

/// Distinct factual songs in a list, scaled by `1 / N_max`.
pub fn diversity_term(breakdown: &RewardBreakdown, n_max: usize) -> f64 {
    let distinct: BTreeSet<&SongRef> = breakdown
        .per_song
        .iter()
        .filter(|s| s.factuality == 1)
        .map(|s| &s.song)
        .collect();
    distinct.len() as f64 / n_max.max(1) as f64
}

/// Which composite scores a rollout group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardKind {
    HybridSingle { alpha: f64 },
    HybridList { n_max: usize },
    HybridAgentic { n_max: usize, gamma: f64 },
    /// List composite plus the distinct-valid-song diversity term.
    AgentZero { n_max: usize },
}

impl RewardKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RewardKind::HybridSingle { alpha } if !(alpha >= 0.0) => {
                Err(invalid_config(format!("alpha must be >= 0, got {alpha}")))
            }
            RewardKind::HybridList { n_max } | RewardKind::AgentZero { n_max } if n_max == 0 => {
                Err(invalid_config("n_max must be >= 1"))
            }
            RewardKind::HybridAgentic { n_max, gamma } => {
                if n_max == 0 {
                    return Err(invalid_config("n_max must be >= 1"));
                }
                validate_gamma(gamma)
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, breakdowns: &mut [RewardBreakdown], modes: &[Mode]) -> Result<Vec<f64>> {
        self.validate()?;
        let totals = match *self {
            RewardKind::HybridSingle { alpha } => hybrid_single(breakdowns, alpha),
            RewardKind::HybridList { n_max } => hybrid_list(breakdowns, n_max),
            RewardKind::HybridAgentic { n_max, gamma } => {
                let list = hybrid_list(breakdowns, n_max);
                hybrid_agentic(&list, modes, gamma)?
            }
            RewardKind::AgentZero { n_max } => {
                let list = hybrid_list(breakdowns, n_max);
                list.iter()
                    .zip(breakdowns.iter())
                    .map(|(t, b)| t + diversity_term(b, n_max))
                    .collect()
            }
        };
        for (b, t) in breakdowns.iter_mut().zip(&totals) {
            b.total = *t;
        }
        Ok(totals)
    }
}

/// The `L` trajectories sampled for one history, with their reward audit.
#[derive(Clone, Debug)]
pub struct RolloutGroup {
    pub history: History,
    pub samples: Vec<Trajectory>,
    pub breakdowns: Vec<RewardBreakdown>,
}

impl RolloutGroup {
    pub fn modes(&self) -> Vec<Mode> {
        self.samples.iter().map(|t| t.mode).collect()
    }

    /// Parses every sample, scores its components and applies `kind`.
    pub fn score(&mut self, judge: &Judge<'_>, kind: RewardKind) -> Result<Vec<f64>> {
        self.breakdowns = self
            .samples
            .iter()
            .map(|t| judge.score(&crate::template::parse(&t.wire())))
            .collect::<Result<Vec<_>>>()?;
        let modes = self.modes();
        kind.apply(&mut self.breakdowns, &modes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::{parse, render, Intention, StructuredResponse};
    use crate::world::{gen_catalog, gen_users, Dim};

    fn score(fact: u8, rel: f64, pers: f64, name: &str) -> SongScore {
        SongScore {
            song: SongRef::new(name, "x"),
            factuality: fact,
            s1: 0.0,
            s2: 0.0,
            s3: 0.0,
            relevance: rel,
            personalization: pers,
            normed_relevance: 0.0,
            normed_personalization: 0.0,
        }
    }

    fn bd(format: f64, songs: Vec<SongScore>) -> RewardBreakdown {
        RewardBreakdown { format, per_song: songs, repetition_multiplier: 0.0, overflow: false, total: 0.0 }
    }

    #[test]
    fn factuality_membership_and_perturbation() {
        let cat = gen_catalog(7, 200, 0.7).unwrap();
        let s = &cat.songs()[5];
        assert_eq!(factuality(&SongRef::new(s.title.clone(), s.artist.clone()), &cat), 1);
        let mut typo = s.title.clone();
        typo.remove(1);
        assert_eq!(factuality(&SongRef::new(typo, s.artist.clone()), &cat), 0);
    }

    #[test]
    fn relevance_composites() {
        let cat = gen_catalog(7, 300, 0.7).unwrap();
        let song = &cat.songs()[0];
        let g = Constraint { dim: Dim::Genre, value: song.attributes.get(Dim::Genre) };
        let m = Constraint { dim: Dim::Mood, value: song.attributes.get(Dim::Mood) };
        let other_mood = (song.attributes.get(Dim::Mood) + 1) % Dim::Mood.alphabet().len() as u8;
        let w = RelevanceWeights::default();
        let r = SongRef::new(song.title.clone(), song.artist.clone());
        let text = format!("{} by {}: {} and {}", song.title, song.artist, g.value_name(), m.value_name());
        let full = relevance(&History::single(vec![g, m]), &r, Some(song), &text, &w).unwrap();
        assert_eq!((full.s1, full.s2, full.s3), (1.0, 1.0, 1.0));
        assert!((full.score - 1.0).abs() < 1e-12);

        let m2 = Constraint { dim: Dim::Mood, value: other_mood };
        let text = format!("{} by {}: {} and {}", song.title, song.artist, g.value_name(), m2.value_name());
        let half = relevance(&History::single(vec![g, m2]), &r, Some(song), &text, &w).unwrap();
        assert_eq!((half.s1, half.s2, half.s3), (0.5, 1.0, 1.0));
        assert!((half.score - 0.75).abs() < 1e-12);

        let fake = SongRef::new("Nope", "Nobody");
        let h = relevance(&History::single(vec![g]), &fake, None, "nothing here", &w).unwrap();
        assert_eq!((h.s1, h.s3), (0.0, 0.5));
        let empty = relevance(&History::single(vec![g]), &fake, None, "  ", &w).unwrap();
        assert_eq!(empty.s3, 0.0);
    }

    #[test]
    fn relevance_rejects_bad_lambdas() {
        assert!(RelevanceWeights::new(0.5, 0.5, 0.5).is_err());
        let w = RelevanceWeights { need_fit: 0.9, text_need: 0.2, text_entity: 0.0 };
        let r = relevance(&History::default(), &SongRef::new("a", "b"), None, "", &w);
        assert!(r.is_err());
    }

    #[test]
    fn keyword_matching_is_word_based() {
        let t = normalize_words("A rainy_day tune, sad-rock!");
        assert!(mentions_keyword(&t, "rainy_day"));
        assert!(mentions_keyword(&t, "rock"));
        assert!(!mentions_keyword(&t, "roc"));
    }

    #[test]
    fn personalization_parallel_and_orthogonal() {
        let cat = gen_catalog(7, 100, 0.7).unwrap();
        let mut users = gen_users(7, &cat, 1, 1).unwrap();
        let u = &mut users[0];
        let liked = *u.liked.iter().next().unwrap();
        u.completed.clear();
        u.preference_vector = crate::world::preference_from_history(&cat, [liked]);
        assert!((personalization(u, Some(cat.get(liked))) - 1.0).abs() < 1e-12);
        let a = cat.get(liked).attributes;
        let ortho = cat
            .songs()
            .iter()
            .find(|s| Dim::ALL.iter().all(|d| s.attributes.get(*d) != a.get(*d)));
        if let Some(o) = ortho {
            assert!((personalization(u, Some(o)) - 0.5).abs() < 1e-12);
        }
        assert_eq!(personalization(u, None), 0.0);
    }

    #[test]
    fn norm_examples() {
        let n = norm_group(&[0.2, 0.5, 0.8]);
        assert!((n[0]).abs() < 1e-12 && (n[1] - 0.5).abs() < 1e-12 && (n[2] - 1.0).abs() < 1e-12);
        assert_eq!(norm_group(&[0.4, 0.4]), vec![0.5, 0.5]);
    }

    #[test]
    fn repetition_ranks() {
        let b = vec![
            bd(1.0, vec![score(1, 0.5, 0.5, "a")]),
            bd(1.0, vec![score(1, 0.9, 0.5, "a")]),
            bd(1.0, vec![score(1, 0.7, 0.5, "a")]),
            bd(1.0, vec![score(1, 0.7, 0.5, "b")]),
        ];
        let m = repetition_multipliers(&b, 0.1);
        assert_eq!(m[3], 0.0);
        assert!((m[1] - 0.0).abs() < 1e-15 && (m[2] - 0.1).abs() < 1e-15 && (m[0] - 0.2).abs() < 1e-15);
        // Equal keys: lower index ranks first.
        let tie = vec![bd(1.0, vec![score(1, 0.5, 0.5, "a")]), bd(1.0, vec![score(1, 0.5, 0.5, "a")])];
        assert_eq!(repetition_multipliers(&tie, 0.1), vec![0.0, 0.1]);
    }

    #[test]
    fn hybrid_single_examples() {
        // Normalized relevance 0.7 and personalization 0.5 for the first sample.
        let mut b = vec![
            bd(1.0, vec![score(1, 0.7, 0.5, "a")]),
            bd(1.0, vec![score(1, 0.0, 0.0, "b")]),
            bd(1.0, vec![score(1, 1.0, 1.0, "c")]),
        ];
        let t = hybrid_single(&mut b, 0.1);
        assert!((t[0] - 2.2).abs() < 1e-12);
        let mut gated = vec![bd(0.0, vec![score(1, 0.9, 0.9, "a")]), bd(1.0, vec![score(1, 0.1, 0.1, "b")])];
        assert_eq!(hybrid_single(&mut gated, 0.1)[0], 0.0);
        let mut fake = vec![bd(1.0, vec![score(0, 0.9, 0.9, "a")]), bd(1.0, vec![score(1, 0.1, 0.1, "b")])];
        assert_eq!(hybrid_single(&mut fake, 0.1)[0], 1.0);
    }

    #[test]
    fn hybrid_list_examples() {
        // Two songs whose bracketed terms come out as 1.0 and 0.6.
        let mut b = vec![
            bd(1.0, vec![score(1, 0.5, 0.5, "a"), score(1, 0.3, 0.3, "b")]),
            bd(1.0, vec![score(1, 1.0, 1.0, "c"), score(1, 0.0, 0.0, "d")]),
        ];
        let t = hybrid_list(&mut b, 5);
        assert!((t[0] - 1.64).abs() < 1e-12, "{}", t[0]);
        let mut empty = vec![bd(1.0, vec![]), bd(0.5, vec![])];
        assert_eq!(hybrid_list(&mut empty, 5), vec![1.0, 0.5]);
        let mut over = vec![bd(1.0, (0..7).map(|i| score(1, 0.5, 0.5, &i.to_string())).collect())];
        hybrid_list(&mut over, 5);
        assert!(over[0].overflow && over[0].per_song.len() == 5);
    }

    #[test]
    fn hybrid_agentic_examples() {
        let t = hybrid_agentic(&[1.64, 1.64], &[Mode::Internal, Mode::Agentic], 0.8).unwrap();
        assert_eq!(t[0], 1.64);
        assert!((t[1] - 1.312).abs() < 1e-12);
        let same = hybrid_agentic(&[1.64, 1.64], &[Mode::Internal, Mode::Agentic], 1.0).unwrap();
        assert_eq!(same[0], same[1]);
        assert!(hybrid_agentic(&[1.0], &[Mode::Agentic], 1.3).is_err());
        assert!(hybrid_agentic(&[1.0], &[Mode::Agentic], 0.0).is_err());
    }

    #[test]
    fn diversity_term_counts_distinct_factual() {
        let five = bd(1.0, (0..5).map(|i| score(1, 0.5, 0.5, &i.to_string())).collect());
        assert_eq!(diversity_term(&five, 5), 1.0);
        let dup = bd(
            1.0,
            ["a", "a", "b", "b", "c"].iter().map(|n| score(1, 0.5, 0.5, n)).collect(),
        );
        assert!((diversity_term(&dup, 5) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn judge_scores_rendered_response() {
        let cat = gen_catalog(7, 200, 0.7).unwrap();
        let users = gen_users(7, &cat, 2, 3).unwrap();
        let song = &cat.songs()[1];
        let hist = History::single(vec![Constraint { dim: Dim::Genre, value: song.attributes.get(Dim::Genre) }]);
        let w = RelevanceWeights::default();
        let judge = Judge { catalog: &cat, user: &users[0], history: &hist, weights: &w };
        let resp = StructuredResponse {
            intention: Intention::SongSearch,
            music: vec![SongRef::new(song.title.clone(), song.artist.clone())],
            text: format!("Try {} by {}.", song.title, song.artist),
        };
        let b = judge.score(&parse(&render(&resp).unwrap())).unwrap();
        assert_eq!(b.format, 1.0);
        assert_eq!(b.per_song[0].factuality, 1);
        assert_eq!(b.per_song[0].s1, 1.0);
        assert!((b.per_song[0].relevance - (0.5 * b.per_song[0].s1 + 0.25 * b.per_song[0].s2 + 0.25 * b.per_song[0].s3)).abs() == 0.0);
    }
}
