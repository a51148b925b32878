//! Toy continual-pretraining lab over count-based n-gram models: reference
//! model token weighting, BRM anchoring, mixture sweeps and bidirectional
//! augmentation.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Result};
use crate::rng::stream;

/// Id 0 is the sequence-start padding token.
pub const BOS: u32 = 0;
pub const NLL_CLAMP: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab::default();
        v.intern("<s>");
        v
    }

    pub fn intern(&mut self, tok: &str) -> u32 {
        if let Some(&i) = self.index.get(tok) {
            return i;
        }
        let i = self.tokens.len() as u32;
        self.tokens.push(tok.to_string());
        self.index.insert(tok.to_string(), i);
        i
    }

    pub fn id(&self, tok: &str) -> Option<u32> {
        self.index.get(tok).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Music,
    General,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seq {
    pub tokens: Vec<u32>,
    pub domain: Domain,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct ContextCounts {
    total: f64,
    next: HashMap<u32, f64>,
}

/// Additively smoothed n-gram model over a shared vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyLM {
    pub order: usize,
    pub smoothing: f64,
    pub vocab: Arc<Vocab>,
    counts: HashMap<Vec<u32>, ContextCounts>,
}

impl ToyLM {
    pub fn new(order: usize, smoothing: f64, vocab: Arc<Vocab>) -> Result<Self> {
        if order == 0 {
            return Err(invalid_config("n-gram order must be >= 1"));
        }
        if !(smoothing > 0.0 && smoothing.is_finite()) {
            return Err(invalid_config(format!("smoothing must be > 0, got {smoothing}")));
        }
        Ok(ToyLM { order, smoothing, vocab, counts: HashMap::new() })
    }

    fn v(&self) -> f64 {
        self.vocab.len() as f64
    }

    /// Context of position `i`: the previous `order - 1` tokens, padded.
    pub fn context(&self, tokens: &[u32], i: usize) -> Vec<u32> {
        let n = self.order - 1;
        (0..n).map(|k| if i + k >= n { tokens[i + k - n] } else { BOS }).collect()
    }

    /// Adds `weights[i]` to the count of every token given its context.
    pub fn add(&mut self, tokens: &[u32], weights: &[f64]) {
        for (i, (&t, &w)) in tokens.iter().zip(weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let c = self.counts.entry(self.context(tokens, i)).or_default();
            c.total += w;
            *c.next.entry(t).or_insert(0.0) += w;
        }
    }

    pub fn add_plain(&mut self, tokens: &[u32]) {
        self.add(tokens, &vec![1.0; tokens.len()]);
    }

    /// Adds `scale * dist` pseudo-counts to one context.
    fn add_dist(&mut self, ctx: Vec<u32>, dist: &[f64], scale: f64) {
        let c = self.counts.entry(ctx).or_default();
        c.total += scale * dist.iter().sum::<f64>();
        for (t, p) in dist.iter().enumerate() {
            *c.next.entry(t as u32).or_insert(0.0) += scale * p;
        }
    }

    pub fn prob(&self, ctx: &[u32], t: u32) -> f64 {
        let k = self.smoothing;
        match self.counts.get(ctx) {
            Some(c) => (c.next.get(&t).copied().unwrap_or(0.0) + k) / (c.total + k * self.v()),
            None => 1.0 / self.v(),
        }
    }

    /// Full next-token distribution for a context.
    pub fn dist(&self, ctx: &[u32]) -> Vec<f64> {
        (0..self.vocab.len() as u32).map(|t| self.prob(ctx, t)).collect()
    }

    /// Per-token negative log-likelihood.
    pub fn nll(&self, tokens: &[u32]) -> Vec<f64> {
        (0..tokens.len()).map(|i| -self.prob(&self.context(tokens, i), tokens[i]).ln()).collect()
    }

    /// Most probable next token; ties go to the lowest id.
    pub fn argmax(&self, ctx: &[u32]) -> u32 {
        let mut best = (0u32, f64::NEG_INFINITY);
        for t in 0..self.vocab.len() as u32 {
            let p = self.prob(ctx, t);
            if p > best.1 {
                best = (t, p);
            }
        }
        best.0
    }

    pub fn n_contexts(&self) -> usize {
        self.counts.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedTokenSeq {
    pub tokens: Vec<u32>,
    pub domain: Domain,
    pub qrm_nll: Vec<f64>,
    pub weights: Vec<f64>,
}

impl WeightedTokenSeq {
    /// All-ones weights: plain cross-entropy.
    pub fn plain(seq: &Seq) -> Self {
        WeightedTokenSeq {
            tokens: seq.tokens.clone(),
            domain: seq.domain,
            qrm_nll: vec![0.0; seq.tokens.len()],
            weights: vec![1.0; seq.tokens.len()],
        }
    }
}

/// `w_t = 1 / max(C_QRM(x_t), clamp)`, optionally rescaled to mean one.
pub fn qrm_weights(seq: &Seq, qrm: &ToyLM, normalize_mean_one: bool) -> Result<WeightedTokenSeq> {
    if seq.tokens.is_empty() {
        return Err(invalid_input("cannot weight an empty sequence"));
    }
    let qrm_nll = qrm.nll(&seq.tokens);
    let mut weights: Vec<f64> = qrm_nll.iter().map(|c| 1.0 / c.max(NLL_CLAMP)).collect();
    if normalize_mean_one {
        let mean = weights.iter().sum::<f64>() / weights.len() as f64;
        weights.iter_mut().for_each(|w| *w /= mean);
    }
    Ok(WeightedTokenSeq { tokens: seq.tokens.clone(), domain: seq.domain, qrm_nll, weights })
}

/// `-sum_t w_t log p(x_t | ctx) / |seq|`.
pub fn weighted_ce(seq: &WeightedTokenSeq, student: &ToyLM) -> f64 {
    if seq.tokens.is_empty() {
        return 0.0;
    }
    let nll = student.nll(&seq.tokens);
    nll.iter().zip(&seq.weights).map(|(c, w)| w * c).sum::<f64>() / seq.tokens.len() as f64
}

/// Mean over positions of `KL(p_BRM(.|ctx) || p_student(.|ctx))`.
pub fn brm_kl(student: &ToyLM, brm: &ToyLM, seq: &Seq) -> Result<f64> {
    if student.vocab != brm.vocab {
        return Err(invalid_input("student and reference vocabularies differ"));
    }
    if student.order != brm.order {
        return Err(invalid_input("student and reference orders differ"));
    }
    if seq.tokens.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..seq.tokens.len() {
        let ctx = student.context(&seq.tokens, i);
        let (p, q) = (brm.dist(&ctx), student.dist(&ctx));
        total += p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum::<f64>();
    }
    Ok(total / seq.tokens.len() as f64)
}

/// Mean plain cross-entropy over sequences.
pub fn dev_loss(model: &ToyLM, seqs: &[Seq]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for q in seqs {
        s += model.nll(&q.tokens).iter().sum::<f64>();
        n += q.tokens.len();
    }
    s / n.max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Ntp,
    HardFilter,
    SoftScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_songs: usize,
    pub n_artists: usize,
    pub n_genres: usize,
    pub n_moods: usize,
    /// Each fact appears between 1 and this many times in training text.
    pub max_fact_repeats: usize,
    /// Fraction of music sentences that are boilerplate.
    pub noise_rate: f64,
    pub n_nouns: usize,
    pub n_verbs: usize,
    pub n_general: usize,
    /// General sentences the base reference model is trained on.
    pub n_brm_general: usize,
    pub n_dev: usize,
    /// Boilerplate footers seen by the quality reference model.
    pub reference_boilerplate: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_songs: 300,
            n_artists: 40,
            n_genres: 8,
            n_moods: 8,
            max_fact_repeats: 3,
            noise_rate: 0.4,
            n_nouns: 60,
            n_verbs: 30,
            n_general: 1200,
            n_brm_general: 6000,
            n_dev: 400,
            reference_boilerplate: 20,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(invalid_config(format!("cptlab.noise_rate must lie in [0,1), got {}", self.noise_rate)));
        }
        if self.n_songs == 0 || self.n_artists == 0 || self.n_genres == 0 || self.n_moods == 0 {
            return Err(invalid_config("cptlab corpus sizes must be >= 1"));
        }
        if self.max_fact_repeats == 0 || self.n_nouns == 0 || self.n_verbs == 0 {
            return Err(invalid_config("cptlab corpus sizes must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub title: u32,
    pub artist: u32,
    pub genre: u32,
    pub mood: u32,
}

/// Every corpus of one lab world.
#[derive(Clone, Debug)]
pub struct Corpora {
    pub vocab: Arc<Vocab>,
    pub facts: Vec<Fact>,
    pub by: u32,
    pub music_train: Vec<Seq>,
    pub music_dev: Vec<Seq>,
    /// One clean sentence per fact: the quality reference model's data.
    pub reference: Vec<Seq>,
    pub general_train: Vec<Seq>,
    pub general_dev: Vec<Seq>,
    pub brm_general: Vec<Seq>,
}

const NOISE_TEMPLATES: [&[&str]; 2] =
    [&["by", "lyricsfree", "rights", "reserved"], &["by", "admin", "mp3", "download"]];

fn fact_sentence(v: &Vocab, f: &Fact, template: usize) -> Vec<u32> {
    let w = |s: &str| v.id(s).expect("interned");
    match template % 4 {
        0 => vec![w("song"), f.title, w("by"), f.artist, w(".")],
        1 => vec![w("listen"), w("to"), f.title, w("by"), f.artist, w(".")],
        2 => vec![f.title, w("by"), f.artist, w("is"), w("a"), f.genre, w("song"), w(".")],
        _ => vec![f.title, w("by"), f.artist, w("feels"), f.mood, w(".")],
    }
}

fn general_sentence(v: &Vocab, rng: &mut crate::rng::Rng, nouns: &[u32], verbs: &[u32]) -> Vec<u32> {
    // Zipf-ish subject, verb tied to subject, object tied to verb.
    let zipf = |rng: &mut crate::rng::Rng, n: usize| -> usize {
        let u: f64 = rng.random();
        ((n as f64).powf(u) - 1.0).floor() as usize % n
    };
    let s = zipf(rng, nouns.len());
    let vb = (s * 7 + zipf(rng, 4)) % verbs.len();
    let o = (vb * 11 + zipf(rng, 6)) % nouns.len();
    let the = v.id("the").expect("interned");
    let dot = v.id(".").expect("interned");
    vec![the, nouns[s], verbs[vb], the, nouns[o], dot]
}

/// Builds a lab world: facts, noisy music text, clean reference text and
/// general-domain text.
pub fn build_corpora(seed: u64, cfg: &CorpusConfig) -> Result<Corpora> {
    cfg.validate()?;
    let mut v = Vocab::new();
    for w in ["song", "by", ".", "listen", "to", "is", "a", "feels", "the"] {
        v.intern(w);
    }
    for t in NOISE_TEMPLATES {
        for w in t {
            v.intern(w);
        }
    }
    let titles: Vec<u32> = (0..cfg.n_songs).map(|i| v.intern(&format!("t{i}"))).collect();
    let artists: Vec<u32> = (0..cfg.n_artists).map(|i| v.intern(&format!("a{i}"))).collect();
    let genres: Vec<u32> = (0..cfg.n_genres).map(|i| v.intern(&format!("g{i}"))).collect();
    let moods: Vec<u32> = (0..cfg.n_moods).map(|i| v.intern(&format!("m{i}"))).collect();
    let nouns: Vec<u32> = (0..cfg.n_nouns).map(|i| v.intern(&format!("n{i}"))).collect();
    let verbs: Vec<u32> = (0..cfg.n_verbs).map(|i| v.intern(&format!("v{i}"))).collect();

    let mut rng = stream(seed, "cpt-facts", 0);
    let facts: Vec<Fact> = titles
        .iter()
        .map(|&title| Fact {
            title,
            artist: *artists.choose(&mut rng).expect("nonempty"),
            genre: *genres.choose(&mut rng).expect("nonempty"),
            mood: *moods.choose(&mut rng).expect("nonempty"),
        })
        .collect();

    let mut rng = stream(seed, "cpt-music", 0);
    let mut clean: Vec<Seq> = Vec::new();
    for f in &facts {
        for _ in 0..rng.random_range(1..=cfg.max_fact_repeats) {
            clean.push(Seq { tokens: fact_sentence(&v, f, rng.random_range(0..4)), domain: Domain::Music });
        }
    }
    let n_noise = (cfg.noise_rate / (1.0 - cfg.noise_rate) * clean.len() as f64).round() as usize;
    // Boilerplate lands as footers on random pages.
    let mut music_train = clean;
    let n_docs = music_train.len();
    for _ in 0..n_noise {
        let doc = rng.random_range(0..n_docs);
        let title = *titles.choose(&mut rng).expect("nonempty");
        let t = NOISE_TEMPLATES[rng.random_range(0..NOISE_TEMPLATES.len())];
        let tokens = &mut music_train[doc].tokens;
        tokens.push(title);
        tokens.extend(t.iter().map(|w| v.id(w).expect("interned")));
    }
    music_train.shuffle(&mut rng);

    let mut rng = stream(seed, "cpt-reference", 0);
    let mut reference: Vec<Seq> = facts
        .iter()
        .map(|f| Seq { tokens: fact_sentence(&v, f, rng.random_range(0..4)), domain: Domain::Music })
        .collect();
    for _ in 0..cfg.reference_boilerplate {
        let doc = rng.random_range(0..reference.len());
        let title = *titles.choose(&mut rng).expect("nonempty");
        let t = NOISE_TEMPLATES[rng.random_range(0..NOISE_TEMPLATES.len())];
        let tokens = &mut reference[doc].tokens;
        tokens.push(title);
        tokens.extend(t.iter().map(|w| v.id(w).expect("interned")));
    }
    let mut rng = stream(seed, "cpt-music-dev", 0);
    let music_dev: Vec<Seq> = (0..cfg.n_dev)
        .map(|_| {
            let f = facts.choose(&mut rng).expect("nonempty");
            Seq { tokens: fact_sentence(&v, f, rng.random_range(0..4)), domain: Domain::Music }
        })
        .collect();
    let general = |purpose: &str, n: usize| -> Vec<Seq> {
        let mut rng = stream(seed, purpose, 0);
        (0..n)
            .map(|_| Seq { tokens: general_sentence(&v, &mut rng, &nouns, &verbs), domain: Domain::General })
            .collect()
    };
    let general_train = general("cpt-general", cfg.n_general);
    let general_dev = general("cpt-general-dev", cfg.n_dev);
    let brm_general = general("cpt-brm", cfg.n_brm_general);
    let by = v.id("by").expect("interned");
    Ok(Corpora {
        vocab: Arc::new(v),
        facts,
        by,
        music_train,
        music_dev,
        reference,
        general_train,
        general_dev,
        brm_general,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CptConfig {
    pub seed: u64,
    pub order: usize,
    pub smoothing: f64,
    pub objective: Objective,
    pub kl_coeff: f64,
    /// Music share of the training mix, in (0, 1].
    pub ratio: f64,
    pub hard_percentile: f64,
    pub normalize_mean_one: bool,
    /// Second pass over music sequences at 3x weight.
    pub two_stage: bool,
}

impl Default for CptConfig {
    fn default() -> Self {
        CptConfig {
            seed: 0,
            order: 3,
            smoothing: 0.001,
            objective: Objective::Ntp,
            kl_coeff: 0.0,
            ratio: 0.5,
            hard_percentile: 60.0,
            normalize_mean_one: true,
            two_stage: false,
        }
    }
}

impl CptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(invalid_config(format!("cptlab.ratio must lie in (0,1], got {}", self.ratio)));
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return Err(invalid_config("cptlab.kl_coeff must be >= 0"));
        }
        if !(0.0..=100.0).contains(&self.hard_percentile) {
            return Err(invalid_config("cptlab.hard_percentile must lie in [0,100]"));
        }
        if self.order == 0 || !(self.smoothing > 0.0) {
            return Err(invalid_config("cptlab.order must be >= 1 and smoothing > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub music_dev_loss: f64,
    pub general_dev_loss: f64,
    pub probe_accuracy: f64,
}

/// Base reference model: general text only.
pub fn train_brm(c: &Corpora, cfg: &CptConfig) -> Result<ToyLM> {
    let mut m = ToyLM::new(cfg.order, cfg.smoothing, c.vocab.clone())?;
    for s in &c.brm_general {
        m.add_plain(&s.tokens);
    }
    Ok(m)
}

/// Quality reference model: the clean reference sentences.
pub fn train_qrm(c: &Corpora, cfg: &CptConfig) -> Result<ToyLM> {
    let mut m = ToyLM::new(cfg.order, cfg.smoothing, c.vocab.clone())?;
    for s in &c.reference {
        m.add_plain(&s.tokens);
    }
    Ok(m)
}

/// `q`-th percentile (0..=100) by linear interpolation between order
/// statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Token weights per music sequence under an objective.
pub fn objective_weights(music: &[Seq], qrm: &ToyLM, cfg: &CptConfig) -> Result<Vec<Vec<f64>>> {
    match cfg.objective {
        Objective::Ntp => Ok(music.iter().map(|s| vec![1.0; s.tokens.len()]).collect()),
        Objective::SoftScore => music
            .par_iter()
            .map(|s| Ok(qrm_weights(s, qrm, cfg.normalize_mean_one)?.weights))
            .collect(),
        Objective::HardFilter => {
            let raw: Vec<Vec<f64>> =
                music.par_iter().map(|s| Ok(qrm_weights(s, qrm, false)?.weights)).collect::<Result<_>>()?;
            // Rank cut: tokens tied at the percentile are split by a seeded draw.
            let mut rng = stream(cfg.seed, "hard-filter-ties", 0);
            let mut ranked: Vec<(f64, u64, usize, usize)> = Vec::new();
            for (i, w) in raw.iter().enumerate() {
                for (j, &x) in w.iter().enumerate() {
                    ranked.push((x, rng.random(), i, j));
                }
            }
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let keep = ((1.0 - cfg.hard_percentile / 100.0) * ranked.len() as f64).round() as usize;
            let mut out: Vec<Vec<f64>> = raw.iter().map(|w| vec![0.0; w.len()]).collect();
            for &(_, _, i, j) in &ranked[..keep] {
                out[i][j] = 1.0;
            }
            Ok(out)
        }
    }
}

/// Title to artist completion accuracy.
pub fn fact_probe(model: &ToyLM, c: &Corpora) -> f64 {
    let hits = c
        .facts
        .iter()
        .filter(|f| {
            let mut ctx = vec![BOS; model.order.saturating_sub(3)];
            ctx.extend([f.title, c.by]);
            let ctx = &ctx[ctx.len() - (model.order - 1)..];
            model.argmax(ctx) == f.artist
        })
        .count();
    hits as f64 / c.facts.len() as f64
}

/// Continual pretraining of a fresh student on a music/general mix with a
/// fixed sequence budget.
pub fn train_toy(c: &Corpora, qrm: &ToyLM, brm: &ToyLM, cfg: &CptConfig) -> Result<(ToyLM, ToyRun)> {
    cfg.validate()?;
    if c.music_train.is_empty() && c.general_train.is_empty() {
        return Err(invalid_input("empty training corpus"));
    }
    let budget = c.music_train.len().max(c.general_train.len());
    let n_music = ((cfg.ratio * budget as f64).round() as usize).min(c.music_train.len());
    let n_general = (((1.0 - cfg.ratio) * budget as f64).round() as usize).min(c.general_train.len());
    let music = &c.music_train[..n_music];
    let general = &c.general_train[..n_general];
    let weights = objective_weights(music, qrm, cfg)?;
    let mut m = ToyLM::new(cfg.order, cfg.smoothing, c.vocab.clone())?;
    for (s, w) in music.iter().zip(&weights) {
        m.add(&s.tokens, w);
    }
    for s in general {
        m.add_plain(&s.tokens);
    }
    if cfg.kl_coeff > 0.0 {
        // Stationary point of CE + kl * KL(p_brm || p) on the general text:
        // kl * p_brm pseudo-counts at every general position.
        let mut by_ctx: HashMap<Vec<u32>, f64> = HashMap::new();
        for s in general {
            for i in 0..s.tokens.len() {
                *by_ctx.entry(m.context(&s.tokens, i)).or_insert(0.0) += cfg.kl_coeff;
            }
        }
        let mut ctxs: Vec<_> = by_ctx.into_iter().collect();
        ctxs.sort_by(|a, b| a.0.cmp(&b.0));
        for (ctx, scale) in ctxs {
            let d = brm.dist(&ctx);
            m.add_dist(ctx, &d, scale);
        }
    }
    if cfg.two_stage {
        for (s, w) in music.iter().zip(&weights) {
            let w3: Vec<f64> = w.iter().map(|x| 3.0 * x).collect();
            m.add(&s.tokens, &w3);
        }
    }
    let run = ToyRun {
        music_dev_loss: dev_loss(&m, &c.music_dev),
        general_dev_loss: dev_loss(&m, &c.general_dev),
        probe_accuracy: fact_probe(&m, c),
    };
    Ok((m, run))
}

/// Builds the world for one seed and trains one student.
pub fn run_seed(seed: u64, corpus: &CorpusConfig, cfg: &CptConfig) -> Result<ToyRun> {
    let c = build_corpora(seed, corpus)?;
    let qrm = train_qrm(&c, cfg)?;
    let brm = train_brm(&c, cfg)?;
    Ok(train_toy(&c, &qrm, &brm, &CptConfig { seed, ..cfg.clone() })?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub ratio: f64,
    pub music_loss: f64,
    pub general_loss: f64,
}

/// Dev losses per music ratio, averaged over seeds.
pub fn mixture_sweep(ratios: &[f64], seeds: &[u64], corpus: &CorpusConfig, cfg: &CptConfig) -> Result<Vec<SweepPoint>> {
    if ratios.windows(2).any(|w| w[0] > w[1]) {
        return Err(invalid_input("sweep ratios must be sorted ascending"));
    }
    if seeds.is_empty() {
        return Err(invalid_input("sweep needs at least one seed"));
    }
    ratios
        .iter()
        .map(|&ratio| {
            let runs: Vec<ToyRun> = seeds
                .par_iter()
                .map(|&s| run_seed(s, corpus, &CptConfig { ratio, ..cfg.clone() }))
                .collect::<Result<_>>()?;
            let n = runs.len() as f64;
            Ok(SweepPoint {
                ratio,
                music_loss: runs.iter().map(|r| r.music_dev_loss).sum::<f64>() / n,
                general_loss: runs.iter().map(|r| r.general_dev_loss).sum::<f64>() / n,
            })
        })
        .collect()
}

pub fn write_sweep_csv(path: &std::path::Path, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["ratio", "music_loss", "general_loss"])?;
    for p in points {
        w.write_record([p.ratio.to_string(), p.music_loss.to_string(), p.general_loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Average ranks, ties sharing their mean rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid_input("spearman needs two equal-length series of length >= 2"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(invalid_input("spearman undefined for a constant series"));
    }
    Ok(cov / (vx * vy).sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    percentile(values, 50.0)
}

/// A song and its two-word description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescPair {
    pub song: u32,
    pub description: [u32; 2],
}

/// Both directions of every pair: `song means d1 d2` and `about d1 d2 song`.
pub fn bidir_augment(pairs: &[DescPair], vocab: &Vocab) -> Result<Vec<Seq>> {
    if pairs.is_empty() {
        return Err(invalid_input("no pairs to augment"));
    }
    Ok(pairs.iter().flat_map(|p| [forward_seq(p, vocab), backward_seq(p, vocab)]).collect())
}

fn forward_seq(p: &DescPair, v: &Vocab) -> Seq {
    let means = v.id("means").expect("interned");
    Seq { tokens: vec![p.song, means, p.description[0], p.description[1]], domain: Domain::Music }
}

fn backward_seq(p: &DescPair, v: &Vocab) -> Seq {
    let about = v.id("about").expect("interned");
    Seq { tokens: vec![about, p.description[0], p.description[1], p.song], domain: Domain::Music }
}

/// Songs with distinct descriptions drawn from two word lists.
pub fn build_pairs(seed: u64, n_songs: usize, n_words: usize) -> Result<(Arc<Vocab>, Vec<DescPair>)> {
    if n_words * n_words < n_songs {
        return Err(invalid_config("not enough word pairs for distinct descriptions"));
    }
    let mut v = Vocab::new();
    v.intern("means");
    v.intern("about");
    let songs: Vec<u32> = (0..n_songs).map(|i| v.intern(&format!("s{i}"))).collect();
    let w1: Vec<u32> = (0..n_words).map(|i| v.intern(&format!("d{i}"))).collect();
    let w2: Vec<u32> = (0..n_words).map(|i| v.intern(&format!("e{i}"))).collect();
    let mut combos: Vec<[u32; 2]> = w1.iter().flat_map(|&a| w2.iter().map(move |&b| [a, b])).collect();
    let mut rng = stream(seed, "cpt-pairs", 0);
    combos.shuffle(&mut rng);
    let pairs = songs.iter().zip(combos).map(|(&song, description)| DescPair { song, description }).collect();
    Ok((Arc::new(v), pairs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReversalRun {
    /// Song to first description word.
    pub song_to_desc: f64,
    /// Description to song.
    pub desc_to_song: f64,
}

/// Probes a model trained on `seqs` in both directions.
pub fn reversal_probe(model: &ToyLM, pairs: &[DescPair], vocab: &Vocab) -> ReversalRun {
    let means = vocab.id("means").expect("interned");
    let n = pairs.len() as f64;
    let fwd = pairs.iter().filter(|p| model.argmax(&[p.song, means]) == p.description[0]).count();
    let rev = pairs.iter().filter(|p| model.argmax(&p.description) == p.song).count();
    ReversalRun { song_to_desc: fwd as f64 / n, desc_to_song: rev as f64 / n }
}

/// Forward-only versus augmented training on the same pairs.
pub fn reversal_experiment(seed: u64, n_songs: usize, n_words: usize, smoothing: f64) -> Result<(ReversalRun, ReversalRun)> {
    let (vocab, pairs) = build_pairs(seed, n_songs, n_words)?;
    let mut fwd = ToyLM::new(3, smoothing, vocab.clone())?;
    for p in &pairs {
        fwd.add_plain(&forward_seq(p, &vocab).tokens);
    }
    let mut aug = ToyLM::new(3, smoothing, vocab.clone())?;
    for s in bidir_augment(&pairs, &vocab)? {
        aug.add_plain(&s.tokens);
    }
    Ok((reversal_probe(&fwd, &pairs, &vocab), reversal_probe(&aug, &pairs, &vocab)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_vocab(n: usize) -> Arc<Vocab> {
        let mut v = Vocab::new();
        for i in 1..n {
            v.intern(&format!("w{i}"));
        }
        Arc::new(v)
    }

    #[test]
    fn distributions_normalize() {
        let v = tiny_vocab(6);
        let mut m = ToyLM::new(3, 0.1, v).unwrap();
        m.add_plain(&[1, 2, 3, 1, 2, 4]);
        for ctx in [[0u32, 0], [1, 2], [5, 5]] {
            let s: f64 = m.dist(&ctx).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(m.dist(&ctx).iter().all(|p| *p > 0.0));
        }
    }

    #[test]
    fn qrm_weight_examples() {
        let v = tiny_vocab(4);
        let m = ToyLM::new(1, 1.0, v).unwrap();
        let seq = Seq { tokens: vec![1, 2], domain: Domain::Music };
        let w = qrm_weights(&seq, &m, false).unwrap();
        for (c, w) in w.qrm_nll.iter().zip(&w.weights) {
            assert!((c * w - 1.0).abs() < 1e-9);
        }
        // mean-one rescale of NLLs (1, 3): raw (1, 1/3) -> (1.5, 0.5)
        let raw: Vec<f64> = vec![1.0, 1.0 / 3.0];
        let mean = (raw[0] + raw[1]) / 2.0;
        assert!((raw[0] / mean - 1.5).abs() < 1e-12 && (raw[1] / mean - 0.5).abs() < 1e-12);
        assert!(qrm_weights(&Seq { tokens: vec![], domain: Domain::Music }, &m, true).is_err());
    }

    #[test]
    fn reciprocal_of_nll() {
        // p = e^-2 -> C = 2 -> w = 0.5: unigram with smoothing only over
        // a vocabulary of size e^2 is not integral, so check the mapping.
        let c: f64 = 2.0;
        assert_eq!(1.0 / c.max(NLL_CLAMP), 0.5);
    }

    #[test]
    fn weighted_ce_linearity_and_kl_identity() {
        let v = tiny_vocab(5);
        let mut m = ToyLM::new(2, 0.5, v.clone()).unwrap();
        m.add_plain(&[1, 2, 3, 4, 1]);
        let seq = Seq { tokens: vec![1, 2, 4], domain: Domain::Music };
        let plain = WeightedTokenSeq::plain(&seq);
        let mut double = plain.clone();
        double.weights.iter_mut().for_each(|w| *w *= 2.0);
        assert!((weighted_ce(&double, &m) - 2.0 * weighted_ce(&plain, &m)).abs() < 1e-12);
        assert_eq!(brm_kl(&m, &m, &seq).unwrap(), 0.0);
        let other = ToyLM::new(2, 0.5, tiny_vocab(6)).unwrap();
        assert!(brm_kl(&m, &other, &seq).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn augmentation_doubles() {
        let (v, pairs) = build_pairs(1, 100, 12).unwrap();
        assert_eq!(bidir_augment(&pairs, &v).unwrap().len(), 200);
        assert!(bidir_augment(&[], &v).is_err());
    }

    #[test]
    fn no_noise_objectives_agree() {
        let corpus = CorpusConfig { noise_rate: 0.0, ..Default::default() };
        let accs: Vec<f64> = [Objective::Ntp, Objective::HardFilter, Objective::SoftScore]
            .iter()
            .map(|&objective| run_seed(3, &corpus, &CptConfig { objective, ratio: 1.0, ..Default::default() }).unwrap().probe_accuracy)
            .collect();
        assert!((accs[2] - accs[0]).abs() <= 0.01, "{accs:?}");
        // The rank cut drops 60% of clean tokens too, some artist slots
        // among them, so the filter trails on clean text.
        assert!(accs[1] <= accs[0] && accs[1] > 0.8, "{accs:?}");
    }

    #[test]
    fn uniform_soft_weights_reproduce_ntp() {
        let c = build_corpora(2, &CorpusConfig::default()).unwrap();
        let cfg = CptConfig::default();
        let uniform = ToyLM::new(cfg.order, cfg.smoothing, c.vocab.clone()).unwrap();
        let soft = CptConfig { objective: Objective::SoftScore, ..cfg.clone() };
        let brm = train_brm(&c, &cfg).unwrap();
        let (a, _) = train_toy(&c, &uniform, &brm, &soft).unwrap();
        let (b, _) = train_toy(&c, &uniform, &brm, &cfg).unwrap();
        assert_eq!(dev_loss(&a, &c.music_dev), dev_loss(&b, &c.music_dev));
    }
}
