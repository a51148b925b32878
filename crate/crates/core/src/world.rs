//! Synthetic music world: catalog, listeners and benchmark queries.
//!
//! The catalog is split into an in-corpus part (songs the internal policy
//! has memorized) and an out-of-corpus part reachable only through tools.
//! Two attribute values, era `2020s` and scenario `trending`, occur only on
//! out-of-corpus songs; they model fresh releases the internal policy has
//! never seen and make out-of-knowledge queries constructible at every level.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::de::{self, Deserializer};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::rng::{self, Rng};
use crate::template::Intention;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dim {
    Genre,
    Mood,
    Language,
    TempoBucket,
    Era,
    Instrument,
    Scenario,
    Region,
}

const GENRES: &[&str] = &[
    "pop", "rock", "folk", "jazz", "hiphop", "electronic", "classical", "rnb", "metal", "country",
];
const MOODS: &[&str] = &[
    "happy", "sad", "calm", "energetic", "romantic", "nostalgic", "angry", "dreamy",
];
const LANGUAGES: &[&str] = &["mandarin", "cantonese", "english", "japanese", "korean", "instrumental"];
const TEMPOS: &[&str] = &["slow", "midtempo", "upbeat", "fast"];
const ERAS: &[&str] = &["1970s", "1980s", "1990s", "2000s", "2010s", "2020s"];
const INSTRUMENTS: &[&str] = &["piano", "guitar", "strings", "synth", "drums", "brass", "erhu", "vocal"];
const SCENARIOS: &[&str] = &[
    "workout", "study", "commute", "party", "sleep", "rainy_day", "roadtrip", "trending",
];
const REGIONS: &[&str] = &["mainland", "hongkong", "taiwan", "japan", "korea", "western"];

/// Value index of era `2020s`; never assigned to in-corpus songs.
pub const EXCLUSIVE_ERA: u8 = 5;
/// Value index of scenario `trending`; never assigned to in-corpus songs.
pub const EXCLUSIVE_SCENARIO: u8 = 7;

impl Dim {
    pub const ALL: [Dim; 8] = [
        Dim::Genre,
        Dim::Mood,
        Dim::Language,
        Dim::TempoBucket,
        Dim::Era,
        Dim::Instrument,
        Dim::Scenario,
        Dim::Region,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Dim::Genre => "genre",
            Dim::Mood => "mood",
            Dim::Language => "language",
            Dim::TempoBucket => "tempo_bucket",
            Dim::Era => "era",
            Dim::Instrument => "instrument",
            Dim::Scenario => "scenario",
            Dim::Region => "region",
        }
    }

    pub fn from_name(name: &str) -> Option<Dim> {
        Dim::ALL.into_iter().find(|d| d.name() == name)
    }

    pub fn alphabet(self) -> &'static [&'static str] {
        match self {
            Dim::Genre => GENRES,
            Dim::Mood => MOODS,
            Dim::Language => LANGUAGES,
            Dim::TempoBucket => TEMPOS,
            Dim::Era => ERAS,
            Dim::Instrument => INSTRUMENTS,
            Dim::Scenario => SCENARIOS,
            Dim::Region => REGIONS,
        }
    }

    pub fn value_index(self, value: &str) -> Option<u8> {
        self.alphabet().iter().position(|v| *v == value).map(|i| i as u8)
    }

    /// Offset of this dimension's block in the concatenated one-hot vector.
    pub fn offset(self) -> usize {
        Dim::ALL[..self.index()].iter().map(|d| d.alphabet().len()).sum()
    }

    fn exclusive_value(self) -> Option<u8> {
        match self {
            Dim::Era => Some(EXCLUSIVE_ERA),
            Dim::Scenario => Some(EXCLUSIVE_SCENARIO),
            _ => None,
        }
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Length of the attribute one-hot space (all alphabets concatenated).
pub fn attribute_space_len() -> usize {
    Dim::ALL.iter().map(|d| d.alphabet().len()).sum()
}

/// One categorical value per dimension, indexed by `Dim::index`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Attributes(pub [u8; 8]);

impl Attributes {
    pub fn get(&self, dim: Dim) -> u8 {
        self.0[dim.index()]
    }

    pub fn value_name(&self, dim: Dim) -> &'static str {
        dim.alphabet()[self.get(dim) as usize]
    }

    pub fn satisfies(&self, c: &Constraint) -> bool {
        self.get(c.dim) == c.value
    }

    pub fn match_count(&self, constraints: &[Constraint]) -> usize {
        constraints.iter().filter(|c| self.satisfies(c)).count()
    }

    pub fn satisfies_all(&self, constraints: &[Constraint]) -> bool {
        constraints.iter().all(|c| self.satisfies(c))
    }

    /// Indices of the active entries in the one-hot attribute vector.
    pub fn one_hot_indices(&self) -> [usize; 8] {
        let mut out = [0; 8];
        for d in Dim::ALL {
            out[d.index()] = d.offset() + self.get(d) as usize;
        }
        out
    }

    /// L2-normalized one-hot vector (8 active entries of 1/sqrt(8)).
    pub fn unit_vector(&self) -> Vec<f64> {
        let mut v = vec![0.0; attribute_space_len()];
        let w = 1.0 / (Dim::ALL.len() as f64).sqrt();
        for i in self.one_hot_indices() {
            v[i] = w;
        }
        v
    }
}

impl Serialize for Attributes {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(8))?;
        for d in Dim::ALL {
            map.serialize_entry(d.name(), self.value_name(d))?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Attributes {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = BTreeMap::<String, String>::deserialize(deserializer)?;
        let mut out = [0u8; 8];
        for d in Dim::ALL {
            let v = raw
                .get(d.name())
                .ok_or_else(|| de::Error::custom(format!("missing attribute {}", d.name())))?;
            out[d.index()] = d
                .value_index(v)
                .ok_or_else(|| de::Error::custom(format!("unknown {} value {v}", d.name())))?;
        }
        if raw.len() != 8 {
            return Err(de::Error::custom("unexpected attribute dimension"));
        }
        Ok(Attributes(out))
    }
}

/// A required `(dimension, value)` predicate of a query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Constraint {
    pub dim: Dim,
    pub value: u8,
}

impl Constraint {
    pub fn new(dim: Dim, value: &str) -> Result<Self> {
        let v = dim
            .value_index(value)
            .ok_or_else(|| invalid_input(format!("unknown {dim} value {value}")))?;
        Ok(Constraint { dim, value: v })
    }

    pub fn value_name(&self) -> &'static str {
        self.dim.alphabet()[self.value as usize]
    }
}

impl Serialize for Constraint {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        (self.dim.name(), self.value_name()).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Constraint {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let (dim, value) = <(String, String)>::deserialize(deserializer)?;
        let dim = Dim::from_name(&dim).ok_or_else(|| de::Error::custom(format!("unknown dimension {dim}")))?;
        Constraint::new(dim, &value).map_err(de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SongId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryId(pub u32);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Song {
    pub song_id: SongId,
    pub title: String,
    pub artist: String,
    pub attributes: Attributes,
    pub popularity: f64,
    pub in_corpus: bool,
}

/// The factual entity universe. Lookups by `(title, artist)` are exact.
#[derive(Clone, Debug)]
pub struct Catalog {
    songs: Vec<Song>,
    by_ref: HashMap<(String, String), SongId>,
}

impl PartialEq for Catalog {
    fn eq(&self, other: &Self) -> bool {
        self.songs == other.songs
    }
}

impl Catalog {
    /// Builds a catalog; song ids must equal their position.
    pub fn from_songs(songs: Vec<Song>) -> Result<Self> {
        let mut by_ref = HashMap::with_capacity(songs.len());
        for (i, s) in songs.iter().enumerate() {
            if s.song_id.0 as usize != i {
                return Err(invalid_input(format!("song id {} at position {i}", s.song_id.0)));
            }
            if !(0.0..=1.0).contains(&s.popularity) {
                return Err(invalid_input(format!("popularity {} out of [0,1]", s.popularity)));
            }
            if by_ref.insert((s.title.clone(), s.artist.clone()), s.song_id).is_some() {
                return Err(invalid_input(format!("duplicate song ({}, {})", s.title, s.artist)));
            }
        }
        Ok(Catalog { songs, by_ref })
    }

    pub fn songs(&self) -> &[Song] {
        &self.songs
    }

    pub fn len(&self) -> usize {
        self.songs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.songs.is_empty()
    }

    pub fn get(&self, id: SongId) -> &Song {
        &self.songs[id.0 as usize]
    }

    pub fn lookup(&self, title: &str, artist: &str) -> Option<&Song> {
        self.by_ref
            .get(&(title.to_string(), artist.to_string()))
            .map(|id| self.get(*id))
    }

    pub fn in_corpus(&self) -> impl Iterator<Item = &Song> {
        self.songs.iter().filter(|s| s.in_corpus)
    }

    pub fn satisfying<'a>(&'a self, constraints: &'a [Constraint]) -> impl Iterator<Item = &'a Song> + 'a {
        self.songs.iter().filter(move |s| s.attributes.satisfies_all(constraints))
    }

    /// True iff no in-corpus song satisfies every constraint.
    pub fn is_out_of_knowledge(&self, constraints: &[Constraint]) -> bool {
        !self.in_corpus().any(|s| s.attributes.satisfies_all(constraints))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatalogConfig {
    pub n_songs: usize,
    pub in_corpus_fraction: f64,
    /// Probability that an out-of-corpus song carries era `2020s`.
    pub fresh_era_prob: f64,
    /// Probability that an out-of-corpus song carries scenario `trending`.
    pub trending_prob: f64,
    /// Tail exponent of the truncated power law behind popularity.
    pub popularity_exponent: f64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        CatalogConfig {
            n_songs: 1000,
            in_corpus_fraction: 0.7,
            fresh_era_prob: 0.5,
            trending_prob: 0.4,
            popularity_exponent: 1.5,
        }
    }
}

const TITLE_ADJ: &[&str] = &[
    "Crimson", "Silent", "Golden", "Electric", "Hollow", "Velvet", "Midnight", "Paper", "Neon", "Wild",
    "Distant", "Broken", "Gentle", "Lunar", "Frozen", "Burning", "Secret", "Lonely", "Silver", "Empty",
    "Sweet", "Restless", "Faded", "Endless", "Quiet", "Bright", "Scarlet", "Autumn", "Summer", "Winter",
    "Ocean", "Desert", "Glass", "Iron", "Falling", "Rising", "Fragile", "Hidden", "Wandering", "Common",
];
const TITLE_NOUN: &[&str] = &[
    "Harbor", "Jasmine", "Orange", "River", "Window", "Letter", "Garden", "Echo", "Mirror", "Station",
    "Lantern", "Highway", "Dream", "Promise", "Shadow", "Horizon", "Rain", "Memory", "Tide", "Forest",
    "Heart", "City", "Bridge", "Morning", "Flame", "Compass", "Island", "Feather", "Thunder", "Melody",
    "Whisper", "Season", "Candle", "Valley", "Sparrow", "Carousel", "Moonlight", "Postcard", "Runway", "Tea",
];
const ARTIST_FAMILY: &[&str] = &[
    "Lin", "Chen", "Wang", "Zhou", "Tanaka", "Kim", "Park", "Lee", "Wu", "Huang", "Sato", "Choi",
    "Moreau", "Silva", "Novak", "Reyes", "Hughes", "Fischer", "Kovacs", "Ito", "Zhang", "Liu", "Ma", "Xu",
];
const ARTIST_GIVEN: &[&str] = &[
    "Yue", "Wei", "Jay", "Mina", "Hana", "Leo", "Sora", "Nora", "Kai", "Ivy", "Ray", "Lan", "Tao",
    "Yuna", "Eli", "Mei", "Jin", "Aya", "Rio", "Zoe", "Ming", "Sean", "Lila", "Ren",
];

/// Truncated power law on `[1, 100]`, rescaled to `[0, 1]`.
fn sample_popularity(rng: &mut Rng, exponent: f64) -> f64 {
    let xmax: f64 = 100.0;
    let u: f64 = rng.random();
    let a = exponent;
    // Inverse CDF of a Pareto(a) density truncated to [1, xmax].
    let tail = 1.0 - u * (1.0 - xmax.powf(-a));
    let x = tail.powf(-1.0 / a);
    ((x - 1.0) / (xmax - 1.0)).clamp(0.0, 1.0)
}

pub fn gen_catalog(seed: u64, n_songs: usize, in_corpus_fraction: f64) -> Result<Catalog> {
    gen_catalog_with(
        seed,
        &CatalogConfig {
            n_songs,
            in_corpus_fraction,
            ..CatalogConfig::default()
        },
    )
}

pub fn gen_catalog_with(seed: u64, cfg: &CatalogConfig) -> Result<Catalog> {
    if cfg.n_songs < 10 {
        return Err(invalid_config(format!("n_songs must be >= 10, got {}", cfg.n_songs)));
    }
    if !(cfg.in_corpus_fraction > 0.0 && cfg.in_corpus_fraction < 1.0) {
        return Err(invalid_config(format!(
            "in_corpus_fraction must lie in (0,1), got {}",
            cfg.in_corpus_fraction
        )));
    }
    for (name, p) in [("fresh_era_prob", cfg.fresh_era_prob), ("trending_prob", cfg.trending_prob)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(invalid_config(format!("{name} must lie in [0,1], got {p}")));
        }
    }
    let mut rng = rng::stream(seed, "catalog", 0);
    let n = cfg.n_songs;
    let n_in = (cfg.in_corpus_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut in_corpus = vec![false; n];
    for &i in &order[..n_in] {
        in_corpus[i] = true;
    }

    let n_artists = (n / 6).clamp(10, ARTIST_FAMILY.len() * ARTIST_GIVEN.len());
    let mut artists: Vec<String> = ARTIST_FAMILY
        .iter()
        .flat_map(|f| ARTIST_GIVEN.iter().map(move |g| format!("{f} {g}")))
        .collect();
    artists.shuffle(&mut rng);
    artists.truncate(n_artists);

    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    let mut songs = Vec::with_capacity(n);
    for (i, &inc) in in_corpus.iter().enumerate() {
        let artist = artists.choose(&mut rng).expect("artist pool nonempty").clone();
        let mut title = format!(
            "{} {}",
            TITLE_ADJ.choose(&mut rng).unwrap(),
            TITLE_NOUN.choose(&mut rng).unwrap()
        );
        let mut attempt = 0;
        while seen.contains(&(title.clone(), artist.clone())) {
            attempt += 1;
            title = if attempt < 20 {
                format!("{} {}", TITLE_ADJ.choose(&mut rng).unwrap(), TITLE_NOUN.choose(&mut rng).unwrap())
            } else {
                format!("{} {}", title, attempt)
            };
        }
        seen.insert((title.clone(), artist.clone()));

        let mut attrs = [0u8; 8];
        for d in Dim::ALL {
            let k = d.alphabet().len() as u8;
            attrs[d.index()] = match d.exclusive_value() {
                Some(ex) => {
                    let p = if d == Dim::Era { cfg.fresh_era_prob } else { cfg.trending_prob };
                    if !inc && rng.random::<f64>() < p {
                        ex
                    } else {
                        // Uniform over the non-exclusive values.
                        let v = rng.random_range(0..k - 1);
                        if v >= ex { v + 1 } else { v }
                    }
                }
                None => rng.random_range(0..k),
            };
        }
        songs.push(Song {
            song_id: SongId(i as u32),
            title,
            artist,
            attributes: Attributes(attrs),
            popularity: sample_popularity(&mut rng, cfg.popularity_exponent),
            in_corpus: inc,
        });
    }
    Catalog::from_songs(songs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: UserId,
    pub demographics: BTreeMap<String, String>,
    pub liked: BTreeSet<SongId>,
    pub completed: BTreeSet<SongId>,
    pub preference_vector: Vec<f64>,
}

impl UserProfile {
    /// Cosine between the preference vector and a song's unit attribute vector.
    pub fn preference_cosine(&self, attrs: &Attributes) -> f64 {
        let w = 1.0 / (Dim::ALL.len() as f64).sqrt();
        attrs
            .one_hot_indices()
            .iter()
            .map(|&i| self.preference_vector[i] * w)
            .sum()
    }
}

/// L2-normalized mean of the unit attribute vectors of `songs`.
pub fn preference_from_history(catalog: &Catalog, songs: impl IntoIterator<Item = SongId>) -> Vec<f64> {
    let mut v = vec![0.0; attribute_space_len()];
    let mut count = 0usize;
    for id in songs {
        for i in catalog.get(id).attributes.one_hot_indices() {
            v[i] += 1.0;
        }
        count += 1;
    }
    if count == 0 {
        return v;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

const AGE_BUCKETS: &[&str] = &["18-24", "25-34", "35-44", "45+"];
const GENDERS: &[&str] = &["female", "male", "unspecified"];
const EDUCATION: &[&str] = &["secondary", "bachelor", "graduate"];

pub fn gen_users(seed: u64, catalog: &Catalog, n_users: usize, likes_per_user: usize) -> Result<Vec<UserProfile>> {
    if catalog.is_empty() {
        return Err(invalid_input("catalog is empty"));
    }
    if likes_per_user == 0 {
        return Err(invalid_config("likes_per_user must be >= 1"));
    }
    let songs = catalog.songs();
    (0..n_users)
        .map(|u| {
            let mut rng = rng::stream(seed, "users", u as u64);
            let anchor = songs.choose(&mut rng).unwrap();
            let fav = [
                Constraint { dim: Dim::Genre, value: anchor.attributes.get(Dim::Genre) },
                Constraint { dim: Dim::Mood, value: anchor.attributes.get(Dim::Mood) },
            ];
            let taste: Vec<SongId> = songs
                .iter()
                .filter(|s| s.attributes.match_count(&fav) > 0)
                .map(|s| s.song_id)
                .collect();
            let draw = |rng: &mut Rng, n: usize| -> BTreeSet<SongId> {
                let n = n.min(songs.len());
                let mut out = BTreeSet::new();
                while out.len() < n {
                    let id = if rng.random::<f64>() < 0.8 && !taste.is_empty() {
                        *taste.choose(rng).unwrap()
                    } else {
                        songs.choose(rng).unwrap().song_id
                    };
                    out.insert(id);
                }
                out
            };
            let liked = draw(&mut rng, likes_per_user);
            let completed = draw(&mut rng, likes_per_user.div_ceil(2));
            let preference_vector = preference_from_history(catalog, liked.union(&completed).copied());
            let region = anchor.attributes.value_name(Dim::Region).to_string();
            let demographics = BTreeMap::from([
                ("age_bucket".to_string(), AGE_BUCKETS.choose(&mut rng).unwrap().to_string()),
                ("gender".to_string(), GENDERS.choose(&mut rng).unwrap().to_string()),
                ("region".to_string(), region),
                ("education".to_string(), EDUCATION.choose(&mut rng).unwrap().to_string()),
            ]);
            Ok(UserProfile {
                user_id: UserId(u as u32),
                demographics,
                liked,
                completed,
                preference_vector,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchQuery {
    pub query_id: QueryId,
    pub constraints: Vec<Constraint>,
    pub level: u8,
    pub ood: bool,
    pub intention_label: Intention,
    pub user_id: UserId,
    pub surface_text: String,
}

/// Level implied by a constraint count: 1, 2, or 3 for anything larger.
pub fn level_for(n_constraints: usize) -> u8 {
    match n_constraints {
        0 | 1 => 1,
        2 => 2,
        _ => 3,
    }
}

/// Templated request text; constraints appear in canonical dimension order.
pub fn render_surface_text(constraints: &[Constraint]) -> String {
    let find = |d: Dim| constraints.iter().find(|c| c.dim == d).map(|c| c.value_name().replace('_', " "));
    let mut s = String::from("find me a");
    for d in [Dim::Mood, Dim::TempoBucket, Dim::Genre] {
        if let Some(v) = find(d) {
            s.push(' ');
            s.push_str(&v);
        }
    }
    s.push_str(" song");
    if let Some(v) = find(Dim::Language) {
        s.push_str(&format!(" in {v}"));
    }
    if let Some(v) = find(Dim::Instrument) {
        s.push_str(&format!(" with {v}"));
    }
    if let Some(v) = find(Dim::Era) {
        s.push_str(&format!(" from the {v}"));
    }
    if let Some(v) = find(Dim::Region) {
        s.push_str(&format!(" by a {v} artist"));
    }
    if let Some(v) = find(Dim::Scenario) {
        s.push_str(&format!(" for {v}"));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryConfig {
    pub n_queries: usize,
    pub level_mix: [f64; 3],
    pub ood_fraction: f64,
    /// Constraint count used for level-3 queries.
    pub level3_constraints: usize,
}

impl Default for QueryConfig {
    fn default() -> Self {
        QueryConfig {
            n_queries: 500,
            level_mix: [0.4, 0.35, 0.25],
            ood_fraction: 0.3,
            level3_constraints: 3,
        }
    }
}

/// Splits `n` into integer counts proportional to `weights` (largest remainder).
pub(crate) fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest: Vec<(usize, f64)> = raw.iter().enumerate().map(|(i, r)| (i, r - r.floor())).collect();
    rest.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut missing = n - counts.iter().sum::<usize>();
    for (i, _) in rest {
        if missing == 0 {
            break;
        }
        counts[i] += 1;
        missing -= 1;
    }
    counts
}

pub fn gen_queries(
    seed: u64,
    catalog: &Catalog,
    users: &[UserProfile],
    n_queries: usize,
    level_mix: [f64; 3],
    ood_fraction: f64,
) -> Result<Vec<BenchQuery>> {
    gen_queries_with(
        seed,
        catalog,
        users,
        &QueryConfig {
            n_queries,
            level_mix,
            ood_fraction,
            ..QueryConfig::default()
        },
    )
}

pub fn gen_queries_with(seed: u64, catalog: &Catalog, users: &[UserProfile], cfg: &QueryConfig) -> Result<Vec<BenchQuery>> {
    let mix_sum: f64 = cfg.level_mix.iter().sum();
    if (mix_sum - 1.0).abs() > 1e-9 || cfg.level_mix.iter().any(|w| *w < 0.0) {
        return Err(invalid_config(format!("level_mix must be nonnegative and sum to 1, got {:?}", cfg.level_mix)));
    }
    if !(0.0..=1.0).contains(&cfg.ood_fraction) {
        return Err(invalid_config(format!("ood_fraction must lie in [0,1], got {}", cfg.ood_fraction)));
    }
    if cfg.level3_constraints < 3 || cfg.level3_constraints > Dim::ALL.len() {
        return Err(invalid_config("level3_constraints must lie in [3, 8]"));
    }
    if users.is_empty() || catalog.is_empty() {
        return Err(invalid_input("queries need a nonempty catalog and user list"));
    }
    let mut rng = rng::stream(seed, "queries", 0);
    let counts = apportion(cfg.n_queries, &cfg.level_mix);
    let mut slots: Vec<(u8, bool)> = Vec::with_capacity(cfg.n_queries);
    for (li, &c) in counts.iter().enumerate() {
        slots.extend(std::iter::repeat_n(((li + 1) as u8, false), c));
    }
    slots.shuffle(&mut rng);
    let n_ood = (cfg.ood_fraction * cfg.n_queries as f64).round() as usize;
    for s in slots.iter_mut().take(n_ood) {
        s.1 = true;
    }

    let in_songs: Vec<&Song> = catalog.in_corpus().collect();
    let out_songs: Vec<&Song> = catalog.songs().iter().filter(|s| !s.in_corpus).collect();

    slots
        .iter()
        .enumerate()
        .map(|(qi, &(level, want_ood))| {
            let mut qrng = rng::stream(seed, "query", qi as u64);
            let n_constraints = match level {
                1 => 1,
                2 => 2,
                _ => cfg.level3_constraints,
            };
            let pool = if want_ood { &out_songs } else { &in_songs };
            if pool.is_empty() {
                return Err(Error::GenerationExhausted(format!("query {qi}: empty anchor pool")));
            }
            for _ in 0..100 {
                let anchor = pool.choose(&mut qrng).unwrap();
                let mut dims = Dim::ALL.to_vec();
                dims.shuffle(&mut qrng);
                let mut constraints: Vec<Constraint> = dims[..n_constraints]
                    .iter()
                    .map(|&d| Constraint { dim: d, value: anchor.attributes.get(d) })
                    .collect();
                constraints.sort();
                if catalog.satisfying(&constraints).next().is_none() {
                    continue;
                }
                let ood = catalog.is_out_of_knowledge(&constraints);
                if ood != want_ood {
                    continue;
                }
                let user = users.choose(&mut qrng).unwrap();
                return Ok(BenchQuery {
                    query_id: QueryId(qi as u32),
                    surface_text: render_surface_text(&constraints),
                    level: level_for(constraints.len()),
                    ood,
                    constraints,
                    intention_label: Intention::SongSearch,
                    user_id: user.user_id,
                });
            }
            Err(Error::GenerationExhausted(format!(
                "query {qi}: no level-{level} constraint set with ood={want_ood} after 100 attempts"
            )))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionReport {
    #[serde(rename = "in")]
    pub in_knowledge: usize,
    #[serde(rename = "out")]
    pub out_of_knowledge: usize,
}

pub fn partition_report(_catalog: &Catalog, queries: &[BenchQuery]) -> PartitionReport {
    let out = queries.iter().filter(|q| q.ood).count();
    PartitionReport {
        in_knowledge: queries.len() - out,
        out_of_knowledge: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> (Catalog, Vec<UserProfile>) {
        let cat = gen_catalog(7, 1000, 0.7).unwrap();
        let users = gen_users(7, &cat, 50, 6).unwrap();
        (cat, users)
    }

    #[test]
    fn catalog_in_corpus_count_and_determinism() {
        let a = gen_catalog(7, 1000, 0.7).unwrap();
        assert_eq!(a.in_corpus().count(), 700);
        let b = gen_catalog(7, 1000, 0.7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_catalog(8, 1000, 0.7).unwrap());
    }

    #[test]
    fn catalog_pairs_unique_by_pairwise_scan() {
        let cat = gen_catalog(7, 1000, 0.7).unwrap();
        let s = cat.songs();
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                assert!(!(s[i].title == s[j].title && s[i].artist == s[j].artist), "{i} {j}");
            }
        }
    }

    #[test]
    fn catalog_rejects_bad_config() {
        assert!(matches!(gen_catalog(1, 9, 0.5), Err(Error::InvalidConfig(_))));
        assert!(matches!(gen_catalog(1, 100, 0.0), Err(Error::InvalidConfig(_))));
        assert!(matches!(gen_catalog(1, 100, 1.0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn exclusive_values_only_out_of_corpus() {
        let cat = gen_catalog(3, 1000, 0.7).unwrap();
        for s in cat.in_corpus() {
            assert_ne!(s.attributes.get(Dim::Era), EXCLUSIVE_ERA);
            assert_ne!(s.attributes.get(Dim::Scenario), EXCLUSIVE_SCENARIO);
        }
        assert!(cat.songs().iter().any(|s| s.attributes.get(Dim::Era) == EXCLUSIVE_ERA));
        assert!(cat.songs().iter().all(|s| (0.0..=1.0).contains(&s.popularity)));
    }

    #[test]
    fn singleton_history_preference_is_song_unit_vector() {
        let cat = gen_catalog(7, 100, 0.7).unwrap();
        let pref = preference_from_history(&cat, [SongId(3)]);
        let unit = cat.get(SongId(3)).attributes.unit_vector();
        for (a, b) in pref.iter().zip(&unit) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn users_have_unit_preferences_and_are_deterministic() {
        let (cat, users) = world();
        for u in &users {
            let n = u.preference_vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
            assert!(!u.liked.is_empty());
            assert!(u.liked.iter().chain(&u.completed).all(|id| (id.0 as usize) < cat.len()));
        }
        assert_eq!(users, gen_users(7, &cat, 50, 6).unwrap());
        let hundred = gen_users(11, &cat, 100, 4).unwrap();
        assert_eq!(hundred, gen_users(11, &cat, 100, 4).unwrap());
    }

    #[test]
    fn users_reject_empty_catalog() {
        let empty = Catalog::from_songs(vec![]).unwrap();
        assert!(matches!(gen_users(1, &empty, 3, 2), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn level_follows_constraint_count() {
        let rock = Constraint::new(Dim::Genre, "rock").unwrap();
        let sad = Constraint::new(Dim::Mood, "sad").unwrap();
        let nineties = Constraint::new(Dim::Era, "1990s").unwrap();
        assert_eq!(level_for([rock].len()), 1);
        assert_eq!(level_for([rock, sad].len()), 2);
        assert_eq!(level_for([rock, sad, nineties].len()), 3);
        assert_eq!(render_surface_text(&[sad, rock, nineties]), "find me a sad rock song from the 1990s");
    }

    #[test]
    fn queries_respect_mix_and_boundary() {
        let (cat, users) = world();
        let qs = gen_queries(5, &cat, &users, 200, [0.4, 0.35, 0.25], 0.3).unwrap();
        assert_eq!(qs.len(), 200);
        let per_level = |l| qs.iter().filter(|q| q.level == l).count();
        assert_eq!((per_level(1), per_level(2), per_level(3)), (80, 70, 50));
        assert_eq!(qs.iter().filter(|q| q.ood).count(), 60);
        for q in &qs {
            let in_hits = cat
                .songs()
                .iter()
                .filter(|s| s.in_corpus && q.constraints.iter().all(|c| s.attributes.get(c.dim) == c.value))
                .count();
            assert_eq!(q.ood, in_hits == 0, "query {:?}", q.query_id);
            assert!(cat.satisfying(&q.constraints).next().is_some());
            assert_eq!(q.level, level_for(q.constraints.len()));
            assert_eq!(q.surface_text, render_surface_text(&q.constraints));
        }
        assert_eq!(qs, gen_queries(5, &cat, &users, 200, [0.4, 0.35, 0.25], 0.3).unwrap());
    }

    #[test]
    fn queries_reject_bad_mix() {
        let (cat, users) = world();
        assert!(gen_queries(5, &cat, &users, 10, [0.5, 0.5, 0.5], 0.3).is_err());
        assert!(gen_queries(5, &cat, &users, 10, [0.4, 0.3, 0.3], 1.5).is_err());
    }

    #[test]
    fn partition_counts() {
        let (cat, users) = world();
        assert_eq!(partition_report(&cat, &[]), PartitionReport { in_knowledge: 0, out_of_knowledge: 0 });
        let qs = gen_queries(9, &cat, &users, 100, [0.4, 0.35, 0.25], 0.3).unwrap();
        let rep = partition_report(&cat, &qs);
        assert_eq!(rep, PartitionReport { in_knowledge: 70, out_of_knowledge: 30 });
        let recount = qs.iter().filter(|q| cat.is_out_of_knowledge(&q.constraints)).count();
        assert_eq!(recount, rep.out_of_knowledge);
    }

    #[test]
    fn apportion_is_exact() {
        assert_eq!(apportion(10, &[0.5, 0.25, 0.25]), vec![5, 3, 2]);
        assert_eq!(apportion(7, &[1.0 / 3.0; 3]).iter().sum::<usize>(), 7);
    }
}
