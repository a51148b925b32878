//! Experiment configuration: one TOML file with sections, dotted-key
//! overrides and a seed override from the environment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::boundary::BoundaryConfig;
use crate::cptlab::{CorpusConfig, CptConfig};
use crate::distill::{BoundaryLabelConfig, DatasetConfig, DistillConfig};
use crate::env::WorldConfig;
use crate::error::{invalid_config, Error, Result};
use crate::grpo::TrainConfig;
use crate::policy::ModeControl;
use crate::rewards::{validate_gamma, RelevanceWeights};
use crate::sft::SftConfig;

pub const SEED_ENV: &str = "BOUNDARY_LAB_SEED";

/// Reward parameters shared by every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    /// Relevance weights (need fit, text-need, text-entity).
    pub lambda: [f64; 3],
    pub alpha: f64,
    pub gamma: f64,
    pub threshold: f64,
    pub n_max: usize,
    /// Rollouts per group (L).
    pub group_size: usize,
    /// Songs per list and completions per diversity score (K).
    pub k: usize,
}

impl Default for RewardSection {
    fn default() -> Self {
        RewardSection { lambda: [0.5, 0.25, 0.25], alpha: 0.1, gamma: 0.8, threshold: 0.6, n_max: 5, group_size: 8, k: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub clip_range: f64,
    pub batch_queries: usize,
}

impl Default for BaseSection {
    fn default() -> Self {
        BaseSection { steps: 200, learning_rate: 0.05, clip_range: 0.2, batch_queries: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub max_rounds: usize,
    pub per_round: usize,
    pub sft: SftConfig,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection { max_rounds: 3, per_round: 5, sft: SftConfig { epochs: 8, learning_rate: 0.5, ..SftConfig::default() } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundarySection {
    pub batch_queries: usize,
    pub learning_rate: f64,
    pub clip_range: f64,
    pub zero_steps: usize,
    pub controllable_steps: usize,
    pub upper_steps: usize,
    pub probe_group_size: usize,
    pub balance_labels: bool,
    pub label_rollouts: usize,
    pub dataset: DatasetConfig,
    pub sft: SftConfig,
}

impl Default for BoundarySection {
    fn default() -> Self {
        let b = BoundaryConfig::default();
        BoundarySection {
            batch_queries: b.batch_queries,
            learning_rate: b.learning_rate,
            clip_range: b.clip_range,
            zero_steps: b.zero_steps,
            controllable_steps: b.controllable_steps,
            upper_steps: b.upper_steps,
            probe_group_size: b.probe_group_size,
            balance_labels: b.balance_labels,
            label_rollouts: b.label.n_rollouts,
            dataset: b.dataset,
            sft: b.sft,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CptlabSection {
    pub corpus: CorpusConfig,
    pub model: CptConfig,
    pub seeds: usize,
    pub kl_coeff: f64,
    pub sweep_ratios: Vec<f64>,
    pub sweep_seeds: usize,
    pub pair_songs: usize,
    pub pair_words: usize,
}

impl Default for CptlabSection {
    fn default() -> Self {
        CptlabSection {
            corpus: CorpusConfig::default(),
            model: CptConfig::default(),
            seeds: 5,
            kl_coeff: 1.0,
            sweep_ratios: vec![0.1, 0.25, 0.5, 0.75, 1.0],
            sweep_seeds: 3,
            pair_songs: 300,
            pair_words: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub diversity_temperature: f64,
    /// Extra temperatures reported alongside the main run.
    pub temperatures: Vec<f64>,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection { diversity_temperature: 1.0, temperatures: vec![0.5, 0.7, 1.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReproSection {
    /// Criteria to run; empty means all.
    pub criteria: Vec<u8>,
    pub oracle_groups: usize,
    pub diversity_histories: usize,
    pub alpha_seeds: usize,
    pub alpha_steps: usize,
    pub distill_samples: usize,
}

impl Default for ReproSection {
    fn default() -> Self {
        ReproSection {
            criteria: Vec::new(),
            oracle_groups: 1000,
            diversity_histories: 500,
            alpha_seeds: 5,
            alpha_steps: 200,
            distill_samples: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub world: WorldConfig,
    pub reward: RewardSection,
    pub base: BaseSection,
    pub distill: DistillSection,
    pub boundary: BoundarySection,
    pub cptlab: CptlabSection,
    pub bench: BenchSection,
    pub repro: ReproSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 1,
            out_dir: PathBuf::from("runs"),
            world: WorldConfig::default(),
            reward: RewardSection::default(),
            base: BaseSection::default(),
            distill: DistillSection::default(),
            boundary: BoundarySection::default(),
            cptlab: CptlabSection::default(),
            bench: BenchSection::default(),
            repro: ReproSection::default(),
        }
    }
}

fn field(section: &str, e: Error) -> Error {
    match e {
        Error::InvalidConfig(m) if m.starts_with(section) => Error::InvalidConfig(m),
        Error::InvalidConfig(m) => Error::InvalidConfig(format!("[{section}] {m}")),
        other => other,
    }
}

impl ExperimentConfig {
    /// Parses TOML text, applies `section.key=value` overrides, then the
    /// seed variable when `use_env` is set, and validates.
    pub fn from_toml_str(text: &str, overrides: &[String], use_env: bool) -> Result<Self> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| invalid_config(format!("config parse error: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: ExperimentConfig =
            value.try_into().map_err(|e: toml::de::Error| invalid_config(format!("config error: {e}")))?;
        if use_env {
            if let Ok(s) = std::env::var(SEED_ENV) {
                cfg.master_seed =
                    s.trim().parse().map_err(|_| invalid_config(format!("{SEED_ENV} must be an integer, got {s:?}")))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// A missing path means defaults.
    pub fn load(path: Option<&Path>, overrides: &[String], use_env: bool) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|_| Error::MissingArtifact(format!("config file {}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides, use_env)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate().map_err(|e| field("world", e))?;
        let r = &self.reward;
        RelevanceWeights::new(r.lambda[0], r.lambda[1], r.lambda[2]).map_err(|e| field("reward.lambda", e))?;
        if !(0.0..1.0).contains(&r.alpha) {
            return Err(invalid_config(format!("reward.alpha must lie in [0,1), got {}", r.alpha)));
        }
        validate_gamma(r.gamma).map_err(|_| invalid_config(format!("reward.gamma must lie in (0, 1], got {}", r.gamma)))?;
        if r.n_max == 0 || r.k == 0 {
            return Err(invalid_config("reward.n_max and reward.k must be >= 1"));
        }
        if r.k < 2 {
            return Err(invalid_config("reward.k must be >= 2 for the diversity score"));
        }
        self.base_train().validate().map_err(|e| field("base", e))?;
        self.distill().validate().map_err(|e| field("distill", e))?;
        self.distill.sft.validate().map_err(|e| field("distill", e))?;
        self.boundary_config().validate().map_err(|e| field("boundary", e))?;
        self.cptlab.corpus.validate().map_err(|e| field("cptlab.corpus", e))?;
        self.cptlab.model.validate().map_err(|e| field("cptlab.model", e))?;
        if self.cptlab.seeds == 0 || self.cptlab.sweep_seeds == 0 {
            return Err(invalid_config("cptlab.seeds and cptlab.sweep_seeds must be >= 1"));
        }
        if !(self.cptlab.kl_coeff > 0.0) {
            return Err(invalid_config("cptlab.kl_coeff must be > 0"));
        }
        let ratios = &self.cptlab.sweep_ratios;
        if ratios.len() < 2 || ratios.iter().any(|x| !(*x > 0.0 && *x <= 1.0)) || ratios.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid_config("cptlab.sweep_ratios must be >= 2 ascending values in (0,1]"));
        }
        self.bench_config(ModeControl::Free).validate().map_err(|e| field("bench", e))?;
        if self.bench.temperatures.iter().any(|t| !(*t > 0.0)) {
            return Err(invalid_config("bench.temperatures must be > 0"));
        }
        if let Some(c) = self.repro.criteria.iter().find(|c| !(1..=13).contains(*c)) {
            return Err(invalid_config(format!("repro.criteria: no criterion {c}")));
        }
        Ok(())
    }

    pub fn relevance_weights(&self) -> RelevanceWeights {
        let l = self.reward.lambda;
        RelevanceWeights { need_fit: l[0], text_need: l[1], text_entity: l[2] }
    }

    pub fn base_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.master_seed,
            batch_queries: self.base.batch_queries,
            group_size: self.reward.group_size,
            n_songs: 1,
            learning_rate: self.base.learning_rate,
            clip_range: self.base.clip_range,
            ..TrainConfig::default()
        }
    }

    pub fn distill(&self) -> DistillConfig {
        DistillConfig { k: self.reward.k, max_rounds: self.distill.max_rounds, per_round: self.distill.per_round }
    }

    pub fn distill_sft(&self) -> SftConfig {
        SftConfig { seed: self.master_seed, ..self.distill.sft.clone() }
    }

    pub fn boundary_config(&self) -> BoundaryConfig {
        let b = &self.boundary;
        BoundaryConfig {
            seed: self.master_seed,
            gamma: self.reward.gamma,
            n_max: self.reward.n_max,
            n_songs: self.reward.k,
            group_size: self.reward.group_size,
            batch_queries: b.batch_queries,
            learning_rate: b.learning_rate,
            clip_range: b.clip_range,
            zero_steps: b.zero_steps,
            controllable_steps: b.controllable_steps,
            upper_steps: b.upper_steps,
            probe_group_size: b.probe_group_size,
            balance_labels: b.balance_labels,
            label: BoundaryLabelConfig { threshold: self.reward.threshold, n_rollouts: b.label_rollouts, n_songs: self.reward.k },
            dataset: DatasetConfig { seed: self.master_seed, ..b.dataset.clone() },
            sft: b.sft.clone(),
        }
    }

    pub fn bench_config(&self, mode_control: ModeControl) -> BenchConfig {
        BenchConfig {
            seed: self.master_seed,
            n_songs: self.reward.k,
            hit_k: 5,
            diversity_k: self.reward.k,
            diversity_temperature: self.bench.diversity_temperature,
            mode_control,
        }
    }

    pub fn cpt_model(&self) -> CptConfig {
        self.cptlab.model.clone()
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    // Any TOML literal, else a bare string.
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `section.key=value` override to a parsed document.
pub fn apply_override(doc: &mut toml::Value, spec: &str) -> Result<()> {
    let spec = spec.trim_start_matches("--");
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| invalid_config(format!("override {spec:?} must look like section.key=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(invalid_config(format!("override {spec:?} has an empty key")));
    }
    let mut cur = doc;
    for k in &keys[..keys.len() - 1] {
        let table = cur.as_table_mut().ok_or_else(|| invalid_config(format!("override {spec:?}: {k} is not a section")))?;
        cur = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur.as_table_mut().ok_or_else(|| invalid_config(format!("override {spec:?}: parent is not a section")))?;
    table.insert(keys[keys.len() - 1].to_string(), parse_scalar(raw));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml(), &[], false).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = ExperimentConfig::from_toml_str("", &["--reward.gamma=0.5".into(), "base.steps=3".into()], false).unwrap();
        assert_eq!(cfg.reward.gamma, 0.5);
        assert_eq!(cfg.base.steps, 3);
        let err = ExperimentConfig::from_toml_str("", &["reward.gamma=1.3".into()], false).unwrap_err();
        assert!(err.to_string().contains("reward.gamma"), "{err}");
        assert!(ExperimentConfig::from_toml_str("[reward]\nbogus = 1\n", &[], false).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["noequals".into()], false).is_err());
        let cfg = ExperimentConfig::from_toml_str("", &["out_dir=somewhere".into()], false).unwrap();
        assert_eq!(cfg.out_dir, PathBuf::from("somewhere"));
    }

    #[test]
    fn sections_feed_module_configs() {
        let cfg = ExperimentConfig::from_toml_str("master_seed = 9\n[reward]\ngamma = 0.7\nk = 4\n", &[], false).unwrap();
        let b = cfg.boundary_config();
        assert_eq!((b.seed, b.gamma, b.n_songs, b.label.n_songs), (9, 0.7, 4, 4));
        assert_eq!(cfg.bench_config(ModeControl::Free).diversity_k, 4);
    }
}
