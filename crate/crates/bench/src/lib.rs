//! Shared fixtures for the criterion benches: a small world, one scored
//! rollout batch and a toy pretraining corpus.

use boundary_lab::cptlab::{build_corpora, Corpora, CorpusConfig};
use boundary_lab::grpo::{sample_groups, ScoredGroup, TrainConfig};
use boundary_lab::world::CatalogConfig;
use boundary_lab::{BenchQuery, Env, ModeControl, PolicyParams, RewardKind, WorldConfig};

pub fn small_world() -> WorldConfig {
    WorldConfig {
        catalog: CatalogConfig { n_songs: 400, ..CatalogConfig::default() },
        n_users: 40,
        n_train_queries: 200,
        n_eval_queries: 100,
        n_probe_queries: 50,
        ..WorldConfig::default()
    }
}

pub struct Fixture {
    pub env: Env,
    pub params: PolicyParams,
    pub train: TrainConfig,
}

impl Fixture {
    pub fn new(seed: u64) -> Fixture {
        let env = Env::generate(seed, &small_world()).expect("fixture world");
        let params = PolicyParams::initial_for(&env.space);
        let train = TrainConfig { seed, batch_queries: 16, n_songs: 5, ..TrainConfig::default() };
        Fixture { env, params, train }
    }

    pub fn batch(&self) -> Vec<&BenchQuery> {
        self.env.world.train_queries.iter().take(self.train.batch_queries).collect()
    }

    /// One step's worth of list-wise groups under forced-half control.
    pub fn groups(&self) -> Vec<ScoredGroup> {
        sample_groups(
            &self.params,
            &self.env,
            &self.batch(),
            &self.train,
            RewardKind::HybridAgentic { n_max: 5, gamma: 0.8 },
            ModeControl::ForcedHalf,
            "bench",
            0,
        )
        .expect("fixture rollouts")
    }
}

pub fn corpora(seed: u64) -> Corpora {
    let cfg = CorpusConfig { n_songs: 100, n_general: 400, n_brm_general: 1000, n_dev: 100, ..CorpusConfig::default() };
    build_corpora(seed, &cfg).expect("fixture corpus")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_build() {
        let fx = Fixture::new(1);
        let g = fx.groups();
        assert_eq!(g.len(), fx.train.batch_queries);
        assert!(g.iter().all(|s| s.group.samples.len() == fx.train.group_size));
        assert!(!corpora(1).music_train.is_empty());
    }
}
