//! The synthetic world bundled with the internal action space and tool setup.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Result};
use crate::policy::{InternalSpace, ToolConfig};
use crate::rewards::RelevanceWeights;
use crate::world::{gen_catalog_with, gen_queries_with, gen_users, BenchQuery, Catalog, CatalogConfig, QueryConfig, UserProfile};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub catalog: CatalogConfig,
    pub n_users: usize,
    pub likes_per_user: usize,
    pub n_train_queries: usize,
    pub n_eval_queries: usize,
    pub n_probe_queries: usize,
    pub level_mix: [f64; 3],
    pub ood_fraction: f64,
    pub decoy_fraction: f64,
    pub tool_top_m: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            catalog: CatalogConfig::default(),
            n_users: 100,
            likes_per_user: 6,
            n_train_queries: 2000,
            n_eval_queries: 500,
            n_probe_queries: 200,
            level_mix: [0.4, 0.35, 0.25],
            ood_fraction: 0.3,
            decoy_fraction: 0.05,
            tool_top_m: 10,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.likes_per_user == 0 {
            return Err(invalid_config("world.n_users and world.likes_per_user must be >= 1"));
        }
        if self.n_train_queries == 0 || self.n_eval_queries == 0 || self.n_probe_queries == 0 {
            return Err(invalid_config("world query counts must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.decoy_fraction) {
            return Err(invalid_config(format!("world.decoy_fraction must lie in [0,1), got {}", self.decoy_fraction)));
        }
        if self.tool_top_m == 0 {
            return Err(invalid_config("world.tool_top_m must be >= 1"));
        }
        Ok(())
    }

    fn queries(&self, n: usize) -> QueryConfig {
        QueryConfig {
            n_queries: n,
            level_mix: self.level_mix,
            ood_fraction: self.ood_fraction,
            ..QueryConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub catalog: Catalog,
    pub users: Vec<UserProfile>,
    pub train_queries: Vec<BenchQuery>,
    /// Held-out split for bench reports and boundary accuracy.
    pub eval_queries: Vec<BenchQuery>,
    /// Fixed set for tool-rate probes.
    pub probe_queries: Vec<BenchQuery>,
}

impl World {
    pub fn user(&self, q: &BenchQuery) -> &UserProfile {
        &self.users[q.user_id.0 as usize]
    }
}

/// World plus what the simulated policy needs around it.
#[derive(Clone, Debug)]
pub struct Env {
    pub world: World,
    pub space: InternalSpace,
    pub tools: ToolConfig,
    pub weights: RelevanceWeights,
}

impl Env {
    pub fn generate(seed: u64, cfg: &WorldConfig) -> Result<Env> {
        let world = generate_world(seed, cfg)?;
        Env::from_world(seed, world, cfg)
    }

    pub fn from_world(seed: u64, world: World, cfg: &WorldConfig) -> Result<Env> {
        let space = InternalSpace::build(crate::rng::derive_seed(seed, "internal-space", 0), &world.catalog, cfg.decoy_fraction)?;
        Ok(Env {
            world,
            space,
            tools: ToolConfig { top_m: cfg.tool_top_m },
            weights: RelevanceWeights::default(),
        })
    }

    pub fn catalog(&self) -> &Catalog {
        &self.world.catalog
    }
}

pub fn generate_world(seed: u64, cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let d = |purpose: &str| crate::rng::derive_seed(seed, purpose, 0);
    let catalog = gen_catalog_with(d("catalog"), &cfg.catalog)?;
    let users = gen_users(d("users"), &catalog, cfg.n_users, cfg.likes_per_user)?;
    let mut train_queries = gen_queries_with(d("train-queries"), &catalog, &users, &cfg.queries(cfg.n_train_queries))?;
    let mut eval_queries = gen_queries_with(d("eval-queries"), &catalog, &users, &cfg.queries(cfg.n_eval_queries))?;
    let mut probe_queries = gen_queries_with(d("probe-queries"), &catalog, &users, &cfg.queries(cfg.n_probe_queries))?;
    // Query ids are unique across splits.
    let mut next = 0u32;
    for q in train_queries.iter_mut().chain(eval_queries.iter_mut()).chain(probe_queries.iter_mut()) {
        q.query_id = crate::world::QueryId(next);
        next += 1;
    }
    Ok(World { catalog, users, train_queries, eval_queries, probe_queries })
}
