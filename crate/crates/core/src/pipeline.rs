//! Stage runners. Each stage reads its inputs from declared files under the
//! input root and writes `<out>/<stage>/` holding the config snapshot, the
//! seed, its outputs and a manifest of content hashes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{evaluate_records, write_plot_csv, write_records_csv, BenchReport};
use crate::boundary::{
    controllable_rl, fit_boundary_sft, label_queries, probe_tool_rate, sft_init, train_agent_zero, upper_bound_rl,
    window_change, write_report_csv, BoundaryTrainReport,
};
use crate::config::ExperimentConfig;
use crate::cptlab;
use crate::distill::{build_boundary_dataset, distill_internal, BoundaryKind, ListwiseSample};
use crate::env::{Env, World};
use crate::error::{invalid_input, Error, Result};
use crate::grpo::{train_with, write_metrics_csv, TrainState};
use crate::io::{load_world, read_dataset, read_jsonl, save_world, write_dataset, write_jsonl};
use crate::policy::{ModeControl, PolicyParams};
use crate::rewards::RewardKind;
use crate::world::{partition_report, BenchQuery};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Worldgen,
    TrainBase,
    Distill,
    TrainZero,
    Boundary,
    Cptlab,
    Bench,
    Repro,
}

impl Stage {
    pub const PIPELINE: [Stage; 7] =
        [Stage::Worldgen, Stage::TrainBase, Stage::Distill, Stage::TrainZero, Stage::Boundary, Stage::Cptlab, Stage::Bench];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Worldgen => "worldgen",
            Stage::TrainBase => "train-base",
            Stage::Distill => "distill",
            Stage::TrainZero => "train-zero",
            Stage::Boundary => "boundary",
            Stage::Cptlab => "cptlab",
            Stage::Bench => "bench",
            Stage::Repro => "repro",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::PIPELINE
            .iter()
            .chain([Stage::Repro].iter())
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| invalid_input(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub files: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if !(dir == root && e.file_name() == MANIFEST) {
            out.push(p);
        }
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

impl Manifest {
    /// Every file under `dir` except the top-level manifest, sorted by path.
    pub fn build(stage: &str, dir: &Path) -> Result<Manifest> {
        let mut files = Vec::new();
        collect_files(dir, dir, &mut files)?;
        let files = files
            .iter()
            .map(|p| {
                let rel = p.strip_prefix(dir).expect("under dir").to_string_lossy().replace('\\', "/");
                Ok(ManifestEntry { path: rel, bytes: std::fs::metadata(p)?.len(), sha256: sha256_file(p)? })
            })
            .collect::<Result<_>>()?;
        Ok(Manifest { stage: stage.to_string(), files })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Manifest> {
        let p = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&p).map_err(|_| Error::MissingArtifact(p.display().to_string()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.files.iter().map(|f| (f.path.clone(), f.sha256.clone())).collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct StageOptions {
    /// Write per-sample reward breakdowns of the last training step.
    pub dump_rewards: bool,
    /// Policy snapshot to evaluate in `bench`; defaults to the boundary m1.
    pub params: Option<PathBuf>,
}

pub fn stage_dir(root: &Path, stage: Stage) -> PathBuf {
    root.join(stage.name())
}

fn prepare(cfg: &ExperimentConfig, out_root: &Path, stage: Stage) -> Result<PathBuf> {
    let dir = stage_dir(out_root, stage);
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    std::fs::write(dir.join("seed.txt"), format!("{}\n", cfg.master_seed))?;
    Ok(dir)
}

fn finish(dir: &Path, stage: Stage) -> Result<Manifest> {
    let m = Manifest::build(stage.name(), dir)?;
    m.write(dir)?;
    Ok(m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldMeta {
    pub seed: u64,
    pub decoy_fraction: f64,
    pub tool_top_m: usize,
}

/// The world written by `worldgen` plus the configured relevance weights.
pub fn load_env(input_root: &Path, cfg: &ExperimentConfig) -> Result<Env> {
    let dir = stage_dir(input_root, Stage::Worldgen);
    let meta_path = dir.join("world_meta.json");
    let meta: WorldMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_path).map_err(|_| Error::MissingArtifact(meta_path.display().to_string()))?,
    )?;
    let world: World = load_world(&dir)?;
    let wcfg = crate::env::WorldConfig { decoy_fraction: meta.decoy_fraction, tool_top_m: meta.tool_top_m, ..cfg.world.clone() };
    let mut env = Env::from_world(meta.seed, world, &wcfg)?;
    env.weights = cfg.relevance_weights();
    Ok(env)
}

fn load_params(input_root: &Path, stage: Stage, file: &str) -> Result<PolicyParams> {
    PolicyParams::load_json(&stage_dir(input_root, stage).join(file))
}

pub fn run_worldgen(cfg: &ExperimentConfig, out_root: &Path) -> Result<Manifest> {
    let dir = prepare(cfg, out_root, Stage::Worldgen)?;
    let env = Env::generate(cfg.master_seed, &cfg.world)?;
    save_world(&dir, &env.world)?;
    write_json(
        &dir.join("world_meta.json"),
        &WorldMeta { seed: cfg.master_seed, decoy_fraction: cfg.world.decoy_fraction, tool_top_m: cfg.world.tool_top_m },
    )?;
    let w = &env.world;
    let parts: BTreeMap<&str, _> = [
        ("train", partition_report(&w.catalog, &w.train_queries)),
        ("eval", partition_report(&w.catalog, &w.eval_queries)),
        ("probe", partition_report(&w.catalog, &w.probe_queries)),
    ]
    .into_iter()
    .collect();
    write_json(&dir.join("partition.json"), &parts)?;
    finish(&dir, Stage::Worldgen)
}

pub fn run_train_base(cfg: &ExperimentConfig, input_root: &Path, out_root: &Path, opts: &StageOptions) -> Result<Manifest> {
    let env = load_env(input_root, cfg)?;
    let dir = prepare(cfg, out_root, Stage::TrainBase)?;
    let tc = cfg.base_train();
    let init = TrainState::new(PolicyParams::initial_for(&env.space), tc.learning_rate, tc.clip_range);
    let mut last = Vec::new();
    let dump = opts.dump_rewards;
    let state = train_with(
        &tc,
        &env,
        &env.world.train_queries,
        RewardKind::HybridSingle { alpha: cfg.reward.alpha },
        ModeControl::AllInternal,
        cfg.base.steps,
        init,
        &mut |_, groups| {
            if dump {
                last = groups.iter().flat_map(|g| g.group.breakdowns.clone()).collect();
            }
            Ok(())
        },
    )?;
    state.params.save_json(&dir.join("params.json"))?;
    write_metrics_csv(&dir.join("metrics.csv"), &state.reward_history)?;
    if dump {
        write_jsonl(&dir.join("rewards.jsonl"), "reward-breakdown", &last)?;
    }
    finish(&dir, Stage::TrainBase)
}

pub fn run_distill(cfg: &ExperimentConfig, input_root: &Path, out_root: &Path) -> Result<Manifest> {
    let env = load_env(input_root, cfg)?;
    let base = load_params(input_root, Stage::TrainBase, "params.json")?;
    let dir = prepare(cfg, out_root, Stage::Distill)?;
    let (samples, internal) = distill_internal(&base, &env.world.train_queries, &env, &cfg.distill(), &cfg.distill_sft())?;
    write_jsonl(&dir.join("listwise.jsonl"), "listwise", &samples)?;
    internal.save_json(&dir.join("params.json"))?;
    finish(&dir, Stage::Distill)
}

pub fn read_listwise(input_root: &Path) -> Result<Vec<ListwiseSample>> {
    read_jsonl(&stage_dir(input_root, Stage::Distill).join("listwise.jsonl"), "listwise")
}

pub fn run_train_zero(cfg: &ExperimentConfig, input_root: &Path, out_root: &Path) -> Result<Manifest> {
    let env = load_env(input_root, cfg)?;
    let dir = prepare(cfg, out_root, Stage::TrainZero)?;
    let (zero, report) = train_agent_zero(&cfg.boundary_config(), &env, &PolicyParams::initial_for(&env.space))?;
    zero.save_json(&dir.join("params.json"))?;
    write_report_csv(&dir.join("metrics.csv"), &report)?;
    finish(&dir, Stage::TrainZero)
}

/// Scalar results of the boundary stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundarySummary {
    pub pos_internal: usize,
    pub neg_internal: usize,
    pub stage1_accuracy: f64,
    pub stage2_accuracy: f64,
    pub sft_probe_tool_rate: f64,
    pub controllable_tool_rate_change: Option<f64>,
    pub controllable_reward_change: Option<f64>,
    pub controllable_accuracy: f64,
    pub m1_accuracy: f64,
    pub m1_probe_tool_rate: f64,
}

pub const CURVE_WINDOW: usize = 10;

pub fn run_boundary(cfg: &ExperimentConfig, input_root: &Path, out_root: &Path) -> Result<Manifest> {
    let env = load_env(input_root, cfg)?;
    let internal = load_params(input_root, Stage::Distill, "params.json")?;
    let zero = load_params(input_root, Stage::TrainZero, "params.json")?;
    let dir = prepare(cfg, out_root, Stage::Boundary)?;
    let bc = cfg.boundary_config();
    let labels = label_queries(&internal, &zero, &env.world.train_queries, &env, &bc)?;
    write_jsonl(&dir.join("labels.jsonl"), "boundary-labels", &labels)?;
    write_dataset(&dir.join("dataset.jsonl"), &build_boundary_dataset(&labels, &bc.dataset)?)?;
    // The written file is the fitting input.
    let ds = read_dataset(&dir.join("dataset.jsonl"))?;
    let (sft, [r1, r2]) = fit_boundary_sft(&sft_init(&internal, &zero), &ds, &env, &env.world.eval_queries, &bc)?;
    sft.save_json(&dir.join("sft.json"))?;
    let (controlled, cr) = controllable_rl(&sft, &bc, &env, bc.controllable_steps)?;
    controlled.save_json(&dir.join("controlled.json"))?;
    let (m1, ur) = upper_bound_rl(&controlled, &bc, &env, bc.upper_steps)?;
    m1.save_json(&dir.join("m1.json"))?;
    write_report_csv(&dir.join("controllable.csv"), &cr)?;
    write_report_csv(&dir.join("upper_bound.csv"), &ur)?;
    let reports: Vec<&BoundaryTrainReport> = vec![&r1, &r2, &cr, &ur];
    write_json(&dir.join("reports.json"), &reports)?;
    let summary = BoundarySummary {
        pos_internal: labels.iter().filter(|l| l.label == BoundaryKind::PosInternal).count(),
        neg_internal: labels.iter().filter(|l| l.label == BoundaryKind::NegInternal).count(),
        stage1_accuracy: r1.boundary_accuracy,
        stage2_accuracy: r2.boundary_accuracy,
        sft_probe_tool_rate: probe_tool_rate(&sft, &env, &env.world.probe_queries),
        controllable_tool_rate_change: window_change(&cr.tool_rate_curve, CURVE_WINDOW),
        controllable_reward_change: window_change(&cr.reward_curve, CURVE_WINDOW),
        controllable_accuracy: cr.boundary_accuracy,
        m1_accuracy: ur.boundary_accuracy,
        m1_probe_tool_rate: probe_tool_rate(&m1, &env, &env.world.probe_queries),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    finish(&dir, Stage::Boundary)
}

pub fn read_boundary_summary(input_root: &Path) -> Result<BoundarySummary> {
    let p = stage_dir(input_root, Stage::Boundary).join("summary.json");
    let text = std::fs::read_to_string(&p).map_err(|_| Error::MissingArtifact(p.display().to_string()))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CptlabSummary {
    /// Per-seed probe accuracy for ntp, hard_filter, soft_score.
    pub probe_accuracy: BTreeMap<String, Vec<f64>>,
    pub general_loss_plain: Vec<f64>,
    pub general_loss_kl: Vec<f64>,
    /// Per-seed Spearman correlations against the music ratio.
    pub spearman_music: Vec<f64>,
    pub spearman_general: Vec<f64>,
    pub sweep: Vec<cptlab::SweepPoint>,
    pub reversal_forward_only: Vec<cptlab::ReversalRun>,
    pub reversal_augmented: Vec<cptlab::ReversalRun>,
}

fn objective_name(o: cptlab::Objective) -> &'static str {
    match o {
        cptlab::Objective::Ntp => "ntp",
        cptlab::Objective::HardFilter => "hard_filter",
        cptlab::Objective::SoftScore => "soft_score",
    }
}

/// All toy continual-pretraining experiments.
pub fn cptlab_experiments(cfg: &ExperimentConfig) -> Result<CptlabSummary> {
    use rayon::prelude::*;
    let c = &cfg.cptlab;
    let model = cfg.cpt_model();
    let seeds: Vec<u64> = (0..c.seeds as u64).map(|i| cfg.master_seed.wrapping_add(i)).collect();
    let noisy = c.corpus.clone();
    let mut probe_accuracy = BTreeMap::new();
    for objective in [cptlab::Objective::Ntp, cptlab::Objective::HardFilter, cptlab::Objective::SoftScore] {
        let m = cptlab::CptConfig { objective, ratio: 1.0, kl_coeff: 0.0, ..model.clone() };
        let accs: Vec<f64> = seeds
            .par_iter()
            .map(|&s| Ok(cptlab::run_seed(s, &noisy, &m)?.probe_accuracy))
            .collect::<Result<_>>()?;
        probe_accuracy.insert(objective_name(objective).to_string(), accs);
    }
    let general = |kl: f64| -> Result<Vec<f64>> {
        let m = cptlab::CptConfig { ratio: 0.5, kl_coeff: kl, ..model.clone() };
        seeds.par_iter().map(|&s| Ok(cptlab::run_seed(s, &noisy, &m)?.general_dev_loss)).collect()
    };
    let general_loss_plain = general(0.0)?;
    let general_loss_kl = general(c.kl_coeff)?;
    let sweep_seeds: Vec<u64> = (0..c.sweep_seeds as u64).map(|i| cfg.master_seed.wrapping_add(i)).collect();
    let plain = cptlab::CptConfig { kl_coeff: 0.0, ..model.clone() };
    let (mut spearman_music, mut spearman_general) = (Vec::new(), Vec::new());
    for &s in &sweep_seeds {
        let pts = cptlab::mixture_sweep(&c.sweep_ratios, &[s], &noisy, &plain)?;
        let ratios: Vec<f64> = pts.iter().map(|p| p.ratio).collect();
        spearman_music.push(cptlab::spearman(&ratios, &pts.iter().map(|p| p.music_loss).collect::<Vec<_>>())?);
        spearman_general.push(cptlab::spearman(&ratios, &pts.iter().map(|p| p.general_loss).collect::<Vec<_>>())?);
    }
    let sweep = cptlab::mixture_sweep(&c.sweep_ratios, &sweep_seeds, &noisy, &plain)?;
    let (reversal_forward_only, reversal_augmented): (Vec<_>, Vec<_>) = seeds
        .iter()
        .map(|&s| cptlab::reversal_experiment(s, c.pair_songs, c.pair_words, model.smoothing))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok(CptlabSummary {
        probe_accuracy,
        general_loss_plain,
        general_loss_kl,
        spearman_music,
        spearman_general,
        sweep,
        reversal_forward_only,
        reversal_augmented,
    })
}

pub fn run_cptlab(cfg: &ExperimentConfig, out_root: &Path) -> Result<Manifest> {
    let dir = prepare(cfg, out_root, Stage::Cptlab)?;
    let summary = cptlab_experiments(cfg)?;
    cptlab::write_sweep_csv(&dir.join("sweep.csv"), &summary.sweep)?;
    write_json(&dir.join("summary.json"), &summary)?;
    finish(&dir, Stage::Cptlab)
}

pub fn read_cptlab_summary(input_root: &Path) -> Result<CptlabSummary> {
    let p = stage_dir(input_root, Stage::Cptlab).join("summary.json");
    let text = std::fs::read_to_string(&p).map_err(|_| Error::MissingArtifact(p.display().to_string()))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub m1: BenchReport,
    pub m1_ood: BenchReport,
    pub internal: BenchReport,
    pub internal_ood: BenchReport,
    /// Full-bench single-song diversity of the snapshot per temperature.
    pub diversity_by_temperature: Vec<(f64, f64)>,
}

fn ood_split(queries: &[BenchQuery]) -> Vec<BenchQuery> {
    queries.iter().filter(|q| q.ood).cloned().collect()
}

/// Evaluates a snapshot (default: boundary m1) and the internal-only
/// baseline on the held-out split.
pub fn run_bench(cfg: &ExperimentConfig, input_root: &Path, out_root: &Path, opts: &StageOptions) -> Result<Manifest> {
    let env = load_env(input_root, cfg)?;
    let params = match &opts.params {
        Some(p) => PolicyParams::load_json(p)?,
        None => load_params(input_root, Stage::Boundary, "m1.json")?,
    };
    let internal = load_params(input_root, Stage::Distill, "params.json")?;
    let dir = prepare(cfg, out_root, Stage::Bench)?;
    let queries = &env.world.eval_queries;
    let ood = ood_split(queries);
    let free = cfg.bench_config(ModeControl::Free);
    let internal_only = cfg.bench_config(ModeControl::AllInternal);
    let records = evaluate_records(&params, queries, &env, &free)?;
    write_records_csv(&dir.join("records.csv"), &records)?;
    let m1 = BenchReport::from_records(&records);
    write_plot_csv(&dir.join("plot.csv"), &m1.plot_rows())?;
    let internal_records = evaluate_records(&internal, queries, &env, &internal_only)?;
    write_records_csv(&dir.join("internal_records.csv"), &internal_records)?;
    let sub = |p: &PolicyParams, qs: &[BenchQuery], bc: &crate::bench::BenchConfig| -> Result<BenchReport> {
        if qs.is_empty() {
            return Ok(BenchReport::from_records(&[]));
        }
        Ok(BenchReport::from_records(&evaluate_records(p, qs, &env, bc)?))
    };
    let diversity_by_temperature = cfg
        .bench
        .temperatures
        .iter()
        .map(|&t| {
            let bc = crate::bench::BenchConfig { diversity_temperature: t, ..free.clone() };
            Ok((t, sub(&params, queries, &bc)?.overall.diversity_single))
        })
        .collect::<Result<_>>()?;
    let summary = BenchSummary {
        m1_ood: sub(&params, &ood, &free)?,
        internal: BenchReport::from_records(&internal_records),
        internal_ood: sub(&internal, &ood, &internal_only)?,
        m1,
        diversity_by_temperature,
    };
    write_json(&dir.join("report.json"), &summary)?;
    finish(&dir, Stage::Bench)
}

pub fn read_bench_summary(input_root: &Path) -> Result<BenchSummary> {
    let p = stage_dir(input_root, Stage::Bench).join("report.json");
    let text = std::fs::read_to_string(&p).map_err(|_| Error::MissingArtifact(p.display().to_string()))?;
    Ok(serde_json::from_str(&text)?)
}

/// One stage with inputs from `input_root`.
pub fn run_stage(stage: Stage, cfg: &ExperimentConfig, input_root: &Path, out_root: &Path, opts: &StageOptions) -> Result<Manifest> {
    log::info!("stage {stage}: input {} out {}", input_root.display(), out_root.display());
    match stage {
        Stage::Worldgen => run_worldgen(cfg, out_root),
        Stage::TrainBase => run_train_base(cfg, input_root, out_root, opts),
        Stage::Distill => run_distill(cfg, input_root, out_root),
        Stage::TrainZero => run_train_zero(cfg, input_root, out_root),
        Stage::Boundary => run_boundary(cfg, input_root, out_root),
        Stage::Cptlab => run_cptlab(cfg, out_root),
        Stage::Bench => run_bench(cfg, input_root, out_root, opts),
        Stage::Repro => crate::repro::run_repro(cfg, out_root).map(|r| r.manifest),
    }
}

/// Every pipeline stage in order, each reading the previous outputs.
pub fn run_all(cfg: &ExperimentConfig, root: &Path) -> Result<Vec<Manifest>> {
    Stage::PIPELINE.iter().map(|&s| run_stage(s, cfg, root, root, &StageOptions::default())).collect()
}
