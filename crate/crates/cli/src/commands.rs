use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mrcom::meta_env::{sample_scenario, MorphologyId, Quality, ScenarioSet, ScenarioSpec};
use mrcom::numerics::{checkpoint, RngStream};
use mrcom::pipeline::{adapt, evaluate_agent, PipelineConfig, TrainedModel, Trainer, Variant};
use mrcom::theory::verify_all;
use mrcom::value_learning::{Agent, AgentConfig};
use rayon::prelude::*;

use crate::config::{Command, RunConfig, CONFIG_FILE};
use crate::plot::plot_run;
use crate::report::{write_metrics, Record, Summary};

pub const ID_SPLIT: &str = "in_distribution";
pub const OOD_SPLIT: &str = "ood";
pub const BOUNDS_FILE: &str = "bounds.json";
/// First id of adaptation targets; training scenarios count up from zero.
pub const ID_TARGET_BASE: usize = 1000;
pub const OOD_TARGET_BASE: usize = 2000;

const SCENARIO_STREAM: u64 = 50;
const TARGET_STREAM: u64 = 51;
const MODE_TARGET_STREAM: u64 = 52;

/// What a command produced, for the caller to print.
#[derive(Debug, Default)]
pub struct Outcome {
    pub dir: Option<PathBuf>,
    pub summary: Option<Summary>,
    pub lines: Vec<String>,
    /// Non-zero when the command ran but found a violation.
    pub exit_code: u8,
}

type Res<T> = Result<T, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

pub fn execute(cfg: &RunConfig) -> Res<Outcome> {
    cfg.validate()?;
    match cfg.command {
        Command::Train => cmd_train(cfg),
        Command::Adapt => cmd_adapt(cfg),
        Command::Eval => cmd_eval(cfg),
        Command::Ablate => cmd_ablate(cfg),
        Command::DatasetModes => cmd_dataset_modes(cfg),
        Command::VerifyBounds => cmd_verify_bounds(cfg),
        Command::Plot => {
            let dir = cfg.from.clone().ok_or("plot needs a run directory")?;
            let files = plot_run(&dir)?;
            Ok(Outcome {
                lines: files.iter().map(|f| format!("wrote {}", f.display())).collect(),
                dir: Some(dir),
                ..Outcome::default()
            })
        }
    }
}

fn prepare(cfg: &RunConfig) -> Res<PathBuf> {
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()).map_err(err)?;
    Ok(dir)
}

fn seed_dir(dir: &Path, kind: &str, seed: u64) -> PathBuf {
    dir.join(kind).join(format!("seed{seed}"))
}

pub fn scenario_file(dir: &Path, seed: u64) -> PathBuf {
    dir.join("scenarios").join(format!("seed{seed}.txt"))
}

pub fn target_file(dir: &Path, seed: u64) -> PathBuf {
    dir.join("targets").join(format!("seed{seed}.txt"))
}

fn write_set(path: &Path, scenarios: Vec<ScenarioSpec>) -> Res<()> {
    fs::create_dir_all(path.parent().expect("set files live in a subdirectory")).map_err(err)?;
    fs::write(path, ScenarioSet { scenarios }.to_text()).map_err(err)
}

/// The configured scenario file, else a fresh sample for `seed`; written to the run directory.
fn training_set(cfg: &RunConfig, dir: &Path, seed: u64) -> Res<ScenarioSet> {
    let set = match &cfg.scenarios {
        Some(p) => ScenarioSet::from_text(&fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?).map_err(err)?,
        None => ScenarioSet::sample(
            &cfg.morphologies,
            cfg.scenarios_per_morphology,
            cfg.alpha,
            cfg.beta,
            cfg.transform,
            0,
            &mut RngStream::new(seed, SCENARIO_STREAM),
        )
        .map_err(err)?,
    };
    write_set(&scenario_file(dir, seed), set.scenarios.clone())?;
    Ok(set)
}

/// In-distribution target and, when asked, one from the wider evaluation ranges.
fn adapt_targets(cfg: &RunConfig, seed: u64) -> Res<Vec<(&'static str, ScenarioSpec)>> {
    let mut rng = RngStream::new(seed, TARGET_STREAM);
    let id = sample_scenario(cfg.target, cfg.alpha, cfg.beta, &mut rng).map_err(err)?;
    let ood = sample_scenario(cfg.target, cfg.alpha_eval, cfg.beta_eval, &mut rng).map_err(err)?;
    let mut out = vec![(ID_SPLIT, id.with_id(ID_TARGET_BASE).with_transform(cfg.transform))];
    if cfg.ood {
        out.push((OOD_SPLIT, ood.with_id(OOD_TARGET_BASE).with_transform(cfg.transform)));
    }
    Ok(out)
}

fn train_seed(pc: &PipelineConfig, set: &ScenarioSet, seed: u64, group: &str, ckpt: Option<&Path>, records: &mut Vec<Record>) -> Res<TrainedModel> {
    let mut t = Trainer::new(pc, set, seed).map_err(err)?;
    t.run(&mut |m| records.push(Record::new(seed, group, None, m.clone()))).map_err(err)?;
    if let Some(dir) = ckpt {
        t.save(dir).map_err(err)?;
    }
    Ok(t.finish())
}

/// Adapts, logs, and stores the resulting agent under `agent_dir` when given.
fn adapt_seed(tm: &TrainedModel, target: &ScenarioSpec, seed: u64, group: &str, split: &str, agent_dir: Option<&Path>, records: &mut Vec<Record>) -> Res<f64> {
    let out = adapt(tm, target, seed, &mut |m| records.push(Record::new(seed, group, Some(split), m.clone()))).map_err(err)?;
    records.push(Record::eval(seed, group, split, target.id, out.normalized_return));
    if let Some(dir) = agent_dir {
        save_agent(dir, &out.agent, target, group, seed)?;
    }
    Ok(out.normalized_return)
}

pub fn save_agent(dir: &Path, agent: &Agent, target: &ScenarioSpec, group: &str, seed: u64) -> Res<()> {
    let mut meta = BTreeMap::new();
    meta.insert("agent".to_string(), serde_json::to_string(agent.config()).map_err(err)?);
    meta.insert("obs_dim".to_string(), agent.obs_dim().to_string());
    meta.insert("act_dim".to_string(), agent.act_dim().to_string());
    meta.insert("target".to_string(), ScenarioSet { scenarios: vec![target.clone()] }.to_text());
    meta.insert("group".to_string(), group.to_string());
    meta.insert("seed".to_string(), seed.to_string());
    checkpoint::save(dir, &[agent.actor_store(), agent.critic_store()], &meta).map_err(err)
}

pub struct SavedAgent {
    pub agent: Agent,
    pub target: ScenarioSpec,
    pub group: String,
    pub seed: u64,
}

pub fn load_agent(dir: &Path) -> Res<SavedAgent> {
    let manifest: checkpoint::Manifest =
        serde_json::from_slice(&fs::read(dir.join(checkpoint::MANIFEST_FILE)).map_err(|e| format!("{}: {e}", dir.display()))?).map_err(err)?;
    let get = |k: &str| manifest.meta.get(k).cloned().ok_or_else(|| format!("{}: agent checkpoint lacks `{k}`", dir.display()));
    let cfg: AgentConfig = serde_json::from_str(&get("agent")?).map_err(err)?;
    let od: usize = get("obs_dim")?.parse().map_err(err)?;
    let ad: usize = get("act_dim")?.parse().map_err(err)?;
    let target = ScenarioSet::from_text(&get("target")?)
        .map_err(err)?
        .scenarios
        .pop()
        .ok_or("agent checkpoint names no target")?;
    let mut agent = Agent::new("phi", &cfg, od, ad, &mut RngStream::new(0, 0)).map_err(err)?;
    {
        let (a, c) = agent.stores_mut();
        checkpoint::load(dir, &mut [a, c]).map_err(err)?;
    }
    Ok(SavedAgent {
        agent,
        target,
        group: get("group")?,
        seed: get("seed")?.parse().map_err(err)?,
    })
}

fn collect<F>(cfg: &RunConfig, f: F) -> Res<Vec<Record>>
where
    F: Fn(u64) -> Res<Vec<Record>> + Sync,
{
    let per_seed: Vec<Res<Vec<Record>>> = cfg.seeds.par_iter().map(|&s| f(s)).collect();
    let mut out = Vec::new();
    for r in per_seed {
        out.extend(r?);
    }
    Ok(out)
}

fn finish(dir: PathBuf, records: &[Record], summary: Summary) -> Res<Outcome> {
    let files = write_metrics(&dir, records).map_err(err)?;
    summary.write(&dir).map_err(err)?;
    let mut lines: Vec<String> = files.iter().map(|f| format!("wrote {}", f.display())).collect();
    lines.push(format!("wrote {}", dir.join(crate::report::SUMMARY_MD).display()));
    Ok(Outcome {
        dir: Some(dir),
        summary: Some(summary),
        lines,
        exit_code: 0,
    })
}

fn cmd_train(cfg: &RunConfig) -> Res<Outcome> {
    let dir = prepare(cfg)?;
    let group = cfg.variant.as_str();
    let pc = cfg.pipeline();
    let records = collect(cfg, |seed| {
        let set = training_set(cfg, &dir, seed)?;
        let mut recs = Vec::new();
        train_seed(&pc, &set, seed, group, Some(&seed_dir(&dir, "checkpoints", seed)), &mut recs)?;
        Ok(recs)
    })?;
    let summary = Summary::of_final_losses("final training losses", &records, &[group.to_string()]);
    finish(dir, &records, summary)
}

/// A trained model from a `train` run directory, with this run's adaptation settings.
fn load_trained(from: &Path, cfg: &RunConfig, seed: u64) -> Res<(TrainedModel, RunConfig)> {
    let src = RunConfig::load(Command::Train, None, &from.join(CONFIG_FILE))?;
    let set_path = scenario_file(from, seed);
    let text = fs::read_to_string(&set_path).map_err(|e| format!("{}: {e} (was seed {seed} trained there?)", set_path.display()))?;
    let set = ScenarioSet::from_text(&text).map_err(err)?;
    let t = Trainer::load(&seed_dir(from, "checkpoints", seed), &src.pipeline(), &set, seed).map_err(err)?;
    let mut tm = t.finish();
    tm.cfg.train = cfg.train.clone();
    tm.cfg.agent = cfg.agent.clone();
    Ok((tm, src))
}

fn cmd_adapt(cfg: &RunConfig) -> Res<Outcome> {
    let dir = prepare(cfg)?;
    let mut columns = vec![ID_SPLIT.to_string()];
    if cfg.ood {
        columns.push(OOD_SPLIT.to_string());
    }
    let group = match &cfg.from {
        Some(from) => RunConfig::load(Command::Train, None, &from.join(CONFIG_FILE))?.variant,
        None => cfg.variant,
    }
    .as_str();
    let records = collect(cfg, |seed| {
        let mut recs = Vec::new();
        let (tm, target_cfg) = match &cfg.from {
            Some(from) => {
                let (tm, src) = load_trained(from, cfg, seed)?;
                let mut t = cfg.clone();
                t.transform = src.transform;
                (tm, t)
            }
            None => {
                let set = training_set(cfg, &dir, seed)?;
                (train_seed(&cfg.pipeline(), &set, seed, group, Some(&seed_dir(&dir, "checkpoints", seed)), &mut recs)?, cfg.clone())
            }
        };
        let targets = adapt_targets(&target_cfg, seed)?;
        write_set(&target_file(&dir, seed), targets.iter().map(|t| t.1.clone()).collect())?;
        for (split, target) in &targets {
            let agent_dir = seed_dir(&dir, "agents", seed).join(split);
            adapt_seed(&tm, target, seed, group, split, Some(&agent_dir), &mut recs)?;
        }
        Ok(recs)
    })?;
    let summary = Summary::of_evals("normalized return after adaptation", &records, &[group.to_string()], &columns);
    finish(dir, &records, summary)
}

fn cmd_eval(cfg: &RunConfig) -> Res<Outcome> {
    let from = cfg.from.clone().ok_or("eval needs --from <adapt run directory>")?;
    let dir = prepare(cfg)?;
    let mut jobs = Vec::new();
    for &seed in &cfg.seeds {
        let base = seed_dir(&from, "agents", seed);
        let mut splits: Vec<PathBuf> = fs::read_dir(&base)
            .map_err(|e| format!("{}: {e} (expected agents written by adapt)", base.display()))?
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.join(checkpoint::MANIFEST_FILE).exists())
            .collect();
        splits.sort();
        for p in splits {
            let split = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            jobs.push((seed, split, p));
        }
    }
    let results: Vec<Res<Record>> = jobs
        .par_iter()
        .map(|(seed, split, p)| {
            let saved = load_agent(p)?;
            let r = evaluate_agent(&saved.agent, &saved.target, cfg.train.eval_episodes, *seed).map_err(err)?;
            Ok(Record::eval(*seed, &saved.group, split, saved.target.id, r))
        })
        .collect();
    let records = results.into_iter().collect::<Res<Vec<_>>>()?;
    let mut groups: Vec<String> = records.iter().map(|r| r.group.clone()).collect();
    groups.sort();
    groups.dedup();
    let mut columns: Vec<String> = records.iter().filter_map(|r| r.split.clone()).collect();
    columns.sort();
    columns.dedup();
    let summary = Summary::of_evals("normalized return", &records, &groups, &columns);
    finish(dir, &records, summary)
}

fn cmd_ablate(cfg: &RunConfig) -> Res<Outcome> {
    let dir = prepare(cfg)?;
    let mut columns = vec![ID_SPLIT.to_string()];
    if cfg.ood {
        columns.push(OOD_SPLIT.to_string());
    }
    let records = collect(cfg, |seed| {
        let set = training_set(cfg, &dir, seed)?;
        let targets = adapt_targets(cfg, seed)?;
        write_set(&target_file(&dir, seed), targets.iter().map(|t| t.1.clone()).collect())?;
        let mut recs = Vec::new();
        for v in Variant::ALL {
            let pc = cfg.pipeline_for(v, cfg.train.quality);
            let tm = train_seed(&pc, &set, seed, v.as_str(), None, &mut recs)?;
            for (split, target) in &targets {
                adapt_seed(&tm, target, seed, v.as_str(), split, None, &mut recs)?;
            }
        }
        Ok(recs)
    })?;
    let groups: Vec<String> = Variant::ALL.iter().map(|v| v.as_str().to_string()).collect();
    let summary = Summary::of_evals("ablations: normalized return", &records, &groups, &columns);
    finish(dir, &records, summary)
}

fn cmd_dataset_modes(cfg: &RunConfig) -> Res<Outcome> {
    let dir = prepare(cfg)?;
    let morphs: Vec<MorphologyId> = cfg.morphologies.clone();
    let records = collect(cfg, |seed| {
        let set = training_set(cfg, &dir, seed)?;
        let mut targets = Vec::new();
        for (k, &m) in morphs.iter().enumerate() {
            let t = sample_scenario(m, cfg.alpha, cfg.beta, &mut RngStream::new(seed, MODE_TARGET_STREAM + k as u64)).map_err(err)?;
            targets.push(t.with_id(ID_TARGET_BASE + k).with_transform(cfg.transform));
        }
        write_set(&target_file(&dir, seed), targets.clone())?;
        let mut recs = Vec::new();
        for q in Quality::ALL {
            let tm = train_seed(&cfg.pipeline_for(cfg.variant, q), &set, seed, q.as_str(), None, &mut recs)?;
            for t in &targets {
                adapt_seed(&tm, t, seed, q.as_str(), t.morphology.as_str(), None, &mut recs)?;
            }
        }
        Ok(recs)
    })?;
    let groups: Vec<String> = Quality::ALL.iter().map(|q| q.as_str().to_string()).collect();
    let columns: Vec<String> = morphs.iter().map(|m| m.as_str().to_string()).collect();
    let summary = Summary::of_evals("dataset quality: normalized return", &records, &groups, &columns);
    finish(dir, &records, summary)
}

fn cmd_verify_bounds(cfg: &RunConfig) -> Res<Outcome> {
    let dir = prepare(cfg)?;
    let seed = cfg.seeds[0];
    let report = verify_all(&cfg.verify, seed).map_err(err)?;
    let path = dir.join(BOUNDS_FILE);
    fs::write(&path, serde_json::to_string_pretty(&report).map_err(err)? + "\n").map_err(err)?;
    let violations = report.violations();
    let mut lines = report.summary_lines();
    lines.push(format!("{violations} violation(s); wrote {}", path.display()));
    Ok(Outcome {
        dir: Some(dir),
        summary: None,
        lines,
        exit_code: u8::from(violations > 0),
    })
}
