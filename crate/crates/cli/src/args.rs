use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mrcom::meta_env::{MorphologyId, ObsTransform, Quality};
use mrcom::pipeline::Variant;

use crate::config::{Command, Preset, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "mrcom", version, about = "Train, adapt and evaluate context-conditioned world models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train world models on a sampled scenario set, one per seed.
    Train(Common),
    /// Adapt a policy to held-out target scenarios with model-generated data.
    Adapt(AdaptArgs),
    /// Evaluate the agents saved by an `adapt` run.
    Eval(Common),
    /// Train and adapt the full model and each ablation with shared seeds.
    Ablate(AdaptArgs),
    /// Train under each dataset-quality mode and adapt on every morphology.
    DatasetModes(Common),
    /// Check the performance, marginal and representation bounds numerically.
    VerifyBounds(VerifyArgs),
    /// Render loss curves and return charts for a run directory.
    Plot {
        run_dir: PathBuf,
    },
}

/// Flags shared by every experiment command; each overrides the config file.
#[derive(Debug, Default, Args)]
pub struct Common {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Runs seeds 0..N.
    #[arg(long, conflicts_with = "seed_list")]
    pub seeds: Option<u64>,
    /// Explicit comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seed_list: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub morphologies: Option<Vec<MorphologyId>>,
    #[arg(long)]
    pub transform: Option<ObsTransform>,
    /// Behavior policy that collects training data.
    #[arg(long)]
    pub quality: Option<Quality>,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Morphology of the adaptation targets.
    #[arg(long)]
    pub target: Option<MorphologyId>,
    /// Scenario-set file to train on instead of sampling.
    #[arg(long)]
    pub scenarios: Option<PathBuf>,
    /// Run directory to start from (a `train` run for adapt, an `adapt` run for eval).
    #[arg(long)]
    pub from: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Outer training iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Real environment steps during adaptation.
    #[arg(long)]
    pub adapt_steps: Option<usize>,
}

#[derive(Debug, Default, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub common: Common,
    /// Also adapt to a target drawn from the evaluation ranges.
    #[arg(long)]
    pub ood: bool,
    #[arg(long)]
    pub alpha_eval: Option<f64>,
    #[arg(long)]
    pub beta_eval: Option<f64>,
}

#[derive(Debug, Default, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,
    /// Sets every trial count.
    #[arg(long)]
    pub trials: Option<usize>,
}

impl Common {
    fn resolve(&self, command: Command) -> Result<RunConfig, String> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(command, self.preset, p)?,
            None => RunConfig::preset(command, self.preset.unwrap_or_default()),
        };
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { $field = v; })*
            };
        }
        set! {
            alpha => c.alpha,
            beta => c.beta,
            seed_list => c.seeds,
            morphologies => c.morphologies,
            transform => c.transform,
            quality => c.train.quality,
            variant => c.variant,
            target => c.target,
            iters => c.train.outer_iters,
            adapt_steps => c.train.adapt_steps,
        }
        if let Some(n) = self.seeds {
            c.seeds = (0..n).collect();
        }
        if self.scenarios.is_some() {
            c.scenarios = self.scenarios.clone();
        }
        if self.from.is_some() {
            c.from = self.from.clone();
        }
        if self.output.is_some() {
            c.output = self.output.clone();
        }
        Ok(c)
    }
}

impl Cmd {
    /// The fully resolved configuration: preset, then file, then flags.
    pub fn resolve(&self) -> Result<RunConfig, String> {
        match self {
            Cmd::Train(c) => c.resolve(Command::Train),
            Cmd::Eval(c) => c.resolve(Command::Eval),
            Cmd::DatasetModes(c) => c.resolve(Command::DatasetModes),
            Cmd::Adapt(a) | Cmd::Ablate(a) => {
                let cmd = if matches!(self, Cmd::Adapt(_)) { Command::Adapt } else { Command::Ablate };
                let mut c = a.common.resolve(cmd)?;
                c.ood |= a.ood;
                if let Some(v) = a.alpha_eval {
                    c.alpha_eval = v;
                }
                if let Some(v) = a.beta_eval {
                    c.beta_eval = v;
                }
                Ok(c)
            }
            Cmd::VerifyBounds(v) => {
                let mut c = v.common.resolve(Command::VerifyBounds)?;
                if let Some(n) = v.trials {
                    c.verify = c.verify.with_trials(n);
                }
                Ok(c)
            }
            Cmd::Plot { run_dir } => {
                let mut c = RunConfig::preset(Command::Plot, Preset::default());
                c.from = Some(run_dir.clone());
                Ok(c)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> RunConfig {
        let mut full = vec!["mrcom"];
        full.extend_from_slice(args);
        Cli::try_parse_from(full).unwrap().command.resolve().unwrap()
    }

    #[test]
    fn train_flags_land_in_the_config() {
        let c = parse(&["train", "--alpha", "10", "--beta", "50", "--seeds", "5"]);
        assert_eq!(c.command, Command::Train);
        assert_eq!(c.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!((c.alpha, c.beta), (10.0, 50.0));
    }

    #[test]
    fn adapt_ood_flags() {
        let c = parse(&["adapt", "--ood", "--alpha-eval", "20", "--beta-eval", "100", "--preset", "tiny"]);
        assert!(c.ood);
        assert_eq!((c.alpha_eval, c.beta_eval), (20.0, 100.0));
        assert_eq!(c.preset, Preset::Tiny);
    }

    #[test]
    fn list_flags_and_enums_parse() {
        let c = parse(&["dataset-modes", "--morphologies", "hop,dash", "--seed-list", "3,9", "--transform", "addd", "--quality", "expert"]);
        assert_eq!(c.morphologies, vec![MorphologyId::Hop, MorphologyId::Dash]);
        assert_eq!(c.seeds, vec![3, 9]);
        assert_eq!(c.transform, ObsTransform::AddD);
        assert_eq!(c.train.quality, Quality::Expert);
    }

    #[test]
    fn verify_trials_sets_every_count() {
        let c = parse(&["verify-bounds", "--trials", "0"]);
        assert_eq!((c.verify.perf_trials, c.verify.chain_pairs, c.verify.representation_trials), (0, 0, 0));
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "alpha = 3.0\nbeta = 4.0\n").unwrap();
        let c = parse(&["train", "--config", p.to_str().unwrap(), "--beta", "9"]);
        assert_eq!((c.alpha, c.beta), (3.0, 9.0));
    }

    #[test]
    fn bad_values_are_rejected_by_the_parser() {
        assert!(Cli::try_parse_from(["mrcom", "train", "--morphologies", "crawl"]).is_err());
        assert!(Cli::try_parse_from(["mrcom", "train", "--seeds", "2", "--seed-list", "1"]).is_err());
    }
}
