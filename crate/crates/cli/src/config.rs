use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mrcom::meta_env::{MorphologyId, ObsTransform, Quality};
use mrcom::pipeline::{PipelineConfig, TrainConfig, Variant};
use mrcom::theory::VerifyConfig;
use mrcom::value_learning::AgentConfig;
use mrcom::world_model::ModelConfig;
use serde::{Deserialize, Serialize};

/// Environment variable naming the directory that default run directories live under.
pub const OUTPUT_ROOT_ENV: &str = "MRCOM_OUTPUT_ROOT";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[value(rename_all = "kebab-case")]
pub enum Command {
    Train,
    Adapt,
    Eval,
    Ablate,
    DatasetModes,
    VerifyBounds,
    Plot,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Adapt => "adapt",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::DatasetModes => "dataset-modes",
            Command::VerifyBounds => "verify-bounds",
            Command::Plot => "plot",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Width and budget starting points that a config file then overrides.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 128-wide networks and 10⁵ adaptation steps.
    Large,
    #[default]
    Small,
    Tiny,
}

impl Preset {
    pub fn pipeline(self) -> PipelineConfig {
        match self {
            Preset::Large => PipelineConfig::default(),
            Preset::Small => PipelineConfig::small(),
            Preset::Tiny => PipelineConfig::tiny(),
        }
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        <Self as clap::ValueEnum>::from_str(s, true)
    }
}

/// Everything a command needs; written verbatim into the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub preset: Preset,
    pub morphologies: Vec<MorphologyId>,
    pub scenarios_per_morphology: usize,
    pub alpha: f64,
    pub beta: f64,
    pub transform: ObsTransform,
    /// Scenario-set file used for every seed instead of sampling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenarios: Option<PathBuf>,
    /// Morphology adapted to by `adapt` and `ablate`.
    pub target: MorphologyId,
    pub ood: bool,
    pub alpha_eval: f64,
    pub beta_eval: f64,
    pub variant: Variant,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Run directory whose checkpoints a command starts from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub agent: AgentConfig,
    pub verify: VerifyConfig,
}

impl RunConfig {
    pub fn preset(command: Command, preset: Preset) -> Self {
        let p = preset.pipeline();
        Self {
            command,
            preset,
            morphologies: MorphologyId::ALL.to_vec(),
            scenarios_per_morphology: 4,
            alpha: 10.0,
            beta: 50.0,
            transform: ObsTransform::None,
            scenarios: None,
            target: MorphologyId::Hop,
            ood: false,
            alpha_eval: 20.0,
            beta_eval: 100.0,
            variant: Variant::Full,
            seeds: vec![0],
            output: None,
            from: None,
            model: p.model,
            train: p.train,
            agent: p.agent,
            verify: VerifyConfig::default(),
        }
    }

    /// Preset defaults overlaid with the TOML document `text`. Keys the
    /// config does not know are rejected with their path.
    pub fn from_toml(command: Command, preset: Option<Preset>, text: &str) -> Result<Self, String> {
        let file: toml::Table = toml::from_str(text).map_err(|e| format!("config: {e}"))?;
        let preset = match (preset, file.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => {
                let s = v.as_str().ok_or("config: preset must be a string")?;
                s.parse().map_err(|e| format!("config: preset: {e}"))?
            }
            (None, None) => Preset::default(),
        };
        let base = toml::Table::try_from(Self::preset(command, preset)).map_err(|e| e.to_string())?;
        let mut merged = base;
        merge(&mut merged, file);
        merged.insert("command".into(), toml::Value::String(command.as_str().into()));
        merged.insert("preset".into(), toml::Value::String(preset_name(preset).into()));
        let text = toml::to_string(&merged).map_err(|e| e.to_string())?;
        toml::from_str(&text).map_err(|e| format!("config: {e}"))
    }

    pub fn load(command: Command, preset: Option<Preset>, path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(command, preset, &text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs serialize")
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            model: self.variant.apply(&self.model),
            train: self.train.clone(),
            agent: self.agent.clone(),
        }
    }

    pub fn pipeline_for(&self, variant: Variant, quality: Quality) -> PipelineConfig {
        let mut p = self.pipeline();
        p.model = variant.apply(&self.model);
        p.train.quality = quality;
        p
    }

    pub fn validate(&self) -> Result<(), String> {
        let field = |name: &str, e: mrcom::Error| format!("{name}: {e}");
        self.model.validate().map_err(|e| field("model", e))?;
        self.train.validate().map_err(|e| field("train", e))?;
        self.agent.validate().map_err(|e| field("agent", e))?;
        if self.seeds.is_empty() {
            return Err("seeds: at least one seed is required".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err("seeds: duplicate seed".into());
        }
        if self.morphologies.is_empty() && self.scenarios.is_none() {
            return Err("morphologies: at least one morphology is required".into());
        }
        if self.scenarios_per_morphology == 0 {
            return Err("scenarios_per_morphology: must be positive".into());
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("alpha_eval", self.alpha_eval), ("beta_eval", self.beta_eval)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name}: {v} is not a non-negative number"));
            }
        }
        if self.ood && self.alpha_eval <= self.alpha && self.beta_eval <= self.beta {
            return Err("alpha_eval, beta_eval: the out-of-distribution ranges must exceed the training ranges".into());
        }
        Ok(())
    }

    /// `--output`, else `$MRCOM_OUTPUT_ROOT/<command>`, else `runs/<command>`.
    pub fn output_dir(&self) -> PathBuf {
        if let Some(o) = &self.output {
            return o.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(self.command.as_str())
    }
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Large => "large",
        Preset::Small => "small",
        Preset::Tiny => "tiny",
    }
}

/// Recursive overlay of `top` onto `base`; tables merge, everything else replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
