//! A family of analytic target-speed control tasks.
//!
//! Three morphologies share a point-mass core `v' = v + (g·drive − c·v)·dt`
//! and differ in observation and action dimensionality through attached limb
//! oscillators. A scenario perturbs the dynamics parameters within ±α% of
//! their defaults, draws a target speed from `[0, β%·v_max]`, and may apply
//! an observation transform.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

pub const DT: f64 = 0.05;
pub const EPISODE_LEN: usize = 500;
const LIMB_DAMPING: f64 = 0.5;
const COUPLING: f64 = 0.5;
const TRAP_SPEED: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MorphologyId {
    Hop,
    Walk,
    Dash,
}

impl MorphologyId {
    pub const ALL: [MorphologyId; 3] = [MorphologyId::Hop, MorphologyId::Walk, MorphologyId::Dash];

    pub fn spec(self) -> Morphology {
        match self {
            MorphologyId::Hop => Morphology {
                id: self,
                obs_dim: 4,
                act_dim: 1,
                gain: 2.0,
                drag: 1.0,
                stiffness: None,
                v_max: 2.0,
            },
            MorphologyId::Walk => Morphology {
                id: self,
                obs_dim: 6,
                act_dim: 2,
                gain: 1.5,
                drag: 0.5,
                stiffness: Some(4.0),
                v_max: 3.0,
            },
            MorphologyId::Dash => Morphology {
                id: self,
                obs_dim: 8,
                act_dim: 2,
                gain: 3.0,
                drag: 0.75,
                stiffness: Some(6.0),
                v_max: 4.0,
            },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MorphologyId::Hop => "hop",
            MorphologyId::Walk => "walk",
            MorphologyId::Dash => "dash",
        }
    }
}

impl fmt::Display for MorphologyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MorphologyId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hop" => Ok(MorphologyId::Hop),
            "walk" => Ok(MorphologyId::Walk),
            "dash" => Ok(MorphologyId::Dash),
            other => Err(Error::UnknownMorphology(other.to_string())),
        }
    }
}

/// Static description of a morphology under default dynamics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Morphology {
    pub id: MorphologyId,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub gain: f64,
    pub drag: f64,
    pub stiffness: Option<f64>,
    /// Terminal speed at full drive, `gain / drag`.
    pub v_max: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObsTransform {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "addg")]
    AddG,
    #[serde(rename = "addd")]
    AddD,
    #[serde(rename = "mskr")]
    MskR,
    #[serde(rename = "mskf")]
    MskF,
}

impl ObsTransform {
    pub const ALL: [ObsTransform; 5] = [
        ObsTransform::None,
        ObsTransform::AddG,
        ObsTransform::AddD,
        ObsTransform::MskR,
        ObsTransform::MskF,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ObsTransform::None => "none",
            ObsTransform::AddG => "addg",
            ObsTransform::AddD => "addd",
            ObsTransform::MskR => "mskr",
            ObsTransform::MskF => "mskf",
        }
    }

    /// Observation width after the transform.
    pub fn output_dim(self, base: usize) -> usize {
        match self {
            ObsTransform::AddD => base + tenth(base),
            _ => base,
        }
    }
}

impl fmt::Display for ObsTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObsTransform {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ObsTransform::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s) || s.eq_ignore_ascii_case(&t.as_str().replace("add", "add-")))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown observation transform `{s}`")))
    }
}

/// `ceil(0.1·n)`
pub fn tenth(n: usize) -> usize {
    n.div_ceil(10)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: usize,
    pub morphology: MorphologyId,
    pub alpha: f64,
    pub beta: f64,
    pub gain: f64,
    pub drag: f64,
    /// Zero for morphologies without limbs.
    pub stiffness: f64,
    pub v_target: f64,
    pub transform: ObsTransform,
    pub transform_seed: u64,
    pub seed: u64,
}

impl ScenarioSpec {
    /// A scenario with default dynamics.
    pub fn default_for(morphology: MorphologyId, v_target: f64) -> Self {
        let m = morphology.spec();
        Self {
            id: 0,
            morphology,
            alpha: 0.0,
            beta: 0.0,
            gain: m.gain,
            drag: m.drag,
            stiffness: m.stiffness.unwrap_or(0.0),
            v_target,
            transform: ObsTransform::None,
            transform_seed: 0,
            seed: 0,
        }
    }

    pub fn with_id(mut self, id: usize) -> Self {
        self.id = id;
        self
    }

    pub fn with_transform(mut self, transform: ObsTransform) -> Self {
        self.transform = transform;
        self
    }

    pub fn morph(&self) -> Morphology {
        self.morphology.spec()
    }

    pub fn obs_dim(&self) -> usize {
        self.transform.output_dim(self.morph().obs_dim)
    }

    pub fn act_dim(&self) -> usize {
        self.morph().act_dim
    }

    fn to_line(&self) -> String {
        format!(
            "id={} morphology={} alpha={:?} beta={:?} gain={:?} drag={:?} stiffness={:?} v_target={:?} transform={} transform_seed={} seed={}",
            self.id,
            self.morphology,
            self.alpha,
            self.beta,
            self.gain,
            self.drag,
            self.stiffness,
            self.v_target,
            self.transform,
            self.transform_seed,
            self.seed
        )
    }

    fn from_line(line: &str, lineno: usize) -> Result<Self> {
        let perr = |reason: String| Error::Parse { line: lineno, reason };
        let mut fields = std::collections::HashMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| perr(format!("expected key=value, got `{tok}`")))?;
            if fields.insert(k, v).is_some() {
                return Err(perr(format!("duplicate key `{k}`")));
            }
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| perr(format!("missing `{k}`")));
        let f = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|e| perr(format!("{k}: {e}"))) };
        let u = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|e| perr(format!("{k}: {e}"))) };
        const KEYS: [&str; 11] = [
            "id",
            "morphology",
            "alpha",
            "beta",
            "gain",
            "drag",
            "stiffness",
            "v_target",
            "transform",
            "transform_seed",
            "seed",
        ];
        if let Some(k) = fields.keys().find(|k| !KEYS.contains(k)) {
            return Err(perr(format!("unknown key `{k}`")));
        }
        Ok(Self {
            id: u("id")? as usize,
            morphology: get("morphology")?.parse().map_err(|e: Error| perr(e.to_string()))?,
            alpha: f("alpha")?,
            beta: f("beta")?,
            gain: f("gain")?,
            drag: f("drag")?,
            stiffness: f("stiffness")?,
            v_target: f("v_target")?,
            transform: get("transform")?.parse().map_err(|e: Error| perr(e.to_string()))?,
            transform_seed: u("transform_seed")?,
            seed: u("seed")?,
        })
    }
}

fn perturb(default: f64, alpha: f64, rng: &mut RngStream) -> f64 {
    let a = alpha / 100.0;
    rng.uniform_in(default * (1.0 - a), default * (1.0 + a))
}

/// Draws dynamics within ±α% of the defaults and a target speed in
/// `[0, β%·v_max]`.
pub fn sample_scenario(morphology: MorphologyId, alpha: f64, beta: f64, rng: &mut RngStream) -> Result<ScenarioSpec> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha and beta must be non-negative, got {alpha}, {beta}")));
    }
    let m = morphology.spec();
    let gain = perturb(m.gain, alpha, rng);
    let drag = perturb(m.drag, alpha, rng);
    let stiffness = m.stiffness.map_or(0.0, |k| perturb(k, alpha, rng));
    let v_target = rng.uniform_in(0.0, beta / 100.0 * m.v_max);
    Ok(ScenarioSpec {
        id: 0,
        morphology,
        alpha,
        beta,
        gain,
        drag,
        stiffness,
        v_target,
        transform: ObsTransform::None,
        transform_seed: rng.next_u64(),
        seed: rng.next_u64(),
    })
}

/// An ordered list of scenarios with a line-per-record text format.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScenarioSet {
    pub scenarios: Vec<ScenarioSpec>,
}

impl ScenarioSet {
    /// `per_morphology` scenarios for each listed morphology, ids from `first_id`.
    pub fn sample(
        morphologies: &[MorphologyId],
        per_morphology: usize,
        alpha: f64,
        beta: f64,
        transform: ObsTransform,
        first_id: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut scenarios = Vec::new();
        for &m in morphologies {
            for _ in 0..per_morphology {
                let id = first_id + scenarios.len();
                scenarios.push(sample_scenario(m, alpha, beta, rng)?.with_id(id).with_transform(transform));
            }
        }
        Ok(Self { scenarios })
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for sc in &self.scenarios {
            s.push_str(&sc.to_line());
            s.push('\n');
        }
        s
    }

    /// Blank lines and lines starting with `#` are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut scenarios = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            scenarios.push(ScenarioSpec::from_line(line, i + 1)?);
        }
        Ok(Self { scenarios })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhysState {
    pub x: f64,
    pub v: f64,
    pub q: [f64; 2],
    pub w: [f64; 2],
    pub prev_drive: f64,
}

impl PhysState {
    fn is_finite(&self) -> bool {
        [self.x, self.v, self.q[0], self.q[1], self.w[0], self.w[1], self.prev_drive]
            .iter()
            .all(|v| v.is_finite())
            && self.v.abs() < TRAP_SPEED
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// The episode is over; either the time limit or a trap.
    pub done: bool,
    /// The state became non-finite and was reset.
    pub trapped: bool,
}

/// Running per-dimension mean and variance.
#[derive(Clone, Debug, Default, PartialEq)]
struct Welford {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn push(&mut self, x: &[f64]) {
        if self.mean.is_empty() {
            self.mean = vec![0.0; x.len()];
            self.m2 = vec![0.0; x.len()];
        }
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    fn std(&self, j: usize) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2[j] / (self.n - 1) as f64).sqrt()
        }
    }
}

/// One scenario instance. Value semantics: cloning forks the full state,
/// including its random stream.
#[derive(Clone, Debug)]
pub struct Env {
    spec: ScenarioSpec,
    state: PhysState,
    t: usize,
    rng: RngStream,
    stats: Welford,
    fixed_mask: Vec<usize>,
}

impl Env {
    /// The env's stochasticity (initial states, transform noise) comes from
    /// `(spec.seed, stream)`.
    pub fn new(spec: ScenarioSpec, stream: u64) -> Self {
        let base = spec.morph().obs_dim;
        let fixed_mask = RngStream::new(spec.transform_seed, 0).subset(base, tenth(base));
        let rng = RngStream::new(spec.seed, stream);
        let mut env = Self {
            spec,
            state: PhysState::default(),
            t: 0,
            rng,
            stats: Welford::default(),
            fixed_mask,
        };
        env.init_state();
        env
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn state(&self) -> &PhysState {
        &self.state
    }

    pub fn time(&self) -> usize {
        self.t
    }

    /// Indices zeroed under the fixed-mask transform.
    pub fn fixed_mask(&self) -> &[usize] {
        &self.fixed_mask
    }

    fn init_state(&mut self) {
        self.state = PhysState {
            x: self.rng.uniform_in(0.0, std::f64::consts::TAU),
            v: 0.0,
            q: [self.rng.uniform_in(-0.1, 0.1), self.rng.uniform_in(-0.1, 0.1)],
            w: [0.0, 0.0],
            prev_drive: 0.0,
        };
        self.t = 0;
    }

    /// Starts a new episode and returns its first observation.
    pub fn reset(&mut self) -> Vec<f64> {
        self.init_state();
        self.observe()
    }

    /// Untransformed observation of the current state.
    pub fn base_obs(&self) -> Vec<f64> {
        let s = &self.state;
        let mut o = vec![s.v, s.x.sin(), s.x.cos()];
        match self.spec.morphology {
            MorphologyId::Hop => {}
            MorphologyId::Walk => o.extend([s.q[0], s.w[0]]),
            MorphologyId::Dash => o.extend([s.q[0], s.w[0], s.q[1], s.w[1]]),
        }
        o.push(s.prev_drive);
        o
    }

    fn observe(&mut self) -> Vec<f64> {
        let o = self.base_obs();
        self.stats.push(&o);
        apply_obs_transform(&o, &self.spec, &self.stats, &self.fixed_mask, &mut self.rng)
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let act_dim = self.spec.act_dim();
        if action.len() != act_dim {
            return Err(Error::Dim {
                expected: act_dim,
                got: action.len(),
            });
        }
        let a: Vec<f64> = action.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
        let drive = a.iter().sum::<f64>() / act_dim as f64;
        let sp = &self.spec;
        let s = &mut self.state;
        s.v += (sp.gain * drive - sp.drag * s.v) * DT;
        s.x += s.v * DT;
        let k = sp.stiffness;
        match sp.morphology {
            MorphologyId::Hop => {}
            MorphologyId::Walk => {
                s.w[0] += (-k * s.q[0] - LIMB_DAMPING * s.w[0] + (a[0] - a[1])) * DT;
                s.q[0] += s.w[0] * DT;
            }
            MorphologyId::Dash => {
                let (q0, q1) = (s.q[0], s.q[1]);
                s.w[0] += (-k * q0 - LIMB_DAMPING * s.w[0] + COUPLING * (q1 - q0) + (a[0] - a[1])) * DT;
                s.w[1] += (-k * q1 - LIMB_DAMPING * s.w[1] + COUPLING * (q0 - q1) + (a[1] - a[0])) * DT;
                s.q[0] += s.w[0] * DT;
                s.q[1] += s.w[1] * DT;
            }
        }
        s.x = s.x.rem_euclid(std::f64::consts::TAU);
        s.prev_drive = drive;
        self.t += 1;

        if !self.state.is_finite() {
            self.init_state();
            let obs = self.observe();
            return Ok(StepResult {
                obs,
                reward: 0.0,
                done: true,
                trapped: true,
            });
        }
        let reward = reward(self.state.v, self.spec.v_target, self.spec.morph().v_max);
        let obs = self.observe();
        Ok(StepResult {
            obs,
            reward,
            done: self.t >= EPISODE_LEN,
            trapped: false,
        })
    }
}

/// Every per-step reward lies in this interval.
pub const REWARD_RANGE: (f64, f64) = (0.0, 1.0);

pub fn reward(v: f64, v_target: f64, v_max: f64) -> f64 {
    (1.0 - (v - v_target).abs() / v_max).max(0.0)
}

/// Applies the scenario's observation transform to a base observation.
///
/// `stats` supplies the running per-dimension scale for additive noise and
/// `fixed_mask` the index set of the fixed-mask transform.
fn apply_obs_transform(
    o: &[f64],
    spec: &ScenarioSpec,
    stats: &Welford,
    fixed_mask: &[usize],
    rng: &mut RngStream,
) -> Vec<f64> {
    let mut out = o.to_vec();
    match spec.transform {
        ObsTransform::None => {}
        ObsTransform::AddG => {
            for (j, x) in out.iter_mut().enumerate() {
                *x += 0.05 * stats.std(j) * rng.normal();
            }
        }
        ObsTransform::AddD => out.extend(rng.normals(tenth(o.len()))),
        ObsTransform::MskR => {
            for j in rng.subset(o.len(), tenth(o.len())) {
                out[j] = 0.0;
            }
        }
        ObsTransform::MskF => {
            for &j in fixed_mask {
                out[j] = 0.0;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Expert,
    Medium,
    Mix,
    Random,
}

impl Quality {
    pub const ALL: [Quality; 4] = [Quality::Expert, Quality::Medium, Quality::Mix, Quality::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Quality::Expert => "expert",
            Quality::Medium => "medium",
            Quality::Mix => "mix",
            Quality::Random => "random",
        }
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Quality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Quality::ALL
            .into_iter()
            .find(|q| q.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown dataset quality `{s}`")))
    }
}

pub const EXPERT_GAIN: f64 = 2.0;
pub const MEDIUM_GAIN: f64 = 0.05;
pub const MEDIUM_NOISE: f64 = 0.1;

/// Hand-written controllers acting on the true state.
///
/// The expert combines the default-dynamics feed-forward `c·v*/g` with
/// proportional feedback; it does not know the scenario's perturbed
/// parameters.
#[derive(Clone, Debug)]
pub struct ScriptedPolicy {
    quality: Quality,
    feedforward: f64,
    v_target: f64,
    act_dim: usize,
    /// Expert weight for the current episode under `Mix`.
    lambda: f64,
}

impl ScriptedPolicy {
    pub fn new(spec: &ScenarioSpec, quality: Quality) -> Self {
        let m = spec.morph();
        Self {
            quality,
            feedforward: m.drag * spec.v_target / m.gain,
            v_target: spec.v_target,
            act_dim: m.act_dim,
            lambda: 1.0,
        }
    }

    pub fn quality(&self) -> Quality {
        self.quality
    }

    /// Call at episode start; redraws the mixing weight.
    pub fn begin_episode(&mut self, rng: &mut RngStream) {
        if self.quality == Quality::Mix {
            self.lambda = rng.uniform();
        }
    }

    fn expert(&self, s: &PhysState) -> f64 {
        (self.feedforward + EXPERT_GAIN * (self.v_target - s.v)).clamp(-1.0, 1.0)
    }

    pub fn act(&self, s: &PhysState, rng: &mut RngStream) -> Vec<f64> {
        let uniform = |rng: &mut RngStream| -> Vec<f64> { (0..self.act_dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect() };
        match self.quality {
            Quality::Expert => vec![self.expert(s); self.act_dim],
            Quality::Medium => {
                let base = 0.5 * self.feedforward + MEDIUM_GAIN * (self.v_target - s.v);
                (0..self.act_dim)
                    .map(|_| (base + MEDIUM_NOISE * rng.normal()).clamp(-1.0, 1.0))
                    .collect()
            }
            Quality::Mix => {
                let e = self.expert(s);
                uniform(rng)
                    .into_iter()
                    .map(|r| self.lambda * e + (1.0 - self.lambda) * r)
                    .collect()
            }
            Quality::Random => uniform(rng),
        }
    }
}

/// Runs one full episode and returns its undiscounted return.
pub fn episode_return(env: &mut Env, policy: &mut ScriptedPolicy, rng: &mut RngStream) -> Result<f64> {
    env.reset();
    policy.begin_episode(rng);
    let mut total = 0.0;
    loop {
        let a = policy.act(env.state(), rng);
        let r = env.step(&a)?;
        total += r.reward;
        if r.done {
            return Ok(total);
        }
    }
}

/// Returns of the random and expert policies that define the 0 and 100
/// points of the normalized score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchors {
    pub random_ref: f64,
    pub expert_ref: f64,
}

pub const ANCHOR_EPISODES: usize = 4;

/// Anchors for `spec`'s morphology and target speed under default dynamics.
pub fn anchors(spec: &ScenarioSpec) -> Result<Anchors> {
    let base = ScenarioSpec {
        seed: 0x5EED_0A9C,
        ..ScenarioSpec::default_for(spec.morphology, spec.v_target)
    };
    let mean_return = |q: Quality| -> Result<f64> {
        let mut env = Env::new(base.clone(), 0);
        let mut pol = ScriptedPolicy::new(&base, q);
        let mut rng = RngStream::new(base.seed, 1);
        let mut s = 0.0;
        for _ in 0..ANCHOR_EPISODES {
            s += episode_return(&mut env, &mut pol, &mut rng)?;
        }
        Ok(s / ANCHOR_EPISODES as f64)
    };
    Ok(Anchors {
        random_ref: mean_return(Quality::Random)?,
        expert_ref: mean_return(Quality::Expert)?,
    })
}

/// `100·(raw − random)/(expert − random)`, clipped to `[−10, 110]`.
pub fn normalized_return(raw: f64, anchors: &Anchors) -> Result<f64> {
    let span = anchors.expert_ref - anchors.random_ref;
    if !(span > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "degenerate anchors: expert {} not above random {}",
            anchors.expert_ref, anchors.random_ref
        )));
    }
    Ok((100.0 * (raw - anchors.random_ref) / span).clamp(-10.0, 110.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
    /// Episode ended by the state trap rather than the time limit.
    pub trapped: bool,
    pub scenario_id: usize,
    /// Index of `obs` within its episode.
    pub time: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_alpha_and_beta_give_defaults() {
        let mut rng = RngStream::new(0, 0);
        for m in MorphologyId::ALL {
            let s = sample_scenario(m, 0.0, 0.0, &mut rng).unwrap();
            let d = m.spec();
            assert_eq!(s.gain, d.gain);
            assert_eq!(s.drag, d.drag);
            assert_eq!(s.stiffness, d.stiffness.unwrap_or(0.0));
            assert_eq!(s.v_target, 0.0);
        }
    }

    #[test]
    fn v_max_is_terminal_speed() {
        for m in MorphologyId::ALL {
            let d = m.spec();
            assert_eq!(d.v_max, d.gain / d.drag);
        }
    }

    #[test]
    fn reward_peak_and_floor() {
        assert_eq!(reward(1.3, 1.3, 2.0), 1.0);
        assert_eq!(reward(3.5, 1.5, 2.0), 0.0);
        assert_eq!(reward(-5.0, 1.3, 2.0), 0.0);
    }

    #[test]
    fn held_target_speed_earns_full_reward() {
        let spec = ScenarioSpec::default_for(MorphologyId::Hop, 1.0);
        let mut env = Env::new(spec, 0);
        env.state.v = 1.0;
        // Steady state needs g·drive = c·v.
        let r = env.step(&[0.5]).unwrap();
        assert_eq!(r.reward, 1.0);
    }

    #[test]
    fn free_dynamics_keep_velocity() {
        let mut spec = ScenarioSpec::default_for(MorphologyId::Walk, 0.0);
        spec.drag = 0.0;
        let mut env = Env::new(spec, 0);
        env.state.v = 0.7;
        for _ in 0..10 {
            env.step(&[0.0, 0.0]).unwrap();
            assert_eq!(env.state.v, 0.7);
        }
    }

    #[test]
    fn episode_length_is_fixed() {
        let spec = ScenarioSpec::default_for(MorphologyId::Dash, 1.0);
        let mut env = Env::new(spec, 0);
        env.reset();
        for t in 1..=EPISODE_LEN {
            let r = env.step(&[0.3, -0.2]).unwrap();
            assert_eq!(r.done, t == EPISODE_LEN);
        }
    }

    #[test]
    fn non_finite_action_traps_and_resets() {
        let spec = ScenarioSpec::default_for(MorphologyId::Hop, 1.0);
        let mut env = Env::new(spec, 0);
        env.reset();
        let r = env.step(&[f64::NAN]).unwrap();
        assert!(r.trapped && r.done);
        assert_eq!(env.time(), 0);
        assert!(r.obs.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn transform_dims() {
        assert_eq!(ObsTransform::AddD.output_dim(6), 7);
        assert_eq!(ObsTransform::AddD.output_dim(4), 5);
        assert_eq!(ObsTransform::MskR.output_dim(8), 8);
    }

    #[test]
    fn identity_transform() {
        let spec = ScenarioSpec::default_for(MorphologyId::Walk, 1.0);
        let mut env = Env::new(spec, 3);
        let o = env.reset();
        assert_eq!(o, env.base_obs());
    }

    #[test]
    fn text_format_round_trips() {
        let mut rng = RngStream::new(42, 0);
        let set = ScenarioSet::sample(&MorphologyId::ALL, 3, 10.0, 50.0, ObsTransform::MskF, 5, &mut rng).unwrap();
        let text = set.to_text();
        let back = ScenarioSet::from_text(&text).unwrap();
        assert_eq!(set, back);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn text_format_errors_carry_line_numbers() {
        let err = ScenarioSet::from_text("# header\nid=0 morphology=crawl").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn normalized_return_anchor_points() {
        let a = Anchors {
            random_ref: 100.0,
            expert_ref: 300.0,
        };
        assert_eq!(normalized_return(300.0, &a).unwrap(), 100.0);
        assert_eq!(normalized_return(100.0, &a).unwrap(), 0.0);
        assert_eq!(normalized_return(200.0, &a).unwrap(), 50.0);
        assert_eq!(normalized_return(1e9, &a).unwrap(), 110.0);
        assert!(normalized_return(0.0, &Anchors { random_ref: 1.0, expert_ref: 1.0 }).is_err());
    }
}
