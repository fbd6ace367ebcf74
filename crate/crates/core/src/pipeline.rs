//! World-model training across scenarios, scenario adaptation with imagined
//! data, replay storage, ablation variants, and resumable checkpoints.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

use crate::meta_env::{anchors, normalized_return, Env, MorphologyId, ObsTransform, Quality, ScenarioSet, ScenarioSpec, ScriptedPolicy, REWARD_RANGE};
use crate::numerics::{checkpoint, evaluate, Adam, Graph, ParamStore, RngStream, Tensor};
use crate::value_learning::{loss_value_i, loss_value_meta, Agent, AgentConfig, LatentBatch, TransitionBatch, ValueDataset, ValueHead};
use crate::world_model::{ContextWindow, HeadSpec, LatentState, MetaValue, ModelConfig, SeqBatch, Sequence, WorldModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Outer iterations of world-model training.
    pub outer_iters: usize,
    /// Scenario steps `N` per outer iteration.
    pub scenario_steps: usize,
    /// Environment steps collected per scenario step.
    pub collect_steps: usize,
    /// Per-scenario value updates per scenario step.
    pub value_steps: usize,
    /// Per-scenario policy updates per scenario step.
    pub policy_steps: usize,
    /// `(s̃, v_i(s̃))` datapoints stored per scenario step.
    pub value_pairs: usize,
    pub value_capacity: usize,
    /// Meta-value updates per outer iteration.
    pub meta_value_steps: usize,
    /// World-model updates per outer iteration.
    pub model_steps: usize,
    /// Behavior policy used to collect training data.
    pub quality: Quality,
    /// Real steps of adaptation.
    pub adapt_steps: usize,
    /// Real steps `E` per adaptation loop.
    pub env_steps: usize,
    /// Imagination horizon `H`.
    pub horizon: usize,
    /// Policy updates `G` per real step.
    pub policy_updates: usize,
    /// Real steps before policy updates start.
    pub warmup_steps: usize,
    /// World-model fine-tuning steps after every `E` real steps.
    pub finetune_steps: usize,
    pub batch: usize,
    pub model_lr: f64,
    pub value_lr: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub buffer_capacity: usize,
    pub eval_episodes: usize,
    pub divergence_limit: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            outer_iters: 20,
            scenario_steps: 4,
            collect_steps: 500,
            value_steps: 20,
            policy_steps: 20,
            value_pairs: 64,
            value_capacity: 20_000,
            meta_value_steps: 100,
            model_steps: 50,
            quality: Quality::Mix,
            adapt_steps: 100_000,
            env_steps: 500,
            horizon: 5,
            policy_updates: 10,
            warmup_steps: 256,
            finetune_steps: 50,
            batch: 32,
            model_lr: 1e-4,
            value_lr: 2e-4,
            weight_decay: 1e-4,
            gamma: 0.99,
            buffer_capacity: 1_000_000,
            eval_episodes: 2,
            divergence_limit: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("outer_iters", self.outer_iters),
            ("scenario_steps", self.scenario_steps),
            ("collect_steps", self.collect_steps),
            ("env_steps", self.env_steps),
            ("horizon", self.horizon),
            ("policy_updates", self.policy_updates),
            ("batch", self.batch),
            ("buffer_capacity", self.buffer_capacity),
            ("value_capacity", self.value_capacity),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("train config: {name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("train config: gamma {} outside [0, 1)", self.gamma)));
        }
        if !(self.model_lr > 0.0 && self.value_lr > 0.0 && self.weight_decay >= 0.0 && self.divergence_limit > 0.0) {
            return Err(Error::InvalidArgument("train config: rates must be positive".into()));
        }
        if self.collect_steps > self.buffer_capacity {
            return Err(Error::InvalidArgument("train config: buffer_capacity below collect_steps".into()));
        }
        Ok(())
    }
}

/// Everything a pipeline run needs besides scenarios and seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub agent: AgentConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.agent.validate()
    }

    /// Desk-scale widths and budgets.
    pub fn small() -> Self {
        Self {
            model: ModelConfig::small(),
            ..Self::default()
        }
    }

    /// Minimal budgets for smoke tests.
    pub fn tiny() -> Self {
        Self {
            model: ModelConfig::tiny(),
            train: TrainConfig {
                outer_iters: 1,
                scenario_steps: 2,
                collect_steps: 40,
                value_steps: 2,
                policy_steps: 2,
                value_pairs: 8,
                meta_value_steps: 2,
                model_steps: 2,
                adapt_steps: 60,
                env_steps: 30,
                warmup_steps: 10,
                finetune_steps: 2,
                batch: 4,
                eval_episodes: 1,
                ..TrainConfig::default()
            },
            agent: AgentConfig {
                hidden_dim: 8,
                batch: 4,
                ..AgentConfig::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    WoD,
    WoC,
    WoLs,
    WoLv,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::WoD, Variant::WoC, Variant::WoLs, Variant::WoLv];
    pub const ABLATIONS: [Variant; 4] = [Variant::WoD, Variant::WoC, Variant::WoLs, Variant::WoLv];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoD => "wo_d",
            Variant::WoC => "wo_c",
            Variant::WoLs => "wo_ls",
            Variant::WoLv => "wo_lv",
        }
    }

    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::WoD => c.d_dim = 0,
            Variant::WoC => c.use_context = false,
            Variant::WoLs => c.lambda_s = 0.0,
            Variant::WoLv => c.lambda_v = 0.0,
        }
        c
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

/// One stored episode; `latents[t]` is the filtered state after `obs[t]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub scenario_id: usize,
    pub morphology: MorphologyId,
    /// Context pairs preceding `obs[0]`.
    pub seed: Vec<(Vec<f64>, Vec<f64>)>,
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    /// The final transition ended in a trap.
    pub terminal: bool,
    pub latents: Vec<Vec<f64>>,
}

impl Episode {
    pub fn new(spec: &ScenarioSpec, seed: Vec<(Vec<f64>, Vec<f64>)>, first_obs: Vec<f64>) -> Self {
        Self {
            scenario_id: spec.id,
            morphology: spec.morphology,
            seed,
            obs: vec![first_obs],
            actions: Vec::new(),
            rewards: Vec::new(),
            terminal: false,
            latents: Vec::new(),
        }
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn push(&mut self, action: Vec<f64>, reward: f64, next_obs: Vec<f64>, terminal: bool) {
        self.actions.push(action);
        self.rewards.push(reward);
        self.obs.push(next_obs);
        self.terminal = terminal;
    }

    /// The `m` pairs preceding `obs[t]`.
    pub fn window_at(&self, t: usize, m: usize) -> ContextWindow {
        let mut w = ContextWindow::new(m);
        let start = t.saturating_sub(m);
        let need_seed = m.saturating_sub(t);
        let from = self.seed.len().saturating_sub(need_seed);
        for (o, a) in &self.seed[from..] {
            w.push(o.clone(), a.clone());
        }
        for k in start..t {
            w.push(self.obs[k].clone(), self.actions[k].clone());
        }
        w
    }

    /// Successor of transition `t` is terminal.
    pub fn is_terminal(&self, t: usize) -> bool {
        self.terminal && t + 1 == self.len()
    }
}

/// Bounded store of episodes with uniform sampling over transitions. The
/// newest episode may still be growing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
    total: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            episodes: VecDeque::new(),
            total: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stored transitions.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn episode(&self, i: usize) -> &Episode {
        &self.episodes[i]
    }

    /// Episode indices per scenario id.
    pub fn scenario_index(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut idx: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.episodes.iter().enumerate() {
            idx.entry(e.scenario_id).or_default().push(i);
        }
        idx
    }

    fn evict(&mut self) {
        while self.total > self.capacity && self.episodes.len() > 1 {
            let e = self.episodes.pop_front().expect("non-empty");
            self.total -= e.len();
        }
    }

    /// Opens a new episode.
    pub fn begin(&mut self, episode: Episode) -> Result<()> {
        if episode.len() > self.capacity {
            return Err(Error::InvalidArgument(format!("episode of {} transitions exceeds capacity {}", episode.len(), self.capacity)));
        }
        self.total += episode.len();
        self.episodes.push_back(episode);
        self.evict();
        Ok(())
    }

    /// Appends a transition to the newest episode.
    pub fn push_step(&mut self, action: Vec<f64>, reward: f64, next_obs: Vec<f64>, terminal: bool) -> Result<()> {
        let cap = self.capacity;
        let last = self.episodes.back_mut().ok_or(Error::EmptyBatch)?;
        if last.len() + 1 > cap {
            return Err(Error::InvalidArgument(format!("episode exceeds buffer capacity {cap}")));
        }
        last.push(action, reward, next_obs, terminal);
        self.total += 1;
        self.evict();
        Ok(())
    }

    pub fn last_mut(&mut self) -> Option<&mut Episode> {
        self.episodes.back_mut()
    }

    /// Uniform `(episode, t)` over all transitions.
    pub fn sample_index(&self, rng: &mut RngStream) -> Result<(usize, usize)> {
        if self.total == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut k = rng.below(self.total);
        for (i, e) in self.episodes.iter().enumerate() {
            if k < e.len() {
                return Ok((i, k));
            }
            k -= e.len();
        }
        unreachable!("total counts every stored transition")
    }

    /// Uniform `(episode, t)` over the transitions of one scenario.
    pub fn sample_index_in(&self, scenario_id: usize, rng: &mut RngStream) -> Result<(usize, usize)> {
        let total: usize = self.episodes.iter().filter(|e| e.scenario_id == scenario_id).map(Episode::len).sum();
        if total == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut k = rng.below(total);
        for (i, e) in self.episodes.iter().enumerate().filter(|(_, e)| e.scenario_id == scenario_id) {
            if k < e.len() {
                return Ok((i, k));
            }
            k -= e.len();
        }
        unreachable!("total counts every transition of the scenario")
    }

    fn rows(&self, idx: &[(usize, usize)]) -> Result<TransitionBatch> {
        let rows: Vec<(&[f64], &[f64], f64, &[f64], bool)> = idx
            .iter()
            .map(|&(i, t)| {
                let e = &self.episodes[i];
                (e.obs[t].as_slice(), e.actions[t].as_slice(), e.rewards[t], e.obs[t + 1].as_slice(), e.is_terminal(t))
            })
            .collect();
        TransitionBatch::from_rows(&rows)
    }

    /// Uniform minibatch of observation-level transitions.
    pub fn sample_transitions(&self, batch: usize, rng: &mut RngStream) -> Result<TransitionBatch> {
        let idx: Vec<(usize, usize)> = (0..batch).map(|_| self.sample_index(rng)).collect::<Result<_>>()?;
        self.rows(&idx)
    }

    /// Uniform minibatch from one scenario's transitions.
    pub fn sample_scenario_transitions(&self, scenario_id: usize, batch: usize, rng: &mut RngStream) -> Result<TransitionBatch> {
        let idx: Vec<(usize, usize)> = (0..batch).map(|_| self.sample_index_in(scenario_id, rng)).collect::<Result<_>>()?;
        self.rows(&idx)
    }

    /// Sequences of length `len` from episodes of one morphology, chosen
    /// uniformly over valid start positions.
    pub fn sample_sequences(&self, morph: MorphologyId, batch: usize, m: usize, len: usize, rng: &mut RngStream) -> Result<SeqBatch> {
        let weights: Vec<usize> = self
            .episodes
            .iter()
            .map(|e| if e.morphology == morph { (e.len() + 1).saturating_sub(len) } else { 0 })
            .collect();
        let total: usize = weights.iter().sum();
        if total == 0 || batch == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut seqs = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut k = rng.below(total);
            let mut i = 0;
            while k >= weights[i] {
                k -= weights[i];
                i += 1;
            }
            let e = &self.episodes[i];
            seqs.push(Sequence::from_trace(&e.obs, &e.actions, &e.rewards, Some(&e.seed), k + 1, m, len)?);
        }
        SeqBatch::from_sequences(morph, m, &seqs)
    }

    /// Morphologies with at least one sequence of length `len`.
    pub fn morphologies_with(&self, len: usize) -> Vec<MorphologyId> {
        let mut out: Vec<MorphologyId> = self.episodes.iter().filter(|e| e.len() >= len).map(|e| e.morphology).collect();
        out.sort();
        out.dedup();
        out
    }
}

/// An imagined transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTransition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
}

/// One line of the metrics log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub phase: String,
    pub iter: usize,
    pub scenario_id: Option<usize>,
    pub loss_var: Option<f64>,
    pub loss_s: Option<f64>,
    pub loss_v: Option<f64>,
    pub loss_total: Option<f64>,
    pub value_loss_i: Option<f64>,
    pub value_loss_meta: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub normalized_return: Option<f64>,
    pub real_steps: Option<usize>,
    pub model_transitions: Option<usize>,
    pub wall_time: f64,
}

fn guard(name: &str, value: f64, iter: usize, limit: f64) -> Result<f64> {
    if !value.is_finite() || value.abs() > limit {
        return Err(Error::Divergence {
            name: name.to_string(),
            value,
            iter,
        });
    }
    Ok(value)
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// The scripted expert's last `m` pairs in `spec`, used to seed the context.
pub fn expert_context(spec: &ScenarioSpec, m: usize, stream: u64) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut env = Env::new(spec.clone(), stream);
    let pol = ScriptedPolicy::new(spec, Quality::Expert);
    let mut rng = RngStream::new(spec.seed, stream ^ 0xC0_47E7);
    let mut w = ContextWindow::new(m);
    let mut o = env.reset();
    for _ in 0..2 * m {
        let a = pol.act(env.state(), &mut rng);
        let r = env.step(&a)?;
        w.push(o, a);
        o = r.obs;
    }
    Ok(w.entries().cloned().collect())
}

fn head_specs(scenarios: &ScenarioSet) -> Vec<HeadSpec> {
    let mut out: Vec<HeadSpec> = Vec::new();
    for s in &scenarios.scenarios {
        if !out.iter().any(|h| h.morphology == s.morphology) {
            out.push(HeadSpec {
                morphology: s.morphology,
                obs_dim: s.obs_dim(),
                act_dim: s.act_dim(),
            });
        }
    }
    out.sort_by_key(|h| h.morphology);
    out
}

/// Stream labels; every random draw derives from `(seed, label, counter)`.
mod stream {
    pub const INIT: u64 = 1;
    pub const SCENARIO_VALUE: u64 = 2;
    pub const SCENARIO_AGENT: u64 = 3;
    pub const ITER: u64 = 4;
    pub const ADAPT: u64 = 5;
    pub const EVAL: u64 = 6;
}

fn derived(seed: u64, label: u64, counter: u64) -> RngStream {
    RngStream::new(seed, (label << 40) ^ counter)
}

/// The world model, meta-value and per-scenario learners of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: PipelineConfig,
    seed: u64,
    scenarios: ScenarioSet,
    model: WorldModel,
    theta: ParamStore,
    value_head: ValueHead,
    psi: ParamStore,
    scenario_values: BTreeMap<usize, ParamStore>,
    scenario_agents: BTreeMap<usize, Agent>,
    buffer: ReplayBuffer,
    value_data: ValueDataset,
    iter: usize,
}

/// Result of world-model training, consumed by adaptation.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub cfg: PipelineConfig,
    pub model: WorldModel,
    pub theta: ParamStore,
    pub value_head: ValueHead,
    pub psi: ParamStore,
}

impl Trainer {
    pub fn new(cfg: &PipelineConfig, scenarios: &ScenarioSet, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if scenarios.is_empty() {
            return Err(Error::InvalidArgument("training needs at least one scenario".into()));
        }
        let mut rng = derived(seed, stream::INIT, 0);
        let (model, theta) = WorldModel::new(&cfg.model, &head_specs(scenarios), &mut rng)?;
        let mut psi = ParamStore::new("psi");
        let value_head = ValueHead::new(&mut psi, cfg.model.s_dim(), cfg.model.hidden_dim, cfg.model.activation, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            scenarios: scenarios.clone(),
            model,
            theta,
            value_head,
            psi,
            scenario_values: BTreeMap::new(),
            scenario_agents: BTreeMap::new(),
            buffer: ReplayBuffer::new(cfg.train.buffer_capacity),
            value_data: ValueDataset::new(),
            iter: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn theta(&self) -> &ParamStore {
        &self.theta
    }

    pub fn psi(&self) -> &ParamStore {
        &self.psi
    }

    pub fn model(&self) -> &WorldModel {
        &self.model
    }

    pub fn scenario_value(&self, id: usize) -> Option<&ParamStore> {
        self.scenario_values.get(&id)
    }

    pub fn scenario_agent(&self, id: usize) -> Option<&Agent> {
        self.scenario_agents.get(&id)
    }

    /// Every parameter store, in a fixed order.
    pub fn stores(&self) -> Vec<&ParamStore> {
        let mut out = vec![&self.theta, &self.psi];
        out.extend(self.scenario_values.values());
        for a in self.scenario_agents.values() {
            out.push(a.actor_store());
            out.push(a.critic_store());
        }
        out
    }

    fn ensure_learners(&mut self, spec: &ScenarioSpec) -> Result<()> {
        let id = spec.id;
        if !self.scenario_values.contains_key(&id) {
            let mut st = ParamStore::new(&format!("psi_{id}"));
            let mut rng = derived(self.seed, stream::SCENARIO_VALUE, id as u64);
            ValueHead::new(&mut st, self.cfg.model.s_dim(), self.cfg.model.hidden_dim, self.cfg.model.activation, &mut rng)?;
            self.scenario_values.insert(id, st);
        }
        if !self.scenario_agents.contains_key(&id) {
            let mut rng = derived(self.seed, stream::SCENARIO_AGENT, id as u64);
            let agent = Agent::new(&format!("phi_{id}"), &self.cfg.agent, spec.obs_dim(), spec.act_dim(), &mut rng)?;
            self.scenario_agents.insert(id, agent);
        }
        Ok(())
    }

    fn collect(&mut self, spec: &ScenarioSpec, rng: &mut RngStream) -> Result<usize> {
        let m = self.cfg.model.m;
        let stream = rng.next_u64();
        let seed = expert_context(spec, m, stream)?;
        let mut env = Env::new(spec.clone(), stream);
        let mut pol = ScriptedPolicy::new(spec, self.cfg.train.quality);
        pol.begin_episode(rng);
        let first = env.reset();
        self.buffer.begin(Episode::new(spec, seed, first))?;
        for _ in 0..self.cfg.train.collect_steps {
            let a = pol.act(env.state(), rng);
            let r = env.step(&a)?;
            self.buffer.push_step(a, r.reward, r.obs, r.trapped)?;
            if r.done {
                break;
            }
        }
        let e = self.buffer.last_mut().expect("episode just opened");
        let lat = self.model.filter_episode(&self.theta, e.morphology, &e.seed, &e.obs, &e.actions)?;
        e.latents = lat.iter().map(LatentState::s_tilde).collect();
        Ok(self.buffer.num_episodes() - 1)
    }

    fn latent_batch(e: &Episode, batch: usize, rng: &mut RngStream) -> LatentBatch {
        let n = e.len();
        let dim = e.latents[0].len();
        let (mut s, mut r, mut s2, mut c) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..batch {
            let t = rng.below(n);
            s.extend_from_slice(&e.latents[t]);
            s2.extend_from_slice(&e.latents[t + 1]);
            r.push(e.rewards[t]);
            c.push(if e.is_terminal(t) { 0.0 } else { 1.0 });
        }
        LatentBatch {
            s: Tensor::new(vec![batch, dim], s).expect("sized"),
            reward: Tensor::column(&r),
            next_s: Tensor::new(vec![batch, dim], s2).expect("sized"),
            cont: Tensor::column(&c),
        }
    }

    fn scenario_step(&mut self, spec: &ScenarioSpec, rng: &mut RngStream) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
        let tc = self.cfg.train.clone();
        self.ensure_learners(spec)?;
        let ep_idx = self.collect(spec, rng)?;
        let value_opt = Adam::new(tc.value_lr).with_weight_decay(tc.weight_decay);
        let mut vlosses = Vec::new();
        {
            let e = self.buffer.episode(ep_idx).clone();
            if e.is_empty() {
                return Ok((None, None, None));
            }
            let st = self.scenario_values.get_mut(&spec.id).expect("created above");
            for _ in 0..tc.value_steps {
                let b = Self::latent_batch(&e, tc.batch, rng);
                let (v, grads) = {
                    let mut g = Graph::new();
                    let l = loss_value_i(&mut g, &self.value_head, st, &b, tc.gamma)?;
                    let (v, gr) = evaluate(&g, l, true)?;
                    (v, gr.expect("gradients requested"))
                };
                vlosses.push(guard("value_loss_i", v, self.iter, tc.divergence_limit)?);
                st.zero_grad();
                st.accumulate(&grads);
                value_opt.step(st)?;
            }
            for _ in 0..tc.value_pairs {
                let t = rng.below(e.latents.len());
                let v = self.value_head.eval(st, &e.latents[t]);
                self.value_data.push(spec.id, e.latents[t].clone(), v);
            }
            self.value_data.truncate_front(tc.value_capacity);
        }
        let mut closses = Vec::new();
        let mut alosses = Vec::new();
        let agent = self.scenario_agents.get_mut(&spec.id).expect("created above");
        for _ in 0..tc.policy_steps {
            let b = self.buffer.sample_scenario_transitions(spec.id, self.cfg.agent.batch, rng)?;
            let s = agent.update(&b, rng)?;
            closses.push(guard("critic_loss", s.critic_loss, self.iter, tc.divergence_limit)?);
            alosses.push(guard("actor_loss", s.actor_loss, self.iter, tc.divergence_limit)?);
        }
        Ok((mean(&vlosses), mean(&closses), mean(&alosses)))
    }

    fn meta_value_phase(&mut self, rng: &mut RngStream) -> Result<Option<f64>> {
        let tc = &self.cfg.train;
        if self.value_data.is_empty() {
            return Ok(None);
        }
        let opt = Adam::new(tc.value_lr).with_weight_decay(tc.weight_decay);
        let mut losses = Vec::new();
        for _ in 0..tc.meta_value_steps {
            let (s, y) = self.value_data.sample(tc.batch, rng)?;
            let (v, grads) = {
                let mut g = Graph::new();
                let l = loss_value_meta(&mut g, &self.value_head, &self.psi, &s, &y)?;
                let (v, gr) = evaluate(&g, l, true)?;
                (v, gr.expect("gradients requested"))
            };
            losses.push(guard("value_loss_meta", v, self.iter, tc.divergence_limit)?);
            self.psi.zero_grad();
            self.psi.accumulate(&grads);
            opt.step(&mut self.psi)?;
        }
        Ok(mean(&losses))
    }

    fn model_phase(&mut self, rng: &mut RngStream) -> Result<[Option<f64>; 4]> {
        let tc = self.cfg.train.clone();
        let mc = &self.cfg.model;
        let morphs = self.buffer.morphologies_with(mc.seq_len);
        if morphs.is_empty() {
            return Ok([None; 4]);
        }
        let opt = Adam::new(tc.model_lr).with_weight_decay(tc.weight_decay);
        let meta = MetaValue {
            head: &self.value_head,
            store: &self.psi,
        };
        let mut acc = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        for _ in 0..tc.model_steps {
            let morph = morphs[rng.below(morphs.len())];
            let b = self.buffer.sample_sequences(morph, mc.batch, mc.m, mc.seq_len, rng)?;
            let l = self.model.train_step(&mut self.theta, &opt, &b, Some(meta), rng)?;
            for (k, (name, v)) in [("loss_var", l.var), ("loss_s", l.s), ("loss_v", l.v), ("loss_total", l.total)].into_iter().enumerate() {
                acc[k].push(guard(name, v, self.iter, tc.divergence_limit)?);
            }
        }
        Ok([mean(&acc[0]), mean(&acc[1]), mean(&acc[2]), mean(&acc[3])])
    }

    /// One outer iteration: `N` scenario steps, the meta-value phase, then
    /// world-model updates.
    pub fn run_iteration(&mut self) -> Result<Metrics> {
        let start = Instant::now();
        let mut rng = derived(self.seed, stream::ITER, self.iter as u64);
        let mut values = Vec::new();
        let mut critics = Vec::new();
        let mut actors = Vec::new();
        let mut last_id = None;
        for _ in 0..self.cfg.train.scenario_steps {
            let spec = self.scenarios.scenarios[rng.below(self.scenarios.len())].clone();
            last_id = Some(spec.id);
            let (v, c, a) = self.scenario_step(&spec, &mut rng)?;
            values.extend(v);
            critics.extend(c);
            actors.extend(a);
        }
        let meta = self.meta_value_phase(&mut rng)?;
        let [var, s, v, total] = self.model_phase(&mut rng)?;
        let m = Metrics {
            phase: "train".into(),
            iter: self.iter,
            scenario_id: last_id,
            loss_var: var,
            loss_s: s,
            loss_v: v,
            loss_total: total,
            value_loss_i: mean(&values),
            value_loss_meta: meta,
            critic_loss: mean(&critics),
            actor_loss: mean(&actors),
            normalized_return: None,
            real_steps: Some(self.buffer.len()),
            model_transitions: None,
            wall_time: start.elapsed().as_secs_f64(),
        };
        self.iter += 1;
        Ok(m)
    }

    /// Runs the remaining outer iterations, reporting each.
    pub fn run(&mut self, sink: &mut dyn FnMut(&Metrics)) -> Result<()> {
        while self.iter < self.cfg.train.outer_iters {
            let m = self.run_iteration()?;
            sink(&m);
        }
        Ok(())
    }

    pub fn finish(&self) -> TrainedModel {
        TrainedModel {
            cfg: self.cfg.clone(),
            model: self.model.clone(),
            theta: self.theta.clone(),
            value_head: self.value_head.clone(),
            psi: self.psi.clone(),
        }
    }

    /// Writes parameters, optimizer moments, replay and value data to `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut meta = BTreeMap::new();
        meta.insert("iteration".to_string(), self.iter.to_string());
        meta.insert("seed".to_string(), self.seed.to_string());
        let ids: Vec<String> = self.scenario_values.keys().map(|k| k.to_string()).collect();
        meta.insert("scenario_learners".to_string(), ids.join(","));
        meta.insert("config".to_string(), serde_json::to_string(&self.cfg)?);
        checkpoint::save(dir, &self.stores(), &meta)?;
        let state = SavedData {
            buffer: self.buffer.clone(),
            value_data: self.value_data.clone(),
        };
        std::fs::write(dir.join(DATA_FILE), serde_json::to_vec(&state)?)?;
        Ok(())
    }

    /// Restores a run saved by [`Self::save`] with the same config, scenarios and seed.
    pub fn load(dir: &Path, cfg: &PipelineConfig, scenarios: &ScenarioSet, seed: u64) -> Result<Self> {
        let mut t = Self::new(cfg, scenarios, seed)?;
        let manifest: checkpoint::Manifest = serde_json::from_slice(&std::fs::read(dir.join(checkpoint::MANIFEST_FILE))?)?;
        let bad = |reason: &str| Error::Checkpoint {
            name: "meta".into(),
            reason: reason.into(),
        };
        if manifest.meta.get("config") != Some(&serde_json::to_string(cfg)?) {
            return Err(bad("config differs from the saved run"));
        }
        if manifest.meta.get("seed") != Some(&seed.to_string()) {
            return Err(bad("seed differs from the saved run"));
        }
        let ids = manifest.meta.get("scenario_learners").cloned().unwrap_or_default();
        for id in ids.split(',').filter(|s| !s.is_empty()) {
            let id: usize = id.parse().map_err(|_| bad("malformed scenario list"))?;
            let spec = scenarios
                .scenarios
                .iter()
                .find(|s| s.id == id)
                .cloned()
                .ok_or_else(|| bad("saved scenario missing from the scenario set"))?;
            t.ensure_learners(&spec)?;
        }
        t.iter = manifest
            .meta
            .get("iteration")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing iteration"))?;
        {
            let mut stores: Vec<&mut ParamStore> = vec![&mut t.theta, &mut t.psi];
            stores.extend(t.scenario_values.values_mut());
            for a in t.scenario_agents.values_mut() {
                let (x, y) = a.stores_mut();
                stores.push(x);
                stores.push(y);
            }
            checkpoint::load(dir, &mut stores)?;
        }
        let data: SavedData = serde_json::from_slice(&std::fs::read(dir.join(DATA_FILE))?)?;
        t.buffer = data.buffer;
        t.value_data = data.value_data;
        Ok(t)
    }
}

pub const DATA_FILE: &str = "data.json";

#[derive(Serialize, Deserialize)]
struct SavedData {
    buffer: ReplayBuffer,
    value_data: ValueDataset,
}

/// Outcome of adapting to one target scenario.
#[derive(Clone, Debug)]
pub struct Adapted {
    pub agent: Agent,
    pub theta: ParamStore,
    pub normalized_return: f64,
    pub real_steps: usize,
    pub model_transitions: usize,
    /// Real rows and model rows drawn for policy updates.
    pub sampled_real: usize,
    pub sampled_model: usize,
}

/// Scenario adaptation on `target`: real steps feed the replay, each real
/// step adds an `H`-step imagined rollout, and `G` policy updates draw from
/// real and model data at ratio `1 : H`.
pub fn adapt(trained: &TrainedModel, target: &ScenarioSpec, seed: u64, sink: &mut dyn FnMut(&Metrics)) -> Result<Adapted> {
    let cfg = &trained.cfg;
    let tc = &cfg.train;
    let m = cfg.model.m;
    let head = trained.model.head_spec(target.morphology)?;
    if head.obs_dim != target.obs_dim() || head.act_dim != target.act_dim() {
        return Err(Error::Shape(format!("target {} does not match the model's {} head", target.id, target.morphology)));
    }
    let model = &trained.model;
    let mut theta = trained.theta.clone();
    let meta = MetaValue {
        head: &trained.value_head,
        store: &trained.psi,
    };
    let mut rng = derived(seed, stream::ADAPT, target.id as u64);
    let mut agent = Agent::new("phi", &cfg.agent, target.obs_dim(), target.act_dim(), &mut rng)?;
    let opt = Adam::new(tc.model_lr).with_weight_decay(tc.weight_decay);
    let mut real = ReplayBuffer::new(tc.buffer_capacity.max(tc.adapt_steps + 1));
    let mut model_data: Vec<ModelTransition> = Vec::new();
    let (mut total_model, mut sampled_real, mut sampled_model) = (0usize, 0usize, 0usize);
    let p_real = 1.0 / (1.0 + tc.horizon as f64);

    let env_stream = rng.next_u64();
    let mut env = Env::new(target.clone(), env_stream);
    let mut episode_no = 0u64;
    let start_episode = |env: &mut Env, real: &mut ReplayBuffer, n: &mut u64| -> Result<(ContextWindow, LatentState)> {
        let seed_ctx = expert_context(target, m, env_stream ^ (*n + 1))?;
        *n += 1;
        let o = env.reset();
        let mut w = ContextWindow::new(m);
        for (so, sa) in &seed_ctx {
            w.push(so.clone(), sa.clone());
        }
        real.begin(Episode::new(target, seed_ctx, o))?;
        Ok((w, LatentState::zeros(&cfg.model)))
    };
    let (mut window, mut latent) = start_episode(&mut env, &mut real, &mut episode_no)?;
    let mut prev_action = vec![0.0; target.act_dim()];
    let wall = Instant::now();
    let mut step = 0usize;
    let mut loop_no = 0usize;
    let mut train_returns = Vec::new();
    let mut ep_return = 0.0;
    let anchor = anchors(target)?;

    while step < tc.adapt_steps {
        let (mut closses, mut alosses) = (Vec::new(), Vec::new());
        let loop_end = (step + tc.env_steps).min(tc.adapt_steps);
        while step < loop_end {
            let ep = real.last_mut().expect("episode open");
            let o = ep.obs.last().expect("observation").clone();
            latent = model.posterior_step(&theta, target.morphology, &window, &prev_action, &o, &latent, None)?;
            ep.latents.push(latent.s_tilde());
            let a = agent.act(&o, &mut rng)?;
            let r = env.step(&a)?;
            ep_return += r.reward;
            real.push_step(a.clone(), r.reward, r.obs, r.trapped)?;
            window.push(o, a.clone());
            prev_action = a;
            step += 1;

            let (ei, t) = real.sample_index(&mut rng)?;
            let e = real.episode(ei);
            if t < e.latents.len() {
                let w0 = e.window_at(t, m);
                let s0 = LatentState::from_s_tilde(&cfg.model, &e.latents[t])?;
                let o0 = e.obs[t].clone();
                let mut pol_rng = rng.derive(step as u64);
                let mut act = |obs: &[f64]| agent.act(obs, &mut pol_rng).expect("decoded observation has the head's width");
                let traj = model.imagine_rollout(&theta, target.morphology, &w0, &o0, &s0, &mut act, tc.horizon, &mut rng)?;
                total_model += traj.len();
                model_data.extend(traj.into_iter().map(|s| ModelTransition {
                    obs: s.obs,
                    action: s.action,
                    reward: s.reward.clamp(REWARD_RANGE.0, REWARD_RANGE.1),
                    next_obs: s.next_obs,
                }));
            }

            if step >= tc.warmup_steps {
                for _ in 0..tc.policy_updates {
                    let mut rows: Vec<(&[f64], &[f64], f64, &[f64], bool)> = Vec::with_capacity(cfg.agent.batch);
                    let mut picks = Vec::with_capacity(cfg.agent.batch);
                    for _ in 0..cfg.agent.batch {
                        if model_data.is_empty() || rng.uniform() < p_real {
                            picks.push(Err(real.sample_index(&mut rng)?));
                        } else {
                            picks.push(Ok(rng.below(model_data.len())));
                        }
                    }
                    for p in &picks {
                        match *p {
                            Err((i, t)) => {
                                let e = real.episode(i);
                                rows.push((&e.obs[t], &e.actions[t], e.rewards[t], &e.obs[t + 1], e.is_terminal(t)));
                                sampled_real += 1;
                            }
                            Ok(k) => {
                                let x = &model_data[k];
                                rows.push((&x.obs, &x.action, x.reward, &x.next_obs, false));
                                sampled_model += 1;
                            }
                        }
                    }
                    let b = TransitionBatch::from_rows(&rows)?;
                    let s = agent.update(&b, &mut rng)?;
                    closses.push(guard("critic_loss", s.critic_loss, loop_no, tc.divergence_limit)?);
                    alosses.push(guard("actor_loss", s.actor_loss, loop_no, tc.divergence_limit)?);
                }
            }

            if r.done {
                train_returns.push(normalized_return(ep_return, &anchor)?);
                ep_return = 0.0;
                let (w, l) = start_episode(&mut env, &mut real, &mut episode_no)?;
                window = w;
                latent = l;
                prev_action = vec![0.0; target.act_dim()];
            }
        }

        let mut acc = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        if real.morphologies_with(cfg.model.seq_len).contains(&target.morphology) {
            for _ in 0..tc.finetune_steps {
                let b = real.sample_sequences(target.morphology, cfg.model.batch, m, cfg.model.seq_len, &mut rng)?;
                let l = model.train_step(&mut theta, &opt, &b, Some(meta), &mut rng)?;
                for (k, (name, v)) in [("loss_var", l.var), ("loss_s", l.s), ("loss_v", l.v), ("loss_total", l.total)].into_iter().enumerate() {
                    acc[k].push(guard(name, v, loop_no, tc.divergence_limit)?);
                }
            }
        }
        sink(&Metrics {
            phase: "adapt".into(),
            iter: loop_no,
            scenario_id: Some(target.id),
            loss_var: mean(&acc[0]),
            loss_s: mean(&acc[1]),
            loss_v: mean(&acc[2]),
            loss_total: mean(&acc[3]),
            critic_loss: mean(&closses),
            actor_loss: mean(&alosses),
            normalized_return: train_returns.last().copied(),
            real_steps: Some(step),
            model_transitions: Some(total_model),
            wall_time: wall.elapsed().as_secs_f64(),
            ..Metrics::default()
        });
        model_data.clear();
        loop_no += 1;
    }

    let normalized = evaluate_agent(&agent, target, tc.eval_episodes, seed)?;
    Ok(Adapted {
        agent,
        theta,
        normalized_return: normalized,
        real_steps: step,
        model_transitions: total_model,
        sampled_real,
        sampled_model,
    })
}

/// Mean normalized return of the stochastic policy over fresh episodes.
pub fn evaluate_agent(agent: &Agent, target: &ScenarioSpec, episodes: usize, seed: u64) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    let anchor = anchors(target)?;
    let mut rng = derived(seed, stream::EVAL, target.id as u64);
    let mut env = Env::new(target.clone(), rng.next_u64());
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut o = env.reset();
        let mut ret = 0.0;
        loop {
            let a = agent.act(&o, &mut rng)?;
            let r = env.step(&a)?;
            ret += r.reward;
            if r.done {
                break;
            }
            o = r.obs;
        }
        total += normalized_return(ret, &anchor)?;
    }
    Ok(total / episodes as f64)
}

/// Runs every outer iteration of a fresh [`Trainer`].
pub fn train_world_model(cfg: &PipelineConfig, scenarios: &ScenarioSet, seed: u64, sink: &mut dyn FnMut(&Metrics)) -> Result<TrainedModel> {
    let mut t = Trainer::new(cfg, scenarios, seed)?;
    t.run(sink)?;
    Ok(t.finish())
}

/// In-sample R² of the least-squares affine map from rows of `x` to each
/// column of `y`, averaged over columns. Constant columns score 1 when fit exactly.
pub fn linear_probe_r2(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::InvalidArgument(format!("{} inputs for {} targets", x.len(), y.len())));
    }
    let (n, p, k) = (x.len(), x[0].len(), y[0].len());
    if k == 0 || x.iter().any(|r| r.len() != p) || y.iter().any(|r| r.len() != k) {
        return Err(Error::Shape("ragged probe rows".into()));
    }
    let design = DMatrix::from_fn(n, p + 1, |i, j| if j < p { x[i][j] } else { 1.0 });
    let svd = design.clone().svd(true, true);
    let mut total = 0.0;
    for c in 0..k {
        let target = DVector::from_fn(n, |i, _| y[i][c]);
        let w = svd.solve(&target, 1e-12).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let resid = &target - &design * w;
        let mean = target.mean();
        let sst: f64 = target.iter().map(|v| (v - mean).powi(2)).sum();
        let sse = resid.norm_squared();
        total += if sst > 0.0 { 1.0 - sse / sst } else if sse == 0.0 { 1.0 } else { 0.0 };
    }
    Ok(total / k as f64)
}

/// Linear-probe R² from posterior-mean `u` to the appended noise dimensions
/// of an `AddD` scenario, over episodes of the mixed scripted policy.
pub fn noise_probe_r2(trained: &TrainedModel, spec: &ScenarioSpec, episodes: usize, steps: usize, seed: u64) -> Result<f64> {
    if spec.transform != ObsTransform::AddD {
        return Err(Error::InvalidArgument("noise probe needs the addd transform".into()));
    }
    let base = spec.morph().obs_dim;
    let m = trained.cfg.model.m;
    let u_dim = trained.cfg.model.u_dim;
    let mut rng = derived(seed, stream::EVAL, spec.id as u64 ^ 0x9B0B);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for _ in 0..episodes {
        let stream = rng.next_u64();
        let ctx = expert_context(spec, m, stream)?;
        let mut env = Env::new(spec.clone(), stream);
        let mut pol = ScriptedPolicy::new(spec, Quality::Mix);
        pol.begin_episode(&mut rng);
        let mut obs = vec![env.reset()];
        let mut acts = Vec::new();
        for _ in 0..steps {
            let a = pol.act(env.state(), &mut rng);
            let r = env.step(&a)?;
            acts.push(a);
            obs.push(r.obs);
            if r.done {
                break;
            }
        }
        let lat = trained.model.filter_episode(&trained.theta, spec.morphology, &ctx, &obs, &acts)?;
        for (o, l) in obs.iter().zip(&lat) {
            xs.push(l.u[..u_dim].to_vec());
            ys.push(o[base..].to_vec());
        }
    }
    linear_probe_r2(&xs, &ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta_env::ScenarioSet;
    use proptest::prelude::*;

    fn suite(morphs: &[MorphologyId], per: usize) -> ScenarioSet {
        ScenarioSet::sample(morphs, per, 10.0, 50.0, ObsTransform::None, 0, &mut RngStream::new(11, 0)).unwrap()
    }

    fn scrub(mut m: Metrics) -> Metrics {
        m.wall_time = 0.0;
        m
    }

    fn snapshot(t: &Trainer) -> Vec<ParamStore> {
        t.stores().into_iter().cloned().collect()
    }

    fn changed(before: &[ParamStore], t: &Trainer) -> Vec<String> {
        before
            .iter()
            .zip(t.stores())
            .filter(|(a, b)| !a.values_bitwise_eq(b))
            .map(|(a, _)| a.namespace().to_string())
            .collect()
    }

    #[test]
    fn one_iteration_touches_every_namespace() {
        let set = suite(&[MorphologyId::Hop], 1);
        let mut t = Trainer::new(&PipelineConfig::tiny(), &set, 0).unwrap();
        let before = snapshot(&t);
        let m = t.run_iteration().unwrap();
        for v in [m.loss_var, m.loss_s, m.loss_v, m.loss_total, m.value_loss_i, m.value_loss_meta, m.critic_loss, m.actor_loss] {
            assert!(v.unwrap().is_finite());
        }
        let id = set.scenarios[0].id;
        let mut touched = changed(&before[..2], &t);
        touched.extend(t.stores()[2..].iter().map(|s| s.namespace().to_string()));
        let expect = vec!["theta".to_string(), "psi".into(), format!("psi_{id}"), format!("phi_{id}"), format!("phi_{id}.q")];
        assert_eq!(touched, expect);
        assert!(t.stores().iter().all(|s| s.all_finite()));
    }

    #[test]
    fn phases_own_their_parameters() {
        let set = suite(&[MorphologyId::Hop, MorphologyId::Walk], 1);
        let mut t = Trainer::new(&PipelineConfig::tiny(), &set, 1).unwrap();
        let mut rng = RngStream::new(1, 1);
        let spec = set.scenarios[0].clone();
        t.ensure_learners(&spec).unwrap();
        let before = snapshot(&t);
        t.scenario_step(&spec, &mut rng).unwrap();
        let id = spec.id;
        assert_eq!(changed(&before, &t), vec![format!("psi_{id}"), format!("phi_{id}"), format!("phi_{id}.q")]);
        let before = snapshot(&t);
        t.meta_value_phase(&mut rng).unwrap();
        assert_eq!(changed(&before, &t), vec!["psi".to_string()]);
        let before = snapshot(&t);
        t.model_phase(&mut rng).unwrap();
        assert_eq!(changed(&before, &t), vec!["theta".to_string()]);
    }

    #[test]
    fn training_replays_bit_identically() {
        let set = suite(&[MorphologyId::Hop, MorphologyId::Dash], 1);
        let cfg = PipelineConfig::tiny();
        let run = || {
            let mut t = Trainer::new(&cfg, &set, 5).unwrap();
            let ms: Vec<Metrics> = (0..2).map(|_| scrub(t.run_iteration().unwrap())).collect();
            (ms, snapshot(&t))
        };
        let (ma, sa) = run();
        let (mb, sb) = run();
        assert_eq!(ma, mb);
        assert!(sa.iter().zip(&sb).all(|(a, b)| a.values_bitwise_eq(b)));
    }

    #[test]
    fn checkpoint_resave_is_byte_identical() {
        let set = suite(&[MorphologyId::Hop], 2);
        let cfg = PipelineConfig::tiny();
        let mut t = Trainer::new(&cfg, &set, 2).unwrap();
        t.run_iteration().unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        t.save(a.path()).unwrap();
        Trainer::load(a.path(), &cfg, &set, 2).unwrap().save(b.path()).unwrap();
        for f in [checkpoint::MANIFEST_FILE, checkpoint::BLOB_FILE, DATA_FILE] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let set = suite(&[MorphologyId::Hop, MorphologyId::Walk], 1);
        let mut cfg = PipelineConfig::tiny();
        cfg.train.outer_iters = 10;
        let mut whole = Trainer::new(&cfg, &set, 3).unwrap();
        let mut expected = Vec::new();
        whole.run(&mut |m| expected.push(scrub(m.clone()))).unwrap();

        let mut first = Trainer::new(&cfg, &set, 3).unwrap();
        let mut got: Vec<Metrics> = (0..4).map(|_| scrub(first.run_iteration().unwrap())).collect();
        let dir = tempfile::tempdir().unwrap();
        first.save(dir.path()).unwrap();
        drop(first);
        let mut resumed = Trainer::load(dir.path(), &cfg, &set, 3).unwrap();
        assert_eq!(resumed.iteration(), 4);
        resumed.run(&mut |m| got.push(scrub(m.clone()))).unwrap();
        assert_eq!(got, expected);
        assert!(snapshot(&whole).iter().zip(snapshot(&resumed).iter()).all(|(a, b)| a.values_bitwise_eq(b)));
    }

    #[test]
    fn load_rejects_a_different_config() {
        let set = suite(&[MorphologyId::Hop], 1);
        let cfg = PipelineConfig::tiny();
        let t = Trainer::new(&cfg, &set, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.save(dir.path()).unwrap();
        let mut other = cfg.clone();
        other.train.batch += 1;
        assert!(matches!(Trainer::load(dir.path(), &other, &set, 0), Err(Error::Checkpoint { .. })));
        assert!(matches!(Trainer::load(dir.path(), &cfg, &set, 1), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn divergence_guard_aborts() {
        assert!(guard("x", 2e6, 3, 1e6).is_err());
        assert!(guard("x", f64::NAN, 3, 1e6).is_err());
        assert_eq!(guard("x", -5.0, 3, 1e6).unwrap(), -5.0);
        let set = suite(&[MorphologyId::Hop], 1);
        let mut cfg = PipelineConfig::tiny();
        cfg.train.divergence_limit = 1e-12;
        let mut t = Trainer::new(&cfg, &set, 0).unwrap();
        assert!(matches!(t.run_iteration(), Err(Error::Divergence { iter: 0, .. })));
    }

    fn trained(cfg: &PipelineConfig, morphs: &[MorphologyId]) -> (TrainedModel, ScenarioSet) {
        let set = suite(morphs, 1);
        let mut t = Trainer::new(cfg, &set, 4).unwrap();
        t.run(&mut |_| {}).unwrap();
        (t.finish(), set)
    }

    #[test]
    fn single_step_adaptation_imagines_one_transition() {
        let mut cfg = PipelineConfig::tiny();
        let (mut tm, set) = trained(&cfg, &[MorphologyId::Hop]);
        cfg.train.horizon = 1;
        cfg.train.policy_updates = 1;
        cfg.train.env_steps = 1;
        cfg.train.adapt_steps = 1;
        cfg.train.warmup_steps = 0;
        tm.cfg = cfg;
        let mut loops = 0;
        let ad = adapt(&tm, &set.scenarios[0], 0, &mut |m| {
            loops += 1;
            assert_eq!(m.model_transitions, Some(1));
        })
        .unwrap();
        assert_eq!(loops, 1);
        assert_eq!((ad.real_steps, ad.model_transitions), (1, 1));
        assert_eq!(ad.sampled_real + ad.sampled_model, tm.cfg.agent.batch);
    }

    #[test]
    fn real_to_model_sampling_ratio_follows_horizon() {
        let mut cfg = PipelineConfig::tiny();
        let (mut tm, set) = trained(&cfg, &[MorphologyId::Hop]);
        cfg.train.horizon = 3;
        cfg.train.adapt_steps = 400;
        cfg.train.env_steps = 100;
        cfg.train.warmup_steps = 0;
        cfg.train.policy_updates = 2;
        tm.cfg = cfg;
        let ad = adapt(&tm, &set.scenarios[0], 1, &mut |_| {}).unwrap();
        assert_eq!(ad.model_transitions, 400 * 3);
        let frac = ad.sampled_real as f64 / (ad.sampled_real + ad.sampled_model) as f64;
        // 3200 Bernoulli(1/4) draws; 5 standard errors.
        assert!((frac - 0.25).abs() < 5.0 * (0.25f64 * 0.75 / 3200.0).sqrt(), "{frac}");
    }

    #[test]
    fn adaptation_replays_bit_identically_and_is_finite() {
        let cfg = PipelineConfig::tiny();
        let (tm, set) = trained(&cfg, &[MorphologyId::Walk]);
        let go = || {
            let mut ms = Vec::new();
            let ad = adapt(&tm, &set.scenarios[0], 9, &mut |m| ms.push(scrub(m.clone()))).unwrap();
            (ms, ad)
        };
        let (ma, a) = go();
        let (mb, b) = go();
        assert_eq!(ma, mb);
        assert_eq!(a.normalized_return.to_bits(), b.normalized_return.to_bits());
        assert!(a.theta.values_bitwise_eq(&b.theta));
        assert!(a.agent.actor_store().values_bitwise_eq(b.agent.actor_store()));
        assert!((-10.0..=110.0).contains(&a.normalized_return));
        assert!(ma.iter().all(|m| m.loss_total.map_or(true, f64::is_finite)));
    }

    #[test]
    fn adaptation_rejects_unknown_morphology() {
        let cfg = PipelineConfig::tiny();
        let (tm, _) = trained(&cfg, &[MorphologyId::Hop]);
        let spec = ScenarioSpec::default_for(MorphologyId::Dash, 1.0);
        assert!(adapt(&tm, &spec, 0, &mut |_| {}).is_err());
    }

    #[test]
    fn variants_edit_only_their_switch() {
        let base = ModelConfig::small();
        assert_eq!(Variant::Full.apply(&base), base);
        let wo_d = Variant::WoD.apply(&base);
        assert_eq!(wo_d.s_dim(), base.s_dim() - base.d_dim);
        assert!(!Variant::WoC.apply(&base).use_context);
        assert_eq!(Variant::WoLs.apply(&base).lambda_s, 0.0);
        assert_eq!(Variant::WoLv.apply(&base).lambda_v, 0.0);
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.as_str()));
        }
        assert!("wo_x".parse::<Variant>().is_err());
    }

    #[test]
    fn without_d_latents_shrink_everywhere() {
        let mut cfg = PipelineConfig::tiny();
        cfg.model = Variant::WoD.apply(&cfg.model);
        let set = suite(&[MorphologyId::Hop], 1);
        let mut t = Trainer::new(&cfg, &set, 0).unwrap();
        t.run_iteration().unwrap();
        let dim = cfg.model.u_dim + cfg.model.h_dim;
        assert!(t.buffer().episodes().all(|e| e.latents.iter().all(|s| s.len() == dim)));
        assert_eq!(t.value_head.input(), dim);
    }

    #[test]
    fn episode_windows_match_a_running_fifo() {
        let spec = ScenarioSpec::default_for(MorphologyId::Hop, 1.0);
        let seed: Vec<(Vec<f64>, Vec<f64>)> = (0..4).map(|k| (vec![k as f64; 4], vec![-(k as f64)])).collect();
        let mut e = Episode::new(&spec, seed.clone(), vec![0.5; 4]);
        let m = 3;
        let mut fifo = ContextWindow::new(m);
        for (o, a) in &seed {
            fifo.push(o.clone(), a.clone());
        }
        for t in 0..8 {
            assert_eq!(e.window_at(t, m), fifo, "t={t}");
            let o = e.obs[t].clone();
            let a = vec![t as f64 * 0.1];
            fifo.push(o, a.clone());
            e.push(a, 0.0, vec![t as f64 + 1.0; 4], false);
        }
    }

    #[test]
    fn expert_context_fills_the_window() {
        let spec = ScenarioSpec::default_for(MorphologyId::Walk, 1.0);
        let c = expert_context(&spec, 5, 0).unwrap();
        assert_eq!(c.len(), 5);
        assert!(c.iter().all(|(o, a)| o.len() == spec.obs_dim() && a.len() == spec.act_dim()));
        assert_eq!(c, expert_context(&spec, 5, 0).unwrap());
    }

    #[test]
    fn sequences_stay_within_one_morphology() {
        let set = suite(&[MorphologyId::Hop, MorphologyId::Dash], 1);
        let cfg = PipelineConfig::tiny();
        let mut t = Trainer::new(&cfg, &set, 0).unwrap();
        let mut rng = RngStream::new(0, 0);
        for s in &set.scenarios {
            t.collect(s, &mut rng).unwrap();
        }
        for s in &set.scenarios {
            let b = t.buffer().sample_sequences(s.morphology, 6, 3, 4, &mut rng).unwrap();
            assert_eq!(b.morphology, s.morphology);
            assert_eq!(b.obs[0].cols(), s.obs_dim());
        }
        assert!(t.buffer().sample_sequences(MorphologyId::Walk, 2, 3, 4, &mut rng).is_err());
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = PipelineConfig::small();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), cfg);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"horizonn": 3}"#).is_err());
        let mut bad = TrainConfig::default();
        bad.horizon = 0;
        assert!(bad.validate().is_err());
        bad = TrainConfig { gamma: 1.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::default().horizon, 5);
        assert_eq!(TrainConfig::default().policy_updates, 10);
        assert_eq!(TrainConfig::default().batch, 32);
    }

    fn episode(id: usize, n: usize) -> Episode {
        let spec = ScenarioSpec::default_for(MorphologyId::Hop, 1.0).with_id(id);
        let mut e = Episode::new(&spec, Vec::new(), vec![0.0; 4]);
        for t in 0..n {
            e.push(vec![0.0], t as f64, vec![id as f64; 4], false);
        }
        e
    }

    proptest! {
        #[test]
        fn buffer_respects_capacity_and_index(cap in 5usize..60, lens in prop::collection::vec((0usize..4, 1usize..12), 1..20), seed in any::<u64>()) {
            let mut b = ReplayBuffer::new(cap);
            for (id, n) in lens {
                if n > cap {
                    prop_assert!(b.begin(episode(id, n)).is_err());
                    continue;
                }
                b.begin(episode(id, n)).unwrap();
                prop_assert!(b.len() <= cap);
                prop_assert_eq!(b.len(), b.episodes().map(Episode::len).sum::<usize>());
                for (id, idx) in b.scenario_index() {
                    prop_assert!(idx.iter().all(|&i| b.episode(i).scenario_id == id));
                }
            }
            let mut rng = RngStream::new(seed, 0);
            for (id, _) in b.scenario_index() {
                let (i, t) = b.sample_index_in(id, &mut rng).unwrap();
                prop_assert_eq!(b.episode(i).scenario_id, id);
                prop_assert!(t < b.episode(i).len());
                let batch = b.sample_scenario_transitions(id, 3, &mut rng).unwrap();
                prop_assert!(batch.next_obs.data().iter().all(|&x| x == id as f64));
            }
        }
    }

    #[test]
    fn uniform_sampling_over_transitions() {
        let mut b = ReplayBuffer::new(100);
        b.begin(episode(0, 1)).unwrap();
        b.begin(episode(1, 3)).unwrap();
        let mut rng = RngStream::new(0, 0);
        let n = 40_000;
        let hits = (0..n).filter(|_| b.sample_index(&mut rng).unwrap().0 == 0).count() as f64 / n as f64;
        assert!((hits - 0.25).abs() < 5.0 * (0.25f64 * 0.75 / n as f64).sqrt(), "{hits}");
    }

    #[test]
    fn linear_probe_recovers_affine_targets() {
        let mut rng = RngStream::new(0, 0);
        let x: Vec<Vec<f64>> = (0..200).map(|_| rng.normals(3)).collect();
        let exact: Vec<Vec<f64>> = x.iter().map(|r| vec![2.0 * r[0] - r[2] + 0.5]).collect();
        assert!((linear_probe_r2(&x, &exact).unwrap() - 1.0).abs() < 1e-12);
        let noise: Vec<Vec<f64>> = (0..200).map(|_| rng.normals(1)).collect();
        let r2 = linear_probe_r2(&x, &noise).unwrap();
        // Chance R² with 3 regressors over 200 rows is about 3/199.
        assert!((0.0..0.1).contains(&r2), "{r2}");
        let half: Vec<Vec<f64>> = x.iter().zip(&noise).map(|(a, e)| vec![a[1] + e[0]]).collect();
        assert!((linear_probe_r2(&x, &half).unwrap() - 0.5).abs() < 0.15);
        assert!(linear_probe_r2(&x[..3], &noise).is_err());
    }

    #[test]
    fn noise_probe_runs_on_addd_scenarios() {
        let cfg = PipelineConfig::tiny();
        let set = ScenarioSet::sample(&[MorphologyId::Hop], 1, 10.0, 50.0, ObsTransform::AddD, 0, &mut RngStream::new(0, 0)).unwrap();
        let tm = train_world_model(&cfg, &set, 0, &mut |_| {}).unwrap();
        let r2 = noise_probe_r2(&tm, &set.scenarios[0], 1, 50, 0).unwrap();
        assert!((0.0..=1.0).contains(&r2));
        let plain = ScenarioSpec::default_for(MorphologyId::Hop, 1.0);
        assert!(noise_probe_r2(&tm, &plain, 1, 50, 0).is_err());
    }
}
