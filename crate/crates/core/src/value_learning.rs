//! Value heads over latent states, their Bellman and distillation losses, and
//! a soft actor-critic agent acting on raw observations.

use serde::{Deserialize, Serialize};

use crate::distributions::{GaussianNode, LOG_STD_MAX, LOG_STD_MIN};
use crate::error::{Error, Result};
use crate::numerics::{evaluate, Activation, Adam, Binding, Graph, Mlp, NodeId, ParamStore, RngStream, Tensor};

/// Layers of every value head.
pub const VALUE_LAYERS: usize = 3;

/// Scalar value of a latent state; parameters live in the owner's store.
#[derive(Clone, Debug)]
pub struct ValueHead {
    mlp: Mlp,
}

impl ValueHead {
    pub fn new(store: &mut ParamStore, input: usize, hidden: usize, activation: Activation, rng: &mut RngStream) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, "v", input, hidden, 1, VALUE_LAYERS, activation, rng)?,
        })
    }

    /// A single affine map, for exactly solvable fixtures.
    pub fn linear(store: &mut ParamStore, input: usize, rng: &mut RngStream) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, "v", input, 1, 1, 1, Activation::Relu, rng)?,
        })
    }

    pub fn input(&self) -> usize {
        self.mlp.input()
    }

    /// `[n, 1]` values for `[n, input]` states.
    pub fn forward<'a>(&self, g: &mut Graph<'a>, p: Binding<'a>, s: NodeId) -> NodeId {
        self.mlp.forward(g, p, s)
    }

    pub fn eval(&self, store: &ParamStore, s: &[f64]) -> f64 {
        self.mlp.eval_row(store, s)[0]
    }

    /// Values of every row.
    pub fn eval_rows(&self, store: &ParamStore, s: &Tensor) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.constant(s.clone());
        let v = self.forward(&mut g, Binding::frozen(store), x);
        g.value(v).data().to_vec()
    }

    /// Zeroes the output layer so every value starts at exactly zero.
    pub fn zero_output(&self, store: &mut ParamStore) {
        self.mlp.zero_last(store);
    }
}

/// Latent transitions for the per-scenario Bellman loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    pub s: Tensor,
    pub reward: Tensor,
    pub next_s: Tensor,
    /// One where the successor value is bootstrapped, zero at terminals.
    pub cont: Tensor,
}

/// `r + γ·cont·v(s')` under the current parameters.
pub fn td_targets(head: &ValueHead, store: &ParamStore, batch: &LatentBatch, gamma: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("discount {gamma} outside [0, 1)")));
    }
    if batch.s.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let v2 = head.eval_rows(store, &batch.next_s);
    let y: Vec<f64> = v2
        .iter()
        .zip(batch.reward.data())
        .zip(batch.cont.data())
        .map(|((v, r), c)| r + gamma * c * v)
        .collect();
    Ok(Tensor::column(&y))
}

/// Mean squared Bellman residual with a stop-gradient target.
pub fn loss_value_i<'a>(g: &mut Graph<'a>, head: &ValueHead, store: &'a ParamStore, batch: &LatentBatch, gamma: f64) -> Result<NodeId> {
    let y = td_targets(head, store, batch, gamma)?;
    loss_value_meta(g, head, store, &batch.s, &y)
}

/// Mean squared distance between the meta-value and stored per-scenario values.
pub fn loss_value_meta<'a>(g: &mut Graph<'a>, head: &ValueHead, store: &'a ParamStore, s: &Tensor, targets: &Tensor) -> Result<NodeId> {
    if s.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if targets.rows() != s.rows() || targets.cols() != 1 {
        return Err(Error::Shape(format!("targets {:?} for {} states", targets.shape(), s.rows())));
    }
    let x = g.constant(s.clone());
    let v = head.forward(g, Binding::trainable(store), x);
    let t = g.constant(targets.clone());
    let d = g.sub(v, t);
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Per-scenario `(s̃, v_i(s̃))` datapoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValueDataset {
    entries: Vec<(usize, Vec<f64>, f64)>,
}

impl ValueDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, scenario: usize, s: Vec<f64>, value: f64) {
        self.entries.push((scenario, s, value));
    }

    /// Drops the oldest entries beyond `capacity`.
    pub fn truncate_front(&mut self, capacity: usize) {
        let excess = self.entries.len().saturating_sub(capacity);
        self.entries.drain(..excess);
    }

    pub fn scenarios(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.entries.iter().map(|e| e.0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Uniform minibatch of `(states, targets)`.
    pub fn sample(&self, batch: usize, rng: &mut RngStream) -> Result<(Tensor, Tensor)> {
        if self.entries.is_empty() || batch == 0 {
            return Err(Error::EmptyBatch);
        }
        let dim = self.entries[0].1.len();
        let mut s = Vec::with_capacity(batch * dim);
        let mut v = Vec::with_capacity(batch);
        for _ in 0..batch {
            let e = &self.entries[rng.below(self.entries.len())];
            s.extend_from_slice(&e.1);
            v.push(e.2);
        }
        Ok((Tensor::new(vec![batch, dim], s)?, Tensor::column(&v)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub entropy: f64,
    pub batch: usize,
    /// Number of Q critics; targets use their minimum.
    pub critics: usize,
    pub activation: Activation,
    /// TD targets are clipped to `[−value_bound, value_bound]`.
    pub value_bound: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            layers: 3,
            gamma: 0.99,
            actor_lr: 1e-4,
            critic_lr: 2e-4,
            entropy: 0.05,
            batch: 32,
            critics: 2,
            activation: Activation::Relu,
            value_bound: 100.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.layers == 0 || self.batch == 0 || self.critics == 0 {
            return Err(Error::InvalidArgument("agent widths, depth, batch and critic count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("discount {} outside [0, 1)", self.gamma)));
        }
        if !(self.entropy >= 0.0 && self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(Error::InvalidArgument("entropy must be non-negative and learning rates positive".into()));
        }
        if !(self.value_bound > 0.0) {
            return Err(Error::InvalidArgument("value_bound must be positive".into()));
        }
        Ok(())
    }
}

/// Observation-level transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBatch {
    pub obs: Tensor,
    pub action: Tensor,
    pub reward: Tensor,
    pub next_obs: Tensor,
    /// Zero only where the successor is terminal; time limits bootstrap.
    pub cont: Tensor,
}

impl TransitionBatch {
    pub fn from_rows(rows: &[(&[f64], &[f64], f64, &[f64], bool)]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyBatch)?;
        let (od, ad) = (first.0.len(), first.1.len());
        let obs: Vec<&[f64]> = rows.iter().map(|r| r.0).collect();
        let act: Vec<&[f64]> = rows.iter().map(|r| r.1).collect();
        let nxt: Vec<&[f64]> = rows.iter().map(|r| r.3).collect();
        Ok(Self {
            obs: Tensor::from_rows(&obs, od)?,
            action: Tensor::from_rows(&act, ad)?,
            reward: Tensor::column(&rows.iter().map(|r| r.2).collect::<Vec<_>>()),
            next_obs: Tensor::from_rows(&nxt, od)?,
            cont: Tensor::column(&rows.iter().map(|r| if r.4 { 0.0 } else { 1.0 }).collect::<Vec<_>>()),
        })
    }

    pub fn len(&self) -> usize {
        self.obs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub entropy: f64,
}

/// Squashed-Gaussian policy with clipped multi-Q critics. The policy output
/// layer starts at zero, so the initial policy is `tanh(N(0, 1))`.
#[derive(Clone, Debug)]
pub struct Agent {
    cfg: AgentConfig,
    obs_dim: usize,
    act_dim: usize,
    actor: Mlp,
    critics: Vec<Mlp>,
    actor_store: ParamStore,
    critic_store: ParamStore,
    actor_opt: Adam,
    critic_opt: Adam,
}

const TANH_EPS: f64 = 1e-6;

impl Agent {
    /// Parameters go to namespaces `tag` (actor) and `tag.q` (critics).
    pub fn new(tag: &str, cfg: &AgentConfig, obs_dim: usize, act_dim: usize, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let mut actor_store = ParamStore::new(tag);
        let mut critic_store = ParamStore::new(&format!("{tag}.q"));
        let actor = Mlp::new(&mut actor_store, "pi", obs_dim, cfg.hidden_dim, 2 * act_dim, cfg.layers, cfg.activation, rng)?;
        actor.zero_last(&mut actor_store);
        let critics = (0..cfg.critics)
            .map(|k| Mlp::new(&mut critic_store, &format!("q{k}"), obs_dim + act_dim, cfg.hidden_dim, 1, cfg.layers, cfg.activation, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            obs_dim,
            act_dim,
            actor,
            critics,
            actor_store,
            critic_store,
            actor_opt: Adam::new(cfg.actor_lr),
            critic_opt: Adam::new(cfg.critic_lr),
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn actor_store(&self) -> &ParamStore {
        &self.actor_store
    }

    pub fn critic_store(&self) -> &ParamStore {
        &self.critic_store
    }

    pub fn stores_mut(&mut self) -> (&mut ParamStore, &mut ParamStore) {
        (&mut self.actor_store, &mut self.critic_store)
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.obs_dim {
            return Err(Error::Dim {
                expected: self.obs_dim,
                got: obs.len(),
            });
        }
        Ok(())
    }

    fn head(&self, obs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let raw = self.actor.eval_row(&self.actor_store, obs);
        let (mean, ls) = raw.split_at(self.act_dim);
        (mean.to_vec(), ls.iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect())
    }

    /// Sampled action in `[−1, 1]^act_dim`.
    pub fn act(&self, obs: &[f64], rng: &mut RngStream) -> Result<Vec<f64>> {
        self.check_obs(obs)?;
        let (mean, ls) = self.head(obs);
        Ok(mean.iter().zip(&ls).map(|(m, l)| (m + l.exp() * rng.normal()).tanh()).collect())
    }

    pub fn act_mean(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.check_obs(obs)?;
        Ok(self.head(obs).0.iter().map(|m| m.tanh()).collect())
    }

    /// Reparameterized action and its log-density, `[n, act]` and `[n, 1]`.
    fn sample_node<'a>(&self, g: &mut Graph<'a>, p: Binding<'a>, obs: NodeId, rng: &mut RngStream) -> Result<(NodeId, NodeId)> {
        let n = g.value(obs).rows();
        let raw = self.actor.forward(g, p, obs);
        let dist = GaussianNode::from_head(g, raw, self.act_dim);
        let eps = Tensor::new(vec![n, self.act_dim], rng.normals(n * self.act_dim))?;
        let e = g.constant(eps.clone());
        let pre = dist.rsample(g, eps);
        let a = g.tanh(pre);
        // log N(pre) = −½ε² − log σ − ½ log 2π per dimension.
        let e2 = g.square(e);
        let e2 = g.scale(e2, -0.5);
        let lp = g.sub(e2, dist.log_std);
        let lp = g.add_scalar(lp, -0.5 * (2.0 * std::f64::consts::PI).ln());
        let a2 = g.square(a);
        let na2 = g.neg(a2);
        let j = g.add_scalar(na2, 1.0 + TANH_EPS);
        let lj = g.log(j);
        let lp = g.sub(lp, lj);
        let logp = g.sum_cols(lp);
        Ok((a, logp))
    }

    fn q_min<'a>(&self, g: &mut Graph<'a>, p: Binding<'a>, obs: NodeId, act: NodeId) -> NodeId {
        let x = g.concat_cols(&[obs, act]);
        let qs: Vec<NodeId> = self.critics.iter().map(|c| c.forward(g, p, x)).collect();
        let mut q = qs[0];
        for &other in &qs[1..] {
            // min(a, b) = b − relu(b − a)
            let d = g.sub(other, q);
            let r = g.relu(d);
            q = g.sub(other, r);
        }
        q
    }

    /// Critic loss for a batch; only the critic store is trainable.
    pub fn critic_loss<'a>(&'a self, g: &mut Graph<'a>, batch: &TransitionBatch, rng: &mut RngStream) -> Result<NodeId> {
        let o2 = g.constant(batch.next_obs.clone());
        let (a2, lp2) = self.sample_node(g, Binding::frozen(&self.actor_store), o2, rng)?;
        let q2 = self.q_min(g, Binding::frozen(&self.critic_store), o2, a2);
        let ent = g.scale(lp2, self.cfg.entropy);
        let soft = g.sub(q2, ent);
        let c = g.constant(batch.cont.clone());
        let boot = g.mul(soft, c);
        let boot = g.scale(boot, self.cfg.gamma);
        let r = g.constant(batch.reward.clone());
        let y = g.add(r, boot);
        let y = g.detach(y);
        let y = g.clamp(y, -self.cfg.value_bound, self.cfg.value_bound);
        let o = g.constant(batch.obs.clone());
        let a = g.constant(batch.action.clone());
        let x = g.concat_cols(&[o, a]);
        let mut terms = Vec::with_capacity(self.critics.len());
        for c in &self.critics {
            let q = c.forward(g, Binding::trainable(&self.critic_store), x);
            let d = g.sub(q, y);
            let sq = g.square(d);
            terms.push(g.mean(sq));
        }
        let all = g.concat_cols(&terms);
        Ok(g.sum(all))
    }

    /// Actor loss `E[α log π − min Q]`; only the actor store is trainable.
    /// Returns the loss and the mean log-density.
    pub fn actor_loss<'a>(&'a self, g: &mut Graph<'a>, batch: &TransitionBatch, rng: &mut RngStream) -> Result<(NodeId, NodeId)> {
        let o = g.constant(batch.obs.clone());
        let (a, lp) = self.sample_node(g, Binding::trainable(&self.actor_store), o, rng)?;
        let q = self.q_min(g, Binding::frozen(&self.critic_store), o, a);
        let ent = g.scale(lp, self.cfg.entropy);
        let d = g.sub(ent, q);
        let loss = g.mean(d);
        let mlp = g.mean(lp);
        Ok((loss, mlp))
    }

    /// One critic step followed by one actor step. A non-finite loss aborts
    /// before any parameter changes.
    pub fn update(&mut self, batch: &TransitionBatch, rng: &mut RngStream) -> Result<UpdateStats> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let (critic_loss, cg) = {
            let mut g = Graph::new();
            let l = self.critic_loss(&mut g, batch, rng)?;
            let (v, gr) = evaluate(&g, l, true)?;
            (v, gr.expect("gradients requested"))
        };
        let (actor_loss, entropy, ag) = {
            let mut g = Graph::new();
            let (l, lp) = self.actor_loss(&mut g, batch, rng)?;
            let (v, gr) = evaluate(&g, l, true)?;
            (v, -g.scalar(lp), gr.expect("gradients requested"))
        };
        self.critic_store.zero_grad();
        self.critic_store.accumulate(&cg);
        self.actor_store.zero_grad();
        self.actor_store.accumulate(&ag);
        self.critic_opt.step(&mut self.critic_store)?;
        self.actor_opt.step(&mut self.actor_store)?;
        Ok(UpdateStats {
            critic_loss,
            actor_loss,
            entropy,
        })
    }
}
