//! Context-conditioned latent world model.
//!
//! Indexing: the step at time `t` consumes the context `C_t` (the `m` pairs
//! `(o_k, a_k)` with `k < t`), the action `a_{t-1}` that led into `o_t`, and
//! the observation `o_t` itself. Its reward head predicts the reward of that
//! same transition.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::distributions::{kl_rows, nll_unit_rows, DiagGaussian, GaussianNode};
use crate::error::{Error, Result};
use crate::meta_env::MorphologyId;
use crate::numerics::graph::sigmoid;
use crate::numerics::{evaluate, Activation, Adam, Binding, Graph, Linear, Mlp, NodeId, ParamId, ParamStore, RngStream, Tensor};
use crate::value_learning::ValueHead;

pub const THETA: &str = "theta";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextEncoderKind {
    #[default]
    Transformer,
    MlpFlatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Context length.
    pub m: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub u_dim: usize,
    /// Zero removes the deterministic path.
    pub d_dim: usize,
    pub h_dim: usize,
    pub transformer_layers: usize,
    pub attention_heads: usize,
    pub tokenizer_layers: usize,
    pub decoder_layers: usize,
    pub reward_layers: usize,
    /// Depth of the prior and posterior heads.
    pub latent_layers: usize,
    pub lambda_var: f64,
    pub lambda_s: f64,
    pub lambda_v: f64,
    pub batch: usize,
    /// Training sequence length.
    pub seq_len: usize,
    pub context_encoder: ContextEncoderKind,
    /// When false the context embedding is replaced by zeros.
    pub use_context: bool,
    /// When true the posteriors are the priors, ignoring the observation.
    pub tied_posterior: bool,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            m: 20,
            embed_dim: 128,
            hidden_dim: 128,
            u_dim: 128,
            d_dim: 128,
            h_dim: 128,
            transformer_layers: 1,
            attention_heads: 3,
            tokenizer_layers: 3,
            decoder_layers: 3,
            reward_layers: 3,
            latent_layers: 2,
            lambda_var: 1.0,
            lambda_s: 0.1,
            lambda_v: 1.0,
            batch: 32,
            seq_len: 8,
            context_encoder: ContextEncoderKind::Transformer,
            use_context: true,
            tied_posterior: false,
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    /// Desk-scale widths used by the experiment suite.
    pub fn small() -> Self {
        Self {
            m: 10,
            embed_dim: 24,
            hidden_dim: 48,
            u_dim: 8,
            d_dim: 16,
            h_dim: 8,
            batch: 16,
            seq_len: 6,
            ..Self::default()
        }
    }

    /// The 8/8/8 latent configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            m: 3,
            embed_dim: 6,
            hidden_dim: 8,
            u_dim: 8,
            d_dim: 8,
            h_dim: 8,
            batch: 2,
            seq_len: 3,
            ..Self::default()
        }
    }

    pub fn s_dim(&self) -> usize {
        self.u_dim + self.d_dim + self.h_dim
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.attention_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("model config: {msg}")));
        for (name, v) in [
            ("m", self.m),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("u_dim", self.u_dim),
            ("h_dim", self.h_dim),
            ("transformer_layers", self.transformer_layers),
            ("attention_heads", self.attention_heads),
            ("tokenizer_layers", self.tokenizer_layers),
            ("decoder_layers", self.decoder_layers),
            ("reward_layers", self.reward_layers),
            ("latent_layers", self.latent_layers),
            ("batch", self.batch),
            ("seq_len", self.seq_len),
        ] {
            if v == 0 {
                return bad(&format!("{name} must be positive"));
            }
        }
        if self.attention_heads > self.embed_dim {
            return bad("attention_heads exceeds embed_dim");
        }
        for (name, v) in [
            ("lambda_var", self.lambda_var),
            ("lambda_s", self.lambda_s),
            ("lambda_v", self.lambda_v),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Observation and action widths of one morphology as seen by the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub morphology: MorphologyId,
    pub obs_dim: usize,
    pub act_dim: usize,
}

/// The `(u, d, h)` latent triple.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatentState {
    pub u: Vec<f64>,
    pub d: Vec<f64>,
    pub h: Vec<f64>,
}

impl LatentState {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            u: vec![0.0; cfg.u_dim],
            d: vec![0.0; cfg.d_dim],
            h: vec![0.0; cfg.h_dim],
        }
    }

    /// `[u; d; h]`
    pub fn s_tilde(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.u.len() + self.d.len() + self.h.len());
        s.extend_from_slice(&self.u);
        s.extend_from_slice(&self.d);
        s.extend_from_slice(&self.h);
        s
    }

    pub fn from_s_tilde(cfg: &ModelConfig, s: &[f64]) -> Result<Self> {
        if s.len() != cfg.s_dim() {
            return Err(Error::Dim {
                expected: cfg.s_dim(),
                got: s.len(),
            });
        }
        let (u, rest) = s.split_at(cfg.u_dim);
        let (d, h) = rest.split_at(cfg.d_dim);
        Ok(Self {
            u: u.to_vec(),
            d: d.to_vec(),
            h: h.to_vec(),
        })
    }
}

/// FIFO of the most recent `(observation, action)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextWindow {
    capacity: usize,
    entries: VecDeque<(Vec<f64>, Vec<f64>)>,
}

impl ContextWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, obs: Vec<f64>, action: Vec<f64>) {
        self.entries.push_back((obs, action));
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn entries(&self) -> impl Iterator<Item = &(Vec<f64>, Vec<f64>)> {
        self.entries.iter()
    }

    /// `capacity` slots, oldest first; missing slots are zero and invalid.
    /// The newest pair always sits in the last slot.
    pub fn slots(&self, obs_dim: usize, act_dim: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<bool>) {
        let pad = self.capacity - self.entries.len();
        let mut obs = vec![vec![0.0; obs_dim]; pad];
        let mut act = vec![vec![0.0; act_dim]; pad];
        let mut mask = vec![false; pad];
        for (o, a) in &self.entries {
            obs.push(o.clone());
            act.push(a.clone());
            mask.push(true);
        }
        (obs, act, mask)
    }
}

/// One training sequence of length `L` with its `m + L − 1` history pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    /// Pairs for times `t0 − m .. t0 + L − 1`.
    pub ctx_obs: Vec<Vec<f64>>,
    pub ctx_act: Vec<Vec<f64>>,
    pub ctx_mask: Vec<bool>,
    /// `o_{t0+j}`
    pub obs: Vec<Vec<f64>>,
    /// `a_{t0+j−1}`
    pub prev_act: Vec<Vec<f64>>,
    /// Reward of the transition into `o_{t0+j}`.
    pub reward: Vec<f64>,
}

impl Sequence {
    /// Cuts a sequence starting at `t0 ≥ 1` out of an episode trace, where
    /// `actions[k]` is taken at `obs[k]` and earns `rewards[k]`. Times before
    /// the episode start are filled from the end of `seed` when given.
    pub fn from_trace(
        obs: &[Vec<f64>],
        actions: &[Vec<f64>],
        rewards: &[f64],
        seed: Option<&[(Vec<f64>, Vec<f64>)]>,
        t0: usize,
        m: usize,
        len: usize,
    ) -> Result<Self> {
        if t0 == 0 || t0 + len > obs.len() || t0 + len - 1 > actions.len() {
            return Err(Error::InvalidArgument(format!(
                "sequence t0={t0} len={len} does not fit a trace of {} observations",
                obs.len()
            )));
        }
        let (od, ad) = (obs[0].len(), actions[0].len());
        let mut s = Sequence {
            ctx_obs: Vec::new(),
            ctx_act: Vec::new(),
            ctx_mask: Vec::new(),
            obs: Vec::new(),
            prev_act: Vec::new(),
            reward: Vec::new(),
        };
        for k in 0..m + len - 1 {
            let tau = t0 as isize - m as isize + k as isize;
            let pair = if tau >= 0 {
                Some((obs[tau as usize].clone(), actions[tau as usize].clone()))
            } else {
                seed.and_then(|sd| {
                    let i = sd.len() as isize + tau;
                    (i >= 0).then(|| sd[i as usize].clone())
                })
            };
            match pair {
                Some((o, a)) => {
                    s.ctx_obs.push(o);
                    s.ctx_act.push(a);
                    s.ctx_mask.push(true);
                }
                None => {
                    s.ctx_obs.push(vec![0.0; od]);
                    s.ctx_act.push(vec![0.0; ad]);
                    s.ctx_mask.push(false);
                }
            }
        }
        for j in 0..len {
            s.obs.push(obs[t0 + j].clone());
            s.prev_act.push(actions[t0 + j - 1].clone());
            s.reward.push(rewards[t0 + j - 1]);
        }
        Ok(s)
    }
}

/// A batch of equally long sequences from one morphology, laid out for the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub morphology: MorphologyId,
    pub batch: usize,
    pub len: usize,
    pub m: usize,
    /// `[batch·(m+len−1), obs_dim]`, sequence-major.
    pub ctx_obs: Tensor,
    pub ctx_act: Tensor,
    pub ctx_mask: Vec<bool>,
    /// `len` tensors of `[batch, ·]`.
    pub obs: Vec<Tensor>,
    pub prev_act: Vec<Tensor>,
    pub reward: Vec<Tensor>,
}

impl SeqBatch {
    pub fn from_sequences(morphology: MorphologyId, m: usize, seqs: &[Sequence]) -> Result<Self> {
        let first = seqs.first().ok_or(Error::EmptyBatch)?;
        let len = first.obs.len();
        let hist = m + len - 1;
        let (od, ad) = (first.obs[0].len(), first.prev_act[0].len());
        let mut co = Vec::new();
        let mut ca = Vec::new();
        let mut cm = Vec::new();
        for s in seqs {
            if s.obs.len() != len || s.ctx_obs.len() != hist {
                return Err(Error::Shape("sequences differ in length or context size".into()));
            }
            co.extend(s.ctx_obs.iter().cloned());
            ca.extend(s.ctx_act.iter().cloned());
            cm.extend_from_slice(&s.ctx_mask);
        }
        let mut obs = Vec::with_capacity(len);
        let mut prev_act = Vec::with_capacity(len);
        let mut reward = Vec::with_capacity(len);
        for j in 0..len {
            let o: Vec<&Vec<f64>> = seqs.iter().map(|s| &s.obs[j]).collect();
            let a: Vec<&Vec<f64>> = seqs.iter().map(|s| &s.prev_act[j]).collect();
            obs.push(Tensor::from_rows(&o, od)?);
            prev_act.push(Tensor::from_rows(&a, ad)?);
            reward.push(Tensor::column(&seqs.iter().map(|s| s.reward[j]).collect::<Vec<_>>()));
        }
        Ok(Self {
            morphology,
            batch: seqs.len(),
            len,
            m,
            ctx_obs: Tensor::from_rows(&co, od)?,
            ctx_act: Tensor::from_rows(&ca, ad)?,
            ctx_mask: cm,
            obs,
            prev_act,
            reward,
        })
    }
}

#[derive(Clone, Debug)]
struct MorphHeads {
    spec: HeadSpec,
    tokenizer: Mlp,
    act_embed: Linear,
    obs_embed: Linear,
    decoder: Mlp,
}

#[derive(Clone, Debug)]
struct AttentionLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ffn: Mlp,
}

#[derive(Clone, Debug)]
enum Encoder {
    Transformer { pos: ParamId, layers: Vec<AttentionLayer> },
    Flatten(Mlp),
}

/// Token rows plus the windows that select from them.
struct Windows {
    /// `groups·m` row indices into the token matrix.
    rows: Vec<usize>,
    mask: Vec<bool>,
    groups: usize,
}

/// Graph nodes of every loss term, already averaged.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub var: NodeId,
    pub s: NodeId,
    pub v: NodeId,
    pub recon: NodeId,
    pub kl_u: NodeId,
    pub kl_h: NodeId,
    pub reward: NodeId,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub var: f64,
    pub s: f64,
    pub v: f64,
    pub recon: f64,
    pub kl_u: f64,
    pub kl_h: f64,
    pub reward: f64,
}

impl LossNodes {
    pub fn values(&self, g: &Graph<'_>) -> LossValues {
        LossValues {
            total: g.scalar(self.total),
            var: g.scalar(self.var),
            s: g.scalar(self.s),
            v: g.scalar(self.v),
            recon: g.scalar(self.recon),
            kl_u: g.scalar(self.kl_u),
            kl_h: g.scalar(self.kl_h),
            reward: g.scalar(self.reward),
        }
    }
}

/// The frozen meta-value used by the value-consistency term.
#[derive(Clone, Copy)]
pub struct MetaValue<'a> {
    pub head: &'a ValueHead,
    pub store: &'a ParamStore,
}

/// One step of imagination.
#[derive(Clone, Debug, PartialEq)]
pub struct ImaginedStep {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub latent: LatentState,
}

/// Model architecture; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct WorldModel {
    cfg: ModelConfig,
    heads: Vec<MorphHeads>,
    encoder: Encoder,
    empty: ParamId,
    prior_u: Mlp,
    post_u: Mlp,
    cell_cand: Option<Linear>,
    cell_gate: Option<Linear>,
    prior_h: Mlp,
    post_h: Mlp,
    reward: Mlp,
}

impl WorldModel {
    pub fn new(cfg: &ModelConfig, specs: &[HeadSpec], rng: &mut RngStream) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        if specs.is_empty() {
            return Err(Error::InvalidArgument("world model needs at least one morphology".into()));
        }
        let mut st = ParamStore::new(THETA);
        let (e, hid, act) = (cfg.embed_dim, cfg.hidden_dim, cfg.activation);
        let s_dim = cfg.s_dim();
        let mut heads = Vec::new();
        for sp in specs {
            if heads.iter().any(|h: &MorphHeads| h.spec.morphology == sp.morphology) {
                return Err(Error::InvalidArgument(format!("morphology {} listed twice", sp.morphology)));
            }
            let n = sp.morphology.as_str();
            heads.push(MorphHeads {
                spec: *sp,
                tokenizer: Mlp::new(&mut st, &format!("tok.{n}"), sp.obs_dim + sp.act_dim, hid, e, cfg.tokenizer_layers, act, rng)?,
                act_embed: Linear::new(&mut st, &format!("act_embed.{n}"), sp.act_dim, e, rng)?,
                obs_embed: Linear::new(&mut st, &format!("obs_embed.{n}"), sp.obs_dim, e, rng)?,
                decoder: Mlp::new(&mut st, &format!("dec.{n}"), s_dim, hid, sp.obs_dim, cfg.decoder_layers, act, rng)?,
            });
        }
        let encoder = match cfg.context_encoder {
            ContextEncoderKind::Transformer => {
                let width = cfg.attention_heads * cfg.head_dim();
                let pos = st.register_uniform("ctx.pos", &[cfg.m, e], e, rng)?;
                let mut layers = Vec::new();
                for l in 0..cfg.transformer_layers {
                    layers.push(AttentionLayer {
                        q: Linear::new(&mut st, &format!("ctx.{l}.q"), e, width, rng)?,
                        k: Linear::new(&mut st, &format!("ctx.{l}.k"), e, width, rng)?,
                        v: Linear::new(&mut st, &format!("ctx.{l}.v"), e, width, rng)?,
                        out: Linear::new(&mut st, &format!("ctx.{l}.o"), width, e, rng)?,
                        ffn: Mlp::new(&mut st, &format!("ctx.{l}.ffn"), e, hid, e, 2, act, rng)?,
                    });
                }
                Encoder::Transformer { pos, layers }
            }
            ContextEncoderKind::MlpFlatten => Encoder::Flatten(Mlp::new(&mut st, "ctx.flat", cfg.m * e, hid, e, 2, act, rng)?),
        };
        let empty = st.register_uniform("ctx.empty", &[1, e], e, rng)?;
        let ll = cfg.latent_layers;
        let prior_u = Mlp::new(&mut st, "prior_u", 2 * e, hid, 2 * cfg.u_dim, ll, act, rng)?;
        let post_u = Mlp::new(&mut st, "post_u", 3 * e, hid, 2 * cfg.u_dim, ll, act, rng)?;
        let (cell_cand, cell_gate) = if cfg.d_dim > 0 {
            let input = cfg.d_dim + cfg.u_dim + e;
            (
                Some(Linear::new(&mut st, "cell.cand", input, cfg.d_dim, rng)?),
                Some(Linear::new(&mut st, "cell.gate", input, cfg.d_dim, rng)?),
            )
        } else {
            (None, None)
        };
        let prior_h = Mlp::new(&mut st, "prior_h", e + cfg.h_dim, hid, 2 * cfg.h_dim, ll, act, rng)?;
        let post_h = Mlp::new(&mut st, "post_h", 2 * e + cfg.h_dim, hid, 2 * cfg.h_dim, ll, act, rng)?;
        let reward = Mlp::new(&mut st, "reward", s_dim, hid, 1, cfg.reward_layers, act, rng)?;
        Ok((
            Self {
                cfg: cfg.clone(),
                heads,
                encoder,
                empty,
                prior_u,
                post_u,
                cell_cand,
                cell_gate,
                prior_h,
                post_h,
                reward,
            },
            st,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn head_specs(&self) -> Vec<HeadSpec> {
        self.heads.iter().map(|h| h.spec).collect()
    }

    pub fn head_spec(&self, m: MorphologyId) -> Result<HeadSpec> {
        Ok(self.head(m)?.spec)
    }

    fn head(&self, m: MorphologyId) -> Result<&MorphHeads> {
        self.heads
            .iter()
            .find(|h| h.spec.morphology == m)
            .ok_or_else(|| Error::UnknownMorphology(m.to_string()))
    }

    /// The gate bias of the recurrent cell, if the model has one.
    pub fn gate_bias(&self) -> Option<ParamId> {
        self.cell_gate.as_ref().map(|l| l.b)
    }

    fn tokens<'a>(&self, g: &mut Graph<'a>, p: Binding<'a>, head: &MorphHeads, obs: NodeId, act: NodeId, mask: &[bool]) -> NodeId {
        let x = g.concat_cols(&[obs, act]);
        let t = head.tokenizer.forward(g, p, x);
        if mask.iter().all(|&b| b) {
            return t;
        }
        let e = self.cfg.embed_dim;
        let mut m = Vec::with_capacity(mask.len() * e);
        for &b in mask {
            m.extend(std::iter::repeat_n(if b { 1.0 } else { 0.0 }, e));
        }
        let mn = g.constant(Tensor::from_parts(mask.len(), e, m));
        g.mul(t, mn)
    }

    /// Context embeddings `[groups, E]` for windows over a token matrix.
    fn encode<'a>(&self, g: &mut Graph<'a>, p: Binding<'a>, tokens: NodeId, w: &Windows, cache: &mut Option<(NodeId, NodeId, NodeId, NodeId)>) -> NodeId {
        let cfg = &self.cfg;
        let m = cfg.m;
        let e = cfg.embed_dim;
        if !cfg.use_context {
            return g.constant(Tensor::zeros(&[w.groups, e]));
        }
        let out = match &self.encoder {
            Encoder::Flatten(mlp) => {
                let x = g.gather_rows(tokens, &w.rows);
                let x = g.reshape(x, &[w.groups, m * e]);
                mlp.forward(g, p, x)
            }
            Encoder::Transformer { pos, layers } if layers.len() == 1 => {
                let layer = &layers[0];
                let pos_n = g.load(p, *pos);
                let (tk, tv, pk, pv) = *cache.get_or_insert_with(|| {
                    let wk = g.load(p, layer.k.w);
                    let wv = g.load(p, layer.v.w);
                    let tk = g.matmul(tokens, wk);
                    let tv = g.matmul(tokens, wv);
                    let pk = layer.k.forward(g, p, pos_n);
                    let pv = layer.v.forward(g, p, pos_n);
                    (tk, tv, pk, pv)
                });
                let tile: Vec<usize> = (0..w.groups).flat_map(|_| 0..m).collect();
                let kr = g.gather_rows(tk, &w.rows);
                let kp = g.gather_rows(pk, &tile);
                let k = g.add(kr, kp);
                let vr = g.gather_rows(tv, &w.rows);
                let vp = g.gather_rows(pv, &tile);
                let v = g.add(vr, vp);
                let last: Vec<usize> = (0..w.groups).map(|b| w.rows[b * m + m - 1]).collect();
                let xl = g.gather_rows(tokens, &last);
                let pl = g.gather_rows(pos_n, &[m - 1]);
                let x = g.add_row(xl, pl);
                let q = layer.q.forward(g, p, x);
                let a = g.attention(q, k, v, &w.mask, cfg.attention_heads, 1, m);
                let o = layer.out.forward(g, p, a);
                let y = g.add(x, o);
                let f = layer.ffn.forward(g, p, y);
                g.add(y, f)
            }
            Encoder::Transformer { pos, layers } => self.encode_general(g, p, tokens, w, *pos, layers),
        };
        let valid: Vec<bool> = (0..w.groups).map(|b| w.mask[b * m..(b + 1) * m].iter().any(|&v| v)).collect();
        if valid.iter().all(|&v| v) {
            return out;
        }
        let empty = g.load(p, self.empty);
        let fill = g.gather_rows(empty, &vec![0; w.groups]);
        let mut keep = Vec::with_capacity(w.groups * e);
        let mut swap = Vec::with_capacity(w.groups * e);
        for &v in &valid {
            let k = if v { 1.0 } else { 0.0 };
            keep.extend(std::iter::repeat_n(k, e));
            swap.extend(std::iter::repeat_n(1.0 - k, e));
        }
        let kn = g.constant(Tensor::from_parts(w.groups, e, keep));
        let sn = g.constant(Tensor::from_parts(w.groups, e, swap));
        let a = g.mul(out, kn);
        let b = g.mul(fill, sn);
        g.add(a, b)
    }

    /// Full self-attention over every window position; used for deeper stacks.
    fn encode_general<'a>(&self, g: &mut Graph<'a>, p: Binding<'a>, tokens: NodeId, w: &Windows, pos: ParamId, layers: &[AttentionLayer]) -> NodeId {
        let m = self.cfg.m;
        let pos_n = g.load(p, pos);
        let tile: Vec<usize> = (0..w.groups).flat_map(|_| 0..m).collect();
        let xr = g.gather_rows(tokens, &w.rows);
        let xp = g.gather_rows(pos_n, &tile);
        let mut x = g.add(xr, xp);
        for layer in layers {
            let q = layer.q.forward(g, p, x);
            let k = layer.k.forward(g, p, x);
            let v = layer.v.forward(g, p, x);
            let a = g.attention(q, k, v, &w.mask, self.cfg.attention_heads, m, m);
            let o = layer.out.forward(g, p, a);
            let y = g.add(x, o);
            let f = layer.ffn.forward(g, p, y);
            x = g.add(y, f);
        }
        let last: Vec<usize> = (0..w.groups).map(|b| b * m + m - 1).collect();
        g.gather_rows(x, &last)
    }

    fn cell<'a>(&self, g: &mut Graph<'a>, p: Binding<'a>, d_prev: Option<NodeId>, u: NodeId, ae: NodeId) -> Option<NodeId> {
        let (cand, gate) = (self.cell_cand.as_ref()?, self.cell_gate.as_ref()?);
        let d_prev = d_prev.expect("d state present when d_dim > 0");
        let x = g.concat_cols(&[d_prev, u, ae]);
        let c = cand.forward(g, p, x);
        let c = g.tanh(c);
        let z = gate.forward(g, p, x);
        let gt = g.sigmoid(z);
        let keep = g.mul(gt, d_prev);
        let ng = g.neg(gt);
        let one_minus = g.add_scalar(ng, 1.0);
        let fresh = g.mul(one_minus, c);
        Some(g.add(keep, fresh))
    }

    fn s_tilde_node(&self, g: &mut Graph<'_>, u: NodeId, d: Option<NodeId>, h: NodeId) -> NodeId {
        match d {
            Some(d) => g.concat_cols(&[u, d, h]),
            None => g.concat_cols(&[u, h]),
        }
    }

    fn prior_u_node<'a>(&self, g: &mut Graph<'a>, p: Binding<'a>, ctx: NodeId, ae: NodeId) -> GaussianNode {
        let x = g.concat_cols(&[ctx, ae]);
        let raw = self.prior_u.forward(g, p, x);
        GaussianNode::from_head(g, raw, self.cfg.u_dim)
    }

    fn post_u_node<'a>(&self, g: &mut Graph<'a>, p: Binding<'a>, ctx: NodeId, ae: NodeId, oe: NodeId, prior: GaussianNode) -> GaussianNode {
        if self.cfg.tied_posterior {
            return prior;
        }
        let x = g.concat_cols(&[ctx, ae, oe]);
        let raw = self.post_u.forward(g, p, x);
        GaussianNode::from_head(g, raw, self.cfg.u_dim)
    }

    fn prior_h_node<'a>(&self, g: &mut Graph<'a>, p: Binding<'a>, ctx: NodeId, h_prev: NodeId) -> GaussianNode {
        let x = g.concat_cols(&[ctx, h_prev]);
        let raw = self.prior_h.forward(g, p, x);
        GaussianNode::from_head(g, raw, self.cfg.h_dim)
    }

    fn post_h_node<'a>(&self, g: &mut Graph<'a>, p: Binding<'a>, ctx: NodeId, h_prev: NodeId, oe: NodeId, prior: GaussianNode) -> GaussianNode {
        if self.cfg.tied_posterior {
            return prior;
        }
        let x = g.concat_cols(&[ctx, h_prev, oe]);
        let raw = self.post_h.forward(g, p, x);
        GaussianNode::from_head(g, raw, self.cfg.h_dim)
    }

    /// Builds every loss term for a sequence batch, rolling the latent state
    /// forward with posterior samples.
    ///
    /// Noise is drawn from `rng` in a fixed order, so a cloned stream replays
    /// the same losses.
    pub fn losses<'a>(
        &self,
        g: &mut Graph<'a>,
        p: Binding<'a>,
        batch: &SeqBatch,
        meta: Option<MetaValue<'a>>,
        rng: &mut RngStream,
    ) -> Result<LossNodes> {
        let cfg = &self.cfg;
        if batch.batch == 0 || batch.len == 0 {
            return Err(Error::EmptyBatch);
        }
        if batch.m != cfg.m {
            return Err(Error::Dim {
                expected: cfg.m,
                got: batch.m,
            });
        }
        if meta.is_none() && cfg.lambda_v > 0.0 {
            return Err(Error::InvalidArgument("value-consistency term needs a meta-value".into()));
        }
        let head = self.head(batch.morphology)?;
        for (what, expected, got) in [
            ("observation", head.spec.obs_dim, batch.obs[0].cols()),
            ("action", head.spec.act_dim, batch.prev_act[0].cols()),
        ] {
            if expected != got {
                return Err(Error::Shape(format!("{what} width {got}, morphology {} expects {expected}", batch.morphology)));
            }
        }
        let (bsz, len, m) = (batch.batch, batch.len, cfg.m);
        let hist = m + len - 1;
        let co = g.constant(batch.ctx_obs.clone());
        let ca = g.constant(batch.ctx_act.clone());
        let tokens = self.tokens(g, p, head, co, ca, &batch.ctx_mask);
        let mut cache = None;

        let mut d = (cfg.d_dim > 0).then(|| g.constant(Tensor::zeros(&[bsz, cfg.d_dim])));
        let mut h = g.constant(Tensor::zeros(&[bsz, cfg.h_dim]));
        let mut s_prev: Option<NodeId> = None;
        let (mut var_terms, mut s_terms, mut v_terms) = (Vec::new(), Vec::new(), Vec::new());
        let (mut recon_terms, mut klu_terms, mut klh_terms, mut rew_terms) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());

        for j in 0..len {
            let mut rows = Vec::with_capacity(bsz * m);
            let mut mask = Vec::with_capacity(bsz * m);
            for b in 0..bsz {
                for s in 0..m {
                    rows.push(b * hist + j + s);
                    mask.push(batch.ctx_mask[b * hist + j + s]);
                }
            }
            let ctx = self.encode(g, p, tokens, &Windows { rows, mask, groups: bsz }, &mut cache);
            let a_prev = g.constant(batch.prev_act[j].clone());
            let o = g.constant(batch.obs[j].clone());
            let ae = head.act_embed.forward(g, p, a_prev);
            let oe = head.obs_embed.forward(g, p, o);

            let pu = self.prior_u_node(g, p, ctx, ae);
            let qu = self.post_u_node(g, p, ctx, ae, oe, pu);
            let u = qu.rsample(g, Tensor::new(vec![bsz, cfg.u_dim], rng.normals(bsz * cfg.u_dim))?);
            let d_new = self.cell(g, p, d, u, ae);
            let ph = self.prior_h_node(g, p, ctx, h);
            let qh = self.post_h_node(g, p, ctx, h, oe, ph);
            let h_new = qh.rsample(g, Tensor::new(vec![bsz, cfg.h_dim], rng.normals(bsz * cfg.h_dim))?);
            let s = self.s_tilde_node(g, u, d_new, h_new);

            let klu = kl_rows(g, pu, qu);
            let klh = kl_rows(g, ph, qh);
            let mean_o = head.decoder.forward(g, p, s);
            let nll = nll_unit_rows(g, mean_o, o);
            let r_hat = self.reward.forward(g, p, s);
            let r = g.constant(batch.reward[j].clone());
            let dr = g.sub(r_hat, r);
            let rse = g.square(dr);
            let t1 = g.add(klu, klh);
            let t2 = g.add(t1, nll);
            let t3 = g.add(t2, rse);
            var_terms.push(g.mean(t3));
            s_terms.push(g.mean(klu));
            recon_terms.push(g.mean(nll));
            klu_terms.push(g.mean(klu));
            klh_terms.push(g.mean(klh));
            rew_terms.push(g.mean(rse));

            if let (Some(mv), Some(_)) = (meta, s_prev) {
                let u_hat = pu.rsample(g, Tensor::new(vec![bsz, cfg.u_dim], rng.normals(bsz * cfg.u_dim))?);
                let d_hat = self.cell(g, p, d, u_hat, ae);
                let h_hat = ph.rsample(g, Tensor::new(vec![bsz, cfg.h_dim], rng.normals(bsz * cfg.h_dim))?);
                let s_hat = self.s_tilde_node(g, u_hat, d_hat, h_hat);
                let vb = Binding::frozen(mv.store);
                let v_real = mv.head.forward(g, vb, s);
                let v_pred = mv.head.forward(g, vb, s_hat);
                let dv = g.sub(v_real, v_pred);
                let adv = g.abs(dv);
                v_terms.push(g.mean(adv));
            }
            d = d_new;
            h = h_new;
            s_prev = Some(s);
        }

        let avg = |g: &mut Graph<'a>, terms: &[NodeId]| -> NodeId {
            if terms.is_empty() {
                return g.constant(Tensor::scalar(0.0));
            }
            let c = g.concat_cols(terms);
            g.mean(c)
        };
        let var = avg(g, &var_terms);
        let s = avg(g, &s_terms);
        let v = avg(g, &v_terms);
        let recon = avg(g, &recon_terms);
        let kl_u = avg(g, &klu_terms);
        let kl_h = avg(g, &klh_terms);
        let reward = avg(g, &rew_terms);
        let a = g.scale(var, cfg.lambda_var);
        let b = g.scale(s, cfg.lambda_s);
        let c = g.scale(v, cfg.lambda_v);
        let ab = g.add(a, b);
        let total = g.add(ab, c);
        Ok(LossNodes {
            total,
            var,
            s,
            v,
            recon,
            kl_u,
            kl_h,
            reward,
        })
    }

    /// Loss values without gradients.
    pub fn loss_values(&self, store: &ParamStore, batch: &SeqBatch, meta: Option<MetaValue<'_>>, rng: &mut RngStream) -> Result<LossValues> {
        let mut g = Graph::new();
        let nodes = self.losses(&mut g, Binding::frozen(store), batch, meta, rng)?;
        Ok(nodes.values(&g))
    }

    /// One optimizer step on the total loss; returns the pre-step losses.
    pub fn train_step(
        &self,
        store: &mut ParamStore,
        opt: &Adam,
        batch: &SeqBatch,
        meta: Option<MetaValue<'_>>,
        rng: &mut RngStream,
    ) -> Result<LossValues> {
        let (values, grads) = {
            let mut g = Graph::new();
            let nodes = self.losses(&mut g, Binding::trainable(store), batch, meta, rng)?;
            let (_, grads) = evaluate(&g, nodes.total, true)?;
            (nodes.values(&g), grads.expect("gradients requested"))
        };
        store.zero_grad();
        store.accumulate(&grads);
        opt.step(store)?;
        Ok(values)
    }

    fn check_dims(&self, head: &MorphHeads, obs: Option<&[f64]>, act: Option<&[f64]>) -> Result<()> {
        if let Some(o) = obs {
            if o.len() != head.spec.obs_dim {
                return Err(Error::Dim {
                    expected: head.spec.obs_dim,
                    got: o.len(),
                });
            }
        }
        if let Some(a) = act {
            if a.len() != head.spec.act_dim {
                return Err(Error::Dim {
                    expected: head.spec.act_dim,
                    got: a.len(),
                });
            }
        }
        Ok(())
    }

    /// Token of a single `(o, a)` pair.
    pub fn tokenize(&self, store: &ParamStore, morph: MorphologyId, obs: &[f64], act: &[f64]) -> Result<Vec<f64>> {
        let head = self.head(morph)?;
        self.check_dims(head, Some(obs), Some(act))?;
        let mut x = obs.to_vec();
        x.extend_from_slice(act);
        Ok(head.tokenizer.eval_row(store, &x))
    }

    fn window_ctx<'a>(&self, g: &mut Graph<'a>, p: Binding<'a>, head: &MorphHeads, window: &ContextWindow) -> Result<NodeId> {
        if window.capacity() != self.cfg.m {
            return Err(Error::Dim {
                expected: self.cfg.m,
                got: window.capacity(),
            });
        }
        for (o, a) in window.entries() {
            self.check_dims(head, Some(o), Some(a))?;
        }
        let (od, ad) = (head.spec.obs_dim, head.spec.act_dim);
        let (obs, act, mask) = window.slots(od, ad);
        let o = g.constant(Tensor::from_rows(&obs, od)?);
        let a = g.constant(Tensor::from_rows(&act, ad)?);
        let tokens = self.tokens(g, p, head, o, a, &mask);
        let w = Windows {
            rows: (0..self.cfg.m).collect(),
            mask,
            groups: 1,
        };
        Ok(self.encode(g, p, tokens, &w, &mut None))
    }

    /// Context embedding of a window.
    pub fn encode_context(&self, store: &ParamStore, morph: MorphologyId, window: &ContextWindow) -> Result<Vec<f64>> {
        let head = self.head(morph)?;
        let mut g = Graph::new();
        let c = self.window_ctx(&mut g, Binding::frozen(store), head, window)?;
        Ok(g.value(c).data().to_vec())
    }

    /// Prior over `u_t` given the context and `a_{t−1}`.
    pub fn prior_u(&self, store: &ParamStore, morph: MorphologyId, window: &ContextWindow, prev_action: &[f64]) -> Result<DiagGaussian> {
        let head = self.head(morph)?;
        self.check_dims(head, None, Some(prev_action))?;
        let mut g = Graph::new();
        let p = Binding::frozen(store);
        let ctx = self.window_ctx(&mut g, p, head, window)?;
        let a = g.constant(Tensor::row(prev_action));
        let ae = head.act_embed.forward(&mut g, p, a);
        Ok(self.prior_u_node(&mut g, p, ctx, ae).row(&g, 0))
    }

    pub fn prior_h(&self, store: &ParamStore, morph: MorphologyId, window: &ContextWindow, h_prev: &[f64]) -> Result<DiagGaussian> {
        let head = self.head(morph)?;
        let mut g = Graph::new();
        let p = Binding::frozen(store);
        let ctx = self.window_ctx(&mut g, p, head, window)?;
        let h = g.constant(Tensor::row(h_prev));
        Ok(self.prior_h_node(&mut g, p, ctx, h).row(&g, 0))
    }

    pub fn posterior_u(&self, store: &ParamStore, morph: MorphologyId, window: &ContextWindow, prev_action: &[f64], obs: &[f64]) -> Result<DiagGaussian> {
        let head = self.head(morph)?;
        self.check_dims(head, Some(obs), Some(prev_action))?;
        let mut g = Graph::new();
        let p = Binding::frozen(store);
        let ctx = self.window_ctx(&mut g, p, head, window)?;
        let a = g.constant(Tensor::row(prev_action));
        let ae = head.act_embed.forward(&mut g, p, a);
        let o = g.constant(Tensor::row(obs));
        let oe = head.obs_embed.forward(&mut g, p, o);
        let pu = self.prior_u_node(&mut g, p, ctx, ae);
        Ok(self.post_u_node(&mut g, p, ctx, ae, oe, pu).row(&g, 0))
    }

    pub fn posterior_h(&self, store: &ParamStore, morph: MorphologyId, window: &ContextWindow, h_prev: &[f64], obs: &[f64]) -> Result<DiagGaussian> {
        let head = self.head(morph)?;
        self.check_dims(head, Some(obs), None)?;
        let mut g = Graph::new();
        let p = Binding::frozen(store);
        let ctx = self.window_ctx(&mut g, p, head, window)?;
        let h = g.constant(Tensor::row(h_prev));
        let o = g.constant(Tensor::row(obs));
        let oe = head.obs_embed.forward(&mut g, p, o);
        let ph = self.prior_h_node(&mut g, p, ctx, h);
        Ok(self.post_h_node(&mut g, p, ctx, h, oe, ph).row(&g, 0))
    }

    /// Deterministic recurrence `d_t = g⊙d_{t−1} + (1−g)⊙tanh(W[d_{t−1}; u_t; ae_t])`.
    pub fn step_d(&self, store: &ParamStore, morph: MorphologyId, d_prev: &[f64], u: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let head = self.head(morph)?;
        self.check_dims(head, None, Some(action))?;
        if d_prev.len() != self.cfg.d_dim {
            return Err(Error::Dim {
                expected: self.cfg.d_dim,
                got: d_prev.len(),
            });
        }
        if self.cfg.d_dim == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = Binding::frozen(store);
        let dn = g.constant(Tensor::row(d_prev));
        let un = g.constant(Tensor::row(u));
        let a = g.constant(Tensor::row(action));
        let ae = head.act_embed.forward(&mut g, p, a);
        let d = self.cell(&mut g, p, Some(dn), un, ae).expect("d_dim > 0");
        Ok(g.value(d).data().to_vec())
    }

    /// Mean of the observation distribution for a latent state.
    pub fn decode(&self, store: &ParamStore, morph: MorphologyId, s: &LatentState) -> Result<Vec<f64>> {
        let head = self.head(morph)?;
        Ok(head.decoder.eval_row(store, &s.s_tilde()))
    }

    pub fn predict_reward(&self, store: &ParamStore, s: &LatentState) -> f64 {
        self.reward.eval_row(store, &s.s_tilde())[0]
    }

    /// One filtering step: `u_t, h_t` from the posteriors, `d_t` from the cell.
    /// Uses posterior means unless `rng` is given.
    pub fn posterior_step(
        &self,
        store: &ParamStore,
        morph: MorphologyId,
        window: &ContextWindow,
        prev_action: &[f64],
        obs: &[f64],
        prev: &LatentState,
        rng: Option<&mut RngStream>,
    ) -> Result<LatentState> {
        let head = self.head(morph)?;
        self.check_dims(head, Some(obs), Some(prev_action))?;
        let cfg = &self.cfg;
        let mut g = Graph::new();
        let p = Binding::frozen(store);
        let ctx = self.window_ctx(&mut g, p, head, window)?;
        let a = g.constant(Tensor::row(prev_action));
        let ae = head.act_embed.forward(&mut g, p, a);
        let o = g.constant(Tensor::row(obs));
        let oe = head.obs_embed.forward(&mut g, p, o);
        let h_prev = g.constant(Tensor::row(&prev.h));
        let pu = self.prior_u_node(&mut g, p, ctx, ae);
        let qu = self.post_u_node(&mut g, p, ctx, ae, oe, pu);
        let ph = self.prior_h_node(&mut g, p, ctx, h_prev);
        let qh = self.post_h_node(&mut g, p, ctx, h_prev, oe, ph);
        let (u, h) = match rng {
            Some(r) => (
                qu.rsample(&mut g, Tensor::row(&r.normals(cfg.u_dim))),
                qh.rsample(&mut g, Tensor::row(&r.normals(cfg.h_dim))),
            ),
            None => (qu.mean, qh.mean),
        };
        let d_prev = (cfg.d_dim > 0).then(|| g.constant(Tensor::row(&prev.d)));
        let d = self.cell(&mut g, p, d_prev, u, ae);
        Ok(LatentState {
            u: g.value(u).data().to_vec(),
            d: d.map_or(Vec::new(), |d| g.value(d).data().to_vec()),
            h: g.value(h).data().to_vec(),
        })
    }

    /// One prior step from `prev` under `action`; `window` must already hold
    /// the pair `(o_t, a_t)`. Returns the next latent, its decoded
    /// observation, and the predicted reward of the transition.
    pub fn prior_step(
        &self,
        store: &ParamStore,
        morph: MorphologyId,
        window: &ContextWindow,
        action: &[f64],
        prev: &LatentState,
        rng: &mut RngStream,
    ) -> Result<(LatentState, Vec<f64>, f64)> {
        let head = self.head(morph)?;
        self.check_dims(head, None, Some(action))?;
        let cfg = &self.cfg;
        let mut g = Graph::new();
        let p = Binding::frozen(store);
        let ctx = self.window_ctx(&mut g, p, head, window)?;
        let a = g.constant(Tensor::row(action));
        let ae = head.act_embed.forward(&mut g, p, a);
        let pu = self.prior_u_node(&mut g, p, ctx, ae);
        let u = pu.rsample(&mut g, Tensor::row(&rng.normals(cfg.u_dim)));
        let d_prev = (cfg.d_dim > 0).then(|| g.constant(Tensor::row(&prev.d)));
        let d = self.cell(&mut g, p, d_prev, u, ae);
        let h_prev = g.constant(Tensor::row(&prev.h));
        let ph = self.prior_h_node(&mut g, p, ctx, h_prev);
        let h = ph.rsample(&mut g, Tensor::row(&rng.normals(cfg.h_dim)));
        let s = self.s_tilde_node(&mut g, u, d, h);
        let obs = head.decoder.forward(&mut g, p, s);
        let r = self.reward.forward(&mut g, p, s);
        let next = LatentState {
            u: g.value(u).data().to_vec(),
            d: d.map_or(Vec::new(), |d| g.value(d).data().to_vec()),
            h: g.value(h).data().to_vec(),
        };
        Ok((next, g.value(obs).data().to_vec(), g.value(r).item()))
    }

    /// Rolls the model forward `horizon` steps from `(obs, latent)` with
    /// actions chosen by `policy` on the current (decoded) observation.
    pub fn imagine_rollout(
        &self,
        store: &ParamStore,
        morph: MorphologyId,
        window: &ContextWindow,
        obs: &[f64],
        latent: &LatentState,
        policy: &mut dyn FnMut(&[f64]) -> Vec<f64>,
        horizon: usize,
        rng: &mut RngStream,
    ) -> Result<Vec<ImaginedStep>> {
        if horizon < 1 {
            return Err(Error::InvalidArgument("imagination horizon must be at least 1".into()));
        }
        let mut window = window.clone();
        let mut o = obs.to_vec();
        let mut s = latent.clone();
        let mut out = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let a = policy(&o);
            window.push(o.clone(), a.clone());
            let (next, o_next, r) = self.prior_step(store, morph, &window, &a, &s, rng)?;
            out.push(ImaginedStep {
                obs: o,
                action: a,
                reward: r,
                next_obs: o_next.clone(),
                latent: next.clone(),
            });
            o = o_next;
            s = next;
        }
        Ok(out)
    }

    /// Posterior-mean latents for every observation of an episode, where
    /// `actions[k]` is taken at `obs[k]` and `seed` fills the context before
    /// the first step. Equivalent to chaining [`Self::posterior_step`]
    /// without sampling, with a zero action before `obs[0]`.
    pub fn filter_episode(
        &self,
        store: &ParamStore,
        morph: MorphologyId,
        seed: &[(Vec<f64>, Vec<f64>)],
        obs: &[Vec<f64>],
        actions: &[Vec<f64>],
    ) -> Result<Vec<LatentState>> {
        let head = self.head(morph)?;
        let cfg = &self.cfg;
        let (od, ad, m) = (head.spec.obs_dim, head.spec.act_dim, cfg.m);
        let n = obs.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        if actions.len() + 1 < n {
            return Err(Error::InvalidArgument(format!("{} observations need at least {} actions", n, n - 1)));
        }
        for o in obs {
            self.check_dims(head, Some(o), None)?;
        }
        for a in actions.iter().take(n - 1) {
            self.check_dims(head, None, Some(a))?;
        }
        for (o, a) in seed {
            self.check_dims(head, Some(o), Some(a))?;
        }
        let hist = m + n - 1;
        let mut ho = Vec::with_capacity(hist);
        let mut ha = Vec::with_capacity(hist);
        let mut hm = Vec::with_capacity(hist);
        for k in 0..hist {
            let tau = k as isize - m as isize;
            let pair = if tau >= 0 {
                Some((&obs[tau as usize], &actions[tau as usize]))
            } else {
                let i = seed.len() as isize + tau;
                (i >= 0).then(|| (&seed[i as usize].0, &seed[i as usize].1))
            };
            match pair {
                Some((o, a)) => {
                    ho.push(o.clone());
                    ha.push(a.clone());
                    hm.push(true);
                }
                None => {
                    ho.push(vec![0.0; od]);
                    ha.push(vec![0.0; ad]);
                    hm.push(false);
                }
            }
        }
        let mut prev_act = vec![vec![0.0; ad]];
        prev_act.extend(actions.iter().take(n - 1).cloned());

        let mut g = Graph::new();
        let p = Binding::frozen(store);
        let co = g.constant(Tensor::from_rows(&ho, od)?);
        let ca = g.constant(Tensor::from_rows(&ha, ad)?);
        let tokens = self.tokens(&mut g, p, head, co, ca, &hm);
        let mut rows = Vec::with_capacity(n * m);
        let mut mask = Vec::with_capacity(n * m);
        for t in 0..n {
            rows.extend(t..t + m);
            mask.extend_from_slice(&hm[t..t + m]);
        }
        let ctx = self.encode(&mut g, p, tokens, &Windows { rows, mask, groups: n }, &mut None);
        let a = g.constant(Tensor::from_rows(&prev_act, ad)?);
        let ae = head.act_embed.forward(&mut g, p, a);
        let o = g.constant(Tensor::from_rows(obs, od)?);
        let oe = head.obs_embed.forward(&mut g, p, o);
        let pu = self.prior_u_node(&mut g, p, ctx, ae);
        let qu = self.post_u_node(&mut g, p, ctx, ae, oe, pu);
        let (ctx, ae, oe, u) = (g.value(ctx), g.value(ae), g.value(oe), g.value(qu.mean));

        let mut out = Vec::with_capacity(n);
        let mut prev = LatentState::zeros(cfg);
        for t in 0..n {
            let (c, e, w, u) = (ctx.row_slice(t), ae.row_slice(t), oe.row_slice(t), u.row_slice(t));
            let d = match (&self.cell_cand, &self.cell_gate) {
                (Some(cand), Some(gate)) => {
                    let x: Vec<f64> = prev.d.iter().chain(u).chain(e).copied().collect();
                    let cv = cand.eval_row(store, &x);
                    let gv = gate.eval_row(store, &x);
                    prev.d
                        .iter()
                        .zip(cv.iter().zip(&gv))
                        .map(|(dp, (c, z))| {
                            let gt = sigmoid(*z);
                            gt * dp + (1.0 - gt) * c.tanh()
                        })
                        .collect()
                }
                _ => Vec::new(),
            };
            let x: Vec<f64> = if cfg.tied_posterior {
                c.iter().chain(&prev.h).copied().collect()
            } else {
                c.iter().chain(&prev.h).chain(w).copied().collect()
            };
            let raw = if cfg.tied_posterior { self.prior_h.eval_row(store, &x) } else { self.post_h.eval_row(store, &x) };
            let h = raw[..cfg.h_dim].to_vec();
            prev = LatentState { u: u.to_vec(), d, h };
            out.push(prev.clone());
        }
        Ok(out)
    }

    /// Posterior encoding of an episode start (zero prior state, zero action).
    pub fn encode_start(&self, store: &ParamStore, morph: MorphologyId, window: &ContextWindow, obs: &[f64]) -> Result<LatentState> {
        let act = vec![0.0; self.head(morph)?.spec.act_dim];
        self.posterior_step(store, morph, window, &act, obs, &LatentState::zeros(&self.cfg), None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta_env::{Env, ScenarioSpec};
use crate::numerics::{evaluate, grad_check};

    fn hop() -> HeadSpec {
        HeadSpec {
            morphology: MorphologyId::Hop,
            obs_dim: 4,
            act_dim: 1,
        }
    }

    fn trace(spec: &ScenarioSpec, steps: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
        let mut env = Env::new(spec.clone(), seed);
        let mut rng = RngStream::new(seed, 77);
        let mut obs = vec![env.reset()];
        let (mut acts, mut rews) = (Vec::new(), Vec::new());
        for _ in 0..steps {
            let a: Vec<f64> = (0..spec.act_dim()).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let r = env.step(&a).unwrap();
            obs.push(r.obs);
            acts.push(a);
            rews.push(r.reward);
        }
        (obs, acts, rews)
    }

    fn batch(cfg: &ModelConfig, t0s: &[usize]) -> SeqBatch {
        let spec = ScenarioSpec::default_for(MorphologyId::Hop, 1.0);
        let (o, a, r) = trace(&spec, 40, 1);
        let seqs: Vec<Sequence> = t0s
            .iter()
            .map(|&t0| Sequence::from_trace(&o, &a, &r, None, t0, cfg.m, cfg.seq_len).unwrap())
            .collect();
        SeqBatch::from_sequences(MorphologyId::Hop, cfg.m, &seqs).unwrap()
    }

    #[test]
    fn context_window_is_fifo() {
        let mut w = ContextWindow::new(3);
        for i in 0..5 {
            w.push(vec![i as f64], vec![-(i as f64)]);
        }
        let (o, _, mask) = w.slots(1, 1);
        assert_eq!(o, vec![vec![2.0], vec![3.0], vec![4.0]]);
        assert_eq!(mask, vec![true; 3]);
        let mut w = ContextWindow::new(3);
        w.push(vec![9.0], vec![1.0]);
        let (o, _, mask) = w.slots(1, 1);
        assert_eq!(o, vec![vec![0.0], vec![0.0], vec![9.0]]);
        assert_eq!(mask, vec![false, false, true]);
    }

    #[test]
    fn tied_posterior_zeroes_kl() {
        let cfg = ModelConfig {
            tied_posterior: true,
            lambda_v: 0.0,
            ..ModelConfig::tiny()
        };
        let (wm, st) = WorldModel::new(&cfg, &[hop()], &mut RngStream::new(0, 0)).unwrap();
        let b = batch(&cfg, &[2, 9]);
        let l = wm.loss_values(&st, &b, None, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(l.kl_u, 0.0);
        assert_eq!(l.kl_h, 0.0);
        assert_eq!(l.s, 0.0);
        assert!((l.var - (l.recon + l.reward)).abs() < 1e-12);
    }

    #[test]
    fn total_is_weighted_sum() {
        let cfg = ModelConfig::tiny();
        let mut rng = RngStream::new(0, 0);
        let (wm, st) = WorldModel::new(&cfg, &[hop()], &mut rng).unwrap();
        let mut vst = ParamStore::new("psi");
        let vh = ValueHead::new(&mut vst, cfg.s_dim(), cfg.hidden_dim, cfg.activation, &mut rng).unwrap();
        let meta = MetaValue { head: &vh, store: &vst };
        let b = batch(&cfg, &[3, 7]);
        let l = wm.loss_values(&st, &b, Some(meta), &mut RngStream::new(1, 0)).unwrap();
        let expected = cfg.lambda_var * l.var + cfg.lambda_s * l.s + cfg.lambda_v * l.v;
        assert!((l.total - expected).abs() <= 1e-12 * l.total.abs().max(1.0));
        assert!(l.v > 0.0);
    }

    fn psi(cfg: &ModelConfig, rng: &mut RngStream) -> (ValueHead, ParamStore) {
        let mut vst = ParamStore::new("psi");
        let vh = ValueHead::new(&mut vst, cfg.s_dim(), cfg.hidden_dim, cfg.activation, rng).unwrap();
        (vh, vst)
    }

    #[test]
    fn every_loss_passes_gradient_check() {
        let cfg = ModelConfig::tiny();
        let mut rng = RngStream::new(5, 0);
        let (wm, mut st) = WorldModel::new(&cfg, &[hop()], &mut rng).unwrap();
        let (vh, vst) = psi(&cfg, &mut rng);
        let b = batch(&cfg, &[2, 11]);
        let noise = RngStream::new(8, 0);
        for pick in 0..4 {
            let err = grad_check(&mut st, 1e-5, |s, want| {
                let mut g = Graph::new();
                let meta = MetaValue { head: &vh, store: &vst };
                let l = wm.losses(&mut g, Binding::trainable(s), &b, Some(meta), &mut noise.clone())?;
                let node = [l.total, l.var, l.s, l.v][pick];
                evaluate(&g, node, want)
            })
            .unwrap();
            assert!(err < 1e-4, "loss {pick}: {err}");
        }
    }

    #[test]
    fn flatten_encoder_without_deterministic_path_passes_gradient_check() {
        let cfg = ModelConfig {
            context_encoder: ContextEncoderKind::MlpFlatten,
            d_dim: 0,
            ..ModelConfig::tiny()
        };
        let mut rng = RngStream::new(2, 0);
        let (wm, mut st) = WorldModel::new(&cfg, &[hop()], &mut rng).unwrap();
        let (vh, vst) = psi(&cfg, &mut rng);
        let b = batch(&cfg, &[1, 6]);
        let noise = RngStream::new(3, 0);
        let err = grad_check(&mut st, 1e-5, |s, want| {
            let mut g = Graph::new();
            let meta = MetaValue { head: &vh, store: &vst };
            let l = wm.losses(&mut g, Binding::trainable(s), &b, Some(meta), &mut noise.clone())?;
            evaluate(&g, l.total, want)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
        let s = wm.encode_start(&st, MorphologyId::Hop, &ContextWindow::new(cfg.m), &[0.1, 0.0, 1.0, 0.0]).unwrap();
        assert!(s.d.is_empty());
        assert_eq!(s.s_tilde().len(), cfg.u_dim + cfg.h_dim);
    }

    #[test]
    fn loss_is_linear_in_weights() {
        let base = ModelConfig::tiny();
        let mut rng = RngStream::new(0, 0);
        let (wm, st) = WorldModel::new(&base, &[hop()], &mut rng).unwrap();
        let (vh, vst) = psi(&base, &mut rng);
        let b = batch(&base, &[3, 7]);
        let eval = |lv: f64, ls: f64, lvv: f64| {
            let mut m = wm.clone();
            m.cfg.lambda_var = lv;
            m.cfg.lambda_s = ls;
            m.cfg.lambda_v = lvv;
            let meta = MetaValue { head: &vh, store: &vst };
            m.loss_values(&st, &b, Some(meta), &mut RngStream::new(1, 0)).unwrap()
        };
        let one = eval(1.0, 0.1, 1.0);
        let two = eval(2.0, 0.2, 2.0);
        assert!((two.total - 2.0 * one.total).abs() <= 1e-12 * one.total.abs());
        let var_only = eval(1.5, 0.0, 0.0);
        assert_eq!(var_only.total, 1.5 * var_only.var);
        assert!(one.kl_u >= 0.0 && one.kl_h >= 0.0 && one.s >= 0.0 && one.v >= 0.0);
    }

    #[test]
    fn meta_value_receives_no_gradient() {
        let cfg = ModelConfig::tiny();
        let mut rng = RngStream::new(0, 0);
        let (wm, st) = WorldModel::new(&cfg, &[hop()], &mut rng).unwrap();
        let (vh, vst) = psi(&cfg, &mut rng);
        let b = batch(&cfg, &[3, 7]);
        let mut g = Graph::new();
        let meta = MetaValue { head: &vh, store: &vst };
        let l = wm.losses(&mut g, Binding::trainable(&st), &b, Some(meta), &mut rng).unwrap();
        let gr = g.backward(l.total).unwrap();
        assert_eq!(gr.namespaces(), vec![THETA]);
    }

    #[test]
    fn missing_meta_value_is_an_error() {
        let cfg = ModelConfig::tiny();
        let (wm, st) = WorldModel::new(&cfg, &[hop()], &mut RngStream::new(0, 0)).unwrap();
        let b = batch(&cfg, &[3]);
        assert!(wm.loss_values(&st, &b, None, &mut RngStream::new(0, 0)).is_err());
        let walk = SeqBatch {
            morphology: MorphologyId::Walk,
            ..b
        };
        assert!(matches!(
            wm.loss_values(&st, &walk, None, &mut RngStream::new(0, 0)),
            Err(Error::UnknownMorphology(_)) | Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn masked_slots_never_influence_losses() {
        let cfg = ModelConfig {
            lambda_v: 0.0,
            ..ModelConfig::tiny()
        };
        let (wm, st) = WorldModel::new(&cfg, &[hop()], &mut RngStream::new(0, 0)).unwrap();
        let b = batch(&cfg, &[1, 2]);
        assert!(b.ctx_mask.iter().any(|&v| !v));
        let mut noisy = b.clone();
        let mut rng = RngStream::new(9, 9);
        for (r, &valid) in b.ctx_mask.iter().enumerate() {
            if !valid {
                let cols = noisy.ctx_obs.cols();
                for c in 0..cols {
                    noisy.ctx_obs.data_mut()[r * cols + c] = rng.normal() * 10.0;
                }
                noisy.ctx_act.data_mut()[r] = rng.normal();
            }
        }
        let a = wm.loss_values(&st, &b, None, &mut RngStream::new(1, 0)).unwrap();
        let c = wm.loss_values(&st, &noisy, None, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn single_valid_token_depends_only_on_itself() {
        let cfg = ModelConfig::tiny();
        let (wm, st) = WorldModel::new(&cfg, &[hop()], &mut RngStream::new(0, 0)).unwrap();
        let mut w = ContextWindow::new(cfg.m);
        w.push(vec![0.2, 0.1, 0.9, -0.3], vec![0.5]);
        let a = wm.encode_context(&st, MorphologyId::Hop, &w).unwrap();
        assert_eq!(a.len(), cfg.embed_dim);
        let mut w2 = ContextWindow::new(cfg.m);
        w2.push(vec![0.2, 0.1, 0.9, -0.3], vec![0.5]);
        assert_eq!(a, wm.encode_context(&st, MorphologyId::Hop, &w2).unwrap());
        w2.clear();
        w2.push(vec![0.2, 0.1, 0.9, -0.3], vec![-0.5]);
        assert_ne!(a, wm.encode_context(&st, MorphologyId::Hop, &w2).unwrap());
    }

    #[test]
    fn empty_window_yields_learned_empty_embedding() {
        let cfg = ModelConfig::tiny();
        let (wm, st) = WorldModel::new(&cfg, &[hop()], &mut RngStream::new(0, 0)).unwrap();
        let c = wm.encode_context(&st, MorphologyId::Hop, &ContextWindow::new(cfg.m)).unwrap();
        assert_eq!(c, st.value(wm.empty).data().to_vec());
    }

    #[test]
    fn optimized_encoder_matches_full_attention() {
        let cfg = ModelConfig::tiny();
        let (wm, st) = WorldModel::new(&cfg, &[hop()], &mut RngStream::new(4, 0)).unwrap();
        let head = wm.head(MorphologyId::Hop).unwrap();
        let (pos, layers) = match &wm.encoder {
            Encoder::Transformer { pos, layers } => (*pos, layers.clone()),
            Encoder::Flatten(_) => unreachable!(),
        };
        let mut rng = RngStream::new(1, 1);
        for filled in 1..=cfg.m + 1 {
            let mut w = ContextWindow::new(cfg.m);
            for _ in 0..filled {
                w.push(rng.normals(4), rng.normals(1));
            }
            let fast = wm.encode_context(&st, MorphologyId::Hop, &w).unwrap();
            let mut g = Graph::new();
            let p = Binding::frozen(&st);
            let (obs, act, mask) = w.slots(4, 1);
            let o = g.constant(Tensor::from_rows(&obs, 4).unwrap());
            let a = g.constant(Tensor::from_rows(&act, 1).unwrap());
            let t = wm.tokens(&mut g, p, head, o, a, &mask);
            let win = Windows {
                rows: (0..cfg.m).collect(),
                mask,
                groups: 1,
            };
            let slow = wm.encode_general(&mut g, p, t, &win, pos, &layers);
            for (x, y) in fast.iter().zip(g.value(slow).data()) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn saturated_gate_keeps_previous_state() {
        let cfg = ModelConfig::tiny();
        let (wm, mut st) = WorldModel::new(&cfg, &[hop()], &mut RngStream::new(0, 0)).unwrap();
        let gb = wm.gate_bias().unwrap();
        st.value_mut(gb).data_mut().fill(1e3);
        let d_prev: Vec<f64> = (0..cfg.d_dim).map(|i| i as f64 * 0.1 - 0.3).collect();
        let d = wm.step_d(&st, MorphologyId::Hop, &d_prev, &[0.4; 8], &[0.7]).unwrap();
        assert_eq!(d, d_prev);
    }

    #[test]
    fn zero_cell_weights_keep_zero_state() {
        let cfg = ModelConfig::tiny();
        let (wm, mut st) = WorldModel::new(&cfg, &[hop()], &mut RngStream::new(0, 0)).unwrap();
        let cand = wm.cell_cand.clone().unwrap();
        st.value_mut(cand.w).data_mut().fill(0.0);
        st.value_mut(cand.b).data_mut().fill(0.0);
        let d = wm.step_d(&st, MorphologyId::Hop, &[0.0; 8], &[0.4; 8], &[0.7]).unwrap();
        assert_eq!(d, vec![0.0; 8]);
        assert!(wm.step_d(&st, MorphologyId::Hop, &[0.0; 3], &[0.4; 8], &[0.7]).is_err());
    }

    #[test]
    fn cell_gradient_matches_finite_differences() {
        let cfg = ModelConfig::tiny();
        let (wm, st) = WorldModel::new(&cfg, &[hop()], &mut RngStream::new(0, 0)).unwrap();
        let head = wm.head(MorphologyId::Hop).unwrap();
        let mut x = ParamStore::new("x");
        let mut rng = RngStream::new(7, 0);
        let dp = x.register("d", Tensor::row(&rng.normals(cfg.d_dim))).unwrap();
        let w = Tensor::row(&rng.normals(cfg.d_dim));
        let err = grad_check(&mut x, 1e-6, |xs, want| {
            let mut g = Graph::new();
            let p = Binding::frozen(&st);
            let d = g.param(xs, dp);
            let u = g.constant(Tensor::row(&[0.3; 8]));
            let a = g.constant(Tensor::row(&[-0.2]));
            let ae = head.act_embed.forward(&mut g, p, a);
            let dn = wm.cell(&mut g, p, Some(d), u, ae).unwrap();
            let wn = g.constant(w.clone());
            let y = g.mul(dn, wn);
            let l = g.sum(y);
            evaluate(&g, l, want)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn distribution_heads_have_declared_dims_and_clamped_scales() {
        let cfg = ModelConfig::tiny();
        let (wm, st) = WorldModel::new(&cfg, &[hop()], &mut RngStream::new(0, 0)).unwrap();
        let mut w = ContextWindow::new(cfg.m);
        w.push(vec![0.0, 0.0, 1.0, 0.0], vec![0.1]);
        let o = [0.5, 0.1, 0.9, 0.1];
        let pu = wm.prior_u(&st, MorphologyId::Hop, &w, &[0.1]).unwrap();
        let qu = wm.posterior_u(&st, MorphologyId::Hop, &w, &[0.1], &o).unwrap();
        let ph = wm.prior_h(&st, MorphologyId::Hop, &w, &[0.0; 8]).unwrap();
        let qh = wm.posterior_h(&st, MorphologyId::Hop, &w, &[0.0; 8], &o).unwrap();
        for (d, n) in [(&pu, cfg.u_dim), (&qu, cfg.u_dim), (&ph, cfg.h_dim), (&qh, cfg.h_dim)] {
            assert_eq!(d.dim(), n);
            assert!(d.log_std().iter().all(|l| (-5.0..=2.0).contains(l)));
        }
        assert_eq!(pu, wm.prior_u(&st, MorphologyId::Hop, &w, &[0.1]).unwrap());
        assert!(pu.kl(&qu).unwrap() >= 0.0);
        assert!(wm.posterior_u(&st, MorphologyId::Hop, &w, &[0.1], &o[..3]).is_err());
        let s = LatentState::zeros(&cfg);
        assert_eq!(wm.decode(&st, MorphologyId::Hop, &s).unwrap().len(), 4);
        assert!(wm.predict_reward(&st, &s).is_finite());
    }

    #[test]
    fn tokens_share_width_across_morphologies() {
        let cfg = ModelConfig::tiny();
        let specs: Vec<HeadSpec> = MorphologyId::ALL
            .iter()
            .map(|&m| HeadSpec {
                morphology: m,
                obs_dim: m.spec().obs_dim,
                act_dim: m.spec().act_dim,
            })
            .collect();
        let (wm, st) = WorldModel::new(&cfg, &specs, &mut RngStream::new(0, 0)).unwrap();
        for sp in &specs {
            let t = wm.tokenize(&st, sp.morphology, &vec![0.3; sp.obs_dim], &vec![0.1; sp.act_dim]).unwrap();
            assert_eq!(t.len(), cfg.embed_dim);
        }
        assert!(wm.tokenize(&st, MorphologyId::Hop, &[0.0; 6], &[0.0]).is_err());
    }

    #[test]
    fn imagination_is_reproducible_and_sized() {
        let cfg = ModelConfig::tiny();
        let (wm, st) = WorldModel::new(&cfg, &[hop()], &mut RngStream::new(0, 0)).unwrap();
        let w = ContextWindow::new(cfg.m);
        let o = vec![0.0, 0.0, 1.0, 0.0];
        let s0 = wm.encode_start(&st, MorphologyId::Hop, &w, &o).unwrap();
        let run = |h: usize| {
            let mut pol = |obs: &[f64]| vec![obs[0].tanh()];
            wm.imagine_rollout(&st, MorphologyId::Hop, &w, &o, &s0, &mut pol, h, &mut RngStream::new(3, 0))
        };
        assert_eq!(run(1).unwrap().len(), 1);
        assert_eq!(run(5).unwrap(), run(5).unwrap());
        let five = run(5).unwrap();
        for k in 1..5 {
            assert_eq!(five[k].obs, five[k - 1].next_obs);
        }
        assert!(run(0).is_err());
    }

    #[test]
    fn config_rejects_degenerate_values() {
        assert!(ModelConfig::default().validate().is_ok());
        for bad in [
            ModelConfig { u_dim: 0, ..ModelConfig::tiny() },
            ModelConfig { lambda_s: -0.1, ..ModelConfig::tiny() },
            ModelConfig { attention_heads: 7, ..ModelConfig::tiny() },
        ] {
            assert!(bad.validate().is_err());
        }
        let t: ModelConfig = serde_json::from_str(r#"{"m": 5}"#).unwrap();
        assert_eq!(t.m, 5);
        assert_eq!(t.lambda_s, 0.1);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"mm": 5}"#).is_err());
    }

    #[test]
    fn episode_filter_matches_stepwise_posterior() {
        let cfg = ModelConfig::tiny();
        let (wm, st) = WorldModel::new(&cfg, &[hop()], &mut RngStream::new(3, 0)).unwrap();
        let spec = ScenarioSpec::default_for(MorphologyId::Hop, 1.0);
        let (o, a, _) = trace(&spec, 9, 2);
        let seed = vec![(vec![0.5, 0.0, 1.0, 0.2], vec![0.3])];
        let fast = wm.filter_episode(&st, MorphologyId::Hop, &seed, &o, &a).unwrap();
        assert_eq!(fast.len(), o.len());
        let mut w = ContextWindow::new(cfg.m);
        w.push(seed[0].0.clone(), seed[0].1.clone());
        let mut prev = LatentState::zeros(&cfg);
        let mut pa = vec![0.0];
        for t in 0..o.len() {
            let s = wm.posterior_step(&st, MorphologyId::Hop, &w, &pa, &o[t], &prev, None).unwrap();
            for (x, y) in s.s_tilde().iter().zip(fast[t].s_tilde()) {
                assert!((x - y).abs() < 1e-12, "t={t}: {x} vs {y}");
            }
            if t < a.len() {
                w.push(o[t].clone(), a[t].clone());
                pa = a[t].clone();
            }
            prev = s;
        }
    }
}
