//! Closed-form generalization bounds and exact checks of them on tabular
//! problems and smooth one-dimensional families.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

const SUM_TOL: f64 = 1e-9;
const ROW_TOL: f64 = 1e-12;
/// A bound counts as violated when the measured side exceeds it by more than this.
pub const VIOLATION_TOL: f64 = 1e-12;

fn check_distribution(p: &[f64], what: &str, tol: f64) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || (s - 1.0).abs() > tol {
        return Err(Error::NotADistribution(format!("{what}: sum {s}")));
    }
    Ok(())
}

/// `½·Σ|p − q|`
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dim {
            expected: p.len(),
            got: q.len(),
        });
    }
    check_distribution(p, "p", SUM_TOL)?;
    check_distribution(q, "q", SUM_TOL)?;
    Ok(tv_unchecked(p, q))
}

fn tv_unchecked(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `Σ p·ln(p/q)`; infinite when `q` misses mass of `p`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dim {
            expected: p.len(),
            got: q.len(),
        });
    }
    check_distribution(p, "p", SUM_TOL)?;
    check_distribution(q, "q", SUM_TOL)?;
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| match (a > 0.0, b > 0.0) {
            (false, _) => 0.0,
            (true, false) => f64::INFINITY,
            (true, true) => a * (a / b).ln(),
        })
        .sum())
}

/// Finite MDP. `t[(s·A + a)·S + s']` is the transition probability,
/// `r[s·A + a] ∈ [0, r_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub t: Vec<f64>,
    pub r: Vec<f64>,
    pub rho0: Vec<f64>,
    pub gamma: f64,
    pub r_max: f64,
}

pub const MAX_STATES: usize = 8;
pub const MAX_ACTIONS: usize = 4;

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.n_states, self.n_actions);
        if s == 0 || a == 0 || s > MAX_STATES || a > MAX_ACTIONS {
            return Err(Error::InvalidArgument(format!("{s} states and {a} actions outside 1..={MAX_STATES} × 1..={MAX_ACTIONS}")));
        }
        if self.t.len() != s * a * s || self.r.len() != s * a || self.rho0.len() != s {
            return Err(Error::Shape(format!("tables do not match {s} states and {a} actions")));
        }
        for row in self.t.chunks(s) {
            check_distribution(row, "transition row", ROW_TOL)?;
        }
        check_distribution(&self.rho0, "initial distribution", ROW_TOL)?;
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if self.r.iter().any(|&x| !(0.0..=self.r_max).contains(&x)) {
            return Err(Error::InvalidArgument(format!("reward outside [0, {}]", self.r_max)));
        }
        Ok(())
    }

    /// Dirichlet(1) transition rows and initial distribution, rewards uniform in `[0, r_max]`.
    pub fn random(n_states: usize, n_actions: usize, r_max: f64, gamma: f64, rng: &mut RngStream) -> Result<Self> {
        let mut t = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            t.extend(rng.dirichlet_ones(n_states));
        }
        let r = (0..n_states * n_actions).map(|_| rng.uniform_in(0.0, r_max)).collect();
        let m = Self {
            n_states,
            n_actions,
            t,
            r,
            rho0: rng.dirichlet_ones(n_states),
            gamma,
            r_max,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.n_states;
        &self.t[(s * self.n_actions + a) * n..(s * self.n_actions + a + 1) * n]
    }

    /// State-to-state kernel and expected reward under `policy`.
    pub fn under_policy(&self, policy: &Policy) -> Result<(Vec<f64>, Vec<f64>)> {
        self.validate()?;
        policy.check_against(self)?;
        let n = self.n_states;
        let mut p = vec![0.0; n * n];
        let mut r = vec![0.0; n];
        for s in 0..n {
            for a in 0..self.n_actions {
                let w = policy.prob(s, a);
                r[s] += w * self.r[s * self.n_actions + a];
                for (dst, &x) in p[s * n..(s + 1) * n].iter_mut().zip(self.row(s, a)) {
                    *dst += w * x;
                }
            }
        }
        Ok((p, r))
    }

    /// Transition rows mixed toward `other`'s by `lambda`.
    pub fn mix(&self, other: &TabularMdp, lambda: f64) -> Result<Self> {
        if (self.n_states, self.n_actions) != (other.n_states, other.n_actions) || !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidArgument("mix needs equal sizes and lambda in [0, 1]".into()));
        }
        let mut out = self.clone();
        for (x, y) in out.t.iter_mut().zip(&other.t) {
            *x = (1.0 - lambda) * *x + lambda * y;
        }
        Ok(out)
    }
}

/// Row-stochastic `n_states × n_actions` action table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

impl Policy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions || n_actions == 0 {
            return Err(Error::Shape(format!("{} entries for {n_states} × {n_actions}", probs.len())));
        }
        for row in probs.chunks(n_actions) {
            check_distribution(row, "policy row", SUM_TOL)?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn random(n_states: usize, n_actions: usize, rng: &mut RngStream) -> Result<Self> {
        let probs = (0..n_states).flat_map(|_| rng.dirichlet_ones(n_actions)).collect();
        Self::new(n_states, n_actions, probs)
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn mix(&self, other: &Policy, lambda: f64) -> Result<Self> {
        if (self.n_states, self.n_actions) != (other.n_states, other.n_actions) {
            return Err(Error::InvalidArgument("mix needs equal sizes".into()));
        }
        Self::new(self.n_states, self.n_actions, self.probs.iter().zip(&other.probs).map(|(x, y)| (1.0 - lambda) * x + lambda * y).collect())
    }

    fn check_against(&self, mdp: &TabularMdp) -> Result<()> {
        if (self.n_states, self.n_actions) != (mdp.n_states, mdp.n_actions) {
            return Err(Error::Shape(format!(
                "policy {}×{} for MDP {}×{}",
                self.n_states, self.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        Ok(())
    }
}

/// `ρ₀·v` where `(I − γP_π)v = r_π`.
pub fn exact_return(mdp: &TabularMdp, policy: &Policy) -> Result<f64> {
    let (p, r) = mdp.under_policy(policy)?;
    let n = mdp.n_states;
    let a = DMatrix::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) - mdp.gamma * p[i * n + j]);
    let v = a.lu().solve(&DVector::from_vec(r)).ok_or(Error::Singular)?;
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::Singular);
    }
    Ok(mdp.rho0.iter().zip(v.iter()).map(|(p, v)| p * v).sum())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub eps_t: f64,
    pub eps_s: f64,
    pub eps_pi: f64,
    pub c_t: f64,
    pub c_pi: f64,
    pub r: f64,
    pub gamma: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [("eps_t", self.eps_t), ("eps_s", self.eps_s), ("eps_pi", self.eps_pi), ("c_t", self.c_t), ("c_pi", self.c_pi), ("r", self.r)];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        Ok(())
    }
}

/// `ε_T + C_T·ε_S`
pub fn lemma_dyn_bound(b: &BoundInputs) -> f64 {
    b.eps_t + b.c_t * b.eps_s
}

/// `ε_π + ½·C_π·ε_S`
pub fn lemma_policy_bound(b: &BoundInputs) -> f64 {
    b.eps_pi + 0.5 * b.c_pi * b.eps_s
}

/// `2Rγ(ε_π + ε_T)/(1−γ)² + 2Rε_π/(1−γ)`
pub fn lemma_perf_bound(b: &BoundInputs) -> f64 {
    let g = b.gamma;
    2.0 * b.r * g * (b.eps_pi + b.eps_t) / ((1.0 - g) * (1.0 - g)) + 2.0 * b.r * b.eps_pi / (1.0 - g)
}

/// `Rγ[4ε_π + 2ε_T + (C_π + 2C_T)ε_S]/(1−γ)² + 2R(2ε_π + C_π·ε_S)/(1−γ)`
pub fn theorem_gen_bound(b: &BoundInputs) -> f64 {
    let g = b.gamma;
    b.r * g * (4.0 * b.eps_pi + 2.0 * b.eps_t + (b.c_pi + 2.0 * b.c_t) * b.eps_s) / ((1.0 - g) * (1.0 - g))
        + 2.0 * b.r * (2.0 * b.eps_pi + b.c_pi * b.eps_s) / (1.0 - g)
}

/// Summary of one verifier: how often the bound failed and by how much it held.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub trials: usize,
    pub violations: usize,
    pub min_slack: Option<f64>,
    pub median_slack: Option<f64>,
    pub mean_slack: Option<f64>,
}

impl CheckSummary {
    pub fn from_slacks(trials: usize, slacks: &[f64]) -> Self {
        let finite: Vec<f64> = slacks.iter().copied().filter(|s| s.is_finite()).collect();
        let mut sorted = finite.clone();
        sorted.sort_by(f64::total_cmp);
        let median = (!sorted.is_empty()).then(|| {
            let n = sorted.len();
            if n % 2 == 1 {
                sorted[n / 2]
            } else {
                0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
            }
        });
        Self {
            trials,
            violations: slacks.iter().filter(|&&s| s < -VIOLATION_TOL).count(),
            min_slack: sorted.first().copied(),
            median_slack: median,
            mean_slack: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// One trial of the performance-difference check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfTrial {
    pub n_states: usize,
    pub n_actions: usize,
    pub eps_t: f64,
    pub eps_pi: f64,
    pub gap: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub summary: CheckSummary,
    pub trials: Vec<PerfTrial>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerfSettings {
    pub max_states: usize,
    pub max_actions: usize,
    pub gamma: f64,
    pub r_max: f64,
}

impl Default for PerfSettings {
    fn default() -> Self {
        Self {
            max_states: 5,
            max_actions: 3,
            gamma: 0.9,
            r_max: 1.0,
        }
    }
}

/// Mixing weight toward an independent draw: `u³`, so most pairs are close.
fn closeness(rng: &mut RngStream) -> f64 {
    rng.uniform().powi(3)
}

/// Random MDP pairs sharing rewards and `ρ₀` with policy pairs; measures
/// `ε_T = max_{s,a} TV(T¹‖T²)`, `ε_π = max_s TV(π₁‖π₂)` and compares
/// `|G¹(π₁) − G²(π₂)|` to [`lemma_perf_bound`].
pub fn verify_perf_bound(n_trials: usize, settings: &PerfSettings, rng: &mut RngStream) -> Result<PerfReport> {
    if settings.max_states < 1 || settings.max_actions < 1 {
        return Err(Error::InvalidArgument("need at least one state and one action".into()));
    }
    let mut trials = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let ns = 1 + rng.below(settings.max_states);
        let na = 1 + rng.below(settings.max_actions);
        let m1 = TabularMdp::random(ns, na, settings.r_max, settings.gamma, rng)?;
        let other = TabularMdp::random(ns, na, settings.r_max, settings.gamma, rng)?;
        let m2 = m1.mix(&other, closeness(rng))?;
        let p1 = Policy::random(ns, na, rng)?;
        let p2 = p1.mix(&Policy::random(ns, na, rng)?, closeness(rng))?;
        let mut eps_t: f64 = 0.0;
        for s in 0..ns {
            for a in 0..na {
                eps_t = eps_t.max(tv_unchecked(m1.row(s, a), m2.row(s, a)));
            }
        }
        let eps_pi = (0..ns).map(|s| tv_unchecked(p1.row(s), p2.row(s))).fold(0.0, f64::max);
        let gap = (exact_return(&m1, &p1)? - exact_return(&m2, &p2)?).abs();
        let bound = lemma_perf_bound(&BoundInputs {
            eps_t,
            eps_pi,
            r: settings.r_max,
            gamma: settings.gamma,
            ..BoundInputs::default()
        });
        trials.push(PerfTrial {
            n_states: ns,
            n_actions: na,
            eps_t,
            eps_pi,
            gap,
            bound,
        });
    }
    let slacks: Vec<f64> = trials.iter().map(|t| t.bound - t.gap).collect();
    Ok(PerfReport {
        summary: CheckSummary::from_slacks(n_trials, &slacks),
        trials,
    })
}

/// Finite Markov chain with row-stochastic kernel `p[x·n + x']`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovChain {
    pub n: usize,
    pub p: Vec<f64>,
    pub rho0: Vec<f64>,
}

impl MarkovChain {
    pub fn new(p: Vec<f64>, rho0: Vec<f64>) -> Result<Self> {
        let n = rho0.len();
        if p.len() != n * n || n == 0 {
            return Err(Error::Shape(format!("kernel of {} entries for {n} states", p.len())));
        }
        for row in p.chunks(n) {
            check_distribution(row, "kernel row", ROW_TOL)?;
        }
        check_distribution(&rho0, "initial distribution", ROW_TOL)?;
        Ok(Self { n, p, rho0 })
    }

    pub fn random(n: usize, rng: &mut RngStream) -> Result<Self> {
        let p = (0..n).flat_map(|_| rng.dirichlet_ones(n)).collect();
        Self::new(p, rng.dirichlet_ones(n))
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.p[x * self.n..(x + 1) * self.n]
    }

    /// `ρ_{t+1} = ρ_t·P`
    pub fn propagate(&self, rho: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (x, &w) in rho.iter().enumerate() {
            for (o, &q) in out.iter_mut().zip(self.row(x)) {
                *o += w * q;
            }
        }
        out
    }
}

/// Per-time margins of the state-marginal bound `TV(p¹_t‖p²_t) ≤ t·δ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalReport {
    /// `max_x KL(p¹(·|x)‖p²(·|x))`
    pub delta_kl: f64,
    /// `max_x TV(p¹(·|x)‖p²(·|x))`
    pub delta_tv: f64,
    /// `TV(p¹_t‖p²_t)` for `t = 0..=horizon`.
    pub tv: Vec<f64>,
    /// `t·δ_KL − TV_t`
    pub slack_kl: Vec<f64>,
    /// `t·δ_TV − TV_t`
    pub slack_tv: Vec<f64>,
}

impl MarginalReport {
    pub fn violations_kl(&self) -> usize {
        self.slack_kl.iter().filter(|&&s| s < -VIOLATION_TOL).count()
    }

    pub fn violations_tv(&self) -> usize {
        self.slack_tv.iter().filter(|&&s| s < -VIOLATION_TOL).count()
    }
}

/// Propagates both chains exactly from their shared `ρ₀` and compares the
/// marginal TV with `t·δ`, for `δ` measured as the maximal row KL and,
/// alongside, as the maximal row TV.
pub fn verify_marginal_tv(c1: &MarkovChain, c2: &MarkovChain, horizon: usize) -> Result<MarginalReport> {
    if c1.n != c2.n {
        return Err(Error::Dim { expected: c1.n, got: c2.n });
    }
    if c1.rho0 != c2.rho0 {
        return Err(Error::InvalidArgument("chains must share the initial distribution".into()));
    }
    let mut delta_kl: f64 = 0.0;
    let mut delta_tv: f64 = 0.0;
    for x in 0..c1.n {
        delta_kl = delta_kl.max(kl_divergence(c1.row(x), c2.row(x))?);
        delta_tv = delta_tv.max(tv_unchecked(c1.row(x), c2.row(x)));
    }
    let (mut a, mut b) = (c1.rho0.clone(), c2.rho0.clone());
    let mut tv = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        if t > 0 {
            a = c1.propagate(&a);
            b = c2.propagate(&b);
        }
        tv.push(tv_unchecked(&a, &b));
    }
    let slack = |d: f64| tv.iter().enumerate().map(|(t, v)| if d.is_infinite() { f64::INFINITY } else { t as f64 * d - v }).collect();
    Ok(MarginalReport {
        delta_kl,
        delta_tv,
        slack_kl: slack(delta_kl),
        slack_tv: slack(delta_tv),
        tv,
    })
}

/// Result of checking many chain pairs; a pair counts as violating when any
/// time step does.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MarginalSummary {
    /// Premise measured in KL, as the lemma states it.
    pub kl_premise: CheckSummary,
    /// Premise measured in TV.
    pub tv_premise: CheckSummary,
    /// Smallest `t` at which some pair violated the KL-premise bound.
    pub first_violation_t: Option<usize>,
}

/// Random pairs of `n_states` chains sharing `ρ₀`, the second mixed toward
/// an independent draw.
pub fn verify_marginal_tv_trials(n_pairs: usize, n_states: usize, horizon: usize, rng: &mut RngStream) -> Result<MarginalSummary> {
    let mut min_kl = Vec::with_capacity(n_pairs);
    let mut min_tv = Vec::with_capacity(n_pairs);
    let mut first: Option<usize> = None;
    for _ in 0..n_pairs {
        let c1 = MarkovChain::random(n_states, rng)?;
        let other = MarkovChain::random(n_states, rng)?;
        let lambda = closeness(rng);
        let p = c1.p.iter().zip(&other.p).map(|(x, y)| (1.0 - lambda) * x + lambda * y).collect();
        let c2 = MarkovChain::new(p, c1.rho0.clone())?;
        let r = verify_marginal_tv(&c1, &c2, horizon)?;
        min_kl.push(r.slack_kl.iter().copied().fold(f64::INFINITY, f64::min));
        min_tv.push(r.slack_tv.iter().copied().fold(f64::INFINITY, f64::min));
        if let Some(t) = r.slack_kl.iter().position(|&s| s < -VIOLATION_TOL) {
            first = Some(first.map_or(t, |f| f.min(t)));
        }
    }
    Ok(MarginalSummary {
        kl_premise: CheckSummary::from_slacks(n_pairs, &min_kl),
        tv_premise: CheckSummary::from_slacks(n_pairs, &min_tv),
        first_violation_t: first,
    })
}

/// Observation-to-latent table with the per-entry representation error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentationMap {
    pub f: Vec<usize>,
    pub delta_s: Vec<f64>,
    pub n_latent: usize,
}

impl RepresentationMap {
    pub fn validate(&self, eps_s: f64) -> Result<()> {
        if self.f.len() != self.delta_s.len() {
            return Err(Error::Dim {
                expected: self.f.len(),
                got: self.delta_s.len(),
            });
        }
        if let Some(&bad) = self.f.iter().find(|&&z| z >= self.n_latent) {
            return Err(Error::InvalidArgument(format!("latent index {bad} outside {} states", self.n_latent)));
        }
        if self.eps_s() > eps_s {
            return Err(Error::InvalidArgument(format!("representation error {} above declared {eps_s}", self.eps_s())));
        }
        Ok(())
    }

    /// `max |δs|`
    pub fn eps_s(&self) -> f64 {
        self.delta_s.iter().fold(0.0, |m, d| m.max(d.abs()))
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// TV between `N(μ, σ²)` and `N(μ + shift, σ²)`.
pub fn gaussian_shift_tv(shift: f64, sigma: f64) -> f64 {
    2.0 * std_normal_cdf(shift.abs() / (2.0 * sigma)) - 1.0
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RepresentationReport {
    pub eps_s: f64,
    pub dynamics: CheckSummary,
    pub policy: CheckSummary,
}

/// Perturbs inputs of smooth one-dimensional families by `|δs| ≤ ε_S` and
/// compares the measured TV to [`lemma_dyn_bound`] and [`lemma_policy_bound`].
///
/// Dynamics: true `N(m·s + c·a, σ²)`, model mean off by `e`; the shifted
/// model's TV to the truth is `gaussian_shift_tv(e + m·δs − δs′, σ)` and
/// `C_T = ½(∫|∂_s T| + ∫|∂_{s′} T|) = (|m| + 1)/(σ√(2π))`.
/// Policy: two-action logistic `π(1|s) = σ(k·s + b)`, `C_π = max_s Σ_a |∂_s π(a|s)| = |k|/2`,
/// `ε_π` taken at the evaluated state.
pub fn verify_representation_bounds(n_trials: usize, eps_s: f64, rng: &mut RngStream) -> Result<RepresentationReport> {
    if !(eps_s >= 0.0 && eps_s.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps_s = {eps_s}")));
    }
    let mut dyn_slack = Vec::with_capacity(n_trials);
    let mut pol_slack = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let m = rng.uniform_in(-2.0, 2.0);
        let sigma = rng.uniform_in(0.2, 1.0);
        let e = rng.uniform_in(-0.3, 0.3);
        let ds = rng.uniform_in(-eps_s, eps_s);
        let ds_next = rng.uniform_in(-eps_s, eps_s);
        let b = BoundInputs {
            eps_t: gaussian_shift_tv(e, sigma),
            eps_s,
            c_t: (m.abs() + 1.0) / (sigma * (2.0 * std::f64::consts::PI).sqrt()),
            ..BoundInputs::default()
        };
        dyn_slack.push(lemma_dyn_bound(&b) - gaussian_shift_tv(e + m * ds - ds_next, sigma));

        let (k1, b1, k2, b2) = (rng.uniform_in(-8.0, 8.0), rng.uniform_in(-2.0, 2.0), rng.uniform_in(-8.0, 8.0), rng.uniform_in(-2.0, 2.0));
        let s = rng.uniform_in(0.0, 1.0);
        let d = rng.uniform_in(-eps_s, eps_s);
        let pi1 = |x: f64| sigmoid(k1 * x + b1);
        let pi2 = sigmoid(k2 * s + b2);
        let b = BoundInputs {
            eps_pi: (pi1(s) - pi2).abs(),
            eps_s,
            c_pi: k1.abs() / 2.0,
            ..BoundInputs::default()
        };
        pol_slack.push(lemma_policy_bound(&b) - (pi1(s + d) - pi2).abs());
    }
    Ok(RepresentationReport {
        eps_s,
        dynamics: CheckSummary::from_slacks(n_trials, &dyn_slack),
        policy: CheckSummary::from_slacks(n_trials, &pol_slack),
    })
}

/// Estimated constants of a dynamics/policy pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub c_t: f64,
    pub c_pi: f64,
    pub eps_t: f64,
    pub eps_s: f64,
}

/// `max` over the grid and input coordinates of `Σ_out |∂f_out/∂x_i|`, by
/// central differences with step `h`.
pub fn estimate_sensitivity(f: &dyn Fn(&[f64]) -> Vec<f64>, grid: &[Vec<f64>], h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step {h} must be positive")));
    }
    let mut best: f64 = 0.0;
    for x in grid {
        for i in 0..x.len() {
            let mut hi = x.clone();
            let mut lo = x.clone();
            hi[i] += h;
            lo[i] -= h;
            let (fh, fl) = (f(&hi), f(&lo));
            if fh.len() != fl.len() {
                return Err(Error::Dim {
                    expected: fh.len(),
                    got: fl.len(),
                });
            }
            let s: f64 = fh.iter().zip(&fl).map(|(a, b)| ((a - b) / (2.0 * h)).abs()).sum();
            if !s.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite derivative at {x:?}")));
            }
            best = best.max(s);
        }
    }
    Ok(best)
}

/// `max` over visited `(s, a)` of TV between the model row and the empirical
/// next-state frequencies of held-out transitions `(s, a, s′)`.
pub fn empirical_model_tv(model: &TabularMdp, heldout: &[(usize, usize, usize)]) -> Result<f64> {
    let (ns, na) = (model.n_states, model.n_actions);
    let mut counts = vec![0.0; ns * na * ns];
    for &(s, a, s2) in heldout {
        if s >= ns || a >= na || s2 >= ns {
            return Err(Error::InvalidArgument(format!("transition ({s}, {a}, {s2}) outside the model")));
        }
        counts[(s * na + a) * ns + s2] += 1.0;
    }
    let mut worst: f64 = 0.0;
    for (k, row) in counts.chunks(ns).enumerate() {
        let n: f64 = row.iter().sum();
        if n > 0.0 {
            let freq: Vec<f64> = row.iter().map(|c| c / n).collect();
            worst = worst.max(tv_unchecked(&freq, &model.t[k * ns..(k + 1) * ns]));
        }
    }
    Ok(worst)
}

/// `C_T`, `C_π` by central differences over `grid`, `ε_T` against held-out
/// transitions, `ε_S` from the representation map.
pub fn estimate_constants(
    dynamics: &dyn Fn(&[f64]) -> Vec<f64>,
    policy: &dyn Fn(&[f64]) -> Vec<f64>,
    grid: &[Vec<f64>],
    model: &TabularMdp,
    heldout: &[(usize, usize, usize)],
    representation: &RepresentationMap,
) -> Result<Constants> {
    const H: f64 = 1e-5;
    Ok(Constants {
        c_t: estimate_sensitivity(dynamics, grid, H)?,
        c_pi: estimate_sensitivity(policy, grid, H)?,
        eps_t: empirical_model_tv(model, heldout)?,
        eps_s: representation.eps_s(),
    })
}

/// Trial counts for [`verify_all`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub perf_trials: usize,
    pub chain_pairs: usize,
    pub chain_states: usize,
    pub horizon: usize,
    pub representation_trials: usize,
    pub eps_s: f64,
    pub perf: PerfSettings,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            perf_trials: 500,
            chain_pairs: 200,
            chain_states: 2,
            horizon: 50,
            representation_trials: 200,
            eps_s: 0.01,
            perf: PerfSettings::default(),
        }
    }
}

impl VerifyConfig {
    /// Every count set to `n`.
    pub fn with_trials(mut self, n: usize) -> Self {
        self.perf_trials = n;
        self.chain_pairs = n;
        self.representation_trials = n;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub seed: u64,
    pub config: VerifyConfig,
    pub performance: CheckSummary,
    pub marginal: MarginalSummary,
    pub representation: RepresentationReport,
}

impl BoundsReport {
    /// Each bound as stated, with its premise measured as stated.
    pub fn violations(&self) -> usize {
        self.performance.violations
            + self.marginal.kl_premise.violations
            + self.representation.dynamics.violations
            + self.representation.policy.violations
    }

    pub fn summary_lines(&self) -> Vec<String> {
        let line = |name: &str, c: &CheckSummary| {
            let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3e}"));
            format!(
                "{name:<28} trials {:>5}  violations {:>5}  min slack {:>10}  median slack {:>10}",
                c.trials,
                c.violations,
                f(c.min_slack),
                f(c.median_slack)
            )
        };
        vec![
            line("performance difference", &self.performance),
            line("state marginal (KL premise)", &self.marginal.kl_premise),
            line("state marginal (TV premise)", &self.marginal.tv_premise),
            line("representation dynamics", &self.representation.dynamics),
            line("representation policy", &self.representation.policy),
        ]
    }
}

/// Runs every verifier from one seed; independent streams per verifier.
pub fn verify_all(cfg: &VerifyConfig, seed: u64) -> Result<BoundsReport> {
    let performance = verify_perf_bound(cfg.perf_trials, &cfg.perf, &mut RngStream::new(seed, 1))?.summary;
    let marginal = verify_marginal_tv_trials(cfg.chain_pairs, cfg.chain_states, cfg.horizon, &mut RngStream::new(seed, 2))?;
    let representation = verify_representation_bounds(cfg.representation_trials, cfg.eps_s, &mut RngStream::new(seed, 3))?;
    Ok(BoundsReport {
        seed,
        config: *cfg,
        performance,
        marginal,
        representation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(close(tv_distance(&[0.5, 0.5], &[0.75, 0.25]).unwrap(), 0.25, 1e-15));
        assert!(matches!(tv_distance(&[1.0], &[0.5, 0.5]), Err(Error::Dim { .. })));
        assert!(matches!(tv_distance(&[0.5, 0.6], &[0.5, 0.5]), Err(Error::NotADistribution(_))));
        assert!(matches!(tv_distance(&[1.5, -0.5], &[0.5, 0.5]), Err(Error::NotADistribution(_))));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap().is_infinite());
        let want = 0.5 * (0.5f64 / 0.6).ln() + 0.5 * (0.5f64 / 0.4).ln();
        assert!(close(kl_divergence(&[0.5, 0.5], &[0.6, 0.4]).unwrap(), want, 1e-16));
    }

    proptest! {
        #[test]
        fn tv_is_a_metric(seed in any::<u64>(), n in 1usize..7) {
            let mut rng = RngStream::new(seed, 0);
            let (p, q, r) = (rng.dirichlet_ones(n), rng.dirichlet_ones(n), rng.dirichlet_ones(n));
            let d = |a: &[f64], b: &[f64]| tv_distance(a, b).unwrap();
            prop_assert_eq!(d(&p, &q), d(&q, &p));
            prop_assert_eq!(d(&p, &p), 0.0);
            prop_assert!(d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-15);
            prop_assert!((0.0..=1.0 + 1e-15).contains(&d(&p, &q)));
        }

        #[test]
        fn bounds_are_nonnegative_monotone_and_affine(
            e in prop::array::uniform5(0.0f64..2.0), r in 0.0f64..5.0, gamma in 0.0f64..0.99, k in 0usize..5, h in 0.001f64..1.0
        ) {
            let b = BoundInputs { eps_t: e[0], eps_s: e[1], eps_pi: e[2], c_t: e[3], c_pi: e[4], r, gamma };
            let bump = |b: &BoundInputs, d: f64| {
                let mut c = *b;
                match k { 0 => c.eps_t += d, 1 => c.eps_s += d, 2 => c.eps_pi += d, 3 => c.c_t += d, _ => c.c_pi += d }
                c
            };
            for f in [lemma_dyn_bound, lemma_policy_bound, lemma_perf_bound, theorem_gen_bound] {
                let (f0, f1, f2) = (f(&b), f(&bump(&b, h)), f(&bump(&b, 2.0 * h)));
                prop_assert!(f0 >= 0.0);
                prop_assert!(f1 >= f0);
                if k <= 2 {
                    prop_assert!((f2 - 2.0 * f1 + f0).abs() <= 1e-9 * (1.0 + f2.abs()));
                }
            }
        }
    }

    #[test]
    fn bound_substitution_examples() {
        let b = BoundInputs { eps_t: 0.1, c_t: 2.0, eps_s: 0.05, ..BoundInputs::default() };
        assert!(close(lemma_dyn_bound(&b), 0.2, 1e-12));
        let b = BoundInputs { eps_pi: 0.1, c_pi: 4.0, eps_s: 0.05, ..BoundInputs::default() };
        assert!(close(lemma_policy_bound(&b), 0.2, 1e-12));
        let b = BoundInputs { r: 1.0, gamma: 0.5, eps_pi: 0.1, eps_t: 0.1, ..BoundInputs::default() };
        assert!(close(lemma_perf_bound(&b), 1.2, 1e-12));
        assert!(close(theorem_gen_bound(&b), 2.0, 1e-12));
        let b = BoundInputs { r: 3.0, gamma: 0.0, eps_pi: 0.2, eps_t: 0.7, ..BoundInputs::default() };
        assert!(close(lemma_perf_bound(&b), 2.0 * 3.0 * 0.2, 1e-12));
        assert_eq!(theorem_gen_bound(&BoundInputs { r: 1.0, gamma: 0.9, c_t: 3.0, c_pi: 2.0, ..BoundInputs::default() }), 0.0);
        let base = BoundInputs { eps_t: 0.1, c_t: 2.0, eps_s: 0.05, ..BoundInputs::default() };
        let doubled = BoundInputs { eps_s: 0.1, ..base };
        assert!(close(lemma_dyn_bound(&doubled) - lemma_dyn_bound(&base), 2.0 * 0.05, 1e-15));
        assert!(BoundInputs { gamma: 1.0, ..base }.validate().is_err());
        assert!(BoundInputs { eps_t: -0.1, ..base }.validate().is_err());
    }

    fn value_iteration(m: &TabularMdp, p: &Policy) -> f64 {
        let (k, r) = m.under_policy(p).unwrap();
        let n = m.n_states;
        let mut v = vec![0.0; n];
        loop {
            let next: Vec<f64> = (0..n).map(|s| r[s] + m.gamma * (0..n).map(|j| k[s * n + j] * v[j]).sum::<f64>()).collect();
            let diff = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if diff < 1e-15 {
                break;
            }
        }
        m.rho0.iter().zip(&v).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn exact_return_examples() {
        let loop1 = TabularMdp { n_states: 1, n_actions: 1, t: vec![1.0], r: vec![1.0], rho0: vec![1.0], gamma: 0.5, r_max: 1.0 };
        let one = Policy::new(1, 1, vec![1.0]).unwrap();
        assert!(close(exact_return(&loop1, &one).unwrap(), 2.0, 1e-15));
        let mut rng = RngStream::new(1, 0);
        let mut m = TabularMdp::random(4, 2, 1.0, 0.9, &mut rng).unwrap();
        m.r.iter_mut().for_each(|r| *r = 0.0);
        assert_eq!(exact_return(&m, &Policy::random(4, 2, &mut rng).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn exact_return_agrees_with_value_iteration() {
        let mut rng = RngStream::new(2, 0);
        for _ in 0..50 {
            let (ns, na) = (1 + rng.below(MAX_STATES), 1 + rng.below(MAX_ACTIONS));
            let m = TabularMdp::random(ns, na, 1.0, 0.9, &mut rng).unwrap();
            let p = Policy::random(ns, na, &mut rng).unwrap();
            assert!(close(exact_return(&m, &p).unwrap(), value_iteration(&m, &p), 1e-10));
        }
    }

    fn draw(p: &[f64], rng: &mut RngStream) -> usize {
        let u = rng.uniform();
        let mut c = 0.0;
        for (i, &w) in p.iter().enumerate() {
            c += w;
            if u < c {
                return i;
            }
        }
        p.len() - 1
    }

    #[test]
    fn exact_return_agrees_with_monte_carlo() {
        let mut rng = RngStream::new(3, 0);
        let m = TabularMdp::random(3, 2, 1.0, 0.9, &mut rng).unwrap();
        let p = Policy::random(3, 2, &mut rng).unwrap();
        // 10⁶ steps: 10⁴ episodes truncated at 100 steps (γ¹⁰⁰ ≈ 2.7e-5).
        let (episodes, len) = (10_000, 100);
        let mut returns = Vec::with_capacity(episodes);
        for _ in 0..episodes {
            let mut s = draw(&m.rho0, &mut rng);
            let (mut g, mut disc) = (0.0, 1.0);
            for _ in 0..len {
                let a = draw(p.row(s), &mut rng);
                g += disc * m.r[s * m.n_actions + a];
                disc *= m.gamma;
                s = draw(m.row(s, a), &mut rng);
            }
            returns.push(g);
        }
        let n = episodes as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let se = (returns.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        let exact = exact_return(&m, &p).unwrap();
        assert!((mean - exact).abs() <= 3.0 * se + m.gamma.powi(len as i32) * m.r_max / (1.0 - m.gamma), "{mean} ± {se} vs {exact}");
    }

    #[test]
    fn mdp_validation() {
        let mut rng = RngStream::new(4, 0);
        let m = TabularMdp::random(2, 2, 1.0, 0.9, &mut rng).unwrap();
        let mut bad = m.clone();
        bad.t[0] += 0.1;
        assert!(bad.validate().is_err());
        let mut bad = m.clone();
        bad.r[0] = 2.0;
        assert!(bad.validate().is_err());
        assert!(exact_return(&m, &Policy::random(3, 2, &mut rng).unwrap()).is_err());
    }

    #[test]
    fn perf_bound_identical_pair_is_zero() {
        let mut rng = RngStream::new(5, 0);
        let m = TabularMdp::random(4, 3, 1.0, 0.9, &mut rng).unwrap();
        let p = Policy::random(4, 3, &mut rng).unwrap();
        assert_eq!(exact_return(&m, &p).unwrap() - exact_return(&m.mix(&m, 0.5).unwrap(), &p).unwrap(), 0.0);
        let b = BoundInputs { r: 1.0, gamma: 0.9, ..BoundInputs::default() };
        assert_eq!(lemma_perf_bound(&b), 0.0);
    }

    #[test]
    fn perf_bound_holds_on_random_instances() {
        let r = verify_perf_bound(500, &PerfSettings::default(), &mut RngStream::new(6, 0)).unwrap();
        assert_eq!(r.summary.violations, 0);
        assert_eq!(r.trials.len(), 500);
        assert!(r.trials.iter().all(|t| t.n_states <= 5 && t.n_actions <= 3));
        assert!(r.summary.min_slack.unwrap() >= 0.0);
    }

    #[test]
    fn marginal_identical_chains_have_zero_tv() {
        let c = MarkovChain::random(3, &mut RngStream::new(7, 0)).unwrap();
        let r = verify_marginal_tv(&c, &c, 10).unwrap();
        assert!(r.tv.iter().all(|&v| v == 0.0));
        assert_eq!(r.delta_kl, 0.0);
        assert_eq!(r.violations_kl(), 0);
    }

    #[test]
    fn marginal_rejects_different_starts() {
        let mut rng = RngStream::new(8, 0);
        let a = MarkovChain::random(2, &mut rng).unwrap();
        let b = MarkovChain::random(2, &mut rng).unwrap();
        assert!(verify_marginal_tv(&a, &b, 3).is_err());
    }

    #[test]
    fn marginal_one_step_tv_matches_hand_computation() {
        let rho = vec![0.5, 0.5];
        let a = MarkovChain::new(vec![0.5, 0.5, 0.5, 0.5], rho.clone()).unwrap();
        let b = MarkovChain::new(vec![0.6, 0.4, 0.6, 0.4], rho).unwrap();
        let r = verify_marginal_tv(&a, &b, 1).unwrap();
        assert!(close(r.tv[1], 0.1, 1e-15));
        assert!(close(r.delta_tv, 0.1, 1e-15));
        // KL(0.5,0.5 ‖ 0.6,0.4) ≈ 0.0204 < 0.1: the KL premise does not bound one-step TV.
        assert!(r.delta_kl < r.tv[1]);
        assert_eq!(r.violations_kl(), 1);
        assert_eq!(r.violations_tv(), 0);
    }

    #[test]
    fn marginal_tv_premise_always_holds() {
        let s = verify_marginal_tv_trials(200, 2, 50, &mut RngStream::new(9, 0)).unwrap();
        assert_eq!(s.tv_premise.violations, 0);
        assert_eq!(s.kl_premise.trials, 200);
    }

    #[test]
    fn representation_bounds_hold_for_small_perturbations() {
        let r = verify_representation_bounds(200, 0.01, &mut RngStream::new(10, 0)).unwrap();
        assert_eq!(r.dynamics.violations, 0);
        assert_eq!(r.policy.violations, 0);
        let zero = verify_representation_bounds(200, 0.0, &mut RngStream::new(10, 0)).unwrap();
        assert!(zero.dynamics.min_slack.unwrap().abs() <= 1e-15);
        assert!(zero.policy.min_slack.unwrap().abs() <= 1e-15);
    }

    #[test]
    fn representation_slack_shrinks_with_eps() {
        let mean = |e: f64| {
            let r = verify_representation_bounds(400, e, &mut RngStream::new(11, 0)).unwrap();
            (r.dynamics.mean_slack.unwrap(), r.policy.mean_slack.unwrap())
        };
        let (a, b, c) = (mean(0.01), mean(0.001), mean(0.0001));
        assert!(a.0 > b.0 && b.0 > c.0);
        assert!(a.1 > b.1 && b.1 > c.1);
    }

    #[test]
    fn gaussian_shift_tv_reference_values() {
        // 2Φ(0.5) − 1 = erf(0.5/√2).
        assert!(close(gaussian_shift_tv(1.0, 1.0), 0.382_924_922_548_026, 1e-14));
        assert!(close(gaussian_shift_tv(6.0, 1.0), 0.997_300_203_936_740, 1e-14));
        assert_eq!(gaussian_shift_tv(0.0, 0.3), 0.0);
    }

    #[test]
    fn constant_estimates() {
        let grid: Vec<Vec<f64>> = (0..11).map(|i| vec![i as f64 / 10.0]).collect();
        let lin = |x: &[f64]| vec![2.0 * x[0] + 1.0];
        assert!(close(estimate_sensitivity(&lin, &grid, 1e-5).unwrap(), 2.0, 1e-6));
        let constant = |_: &[f64]| vec![0.3, 0.7];
        assert_eq!(estimate_sensitivity(&constant, &grid, 1e-5).unwrap(), 0.0);
        let bad = |x: &[f64]| vec![if x[0] > 0.5 { f64::NAN } else { 0.0 }];
        assert!(estimate_sensitivity(&bad, &grid, 1e-5).is_err());

        let mut rng = RngStream::new(12, 0);
        let truth = TabularMdp::random(3, 2, 1.0, 0.9, &mut rng).unwrap();
        let heldout: Vec<(usize, usize, usize)> = (0..600).map(|k| (k % 3, (k / 3) % 2, draw(truth.row(k % 3, (k / 3) % 2), &mut rng))).collect();
        let mut perfect = truth.clone();
        let mut counts = vec![0.0; 18];
        for &(s, a, s2) in &heldout {
            counts[(s * 2 + a) * 3 + s2] += 1.0;
        }
        for (row, c) in perfect.t.chunks_mut(3).zip(counts.chunks(3)) {
            let n: f64 = c.iter().sum();
            row.iter_mut().zip(c).for_each(|(x, y)| *x = y / n);
        }
        assert!(empirical_model_tv(&perfect, &heldout).unwrap() < 1e-15);
        assert!(empirical_model_tv(&truth, &heldout).unwrap() > 0.0);

        let rep = RepresentationMap { f: vec![0, 1, 1], delta_s: vec![0.01, -0.02, 0.0], n_latent: 2 };
        rep.validate(0.02).unwrap();
        assert!(rep.validate(0.01).is_err());
        let c = estimate_constants(&lin, &constant, &grid, &perfect, &heldout, &rep).unwrap();
        assert!(close(c.c_t, 2.0, 1e-6) && c.c_pi == 0.0 && c.eps_s == 0.02);
    }

    #[test]
    fn report_is_reproducible_and_empty_at_zero_trials() {
        let cfg = VerifyConfig::default().with_trials(20);
        let a = serde_json::to_string(&verify_all(&cfg, 3).unwrap()).unwrap();
        let b = serde_json::to_string(&verify_all(&cfg, 3).unwrap()).unwrap();
        assert_eq!(a, b);
        let empty = verify_all(&VerifyConfig::default().with_trials(0), 3).unwrap();
        assert_eq!(empty.violations(), 0);
        assert_eq!(empty.performance.min_slack, None);
        assert_eq!(empty.summary_lines().len(), 5);
    }
}
