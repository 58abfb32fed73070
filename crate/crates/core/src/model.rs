//! Factored networked MDP: per-agent finite spaces, independent local
//! kernels `P_i(s_i' | s_i, a_i)`, and rewards that only see a hop
//! neighbourhood of radius `reward_radius`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{AgentGraph, GraphSpec};

pub type GlobalState = Vec<usize>;
pub type GlobalAction = Vec<usize>;

const ROW_TOL: f64 = 1e-12;
const MAX_REWARD_DOMAIN: u128 = 20_000_000;

/// Local reward of one agent. `scope` is the sorted reward neighbourhood of
/// `agent`; `states[k]` and `actions[k]` belong to `scope[k]`.
pub trait RewardFn: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn reward(&self, agent: usize, scope: &[usize], states: &[usize], actions: &[usize]) -> f64;

    /// Analytic bound on `|r_i|` that replaces enumeration in
    /// [`FactoredModel::validate`].
    fn bound_hint(&self) -> Option<f64> {
        None
    }

    /// Parameter block used when the model is serialized.
    fn params(&self) -> serde_json::Value;
}

/// Transition table of one agent, row-major `[state][action][next]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl Kernel {
    pub fn from_rows(rows: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, |r| r.len());
        let mut probs = Vec::with_capacity(n_states * n_actions * n_states);
        for (s, by_action) in rows.into_iter().enumerate() {
            if by_action.len() != n_actions {
                return Err(Error::InvalidModel(format!(
                    "state {s} has {} action rows, expected {n_actions}",
                    by_action.len()
                )));
            }
            for row in by_action {
                if row.len() != n_states {
                    return Err(Error::DimensionMismatch { expected: n_states, got: row.len() });
                }
                probs.extend(row);
            }
        }
        Ok(Kernel { n_states, n_actions, probs })
    }

    /// One-hot rows from a deterministic successor function.
    pub fn deterministic(n_states: usize, n_actions: usize, next: impl Fn(usize, usize) -> usize) -> Self {
        let mut probs = vec![0.0; n_states * n_actions * n_states];
        for s in 0..n_states {
            for a in 0..n_actions {
                probs[(s * n_actions + a) * n_states + next(s, a)] = 1.0;
            }
        }
        Kernel { n_states, n_actions, probs }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.probs[start..start + self.n_states]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.row(s, a)[next]
    }

    pub fn to_rows(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.n_states)
            .map(|s| (0..self.n_actions).map(|a| self.row(s, a).to_vec()).collect())
            .collect()
    }
}

/// Inverse-CDF draw from a discrete distribution using one uniform.
pub(crate) fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = k;
            if u < acc {
                return k;
            }
        }
    }
    last_positive
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDistribution {
    /// Deterministic start state.
    Fixed(GlobalState),
    /// Independent per-agent start distributions.
    Product(Vec<Vec<f64>>),
    /// Explicit distribution over global states.
    Joint(Vec<WeightedState>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedState {
    pub state: GlobalState,
    pub prob: f64,
}

impl InitialDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> GlobalState {
        match self {
            InitialDistribution::Fixed(s) => s.clone(),
            InitialDistribution::Product(marginals) => marginals
                .iter()
                .map(|p| sample_index(p, rng.gen::<f64>()))
                .collect(),
            InitialDistribution::Joint(entries) => {
                let probs: Vec<f64> = entries.iter().map(|e| e.prob).collect();
                entries[sample_index(&probs, rng.gen::<f64>())].state.clone()
            }
        }
    }

    /// Probability of the global state `s`.
    pub fn prob(&self, s: &[usize]) -> f64 {
        match self {
            InitialDistribution::Fixed(start) => f64::from(u8::from(start.as_slice() == s)),
            InitialDistribution::Product(marginals) => {
                marginals.iter().zip(s).map(|(p, &si)| p.get(si).copied().unwrap_or(0.0)).product()
            }
            InitialDistribution::Joint(entries) => entries
                .iter()
                .filter(|e| e.state.as_slice() == s)
                .map(|e| e.prob)
                .sum(),
        }
    }

    /// Support as `(state, probability)` pairs with positive mass.
    pub fn support(&self, state_sizes: &[usize]) -> Vec<(GlobalState, f64)> {
        match self {
            InitialDistribution::Fixed(s) => vec![(s.clone(), 1.0)],
            InitialDistribution::Joint(entries) => entries
                .iter()
                .filter(|e| e.prob > 0.0)
                .map(|e| (e.state.clone(), e.prob))
                .collect(),
            InitialDistribution::Product(marginals) => {
                let mut out = vec![(Vec::new(), 1.0)];
                for (agent, p) in marginals.iter().enumerate() {
                    let mut next = Vec::new();
                    for (prefix, mass) in &out {
                        for si in 0..state_sizes[agent] {
                            let q = p.get(si).copied().unwrap_or(0.0);
                            if q > 0.0 {
                                let mut s = prefix.clone();
                                s.push(si);
                                next.push((s, mass * q));
                            }
                        }
                    }
                    out = next;
                }
                out
            }
        }
    }
}

#[derive(Clone)]
pub struct FactoredModel {
    graph: AgentGraph,
    kernels: Vec<Kernel>,
    reward: Arc<dyn RewardFn>,
    reward_radius: usize,
    reward_scopes: Vec<Vec<usize>>,
    initial: InitialDistribution,
    gamma: f64,
}

impl fmt::Debug for FactoredModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FactoredModel")
            .field("n", &self.n())
            .field("state_sizes", &self.state_sizes())
            .field("action_sizes", &self.action_sizes())
            .field("reward", &self.reward.name())
            .field("reward_radius", &self.reward_radius)
            .field("gamma", &self.gamma)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelDiagnostics {
    /// Bound `R` on `|r_i|` used by the estimator bound.
    pub reward_bound: f64,
    /// Largest `|r_i|` found by enumeration, when enumeration ran.
    pub reward_max_abs: Option<f64>,
    pub state_sizes: Vec<usize>,
    pub action_sizes: Vec<usize>,
}

/// Reusable buffers for reward evaluation.
#[derive(Debug, Default, Clone)]
pub struct RewardScratch {
    states: Vec<usize>,
    actions: Vec<usize>,
}

impl FactoredModel {
    pub fn new(
        graph: AgentGraph,
        kernels: Vec<Kernel>,
        reward: Arc<dyn RewardFn>,
        reward_radius: usize,
        initial: InitialDistribution,
        gamma: f64,
    ) -> Result<Self> {
        let n = graph.n();
        if kernels.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: kernels.len() });
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidModel(format!("discount {gamma} outside (0, 1)")));
        }
        if reward_radius == 0 {
            return Err(Error::InvalidModel("reward radius must be at least 1".into()));
        }
        for (agent, k) in kernels.iter().enumerate() {
            if k.n_states == 0 {
                return Err(Error::EmptySpace { agent, what: "state" });
            }
            if k.n_actions == 0 {
                return Err(Error::EmptySpace { agent, what: "action" });
            }
            for s in 0..k.n_states {
                for a in 0..k.n_actions {
                    let row = k.row(s, a);
                    let sum: f64 = row.iter().sum();
                    if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > ROW_TOL {
                        return Err(Error::KernelRowNotStochastic { agent, state: s, action: a, sum });
                    }
                }
            }
        }
        let sizes: Vec<usize> = kernels.iter().map(|k| k.n_states).collect();
        let check_state = |s: &[usize]| -> Result<()> {
            if s.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: s.len() });
            }
            for (agent, (&label, &size)) in s.iter().zip(&sizes).enumerate() {
                if label >= size {
                    return Err(Error::LabelOutOfRange { agent, label, size, what: "state" });
                }
            }
            Ok(())
        };
        match &initial {
            InitialDistribution::Fixed(s) => check_state(s)?,
            InitialDistribution::Product(marginals) => {
                if marginals.len() != n {
                    return Err(Error::DimensionMismatch { expected: n, got: marginals.len() });
                }
                for (agent, p) in marginals.iter().enumerate() {
                    if p.len() != sizes[agent] {
                        return Err(Error::DimensionMismatch { expected: sizes[agent], got: p.len() });
                    }
                    if (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 || p.iter().any(|&q| q < 0.0) {
                        return Err(Error::InvalidModel(format!("initial marginal of agent {agent} is not a distribution")));
                    }
                }
            }
            InitialDistribution::Joint(entries) => {
                for e in entries {
                    check_state(&e.state)?;
                }
                let total: f64 = entries.iter().map(|e| e.prob).sum();
                if (total - 1.0).abs() > 1e-9 || entries.iter().any(|e| e.prob < 0.0) {
                    return Err(Error::InvalidModel("initial distribution does not sum to 1".into()));
                }
            }
        }
        let reward_scopes = (0..n)
            .map(|i| graph.khop(i, reward_radius).map(|h| h.members))
            .collect::<Result<_>>()?;
        Ok(FactoredModel { graph, kernels, reward, reward_radius, reward_scopes, initial, gamma })
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn graph(&self) -> &AgentGraph {
        &self.graph
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn reward_radius(&self) -> usize {
        self.reward_radius
    }

    pub fn kernel(&self, agent: usize) -> &Kernel {
        &self.kernels[agent]
    }

    pub fn initial(&self) -> &InitialDistribution {
        &self.initial
    }

    pub fn reward_fn(&self) -> &Arc<dyn RewardFn> {
        &self.reward
    }

    /// Reward neighbourhood of `agent`, sorted.
    pub fn reward_scope(&self, agent: usize) -> &[usize] {
        &self.reward_scopes[agent]
    }

    pub fn state_sizes(&self) -> Vec<usize> {
        self.kernels.iter().map(|k| k.n_states).collect()
    }

    pub fn action_sizes(&self) -> Vec<usize> {
        self.kernels.iter().map(|k| k.n_actions).collect()
    }

    /// Same model, different start distribution.
    pub fn with_initial(&self, initial: InitialDistribution) -> Result<Self> {
        FactoredModel::new(
            self.graph.clone(),
            self.kernels.clone(),
            self.reward.clone(),
            self.reward_radius,
            initial,
            self.gamma,
        )
    }

    pub fn check_labels(&self, s: &[usize], a: &[usize]) -> Result<()> {
        let n = self.n();
        for v in [s, a] {
            if v.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: v.len() });
            }
        }
        for agent in 0..n {
            let k = &self.kernels[agent];
            if s[agent] >= k.n_states {
                return Err(Error::LabelOutOfRange { agent, label: s[agent], size: k.n_states, what: "state" });
            }
            if a[agent] >= k.n_actions {
                return Err(Error::LabelOutOfRange { agent, label: a[agent], size: k.n_actions, what: "action" });
            }
        }
        Ok(())
    }

    /// Computes the reward bound `R`. Rewards are enumerated over each
    /// agent's restricted domain unless the reward function supplies a hint.
    pub fn validate(&self) -> Result<ModelDiagnostics> {
        let hint = self.reward.bound_hint();
        let reward_max_abs = match hint {
            Some(_) => None,
            None => Some(self.enumerate_reward_max_abs()?),
        };
        Ok(ModelDiagnostics {
            reward_bound: hint.or(reward_max_abs).unwrap_or(0.0),
            reward_max_abs,
            state_sizes: self.state_sizes(),
            action_sizes: self.action_sizes(),
        })
    }

    /// `max_i max |r_i|` by exhaustive enumeration of restricted domains.
    pub fn enumerate_reward_max_abs(&self) -> Result<f64> {
        let mut best = 0.0_f64;
        for agent in 0..self.n() {
            let scope = self.reward_scope(agent);
            let radices: Vec<usize> = scope
                .iter()
                .map(|&j| self.kernels[j].n_states * self.kernels[j].n_actions)
                .collect();
            let size: u128 = radices.iter().map(|&r| r as u128).product();
            if size > MAX_REWARD_DOMAIN {
                return Err(Error::RewardDomainTooLarge { agent, size });
            }
            let mut states = vec![0; scope.len()];
            let mut actions = vec![0; scope.len()];
            for code in 0..size as usize {
                let mut rest = code;
                for (k, &j) in scope.iter().enumerate() {
                    let pair = rest % radices[k];
                    rest /= radices[k];
                    states[k] = pair / self.kernels[j].n_actions;
                    actions[k] = pair % self.kernels[j].n_actions;
                }
                best = best.max(self.reward.reward(agent, scope, &states, &actions).abs());
            }
        }
        Ok(best)
    }

    /// Samples `s' ~ prod_i P_i(. | s_i, a_i)` with exactly one uniform per
    /// agent, in agent order.
    pub fn sample_transition<R: Rng + ?Sized>(&self, s: &[usize], a: &[usize], rng: &mut R) -> GlobalState {
        let mut next = vec![0; self.n()];
        self.sample_transition_into(s, a, rng, &mut next);
        next
    }

    pub fn sample_transition_into<R: Rng + ?Sized>(&self, s: &[usize], a: &[usize], rng: &mut R, out: &mut [usize]) {
        for (agent, k) in self.kernels.iter().enumerate() {
            out[agent] = sample_index(k.row(s[agent], a[agent]), rng.gen::<f64>());
        }
    }

    pub fn transition_prob(&self, s: &[usize], a: &[usize], next: &[usize]) -> f64 {
        self.kernels
            .iter()
            .enumerate()
            .map(|(i, k)| k.prob(s[i], a[i], next[i]))
            .product()
    }

    /// Reward of one agent; reads only its reward neighbourhood.
    pub fn reward_of(&self, agent: usize, s: &[usize], a: &[usize]) -> f64 {
        let mut scratch = RewardScratch::default();
        self.reward_of_with(agent, s, a, &mut scratch)
    }

    pub fn reward_of_with(&self, agent: usize, s: &[usize], a: &[usize], scratch: &mut RewardScratch) -> f64 {
        let scope = &self.reward_scopes[agent];
        scratch.states.clear();
        scratch.actions.clear();
        for &j in scope {
            scratch.states.push(s[j]);
            scratch.actions.push(a[j]);
        }
        self.reward.reward(agent, scope, &scratch.states, &scratch.actions)
    }

    pub fn rewards(&self, s: &[usize], a: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        self.rewards_into(s, a, &mut out, &mut RewardScratch::default());
        out
    }

    pub fn rewards_into(&self, s: &[usize], a: &[usize], out: &mut [f64], scratch: &mut RewardScratch) {
        for (agent, r) in out.iter_mut().enumerate() {
            *r = self.reward_of_with(agent, s, a, scratch);
        }
    }

    pub fn to_spec(&self) -> ModelSpec {
        ModelSpec {
            graph: self.graph.to_spec(),
            gamma: self.gamma,
            reward_radius: self.reward_radius,
            kernels: self.kernels.iter().map(Kernel::to_rows).collect(),
            initial: self.initial.clone(),
            reward: RewardSpec { name: self.reward.name().to_string(), params: self.reward.params() },
        }
    }

    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        let graph = AgentGraph::from_spec(&spec.graph)?;
        let kernels = spec
            .kernels
            .iter()
            .cloned()
            .map(Kernel::from_rows)
            .collect::<Result<Vec<_>>>()?;
        let reward = crate::envs::resolve_reward(&spec.reward, &graph)?;
        FactoredModel::new(graph, kernels, reward, spec.reward_radius, spec.initial.clone(), spec.gamma)
    }
}

/// JSON form of a small model. Rewards are referenced by registered name
/// plus a parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub graph: GraphSpec,
    pub gamma: f64,
    #[serde(default = "default_reward_radius")]
    pub reward_radius: usize,
    /// `kernels[agent][state][action][next_state]`
    pub kernels: Vec<Vec<Vec<Vec<f64>>>>,
    pub initial: InitialDistribution,
    pub reward: RewardSpec,
}

fn default_reward_radius() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub name: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroReward;

impl RewardFn for ZeroReward {
    fn name(&self) -> &str {
        "zero"
    }

    fn reward(&self, _: usize, _: &[usize], _: &[usize], _: &[usize]) -> f64 {
        0.0
    }

    fn params(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantReward(pub f64);

impl RewardFn for ConstantReward {
    fn name(&self) -> &str {
        "constant"
    }

    fn reward(&self, _: usize, _: &[usize], _: &[usize], _: &[usize]) -> f64 {
        self.0
    }

    fn params(&self) -> serde_json::Value {
        serde_json::json!({ "value": self.0 })
    }
}

/// Explicit per-agent reward tables over the restricted domain. The table
/// of agent `i` is indexed in mixed radix over its scope (first member
/// least significant), each digit being `s_j * |A_j| + a_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularReward {
    pub state_sizes: Vec<usize>,
    pub action_sizes: Vec<usize>,
    pub tables: Vec<Vec<f64>>,
}

impl RewardFn for TabularReward {
    fn name(&self) -> &str {
        "table"
    }

    fn reward(&self, agent: usize, scope: &[usize], states: &[usize], actions: &[usize]) -> f64 {
        let mut idx = 0;
        let mut stride = 1;
        for (k, &j) in scope.iter().enumerate() {
            idx += (states[k] * self.action_sizes[j] + actions[k]) * stride;
            stride *= self.state_sizes[j] * self.action_sizes[j];
        }
        self.tables[agent][idx]
    }

    fn params(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plain data")
    }
}

/// Random tabular instance: random stochastic kernels, rewards uniform in
/// `[-1, 1]`, product-uniform start distribution. Used by the oracle tests
/// and the `verify` suite.
pub fn random_tabular<R: Rng + ?Sized>(
    graph: AgentGraph,
    n_states: usize,
    n_actions: usize,
    reward_radius: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<FactoredModel> {
    let n = graph.n();
    let kernels = (0..n)
        .map(|_| {
            let rows = (0..n_states)
                .map(|_| {
                    (0..n_actions)
                        .map(|_| {
                            let raw: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>() + 0.05).collect();
                            let total: f64 = raw.iter().sum();
                            let mut row: Vec<f64> = raw.iter().map(|x| x / total).collect();
                            // exact unit sum
                            let head: f64 = row[..n_states - 1].iter().sum();
                            row[n_states - 1] = 1.0 - head;
                            row
                        })
                        .collect()
                })
                .collect();
            Kernel::from_rows(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let state_sizes = vec![n_states; n];
    let action_sizes = vec![n_actions; n];
    let tables = (0..n)
        .map(|i| {
            let size = graph.khop(i, reward_radius).map(|h| h.len()).unwrap_or(1);
            let entries = (n_states * n_actions).pow(size as u32);
            (0..entries).map(|_| rng.gen_range(-1.0..1.0)).collect()
        })
        .collect();
    let reward = TabularReward { state_sizes, action_sizes, tables };
    let initial = InitialDistribution::Product(vec![vec![1.0 / n_states as f64; n_states]; n]);
    FactoredModel::new(graph, kernels, Arc::new(reward), reward_radius, initial, gamma)
}
