//! Concrete environments: multi-robot path planning on a layered DAG and
//! discretized wireless power control. Also the name registry that turns a
//! serialized [`RewardSpec`] back into a reward function.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    ConstantReward, FactoredModel, InitialDistribution, Kernel, RewardFn, RewardSpec, TabularReward, ZeroReward,
};
use crate::netgraph::{AgentGraph, GraphSpec};

/// Directed acyclic location graph. Successor lists are ordered
/// (upper edge first); action `k >= 1` follows the `k`-th edge.
#[derive(Debug, Clone, PartialEq)]
pub struct PathStructure {
    names: Vec<String>,
    successors: Vec<Vec<usize>>,
    destination: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathStructureSpec {
    pub locations: Vec<String>,
    /// `successors[k]` lists the names reachable from `locations[k]`.
    pub successors: Vec<Vec<String>>,
    pub destination: String,
}

impl Default for PathStructureSpec {
    fn default() -> Self {
        PathStructure::default_layout().to_spec()
    }
}

impl PathStructure {
    pub fn new(names: Vec<String>, successors: Vec<Vec<usize>>, destination: usize) -> Result<Self> {
        let n = names.len();
        if n == 0 {
            return Err(Error::InvalidModel("path structure has no locations".into()));
        }
        if successors.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: successors.len() });
        }
        if destination >= n {
            return Err(Error::IndexOutOfRange { index: destination, n });
        }
        for (k, succ) in successors.iter().enumerate() {
            if succ.len() > 2 {
                return Err(Error::InvalidModel(format!("location {} has out-degree {}", names[k], succ.len())));
            }
            for &t in succ {
                if t >= n {
                    return Err(Error::IndexOutOfRange { index: t, n });
                }
                if t == k {
                    return Err(Error::InvalidModel(format!("location {} has an edge to itself", names[k])));
                }
            }
        }
        for (k, name) in names.iter().enumerate() {
            if names[..k].contains(name) {
                return Err(Error::InvalidModel(format!("duplicate location {name}")));
            }
        }
        let ps = PathStructure { names, successors, destination };
        ps.check_acyclic()?;
        ps.check_reaches_destination()?;
        Ok(ps)
    }

    /// Layers b1..b5, c1..c4, d1..d3, e with `b_k -> {c_{k-1}, c_k}` and
    /// `c_k -> {d_{k-1}, d_k}` clipped to existing labels, `d_k -> e`.
    pub fn default_layout() -> Self {
        let layers = [5usize, 4, 3, 1];
        let prefixes = ["b", "c", "d", "e"];
        let mut names = Vec::new();
        let mut starts = Vec::new();
        for (layer, &size) in layers.iter().enumerate() {
            starts.push(names.len());
            for k in 1..=size {
                if layers[layer] == 1 {
                    names.push(prefixes[layer].to_string());
                } else {
                    names.push(format!("{}{k}", prefixes[layer]));
                }
            }
        }
        let mut successors = vec![Vec::new(); names.len()];
        for layer in 0..layers.len() - 1 {
            let next = layers[layer + 1];
            for k in 1..=layers[layer] {
                let succ = &mut successors[starts[layer] + k - 1];
                for target in [k.wrapping_sub(1), k] {
                    if (1..=next).contains(&target) && !succ.contains(&(starts[layer + 1] + target - 1)) {
                        succ.push(starts[layer + 1] + target - 1);
                    }
                }
                if next == 1 {
                    succ.clear();
                    succ.push(starts[layer + 1]);
                }
            }
        }
        let destination = names.len() - 1;
        PathStructure::new(names, successors, destination).expect("default layout is valid")
    }

    pub fn from_spec(spec: &PathStructureSpec) -> Result<Self> {
        let names = spec.locations.clone();
        let successors = spec
            .successors
            .iter()
            .map(|list| list.iter().map(|name| Self::lookup(&names, name)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let destination = Self::lookup(&names, &spec.destination)?;
        PathStructure::new(names, successors, destination)
    }

    pub fn to_spec(&self) -> PathStructureSpec {
        PathStructureSpec {
            locations: self.names.clone(),
            successors: self
                .successors
                .iter()
                .map(|s| s.iter().map(|&t| self.names[t].clone()).collect())
                .collect(),
            destination: self.names[self.destination].clone(),
        }
    }

    fn lookup(names: &[String], name: &str) -> Result<usize> {
        names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownLocation(name.to_string()))
    }

    pub fn location(&self, name: &str) -> Result<usize> {
        Self::lookup(&self.names, name)
    }

    pub fn name(&self, loc: usize) -> &str {
        &self.names[loc]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn destination(&self) -> usize {
        self.destination
    }

    pub fn successors(&self, loc: usize) -> &[usize] {
        &self.successors[loc]
    }

    fn check_acyclic(&self) -> Result<()> {
        // 0 unvisited, 1 on stack, 2 done
        let mut mark = vec![0u8; self.len()];
        fn visit(ps: &PathStructure, k: usize, mark: &mut [u8]) -> Result<()> {
            match mark[k] {
                1 => return Err(Error::InvalidModel(format!("path structure has a cycle through {}", ps.names[k]))),
                2 => return Ok(()),
                _ => {}
            }
            mark[k] = 1;
            for &t in &ps.successors[k] {
                visit(ps, t, mark)?;
            }
            mark[k] = 2;
            Ok(())
        }
        for k in 0..self.len() {
            visit(self, k, &mut mark)?;
        }
        Ok(())
    }

    fn check_reaches_destination(&self) -> Result<()> {
        let mut reaches = vec![false; self.len()];
        reaches[self.destination] = true;
        let mut changed = true;
        while changed {
            changed = false;
            for k in 0..self.len() {
                if !reaches[k] && self.successors[k].iter().any(|&t| reaches[t]) {
                    reaches[k] = true;
                    changed = true;
                }
            }
        }
        match reaches.iter().position(|&r| !r) {
            Some(k) => Err(Error::InvalidModel(format!("{} cannot reach {}", self.names[k], self.names[self.destination]))),
            None => Ok(()),
        }
    }

    /// Action 0 stays, action `k` takes the `k`-th outgoing edge, and any
    /// action beyond the out-degree stays.
    pub fn transition(&self, loc: usize, action: usize) -> usize {
        match action {
            0 => loc,
            k => self.successors[loc].get(k - 1).copied().unwrap_or(loc),
        }
    }

    /// Transition table as lists, `successor[loc][action]`.
    pub fn transition_table(&self, n_actions: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .map(|loc| (0..n_actions).map(|a| self.transition(loc, a)).collect())
            .collect()
    }
}

pub const PATH_ACTIONS: usize = 3;

/// Time cost plus a collision penalty for sharing a movement with
/// neighbours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathReward {
    /// `next[loc][action]`
    pub next: Vec<Vec<usize>>,
    pub destination: usize,
    pub n_agents: usize,
    pub r_eps: f64,
    pub collision_weight: f64,
    #[serde(default)]
    pub terminal_zero_reward: bool,
}

impl RewardFn for PathReward {
    fn name(&self) -> &str {
        "path_planning"
    }

    fn reward(&self, agent: usize, scope: &[usize], states: &[usize], actions: &[usize]) -> f64 {
        let me = scope.binary_search(&agent).expect("agent in its own scope");
        let from = states[me];
        if self.terminal_zero_reward && from == self.destination {
            return 0.0;
        }
        let to = self.next[from][actions[me]];
        if to == from {
            return -self.r_eps;
        }
        let shared = (0..scope.len())
            .filter(|&k| k != me && states[k] == from && self.next[states[k]][actions[k]] == to)
            .count();
        -self.r_eps - self.collision_weight * shared as f64 / self.n_agents as f64
    }

    fn bound_hint(&self) -> Option<f64> {
        Some(self.r_eps + self.collision_weight)
    }

    fn params(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plain data")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathPlanningSpec {
    pub n: usize,
    pub starts: Vec<String>,
    pub gamma: f64,
    pub r_eps: f64,
    pub collision_weight: f64,
    pub terminal_zero_reward: bool,
    pub structure: PathStructureSpec,
}

impl Default for PathPlanningSpec {
    fn default() -> Self {
        let starts = (0..10).map(|k| format!("b{}", k % 5 + 1)).collect();
        PathPlanningSpec {
            n: 10,
            starts,
            gamma: 0.9,
            r_eps: 0.5,
            collision_weight: 0.5,
            terminal_zero_reward: false,
            structure: PathStructureSpec::default(),
        }
    }
}

pub fn build_path_env(spec: &PathPlanningSpec, comm: &AgentGraph) -> Result<FactoredModel> {
    if spec.starts.len() != spec.n {
        return Err(Error::Config(format!("{} agents but {} start locations", spec.n, spec.starts.len())));
    }
    if comm.n() != spec.n {
        return Err(Error::Config(format!("{} agents but communication graph has {}", spec.n, comm.n())));
    }
    if !(spec.r_eps > 0.0) {
        return Err(Error::Config(format!("time cost must be positive, got {}", spec.r_eps)));
    }
    if !(spec.collision_weight >= 0.0) {
        return Err(Error::Config(format!("collision weight must be nonnegative, got {}", spec.collision_weight)));
    }
    let ps = PathStructure::from_spec(&spec.structure)?;
    let starts = spec.starts.iter().map(|s| ps.location(s)).collect::<Result<Vec<_>>>()?;
    let kernel = Kernel::deterministic(ps.len(), PATH_ACTIONS, |s, a| ps.transition(s, a));
    let reward = PathReward {
        next: ps.transition_table(PATH_ACTIONS),
        destination: ps.destination(),
        n_agents: spec.n,
        r_eps: spec.r_eps,
        collision_weight: spec.collision_weight,
        terminal_zero_reward: spec.terminal_zero_reward,
    };
    FactoredModel::new(
        comm.clone(),
        vec![kernel; spec.n],
        Arc::new(reward),
        1,
        InitialDistribution::Fixed(starts),
        spec.gamma,
    )
}

/// Actions of the power-control environment.
pub const POWER_KEEP: usize = 0;
pub const POWER_DECREASE: usize = 1;
pub const POWER_INCREASE: usize = 2;

/// `log(1 + p_i g_ii / (sum_{j in N_i \ i} p_j g_ij + sigma_i)) - u_i p_i`,
/// with power equal to the state label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerReward {
    pub gains: Vec<Vec<f64>>,
    pub noise: Vec<f64>,
    pub cost: Vec<f64>,
    pub levels: usize,
}

impl RewardFn for PowerReward {
    fn name(&self) -> &str {
        "power_control"
    }

    fn reward(&self, agent: usize, scope: &[usize], states: &[usize], _actions: &[usize]) -> f64 {
        let mut interference = self.noise[agent];
        let mut own = 0.0;
        for (k, &j) in scope.iter().enumerate() {
            let p = states[k] as f64;
            if j == agent {
                own = p;
            } else {
                interference += p * self.gains[agent][j];
            }
        }
        (1.0 + own * self.gains[agent][agent] / interference).ln() - self.cost[agent] * own
    }

    fn bound_hint(&self) -> Option<f64> {
        let p_max = (self.levels - 1) as f64;
        (0..self.noise.len())
            .map(|i| (1.0 + p_max * self.gains[i][i] / self.noise[i]).ln().max(self.cost[i] * p_max))
            .reduce(f64::max)
    }

    fn params(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plain data")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerControlSpec {
    pub n: usize,
    /// Number of power levels, `p_max + 1`.
    pub levels: usize,
    /// Full gain matrix; when absent, `direct_gain` on the diagonal and
    /// `cross_gain` between graph neighbours.
    pub gains: Option<Vec<Vec<f64>>>,
    pub direct_gain: f64,
    pub cross_gain: f64,
    pub noise: f64,
    pub cost: f64,
    pub gamma: f64,
    pub initial_level: usize,
}

impl Default for PowerControlSpec {
    fn default() -> Self {
        PowerControlSpec {
            n: 10,
            levels: 4,
            gains: None,
            direct_gain: 1.0,
            cross_gain: 0.2,
            noise: 0.5,
            cost: 0.1,
            gamma: 0.9,
            initial_level: 0,
        }
    }
}

pub fn build_power_env(
    levels: usize,
    gains: Vec<Vec<f64>>,
    noise: Vec<f64>,
    cost: Vec<f64>,
    comm: &AgentGraph,
    initial: InitialDistribution,
    gamma: f64,
) -> Result<FactoredModel> {
    let n = comm.n();
    if levels == 0 {
        return Err(Error::EmptySpace { agent: 0, what: "state" });
    }
    for len in [gains.len(), noise.len(), cost.len()] {
        if len != n {
            return Err(Error::DimensionMismatch { expected: n, got: len });
        }
    }
    if let Some(row) = gains.iter().find(|r| r.len() != n) {
        return Err(Error::DimensionMismatch { expected: n, got: row.len() });
    }
    if gains.iter().flatten().any(|&g| !(g >= 0.0)) {
        return Err(Error::InvalidModel("channel gains must be nonnegative".into()));
    }
    if let Some((agent, &value)) = noise.iter().enumerate().find(|(_, &s)| !(s > 0.0)) {
        return Err(Error::NonPositiveNoise { agent, value });
    }
    let top = levels - 1;
    let kernel = Kernel::deterministic(levels, 3, |p, a| match a {
        POWER_DECREASE => p.saturating_sub(1),
        POWER_INCREASE => (p + 1).min(top),
        _ => p,
    });
    let reward = PowerReward { gains, noise, cost, levels };
    FactoredModel::new(comm.clone(), vec![kernel; n], Arc::new(reward), 1, initial, gamma)
}

pub fn build_power_env_from_spec(spec: &PowerControlSpec, comm: &AgentGraph) -> Result<FactoredModel> {
    let n = spec.n;
    if comm.n() != n {
        return Err(Error::Config(format!("{n} agents but communication graph has {}", comm.n())));
    }
    if spec.initial_level >= spec.levels {
        return Err(Error::Config(format!("initial level {} with {} levels", spec.initial_level, spec.levels)));
    }
    let gains = match &spec.gains {
        Some(g) => g.clone(),
        None => (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            spec.direct_gain
                        } else if comm.is_neighbor(i, j) {
                            spec.cross_gain
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect(),
    };
    build_power_env(
        spec.levels,
        gains,
        vec![spec.noise; n],
        vec![spec.cost; n],
        comm,
        InitialDistribution::Fixed(vec![spec.initial_level; n]),
        spec.gamma,
    )
}

/// Reconstructs a reward function from its registered name and parameters.
pub fn resolve_reward(spec: &RewardSpec, graph: &AgentGraph) -> Result<Arc<dyn RewardFn>> {
    fn parse<T: serde::de::DeserializeOwned>(spec: &RewardSpec) -> Result<T> {
        serde_json::from_value(spec.params.clone())
            .map_err(|e| Error::Config(format!("reward {} parameters: {e}", spec.name)))
    }
    let n = graph.n();
    let check_len = |len: usize| -> Result<()> {
        if len != n {
            return Err(Error::DimensionMismatch { expected: n, got: len });
        }
        Ok(())
    };
    let reward: Arc<dyn RewardFn> = match spec.name.as_str() {
        "zero" => Arc::new(ZeroReward),
        "constant" => {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct P {
                value: f64,
            }
            Arc::new(ConstantReward(parse::<P>(spec)?.value))
        }
        "table" => {
            let t: TabularReward = parse(spec)?;
            check_len(t.tables.len())?;
            Arc::new(t)
        }
        "path_planning" => {
            let r: PathReward = parse(spec)?;
            check_len(r.n_agents)?;
            Arc::new(r)
        }
        "power_control" => {
            let r: PowerReward = parse(spec)?;
            check_len(r.noise.len())?;
            Arc::new(r)
        }
        other => return Err(Error::Config(format!("unknown reward {other:?}"))),
    };
    Ok(reward)
}

/// Environment block of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "env", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    PathPlanning {
        #[serde(default)]
        overrides: PathPlanningSpec,
    },
    PowerControl {
        #[serde(default)]
        overrides: PowerControlSpec,
    },
    /// A model given in full.
    Tabular { model: crate::model::ModelSpec },
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::PathPlanning { overrides: PathPlanningSpec::default() }
    }
}

impl EnvConfig {
    pub fn agent_count(&self) -> usize {
        match self {
            EnvConfig::PathPlanning { overrides } => overrides.n,
            EnvConfig::PowerControl { overrides } => overrides.n,
            EnvConfig::Tabular { model } => model.graph.n,
        }
    }

    /// Builds the model; `comm` defaults to a ring over the agents.
    pub fn build(&self, comm: Option<&GraphSpec>) -> Result<FactoredModel> {
        let graph = match comm {
            Some(g) => AgentGraph::from_spec(g)?,
            None => AgentGraph::ring(self.agent_count())?,
        };
        match self {
            EnvConfig::PathPlanning { overrides } => build_path_env(overrides, &graph),
            EnvConfig::PowerControl { overrides } => build_power_env_from_spec(overrides, &graph),
            EnvConfig::Tabular { model } => {
                if comm.is_some() {
                    return Err(Error::Config("tabular models carry their own graph".into()));
                }
                FactoredModel::from_spec(model)
            }
        }
    }
}
