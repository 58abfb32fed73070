//! Tabular coupled softmax policies.
//!
//! Agent `i` in state `s_i` plays action `a` with probability proportional to
//! `exp(w_self * theta_i[s_i, a] + w_nb / |N_{i,-i}| * sum_j theta_j[s_i, a])`,
//! the sum running over the other members of its `kappa_p`-hop neighbourhood.
//! With `kappa_p = 0` the logits are `theta_i[s_i, .]` alone.
//! Parameters use the flat index `s * |A| + a`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_index, FactoredModel};
use crate::netgraph::HopNeighborhood;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingSpec {
    #[serde(default = "default_self_weight")]
    pub self_weight: f64,
    #[serde(default = "default_neighbor_weight")]
    pub neighbor_weight_total: f64,
}

fn default_self_weight() -> f64 {
    0.9
}

fn default_neighbor_weight() -> f64 {
    0.1
}

impl Default for MixingSpec {
    fn default() -> Self {
        MixingSpec { self_weight: 0.9, neighbor_weight_total: 0.1 }
    }
}

/// Per-agent parameter dimensions and their offsets in a flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    total: usize,
}

impl ParamLayout {
    pub fn new(dims: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(dims.len());
        let mut total = 0;
        for &d in &dims {
            offsets.push(total);
            total += d;
        }
        ParamLayout { dims, offsets, total }
    }

    pub fn for_model(model: &FactoredModel) -> Self {
        let dims = model
            .state_sizes()
            .iter()
            .zip(model.action_sizes())
            .map(|(s, a)| s * a)
            .collect();
        Self::new(dims)
    }

    pub fn n(&self) -> usize {
        self.dims.len()
    }

    pub fn dim(&self, agent: usize) -> usize {
        self.dims[agent]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn range(&self, agent: usize) -> std::ops::Range<usize> {
        self.offsets[agent]..self.offsets[agent] + self.dims[agent]
    }
}

/// Read access to per-agent parameter vectors.
pub trait ParamAccess {
    fn params_of(&self, agent: usize) -> Option<&[f64]>;
}

/// Borrowed flat vector holding every agent's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ParamView<'a> {
    layout: &'a ParamLayout,
    data: &'a [f64],
}

impl<'a> ParamView<'a> {
    pub fn new(layout: &'a ParamLayout, data: &'a [f64]) -> Self {
        debug_assert_eq!(layout.total(), data.len());
        ParamView { layout, data }
    }
}

impl ParamAccess for ParamView<'_> {
    fn params_of(&self, agent: usize) -> Option<&[f64]> {
        (agent < self.layout.n()).then(|| &self.data[self.layout.range(agent)])
    }
}

/// Explicit subset of agents' parameters; anything absent is missing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseParams(pub BTreeMap<usize, Vec<f64>>);

impl ParamAccess for SparseParams {
    fn params_of(&self, agent: usize) -> Option<&[f64]> {
        self.0.get(&agent).map(Vec::as_slice)
    }
}

/// True parameters `theta_i` of every agent.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    layout: ParamLayout,
    data: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(layout: ParamLayout) -> Self {
        let data = vec![0.0; layout.total()];
        PolicyParams { layout, data }
    }

    pub fn from_agents(agents: Vec<Vec<f64>>) -> Self {
        let layout = ParamLayout::new(agents.iter().map(Vec::len).collect());
        PolicyParams { layout, data: agents.concat() }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn n(&self) -> usize {
        self.layout.n()
    }

    pub fn agent(&self, i: usize) -> &[f64] {
        &self.data[self.layout.range(i)]
    }

    pub fn agent_mut(&mut self, i: usize) -> &mut [f64] {
        let r = self.layout.range(i);
        &mut self.data[r]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn view(&self) -> ParamView<'_> {
        ParamView::new(&self.layout, &self.data)
    }

    pub fn to_agents(&self) -> Vec<Vec<f64>> {
        (0..self.n()).map(|i| self.agent(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl ParamAccess for PolicyParams {
    fn params_of(&self, agent: usize) -> Option<&[f64]> {
        (agent < self.n()).then(|| self.agent(agent))
    }
}

/// Local estimates: row `i` is agent `i`'s copy of every agent's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedParams {
    layout: ParamLayout,
    rows: Vec<Vec<f64>>,
}

impl EstimatedParams {
    pub fn zeros(layout: ParamLayout) -> Self {
        let rows = vec![vec![0.0; layout.total()]; layout.n()];
        EstimatedParams { layout, rows }
    }

    /// Every agent holding the exact true parameters.
    pub fn consistent(params: &PolicyParams) -> Self {
        EstimatedParams {
            layout: params.layout.clone(),
            rows: vec![params.data.clone(); params.n()],
        }
    }

    pub fn from_rows(layout: ParamLayout, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != layout.n() {
            return Err(Error::DimensionMismatch { expected: layout.n(), got: rows.len() });
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != layout.total()) {
            return Err(Error::DimensionMismatch { expected: layout.total(), got: bad.len() });
        }
        Ok(EstimatedParams { layout, rows })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn row(&self, i: usize) -> ParamView<'_> {
        ParamView::new(&self.layout, &self.rows[i])
    }

    pub fn row_flat(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn row_flat_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.rows[i]
    }

    /// `theta_hat^i_j`.
    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        &self.rows[i][self.layout.range(j)]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let r = self.layout.range(j);
        &mut self.rows[i][r]
    }
}

/// Which parameters the agents act with.
#[derive(Debug, Clone, Copy)]
pub enum Execution<'a> {
    /// Every agent uses the true parameters.
    True(&'a PolicyParams),
    /// Agent `i` uses its own estimate row.
    Estimates(&'a EstimatedParams),
}

impl<'a> Execution<'a> {
    pub fn view(&self, agent: usize) -> ParamView<'a> {
        match *self {
            Execution::True(p) => p.view(),
            Execution::Estimates(e) => e.row(agent),
        }
    }
}

/// The tabular coupled softmax policy class.
#[derive(Debug, Clone)]
pub struct SoftmaxPolicy {
    mixing: MixingSpec,
    radius: usize,
    hoods: Vec<HopNeighborhood>,
    n_states: Vec<usize>,
    n_actions: Vec<usize>,
}

impl SoftmaxPolicy {
    pub fn new(model: &FactoredModel, radius: usize, mixing: MixingSpec) -> Result<Self> {
        if !(mixing.self_weight >= 0.0 && mixing.neighbor_weight_total >= 0.0) {
            return Err(Error::Config(format!("mixing weights must be nonnegative: {mixing:?}")));
        }
        let n_states = model.state_sizes();
        let n_actions = model.action_sizes();
        if radius >= 1 && model.n() > 1 {
            let first = (n_states[0], n_actions[0]);
            if let Some(k) = (0..model.n()).find(|&k| (n_states[k], n_actions[k]) != first) {
                return Err(Error::HeterogeneousSpaces(format!(
                    "agent {k} has {}x{} labels, agent 0 has {}x{}",
                    n_states[k], n_actions[k], first.0, first.1
                )));
            }
        }
        Ok(SoftmaxPolicy { mixing, radius, hoods: model.graph().khop_all(radius), n_states, n_actions })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn mixing(&self) -> MixingSpec {
        self.mixing
    }

    pub fn n(&self) -> usize {
        self.hoods.len()
    }

    /// `N^{kappa_p}_i`.
    pub fn neighborhood(&self, i: usize) -> &HopNeighborhood {
        &self.hoods[i]
    }

    pub fn n_actions(&self, i: usize) -> usize {
        self.n_actions[i]
    }

    pub fn dim(&self, i: usize) -> usize {
        self.n_states[i] * self.n_actions[i]
    }

    /// Logit weight on `theta_i` and on each other neighbour's parameters.
    fn coefficients(&self, i: usize) -> (f64, f64) {
        if self.radius == 0 {
            return (1.0, 0.0);
        }
        let others = self.hoods[i].len() - 1;
        let per_other = if others == 0 { 0.0 } else { self.mixing.neighbor_weight_total / others as f64 };
        (self.mixing.self_weight, per_other)
    }

    /// Weight with which `theta_i` enters the logits of agent `j`.
    pub fn coupling(&self, i: usize, j: usize) -> f64 {
        let (own, other) = self.coefficients(j);
        if i == j {
            own
        } else if self.radius > 0 && self.hoods[j].contains(i) {
            other
        } else {
            0.0
        }
    }

    /// Per-score norm bound `B = max(w_self, w_nb) * sqrt(2)`.
    pub fn score_bound(&self) -> f64 {
        let c = if self.radius == 0 {
            1.0
        } else {
            self.mixing.self_weight.max(self.mixing.neighbor_weight_total)
        };
        c * std::f64::consts::SQRT_2
    }

    fn fetch<'p, P: ParamAccess + ?Sized>(&self, params: &'p P, j: usize, dim: usize) -> Result<&'p [f64]> {
        let theta = params.params_of(j).ok_or(Error::MissingNeighborParams(j))?;
        if theta.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: theta.len() });
        }
        Ok(theta)
    }

    pub fn action_probs<P: ParamAccess + ?Sized>(&self, i: usize, s_i: usize, params: &P) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_actions[i]];
        self.action_probs_into(i, s_i, params, &mut out)?;
        Ok(out)
    }

    /// Softmax over the mixed logits, computed with max-logit subtraction.
    pub fn action_probs_into<P: ParamAccess + ?Sized>(
        &self,
        i: usize,
        s_i: usize,
        params: &P,
        out: &mut [f64],
    ) -> Result<()> {
        let n_a = self.n_actions[i];
        let dim = self.dim(i);
        if out.len() != n_a {
            return Err(Error::DimensionMismatch { expected: n_a, got: out.len() });
        }
        if s_i >= self.n_states[i] {
            return Err(Error::LabelOutOfRange { agent: i, label: s_i, size: self.n_states[i], what: "state" });
        }
        let (own, other) = self.coefficients(i);
        let row = s_i * n_a..(s_i + 1) * n_a;
        let theta_i = self.fetch(params, i, dim)?;
        for (o, &x) in out.iter_mut().zip(&theta_i[row.clone()]) {
            *o = own * x;
        }
        if other > 0.0 {
            for j in self.hoods[i].without(i) {
                let theta_j = self.fetch(params, j, dim)?;
                for (o, &x) in out.iter_mut().zip(&theta_j[row.clone()]) {
                    *o += other * x;
                }
            }
        }
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
        Ok(())
    }

    pub fn log_prob<P: ParamAccess + ?Sized>(&self, j: usize, s_j: usize, a_j: usize, params: &P) -> Result<f64> {
        Ok(self.action_probs(j, s_j, params)?[a_j].ln())
    }

    /// `grad_{theta_i} log pi_j(a_j | s_j)`, a vector of `theta_i`'s dimension.
    pub fn score<P: ParamAccess + ?Sized>(
        &self,
        i: usize,
        j: usize,
        s_j: usize,
        a_j: usize,
        params: &P,
    ) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim(i)];
        let mut probs = vec![0.0; self.n_actions[j]];
        self.add_score(i, j, s_j, a_j, params, &mut probs, &mut out)?;
        Ok(out)
    }

    /// Adds `grad_{theta_i} log pi_j(a_j | s_j)` into `acc`. `probs` is scratch
    /// of length `|A_j|`.
    pub fn add_score<P: ParamAccess + ?Sized>(
        &self,
        i: usize,
        j: usize,
        s_j: usize,
        a_j: usize,
        params: &P,
        probs: &mut [f64],
        acc: &mut [f64],
    ) -> Result<()> {
        let c = self.coupling(i, j);
        if c == 0.0 {
            return Ok(());
        }
        if acc.len() != self.dim(i) {
            return Err(Error::DimensionMismatch { expected: self.dim(i), got: acc.len() });
        }
        self.action_probs_into(j, s_j, params, probs)?;
        let n_a = self.n_actions[j];
        let row = &mut acc[s_j * n_a..(s_j + 1) * n_a];
        for (a, (slot, &p)) in row.iter_mut().zip(probs.iter()).enumerate() {
            let indicator = if a == a_j { 1.0 } else { 0.0 };
            *slot += c * (indicator - p);
        }
        Ok(())
    }

    /// `sum_{j in N^{kappa_p}_i} grad_{theta_i} log pi_j(a_j | s_j)` evaluated
    /// with `params` (agent `i`'s estimate row). Reads `states[j]` and
    /// `actions[j]` only for `j` in `N^{kappa_p}_i`.
    pub fn g_hat<P: ParamAccess + ?Sized>(
        &self,
        i: usize,
        states: &[usize],
        actions: &[usize],
        params: &P,
    ) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim(i)];
        let mut probs = Vec::new();
        for &j in &self.hoods[i].members {
            probs.resize(self.n_actions[j], 0.0);
            self.add_score(i, j, states[j], actions[j], params, &mut probs, &mut out)?;
        }
        Ok(out)
    }

    /// Samples every agent's action, one uniform per agent in agent order.
    pub fn sample_joint_action<R: Rng + ?Sized>(
        &self,
        states: &[usize],
        execution: Execution<'_>,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let mut out = vec![0; states.len()];
        let mut probs = Vec::new();
        self.sample_joint_action_into(states, execution, rng, &mut probs, &mut out)?;
        Ok(out)
    }

    pub fn sample_joint_action_into<R: Rng + ?Sized>(
        &self,
        states: &[usize],
        execution: Execution<'_>,
        rng: &mut R,
        probs: &mut Vec<f64>,
        out: &mut [usize],
    ) -> Result<()> {
        for (i, a) in out.iter_mut().enumerate() {
            probs.resize(self.n_actions[i], 0.0);
            self.action_probs_into(i, states[i], &execution.view(i), probs)?;
            *a = sample_index(probs, rng.gen::<f64>());
        }
        Ok(())
    }
}

/// Saved parameters with enough header to reject a mismatched model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub n: usize,
    pub dims: Vec<usize>,
    pub kappa_p: usize,
    pub mixing: MixingSpec,
    pub params: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(params: &PolicyParams, kappa_p: usize, mixing: MixingSpec) -> Self {
        Checkpoint {
            n: params.n(),
            dims: params.layout().dims().to_vec(),
            kappa_p,
            mixing,
            params: params.to_agents(),
        }
    }

    /// Parameters, checked against the model's layout.
    pub fn to_params(&self, expected: &ParamLayout) -> Result<PolicyParams> {
        if self.n != expected.n() || self.params.len() != self.n {
            return Err(Error::DimensionMismatch { expected: expected.n(), got: self.params.len() });
        }
        for (i, p) in self.params.iter().enumerate() {
            if p.len() != expected.dim(i) || self.dims.get(i) != Some(&p.len()) {
                return Err(Error::DimensionMismatch { expected: expected.dim(i), got: p.len() });
            }
        }
        Ok(PolicyParams::from_agents(self.params.clone()))
    }
}
