//! Exact evaluators for small instances.
//!
//! A stationary policy of the tabular class makes agent `i`'s action depend
//! only on `s_i`, so under a fixed parameter vector the pairs `(s_i, a_i)`
//! evolve as independent Markov chains. The joint `(s, a)` chain is their
//! Kronecker product and any subset of agents forms an exact restricted
//! chain. Everything here is computed by truncated iteration on those
//! chains, never by sampling.

use crate::error::{Error, Result};
use crate::model::FactoredModel;
use crate::netgraph::HopNeighborhood;
use crate::policy::{EstimatedParams, Execution, ParamAccess, PolicyParams, SoftmaxPolicy};

/// Largest enumerated product space.
pub const MAX_JOINT: u128 = 100_000;
/// Truncation tolerance of value iteration.
pub const EPSILON: f64 = 1e-9;

/// `ceil(ln(eps (1 - gamma) / R) / ln gamma)`, at least 0.
pub fn truncation_horizon(gamma: f64, reward_bound: f64, eps: f64) -> usize {
    if reward_bound <= 0.0 {
        return 0;
    }
    let t = ((eps * (1.0 - gamma) / reward_bound).ln() / gamma.ln()).ceil();
    if t.is_finite() && t > 0.0 {
        t as usize
    } else {
        0
    }
}

/// Enumerated `(s, a)` configurations of a subset of agents. Mixed radix,
/// first member least significant, digit `s_j * |A_j| + a_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductSpace {
    members: Vec<usize>,
    n_actions: Vec<usize>,
    dims: Vec<usize>,
    strides: Vec<usize>,
    size: usize,
}

impl ProductSpace {
    pub fn new(model: &FactoredModel, members: Vec<usize>) -> Result<Self> {
        let n_actions: Vec<usize> = members.iter().map(|&j| model.kernel(j).n_actions()).collect();
        let dims: Vec<usize> = members
            .iter()
            .zip(&n_actions)
            .map(|(&j, &a)| model.kernel(j).n_states() * a)
            .collect();
        let mut strides = Vec::with_capacity(dims.len());
        let mut size: u128 = 1;
        for &d in &dims {
            strides.push(size as usize);
            size *= d as u128;
            if size > MAX_JOINT {
                return Err(Error::SpaceTooLarge(dims.iter().map(|&d| d as u128).product()));
            }
        }
        Ok(ProductSpace { members, n_actions, dims, strides, size: size as usize })
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Index of the restriction of a global `(s, a)`; reads members only.
    pub fn index_of(&self, s: &[usize], a: &[usize]) -> usize {
        self.members
            .iter()
            .enumerate()
            .map(|(k, &j)| (s[j] * self.n_actions[k] + a[j]) * self.strides[k])
            .sum()
    }

    /// Index from per-member labels, in member order.
    pub fn index_local(&self, s: &[usize], a: &[usize]) -> usize {
        (0..self.members.len())
            .map(|k| (s[k] * self.n_actions[k] + a[k]) * self.strides[k])
            .sum()
    }

    /// Writes the members' labels of configuration `x` into global vectors.
    pub fn decode_into(&self, x: usize, s: &mut [usize], a: &mut [usize]) {
        for (k, &j) in self.members.iter().enumerate() {
            let digit = (x / self.strides[k]) % self.dims[k];
            s[j] = digit / self.n_actions[k];
            a[j] = digit % self.n_actions[k];
        }
    }

    /// Applies a per-member `dims[k] x dims[k]` matrix along mode `k`.
    /// `forward` pushes a distribution (`out_v = sum_u in_u K[u][v]`);
    /// otherwise takes expectations (`out_u = sum_v K[u][v] in_v`).
    fn apply_mode(&self, k: usize, kernel: &[f64], input: &[f64], out: &mut [f64], forward: bool) {
        let m = self.dims[k];
        let stride = self.strides[k];
        let block = stride * m;
        let mut column = vec![0.0; m];
        for outer in (0..self.size).step_by(block) {
            for inner in 0..stride {
                let base = outer + inner;
                for (u, c) in column.iter_mut().enumerate() {
                    *c = input[base + u * stride];
                }
                for u in 0..m {
                    let mut acc = 0.0;
                    if forward {
                        for (v, &c) in column.iter().enumerate() {
                            acc += c * kernel[v * m + u];
                        }
                    } else {
                        for (v, &c) in column.iter().enumerate() {
                            acc += kernel[u * m + v] * c;
                        }
                    }
                    out[base + u * stride] = acc;
                }
            }
        }
    }
}

/// Values on a [`ProductSpace`].
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetTable {
    pub space: ProductSpace,
    pub values: Vec<f64>,
}

impl SubsetTable {
    /// Value at the restriction of a global `(s, a)`.
    pub fn at(&self, s: &[usize], a: &[usize]) -> f64 {
        self.values[self.space.index_of(s, a)]
    }

    /// Value from per-member labels in member order.
    pub fn at_local(&self, s: &[usize], a: &[usize]) -> f64 {
        self.values[self.space.index_local(s, a)]
    }
}

/// Discounted state visitation `(1 - gamma) sum_t gamma^t Pr(s_t = s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitationTable {
    /// Joint state labels in enumeration order.
    pub states: Vec<Vec<usize>>,
    pub probs: Vec<f64>,
}

impl VisitationTable {
    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn prob(&self, s: &[usize]) -> f64 {
        self.states.iter().position(|x| x == s).map_or(0.0, |k| self.probs[k])
    }
}

/// Exact evaluator for one executed policy.
#[derive(Debug, Clone)]
pub struct Oracle<'m> {
    model: &'m FactoredModel,
    /// `pi[i][s][a]` of the executed policy.
    pi: Vec<Vec<Vec<f64>>>,
    /// `K_i[(s, a) -> (s', a')]`, row-major.
    chains: Vec<Vec<f64>>,
}

impl<'m> Oracle<'m> {
    pub fn new(model: &'m FactoredModel, policy: &SoftmaxPolicy, execution: Execution<'_>) -> Result<Self> {
        let n = model.n();
        let mut pi = Vec::with_capacity(n);
        for i in 0..n {
            let view = execution.view(i);
            let table = (0..model.kernel(i).n_states())
                .map(|s| policy.action_probs(i, s, &view))
                .collect::<Result<Vec<_>>>()?;
            pi.push(table);
        }
        Ok(Self::from_tables(model, pi))
    }

    /// Evaluator for explicit per-agent action tables `pi[i][s][a]`.
    pub fn from_tables(model: &'m FactoredModel, pi: Vec<Vec<Vec<f64>>>) -> Self {
        let chains = (0..model.n())
            .map(|i| {
                let k = model.kernel(i);
                let (ns, na) = (k.n_states(), k.n_actions());
                let m = ns * na;
                let mut out = vec![0.0; m * m];
                for s in 0..ns {
                    for a in 0..na {
                        for s2 in 0..ns {
                            let p = k.prob(s, a, s2);
                            for a2 in 0..na {
                                out[(s * na + a) * m + s2 * na + a2] = p * pi[i][s2][a2];
                            }
                        }
                    }
                }
                out
            })
            .collect();
        Oracle { model, pi, chains }
    }

    pub fn model(&self) -> &FactoredModel {
        self.model
    }

    pub fn action_table(&self, i: usize) -> &[Vec<f64>] {
        &self.pi[i]
    }

    pub fn full_space(&self) -> Result<ProductSpace> {
        ProductSpace::new(self.model, (0..self.model.n()).collect())
    }

    /// `E[sum_t gamma^t c(s_t, a_t) | (s_0, a_0)]` on the chain over
    /// `members`, for `c` given on that space.
    fn value_table(&self, space: &ProductSpace, cost: Vec<f64>) -> Vec<f64> {
        let bound = cost.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let horizon = truncation_horizon(self.model.gamma(), bound, EPSILON);
        let gamma = self.model.gamma();
        let mut q = cost.clone();
        let mut a = vec![0.0; space.size];
        let mut b = vec![0.0; space.size];
        for _ in 0..horizon {
            a.copy_from_slice(&q);
            for (k, &j) in space.members.iter().enumerate() {
                space.apply_mode(k, &self.chains[j], &a, &mut b, false);
                std::mem::swap(&mut a, &mut b);
            }
            for ((qx, cx), ax) in q.iter_mut().zip(&cost).zip(&a) {
                *qx = cx + gamma * ax;
            }
        }
        q
    }

    /// `sum_{j in agents} weight * r_j` tabulated on `space`.
    fn reward_table(&self, space: &ProductSpace, agents: &[usize], weight: f64) -> Vec<f64> {
        let n = self.model.n();
        let mut s = vec![0; n];
        let mut a = vec![0; n];
        (0..space.size)
            .map(|x| {
                space.decode_into(x, &mut s, &mut a);
                agents.iter().map(|&j| self.model.reward_of(j, &s, &a)).sum::<f64>() * weight
            })
            .collect()
    }

    /// Global Q, `(1/N) E[sum_t gamma^t sum_i r_i]`, on the full space.
    pub fn global_q_table(&self) -> Result<SubsetTable> {
        let space = self.full_space()?;
        let all: Vec<usize> = (0..self.model.n()).collect();
        let cost = self.reward_table(&space, &all, 1.0 / self.model.n() as f64);
        let values = self.value_table(&space, cost);
        Ok(SubsetTable { space, values })
    }

    pub fn global_q(&self, s: &[usize], a: &[usize]) -> Result<f64> {
        Ok(self.global_q_table()?.at(s, a))
    }

    /// Local Q of agent `i` on the restricted chain over its reward scope.
    pub fn local_q_table(&self, i: usize) -> Result<SubsetTable> {
        let space = ProductSpace::new(self.model, self.model.reward_scope(i).to_vec())?;
        let cost = self.reward_table(&space, &[i], 1.0);
        let values = self.value_table(&space, cost);
        Ok(SubsetTable { space, values })
    }

    /// `(1/N) E[sum_t gamma^t sum_{j in reach} r_j]` where `reach` is
    /// `N^{kappa_p+kappa_r}_i`, on the chain over the union of the reward
    /// scopes of `reach`.
    pub fn neighbors_averaged_q_table(&self, reach: &HopNeighborhood) -> Result<SubsetTable> {
        let mut members: Vec<usize> = reach
            .members
            .iter()
            .flat_map(|&j| self.model.reward_scope(j).iter().copied())
            .collect();
        members.sort_unstable();
        members.dedup();
        let space = ProductSpace::new(self.model, members)?;
        let cost = self.reward_table(&space, &reach.members, 1.0 / self.model.n() as f64);
        let values = self.value_table(&space, cost);
        Ok(SubsetTable { space, values })
    }

    /// Initial `(s, a)` distribution on the full space.
    fn initial_distribution(&self, space: &ProductSpace) -> Vec<f64> {
        let mut mu = vec![0.0; space.size];
        let n = self.model.n();
        let actions: Vec<usize> = (0..n).map(|i| self.model.kernel(i).n_actions()).collect();
        for (s, p) in self.model.initial().support(&self.model.state_sizes()) {
            if p == 0.0 {
                continue;
            }
            // enumerate joint actions in mixed radix
            let mut a = vec![0; n];
            loop {
                let prob: f64 = (0..n).map(|i| self.pi[i][s[i]][a[i]]).product();
                mu[space.index_of(&s, &a)] += p * prob;
                let mut k = 0;
                while k < n {
                    a[k] += 1;
                    if a[k] < actions[k] {
                        break;
                    }
                    a[k] = 0;
                    k += 1;
                }
                if k == n {
                    break;
                }
            }
        }
        mu
    }

    /// `J = E_{rho}[sum_t gamma^t (1/N) sum_i r_i]`.
    pub fn exact_j(&self) -> Result<f64> {
        let q = self.global_q_table()?;
        let mu = self.initial_distribution(&q.space);
        Ok(mu.iter().zip(&q.values).map(|(m, v)| m * v).sum())
    }

    /// `(1 - gamma) sum_t gamma^t Pr(s_t = s, a_t = a)` on the full space,
    /// truncated once `gamma^t < 1e-13`.
    pub fn state_action_visitation(&self) -> Result<SubsetTable> {
        let space = self.full_space()?;
        let gamma = self.model.gamma();
        let horizon = (1e-13f64.ln() / gamma.ln()).ceil().max(1.0) as usize;
        let mut mu = self.initial_distribution(&space);
        let mut tmp = vec![0.0; space.size];
        let mut d = vec![0.0; space.size];
        let mut weight = 1.0 - gamma;
        for _ in 0..horizon {
            for (dx, mx) in d.iter_mut().zip(&mu) {
                *dx += weight * mx;
            }
            for (k, &j) in space.members.iter().enumerate() {
                space.apply_mode(k, &self.chains[j], &mu, &mut tmp, true);
                std::mem::swap(&mut mu, &mut tmp);
            }
            weight *= gamma;
        }
        Ok(SubsetTable { space, values: d })
    }

    pub fn discounted_visitation(&self) -> Result<VisitationTable> {
        let sa = self.state_action_visitation()?;
        let n = self.model.n();
        let state_space = StateSpace::new(&self.model.state_sizes());
        let mut probs = vec![0.0; state_space.size];
        let mut s = vec![0; n];
        let mut a = vec![0; n];
        for (x, &p) in sa.values.iter().enumerate() {
            sa.space.decode_into(x, &mut s, &mut a);
            probs[state_space.index(&s)] += p;
        }
        let states = (0..state_space.size).map(|k| state_space.decode(k)).collect();
        Ok(VisitationTable { states, probs })
    }

    /// `(1/(1-gamma)) E_{d, pi}[g_i(s, a) * value(s, a)]` with
    /// `g_i = sum_{j in N^{kappa_p}_i} grad_{theta_i} log pi_j(a_j | s_j)`
    /// evaluated at `score_params`.
    fn weighted_score<P: ParamAccess + ?Sized, F: Fn(&[usize], &[usize]) -> f64>(
        &self,
        policy: &SoftmaxPolicy,
        i: usize,
        score_params: &P,
        value: F,
    ) -> Result<Vec<f64>> {
        let d = self.state_action_visitation()?;
        let n = self.model.n();
        let mut s = vec![0; n];
        let mut a = vec![0; n];
        let mut out = vec![0.0; policy.dim(i)];
        for (x, &w) in d.values.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            d.space.decode_into(x, &mut s, &mut a);
            let g = policy.g_hat(i, &s, &a, score_params)?;
            let v = value(&s, &a) * w;
            for (o, gk) in out.iter_mut().zip(&g) {
                *o += gk * v;
            }
        }
        let scale = 1.0 / (1.0 - self.model.gamma());
        out.iter_mut().for_each(|x| *x *= scale);
        Ok(out)
    }

    /// Gradient as the visitation-weighted score times the average of the
    /// local Q functions of `N^{kappa_p+kappa_r}_i`.
    pub fn gradient_local_q<P: ParamAccess + ?Sized>(
        &self,
        policy: &SoftmaxPolicy,
        i: usize,
        score_params: &P,
    ) -> Result<Vec<f64>> {
        let reach = self.model.graph().khop(i, policy.radius() + self.model.reward_radius())?;
        self.gradient_with_agents(policy, i, score_params, &reach.members)
    }

    /// Same, with the local Q functions of every agent.
    pub fn gradient_all_local_q<P: ParamAccess + ?Sized>(
        &self,
        policy: &SoftmaxPolicy,
        i: usize,
        score_params: &P,
    ) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..self.model.n()).collect();
        self.gradient_with_agents(policy, i, score_params, &all)
    }

    fn gradient_with_agents<P: ParamAccess + ?Sized>(
        &self,
        policy: &SoftmaxPolicy,
        i: usize,
        score_params: &P,
        agents: &[usize],
    ) -> Result<Vec<f64>> {
        let tables = agents.iter().map(|&l| self.local_q_table(l)).collect::<Result<Vec<_>>>()?;
        let n = self.model.n() as f64;
        self.weighted_score(policy, i, score_params, |s, a| tables.iter().map(|t| t.at(s, a)).sum::<f64>() / n)
    }

    /// Gradient as the visitation-weighted score times the neighbours'
    /// averaged Q function of agent `i`.
    pub fn gradient_averaged_q<P: ParamAccess + ?Sized>(
        &self,
        policy: &SoftmaxPolicy,
        i: usize,
        score_params: &P,
    ) -> Result<Vec<f64>> {
        let reach = self.model.graph().khop(i, policy.radius() + self.model.reward_radius())?;
        let table = self.neighbors_averaged_q_table(&reach)?;
        self.weighted_score(policy, i, score_params, |s, a| table.at(s, a))
    }
}

/// Mixed-radix enumeration of joint states, first agent least significant.
struct StateSpace {
    sizes: Vec<usize>,
    size: usize,
}

impl StateSpace {
    fn new(sizes: &[usize]) -> Self {
        StateSpace { sizes: sizes.to_vec(), size: sizes.iter().product() }
    }

    fn index(&self, s: &[usize]) -> usize {
        let mut idx = 0;
        let mut stride = 1;
        for (x, m) in s.iter().zip(&self.sizes) {
            idx += x * stride;
            stride *= m;
        }
        idx
    }

    fn decode(&self, mut k: usize) -> Vec<usize> {
        self.sizes
            .iter()
            .map(|&m| {
                let x = k % m;
                k /= m;
                x
            })
            .collect()
    }
}

/// Objective of the policy with true parameters.
#[allow(non_snake_case)]
pub fn exact_J(model: &FactoredModel, policy: &SoftmaxPolicy, params: &PolicyParams) -> Result<f64> {
    Oracle::new(model, policy, Execution::True(params))?.exact_j()
}

#[allow(non_snake_case)]
pub fn exact_global_Q(
    model: &FactoredModel,
    policy: &SoftmaxPolicy,
    params: &PolicyParams,
    s: &[usize],
    a: &[usize],
) -> Result<f64> {
    Oracle::new(model, policy, Execution::True(params))?.global_q(s, a)
}

/// Local Q of agent `i` at labels of its reward scope, in member order.
#[allow(non_snake_case)]
pub fn exact_local_Q(
    model: &FactoredModel,
    policy: &SoftmaxPolicy,
    params: &PolicyParams,
    i: usize,
    s: &[usize],
    a: &[usize],
) -> Result<f64> {
    Ok(Oracle::new(model, policy, Execution::True(params))?.local_q_table(i)?.at_local(s, a))
}

/// Gradient with respect to `theta_i` from local Q functions.
pub fn exact_gradient_thm1(
    model: &FactoredModel,
    policy: &SoftmaxPolicy,
    params: &PolicyParams,
    i: usize,
) -> Result<Vec<f64>> {
    Oracle::new(model, policy, Execution::True(params))?.gradient_local_q(policy, i, params)
}

/// Gradient with respect to `theta_i` from the neighbours' averaged Q.
pub fn exact_gradient_thm2(
    model: &FactoredModel,
    policy: &SoftmaxPolicy,
    params: &PolicyParams,
    i: usize,
) -> Result<Vec<f64>> {
    Oracle::new(model, policy, Execution::True(params))?.gradient_averaged_q(policy, i, params)
}

/// Target of the stochastic estimate of agent `i` under local estimates:
/// every agent acts with its own row, the scores use row `i`.
pub fn exact_gradient_thm2_estimates(
    model: &FactoredModel,
    policy: &SoftmaxPolicy,
    est: &EstimatedParams,
    i: usize,
) -> Result<Vec<f64>> {
    Oracle::new(model, policy, Execution::Estimates(est))?.gradient_averaged_q(policy, i, &est.row(i))
}

pub fn exact_gradient_thm1_estimates(
    model: &FactoredModel,
    policy: &SoftmaxPolicy,
    est: &EstimatedParams,
    i: usize,
) -> Result<Vec<f64>> {
    Oracle::new(model, policy, Execution::Estimates(est))?.gradient_local_q(policy, i, &est.row(i))
}

/// Central differences of `f` at `x`.
pub fn central_differences<F: FnMut(&[f64]) -> Result<f64>>(x: &[f64], h: f64, mut f: F) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut point = x.to_vec();
    (0..x.len())
        .map(|k| {
            point[k] = x[k] + h;
            let plus = f(&point)?;
            point[k] = x[k] - h;
            let minus = f(&point)?;
            point[k] = x[k];
            Ok((plus - minus) / (2.0 * h))
        })
        .collect()
}

/// Central differences of [`exact_J`] in the coordinates of `theta_i`.
pub fn fd_gradient(
    model: &FactoredModel,
    policy: &SoftmaxPolicy,
    params: &PolicyParams,
    i: usize,
    h: f64,
) -> Result<Vec<f64>> {
    let mut work = params.clone();
    central_differences(params.agent(i), h, |theta| {
        work.agent_mut(i).copy_from_slice(theta);
        exact_J(model, policy, &work)
    })
}
