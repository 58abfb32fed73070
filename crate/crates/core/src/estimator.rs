//! Two-horizon rollouts and the coupled policy-gradient estimate
//! `(1/(1-gamma)) * Q_hat_i * g_hat_i`.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{FactoredModel, RewardScratch};
use crate::netgraph::HopNeighborhood;
use crate::policy::{EstimatedParams, Execution, ParamAccess, SoftmaxPolicy};

/// Rollouts longer than this abort instead of looping.
pub const MAX_HORIZON: u64 = 10_000_000;

/// Geometric draw on `{0, 1, 2, ...}` with `P(k) = p (1-p)^k`, by inversion
/// of a single uniform.
pub fn sample_geometric<R: Rng + ?Sized>(p: f64, rng: &mut R) -> Result<u64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidProbability(p));
    }
    let u: f64 = rng.gen();
    if p == 1.0 {
        return Ok(0);
    }
    let k = ((1.0 - u).ln() / (1.0 - p).ln()).floor();
    Ok(if k >= u64::MAX as f64 { u64::MAX } else { k as u64 })
}

/// `gamma^(tau/2)`.
pub fn half_discount(gamma: f64, tau: u64) -> f64 {
    (tau as f64 * 0.5 * gamma.ln()).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoHorizonRollout {
    pub t1: u64,
    pub t2: u64,
    pub snapshot_states: Vec<usize>,
    pub snapshot_actions: Vec<usize>,
    /// `rewards[tau][j]` is `r_j` at time `t1 + tau`, `tau = 0..=t2`.
    pub rewards: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub grads: Vec<Vec<f64>>,
    pub q_values: Vec<f64>,
    pub norms: Vec<f64>,
}

/// Everything an agent needs to turn a rollout into its gradient estimate.
#[derive(Debug, Clone)]
pub struct GradientEstimator {
    policy: SoftmaxPolicy,
    reward_hoods: Vec<HopNeighborhood>,
    gamma: f64,
    reward_bound: f64,
    bound: f64,
}

impl GradientEstimator {
    /// `reward_bound` is the `R` reported by [`FactoredModel::validate`].
    pub fn new(model: &FactoredModel, policy: SoftmaxPolicy, reward_bound: f64) -> Self {
        let kp = policy.radius();
        let reach = kp + model.reward_radius();
        let graph = model.graph();
        let gamma = model.gamma();
        let n = model.n() as f64;
        let bound = policy.score_bound()
            * reward_bound
            * graph.max_neighborhood_size(kp) as f64
            * graph.max_neighborhood_size(reach) as f64
            / ((1.0 - gamma) * (1.0 - gamma.sqrt()) * n);
        GradientEstimator { reward_hoods: graph.khop_all(reach), policy, gamma, reward_bound, bound }
    }

    pub fn policy(&self) -> &SoftmaxPolicy {
        &self.policy
    }

    /// `L_hat`.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn reward_bound(&self) -> f64 {
        self.reward_bound
    }

    /// `N^{kappa_p + kappa_r}_i`.
    pub fn reward_neighborhood(&self, i: usize) -> &HopNeighborhood {
        &self.reward_hoods[i]
    }

    /// Draws `T1`, `T2`, the initial state, then runs the executed policy,
    /// consuming per step one uniform per agent for actions and one per
    /// agent for the transition.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        model: &FactoredModel,
        execution: Execution<'_>,
        rng: &mut R,
    ) -> Result<TwoHorizonRollout> {
        let t1 = sample_geometric(1.0 - self.gamma, rng)?;
        let t2 = sample_geometric(1.0 - self.gamma.sqrt(), rng)?;
        if t1.saturating_add(t2) > MAX_HORIZON {
            return Err(Error::HorizonOverflow(t1.saturating_add(t2)));
        }
        let start = model.initial().sample(rng);
        self.simulate(model, execution, start, None, t1, t2, rng)
    }

    /// Rollout conditioned on the snapshot `(state, action)` at `T1`: draws a
    /// fresh `T2` and continues from there. The result has `t1 = 0`.
    pub fn continue_from<R: Rng + ?Sized>(
        &self,
        model: &FactoredModel,
        execution: Execution<'_>,
        state: &[usize],
        action: &[usize],
        rng: &mut R,
    ) -> Result<TwoHorizonRollout> {
        let t2 = sample_geometric(1.0 - self.gamma.sqrt(), rng)?;
        if t2 > MAX_HORIZON {
            return Err(Error::HorizonOverflow(t2));
        }
        self.simulate(model, execution, state.to_vec(), Some(action), 0, t2, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn simulate<R: Rng + ?Sized>(
        &self,
        model: &FactoredModel,
        execution: Execution<'_>,
        mut state: Vec<usize>,
        first_action: Option<&[usize]>,
        t1: u64,
        t2: u64,
        rng: &mut R,
    ) -> Result<TwoHorizonRollout> {
        let n = model.n();
        let mut action = vec![0; n];
        let mut next = vec![0; n];
        let mut probs = Vec::new();
        let mut scratch = RewardScratch::default();
        let mut rewards = Vec::with_capacity(t2 as usize + 1);
        let mut snapshot = (Vec::new(), Vec::new());
        let end = t1 + t2;
        for t in 0..=end {
            match first_action {
                Some(a) if t == 0 => action.copy_from_slice(a),
                _ => self.policy.sample_joint_action_into(&state, execution, rng, &mut probs, &mut action)?,
            }
            if t == t1 {
                snapshot = (state.clone(), action.clone());
            }
            if t >= t1 {
                let mut r = vec![0.0; n];
                model.rewards_into(&state, &action, &mut r, &mut scratch);
                rewards.push(r);
            }
            if t < end {
                model.sample_transition_into(&state, &action, rng, &mut next);
                std::mem::swap(&mut state, &mut next);
            }
        }
        Ok(TwoHorizonRollout { t1, t2, snapshot_states: snapshot.0, snapshot_actions: snapshot.1, rewards })
    }

    /// `(1/N) sum_{tau <= T2} gamma^(tau/2) sum_{j in N^{kappa_p+kappa_r}_i} r_{j, T1+tau}`.
    pub fn q_hat(&self, i: usize, rewards: &[Vec<f64>]) -> f64 {
        let hood = &self.reward_hoods[i].members;
        let mut total = 0.0;
        for (tau, r) in rewards.iter().enumerate() {
            let local: f64 = hood.iter().map(|&j| r[j]).sum();
            total += half_discount(self.gamma, tau as u64) * local;
        }
        let q = total / self.reward_hoods.len() as f64;
        if cfg!(feature = "mutate-qhat-sign") {
            -q
        } else {
            q
        }
    }

    /// Gradient estimate of agent `i` alone. Reads the snapshot only on
    /// `N^{kappa_p}_i`, rewards only on `N^{kappa_p+kappa_r}_i`, and
    /// parameters only from `params` (agent `i`'s estimate row).
    pub fn agent_gradient<P: ParamAccess + ?Sized>(
        &self,
        i: usize,
        snapshot_states: &[usize],
        snapshot_actions: &[usize],
        rewards: &[Vec<f64>],
        params: &P,
    ) -> Result<(Vec<f64>, f64)> {
        let q = self.q_hat(i, rewards);
        let mut g = self.policy.g_hat(i, snapshot_states, snapshot_actions, params)?;
        let scale = q / (1.0 - self.gamma);
        for x in &mut g {
            *x *= scale;
        }
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm <= self.bound * (1.0 + 1e-12)) {
            return Err(Error::BoundViolated { agent: i, norm, bound: self.bound });
        }
        Ok((g, q))
    }

    /// Estimates for every agent, each using its own estimate row.
    pub fn estimate(&self, roll: &TwoHorizonRollout, est: &EstimatedParams) -> Result<GradientEstimate> {
        self.estimate_with(roll, |i| est.row(i))
    }

    /// Estimates for every agent with `params(i)` as agent `i`'s view.
    pub fn estimate_with<P, F>(&self, roll: &TwoHorizonRollout, params: F) -> Result<GradientEstimate>
    where
        P: ParamAccess,
        F: Fn(usize) -> P,
    {
        let n = self.reward_hoods.len();
        let mut out = GradientEstimate {
            grads: Vec::with_capacity(n),
            q_values: Vec::with_capacity(n),
            norms: Vec::with_capacity(n),
        };
        for i in 0..n {
            let (g, q) =
                self.agent_gradient(i, &roll.snapshot_states, &roll.snapshot_actions, &roll.rewards, &params(i))?;
            out.norms.push(g.iter().map(|x| x * x).sum::<f64>().sqrt());
            out.grads.push(g);
            out.q_values.push(q);
        }
        Ok(out)
    }
}
