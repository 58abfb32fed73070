//! The training loop: push-sum mixing, one two-horizon rollout under the
//! local estimates, per-agent gradient ascent, and injection of the
//! parameter changes.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{sample_geometric, GradientEstimate, GradientEstimator, TwoHorizonRollout};
use crate::model::{FactoredModel, RewardScratch};
use crate::netgraph::WeightMatrix;
use crate::oracle::truncation_horizon;
use crate::policy::{EstimatedParams, Execution, MixingSpec, ParamLayout, PolicyParams, SoftmaxPolicy};
use crate::pushsum::PushSumState;
use crate::rng::{stream_rng, SimRng, Stream};

/// `eta_t = eta0 / (t + t0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRate {
    pub eta0: f64,
    pub t0: f64,
}

impl Default for LearningRate {
    fn default() -> Self {
        LearningRate { eta0: 0.5, t0: 10.0 }
    }
}

impl LearningRate {
    pub fn at(&self, t: u64) -> f64 {
        self.eta0 / (t as f64 + self.t0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Undiscounted sum up to a horizon drawn from `Geom(1 - gamma)`.
    #[default]
    Geometric,
    /// Discounted sum truncated where the tail is below `eval_epsilon`.
    FixedHorizon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTarget {
    /// Policy with the true parameters.
    #[default]
    True,
    /// Policy the agents actually execute, each with its own estimates.
    Executed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DscpConfig {
    #[serde(alias = "T")]
    pub iterations: u64,
    pub kappa_p: usize,
    pub kappa_r: usize,
    pub lr: LearningRate,
    pub mixing: MixingSpec,
    pub seed: u64,
    pub batch: usize,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub eval_mode: EvalMode,
    pub eval_epsilon: f64,
    pub eval_target: EvalTarget,
    /// Use the true parameters of direct neighbours instead of push-sum
    /// estimates (only meaningful for `kappa_p <= 1`).
    pub direct_params: bool,
    pub self_loops: bool,
    /// Record wall-clock milliseconds; off by default so metric files are
    /// reproducible byte for byte.
    pub record_wall_time: bool,
    /// Check the push-sum invariants after every round.
    pub check_invariants: bool,
}

impl Default for DscpConfig {
    fn default() -> Self {
        DscpConfig {
            iterations: 20_000,
            kappa_p: 1,
            kappa_r: 1,
            lr: LearningRate::default(),
            mixing: MixingSpec::default(),
            seed: 0,
            batch: 1,
            eval_every: 100,
            eval_episodes: 100,
            eval_mode: EvalMode::Geometric,
            eval_epsilon: 1e-6,
            eval_target: EvalTarget::True,
            direct_params: false,
            self_loops: true,
            record_wall_time: false,
            check_invariants: false,
        }
    }
}

impl DscpConfig {
    pub fn validate(&self, model: &FactoredModel) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.kappa_r != model.reward_radius() {
            return bad(format!("kappa_r = {} but the model's reward radius is {}", self.kappa_r, model.reward_radius()));
        }
        if self.kappa_p >= 1 && self.kappa_r > self.kappa_p {
            return bad(format!("kappa_r = {} exceeds kappa_p = {}", self.kappa_r, self.kappa_p));
        }
        if !(self.lr.eta0 > 0.0) || !(self.lr.t0 > -1.0) {
            return bad(format!("learning rate {:?} is not positive for t >= 1", self.lr));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("eval_every and eval_episodes must be at least 1".into());
        }
        if !(self.eval_epsilon > 0.0) {
            return bad("eval_epsilon must be positive".into());
        }
        if self.direct_params && self.kappa_p > 1 {
            return bad("direct_params needs kappa_p <= 1".into());
        }
        Ok(())
    }

    fn uses_pushsum(&self) -> bool {
        self.kappa_p >= 1 && !self.direct_params
    }
}

pub fn learning_rate(cfg: &DscpConfig, t: u64) -> f64 {
    cfg.lr.at(t)
}

/// One row of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub t: u64,
    #[serde(rename = "J_est")]
    pub j_est: Option<f64>,
    #[serde(rename = "J_se")]
    pub j_se: Option<f64>,
    pub grad_norm_est: f64,
    pub consensus_err: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainRecord {
    pub rows: Vec<TrainRow>,
}

impl TrainRecord {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    /// Rows carrying an objective estimate.
    pub fn evaluations(&self) -> impl Iterator<Item = (u64, f64, f64)> + '_ {
        self.rows
            .iter()
            .filter_map(|r| Some((r.t, r.j_est?, r.j_se.unwrap_or(0.0))))
    }

    pub fn final_evaluation(&self) -> Option<(u64, f64, f64)> {
        self.evaluations().last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: PolicyParams,
    pub record: TrainRecord,
}

/// Monte-Carlo estimate of the objective and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub mean: f64,
    pub se: f64,
    pub episodes: usize,
}

pub fn evaluate_policy<R: Rng + ?Sized>(
    model: &FactoredModel,
    policy: &SoftmaxPolicy,
    execution: Execution<'_>,
    episodes: usize,
    mode: EvalMode,
    epsilon: f64,
    rng: &mut R,
) -> Result<Evaluation> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let n = model.n();
    let gamma = model.gamma();
    let fixed_horizon = match mode {
        EvalMode::FixedHorizon => {
            let r = model.validate()?.reward_bound;
            Some(truncation_horizon(gamma, r, epsilon) as u64)
        }
        EvalMode::Geometric => None,
    };
    let mut state = vec![0; n];
    let mut action = vec![0; n];
    let mut next = vec![0; n];
    let mut rewards = vec![0.0; n];
    let mut probs = Vec::new();
    let mut scratch = RewardScratch::default();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..episodes {
        let horizon = match fixed_horizon {
            Some(h) => h,
            None => sample_geometric(1.0 - gamma, rng)?,
        };
        state.copy_from_slice(&model.initial().sample(rng));
        let mut total = 0.0;
        let mut weight = 1.0;
        for t in 0..=horizon {
            policy.sample_joint_action_into(&state, execution, rng, &mut probs, &mut action)?;
            model.rewards_into(&state, &action, &mut rewards, &mut scratch);
            let step = rewards.iter().sum::<f64>() / n as f64;
            total += weight * step;
            if fixed_horizon.is_some() {
                weight *= gamma;
            }
            if t < horizon {
                model.sample_transition_into(&state, &action, rng, &mut next);
                std::mem::swap(&mut state, &mut next);
            }
        }
        sum += total;
        sum_sq += total * total;
    }
    let k = episodes as f64;
    let mean = sum / k;
    let se = if episodes > 1 {
        ((sum_sq - k * mean * mean).max(0.0) / (k - 1.0) / k).sqrt()
    } else {
        0.0
    };
    Ok(Evaluation { mean, se, episodes })
}

/// What a gradient source sees at one iteration.
pub struct StepContext<'a> {
    pub t: u64,
    pub model: &'a FactoredModel,
    pub estimator: &'a GradientEstimator,
    pub params: &'a PolicyParams,
    /// Local estimates; `None` when agents use the true parameters.
    pub estimates: Option<&'a EstimatedParams>,
}

/// Stepwise driver; [`run_dscp`] runs it to completion.
pub struct Trainer<'m> {
    model: &'m FactoredModel,
    cfg: DscpConfig,
    estimator: GradientEstimator,
    params: PolicyParams,
    pushsum: Option<PushSumState>,
    rollout_rng: SimRng,
    eval_rng: SimRng,
    t: u64,
    started: Instant,
    last: Option<GradientEstimate>,
    rollout_sink: Option<Box<dyn FnMut(u64, &TwoHorizonRollout) + 'm>>,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m FactoredModel, cfg: &DscpConfig) -> Result<Self> {
        cfg.validate(model)?;
        let diag = model.validate()?;
        let policy = SoftmaxPolicy::new(model, cfg.kappa_p, cfg.mixing)?;
        let estimator = GradientEstimator::new(model, policy, diag.reward_bound);
        let layout = ParamLayout::for_model(model);
        let pushsum = if cfg.uses_pushsum() {
            let w = WeightMatrix::with_self_loops(model.graph(), cfg.self_loops);
            Some(PushSumState::new(layout.clone(), &w)?)
        } else {
            None
        };
        Ok(Trainer {
            model,
            estimator,
            params: PolicyParams::zeros(layout),
            pushsum,
            rollout_rng: stream_rng(cfg.seed, Stream::Rollout, 0),
            eval_rng: stream_rng(cfg.seed, Stream::Evaluation, 0),
            t: 1,
            cfg: cfg.clone(),
            started: Instant::now(),
            last: None,
            rollout_sink: None,
        })
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn pushsum(&self) -> Option<&PushSumState> {
        self.pushsum.as_ref()
    }

    pub fn estimator(&self) -> &GradientEstimator {
        &self.estimator
    }

    /// Index of the next iteration.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn finished(&self) -> bool {
        self.t > self.cfg.iterations
    }

    /// Calls `sink` with every rollout drawn from now on.
    pub fn on_rollout(&mut self, sink: impl FnMut(u64, &TwoHorizonRollout) + 'm) {
        self.rollout_sink = Some(Box::new(sink));
    }

    /// Gradient estimate of the last completed iteration.
    pub fn last_estimate(&self) -> Option<&GradientEstimate> {
        self.last.as_ref()
    }

    fn is_eval_iteration(&self, t: u64) -> bool {
        t == 1 || t % self.cfg.eval_every == 0 || t == self.cfg.iterations
    }

    fn stochastic_gradient(&mut self) -> Result<GradientEstimate> {
        let batch = self.cfg.batch;
        let mut total: Option<GradientEstimate> = None;
        for _ in 0..batch {
            let estimate = match &self.pushsum {
                Some(ps) => {
                    let est = ps.estimates();
                    let roll = self.estimator.rollout(self.model, Execution::Estimates(est), &mut self.rollout_rng)?;
                    if let Some(sink) = &mut self.rollout_sink {
                        sink(self.t, &roll);
                    }
                    self.estimator.estimate(&roll, est)?
                }
                None => {
                    let roll = self.estimator.rollout(self.model, Execution::True(&self.params), &mut self.rollout_rng)?;
                    if let Some(sink) = &mut self.rollout_sink {
                        sink(self.t, &roll);
                    }
                    let view = self.params.view();
                    self.estimator.estimate_with(&roll, |_| view)?
                }
            };
            total = Some(match total {
                None => estimate,
                Some(mut acc) => {
                    for (a, g) in acc.grads.iter_mut().zip(&estimate.grads) {
                        a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                    acc.q_values.iter_mut().zip(&estimate.q_values).for_each(|(x, y)| *x += y);
                    acc
                }
            });
        }
        let mut out = total.expect("batch >= 1");
        if batch > 1 {
            let k = batch as f64;
            out.grads.iter_mut().flatten().for_each(|x| *x /= k);
            out.q_values.iter_mut().for_each(|x| *x /= k);
            out.norms = out.grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        }
        Ok(out)
    }

    /// One iteration with the stochastic estimator.
    pub fn step(&mut self) -> Result<TrainRow> {
        self.step_inner(None)
    }

    /// One iteration with gradients from `source` instead of the estimator.
    pub fn step_with<F>(&mut self, source: F) -> Result<TrainRow>
    where
        F: FnOnce(&StepContext<'_>) -> Result<Vec<Vec<f64>>>,
    {
        self.step_inner(Some(Box::new(source)))
    }

    #[allow(clippy::type_complexity)]
    fn step_inner(&mut self, source: Option<Box<dyn FnOnce(&StepContext<'_>) -> Result<Vec<Vec<f64>>> + '_>>) -> Result<TrainRow> {
        let t = self.t;
        if self.finished() {
            return Err(Error::Config(format!("training already ran {} iterations", self.cfg.iterations)));
        }
        if let Some(ps) = &mut self.pushsum {
            ps.mix_and_estimate()?;
        }
        let consensus_err = self.pushsum.as_ref().map_or(0.0, |ps| ps.consensus_error(&self.params));

        let (j_est, j_se) = if self.is_eval_iteration(t) {
            let execution = match (&self.pushsum, self.cfg.eval_target) {
                (Some(ps), EvalTarget::Executed) => Execution::Estimates(ps.estimates()),
                _ => Execution::True(&self.params),
            };
            let e = evaluate_policy(
                self.model,
                self.estimator.policy(),
                execution,
                self.cfg.eval_episodes,
                self.cfg.eval_mode,
                self.cfg.eval_epsilon,
                &mut self.eval_rng,
            )?;
            (Some(e.mean), Some(e.se))
        } else {
            (None, None)
        };

        let estimate = match source {
            None => self.stochastic_gradient()?,
            Some(f) => {
                let ctx = StepContext {
                    t,
                    model: self.model,
                    estimator: &self.estimator,
                    params: &self.params,
                    estimates: self.pushsum.as_ref().map(|ps| ps.estimates()),
                };
                let grads = f(&ctx)?;
                let norms = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
                GradientEstimate { q_values: vec![f64::NAN; grads.len()], grads, norms }
            }
        };
        let grad_norm_est = estimate.norms.iter().map(|x| x * x).sum::<f64>().sqrt();
        let lr = self.cfg.lr.at(t);

        if t < self.cfg.iterations {
            let deltas: Vec<Vec<f64>> = estimate.grads.iter().map(|g| g.iter().map(|x| lr * x).collect()).collect();
            for (i, d) in deltas.iter().enumerate() {
                for (p, x) in self.params.agent_mut(i).iter_mut().zip(d) {
                    *p += x;
                }
            }
            if let Some(ps) = &mut self.pushsum {
                ps.inject_all(&deltas)?;
                if self.cfg.check_invariants {
                    ps.check_invariants(&self.params, 1e-10)?;
                }
            }
        }
        if !self.params.is_finite() {
            return Err(Error::InvariantViolated(format!("non-finite parameters at t = {t}")));
        }
        self.last = Some(estimate);
        self.t += 1;
        let wall_ms = if self.cfg.record_wall_time { self.started.elapsed().as_millis() as u64 } else { 0 };
        Ok(TrainRow { t, j_est, j_se, grad_norm_est, consensus_err, lr, wall_ms })
    }

    pub fn into_params(self) -> PolicyParams {
        self.params
    }
}

/// Runs all iterations. Row `t` describes `theta_t`; the update computed at
/// the last iteration is not applied, so `T = 1` returns zero parameters.
pub fn run_dscp(model: &FactoredModel, cfg: &DscpConfig) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(model, cfg)?;
    let mut record = TrainRecord::default();
    while !trainer.finished() {
        let row = trainer.step()?;
        log::debug!("t={} grad_norm={:.4e} consensus={:.4e}", row.t, row.grad_norm_est, row.consensus_err);
        record.rows.push(row);
    }
    Ok(TrainOutput { params: trainer.into_params(), record })
}
