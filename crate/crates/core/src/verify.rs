//! Self-check suites comparing the stochastic pieces with the exact oracle.

use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::error::Result;
use crate::estimator::GradientEstimator;
use crate::model::{random_tabular, FactoredModel};
use crate::netgraph::{AgentGraph, WeightMatrix};
use crate::oracle::{self, Oracle};
use crate::policy::{EstimatedParams, Execution, MixingSpec, ParamLayout, PolicyParams, SoftmaxPolicy};
use crate::pushsum::PushSumState;
use crate::rng::{stream_rng, SimRng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Quick,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub level: Level,
    pub passed: bool,
    pub checks: Vec<Check>,
}

fn check(name: &str, outcome: Result<(bool, String)>) -> Check {
    match outcome {
        Ok((passed, detail)) => Check { name: name.into(), passed, detail },
        Err(e) => Check { name: name.into(), passed: false, detail: format!("error: {e}") },
    }
}

pub fn run(level: Level, seed: u64) -> Report {
    let mut checks = vec![
        check("q_hat_formula", q_hat_formula()),
        check("q_decomposition", q_decomposition(seed)),
        check("gradient_forms_agree", gradient_forms(seed, 5)),
        check("gradient_matches_finite_differences", gradient_fd(seed)),
        check("pushsum_invariants", pushsum_invariants(seed, 500)),
        check("conditional_q_hat_mean", conditional_mean(seed, 20_000)),
        check("estimator_unbiased", unbiasedness(seed, 20_000)),
    ];
    if level == Level::Full {
        checks.push(check("gradient_forms_agree_20_draws", gradient_forms(seed ^ 1, 20)));
        checks.push(check("conditional_q_hat_mean_1e5", conditional_mean(seed ^ 2, 100_000)));
        checks.push(check("estimator_unbiased_2e5", unbiasedness(seed ^ 3, 200_000)));
        checks.push(check("pushsum_invariants_2000", pushsum_invariants(seed ^ 4, 2000)));
    }
    let passed = checks.iter().all(|c| c.passed);
    Report { level, passed, checks }
}

fn instance(n: usize, seed: u64) -> Result<FactoredModel> {
    let mut rng = stream_rng(seed, Stream::Verify, n as u64);
    random_tabular(AgentGraph::path(n)?, 2, 2, 1, 0.9, &mut rng)
}

fn random_params(layout: &ParamLayout, rng: &mut SimRng) -> PolicyParams {
    PolicyParams::from_agents((0..layout.n()).map(|i| (0..layout.dim(i)).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
}

/// `Q_hat` on a hand-made trace against the closed form.
fn q_hat_formula() -> Result<(bool, String)> {
    let m = instance(3, 0)?;
    let policy = SoftmaxPolicy::new(&m, 1, MixingSpec::default())?;
    let est = GradientEstimator::new(&m, policy, m.validate()?.reward_bound);
    let rewards: Vec<Vec<f64>> = (0..6).map(|tau| (0..3).map(|j| 0.1 * (tau + j) as f64 + 0.3).collect()).collect();
    let mut worst = 0.0f64;
    for i in 0..3 {
        let reach = est.reward_neighborhood(i).members.clone();
        let expected: f64 = rewards
            .iter()
            .enumerate()
            .map(|(tau, r)| 0.9f64.powf(tau as f64 / 2.0) * reach.iter().map(|&j| r[j]).sum::<f64>())
            .sum::<f64>()
            / 3.0;
        worst = worst.max((est.q_hat(i, &rewards) - expected).abs());
    }
    Ok((worst < 1e-12, format!("max deviation {worst:.3e}")))
}

fn q_decomposition(seed: u64) -> Result<(bool, String)> {
    let m = instance(3, seed)?;
    let policy = SoftmaxPolicy::new(&m, 1, MixingSpec::default())?;
    let mut rng = stream_rng(seed, Stream::Verify, 100);
    let params = random_params(&ParamLayout::for_model(&m), &mut rng);
    let o = Oracle::new(&m, &policy, Execution::True(&params))?;
    let global = o.global_q_table()?;
    let locals = (0..3).map(|i| o.local_q_table(i)).collect::<Result<Vec<_>>>()?;
    let (mut s, mut a) = (vec![0; 3], vec![0; 3]);
    let mut worst = 0.0f64;
    for x in 0..global.space.size() {
        global.space.decode_into(x, &mut s, &mut a);
        let avg = locals.iter().map(|t| t.at(&s, &a)).sum::<f64>() / 3.0;
        worst = worst.max((global.values[x] - avg).abs());
    }
    Ok((worst <= 1e-6, format!("max deviation {worst:.3e} over {} pairs", global.space.size())))
}

fn gradient_forms(seed: u64, draws: usize) -> Result<(bool, String)> {
    let m = instance(3, seed)?;
    let policy = SoftmaxPolicy::new(&m, 1, MixingSpec::default())?;
    let mut rng = stream_rng(seed, Stream::Verify, 200);
    let layout = ParamLayout::for_model(&m);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let params = random_params(&layout, &mut rng);
        for i in 0..3 {
            let a = oracle::exact_gradient_thm1(&m, &policy, &params, i)?;
            let b = oracle::exact_gradient_thm2(&m, &policy, &params, i)?;
            worst = a.iter().zip(&b).fold(worst, |w, (x, y)| w.max((x - y).abs()));
        }
    }
    Ok((worst <= 1e-6, format!("max deviation {worst:.3e} over {draws} draws")))
}

fn gradient_fd(seed: u64) -> Result<(bool, String)> {
    let m = instance(3, seed ^ 0x55)?;
    let policy = SoftmaxPolicy::new(&m, 1, MixingSpec::default())?;
    let mut rng = stream_rng(seed, Stream::Verify, 300);
    let params = random_params(&ParamLayout::for_model(&m), &mut rng);
    let mut worst = 0.0f64;
    for i in 0..3 {
        let g = oracle::exact_gradient_thm1(&m, &policy, &params, i)?;
        let fd = oracle::fd_gradient(&m, &policy, &params, i, 1e-5)?;
        worst = g.iter().zip(&fd).fold(worst, |w, (x, y)| w.max((x - y).abs() / x.abs().max(1e-8)));
    }
    Ok((worst <= 1e-4, format!("max relative deviation {worst:.3e}")))
}

fn pushsum_invariants(seed: u64, rounds: usize) -> Result<(bool, String)> {
    let g = AgentGraph::ring(10)?;
    let layout = ParamLayout::new(vec![4; 10]);
    let mut ps = PushSumState::new(layout.clone(), &WeightMatrix::from_graph(&g))?;
    let mut truth = PolicyParams::zeros(layout);
    let mut rng = stream_rng(seed, Stream::Verify, 400);
    for t in 1..=rounds {
        ps.mix_and_estimate()?;
        let eta = 0.5 / (t as f64 + 10.0);
        let deltas: Vec<Vec<f64>> = (0..10).map(|_| (0..4).map(|_| eta * rng.gen_range(-1.0..1.0)).collect()).collect();
        for (j, d) in deltas.iter().enumerate() {
            truth.agent_mut(j).iter_mut().zip(d).for_each(|(x, y)| *x += y);
        }
        ps.inject_all(&deltas)?;
        if let Err(e) = ps.check_invariants(&truth, 1e-10) {
            return Ok((false, format!("round {t}: {e}")));
        }
    }
    Ok((true, format!("{rounds} rounds")))
}

/// Monte-Carlo mean of `m` samples of a vector statistic and its standard
/// errors.
fn mean_and_se(sum: &[f64], sum_sq: &[f64], count: usize) -> (Vec<f64>, Vec<f64>) {
    let k = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / k).collect();
    let se = sum_sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| ((q - k * m * m).max(0.0) / (k - 1.0) / k).sqrt())
        .collect();
    (mean, se)
}

fn conditional_mean(seed: u64, samples: usize) -> Result<(bool, String)> {
    let m = instance(3, seed ^ 0x77)?;
    let policy = SoftmaxPolicy::new(&m, 1, MixingSpec::default())?;
    let mut rng = stream_rng(seed, Stream::Verify, 500);
    let params = random_params(&ParamLayout::for_model(&m), &mut rng);
    let est = GradientEstimator::new(&m, policy.clone(), m.validate()?.reward_bound);
    let o = Oracle::new(&m, &policy, Execution::True(&params))?;
    let s: Vec<usize> = (0..3).map(|_| rng.gen_range(0..2)).collect();
    let a: Vec<usize> = (0..3).map(|_| rng.gen_range(0..2)).collect();
    let mut worst_z = 0.0f64;
    for i in 0..3 {
        let target = o.neighbors_averaged_q_table(est.reward_neighborhood(i))?.at(&s, &a);
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..samples {
            let roll = est.continue_from(&m, Execution::True(&params), &s, &a, &mut rng)?;
            let q = est.q_hat(i, &roll.rewards);
            sum += q;
            sum_sq += q * q;
        }
        let (mean, se) = mean_and_se(&[sum], &[sum_sq], samples);
        worst_z = worst_z.max((mean[0] - target).abs() / se[0]);
    }
    Ok((worst_z < 4.0, format!("max |z| {worst_z:.2} over 3 agents, {samples} resamples")))
}

fn unbiasedness(seed: u64, samples: usize) -> Result<(bool, String)> {
    let m = instance(2, seed ^ 0x99)?;
    let policy = SoftmaxPolicy::new(&m, 1, MixingSpec::default())?;
    let layout = ParamLayout::for_model(&m);
    let mut rng = stream_rng(seed, Stream::Verify, 600);
    let rows = (0..2).map(|_| random_params(&layout, &mut rng).as_flat().to_vec()).collect();
    let est_params = EstimatedParams::from_rows(layout.clone(), rows)?;
    let est = GradientEstimator::new(&m, policy.clone(), m.validate()?.reward_bound);
    let targets = (0..2)
        .map(|i| oracle::exact_gradient_thm2_estimates(&m, &policy, &est_params, i))
        .collect::<Result<Vec<_>>>()?;
    let d = layout.total();
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut rollout_rng = SimRng::seed_from_u64(seed);
    for _ in 0..samples {
        let roll = est.rollout(&m, Execution::Estimates(&est_params), &mut rollout_rng)?;
        let g = est.estimate(&roll, &est_params)?;
        for (k, x) in g.grads.concat().iter().enumerate() {
            sum[k] += x;
            sum_sq[k] += x * x;
        }
    }
    let (mean, se) = mean_and_se(&sum, &sum_sq, samples);
    let target = targets.concat();
    let worst_z = (0..d)
        .map(|k| {
            let diff = (mean[k] - target[k]).abs();
            if se[k] > 0.0 {
                diff / se[k]
            } else if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);
    Ok((worst_z < 4.0, format!("max |z| {worst_z:.2} over {d} coordinates, {samples} samples")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let report = run(Level::Quick, 1);
        for c in &report.checks {
            assert!(c.passed || cfg!(feature = "mutate-qhat-sign"), "{}: {}", c.name, c.detail);
        }
        if cfg!(feature = "mutate-qhat-sign") {
            assert!(!report.passed);
        }
    }
}
