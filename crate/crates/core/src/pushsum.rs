//! Push-sum tracking of every agent's parameters.
//!
//! Agent `i` keeps a weight `p_i` and an intermediate copy `breve^i_j` of each
//! agent's parameters. One round mixes both with the column-stochastic `W`,
//! divides to get the estimates `hat^i_j`, and after the local updates
//! injects each parameter change `delta_j` into the rows of `j`'s
//! neighbours with weight `w_ij * N`.

use crate::error::{Error, Result};
use crate::netgraph::WeightMatrix;
use crate::policy::{EstimatedParams, ParamLayout, PolicyParams};

#[derive(Debug, Clone, PartialEq)]
pub struct PushSumState {
    layout: ParamLayout,
    /// `(l, w_il)` for every `l` with `w_il > 0`, ascending.
    incoming: Vec<Vec<(usize, f64)>>,
    p: Vec<f64>,
    breve: Vec<Vec<f64>>,
    hat: EstimatedParams,
}

impl PushSumState {
    /// `p = 1`, `breve = 0`, `hat = 0`.
    pub fn new(layout: ParamLayout, w: &WeightMatrix) -> Result<Self> {
        let n = layout.n();
        if w.n() != n {
            return Err(Error::DimensionMismatch { expected: n, got: w.n() });
        }
        let incoming = (0..n)
            .map(|i| (0..n).filter_map(|l| Some((l, w.get(i, l))).filter(|&(_, x)| x > 0.0)).collect())
            .collect();
        Ok(PushSumState {
            incoming,
            p: vec![1.0; n],
            breve: vec![vec![0.0; layout.total()]; n],
            hat: EstimatedParams::zeros(layout.clone()),
            layout,
        })
    }

    pub fn n(&self) -> usize {
        self.p.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.p
    }

    pub fn estimates(&self) -> &EstimatedParams {
        &self.hat
    }

    /// `breve^i_j`.
    pub fn breve(&self, i: usize, j: usize) -> &[f64] {
        &self.breve[i][self.layout.range(j)]
    }

    pub fn breve_row(&self, i: usize) -> &[f64] {
        &self.breve[i]
    }

    /// Agents whose messages reach `i`.
    pub fn incoming(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.incoming[i].iter().map(|&(l, _)| l)
    }

    /// `sum_l w_il x_l` over the rows `x_l`, reading only `l` with `w_il > 0`.
    fn mix_row(&self, i: usize, rows: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; self.layout.total()];
        for &(l, w) in &self.incoming[i] {
            for (o, x) in out.iter_mut().zip(&rows[l]) {
                *o += w * x;
            }
        }
        out
    }

    /// `p <- W p`, then `hat^i = (W breve)_i / p_i`. `breve` is unchanged.
    pub fn mix_and_estimate(&mut self) -> Result<()> {
        let n = self.n();
        let new_p: Vec<f64> = (0..n)
            .map(|i| self.incoming[i].iter().map(|&(l, w)| w * self.p[l]).sum())
            .collect();
        if let Some((agent, &value)) = new_p.iter().enumerate().find(|(_, &x)| !(x > 0.0)) {
            return Err(Error::NonPositiveWeight { agent, value });
        }
        for i in 0..n {
            let mixed = self.mix_row(i, &self.breve);
            let row = self.hat.row_flat_mut(i);
            for (h, m) in row.iter_mut().zip(mixed) {
                *h = m / new_p[i];
            }
        }
        self.p = new_p;
        Ok(())
    }

    /// New `breve` row of agent `i` given the previous round's rows and
    /// every agent's parameter change. Reads `rows[l]` and `deltas[l]` only
    /// for `l` with `w_il > 0`.
    pub fn agent_round(&self, i: usize, rows: &[Vec<f64>], deltas: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut out = self.mix_row(i, rows);
        let n = self.n() as f64;
        for &(j, w) in &self.incoming[i] {
            let range = self.layout.range(j);
            let delta = &deltas[j];
            if delta.len() != range.len() {
                return Err(Error::DimensionMismatch { expected: range.len(), got: delta.len() });
            }
            for (o, d) in out[range].iter_mut().zip(delta) {
                *o += w * n * d;
            }
        }
        Ok(out)
    }

    /// Synchronous injection of every agent's change `deltas[j]`.
    pub fn inject_all(&mut self, deltas: &[Vec<f64>]) -> Result<()> {
        if deltas.len() != self.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), got: deltas.len() });
        }
        if deltas.iter().flatten().any(|d| !d.is_finite()) {
            return Err(Error::InvariantViolated("non-finite parameter change".into()));
        }
        let rows = (0..self.n())
            .map(|i| self.agent_round(i, &self.breve, deltas))
            .collect::<Result<Vec<_>>>()?;
        self.breve = rows;
        Ok(())
    }

    /// Injection for a single column `j`; the other columns are untouched.
    pub fn inject(&mut self, j: usize, delta: &[f64]) -> Result<()> {
        let range = self.layout.range(j);
        if delta.len() != range.len() {
            return Err(Error::DimensionMismatch { expected: range.len(), got: delta.len() });
        }
        let n = self.n();
        let column: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut out = vec![0.0; range.len()];
                for &(l, w) in &self.incoming[i] {
                    for (o, x) in out.iter_mut().zip(&self.breve[l][range.clone()]) {
                        *o += w * x;
                    }
                }
                if let Some(&(_, w)) = self.incoming[i].iter().find(|&&(l, _)| l == j) {
                    for (o, d) in out.iter_mut().zip(delta) {
                        *o += w * n as f64 * d;
                    }
                }
                out
            })
            .collect();
        for (i, col) in column.into_iter().enumerate() {
            self.breve[i][range.clone()].copy_from_slice(&col);
        }
        Ok(())
    }

    /// `max_{i,j} ||hat^i_j - theta_j||`.
    pub fn consensus_error(&self, truth: &PolicyParams) -> f64 {
        self.errors(truth).fold(0.0, f64::max)
    }

    /// Mean of `||hat^i_j - theta_j||` over all pairs.
    pub fn mean_consensus_error(&self, truth: &PolicyParams) -> f64 {
        let n = self.n();
        self.errors(truth).sum::<f64>() / (n * n) as f64
    }

    fn errors<'a>(&'a self, truth: &'a PolicyParams) -> impl Iterator<Item = f64> + 'a {
        let n = self.n();
        (0..n).flat_map(move |i| {
            (0..n).map(move |j| {
                self.hat
                    .get(i, j)
                    .iter()
                    .zip(truth.agent(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
        })
    }

    /// `sum_i p_i = N` and `(1/N) sum_i breve^i_j = theta_j`, both within `tol`.
    pub fn check_invariants(&self, truth: &PolicyParams, tol: f64) -> Result<()> {
        let n = self.n();
        let mass: f64 = self.p.iter().sum();
        if (mass - n as f64).abs() > tol {
            return Err(Error::InvariantViolated(format!("push-sum mass {mass} != {n}")));
        }
        for k in 0..self.layout.total() {
            let mean = self.breve.iter().map(|row| row[k]).sum::<f64>() / n as f64;
            let target = truth.as_flat()[k];
            if (mean - target).abs() > tol {
                return Err(Error::InvariantViolated(format!(
                    "column average {mean} of coordinate {k} differs from {target}"
                )));
            }
        }
        Ok(())
    }
}
