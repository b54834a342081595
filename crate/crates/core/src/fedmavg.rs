//! FedMAvg baseline.
//!
//! Each sampled client takes `Q1` gradient steps on `U_i` against the
//! broadcast `V^k`, then `Q2` gradient steps on a local copy `W_i` started at
//! `V^k`; the server replaces `V` by the mean of the returned `W_i`. Clients
//! outside the sample are untouched.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::admm::{check_blocks, init_factors, SamplingPolicy};
use crate::data::MaskedMatrix;
use crate::exec::Execution;
use crate::kernels::{grad_u, grad_v, spectral_max, LIPSCHITZ_FLOOR, SPECTRAL_MAX_ITERS, SPECTRAL_TOL};
use crate::{Error, Matrix, Result};

/// How the U-step denominator `c^k` is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum StepRule {
    /// `5·λ_max(V Vᵀ) + λ`.
    #[default]
    Spectral,
    Fixed { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedMAvgParams {
    pub q1: usize,
    pub q2: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub c_rule: StepRule,
    pub rounds: usize,
    pub rank: usize,
    pub init_seed: u64,
}

impl FedMAvgParams {
    pub fn validate(&self) -> Result<()> {
        if self.q1 == 0 || self.q2 == 0 {
            return Err(Error::Config("Q1 and Q2 must be >= 1".into()));
        }
        if self.rounds == 0 || self.rank == 0 {
            return Err(Error::Config("rounds and rank must be >= 1".into()));
        }
        for (name, x) in [("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(x.is_finite() && x >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {x}")));
            }
        }
        if let StepRule::Fixed { value } = self.c_rule {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Config(format!("fixed step denominator must be > 0, got {value}")));
            }
        }
        Ok(())
    }
}

fn gram_lambda_max(a: &Matrix) -> Result<f64> {
    Ok(spectral_max(a, SPECTRAL_TOL, SPECTRAL_MAX_ITERS)?.max(LIPSCHITZ_FLOOR))
}

/// `c^k` for the given broadcast `V`.
pub fn u_step_denominator(v: &Matrix, lambda: f64, rule: StepRule) -> Result<f64> {
    match rule {
        StepRule::Spectral => Ok(5.0 * gram_lambda_max(&v.dot(&v.t()))? + lambda),
        StepRule::Fixed { value } => Ok(value),
    }
}

/// `d_i^k = 5·λ_max(UᵀU)`.
pub fn w_step_denominator(u: &Matrix) -> Result<f64> {
    Ok(5.0 * gram_lambda_max(&u.t().dot(u))?)
}

fn ensure_finite(x: &Matrix, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} has non-finite entries")))
    }
}

/// `Q1` steps `U ← U − [P_Ω(UV − M)Vᵀ + λU]/c`.
pub fn fedmavg_u_update(
    data: &MaskedMatrix,
    u: &Matrix,
    v: &Matrix,
    q1: usize,
    lambda: f64,
    rule: StepRule,
) -> Result<Matrix> {
    let c = u_step_denominator(v, lambda, rule)?;
    let mut cur = u.clone();
    for _ in 0..q1 {
        let g = grad_u(data, &cur, v);
        Zip::from(&mut cur).and(&g).for_each(|x, &gx| *x -= (gx + lambda * *x) / c);
        ensure_finite(&cur, "U")?;
    }
    Ok(cur)
}

/// `Q2` steps `W ← W − [UᵀP_Ω(UW − M)/p + γW]/d` from `W = V`.
pub fn fedmavg_w_update(
    data: &MaskedMatrix,
    u: &Matrix,
    v: &Matrix,
    q2: usize,
    gamma: f64,
    p: usize,
) -> Result<Matrix> {
    let d = w_step_denominator(u)?;
    let inv_p = 1.0 / p as f64;
    let mut cur = v.clone();
    for _ in 0..q2 {
        let g = grad_v(data, u, &cur);
        Zip::from(&mut cur)
            .and(&g)
            .for_each(|x, &gx| *x -= (gx * inv_p + gamma * *x) / d);
        ensure_finite(&cur, "W")?;
    }
    Ok(cur)
}

/// Arithmetic mean of the sampled clients' `W`.
pub fn fedmavg_server_update(ws: &[&Matrix]) -> Result<Matrix> {
    let first = ws
        .first()
        .ok_or_else(|| Error::Config("server average needs at least one client".into()))?;
    let mut acc = Array2::zeros(first.raw_dim());
    for w in ws {
        acc += *w;
    }
    Ok(acc / ws.len() as f64)
}

/// Outcome of one FedMAvg round.
#[derive(Clone, Debug)]
pub struct FedMAvgRound {
    pub round: usize,
    pub sampled: Vec<usize>,
    pub v_prev: Matrix,
}

#[derive(Clone, Debug)]
pub struct FedMAvg {
    data: Vec<MaskedMatrix>,
    us: Vec<Matrix>,
    v: Matrix,
    params: FedMAvgParams,
    policy: SamplingPolicy,
    execution: Execution,
    round: usize,
}

impl FedMAvg {
    /// Initial factors are drawn exactly as for FedMC-ADMM under the same seed.
    pub fn new(
        data: Vec<MaskedMatrix>,
        params: FedMAvgParams,
        policy: SamplingPolicy,
        execution: Execution,
    ) -> Result<Self> {
        params.validate()?;
        check_blocks(&data)?;
        policy.validate(data.len())?;
        let (v, us) = init_factors(&data, params.rank, params.init_seed);
        Ok(FedMAvg {
            data,
            us,
            v,
            params,
            policy,
            execution,
            round: 0,
        })
    }

    /// Rebuilds an engine around existing iterates.
    pub fn from_parts(
        data: Vec<MaskedMatrix>,
        us: Vec<Matrix>,
        v: Matrix,
        round: usize,
        params: FedMAvgParams,
        policy: SamplingPolicy,
        execution: Execution,
    ) -> Result<Self> {
        params.validate()?;
        let n = check_blocks(&data)?;
        policy.validate(data.len())?;
        let r = params.rank;
        if us.len() != data.len()
            || v.dim() != (r, n)
            || data.iter().zip(&us).any(|(m, u)| u.dim() != (m.rows(), r))
        {
            return Err(Error::Dimension("factor shapes do not match the data blocks".into()));
        }
        Ok(FedMAvg {
            data,
            us,
            v,
            params,
            policy,
            execution,
            round,
        })
    }

    pub fn data(&self) -> &[MaskedMatrix] {
        &self.data
    }

    pub fn u_blocks(&self) -> &[Matrix] {
        &self.us
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn params(&self) -> &FedMAvgParams {
        &self.params
    }

    pub fn policy(&self) -> &SamplingPolicy {
        &self.policy
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn set_execution(&mut self, execution: Execution) {
        self.execution = execution;
    }

    pub fn step(&mut self) -> Result<FedMAvgRound> {
        let round = self.round;
        let p = self.data.len();
        let sampled = self.policy.sample(p, round);
        let prm = &self.params;
        let updates = self.execution.map(sampled.len(), |s| -> Result<(Matrix, Matrix)> {
            let i = sampled[s];
            let m = &self.data[i];
            let u = fedmavg_u_update(m, &self.us[i], &self.v, prm.q1, prm.lambda, prm.c_rule)?;
            let w = fedmavg_w_update(m, &u, &self.v, prm.q2, prm.gamma, p)?;
            Ok((u, w))
        });
        let mut ws = Vec::with_capacity(sampled.len());
        let mut new_us = Vec::with_capacity(sampled.len());
        for (&i, up) in sampled.iter().zip(updates) {
            let (u, w) = up.map_err(|e| Error::Divergence {
                round,
                client: Some(i),
                what: e.to_string(),
            })?;
            new_us.push((i, u));
            ws.push(w);
        }
        let v_new = fedmavg_server_update(&ws.iter().collect::<Vec<_>>())?;
        for (i, u) in new_us {
            self.us[i] = u;
        }
        let v_prev = std::mem::replace(&mut self.v, v_new);
        self.round += 1;
        Ok(FedMAvgRound {
            round,
            sampled,
            v_prev,
        })
    }
}
