//! Run driver: data preparation, the round loop with metric evaluation, and
//! persistence of metrics, checkpoint and id map.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod synth;

use std::path::PathBuf;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::admm::{beta_lower_bound, beta_sufficient_bound, BetaBoundInputs, EngineOptions, FedMcAdmm, HyperParams, LipschitzStats};
use crate::data::{load_ratings, partition_clients, split_train_test, subsample_row_indices, MaskedMatrix};
use crate::diagnostics::{
    augmented_lagrangian_with, consensus_gap, objective_with, rmse_with, stacked_nnz_fraction, stationarity_residual,
    DescentTracker, RoundRecord,
};
use crate::fedmavg::{FedMAvg, FedMAvgParams};
use crate::kernels::frob_dist_sq;
use crate::{Error, Result};

pub use checkpoint::Checkpoint;
pub use config::{Algo, Overrides, RunConfig, SyntheticSpec};
pub use synth::{generate_synthetic, GroundTruth, SyntheticData};

/// Original ids of the rows (in client-block order) and columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdMap {
    pub users: Vec<u64>,
    pub items: Vec<u64>,
}

/// Client blocks of the training and test sides.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<MaskedMatrix>,
    pub test: Vec<MaskedMatrix>,
    pub idmap: Option<IdMap>,
    pub truth: Option<GroundTruth>,
}

/// load or generate → optional user subsample → split → partition.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let (matrix, ids, truth) = match (&cfg.dataset, &cfg.synthetic) {
        (Some(ds), None) => {
            let r = load_ratings(&ds.path, ds.format)?;
            if r.duplicates > 0 {
                warn!("{}: {} duplicate ratings replaced by later ones", ds.path.display(), r.duplicates);
            }
            (r.matrix, Some((r.user_ids, r.item_ids)), None)
        }
        (None, Some(spec)) => {
            let s = generate_synthetic(spec)?;
            (s.matrix, None, Some(s.truth))
        }
        _ => return Err(Error::Config("give exactly one of dataset and synthetic".into())),
    };
    let (matrix, kept) = match cfg.subsample_users {
        Some(count) if count < matrix.rows() => {
            let kept = subsample_row_indices(matrix.rows(), count, cfg.seeds.subsample);
            (matrix.select_rows(&kept), kept)
        }
        _ => {
            let all = (0..matrix.rows()).collect();
            (matrix, all)
        }
    };
    let truth = truth.map(|t| GroundTruth {
        u: t.u.select(ndarray::Axis(0), &kept),
        v: t.v,
    });
    let split = split_train_test(&matrix, cfg.train_fraction, cfg.seeds.split)?;
    let part = partition_clients(&split.train, cfg.clients, cfg.seeds.shuffle)?;
    let test = part.split_like(&split.test)?;
    let truth = truth.map(|t| GroundTruth {
        u: t.u.select(ndarray::Axis(0), &part.row_order),
        v: t.v,
    });
    let idmap = ids.map(|(users, items)| IdMap {
        users: part.row_order.iter().map(|&r| users[kept[r]]).collect(),
        items,
    });
    Ok(PreparedData {
        train: part.blocks,
        test,
        idmap,
        truth,
    })
}

/// The penalty-threshold diagnostic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaCheck {
    pub beta: f64,
    pub inputs: BetaBoundInputs,
    /// The stated threshold (minimum of the two terms).
    pub lower_bound: f64,
    /// Maximum of the two terms.
    pub sufficient_bound: f64,
}

impl BetaCheck {
    pub fn new(beta: f64, inputs: BetaBoundInputs) -> Self {
        BetaCheck {
            beta,
            inputs,
            lower_bound: beta_lower_bound(&inputs),
            sufficient_bound: beta_sufficient_bound(&inputs),
        }
    }

    pub fn below_bound(&self) -> bool {
        self.beta <= self.lower_bound
    }

    /// Warning text when `β` does not exceed the threshold.
    pub fn warning(&self) -> Option<String> {
        self.below_bound().then(|| {
            format!(
                "beta = {} is not above the convergence threshold {:.6e} (both terms exceeded above {:.6e})",
                self.beta, self.lower_bound, self.sufficient_bound
            )
        })
    }
}

/// Everything a run measured, in memory.
#[derive(Clone, Debug)]
pub struct RunReport {
    /// Rows for rounds `0..=K`.
    pub records: Vec<RoundRecord>,
    /// Threshold check at the initial iterates (FedMC-ADMM only).
    pub initial_beta: Option<BetaCheck>,
    /// Threshold check from the run's extreme constants.
    pub final_beta: Option<BetaCheck>,
    /// Largest dual-identity error over all rounds and clients.
    pub dual_identity_max: Option<f64>,
    pub descent: Option<DescentTracker>,
    pub lipschitz: Option<LipschitzStats>,
    pub checkpoint: Checkpoint,
}

impl RunReport {
    /// `L̂^0..L̂^K` evaluated with the largest cross-Lipschitz estimate seen.
    pub fn descent_surrogate(&self) -> Option<Vec<f64>> {
        let (d, l, b) = (self.descent.as_ref()?, self.lipschitz?, self.final_beta?);
        Some(d.surrogate(l.cross_max, b.inputs.inner_iters, b.beta))
    }
}

fn admm_record(
    eng: &FedMcAdmm,
    test: &[MaskedMatrix],
    cfg: &RunConfig,
    round: usize,
    sampled: Vec<usize>,
    wall_time_s: f64,
) -> Result<RoundRecord> {
    let exec = cfg.execution;
    let data = eng.data();
    let clients = eng.clients();
    let v = &eng.server().v;
    let reg = &eng.hyper_params().reg;
    let beta = eng.server().beta;
    let us: Vec<_> = clients.iter().map(|c| c.u.clone()).collect();
    let stationarity_sq = if round.is_multiple_of(cfg.eval_every) {
        stationarity_residual(data, clients, v, beta, reg, exec)?
    } else {
        f64::NAN
    };
    Ok(RoundRecord {
        round,
        wall_time_s,
        objective: objective_with(data, &us, v, reg, exec),
        rmse_test: rmse_with(test, &us, v, exec)?,
        aug_lagrangian: augmented_lagrangian_with(data, clients, v, beta, reg, exec),
        consensus_gap: consensus_gap(clients, v),
        stationarity_sq,
        nnz_u: stacked_nnz_fraction(&us, 0.0),
        nnz_v: crate::diagnostics::nnz_fraction(v, 0.0),
        sampled,
    })
}

fn simulate_admm(cfg: &RunConfig, data: &PreparedData) -> Result<RunReport> {
    let hp = HyperParams {
        inner_iters: cfg.admm.inner_iters,
        beta: cfg.admm.beta,
        reg: cfg.reg.spec(),
        rounds: cfg.rounds,
        rank: cfg.rank,
        init_seed: cfg.seeds.init,
    };
    let opts = EngineOptions {
        execution: cfg.execution,
        verify_dual_identity: cfg.admm.verify_dual_identity,
        track_cross_lipschitz: true,
    };
    let mut eng = FedMcAdmm::new(data.train.clone(), hp, cfg.sampling_policy(), opts)?;
    let initial = BetaCheck::new(cfg.admm.beta, eng.beta_bound_inputs()?);
    if let Some(w) = initial.warning() {
        warn!("{w}");
    }

    let mut records = vec![admm_record(&eng, &data.test, cfg, 0, Vec::new(), 0.0)?];
    let mut descent = DescentTracker::new(records[0].aug_lagrangian);
    let mut dual_max: Option<f64> = None;
    for _ in 0..cfg.rounds {
        let t0 = Instant::now();
        let out = eng.step()?;
        let elapsed = t0.elapsed().as_secs_f64();
        if let Some(e) = out.dual_identity_error {
            dual_max = Some(dual_max.map_or(e, |m| m.max(e)));
        }
        let rec = admm_record(&eng, &data.test, cfg, out.round + 1, out.sampled, elapsed)?;
        descent.record(rec.aug_lagrangian, frob_dist_sq(&eng.server().v, &out.v_prev), eng.traces());
        records.push(rec);
    }
    let final_beta = BetaCheck::new(cfg.admm.beta, eng.running_beta_bound_inputs());
    if let Some(w) = final_beta.warning() {
        warn!("with the constants observed during the run: {w}");
    }
    Ok(RunReport {
        records,
        initial_beta: Some(initial),
        final_beta: Some(final_beta),
        dual_identity_max: dual_max,
        descent: Some(descent),
        lipschitz: Some(eng.lipschitz_stats()),
        checkpoint: Checkpoint::from_admm(&eng, cfg),
    })
}

fn fedmavg_record(
    eng: &FedMAvg,
    test: &[MaskedMatrix],
    cfg: &RunConfig,
    round: usize,
    sampled: Vec<usize>,
    wall_time_s: f64,
) -> Result<RoundRecord> {
    let reg = cfg.reg.spec();
    let us = eng.u_blocks();
    let v = eng.v();
    Ok(RoundRecord {
        round,
        wall_time_s,
        objective: objective_with(eng.data(), us, v, &reg, cfg.execution),
        rmse_test: rmse_with(test, us, v, cfg.execution)?,
        aug_lagrangian: f64::NAN,
        consensus_gap: f64::NAN,
        stationarity_sq: f64::NAN,
        nnz_u: stacked_nnz_fraction(us, 0.0),
        nnz_v: crate::diagnostics::nnz_fraction(v, 0.0),
        sampled,
    })
}

fn simulate_fedmavg(cfg: &RunConfig, data: &PreparedData) -> Result<RunReport> {
    let params = FedMAvgParams {
        q1: cfg.fedmavg.q1,
        q2: cfg.fedmavg.q2,
        lambda: cfg.reg.lambda,
        gamma: cfg.reg.gamma,
        c_rule: cfg.fedmavg.step_rule(),
        rounds: cfg.rounds,
        rank: cfg.rank,
        init_seed: cfg.seeds.init,
    };
    let mut eng = FedMAvg::new(data.train.clone(), params, cfg.sampling_policy(), cfg.execution)?;
    let mut records = vec![fedmavg_record(&eng, &data.test, cfg, 0, Vec::new(), 0.0)?];
    for _ in 0..cfg.rounds {
        let t0 = Instant::now();
        let out = eng.step()?;
        let elapsed = t0.elapsed().as_secs_f64();
        records.push(fedmavg_record(&eng, &data.test, cfg, out.round + 1, out.sampled, elapsed)?);
    }
    Ok(RunReport {
        records,
        initial_beta: None,
        final_beta: None,
        dual_identity_max: None,
        descent: None,
        lipschitz: None,
        checkpoint: Checkpoint::from_fedmavg(&eng, cfg),
    })
}

/// Runs the configured algorithm on prepared data without touching disk.
pub fn simulate(cfg: &RunConfig, data: &PreparedData) -> Result<RunReport> {
    cfg.validate()?;
    match cfg.algo {
        Algo::FedmcAdmm => simulate_admm(cfg, data),
        Algo::Fedmavg => simulate_fedmavg(cfg, data),
    }
}

/// Paths written by [`run`].
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub metrics: PathBuf,
    pub smoothed: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub idmap: Option<PathBuf>,
}

/// The full pipeline, persisting metrics, checkpoint and (for real data) the
/// id map.
pub fn run(cfg: &RunConfig) -> Result<(RunReport, RunOutputs)> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    info!(
        "{} clients, {} training and {} test entries",
        data.train.len(),
        data.train.iter().map(MaskedMatrix::nnz).sum::<usize>(),
        data.test.iter().map(MaskedMatrix::nnz).sum::<usize>()
    );
    let report = simulate(cfg, &data)?;

    metrics::write_text(&cfg.out, &metrics::render_metrics(&report.records, cfg.record_wall_time))?;
    let smoothed = match cfg.smoothing_window {
        Some(w) => {
            let path = config::sibling(&cfg.out, "smoothed.csv");
            metrics::write_text(&path, &metrics::render_smoothed(&report.records, cfg.record_wall_time, w))?;
            Some(path)
        }
        None => None,
    };
    let checkpoint = cfg.checkpoint_path();
    report.checkpoint.save(&checkpoint)?;
    let idmap = match &data.idmap {
        Some(map) => {
            let path = config::sibling(&cfg.out, "idmap.json");
            let text = serde_json::to_string(map).map_err(|e| Error::Serde(e.to_string()))?;
            metrics::write_text(&path, &text)?;
            Some(path)
        }
        None => None,
    };
    Ok((
        report,
        RunOutputs {
            metrics: cfg.out.clone(),
            smoothed,
            checkpoint,
            idmap,
        },
    ))
}

/// Validates a config and computes the penalty threshold at the initial
/// iterates (FedMC-ADMM only).
pub fn check(cfg: &RunConfig) -> Result<Option<BetaCheck>> {
    cfg.validate()?;
    if cfg.algo != Algo::FedmcAdmm {
        return Ok(None);
    }
    let data = prepare_data(cfg)?;
    let hp = HyperParams {
        inner_iters: cfg.admm.inner_iters,
        beta: cfg.admm.beta,
        reg: cfg.reg.spec(),
        rounds: cfg.rounds,
        rank: cfg.rank,
        init_seed: cfg.seeds.init,
    };
    let opts = EngineOptions {
        execution: cfg.execution,
        ..Default::default()
    };
    let eng = FedMcAdmm::new(data.train, hp, cfg.sampling_policy(), opts)?;
    Ok(Some(BetaCheck::new(cfg.admm.beta, eng.beta_bound_inputs()?)))
}
