//! Versioned JSON checkpoints.
//!
//! Floats are written in shortest round-trip form and parsed back exactly, so
//! a checkpoint restores the iterates bit for bit. The sampler keeps no
//! running state: round `k`'s subset is a function of `(seed, k)`, so the
//! stored policy and round counter are enough to continue the stream.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Algo, RunConfig};
use crate::admm::{ClientState, EngineOptions, FedMcAdmm, HyperParams, SamplingPolicy, ServerState};
use crate::data::MaskedMatrix;
use crate::exec::Execution;
use crate::fedmavg::{FedMAvg, FedMAvgParams};
use crate::{Error, Matrix, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algo", rename_all = "kebab-case")]
pub enum EngineState {
    FedmcAdmm {
        hyper_params: HyperParams,
        server: ServerState,
        clients: Vec<ClientState>,
    },
    Fedmavg {
        params: FedMAvgParams,
        v: Matrix,
        u_blocks: Vec<Matrix>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub round: usize,
    pub sampling: SamplingPolicy,
    pub config: RunConfig,
    pub state: EngineState,
}

impl Checkpoint {
    pub fn from_admm(engine: &FedMcAdmm, config: &RunConfig) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            round: engine.round(),
            sampling: engine.policy().clone(),
            config: config.clone(),
            state: EngineState::FedmcAdmm {
                hyper_params: engine.hyper_params().clone(),
                server: engine.server().clone(),
                clients: engine.clients().to_vec(),
            },
        }
    }

    pub fn from_fedmavg(engine: &FedMAvg, config: &RunConfig) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            round: engine.round(),
            sampling: engine.policy().clone(),
            config: config.clone(),
            state: EngineState::Fedmavg {
                params: engine.params().clone(),
                v: engine.v().clone(),
                u_blocks: engine.u_blocks().to_vec(),
            },
        }
    }

    pub fn algo(&self) -> Algo {
        match self.state {
            EngineState::FedmcAdmm { .. } => Algo::FedmcAdmm,
            EngineState::Fedmavg { .. } => Algo::Fedmavg,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            version: u32,
        }
        let probe: Probe = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        if probe.version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                probe.version
            )));
        }
        serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::metrics::write_text(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Rebuilds the FedMC-ADMM engine over the same client data.
    pub fn restore_admm(&self, data: Vec<MaskedMatrix>, opts: EngineOptions) -> Result<FedMcAdmm> {
        match &self.state {
            EngineState::FedmcAdmm {
                hyper_params,
                server,
                clients,
            } => FedMcAdmm::from_parts(
                data,
                clients.clone(),
                server.clone(),
                hyper_params.clone(),
                self.sampling.clone(),
                opts,
            ),
            EngineState::Fedmavg { .. } => Err(Error::Config("checkpoint holds a FedMAvg run".into())),
        }
    }

    pub fn restore_fedmavg(&self, data: Vec<MaskedMatrix>, execution: Execution) -> Result<FedMAvg> {
        match &self.state {
            EngineState::Fedmavg { params, v, u_blocks } => FedMAvg::from_parts(
                data,
                u_blocks.clone(),
                v.clone(),
                self.round,
                params.clone(),
                self.sampling.clone(),
                execution,
            ),
            EngineState::FedmcAdmm { .. } => Err(Error::Config("checkpoint holds a FedMC-ADMM run".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::partition_clients;
    use crate::kernels::RegularizerSpec;

    fn engine() -> FedMcAdmm {
        let mut t = Vec::new();
        for i in 0..9 {
            for j in 0..5 {
                if (i + 2 * j) % 3 != 0 {
                    t.push((i, j, ((i * j) % 5) as f64 / 3.0));
                }
            }
        }
        let m = MaskedMatrix::from_triplets(9, 5, t).unwrap();
        let blocks = partition_clients(&m, 3, None).unwrap().blocks;
        let hp = HyperParams {
            inner_iters: 3,
            beta: 1.5,
            reg: RegularizerSpec::ridge(1e-3, 1e-3),
            rounds: 10,
            rank: 2,
            init_seed: 5,
        };
        FedMcAdmm::new(blocks, hp, SamplingPolicy::fixed(2, 9), EngineOptions::default()).unwrap()
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut eng = engine();
        for _ in 0..3 {
            eng.step().unwrap();
        }
        let cp = Checkpoint::from_admm(&eng, &RunConfig::default());
        let back = Checkpoint::from_json(&cp.to_json().unwrap()).unwrap();
        assert_eq!(back, cp);
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let mut straight = engine();
        for _ in 0..6 {
            straight.step().unwrap();
        }
        let mut first = engine();
        for _ in 0..3 {
            first.step().unwrap();
        }
        let text = Checkpoint::from_admm(&first, &RunConfig::default()).to_json().unwrap();
        let cp = Checkpoint::from_json(&text).unwrap();
        let mut resumed = cp.restore_admm(first.data().to_vec(), EngineOptions::default()).unwrap();
        for _ in 0..3 {
            resumed.step().unwrap();
        }
        assert_eq!(resumed.server(), straight.server());
        assert_eq!(resumed.clients(), straight.clients());
    }

    #[test]
    fn wrong_version_rejected() {
        let cp = Checkpoint::from_admm(&engine(), &RunConfig::default());
        let text = cp.to_json().unwrap().replacen("\"version\":1", "\"version\":99", 1);
        assert!(matches!(Checkpoint::from_json(&text), Err(Error::Serde(_))));
    }
}
