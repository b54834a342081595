//! Run configuration: a TOML file with every field overridable from the CLI.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::admm::{SamplingMode, SamplingPolicy};
use crate::data::RatingsFormat;
use crate::exec::Execution;
use crate::fedmavg::StepRule;
use crate::kernels::{RegKind, RegularizerSpec};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    #[default]
    FedmcAdmm,
    Fedmavg,
}

impl std::str::FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedmc-admm" => Ok(Algo::FedmcAdmm),
            "fedmavg" => Ok(Algo::Fedmavg),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algo::FedmcAdmm => "fedmc-admm",
            Algo::Fedmavg => "fedmavg",
        })
    }
}

/// Low-rank synthetic data `M = U*V* + σ·noise`, observed at density `ρ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub m: usize,
    pub n: usize,
    /// True rank `r*`.
    pub rank: usize,
    pub density: f64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.rank == 0 {
            return Err(Error::Config("synthetic m, n and rank must be >= 1".into()));
        }
        if self.rank > self.m.min(self.n) {
            return Err(Error::Config(format!(
                "synthetic rank {} exceeds min(m, n) = {}",
                self.rank,
                self.m.min(self.n)
            )));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("density must lie in (0, 1], got {}", self.density)));
        }
        if self.density * ((self.m * self.n) as f64) < 1.0 {
            return Err(Error::Config("density too low to observe a single entry".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: RatingsFormat,
}

fn default_format() -> RatingsFormat {
    RatingsFormat::TripletCsv
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    pub kind: RegKind,
    pub lambda: f64,
    pub gamma: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig {
            kind: RegKind::Ridge,
            lambda: 1e-6,
            gamma: 1e-6,
        }
    }
}

impl RegConfig {
    pub fn spec(&self) -> RegularizerSpec {
        RegularizerSpec {
            kind: self.kind,
            lambda: self.lambda,
            gamma: self.gamma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmmConfig {
    pub beta: f64,
    pub inner_iters: usize,
    /// Fail the run if the dual identity is violated.
    pub verify_dual_identity: bool,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            beta: 0.1,
            inner_iters: 10,
            verify_dual_identity: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedMAvgConfig {
    pub q1: usize,
    pub q2: usize,
    /// Fixed U-step denominator; the spectral rule when absent.
    pub c: Option<f64>,
}

impl Default for FedMAvgConfig {
    fn default() -> Self {
        FedMAvgConfig {
            q1: 10,
            q2: 10,
            c: None,
        }
    }
}

impl FedMAvgConfig {
    pub fn step_rule(&self) -> StepRule {
        match self.c {
            Some(value) => StepRule::Fixed { value },
            None => StepRule::Spectral,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "mode", rename_all = "kebab-case")]
pub enum SamplingConfig {
    FixedSize { size: usize },
    Bernoulli { probs: Vec<f64> },
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig::FixedSize { size: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub split: u64,
    pub init: u64,
    pub sample: u64,
    /// Row shuffle before client blocking; no shuffle when absent.
    pub shuffle: Option<u64>,
    pub subsample: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            split: 1,
            init: 2,
            sample: 3,
            shuffle: None,
            subsample: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub algo: Algo,
    pub dataset: Option<DatasetSource>,
    pub synthetic: Option<SyntheticSpec>,
    /// Keep a uniformly random subset of this many users before splitting.
    pub subsample_users: Option<usize>,
    pub train_fraction: f64,
    pub clients: usize,
    pub rank: usize,
    pub rounds: usize,
    pub reg: RegConfig,
    pub admm: AdmmConfig,
    pub fedmavg: FedMAvgConfig,
    pub sampling: SamplingConfig,
    pub seeds: Seeds,
    /// Stationarity residual every this many rounds (and at round 0).
    pub eval_every: usize,
    pub execution: Execution,
    /// Metrics CSV path.
    pub out: PathBuf,
    /// Checkpoint path; `<out>.checkpoint.json` when absent.
    pub checkpoint: Option<PathBuf>,
    /// Write measured per-round time instead of 0 in the CSV. Off by default
    /// so identical configs give identical bytes.
    pub record_wall_time: bool,
    /// Also write `<out stem>.smoothed.csv` with trailing means over this
    /// many rounds.
    pub smoothing_window: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            algo: Algo::FedmcAdmm,
            dataset: None,
            synthetic: None,
            subsample_users: None,
            train_fraction: 0.8,
            clients: 100,
            rank: 5,
            rounds: 100,
            reg: RegConfig::default(),
            admm: AdmmConfig::default(),
            fedmavg: FedMAvgConfig::default(),
            sampling: SamplingConfig::default(),
            seeds: Seeds::default(),
            eval_every: 10,
            execution: Execution::default(),
            out: PathBuf::from("metrics.csv"),
            checkpoint: None,
            record_wall_time: false,
            smoothing_window: None,
        }
    }
}

/// Command-line overrides; `None` leaves the file value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub algo: Option<Algo>,
    pub reg: Option<RegKind>,
    pub beta: Option<f64>,
    /// Sets `N` and `Q1 = Q2`.
    pub inner_iters: Option<usize>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub clients: Option<usize>,
    pub sample_size: Option<usize>,
    pub rank: Option<usize>,
    pub rounds: Option<usize>,
    pub seed_split: Option<u64>,
    pub seed_init: Option<u64>,
    pub seed_sample: Option<u64>,
    pub eval_every: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Reads a config file; relative data and output paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(ds) = cfg.dataset.as_mut() {
            rebase(&mut ds.path);
        }
        rebase(&mut cfg.out);
        if let Some(c) = cfg.checkpoint.as_mut() {
            rebase(c);
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(a) = o.algo {
            self.algo = a;
        }
        if let Some(k) = o.reg {
            self.reg.kind = k;
        }
        if let Some(b) = o.beta {
            self.admm.beta = b;
        }
        if let Some(n) = o.inner_iters {
            self.admm.inner_iters = n;
            self.fedmavg.q1 = n;
            self.fedmavg.q2 = n;
        }
        if let Some(l) = o.lambda {
            self.reg.lambda = l;
        }
        if let Some(g) = o.gamma {
            self.reg.gamma = g;
        }
        if let Some(p) = o.clients {
            self.clients = p;
        }
        if let Some(s) = o.sample_size {
            self.sampling = SamplingConfig::FixedSize { size: s };
        }
        if let Some(r) = o.rank {
            self.rank = r;
        }
        if let Some(k) = o.rounds {
            self.rounds = k;
        }
        if let Some(s) = o.seed_split {
            self.seeds.split = s;
        }
        if let Some(s) = o.seed_init {
            self.seeds.init = s;
        }
        if let Some(s) = o.seed_sample {
            self.seeds.sample = s;
        }
        if let Some(e) = o.eval_every {
            self.eval_every = e;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
    }

    pub fn sampling_policy(&self) -> SamplingPolicy {
        let mode = match &self.sampling {
            SamplingConfig::FixedSize { size } => SamplingMode::FixedSize { size: *size },
            SamplingConfig::Bernoulli { probs } => SamplingMode::Bernoulli { probs: probs.clone() },
        };
        SamplingPolicy {
            mode,
            seed: self.seeds.sample,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| sibling(&self.out, "checkpoint.json"))
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        match (&self.dataset, &self.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("give either a dataset or a synthetic spec, not both".into()))
            }
            (None, None) => return Err(Error::Config("no dataset or synthetic spec given".into())),
            (None, Some(s)) => s.validate()?,
            (Some(_), None) => {}
        }
        if self.clients == 0 {
            return Err(Error::Config("clients must be >= 1".into()));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be >= 1".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.subsample_users == Some(0) {
            return Err(Error::Config("subsample_users must be >= 1".into()));
        }
        if self.smoothing_window == Some(0) {
            return Err(Error::Config("smoothing_window must be >= 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        self.reg.spec().validate()?;
        self.sampling_policy().validate(self.clients)?;
        match self.algo {
            Algo::FedmcAdmm => {
                let a = &self.admm;
                if !(a.beta.is_finite() && a.beta > 0.0) {
                    return Err(Error::Config(format!("beta must be finite and > 0, got {}", a.beta)));
                }
                if a.inner_iters == 0 {
                    return Err(Error::Config("inner_iters must be >= 1".into()));
                }
            }
            Algo::Fedmavg => {
                let f = &self.fedmavg;
                if f.q1 == 0 || f.q2 == 0 {
                    return Err(Error::Config("q1 and q2 must be >= 1".into()));
                }
                if let Some(c) = f.c {
                    if !(c.is_finite() && c > 0.0) {
                        return Err(Error::Config(format!("fixed c must be > 0, got {c}")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `dir/stem.suffix` next to `path`.
pub(crate) fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}
