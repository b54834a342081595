//! FedMC-ADMM.
//!
//! One communication round `k → k+1`:
//!
//! 1. the server samples `S_k` and broadcasts `V^k`;
//! 2. every `i ∈ S_k` runs `N` proximal gradient steps on `U_i` with `W_i^k`
//!    fixed, then `N` linearized steps on `W_i` with `U_i^{k+1}` fixed, then
//!    the dual step `Y_i ← Y_i + β(W_i^{k+1} − V^k)`. The dual step uses the
//!    broadcast `V^k`, not the `V^{k+1}` the server is about to compute;
//! 3. the server solves its proximal problem over all clients' `(W_i, Y_i)`,
//!    stale ones included.
//!
//! Clients outside `S_k` keep their state bit for bit. Because each sampled
//! client only reads `V^k` and writes its own state, step 2 runs in parallel
//! under [`Execution::Parallel`]; the server reduction is evaluated in client
//! index order so both execution modes produce identical numbers.

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MaskedMatrix;
use crate::exec::Execution;
use crate::kernels::{
    frob, frob_dist_sq, grad_u, grad_v, lipschitz_for_u_step, lipschitz_for_w_step, soft_threshold,
    RegKind, RegularizerSpec,
};
use crate::{Error, Matrix, Result};

/// Relative tolerance of the runtime dual-variable identity check.
pub const DUAL_IDENTITY_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Inner step count `N` of both local loops.
    pub inner_iters: usize,
    /// Penalty parameter `β`.
    pub beta: f64,
    pub reg: RegularizerSpec,
    pub rounds: usize,
    pub rank: usize,
    pub init_seed: u64,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.inner_iters == 0 {
            return Err(Error::Config("inner iteration count must be >= 1".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("round count must be >= 1".into()));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be >= 1".into()));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be finite and > 0, got {}", self.beta)));
        }
        self.reg.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SamplingMode {
    /// Uniform subset of exactly `size` distinct clients.
    FixedSize { size: usize },
    /// Client `i` joins independently with probability `probs[i]`; an empty
    /// draw is redrawn.
    Bernoulli { probs: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    #[serde(flatten)]
    pub mode: SamplingMode,
    pub seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SamplingPolicy {
    pub fn fixed(size: usize, seed: u64) -> Self {
        SamplingPolicy {
            mode: SamplingMode::FixedSize { size },
            seed,
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        match &self.mode {
            SamplingMode::FixedSize { size } => {
                if *size == 0 || *size > p {
                    return Err(Error::Config(format!(
                        "sample size must be in 1..={p}, got {size}"
                    )));
                }
            }
            SamplingMode::Bernoulli { probs } => {
                if probs.len() != p {
                    return Err(Error::Config(format!(
                        "{} inclusion probabilities for {p} clients",
                        probs.len()
                    )));
                }
                if let Some(bad) = probs.iter().find(|&&q| !(q > 0.0 && q <= 1.0)) {
                    return Err(Error::Config(format!(
                        "inclusion probabilities must lie in (0, 1], got {bad}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Marginal probability `p_i` that client `i` is sampled in a round.
    pub fn inclusion_probabilities(&self, p: usize) -> Vec<f64> {
        match &self.mode {
            SamplingMode::FixedSize { size } => vec![*size as f64 / p as f64; p],
            SamplingMode::Bernoulli { probs } => probs.clone(),
        }
    }

    /// The sampled set `S_k` in increasing client order. A pure function of
    /// `(seed, round)`.
    pub fn sample(&self, p: usize, round: usize) -> Vec<usize> {
        let stream = splitmix64(self.seed ^ splitmix64(round as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        match &self.mode {
            SamplingMode::FixedSize { size } => {
                let mut s = rand::seq::index::sample(&mut rng, p, *size).into_vec();
                s.sort_unstable();
                s
            }
            SamplingMode::Bernoulli { probs } => loop {
                let s: Vec<usize> = (0..p).filter(|&i| rng.random::<f64>() < probs[i]).collect();
                if !s.is_empty() {
                    break s;
                }
            },
        }
    }
}

/// One client's iterate `(U_i, W_i, Y_i)` and the bookkeeping the dual
/// identity needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub u: Matrix,
    pub w: Matrix,
    pub y: Matrix,
    /// The last-but-one inner W iterate of this client's most recent local
    /// round, `W_i^{k−1,N−1}`; equal to `W_i^0` before the first round.
    pub w_penultimate: Matrix,
    /// `L_{U_i}` used in the most recent W-loop (`‖U_iᵀU_i‖_F` at init).
    pub l_u_last: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub v: Matrix,
    pub beta: f64,
    pub p: usize,
    pub round: usize,
}

/// `V⁰` followed by `U_1⁰..U_p⁰`, all entrywise uniform on `[0, 1]`.
pub fn init_factors(blocks: &[MaskedMatrix], rank: usize, seed: u64) -> (Matrix, Vec<Matrix>) {
    let n = blocks.first().map_or(0, MaskedMatrix::cols);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = Array2::from_shape_fn((rank, n), |_| rng.random::<f64>());
    let us = blocks
        .iter()
        .map(|b| Array2::from_shape_fn((b.rows(), rank), |_| rng.random::<f64>()))
        .collect();
    (v, us)
}

pub(crate) fn check_blocks(blocks: &[MaskedMatrix]) -> Result<usize> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::Config("at least one client is required".into()))?;
    let n = first.cols();
    if let Some(b) = blocks.iter().find(|b| b.cols() != n) {
        return Err(Error::Dimension(format!(
            "client blocks disagree on column count: {n} vs {}",
            b.cols()
        )));
    }
    if blocks.iter().any(|b| b.rows() == 0) {
        return Err(Error::Config("every client needs at least one row".into()));
    }
    Ok(n)
}

/// Initial server and client states: `W_i⁰ = V⁰`,
/// `Y_i⁰ = −(1/p) ∇_V f_i(U_i⁰, W_i⁰)`.
pub fn init_run(blocks: &[MaskedMatrix], hp: &HyperParams) -> Result<(ServerState, Vec<ClientState>)> {
    hp.validate()?;
    check_blocks(blocks)?;
    let p = blocks.len();
    let (v, us) = init_factors(blocks, hp.rank, hp.init_seed);
    let clients = blocks
        .iter()
        .zip(us)
        .map(|(m, u)| {
            let y = grad_v(m, &u, &v) * (-1.0 / p as f64);
            let l_u_last = lipschitz_for_w_step(&u)?;
            Ok(ClientState {
                w: v.clone(),
                w_penultimate: v.clone(),
                y,
                u,
                l_u_last,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let server = ServerState {
        v,
        beta: hp.beta,
        p,
        round: 0,
    };
    Ok((server, clients))
}

fn ensure_finite(x: &Matrix, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} has non-finite entries")))
    }
}

#[derive(Clone, Debug)]
pub struct UStepOutput {
    pub u: Matrix,
    /// `‖U^l − U^{l−1}‖_F` for `l = 1..N`.
    pub step_norms: Vec<f64>,
    /// `L_{W_i}` used by every step.
    pub lipschitz: f64,
}

/// `N` proximal gradient steps on `U` with `W` held fixed.
pub fn local_u_update(
    data: &MaskedMatrix,
    u: &Matrix,
    w: &Matrix,
    inner_iters: usize,
    reg: &RegularizerSpec,
) -> Result<UStepOutput> {
    let lipschitz = lipschitz_for_u_step(w)?;
    let mut current = u.clone();
    let mut step_norms = Vec::with_capacity(inner_iters);
    for _ in 0..inner_iters {
        let g = grad_u(data, &current, w);
        let next = reg.client_prox_step(&current, &g, lipschitz);
        ensure_finite(&next, "U")?;
        step_norms.push(frob_dist_sq(&next, &current).sqrt());
        current = next;
    }
    Ok(UStepOutput {
        u: current,
        step_norms,
        lipschitz,
    })
}

#[derive(Clone, Debug)]
pub struct WStepOutput {
    pub w: Matrix,
    /// `W^{N−1}`; the input `W` itself when `N = 1`.
    pub w_penultimate: Matrix,
    /// `Σ_l ‖W^l − W^{l−1}‖²_F`.
    pub step_sq: f64,
    /// `L_{U_i}` used by every step.
    pub lipschitz: f64,
}

/// `N` linearized steps on `W` with `U` already advanced:
/// `W^l = (L/p·W^{l−1} + βV − ∇_V f(U, W^{l−1})/p − Y) / (L/p + β)`.
#[allow(clippy::too_many_arguments)]
pub fn local_w_update(
    data: &MaskedMatrix,
    u: &Matrix,
    w: &Matrix,
    v: &Matrix,
    y: &Matrix,
    beta: f64,
    inner_iters: usize,
    p: usize,
) -> Result<WStepOutput> {
    let lipschitz = lipschitz_for_w_step(u)?;
    let lp = lipschitz / p as f64;
    let inv_p = 1.0 / p as f64;
    let denom = lp + beta;
    let mut prev = w.clone();
    let mut current = w.clone();
    let mut step_sq = 0.0;
    for _ in 0..inner_iters {
        let g = grad_v(data, u, &current);
        let mut next = Array2::zeros(current.raw_dim());
        Zip::from(&mut next)
            .and(&current)
            .and(v)
            .and(&g)
            .and(y)
            .for_each(|out, &wc, &vc, &gc, &yc| {
                *out = (lp * wc + beta * vc - gc * inv_p - yc) / denom;
            });
        ensure_finite(&next, "W")?;
        step_sq += frob_dist_sq(&next, &current);
        prev = std::mem::replace(&mut current, next);
    }
    Ok(WStepOutput {
        w: current,
        w_penultimate: prev,
        step_sq,
        lipschitz,
    })
}

/// `Y + β(W^{k+1} − V^k)`.
pub fn dual_update(y: &Matrix, w_new: &Matrix, v: &Matrix, beta: f64) -> Matrix {
    let mut out = y.clone();
    Zip::from(&mut out)
        .and(w_new)
        .and(v)
        .for_each(|o, &wn, &vc| *o += beta * (wn - vc));
    out
}

/// Closed-form server step over every client's `(W_i, Y_i)`:
/// ridge `Σ(βW_i + Y_i)/(pβ + γ)`, ℓ1 `S(Σ(W_i + Y_i/β)/p, γ/(pβ))`.
pub fn server_update(clients: &[ClientState], beta: f64, reg: &RegularizerSpec) -> Matrix {
    let p = clients.len() as f64;
    let shape = clients[0].w.raw_dim();
    let mut acc = Array2::zeros(shape);
    match reg.kind {
        RegKind::Ridge => {
            for c in clients {
                Zip::from(&mut acc)
                    .and(&c.w)
                    .and(&c.y)
                    .for_each(|a, &w, &y| *a += beta * w + y);
            }
            acc / (p * beta + reg.gamma)
        }
        RegKind::L1 => {
            for c in clients {
                Zip::from(&mut acc)
                    .and(&c.w)
                    .and(&c.y)
                    .for_each(|a, &w, &y| *a += w + y / beta);
            }
            acc /= p;
            soft_threshold(&acc, reg.gamma / (p * beta)).expect("threshold is non-negative")
        }
    }
}

/// Objective of the server problem at `V`:
/// `Σ_i [⟨Y_i, W_i − V⟩ + β/2 ‖W_i − V‖²] + R(V)`.
pub fn server_objective(clients: &[ClientState], v: &Matrix, beta: f64, reg: &RegularizerSpec) -> f64 {
    let mut total = reg.server_value(v);
    for c in clients {
        Zip::from(&c.w).and(&c.y).and(v).for_each(|&w, &y, &vv| {
            let d = w - vv;
            total += y * d + 0.5 * beta * d * d;
        });
    }
    total
}

/// Constants entering the penalty threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaBoundInputs {
    pub inner_iters: usize,
    pub p: usize,
    /// Smallest inclusion probability `p_min`.
    pub p_min: f64,
    /// Smallest and largest `L_{U_i}` (W-step constants).
    pub l_u_min: f64,
    pub l_u_max: f64,
    /// Smallest `L_{W_i}` (U-step constant).
    pub l_w_min: f64,
    /// Lipschitz constant of `∇_V f_i(·, V)` in `U`.
    pub l_cross: f64,
}

impl BetaBoundInputs {
    /// `(8NL²/(p·L̲_W), 8(8+N)L̄_U²/(p_min·p·L̲_U))`.
    pub fn terms(&self) -> (f64, f64) {
        let n = self.inner_iters as f64;
        let p = self.p as f64;
        let first = 8.0 * n * self.l_cross * self.l_cross / (p * self.l_w_min);
        let second = 8.0 * (8.0 + n) * self.l_u_max * self.l_u_max / (self.p_min * p * self.l_u_min);
        (first, second)
    }
}

/// `min{8NL²/(p·L̲_W), 8(8+N)L̄_U²/(p_min·p·L̲_U)}`, the stated threshold on `β`.
pub fn beta_lower_bound(inputs: &BetaBoundInputs) -> f64 {
    let (a, b) = inputs.terms();
    a.min(b)
}

/// `max` of the same two terms: the level at which both coefficient families
/// of the descent surrogate are positive at once.
pub fn beta_sufficient_bound(inputs: &BetaBoundInputs) -> f64 {
    let (a, b) = inputs.terms();
    a.max(b)
}

/// What one client did in its most recent local round.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalTrace {
    pub sampled: bool,
    /// `Σ_l ‖U^{k,l} − U^{k,l−1}‖²` (zero when not sampled).
    pub du_sq: f64,
    /// `Σ_l ‖W^{k,l} − W^{k,l−1}‖²` (carried over when not sampled).
    pub dw_sq: f64,
    /// `L_{W_i^k}` used by the U-loop.
    pub l_w: f64,
    /// `L_{U_i^{k+1}}` used by the W-loop.
    pub l_u: f64,
    /// `L_{U_i^k}`, the W-loop constant of the previous local round.
    pub l_u_prev: f64,
    pub u_step_norms: Vec<f64>,
    /// `‖∇_V f(U^k, W^{k+1}) − ∇_V f(U^{k+1}, W^{k+1})‖ / ‖U^{k+1} − U^k‖`.
    pub cross_ratio: Option<f64>,
}

/// Running extrema of the step constants seen during a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzStats {
    pub l_u_min: f64,
    pub l_u_max: f64,
    pub l_w_min: f64,
    pub l_w_max: f64,
    pub cross_max: f64,
}

impl LipschitzStats {
    fn new() -> Self {
        LipschitzStats {
            l_u_min: f64::INFINITY,
            l_u_max: 0.0,
            l_w_min: f64::INFINITY,
            l_w_max: 0.0,
            cross_max: 0.0,
        }
    }

    fn observe(&mut self, l_u: f64, l_w: f64) {
        self.l_u_min = self.l_u_min.min(l_u);
        self.l_u_max = self.l_u_max.max(l_u);
        self.l_w_min = self.l_w_min.min(l_w);
        self.l_w_max = self.l_w_max.max(l_w);
    }

    fn observe_cross(&mut self, ratio: f64) {
        self.cross_max = self.cross_max.max(ratio);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineOptions {
    pub execution: Execution,
    /// Check the dual identity for every client after every round and fail
    /// the round if it is off by more than [`DUAL_IDENTITY_TOL`].
    pub verify_dual_identity: bool,
    /// Measure the realized cross-Lipschitz ratio for every sampled client
    /// (two extra gradient evaluations per client and round).
    pub track_cross_lipschitz: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            execution: Execution::default(),
            verify_dual_identity: true,
            track_cross_lipschitz: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RoundOutcome {
    /// Index of the round just executed (`k`), so the state is now `k + 1`.
    pub round: usize,
    pub sampled: Vec<usize>,
    /// `V^k`, the broadcast value.
    pub v_prev: Matrix,
    /// Largest relative error of the dual identity over all clients, when
    /// checked.
    pub dual_identity_error: Option<f64>,
}

struct ClientUpdate {
    state: ClientState,
    trace: LocalTrace,
}

/// The FedMC-ADMM simulation state: client data, client and server iterates.
#[derive(Clone, Debug)]
pub struct FedMcAdmm {
    data: Vec<MaskedMatrix>,
    clients: Vec<ClientState>,
    server: ServerState,
    hp: HyperParams,
    policy: SamplingPolicy,
    opts: EngineOptions,
    traces: Vec<LocalTrace>,
    stats: LipschitzStats,
}

impl FedMcAdmm {
    pub fn new(
        data: Vec<MaskedMatrix>,
        hp: HyperParams,
        policy: SamplingPolicy,
        opts: EngineOptions,
    ) -> Result<Self> {
        let (server, clients) = init_run(&data, &hp)?;
        Self::from_parts(data, clients, server, hp, policy, opts)
    }

    /// Rebuilds an engine around existing iterates (e.g. a checkpoint).
    pub fn from_parts(
        data: Vec<MaskedMatrix>,
        clients: Vec<ClientState>,
        server: ServerState,
        hp: HyperParams,
        policy: SamplingPolicy,
        opts: EngineOptions,
    ) -> Result<Self> {
        hp.validate()?;
        let n = check_blocks(&data)?;
        policy.validate(data.len())?;
        if clients.len() != data.len() || server.p != data.len() {
            return Err(Error::Dimension(format!(
                "{} data blocks, {} client states, server expects {}",
                data.len(),
                clients.len(),
                server.p
            )));
        }
        let r = hp.rank;
        for (m, c) in data.iter().zip(&clients) {
            let ok = c.u.dim() == (m.rows(), r)
                && [&c.w, &c.y, &c.w_penultimate].iter().all(|x| x.dim() == (r, n));
            if !ok {
                return Err(Error::Dimension("client state does not match its data block".into()));
            }
        }
        if server.v.dim() != (r, n) {
            return Err(Error::Dimension("server V does not match rank and columns".into()));
        }
        let mut stats = LipschitzStats::new();
        let mut traces = Vec::with_capacity(clients.len());
        for c in &clients {
            let l_w = lipschitz_for_u_step(&c.w)?;
            stats.observe(c.l_u_last, l_w);
            traces.push(LocalTrace {
                sampled: false,
                du_sq: 0.0,
                dw_sq: 0.0,
                l_w,
                l_u: c.l_u_last,
                l_u_prev: c.l_u_last,
                u_step_norms: Vec::new(),
                cross_ratio: None,
            });
        }
        Ok(FedMcAdmm {
            data,
            clients,
            server,
            hp,
            policy,
            opts,
            traces,
            stats,
        })
    }

    pub fn data(&self) -> &[MaskedMatrix] {
        &self.data
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn hyper_params(&self) -> &HyperParams {
        &self.hp
    }

    pub fn policy(&self) -> &SamplingPolicy {
        &self.policy
    }

    pub fn options(&self) -> &EngineOptions {
        &self.opts
    }

    pub fn set_execution(&mut self, execution: Execution) {
        self.opts.execution = execution;
    }

    /// Per-client record of the most recent local round.
    pub fn traces(&self) -> &[LocalTrace] {
        &self.traces
    }

    pub fn lipschitz_stats(&self) -> LipschitzStats {
        self.stats
    }

    pub fn round(&self) -> usize {
        self.server.round
    }

    fn local_round(&self, i: usize) -> Result<ClientUpdate> {
        let m = &self.data[i];
        let c = &self.clients[i];
        let v = &self.server.v;
        let beta = self.server.beta;
        let n_inner = self.hp.inner_iters;

        let us = local_u_update(m, &c.u, &c.w, n_inner, &self.hp.reg)?;
        let ws = local_w_update(m, &us.u, &c.w, v, &c.y, beta, n_inner, self.server.p)?;
        let y = dual_update(&c.y, &ws.w, v, beta);
        ensure_finite(&y, "Y")?;

        let du_sq = us.step_norms.iter().map(|s| s * s).sum();
        let cross_ratio = if self.opts.track_cross_lipschitz {
            let du = frob_dist_sq(&us.u, &c.u).sqrt();
            (du > 0.0).then(|| {
                frob(&(grad_v(m, &c.u, &ws.w) - grad_v(m, &us.u, &ws.w))) / du
            })
        } else {
            None
        };
        let trace = LocalTrace {
            sampled: true,
            du_sq,
            dw_sq: ws.step_sq,
            l_w: us.lipschitz,
            l_u: ws.lipschitz,
            l_u_prev: c.l_u_last,
            u_step_norms: us.step_norms,
            cross_ratio,
        };
        let state = ClientState {
            u: us.u,
            w: ws.w,
            y,
            w_penultimate: ws.w_penultimate,
            l_u_last: ws.lipschitz,
        };
        Ok(ClientUpdate { state, trace })
    }

    /// Executes one communication round.
    pub fn step(&mut self) -> Result<RoundOutcome> {
        let round = self.server.round;
        let p = self.server.p;
        let sampled = self.policy.sample(p, round);

        let updates = {
            let this = &*self;
            this.opts
                .execution
                .map(sampled.len(), |s| this.local_round(sampled[s]))
        };

        for trace in &mut self.traces {
            trace.sampled = false;
            trace.du_sq = 0.0;
            trace.u_step_norms.clear();
            trace.cross_ratio = None;
        }
        for (&i, update) in sampled.iter().zip(updates) {
            let update = update.map_err(|e| Error::Divergence {
                round,
                client: Some(i),
                what: e.to_string(),
            })?;
            self.stats.observe(update.trace.l_u, update.trace.l_w);
            if let Some(r) = update.trace.cross_ratio {
                self.stats.observe_cross(r);
            }
            self.clients[i] = update.state;
            self.traces[i] = update.trace;
        }

        let v_new = server_update(&self.clients, self.server.beta, &self.hp.reg);
        if v_new.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                round,
                client: None,
                what: "server V has non-finite entries".into(),
            });
        }
        let v_prev = std::mem::replace(&mut self.server.v, v_new);
        self.server.round += 1;

        let dual_identity_error = if self.opts.verify_dual_identity {
            let err = self.dual_identity_error();
            if err > DUAL_IDENTITY_TOL {
                return Err(Error::Invariant {
                    round,
                    what: format!("dual identity off by {err:e} (relative)"),
                });
            }
            Some(err)
        } else {
            None
        };

        Ok(RoundOutcome {
            round,
            sampled,
            v_prev,
            dual_identity_error,
        })
    }

    /// Largest relative violation over all clients of
    /// `Y_i = −(1/p)[∇_V f_i(U_i, W_i^pen) + L_{U_i}(W_i − W_i^pen)]`.
    pub fn dual_identity_error(&self) -> f64 {
        let p = self.server.p;
        let errs = self.opts.execution.map(p, |i| {
            dual_identity_relative_error(&self.data[i], &self.clients[i], p)
        });
        errs.into_iter().fold(0.0, f64::max)
    }

    /// Estimate of the cross-Lipschitz constant before any round has run.
    ///
    /// Every client performs its U-loop virtually from `(U_i, W_i)`; the
    /// ratio `‖∇_V f(U, W) − ∇_V f(U', W)‖ / ‖U − U'‖` is maximized over all
    /// pairs of consecutive inner iterates and over the whole loop.
    pub fn probe_cross_lipschitz(&self) -> Result<f64> {
        let p = self.server.p;
        let ratios = self.opts.execution.map(p, |i| -> Result<f64> {
            let m = &self.data[i];
            let c = &self.clients[i];
            let l_w = lipschitz_for_u_step(&c.w)?;
            let ratio = |a: &Matrix, ga: &Matrix, b: &Matrix, gb: &Matrix| {
                let du = frob_dist_sq(a, b).sqrt();
                if du == 0.0 { 0.0 } else { frob(&(ga - gb)) / du }
            };
            let g0 = grad_v(m, &c.u, &c.w);
            let (mut prev, mut g_prev) = (c.u.clone(), g0.clone());
            let mut best: f64 = 0.0;
            for _ in 0..self.hp.inner_iters {
                let next = self.hp.reg.client_prox_step(&prev, &grad_u(m, &prev, &c.w), l_w);
                ensure_finite(&next, "U")?;
                let g_next = grad_v(m, &next, &c.w);
                best = best.max(ratio(&next, &g_next, &prev, &g_prev));
                prev = next;
                g_prev = g_next;
            }
            Ok(best.max(ratio(&prev, &g_prev, &c.u, &g0)))
        });
        ratios
            .into_iter()
            .try_fold(0.0f64, |acc, r| r.map(|r| acc.max(r)))
    }

    /// Penalty-threshold inputs from the current iterates, with the
    /// cross-Lipschitz constant taken as the larger of the running estimate
    /// and a fresh probe.
    pub fn beta_bound_inputs(&self) -> Result<BetaBoundInputs> {
        let p = self.server.p;
        let probs = self.policy.inclusion_probabilities(p);
        let p_min = probs.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut l_u_min = f64::INFINITY;
        let mut l_u_max: f64 = 0.0;
        let mut l_w_min = f64::INFINITY;
        for c in &self.clients {
            let l_u = lipschitz_for_w_step(&c.u)?;
            l_u_min = l_u_min.min(l_u);
            l_u_max = l_u_max.max(l_u);
            l_w_min = l_w_min.min(lipschitz_for_u_step(&c.w)?);
        }
        let l_cross = self.probe_cross_lipschitz()?.max(self.stats.cross_max);
        Ok(BetaBoundInputs {
            inner_iters: self.hp.inner_iters,
            p,
            p_min,
            l_u_min,
            l_u_max,
            l_w_min,
            l_cross,
        })
    }

    /// Penalty-threshold inputs from the running extrema of the whole run.
    pub fn running_beta_bound_inputs(&self) -> BetaBoundInputs {
        let p = self.server.p;
        let probs = self.policy.inclusion_probabilities(p);
        BetaBoundInputs {
            inner_iters: self.hp.inner_iters,
            p,
            p_min: probs.iter().cloned().fold(f64::INFINITY, f64::min),
            l_u_min: self.stats.l_u_min,
            l_u_max: self.stats.l_u_max,
            l_w_min: self.stats.l_w_min,
            l_cross: self.stats.cross_max,
        }
    }
}

/// Relative error of the dual identity for one client.
pub fn dual_identity_relative_error(data: &MaskedMatrix, c: &ClientState, p: usize) -> f64 {
    let g = grad_v(data, &c.u, &c.w_penultimate);
    let scale = -1.0 / p as f64;
    let mut diff_sq = 0.0;
    let mut y_sq = 0.0;
    let mut rhs_sq = 0.0;
    Zip::from(&c.y)
        .and(&g)
        .and(&c.w)
        .and(&c.w_penultimate)
        .for_each(|&y, &g, &w, &wp| {
            let rhs = scale * (g + c.l_u_last * (w - wp));
            diff_sq += (y - rhs) * (y - rhs);
            y_sq += y * y;
            rhs_sq += rhs * rhs;
        });
    let denom = y_sq.max(rhs_sq).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff_sq.sqrt() / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::masked_loss;
    use ndarray::array;

    fn full(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> MaskedMatrix {
        let mut t = Vec::new();
        for i in 0..rows {
            for j in 0..cols {
                t.push((i, j, f(i, j)));
            }
        }
        MaskedMatrix::from_triplets(rows, cols, t).unwrap()
    }

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn hp(beta: f64, reg: RegularizerSpec) -> HyperParams {
        HyperParams {
            inner_iters: 3,
            beta,
            reg,
            rounds: 10,
            rank: 2,
            init_seed: 7,
        }
    }

    #[test]
    fn init_sets_consensus_and_dual() {
        let blocks = vec![full(3, 4, |i, j| (i + j) as f64), full(2, 4, |i, j| (i * j) as f64)];
        let h = hp(0.1, RegularizerSpec::ridge(0.0, 0.0));
        let (server, clients) = init_run(&blocks, &h).unwrap();
        for (m, c) in blocks.iter().zip(&clients) {
            assert_eq!(c.w, server.v);
            assert_eq!(c.w_penultimate, server.v);
            // Dense oracle −(1/p) Uᵀ (UW − M) on a fully observed block.
            let dense = -(c.u.t().dot(&(c.u.dot(&c.w) - m.to_dense()))) / 2.0;
            assert!(frob(&(&c.y - &dense)) < 1e-12);
        }
        assert!(server.v.iter().all(|&x| (0.0..1.0).contains(&x)));
        assert!(clients.iter().flat_map(|c| c.u.iter()).all(|&x| (0.0..1.0).contains(&x)));
    }

    #[test]
    fn init_dual_vanishes_with_zero_residual() {
        // Observed entries all zero, and U⁰V⁰ cannot be zero entrywise, so use
        // an empty observation set in one block: its residual is empty.
        let blocks = vec![MaskedMatrix::empty(2, 3), MaskedMatrix::empty(1, 3)];
        let (_, clients) = init_run(&blocks, &hp(1.0, RegularizerSpec::ridge(0.0, 0.0))).unwrap();
        assert!(clients.iter().all(|c| c.y.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn u_update_fixed_point_at_zero_w() {
        let m = full(2, 3, |_, _| 1.0);
        let u = rand_mat(2, 2, 1);
        let out = local_u_update(&m, &u, &Array2::zeros((2, 3)), 4, &RegularizerSpec::ridge(0.0, 0.0)).unwrap();
        assert_eq!(out.u, u);
        assert!(out.step_norms.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn u_update_single_ridge_step_by_hand() {
        // 2x2 fully observed, r = 1.
        let m = MaskedMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 3.0), (1, 1, 4.0)]).unwrap();
        let u = array![[0.5], [1.0]];
        let w = array![[1.0, 2.0]];
        let lambda = 0.25;
        let out = local_u_update(&m, &u, &w, 1, &RegularizerSpec::ridge(lambda, 0.0)).unwrap();
        // W Wᵀ = [5], L = 5. Residuals: row 0: (0.5−1, 1−2) = (−0.5, −1),
        // row 1: (1−3, 2−4) = (−2, −2). G = R Wᵀ = [−2.5, −6].
        let l = 5.0;
        let expect = [(l * 0.5 + 2.5) / (l + lambda), (l * 1.0 + 6.0) / (l + lambda)];
        assert!((out.u[[0, 0]] - expect[0]).abs() < 1e-12);
        assert!((out.u[[1, 0]] - expect[1]).abs() < 1e-12);
        assert_eq!(out.lipschitz, l);
    }

    fn surrogate(m: &MaskedMatrix, prev: &Matrix, x: &Matrix, w: &Matrix, l: f64, reg: &RegularizerSpec) -> f64 {
        let g = grad_u(m, prev, w);
        (&g * x).sum() + 0.5 * l * frob_dist_sq(x, prev) + reg.client_value(x)
    }

    #[test]
    fn u_steps_decrease_their_surrogate() {
        let m = full(4, 5, |i, j| ((i * 3 + j) % 4) as f64);
        let w = rand_mat(2, 5, 3);
        for reg in [RegularizerSpec::ridge(0.3, 0.0), RegularizerSpec::l1(0.3, 0.0)] {
            let mut u = rand_mat(4, 2, 4);
            for _ in 0..5 {
                let out = local_u_update(&m, &u, &w, 1, &reg).unwrap();
                let l = out.lipschitz;
                assert!(surrogate(&m, &u, &out.u, &w, l, &reg) <= surrogate(&m, &u, &u, &w, l, &reg) + 1e-12);
                // And the true objective f + R does not increase.
                let before = masked_loss(&m, &u, &w) + reg.client_value(&u);
                let after = masked_loss(&m, &out.u, &w) + reg.client_value(&out.u);
                assert!(after <= before + 1e-12);
                u = out.u;
            }
        }
    }

    #[test]
    fn w_update_convex_combination_when_gradient_vanishes() {
        // No observations: ∇_V f ≡ 0.
        let m = MaskedMatrix::empty(2, 3);
        let u = rand_mat(2, 2, 5);
        let w0 = rand_mat(2, 3, 6);
        let v = rand_mat(2, 3, 7);
        let beta = 0.7;
        let p = 4;
        let out = local_w_update(&m, &u, &w0, &v, &Array2::zeros((2, 3)), beta, 1, p).unwrap();
        let lp = lipschitz_for_w_step(&u).unwrap() / p as f64;
        let expect = (&w0 * lp + &v * beta) / (lp + beta);
        assert!(frob(&(&out.w - &expect)) < 1e-14);
        assert_eq!(out.w_penultimate, w0);
    }

    #[test]
    fn w_update_large_beta_lands_on_v() {
        let m = full(3, 3, |i, j| (i + 2 * j) as f64);
        let u = rand_mat(3, 2, 8);
        let v = rand_mat(2, 3, 9);
        let out = local_w_update(&m, &u, &rand_mat(2, 3, 10), &v, &Array2::zeros((2, 3)), 1e9, 1, 2).unwrap();
        assert!(frob(&(&out.w - &v)) < 1e-6);
    }

    #[test]
    fn w_update_zeroes_surrogate_gradient() {
        let m = full(4, 3, |i, j| ((i + j) % 3) as f64 + 0.5);
        let u = rand_mat(4, 2, 11);
        let v = rand_mat(2, 3, 12);
        let y = rand_mat(2, 3, 13);
        let (beta, p) = (0.4, 3);
        let mut w = rand_mat(2, 3, 14);
        let l = lipschitz_for_w_step(&u).unwrap();
        for _ in 0..4 {
            let out = local_w_update(&m, &u, &w, &v, &y, beta, 1, p).unwrap();
            let g = grad_v(&m, &u, &w);
            let resid = &g / p as f64 + &y + (&out.w - &w) * (l / p as f64) + (&out.w - &v) * beta;
            assert!(frob(&resid) < 1e-10, "{}", frob(&resid));
            w = out.w;
        }
    }

    #[test]
    fn dual_update_unchanged_at_consensus() {
        let y = rand_mat(2, 3, 1);
        let v = rand_mat(2, 3, 2);
        assert_eq!(dual_update(&y, &v, &v, 3.0), y);
    }

    fn client_with(w: Matrix, y: Matrix) -> ClientState {
        ClientState {
            u: Array2::zeros((1, w.nrows())),
            w_penultimate: w.clone(),
            w,
            y,
            l_u_last: 1.0,
        }
    }

    #[test]
    fn server_update_examples() {
        let q = rand_mat(2, 3, 3);
        let cs = vec![client_with(q.clone(), Array2::zeros((2, 3))); 3];
        let v = server_update(&cs, 0.5, &RegularizerSpec::ridge(0.0, 0.0));
        assert!(frob(&(&v - &q)) < 1e-15);

        let ones = Array2::ones((2, 2));
        let cs = vec![client_with(ones.clone(), Array2::zeros((2, 2))); 2];
        let v = server_update(&cs, 1.0, &RegularizerSpec::ridge(0.0, 1.0));
        assert!(v.iter().all(|&x| (x - 2.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn ridge_server_step_zeroes_gradient() {
        let cs: Vec<_> = (0..4).map(|s| client_with(rand_mat(2, 3, s), rand_mat(2, 3, 10 + s))).collect();
        let (beta, gamma) = (0.8, 0.3);
        let v = server_update(&cs, beta, &RegularizerSpec::ridge(0.0, gamma));
        let mut grad = &v * gamma;
        for c in &cs {
            grad = grad - &c.y - (&c.w - &v) * beta;
        }
        assert!(frob(&grad) < 1e-10);
    }

    #[test]
    fn l1_server_step_beats_perturbations() {
        let cs: Vec<_> = (0..3).map(|s| client_with(rand_mat(2, 4, s), rand_mat(2, 4, 20 + s) * 0.1)).collect();
        let beta = 0.5;
        let reg = RegularizerSpec::l1(0.0, 0.4);
        let v = server_update(&cs, beta, &reg);
        let best = server_objective(&cs, &v, beta, &reg);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let d = Array2::from_shape_fn(v.raw_dim(), |_| rng.random_range(-1e-2..1e-2));
            assert!(best <= server_objective(&cs, &(&v + &d), beta, &reg) + 1e-12);
        }
    }

    #[test]
    fn beta_bound_arithmetic() {
        let inputs = BetaBoundInputs {
            inner_iters: 10,
            p: 100,
            p_min: 0.1,
            l_u_min: 1.0,
            l_u_max: 1.0,
            l_w_min: 1.0,
            l_cross: 1.0,
        };
        assert!((beta_lower_bound(&inputs) - 0.8).abs() < 1e-15);
        let (a, b) = inputs.terms();
        assert!((b - 14.4).abs() < 1e-12);
        assert!((beta_sufficient_bound(&inputs) - 14.4).abs() < 1e-12);
        let doubled = BetaBoundInputs { l_cross: 2.0, ..inputs };
        assert!((doubled.terms().0 - 4.0 * a).abs() < 1e-15);
    }

    #[test]
    fn sampling_full_participation_and_determinism() {
        let all = SamplingPolicy::fixed(7, 1);
        for k in 0..20 {
            assert_eq!(all.sample(7, k), (0..7).collect::<Vec<_>>());
        }
        let some = SamplingPolicy::fixed(3, 5);
        assert_eq!(some.sample(10, 4), some.sample(10, 4));
        assert_ne!(
            (0..10).map(|k| some.sample(10, k)).collect::<Vec<_>>(),
            (0..10).map(|_| some.sample(10, 0)).collect::<Vec<_>>()
        );
        let s = some.sample(10, 2);
        assert_eq!(s.len(), 3);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn bernoulli_sampling_never_empty() {
        let policy = SamplingPolicy {
            mode: SamplingMode::Bernoulli { probs: vec![0.01; 5] },
            seed: 3,
        };
        policy.validate(5).unwrap();
        for k in 0..200 {
            assert!(!policy.sample(5, k).is_empty());
        }
        let bad = SamplingPolicy {
            mode: SamplingMode::Bernoulli { probs: vec![0.0, 0.5] },
            seed: 0,
        };
        assert!(bad.validate(2).is_err());
        assert!(SamplingPolicy::fixed(0, 0).validate(3).is_err());
        assert!(SamplingPolicy::fixed(4, 0).validate(3).is_err());
    }

    #[test]
    fn rejects_nonpositive_beta() {
        let blocks = vec![full(2, 2, |_, _| 1.0)];
        for beta in [0.0, -1.0, f64::NAN] {
            assert!(matches!(init_run(&blocks, &hp(beta, RegularizerSpec::ridge(0.0, 0.0))), Err(Error::Config(_))));
        }
    }

    fn toy_engine(sample: usize, opts: EngineOptions) -> FedMcAdmm {
        let m = full(12, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.5);
        let part = crate::data::partition_clients(&m, 4, None).unwrap();
        FedMcAdmm::new(
            part.blocks,
            hp(2.0, RegularizerSpec::ridge(1e-3, 1e-3)),
            SamplingPolicy::fixed(sample, 11),
            opts,
        )
        .unwrap()
    }

    #[test]
    fn stale_clients_are_untouched() {
        let mut eng = toy_engine(2, EngineOptions::default());
        for _ in 0..6 {
            let before = eng.clients().to_vec();
            let out = eng.step().unwrap();
            for (i, (b, a)) in before.iter().zip(eng.clients()).enumerate() {
                if !out.sampled.contains(&i) {
                    assert_eq!(b, a, "client {i} changed while idle");
                }
            }
            assert!(out.dual_identity_error.unwrap() <= DUAL_IDENTITY_TOL);
        }
    }

    #[test]
    fn execution_modes_are_bitwise_identical() {
        let mut a = toy_engine(3, EngineOptions { execution: Execution::Sequential, ..Default::default() });
        let mut b = toy_engine(3, EngineOptions { execution: Execution::Parallel, ..Default::default() });
        for _ in 0..5 {
            a.step().unwrap();
            b.step().unwrap();
        }
        assert_eq!(a.server().v, b.server().v);
        assert_eq!(a.clients(), b.clients());
    }

    #[test]
    fn divergence_is_reported_with_context() {
        let m = full(2, 2, |_, _| 1e300);
        let mut eng = FedMcAdmm::new(
            vec![m],
            HyperParams { inner_iters: 2, beta: 1.0, reg: RegularizerSpec::ridge(0.0, 0.0), rounds: 1, rank: 1, init_seed: 0 },
            SamplingPolicy::fixed(1, 0),
            EngineOptions::default(),
        )
        .unwrap();
        match eng.step() {
            Err(Error::Divergence { round, client, .. }) => assert_eq!((round, client), (0, Some(0))),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
