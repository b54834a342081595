//! Measured quantities: objective, test RMSE, augmented Lagrangian, consensus
//! gap, stationarity residual, sparsity, and the descent surrogate.
//!
//! Everything here reads a frozen snapshot of the run state and never
//! mutates it.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::admm::{ClientState, LocalTrace};
use crate::data::MaskedMatrix;
use crate::exec::Execution;
use crate::kernels::{frob_dist_sq, frob_sq, grad_u, grad_v, lipschitz_for_u_step, masked_loss, RegularizerSpec};
use crate::{Error, Matrix, Result};

/// One row of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Training time of this round alone, metric evaluation excluded.
    pub wall_time_s: f64,
    pub objective: f64,
    pub rmse_test: f64,
    /// NaN for algorithms without a Lagrangian.
    pub aug_lagrangian: f64,
    /// `max_i ‖W_i − V‖_F`; NaN when not applicable.
    pub consensus_gap: f64,
    /// NaN on rounds outside the evaluation cadence.
    pub stationarity_sq: f64,
    pub nnz_u: f64,
    pub nnz_v: f64,
    pub sampled: Vec<usize>,
}

fn sum_in_order(parts: Vec<f64>) -> f64 {
    parts.into_iter().sum()
}

/// `(1/p) Σ_i [½‖P_Ω(M_i − U_i V)‖² + R_i(U_i)] + R(V)` with the global `V`.
pub fn objective(data: &[MaskedMatrix], us: &[Matrix], v: &Matrix, reg: &RegularizerSpec) -> f64 {
    objective_with(data, us, v, reg, Execution::Sequential)
}

pub fn objective_with(
    data: &[MaskedMatrix],
    us: &[Matrix],
    v: &Matrix,
    reg: &RegularizerSpec,
    exec: Execution,
) -> f64 {
    let p = data.len() as f64;
    let parts = exec.map(data.len(), |i| masked_loss(&data[i], &us[i], v) + reg.client_value(&us[i]));
    sum_in_order(parts) / p + reg.server_value(v)
}

/// `sqrt(Σ_i ‖P_{T_i}(M_i − U_i V)‖² / N_T)` on raw predictions.
pub fn rmse(test: &[MaskedMatrix], us: &[Matrix], v: &Matrix) -> Result<f64> {
    rmse_with(test, us, v, Execution::Sequential)
}

pub fn rmse_with(test: &[MaskedMatrix], us: &[Matrix], v: &Matrix, exec: Execution) -> Result<f64> {
    let count: usize = test.iter().map(MaskedMatrix::nnz).sum();
    if count == 0 {
        return Err(Error::Config("RMSE needs at least one test entry".into()));
    }
    let parts = exec.map(test.len(), |i| 2.0 * masked_loss(&test[i], &us[i], v));
    Ok((sum_in_order(parts) / count as f64).sqrt())
}

/// `Σ_i [(1/p)(f_i(U_i, W_i) + R_i(U_i)) + ⟨Y_i, W_i − V⟩ + (β/2)‖W_i − V‖²] + R(V)`.
pub fn augmented_lagrangian(
    data: &[MaskedMatrix],
    clients: &[ClientState],
    v: &Matrix,
    beta: f64,
    reg: &RegularizerSpec,
) -> f64 {
    augmented_lagrangian_with(data, clients, v, beta, reg, Execution::Sequential)
}

pub fn augmented_lagrangian_with(
    data: &[MaskedMatrix],
    clients: &[ClientState],
    v: &Matrix,
    beta: f64,
    reg: &RegularizerSpec,
    exec: Execution,
) -> f64 {
    let inv_p = 1.0 / data.len() as f64;
    let parts = exec.map(data.len(), |i| {
        let c = &clients[i];
        let mut coupling = 0.0;
        Zip::from(&c.w).and(&c.y).and(v).for_each(|&w, &y, &vv| {
            let d = w - vv;
            coupling += y * d + 0.5 * beta * d * d;
        });
        inv_p * (masked_loss(&data[i], &c.u, &c.w) + reg.client_value(&c.u)) + coupling
    });
    sum_in_order(parts) + reg.server_value(v)
}

/// `max_i ‖W_i − V‖_F`.
pub fn consensus_gap(clients: &[ClientState], v: &Matrix) -> f64 {
    clients
        .iter()
        .map(|c| frob_dist_sq(&c.w, v).sqrt())
        .fold(0.0, f64::max)
}

/// Squared stationarity residual of the unconstrained reformulation at the
/// post-round state.
///
/// Every client, sampled or not, takes one virtual prox step
/// `Ū_i = prox(U_i − ∇_U f_i(U_i, W_i)/L_{W_i})`. With
/// `ζ_i = −∇_U f_i(U_i, W_i) − L_{W_i}(Ū_i − U_i)` and
/// `ν = Σ_i [Y_i + β(W_i − V)]` the residual is
/// `‖(1/p) Σ_i ∇_V f_i(Ū_i, V) + ν‖² + Σ_i ‖(1/p)(∇_U f_i(Ū_i, V) + ζ_i)‖²`.
pub fn stationarity_residual(
    data: &[MaskedMatrix],
    clients: &[ClientState],
    v: &Matrix,
    beta: f64,
    reg: &RegularizerSpec,
    exec: Execution,
) -> Result<f64> {
    let p = data.len();
    let inv_p = 1.0 / p as f64;
    let parts = exec.map(p, |i| -> Result<(Matrix, f64)> {
        let (m, c) = (&data[i], &clients[i]);
        let l_w = lipschitz_for_u_step(&c.w)?;
        let g = grad_u(m, &c.u, &c.w);
        let u_bar = reg.client_prox_step(&c.u, &g, l_w);
        let mut u_part = grad_u(m, &u_bar, v);
        Zip::from(&mut u_part)
            .and(&g)
            .and(&u_bar)
            .and(&c.u)
            .for_each(|out, &gx, &ub, &u| *out = inv_p * (*out - gx - l_w * (ub - u)));
        let mut v_part = grad_v(m, &u_bar, v) * inv_p;
        Zip::from(&mut v_part)
            .and(&c.y)
            .and(&c.w)
            .and(v)
            .for_each(|out, &y, &w, &vv| *out += y + beta * (w - vv));
        Ok((v_part, frob_sq(&u_part)))
    });
    let mut v_total = Array2::zeros(v.raw_dim());
    let mut u_total = 0.0;
    for part in parts {
        let (vp, us) = part?;
        v_total += &vp;
        u_total += us;
    }
    Ok(frob_sq(&v_total) + u_total)
}

/// Fraction of entries with `|x| > tol`.
pub fn nnz_fraction(x: &Matrix, tol: f64) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().filter(|v| v.abs() > tol).count() as f64 / x.len() as f64
}

/// [`nnz_fraction`] of the row-stacked blocks.
pub fn stacked_nnz_fraction(blocks: &[Matrix], tol: f64) -> f64 {
    let total: usize = blocks.iter().map(|b| b.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let nz: usize = blocks
        .iter()
        .map(|b| b.iter().filter(|v| v.abs() > tol).count())
        .sum();
    nz as f64 / total as f64
}

/// Mean of the finite values among the last `window` entries, for every
/// prefix. NaN where the window holds no finite value.
pub fn trailing_mean(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|k| {
            let lo = (k + 1).saturating_sub(window);
            let (s, n) = values[lo..=k]
                .iter()
                .filter(|v| v.is_finite())
                .fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
            if n == 0 {
                f64::NAN
            } else {
                s / n as f64
            }
        })
        .collect()
}

/// Mean of the first `k` values for `k = 1..=len`.
pub fn running_mean(values: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            acc += v;
            acc / (k + 1) as f64
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ClientDescent {
    du_sq: f64,
    dw_sq: f64,
    l_w: f64,
    l_u: f64,
    l_u_prev: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct DescentRound {
    aug_lagrangian: f64,
    dv_sq: f64,
    clients: Vec<ClientDescent>,
}

/// Per-round ingredients of the descent surrogate
///
/// `L̂^{k+1} = L^{k+1} + (pβ/2)‖V^{k+1} − V^k‖²
///   + Σ_i [(L_{W_i^k}/(2p) − 4NL²/(p²β)) Σ_l ‖ΔU_i^{k,l}‖²
///   + (L_{U_i^{k+1}}/(2p) − (16L_{U_i^{k+1}}² + 4N L_{U_i^k}²)/(p²β)) Σ_l ‖ΔW_i^{k,l}‖²]`,
///
/// with `L̂^0 = L^0`. The cross-Lipschitz constant `L` is supplied when the
/// series is evaluated, so it can be the maximum over the whole run.
#[derive(Clone, Debug, PartialEq)]
pub struct DescentTracker {
    initial: f64,
    rounds: Vec<DescentRound>,
}

impl DescentTracker {
    pub fn new(initial_aug_lagrangian: f64) -> Self {
        DescentTracker {
            initial: initial_aug_lagrangian,
            rounds: Vec::new(),
        }
    }

    pub fn record(&mut self, aug_lagrangian: f64, dv_sq: f64, traces: &[LocalTrace]) {
        let clients = traces
            .iter()
            .map(|t| ClientDescent {
                du_sq: t.du_sq,
                dw_sq: t.dw_sq,
                l_w: t.l_w,
                l_u: t.l_u,
                l_u_prev: t.l_u_prev,
            })
            .collect();
        self.rounds.push(DescentRound {
            aug_lagrangian,
            dv_sq,
            clients,
        });
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    /// `‖V^{k+1} − V^k‖²` for every recorded round.
    pub fn dv_sq(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.dv_sq).collect()
    }

    /// `L̂^0, L̂^1, …`.
    pub fn surrogate(&self, l_cross: f64, inner_iters: usize, beta: f64) -> Vec<f64> {
        let n = inner_iters as f64;
        let mut out = Vec::with_capacity(self.rounds.len() + 1);
        out.push(self.initial);
        for r in &self.rounds {
            let p = r.clients.len() as f64;
            let pp_beta = p * p * beta;
            let mut total = r.aug_lagrangian + 0.5 * p * beta * r.dv_sq;
            for c in &r.clients {
                let cu = c.l_w / (2.0 * p) - 4.0 * n * l_cross * l_cross / pp_beta;
                let cw = c.l_u / (2.0 * p) - (16.0 * c.l_u * c.l_u + 4.0 * n * c.l_u_prev * c.l_u_prev) / pp_beta;
                total += cu * c.du_sq + cw * c.dw_sq;
            }
            out.push(total);
        }
        out
    }
}

/// First index `k` with `s[k+1] > s[k] + rel_tol·(1 + |s[k]|)`, and the size of
/// the violation.
pub fn first_increase(series: &[f64], rel_tol: f64) -> Option<(usize, f64)> {
    series.windows(2).enumerate().find_map(|(k, w)| {
        let excess = w[1] - w[0];
        (excess > rel_tol * (1.0 + w[0].abs())).then_some((k, excess))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{soft_threshold, RegularizerSpec};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn observe(dense: &Matrix, keep: impl Fn(usize, usize) -> bool) -> MaskedMatrix {
        let mut t = Vec::new();
        for ((i, j), &x) in dense.indexed_iter() {
            if keep(i, j) {
                t.push((i, j, x));
            }
        }
        MaskedMatrix::from_triplets(dense.nrows(), dense.ncols(), t).unwrap()
    }

    fn client(u: Matrix, w: Matrix, y: Matrix) -> ClientState {
        ClientState {
            u,
            w_penultimate: w.clone(),
            w,
            y,
            l_u_last: 1.0,
        }
    }

    #[test]
    fn objective_perfect_fit_and_zero_factors() {
        let u = rand_mat(4, 2, 1);
        let v = rand_mat(2, 3, 2);
        let m = observe(&u.dot(&v), |i, j| i != j);
        let reg = RegularizerSpec::ridge(0.0, 0.0);
        assert!(objective(std::slice::from_ref(&m), &[u], &v, &reg).abs() < 1e-24);

        let zero_u = Array2::zeros((4, 2));
        let zero_v = Array2::zeros((2, 3));
        let m2 = observe(&rand_mat(4, 3, 3), |i, j| (i + j) % 2 == 1);
        let got = objective(&[m.clone(), m2.clone()], &[zero_u.clone(), zero_u], &zero_v, &reg);
        let expect = 0.5 * (m.squared_norm() + m2.squared_norm()) / 2.0;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn objective_matches_dense_oracle() {
        let us = [rand_mat(3, 2, 4), rand_mat(2, 2, 5)];
        let v = rand_mat(2, 4, 6);
        let ms = [
            observe(&rand_mat(3, 4, 7), |i, j| (i * j) % 3 != 1),
            observe(&rand_mat(2, 4, 8), |i, j| i + j != 2),
        ];
        let reg = RegularizerSpec::l1(0.3, 0.2);
        let mut oracle = 0.0;
        for (m, u) in ms.iter().zip(&us) {
            let pred = u.dot(&v);
            let dense = m.to_dense();
            let mut loss = 0.0;
            for (i, j, _) in m.iter() {
                loss += 0.5 * (pred[[i, j]] - dense[[i, j]]).powi(2);
            }
            oracle += loss + 0.3 * u.iter().map(|x| x.abs()).sum::<f64>();
        }
        oracle = oracle / 2.0 + 0.2 * v.iter().map(|x| x.abs()).sum::<f64>();
        assert!((objective(&ms, &us, &v, &reg) - oracle).abs() < 1e-12);
    }

    #[test]
    fn rmse_examples() {
        let u = array![[1.0]];
        let v = array![[3.0]];
        let t = MaskedMatrix::from_triplets(1, 1, vec![(0, 0, 4.0)]).unwrap();
        assert!((rmse(&[t], std::slice::from_ref(&u), &v).unwrap() - 1.0).abs() < 1e-15);
        assert!(rmse(&[MaskedMatrix::empty(1, 1)], &[u], &v).is_err());

        let us = [rand_mat(4, 2, 9), rand_mat(3, 2, 10)];
        let v = rand_mat(2, 5, 11);
        let exact: Vec<_> = us.iter().map(|u| observe(&u.dot(&v), |_, _| true)).collect();
        assert!(rmse(&exact, &us, &v).unwrap() < 1e-15);

        // 20 entries spread over two clients.
        let ts = [
            observe(&rand_mat(4, 5, 12), |i, j| (i * 5 + j) % 2 == 0),
            observe(&rand_mat(3, 5, 13), |i, j| (i * 5 + j) < 10),
        ];
        assert_eq!(ts.iter().map(|t| t.nnz()).sum::<usize>(), 20);
        let mut sq = 0.0;
        for (t, u) in ts.iter().zip(&us) {
            for (i, j, x) in t.iter() {
                let pred: f64 = (0..2).map(|k| u[[i, k]] * v[[k, j]]).sum();
                sq += (x - pred).powi(2);
            }
        }
        let direct = (sq / 20.0).sqrt();
        assert!((rmse(&ts, &us, &v).unwrap() - direct).abs() < 1e-12);
        let swapped = rmse(&[ts[1].clone(), ts[0].clone()], &[us[1].clone(), us[0].clone()], &v).unwrap();
        assert!((swapped - direct).abs() < 1e-12);
    }

    #[test]
    fn lagrangian_reduces_to_objective_at_consensus() {
        let us = [rand_mat(3, 2, 14), rand_mat(2, 2, 15)];
        let v = rand_mat(2, 4, 16);
        let ms = [
            observe(&rand_mat(3, 4, 17), |i, j| i != j),
            observe(&rand_mat(2, 4, 18), |_, j| j != 1),
        ];
        let reg = RegularizerSpec::ridge(0.1, 0.2);
        let clients: Vec<_> = us
            .iter()
            .enumerate()
            .map(|(s, u)| client(u.clone(), v.clone(), rand_mat(2, 4, 30 + s as u64)))
            .collect();
        let al = augmented_lagrangian(&ms, &clients, &v, 0.7, &reg);
        assert!((al - objective(&ms, &us, &v, &reg)).abs() < 1e-12);

        let zero = vec![client(Array2::zeros((2, 1)), Array2::zeros((1, 3)), Array2::zeros((1, 3)))];
        let m0 = MaskedMatrix::from_triplets(2, 3, vec![(0, 0, 0.0), (1, 2, 0.0)]).unwrap();
        assert_eq!(augmented_lagrangian(&[m0], &zero, &Array2::zeros((1, 3)), 1.0, &reg), 0.0);
    }

    #[test]
    fn lagrangian_matches_dense_oracle() {
        let m = observe(&rand_mat(3, 3, 19), |i, j| i <= j);
        let c = client(rand_mat(3, 2, 20), rand_mat(2, 3, 21), rand_mat(2, 3, 22));
        let c2 = client(rand_mat(3, 2, 23), rand_mat(2, 3, 24), rand_mat(2, 3, 25));
        let v = rand_mat(2, 3, 26);
        let (beta, reg) = (0.9, RegularizerSpec::ridge(0.1, 0.3));
        let mut oracle = 0.0;
        for cl in [&c, &c2] {
            let r = cl.u.dot(&cl.w) - m.to_dense();
            let mut f = 0.0;
            for (i, j, _) in m.iter() {
                f += 0.5 * r[[i, j]].powi(2);
            }
            let d = &cl.w - &v;
            oracle += (f + 0.05 * frob_sq(&cl.u)) / 2.0 + (&cl.y * &d).sum() + 0.5 * beta * frob_sq(&d);
        }
        oracle += 0.15 * frob_sq(&v);
        let got = augmented_lagrangian(&[m.clone(), m], &[c, c2], &v, beta, &reg);
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn stationarity_zero_at_constructed_point() {
        let us = [rand_mat(3, 2, 27), rand_mat(4, 2, 28)];
        let v = rand_mat(2, 5, 29);
        let ms: Vec<_> = us.iter().map(|u| observe(&u.dot(&v), |_, _| true)).collect();
        let clients: Vec<_> = ms
            .iter()
            .zip(&us)
            .map(|(m, u)| client(u.clone(), v.clone(), grad_v(m, u, &v) * -0.5))
            .collect();
        let reg = RegularizerSpec::ridge(0.0, 0.0);
        let r = stationarity_residual(&ms, &clients, &v, 0.3, &reg, Execution::Sequential).unwrap();
        assert!(r.abs() < 1e-10, "{r}");
    }

    #[test]
    fn stationarity_nonnegative_and_order_free() {
        let ms: Vec<_> = (0..3).map(|s| observe(&rand_mat(3, 4, 40 + s), |i, j| (i + j + s as usize).is_multiple_of(2))).collect();
        let clients: Vec<_> = (0..3)
            .map(|s| client(rand_mat(3, 2, 50 + s), rand_mat(2, 4, 60 + s), rand_mat(2, 4, 70 + s)))
            .collect();
        let v = rand_mat(2, 4, 80);
        let reg = RegularizerSpec::l1(0.05, 0.01);
        let a = stationarity_residual(&ms, &clients, &v, 0.5, &reg, Execution::Sequential).unwrap();
        let b = stationarity_residual(&ms, &clients, &v, 0.5, &reg, Execution::Parallel).unwrap();
        assert!(a > 0.0);
        assert_eq!(a, b);
        let rev_m: Vec<_> = ms.iter().rev().cloned().collect();
        let rev_c: Vec<_> = clients.iter().rev().cloned().collect();
        let c = stationarity_residual(&rev_m, &rev_c, &v, 0.5, &reg, Execution::Sequential).unwrap();
        assert!((a - c).abs() < 1e-12 * (1.0 + a));
    }

    #[test]
    fn nnz_examples() {
        assert_eq!(nnz_fraction(&Array2::zeros((3, 2)), 0.0), 0.0);
        assert_eq!(nnz_fraction(&Array2::ones((3, 2)), 0.0), 1.0);
        let q = rand_mat(4, 4, 81);
        let max = q.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        assert_eq!(nnz_fraction(&soft_threshold(&q, max + 0.1).unwrap(), 0.0), 0.0);
        let half = array![[0.0, 1.0], [2.0, 0.0]];
        assert_eq!(stacked_nnz_fraction(&[half, Array2::ones((1, 2))], 0.0), 4.0 / 6.0);
    }

    #[test]
    fn means() {
        let xs = [4.0, f64::NAN, 2.0, 6.0];
        let t = trailing_mean(&xs, 2);
        assert_eq!(t[0], 4.0);
        assert_eq!(t[1], 4.0);
        assert_eq!(t[2], 2.0);
        assert_eq!(t[3], 4.0);
        assert!(trailing_mean(&[f64::NAN], 3)[0].is_nan());
        assert_eq!(running_mean(&[1.0, 3.0, 5.0]), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn increase_detection() {
        assert_eq!(first_increase(&[3.0, 2.0, 2.0, 1.0], 1e-9), None);
        assert_eq!(first_increase(&[3.0, 2.0, 2.5], 1e-9), Some((1, 0.5)));
        assert_eq!(first_increase(&[1.0, 1.0 + 1e-12], 1e-9), None);
    }
}
