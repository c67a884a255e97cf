//! Log-domain Sinkhorn scaling for entropic optimal transport.
//!
//! Solves `min_A <A, C> + gamma <A, log A>` over couplings with marginals `mu`, `nu`.
//! Iterates on `log_u`, `log_v` with log-sum-exp reductions so that small `gamma`
//! (large `C / gamma`) never overflows. The plan is recovered as
//! `a_mn = exp(log_u_m - c_mn / gamma + log_v_n)`.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Zip};

use crate::error::{Error, Result};
use crate::types::{TransportPlan, TransportProblem};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 10_000;

#[inline]
fn lse_iter(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `out_m = LSE_n(k_mn + log_v_n)`.
fn row_lse(k: &Array2<f64>, log_v: &Array1<f64>, out: &mut Array1<f64>) {
    let lv = log_v.as_slice().expect("contiguous");
    for (m, row) in k.outer_iter().enumerate() {
        let row = row.to_slice().expect("contiguous");
        out[m] = lse_iter(row.iter().zip(lv).map(|(a, b)| a + b));
    }
}

/// `out_n = LSE_m(k_mn + log_u_m)`.
fn col_lse(k: &Array2<f64>, log_u: &Array1<f64>, max_buf: &mut Array1<f64>, out: &mut Array1<f64>) {
    max_buf.fill(f64::NEG_INFINITY);
    for (row, &lu) in k.outer_iter().zip(log_u.iter()) {
        Zip::from(&mut *max_buf).and(&row).for_each(|mx, &kv| {
            let v = kv + lu;
            if v > *mx {
                *mx = v;
            }
        });
    }
    out.fill(0.0);
    for (row, &lu) in k.outer_iter().zip(log_u.iter()) {
        Zip::from(&mut *out)
            .and(&row)
            .and(&*max_buf)
            .for_each(|acc, &kv, &mx| *acc += (kv + lu - mx).exp());
    }
    Zip::from(out).and(&*max_buf).for_each(|o, &mx| {
        *o = if mx == f64::NEG_INFINITY { mx } else { mx + o.ln() };
    });
}

/// Max-abs violation of both marginal constraints.
pub fn marginal_violation(plan: &Array2<f64>, mu: &Array1<f64>, nu: &Array1<f64>) -> f64 {
    let rows = plan.sum_axis(ndarray::Axis(1));
    let cols = plan.sum_axis(ndarray::Axis(0));
    let r = rows.iter().zip(mu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let c = cols.iter().zip(nu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    r.max(c)
}

/// Above this ratio of cost range to `gamma`, the solve is warm-started by annealing
/// `gamma` down from the cost range.
pub const ANNEAL_RATIO: f64 = 50.0;

/// Scaling updates at the target `gamma` before switching to Newton steps on the dual.
pub const NEWTON_AFTER: usize = 1000;

struct Scaling {
    log_u: Array1<f64>,
    log_v: Array1<f64>,
    r: Array1<f64>,
    s: Array1<f64>,
    buf: Array1<f64>,
}

impl Scaling {
    /// Runs at most `max_iter` row/column updates; returns the iterations used and
    /// whether the violation reached `tol`. On success `log_v` is left unupdated so
    /// that rows and columns are consistent with the measured violation.
    fn run(
        &mut self,
        k: &Array2<f64>,
        log_mu: &Array1<f64>,
        log_nu: &Array1<f64>,
        nu: &Array1<f64>,
        tol: f64,
        max_iter: usize,
    ) -> (usize, f64, bool) {
        let mut violation = f64::INFINITY;
        for it in 1..=max_iter {
            row_lse(k, &self.log_v, &mut self.r);
            Zip::from(&mut self.log_u)
                .and(log_mu)
                .and(&self.r)
                .for_each(|u, &lm, &rv| *u = lm - rv);
            // Rows are now exact; the column residual is the whole violation.
            col_lse(k, &self.log_u, &mut self.buf, &mut self.s);
            violation = self
                .log_v
                .iter()
                .zip(self.s.iter())
                .zip(nu.iter())
                .map(|((lv, sv), nv)| ((lv + sv).exp() - nv).abs())
                .fold(0.0, f64::max);
            if violation <= tol {
                return (it, violation, true);
            }
            Zip::from(&mut self.log_v)
                .and(log_nu)
                .and(&self.s)
                .for_each(|v, &ln, &sv| *v = ln - sv);
        }
        (max_iter, violation, false)
    }

    /// Damped Newton steps on the dual `sum_mn a_mn - <log_mu, .> ...`, i.e. on
    /// `phi(u, v) = sum exp(u_m + k_mn + v_n) - <mu, u> - <nu, v>`, with the last
    /// column potential held fixed.
    fn newton(&mut self, k: &Array2<f64>, mu: &Array1<f64>, nu: &Array1<f64>, tol: f64, max_iter: usize) -> (usize, f64, bool) {
        let (m, n) = k.dim();
        let dim = m + n - 1;
        let mut violation = f64::INFINITY;
        for it in 1..=max_iter {
            let plan = assemble_plan(k, &self.log_u, &self.log_v);
            violation = marginal_violation(&plan, mu, nu);
            if violation <= tol {
                return (it - 1, violation, true);
            }
            let rows = plan.sum_axis(ndarray::Axis(1));
            let cols = plan.sum_axis(ndarray::Axis(0));
            let mut h = DMatrix::<f64>::zeros(dim, dim);
            let mut g = DVector::<f64>::zeros(dim);
            for i in 0..m {
                h[(i, i)] = rows[i];
                g[i] = rows[i] - mu[i];
                for j in 0..n - 1 {
                    h[(i, m + j)] = plan[[i, j]];
                    h[(m + j, i)] = plan[[i, j]];
                }
            }
            for j in 0..n - 1 {
                h[(m + j, m + j)] = cols[j];
                g[m + j] = cols[j] - nu[j];
            }
            let step = match h.clone().cholesky() {
                Some(c) => c.solve(&g),
                None => match h.lu().solve(&g) {
                    Some(x) => x,
                    None => return (it, violation, false),
                },
            };
            let base = plan.sum() - self.log_u.dot(mu) - self.log_v.dot(nu);
            let slope = -g.dot(&step);
            let mut t = 1.0;
            loop {
                let u = Array1::from_shape_fn(m, |i| self.log_u[i] - t * step[i]);
                let v = Array1::from_shape_fn(n, |j| {
                    if j < n - 1 {
                        self.log_v[j] - t * step[m + j]
                    } else {
                        self.log_v[j]
                    }
                });
                let trial = assemble_plan(k, &u, &v).sum() - u.dot(mu) - v.dot(nu);
                if trial <= base + 1e-4 * t * slope || t < 1e-10 {
                    self.log_u = u;
                    self.log_v = v;
                    break;
                }
                t *= 0.5;
            }
        }
        (max_iter, violation, false)
    }
}

/// Solves the entropic transport problem to a max-abs marginal violation of `tol`.
pub fn solve_entropic_ot(problem: &TransportProblem, tol: f64, max_iter: usize) -> Result<TransportPlan> {
    problem.validate()?;
    if !(tol > 0.0) {
        return Err(Error::InvalidProblem(format!("tolerance must be positive, got {tol}")));
    }
    let (m, n) = problem.cost.dim();
    let gamma = problem.gamma;
    let log_mu = problem.mu.mapv(f64::ln);
    let log_nu = problem.nu.mapv(f64::ln);
    let mut state = Scaling {
        log_u: Array1::zeros(m),
        log_v: Array1::zeros(n),
        r: Array1::zeros(m),
        s: Array1::zeros(n),
        buf: Array1::zeros(n),
    };
    let mut used = 0;

    let lo = problem.cost.fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = problem.cost.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let range = hi - lo;
    if range > ANNEAL_RATIO * gamma {
        let mut stage_gamma = range / 10.0;
        let mut prev_gamma = stage_gamma;
        while stage_gamma > gamma {
            // Potentials carry over in cost units.
            let ratio = prev_gamma / stage_gamma;
            state.log_u.mapv_inplace(|u| u * ratio);
            state.log_v.mapv_inplace(|v| v * ratio);
            let k = problem.cost.mapv(|c| -c / stage_gamma);
            let (it, _, _) = state.run(&k, &log_mu, &log_nu, &problem.nu, tol.max(1e-6), (max_iter - used).min(500));
            used += it;
            prev_gamma = stage_gamma;
            stage_gamma *= 0.5;
        }
        let ratio = prev_gamma / gamma;
        state.log_u.mapv_inplace(|u| u * ratio);
        state.log_v.mapv_inplace(|v| v * ratio);
    }

    let k = problem.cost.mapv(|c| -c / gamma);
    let (it, mut violation, mut converged) = state.run(&k, &log_mu, &log_nu, &problem.nu, tol, (max_iter - used).min(NEWTON_AFTER));
    used += it;
    if !converged && used < max_iter {
        // Near-decomposable kernels stall the scaling updates.
        let (it, v, c) = state.newton(&k, &problem.mu, &problem.nu, tol, max_iter - used);
        used += it;
        violation = v;
        converged = c;
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations: used,
            violation,
        });
    }
    let plan = assemble_plan(&k, &state.log_u, &state.log_v);
    let marginal_violation = marginal_violation(&plan, &problem.mu, &problem.nu);
    Ok(TransportPlan {
        plan,
        log_u: state.log_u,
        log_v: state.log_v,
        iterations: used,
        marginal_violation,
    })
}

/// Solves with the default tolerance and iteration cap.
pub fn solve(problem: &TransportProblem) -> Result<TransportPlan> {
    solve_entropic_ot(problem, DEFAULT_TOL, DEFAULT_MAX_ITER)
}

fn assemble_plan(k: &Array2<f64>, log_u: &Array1<f64>, log_v: &Array1<f64>) -> Array2<f64> {
    let mut plan = k.clone();
    for (mut row, &lu) in plan.outer_iter_mut().zip(log_u.iter()) {
        Zip::from(&mut row).and(log_v).for_each(|a, &lv| *a = (*a + lu + lv).exp());
    }
    plan
}

/// `<A, C> + gamma * sum a log a`, with `0 log 0 = 0`.
pub fn plan_objective(plan: &Array2<f64>, problem: &TransportProblem) -> f64 {
    assert_eq!(plan.dim(), problem.cost.dim(), "plan and cost shapes differ");
    let mut transport = 0.0;
    let mut entropy = 0.0;
    Zip::from(plan).and(&problem.cost).for_each(|&a, &c| {
        transport += a * c;
        if a > 0.0 {
            entropy += a * a.ln();
        }
    });
    transport + problem.gamma * entropy
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_cell_plan_is_one() {
        let p = TransportProblem::uniform(array![[5.0]], 1.0);
        let plan = solve(&p).unwrap();
        assert_eq!(plan.plan, array![[1.0]]);
        assert!((plan_objective(&plan.plan, &p) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn zero_cost_gives_product_coupling() {
        let p = TransportProblem::uniform(Array2::zeros((2, 2)), 1.0);
        let plan = solve(&p).unwrap();
        for a in plan.plan.iter() {
            assert!((a - 0.25).abs() < 1e-12);
        }
        assert!((plan_objective(&plan.plan, &p) - 4.0 * 0.25 * 0.25f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn symmetric_two_by_two_matches_scaling_oracle() {
        // Diagonal entry s^2 and off-diagonal s^2 e^{-1} must sum to one half per row.
        let s2 = 0.5 / (1.0 + (-1.0f64).exp());
        let off = s2 * (-1.0f64).exp();
        assert!((s2 + off - 0.5).abs() < 1e-15);
        let p = TransportProblem::uniform(array![[0.0, 1.0], [1.0, 0.0]], 1.0);
        let plan = solve(&p).unwrap();
        assert!((plan.plan[[0, 0]] - s2).abs() < 1e-9);
        assert!((plan.plan[[0, 1]] - off).abs() < 1e-9);
        assert!((plan.plan[[0, 0]] - 0.3655).abs() < 1e-3);
        assert!((plan.plan[[1, 0]] - 0.1345).abs() < 1e-3);
    }

    #[test]
    fn plan_is_reconstructable_from_potentials() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cost = Array2::from_shape_simple_fn((4, 6), || rng.gen_range(0.0..3.0));
        let p = TransportProblem::uniform(cost.clone(), 0.3);
        let plan = solve(&p).unwrap();
        for ((m, n), &a) in plan.plan.indexed_iter() {
            let r = (plan.log_u[m] - cost[[m, n]] / 0.3 + plan.log_v[n]).exp();
            assert!((a - r).abs() < 1e-15);
        }
        assert!(plan.marginal_violation <= 1e-9);
    }

    #[test]
    fn near_decomposable_kernel_converges() {
        let cost = array![
            [0.41229433398798676, 0.9131915413324168, 0.8628288564966429],
            [0.5411336353390293, 0.5669999564327455, 0.6401653074086067],
            [0.30586219483176946, 0.3101301213373484, 0.914296943708302]
        ];
        let plan = solve(&TransportProblem::uniform(cost, 0.01)).unwrap();
        assert!(plan.marginal_violation <= 1e-9);
        assert!(plan.iterations < DEFAULT_MAX_ITER);
    }

    #[test]
    fn non_convergence_reports_violation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cost = Array2::from_shape_simple_fn((5, 5), || rng.gen_range(0.0..10.0));
        let p = TransportProblem::uniform(cost, 0.05);
        match solve_entropic_ot(&p, 1e-14, 2) {
            Err(Error::NonConvergence { iterations, violation }) => {
                assert_eq!(iterations, 2);
                assert!(violation > 1e-14);
            }
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }

    #[test]
    fn malformed_marginals_are_rejected() {
        let mut p = TransportProblem::uniform(Array2::zeros((2, 2)), 1.0);
        p.nu = array![0.7, 0.7];
        assert!(matches!(solve(&p), Err(Error::InvalidProblem(_))));
        let p = TransportProblem::uniform(Array2::zeros((2, 2)), 1.0);
        assert!(matches!(solve_entropic_ot(&p, 0.0, 10), Err(Error::InvalidProblem(_))));
    }
}
