//! Damped Newton solver for entropy-regularized quadratic problems
//!
//! `min mᵀKm + lᵀm + ε Σ m_i (log m_i - log w_i)` over `m ≥ 0`, `Σ m = M`,
//! shared by the thermal equilibrium and the critical-regime rate functional.

use crate::error::{Error, Result};
use crate::linalg::{dot, log_sum_exp, pcg};

pub(crate) struct EntropicProblem<'a> {
    /// `m ↦ Km` on the free variables.
    pub apply: &'a (dyn Fn(&[f64]) -> Vec<f64> + Sync),
    /// Diagonal of `K`, used only by the preconditioner.
    pub k_diag: f64,
    pub linear: &'a [f64],
    pub log_ref: &'a [f64],
    pub eps: f64,
    pub mass: f64,
}

pub(crate) struct EntropicState {
    pub u: Vec<f64>,
    pub m: Vec<f64>,
    pub km: Vec<f64>,
    pub f: f64,
}

/// Masses below `e^FLOOR` relative to the total carry no weight in any sum.
const FLOOR: f64 = -69.0;

impl EntropicProblem<'_> {
    pub fn state(&self, mut u: Vec<f64>) -> EntropicState {
        let shift = log_sum_exp(&u) - self.mass.ln();
        u.iter_mut().for_each(|x| *x -= shift);
        let m: Vec<f64> = u.iter().map(|x| x.exp()).collect();
        let km = (self.apply)(&m);
        let ent: f64 = (0..m.len()).map(|i| if m[i] > 0.0 { m[i] * (u[i] - self.log_ref[i]) } else { 0.0 }).sum();
        let f = dot(&m, &km) + dot(&m, self.linear) + self.eps * ent;
        EntropicState { u, m, km, f }
    }

    /// `2Km + l + ε(u - log w)` per variable.
    pub fn shifted(&self, st: &EntropicState) -> Vec<f64> {
        (0..st.u.len()).map(|i| 2.0 * st.km[i] + self.linear[i] + self.eps * (st.u[i] - self.log_ref[i])).collect()
    }

    /// Multiplier `k = (1/M) Σ m_i shifted_i` and the sup deviation from it.
    pub fn residual(&self, st: &EntropicState) -> (f64, f64) {
        let s = self.shifted(st);
        let k = dot(&st.m, &s) / self.mass;
        (k, s.iter().map(|x| (x - k).abs()).fold(0.0, f64::max))
    }

    /// Cells whose mass has underflowed get their log-mass directly from the
    /// Euler–Lagrange relation at the current potential.
    fn close_tail(&self, st: &mut EntropicState) {
        let floor = FLOOR + self.mass.ln();
        if st.u.iter().all(|&u| u >= floor) {
            return;
        }
        let (k, _) = self.residual(st);
        for i in 0..st.u.len() {
            if st.u[i] < floor {
                let u = (k - 2.0 * st.km[i] - self.linear[i]) / self.eps + self.log_ref[i];
                if u < floor {
                    st.u[i] = u;
                    st.m[i] = u.exp();
                }
            }
        }
    }

    /// Newton iterations in `u = log m` from `u0` until the residual is below
    /// `tol`. The constrained system `(2K + ε M^{-1}) Δ = -∇ + ν1`, `Σ Δ = 0`,
    /// is solved in the symmetric form `(ε + 2 S K S) w = S(…)`, `S = M^{1/2}`.
    pub fn solve(&self, u0: Vec<f64>, tol: f64, max_iter: usize) -> Result<(EntropicState, f64, usize)> {
        let n = u0.len();
        let eps = self.eps;
        let mut st = self.state(u0);
        let mut it = 0;
        let mut residual;
        loop {
            self.close_tail(&mut st);
            residual = self.residual(&st).1;
            if residual <= tol || it >= max_iter {
                break;
            }
            it += 1;
            let grad: Vec<f64> = self.shifted(&st).iter().map(|s| s + eps).collect();
            let sq: Vec<f64> = st.m.iter().map(|x| x.sqrt()).collect();
            let apply = |w: &[f64]| {
                let sw: Vec<f64> = w.iter().zip(&sq).map(|(a, b)| a * b).collect();
                let ksw = (self.apply)(&sw);
                (0..n).map(|i| eps * w[i] + 2.0 * sq[i] * ksw[i]).collect::<Vec<f64>>()
            };
            let diag: Vec<f64> = st.m.iter().map(|x| eps + 2.0 * self.k_diag * x).collect();
            let rhs_g: Vec<f64> = sq.iter().zip(&grad).map(|(a, b)| a * b).collect();
            // CG errors reach the log-mass step amplified by 1/ε, so solve tightly
            let (wg, _) = pcg(&apply, &diag, &rhs_g, 1e-12, 2000);
            let (w1, _) = pcg(&apply, &diag, &sq, 1e-12, 2000);
            let dg: Vec<f64> = wg.iter().zip(&sq).map(|(a, b)| a * b).collect();
            let d1: Vec<f64> = w1.iter().zip(&sq).map(|(a, b)| a * b).collect();
            let nu = dg.iter().sum::<f64>() / d1.iter().sum::<f64>();
            let delta: Vec<f64> = (0..n).map(|i| -dg[i] + nu * d1[i]).collect();
            let kdelta = (self.apply)(&delta);
            let du: Vec<f64> = (0..n).map(|i| (-grad[i] + nu - 2.0 * kdelta[i]) / eps).collect();
            let slope = dot(&grad, &delta);
            // once the predicted decrease is below round-off the objective can
            // no longer rank steps, and the residual serves as merit instead
            let flat = -slope <= 1e-13 * st.f.abs().max(1.0);
            // masses may grow by at most a factor e per step
            let floor = FLOOR + self.mass.ln();
            let grow = (0..n).filter(|&i| st.u[i] > floor).map(|i| du[i]).fold(0.0, f64::max);
            let mut t = if grow > 1.0 { 1.0 / grow } else { 1.0 };
            let mut accepted = false;
            while t > 1e-12 {
                let trial: Vec<f64> = (0..n).map(|i| st.u[i] + t * du[i]).collect();
                let mut cand = self.state(trial);
                let ok = if flat {
                    self.close_tail(&mut cand);
                    self.residual(&cand).1 < residual
                } else {
                    cand.f <= st.f + 1e-4 * t * slope.min(0.0)
                };
                if ok {
                    st = cand;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if !residual.is_finite() {
            return Err(Error::NotConverged { iterations: it, residual });
        }
        Ok((st, residual, it))
    }
}
