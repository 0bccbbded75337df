//! Equilibrium measure `μ_V`, thermal equilibrium measure `μ_β`, the
//! confinement term `ζ_β` and the blow-up `μ_β^{N^λ}`.

use serde::{Deserialize, Serialize};

use crate::entropic::EntropicProblem;
use crate::error::{invalid, Error, Result};
use crate::kernel::{potential_at, GridOperator};
use crate::linalg::{dot, log_sum_exp, pcg, project_simplex};
use crate::measures::{AxisBox, Grid, GridMeasure};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Potential {
    /// `V(x) = |x - center|²` (center defaults to the origin).
    Quadratic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<Vec<f64>>,
    },
    /// Piecewise-constant values on a grid, `+inf` outside its box.
    Tabulated { grid: Grid, values: Vec<f64> },
}

impl Potential {
    pub fn quadratic() -> Self {
        Potential::Quadratic { center: None }
    }

    pub fn shifted_quadratic(center: Vec<f64>) -> Self {
        Potential::Quadratic { center: Some(center) }
    }

    pub fn tabulated(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.num_cells() {
            return Err(Error::Dimension { expected: grid.num_cells(), got: values.len() });
        }
        Ok(Potential::Tabulated { grid, values })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Potential::Quadratic { center: None } => x.iter().map(|v| v * v).sum(),
            Potential::Quadratic { center: Some(c) } => x.iter().zip(c).map(|(v, a)| (v - a) * (v - a)).sum(),
            Potential::Tabulated { grid, values } => grid.locate(x).map_or(f64::INFINITY, |i| values[i]),
        }
    }

    pub fn on_grid(&self, grid: &Grid) -> Vec<f64> {
        let mut c = vec![0.0; grid.dim()];
        (0..grid.num_cells())
            .map(|i| {
                grid.cell_center_into(i, &mut c);
                self.eval(&c)
            })
            .collect()
    }

    /// Margin `min_∂ V - min V - 2 osc h`, where `osc h` is the oscillation of
    /// the potential of the uniform probability on the box; the potential
    /// counts as confining on the grid when the margin is positive.
    pub fn confinement_margin(&self, grid: &Grid) -> f64 {
        let v = self.on_grid(grid);
        let vmin = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let n = grid.n();
        let mut multi = vec![0usize; grid.dim()];
        let mut vb = f64::INFINITY;
        for (i, &vi) in v.iter().enumerate() {
            grid.unravel(i, &mut multi);
            if multi.iter().any(|&k| k == 0 || k + 1 == n) {
                vb = vb.min(vi);
            }
        }
        let op = GridOperator::shared(grid);
        let h = op.apply(&vec![1.0 / grid.num_cells() as f64; grid.num_cells()]);
        let hmax = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let hmin = h.iter().cloned().fold(f64::INFINITY, f64::min);
        vb - vmin - 2.0 * (hmax - hmin)
    }
}

#[derive(Clone, Debug)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-10, max_iter: 50_000 }
    }
}

/// Solver output: a probability grid measure with its multiplier and residual.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EquilibriumSolution {
    #[serde(flatten)]
    pub measure: GridMeasure,
    pub k: f64,
    pub el_residual: f64,
    pub iterations: usize,
    /// Tracked objective at the returned measure (`I_V` or `ℰ_β`).
    #[serde(default)]
    pub objective: f64,
    /// `Nβ` for thermal solutions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_beta: Option<f64>,
    /// Largest boundary-cell density over the largest density.
    #[serde(default)]
    pub boundary_ratio: f64,
    #[serde(skip)]
    log_density: Vec<f64>,
}

impl EquilibriumSolution {
    /// `log μ` per cell, available even where the density underflows.
    pub fn log_density(&self) -> Vec<f64> {
        if self.log_density.len() == self.measure.density.len() {
            self.log_density.clone()
        } else {
            self.measure.density.iter().map(|x| x.ln()).collect()
        }
    }

    /// Minimum and maximum density over cells above `1e-6·max`.
    pub fn support_range(&self) -> (f64, f64) {
        let max = self.measure.max_density();
        let min = self
            .measure
            .density
            .iter()
            .cloned()
            .filter(|&x| x > 1e-6 * max)
            .fold(f64::INFINITY, f64::min);
        (min, max)
    }

    /// Density of the cell containing the origin (or the nearest cell centre).
    pub fn density_at_origin(&self) -> f64 {
        let d = self.measure.dim();
        let grid = &self.measure.grid;
        match grid.locate(&vec![0.0; d]) {
            Some(i) => self.measure.density[i],
            None => 0.0,
        }
    }
}

/// `I_V(μ) = ℰ(μ) + ∫ V dμ`.
pub fn i_v(m: &GridMeasure, v: &Potential) -> f64 {
    let masses = m.cell_masses();
    let op = GridOperator::shared(&m.grid);
    let km = op.apply(&masses);
    dot(&masses, &km) + dot(&masses, &v.on_grid(&m.grid))
}

/// `ℰ_β(μ) = I_V(μ) + (1/Nβ) ent[μ]`.
pub fn e_beta(m: &GridMeasure, v: &Potential, n_beta: f64) -> Result<f64> {
    Ok(i_v(m, v) + m.entropy()? / n_beta)
}

/// Normalized `exp(-NβV)` on the grid.
pub fn gibbs_candidate(v: &Potential, grid: &Grid, n_beta: f64) -> Result<GridMeasure> {
    let vals = v.on_grid(grid);
    let u: Vec<f64> = vals.iter().map(|x| -n_beta * x).collect();
    let lse = log_sum_exp(&u);
    let vol = grid.cell_volume();
    GridMeasure::new(grid.clone(), u.iter().map(|x| (x - lse).exp() / vol).collect(), false)
}

/// Half width for which `exp(-NβV)` on the faces of `(-R, R)^d` drops below
/// `1e-12` of its peak, for `V = |x|²`, never below `floor`.
pub fn thermal_half_width(n_beta: f64, floor: f64) -> f64 {
    (-(1e-12f64).ln() / n_beta).sqrt().max(floor)
}

fn boundary_ratio(grid: &Grid, density: &[f64]) -> f64 {
    let n = grid.n();
    let mut multi = vec![0usize; grid.dim()];
    let mut b = 0.0f64;
    for (i, &x) in density.iter().enumerate() {
        grid.unravel(i, &mut multi);
        if multi.iter().any(|&k| k == 0 || k + 1 == n) {
            b = b.max(x);
        }
    }
    let max = density.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        b / max
    } else {
        0.0
    }
}

/// Minimizes `I_V` over probability measures on the grid.
///
/// Spectral projected gradient on the simplex (exact line search) supplies a
/// support estimate; a primal-dual active-set iteration then solves the KKT
/// system `2Km + V = c` on the support, `m = 0` and `2Km + V ≥ c` off it.
/// If the active-set loop does not settle, the gradient method continues
/// until the Frank–Wolfe gap falls below `tol·max(1, |I_V|)`.
pub fn solve_equilibrium(v: &Potential, grid: &Grid, opts: &SolverOptions) -> Result<EquilibriumSolution> {
    let n = grid.num_cells();
    let vol = grid.cell_volume();
    let op = GridOperator::shared(grid);
    let vv = v.on_grid(grid);
    if vv.iter().any(|x| !x.is_finite()) {
        return invalid("potential must be finite on the grid");
    }
    let mut m = vec![1.0 / n as f64; n];
    let warm = SolverOptions { tol: 1e-5, max_iter: opts.max_iter.min(3000) };
    let mut iterations = spg_simplex(&op, &vv, &mut m, &warm);
    let (pdas_m, pdas_iter) = active_set(&op, &vv, &m, opts.tol);
    iterations += pdas_iter;
    match pdas_m {
        Some(x) => m = x,
        None => iterations += spg_simplex(&op, &vv, &mut m, opts),
    }
    let mass: f64 = m.iter().sum();
    m.iter_mut().for_each(|x| *x /= mass);
    let km = op.apply(&m);
    let grad: Vec<f64> = km.iter().zip(&vv).map(|(k, v)| 2.0 * k + v).collect();
    let f = dot(&m, &km) + dot(&m, &vv);
    let gap = dot(&grad, &m) - grad.iter().cloned().fold(f64::INFINITY, f64::min);
    let mmax = m.iter().cloned().fold(0.0, f64::max);
    let support: Vec<usize> = (0..n).filter(|&i| m[i] > 1e-6 * mmax).collect();
    let c = support.iter().map(|&i| grad[i]).sum::<f64>() / support.len() as f64;
    let el = support.iter().map(|&i| (grad[i] - c).abs()).fold(0.0, f64::max);
    if gap > 1e3 * opts.tol * f.abs().max(1.0) {
        return Err(Error::NotConverged { iterations, residual: el.max(gap) });
    }
    let density: Vec<f64> = m.iter().map(|x| x / vol).collect();
    Ok(EquilibriumSolution {
        boundary_ratio: boundary_ratio(grid, &density),
        measure: GridMeasure::new(grid.clone(), density, false)?,
        k: c,
        el_residual: el,
        iterations,
        objective: f,
        n_beta: None,
        log_density: Vec::new(),
    })
}

/// Projected gradient with Barzilai–Borwein steps on `{m ≥ 0, Σ m = 1}` for
/// `mᵀKm + vᵀm`; returns the iteration count.
fn spg_simplex(op: &GridOperator, vv: &[f64], m: &mut [f64], opts: &SolverOptions) -> usize {
    let n = m.len();
    let mut km = op.apply(m);
    let mut alpha = 1.0 / (2.0 * op.self_value());
    let mut f = dot(m, &km) + dot(m, vv);
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let grad: Vec<f64> = km.iter().zip(vv).map(|(k, v)| 2.0 * k + v).collect();
        let gmin = grad.iter().cloned().fold(f64::INFINITY, f64::min);
        if dot(&grad, m) - gmin <= opts.tol * f.abs().max(1.0) {
            break;
        }
        let trial: Vec<f64> = m.iter().zip(&grad).map(|(x, g)| x - alpha * g).collect();
        let y = project_simplex(&trial, 1.0);
        let dir: Vec<f64> = y.iter().zip(m.iter()).map(|(a, b)| a - b).collect();
        let gd = dot(&grad, &dir);
        if gd >= 0.0 {
            alpha *= 4.0;
            continue;
        }
        let kd = op.apply(&dir);
        let dkd = dot(&dir, &kd);
        let t = if dkd > 0.0 { (-gd / (2.0 * dkd)).min(1.0) } else { 1.0 };
        for i in 0..n {
            m[i] = (m[i] + t * dir[i]).max(0.0);
            km[i] += t * kd[i];
        }
        if iterations % 64 == 0 {
            km = op.apply(m);
        }
        let f_new = dot(m, &km) + dot(m, vv);
        debug_assert!(f_new <= f + 1e-12 * f.abs().max(1.0));
        f = f_new;
        let ss = t * t * dot(&dir, &dir);
        let sy = 2.0 * t * t * dkd;
        alpha = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e12) } else { (alpha * 2.0).min(1e12) };
    }
    iterations
}

/// Primal-dual active-set iteration for the simplex-constrained quadratic.
fn active_set(op: &GridOperator, vv: &[f64], start: &[f64], tol: f64) -> (Option<Vec<f64>>, usize) {
    let n = start.len();
    let mmax = start.iter().cloned().fold(0.0, f64::max);
    let mut free: Vec<bool> = start.iter().map(|&x| x > 1e-9 * mmax).collect();
    let ones = vec![1.0; n];
    for it in 1..=60 {
        let idx: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
        if idx.is_empty() {
            return (None, it);
        }
        let apply = |z: &[f64]| {
            let mut full = vec![0.0; n];
            for (k, &i) in idx.iter().enumerate() {
                full[i] = z[k];
            }
            let y = op.apply(&full);
            idx.iter().map(|&i| y[i]).collect::<Vec<f64>>()
        };
        let diag = vec![op.self_value(); idx.len()];
        let vi: Vec<f64> = idx.iter().map(|&i| vv[i]).collect();
        let (p, _) = pcg(&apply, &diag, &ones[..idx.len()], 1e-13, 5000);
        let (q, _) = pcg(&apply, &diag, &vi, 1e-13, 5000);
        let c = (2.0 + q.iter().sum::<f64>()) / p.iter().sum::<f64>();
        let mut m = vec![0.0; n];
        for (k, &i) in idx.iter().enumerate() {
            m[i] = (c * p[k] - q[k]) / 2.0;
        }
        let km = op.apply(&m);
        let scale = c.abs().max(1.0);
        let mut next = vec![false; n];
        let mut changed = false;
        for i in 0..n {
            let lam = 2.0 * km[i] + vv[i] - c;
            next[i] = if free[i] { m[i] > 0.0 } else { lam < -tol * scale };
            changed |= next[i] != free[i];
        }
        if !changed {
            let ok = (0..n).all(|i| m[i] >= 0.0);
            return (if ok { Some(m) } else { None }, it);
        }
        free = next;
    }
    (None, 60)
}

/// Minimizes `ℰ_β` over probability measures on the grid.
///
/// Damped Newton in log-mass variables (see [`crate::entropic`]) with
/// continuation in `Nβ`: levels grow ×4 from at most 2 up to the target, each
/// warm-started from the previous one.
pub fn solve_thermal(v: &Potential, n_beta: f64, grid: &Grid, opts: &SolverOptions) -> Result<EquilibriumSolution> {
    if !(n_beta > 0.0) || !n_beta.is_finite() {
        return invalid("Nβ must be positive");
    }
    let n = grid.num_cells();
    let vol = grid.cell_volume();
    let log_vol = vol.ln();
    let op = GridOperator::shared(grid);
    let vv = v.on_grid(grid);
    if vv.iter().any(|x| !x.is_finite()) {
        return invalid("potential must be finite on the grid");
    }
    let vmin = vv.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut levels = vec![n_beta];
    while *levels.last().unwrap() > 2.0 {
        let next = levels.last().unwrap() / 4.0;
        levels.push(next);
    }
    levels.reverse();
    let log_ref = vec![log_vol; n];
    let apply = |m: &[f64]| op.apply(m);
    let mut u: Vec<f64> = vv.iter().map(|x| -levels[0] * (x - vmin)).collect();
    let mut total_iter = 0;
    let mut last = None;
    for (li, &nb) in levels.iter().enumerate() {
        let problem = EntropicProblem {
            apply: &apply,
            k_diag: op.self_value(),
            linear: &vv,
            log_ref: &log_ref,
            eps: 1.0 / nb,
            mass: 1.0,
        };
        let final_level = li + 1 == levels.len();
        let tol = if final_level { opts.tol } else { 1e-6 };
        let (st, residual, it) = problem.solve(u, tol, opts.max_iter.min(200))?;
        total_iter += it;
        u = st.u.clone();
        if final_level {
            if !(residual <= 1e3 * opts.tol.max(1e-12)) && residual > 1e-2 {
                return Err(Error::NotConverged { iterations: total_iter, residual });
            }
            last = Some((st, residual));
        }
    }
    let (st, residual) = last.expect("at least one level");
    let log_density: Vec<f64> = st.u.iter().map(|x| x - log_vol).collect();
    let density: Vec<f64> = st.m.iter().map(|x| x / vol).collect();
    let measure = GridMeasure::new(grid.clone(), density, false)?;
    let eps = 1.0 / n_beta;
    let ent: f64 = st.m.iter().zip(&log_density).map(|(m, l)| if *m > 0.0 { m * l } else { 0.0 }).sum();
    // k = 2ℰ(μ) + ∫V dμ + (1/Nβ) ent[μ]
    let k = 2.0 * dot(&st.m, &st.km) + dot(&st.m, &vv) + eps * ent;
    Ok(EquilibriumSolution {
        boundary_ratio: boundary_ratio(grid, &measure.density),
        measure,
        k,
        el_residual: residual,
        iterations: total_iter,
        objective: st.f,
        n_beta: Some(n_beta),
        log_density,
    })
}

/// `ζ_β = -(1/Nβ) log μ_β` per cell.
pub fn zeta(sol: &EquilibriumSolution, n: usize, beta: f64) -> Vec<f64> {
    let nb = n as f64 * beta;
    sol.log_density().iter().map(|l| -l / nb).collect()
}

/// Extension of `ζ_β` to arbitrary points through the Euler–Lagrange
/// relation `ζ_β = 2h^{μ_β} + V - k`, with the smeared point kernel for `h`.
pub fn zeta_at(sol: &EquilibriumSolution, v: &Potential, x: &[f64]) -> f64 {
    2.0 * potential_at(&sol.measure, x) + v.eval(x) - sol.k
}

/// `μ_β^{N^λ}(x) = μ_β(N^{-λ} x)`.
pub fn blowup(sol: &EquilibriumSolution, n: usize, lambda: f64) -> Result<GridMeasure> {
    let d = sol.measure.dim();
    if !(0.0..1.0 / d as f64).contains(&lambda) {
        return invalid(format!("λ must lie in [0, 1/{d})"));
    }
    sol.measure.dilate((n as f64).powf(lambda))
}

/// `sup_{□_R} |μ_β^{N^λ} - μ_V(0)|` over blown-up cells whose centres lie in `□_R`.
pub fn blowup_sup_distance(blown: &GridMeasure, r: f64, mu_v0: f64) -> Result<f64> {
    let b = AxisBox::centered(blown.dim(), r)?;
    let mut c = vec![0.0; blown.dim()];
    let mut best = 0.0f64;
    let mut any = false;
    for (i, &x) in blown.density.iter().enumerate() {
        blown.grid.cell_center_into(i, &mut c);
        if b.contains(&c) {
            any = true;
            best = best.max((x - mu_v0).abs());
        }
    }
    if !any {
        return invalid("no cell centre inside the blow-up box");
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_potential() {
        assert_eq!(Potential::quadratic().eval(&[1.0, 2.0, 0.0]), 5.0);
        assert_eq!(Potential::shifted_quadratic(vec![1.0, 0.0, 0.0]).eval(&[1.0, 2.0, 0.0]), 4.0);
        let s = serde_json::to_string(&Potential::quadratic()).unwrap();
        assert_eq!(s, r#"{"kind":"quadratic"}"#);
    }

    #[test]
    fn equilibrium_small_grid() {
        let grid = Grid::centered_cube(3, 1.5, 10).unwrap();
        let v = Potential::quadratic();
        assert!(v.confinement_margin(&grid) > 0.0);
        let sol = solve_equilibrium(&v, &grid, &SolverOptions::default()).unwrap();
        assert!((sol.measure.mass() - 1.0).abs() < 1e-12);
        assert!(sol.el_residual < 1e-2);
    }

    #[test]
    fn thermal_small_grid() {
        let grid = Grid::centered_cube(3, 1.5, 8).unwrap();
        let v = Potential::quadratic();
        let sol = solve_thermal(&v, 10.0, &grid, &SolverOptions::default()).unwrap();
        assert!((sol.measure.mass() - 1.0).abs() < 1e-10);
        assert!(sol.el_residual < 1e-8);
        assert!(sol.measure.min_density() > 0.0);
        let e = e_beta(&sol.measure, &v, 10.0).unwrap();
        assert!((e - sol.objective).abs() < 1e-10 * e.abs());
        let gibbs = gibbs_candidate(&v, &grid, 10.0).unwrap();
        assert!(e <= e_beta(&gibbs, &v, 10.0).unwrap());
    }

    #[test]
    fn zeta_mass_identity() {
        let grid = Grid::centered_cube(3, 1.5, 6).unwrap();
        let sol = solve_thermal(&Potential::quadratic(), 5.0, &grid, &SolverOptions::default()).unwrap();
        let z = zeta(&sol, 5, 1.0);
        let vol = grid.cell_volume();
        let lhs = -sol.measure.entropy().unwrap() / 5.0;
        let rhs: f64 = z.iter().zip(&sol.measure.density).map(|(a, b)| a * b * vol).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn blowup_mass_and_range() {
        let grid = Grid::centered_cube(3, 1.5, 6).unwrap();
        let sol = solve_thermal(&Potential::quadratic(), 5.0, &grid, &SolverOptions::default()).unwrap();
        let b = blowup(&sol, 64, 0.1).unwrap();
        let expect = 64f64.powf(0.3);
        assert!((b.mass() - expect).abs() < 1e-6 * expect);
        assert_eq!(blowup(&sol, 64, 0.0).unwrap(), sol.measure);
        assert!(blowup(&sol, 64, 0.34).is_err());
    }
}
