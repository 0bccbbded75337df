//! Rate functionals: the entropic `𝒩`, the screened energy `Φ`, and the
//! critical-regime `𝐓`/`𝒯`, with the closed-form sub-minimizers `κ` and `α`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::entropic::EntropicProblem;
use crate::equilibrium::{blowup, EquilibriumSolution};
use crate::error::{invalid, Error, Result};
use crate::gibbs::RegimeParams;
use crate::kernel::{ball_potential, pair_sum, potential_at, GridOperator, LaplacePreconditioner};
use crate::linalg::{dot, log_sum_exp, pcg_with, project_capped};
use crate::measures::dist;
use crate::measures::{AtomicMeasure, AxisBox, Grid, GridMeasure};

/// `𝒩[μ | α 1_box] = ent[μ | α 1_box] + α|box| - |μ|`, summed cellwise over
/// cells whose centre lies in `box`; `+∞` if `μ` charges a cell outside.
pub fn n_rate(mu: &GridMeasure, alpha: f64, b: &AxisBox) -> Result<f64> {
    if !(alpha > 0.0) {
        return invalid("reference density must be positive");
    }
    let vol = mu.grid.cell_volume();
    let mut c = vec![0.0; mu.dim()];
    let mut s = 0.0;
    for (i, &rho) in mu.density.iter().enumerate() {
        if rho < 0.0 {
            return Err(Error::NegativeDensity { cell: i, value: rho });
        }
        mu.grid.cell_center_into(i, &mut c);
        if b.contains(&c) {
            let t = if rho > 0.0 { rho * (rho / alpha).ln() } else { 0.0 };
            s += t - rho + alpha;
        } else if rho > 0.0 {
            return Ok(f64::INFINITY);
        }
    }
    Ok(s * vol)
}

/// Largest mass compatible with `𝒩 ≤ level` for reference `α` on a set of
/// volume `vol`: by Jensen `𝒩 ≥ αvol·f(|μ|/(αvol))` with
/// `f(t) = t log t - t + 1`, so `|μ| ≤ t* αvol` where `f(t*) = level/(αvol)`, `t* ≥ 1`.
pub fn n_mass_bound(level: f64, alpha: f64, vol: f64) -> Result<f64> {
    if !(alpha > 0.0 && vol > 0.0 && level >= 0.0) {
        return invalid("mass bound needs α, vol > 0 and level ≥ 0");
    }
    let target = level / (alpha * vol);
    let f = |t: f64| t * t.ln() - t + 1.0;
    let (mut lo, mut hi) = (1.0, 2.0);
    while f(hi) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi * alpha * vol)
}

/// Interior box `□_R` embedded in a truncation box, both tiled by one grid
/// whose cell faces follow the interior boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExteriorDomain {
    pub interior: AxisBox,
    pub truncation: AxisBox,
    pub grid: Grid,
    pub interior_cells_per_axis: usize,
}

impl ExteriorDomain {
    /// `cells` cells per axis across the interior; the truncation half width
    /// is `factor` times the interior one, rounded up to whole cells.
    pub fn new(interior: AxisBox, cells: usize, factor: f64) -> Result<Self> {
        if cells == 0 {
            return invalid("at least one interior cell per axis");
        }
        if !(factor > 1.0) {
            return invalid("truncation factor must exceed 1");
        }
        let pad = ((factor - 1.0) * cells as f64 / 2.0 - 1e-9).ceil().max(1.0) as usize;
        let hw: Vec<f64> = interior.half_width.iter().map(|w| w * (1.0 + 2.0 * pad as f64 / cells as f64)).collect();
        let truncation = AxisBox::new(interior.center.clone(), hw)?;
        let grid = Grid::new(truncation.clone(), cells + 2 * pad)?;
        Ok(ExteriorDomain { interior, truncation, grid, interior_cells_per_axis: cells })
    }

    pub fn centered(d: usize, r: f64, cells: usize, factor: f64) -> Result<Self> {
        Self::new(AxisBox::centered(d, r)?, cells, factor)
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    /// Same construction on `x·interior`; the cell count is unchanged.
    pub fn dilated(&self, x: f64) -> ExteriorDomain {
        ExteriorDomain {
            interior: self.interior.scaled(x),
            truncation: self.truncation.scaled(x),
            grid: self.grid.dilated(x),
            interior_cells_per_axis: self.interior_cells_per_axis,
        }
    }

    /// Same boxes with `k` times as many cells per axis.
    pub fn refined(&self, k: usize) -> ExteriorDomain {
        ExteriorDomain {
            interior: self.interior.clone(),
            truncation: self.truncation.clone(),
            grid: self.grid.refined(k),
            interior_cells_per_axis: self.interior_cells_per_axis * k,
        }
    }

    pub fn is_interior(&self, cell: usize) -> bool {
        self.interior.contains(&self.grid.cell_center(cell))
    }

    pub fn exterior_cells(&self) -> Vec<usize> {
        (0..self.grid.num_cells()).filter(|&i| !self.is_interior(i)).collect()
    }

    /// Interior grid: the cells of `grid` inside `interior`.
    pub fn interior_grid(&self) -> Grid {
        let h = self.grid.spacings();
        let hw: Vec<f64> = h.iter().map(|s| s * self.interior_cells_per_axis as f64 / 2.0).collect();
        Grid::new(AxisBox { center: self.interior.center.clone(), half_width: hw }, self.interior_cells_per_axis)
            .expect("interior grid")
    }

    /// Densities of `m` sampled at the centres of this grid (zero off its box).
    pub fn sample(&self, m: &GridMeasure) -> Result<Vec<f64>> {
        if m.dim() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: m.dim() });
        }
        let mut c = vec![0.0; self.dim()];
        Ok((0..self.grid.num_cells())
            .map(|i| {
                self.grid.cell_center_into(i, &mut c);
                m.value_at(&c)
            })
            .collect())
    }

    /// Densities of an interior measure sampled at the centres of this grid;
    /// `μ` must not charge cells centred outside the interior.
    pub fn embed(&self, mu: &GridMeasure) -> Result<Vec<f64>> {
        let mut c = vec![0.0; mu.dim()];
        for (i, &v) in mu.density.iter().enumerate() {
            mu.grid.cell_center_into(i, &mut c);
            if v != 0.0 && !self.interior.contains(&c) {
                return Err(Error::OutsideGrid);
            }
        }
        let rho = self.sample(mu)?;
        Ok(rho.iter().enumerate().map(|(i, &r)| if self.is_interior(i) { r } else { 0.0 }).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    /// `"N"`, `"Phi"` or `"T"`.
    pub functional: String,
    pub value: f64,
    pub mass_error: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Minimizing exterior density on the domain grid (zero inside).
    pub minimizer: GridMeasure,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateOptions {
    /// KKT tolerance relative to `max(1, |2Kc|_∞)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RateOptions {
    fn default() -> Self {
        RateOptions { tol: 1e-8, max_iter: 20_000 }
    }
}

/// `min (c + Px)ᵀ K (c + Px)` over `x ≥ 0` on the exterior cells, optionally
/// with `Σ x ≤ cap`. Masses, not densities.
struct Screening<'a> {
    op: Arc<GridOperator>,
    ext: &'a [usize],
    n: usize,
    kc: Vec<f64>,
    ckc: f64,
    cap: Option<f64>,
}

impl Screening<'_> {
    fn k_ext(&self, x: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.n];
        for (k, &i) in self.ext.iter().enumerate() {
            full[i] = x[k];
        }
        let y = self.op.apply(&full);
        self.ext.iter().map(|&i| y[i]).collect()
    }

    fn grad_from(&self, kx: &[f64]) -> Vec<f64> {
        self.ext.iter().zip(kx).map(|(&i, k)| 2.0 * (self.kc[i] + k)).collect()
    }

    fn value_from(&self, x: &[f64], kx: &[f64]) -> f64 {
        let lin: f64 = self.ext.iter().zip(x).map(|(&i, xi)| self.kc[i] * xi).sum();
        self.ckc + 2.0 * lin + dot(x, kx)
    }

    fn project(&self, x: &[f64]) -> Vec<f64> {
        match self.cap {
            Some(c) => project_capped(x, c),
            None => x.iter().map(|v| v.max(0.0)).collect(),
        }
    }

    fn scale(&self) -> f64 {
        self.ext.iter().map(|&i| 2.0 * self.kc[i].abs()).fold(1.0, f64::max)
    }

    /// Multiplier of the mass cap and the KKT violation.
    fn kkt(&self, x: &[f64], grad: &[f64]) -> (f64, f64) {
        let mass: f64 = x.iter().sum();
        let xmax = x.iter().cloned().fold(0.0, f64::max);
        let positive = |v: f64| v > 1e-14 * xmax.max(1e-300);
        let theta = match self.cap {
            Some(c) if mass >= c * (1.0 - 1e-12) => {
                let (s, k) = x.iter().zip(grad).filter(|(v, _)| positive(**v)).fold((0.0, 0), |(s, k), (_, g)| (s + g, k + 1));
                if k > 0 {
                    (-s / k as f64).max(0.0)
                } else {
                    (-grad.iter().cloned().fold(f64::INFINITY, f64::min)).max(0.0)
                }
            }
            _ => 0.0,
        };
        let r = x
            .iter()
            .zip(grad)
            .map(|(&v, &g)| if positive(v) { (g + theta).abs() } else { (-(g + theta)).max(0.0) })
            .fold(0.0, f64::max);
        (theta, r)
    }

    /// Spectral projected gradient with exact line search.
    fn spg(&self, x: &mut Vec<f64>, tol: f64, max_iter: usize) -> usize {
        let mut kx = self.k_ext(x);
        let mut alpha = 1.0 / (2.0 * self.op.self_value());
        let mut it = 0;
        while it < max_iter {
            it += 1;
            let g = self.grad_from(&kx);
            if self.kkt(x, &g).1 <= tol {
                break;
            }
            let trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - alpha * b).collect();
            let y = self.project(&trial);
            let dir: Vec<f64> = y.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
            let gd = dot(&g, &dir);
            if gd >= 0.0 {
                alpha *= 4.0;
                if alpha > 1e12 {
                    break;
                }
                continue;
            }
            let kd = self.k_ext(&dir);
            let dkd = dot(&dir, &kd);
            let t = if dkd > 0.0 { (-gd / (2.0 * dkd)).min(1.0) } else { 1.0 };
            for i in 0..x.len() {
                x[i] = (x[i] + t * dir[i]).max(0.0);
                kx[i] += t * kd[i];
            }
            if it % 64 == 0 {
                kx = self.k_ext(x);
            }
            let ss = t * t * dot(&dir, &dir);
            let sy = 2.0 * t * t * dkd;
            alpha = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e12) } else { (alpha * 2.0).min(1e12) };
        }
        it
    }

    /// Primal-dual active-set iteration started from the support of `x`.
    /// Returns `None` if the free set does not settle on a feasible point.
    fn active_set(&self, x: &[f64], tol: f64) -> (Option<Vec<f64>>, usize) {
        let m = x.len();
        let xmax = x.iter().cloned().fold(0.0, f64::max);
        let mut free: Vec<bool> = x.iter().map(|&v| v > 1e-9 * xmax).collect();
        for it in 1..=60 {
            let idx: Vec<usize> = (0..m).filter(|&k| free[k]).collect();
            let mut sol = vec![0.0; m];
            let mut theta = 0.0;
            if !idx.is_empty() {
                let apply = |z: &[f64]| {
                    let mut v = vec![0.0; m];
                    for (a, &k) in idx.iter().enumerate() {
                        v[k] = z[a];
                    }
                    let kv = self.k_ext(&v);
                    idx.iter().map(|&k| kv[k]).collect::<Vec<f64>>()
                };
                let cells: Vec<usize> = idx.iter().map(|&k| self.ext[k]).collect();
                let pre = LaplacePreconditioner::new(self.op.grid(), &cells);
                let precond = |r: &[f64]| pre.apply(r);
                let rhs: Vec<f64> = cells.iter().map(|&c| -self.kc[c]).collect();
                let (p, _) = pcg_with(&apply, &precond, &rhs, 1e-13, 5000);
                let mut xf = p.clone();
                if let Some(c) = self.cap {
                    let total: f64 = p.iter().sum();
                    if total > c {
                        let (q, _) = pcg_with(&apply, &precond, &vec![1.0; idx.len()], 1e-13, 5000);
                        // x = p - (θ/2) q with Σ x = cap
                        theta = 2.0 * (total - c) / q.iter().sum::<f64>();
                        xf = p.iter().zip(&q).map(|(a, b)| a - 0.5 * theta * b).collect();
                    }
                }
                for (a, &k) in idx.iter().enumerate() {
                    sol[k] = xf[a];
                }
            }
            let kx = self.k_ext(&sol);
            let g = self.grad_from(&kx);
            let mut next = vec![false; m];
            let mut changed = false;
            for k in 0..m {
                next[k] = if free[k] { sol[k] > 0.0 } else { g[k] + theta < -tol };
                changed |= next[k] != free[k];
            }
            if !changed {
                let feasible = sol.iter().all(|&v| v >= 0.0);
                return (if feasible { Some(sol) } else { None }, it);
            }
            free = next;
        }
        (None, 60)
    }

    fn solve(&self, opts: &RateOptions) -> Result<(Vec<f64>, f64, f64, usize)> {
        let m = self.ext.len();
        let tol = opts.tol * self.scale();
        // screening usually charges every exterior cell, so try that support first
        let (direct, mut iterations) = self.active_set(&vec![1.0; m], tol);
        let x = match direct {
            Some(x) => x,
            None => {
                let mut x = vec![0.0; m];
                iterations += self.spg(&mut x, tol.max(1e-4 * self.scale()), opts.max_iter.min(2000));
                let (polished, pas) = self.active_set(&x, tol);
                iterations += pas;
                match polished {
                    Some(p) => p,
                    None => {
                        iterations += self.spg(&mut x, tol, opts.max_iter);
                        x
                    }
                }
            }
        };
        let kx = self.k_ext(&x);
        let g = self.grad_from(&kx);
        let (_, r) = self.kkt(&x, &g);
        if r > 1e3 * tol {
            return Err(Error::NotConverged { iterations, residual: r });
        }
        Ok((x.clone(), self.value_from(&x, &kx), r / self.scale(), iterations))
    }
}

fn screening_report(
    domain: &ExteriorDomain,
    charge: &[f64],
    cap: Option<f64>,
    opts: &RateOptions,
) -> Result<RateReport> {
    let grid = &domain.grid;
    let vol = grid.cell_volume();
    let op = GridOperator::shared(grid);
    let c: Vec<f64> = charge.iter().map(|r| r * vol).collect();
    let kc = op.apply(&c);
    let ckc = dot(&c, &kc);
    let ext = domain.exterior_cells();
    if let Some(m) = cap {
        if !(m >= 0.0) {
            return invalid("mass cap must be non-negative");
        }
    }
    let problem = Screening { op, ext: &ext, n: grid.num_cells(), kc, ckc, cap };
    let (x, value, kkt, iterations) = if cap == Some(0.0) || ext.is_empty() {
        (vec![0.0; ext.len()], ckc, 0.0, 0)
    } else {
        problem.solve(opts)?
    };
    let mut density = vec![0.0; grid.num_cells()];
    for (k, &i) in ext.iter().enumerate() {
        density[i] = x[k] / vol;
    }
    let mass: f64 = x.iter().sum();
    let mass_error = cap.map_or(0.0, |m| (mass - m).max(0.0));
    Ok(RateReport {
        functional: "Phi".to_string(),
        value,
        mass_error,
        kkt_residual: kkt,
        iterations,
        minimizer: GridMeasure::new(grid.clone(), density, false)?,
    })
}

/// `Φ^α_{□_R}(μ) = min_{φ ≥ 0 outside} ℰ(μ + φ - α)` with the background `α`
/// on the whole truncation box.
pub fn phi_rate(mu: &GridMeasure, alpha: f64, domain: &ExteriorDomain, opts: &RateOptions) -> Result<RateReport> {
    let rho = domain.embed(mu)?;
    let charge: Vec<f64> = rho.iter().map(|r| r - alpha).collect();
    screening_report(domain, &charge, None, opts)
}

/// `Φ` with the exterior mass bounded by `cap`.
pub fn phi_mass_constrained(
    mu: &GridMeasure,
    alpha: f64,
    domain: &ExteriorDomain,
    cap: f64,
    opts: &RateOptions,
) -> Result<RateReport> {
    let rho = domain.embed(mu)?;
    let charge: Vec<f64> = rho.iter().map(|r| r - alpha).collect();
    screening_report(domain, &charge, Some(cap), opts)
}

/// `Φ^{background}_{□_R}(μ) = min_{φ ≥ 0 outside} ℰ(μ + φ - background)`,
/// the background sampled at the centres of the domain grid.
pub fn phi_with_background(
    mu: &GridMeasure,
    background: &GridMeasure,
    domain: &ExteriorDomain,
    opts: &RateOptions,
) -> Result<RateReport> {
    let rho = domain.embed(mu)?;
    let bg = domain.sample(background)?;
    let charge: Vec<f64> = rho.iter().zip(&bg).map(|(r, b)| r - b).collect();
    screening_report(domain, &charge, None, opts)
}

/// Both sides of `Φ^{M}_{Ω}(μ) = x^{-(d+2)} Φ^{x^d M}_{xΩ}(μ^x)`; the right side
/// is evaluated on the dilated domain refined `refine` times per axis.
pub fn phi_scaling_check(
    mu: &GridMeasure,
    alpha: f64,
    domain: &ExteriorDomain,
    x: f64,
    cap: Option<f64>,
    refine: usize,
    opts: &RateOptions,
) -> Result<(f64, f64)> {
    let d = domain.dim() as i32;
    let eval = |m: &GridMeasure, dom: &ExteriorDomain, c: Option<f64>| -> Result<f64> {
        let rho = dom.embed(m)?;
        let charge: Vec<f64> = rho.iter().map(|r| r - alpha).collect();
        Ok(screening_report(dom, &charge, c, opts)?.value)
    };
    let lhs = eval(mu, domain, cap)?;
    let dilated = domain.dilated(x).refined(refine.max(1));
    let mu_x = mu.dilate(x)?.subdivide(refine.max(1));
    let rhs = x.powi(-(d + 2)) * eval(&mu_x, &dilated, cap.map(|c| c * x.powi(d)))?;
    Ok((lhs, rhs))
}

/// Result of a closed-form entropy tilt `scale · reference · 1_exterior`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiltSolution {
    pub scale: f64,
    pub minimizer: GridMeasure,
    /// `ent[minimizer | reference 1_exterior] = mass · log(scale)`.
    pub value: f64,
    pub exterior_integral: f64,
}

fn exterior_tilt(reference: &GridMeasure, excluded: &AxisBox, mass: f64) -> Result<TiltSolution> {
    let ext = GridMeasure { density: reference.density.clone(), ..reference.clone() };
    let inside = ext.restrict(excluded);
    let outside = ext.add_scaled(-1.0, &inside)?;
    let integral = outside.mass();
    if !(integral > 0.0) {
        return invalid("reference has no mass outside the excluded box");
    }
    if mass < 0.0 {
        return Err(Error::Infeasible(format!("negative exterior mass {mass}")));
    }
    let scale = mass / integral;
    let mut minimizer = outside.scale(scale);
    minimizer.signed = false;
    let value = if mass > 0.0 { mass * scale.ln() } else { 0.0 };
    Ok(TiltSolution { scale, minimizer, value, exterior_integral: integral })
}

/// `κ = (N^{λd} - |ν̄|)/∫_{ext} μ_β^{N^λ}` and `μ* = κ μ_β^{N^λ} 1_{ext}`,
/// minimizing `ent[μ | μ_β^{N^λ}]` over exterior measures of that mass.
pub fn kappa_minimizer(nu_bar_mass: f64, total_mass: f64, blown: &GridMeasure, interior: &AxisBox) -> Result<TiltSolution> {
    exterior_tilt(blown, interior, total_mass - nu_bar_mass)
}

/// `α = (1 - i_N/N)/∫_{ext} μ_β` and `ρ* = α μ_β 1_{ext}` outside `excluded`
/// (the box `□_{RN^{-λ}}` in unscaled coordinates).
pub fn alpha_minimizer(i_n: usize, n: usize, sol: &EquilibriumSolution, excluded: &AxisBox) -> Result<TiltSolution> {
    if i_n > n || n == 0 {
        return invalid("need 0 ≤ i_N ≤ N and N > 0");
    }
    exterior_tilt(&sol.measure, excluded, 1.0 - i_n as f64 / n as f64)
}

/// Entropic mirror descent for `min ent[m | w]` over cell masses with
/// `Σ m = mass`: `log m ← (1-η) log m + η log w`, renormalized. Returns the
/// masses and the number of steps until the sup change of `log m` is below `tol`.
pub fn entropy_mirror_descent(log_w: &[f64], mass: f64, eta: f64, tol: f64, max_iter: usize) -> (Vec<f64>, usize) {
    let n = log_w.len();
    let mut u = vec![0.0; n];
    let normalize = |u: &mut Vec<f64>| {
        let s = log_sum_exp(u) - mass.ln();
        u.iter_mut().for_each(|x| *x -= s);
    };
    normalize(&mut u);
    let mut it = 0;
    while it < max_iter {
        it += 1;
        let mut next: Vec<f64> = (0..n).map(|i| (1.0 - eta) * u[i] + eta * log_w[i]).collect();
        normalize(&mut next);
        let change = next.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        u = next;
        if change <= tol {
            break;
        }
    }
    (u.iter().map(|x| x.exp()).collect(), it)
}

/// What `𝐓` screens: a grid density on `□_R` or atoms (for `𝐓^{N,≠}`).
#[derive(Clone, Copy, Debug)]
pub enum TCharge<'a> {
    Grid(&'a GridMeasure),
    Atomic(&'a AtomicMeasure),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TReport {
    /// `𝐓^N_λ(μ)` (or `𝐓^{N,≠}_λ` for atoms).
    pub report: RateReport,
    /// `𝒯^N_λ(μ) = 𝐓^N_λ(μ) + ent[μ | μ_V(0) 1_{□_R}]`; absent for atoms.
    pub calligraphic: Option<f64>,
    /// Exterior mass `N^{λd} - |μ|`.
    pub exterior_mass: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Test mode: drop the energy term, leaving the entropy problem of `κ`.
    pub energy: bool,
}

impl Default for TOptions {
    fn default() -> Self {
        TOptions { tol: 1e-9, max_iter: 200, energy: true }
    }
}

/// `𝐓^N_λ(μ) = min_ν ℰ(μ + ν - μ_β^{N^λ}) - ∫ log μ_β^{N^λ} dν + ent[ν]` over
/// exterior `ν ≥ 0` with `|ν| = N^{λd} - |μ|`, and `𝒯^N_λ`.
///
/// The blown-up thermal density is sampled on the domain grid; exterior cells
/// where it vanishes are excluded (`-log 0 = +∞`).
pub fn t_rate(
    charge: TCharge<'_>,
    params: &RegimeParams,
    sol: &EquilibriumSolution,
    mu_v0: f64,
    domain: &ExteriorDomain,
    opts: &TOptions,
) -> Result<TReport> {
    let grid = &domain.grid;
    let d = domain.dim();
    let vol = grid.cell_volume();
    let blown = blowup(sol, params.n, params.lambda)?;
    let b = domain.sample(&blown)?;
    let total = (params.n as f64).powf(params.lambda * d as f64);
    let (rho, mu_mass) = match charge {
        TCharge::Grid(m) => {
            let r = domain.embed(m)?;
            let mass = r.iter().sum::<f64>() * vol;
            (r, mass)
        }
        TCharge::Atomic(a) => {
            if a.points.iter().any(|p| !domain.interior.contains(p)) {
                return Err(Error::OutsideGrid);
            }
            (vec![0.0; grid.num_cells()], a.mass())
        }
    };
    let exterior_mass = total - mu_mass;
    if !(exterior_mass > 0.0) {
        return Err(Error::Infeasible(format!("exterior mass N^(λd) - |μ| = {exterior_mass} is not positive")));
    }
    let op = GridOperator::shared(grid);
    // grid part of the charge: μ (grid case) minus the background
    let c: Vec<f64> = rho.iter().zip(&b).map(|(r, bb)| (r - bb) * vol).collect();
    let kc = op.apply(&c);
    let mut constant = dot(&c, &kc);
    let mut linear_full: Vec<f64> = kc.iter().map(|k| 2.0 * k).collect();
    if let TCharge::Atomic(a) = charge {
        let diag = grid.diagonal();
        let centers = grid.centers();
        // h^{atoms} at cell centres, through the smeared kernel
        let ha: Vec<f64> = centers
            .chunks(d)
            .map(|cc| a.weight * a.points.iter().map(|p| ball_potential(d, dist(cc, p), diag)).sum::<f64>())
            .collect();
        for (l, h) in linear_full.iter_mut().zip(&ha) {
            *l += 2.0 * h;
        }
        constant += 2.0 * dot(&c, &ha) + pair_sum(d, &a.points, None)? * a.weight * a.weight;
    }
    let ext: Vec<usize> = domain.exterior_cells().into_iter().filter(|&i| b[i] > 0.0).collect();
    if ext.is_empty() {
        return Err(Error::Infeasible("background vanishes on the exterior".to_string()));
    }
    let n_full = grid.num_cells();
    let apply_energy = |x: &[f64]| {
        let mut full = vec![0.0; n_full];
        for (k, &i) in ext.iter().enumerate() {
            full[i] = x[k];
        }
        let y = op.apply(&full);
        ext.iter().map(|&i| y[i]).collect::<Vec<f64>>()
    };
    let apply_zero = |x: &[f64]| vec![0.0; x.len()];
    let linear: Vec<f64> = if opts.energy { ext.iter().map(|&i| linear_full[i]).collect() } else { vec![0.0; ext.len()] };
    let log_ref: Vec<f64> = ext.iter().map(|&i| (vol * b[i]).ln()).collect();
    let problem = EntropicProblem {
        apply: if opts.energy { &apply_energy } else { &apply_zero },
        k_diag: if opts.energy { op.self_value() } else { 0.0 },
        linear: &linear,
        log_ref: &log_ref,
        eps: 1.0,
        mass: exterior_mass,
    };
    let (st, residual, iterations) = problem.solve(log_ref.clone(), opts.tol, opts.max_iter)?;
    if residual > 1e3 * opts.tol.max(1e-12) {
        return Err(Error::NotConverged { iterations, residual });
    }
    // F = constant + νᵀKν + lᵀν + ent[ν | vol·b] with ent[ν] - ∫ log b dν = Σ ν log(ν/(vol b))
    let value = if opts.energy { st.f + constant } else { st.f };
    let mut density = vec![0.0; n_full];
    for (k, &i) in ext.iter().enumerate() {
        density[i] = st.m[k] / vol;
    }
    let calligraphic = match charge {
        TCharge::Grid(_) => {
            let restricted = GridMeasure::new(grid.clone(), rho.clone(), false)?;
            let ent = relative_entropy_to_constant(&restricted, mu_v0, &domain.interior)?;
            Some(value + ent)
        }
        TCharge::Atomic(_) => None,
    };
    let mass_error = (st.m.iter().sum::<f64>() - exterior_mass).abs();
    Ok(TReport {
        report: RateReport {
            functional: "T".to_string(),
            value,
            mass_error,
            kkt_residual: residual,
            iterations,
            minimizer: GridMeasure::new(grid.clone(), density, false)?,
        },
        calligraphic,
        exterior_mass,
    })
}

/// `ent[μ | c 1_box]` over cells whose centre lies in `box`.
fn relative_entropy_to_constant(mu: &GridMeasure, c: f64, b: &AxisBox) -> Result<f64> {
    if !(c > 0.0) {
        return invalid("reference density must be positive");
    }
    let vol = mu.grid.cell_volume();
    let mut x = vec![0.0; mu.dim()];
    let mut s = 0.0;
    for (i, &rho) in mu.density.iter().enumerate() {
        if rho > 0.0 {
            mu.grid.cell_center_into(i, &mut x);
            if !b.contains(&x) {
                return Ok(f64::INFINITY);
            }
            s += rho * (rho / c).ln();
        }
    }
    Ok(s * vol)
}

/// `|Φ^{μ_V(0)}_{□_R}(ρ) - Φ^{μ_β^{N^λ}}_{□_R}(ρ)|`.
pub fn phi_background_gap(
    rho: &GridMeasure,
    params: &RegimeParams,
    sol: &EquilibriumSolution,
    mu_v0: f64,
    domain: &ExteriorDomain,
    opts: &RateOptions,
) -> Result<f64> {
    let constant = phi_rate(rho, mu_v0, domain, opts)?.value;
    let blown = blowup(sol, params.n, params.lambda)?;
    let thermal = phi_with_background(rho, &blown, domain, opts)?.value;
    Ok((constant - thermal).abs())
}

/// One element of the stability sequence: `N`, its thermal solution and an
/// atomic approximation `μ_N` of the fixed interior measure.
pub struct StabilityCase<'a> {
    pub params: RegimeParams,
    pub sol: &'a EquilibriumSolution,
    pub atoms: AtomicMeasure,
}

/// `𝐓^N_λ(μ) - 𝐓^{N,≠}_λ(μ_N)` along the sequence.
pub fn t_stability_check(
    mu: &GridMeasure,
    cases: &[StabilityCase<'_>],
    mu_v0: f64,
    domain: &ExteriorDomain,
    opts: &TOptions,
) -> Result<Vec<f64>> {
    cases
        .iter()
        .map(|case| {
            let full = t_rate(TCharge::Grid(mu), &case.params, case.sol, mu_v0, domain, opts)?;
            let atomic = t_rate(TCharge::Atomic(&case.atoms), &case.params, case.sol, mu_v0, domain, opts)?;
            Ok(full.report.value - atomic.report.value)
        })
        .collect()
}

/// `h^μ` of a grid density at the points (smeared kernel), used by callers
/// assembling mixed energies by hand.
pub fn potential_at_points(mu: &GridMeasure, points: &[Vec<f64>]) -> Vec<f64> {
    points.iter().map(|p| potential_at(mu, p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n_rate_closed_forms() {
        let grid = Grid::centered_cube(3, 1.0, 4).unwrap();
        let b = AxisBox::centered(3, 1.0).unwrap();
        let alpha = 0.7;
        let same = GridMeasure::constant(&grid, alpha).unwrap();
        assert!(n_rate(&same, alpha, &b).unwrap().abs() < 1e-14);
        let double = GridMeasure::constant(&grid, 2.0 * alpha).unwrap();
        let expect = alpha * 8.0 * (2.0 * 2f64.ln() - 1.0);
        assert!((n_rate(&double, alpha, &b).unwrap() - expect).abs() < 1e-12);
        let empty = GridMeasure::zeros(&grid);
        assert!((n_rate(&empty, alpha, &b).unwrap() - alpha * 8.0).abs() < 1e-12);
    }

    #[test]
    fn mass_bound_inverts_jensen() {
        let m = n_mass_bound(3.0, 0.5, 8.0).unwrap();
        let t = m / 4.0;
        assert!((t * t.ln() - t + 1.0 - 0.75).abs() < 1e-12);
        assert!((n_mass_bound(0.0, 0.5, 8.0).unwrap() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn domain_layout() {
        let dom = ExteriorDomain::centered(3, 1.0, 4, 4.0).unwrap();
        assert_eq!(dom.grid.n(), 16);
        assert!((dom.truncation.half_width[0] - 4.0).abs() < 1e-12);
        assert_eq!(dom.exterior_cells().len(), 16 * 16 * 16 - 64);
        assert_eq!(dom.interior_grid(), Grid::centered_cube(3, 1.0, 4).unwrap());
    }

    #[test]
    fn neutral_input_needs_no_screening() {
        let dom = ExteriorDomain::centered(3, 1.0, 4, 2.0).unwrap();
        let mu = GridMeasure::constant(&dom.interior_grid(), 0.3).unwrap();
        let r = phi_rate(&mu, 0.3, &dom, &RateOptions::default()).unwrap();
        assert!(r.value.abs() < 1e-9, "{}", r.value);
        let outside = dom.sample(&r.minimizer).unwrap();
        for i in dom.exterior_cells() {
            assert!((outside[i] - 0.3).abs() < 1e-6);
        }
    }

    #[test]
    fn mirror_descent_reaches_tilt() {
        let w: Vec<f64> = (0..10).map(|i| (1.0 + i as f64).ln()).collect();
        let (m, _) = entropy_mirror_descent(&w, 2.0, 0.5, 1e-14, 1000);
        let total: f64 = (1..=10).map(|i| i as f64).sum();
        for (i, x) in m.iter().enumerate() {
            assert!((x - 2.0 * (i + 1) as f64 / total).abs() < 1e-12);
        }
    }
}
