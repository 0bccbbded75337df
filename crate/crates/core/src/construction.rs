//! Well-separated configurations approximating a target density: cube
//! counts, separated placement, and the proximity, energy and volume
//! certificates.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};
use crate::gibbs::{chain_rng, energy_gap};
use crate::kernel::{ball_potential, potential_at, unit_ball_volume};
use crate::linalg::log_sum_exp;
use crate::measures::{bl_distance, dist, min_pairwise_distance, AtomicMeasure, AxisBox, GridMeasure};

/// Tiling of a box by cubes of side `cube_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeTiling {
    pub bbox: AxisBox,
    pub cube_size: f64,
    pub per_axis: Vec<usize>,
}

impl CubeTiling {
    pub fn new(bbox: &AxisBox, cube_size: f64) -> Result<Self> {
        if !(cube_size > 0.0) || !cube_size.is_finite() {
            return invalid("cube size must be positive");
        }
        let per_axis = bbox
            .half_width
            .iter()
            .map(|w| {
                let k = (2.0 * w / cube_size).round();
                if k < 1.0 || (k * cube_size - 2.0 * w).abs() > 1e-9 * w {
                    invalid(format!("cube size {cube_size} does not tile a box of side {}", 2.0 * w))
                } else {
                    Ok(k as usize)
                }
            })
            .collect::<Result<Vec<usize>>>()?;
        Ok(CubeTiling { bbox: bbox.clone(), cube_size, per_axis })
    }

    pub fn dim(&self) -> usize {
        self.per_axis.len()
    }

    pub fn len(&self) -> usize {
        self.per_axis.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lower corner of cube `j` (first axis varies slowest).
    pub fn corner(&self, mut j: usize) -> Vec<f64> {
        let d = self.dim();
        let mut c = vec![0.0; d];
        for a in (0..d).rev() {
            let k = j % self.per_axis[a];
            j /= self.per_axis[a];
            c[a] = self.bbox.center[a] - self.bbox.half_width[a] + k as f64 * self.cube_size;
        }
        c
    }

    pub fn cube(&self, j: usize) -> AxisBox {
        let h = 0.5 * self.cube_size;
        let center = self.corner(j).iter().map(|x| x + h).collect();
        AxisBox { center, half_width: vec![h; self.dim()] }
    }

    /// Index of the cube containing `x`, if any.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        let mut j = 0;
        for a in 0..self.dim() {
            let t = (x[a] - self.bbox.center[a] + self.bbox.half_width[a]) / self.cube_size;
            if !(t >= 0.0) || t >= self.per_axis[a] as f64 {
                return None;
            }
            j = j * self.per_axis[a] + t as usize;
        }
        Some(j)
    }
}

/// Per-cube counts for a target of total mass normalized to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeCounts {
    pub tiling: CubeTiling,
    /// `ν(K_j)/|ν|`.
    pub masses: Vec<f64>,
    pub counts: Vec<usize>,
}

impl CubeCounts {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// `n_j ∈ {⌊Nν(K_j)⌋, ⌈Nν(K_j)⌉}` with `Σ n_j = N`; the ceilings go to the
/// cubes with the largest fractional parts (ties to the lower index).
pub fn assign_counts(nu: &GridMeasure, n: usize, cube_size: f64) -> Result<CubeCounts> {
    let tiling = CubeTiling::new(&nu.grid.bbox, cube_size)?;
    let total = nu.mass();
    if !(total > 0.0) {
        return invalid("target must have positive mass");
    }
    if nu.density.iter().any(|&x| x < 0.0) {
        return invalid("target must be non-negative");
    }
    let mut masses = vec![0.0; tiling.len()];
    let vol = nu.grid.cell_volume();
    let mut c = vec![0.0; nu.dim()];
    for (i, &rho) in nu.density.iter().enumerate() {
        nu.grid.cell_center_into(i, &mut c);
        if let Some(j) = tiling.locate(&c) {
            masses[j] += rho * vol / total;
        }
    }
    let exact: Vec<f64> = masses.iter().map(|m| m * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).filter(|&j| masses[j] > 0.0).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let missing = n.saturating_sub(assigned);
    if missing > order.len() {
        return Err(Error::Infeasible(format!("cannot distribute {n} points over the cubes")));
    }
    for &j in order.iter().take(missing) {
        counts[j] += 1;
    }
    Ok(CubeCounts { tiling, masses, counts })
}

/// Boundary layer `τ_j = λ_sep η̄ n_j^{-1/d}`.
pub fn boundary_layer(cube_size: f64, lambda_sep: f64, n_j: usize, d: usize) -> f64 {
    lambda_sep * cube_size * (n_j as f64).powf(-1.0 / d as f64)
}

/// Points together with the cube and layer each was placed under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub points: Vec<Vec<f64>>,
    pub cube_of: Vec<usize>,
    /// `τ_j` per cube (zero for empty cubes).
    pub tau: Vec<f64>,
}

impl Placement {
    pub fn min_tau(&self) -> f64 {
        self.cube_of.iter().map(|&j| self.tau[j]).fold(f64::INFINITY, f64::min)
    }

    /// Empirical measure with weight `1/N`.
    pub fn empirical(&self) -> Result<AtomicMeasure> {
        AtomicMeasure::empirical(self.points.clone())
    }
}

/// Sequential rejection placement: each point uniform in the cube shrunk by
/// `τ_j`, at distance at least `τ_j` from the points already in the cube.
/// Cube `j` draws from stream `j` of `seed`.
pub fn place_points(counts: &CubeCounts, lambda_sep: f64, seed: u64) -> Result<Placement> {
    if !(lambda_sep > 0.0 && lambda_sep < 1.0) {
        return invalid("λ_sep must lie in (0, 1)");
    }
    let tiling = &counts.tiling;
    let d = tiling.dim();
    let eta = tiling.cube_size;
    let tau: Vec<f64> =
        counts.counts.iter().map(|&n| if n == 0 { 0.0 } else { boundary_layer(eta, lambda_sep, n, d) }).collect();
    for (j, &n) in counts.counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let t = tau[j];
        // disjoint balls of radius τ/2 around the points fit in the cube shrunk by τ/2
        let packing = n as f64 * unit_ball_volume(d) * (0.5 * t).powi(d as i32);
        if eta <= 2.0 * t || packing > (eta - t).powi(d as i32) {
            return Err(Error::Infeasible(format!(
                "{n} points with separation {t:.4} do not fit in cube {j}; reduce λ_sep"
            )));
        }
    }
    let placed: Vec<Result<Vec<Vec<f64>>>> = counts
        .counts
        .par_iter()
        .enumerate()
        .map(|(j, &n)| {
            if n == 0 {
                return Ok(Vec::new());
            }
            let mut rng = chain_rng(seed, j as u64);
            let corner = tiling.corner(j);
            let cube = tiling.cube(j);
            let t = tau[j];
            let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n);
            let budget = 100 * n;
            let mut attempts = 0;
            while pts.len() < n {
                if attempts == budget {
                    return Err(Error::Infeasible(format!(
                        "placement in cube {j} exhausted {budget} attempts; reduce λ_sep"
                    )));
                }
                attempts += 1;
                let y: Vec<f64> = corner.iter().map(|c| c + t + (eta - 2.0 * t) * rng.random::<f64>()).collect();
                if cube.depth(&y) >= t && pts.iter().all(|p| dist(p, &y) >= t) {
                    pts.push(y);
                }
            }
            Ok(pts)
        })
        .collect();
    let mut points = Vec::new();
    let mut cube_of = Vec::new();
    for (j, r) in placed.into_iter().enumerate() {
        for p in r? {
            points.push(p);
            cube_of.push(j);
        }
    }
    Ok(Placement { points, cube_of, tau })
}

/// `B(N, η̄) = c_self/(N η̄^d) + c_lin η̄ + c_quad η̄²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointwiseBound {
    pub c_self: f64,
    pub c_lin: f64,
    pub c_quad: f64,
}

impl PointwiseBound {
    fn features(n: usize, cube_size: f64, d: usize) -> [f64; 3] {
        [1.0 / (n as f64 * cube_size.powi(d as i32)), cube_size, cube_size * cube_size]
    }

    pub fn eval(&self, n: usize, cube_size: f64, d: usize) -> f64 {
        let f = Self::features(n, cube_size, d);
        self.c_self * f[0] + self.c_lin * f[1] + self.c_quad * f[2]
    }

    /// `η² = 2B`, since `|ℰ^≠(emp_N - ν)|` is at most the potential bound
    /// times the total variation `2`.
    pub fn eta_squared(&self, n: usize, cube_size: f64, d: usize) -> f64 {
        2.0 * self.eval(n, cube_size, d)
    }
}

/// Non-negative least squares fit of the bound to `(N, η̄, measured)` rows,
/// then scaled up so it dominates every calibration row.
pub fn fit_pointwise_bound(rows: &[(usize, f64, f64)], d: usize) -> Result<PointwiseBound> {
    if rows.len() < 3 {
        return invalid("need at least three calibration rows");
    }
    let feats: Vec<[f64; 3]> = rows.iter().map(|&(n, e, _)| PointwiseBound::features(n, e, d)).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let mut best: Option<([f64; 3], f64)> = None;
    // all active sets of the three coefficients
    for mask in 1u8..8 {
        let idx: Vec<usize> = (0..3).filter(|k| mask & (1 << k) != 0).collect();
        let m = idx.len();
        let mut ata = vec![0.0; m * m];
        let mut aty = vec![0.0; m];
        for (f, &yy) in feats.iter().zip(&y) {
            for a in 0..m {
                aty[a] += f[idx[a]] * yy;
                for b in 0..m {
                    ata[a * m + b] += f[idx[a]] * f[idx[b]];
                }
            }
        }
        let Some(sol) = solve_small(&mut ata, &mut aty, m) else { continue };
        if sol.iter().any(|&c| c < 0.0) {
            continue;
        }
        let mut coef = [0.0; 3];
        for (a, &k) in idx.iter().enumerate() {
            coef[k] = sol[a];
        }
        let res: f64 = feats.iter().zip(&y).map(|(f, yy)| (f[0] * coef[0] + f[1] * coef[1] + f[2] * coef[2] - yy).powi(2)).sum();
        if best.as_ref().is_none_or(|b| res < b.1) {
            best = Some((coef, res));
        }
    }
    let (coef, _) = best.ok_or_else(|| Error::Infeasible("no non-negative fit".to_string()))?;
    let bound = PointwiseBound { c_self: coef[0], c_lin: coef[1], c_quad: coef[2] };
    let lift = rows
        .iter()
        .map(|&(n, e, m)| m / bound.eval(n, e, d))
        .fold(1.0, |a: f64, b| if b.is_finite() { a.max(b) } else { a });
    Ok(PointwiseBound { c_self: coef[0] * lift, c_lin: coef[1] * lift, c_quad: coef[2] * lift })
}

/// Gaussian elimination with partial pivoting on an `m × m` system.
fn solve_small(a: &mut [f64], b: &mut [f64], m: usize) -> Option<Vec<f64>> {
    for col in 0..m {
        let piv = (col..m).max_by(|&i, &j| a[i * m + col].abs().total_cmp(&a[j * m + col].abs()))?;
        if a[piv * m + col].abs() < 1e-300 {
            return None;
        }
        for k in 0..m {
            a.swap(col * m + k, piv * m + k);
        }
        b.swap(col, piv);
        for r in col + 1..m {
            let f = a[r * m + col] / a[col * m + col];
            for k in col..m {
                a[r * m + k] -= f * a[col * m + k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; m];
    for r in (0..m).rev() {
        let s: f64 = (r + 1..m).map(|k| a[r * m + k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r * m + r];
    }
    Some(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructionReport {
    pub configuration: AtomicMeasure,
    pub min_separation: f64,
    pub min_tau: f64,
    pub bl_to_target: f64,
    /// `|ℰ^≠(emp_N - ν)|`.
    pub energy_gap: f64,
    /// `max_nodes |h^{emp_N - ν}|`, atoms smeared on balls of radius `τ_min/2`.
    pub max_node_potential: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pointwise_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_squared: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_volume_estimate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation_level: Option<f64>,
    /// Separation and boundary-layer constraints hold exactly.
    pub constraints_ok: bool,
}

impl ConstructionReport {
    /// Energy gap within the certificate, when a bound was supplied.
    pub fn certified(&self) -> Option<bool> {
        self.eta_squared.map(|e| self.energy_gap <= e)
    }
}

/// `max_c |h^{emp}(x_c) - h^ν(x_c)|` over the cell centres of `ν`, with the
/// atoms of `emp` smeared uniformly on balls of radius `radius`.
pub fn max_node_potential(emp: &AtomicMeasure, nu: &GridMeasure, radius: f64) -> f64 {
    let grid = &nu.grid;
    let d = grid.dim();
    (0..grid.num_cells())
        .into_par_iter()
        .map(|i| {
            let x = grid.cell_center(i);
            let he: f64 = emp.points.iter().map(|p| ball_potential(d, dist(&x, p), radius)).sum::<f64>() * emp.weight;
            (he - potential_at(nu, &x)).abs()
        })
        .reduce(|| 0.0, f64::max)
}

/// Checks separation and boundary layers exactly.
pub fn constraints_hold(placement: &Placement, tiling: &CubeTiling) -> bool {
    let inside = placement.points.iter().zip(&placement.cube_of).all(|(p, &j)| {
        let cube = tiling.cube(j);
        cube.depth(p) >= placement.tau[j]
    });
    inside && min_pairwise_distance(&placement.points) >= placement.min_tau()
}

/// Proximity, energy and potential certificates of a placement.
pub fn certify(
    placement: &Placement,
    counts: &CubeCounts,
    nu: &GridMeasure,
    bound: Option<&PointwiseBound>,
) -> Result<ConstructionReport> {
    let emp = placement.empirical()?;
    let target = nu.scale(1.0 / nu.mass());
    let n = emp.len();
    let d = nu.dim();
    let min_tau = placement.min_tau();
    let pb = bound.map(|b| b.eval(n, counts.tiling.cube_size, d));
    Ok(ConstructionReport {
        min_separation: emp.min_separation(),
        min_tau,
        bl_to_target: bl_distance(&emp, &target)?,
        energy_gap: energy_gap(&emp, &target)?.abs(),
        max_node_potential: max_node_potential(&emp, &target, 0.5 * min_tau),
        pointwise_bound: pb,
        eta_squared: pb.map(|b| 2.0 * b),
        log_volume_estimate: None,
        truncation_level: None,
        constraints_ok: constraints_hold(placement, &counts.tiling),
        configuration: emp,
    })
}

/// Caps the density at its `q`-quantile over cells and renormalizes to the
/// original mass; returns the capped measure and the cap.
pub fn truncate_density(nu: &GridMeasure, q: f64) -> Result<(GridMeasure, f64)> {
    if !(q > 0.0 && q <= 1.0) {
        return invalid("quantile must lie in (0, 1]");
    }
    let mut sorted = nu.density.clone();
    sorted.sort_by(f64::total_cmp);
    let k = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    let level = sorted[k];
    let capped: Vec<f64> = nu.density.iter().map(|&x| x.min(level)).collect();
    let m = GridMeasure::new(nu.grid.clone(), capped, false)?;
    let mass = m.mass();
    if !(mass > 0.0) {
        return invalid("truncated target has no mass");
    }
    Ok((m.scale(nu.mass() / mass), level))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructionParams {
    pub n: usize,
    pub cube_size: f64,
    pub lambda_sep: f64,
    /// Cap the target at this density quantile first.
    #[serde(default)]
    pub truncation_quantile: Option<f64>,
}

/// Counts, placement and certificates in one call.
pub fn construct(
    nu: &GridMeasure,
    params: &ConstructionParams,
    bound: Option<&PointwiseBound>,
    seed: u64,
) -> Result<ConstructionReport> {
    let (target, level) = match params.truncation_quantile {
        Some(q) => {
            let (t, l) = truncate_density(nu, q)?;
            (t, Some(l))
        }
        None => (nu.clone(), None),
    };
    let counts = assign_counts(&target, params.n, params.cube_size)?;
    let placement = place_points(&counts, params.lambda_sep, seed)?;
    let mut report = certify(&placement, &counts, &target, bound)?;
    report.truncation_level = level;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeEstimate {
    /// `log(N!/Π n_j!) + Σ n_j log μ_ref(K_j)`.
    pub log_multinomial: f64,
    /// Estimated log probability that the points of every cube fall in its
    /// shrunk cube with the required separation.
    pub log_separation: f64,
    /// `(log_multinomial + log_separation)/N`.
    pub log_volume_per_n: f64,
    /// `-ent[ν | μ_ref]`, both normalized.
    pub target: f64,
}

/// `-ent[ν|μ_ref]` with `μ_ref` sampled at the cell centres of `ν`; both
/// normalized to probability measures.
pub fn neg_relative_entropy(nu: &GridMeasure, mu_ref: &GridMeasure) -> Result<f64> {
    let (mn, mr) = (nu.mass(), mu_ref.mass());
    if !(mn > 0.0 && mr > 0.0) {
        return invalid("measures must have positive mass");
    }
    let vol = nu.grid.cell_volume();
    let mut c = vec![0.0; nu.dim()];
    let mut s = 0.0;
    for (i, &rho) in nu.density.iter().enumerate() {
        if rho > 0.0 {
            nu.grid.cell_center_into(i, &mut c);
            let r = mu_ref.value_at(&c) / mr;
            if r <= 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            s += rho / mn * ((rho / mn) / r).ln();
        }
    }
    Ok(-s * vol)
}

/// Log probability under `μ_ref^{⊗N}` of the set of configurations the
/// construction can output, per particle.
///
/// Inside a cube `μ_ref` is treated as uniform. The separation factor uses
/// sequential placement with the exact identity `vol(S_n) = E[Π_i free_i]`;
/// each free fraction is estimated by `probes` uniform probes, and the
/// per-cube logs of the trial means are summed.
pub fn volume_estimate(
    nu: &GridMeasure,
    mu_ref: &GridMeasure,
    n: usize,
    cube_size: f64,
    lambda_sep: f64,
    trials: usize,
    seed: u64,
) -> Result<VolumeEstimate> {
    if trials == 0 {
        return invalid("at least one trial");
    }
    let counts = assign_counts(nu, n, cube_size)?;
    let tiling = &counts.tiling;
    let d = tiling.dim();
    let eta = cube_size;
    let ref_mass = mu_ref.mass();
    let mut log_multinomial = ln_gamma(n as f64 + 1.0);
    for (j, &nj) in counts.counts.iter().enumerate() {
        if nj == 0 {
            continue;
        }
        let p = mu_ref.mass_in(&tiling.cube(j)) / ref_mass;
        if !(p > 0.0) {
            return Ok(VolumeEstimate {
                log_multinomial: f64::NEG_INFINITY,
                log_separation: 0.0,
                log_volume_per_n: f64::NEG_INFINITY,
                target: neg_relative_entropy(nu, mu_ref)?,
            });
        }
        log_multinomial += nj as f64 * p.ln() - ln_gamma(nj as f64 + 1.0);
    }
    const PROBES: usize = 512;
    let per_cube: Vec<f64> = counts
        .counts
        .par_iter()
        .enumerate()
        .map(|(j, &nj)| {
            if nj == 0 {
                return 0.0;
            }
            let t = boundary_layer(eta, lambda_sep, nj, d);
            let corner = tiling.corner(j);
            let mut rng = chain_rng(seed, j as u64);
            let logs: Vec<f64> = (0..trials)
                .map(|_| {
                    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(nj);
                    let mut log_prod = 0.0;
                    for _ in 0..nj {
                        let mut hits = Vec::new();
                        for _ in 0..PROBES {
                            let y: Vec<f64> = corner.iter().map(|c| c + eta * rng.random::<f64>()).collect();
                            let ok = y.iter().zip(&corner).all(|(v, c)| v - c >= t && c + eta - v >= t)
                                && pts.iter().all(|p| dist(p, &y) >= t);
                            if ok {
                                hits.push(y);
                            }
                        }
                        if hits.is_empty() {
                            return f64::NEG_INFINITY;
                        }
                        log_prod += (hits.len() as f64 / PROBES as f64).ln();
                        // a uniform hit is a uniform point of the free region
                        let k = rng.random_range(0..hits.len());
                        pts.push(hits.swap_remove(k));
                    }
                    log_prod
                })
                .collect();
            log_sum_exp(&logs) - (trials as f64).ln()
        })
        .collect();
    let log_separation: f64 = per_cube.iter().sum();
    Ok(VolumeEstimate {
        log_multinomial,
        log_separation,
        log_volume_per_n: (log_multinomial + log_separation) / n as f64,
        target: neg_relative_entropy(nu, mu_ref)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::Grid;

    fn uniform(n: usize) -> GridMeasure {
        GridMeasure::constant(&Grid::centered_cube(3, 1.0, n).unwrap(), 0.125).unwrap()
    }

    #[test]
    fn tiling_rejects_mismatched_size() {
        let b = AxisBox::centered(3, 1.0).unwrap();
        assert!(CubeTiling::new(&b, 0.3).is_err());
        let t = CubeTiling::new(&b, 0.5).unwrap();
        assert_eq!(t.len(), 64);
        assert_eq!(t.locate(&t.cube(37).center), Some(37));
    }

    #[test]
    fn uniform_split_is_exact() {
        let c = assign_counts(&uniform(8), 128, 0.5).unwrap();
        assert!(c.counts.iter().all(|&n| n == 2));
    }

    #[test]
    fn single_point_lies_in_shrunk_cube() {
        let c = assign_counts(&uniform(4), 8, 1.0).unwrap();
        let p = place_points(&c, 0.3, 1).unwrap();
        assert_eq!(p.points.len(), 8);
        assert!(constraints_hold(&p, &c.tiling));
        assert_eq!(p, place_points(&c, 0.3, 1).unwrap());
    }

    #[test]
    fn dense_counts_with_large_separation_fail() {
        let c = assign_counts(&uniform(4), 800, 1.0).unwrap();
        assert!(matches!(place_points(&c, 0.9, 1), Err(Error::Infeasible(_))));
    }

    #[test]
    fn bound_fit_dominates_rows() {
        let rows = vec![(64, 1.0, 0.5), (512, 0.5, 0.2), (4096, 0.25, 0.08), (1000, 0.5, 0.15)];
        let b = fit_pointwise_bound(&rows, 3).unwrap();
        for &(n, e, m) in &rows {
            assert!(b.eval(n, e, 3) >= m * (1.0 - 1e-12));
        }
    }

    #[test]
    fn truncation_caps_and_keeps_mass() {
        let g = Grid::centered_cube(3, 1.0, 4).unwrap();
        let nu = GridMeasure::from_fn(&g, false, |x| 1.0 + 10.0 * (x[0] > 0.7) as u8 as f64).unwrap();
        let (t, level) = truncate_density(&nu, 0.5).unwrap();
        assert_eq!(level, 1.0);
        assert!((t.mass() - nu.mass()).abs() < 1e-12);
        assert!(t.max_density() <= t.min_density() * (1.0 + 1e-12));
    }
}
