use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fft::{dot, GridOperator};
use super::{ball_potential, g, pair_sum, sphere_pair_interaction};
use crate::error::{invalid, Error, Result};
use crate::measures::{dist, AtomicMeasure, AxisBox, Grid, GridMeasure, MeasureRef};

/// Coulomb energy `∬ g dm dm` of a grid measure.
pub fn energy(m: &GridMeasure) -> f64 {
    GridOperator::shared(&m.grid).energy(&m.density)
}

/// Energy of either kind; raw atoms have infinite self energy.
pub fn energy_of<'a>(m: impl Into<MeasureRef<'a>>) -> f64 {
    match m.into() {
        MeasureRef::Grid(g) => energy(g),
        MeasureRef::Atomic(a) if a.is_empty() => 0.0,
        MeasureRef::Atomic(_) => f64::INFINITY,
    }
}

/// Potential at an arbitrary point of a grid measure whose cells act as balls
/// of radius one cell diagonal (exact `g` beyond that distance).
pub fn potential_at(m: &GridMeasure, x: &[f64]) -> f64 {
    let d = m.dim();
    let a = m.grid.diagonal();
    let vol = m.grid.cell_volume();
    let mut c = vec![0.0; d];
    let mut s = 0.0;
    for (i, &rho) in m.density.iter().enumerate() {
        if rho != 0.0 {
            m.grid.cell_center_into(i, &mut c);
            s += rho * ball_potential(d, dist(x, &c), a);
        }
    }
    s * vol
}

/// `h^m` at the centres of `target`. Grid measures on the same layout use the
/// cell matrix; anything else uses the smeared point kernel.
pub fn potential_field<'a>(m: impl Into<MeasureRef<'a>>, target: &Grid) -> Result<Vec<f64>> {
    let d = target.dim();
    let centers = target.centers();
    match m.into() {
        MeasureRef::Grid(gm) => {
            if gm.dim() != d {
                return Err(Error::Dimension { expected: d, got: gm.dim() });
            }
            if gm.grid.same_layout(target) {
                Ok(GridOperator::shared(target).potential(&gm.density))
            } else {
                Ok(centers.par_chunks(d).map(|c| potential_at(gm, c)).collect())
            }
        }
        MeasureRef::Atomic(am) => {
            let a = target.diagonal();
            Ok(centers
                .par_chunks(d)
                .map(|c| am.weight * am.points.iter().map(|p| ball_potential(d, dist(c, p), a)).sum::<f64>())
                .collect())
        }
    }
}

/// Signed combination of a grid density and weighted atoms.
#[derive(Clone, Debug, Default)]
pub struct MixedMeasure {
    pub grid: Option<GridMeasure>,
    pub points: Vec<Vec<f64>>,
    pub charges: Vec<f64>,
}

impl MixedMeasure {
    pub fn from_grid(m: &GridMeasure) -> Self {
        MixedMeasure { grid: Some(m.clone()), points: Vec::new(), charges: Vec::new() }
    }

    pub fn from_atomic(m: &AtomicMeasure, sign: f64) -> Self {
        MixedMeasure { grid: None, points: m.points.clone(), charges: vec![sign * m.weight; m.len()] }
    }

    /// `atoms - grid`, the usual fluctuation measure.
    pub fn atoms_minus_grid(atoms: &AtomicMeasure, grid: &GridMeasure) -> Self {
        MixedMeasure { grid: Some(grid.scale(-1.0)), points: atoms.points.clone(), charges: vec![atoms.weight; atoms.len()] }
    }

    pub fn plus(&self, other: &MixedMeasure) -> Result<Self> {
        let grid = match (&self.grid, &other.grid) {
            (Some(a), Some(b)) => Some(a.add_scaled(1.0, b)?),
            (Some(a), None) => Some(a.clone()),
            (None, b) => b.clone(),
        };
        let mut points = self.points.clone();
        points.extend(other.points.iter().cloned());
        let mut charges = self.charges.clone();
        charges.extend_from_slice(&other.charges);
        Ok(MixedMeasure { grid, points, charges })
    }

    pub fn dim(&self) -> Option<usize> {
        self.grid.as_ref().map(|g| g.dim()).or_else(|| self.points.first().map(|p| p.len()))
    }

    pub fn mass(&self) -> f64 {
        self.grid.as_ref().map_or(0.0, |g| g.mass()) + self.charges.iter().sum::<f64>()
    }

    fn cross_with_grid(&self, grid: &GridMeasure) -> f64 {
        let terms: Vec<f64> =
            self.points.par_iter().zip(self.charges.par_iter()).map(|(p, q)| q * potential_at(grid, p)).collect();
        terms.iter().sum()
    }

    /// `ℰ^≠`: every atom self pair removed.
    pub fn energy_offdiag(&self) -> Result<f64> {
        let d = match self.dim() {
            Some(d) => d,
            None => return Ok(0.0),
        };
        let mut e = 0.0;
        if let Some(gm) = &self.grid {
            e += energy(gm) + 2.0 * self.cross_with_grid(gm);
        }
        e += pair_sum(d, &self.points, Some(&self.charges))?;
        Ok(e)
    }

    /// `ℰ^≠_□`: only self pairs of atoms inside `b` are removed, so any atom
    /// outside contributes an infinite diagonal term.
    pub fn energy_offdiag_box(&self, b: &AxisBox) -> Result<f64> {
        if self.points.iter().zip(&self.charges).any(|(p, &q)| q != 0.0 && !b.contains(p)) {
            return Ok(f64::INFINITY);
        }
        self.energy_offdiag()
    }
}

/// Bilinear `G(a, b) = ∬_{Δ^c} g da db`.
pub fn interaction(a: &MixedMeasure, b: &MixedMeasure) -> Result<f64> {
    let d = match (a.dim(), b.dim()) {
        (Some(x), Some(y)) if x != y => return Err(Error::Dimension { expected: x, got: y }),
        (Some(x), _) | (None, Some(x)) => x,
        (None, None) => return Ok(0.0),
    };
    let mut total = 0.0;
    match (&a.grid, &b.grid) {
        (Some(ga), Some(gb)) if ga.grid.same_layout(&gb.grid) => {
            let h = GridOperator::shared(&gb.grid).potential(&gb.density);
            total += ga.grid.cell_volume() * dot(&ga.density, &h);
        }
        (Some(ga), Some(gb)) => {
            let h = potential_field(gb, &ga.grid)?;
            total += ga.grid.cell_volume() * dot(&ga.density, &h);
        }
        _ => {}
    }
    if let Some(gb) = &b.grid {
        total += a.cross_with_grid(gb);
    }
    if let Some(ga) = &a.grid {
        total += b.cross_with_grid(ga);
    }
    let rows: Vec<f64> = a
        .points
        .par_iter()
        .zip(a.charges.par_iter())
        .map(|(p, qa)| {
            let mut s = 0.0;
            for (y, qb) in b.points.iter().zip(&b.charges) {
                let r = dist(p, y);
                if r > 0.0 {
                    s += qb * g(d, r);
                }
            }
            qa * s
        })
        .collect();
    total += rows.iter().sum::<f64>();
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmearVariant {
    Ball,
    Sphere,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmearKind {
    pub variant: SmearVariant,
    pub radius: f64,
}

impl SmearKind {
    pub fn ball(radius: f64) -> Self {
        SmearKind { variant: SmearVariant::Ball, radius }
    }

    pub fn sphere(radius: f64) -> Self {
        SmearKind { variant: SmearVariant::Sphere, radius }
    }
}

/// Replaces every atom by uniform mass on a ball or sphere and deposits it on
/// `grid`. Each atom's deposit is normalized, so mass is preserved exactly.
pub fn smear(m: &AtomicMeasure, kind: SmearKind, grid: &Grid) -> Result<GridMeasure> {
    if !(kind.radius > 0.0) {
        return invalid("smearing radius must be positive");
    }
    let d = grid.dim();
    if let Some(md) = m.dim() {
        if md != d {
            return Err(Error::Dimension { expected: d, got: md });
        }
    }
    let r = kind.radius;
    let shrink = grid.bbox.shrunk(r).ok();
    for p in &m.points {
        if !shrink.as_ref().is_some_and(|b| b.contains(p)) {
            return Err(Error::OutsideGrid);
        }
    }
    let vol = grid.cell_volume();
    let deposits: Vec<Vec<(usize, f64)>> = match kind.variant {
        SmearVariant::Ball => m.points.par_iter().map(|p| ball_deposit(grid, p, r)).collect(),
        SmearVariant::Sphere => {
            let dirs = sphere_directions(d, sphere_sample_count(grid, r));
            m.points
                .par_iter()
                .map(|p| {
                    let mut acc: Vec<(usize, f64)> = Vec::new();
                    let mut x = vec![0.0; d];
                    for u in dirs.chunks(d) {
                        for a in 0..d {
                            x[a] = p[a] + r * u[a];
                        }
                        if let Some(c) = grid.locate(&x) {
                            acc.push((c, 1.0));
                        }
                    }
                    acc
                })
                .collect()
        }
    };
    let mut density = vec![0.0; grid.num_cells()];
    for dep in deposits {
        let total: f64 = dep.iter().map(|x| x.1).sum();
        if total <= 0.0 {
            return Err(Error::OutsideGrid);
        }
        for (c, w) in dep {
            density[c] += m.weight * w / total / vol;
        }
    }
    GridMeasure::new(grid.clone(), density, false)
}

fn ball_deposit(grid: &Grid, p: &[f64], r: f64) -> Vec<(usize, f64)> {
    let d = grid.dim();
    let h = grid.spacings();
    let hmax = h.iter().cloned().fold(0.0, f64::max);
    let q = ((3.0 * hmax / r).ceil() as usize).clamp(4, 16);
    let n = grid.n();
    let lo: Vec<usize> = (0..d)
        .map(|a| {
            let t = (p[a] - r - (grid.bbox.center[a] - grid.bbox.half_width[a])) / h[a];
            t.floor().max(0.0) as usize
        })
        .collect();
    let hi: Vec<usize> = (0..d)
        .map(|a| {
            let t = (p[a] + r - (grid.bbox.center[a] - grid.bbox.half_width[a])) / h[a];
            (t.floor().max(0.0) as usize).min(n - 1)
        })
        .collect();
    let mut out = Vec::new();
    let mut multi = lo.clone();
    let mut sub = vec![0usize; d];
    let mut x = vec![0.0; d];
    let r2 = r * r;
    loop {
        let mut count = 0usize;
        sub.iter_mut().for_each(|s| *s = 0);
        loop {
            let mut d2 = 0.0;
            for a in 0..d {
                x[a] = grid.bbox.center[a] - grid.bbox.half_width[a] + (multi[a] as f64 + (sub[a] as f64 + 0.5) / q as f64) * h[a];
                d2 += (x[a] - p[a]).powi(2);
            }
            if d2 < r2 {
                count += 1;
            }
            if !odometer(&mut sub, &vec![0; d], &vec![q - 1; d]) {
                break;
            }
        }
        if count > 0 {
            out.push((grid.ravel(&multi), count as f64));
        }
        if !odometer(&mut multi, &lo, &hi) {
            break;
        }
    }
    if out.is_empty() {
        if let Some(c) = grid.locate(p) {
            out.push((c, 1.0));
        }
    }
    out
}

/// Advances a multi-index within `[lo, hi]`; false once exhausted.
pub(crate) fn odometer(idx: &mut [usize], lo: &[usize], hi: &[usize]) -> bool {
    for a in (0..idx.len()).rev() {
        if idx[a] < hi[a] {
            idx[a] += 1;
            return true;
        }
        idx[a] = lo[a];
    }
    false
}

fn sphere_sample_count(grid: &Grid, r: f64) -> usize {
    let d = grid.dim() as i32;
    let h = grid.spacings().iter().cloned().fold(f64::INFINITY, f64::min);
    ((200.0 * (r / h).powi(d - 1)) as usize).clamp(4000, 400_000)
}

/// Quasi-uniform unit vectors: a Fibonacci lattice in `d = 3`, seeded
/// normalized Gaussians otherwise.
fn sphere_directions(d: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(k * d);
    if d == 3 {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        for i in 0..k {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / k as f64;
            let s = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            out.extend_from_slice(&[s * t.cos(), s * t.sin(), z]);
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..k {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            out.extend(v.iter().map(|x| x / n));
        }
    }
    out
}

/// Both sides of the sphere-smeared lower bound
/// `w² Σ_{i≠j} g(x_i - x_j) ≥ G(φ_ε, φ_ε) - w g(ε) G(λ_1, λ_1)`,
/// where `φ_ε` replaces each atom of weight `w` by a sphere of radius `ε`.
pub fn smeared_energy_bound(x: &AtomicMeasure, eps: f64) -> Result<(f64, f64)> {
    if !(eps > 0.0) {
        return invalid("smearing radius must be positive");
    }
    let d = match x.dim() {
        Some(d) => d,
        None => return Ok((0.0, 0.0)),
    };
    let w = x.weight;
    let n = x.len();
    let lhs = w * w * pair_sum(d, &x.points, None)?;
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n).map(|j| sphere_pair_interaction(d, dist(&x.points[i], &x.points[j]), eps, eps)).sum::<f64>()
        })
        .collect();
    let off: f64 = 2.0 * rows.iter().sum::<f64>();
    let self_term = sphere_pair_interaction(d, 0.0, eps, eps);
    let g_phi = w * w * (off + n as f64 * self_term);
    let rhs = g_phi - w * g(d, eps) * sphere_pair_interaction(d, 0.0, 1.0, 1.0);
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::bl_distance;

    #[test]
    fn zero_energy_and_atomic_divergence() {
        let grid = Grid::centered_cube(3, 1.0, 4).unwrap();
        assert_eq!(energy(&GridMeasure::zeros(&grid)), 0.0);
        let a = AtomicMeasure::new(vec![vec![0.0; 3]], 1.0).unwrap();
        assert_eq!(energy_of(&a), f64::INFINITY);
    }

    #[test]
    fn two_atoms_offdiag() {
        let a = AtomicMeasure::new(vec![vec![0.0; 3], vec![1.0, 0.0, 0.0]], 1.0).unwrap();
        let m = MixedMeasure::from_atomic(&a, 1.0);
        assert_eq!(m.energy_offdiag().unwrap(), 2.0);
        let b = AxisBox::centered(3, 2.0).unwrap();
        assert_eq!(m.energy_offdiag_box(&b).unwrap(), 2.0);
        let small = AxisBox::centered(3, 0.5).unwrap();
        assert_eq!(m.energy_offdiag_box(&small).unwrap(), f64::INFINITY);
        let one = AtomicMeasure::new(vec![vec![0.0; 3]], 1.0).unwrap();
        assert_eq!(MixedMeasure::from_atomic(&one, 1.0).energy_offdiag().unwrap(), 0.0);
    }

    #[test]
    fn interaction_of_two_atoms() {
        let a = AtomicMeasure::new(vec![vec![0.0; 3]], 1.0).unwrap();
        let b = AtomicMeasure::new(vec![vec![2.0, 0.0, 0.0]], 1.0).unwrap();
        let (ma, mb) = (MixedMeasure::from_atomic(&a, 1.0), MixedMeasure::from_atomic(&b, 1.0));
        assert_eq!(interaction(&ma, &mb).unwrap(), 0.5);
        assert_eq!(interaction(&mb, &ma).unwrap(), 0.5);
    }

    #[test]
    fn interaction_diagonal_is_offdiag_energy() {
        let grid = Grid::centered_cube(3, 1.0, 6).unwrap();
        let rho = GridMeasure::from_fn(&grid, false, |x| 1.0 + x[0]).unwrap();
        let atoms = AtomicMeasure::new(vec![vec![0.1, 0.2, 0.3], vec![-0.4, 0.5, 0.0]], 0.3).unwrap();
        let m = MixedMeasure::atoms_minus_grid(&atoms, &rho);
        let e = m.energy_offdiag().unwrap();
        let gmm = interaction(&m, &m).unwrap();
        assert!((e - gmm).abs() < 1e-10 * e.abs());
    }

    #[test]
    fn smear_preserves_mass_and_bl_bound() {
        let grid = Grid::centered_cube(3, 1.0, 16).unwrap();
        let a = AtomicMeasure::new(vec![vec![0.1, -0.2, 0.05], vec![-0.3, 0.3, 0.2]], 0.5).unwrap();
        for kind in [SmearKind::ball(0.3), SmearKind::sphere(0.3)] {
            let s = smear(&a, kind, &grid).unwrap();
            assert!((s.mass() - 1.0).abs() < 1e-12);
        }
        let s = smear(&a, SmearKind::ball(0.3), &grid).unwrap();
        assert!(bl_distance(&a, &s).unwrap() <= 0.3);
        assert!(smear(&a, SmearKind::ball(0.9), &grid).is_err());
    }

    #[test]
    fn smeared_bound_single_atom() {
        let a = AtomicMeasure::new(vec![vec![0.0; 3]], 1.0).unwrap();
        let (l, r) = smeared_energy_bound(&a, 0.5).unwrap();
        assert_eq!(l, 0.0);
        assert!((r - (1.0 * 2.0 - 2.0)).abs() < 1e-12);
    }
}
