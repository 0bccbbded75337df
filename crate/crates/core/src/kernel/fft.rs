use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{ball_self_energy, equivalent_radius, g};
use crate::measures::Grid;

/// Discrete convolution with the cell-to-cell Coulomb matrix of a grid.
///
/// `K[c, c'] = g(center_c - center_c')` off the diagonal and the self energy of
/// the equivalent-volume ball on it. Applied through zero-padded FFTs.
pub struct GridOperator {
    grid: Grid,
    n: usize,
    p: usize,
    d: usize,
    kernel_hat: Vec<Complex64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    self_value: f64,
}

type CacheKey = (usize, usize, Vec<u64>);

fn cache() -> &'static Mutex<HashMap<CacheKey, Arc<GridOperator>>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<GridOperator>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

impl GridOperator {
    /// Shared operator for the layout; the kernel transform depends only on the
    /// spacings, so translated grids reuse the same entry.
    pub fn shared(grid: &Grid) -> Arc<GridOperator> {
        let key = (grid.dim(), grid.n(), grid.spacings().iter().map(|h| h.to_bits()).collect());
        if let Some(op) = cache().lock().unwrap().get(&key) {
            if op.grid.same_layout(grid) {
                return op.clone();
            }
            return Arc::new(op.translated(grid));
        }
        let op = Arc::new(GridOperator::new(grid));
        let mut c = cache().lock().unwrap();
        if c.len() > 32 {
            c.clear();
        }
        c.insert(key, op.clone());
        op
    }

    fn translated(&self, grid: &Grid) -> GridOperator {
        GridOperator {
            grid: grid.clone(),
            n: self.n,
            p: self.p,
            d: self.d,
            kernel_hat: self.kernel_hat.clone(),
            fwd: self.fwd.clone(),
            inv: self.inv.clone(),
            self_value: self.self_value,
        }
    }

    pub fn new(grid: &Grid) -> GridOperator {
        let d = grid.dim();
        let n = grid.n();
        let p = 2 * n;
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(p);
        let inv = planner.plan_fft_inverse(p);
        let h = grid.spacings();
        let self_value = ball_self_energy(d, equivalent_radius(d, grid.cell_volume()));
        let total = p.pow(d as u32);
        let mut table: Vec<Complex64> = (0..total)
            .into_par_iter()
            .map(|idx| {
                let mut rest = idx;
                let mut r2 = 0.0;
                let mut unused = false;
                for a in (0..d).rev() {
                    let o = rest % p;
                    rest /= p;
                    let off = if o < n {
                        o as f64
                    } else if o > n {
                        o as f64 - p as f64
                    } else {
                        unused = true;
                        0.0
                    };
                    r2 += (off * h[a]).powi(2);
                }
                let v = if unused {
                    0.0
                } else if r2 == 0.0 {
                    self_value
                } else {
                    g(d, r2.sqrt())
                };
                Complex64::new(v, 0.0)
            })
            .collect();
        let mut op = GridOperator { grid: grid.clone(), n, p, d, kernel_hat: Vec::new(), fwd, inv, self_value };
        op.transform(&mut table, false);
        op.kernel_hat = table;
        op
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Diagonal entry of the cell matrix.
    pub fn self_value(&self) -> f64 {
        self.self_value
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        let p = self.p;
        let plan = if inverse { &self.inv } else { &self.fwd };
        let total = buf.len();
        let lines_per_task = (4096 / p).max(1);
        for axis in 0..self.d {
            let stride = p.pow((self.d - 1 - axis) as u32);
            if stride == 1 {
                buf.par_chunks_mut(p * lines_per_task).for_each(|c| plan.process(c));
                continue;
            }
            let block = p * stride;
            let src: &[Complex64] = buf;
            let mut tmp = vec![Complex64::new(0.0, 0.0); total];
            tmp.par_chunks_mut(p).enumerate().for_each(|(line, out)| {
                let (b, j) = (line / stride, line % stride);
                let base = b * block + j;
                for (k, o) in out.iter_mut().enumerate() {
                    *o = src[base + k * stride];
                }
            });
            tmp.par_chunks_mut(p * lines_per_task).for_each(|c| plan.process(c));
            buf.par_chunks_mut(stride).enumerate().for_each(|(q, out)| {
                let (b, k) = (q / p, q % p);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = tmp[(b * stride + j) * p + k];
                }
            });
        }
        if inverse {
            let s = 1.0 / total as f64;
            buf.par_iter_mut().for_each(|z| *z *= s);
        }
    }

    fn pad(&self, x: &[f64]) -> Vec<Complex64> {
        let (n, p, d) = (self.n, self.p, self.d);
        let mut buf = vec![Complex64::new(0.0, 0.0); p.pow(d as u32)];
        for (i, &v) in x.iter().enumerate() {
            buf[self.padded_index(i, n, p)] = Complex64::new(v, 0.0);
        }
        buf
    }

    #[inline]
    fn padded_index(&self, mut i: usize, n: usize, p: usize) -> usize {
        let mut out = 0;
        let mut mul = 1;
        for _ in 0..self.d {
            out += (i % n) * mul;
            i /= n;
            mul *= p;
        }
        out
    }

    /// `y_c = Σ_{c'} K[c, c'] x_{c'}` (no volume factors).
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.grid.num_cells());
        let mut buf = self.pad(x);
        self.transform(&mut buf, false);
        buf.par_iter_mut().zip(self.kernel_hat.par_iter()).for_each(|(a, k)| *a *= k);
        self.transform(&mut buf, true);
        let (n, p) = (self.n, self.p);
        (0..x.len()).map(|i| buf[self.padded_index(i, n, p)].re).collect()
    }

    /// Potential `h_c = vol Σ K[c, c'] ρ_{c'}` of a density on this grid.
    pub fn potential(&self, density: &[f64]) -> Vec<f64> {
        let vol = self.grid.cell_volume();
        let mut h = self.apply(density);
        h.iter_mut().for_each(|v| *v *= vol);
        h
    }

    /// `vol² Σ ρ K ρ`.
    pub fn energy(&self, density: &[f64]) -> f64 {
        let h = self.potential(density);
        self.grid.cell_volume() * dot(density, &h)
    }
}

/// Sum of products in index order.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{AxisBox, Grid};

    fn direct(grid: &Grid, x: &[f64], self_value: f64) -> Vec<f64> {
        let d = grid.dim();
        let c = grid.centers();
        (0..x.len())
            .map(|i| {
                (0..x.len())
                    .map(|j| {
                        let r = crate::measures::dist(&c[i * d..(i + 1) * d], &c[j * d..(j + 1) * d]);
                        x[j] * if i == j { self_value } else { g(d, r) }
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn fft_matches_direct_sum() {
        for (d, n) in [(3usize, 5usize), (4, 3), (3, 1)] {
            let grid = Grid::new(AxisBox::new(vec![0.2; d], (0..d).map(|a| 1.0 + 0.3 * a as f64).collect()).unwrap(), n)
                .unwrap();
            let x: Vec<f64> = (0..grid.num_cells()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
            let op = GridOperator::new(&grid);
            let y = op.apply(&x);
            let z = direct(&grid, &x, op.self_value());
            for (a, b) in y.iter().zip(&z) {
                assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn shared_operator_follows_translation() {
        let g1 = Grid::centered_cube(3, 1.0, 4).unwrap();
        let g2 = Grid::new(AxisBox::cube(&[3.0, 0.0, 0.0], 1.0).unwrap(), 4).unwrap();
        let a = GridOperator::shared(&g1);
        let b = GridOperator::shared(&g2);
        assert_eq!(b.grid(), &g2);
        assert_eq!(a.apply(&vec![1.0; 64]), b.apply(&vec![1.0; 64]));
    }
}

/// Approximate inverse of the cell matrix restricted to a set of cells:
/// `vol/((d-2)|S^{d-1}|)` times the finite-difference `-Δ` with zero values
/// outside the set. Used as a CG preconditioner.
pub struct LaplacePreconditioner {
    offsets: Vec<usize>,
    neighbours: Vec<u32>,
    center: f64,
    axis_weight: Vec<f64>,
    axes: Vec<u8>,
}

impl LaplacePreconditioner {
    pub fn new(grid: &Grid, cells: &[usize]) -> Self {
        let d = grid.dim();
        let n = grid.n();
        let h = grid.spacings();
        let scale = grid.cell_volume() / super::sphere_area(d) / (d as f64 - 2.0);
        let axis_weight: Vec<f64> = h.iter().map(|s| scale / (s * s)).collect();
        let center = 2.0 * axis_weight.iter().sum::<f64>();
        let mut position = vec![u32::MAX; grid.num_cells()];
        for (k, &c) in cells.iter().enumerate() {
            position[c] = k as u32;
        }
        let mut offsets = vec![0];
        let mut neighbours = Vec::new();
        let mut axes = Vec::new();
        let mut multi = vec![0usize; d];
        for &c in cells {
            grid.unravel(c, &mut multi);
            for a in 0..d {
                for step in [-1i64, 1] {
                    let t = multi[a] as i64 + step;
                    if t < 0 || t >= n as i64 {
                        continue;
                    }
                    let saved = multi[a];
                    multi[a] = t as usize;
                    let k = position[grid.ravel(&multi)];
                    multi[a] = saved;
                    if k != u32::MAX {
                        neighbours.push(k);
                        axes.push(a as u8);
                    }
                }
            }
            offsets.push(neighbours.len());
        }
        LaplacePreconditioner { offsets, neighbours, center, axis_weight, axes }
    }

    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        (0..r.len())
            .into_par_iter()
            .map(|i| {
                let mut v = self.center * r[i];
                for e in self.offsets[i]..self.offsets[i + 1] {
                    v -= self.axis_weight[self.axes[e] as usize] * r[self.neighbours[e] as usize];
                }
                v
            })
            .collect()
    }
}
