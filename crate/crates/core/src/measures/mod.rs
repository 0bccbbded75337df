//! Grid densities, atomic measures and the bounded-Lipschitz metric.

mod atomic;
mod grid;
pub mod transport;

pub use atomic::{min_pairwise_distance, AtomicMeasure};
pub(crate) use atomic::dist;
pub use grid::{AxisBox, Grid, GridMeasure};

use crate::error::{Error, Result};

/// Borrowed view over either kind of measure.
#[derive(Clone, Copy, Debug)]
pub enum MeasureRef<'a> {
    Grid(&'a GridMeasure),
    Atomic(&'a AtomicMeasure),
}

impl<'a> From<&'a GridMeasure> for MeasureRef<'a> {
    fn from(m: &'a GridMeasure) -> Self {
        MeasureRef::Grid(m)
    }
}

impl<'a> From<&'a AtomicMeasure> for MeasureRef<'a> {
    fn from(m: &'a AtomicMeasure) -> Self {
        MeasureRef::Atomic(m)
    }
}

impl MeasureRef<'_> {
    pub fn mass(&self) -> f64 {
        match self {
            MeasureRef::Grid(m) => m.mass(),
            MeasureRef::Atomic(m) => m.mass(),
        }
    }

    fn dim(&self) -> Option<usize> {
        match self {
            MeasureRef::Grid(m) => Some(m.dim()),
            MeasureRef::Atomic(m) => m.dim(),
        }
    }

    /// Appends support sites (cell centres or atoms) with signed masses.
    fn push_sites(&self, sign: f64, coords: &mut Vec<f64>, weights: &mut Vec<f64>) {
        match self {
            MeasureRef::Grid(m) => {
                let vol = m.grid.cell_volume();
                let d = m.dim();
                let mut c = vec![0.0; d];
                for (i, &rho) in m.density.iter().enumerate() {
                    if rho != 0.0 {
                        m.grid.cell_center_into(i, &mut c);
                        coords.extend_from_slice(&c);
                        weights.push(sign * rho * vol);
                    }
                }
            }
            MeasureRef::Atomic(m) => {
                for p in &m.points {
                    coords.extend_from_slice(p);
                    weights.push(sign * m.weight);
                }
            }
        }
    }
}

pub fn mass<'a>(m: impl Into<MeasureRef<'a>>) -> f64 {
    m.into().mass()
}

/// Exact bounded-Lipschitz distance over the union of support sites.
pub fn bl_distance<'a, 'b>(a: impl Into<MeasureRef<'a>>, b: impl Into<MeasureRef<'b>>) -> Result<f64> {
    let (a, b) = (a.into(), b.into());
    let d = match (a.dim(), b.dim()) {
        (Some(x), Some(y)) if x != y => return Err(Error::Dimension { expected: x, got: y }),
        (Some(x), _) | (None, Some(x)) => x,
        (None, None) => return Ok(0.0),
    };
    let mut coords = Vec::new();
    let mut weights = Vec::new();
    a.push_sites(1.0, &mut coords, &mut weights);
    b.push_sites(-1.0, &mut coords, &mut weights);
    Ok(transport::bl_norm(d, &coords, &weights).value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bl_of_dirac_pairs() {
        let a = AtomicMeasure::new(vec![vec![0.0; 3]], 1.0).unwrap();
        let b = AtomicMeasure::new(vec![vec![1.0, 0.0, 0.0]], 1.0).unwrap();
        let c = AtomicMeasure::new(vec![vec![5.0, 0.0, 0.0]], 1.0).unwrap();
        assert!((bl_distance(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!((bl_distance(&a, &c).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(bl_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn bl_grid_vs_own_atoms() {
        let g = Grid::centered_cube(2, 1.0, 4).unwrap();
        let m = GridMeasure::constant(&g, 1.0 / 4.0).unwrap();
        let atoms = AtomicMeasure::new((0..g.num_cells()).map(|i| g.cell_center(i)).collect(), 1.0 / 16.0).unwrap();
        assert!(bl_distance(&m, &atoms).unwrap() < 1e-12);
    }
}
