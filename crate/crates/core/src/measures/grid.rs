use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{invalid, Error, Result};

/// Open axis-aligned box `(center - half_width, center + half_width)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub center: Vec<f64>,
    #[serde(deserialize_with = "scalar_or_vec")]
    pub half_width: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScalarOrVec {
    Scalar(f64),
    Vec(Vec<f64>),
}

fn scalar_or_vec<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<Vec<f64>, D::Error> {
    // a bare number means the same half width on every axis; the length is fixed up in validate()
    Ok(match ScalarOrVec::deserialize(de)? {
        ScalarOrVec::Scalar(v) => vec![v],
        ScalarOrVec::Vec(v) => v,
    })
}

impl AxisBox {
    pub fn new(center: Vec<f64>, half_width: Vec<f64>) -> Result<Self> {
        let mut b = AxisBox { center, half_width };
        b.validate()?;
        Ok(b)
    }

    /// The cube `(-r, r)^d + center`.
    pub fn cube(center: &[f64], r: f64) -> Result<Self> {
        Self::new(center.to_vec(), vec![r; center.len()])
    }

    /// The cube `(-r, r)^d` centred at the origin.
    pub fn centered(d: usize, r: f64) -> Result<Self> {
        Self::new(vec![0.0; d], vec![r; d])
    }

    pub(crate) fn validate(&mut self) -> Result<()> {
        let d = self.center.len();
        if d == 0 {
            return invalid("box must have at least one axis");
        }
        if self.half_width.len() == 1 && d > 1 {
            self.half_width = vec![self.half_width[0]; d];
        }
        if self.half_width.len() != d {
            return Err(Error::Dimension { expected: d, got: self.half_width.len() });
        }
        if self.half_width.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
            return invalid("half_width must be positive and finite on every axis");
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return invalid("box center must be finite");
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn volume(&self) -> f64 {
        self.half_width.iter().map(|h| 2.0 * h).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(&self.center)
                .zip(&self.half_width)
                .all(|((xi, c), h)| (xi - c).abs() < *h)
    }

    /// Distance from an interior point to the boundary (0 outside).
    pub fn depth(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.center)
            .zip(&self.half_width)
            .map(|((xi, c), h)| h - (xi - c).abs())
            .fold(f64::INFINITY, f64::min)
            .max(0.0)
    }

    pub fn scaled(&self, x: f64) -> AxisBox {
        AxisBox {
            center: self.center.iter().map(|c| c * x).collect(),
            half_width: self.half_width.iter().map(|h| h * x).collect(),
        }
    }

    /// Shrink every half width by `t` (may fail if the box would vanish).
    pub fn shrunk(&self, t: f64) -> Result<AxisBox> {
        AxisBox::new(self.center.clone(), self.half_width.iter().map(|h| h - t).collect())
    }

    pub fn contains_box(&self, other: &AxisBox) -> bool {
        (0..self.dim()).all(|a| {
            other.center[a] - other.half_width[a] >= self.center[a] - self.half_width[a] - 1e-12
                && other.center[a] + other.half_width[a] <= self.center[a] + self.half_width[a] + 1e-12
        })
    }
}

/// Regular grid layout: `cells_per_axis` cells on every axis of `bbox`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    #[serde(rename = "box")]
    pub bbox: AxisBox,
    pub cells_per_axis: usize,
}

impl Grid {
    pub fn new(bbox: AxisBox, cells_per_axis: usize) -> Result<Self> {
        let mut g = Grid { bbox, cells_per_axis };
        g.validate()?;
        Ok(g)
    }

    pub fn centered_cube(d: usize, r: f64, n: usize) -> Result<Self> {
        Self::new(AxisBox::centered(d, r)?, n)
    }

    pub(crate) fn validate(&mut self) -> Result<()> {
        self.bbox.validate()?;
        if self.cells_per_axis == 0 {
            return invalid("cells_per_axis must be positive");
        }
        let total = (self.cells_per_axis as f64).powi(self.dim() as i32);
        if total > 1e9 {
            return invalid("grid has too many cells");
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.bbox.dim()
    }

    pub fn n(&self) -> usize {
        self.cells_per_axis
    }

    pub fn num_cells(&self) -> usize {
        self.cells_per_axis.pow(self.dim() as u32)
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        2.0 * self.bbox.half_width[axis] / self.cells_per_axis as f64
    }

    pub fn spacings(&self) -> Vec<f64> {
        (0..self.dim()).map(|a| self.spacing(a)).collect()
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    /// Length of a cell diagonal.
    pub fn diagonal(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a).powi(2)).sum::<f64>().sqrt()
    }

    /// Row-major multi-index, axis 0 slowest.
    pub fn unravel(&self, mut idx: usize, out: &mut [usize]) {
        let n = self.cells_per_axis;
        for a in (0..self.dim()).rev() {
            out[a] = idx % n;
            idx /= n;
        }
    }

    pub fn ravel(&self, multi: &[usize]) -> usize {
        multi.iter().fold(0, |acc, &i| acc * self.cells_per_axis + i)
    }

    pub fn cell_center_into(&self, idx: usize, out: &mut [f64]) {
        let n = self.cells_per_axis;
        let mut rest = idx;
        for a in (0..self.dim()).rev() {
            let i = rest % n;
            rest /= n;
            let h = self.spacing(a);
            out[a] = self.bbox.center[a] - self.bbox.half_width[a] + (i as f64 + 0.5) * h;
        }
    }

    pub fn cell_center(&self, idx: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.dim()];
        self.cell_center_into(idx, &mut c);
        c
    }

    /// All cell centres, flattened (`num_cells * d`).
    pub fn centers(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; self.num_cells() * d];
        for (i, c) in out.chunks_mut(d).enumerate() {
            self.cell_center_into(i, c);
        }
        out
    }

    /// Cell containing `x` (half-open cells, the upper box face excluded).
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.dim() {
            return None;
        }
        let n = self.cells_per_axis;
        let mut idx = 0;
        for (a, &xa) in x.iter().enumerate() {
            let lo = self.bbox.center[a] - self.bbox.half_width[a];
            let t = (xa - lo) / self.spacing(a);
            if !(t >= 0.0) || t >= n as f64 {
                return None;
            }
            idx = idx * n + (t.floor() as usize).min(n - 1);
        }
        Some(idx)
    }

    pub fn dilated(&self, x: f64) -> Grid {
        Grid { bbox: self.bbox.scaled(x), cells_per_axis: self.cells_per_axis }
    }

    /// Same box, every cell split into `k^d` sub-cells.
    pub fn refined(&self, k: usize) -> Grid {
        Grid { bbox: self.bbox.clone(), cells_per_axis: self.cells_per_axis * k }
    }

    pub fn same_layout(&self, other: &Grid) -> bool {
        self == other
    }

    pub(crate) fn check_same(&self, other: &Grid) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch)
        }
    }
}

/// Density on a regular grid, piecewise constant on cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMeasure {
    #[serde(flatten)]
    pub grid: Grid,
    pub density: Vec<f64>,
    pub signed: bool,
}

impl GridMeasure {
    pub fn new(grid: Grid, density: Vec<f64>, signed: bool) -> Result<Self> {
        let mut m = GridMeasure { grid, density, signed };
        m.validate()?;
        Ok(m)
    }

    /// Checks the invariants; also used after deserialization.
    pub fn validate(&mut self) -> Result<()> {
        self.grid.validate()?;
        if self.density.len() != self.grid.num_cells() {
            return Err(Error::Dimension { expected: self.grid.num_cells(), got: self.density.len() });
        }
        for (cell, &value) in self.density.iter().enumerate() {
            if !value.is_finite() {
                return invalid(format!("non-finite density in cell {cell}"));
            }
            if !self.signed && value < 0.0 {
                return Err(Error::NegativeDensity { cell, value });
            }
        }
        Ok(())
    }

    pub fn zeros(grid: &Grid) -> Self {
        GridMeasure { grid: grid.clone(), density: vec![0.0; grid.num_cells()], signed: false }
    }

    pub fn constant(grid: &Grid, value: f64) -> Result<Self> {
        Self::new(grid.clone(), vec![value; grid.num_cells()], value < 0.0)
    }

    /// Samples `f` at the cell centres.
    pub fn from_fn(grid: &Grid, signed: bool, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut c = vec![0.0; grid.dim()];
        let density = (0..grid.num_cells())
            .map(|i| {
                grid.cell_center_into(i, &mut c);
                f(&c)
            })
            .collect();
        Self::new(grid.clone(), density, signed)
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// Cell masses `density * cell_volume`.
    pub fn cell_masses(&self) -> Vec<f64> {
        let v = self.grid.cell_volume();
        self.density.iter().map(|x| x * v).collect()
    }

    fn check_nonnegative(&self) -> Result<()> {
        match self.density.iter().position(|&x| x < 0.0) {
            Some(cell) => Err(Error::NegativeDensity { cell, value: self.density[cell] }),
            None => Ok(()),
        }
    }

    /// `∫ m log m dx` with `0 log 0 = 0`.
    pub fn entropy(&self) -> Result<f64> {
        self.check_nonnegative()?;
        let s: f64 = self.density.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum();
        Ok(s * self.grid.cell_volume())
    }

    /// `∫ log(dm/dref) dm`; `+inf` when `m > 0` where `ref = 0`.
    pub fn relative_entropy(&self, reference: &GridMeasure) -> Result<f64> {
        self.grid.check_same(&reference.grid)?;
        self.check_nonnegative()?;
        reference.check_nonnegative()?;
        let mut s = 0.0;
        for (&m, &r) in self.density.iter().zip(&reference.density) {
            if m > 0.0 {
                if r <= 0.0 {
                    return Ok(f64::INFINITY);
                }
                s += m * (m / r).ln();
            }
        }
        Ok(s * self.grid.cell_volume())
    }

    /// `μ^x(U) = x^d μ(U/x)`: the box is scaled, density values are kept.
    pub fn dilate(&self, x: f64) -> Result<Self> {
        if !(x > 0.0) || !x.is_finite() {
            return invalid("dilation factor must be positive");
        }
        Ok(GridMeasure { grid: self.grid.dilated(x), density: self.density.clone(), signed: self.signed })
    }

    /// Zeroes every cell whose centre lies outside `b`; the layout is kept.
    pub fn restrict(&self, b: &AxisBox) -> Self {
        let mut c = vec![0.0; self.dim()];
        let density = self
            .density
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                self.grid.cell_center_into(i, &mut c);
                if b.contains(&c) {
                    v
                } else {
                    0.0
                }
            })
            .collect();
        GridMeasure { grid: self.grid.clone(), density, signed: self.signed }
    }

    pub fn scale(&self, a: f64) -> Self {
        GridMeasure {
            grid: self.grid.clone(),
            density: self.density.iter().map(|x| x * a).collect(),
            signed: self.signed || a < 0.0,
        }
    }

    /// `self + a * other` on a common layout.
    pub fn add_scaled(&self, a: f64, other: &GridMeasure) -> Result<Self> {
        self.grid.check_same(&other.grid)?;
        let density: Vec<f64> = self.density.iter().zip(&other.density).map(|(x, y)| x + a * y).collect();
        let signed = self.signed || other.signed || density.iter().any(|&x| x < 0.0);
        Ok(GridMeasure { grid: self.grid.clone(), density, signed })
    }

    pub fn sub(&self, other: &GridMeasure) -> Result<Self> {
        let mut m = self.add_scaled(-1.0, other)?;
        m.signed = true;
        Ok(m)
    }

    /// Same function on a grid refined by `k` per axis.
    pub fn subdivide(&self, k: usize) -> Self {
        let fine = self.grid.refined(k);
        let d = self.dim();
        let mut multi = vec![0usize; d];
        let density = (0..fine.num_cells())
            .map(|i| {
                fine.unravel(i, &mut multi);
                for m in multi.iter_mut() {
                    *m /= k;
                }
                self.density[self.grid.ravel(&multi)]
            })
            .collect();
        GridMeasure { grid: fine, density, signed: self.signed }
    }

    /// Density value at `x` (piecewise constant), zero outside the box.
    pub fn value_at(&self, x: &[f64]) -> f64 {
        self.grid.locate(x).map_or(0.0, |i| self.density[i])
    }

    pub fn max_density(&self) -> f64 {
        self.density.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_density(&self) -> f64 {
        self.density.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Mass of the cells whose centre lies in `b`.
    pub fn mass_in(&self, b: &AxisBox) -> f64 {
        self.restrict(b).mass()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid(n: usize) -> Grid {
        Grid::centered_cube(3, 1.0, n).unwrap()
    }

    #[test]
    fn lebesgue_mass_on_unit_cube() {
        let m = GridMeasure::constant(&unit_grid(4), 1.0).unwrap();
        assert!((m.mass() - 8.0).abs() < 1e-12);
        assert!(m.entropy().unwrap().abs() < 1e-15);
    }

    #[test]
    fn two_nu_relative_entropy() {
        let g = unit_grid(3);
        let nu = GridMeasure::constant(&g, 1.0 / 8.0).unwrap();
        let two = nu.scale(2.0);
        let r = two.relative_entropy(&nu).unwrap();
        assert!((r - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(nu.relative_entropy(&nu).unwrap(), 0.0);
    }

    #[test]
    fn relative_entropy_infinite_off_support() {
        let g = unit_grid(2);
        let mut r = GridMeasure::constant(&g, 1.0).unwrap();
        r.density[3] = 0.0;
        let m = GridMeasure::constant(&g, 1.0).unwrap();
        assert_eq!(m.relative_entropy(&r).unwrap(), f64::INFINITY);
    }

    #[test]
    fn restriction_to_inner_cube() {
        let g = Grid::centered_cube(3, 2.0, 8).unwrap();
        let m = GridMeasure::constant(&g, 1.0).unwrap();
        let r = m.restrict(&AxisBox::centered(3, 1.0).unwrap());
        assert!((r.mass() - 8.0).abs() < 1e-12);
        assert_eq!(r.restrict(&AxisBox::centered(3, 1.0).unwrap()), r);
    }

    #[test]
    fn dilation_scales_mass() {
        let m = GridMeasure::from_fn(&unit_grid(5), false, |x| 1.0 + x[0] * x[0]).unwrap();
        assert_eq!(m.dilate(1.0).unwrap(), m);
        let m2 = m.dilate(2.0).unwrap();
        assert!((m2.mass() - 8.0 * m.mass()).abs() < 1e-10);
    }

    #[test]
    fn locate_matches_centers() {
        let g = Grid::new(AxisBox::new(vec![0.3, -1.0, 2.0], vec![1.0, 0.5, 2.0]).unwrap(), 5).unwrap();
        for i in 0..g.num_cells() {
            assert_eq!(g.locate(&g.cell_center(i)), Some(i));
        }
        assert_eq!(g.locate(&[5.0, 0.0, 0.0]), None);
    }

    #[test]
    fn subdivide_preserves_mass_and_values() {
        let m = GridMeasure::from_fn(&unit_grid(3), false, |x| (x[0] + 2.0) * (x[2] + 1.5)).unwrap();
        let f = m.subdivide(2);
        assert!((f.mass() - m.mass()).abs() < 1e-12);
        let p = [0.1, -0.4, 0.7];
        assert_eq!(f.value_at(&p), m.value_at(&p));
    }

    #[test]
    fn json_layout() {
        let m = GridMeasure::constant(&Grid::centered_cube(3, 1.0, 1).unwrap(), 0.5).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"box\":{\"center\""));
        assert!(s.contains("\"cells_per_axis\":1"));
        let back: GridMeasure = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        let scalar: GridMeasure = serde_json::from_str(
            r#"{"box":{"center":[0,0,0],"half_width":1},"cells_per_axis":1,"density":[0.5],"signed":false}"#,
        )
        .unwrap();
        let mut scalar = scalar;
        scalar.validate().unwrap();
        assert_eq!(scalar, m);
    }

    #[test]
    fn unsigned_rejects_negative() {
        let r = GridMeasure::new(unit_grid(1), vec![-1.0], false);
        assert!(matches!(r, Err(Error::NegativeDensity { .. })));
    }
}
