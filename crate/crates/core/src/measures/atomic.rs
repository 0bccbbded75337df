use serde::{Deserialize, Serialize};

use super::grid::AxisBox;
use crate::error::{invalid, Error, Result};

/// Finite point set with a common positive weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomicMeasure {
    pub points: Vec<Vec<f64>>,
    pub weight: f64,
}

impl AtomicMeasure {
    pub fn new(points: Vec<Vec<f64>>, weight: f64) -> Result<Self> {
        let m = AtomicMeasure { points, weight };
        m.validate()?;
        Ok(m)
    }

    /// Empirical measure `(1/N) Σ δ_{x_i}`.
    pub fn empirical(points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len().max(1) as f64;
        Self::new(points, 1.0 / n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight > 0.0) || !self.weight.is_finite() {
            return invalid("atom weight must be positive");
        }
        if let Some(first) = self.points.first() {
            let d = first.len();
            for p in &self.points {
                if p.len() != d {
                    return Err(Error::Dimension { expected: d, got: p.len() });
                }
                if p.iter().any(|x| !x.is_finite()) {
                    return invalid("atom coordinates must be finite");
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.points.first().map(|p| p.len())
    }

    pub fn mass(&self) -> f64 {
        self.weight * self.points.len() as f64
    }

    /// Points `p -> x p`, weight multiplied by `x^d`.
    pub fn dilate(&self, x: f64) -> Result<Self> {
        if !(x > 0.0) || !x.is_finite() {
            return invalid("dilation factor must be positive");
        }
        let d = self.dim().unwrap_or(0) as i32;
        Ok(AtomicMeasure {
            points: self.points.iter().map(|p| p.iter().map(|c| c * x).collect()).collect(),
            weight: self.weight * x.powi(d),
        })
    }

    pub fn restrict(&self, b: &AxisBox) -> Self {
        AtomicMeasure {
            points: self.points.iter().filter(|p| b.contains(p)).cloned().collect(),
            weight: self.weight,
        }
    }

    /// Smallest pairwise distance (`inf` with fewer than two atoms).
    pub fn min_separation(&self) -> f64 {
        min_pairwise_distance(&self.points)
    }
}

pub fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.min(dist(&points[i], &points[j]));
        }
    }
    best
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mass_and_dilation() {
        let m = AtomicMeasure::new(vec![vec![0.1, 0.2, 0.3]; 10], 0.1).unwrap();
        assert!((m.mass() - 1.0).abs() < 1e-15);
        let m2 = m.dilate(2.0).unwrap();
        assert!((m2.mass() - 8.0).abs() < 1e-12);
        assert_eq!(m2.points[0], vec![0.2, 0.4, 0.6]);
    }

    #[test]
    fn restriction_drops_outside_atoms() {
        let m = AtomicMeasure::new(vec![vec![3.0, 0.0, 0.0]], 1.0).unwrap();
        let r = m.restrict(&AxisBox::centered(3, 1.0).unwrap());
        assert!(r.is_empty());
        assert_eq!(r.mass(), 0.0);
    }

    #[test]
    fn rejects_bad_weight() {
        assert!(AtomicMeasure::new(vec![], 0.0).is_err());
    }
}
