//! The Coulomb kernel `g(x) = |x|^{2-d}`, smeared potentials and energies.
//!
//! Convention: `Δg = c_d δ_0` with `c_d = -(d-2)|S^{d-1}|`. No computed
//! quantity depends on `c_d`; it is exposed for documentation only.

mod energy;
mod fft;
mod quad;

pub use energy::{
    energy, energy_of, interaction, potential_at, potential_field, smear, smeared_energy_bound, MixedMeasure,
    SmearKind,
};
pub use fft::{GridOperator, LaplacePreconditioner};
pub use quad::adaptive_gauss;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpaceParams {
    pub d: usize,
}

impl SpaceParams {
    pub fn new(d: usize) -> Result<Self> {
        if d < 3 {
            return invalid(format!("dimension must be at least 3, got {d}"));
        }
        Ok(SpaceParams { d })
    }

    /// `c_d` in `Δ|x|^{2-d} = c_d δ_0`, i.e. `-(d-2)` times the area of the unit sphere.
    pub fn c_d(&self) -> f64 {
        -((self.d - 2) as f64) * sphere_area(self.d)
    }

    pub fn g(&self, r: f64) -> f64 {
        g(self.d, r)
    }
}

/// Volume of the unit ball in `R^d`.
pub fn unit_ball_volume(d: usize) -> f64 {
    match d {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * std::f64::consts::PI / d as f64 * unit_ball_volume(d - 2),
    }
}

/// Area of the unit sphere `S^{d-1}`.
pub fn sphere_area(d: usize) -> f64 {
    d as f64 * unit_ball_volume(d)
}

/// Radial kernel `r^{2-d}`.
#[inline]
pub fn g(d: usize, r: f64) -> f64 {
    match d {
        3 => 1.0 / r,
        4 => 1.0 / (r * r),
        _ => r.powi(2 - d as i32),
    }
}

pub fn g_eval(d: usize, x: &[f64]) -> Result<f64> {
    if x.len() != d {
        return Err(Error::Dimension { expected: d, got: x.len() });
    }
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if r == 0.0 {
        return Err(Error::Singular);
    }
    Ok(g(d, r))
}

/// Potential at distance `s` of the uniform probability on the ball of radius `a`.
#[inline]
pub fn ball_potential(d: usize, s: f64, a: f64) -> f64 {
    if s >= a {
        g(d, s)
    } else {
        let t = s / a;
        g(d, a) * (d as f64 - (d as f64 - 2.0) * t * t) / 2.0
    }
}

/// Potential at distance `s` of the uniform probability on the sphere of radius `a`.
#[inline]
pub fn sphere_potential(d: usize, s: f64, a: f64) -> f64 {
    g(d, s.max(a))
}

/// Self energy of the uniform probability on a ball of radius `a`.
pub fn ball_self_energy(d: usize, a: f64) -> f64 {
    2.0 * d as f64 / (d as f64 + 2.0) * g(d, a)
}

/// Radius of the ball with volume `v`.
pub fn equivalent_radius(d: usize, v: f64) -> f64 {
    (v / unit_ball_volume(d)).powf(1.0 / d as f64)
}

/// `G(λ_a(x), λ_b(y))` for two uniform sphere measures whose centres are `s` apart.
///
/// The potential of the first sphere is averaged over the second one by a
/// one-dimensional angular quadrature split at the kink `|y - x| = a`.
pub fn sphere_pair_interaction(d: usize, s: f64, a: f64, b: f64) -> f64 {
    // concentric spheres or a point: the distance is constant
    if b == 0.0 || s == 0.0 {
        return sphere_potential(d, s + b, a);
    }
    let m = (d - 2) as i32;
    let weight = |th: f64| th.sin().powi(m);
    let f = |th: f64| {
        let r2 = s * s + b * b - 2.0 * s * b * th.cos();
        sphere_potential(d, r2.max(0.0).sqrt(), a) * weight(th)
    };
    let pi = std::f64::consts::PI;
    let norm = adaptive_gauss(&weight, 0.0, pi, 1e-15);
    let c = (s * s + b * b - a * a) / (2.0 * s * b);
    let num = if c > -1.0 && c < 1.0 {
        let th = c.acos();
        adaptive_gauss(&f, 0.0, th, 1e-15) + adaptive_gauss(&f, th, pi, 1e-15)
    } else {
        adaptive_gauss(&f, 0.0, pi, 1e-15)
    };
    num / norm
}

/// `G` of two unit-charge spheres of radius `a` in `d = 3`, closed form.
pub fn sphere_pair_interaction_d3(s: f64, a: f64) -> f64 {
    if s >= 2.0 * a {
        1.0 / s
    } else if s == 0.0 {
        1.0 / a
    } else {
        ((a * a - (s - a) * (s - a)) / (2.0 * a) + s) / (2.0 * a * s)
    }
}

/// `Σ_{i≠j} q_i q_j g(x_i - x_j)` over ordered pairs; rows are reduced in a fixed order.
pub fn pair_sum(d: usize, points: &[Vec<f64>], charges: Option<&[f64]>) -> Result<f64> {
    let n = points.len();
    let rows: Vec<Result<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            for j in i + 1..n {
                let r = super::measures::dist(&points[i], &points[j]);
                if r == 0.0 {
                    return Err(Error::CoincidentAtoms(i, j));
                }
                let q = charges.map_or(1.0, |c| c[j]);
                s += q * g(d, r);
            }
            Ok(charges.map_or(1.0, |c| c[i]) * s)
        })
        .collect();
    let mut total = 0.0;
    for r in rows {
        total += r?;
    }
    Ok(2.0 * total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kernel_values() {
        assert_eq!(g_eval(3, &[1.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(g_eval(3, &[0.0, 2.0, 0.0]).unwrap(), 0.5);
        assert!((g_eval(5, &[0.0, 0.0, 0.0, 2.0, 0.0]).unwrap() - 0.125).abs() < 1e-15);
        assert!(matches!(g_eval(3, &[0.0; 3]), Err(Error::Singular)));
        assert!(SpaceParams::new(2).is_err());
    }

    #[test]
    fn ball_volumes() {
        assert!((unit_ball_volume(3) - 4.0 / 3.0 * std::f64::consts::PI).abs() < 1e-14);
        assert!((sphere_area(3) - 4.0 * std::f64::consts::PI).abs() < 1e-14);
        assert!((SpaceParams::new(3).unwrap().c_d() + 4.0 * std::f64::consts::PI).abs() < 1e-14);
    }

    #[test]
    fn ball_potential_is_continuous_at_radius() {
        for d in 3..7 {
            let a = 0.7;
            assert!((ball_potential(d, a * (1.0 - 1e-12), a) - g(d, a)).abs() < 1e-9);
        }
        assert!((ball_self_energy(3, 2.0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn sphere_pair_matches_closed_form_in_d3() {
        for &(s, a) in &[(0.3, 0.5), (0.99, 0.5), (1.0, 0.5), (1.7, 0.5), (0.05, 1.0), (2.5, 1.0)] {
            let q = sphere_pair_interaction(3, s, a, a);
            let c = sphere_pair_interaction_d3(s, a);
            assert!((q - c).abs() < 1e-12 * c, "s={s} a={a}: {q} vs {c}");
        }
    }

    #[test]
    fn unit_sphere_self_interaction() {
        for d in 3..7 {
            assert!((sphere_pair_interaction(d, 0.0, 1.0, 1.0) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_atoms_ordered_pairs() {
        let pts = vec![vec![0.0; 3], vec![1.0, 0.0, 0.0]];
        assert_eq!(pair_sum(3, &pts, None).unwrap(), 2.0);
        let dup = vec![vec![0.0; 3], vec![0.0; 3]];
        assert!(pair_sum(3, &dup, None).is_err());
    }

    proptest! {
        #[test]
        fn sphere_averages_are_superharmonic(s in 0.01f64..3.0, a in 0.05f64..1.5, b in 0.05f64..1.5, d in 3usize..6) {
            let v = sphere_pair_interaction(d, s, a, b);
            let one = sphere_pair_interaction(d, s, a, 0.0);
            prop_assert!(v <= g(d, s) * (1.0 + 1e-12));
            prop_assert!(one <= g(d, s) * (1.0 + 1e-12));
            if s > a + b {
                prop_assert!((v - g(d, s)).abs() <= 1e-11 * g(d, s));
            }
        }

        #[test]
        fn sphere_pair_scales_like_kernel(s in 0.01f64..3.0, a in 0.05f64..1.5, r in 0.1f64..5.0, d in 3usize..6) {
            let lhs = sphere_pair_interaction(d, r * s, r * a, r * a);
            let rhs = g(d, r) * sphere_pair_interaction(d, s, a, a);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs);
        }
    }
}
