use mesogas_core::kernel::{ball_self_energy, energy, equivalent_radius, g};
use mesogas_core::measures::{AxisBox, Grid, GridMeasure};
use mesogas_core::rate::{
    entropy_mirror_descent, kappa_minimizer, n_mass_bound, n_rate, phi_mass_constrained, phi_rate, phi_scaling_check,
    ExteriorDomain, RateOptions,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_density(grid: &Grid, rng: &mut ChaCha8Rng, scale: f64) -> GridMeasure {
    let density = (0..grid.num_cells()).map(|_| scale * rng.random::<f64>()).collect();
    GridMeasure::new(grid.clone(), density, false).unwrap()
}

/// Lawson–Hanson active-set NNLS: `min |Ax - b|` over `x ≥ 0`.
fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    for _ in 0..10 * n {
        let w = a.transpose() * (b - a * &x);
        let candidate = (0..n).filter(|&j| !passive[j] && w[j] > 1e-13).max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = candidate else { break };
        passive[j] = true;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&k| passive[k]).collect();
            let sub = DMatrix::from_fn(a.nrows(), idx.len(), |r, c| a[(r, idx[c])]);
            let z_sub = (sub.transpose() * &sub).cholesky().unwrap().solve(&(sub.transpose() * b));
            let mut z = DVector::zeros(n);
            for (c, &k) in idx.iter().enumerate() {
                z[k] = z_sub[c];
            }
            if idx.iter().all(|&k| z[k] > 0.0) {
                x = z;
                break;
            }
            let t = idx
                .iter()
                .filter(|&&k| z[k] <= 0.0)
                .map(|&k| x[k] / (x[k] - z[k]))
                .fold(f64::INFINITY, f64::min);
            x = &x + (z - &x) * t;
            for &k in &idx {
                if x[k] <= 1e-15 {
                    x[k] = 0.0;
                    passive[k] = false;
                }
            }
        }
    }
    x
}

/// Dense cell matrix assembled entry by entry from the kernel.
fn dense_kernel(grid: &Grid) -> DMatrix<f64> {
    let d = grid.dim();
    let n = grid.num_cells();
    let s = ball_self_energy(d, equivalent_radius(d, grid.cell_volume()));
    let c: Vec<Vec<f64>> = (0..n).map(|i| grid.cell_center(i)).collect();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            s
        } else {
            let r = c[i].iter().zip(&c[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            g(d, r)
        }
    })
}

fn qp_oracle(mu: &GridMeasure, alpha: f64, dom: &ExteriorDomain) -> f64 {
    let grid = &dom.grid;
    let vol = grid.cell_volume();
    let k = dense_kernel(grid);
    let rho = dom.embed(mu).unwrap();
    let c = DVector::from_iterator(rho.len(), rho.iter().map(|r| (r - alpha) * vol));
    let kc = &k * &c;
    let ext = dom.exterior_cells();
    let kee = DMatrix::from_fn(ext.len(), ext.len(), |i, j| k[(ext[i], ext[j])]);
    let l = kee.clone().cholesky().unwrap().l();
    let q = DVector::from_iterator(ext.len(), ext.iter().map(|&i| kc[i]));
    // xᵀKx + 2qᵀx = |Lᵀx + L⁻¹q|² - |L⁻¹q|²
    let linv_q = l.solve_lower_triangular(&q).unwrap();
    let a = l.transpose();
    let b = -&linv_q;
    let x = nnls(&a, &b);
    c.dot(&kc) + (&a * &x - &b).norm_squared() - b.norm_squared()
}

#[test]
fn tiny_instance_matches_dense_qp() {
    let dom = ExteriorDomain::centered(3, 1.0, 2, 2.0).unwrap();
    assert_eq!(dom.exterior_cells().len(), 56);
    let inner = dom.interior_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let mu = random_density(&inner, &mut rng, 1.0);
        let alpha = 0.2 + 0.6 * rng.random::<f64>();
        let r = phi_rate(&mu, alpha, &dom, &RateOptions::default()).unwrap();
        let oracle = qp_oracle(&mu, alpha, &dom);
        assert!((r.value - oracle).abs() < 1e-6 * oracle.abs().max(1.0), "{} vs {}", r.value, oracle);
        assert!(r.kkt_residual < 1e-8);
    }
}

#[test]
fn zero_input_is_screened_background() {
    let dom = ExteriorDomain::centered(3, 1.0, 2, 2.0).unwrap();
    let zero = GridMeasure::zeros(&dom.interior_grid());
    let r = phi_rate(&zero, 0.5, &dom, &RateOptions::default()).unwrap();
    assert!(r.value > 0.0);
    assert!((r.value - qp_oracle(&zero, 0.5, &dom)).abs() < 1e-6);
    assert!((n_rate(&zero, 0.5, &dom.interior).unwrap() - 0.5 * 8.0).abs() < 1e-12);
}

#[test]
fn mass_constraint_is_monotone_and_nested() {
    let dom = ExteriorDomain::centered(3, 1.0, 2, 4.0).unwrap();
    let inner = dom.interior_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mu = random_density(&inner, &mut rng, 1.0);
    let alpha = 0.4;
    let opts = RateOptions::default();
    let free = phi_rate(&mu, alpha, &dom, &opts).unwrap();
    let zero = phi_mass_constrained(&mu, alpha, &dom, 0.0, &opts).unwrap();
    let rho = dom.embed(&mu).unwrap();
    let charge = GridMeasure::new(dom.grid.clone(), rho.iter().map(|r| r - alpha).collect(), true).unwrap();
    assert!((zero.value - energy(&charge)).abs() < 1e-9 * zero.value.abs().max(1.0));
    let mut last = zero.value;
    for s in [0.5, 1.0, 2.0] {
        let r = phi_mass_constrained(&mu, alpha, &dom, s * mu.mass(), &opts).unwrap();
        assert!(r.value <= last + 1e-10, "{} > {}", r.value, last);
        assert!(r.minimizer.mass() <= s * mu.mass() * (1.0 + 1e-9));
        last = r.value;
    }
    let huge = phi_mass_constrained(&mu, alpha, &dom, 1e6, &opts).unwrap();
    assert!((huge.value - free.value).abs() < 1e-8 * free.value.abs().max(1.0));
}

#[test]
fn superquadratic_and_convex() {
    let dom = ExteriorDomain::centered(3, 1.0, 2, 4.0).unwrap();
    let inner = dom.interior_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let opts = RateOptions::default();
    let alpha = 0.3;
    let phi = |m: &GridMeasure| phi_rate(m, alpha, &dom, &opts).unwrap().value;
    for _ in 0..4 {
        let a = random_density(&inner, &mut rng, 1.0);
        let b = random_density(&inner, &mut rng, 1.0);
        let (pa, pb) = (phi(&a), phi(&b));
        let mid = a.add_scaled(1.0, &b).unwrap().scale(0.5);
        assert!(phi(&mid) <= 0.5 * (pa + pb) + 1e-8);
        // centred scaling α + s(μ - α) with s = 1.5, kept non-negative
        let lifted = a.add_scaled(1.0, &GridMeasure::constant(&inner, 0.1).unwrap()).unwrap();
        let centred = lifted.scale(1.5).add_scaled(-0.5 * alpha, &GridMeasure::constant(&inner, 1.0).unwrap()).unwrap();
        assert!(centred.min_density() >= 0.0);
        assert!(phi(&centred) >= 2.25 * phi(&lifted) - 1e-8);
    }
}

// With the background held fixed, doubling can move μ towards α.
#[test]
fn doubling_is_not_superquadratic_at_half_background() {
    let dom = ExteriorDomain::centered(3, 1.0, 2, 4.0).unwrap();
    let half = GridMeasure::constant(&dom.interior_grid(), 0.15).unwrap();
    let opts = RateOptions::default();
    let p = phi_rate(&half, 0.3, &dom, &opts).unwrap().value;
    let p2 = phi_rate(&half.scale(2.0), 0.3, &dom, &opts).unwrap().value;
    assert!(p > 1e-3, "{p}");
    // zero charge, up to FFT round-off
    assert!(p2.abs() < 1e-9, "{p2}");
}

#[test]
fn scaling_is_exact_without_refinement() {
    let dom = ExteriorDomain::centered(3, 1.0, 2, 4.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mu = random_density(&dom.interior_grid(), &mut rng, 1.0);
    let opts = RateOptions::default();
    let (l1, r1) = phi_scaling_check(&mu, 0.5, &dom, 1.0, None, 1, &opts).unwrap();
    assert_eq!(l1, r1);
    for x in [0.5, 2.0] {
        let (l, r) = phi_scaling_check(&mu, 0.5, &dom, x, None, 1, &opts).unwrap();
        assert!((l - r).abs() < 1e-8 * l.abs(), "x={x}: {l} vs {r}");
        let (l, r) = phi_scaling_check(&mu, 0.5, &dom, x, Some(0.3), 1, &opts).unwrap();
        assert!((l - r).abs() < 1e-8 * l.abs(), "x={x} capped: {l} vs {r}");
    }
}

#[test]
fn truncation_doubling_changes_little() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let base = ExteriorDomain::centered(3, 1.0, 2, 4.0).unwrap();
    let wide = ExteriorDomain::centered(3, 1.0, 2, 8.0).unwrap();
    let mu = random_density(&base.interior_grid(), &mut rng, 1.0);
    let opts = RateOptions::default();
    let a = phi_rate(&mu, 0.4, &base, &opts).unwrap().value;
    let b = phi_rate(&mu, 0.4, &wide, &opts).unwrap().value;
    assert!((a - b).abs() < 0.01 * a.abs(), "{a} vs {b}");
}

#[test]
fn kappa_balanced_mass() {
    let grid = Grid::centered_cube(3, 2.0, 4).unwrap();
    let interior = AxisBox::centered(3, 1.0).unwrap();
    // exterior integral 7 with 56 exterior cells of volume 1
    let blown = GridMeasure::constant(&grid, 7.0 / 56.0).unwrap();
    let k = kappa_minimizer(1.0, 8.0, &blown, &interior).unwrap();
    assert!((k.scale - 1.0).abs() < 1e-12);
    assert!(k.value.abs() < 1e-12);
    assert!(kappa_minimizer(9.0, 8.0, &blown, &interior).is_err());
}

#[test]
fn kappa_matches_mirror_descent() {
    let grid = Grid::centered_cube(3, 2.0, 6).unwrap();
    let interior = AxisBox::centered(3, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let blown = random_density(&grid, &mut rng, 1.0).add_scaled(0.1, &GridMeasure::constant(&grid, 1.0).unwrap()).unwrap();
        let total = 10.0 + 5.0 * rng.random::<f64>();
        let nu = 2.0 * rng.random::<f64>();
        let k = kappa_minimizer(nu, total, &blown, &interior).unwrap();
        let ext: Vec<usize> = (0..grid.num_cells()).filter(|&i| !interior.contains(&grid.cell_center(i))).collect();
        let vol = grid.cell_volume();
        let log_w: Vec<f64> = ext.iter().map(|&i| (blown.density[i] * vol).ln()).collect();
        let (m, _) = entropy_mirror_descent(&log_w, total - nu, 0.5, 1e-15, 10_000);
        for (j, &i) in ext.iter().enumerate() {
            assert!((m[j] - k.minimizer.density[i] * vol).abs() < 1e-6);
        }
        let value: f64 = ext.iter().enumerate().map(|(j, &i)| m[j] * (m[j] / (blown.density[i] * vol)).ln()).sum();
        assert!((value - k.value).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn n_rate_nonnegative_and_convex(seed in any::<u64>(), alpha in 0.05f64..3.0) {
        let grid = Grid::centered_cube(3, 1.0, 3).unwrap();
        let b = AxisBox::centered(3, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_density(&grid, &mut rng, 3.0 * alpha);
        let c = random_density(&grid, &mut rng, 3.0 * alpha);
        let (na, nc) = (n_rate(&a, alpha, &b).unwrap(), n_rate(&c, alpha, &b).unwrap());
        prop_assert!(na >= -1e-12 && nc >= -1e-12);
        let mid = a.add_scaled(1.0, &c).unwrap().scale(0.5);
        prop_assert!(n_rate(&mid, alpha, &b).unwrap() <= 0.5 * (na + nc) + 1e-12);
        let bound = n_mass_bound(na, alpha, b.volume()).unwrap();
        prop_assert!(a.mass() <= bound * (1.0 + 1e-12));
    }
}
