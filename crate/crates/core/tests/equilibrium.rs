use std::f64::consts::PI;

use mesogas_core::equilibrium::{
    blowup, blowup_sup_distance, solve_equilibrium, solve_thermal, thermal_half_width, EquilibriumSolution, Potential,
    SolverOptions,
};
use mesogas_core::measures::{bl_distance, Grid};

fn mu_v(grid: &Grid) -> EquilibriumSolution {
    solve_equilibrium(&Potential::quadratic(), grid, &SolverOptions::default()).unwrap()
}

fn mu_beta(nb: f64, grid: &Grid) -> EquilibriumSolution {
    solve_thermal(&Potential::quadratic(), nb, grid, &SolverOptions::default()).unwrap()
}

#[test]
fn euler_lagrange_residuals() {
    let grid = Grid::centered_cube(3, 1.25, 20).unwrap();
    let v = mu_v(&grid);
    assert!(v.el_residual < 1e-2, "{}", v.el_residual);
    // ΔV/(2(d-2)|S²|) = 3/(4π) inside the support
    let exact = 3.0 / (4.0 * PI);
    assert!((v.density_at_origin() - exact).abs() < 1e-2 * exact);
    for nb in [10.0, 100.0] {
        let g = Grid::centered_cube(3, thermal_half_width(nb, 1.25), 20).unwrap();
        let t = mu_beta(nb, &g);
        assert!(t.el_residual < 1e-2, "Nβ = {nb}: {}", t.el_residual);
    }
}

#[test]
fn thermal_approaches_equilibrium() {
    let grid = Grid::centered_cube(3, thermal_half_width(10.0, 1.25), 14).unwrap();
    let v = mu_v(&grid);
    let mut last = f64::INFINITY;
    for nb in [10.0, 100.0, 1000.0] {
        let bl = bl_distance(&mu_beta(nb, &grid).measure, &v.measure).unwrap();
        println!("Nβ = {nb}: bl = {bl}");
        assert!(bl < last, "Nβ = {nb}: {bl} ≥ {last}");
        last = bl;
    }
}

#[test]
fn blowup_approaches_origin_density() {
    let mu_v0 = 3.0 / (4.0 * PI);
    let (gamma, lambda) = (0.8, 0.1);
    let mut last = f64::INFINITY;
    for n in [64usize, 256, 1024] {
        let nb = (n as f64).powf(1.0 - gamma);
        let grid = Grid::centered_cube(3, thermal_half_width(nb, 1.3), 24).unwrap();
        let b = blowup(&mu_beta(nb, &grid), n, lambda).unwrap();
        let dist = blowup_sup_distance(&b, 0.5, mu_v0).unwrap();
        println!("N = {n}: sup distance = {dist}");
        assert!(dist < last);
        last = dist;
    }
}
