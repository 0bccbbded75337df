use mesogas_core::equilibrium::{solve_thermal, thermal_half_width, Potential, SolverOptions};
use mesogas_core::gibbs::{hamiltonian, splitting_decompose, SplittingContext, ZetaRule};
use mesogas_core::measures::Grid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_config(rng: &mut ChaCha8Rng, n: usize, half: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..3).map(|_| rng.random_range(-half..half)).collect()).collect()
}

#[test]
fn identity_holds_on_random_configurations() {
    let v = Potential::quadratic();
    let n = 16;
    let beta = (n as f64).powf(-0.5);
    let nb = n as f64 * beta;
    let grid = Grid::centered_cube(3, thermal_half_width(nb, 1.5), 24).unwrap();
    let sol = solve_thermal(&v, nb, &grid, &SolverOptions::default()).unwrap();
    let ctx = SplittingContext::new(&sol, &v, n, beta).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let x = random_config(&mut rng, n, 1.5);
        let h = hamiltonian(&x, &v, n);
        let s = ctx.decompose(&x, ZetaRule::ElExtension).unwrap();
        assert!((h - s.total()).abs() < 1e-9 * h.abs(), "{h} vs {}", s.total());
        let (lhs, rhs) = ctx.next_order(&x).unwrap();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}

#[test]
fn single_particle_has_no_pair_term() {
    let v = Potential::quadratic();
    let grid = Grid::centered_cube(3, thermal_half_width(2.0, 1.5), 12).unwrap();
    let sol = solve_thermal(&v, 2.0, &grid, &SolverOptions::default()).unwrap();
    let x = vec![vec![0.3, -0.2, 0.5]];
    let s = splitting_decompose(&x, &sol, &v, 1, 2.0).unwrap();
    assert!((s.total() - v.eval(&x[0])).abs() < 1e-10);
}

#[test]
fn cell_lookup_residual_shrinks_under_refinement() {
    let v = Potential::quadratic();
    let n = 8;
    let beta = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let configs: Vec<Vec<Vec<f64>>> = (0..10).map(|_| random_config(&mut rng, n, 1.2)).collect();
    let mut last = f64::INFINITY;
    for cells in [8, 16] {
        let grid = Grid::centered_cube(3, thermal_half_width(4.0, 1.5), cells).unwrap();
        let sol = solve_thermal(&v, 4.0, &grid, &SolverOptions::default()).unwrap();
        let ctx = SplittingContext::new(&sol, &v, n, beta).unwrap();
        let mut worst = 0.0f64;
        for x in &configs {
            let h = hamiltonian(x, &v, n);
            let s = ctx.decompose(x, ZetaRule::CellLookup).unwrap();
            worst = worst.max((h - s.total()).abs() / h.abs());
        }
        assert!(worst < last, "{worst} !< {last}");
        last = worst;
    }
}
