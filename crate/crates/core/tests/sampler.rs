use mesogas_core::equilibrium::{solve_thermal, thermal_half_width, Potential, SolverOptions};
use mesogas_core::gibbs::{
    ball_membership, energy_gap, estimate_event_probability, gibbs_sample, local_empirical_field, BallSpec,
    RegimeParams, SamplerOptions,
};
use mesogas_core::measures::{AtomicMeasure, Grid, GridMeasure};
use statrs::distribution::{ContinuousCDF, Normal};

fn single_particle() -> (RegimeParams, Potential) {
    (RegimeParams::new(3, 1, 0.9, 0.05, 1.0).unwrap(), Potential::quadratic())
}

#[test]
fn single_particle_marginal_is_gaussian() {
    let (p, v) = single_particle();
    let opts = SamplerOptions { steps: 110_000, burn_in: 10_000, ..Default::default() };
    let run = gibbs_sample(&p, &v, &opts, 2024, 0).unwrap();
    assert_eq!(run.samples.len(), 100_000);
    let rate = run.state.acceptance_rate();
    assert!(rate > 0.1 && rate < 0.9, "acceptance {rate}");
    let target = 1.0 / (2.0 * p.beta());
    let normal = Normal::new(0.0, target.sqrt()).unwrap();
    for axis in 0..3 {
        let mut xs: Vec<f64> = run.samples.iter().map(|s| s.points[0][axis]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((var / target - 1.0).abs() < 0.05, "axis {axis}: variance {var}");
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = normal.cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "axis {axis}: KS {ks}");
    }
}

#[test]
fn half_space_probability_matches_gaussian() {
    let (p, v) = single_particle();
    let a = 0.4;
    let opts = SamplerOptions { steps: 22_000, burn_in: 2_000, ..Default::default() };
    let est = estimate_event_probability(&p, &v, &|x: &[Vec<f64>]| x[0][0] > a, 8, &opts, 7).unwrap();
    let exact = 1.0 - Normal::new(0.0, (1.0 / (2.0 * p.beta())).sqrt()).unwrap().cdf(a);
    assert!((est.p_hat - exact).abs() < 3.0 * est.stderr, "{} vs {exact} ± {}", est.p_hat, est.stderr);
    assert_eq!(est.samples, 8 * 20_000);
}

#[test]
fn trivial_events() {
    let (p, v) = single_particle();
    let opts = SamplerOptions { steps: 2_000, burn_in: 1_000, ..Default::default() };
    let yes = estimate_event_probability(&p, &v, &|_: &[Vec<f64>]| true, 3, &opts, 1).unwrap();
    assert_eq!(yes.p_hat, 1.0);
    let no = estimate_event_probability(&p, &v, &|_: &[Vec<f64>]| false, 3, &opts, 1).unwrap();
    assert_eq!(no.p_hat, 0.0);
    assert!(no.upper_bound > 0.0 && no.upper_bound < 1e-3);
}

#[test]
fn local_field_of_far_particles_is_empty() {
    let p = RegimeParams::new(3, 27, 0.9, 0.1, 0.5).unwrap();
    let x = vec![vec![0.9, 0.0, 0.0], vec![0.0, -0.8, 0.0]];
    let l = local_empirical_field(&x, &p).unwrap();
    assert!(l.is_empty());
    let p0 = RegimeParams::new(3, 27, 0.9, 0.0, 0.85).unwrap();
    assert_eq!(local_empirical_field(&x, &p0).unwrap().len(), 1);
}

#[test]
fn energy_ball_membership() {
    let v = Potential::quadratic();
    let grid = Grid::centered_cube(3, thermal_half_width(8.0, 1.5), 12).unwrap();
    let sol = solve_thermal(&v, 8.0, &grid, &SolverOptions::default()).unwrap();
    let p = RegimeParams::new(3, 64, 0.5, 0.05, 2.0).unwrap();
    // quantize μ on a coarse lattice of atoms
    let coarse = Grid::centered_cube(3, 1.0, 4).unwrap();
    let atoms: Vec<Vec<f64>> = (0..coarse.num_cells()).map(|i| coarse.cell_center(i)).collect();
    let nu = AtomicMeasure::empirical(atoms).unwrap();
    let mu: &GridMeasure = &sol.measure;
    let gap = energy_gap(&nu, mu).unwrap().abs();
    assert!(ball_membership(&nu, mu, &BallSpec::Energy { epsilon: gap * 2.0 + 1.0, k: 0.0 }, &p).unwrap());
    assert!(!ball_membership(&nu, mu, &BallSpec::Energy { epsilon: gap * 0.5, k: 0.0 }, &p).unwrap());
    // k/N^{1/3} = 0.25·k: k = 5 shrinks the box to half width 0.75 and excludes the lattice corner 0.75
    assert!(!ball_membership(&nu, mu, &BallSpec::Energy { epsilon: gap * 2.0 + 1.0, k: 5.0 }, &p).unwrap());
    assert!(ball_membership(&nu, mu, &BallSpec::Bl { epsilon: 2.5 }, &p).unwrap());
}
