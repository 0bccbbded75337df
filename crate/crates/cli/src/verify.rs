use mesogas_core::construction::{construct, ConstructionParams};
use mesogas_core::equilibrium::{solve_equilibrium, solve_thermal, thermal_half_width, Potential};
use mesogas_core::gibbs::{classify_regime, gibbs_sample, hamiltonian, Regime, RegimeParams, SamplerOptions, SplittingContext, ZetaRule};
use mesogas_core::kernel::energy;
use mesogas_core::measures::{AxisBox, Grid, GridMeasure};
use mesogas_core::rate::{entropy_mirror_descent, kappa_minimizer, n_rate, phi_rate, phi_scaling_check, ExteriorDomain};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{quadratic_density, ExperimentConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub module: String,
    pub passed: bool,
    pub residual: f64,
    pub tolerance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
}

type Outcome = mesogas_core::error::Result<f64>;

fn check(name: &str, module: &str, tolerance: f64, f: impl FnOnce() -> Outcome) -> Check {
    let (residual, error) = match f() {
        Ok(r) => (r, None),
        Err(e) => (f64::INFINITY, Some(e.to_string())),
    };
    Check {
        name: name.to_string(),
        module: module.to_string(),
        passed: error.is_none() && residual <= tolerance,
        residual,
        tolerance,
        error,
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn random_density(grid: &Grid, rng: &mut ChaCha8Rng) -> mesogas_core::error::Result<GridMeasure> {
    GridMeasure::new(grid.clone(), (0..grid.num_cells()).map(|_| rng.random::<f64>()).collect(), false)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Worst relative splitting residual over random configurations.
fn splitting_residual(config: &ExperimentConfig, rule: ZetaRule) -> Outcome {
    let v = &config.potential;
    let d = config.d;
    let n = 8;
    let beta = 0.5;
    let nb = n as f64 * beta;
    let grid = Grid::centered_cube(d, thermal_half_width(nb, 1.5), config.verify.grid_cells)?;
    let sol = solve_thermal(v, nb, &grid, &config.solver.equilibrium())?;
    let ctx = SplittingContext::new(&sol, v, n, beta)?;
    let mut r = rng(config.seed, 1);
    let mut worst = 0.0f64;
    for _ in 0..config.verify.configurations {
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.random_range(-1.2..1.2)).collect()).collect();
        let h = hamiltonian(&x, v, n);
        worst = worst.max(rel(ctx.decompose(&x, rule)?.total(), h));
    }
    Ok(worst)
}

fn bump(grid: &Grid) -> mesogas_core::error::Result<GridMeasure> {
    GridMeasure::from_fn(grid, false, |x| (-2.0 * x.iter().map(|c| c * c).sum::<f64>()).exp())
}

/// Runs every invariant check; the report is a pure function of the config.
pub fn run_verify(config: &ExperimentConfig) -> anyhow::Result<VerifyReport> {
    let warnings = config.validate()?;
    let d = config.d;
    let cells = config.verify.grid_cells;
    let seed = config.seed;
    let rate_opts = config.solver.rate();
    let quadratic = matches!(config.potential, Potential::Quadratic { center: None });
    let mut checks = Vec::new();

    checks.push(check("splitting_identity", "gibbs_sampler", 1e-6, || splitting_residual(config, ZetaRule::ElExtension)));
    checks.push(check("splitting_cell_lookup", "gibbs_sampler", 0.15, || splitting_residual(config, ZetaRule::CellLookup)));
    checks.push(check("energy_scaling", "coulomb_kernel", 1e-9, || {
        let m = bump(&Grid::centered_cube(d, 1.0, cells)?)?;
        let e = energy(&m);
        let mut worst = 0.0f64;
        for x in [0.5f64, 2.0] {
            worst = worst.max(rel(energy(&m.dilate(x)?), x.powi(d as i32 + 2) * e));
        }
        Ok(worst)
    }));
    checks.push(check("energy_refinement", "coulomb_kernel", 1e-3, || {
        let grid = Grid::centered_cube(d, 1.0, cells)?;
        Ok(rel(energy(&bump(&grid)?), energy(&bump(&grid.refined(2))?)))
    }));
    checks.push(check("phi_scaling", "rate_functionals", 1e-3, || {
        let dom = ExteriorDomain::centered(d, 1.0, 2, config.solver.truncation_factor)?;
        let mu = random_density(&dom.interior_grid(), &mut rng(seed, 2))?;
        let mut worst = 0.0f64;
        for refine in [1, 2] {
            let base = if refine == 1 { dom.clone() } else { dom.refined(refine) };
            let m = if refine == 1 { mu.clone() } else { mu.subdivide(refine) };
            for x in [0.5, 2.0] {
                let (l, r) = phi_scaling_check(&m, 0.5, &base, x, None, 1, &rate_opts)?;
                worst = worst.max(rel(r, l));
            }
        }
        Ok(worst)
    }));
    checks.push(check("phi_superquadratic_convex", "rate_functionals", 1e-8, || {
        let dom = ExteriorDomain::centered(d, 1.0, 2, config.solver.truncation_factor)?;
        let inner = dom.interior_grid();
        let mut r = rng(seed, 3);
        let phi = |m: &GridMeasure| phi_rate(m, 0.3, &dom, &rate_opts).map(|x| x.value);
        let background = GridMeasure::constant(&inner, 0.3)?;
        let mut worst = 0.0f64;
        for _ in 0..config.verify.random_measures.min(10) {
            let a = random_density(&inner, &mut r)?.add_scaled(0.5, &background)?;
            let b = random_density(&inner, &mut r)?;
            let (pa, pb) = (phi(&a)?, phi(&b)?);
            // scaling about the background: α + 2(μ - α)
            worst = worst.max(4.0 * pa - phi(&a.scale(2.0).add_scaled(-1.0, &background)?)?);
            worst = worst.max(phi(&a.add_scaled(1.0, &b)?.scale(0.5))? - 0.5 * (pa + pb));
        }
        Ok(worst)
    }));
    checks.push(check("n_rate_nonnegative_convex", "rate_functionals", 1e-10, || {
        let grid = Grid::centered_cube(d, 1.0, 4)?;
        let b = AxisBox::centered(d, 1.0)?;
        let mut r = rng(seed, 4);
        let mut worst = 0.0f64;
        for _ in 0..config.verify.random_measures {
            let alpha = 0.05 + 2.0 * r.random::<f64>();
            let a = random_density(&grid, &mut r)?;
            let c = random_density(&grid, &mut r)?;
            let (na, nc) = (n_rate(&a, alpha, &b)?, n_rate(&c, alpha, &b)?);
            let mid = n_rate(&a.add_scaled(1.0, &c)?.scale(0.5), alpha, &b)?;
            worst = worst.max(-na).max(-nc).max(mid - 0.5 * (na + nc));
        }
        Ok(worst)
    }));
    checks.push(check("kappa_oracle", "rate_functionals", 1e-6, || {
        let grid = Grid::centered_cube(d, 2.0, 6)?;
        let interior = AxisBox::centered(d, 1.0)?;
        let ext: Vec<usize> = (0..grid.num_cells()).filter(|&i| !interior.contains(&grid.cell_center(i))).collect();
        let vol = grid.cell_volume();
        let mut r = rng(seed, 5);
        let mut worst = 0.0f64;
        for _ in 0..config.verify.random_measures.min(5) {
            let blown = random_density(&grid, &mut r)?.add_scaled(0.1, &GridMeasure::constant(&grid, 1.0)?)?;
            let total = 10.0 + 5.0 * r.random::<f64>();
            let nu = 2.0 * r.random::<f64>();
            let k = kappa_minimizer(nu, total, &blown, &interior)?;
            let log_w: Vec<f64> = ext.iter().map(|&i| (blown.density[i] * vol).ln()).collect();
            let (m, _) = entropy_mirror_descent(&log_w, total - nu, 0.5, 1e-15, 10_000);
            for (j, &i) in ext.iter().enumerate() {
                worst = worst.max((m[j] - k.minimizer.density[i] * vol).abs());
            }
        }
        Ok(worst)
    }));
    let eq_grid = config.equilibrium_grid(cells);
    let mu_v = eq_grid.and_then(|g| solve_equilibrium(&config.potential, &g, &config.solver.equilibrium()));
    checks.push(check("mu_v_el_residual", "equilibrium", 1e-2, || Ok(mu_v.as_ref().map_err(clone_err)?.el_residual)));
    if quadratic {
        checks.push(check("mu_v_origin_density", "equilibrium", 5e-2, || {
            Ok(rel(mu_v.as_ref().map_err(clone_err)?.density_at_origin(), quadratic_density(d)))
        }));
    }
    checks.push(check("mu_beta_el_residual", "equilibrium", 1e-2, || {
        let g = Grid::centered_cube(d, thermal_half_width(10.0, 1.25 * config.equilibrium_half_width()), cells)?;
        Ok(solve_thermal(&config.potential, 10.0, &g, &config.solver.equilibrium())?.el_residual)
    }));
    checks.push(check("regime_classification", "cli_experiments", 0.0, || {
        let mut r = rng(seed, 6);
        let mut wrong = 0usize;
        for _ in 0..10_000 {
            let lambda = r.random::<f64>() / d as f64;
            let gamma = r.random::<f64>();
            let diff = gamma - (1.0 - 2.0 * lambda);
            let expect = if diff > 0.0 { Regime::Subcritical } else { Regime::Supercritical };
            wrong += (diff.abs() > 1e-9 && classify_regime(gamma, lambda) != expect) as usize;
        }
        Ok(wrong as f64)
    }));
    checks.push(check("sampler_gaussian_variance", "gibbs_sampler", 5e-2, || {
        let p = RegimeParams::new(d, 1, 0.9, 0.05, 1.0)?;
        let steps = config.verify.sampler_steps;
        let opts = SamplerOptions { steps: steps + steps / 10, burn_in: steps / 10, ..Default::default() };
        let run = gibbs_sample(&p, &Potential::quadratic(), &opts, seed, 7)?;
        let target = 1.0 / (2.0 * p.beta());
        let mut worst = 0.0f64;
        for axis in 0..d {
            let xs: Vec<f64> = run.samples.iter().map(|s| s.points[0][axis]).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            worst = worst.max(rel(var, target));
        }
        Ok(worst)
    }));
    checks.push(check("construction_constraints", "construction_lab", 0.0, || {
        let c = &config.construction;
        let g = Grid::centered_cube(d, c.target_half_width, c.target_cells)?;
        let nu = GridMeasure::constant(&g, 1.0 / g.bbox.volume())?;
        let params = ConstructionParams { n: c.n, cube_size: c.cube_size, lambda_sep: c.lambda_sep, truncation_quantile: c.truncation_quantile };
        let report = construct(&nu, &params, None, seed)?;
        let sep_ok = report.configuration.min_separation() >= report.min_tau;
        Ok(if report.constraints_ok && sep_ok { 0.0 } else { 1.0 })
    }));

    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport { passed, checks, warnings })
}

fn clone_err(e: &mesogas_core::error::Error) -> mesogas_core::error::Error {
    mesogas_core::error::Error::InvalidParameter(e.to_string())
}
