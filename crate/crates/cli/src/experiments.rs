use mesogas_core::construction::{construct, fit_pointwise_bound, max_node_potential, place_points, assign_counts, volume_estimate, ConstructionParams, ConstructionReport, VolumeEstimate};
use mesogas_core::equilibrium::{blowup, blowup_sup_distance, solve_equilibrium};
use mesogas_core::gibbs::{gibbs_sample, local_empirical_field, Regime};
use mesogas_core::measures::{bl_distance, AtomicMeasure, AxisBox, Grid, GridMeasure};
use mesogas_core::rate::{n_rate, phi_rate, t_rate, RateReport, TCharge, TReport};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    #[serde(rename = "N")]
    pub n: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub chain: u64,
    pub acceptance_rate: f64,
    pub proposal_scale: f64,
    pub final_hamiltonian: f64,
    pub mean_hamiltonian: f64,
    /// Mean number of atoms of `lemp_N^λ` over retained samples.
    pub mean_local_atoms: f64,
    pub final_configuration: AtomicMeasure,
}

/// Per-sample trace line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub chain: u64,
    pub step: usize,
    pub hamiltonian: f64,
    pub acceptance_rate: f64,
    pub local_atoms: usize,
    pub local_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutput {
    pub chains: Vec<ChainSummary>,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
    pub warnings: Vec<String>,
}

/// Runs the configured chains at every grid point.
pub fn run_sample(config: &ExperimentConfig) -> anyhow::Result<SampleOutput> {
    let warnings = config.validate()?;
    let opts = config.sampler.options();
    let jobs: Vec<(usize, (usize, f64, f64), u64)> = config
        .grid_points()
        .into_iter()
        .enumerate()
        .flat_map(|(i, p)| (0..config.sampler.chains as u64).map(move |c| (i, p, c)))
        .collect();
    let results: Vec<anyhow::Result<(ChainSummary, Vec<TraceRow>)>> = jobs
        .par_iter()
        .map(|&(i, (n, gamma, lambda), chain)| {
            let params = config.params(n, gamma, lambda)?;
            let run = gibbs_sample(&params, &config.potential, &opts, config.seed.wrapping_add(i as u64), chain)?;
            let mut trace = Vec::with_capacity(run.samples.len());
            for s in &run.samples {
                let l = local_empirical_field(&s.points, &params)?;
                trace.push(TraceRow {
                    n,
                    gamma,
                    lambda,
                    chain,
                    step: s.step,
                    hamiltonian: s.hamiltonian,
                    acceptance_rate: s.acceptance_rate,
                    local_atoms: l.len(),
                    local_mass: l.mass(),
                });
            }
            let count = trace.len().max(1) as f64;
            let summary = ChainSummary {
                n,
                gamma,
                lambda,
                chain,
                acceptance_rate: run.state.acceptance_rate(),
                proposal_scale: run.state.scale,
                final_hamiltonian: run.state.hamiltonian,
                mean_hamiltonian: trace.iter().map(|t| t.hamiltonian).sum::<f64>() / count,
                mean_local_atoms: trace.iter().map(|t| t.local_atoms as f64).sum::<f64>() / count,
                final_configuration: AtomicMeasure::empirical(run.state.current.clone())?,
            };
            Ok((summary, trace))
        })
        .collect();
    let mut chains = Vec::new();
    let mut trace = Vec::new();
    for r in results {
        let (s, t) = r?;
        chains.push(s);
        trace.extend(t);
    }
    Ok(SampleOutput { chains, trace, warnings })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSummary {
    pub k: f64,
    pub el_residual: f64,
    pub iterations: usize,
    pub objective: f64,
    pub density_at_origin: f64,
    pub support_min: f64,
    pub support_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThermalSummary {
    #[serde(rename = "N")]
    pub n: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub n_beta: f64,
    pub solution: EquilibriumSummary,
    pub boundary_ratio: f64,
    /// `‖μ_β - μ_V‖_BL` with both measures moved to cell-centre atoms.
    pub bl_to_mu_v: f64,
    /// `sup_{□_R} |μ_β^{N^λ} - μ_V(0)|`.
    pub blowup_sup_distance: f64,
    /// `μ_β^{N^λ}(□_R)`, the mean-field prediction for `|lemp_N^λ|`.
    pub local_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumOutput {
    pub mu_v0: f64,
    pub mu_v: EquilibriumSummary,
    pub thermal: Vec<ThermalSummary>,
    pub warnings: Vec<String>,
}

fn summarize(sol: &mesogas_core::equilibrium::EquilibriumSolution) -> EquilibriumSummary {
    let (lo, hi) = sol.support_range();
    EquilibriumSummary {
        k: sol.k,
        el_residual: sol.el_residual,
        iterations: sol.iterations,
        objective: sol.objective,
        density_at_origin: sol.density_at_origin(),
        support_min: lo,
        support_max: hi,
    }
}

/// Solves `μ_V` and `μ_β` for every grid point.
pub fn run_equilibrium(config: &ExperimentConfig) -> anyhow::Result<EquilibriumOutput> {
    let warnings = config.validate()?;
    let grid = config.equilibrium_grid(config.solver.grid_cells)?;
    let mu_v = solve_equilibrium(&config.potential, &grid, &config.solver.equilibrium())?;
    let mu_v0 = config.mu_v0()?;
    let thermal = config
        .grid_points()
        .par_iter()
        .map(|&(n, gamma, lambda)| -> anyhow::Result<ThermalSummary> {
            let params = config.params(n, gamma, lambda)?;
            let sol = config.thermal_solution(&params)?;
            let blown = blowup(&sol, n, lambda)?;
            Ok(ThermalSummary {
                n,
                gamma,
                lambda,
                n_beta: params.n_beta(),
                solution: summarize(&sol),
                boundary_ratio: sol.boundary_ratio,
                bl_to_mu_v: bl_distance(&sol.measure, &mu_v.measure)?,
                blowup_sup_distance: blowup_sup_distance(&blown, config.regimes.r, mu_v0)?,
                local_mass: blown.mass_in(&AxisBox::centered(config.d, config.regimes.r)?),
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(EquilibriumOutput { mu_v0, mu_v: summarize(&mu_v), thermal, warnings })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateEntry {
    #[serde(rename = "N")]
    pub n: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub regime: Regime,
    pub target: GridMeasure,
    /// `𝒩[μ | μ_V(0)1_□]`.
    pub n_rate: f64,
    /// `Φ^{μ_V(0)}_{□_R}(μ)`.
    pub phi: RateReport,
    /// `𝐓^N_λ(μ)` and `𝒯^N_λ(μ)`, critical rows only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<TReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateOutput {
    pub mu_v0: f64,
    pub entries: Vec<RateEntry>,
    pub warnings: Vec<String>,
}

/// Rate functionals at the configured target for every grid point.
pub fn run_rate(config: &ExperimentConfig) -> anyhow::Result<RateOutput> {
    let warnings = config.validate()?;
    let mu_v0 = config.mu_v0()?;
    let domain = config.domain()?;
    let entries = config
        .grid_points()
        .into_iter()
        .map(|(n, gamma, lambda)| -> anyhow::Result<RateEntry> {
            let params = config.params(n, gamma, lambda)?;
            let target = config.target_measure(mu_v0, &params)?;
            let n_value = n_rate(&target, mu_v0, &domain.interior)?;
            let phi = phi_rate(&target, mu_v0, &domain, &config.solver.rate())?;
            let t = if params.regime() == Regime::Critical {
                let sol = config.thermal_solution(&params)?;
                Some(t_rate(TCharge::Grid(&target), &params, &sol, mu_v0, &domain, &config.solver.t())?)
            } else {
                None
            };
            Ok(RateEntry { n, gamma, lambda, regime: params.regime(), target, n_rate: n_value, phi, t })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(RateOutput { mu_v0, entries, warnings })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructOutput {
    pub report: ConstructionReport,
    pub certified: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume: Option<VolumeEstimate>,
    pub warnings: Vec<String>,
}

fn uniform(d: usize, r: f64, cells: usize) -> mesogas_core::error::Result<GridMeasure> {
    let g = Grid::centered_cube(d, r, cells)?;
    GridMeasure::constant(&g, 1.0 / g.bbox.volume())
}

/// Calibrates the pointwise bound on the configured ladder, then places and
/// certifies `N` points for a uniform target.
pub fn run_construct(config: &ExperimentConfig) -> anyhow::Result<ConstructOutput> {
    let warnings = config.validate()?;
    let c = &config.construction;
    let d = config.d;
    let nu = uniform(d, c.target_half_width, c.target_cells)?;
    let bound = if c.calibration.is_empty() {
        None
    } else {
        let rows = c
            .calibration
            .iter()
            .enumerate()
            .map(|(i, &(n, eta))| -> anyhow::Result<(usize, f64, f64)> {
                let counts = assign_counts(&nu, n, eta)?;
                let p = place_points(&counts, c.lambda_sep, config.seed.wrapping_add(1 + i as u64))?;
                Ok((n, eta, max_node_potential(&p.empirical()?, &nu, 0.5 * p.min_tau())))
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        Some(fit_pointwise_bound(&rows, d)?)
    };
    let params = ConstructionParams { n: c.n, cube_size: c.cube_size, lambda_sep: c.lambda_sep, truncation_quantile: c.truncation_quantile };
    let report = construct(&nu, &params, bound.as_ref(), config.seed)?;
    let volume = if c.volume_trials > 0 {
        let mu_ref = uniform(d, c.reference_half_width, c.target_cells)?;
        Some(volume_estimate(&nu, &mu_ref, c.n, c.cube_size, c.lambda_sep, c.volume_trials, config.seed)?)
    } else {
        None
    };
    Ok(ConstructOutput { certified: report.certified(), report, volume, warnings })
}
