use std::path::{Path, PathBuf};

use mesogas_core::equilibrium::{
    blowup, solve_equilibrium, solve_thermal, thermal_half_width, EquilibriumSolution, Potential, SolverOptions,
};
use mesogas_core::gibbs::{BallSpec, RegimeParams, SamplerOptions};
use mesogas_core::kernel::sphere_area;
use mesogas_core::measures::{Grid, GridMeasure};
use mesogas_core::rate::{ExteriorDomain, RateOptions, TOptions};
use serde::{Deserialize, Serialize};

/// Configuration problems; the command line maps these to exit status 2.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimeGrid {
    pub n: Vec<usize>,
    pub gamma: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Half-width `R` of the observation cube `□_R`.
    pub r: f64,
}

impl Default for RegimeGrid {
    fn default() -> Self {
        RegimeGrid { n: vec![16, 32, 64], gamma: vec![0.5], lambda: vec![0.05], r: 1.0 }
    }
}

/// Ball centre on `□_R`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// `scale · μ_V(0)`.
    Equilibrium { scale: f64 },
    Uniform { density: f64 },
    /// `scale · μ_β^{N^λ}` restricted to `□_R`, the finite-`N` mean-field field.
    Thermal { scale: f64 },
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec::Equilibrium { scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub burn_in: usize,
    pub thin: Option<usize>,
    pub chains: usize,
    pub initial_scale: f64,
    pub target_acceptance: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        let o = SamplerOptions::default();
        SamplerConfig {
            steps: o.steps,
            burn_in: o.burn_in,
            thin: o.thin,
            chains: 8,
            initial_scale: o.initial_scale,
            target_acceptance: o.target_acceptance,
        }
    }
}

impl SamplerConfig {
    pub fn options(&self) -> SamplerOptions {
        SamplerOptions {
            steps: self.steps,
            burn_in: self.burn_in,
            thin: self.thin,
            initial_scale: self.initial_scale,
            target_acceptance: self.target_acceptance,
            ..SamplerOptions::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Cells per axis for equilibrium and thermal solves.
    pub grid_cells: usize,
    /// Cells per axis of `□_R` for rate functionals.
    pub rate_cells: usize,
    /// Truncation box half-width over `R` for the screening problems.
    pub truncation_factor: f64,
    pub rate_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { tol: 1e-10, max_iter: 50_000, grid_cells: 20, rate_cells: 4, truncation_factor: 4.0, rate_tol: 1e-8 }
    }
}

impl SolverConfig {
    pub fn equilibrium(&self) -> SolverOptions {
        SolverOptions { tol: self.tol, max_iter: self.max_iter }
    }

    pub fn rate(&self) -> RateOptions {
        RateOptions { tol: self.rate_tol, ..RateOptions::default() }
    }

    pub fn t(&self) -> TOptions {
        TOptions::default()
    }
}

/// Target for the construction: uniform density of total mass one on `□_r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstructionConfig {
    pub n: usize,
    pub cube_size: f64,
    pub lambda_sep: f64,
    pub truncation_quantile: Option<f64>,
    pub target_half_width: f64,
    pub target_cells: usize,
    /// Calibration ladder `(N, η̄)` for the pointwise bound; empty skips it.
    pub calibration: Vec<(usize, f64)>,
    /// Reference measure for the volume estimate: uniform on `□_{reference_half_width}`.
    pub reference_half_width: f64,
    /// Rosenbluth trials for the volume estimate; zero skips it.
    pub volume_trials: usize,
}

impl Default for ConstructionConfig {
    fn default() -> Self {
        ConstructionConfig {
            n: 512,
            cube_size: 0.25,
            lambda_sep: 0.2,
            truncation_quantile: None,
            target_half_width: 1.0,
            target_cells: 16,
            calibration: vec![(64, 1.0), (216, 1.0), (1000, 1.0), (64, 0.5), (256, 0.5), (1024, 0.5), (2048, 0.25), (4096, 0.25)],
            reference_half_width: 1.0,
            volume_trials: 0,
        }
    }
}

/// Sizes used by `verify`. Shrinking `grid_cells` is the coarse-grid negative control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub grid_cells: usize,
    pub configurations: usize,
    pub random_measures: usize,
    pub sampler_steps: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { grid_cells: 16, configurations: 10, random_measures: 20, sampler_steps: 100_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub d: usize,
    pub potential: Potential,
    pub regimes: RegimeGrid,
    pub target: TargetSpec,
    pub ball: BallSpec,
    pub sampler: SamplerConfig,
    pub solver: SolverConfig,
    pub construction: ConstructionConfig,
    pub verify: VerifyConfig,
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    /// Sweep grid points run concurrently up to this many jobs.
    pub parallelism: usize,
    pub outputs: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            d: 3,
            potential: Potential::quadratic(),
            regimes: RegimeGrid::default(),
            target: TargetSpec::default(),
            ball: BallSpec::Bl { epsilon: 0.5 },
            sampler: SamplerConfig::default(),
            solver: SolverConfig::default(),
            construction: ConstructionConfig::default(),
            verify: VerifyConfig::default(),
            seed: 1,
            parallelism: 1,
            outputs: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    /// Grid points in sweep order: `N` fastest, then `λ`, then `γ`.
    pub fn grid_points(&self) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        for &g in &self.regimes.gamma {
            for &l in &self.regimes.lambda {
                for &n in &self.regimes.n {
                    out.push((n, g, l));
                }
            }
        }
        out
    }

    pub fn params(&self, n: usize, gamma: f64, lambda: f64) -> mesogas_core::error::Result<RegimeParams> {
        RegimeParams::new(self.d, n, gamma, lambda, self.regimes.r)
    }

    /// Rejects mathematically invalid inputs and returns warnings for values
    /// outside the hypothesis ranges of the main theorem.
    pub fn validate(&self) -> Result<Vec<String>, ConfigError> {
        if self.d < 3 {
            return invalid("d must be at least 3");
        }
        if let Potential::Quadratic { center: Some(c) } = &self.potential {
            if c.len() != self.d {
                return invalid("potential centre has the wrong dimension");
            }
        }
        if !(self.regimes.r > 0.0 && self.regimes.r.is_finite()) {
            return invalid("regimes.r must be positive");
        }
        let mut warnings = Vec::new();
        let mut seen = Vec::new();
        for (n, g, l) in self.grid_points() {
            let p = self.params(n, g, l).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            for w in p.hypothesis_warnings() {
                if !seen.contains(&w) {
                    seen.push(w.clone());
                    warnings.push(w);
                }
            }
        }
        match self.target {
            TargetSpec::Equilibrium { scale } | TargetSpec::Thermal { scale } if !(scale >= 0.0 && scale.is_finite()) => {
                return invalid("target scale must be non-negative")
            }
            TargetSpec::Uniform { density } if !(density >= 0.0 && density.is_finite()) => {
                return invalid("target density must be non-negative")
            }
            _ => {}
        }
        match self.ball {
            BallSpec::Bl { epsilon } if !(epsilon > 0.0) => return invalid("ball radius must be positive"),
            BallSpec::Energy { epsilon, k } if !(epsilon > 0.0 && k >= 0.0) => {
                return invalid("energy ball needs ε > 0 and k ≥ 0")
            }
            _ => {}
        }
        if self.sampler.steps <= self.sampler.burn_in || self.sampler.chains == 0 {
            return invalid("sampler needs steps > burn_in and at least one chain");
        }
        if self.solver.grid_cells < 2 || self.solver.rate_cells == 0 || !(self.solver.truncation_factor > 1.0) {
            return invalid("solver needs grid_cells ≥ 2, rate_cells ≥ 1 and truncation_factor > 1");
        }
        if self.verify.grid_cells < 2 {
            return invalid("verify.grid_cells must be at least 2");
        }
        if self.parallelism == 0 {
            return invalid("parallelism must be at least 1");
        }
        Ok(warnings)
    }

    /// Half-width of a box holding the support of `μ_V` with margin.
    pub fn equilibrium_half_width(&self) -> f64 {
        match &self.potential {
            Potential::Quadratic { center } => {
                let shift = center.as_ref().map_or(0.0, |c| c.iter().fold(0.0f64, |m, x| m.max(x.abs())));
                1.25 * support_radius(self.d) + shift
            }
            Potential::Tabulated { grid, .. } => grid.bbox.half_width.iter().cloned().fold(0.0, f64::max),
        }
    }

    pub fn equilibrium_grid(&self, cells: usize) -> mesogas_core::error::Result<Grid> {
        match &self.potential {
            Potential::Tabulated { grid, .. } => Grid::new(grid.bbox.clone(), cells),
            _ => Grid::centered_cube(self.d, self.equilibrium_half_width(), cells),
        }
    }

    /// `μ_V(0)`: closed form for quadratic potentials, numeric otherwise.
    pub fn mu_v0(&self) -> mesogas_core::error::Result<f64> {
        match &self.potential {
            Potential::Quadratic { center } => {
                let dist = center.as_ref().map_or(0.0, |c| c.iter().map(|x| x * x).sum::<f64>().sqrt());
                Ok(if dist < support_radius(self.d) { quadratic_density(self.d) } else { 0.0 })
            }
            _ => {
                let grid = self.equilibrium_grid(self.solver.grid_cells)?;
                Ok(solve_equilibrium(&self.potential, &grid, &self.solver.equilibrium())?.density_at_origin())
            }
        }
    }

    pub fn domain(&self) -> mesogas_core::error::Result<ExteriorDomain> {
        ExteriorDomain::centered(self.d, self.regimes.r, self.solver.rate_cells, self.solver.truncation_factor)
    }

    /// Ball centre on the interior grid of [`Self::domain`] for one grid point.
    pub fn target_measure(&self, mu_v0: f64, params: &RegimeParams) -> mesogas_core::error::Result<GridMeasure> {
        let grid = self.domain()?.interior_grid();
        match self.target {
            TargetSpec::Equilibrium { scale } => GridMeasure::constant(&grid, scale * mu_v0),
            TargetSpec::Uniform { density } => GridMeasure::constant(&grid, density),
            TargetSpec::Thermal { scale } => {
                let blown = blowup(&self.thermal_solution(params)?, params.n, params.lambda)?;
                GridMeasure::from_fn(&grid, false, |x| scale * blown.value_at(x))
            }
        }
    }

    /// Thermal solution on a box wide enough for `μ_β` at `Nβ`.
    pub fn thermal_solution(&self, params: &RegimeParams) -> mesogas_core::error::Result<EquilibriumSolution> {
        let nb = params.n_beta();
        let hw = thermal_half_width(nb, 1.25 * self.equilibrium_half_width());
        let grid = Grid::centered_cube(self.d, hw, self.solver.grid_cells)?;
        solve_thermal(&self.potential, nb, &grid, &self.solver.equilibrium())
    }
}

/// Density of `μ_V` for `V = |x|²`: `ΔV / (2(d-2)|S^{d-1}|) = d/((d-2)|S^{d-1}|)`.
pub fn quadratic_density(d: usize) -> f64 {
    d as f64 / ((d as f64 - 2.0) * sphere_area(d))
}

/// Support radius of `μ_V` for `V = |x|²`: `(d-2)^{1/d}`.
pub fn support_radius(d: usize) -> f64 {
    (d as f64 - 2.0).powf(1.0 / d as f64)
}
