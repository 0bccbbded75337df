//! Hamiltonian, thermal splitting, Metropolis sampling and local observables.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{zeta_at, EquilibriumSolution, Potential};
use crate::error::{invalid, Error, Result};
use crate::kernel::{g, pair_sum, potential_at, GridOperator, MixedMeasure};
use crate::measures::{bl_distance, dist, AtomicMeasure, AxisBox, GridMeasure};

/// Tolerance used when comparing `γ` with `γ* = 1 - 2λ`.
pub const CRITICAL_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Subcritical,
    Critical,
    Supercritical,
}

impl Regime {
    pub fn label(&self) -> &'static str {
        match self {
            Regime::Subcritical => "subcritical",
            Regime::Critical => "critical",
            Regime::Supercritical => "supercritical",
        }
    }
}

/// Subcritical iff `γ > 1 - 2λ`, supercritical iff `γ < 1 - 2λ`.
pub fn classify_regime(gamma: f64, lambda: f64) -> Regime {
    let diff = gamma - (1.0 - 2.0 * lambda);
    if diff.abs() <= CRITICAL_TOL {
        Regime::Critical
    } else if diff > 0.0 {
        Regime::Subcritical
    } else {
        Regime::Supercritical
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeParams {
    pub d: usize,
    pub n: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub r: f64,
}

impl RegimeParams {
    pub fn new(d: usize, n: usize, gamma: f64, lambda: f64, r: f64) -> Result<Self> {
        let p = RegimeParams { d, n, gamma, lambda, r };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 3 {
            return invalid("dimension must be at least 3");
        }
        if self.n == 0 {
            return invalid("N must be positive");
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return invalid("γ must be positive");
        }
        if !(0.0..1.0 / self.d as f64).contains(&self.lambda) {
            return invalid(format!("λ must lie in [0, 1/{})", self.d));
        }
        if !(self.r > 0.0) || !self.r.is_finite() {
            return invalid("R must be positive");
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        (self.n as f64).powf(-self.gamma)
    }

    pub fn n_beta(&self) -> f64 {
        self.n as f64 * self.beta()
    }

    pub fn gamma_star(&self) -> f64 {
        1.0 - 2.0 * self.lambda
    }

    pub fn regime(&self) -> Regime {
        classify_regime(self.gamma, self.lambda)
    }

    /// `N^{2-(d+2)λ}`.
    pub fn speed_sub(&self) -> f64 {
        (self.n as f64).powf(2.0 - (self.d as f64 + 2.0) * self.lambda)
    }

    /// `N^{1-λd}`.
    pub fn speed_super(&self) -> f64 {
        (self.n as f64).powf(1.0 - self.lambda * self.d as f64)
    }

    /// Messages for values outside the ranges assumed by the main theorem.
    pub fn hypothesis_warnings(&self) -> Vec<String> {
        let d = self.d as f64;
        let mut w = Vec::new();
        if !(self.gamma > (d - 2.0) / d && self.gamma < 1.0) {
            w.push(format!("γ = {} outside ((d-2)/d, 1) = ({:.4}, 1)", self.gamma, (d - 2.0) / d));
        }
        if self.lambda == 0.0 {
            w.push("λ = 0 is the macroscopic scale".to_string());
        }
        if self.lambda >= 1.0 / (d * (d + 2.0)) {
            w.push(format!("λ = {} not below 1/(d(d+2)) = {:.4}", self.lambda, 1.0 / (d * (d + 2.0))));
        }
        w
    }
}

/// `ℋ_N(X) = Σ_{i≠j} g(x_i - x_j) + N Σ_i V(x_i)`; `+∞` for coincident points.
pub fn hamiltonian(x: &[Vec<f64>], v: &Potential, n: usize) -> f64 {
    let d = match x.first() {
        Some(p) => p.len(),
        None => return 0.0,
    };
    let pairs = match pair_sum(d, x, None) {
        Ok(s) => s,
        Err(_) => return f64::INFINITY,
    };
    pairs + n as f64 * x.iter().map(|p| v.eval(p)).sum::<f64>()
}

/// How `ζ_β` is evaluated at particle positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZetaRule {
    /// `2h^{μ_β} + V - k`, consistent with the fluctuation cross term.
    ElExtension,
    /// `-(1/Nβ) log μ_β` of the cell containing the point.
    CellLookup,
}

/// The three terms of the thermal splitting of `ℋ_N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splitting {
    /// `N² ℰ_β(μ_β)`.
    pub main: f64,
    /// `N Σ ζ_β(x_i)`.
    pub zeta_sum: f64,
    /// `N² ℰ^≠(emp_N - μ_β)`.
    pub fluct: f64,
}

impl Splitting {
    pub fn total(&self) -> f64 {
        self.main + self.zeta_sum + self.fluct
    }
}

/// Precomputed pieces of the splitting around one thermal solution.
pub struct SplittingContext<'a> {
    sol: &'a EquilibriumSolution,
    v: &'a Potential,
    n: usize,
    beta: f64,
    e_beta: f64,
    grid_energy: f64,
    log_density: Vec<f64>,
}

impl<'a> SplittingContext<'a> {
    pub fn new(sol: &'a EquilibriumSolution, v: &'a Potential, n: usize, beta: f64) -> Result<Self> {
        if n == 0 || !(beta > 0.0) {
            return invalid("N and β must be positive");
        }
        let m = sol.measure.cell_masses();
        let log_density = sol.log_density();
        let km = GridOperator::shared(&sol.measure.grid).apply(&m);
        let grid_energy = crate::linalg::dot(&m, &km);
        let ent: f64 = m.iter().zip(&log_density).map(|(a, l)| if *a > 0.0 { a * l } else { 0.0 }).sum();
        let vv = v.on_grid(&sol.measure.grid);
        let e_beta = grid_energy + crate::linalg::dot(&m, &vv) + ent / (n as f64 * beta);
        Ok(SplittingContext { sol, v, n, beta, e_beta, grid_energy, log_density })
    }

    /// `ℰ_β(μ_β)` in the discretization that defines `k`.
    pub fn e_beta(&self) -> f64 {
        self.e_beta
    }

    fn zeta_point(&self, x: &[f64], h: f64, rule: ZetaRule) -> Result<f64> {
        match rule {
            ZetaRule::ElExtension => Ok(2.0 * h + self.v.eval(x) - self.sol.k),
            ZetaRule::CellLookup => {
                let i = self.sol.measure.grid.locate(x).ok_or(Error::OutsideGrid)?;
                Ok(-self.log_density[i] / (self.n as f64 * self.beta))
            }
        }
    }

    pub fn decompose(&self, x: &[Vec<f64>], rule: ZetaRule) -> Result<Splitting> {
        let n = self.n as f64;
        let d = self.sol.measure.dim();
        if x.iter().any(|p| p.len() != d) {
            return Err(Error::Dimension { expected: d, got: x.iter().map(|p| p.len()).find(|&l| l != d).unwrap_or(d) });
        }
        let h: Vec<f64> = x.par_iter().map(|p| potential_at(&self.sol.measure, p)).collect();
        let mut zeta_sum = 0.0;
        for (p, &hp) in x.iter().zip(&h) {
            zeta_sum += self.zeta_point(p, hp, rule)?;
        }
        let pairs = pair_sum(d, x, None)?;
        // N² [ℰ(μ) - (2/N) Σ h(x_i) + (1/N²) Σ_{i≠j} g]
        let fluct = n * n * self.grid_energy - 2.0 * n * h.iter().sum::<f64>() + pairs;
        Ok(Splitting { main: n * n * self.e_beta, zeta_sum: n * zeta_sum, fluct })
    }

    /// Both sides of `-βℋ_N + N²βℰ_β(μ_β) = -βN² ℰ^≠(emp_N - μ_β) + Σ log μ_β(x_i)`.
    pub fn next_order(&self, x: &[Vec<f64>]) -> Result<(f64, f64)> {
        let s = self.decompose(x, ZetaRule::ElExtension)?;
        let nb = self.n as f64 * self.beta;
        let lhs = -self.beta * hamiltonian(x, self.v, self.n) + self.beta * s.main;
        let log_mu: f64 = x.iter().map(|p| -nb * zeta_at(self.sol, self.v, p)).sum();
        Ok((lhs, -self.beta * s.fluct + log_mu))
    }
}

/// Splitting of `ℋ_N(X)` around `μ_β` with the Euler–Lagrange extension of `ζ_β`.
pub fn splitting_decompose(
    x: &[Vec<f64>],
    sol: &EquilibriumSolution,
    v: &Potential,
    n: usize,
    beta: f64,
) -> Result<Splitting> {
    SplittingContext::new(sol, v, n, beta)?.decompose(x, ZetaRule::ElExtension)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub steps: usize,
    pub burn_in: usize,
    /// Steps between recorded samples; `None` means one sweep (`N` steps).
    pub thin: Option<usize>,
    pub initial_scale: f64,
    pub target_acceptance: f64,
    /// Recompute `ℋ` from scratch every this many steps.
    pub refresh: usize,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions { steps: 100_000, burn_in: 10_000, thin: None, initial_scale: 0.5, target_acceptance: 0.35, refresh: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub current: Vec<Vec<f64>>,
    pub hamiltonian: f64,
    pub steps: usize,
    pub accepted: usize,
    pub stream: u64,
    pub scale: f64,
}

impl ChainState {
    pub fn acceptance_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.accepted as f64 / self.steps as f64
        }
    }
}

/// One retained sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub step: usize,
    pub hamiltonian: f64,
    pub acceptance_rate: f64,
    pub points: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainRun {
    pub state: ChainState,
    pub samples: Vec<Sample>,
}

/// Generator for chain `stream` of master seed `seed`.
pub fn chain_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Change of `ℋ_N` when particle `i` moves to `y`.
fn move_delta(x: &[Vec<f64>], i: usize, y: &[f64], v: &Potential, n: usize) -> f64 {
    let d = y.len();
    let mut s = 0.0;
    for (j, p) in x.iter().enumerate() {
        if j == i {
            continue;
        }
        let r_new = dist(y, p);
        if r_new == 0.0 {
            return f64::INFINITY;
        }
        s += g(d, r_new) - g(d, dist(&x[i], p));
    }
    2.0 * s + n as f64 * (v.eval(y) - v.eval(&x[i]))
}

/// Initial configuration: independent uniform points in the unit ball.
fn initial_points(d: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let p: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            if p.iter().map(|c| c * c).sum::<f64>() < 1.0 {
                break p;
            }
        })
        .collect()
}

/// Metropolis chain for `exp(-βℋ_N)` with single-particle Gaussian moves.
///
/// The proposal scale is adapted toward `target_acceptance` during burn-in
/// and frozen afterwards. `on_sample` sees every retained configuration.
pub fn run_chain(
    params: &RegimeParams,
    v: &Potential,
    opts: &SamplerOptions,
    seed: u64,
    stream: u64,
    mut on_sample: impl FnMut(&ChainState),
) -> Result<ChainState> {
    params.validate()?;
    if opts.steps <= opts.burn_in {
        return invalid("steps must exceed burn_in");
    }
    if !(opts.initial_scale > 0.0) {
        return invalid("proposal scale must be positive");
    }
    let (d, n) = (params.d, params.n);
    let beta = params.beta();
    let thin = opts.thin.unwrap_or(n).max(1);
    let refresh = opts.refresh.max(1);
    let mut rng = chain_rng(seed, stream);
    let current = initial_points(d, n, &mut rng);
    let mut st = ChainState {
        hamiltonian: hamiltonian(&current, v, n),
        current,
        steps: 0,
        accepted: 0,
        stream,
        scale: opts.initial_scale,
    };
    let mut log_scale = opts.initial_scale.ln();
    let mut y = vec![0.0; d];
    for step in 1..=opts.steps {
        let i = if n == 1 { 0 } else { rng.random_range(0..n) };
        for (a, ya) in y.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *ya = st.current[i][a] + st.scale * z;
        }
        let delta = move_delta(&st.current, i, &y, v, n);
        let u: f64 = rng.random();
        let accept = delta.is_finite() && (delta <= 0.0 || u < (-beta * delta).exp());
        if accept {
            st.current[i].copy_from_slice(&y);
            st.hamiltonian += delta;
        }
        if step <= opts.burn_in {
            let rate = 1.0 / (1.0 + step as f64 / n as f64).powf(0.6);
            let hit = if accept { 1.0 } else { 0.0 };
            log_scale = (log_scale + rate * (hit - opts.target_acceptance)).clamp(-20.0, 10.0);
            st.scale = log_scale.exp();
            if step == opts.burn_in {
                st.steps = 0;
                st.accepted = 0;
                continue;
            }
        } else {
            st.steps += 1;
            st.accepted += accept as usize;
        }
        if step % refresh == 0 {
            st.hamiltonian = hamiltonian(&st.current, v, n);
        }
        if step > opts.burn_in && (step - opts.burn_in) % thin == 0 {
            on_sample(&st);
        }
    }
    st.hamiltonian = hamiltonian(&st.current, v, n);
    Ok(st)
}

/// Runs one chain and keeps every retained sample. `steps`, `accepted` and
/// the acceptance rate count post burn-in moves only.
pub fn gibbs_sample(params: &RegimeParams, v: &Potential, opts: &SamplerOptions, seed: u64, stream: u64) -> Result<ChainRun> {
    let burn = opts.burn_in;
    let mut samples = Vec::new();
    let state = run_chain(params, v, opts, seed, stream, |st| {
        samples.push(Sample {
            step: burn + st.steps,
            hamiltonian: st.hamiltonian,
            acceptance_rate: st.acceptance_rate(),
            points: st.current.clone(),
        })
    })?;
    Ok(ChainRun { state, samples })
}

/// `lemp_N^λ`: atoms `N^λ x_i` inside `□_R` with weight `N^{λd-1}`.
pub fn local_empirical_field(x: &[Vec<f64>], params: &RegimeParams) -> Result<AtomicMeasure> {
    let scale = (params.n as f64).powf(params.lambda);
    let weight = (params.n as f64).powf(params.lambda * params.d as f64 - 1.0);
    let b = AxisBox::centered(params.d, params.r)?;
    let points = x
        .iter()
        .map(|p| p.iter().map(|c| c * scale).collect::<Vec<f64>>())
        .filter(|p| b.contains(p))
        .collect();
    AtomicMeasure::new(points, weight)
}

/// Neighbourhood used to define events around a target measure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BallSpec {
    /// `{ν : ‖ν - μ‖_BL < ε}`.
    Bl { epsilon: f64 },
    /// `B̄^k(μ, ε)`: `|ℰ^≠(μ - ν)| < ε` and `supp ν ⊂ □_{R - k/N^{1/d}}`.
    Energy { epsilon: f64, k: f64 },
}

impl BallSpec {
    pub fn epsilon(&self) -> f64 {
        match *self {
            BallSpec::Bl { epsilon } | BallSpec::Energy { epsilon, .. } => epsilon,
        }
    }

    pub fn type_label(&self) -> &'static str {
        match self {
            BallSpec::Bl { .. } => "bl",
            BallSpec::Energy { .. } => "energy",
        }
    }
}

/// Membership of an atomic measure in a ball around a grid measure.
pub fn ball_membership(nu: &AtomicMeasure, mu: &GridMeasure, ball: &BallSpec, params: &RegimeParams) -> Result<bool> {
    match *ball {
        BallSpec::Bl { epsilon } => {
            // ‖ν - μ‖_BL ≥ |ν(R^d) - μ(R^d)| (test function 1)
            if (nu.mass() - mu.mass()).abs() >= epsilon {
                return Ok(false);
            }
            Ok(bl_distance(nu, mu)? < epsilon)
        }
        BallSpec::Energy { epsilon, k } => {
            let inner = params.r - k / (params.n as f64).powf(1.0 / params.d as f64);
            if inner <= 0.0 {
                return Ok(nu.is_empty() && energy_gap(nu, mu)?.abs() < epsilon);
            }
            let b = AxisBox::centered(params.d, inner)?;
            if nu.points.iter().any(|p| !b.contains(p)) {
                return Ok(false);
            }
            Ok(energy_gap(nu, mu)?.abs() < epsilon)
        }
    }
}

/// `ℰ^≠(ν - μ)` for atomic `ν` and grid `μ`.
pub fn energy_gap(nu: &AtomicMeasure, mu: &GridMeasure) -> Result<f64> {
    MixedMeasure::atoms_minus_grid(nu, mu).energy_offdiag()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventEstimate {
    pub p_hat: f64,
    /// Larger of the binomial and the between-chain standard errors.
    pub stderr: f64,
    /// One-sided 95% upper bound; `1 - 0.05^{1/n}` when no sample hits.
    pub upper_bound: f64,
    pub samples: usize,
    pub chains: usize,
}

/// Fraction of retained samples, over `chains` independent streams, for which
/// `event` holds.
pub fn estimate_event_probability(
    params: &RegimeParams,
    v: &Potential,
    event: &(dyn Fn(&[Vec<f64>]) -> bool + Sync),
    chains: usize,
    opts: &SamplerOptions,
    seed: u64,
) -> Result<EventEstimate> {
    if chains == 0 {
        return invalid("at least one chain is required");
    }
    let counts: Vec<Result<(usize, usize)>> = (0..chains as u64)
        .into_par_iter()
        .map(|c| {
            let (mut hits, mut total) = (0usize, 0usize);
            run_chain(params, v, opts, seed, c, |st| {
                total += 1;
                hits += event(&st.current) as usize;
            })?;
            Ok((hits, total))
        })
        .collect();
    let mut per_chain = Vec::with_capacity(chains);
    for c in counts {
        per_chain.push(c?);
    }
    let hits: usize = per_chain.iter().map(|c| c.0).sum();
    let total: usize = per_chain.iter().map(|c| c.1).sum();
    if total == 0 {
        return invalid("no samples retained");
    }
    let p = hits as f64 / total as f64;
    let mut se = (p * (1.0 - p) / total as f64).sqrt();
    if chains > 1 {
        let means: Vec<f64> = per_chain.iter().map(|&(h, t)| h as f64 / t as f64).collect();
        let mean = means.iter().sum::<f64>() / chains as f64;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (chains - 1) as f64;
        se = se.max((var / chains as f64).sqrt());
    }
    let upper = if hits == 0 { 1.0 - 0.05f64.powf(1.0 / total as f64) } else { (p + 1.645 * se).min(1.0) };
    Ok(EventEstimate { p_hat: p, stderr: se, upper_bound: upper, samples: total, chains })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regimes() {
        assert_eq!(classify_regime(0.95, 0.05), Regime::Subcritical);
        assert_eq!(classify_regime(0.9, 0.05), Regime::Critical);
        assert_eq!(classify_regime(0.5, 0.05), Regime::Supercritical);
        let p = RegimeParams::new(3, 64, 0.5, 0.05, 1.0).unwrap();
        assert!((p.beta() - 0.125).abs() < 1e-15);
        assert!((p.speed_super() - 64f64.powf(0.85)).abs() < 1e-9);
        assert!(RegimeParams::new(3, 64, 0.5, 0.4, 1.0).is_err());
        assert!(RegimeParams::new(3, 64, 0.0, 0.1, 1.0).is_err());
        assert!(p.hypothesis_warnings().is_empty());
        let q = RegimeParams::new(3, 64, 0.3, 0.1, 1.0).unwrap();
        assert_eq!(q.hypothesis_warnings().len(), 2);
    }

    #[test]
    fn two_particle_hamiltonian() {
        let v = Potential::quadratic();
        let x = vec![vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]];
        assert_eq!(hamiltonian(&x, &v, 2), 4.0);
        assert_eq!(hamiltonian(&x[..1], &v, 1), 0.0);
        let y = vec![vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]];
        assert_eq!(hamiltonian(&y, &v, 2), f64::INFINITY);
    }

    #[test]
    fn move_delta_matches_recomputation() {
        let v = Potential::quadratic();
        let mut rng = chain_rng(3, 0);
        let x = initial_points(3, 7, &mut rng);
        let y = vec![0.1, -0.2, 0.3];
        let before = hamiltonian(&x, &v, 7);
        let mut moved = x.clone();
        moved[4] = y.clone();
        let after = hamiltonian(&moved, &v, 7);
        assert!((move_delta(&x, 4, &y, &v, 7) - (after - before)).abs() < 1e-10);
    }

    #[test]
    fn lemp_weight_and_support() {
        let p = RegimeParams::new(3, 8, 0.9, 1.0 / 9.0, 1.0).unwrap();
        let x = vec![vec![0.1, 0.0, 0.0], vec![0.9, 0.0, 0.0], vec![0.0, 0.3, 0.1]];
        let l = local_empirical_field(&x, &p).unwrap();
        // N^λ = 8^{1/9}; 0.9·8^{1/9} ≈ 1.13 leaves the box
        assert_eq!(l.len(), 2);
        assert!((l.weight - 8f64.powf(1.0 / 3.0 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn chain_is_deterministic() {
        let p = RegimeParams::new(3, 4, 0.9, 0.05, 1.0).unwrap();
        let v = Potential::quadratic();
        let opts = SamplerOptions { steps: 2000, burn_in: 500, ..Default::default() };
        let a = gibbs_sample(&p, &v, &opts, 11, 2).unwrap();
        let b = gibbs_sample(&p, &v, &opts, 11, 2).unwrap();
        assert_eq!(a, b);
        let c = gibbs_sample(&p, &v, &opts, 11, 3).unwrap();
        assert_ne!(a.state.current, c.state.current);
        assert!((a.state.hamiltonian - hamiltonian(&a.state.current, &v, 4)).abs() < 1e-8 * a.state.hamiltonian.abs());
    }
}
