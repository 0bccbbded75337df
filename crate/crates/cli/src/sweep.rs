use std::io::Write;

use mesogas_core::gibbs::{ball_membership, estimate_event_probability, local_empirical_field, Regime, RegimeParams};
use mesogas_core::measures::GridMeasure;
use mesogas_core::rate::{n_rate, phi_rate, t_rate, ExteriorDomain, TCharge};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const COLUMNS: [&str; 12] = [
    "N",
    "gamma",
    "lambda",
    "regime",
    "ball_type",
    "epsilon",
    "k",
    "p_hat",
    "stderr",
    "rate_value",
    "speed_sub",
    "speed_super",
];

/// One grid point. Estimation fields are empty when the row failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub regime: Regime,
    pub ball_type: String,
    pub epsilon: f64,
    pub k: Option<f64>,
    pub p_hat: Option<f64>,
    pub stderr: Option<f64>,
    pub rate_value: Option<f64>,
    pub speed_sub: f64,
    pub speed_super: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowFailure {
    pub row: usize,
    pub message: String,
}

/// Weighted fit of `-log p̂` against one candidate speed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedFit {
    pub speed: String,
    pub exponent: f64,
    /// Proportionality constant `c` in `-log p̂ ≈ c · speed`.
    pub coefficient: f64,
    pub weighted_rss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRegression {
    pub gamma: f64,
    pub lambda: f64,
    pub regime: Regime,
    /// Rows with `0 < p̂ < 1` used in the fit.
    pub rows_used: usize,
    /// Slope of `log(-log p̂)` against `log N`.
    pub fitted_exponent: Option<f64>,
    pub fitted_exponent_stderr: Option<f64>,
    pub candidates: Vec<SpeedFit>,
    /// Candidate whose exponent is closest to the fitted one.
    pub closest: Option<String>,
}

/// Critical rows: `-log p̂ / N^{1-λd} - 𝒯^N_λ(μ)` per `N`, no limit drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalDifference {
    #[serde(rename = "N")]
    pub n: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub difference: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: usize,
    pub failures: Vec<RowFailure>,
    pub regressions: Vec<GroupRegression>,
    pub critical_differences: Vec<CriticalDifference>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summary: SweepSummary,
}

/// The regime's rate functional at the ball centre: `Φ` (subcritical),
/// `𝒩` (supercritical) or `𝒯^N_λ` (critical).
pub fn rate_at_center(
    config: &ExperimentConfig,
    params: &RegimeParams,
    target: &GridMeasure,
    mu_v0: f64,
    domain: &ExteriorDomain,
) -> mesogas_core::error::Result<f64> {
    match params.regime() {
        Regime::Subcritical => Ok(phi_rate(target, mu_v0, domain, &config.solver.rate())?.value),
        Regime::Supercritical => n_rate(target, mu_v0, &domain.interior),
        Regime::Critical => {
            let sol = config.thermal_solution(params)?;
            let t = t_rate(TCharge::Grid(target), params, &sol, mu_v0, domain, &config.solver.t())?;
            Ok(t.calligraphic.unwrap_or(t.report.value))
        }
    }
}

fn run_row(
    config: &ExperimentConfig,
    index: usize,
    (n, gamma, lambda): (usize, f64, f64),
    mu_v0: f64,
) -> (SweepRow, Option<RowFailure>) {
    let ball = config.ball;
    let k = match ball {
        mesogas_core::gibbs::BallSpec::Energy { k, .. } => Some(k),
        _ => None,
    };
    let params = RegimeParams { d: config.d, n, gamma, lambda, r: config.regimes.r };
    let mut row = SweepRow {
        n,
        gamma,
        lambda,
        regime: params.regime(),
        ball_type: ball.type_label().to_string(),
        epsilon: ball.epsilon(),
        k,
        p_hat: None,
        stderr: None,
        rate_value: None,
        speed_sub: params.speed_sub(),
        speed_super: params.speed_super(),
    };
    let result = (|| -> mesogas_core::error::Result<(f64, f64, f64)> {
        params.validate()?;
        let domain = config.domain()?;
        let target = config.target_measure(mu_v0, &params)?;
        let event = |x: &[Vec<f64>]| {
            local_empirical_field(x, &params).and_then(|l| ball_membership(&l, &target, &ball, &params)).unwrap_or(false)
        };
        let seed = config.seed.wrapping_add(index as u64);
        let est = estimate_event_probability(&params, &config.potential, &event, config.sampler.chains, &config.sampler.options(), seed)?;
        let rate = rate_at_center(config, &params, &target, mu_v0, &domain)?;
        Ok((est.p_hat, est.stderr, rate))
    })();
    match result {
        Ok((p, se, rate)) => {
            row.p_hat = Some(p);
            row.stderr = Some(se);
            row.rate_value = Some(rate);
            (row, None)
        }
        Err(e) => (row, Some(RowFailure { row: index, message: e.to_string() })),
    }
}

/// Samples every grid point, estimates the ball probability and regresses
/// `-log p̂` on the candidate speeds. Failed rows are kept with empty fields.
pub fn run_sweep(config: &ExperimentConfig) -> anyhow::Result<SweepResult> {
    let warnings = config.validate()?;
    let mu_v0 = config.mu_v0()?;
    let points = config.grid_points();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(config.parallelism).build()?;
    let results: Vec<(SweepRow, Option<RowFailure>)> = pool.install(|| {
        points.par_iter().enumerate().map(|(i, &p)| run_row(config, i, p, mu_v0)).collect()
    });
    let mut rows = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (row, f) in results {
        rows.push(row);
        failures.extend(f);
    }
    let regressions = regress(&rows, config.d);
    let critical_differences = rows
        .iter()
        .filter(|r| r.regime == Regime::Critical)
        .map(|r| CriticalDifference {
            n: r.n,
            gamma: r.gamma,
            lambda: r.lambda,
            difference: match (r.p_hat, r.rate_value) {
                (Some(p), Some(t)) if p > 0.0 => Some(-p.ln() / r.speed_super - t),
                _ => None,
            },
        })
        .collect();
    let summary = SweepSummary { rows: rows.len(), failures, regressions, critical_differences, warnings };
    Ok(SweepResult { rows, summary })
}

/// Weighted least squares `y = a + b x`; returns `(a, b, se_b)`.
fn wls_line(x: &[f64], y: &[f64], w: &[f64]) -> Option<(f64, f64, f64)> {
    let sw: f64 = w.iter().sum();
    if x.len() < 2 || !(sw > 0.0) {
        return None;
    }
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mx) * (a - mx)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((a, c), b)| b * (a - mx) * (c - my)).sum();
    let slope = sxy / sxx;
    let se = if x.len() > 2 {
        let rss: f64 = x.iter().zip(y).zip(w).map(|((a, c), b)| b * (c - my - slope * (a - mx)).powi(2)).sum();
        (rss / (x.len() - 2) as f64 / sxx).sqrt()
    } else {
        (1.0 / sxx).sqrt()
    };
    Some((my - slope * mx, slope, se))
}

/// Groups rows by `(γ, λ)` and fits each group across `N`. Weights are
/// inverse delta-method variances of the response, with the row standard
/// error (at least the binomial one) for `p̂`.
pub fn regress(rows: &[SweepRow], d: usize) -> Vec<GroupRegression> {
    let mut keys: Vec<(f64, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|&(g, l)| g == r.gamma && l == r.lambda) {
            keys.push((r.gamma, r.lambda));
        }
    }
    let d = d as f64;
    keys.into_iter()
        .map(|(gamma, lambda)| {
            let used: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.gamma == gamma && r.lambda == lambda)
                .filter(|r| matches!((r.p_hat, r.stderr), (Some(p), Some(s)) if p > 0.0 && p < 1.0 && s > 0.0))
                .collect();
            let logn: Vec<f64> = used.iter().map(|r| (r.n as f64).ln()).collect();
            let nlp: Vec<f64> = used.iter().map(|r| -r.p_hat.unwrap().ln()).collect();
            // Var(-log p̂) ≈ (se/p)²
            let var_nlp: Vec<f64> = used.iter().map(|r| (r.stderr.unwrap() / r.p_hat.unwrap()).powi(2)).collect();
            let y: Vec<f64> = nlp.iter().map(|v| v.ln()).collect();
            let w: Vec<f64> = var_nlp.iter().zip(&nlp).map(|(v, t)| t * t / v).collect();
            let fit = wls_line(&logn, &y, &w);
            let candidates: Vec<SpeedFit> = [("sub", 2.0 - (d + 2.0) * lambda), ("super", 1.0 - lambda * d)]
                .iter()
                .map(|&(name, e)| {
                    let s: Vec<f64> = used.iter().map(|r| (r.n as f64).powf(e)).collect();
                    let wt: Vec<f64> = var_nlp.iter().map(|v| 1.0 / v).collect();
                    let sss: f64 = s.iter().zip(&wt).map(|(a, b)| b * a * a).sum();
                    let c = if sss > 0.0 { s.iter().zip(&nlp).zip(&wt).map(|((a, t), b)| b * a * t).sum::<f64>() / sss } else { f64::NAN };
                    let rss = s.iter().zip(&nlp).zip(&wt).map(|((a, t), b)| b * (t - c * a).powi(2)).sum();
                    SpeedFit { speed: name.to_string(), exponent: e, coefficient: c, weighted_rss: rss }
                })
                .collect();
            let closest = fit.map(|(_, b, _)| {
                let best = candidates
                    .iter()
                    .min_by(|a, c| (a.exponent - b).abs().total_cmp(&(c.exponent - b).abs()))
                    .unwrap();
                best.speed.clone()
            });
            GroupRegression {
                gamma,
                lambda,
                regime: mesogas_core::gibbs::classify_regime(gamma, lambda),
                rows_used: used.len(),
                fitted_exponent: fit.map(|f| f.1),
                fitted_exponent_stderr: fit.map(|f| f.2),
                candidates,
                closest,
            }
        })
        .collect()
}

/// CSV with the fixed column set; the header is written even without rows.
pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> anyhow::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(n: usize, p: f64) -> SweepRow {
        let params = RegimeParams { d: 3, n, gamma: 0.3, lambda: 0.05, r: 1.0 };
        SweepRow {
            n,
            gamma: 0.3,
            lambda: 0.05,
            regime: params.regime(),
            ball_type: "bl".into(),
            epsilon: 0.5,
            k: None,
            p_hat: Some(p),
            stderr: Some(0.01),
            rate_value: Some(0.0),
            speed_sub: params.speed_sub(),
            speed_super: params.speed_super(),
        }
    }

    #[test]
    fn regression_recovers_exact_power_law() {
        let rows: Vec<SweepRow> = [16usize, 32, 64].iter().map(|&n| row(n, (-0.1 * (n as f64).powf(0.85)).exp())).collect();
        let g = &regress(&rows, 3)[0];
        assert_eq!(g.rows_used, 3);
        assert!((g.fitted_exponent.unwrap() - 0.85).abs() < 1e-12);
        assert_eq!(g.closest.as_deref(), Some("super"));
        let sup = g.candidates.iter().find(|c| c.speed == "super").unwrap();
        assert!((sup.coefficient - 0.1).abs() < 1e-12 && sup.weighted_rss < 1e-20);
    }

    #[test]
    fn degenerate_rows_are_skipped() {
        let rows = vec![row(16, 0.0), row(32, 1.0), row(64, 0.3)];
        let g = &regress(&rows, 3)[0];
        assert_eq!(g.rows_used, 1);
        assert!(g.fitted_exponent.is_none() && g.closest.is_none());
    }

    #[test]
    fn failed_fields_are_empty_cells() {
        let mut r = row(16, 0.5);
        r.p_hat = None;
        let mut buf = Vec::new();
        write_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let line = text.lines().nth(1).unwrap();
        assert_eq!(line.split(',').nth(7), Some(""));
        assert_eq!(line.split(',').count(), COLUMNS.len());
    }
}
