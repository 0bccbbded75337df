use std::sync::OnceLock;

const ORDER: usize = 16;

fn gauss_legendre() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = ORDER;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    let (mut q0, mut q1) = (1.0, x);
                    for k in 2..=n {
                        let q2 = ((2 * k - 1) as f64 * x * q1 - (k - 1) as f64 * q0) / k as f64;
                        q0 = q1;
                        q1 = q2;
                    }
                    let dq = n as f64 * (x * q1 - q0) / (x * x - 1.0);
                    weights[i] = 2.0 / ((1.0 - x * x) * dq * dq);
                    break;
                }
            }
            nodes[i] = x;
        }
        (nodes, weights)
    })
}

fn rule(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let (x, w) = gauss_legendre();
    let (mid, half) = ((a + b) / 2.0, (b - a) / 2.0);
    half * x.iter().zip(w).map(|(xi, wi)| wi * f(mid + half * xi)).sum::<f64>()
}

/// Adaptive bisection with a 16-point Gauss–Legendre rule; `tol` is relative
/// to the magnitude of the running estimate.
pub fn adaptive_gauss(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let whole = rule(f, a, b);
    recurse(f, a, b, whole, tol, 0)
}

fn recurse(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: usize) -> f64 {
    let m = (a + b) / 2.0;
    let l = rule(f, a, m);
    let r = rule(f, m, b);
    let both = l + r;
    if depth >= 40 || (both - whole).abs() <= tol * both.abs().max(1e-300) {
        return both;
    }
    recurse(f, a, m, l, tol, depth + 1) + recurse(f, m, b, r, tol, depth + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_polynomials_and_sine() {
        let v = adaptive_gauss(&|x: f64| x.powi(7), 0.0, 1.0, 1e-15);
        assert!((v - 0.125).abs() < 1e-15);
        let s = adaptive_gauss(&|x: f64| x.sin(), 0.0, std::f64::consts::PI, 1e-15);
        assert!((s - 2.0).abs() < 1e-14);
    }
}
