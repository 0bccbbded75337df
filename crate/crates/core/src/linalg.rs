//! Small dense helpers shared by the solvers.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Euclidean projection of `v` onto `{x ≥ 0, Σ x = mass}`.
pub fn project_simplex(v: &[f64], mass: f64) -> Vec<f64> {
    let mut s: Vec<f64> = v.to_vec();
    s.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &x) in s.iter().enumerate() {
        cum += x;
        let t = (cum - mass) / (i + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Projection onto `{x ≥ 0, Σ x ≤ cap}`.
pub fn project_capped(v: &[f64], cap: f64) -> Vec<f64> {
    let clamped: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
    if clamped.iter().sum::<f64>() <= cap {
        clamped
    } else {
        project_simplex(v, cap)
    }
}

/// Preconditioned conjugate gradients for an SPD operator with a diagonal
/// preconditioner. Returns the solution and the number of iterations.
pub fn pcg(
    apply: &dyn Fn(&[f64]) -> Vec<f64>,
    diag: &[f64],
    rhs: &[f64],
    rel_tol: f64,
    max_iter: usize,
) -> (Vec<f64>, usize) {
    let precond = |r: &[f64]| r.iter().zip(diag).map(|(a, d)| a / d).collect::<Vec<f64>>();
    pcg_with(apply, &precond, rhs, rel_tol, max_iter)
}

/// Conjugate gradients with `precond` approximating the inverse operator.
pub fn pcg_with(
    apply: &dyn Fn(&[f64]) -> Vec<f64>,
    precond: &dyn Fn(&[f64]) -> Vec<f64>,
    rhs: &[f64],
    rel_tol: f64,
    max_iter: usize,
) -> (Vec<f64>, usize) {
    let n = rhs.len();
    let mut x = vec![0.0; n];
    let bnorm = dot(rhs, rhs).sqrt();
    if bnorm == 0.0 {
        return (x, 0);
    }
    let mut r = rhs.to_vec();
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 0..max_iter {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return (x, it);
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= rel_tol * bnorm {
            return (x, it + 1);
        }
        z = precond(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    (x, max_iter)
}

/// Stable `log Σ exp(u)`.
pub fn log_sum_exp(u: &[f64]) -> f64 {
    let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + u.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn simplex_projection_is_feasible_and_optimal(v in proptest::collection::vec(-3.0f64..3.0, 1..20), mass in 0.1f64..5.0) {
            let p = project_simplex(&v, mass);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - mass).abs() < 1e-10);
            // variational inequality: (v - p)·(q - p) ≤ 0 for vertices q
            for k in 0..v.len() {
                let mut q = vec![0.0; v.len()];
                q[k] = mass;
                let s: f64 = (0..v.len()).map(|i| (v[i] - p[i]) * (q[i] - p[i])).sum();
                prop_assert!(s <= 1e-9);
            }
        }

        #[test]
        fn capped_projection_respects_cap(v in proptest::collection::vec(-3.0f64..3.0, 1..20), cap in 0.0f64..5.0) {
            let p = project_capped(&v, cap);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!(p.iter().sum::<f64>() <= cap + 1e-10);
        }
    }

    #[test]
    fn pcg_solves_small_system() {
        let a = [[4.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 2.0]];
        let apply = |x: &[f64]| (0..3).map(|i| (0..3).map(|j| a[i][j] * x[j]).sum()).collect::<Vec<f64>>();
        let (x, _) = pcg(&apply, &[4.0, 3.0, 2.0], &[1.0, 2.0, 3.0], 1e-14, 50);
        let r = apply(&x);
        for (ri, bi) in r.iter().zip([1.0, 2.0, 3.0]) {
            assert!((ri - bi).abs() < 1e-12);
        }
    }
}
