//! Central finite-difference gradient verification.
//!
//! `grad_check` evaluates a scalar-valued tensor function twice per input
//! coordinate, `(f(x+eps) - f(x-eps)) / 2eps`, and compares against the
//! analytic gradient from one backward pass. The forward-only evaluations
//! never touch the backward code they are checking.

use crate::autodiff::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct CoordFailure {
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub failures: Vec<CoordFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Relative error with the denominator clamped so that near-zero gradient
/// pairs compare absolutely (scaled by 1e3) instead of blowing up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Check `f`'s gradient w.r.t. `x0` at every coordinate.
pub fn grad_check<T, F>(f: F, x0: &Tensor<T>, eps: f64, tol: f64) -> GradCheckReport
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Var,
{
    let coords: Vec<usize> = (0..x0.numel()).collect();
    grad_check_coords(f, x0, eps, tol, &coords)
}

/// Check only a subset of coordinates (for large inputs).
pub fn grad_check_coords<T, F>(
    f: F,
    x0: &Tensor<T>,
    eps: f64,
    tol: f64,
    coords: &[usize],
) -> GradCheckReport
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Var,
{
    // Analytic pass.
    let mut g = Graph::<T>::new();
    let mut x = x0.clone();
    x.requires_grad = true;
    let xv = g.leaf(x, true);
    let loss = f(&mut g, xv);
    assert_eq!(g.value(loss).numel(), 1, "grad_check needs a scalar function");
    g.backward(loss).expect("grad_check backward");
    let analytic: Vec<f64> = g
        .grad(xv)
        .expect("input gradient")
        .iter()
        .map(|v| v.to_f64_())
        .collect();

    let eval = |x: &Tensor<T>| -> f64 {
        let mut g = Graph::<T>::new();
        let xv = g.leaf(x.clone(), false);
        let loss = f(&mut g, xv);
        g.value(loss).item().to_f64_()
    };

    let mut failures = Vec::new();
    let mut max_rel = 0.0f64;
    for &c in coords {
        let orig = x0.data()[c].to_f64_();
        let mut xp = x0.clone();
        xp.data_mut()[c] = T::from_f64(orig + eps);
        let mut xm = x0.clone();
        xm.data_mut()[c] = T::from_f64(orig - eps);
        let numeric = (eval(&xp) - eval(&xm)) / (2.0 * eps);
        let e = rel_err(analytic[c], numeric);
        if e > max_rel {
            max_rel = e;
        }
        if e > tol {
            failures.push(CoordFailure {
                coord: c,
                analytic: analytic[c],
                numeric,
                rel_err: e,
            });
        }
    }
    GradCheckReport {
        checked: coords.len(),
        max_rel_err: max_rel,
        tol,
        failures,
    }
}

/// FD settings used by the op-level suite: 64-bit, eps 1e-5, rel-tol 1e-4.
pub const SUITE_EPS: f64 = 1e-5;
pub const SUITE_TOL: f64 = 1e-4;

/// Run the finite-difference suite over every differentiable op kernel on
/// random inputs, steering clear of non-smooth points (relu kinks, pool
/// ties) by nudging inputs. Returns `(name, report)` pairs.
pub fn run_op_suite(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    use crate::autodiff::PoolMode;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut randn = |shape: &[usize]| -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
    };
    // Keep magnitudes away from relu/max kinks: |x| >= 0.05.
    let away_from_kinks = |t: Tensor<f64>| -> Tensor<f64> {
        t.map(|v| if v.abs() < 0.05 { v + 0.1 * v.signum() + 0.1 } else { v })
    };

    let mut out: Vec<(&'static str, GradCheckReport)> = Vec::new();

    let x = randn(&[3, 4]);
    let b = randn(&[3, 4]).map(|v| if v.abs() < 0.3 { v + 0.5 * v.signum() + 0.3 } else { v });
    {
        let bc = b.clone();
        out.push((
            "add",
            grad_check(
                move |g, x| {
                    let bv = g.constant(bc.clone());
                    let y = g.add(x, bv).unwrap();
                    let y = g.mul(y, y).unwrap();
                    g.sum_all(y)
                },
                &x,
                SUITE_EPS,
                SUITE_TOL,
            ),
        ));
    }
    {
        let bc = b.clone();
        out.push((
            "sub_mul",
            grad_check(
                move |g, x| {
                    let bv = g.constant(bc.clone());
                    let d = g.sub(x, bv).unwrap();
                    let p = g.mul(d, bv).unwrap();
                    let p = g.tanh(p);
                    g.sum_all(p)
                },
                &x,
                SUITE_EPS,
                SUITE_TOL,
            ),
        ));
    }
    {
        let bc = b.clone();
        out.push((
            "div",
            grad_check(
                move |g, x| {
                    let bv = g.constant(bc.clone());
                    let q = g.div(x, bv).unwrap();
                    g.mean_all(q)
                },
                &x,
                SUITE_EPS,
                SUITE_TOL,
            ),
        ));
    }
    out.push((
        "relu",
        grad_check(
            |g, x| {
                let y = g.relu(x);
                let y = g.mul(y, y).unwrap();
                g.sum_all(y)
            },
            &away_from_kinks(randn(&[4, 5])),
            SUITE_EPS,
            SUITE_TOL,
        ),
    ));
    out.push((
        "sigmoid",
        grad_check(
            |g, x| {
                let y = g.sigmoid(x);
                g.sum_all(y)
            },
            &randn(&[3, 3]),
            SUITE_EPS,
            SUITE_TOL,
        ),
    ));
    out.push((
        "tanh",
        grad_check(
            |g, x| {
                let y = g.tanh(x);
                let y = g.exp(y);
                g.sum_all(y)
            },
            &randn(&[3, 3]),
            SUITE_EPS,
            SUITE_TOL,
        ),
    ));
    out.push((
        "exp_log",
        grad_check(
            |g, x| {
                let y = g.mul(x, x).unwrap();
                let y = g.add_const(y, 0.5);
                let y = g.log(y);
                g.sum_all(y)
            },
            &randn(&[3, 3]),
            SUITE_EPS,
            SUITE_TOL,
        ),
    ));
    {
        let w = randn(&[4, 3]);
        out.push((
            "matmul",
            grad_check(
                move |g, x| {
                    let wv = g.constant(w.clone());
                    let y = g.matmul(x, wv).unwrap();
                    let y = g.tanh(y);
                    g.sum_all(y)
                },
                &randn(&[3, 4]),
                SUITE_EPS,
                SUITE_TOL,
            ),
        ));
    }
    out.push((
        "softmax",
        grad_check(
            |g, x| {
                let s = g.softmax(x, 1).unwrap();
                let s2 = g.mul(s, s).unwrap();
                g.sum_all(s2)
            },
            &randn(&[3, 5]),
            SUITE_EPS,
            1e-5,
        ),
    ));
    {
        let gamma = randn(&[6]).map(|v| v * 0.3 + 1.0);
        let beta = randn(&[6]).map(|v| v * 0.3);
        out.push((
            "layer_norm",
            grad_check(
                move |g, x| {
                    let gm = g.constant(gamma.clone());
                    let bt = g.constant(beta.clone());
                    let y = g.layer_norm(x, gm, bt, 1e-5).unwrap();
                    let y = g.mul(y, y).unwrap();
                    g.sum_all(y)
                },
                &randn(&[4, 6]),
                SUITE_EPS,
                1e-5,
            ),
        ));
    }
    {
        let x = randn(&[2, 5, 5]);
        out.push((
            "conv2d_w",
            grad_check(
                move |g, w| {
                    let xv = g.constant(x.clone());
                    let y = g.conv2d(xv, w, 1, 1).unwrap();
                    let y = g.tanh(y);
                    g.sum_all(y)
                },
                &randn(&[3, 2, 3, 3]),
                SUITE_EPS,
                SUITE_TOL,
            ),
        ));
    }
    {
        let w = randn(&[3, 2, 3, 3]);
        out.push((
            "conv2d_x",
            grad_check(
                move |g, x| {
                    let wv = g.constant(w.clone());
                    let y = g.conv2d(x, wv, 2, 1).unwrap();
                    let y = g.sigmoid(y);
                    g.sum_all(y)
                },
                &randn(&[2, 5, 5]),
                SUITE_EPS,
                SUITE_TOL,
            ),
        ));
    }
    out.push((
        "max_pool",
        grad_check(
            |g, x| {
                let y = g.pool_axis(x, PoolMode::Max, 1, 2).unwrap();
                let y = g.mul(y, y).unwrap();
                g.sum_all(y)
            },
            // Spread values apart so +-eps cannot flip an argmax.
            &Tensor::from_fn(&[3, 6], |i| (i as f64 * 0.777).sin() * 3.0 + i as f64 * 0.01),
            SUITE_EPS,
            SUITE_TOL,
        ),
    ));
    out.push((
        "avg_pool",
        grad_check(
            |g, x| {
                let y = g.pool_axis(x, PoolMode::Avg, 0, 3).unwrap();
                let y = g.exp(y);
                g.sum_all(y)
            },
            &randn(&[6, 2]),
            SUITE_EPS,
            SUITE_TOL,
        ),
    ));
    out.push((
        "upsample2d",
        grad_check(
            |g, x| {
                let y = g.upsample2d(x, 2).unwrap();
                let y = g.mul(y, y).unwrap();
                g.mean_all(y)
            },
            &randn(&[2, 2, 3]),
            SUITE_EPS,
            SUITE_TOL,
        ),
    ));
    out.push((
        "upsample2d_bilinear",
        grad_check(
            |g, x| {
                let y = g.upsample2d_bilinear(x, 4).unwrap();
                let y = g.mul(y, y).unwrap();
                g.sum_all(y)
            },
            &randn(&[2, 3, 2]),
            SUITE_EPS,
            SUITE_TOL,
        ),
    ));
    out.push((
        "concat_slice_permute",
        grad_check(
            |g, x| {
                let p = g.permute(x, &[1, 0]).unwrap();
                let c = g.concat(&[p, p], 1).unwrap();
                let s = g.slice(c, 1, 1, 3).unwrap();
                let s = g.tanh(s);
                g.sum_all(s)
            },
            &randn(&[3, 4]),
            SUITE_EPS,
            SUITE_TOL,
        ),
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let a = Tensor::<f64>::from_fn(&[5], |i| 0.5 + i as f64);
        let ac = a.clone();
        let report = grad_check(
            move |g, x| {
                let av = g.constant(ac.clone());
                let p = g.mul(x, av).unwrap();
                g.sum_all(p)
            },
            &Tensor::from_fn(&[5], |i| 1.0 - 0.3 * i as f64),
            1e-5,
            1e-9,
        );
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn sigmoid_at_zero_quarter_gradient() {
        let x0 = Tensor::<f64>::zeros(&[4]);
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(x0.clone(), true);
        let s = g.sigmoid(xv);
        let l = g.sum_all(s);
        g.backward(l).unwrap();
        for &gv in g.grad(xv).unwrap() {
            assert!((gv - 0.25).abs() < 1e-15);
        }
        let report = grad_check(
            |g, x| {
                let s = g.sigmoid(x);
                g.sum_all(s)
            },
            &x0,
            1e-5,
            1e-6,
        );
        assert!(report.passed());
    }

    #[test]
    fn op_suite_passes() {
        for (name, report) in run_op_suite(0xC0FFEE) {
            assert!(
                report.passed(),
                "{name}: max rel err {} over {} coords, first failure {:?}",
                report.max_rel_err,
                report.checked,
                report.failures.first()
            );
        }
    }
}
