//! Matrix-free Krylov solvers on flat vectors with a caller-supplied inner
//! product.

use crate::error::{Error, Result};

pub type Inner<'a> = &'a dyn Fn(&[f64], &[f64]) -> f64;

#[derive(Clone, Debug)]
pub struct KrylovOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Relative residual `‖b − Ax‖/‖b‖` after each iteration, starting with
    /// the initial guess.
    pub residual_history: Vec<f64>,
    pub converged: bool,
    /// Set when a breakdown-size Hessenberg entry or a tiny CG curvature
    /// was met.
    pub near_breakdown: bool,
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Conjugate gradients for a self-adjoint positive semidefinite operator.
///
/// Stops when the relative residual reaches `tol`; running out of
/// iterations is reported through `converged = false`, not as an error.
pub fn conjugate_gradient(
    apply: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    inner: Inner<'_>,
    tol: f64,
    max_iter: usize,
) -> Result<KrylovOutcome> {
    let n = b.len();
    let bnorm = inner(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(KrylovOutcome {
            x,
            iterations: 0,
            residual_history: vec![0.0],
            converged: true,
            near_breakdown: false,
        });
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = inner(&r, &r);
    let mut history = vec![rr.sqrt() / bnorm];
    let mut near_breakdown = false;
    let mut iterations = 0;
    while iterations < max_iter && *history.last().unwrap() > tol {
        let ap = apply(&p)?;
        let pap = inner(&p, &ap);
        if !(pap > 1e-300) {
            near_breakdown = true;
            break;
        }
        let alpha = rr / pap;
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &ap);
        let rr_new = inner(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        iterations += 1;
        history.push(rr.sqrt() / bnorm);
    }
    let converged = *history.last().unwrap() <= tol;
    Ok(KrylovOutcome {
        x,
        iterations,
        residual_history: history,
        converged,
        near_breakdown,
    })
}

/// Restarted GMRES with modified Gram–Schmidt and Givens rotations.
pub fn gmres(
    apply: &mut dyn FnMut(&[f64]) -> Result<Vec<f64>>,
    b: &[f64],
    inner: Inner<'_>,
    restart: usize,
    tol: f64,
    max_iter: usize,
) -> Result<KrylovOutcome> {
    let n = b.len();
    let restart = restart.max(1);
    let bnorm = inner(b, b).sqrt();
    let mut x = vec![0.0; n];
    let mut history = vec![1.0];
    let mut near_breakdown = false;
    if bnorm == 0.0 {
        return Ok(KrylovOutcome {
            x,
            iterations: 0,
            residual_history: vec![0.0],
            converged: true,
            near_breakdown,
        });
    }
    let mut iterations = 0;
    let mut stalled_cycles = 0;
    while iterations < max_iter {
        let ax = apply(&x)?;
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let beta = inner(&r, &r).sqrt();
        let cycle_start = beta / bnorm;
        if cycle_start <= tol {
            *history.last_mut().unwrap() = cycle_start;
            break;
        }
        r.iter_mut().for_each(|v| *v /= beta);
        let mut basis = vec![r];
        let mut h = vec![vec![0.0; restart]; restart + 1];
        let mut cs = vec![0.0; restart];
        let mut sn = vec![0.0; restart];
        let mut g = vec![0.0; restart + 1];
        g[0] = beta;
        let mut j = 0;
        while j < restart && iterations < max_iter {
            let mut w = apply(&basis[j])?;
            let wnorm0 = inner(&w, &w).sqrt();
            for (i, v) in basis.iter().enumerate() {
                let hij = inner(&w, v);
                h[i][j] = hij;
                axpy(&mut w, -hij, v);
            }
            let hn = inner(&w, &w).sqrt();
            h[j + 1][j] = hn;
            if hn <= 1e-12 * wnorm0.max(f64::MIN_POSITIVE) {
                near_breakdown = true;
            }
            for i in 0..j {
                let t = cs[i] * h[i][j] + sn[i] * h[i + 1][j];
                h[i + 1][j] = -sn[i] * h[i][j] + cs[i] * h[i + 1][j];
                h[i][j] = t;
            }
            let d = h[j][j].hypot(h[j + 1][j]);
            if d == 0.0 {
                near_breakdown = true;
                break;
            }
            cs[j] = h[j][j] / d;
            sn[j] = h[j + 1][j] / d;
            h[j][j] = d;
            h[j + 1][j] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            iterations += 1;
            j += 1;
            history.push(g[j].abs() / bnorm);
            if g[j].abs() / bnorm <= tol || hn == 0.0 {
                break;
            }
            w.iter_mut().for_each(|v| *v /= hn);
            basis.push(w);
        }
        // back substitution on the j×j triangle
        let mut y = vec![0.0; j];
        for i in (0..j).rev() {
            let s: f64 = (i + 1..j).map(|k| h[i][k] * y[k]).sum();
            y[i] = (g[i] - s) / h[i][i];
        }
        for (yi, v) in y.iter().zip(&basis) {
            axpy(&mut x, *yi, v);
        }
        let end = *history.last().unwrap();
        if end <= tol {
            break;
        }
        if end > 0.999 * cycle_start {
            stalled_cycles += 1;
            if stalled_cycles >= 3 {
                return Err(Error::Stagnation {
                    solver: "gmres",
                    iterations,
                    residual: end,
                });
            }
        } else {
            stalled_cycles = 0;
        }
    }
    // true residual for the report
    let ax = apply(&x)?;
    let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let final_rel = inner(&r, &r).sqrt() / bnorm;
    let converged = final_rel <= tol * 10.0 && *history.last().unwrap() <= tol;
    *history.last_mut().unwrap() = final_rel;
    Ok(KrylovOutcome {
        x,
        iterations,
        residual_history: history,
        converged,
        near_breakdown,
    })
}
