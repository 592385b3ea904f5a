//! Full-batch gradient descent with Barzilai-Borwein steps and Armijo
//! backtracking. Every accepted step decreases the objective.

use crate::error::{MdfaError, Result};

pub(crate) struct Descent {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<f64>,
    pub converged: bool,
}

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
const PATIENCE: usize = 50;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Minimizes `f`, which returns the objective and writes the gradient into its
/// second argument. Stops once the gradient norm is at most `grad_tol`, after
/// `max_iter` steps, or when no step along the gradient decreases `f` any more.
pub(crate) fn minimize<F>(mut f: F, x0: Vec<f64>, grad_tol: f64, max_iter: usize) -> Result<Descent>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut trace = vec![fx];
    let diverged = |iterations: usize, trace: &[f64]| MdfaError::Divergence {
        iterations,
        trace: trace[trace.len().saturating_sub(10)..].to_vec(),
    };
    if !fx.is_finite() {
        return Err(diverged(0, &trace));
    }
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut step = 1.0 / norm(&g).max(1.0);
    let mut bad_steps = 0;
    for it in 0..max_iter {
        let gnorm = norm(&g);
        if !gnorm.is_finite() {
            return Err(diverged(it, &trace));
        }
        if gnorm <= grad_tol {
            return Ok(Descent { x, iterations: it, trace, converged: true });
        }
        let g2 = gnorm * gnorm;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            for i in 0..n {
                x_new[i] = x[i] - step * g[i];
            }
            let f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx - ARMIJO_C * step * g2 {
                accepted = Some(f_new);
                break;
            }
            step *= 0.5;
        }
        let Some(f_new) = accepted else {
            // no representable decrease left along the gradient
            return Ok(Descent { x, iterations: it, trace, converged: false });
        };
        if f_new >= fx {
            bad_steps += 1;
            if bad_steps >= PATIENCE {
                return Err(diverged(it + 1, &trace));
            }
        } else {
            bad_steps = 0;
        }
        // BB1 step from the secant pair
        let (mut sy, mut ss) = (0.0, 0.0);
        for i in 0..n {
            let s = x_new[i] - x[i];
            sy += s * (g_new[i] - g[i]);
            ss += s * s;
        }
        step = if sy > 0.0 { ss / sy } else { step * 2.0 };
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        fx = f_new;
        trace.push(fx);
    }
    let converged = norm(&g) <= grad_tol;
    Ok(Descent { x, iterations: max_iter, trace, converged })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_ill_conditioned_quadratic() {
        let diag = [1.0, 10.0, 1000.0];
        let target = [1.0, -2.0, 0.5];
        let out = minimize(
            |x, g| {
                let mut v = 0.0;
                for i in 0..3 {
                    let d = x[i] - target[i];
                    g[i] = diag[i] * d;
                    v += 0.5 * diag[i] * d * d;
                }
                v
            },
            vec![0.0; 3],
            1e-10,
            5000,
        )
        .unwrap();
        assert!(out.converged);
        for i in 0..3 {
            assert!((out.x[i] - target[i]).abs() < 1e-9);
        }
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn non_finite_objective_is_divergence() {
        let r = minimize(|_, g| {
            g[0] = 1.0;
            f64::NAN
        }, vec![0.0], 1e-6, 10);
        assert!(matches!(r, Err(MdfaError::Divergence { .. })));
    }
}
