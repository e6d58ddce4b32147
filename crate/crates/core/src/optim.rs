//! Quasi-Newton minimization (BFGS, strong Wolfe line search) with a small
//! deterministic restart budget.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimOptions {
    /// Stop when the objective improves by less than this ...
    pub f_tol: f64,
    /// ... and the step is shorter than this (relative to `1 + ‖x‖`).
    pub x_tol: f64,
    /// Alternative stop: sup-norm of the gradient.
    pub g_tol: f64,
    pub max_iter: usize,
    /// Extra runs from perturbed starts when a run does not converge.
    pub restarts: usize,
    /// Perturbation size relative to `‖x‖`.
    pub restart_scale: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            f_tol: 1e-10,
            x_tol: 1e-8,
            g_tol: 1e-9,
            max_iter: 1000,
            restarts: 3,
            restart_scale: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Counted<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Counted<F> {
    fn eval(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
        self.evals += 1;
        let v = (self.f)(x, g);
        if v.is_finite() && g.iter().all(|d| d.is_finite()) {
            v
        } else {
            f64::INFINITY
        }
    }
}

struct Point {
    alpha: f64,
    value: f64,
    slope: f64,
}

/// Strong Wolfe line search along `dir`; on success `x_new` and `g_new` hold the accepted point.
#[allow(clippy::too_many_arguments)]
fn line_search<F: FnMut(&[f64], &mut [f64]) -> f64>(
    f: &mut Counted<F>,
    x: &[f64],
    value: f64,
    slope0: f64,
    dir: &[f64],
    alpha0: f64,
    x_new: &mut [f64],
    g_new: &mut [f64],
) -> Option<f64> {
    let mut probe = |alpha: f64, x_new: &mut [f64], g_new: &mut [f64]| -> Point {
        for ((xn, xi), di) in x_new.iter_mut().zip(x).zip(dir) {
            *xn = xi + alpha * di;
        }
        let v = f.eval(x_new, g_new);
        let slope = if v.is_finite() { dot(g_new, dir) } else { f64::NAN };
        Point { alpha, value: v, slope }
    };

    let mut prev = Point {
        alpha: 0.0,
        value,
        slope: slope0,
    };
    let mut alpha = alpha0;
    for i in 0..30 {
        let cur = probe(alpha, x_new, g_new);
        if !cur.value.is_finite() || cur.value > value + C1 * alpha * slope0 || (i > 0 && cur.value >= prev.value) {
            return zoom(&mut probe, value, slope0, prev, cur, x_new, g_new);
        }
        if cur.slope.abs() <= -C2 * slope0 {
            return Some(cur.value);
        }
        if cur.slope >= 0.0 {
            return zoom(&mut probe, value, slope0, cur, prev, x_new, g_new);
        }
        prev = cur;
        alpha *= 2.0;
    }
    None
}

fn zoom(
    probe: &mut impl FnMut(f64, &mut [f64], &mut [f64]) -> Point,
    value0: f64,
    slope0: f64,
    mut lo: Point,
    mut hi: Point,
    x_new: &mut [f64],
    g_new: &mut [f64],
) -> Option<f64> {
    for _ in 0..40 {
        let width = hi.alpha - lo.alpha;
        if width.abs() <= f64::EPSILON * lo.alpha.abs().max(1e-300) {
            break;
        }
        let mut alpha = cubic_minimizer(&lo, &hi).unwrap_or(lo.alpha + 0.5 * width);
        // keep the trial away from the bracket ends
        let (a, b) = if lo.alpha < hi.alpha {
            (lo.alpha, hi.alpha)
        } else {
            (hi.alpha, lo.alpha)
        };
        let margin = 0.1 * (b - a);
        if !(alpha > a + margin && alpha < b - margin) {
            alpha = lo.alpha + 0.5 * width;
        }
        let cur = probe(alpha, x_new, g_new);
        if !cur.value.is_finite() || cur.value > value0 + C1 * alpha * slope0 || cur.value >= lo.value {
            hi = cur;
        } else {
            if cur.slope.abs() <= -C2 * slope0 {
                return Some(cur.value);
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    // fall back to the best sufficient-decrease point seen
    if lo.alpha > 0.0 && lo.value < value0 {
        let cur = probe(lo.alpha, x_new, g_new);
        return Some(cur.value);
    }
    None
}

fn cubic_minimizer(a: &Point, b: &Point) -> Option<f64> {
    if !(a.value.is_finite() && b.value.is_finite() && a.slope.is_finite() && b.slope.is_finite()) {
        return None;
    }
    let d1 = a.slope + b.slope - 3.0 * (a.value - b.value) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.slope * b.slope;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let denom = b.slope - a.slope + 2.0 * d2;
    if denom == 0.0 {
        return None;
    }
    let t = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / denom;
    t.is_finite().then_some(t)
}

/// One BFGS run from `x0`. `f(x, grad)` returns the value and writes the gradient.
pub fn bfgs<F: FnMut(&[f64], &mut [f64]) -> f64>(f: F, x0: &[f64], opts: &OptimOptions) -> Minimum {
    let m = x0.len();
    let mut f = Counted { f, evals: 0 };
    let mut x = x0.to_vec();
    let mut g = vec![0.0; m];
    let mut value = f.eval(&x, &mut g);
    if m == 0 || !value.is_finite() {
        return Minimum {
            x,
            value,
            iterations: 0,
            evaluations: f.evals,
            converged: m == 0 && value.is_finite(),
        };
    }
    let mut h = identity(m);
    let mut fresh = true;
    let mut dir = vec![0.0; m];
    let mut x_new = vec![0.0; m];
    let mut g_new = vec![0.0; m];
    let mut s = vec![0.0; m];
    let mut y = vec![0.0; m];
    let mut converged = false;
    let mut iter = 0;
    while iter < opts.max_iter {
        if g.iter().fold(0.0f64, |a, v| a.max(v.abs())) <= opts.g_tol {
            converged = true;
            break;
        }
        iter += 1;
        for i in 0..m {
            dir[i] = -dot(&h[i * m..(i + 1) * m], &g);
        }
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            h = identity(m);
            fresh = true;
            dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
            slope = dot(&g, &dir);
        }
        let alpha0 = if fresh {
            (0.1 * (1.0 + norm(&x)) / norm(&dir)).min(1.0)
        } else {
            1.0
        };
        let Some(new_value) = line_search(&mut f, &x, value, slope, &dir, alpha0, &mut x_new, &mut g_new) else {
            if fresh {
                // no descent even along the gradient: numerically stationary
                converged = g.iter().fold(0.0f64, |a, v| a.max(v.abs())) <= 1e-6 * (1.0 + value.abs());
                break;
            }
            h = identity(m);
            fresh = true;
            continue;
        };
        for i in 0..m {
            s[i] = x_new[i] - x[i];
            y[i] = g_new[i] - g[i];
        }
        let improvement = value - new_value;
        let step = norm(&s);
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        value = new_value;
        if improvement.abs() < opts.f_tol && step < opts.x_tol * (1.0 + norm(&x)) {
            converged = true;
            break;
        }
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if fresh {
                let scale = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v *= scale);
            }
            bfgs_update(&mut h, &s, &y, sy);
            fresh = false;
        }
    }
    Minimum {
        x,
        value,
        iterations: iter,
        evaluations: f.evals,
        converged,
    }
}

fn identity(m: usize) -> Vec<f64> {
    let mut h = vec![0.0; m * m];
    for i in 0..m {
        h[i * m + i] = 1.0;
    }
    h
}

/// `H ← (I - ρ s yᵀ) H (I - ρ y sᵀ) + ρ s sᵀ`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let m = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..m).map(|i| dot(&h[i * m..(i + 1) * m], y)).collect();
    let yhy = dot(y, &hy);
    let coef = rho * rho * yhy + rho;
    for i in 0..m {
        for j in 0..m {
            h[i * m + j] += coef * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

/// Deterministic unit direction for restart `r`.
fn restart_direction(m: usize, r: usize) -> Vec<f64> {
    let mut d: Vec<f64> = (0..m)
        .map(|i| ((i as f64 + 1.0) * 12.9898 + r as f64 * 78.233).sin())
        .collect();
    let len = norm(&d).max(f64::MIN_POSITIVE);
    d.iter_mut().for_each(|v| *v /= len);
    d
}

/// [`bfgs`] followed, if it fails to converge, by up to `opts.restarts` runs
/// from deterministic perturbations of the best point found.
pub fn minimize<F: FnMut(&[f64], &mut [f64]) -> f64>(mut f: F, x0: &[f64], opts: &OptimOptions) -> Minimum {
    let mut best = bfgs(&mut f, x0, opts);
    let mut evaluations = best.evaluations;
    let mut r = 0;
    while !best.converged && r < opts.restarts {
        r += 1;
        let scale = opts.restart_scale * norm(&best.x).max(1.0);
        let start: Vec<f64> = best
            .x
            .iter()
            .zip(restart_direction(best.x.len(), r))
            .map(|(x, d)| x + scale * d)
            .collect();
        log::debug!("optimizer restart {r} from perturbed start (value {:e})", best.value);
        let run = bfgs(&mut f, &start, opts);
        evaluations += run.evaluations;
        if run.value < best.value || (run.converged && run.value <= best.value + opts.f_tol) {
            best = run;
        }
    }
    best.evaluations = evaluations;
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn solves_rosenbrock() {
        let m = minimize(rosenbrock, &[-1.2, 1.0], &OptimOptions::default());
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6, "{:?}", m.x);
    }

    #[test]
    fn solves_ill_scaled_quadratic() {
        let scales = [1e-3, 1.0, 1e3, 10.0];
        let f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for i in 0..4 {
                let d = x[i] - i as f64;
                g[i] = 2.0 * scales[i] * d;
                v += scales[i] * d * d;
            }
            v
        };
        let m = minimize(f, &[5.0, 5.0, 5.0, 5.0], &OptimOptions::default());
        assert!(m.converged);
        for i in 0..4 {
            assert!((m.x[i] - i as f64).abs() < 1e-3, "{:?}", m.x);
        }
    }

    #[test]
    fn steps_back_from_infinite_region() {
        // finite only for x > 0; the minimum at x = 1 is reachable
        let f = |x: &[f64], g: &mut [f64]| {
            if x[0] <= 0.0 {
                g[0] = 0.0;
                return 1e12;
            }
            g[0] = 1.0 - 1.0 / x[0];
            x[0] - x[0].ln()
        };
        let m = minimize(f, &[8.0], &OptimOptions::default());
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_parameter_vector() {
        let m = minimize(|_: &[f64], _: &mut [f64]| 3.0, &[], &OptimOptions::default());
        assert!(m.converged);
        assert_eq!(m.value, 3.0);
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let opts = OptimOptions {
            max_iter: 2,
            restarts: 1,
            ..OptimOptions::default()
        };
        let m = minimize(rosenbrock, &[-1.2, 1.0], &opts);
        assert!(!m.converged);
        assert!(m.value < 24.2);
    }

    #[test]
    fn restart_directions_are_unit_and_distinct() {
        let a = restart_direction(9, 1);
        let b = restart_direction(9, 2);
        assert!((norm(&a) - 1.0).abs() < 1e-12);
        assert!(dot(&a, &b).abs() < 0.99);
    }
}
