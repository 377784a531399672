//! Box-constrained modified Newton minimization for the handful of
//! log smoothing parameters in a model.

use faer::Mat;

use crate::error::Result;
use crate::linalg;

/// Objective value with optional first and second derivatives.
#[derive(Debug, Clone)]
pub(crate) struct Eval {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NewtonOptions {
    pub max_iter: usize,
    /// Convergence threshold on the projected gradient (max norm),
    /// relative to `1 + |f|`.
    pub grad_tol: f64,
    /// Largest Euclidean step length.
    pub max_step: f64,
    /// Move converged coordinates onto a bound when that lowers `f`.
    pub bound_jump: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { max_iter: 100, grad_tol: 1e-7, max_step: 5.0, bound_jump: true }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after every accepted step, starting point included.
    pub trace: Vec<f64>,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, &l), &h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(l, h);
    }
}

/// Minimizes `f` over the box `[lo, hi]` starting from `x0`.
///
/// `f(x, true)` must return value, gradient and Hessian; `f(x, false)`
/// only needs the value. Coordinates sitting on a bound with the gradient
/// pointing outward are held fixed for the step. With `bound_jump`, after
/// convergence a coordinate whose gradient still points at a bound is moved onto it when
/// that lowers `f`, which settles optima on flat ridges running into the box.
pub(crate) fn minimize<F>(mut f: F, x0: &[f64], lo: &[f64], hi: &[f64], opts: NewtonOptions) -> Result<Outcome>
where
    F: FnMut(&[f64], bool) -> Result<Eval>,
{
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let mut out = newton(&mut f, x, lo, hi, opts)?;
    for _ in 0..x0.len() {
        if !opts.bound_jump || !out.converged {
            break;
        }
        let Ok(Some(next)) = jump_to_bound(&mut f, &out.x, *out.trace.last().unwrap(), lo, hi) else {
            break;
        };
        let Ok(moved) = newton(&mut f, next, lo, hi, opts) else {
            break;
        };
        if !moved.converged {
            break;
        }
        out.trace.extend(moved.trace);
        out = Outcome { iterations: out.iterations + moved.iterations, trace: out.trace, ..moved };
    }
    Ok(out)
}

/// First free coordinate whose move onto the bound its gradient points at
/// lowers `f` clearly below `value`.
fn jump_to_bound<F>(f: &mut F, x: &[f64], value: f64, lo: &[f64], hi: &[f64]) -> Result<Option<Vec<f64>>>
where
    F: FnMut(&[f64], bool) -> Result<Eval>,
{
    let e = f(x, true)?;
    for i in 0..x.len() {
        let target = if e.grad[i] < 0.0 { hi[i] } else { lo[i] };
        if e.grad[i] == 0.0 || x[i] == target {
            continue;
        }
        let mut trial = x.to_vec();
        trial[i] = target;
        if let Ok(v) = f(&trial, false) {
            if v.value.is_finite() && v.value < value - 1e-10 * (1.0 + value.abs()) {
                return Ok(Some(trial));
            }
        }
    }
    Ok(None)
}

fn newton<F>(f: &mut F, mut x: Vec<f64>, lo: &[f64], hi: &[f64], opts: NewtonOptions) -> Result<Outcome>
where
    F: FnMut(&[f64], bool) -> Result<Eval>,
{
    let k = x.len();
    let mut e = f(&x, true)?;
    let mut trace = vec![e.value];
    let at_bound = |x: &[f64], g: &[f64], i: usize| {
        let span = 1e-9 * (hi[i] - lo[i]).max(1.0);
        (x[i] <= lo[i] + span && g[i] > 0.0) || (x[i] >= hi[i] - span && g[i] < 0.0)
    };

    for iter in 0..opts.max_iter {
        let free: Vec<usize> = (0..k).filter(|&i| !at_bound(&x, &e.grad, i)).collect();
        let pg = free.iter().map(|&i| e.grad[i].abs()).fold(0.0, f64::max);
        log::trace!("newton {iter}: x {x:?} value {} grad {:?} free {free:?}", e.value, e.grad);
        if pg <= opts.grad_tol * (1.0 + e.value.abs()) {
            return Ok(Outcome { x, iterations: iter, converged: true, trace });
        }

        let step = newton_direction(&e, &free, k)?;
        let norm = linalg::dot(&step, &step).sqrt();
        let scale = if norm > opts.max_step { opts.max_step / norm } else { 1.0 };

        let mut alpha = scale;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial: Vec<f64> = x.iter().zip(&step).map(|(xi, si)| xi + alpha * si).collect();
            project(&mut trial, lo, hi);
            let decrease: f64 = trial.iter().zip(&x).zip(&e.grad).map(|((t, xi), g)| g * (t - xi)).sum();
            if let Ok(v) = f(&trial, false) {
                if v.value.is_finite() && v.value <= e.value + 1e-4 * decrease {
                    accepted = Some(trial);
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some(next) = accepted else {
            // no descent possible along the Newton direction: as close as rounding allows
            let converged = pg <= (opts.grad_tol * (1.0 + e.value.abs())).max(1e-4);
            return Ok(Outcome { x, iterations: iter + 1, converged, trace });
        };
        let moved = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let prev = e.value;
        x = next;
        e = f(&x, true)?;
        trace.push(e.value);
        if moved < 1e-10 && (prev - e.value).abs() <= 1e-14 * (1.0 + prev.abs()) {
            return Ok(Outcome { x, iterations: iter + 1, converged: true, trace });
        }
    }
    let free: Vec<usize> = (0..k).filter(|&i| !at_bound(&x, &e.grad, i)).collect();
    let pg = free.iter().map(|&i| e.grad[i].abs()).fold(0.0, f64::max);
    Ok(Outcome { x, iterations: opts.max_iter, converged: pg <= opts.grad_tol * (1.0 + e.value.abs()), trace })
}

/// Newton step on the free coordinates with the Hessian's eigenvalues
/// replaced by their absolute values (floored), so the step always descends.
fn newton_direction(e: &Eval, free: &[usize], k: usize) -> Result<Vec<f64>> {
    let mut step = vec![0.0; k];
    let r = free.len();
    if r == 0 {
        return Ok(step);
    }
    let h = Mat::from_fn(r, r, |a, b| 0.5 * (e.hess[free[a]][free[b]] + e.hess[free[b]][free[a]]));
    let (vals, vecs) = linalg::sym_eigen(h.as_ref())?;
    let top = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-7 * top).max(1e-10);
    for (c, &v) in vals.iter().enumerate() {
        let d = v.abs().max(floor);
        let proj: f64 = (0..r).map(|a| vecs[(a, c)] * e.grad[free[a]]).sum();
        for a in 0..r {
            step[free[a]] -= vecs[(a, c)] * proj / d;
        }
    }
    Ok(step)
}
