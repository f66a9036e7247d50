//! Small bound-constrained optimizers: BFGS with projected backtracking,
//! differential evolution (rand/1/bin) and Nelder–Mead.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct OptResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Best objective value after each iteration.
    pub trace: Vec<f64>,
}

pub type Bounds = [(f64, f64)];

fn project(x: &mut [f64], bounds: Option<&Bounds>) {
    if let Some(b) = bounds {
        for (v, (lo, hi)) in x.iter_mut().zip(b) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

/// Central finite-difference gradient, components evaluated in parallel.
///
/// The step for component `k` is `h * max(1, |x_k|)`; with bounds the stencil is
/// shifted inward so that no evaluation leaves the box.
pub fn fd_gradient<F>(f: &F, x: &[f64], h: f64, bounds: Option<&Bounds>) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    (0..x.len())
        .into_par_iter()
        .map(|k| {
            let step = h * x[k].abs().max(1.0);
            let (mut lo, mut hi) = (x[k] - step, x[k] + step);
            if let Some(b) = bounds {
                let (bl, bh) = b[k];
                if lo < bl {
                    lo = bl;
                }
                if hi > bh {
                    hi = bh;
                }
            }
            if hi <= lo {
                return 0.0;
            }
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[k] = hi;
            xm[k] = lo;
            (f(&xp) - f(&xm)) / (hi - lo)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the projected gradient norm falls below this.
    pub gtol: f64,
    /// Stop when the objective falls below this.
    pub ftol_abs: f64,
    /// Stop after this many iterations without relative progress of `frel`.
    pub stall_iters: usize,
    pub frel: f64,
    pub fd_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iter: 200, gtol: 1e-10, ftol_abs: 0.0, stall_iters: 5, frel: 1e-12, fd_step: 1e-6 }
    }
}

/// Projected gradient: components pushing outward at an active bound are zeroed.
fn projected_grad(x: &[f64], g: &[f64], bounds: Option<&Bounds>) -> Vec<f64> {
    let mut pg = g.to_vec();
    if let Some(b) = bounds {
        for k in 0..x.len() {
            let (lo, hi) = b[k];
            if (x[k] <= lo && g[k] > 0.0) || (x[k] >= hi && g[k] < 0.0) {
                pg[k] = 0.0;
            }
        }
    }
    pg
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// BFGS on `fg`, which returns the value and gradient.
pub fn bfgs<FG>(fg: FG, x0: &[f64], bounds: Option<&Bounds>, opts: &BfgsOptions) -> OptResult
where
    FG: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, bounds);
    let (mut fx, mut g) = fg(&x);
    let mut evals = 1;
    let mut h_inv = identity(n);
    let mut trace = vec![fx];
    let mut converged = false;
    let mut stall = 0;
    let mut iters = 0;

    while iters < opts.max_iter {
        if !fx.is_finite() {
            break;
        }
        let pg = projected_grad(&x, &g, bounds);
        if norm(&pg) <= opts.gtol || fx <= opts.ftol_abs {
            converged = true;
            break;
        }
        iters += 1;
        let mut d: Vec<f64> = (0..n).map(|i| -dot(&h_inv[i], &pg)).collect();
        // freeze coordinates sitting on a bound and pushing outward
        if let Some(b) = bounds {
            for k in 0..n {
                let (lo, hi) = b[k];
                if (x[k] <= lo && d[k] < 0.0) || (x[k] >= hi && d[k] > 0.0) {
                    d[k] = 0.0;
                }
            }
        }
        if dot(&d, &pg) >= 0.0 {
            h_inv = identity(n);
            d = pg.iter().map(|v| -v).collect();
        }
        let slope = dot(&d, &pg);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            project(&mut xt, bounds);
            let (ft, gt) = fg(&xt);
            evals += 1;
            let actual: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&actual, &pg).min(step * slope);
            if ft.is_finite() && ft <= fx + 1e-4 * decrease {
                accepted = Some((xt, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            // line search failed; try once more from steepest descent
            if h_inv != identity(n) {
                h_inv = identity(n);
                continue;
            }
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            bfgs_update(&mut h_inv, &s, &y, sy);
        }
        let rel = (fx - fn_).abs() / fx.abs().max(1e-300);
        stall = if rel < opts.frel { stall + 1 } else { 0 };
        x = xn;
        fx = fn_;
        g = gn;
        trace.push(fx);
        if stall >= opts.stall_iters {
            converged = true;
            break;
        }
    }
    if !converged && fx.is_finite() {
        let pg = projected_grad(&x, &g, bounds);
        converged = norm(&pg) <= opts.gtol || fx <= opts.ftol_abs;
    }
    OptResult { x, f: fx, iterations: iters, evaluations: evals, converged, trace }
}

/// BFGS with central finite-difference gradients.
pub fn bfgs_fd<F>(f: F, x0: &[f64], bounds: Option<&Bounds>, opts: &BfgsOptions) -> OptResult
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let h = opts.fd_step;
    let fg = |x: &[f64]| {
        let v = f(x);
        let g = if v.is_finite() { fd_gradient(&f, x, h, bounds) } else { vec![0.0; x.len()] };
        (v, g)
    };
    let mut r = bfgs(fg, x0, bounds, opts);
    r.evaluations *= 1 + 2 * x0.len();
    r
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += (1.0 + rho * yhy) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeOptions {
    /// Population size is `pop_factor * dim`.
    pub pop_factor: usize,
    pub f: f64,
    pub cr: f64,
    pub max_generations: usize,
    /// Stop when the best value falls below this.
    pub target: f64,
    pub seed: u64,
    /// Replaces the first member of the random initial population.
    pub x0: Option<Vec<f64>>,
}

impl Default for DeOptions {
    fn default() -> Self {
        Self { pop_factor: 15, f: 0.8, cr: 0.9, max_generations: 300, target: 0.0, seed: 0, x0: None }
    }
}

/// Differential evolution, rand/1/bin, within `bounds`.
///
/// Trial vectors are drawn sequentially from one seeded stream and scored in
/// parallel, so the result does not depend on the thread count.
pub fn differential_evolution<F>(f: F, bounds: &Bounds, opts: &DeOptions) -> Result<OptResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let dim = bounds.len();
    if dim == 0 {
        return Err(Error::invalid("differential evolution needs at least one parameter"));
    }
    if bounds.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && hi >= lo)) {
        return Err(Error::invalid("differential evolution needs finite bounds with lower <= upper"));
    }
    let np = (opts.pop_factor * dim).max(4);
    let mut rng = stream_rng(opts.seed, 0);
    let mut pop: Vec<Vec<f64>> = (0..np)
        .map(|_| bounds.iter().map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>()).collect())
        .collect();
    if let Some(x0) = &opts.x0 {
        if x0.len() != dim {
            return Err(Error::invalid("differential evolution start point has the wrong dimension"));
        }
        pop[0] = x0.iter().zip(bounds).map(|(v, (lo, hi))| v.clamp(*lo, *hi)).collect();
    }
    let score = |x: &Vec<f64>| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut fit: Vec<f64> = pop.par_iter().map(score).collect();
    let mut evals = np;
    let mut best = argmin(&fit);
    let mut trace = vec![fit[best]];
    let mut gens = 0;
    while gens < opts.max_generations && fit[best] > opts.target {
        gens += 1;
        let trials: Vec<Vec<f64>> = (0..np)
            .map(|i| {
                let (a, b, c) = distinct3(&mut rng, np, i);
                let jrand = rng.random_range(0..dim);
                (0..dim)
                    .map(|k| {
                        if k == jrand || rng.random::<f64>() < opts.cr {
                            let v = pop[a][k] + opts.f * (pop[b][k] - pop[c][k]);
                            let (lo, hi) = bounds[k];
                            // reflect back inside, then clamp
                            let v = if v < lo {
                                lo + (lo - v).min(hi - lo)
                            } else if v > hi {
                                hi - (v - hi).min(hi - lo)
                            } else {
                                v
                            };
                            v.clamp(lo, hi)
                        } else {
                            pop[i][k]
                        }
                    })
                    .collect()
            })
            .collect();
        let tfit: Vec<f64> = trials.par_iter().map(score).collect();
        evals += np;
        for (i, (t, ft)) in trials.into_iter().zip(tfit).enumerate() {
            if ft <= fit[i] {
                pop[i] = t;
                fit[i] = ft;
            }
        }
        best = argmin(&fit);
        trace.push(fit[best]);
    }
    Ok(OptResult {
        x: pop[best].clone(),
        f: fit[best],
        iterations: gens,
        evaluations: evals,
        converged: fit[best] <= opts.target,
        trace,
    })
}

fn argmin(v: &[f64]) -> usize {
    let mut k = 0;
    for i in 1..v.len() {
        if v[i] < v[k] {
            k = i;
        }
    }
    k
}

fn distinct3<R: Rng>(rng: &mut R, n: usize, exclude: usize) -> (usize, usize, usize) {
    let mut pick = |taken: &[usize]| loop {
        let c = rng.random_range(0..n);
        if c != exclude && !taken.contains(&c) {
            return c;
        }
    };
    let a = pick(&[]);
    let b = pick(&[a]);
    let c = pick(&[a, b]);
    (a, b, c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NelderMeadOptions {
    pub max_iter: usize,
    /// Initial simplex edge relative to `max(1, |x_k|)`.
    pub initial_step: f64,
    /// Stop when the simplex value spread falls below this.
    pub ftol: f64,
    pub xtol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { max_iter: 400, initial_step: 0.1, ftol: 1e-10, xtol: 1e-8 }
    }
}

/// Nelder–Mead with standard coefficients; points are clamped into `bounds`.
pub fn nelder_mead<F>(f: F, x0: &[f64], bounds: Option<&Bounds>, opts: &NelderMeadOptions) -> OptResult
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut start = x0.to_vec();
    project(&mut start, bounds);
    let mut simplex = vec![start.clone()];
    for k in 0..n {
        let mut v = start.clone();
        let step = opts.initial_step * start[k].abs().max(1.0);
        v[k] += step;
        if let Some(b) = bounds {
            if v[k] > b[k].1 {
                v[k] = start[k] - step;
            }
        }
        project(&mut v, bounds);
        simplex.push(v);
    }
    let mut fv: Vec<f64> = simplex.iter().map(|x| eval(x)).collect();
    let mut evals = n + 1;
    let mut trace = Vec::new();
    let mut iters = 0;
    let mut converged = false;
    while iters < opts.max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| fv[a].total_cmp(&fv[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        fv = order.iter().map(|&i| fv[i]).collect();
        trace.push(fv[0]);
        let spread = (fv[n] - fv[0]).abs();
        let size = simplex[1..]
            .iter()
            .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread <= opts.ftol && size <= opts.xtol.max(opts.ftol) || size <= opts.xtol {
            converged = true;
            break;
        }
        iters += 1;
        let centroid: Vec<f64> =
            (0..n).map(|k| simplex[..n].iter().map(|v| v[k]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| {
            let mut x: Vec<f64> = (0..n).map(|k| centroid[k] + t * (simplex[n][k] - centroid[k])).collect();
            project(&mut x, bounds);
            x
        };
        let xr = along(-1.0);
        let fr = eval(&xr);
        evals += 1;
        if fr < fv[0] {
            let xe = along(-2.0);
            let fe = eval(&xe);
            evals += 1;
            if fe < fr {
                simplex[n] = xe;
                fv[n] = fe;
            } else {
                simplex[n] = xr;
                fv[n] = fr;
            }
        } else if fr < fv[n - 1] {
            simplex[n] = xr;
            fv[n] = fr;
        } else {
            let (xc, fc) = if fr < fv[n] {
                let x = along(-0.5);
                let v = eval(&x);
                (x, v)
            } else {
                let x = along(0.5);
                let v = eval(&x);
                (x, v)
            };
            evals += 1;
            if fc < fv[n].min(fr) {
                simplex[n] = xc;
                fv[n] = fc;
            } else {
                for i in 1..=n {
                    let mut x: Vec<f64> =
                        (0..n).map(|k| simplex[0][k] + 0.5 * (simplex[i][k] - simplex[0][k])).collect();
                    project(&mut x, bounds);
                    fv[i] = eval(&x);
                    simplex[i] = x;
                }
                evals += n;
            }
        }
    }
    let b = argmin(&fv);
    OptResult { x: simplex[b].clone(), f: fv[b], iterations: iters, evaluations: evals, converged, trace }
}
