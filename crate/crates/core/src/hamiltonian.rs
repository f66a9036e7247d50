//! Deterministic landmark Hamiltonian `h = ½ Σ_ij (p_i·p_j) K(‖q_i − q_j‖)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::optim::{bfgs, BfgsOptions};
use crate::state::{uniform_grid, LandmarkState, Trajectory};

pub fn hamiltonian(state: &LandmarkState, k: &KernelSpec) -> f64 {
    let (n, d) = (state.n, state.dim);
    let mut h = 0.0;
    for i in 0..n {
        let pi = state.pi(i);
        h += 0.5 * dot(pi, pi);
        for j in (i + 1)..n {
            let rho = dist(state.qi(i), state.qi(j));
            h += dot(pi, state.pi(j)) * k.radial(rho).value;
        }
    }
    debug_assert_eq!(state.q.len(), n * d);
    h
}

/// `(∂h/∂p, −∂h/∂q)` written into `dq`, `dp`.
pub fn vector_field_into(n: usize, d: usize, k: &KernelSpec, q: &[f64], p: &[f64], dq: &mut [f64], dp: &mut [f64]) {
    dq[..n * d].copy_from_slice(&p[..n * d]);
    dp[..n * d].iter_mut().for_each(|v| *v = 0.0);
    let support = k.support();
    for i in 0..n {
        for j in (i + 1)..n {
            let (qi, qj) = (&q[i * d..(i + 1) * d], &q[j * d..(j + 1) * d]);
            let rho = dist(qi, qj);
            if support.is_some_and(|s| rho >= s) {
                continue;
            }
            let rf = k.radial(rho);
            let pp = dot(&p[i * d..(i + 1) * d], &p[j * d..(j + 1) * d]);
            for a in 0..d {
                dq[i * d + a] += rf.value * p[j * d + a];
                dq[j * d + a] += rf.value * p[i * d + a];
                let f = pp * rf.g * (qi[a] - qj[a]);
                dp[i * d + a] -= f;
                dp[j * d + a] += f;
            }
        }
    }
}

pub fn ham_vector_field(state: &LandmarkState, k: &KernelSpec) -> (Vec<f64>, Vec<f64>) {
    let nd = state.nd();
    let mut dq = vec![0.0; nd];
    let mut dp = vec![0.0; nd];
    vector_field_into(state.n, state.dim, k, &state.q, &state.p, &mut dq, &mut dp);
    (dq, dp)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One classical RK4 step on the flat `(q, p)` vector.
pub(crate) fn rk4_step(n: usize, d: usize, k: &KernelSpec, x: &mut [f64], dt: f64, work: &mut Rk4Work) {
    let nd = n * d;
    let f = |x: &[f64], out: &mut [f64]| {
        let (oq, op) = out.split_at_mut(nd);
        vector_field_into(n, d, k, &x[..nd], &x[nd..], oq, op);
    };
    let Rk4Work { k1, k2, k3, k4, tmp } = work;
    f(x, k1);
    for i in 0..2 * nd {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    f(tmp, k2);
    for i in 0..2 * nd {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    f(tmp, k3);
    for i in 0..2 * nd {
        tmp[i] = x[i] + dt * k3[i];
    }
    f(tmp, k4);
    for i in 0..2 * nd {
        x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

pub(crate) struct Rk4Work {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Work {
    pub(crate) fn new(len: usize) -> Self {
        Self { k1: vec![0.0; len], k2: vec![0.0; len], k3: vec![0.0; len], k4: vec![0.0; len], tmp: vec![0.0; len] }
    }
}

fn check_steps(steps: usize, t_end: f64) -> Result<()> {
    if steps == 0 {
        return Err(Error::invalid("steps must be >= 1"));
    }
    if !(t_end.is_finite() && t_end > 0.0) {
        return Err(Error::invalid(format!("final time must be positive, got {t_end}")));
    }
    Ok(())
}

/// RK4 flow on a uniform grid; returns every intermediate state.
pub fn flow_deterministic(state0: &LandmarkState, k: &KernelSpec, t_end: f64, steps: usize) -> Result<Trajectory> {
    check_steps(steps, t_end)?;
    state0.validate()?;
    let (n, d) = (state0.n, state0.dim);
    let dt = t_end / steps as f64;
    let mut x = state0.to_flat();
    let mut work = Rk4Work::new(x.len());
    let mut states = Vec::with_capacity(steps + 1);
    states.push(state0.clone());
    for s in 0..steps {
        rk4_step(n, d, k, &mut x, dt, &mut work);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration { step: s + 1, message: "non-finite state in deterministic flow".into() });
        }
        states.push(LandmarkState::from_flat(n, d, &x));
    }
    Ok(Trajectory { times: uniform_grid(t_end, steps), states })
}

/// Endpoint of the RK4 flow without storing the path.
pub fn flow_endpoint(state0: &LandmarkState, k: &KernelSpec, t_end: f64, steps: usize) -> Result<LandmarkState> {
    check_steps(steps, t_end)?;
    let (n, d) = (state0.n, state0.dim);
    let dt = t_end / steps as f64;
    let mut x = state0.to_flat();
    let mut work = Rk4Work::new(x.len());
    for s in 0..steps {
        rk4_step(n, d, k, &mut x, dt, &mut work);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration { step: s + 1, message: "non-finite state in deterministic flow".into() });
        }
    }
    Ok(LandmarkState::from_flat(n, d, &x))
}

/// Deterministic Heun flow, the zero-noise limit of the stochastic integrator.
pub fn flow_heun(state0: &LandmarkState, k: &KernelSpec, t_end: f64, steps: usize) -> Result<Trajectory> {
    check_steps(steps, t_end)?;
    let (n, d) = (state0.n, state0.dim);
    let nd = n * d;
    let dt = t_end / steps as f64;
    let mut x = state0.to_flat();
    let mut f0 = vec![0.0; 2 * nd];
    let mut f1 = vec![0.0; 2 * nd];
    let mut xp = vec![0.0; 2 * nd];
    let mut states = vec![state0.clone()];
    for s in 0..steps {
        {
            let (a, b) = f0.split_at_mut(nd);
            vector_field_into(n, d, k, &x[..nd], &x[nd..], a, b);
        }
        for i in 0..2 * nd {
            xp[i] = x[i] + f0[i] * dt;
        }
        {
            let (a, b) = f1.split_at_mut(nd);
            vector_field_into(n, d, k, &xp[..nd], &xp[nd..], a, b);
        }
        for i in 0..2 * nd {
            x[i] += 0.5 * (f0[i] + f1[i]) * dt;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration { step: s + 1, message: "non-finite state in Heun flow".into() });
        }
        states.push(LandmarkState::from_flat(n, d, &x));
    }
    Ok(Trajectory { times: uniform_grid(t_end, steps), states })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShootOptions {
    pub max_iter: usize,
    /// Required endpoint mismatch `‖q(T) − q_target‖`.
    pub tol: f64,
    pub fd_step: f64,
}

impl Default for ShootOptions {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-8, fd_step: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShootResult {
    pub p0: Vec<f64>,
    pub mismatch: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Initial momenta whose geodesic from `q0` reaches `q_target` at time `t_end`.
///
/// BFGS on `‖q(T) − q_target‖²`; the gradient `2 Jᵀ r` uses a central
/// finite-difference Jacobian of the endpoint map, started from the
/// free-particle guess `(q_target − q0) / T`.
pub fn shoot(
    q0: &[f64],
    q_target: &[f64],
    n: usize,
    d: usize,
    k: &KernelSpec,
    t_end: f64,
    steps: usize,
    opts: &ShootOptions,
) -> Result<ShootResult> {
    let nd = n * d;
    if q0.len() != nd || q_target.len() != nd {
        return Err(Error::invalid("shooting: positions do not match n * d"));
    }
    check_steps(steps, t_end)?;
    let endpoint = |p: &[f64]| -> Option<Vec<f64>> {
        let s = LandmarkState { n, dim: d, q: q0.to_vec(), p: p.to_vec() };
        flow_endpoint(&s, k, t_end, steps).ok().map(|e| e.q)
    };
    let residual = |p: &[f64]| endpoint(p).map(|qe| qe.iter().zip(q_target).map(|(a, b)| a - b).collect::<Vec<_>>());
    let fg = |p: &[f64]| -> (f64, Vec<f64>) {
        let Some(r) = residual(p) else {
            return (f64::INFINITY, vec![0.0; nd]);
        };
        let f: f64 = r.iter().map(|v| v * v).sum();
        let cols: Vec<Option<Vec<f64>>> = (0..nd)
            .into_par_iter()
            .map(|c| {
                let h = opts.fd_step * p[c].abs().max(1.0);
                let mut pp = p.to_vec();
                let mut pm = p.to_vec();
                pp[c] += h;
                pm[c] -= h;
                let (ep, em) = (endpoint(&pp)?, endpoint(&pm)?);
                let jc: Vec<f64> = ep.iter().zip(&em).map(|(a, b)| (a - b) / (2.0 * h)).collect();
                Some(vec![2.0 * jc.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()])
            })
            .collect();
        let mut g = vec![0.0; nd];
        for (c, col) in cols.into_iter().enumerate() {
            match col {
                Some(v) => g[c] = v[0],
                None => return (f64::INFINITY, vec![0.0; nd]),
            }
        }
        (f, g)
    };
    let p_init: Vec<f64> = q_target.iter().zip(q0).map(|(a, b)| (a - b) / t_end).collect();
    let bopts = BfgsOptions {
        max_iter: opts.max_iter,
        gtol: 0.0,
        ftol_abs: opts.tol * opts.tol,
        stall_iters: 5,
        frel: 1e-14,
        fd_step: opts.fd_step,
    };
    let r = bfgs(fg, &p_init, None, &bopts);
    let mismatch = r.f.sqrt();
    Ok(ShootResult { p0: r.x, mismatch, converged: mismatch <= opts.tol, iterations: r.iterations })
}
