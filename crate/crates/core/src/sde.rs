//! Stochastic landmark dynamics driven by Eulerian noise.
//!
//! In Stratonovich form
//!
//! ```text
//! dq_i = ∂h/∂p_i dt + Σ_l σ_l(q_i) ∘ dW_l
//! dp_i = −∂h/∂q_i dt − Σ_l ∇_{q_i}(p_i·σ_l(q_i)) ∘ dW_l
//! ```
//!
//! For the radial fields used here `∂σ_l^β/∂q^α = λ_l^β g u^α` with `u = q − δ_l`,
//! so every noise quantity reduces to the scalars `k, g, h` per (landmark, field).

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::vector_field_into;
use crate::kernels::{KernelSpec, NoiseModel};
use crate::rng::{fill_normal, stream_rng, StreamRng};
use crate::state::{uniform_grid, LandmarkState, Trajectory};

/// Radial factors of every field at every landmark.
///
/// Entry `[i * J + l]`; `u` has `d` entries per pair. `h` is zeroed where
/// `u = 0` because it only ever appears multiplied by `u uᵀ`.
pub(crate) struct FieldCache {
    pub j: usize,
    pub d: usize,
    pub k: Vec<f64>,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub u: Vec<f64>,
    /// `λ_l·u_il`
    pub lu: Vec<f64>,
    /// `false` when the field is identically zero around landmark `i`.
    pub active: Vec<bool>,
}

impl FieldCache {
    pub fn new(model: &NoiseModel, n: usize) -> Self {
        let j = model.n_fields();
        let d = model.dim();
        Self {
            j,
            d,
            k: vec![0.0; n * j],
            g: vec![0.0; n * j],
            h: vec![0.0; n * j],
            u: vec![0.0; n * j * d],
            lu: vec![0.0; n * j],
            active: vec![false; n * j],
        }
    }

    pub fn fill(&mut self, model: &NoiseModel, q: &[f64]) {
        let (j, d) = (self.j, self.d);
        let n = q.len() / d;
        for i in 0..n {
            let qi = &q[i * d..(i + 1) * d];
            for l in 0..j {
                let idx = i * j + l;
                let u = &mut self.u[idx * d..(idx + 1) * d];
                let (rho, rf) = model.radial_at(l, qi, u);
                self.k[idx] = rf.value;
                self.g[idx] = rf.g;
                self.h[idx] = if rho > 0.0 { rf.h } else { 0.0 };
                self.active[idx] = rf.value != 0.0 || rf.g != 0.0;
                let lam = &model.fields[l].amplitude;
                self.lu[idx] = lam.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
            }
        }
    }
}

/// `Σ(x) dW` for the flat state, written into `out` (length `2Nd`).
pub(crate) fn noise_apply(model: &NoiseModel, cache: &FieldCache, p: &[f64], dw: &[f64], out: &mut [f64]) {
    let (j, d) = (cache.j, cache.d);
    let nd = p.len();
    let n = nd / d;
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..n {
        let pi = &p[i * d..(i + 1) * d];
        for l in 0..j {
            let idx = i * j + l;
            if !cache.active[idx] {
                continue;
            }
            let lam = &model.fields[l].amplitude;
            let kw = cache.k[idx] * dw[l];
            let pl: f64 = pi.iter().zip(lam).map(|(a, b)| a * b).sum();
            let gw = pl * cache.g[idx] * dw[l];
            let u = &cache.u[idx * d..(idx + 1) * d];
            for a in 0..d {
                out[i * d + a] += lam[a] * kw;
                out[nd + i * d + a] -= gw * u[a];
            }
        }
    }
}

/// Itô correction `½ Σ_l (DV_l) V_l` added into `out`.
pub(crate) fn ito_correction_add(model: &NoiseModel, cache: &FieldCache, p: &[f64], out: &mut [f64]) {
    let (j, d) = (cache.j, cache.d);
    let nd = p.len();
    let n = nd / d;
    for i in 0..n {
        let pi = &p[i * d..(i + 1) * d];
        for l in 0..j {
            let idx = i * j + l;
            if !cache.active[idx] {
                continue;
            }
            let lam = &model.fields[l].amplitude;
            let (k, g, h, lu) = (cache.k[idx], cache.g[idx], cache.h[idx], cache.lu[idx]);
            let pl: f64 = pi.iter().zip(lam).map(|(a, b)| a * b).sum();
            let u = &cache.u[idx * d..(idx + 1) * d];
            let cq = 0.5 * g * k * lu;
            let c1 = 0.5 * pl * (g * g - h * k) * lu;
            let c2 = -0.5 * pl * g * k;
            for a in 0..d {
                out[i * d + a] += cq * lam[a];
                out[nd + i * d + a] += c1 * u[a] + c2 * lam[a];
            }
        }
    }
}

/// The `2Nd × J` diffusion matrix: column `l` stacks `σ_l(q_i)` over
/// `−∇_{q_i}(p_i·σ_l(q_i))`.
pub fn diffusion_matrix(state: &LandmarkState, model: &NoiseModel) -> Result<DMatrix<f64>> {
    check_dims(state, model)?;
    let (n, d, j) = (state.n, state.dim, model.n_fields());
    let mut cache = FieldCache::new(model, n);
    cache.fill(model, &state.q);
    let mut m = DMatrix::zeros(2 * n * d, j);
    diffusion_from_cache(model, &cache, &state.p, &mut m);
    Ok(m)
}

/// Fill the `2Nd × J` diffusion matrix from a cache filled at the current positions.
pub(crate) fn diffusion_from_cache(model: &NoiseModel, cache: &FieldCache, p: &[f64], m: &mut DMatrix<f64>) {
    let (d, j) = (cache.d, cache.j);
    let nd = p.len();
    let n = nd / d;
    for i in 0..n {
        let pi = &p[i * d..(i + 1) * d];
        for l in 0..j {
            let idx = i * j + l;
            let lam = &model.fields[l].amplitude;
            let pl: f64 = pi.iter().zip(lam).map(|(a, b)| a * b).sum();
            for a in 0..d {
                m[(i * d + a, l)] = lam[a] * cache.k[idx];
                m[(nd + i * d + a, l)] = -pl * cache.g[idx] * cache.u[idx * d + a];
            }
        }
    }
}

/// The position block `Σ_q` (top `Nd` rows of [`diffusion_matrix`]).
pub fn sigma_q(q: &[f64], model: &NoiseModel) -> DMatrix<f64> {
    let d = model.dim();
    let n = q.len() / d;
    let j = model.n_fields();
    let mut m = DMatrix::zeros(n * d, j);
    let mut buf = vec![0.0; j * d];
    for i in 0..n {
        model.sigma_at(&q[i * d..(i + 1) * d], &mut buf);
        for l in 0..j {
            for a in 0..d {
                m[(i * d + a, l)] = buf[l * d + a];
            }
        }
    }
    m
}

fn check_dims(state: &LandmarkState, model: &NoiseModel) -> Result<()> {
    state.validate()?;
    if model.dim() != state.dim {
        return Err(Error::invalid(format!(
            "noise model dimension {} does not match landmark dimension {}",
            model.dim(),
            state.dim
        )));
    }
    Ok(())
}

/// Itô drift: Hamiltonian vector field plus the Stratonovich-to-Itô correction.
pub fn ito_drift(state: &LandmarkState, k: &KernelSpec, model: &NoiseModel) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dims(state, model)?;
    let nd = state.nd();
    let mut out = vec![0.0; 2 * nd];
    let mut cache = FieldCache::new(model, state.n);
    ito_drift_into(state.n, state.dim, k, model, &mut cache, &state.q, &state.p, &mut out);
    let bp = out.split_off(nd);
    Ok((out, bp))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn ito_drift_into(
    n: usize,
    d: usize,
    k: &KernelSpec,
    model: &NoiseModel,
    cache: &mut FieldCache,
    q: &[f64],
    p: &[f64],
    out: &mut [f64],
) {
    let nd = n * d;
    {
        let (oq, op) = out.split_at_mut(nd);
        vector_field_into(n, d, k, q, p, oq, op);
    }
    cache.fill(model, q);
    ito_correction_add(model, cache, p, out);
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdePath {
    pub times: Vec<f64>,
    pub states: Vec<LandmarkState>,
    pub seed: u64,
    pub stream: u64,
}

impl SdePath {
    pub fn trajectory(&self) -> Trajectory {
        Trajectory { times: self.times.clone(), states: self.states.clone() }
    }

    pub fn last(&self) -> &LandmarkState {
        self.states.last().expect("path is never empty")
    }
}

fn check_run(state0: &LandmarkState, model: &NoiseModel, t_end: f64, steps: usize) -> Result<()> {
    check_dims(state0, model)?;
    if steps == 0 {
        return Err(Error::invalid("steps must be >= 1"));
    }
    if !(t_end.is_finite() && t_end > 0.0) {
        return Err(Error::invalid(format!("final time must be positive, got {t_end}")));
    }
    Ok(())
}

/// Stratonovich Heun integrator. The predictor and corrector share `ΔW`.
struct Heun<'a> {
    n: usize,
    d: usize,
    k: &'a KernelSpec,
    model: &'a NoiseModel,
    cache: FieldCache,
    f0: Vec<f64>,
    f1: Vec<f64>,
    s0: Vec<f64>,
    s1: Vec<f64>,
    xp: Vec<f64>,
    dw: Vec<f64>,
}

impl<'a> Heun<'a> {
    fn new(n: usize, d: usize, k: &'a KernelSpec, model: &'a NoiseModel) -> Self {
        let len = 2 * n * d;
        Self {
            n,
            d,
            k,
            model,
            cache: FieldCache::new(model, n),
            f0: vec![0.0; len],
            f1: vec![0.0; len],
            s0: vec![0.0; len],
            s1: vec![0.0; len],
            xp: vec![0.0; len],
            dw: vec![0.0; model.n_fields()],
        }
    }

    fn drift(&mut self, x: &[f64], out_f: bool) {
        let (n, d) = (self.n, self.d);
        let nd = n * d;
        let f = if out_f { &mut self.f1 } else { &mut self.f0 };
        let (a, b) = f.split_at_mut(nd);
        vector_field_into(n, d, self.k, &x[..nd], &x[nd..], a, b);
    }

    fn noise(&mut self, x: &[f64], second: bool) {
        let nd = self.n * self.d;
        self.cache.fill(self.model, &x[..nd]);
        let s = if second { &mut self.s1 } else { &mut self.s0 };
        noise_apply(self.model, &self.cache, &x[nd..], &self.dw, s);
    }

    fn step(&mut self, x: &mut [f64], dt: f64, rng: &mut StreamRng) {
        fill_normal(rng, &mut self.dw);
        let sq = dt.sqrt();
        self.dw.iter_mut().for_each(|v| *v *= sq);
        self.drift(x, false);
        self.noise(x, false);
        let len = x.len();
        for i in 0..len {
            self.xp[i] = x[i] + self.f0[i] * dt + self.s0[i];
        }
        let xp = std::mem::take(&mut self.xp);
        self.drift(&xp, true);
        self.noise(&xp, true);
        self.xp = xp;
        for i in 0..len {
            x[i] += 0.5 * (self.f0[i] + self.f1[i]) * dt + 0.5 * (self.s0[i] + self.s1[i]);
        }
    }
}

fn nonfinite(step: usize) -> Error {
    Error::Integration { step, message: "non-finite state in stochastic flow".into() }
}

/// Heun path on stream `stream` of `seed`.
pub fn simulate_sde_stream(
    state0: &LandmarkState,
    k: &KernelSpec,
    model: &NoiseModel,
    t_end: f64,
    steps: usize,
    seed: u64,
    stream: u64,
) -> Result<SdePath> {
    check_run(state0, model, t_end, steps)?;
    let (n, d) = (state0.n, state0.dim);
    let dt = t_end / steps as f64;
    let mut rng = stream_rng(seed, stream);
    let mut heun = Heun::new(n, d, k, model);
    let mut x = state0.to_flat();
    let mut states = Vec::with_capacity(steps + 1);
    states.push(state0.clone());
    for s in 0..steps {
        heun.step(&mut x, dt, &mut rng);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(nonfinite(s + 1));
        }
        states.push(LandmarkState::from_flat(n, d, &x));
    }
    Ok(SdePath { times: uniform_grid(t_end, steps), states, seed, stream })
}

pub fn simulate_sde(
    state0: &LandmarkState,
    k: &KernelSpec,
    model: &NoiseModel,
    t_end: f64,
    steps: usize,
    seed: u64,
) -> Result<SdePath> {
    simulate_sde_stream(state0, k, model, t_end, steps, seed, 0)
}

/// Heun endpoint only, same stream contract as [`simulate_sde_stream`].
pub fn sde_endpoint(
    state0: &LandmarkState,
    k: &KernelSpec,
    model: &NoiseModel,
    t_end: f64,
    steps: usize,
    seed: u64,
    stream: u64,
) -> Result<LandmarkState> {
    check_run(state0, model, t_end, steps)?;
    let (n, d) = (state0.n, state0.dim);
    let dt = t_end / steps as f64;
    let mut rng = stream_rng(seed, stream);
    let mut heun = Heun::new(n, d, k, model);
    let mut x = state0.to_flat();
    for s in 0..steps {
        heun.step(&mut x, dt, &mut rng);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(nonfinite(s + 1));
        }
    }
    Ok(LandmarkState::from_flat(n, d, &x))
}

/// Itô Euler–Maruyama endpoint using [`ito_drift`].
pub fn sde_endpoint_ito(
    state0: &LandmarkState,
    k: &KernelSpec,
    model: &NoiseModel,
    t_end: f64,
    steps: usize,
    seed: u64,
    stream: u64,
) -> Result<LandmarkState> {
    check_run(state0, model, t_end, steps)?;
    let (n, d) = (state0.n, state0.dim);
    let nd = n * d;
    let dt = t_end / steps as f64;
    let sq = dt.sqrt();
    let mut rng = stream_rng(seed, stream);
    let mut cache = FieldCache::new(model, n);
    let mut x = state0.to_flat();
    let mut b = vec![0.0; 2 * nd];
    let mut s = vec![0.0; 2 * nd];
    let mut dw = vec![0.0; model.n_fields()];
    for step in 0..steps {
        fill_normal(&mut rng, &mut dw);
        dw.iter_mut().for_each(|v| *v *= sq);
        let (q, p) = x.split_at(nd);
        ito_drift_into(n, d, k, model, &mut cache, q, p, &mut b);
        noise_apply(model, &cache, p, &dw, &mut s);
        for i in 0..2 * nd {
            x[i] += b[i] * dt + s[i];
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(nonfinite(step + 1));
        }
    }
    Ok(LandmarkState::from_flat(n, d, &x))
}

/// Endpoints of `n_samples` independent Heun paths; sample `i` uses stream `i`.
pub fn sample_endpoints(
    state0: &LandmarkState,
    k: &KernelSpec,
    model: &NoiseModel,
    t_end: f64,
    steps: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<LandmarkState>> {
    if n_samples < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    check_run(state0, model, t_end, steps)?;
    (0..n_samples as u64)
        .into_par_iter()
        .map(|i| sde_endpoint(state0, k, model, t_end, steps, seed, i))
        .collect()
}

/// Additive-force baseline: `dq = ∂h/∂p dt`, `dp = −∂h/∂q dt + s dB` with one
/// independent Brownian motion per momentum coordinate.
pub fn simulate_additive_baseline(
    state0: &LandmarkState,
    k: &KernelSpec,
    sigma_const: f64,
    t_end: f64,
    steps: usize,
    seed: u64,
) -> Result<SdePath> {
    state0.validate()?;
    if steps == 0 || !(t_end.is_finite() && t_end > 0.0) {
        return Err(Error::invalid("additive baseline needs steps >= 1 and positive final time"));
    }
    if !sigma_const.is_finite() {
        return Err(Error::invalid("additive noise level must be finite"));
    }
    let (n, d) = (state0.n, state0.dim);
    let nd = n * d;
    let dt = t_end / steps as f64;
    let sq = dt.sqrt();
    let mut rng = stream_rng(seed, 0);
    let mut x = state0.to_flat();
    let mut f0 = vec![0.0; 2 * nd];
    let mut f1 = vec![0.0; 2 * nd];
    let mut xp = vec![0.0; 2 * nd];
    let mut db = vec![0.0; nd];
    let mut states = vec![state0.clone()];
    for s in 0..steps {
        fill_normal(&mut rng, &mut db);
        {
            let (a, b) = f0.split_at_mut(nd);
            vector_field_into(n, d, k, &x[..nd], &x[nd..], a, b);
        }
        for i in 0..2 * nd {
            xp[i] = x[i] + f0[i] * dt;
        }
        for i in 0..nd {
            xp[nd + i] += sigma_const * sq * db[i];
        }
        {
            let (a, b) = f1.split_at_mut(nd);
            vector_field_into(n, d, k, &xp[..nd], &xp[nd..], a, b);
        }
        for i in 0..2 * nd {
            x[i] += 0.5 * (f0[i] + f1[i]) * dt;
        }
        for i in 0..nd {
            x[nd + i] += sigma_const * sq * db[i];
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(nonfinite(s + 1));
        }
        states.push(LandmarkState::from_flat(n, d, &x));
    }
    Ok(SdePath { times: uniform_grid(t_end, steps), states, seed, stream: 0 })
}

/// Settings shared by the forward simulations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSettings {
    pub t_end: f64,
    pub steps: usize,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self { t_end: 1.0, steps: 2000 }
    }
}
