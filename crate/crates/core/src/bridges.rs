//! Guided diffusion bridges conditioned on the landmark positions at time `T`.
//!
//! The guided process is integrated with Itô Euler–Maruyama on the grid
//! `t_k = kΔt` and stopped at `T − Δt`. Along the way the log correction factor
//! is accumulated, so that weighting guided samples by `exp(log_phi)` yields
//! expectations under the conditioned law.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::vector_field_into;
use crate::kernels::{KernelSpec, NoiseModel};
use crate::linalg::{pinv, spd_logdet, DEFAULT_RCOND};
use crate::rng::{fill_normal, stream_rng};
use crate::sde::{diffusion_from_cache, diffusion_matrix, ito_drift_into, sigma_q, FieldCache};
use crate::state::LandmarkState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuideKind {
    /// `−Σ Σ_q† (q − v)/(T − t)`
    Basic,
    /// `−Σ Σ_q† (φ_{t,T}(q, p) − v)/(T − t)` with `φ` the capped deterministic flow endpoint.
    PhiPredictor,
    /// Like `PhiPredictor`, with `Σ_q†` replaced by the pseudo-inverse of the
    /// derivative of the predicted endpoint along the noise directions.
    Differential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidingScheme {
    pub kind: GuideKind,
    /// Per-landmark bound `M` on the position drift. `None` uses `10·max(1, ‖p0‖)`.
    pub drift_cap: Option<f64>,
    /// RK4 substeps for the endpoint predictor; 0 makes the predictor the identity.
    pub substeps: usize,
    /// Step in noise space for the `Differential` finite differences.
    pub fd_step: f64,
    /// Relative singular-value cutoff for the pseudo-inverses.
    pub rcond: f64,
    /// Shrink the part of each noise increment seen by the positions by
    /// `√((τ−Δt)/τ)`, the step variance of a Brownian bridge with `τ` left.
    /// The paths then suit discrete importance weights only; `log_phi` is not
    /// meaningful for them.
    pub shrink_noise: bool,
}

impl Default for GuidingScheme {
    fn default() -> Self {
        Self { kind: GuideKind::PhiPredictor, drift_cap: None, substeps: 20, fd_step: 1e-4, rcond: DEFAULT_RCOND, shrink_noise: false }
    }
}

impl GuidingScheme {
    pub fn basic() -> Self {
        Self { kind: GuideKind::Basic, ..Self::default() }
    }

    pub fn phi_predictor() -> Self {
        Self::default()
    }

    pub fn differential() -> Self {
        Self { kind: GuideKind::Differential, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = self.drift_cap {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::invalid(format!("drift cap must be positive, got {m}")));
            }
        }
        if !(self.fd_step.is_finite() && self.fd_step > 0.0) {
            return Err(Error::invalid(format!("fd_step must be positive, got {}", self.fd_step)));
        }
        if !(self.rcond >= 0.0 && self.rcond < 1.0) {
            return Err(Error::invalid(format!("rcond must lie in [0, 1), got {}", self.rcond)));
        }
        Ok(())
    }

    pub fn cap_for(&self, state0: &LandmarkState) -> f64 {
        self.drift_cap.unwrap_or_else(|| 10.0 * state0.momentum_norm().max(1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgePath {
    pub times: Vec<f64>,
    pub states: Vec<LandmarkState>,
    pub log_phi: f64,
    /// Diffusion increment `Σ ΔW` of each simulated transition (full state,
    /// one entry per step after the first state).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noise: Vec<Vec<f64>>,
    /// Simulated with `GuidingScheme::shrink_noise`.
    #[serde(default)]
    pub shrink_noise: bool,
    pub target: Vec<f64>,
    pub hit_error: f64,
    pub seed: u64,
    pub stream: u64,
}

impl BridgePath {
    pub fn last(&self) -> &LandmarkState {
        self.states.last().expect("bridge is never empty")
    }

    /// State at the grid time closest to `t`.
    pub fn state_at(&self, t: f64) -> &LandmarkState {
        let k = self
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(k, _)| k)
            .unwrap_or(0);
        &self.states[k]
    }
}

/// `Σ_q(q)†` together with the numerical rank of `Σ_q`.
pub fn pinv_sigma_q(q: &[f64], model: &NoiseModel, rcond: f64) -> Result<(DMatrix<f64>, usize)> {
    let sq = sigma_q(q, model);
    let (p, rank) = pinv(&sq, rcond)?;
    if rank < sq.nrows() {
        log::warn!("position noise block has rank {rank} < {}; guidance cannot span all directions", sq.nrows());
    }
    Ok((p, rank))
}

fn needs_cap(n: usize, d: usize, bq: &[f64], cap: f64) -> bool {
    (0..n).any(|i| bq[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>() > cap * cap)
}

/// Capped drift `b̃ = b + Σ Σ_q† (b̃_q − b_q)`, with `b` given in `drift` and
/// overwritten in place. Returns whether any landmark hit the cap.
fn apply_cap(
    n: usize,
    d: usize,
    drift: &mut [f64],
    cap: f64,
    sigma: impl FnOnce() -> Result<(DMatrix<f64>, DMatrix<f64>)>,
) -> Result<bool> {
    if !needs_cap(n, d, &drift[..n * d], cap) {
        return Ok(false);
    }
    let nd = n * d;
    let mut diff = DVector::zeros(nd);
    for i in 0..n {
        let s = &drift[i * d..(i + 1) * d];
        let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > cap {
            for a in 0..d {
                diff[i * d + a] = s[a] * (cap / norm - 1.0);
            }
        }
    }
    let (sig, sq_pinv) = sigma()?;
    let corr = &sig * (&sq_pinv * diff);
    for (o, c) in drift.iter_mut().zip(corr.iter()) {
        *o += c;
    }
    Ok(true)
}

struct Predictor<'a> {
    n: usize,
    d: usize,
    k: &'a KernelSpec,
    model: &'a NoiseModel,
    cap: f64,
    rcond: f64,
    substeps: usize,
    t_end: f64,
}

struct PredWork {
    y: Vec<f64>,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl PredWork {
    fn new(len: usize) -> Self {
        let z = || vec![0.0; len];
        Self { y: z(), k1: z(), k2: z(), k3: z(), k4: z(), tmp: z() }
    }
}

impl Predictor<'_> {
    fn field(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let nd = self.n * self.d;
        {
            let (oq, op) = out.split_at_mut(nd);
            vector_field_into(self.n, self.d, self.k, &x[..nd], &x[nd..], oq, op);
        }
        apply_cap(self.n, self.d, out, self.cap, || {
            let s = LandmarkState::from_flat(self.n, self.d, x);
            let sig = diffusion_matrix(&s, self.model)?;
            let (p, _) = pinv(&sig.rows(0, nd).into_owned(), self.rcond)?;
            Ok((sig, p))
        })?;
        Ok(())
    }

    /// Number of RK4 steps for the remaining horizon; `substeps` covers all of `[0, T]`.
    fn steps_for(&self, t: f64) -> usize {
        ((self.substeps as f64 * (self.t_end - t) / self.t_end).ceil() as usize).max(1)
    }

    /// Position part of the capped flow from `t` to `T` started at `x`.
    fn endpoint(&self, x: &[f64], t: f64, w: &mut PredWork) -> Result<Vec<f64>> {
        let nd = self.n * self.d;
        if self.substeps == 0 || t >= self.t_end {
            return Ok(x[..nd].to_vec());
        }
        let m = self.steps_for(t);
        let h = (self.t_end - t) / m as f64;
        let len = 2 * nd;
        let PredWork { y, k1, k2, k3, k4, tmp } = w;
        y.copy_from_slice(x);
        for _ in 0..m {
            self.field(y, k1)?;
            for i in 0..len {
                tmp[i] = y[i] + 0.5 * h * k1[i];
            }
            self.field(tmp, k2)?;
            for i in 0..len {
                tmp[i] = y[i] + 0.5 * h * k2[i];
            }
            self.field(tmp, k3)?;
            for i in 0..len {
                tmp[i] = y[i] + h * k3[i];
            }
            self.field(tmp, k4)?;
            for i in 0..len {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        Ok(y[..nd].to_vec())
    }

    /// `D_h φ(x + Σ h)|_{h=0}` by central differences, `Nd × J`.
    fn differential(&self, x: &[f64], sig: &DMatrix<f64>, t: f64, eps: f64, w: &mut PredWork) -> Result<DMatrix<f64>> {
        let nd = self.n * self.d;
        let j = sig.ncols();
        let mut out = DMatrix::zeros(nd, j);
        let mut xs = x.to_vec();
        for l in 0..j {
            for r in 0..2 * nd {
                xs[r] = x[r] + eps * sig[(r, l)];
            }
            let fp = self.endpoint(&xs, t, w)?;
            for r in 0..2 * nd {
                xs[r] = x[r] - eps * sig[(r, l)];
            }
            let fm = self.endpoint(&xs, t, w)?;
            for r in 0..nd {
                out[(r, l)] = (fp[r] - fm[r]) / (2.0 * eps);
            }
        }
        Ok(out)
    }
}

fn check_time(t: f64, t_end: f64) -> Result<()> {
    if !(t.is_finite() && t_end.is_finite() && t < t_end) {
        return Err(Error::invalid(format!("guidance needs t < T, got t={t}, T={t_end}")));
    }
    Ok(())
}

fn check_target(state: &LandmarkState, model: &NoiseModel, v: &[f64]) -> Result<()> {
    state.validate()?;
    if model.dim() != state.dim {
        return Err(Error::invalid("noise model dimension does not match landmarks"));
    }
    if v.len() != state.nd() || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("target must hold {} finite values", state.nd())));
    }
    Ok(())
}

/// Endpoint predictor `φ_{t,T}`: position at `T` of the deterministic flow
/// with capped position drift, started from `state` at time `t`.
pub fn predict_endpoint(
    state: &LandmarkState,
    k: &KernelSpec,
    model: &NoiseModel,
    scheme: &GuidingScheme,
    t: f64,
    t_end: f64,
) -> Result<Vec<f64>> {
    check_time(t, t_end)?;
    let pred = Predictor {
        n: state.n,
        d: state.dim,
        k,
        model,
        cap: scheme.cap_for(state),
        rcond: scheme.rcond,
        substeps: scheme.substeps,
        t_end,
    };
    pred.endpoint(&state.to_flat(), t, &mut PredWork::new(2 * state.nd()))
}

/// Per-step guidance quantities shared by [`guiding_term`] and the simulator.
struct Guide {
    /// `G† (target − v)` in noise space.
    w: DVector<f64>,
}

#[allow(clippy::too_many_arguments)]
fn compute_guide(
    pred: &Predictor<'_>,
    kind: GuideKind,
    fd_step: f64,
    x: &[f64],
    sig: &DMatrix<f64>,
    sq_pinv: &DMatrix<f64>,
    t: f64,
    v: &[f64],
    work: &mut PredWork,
) -> Result<Guide> {
    let nd = pred.n * pred.d;
    let (target, ginv) = match kind {
        GuideKind::Basic => (x[..nd].to_vec(), None),
        GuideKind::PhiPredictor => (pred.endpoint(x, t, work)?, None),
        GuideKind::Differential => {
            let phi = pred.endpoint(x, t, work)?;
            let dmat = pred.differential(x, sig, t, fd_step, work)?;
            let (dp, _) = pinv(&dmat, pred.rcond)?;
            (phi, Some(dp))
        }
    };
    let diff = DVector::from_iterator(nd, target.iter().zip(v).map(|(a, b)| a - b));
    let w = match ginv {
        Some(g) => g * diff,
        None => sq_pinv * diff,
    };
    Ok(Guide { w })
}

/// Guiding drift `(gq, gp)` at `state` and time `t`.
pub fn guiding_term(
    state: &LandmarkState,
    k: &KernelSpec,
    model: &NoiseModel,
    scheme: &GuidingScheme,
    t: f64,
    t_end: f64,
    v: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_time(t, t_end)?;
    check_target(state, model, v)?;
    scheme.validate()?;
    let nd = state.nd();
    let pred = Predictor {
        n: state.n,
        d: state.dim,
        k,
        model,
        cap: scheme.cap_for(state),
        rcond: scheme.rcond,
        substeps: scheme.substeps,
        t_end,
    };
    let sig = diffusion_matrix(state, model)?;
    let (sq_pinv, _) = pinv_sigma_q(&state.q, model, scheme.rcond)?;
    let x = state.to_flat();
    let mut work = PredWork::new(2 * nd);
    let g = compute_guide(&pred, scheme.kind, scheme.fd_step, &x, &sig, &sq_pinv, t, v, &mut work)?;
    let mut out: Vec<f64> = (&sig * g.w).iter().map(|v| -v / (t_end - t)).collect();
    let gp = out.split_off(nd);
    Ok((out, gp))
}

/// One guided bridge from `state0` towards positions `v` at `t_end`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_bridge(
    state0: &LandmarkState,
    k: &KernelSpec,
    model: &NoiseModel,
    scheme: &GuidingScheme,
    t_end: f64,
    steps: usize,
    v: &[f64],
    seed: u64,
    stream: u64,
) -> Result<BridgePath> {
    check_target(state0, model, v)?;
    scheme.validate()?;
    if steps < 2 {
        return Err(Error::invalid("bridges need at least 2 steps"));
    }
    if !(t_end.is_finite() && t_end > 0.0) {
        return Err(Error::invalid(format!("final time must be positive, got {t_end}")));
    }
    let (n, d) = (state0.n, state0.dim);
    let nd = n * d;
    let j = model.n_fields();
    let dt = t_end / steps as f64;
    let sqdt = dt.sqrt();
    let pred =
        Predictor { n, d, k, model, cap: scheme.cap_for(state0), rcond: scheme.rcond, substeps: scheme.substeps, t_end };
    let mut work = PredWork::new(2 * nd);
    let mut sig = DMatrix::zeros(2 * nd, j);

    let mut rng = stream_rng(seed, stream);
    let mut cache = FieldCache::new(model, n);
    let mut x = state0.to_flat();
    let mut b = vec![0.0; 2 * nd];
    let mut dw = vec![0.0; j];
    let mut times = Vec::with_capacity(steps);
    let mut states = Vec::with_capacity(steps);
    let mut log_phi = 0.0;
    let mut noise_trace = Vec::with_capacity(steps - 1);
    let mut prev: Option<(DMatrix<f64>, DVector<f64>, f64)> = None;

    for step in 0..steps {
        let t = step as f64 * dt;
        // fills the field cache at the current positions
        ito_drift_into(n, d, k, model, &mut cache, &x[..nd], &x[nd..], &mut b);
        diffusion_from_cache(model, &cache, &x[nd..], &mut sig);
        let (sq_pinv, rank) = pinv(&sig.rows(0, nd).into_owned(), scheme.rcond)?;
        if rank < nd {
            return Err(Error::RankDeficient { step, rank, expected: nd });
        }
        let a = sq_pinv.transpose() * &sq_pinv;
        let xv = DVector::from_iterator(nd, (0..nd).map(|i| x[i] - v[i]));

        // quadratic-variation group: −[xᵀ dA x + Σ dA_ij d(x_i x_j)] / (2(T−s))
        if let Some((a0, xv0, t0)) = &prev {
            let da = &a - a0;
            let mut cross = 0.0;
            for r in 0..nd {
                for c in 0..nd {
                    cross += da[(r, c)] * (xv[r] * xv[c] - xv0[r] * xv0[c]);
                }
            }
            log_phi -= (xv0.dot(&(&da * xv0)) + cross) / (2.0 * (t_end - t0));
        }

        times.push(t);
        states.push(LandmarkState::from_flat(n, d, &x));
        if step + 1 == steps {
            break;
        }

        let bq = DVector::from_column_slice(&b[..nd]);
        let mut bt = b.clone();
        apply_cap(n, d, &mut bt, pred.cap, || Ok((sig.clone(), sq_pinv.clone())))?;
        let g = compute_guide(&pred, scheme.kind, scheme.fd_step, &x, &sig, &sq_pinv, t, v, &mut work)?;
        let tau = t_end - t;

        fill_normal(&mut rng, &mut dw);
        dw.iter_mut().for_each(|w| *w *= sqdt);
        let mut dwv = DVector::from_column_slice(&dw);
        if scheme.shrink_noise {
            let f = (tau - dt) / tau;
            let pq = &sq_pinv * (sig.rows(0, nd) * &dwv);
            dwv -= pq * (1.0 - f.sqrt());
        }

        log_phi -= xv.dot(&(&a * &bq)) * dt / tau;
        let btq = DVector::from_column_slice(&bt[..nd]);
        let u = &sq_pinv * (&bq - btq) + (&g.w - &sq_pinv * &xv) / tau;
        log_phi += u.dot(&dwv) - 0.5 * u.norm_squared() * dt;

        let guide = &sig * &g.w;
        let noise = &sig * &dwv;
        for r in 0..2 * nd {
            x[r] += (bt[r] - guide[r] / tau) * dt + noise[r];
        }
        noise_trace.push(noise.as_slice().to_vec());
        if !x.iter().all(|v| v.is_finite()) || !log_phi.is_finite() {
            return Err(Error::Integration { step, message: "bridge state or weight became non-finite".into() });
        }
        prev = Some((a, xv, t));
    }

    let hit_error = states.last().unwrap().q.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(BridgePath { times, states, log_phi, noise: noise_trace, shrink_noise: scheme.shrink_noise, target: v.to_vec(), hit_error, seed, stream })
}

/// `n_bridges` independent bridges; bridge `i` uses stream `i`.
#[allow(clippy::too_many_arguments)]
pub fn sample_bridges(
    state0: &LandmarkState,
    k: &KernelSpec,
    model: &NoiseModel,
    scheme: &GuidingScheme,
    t_end: f64,
    steps: usize,
    v: &[f64],
    n_bridges: usize,
    seed: u64,
) -> Result<Vec<BridgePath>> {
    if n_bridges == 0 {
        return Err(Error::invalid("need at least one bridge"));
    }
    (0..n_bridges as u64)
        .into_par_iter()
        .map(|i| simulate_bridge(state0, k, model, scheme, t_end, steps, v, seed, i))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedEstimate {
    pub value: f64,
    /// Delta-method standard error of the self-normalised estimate.
    pub std_error: f64,
    pub ess: f64,
}

/// Normalised weights `exp(log_phi − max)`; fails if any weight is non-finite.
pub fn stabilised_weights(bridges: &[BridgePath]) -> Result<Vec<f64>> {
    if bridges.is_empty() {
        return Err(Error::Estimation("no bridges".into()));
    }
    if let Some(b) = bridges.iter().find(|b| !b.log_phi.is_finite()) {
        return Err(Error::Estimation(format!("non-finite log weight on stream {}", b.stream)));
    }
    let mx = bridges.iter().map(|b| b.log_phi).fold(f64::NEG_INFINITY, f64::max);
    Ok(bridges.iter().map(|b| (b.log_phi - mx).exp()).collect())
}

pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    s * s / s2
}

/// Self-normalised importance estimate of `E[f | q_T = v]`.
pub fn conditioned_expectation<F>(f: F, bridges: &[BridgePath]) -> Result<WeightedEstimate>
where
    F: Fn(&BridgePath) -> f64,
{
    let w = stabilised_weights(bridges)?;
    let sw: f64 = w.iter().sum();
    if !(sw > 0.0) {
        return Err(Error::Estimation("all bridge weights vanished".into()));
    }
    let vals: Vec<f64> = bridges.iter().map(&f).collect();
    let value = if bridges.len() == 1 { vals[0] } else { w.iter().zip(&vals).map(|(w, f)| w * f).sum::<f64>() / sw };
    let var: f64 = w.iter().zip(&vals).map(|(w, f)| (w * (f - value)).powi(2)).sum::<f64>() / (sw * sw);
    Ok(WeightedEstimate { value, std_error: var.sqrt(), ess: effective_sample_size(&w) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub density: f64,
    pub log_density: f64,
    /// Standard error of `density` from the spread of the correction factors.
    pub std_error: f64,
    pub ess: f64,
    pub n_bridges: usize,
}

/// Log of the closed-form factor multiplying `E[φ]` in the transition density:
/// `|A(v)|^{1/2} (2πT)^{−Nd/2} exp(−‖Σ_q(q0)†(q0 − v)‖²/(2T))`.
pub fn log_density_prefactor(q0: &[f64], v: &[f64], model: &NoiseModel, t_end: f64, rcond: f64) -> Result<f64> {
    let nd = v.len();
    let sv = sigma_q(v, model);
    let gram = &sv * sv.transpose();
    let logdet = spd_logdet(&gram).ok_or(Error::RankDeficient {
        step: 0,
        rank: pinv(&sv, rcond)?.1,
        expected: nd,
    })?;
    let (p0, _) = pinv(&sigma_q(q0, model), rcond)?;
    let r = p0 * DVector::from_iterator(nd, q0.iter().zip(v).map(|(a, b)| a - b));
    Ok(-0.5 * logdet - 0.5 * nd as f64 * (2.0 * std::f64::consts::PI * t_end).ln() - r.norm_squared() / (2.0 * t_end))
}

/// Density estimate from an existing bridge set.
pub fn density_from_bridges(
    state0: &LandmarkState,
    model: &NoiseModel,
    t_end: f64,
    bridges: &[BridgePath],
    rcond: f64,
) -> Result<DensityEstimate> {
    let w = stabilised_weights(bridges)?;
    let v = &bridges[0].target;
    let mx = bridges.iter().map(|b| b.log_phi).fold(f64::NEG_INFINITY, f64::max);
    let nb = w.len() as f64;
    let mean_w = w.iter().sum::<f64>() / nb;
    let var_w = if w.len() > 1 { w.iter().map(|x| (x - mean_w).powi(2)).sum::<f64>() / (nb - 1.0) } else { 0.0 };
    let lp = log_density_prefactor(&state0.q, v, model, t_end, rcond)?;
    let log_density = lp + mx + mean_w.ln();
    let scale = (lp + mx).exp();
    Ok(DensityEstimate {
        density: log_density.exp(),
        log_density,
        std_error: scale * (var_w / nb).sqrt(),
        ess: effective_sample_size(&w),
        n_bridges: w.len(),
    })
}

/// Monte-Carlo estimate of the position transition density at `v`.
#[allow(clippy::too_many_arguments)]
pub fn transition_density(
    state0: &LandmarkState,
    k: &KernelSpec,
    model: &NoiseModel,
    scheme: &GuidingScheme,
    v: &[f64],
    t_end: f64,
    steps: usize,
    n_bridges: usize,
    seed: u64,
) -> Result<DensityEstimate> {
    let bridges = sample_bridges(state0, k, model, scheme, t_end, steps, v, n_bridges, seed)?;
    density_from_bridges(state0, model, t_end, &bridges, scheme.rcond)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::flow_endpoint;
    use crate::kernels::{make_grid_noise, Extent, KernelKind, NoiseField};

    fn constant_model(lam: f64) -> NoiseModel {
        NoiseModel::new(
            KernelKind::Gaussian,
            vec![
                NoiseField { center: vec![0.5, 0.5], scale: 1e6, amplitude: vec![lam, 0.0] },
                NoiseField { center: vec![0.5, 0.5], scale: 1e6, amplitude: vec![0.0, lam] },
            ],
        )
        .unwrap()
    }

    fn grid(r: f64, lam: f64) -> NoiseModel {
        let x = make_grid_noise(KernelKind::Gaussian, 4, &Extent::unit_square(), r, &[vec![lam, 0.0]]).unwrap();
        let y = make_grid_noise(KernelKind::Gaussian, 4, &Extent::unit_square(), r, &[vec![0.0, lam]]).unwrap();
        x.concat(y).unwrap()
    }

    fn moving_landmark() -> LandmarkState {
        LandmarkState::new(1, 2, vec![0.2, 0.3], vec![0.5, 0.3]).unwrap()
    }

    #[test]
    fn basic_guide_vanishes_on_target() {
        let s = moving_landmark();
        let m = grid(0.3, 0.1);
        let (gq, gp) = guiding_term(&s, &KernelSpec::gaussian(0.2), &m, &GuidingScheme::basic(), 0.3, 1.0, &s.q).unwrap();
        assert!(gq.iter().chain(&gp).all(|v| *v == 0.0));
    }

    #[test]
    fn guide_rejects_t_at_or_after_t_end() {
        let s = moving_landmark();
        let m = grid(0.3, 0.1);
        let k = KernelSpec::gaussian(0.2);
        assert!(guiding_term(&s, &k, &m, &GuidingScheme::basic(), 1.0, 1.0, &s.q).unwrap_err().is_validation());
    }

    #[test]
    fn free_landmark_predictor_is_straight_line() {
        let s = moving_landmark();
        let m = grid(0.3, 0.1);
        let k = KernelSpec::gaussian(0.2);
        let sch = GuidingScheme::phi_predictor();
        let phi = predict_endpoint(&s, &k, &m, &sch, 0.25, 1.0).unwrap();
        for a in 0..2 {
            assert!((phi[a] - (s.q[a] + 0.75 * s.p[a])).abs() < 1e-14);
        }
        // continuity at T
        let phi = predict_endpoint(&s, &k, &m, &sch, 1.0 - 1e-12, 1.0).unwrap();
        assert!((phi[0] - s.q[0]).abs() < 1e-11);

        let v = vec![0.6, 0.5];
        let (gq, _) = guiding_term(&s, &k, &m, &sch, 0.25, 1.0, &v).unwrap();
        let sq = sigma_q(&s.q, &m);
        let (sp, _) = pinv(&sq, DEFAULT_RCOND).unwrap();
        let e = DVector::from_iterator(2, (0..2).map(|a| s.q[a] + 0.75 * s.p[a] - v[a]));
        let want = -(&sq * (sp * e)) / 0.75;
        for a in 0..2 {
            assert!((gq[a] - want[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn predictor_matches_flow_below_cap() {
        let q = crate::state::ellipse_points(5, [0.3, 0.2], [0.5, 0.5]);
        let p: Vec<f64> = (0..10).map(|i| 0.2 * ((i as f64) * 0.7).sin()).collect();
        let s = LandmarkState::new(5, 2, q, p).unwrap();
        let k = KernelSpec::gaussian(0.2);
        let m = grid(0.2, 0.05);
        let sch = GuidingScheme { substeps: 200, ..GuidingScheme::phi_predictor() };
        let phi = predict_endpoint(&s, &k, &m, &sch, 0.0, 1.0).unwrap();
        let det = flow_endpoint(&s, &k, 1.0, 200).unwrap();
        for (a, b) in phi.iter().zip(&det.q) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn cap_bounds_predictor_speed() {
        let s = LandmarkState::new(1, 2, vec![0.5, 0.5], vec![30.0, 0.0]).unwrap();
        let k = KernelSpec::gaussian(0.2);
        let m = grid(0.3, 0.1);
        let sch = GuidingScheme { drift_cap: Some(2.0), ..GuidingScheme::phi_predictor() };
        let phi = predict_endpoint(&s, &k, &m, &sch, 0.0, 1.0).unwrap();
        let dist = ((phi[0] - 0.5).powi(2) + (phi[1] - 0.5).powi(2)).sqrt();
        assert!(dist <= 2.0 + 1e-9, "{dist}");
    }

    #[test]
    fn identity_predictor_reproduces_basic_bitwise() {
        let s = moving_landmark();
        let k = KernelSpec::gaussian(0.2);
        let m = grid(0.3, 0.1);
        let v = vec![0.7, 0.55];
        let id = GuidingScheme { substeps: 0, ..GuidingScheme::phi_predictor() };
        let a = simulate_bridge(&s, &k, &m, &GuidingScheme::basic(), 1.0, 200, &v, 3, 1).unwrap();
        let b = simulate_bridge(&s, &k, &m, &id, 1.0, 200, &v, 3, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_same_bridge() {
        let s = moving_landmark();
        let k = KernelSpec::gaussian(0.2);
        let m = grid(0.3, 0.1);
        let v = vec![0.7, 0.55];
        let sch = GuidingScheme::phi_predictor();
        let a = simulate_bridge(&s, &k, &m, &sch, 1.0, 100, &v, 9, 4).unwrap();
        let b = simulate_bridge(&s, &k, &m, &sch, 1.0, 100, &v, 9, 4).unwrap();
        assert_eq!(a, b);
        let c = simulate_bridge(&s, &k, &m, &sch, 1.0, 100, &v, 9, 5).unwrap();
        assert_ne!(a.log_phi, c.log_phi);
    }

    #[test]
    fn near_deterministic_bridge_hits_target() {
        let s = moving_landmark();
        let k = KernelSpec::gaussian(0.2);
        let m = grid(0.3, 0.01);
        let v = flow_endpoint(&s, &k, 1.0, 1000).unwrap().q;
        let steps = 1000;
        let dt = 1.0 / steps as f64;
        for kind in [GuidingScheme::basic(), GuidingScheme::phi_predictor(), GuidingScheme::differential()] {
            let b = simulate_bridge(&s, &k, &m, &kind, 1.0, steps, &v, 1, 0).unwrap();
            assert!(b.log_phi.is_finite());
            // Basic lags the straight line by Δt·p·(ln(T/Δt) − 1) at T − Δt
            let c = if kind.kind == GuideKind::Basic { (1.0 / dt).ln() } else { 5.0 };
            let bound = c * dt * s.momentum_norm();
            assert!(b.hit_error < bound, "{:?}: {} >= {}", kind.kind, b.hit_error, bound);
        }
    }

    #[test]
    fn brownian_bridge_weights_are_trivial() {
        let s = LandmarkState::at_rest(1, 2, vec![0.4, 0.4]).unwrap();
        let m = constant_model(0.1);
        let b = simulate_bridge(&s, &KernelSpec::gaussian(0.2), &m, &GuidingScheme::basic(), 1.0, 100, &[0.5, 0.45], 0, 0)
            .unwrap();
        assert!(b.log_phi.abs() < 1e-9, "{}", b.log_phi);
    }

    #[test]
    fn self_normalisation() {
        let s = moving_landmark();
        let k = KernelSpec::gaussian(0.2);
        let m = grid(0.3, 0.1);
        let v = vec![0.7, 0.55];
        let bs = sample_bridges(&s, &k, &m, &GuidingScheme::basic(), 1.0, 100, &v, 16, 2).unwrap();
        let one = conditioned_expectation(|_| 1.0, &bs).unwrap();
        assert_eq!(one.value, 1.0);
        assert!(one.ess >= 1.0 && one.ess <= 16.0);
        let single = conditioned_expectation(|b| b.state_at(0.5).q[0], &bs[3..4]).unwrap();
        assert_eq!(single.value, bs[3].state_at(0.5).q[0]);
    }

    #[test]
    fn prefactor_is_gaussian_density_for_constant_noise() {
        let m = constant_model(0.2);
        let (q0, v, t) = ([0.4, 0.4], [0.5, 0.3], 0.7);
        let lp = log_density_prefactor(&q0, &v, &m, t, DEFAULT_RCOND).unwrap();
        let var = 0.04 * t;
        let r2 = 0.01 + 0.01;
        let want = -(2.0 * std::f64::consts::PI * var).ln() - r2 / (2.0 * var);
        assert!((lp - want).abs() < 1e-10, "{lp} vs {want}");
    }
}
