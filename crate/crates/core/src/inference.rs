//! Noise-amplitude estimation from endpoint observations.
//!
//! Two routes: matching the closed moment system to target moments, and
//! maximum likelihood with bridge sampling (stochastic EM or direct density
//! maximisation).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridges::{density_from_bridges, sample_bridges, stabilised_weights, BridgePath, GuidingScheme};
use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, NoiseModel};
use crate::linalg::{pinv, DEFAULT_RCOND};
use crate::moments::{final_moments, MomentState};
use crate::optim::{bfgs_fd, differential_evolution, fd_gradient, nelder_mead, BfgsOptions, Bounds, DeOptions, NelderMeadOptions};
use crate::rng::derive_seed;
use crate::sde::{diffusion_from_cache, ito_drift_into, FieldCache};
use crate::state::LandmarkState;

/// How the parameter vector θ maps onto the field amplitudes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    /// Every amplitude component is free: `λ_l^a = θ[l*d + a]`.
    Components,
    /// One multiplier per field: `λ_l = θ_l · base_l`.
    PerField,
    /// Fields with parallel base amplitudes share a multiplier.
    ByDirection,
    /// One multiplier for all fields.
    Shared,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThetaLayout {
    pub kind: LayoutKind,
    /// Field geometry and reference amplitudes.
    pub base: NoiseModel,
    /// Parameter index of each field (multiplier layouts only).
    pub groups: Vec<usize>,
    n_params: usize,
}

impl ThetaLayout {
    pub fn new(kind: LayoutKind, base: NoiseModel) -> Result<Self> {
        base.validate()?;
        let j = base.n_fields();
        let d = base.dim();
        let norm = |a: &[f64]| a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if kind != LayoutKind::Components {
            if let Some(l) = base.fields.iter().position(|f| norm(&f.amplitude) == 0.0) {
                return Err(Error::invalid(format!("field {l} has a zero base amplitude; it cannot be scaled")));
            }
        }
        let (groups, n_params) = match kind {
            LayoutKind::Components => (Vec::new(), j * d),
            LayoutKind::PerField => ((0..j).collect(), j),
            LayoutKind::Shared => (vec![0; j], 1),
            LayoutKind::ByDirection => {
                let mut dirs: Vec<Vec<f64>> = Vec::new();
                let mut groups = Vec::with_capacity(j);
                for f in &base.fields {
                    let nf = norm(&f.amplitude);
                    let u: Vec<f64> = f.amplitude.iter().map(|v| v / nf).collect();
                    let found = dirs.iter().position(|w| w.iter().zip(&u).all(|(a, b)| (a - b).abs() < 1e-12));
                    match found {
                        Some(g) => groups.push(g),
                        None => {
                            groups.push(dirs.len());
                            dirs.push(u);
                        }
                    }
                }
                (groups, dirs.len())
            }
        };
        Ok(Self { kind, base, groups, n_params })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    /// Noise model for parameters `theta`.
    pub fn model(&self, theta: &[f64]) -> Result<NoiseModel> {
        if theta.len() != self.n_params {
            return Err(Error::invalid(format!("expected {} parameters, got {}", self.n_params, theta.len())));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        let d = self.base.dim();
        let mut m = self.base.clone();
        for (l, f) in m.fields.iter_mut().enumerate() {
            match self.kind {
                LayoutKind::Components => f.amplitude.copy_from_slice(&theta[l * d..(l + 1) * d]),
                _ => f.amplitude.iter_mut().for_each(|a| *a *= theta[self.groups[l]]),
            }
        }
        Ok(m)
    }

    /// Parameters reproducing `model`, which must share the base geometry.
    ///
    /// For multiplier layouts each group takes the projection of its first
    /// field's amplitude onto the base amplitude.
    pub fn theta_of(&self, model: &NoiseModel) -> Result<Vec<f64>> {
        if model.n_fields() != self.base.n_fields() || model.dim() != self.base.dim() {
            return Err(Error::invalid("model does not match the layout geometry"));
        }
        if self.kind == LayoutKind::Components {
            return Ok(model.fields.iter().flat_map(|f| f.amplitude.iter().cloned()).collect());
        }
        let mut theta = vec![f64::NAN; self.n_params];
        for (l, (f, b)) in model.fields.iter().zip(&self.base.fields).enumerate() {
            let g = self.groups[l];
            if theta[g].is_nan() {
                let bb: f64 = b.amplitude.iter().map(|v| v * v).sum();
                theta[g] = f.amplitude.iter().zip(&b.amplitude).map(|(a, c)| a * c).sum::<f64>() / bb;
            }
        }
        Ok(theta)
    }
}

/// Target endpoint moments: mean positions and the diagonal `d × d` blocks of
/// the position covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentTarget {
    pub mean: Vec<f64>,
    pub blocks: Vec<DMatrix<f64>>,
}

impl MomentTarget {
    /// Sample mean and unbiased covariance blocks of observed positions.
    pub fn from_observations(obs: &[Vec<f64>], n: usize, d: usize) -> Result<Self> {
        let nd = n * d;
        if obs.len() < 2 {
            return Err(Error::invalid("target moments need at least two observations"));
        }
        if obs.iter().any(|o| o.len() != nd) {
            return Err(Error::invalid("observations have inconsistent shapes"));
        }
        let m = obs.len() as f64;
        let mut mean = vec![0.0; nd];
        for o in obs {
            mean.iter_mut().zip(o).for_each(|(a, b)| *a += b / m);
        }
        let mut blocks = vec![DMatrix::zeros(d, d); n];
        for o in obs {
            for (i, blk) in blocks.iter_mut().enumerate() {
                for a in 0..d {
                    for b in 0..d {
                        blk[(a, b)] += (o[i * d + a] - mean[i * d + a]) * (o[i * d + b] - mean[i * d + b]) / (m - 1.0);
                    }
                }
            }
        }
        Ok(Self { mean, blocks })
    }

    pub fn from_moments(m: &MomentState) -> Self {
        Self { mean: m.mq.clone(), blocks: (0..m.n).map(|i| m.qq_block(i)).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSettings {
    pub gamma1: f64,
    pub gamma2: f64,
    /// RK4 steps for the moment system.
    pub moment_steps: usize,
    /// Half-width of the box searched for the initial momentum.
    pub p0_radius: f64,
    pub scheme: GuidingScheme,
    pub bridge_steps: usize,
    /// Jitter added to the per-step covariance of the path likelihood.
    pub eps_reg: f64,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        Self {
            gamma1: 1.0,
            gamma2: 1.0,
            moment_steps: 100,
            p0_radius: 1.0,
            scheme: GuidingScheme::default(),
            bridge_steps: 100,
            eps_reg: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InferenceProblem {
    /// Known initial positions and the initial (or starting guess of the) momentum.
    pub start: LandmarkState,
    pub kernel: KernelSpec,
    pub layout: ThetaLayout,
    pub theta_bounds: Vec<(f64, f64)>,
    pub t_end: f64,
    pub observations: Vec<Vec<f64>>,
    /// Present when there are at least two observations, or set explicitly.
    pub target: Option<MomentTarget>,
    pub settings: InferenceSettings,
}

impl InferenceProblem {
    pub fn new(
        start: LandmarkState,
        kernel: KernelSpec,
        layout: ThetaLayout,
        theta_bounds: Vec<(f64, f64)>,
        t_end: f64,
        observations: Vec<Vec<f64>>,
        settings: InferenceSettings,
    ) -> Result<Self> {
        start.validate()?;
        kernel.validate()?;
        if layout.base.dim() != start.dim {
            return Err(Error::invalid("noise layout dimension does not match the landmarks"));
        }
        if theta_bounds.len() != layout.n_params() {
            return Err(Error::invalid(format!(
                "expected {} parameter bounds, got {}",
                layout.n_params(),
                theta_bounds.len()
            )));
        }
        if theta_bounds.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
            return Err(Error::invalid("parameter bounds must be finite with lower <= upper"));
        }
        if !(t_end.is_finite() && t_end > 0.0) {
            return Err(Error::invalid(format!("final time must be positive, got {t_end}")));
        }
        if observations.iter().any(|o| o.len() != start.nd() || o.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("observations must be finite with N×d entries each"));
        }
        if !(settings.gamma1 > 0.0 && settings.gamma2 > 0.0) {
            return Err(Error::invalid("cost weights must be positive"));
        }
        if settings.moment_steps == 0 {
            return Err(Error::invalid("moment_steps must be >= 1"));
        }
        if !(settings.eps_reg >= 0.0) {
            return Err(Error::invalid("eps_reg must be non-negative"));
        }
        settings.scheme.validate()?;
        let target = if observations.len() >= 2 {
            Some(MomentTarget::from_observations(&observations, start.n, start.dim)?)
        } else {
            None
        };
        Ok(Self { start, kernel, layout, theta_bounds, t_end, observations, target, settings })
    }

    pub fn with_target(mut self, target: MomentTarget) -> Self {
        self.target = Some(target);
        self
    }

    pub fn n_params(&self) -> usize {
        self.layout.n_params()
    }

    pub fn model(&self, theta: &[f64]) -> Result<NoiseModel> {
        self.layout.model(theta)
    }

    fn start_with(&self, p0: &[f64]) -> LandmarkState {
        self.start.with_momentum(p0.to_vec())
    }

    /// Moments at `T` from a point mass at `(q0, p0)`.
    pub fn moments_at(&self, p0: &[f64], theta: &[f64]) -> Result<MomentState> {
        let model = self.model(theta)?;
        let m0 = MomentState::deterministic(&self.start_with(p0));
        final_moments(&m0, &self.kernel, &model, self.t_end, self.settings.moment_steps)
    }
}

/// The two parts of the moment cost, already weighted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParts {
    pub mean: f64,
    pub cov: f64,
}

impl CostParts {
    pub fn total(&self) -> f64 {
        self.mean + self.cov
    }
}

/// Cost parts of given moments against the target. Each covariance block is
/// normalised by the squared norm of its target (left as is when that is zero).
pub fn cost_parts(m: &MomentState, target: &MomentTarget, gamma1: f64, gamma2: f64) -> CostParts {
    let dm: f64 = m.mq.iter().zip(&target.mean).map(|(a, b)| (a - b).powi(2)).sum();
    let mut dc = 0.0;
    for (i, tb) in target.blocks.iter().enumerate() {
        let diff = (tb - m.qq_block(i)).norm_squared();
        let scale = tb.norm_squared();
        dc += if scale > 0.0 { diff / scale } else { diff };
    }
    CostParts { mean: dm / gamma1, cov: dc / gamma2 }
}

/// Moment-matching cost; `+∞` when the moment system blows up.
pub fn moment_cost(problem: &InferenceProblem, p0: &[f64], theta: &[f64]) -> Result<f64> {
    Ok(moment_cost_parts(problem, p0, theta)?.map_or(f64::INFINITY, |c| c.total()))
}

/// Cost parts, or `None` when the moment system blows up.
pub fn moment_cost_parts(problem: &InferenceProblem, p0: &[f64], theta: &[f64]) -> Result<Option<CostParts>> {
    let target = problem.target.as_ref().ok_or_else(|| Error::invalid("problem has no target moments"))?;
    if p0.len() != problem.start.nd() {
        return Err(Error::invalid("initial momentum has the wrong length"));
    }
    match problem.moments_at(p0, theta) {
        Ok(m) => {
            let c = cost_parts(&m, target, problem.settings.gamma1, problem.settings.gamma2);
            Ok(if c.total().is_finite() { Some(c) } else { None })
        }
        Err(Error::Integration { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    DifferentialEvolution,
    /// Quasi-Newton (BFGS) with finite-difference gradients.
    GradientDescent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    /// Starting parameters; the centre of the bounds when absent.
    pub theta0: Option<Vec<f64>>,
    /// Optimise the initial momentum as well.
    pub fit_p0: bool,
    /// Mean-only momentum fit run before the joint fit.
    pub stage1: BfgsOptions,
    pub de: DeOptions,
    pub bfgs: BfgsOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { theta0: None, fit_p0: true, stage1: BfgsOptions::default(), de: DeOptions::default(), bfgs: BfgsOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentFit {
    pub method: FitMethod,
    pub theta: Vec<f64>,
    pub p0: Vec<f64>,
    pub cost: f64,
    pub parts: Option<CostParts>,
    /// Mean-position cost after the momentum-only stage.
    pub stage1_cost: f64,
    /// Best cost after each iteration of the joint stage.
    pub trace: Vec<f64>,
    pub evaluations: usize,
    pub converged: bool,
}

/// Fit `(p0, θ)` to the target moments.
///
/// The momentum is first fitted to the mean alone with `θ0` held fixed, then
/// `(p0, θ)` are fitted jointly to the full cost with the chosen method.
pub fn fit_moments(problem: &InferenceProblem, method: FitMethod, opts: &FitOptions) -> Result<MomentFit> {
    let target = problem.target.as_ref().ok_or_else(|| Error::invalid("problem has no target moments"))?;
    let np = problem.n_params();
    let nd = problem.start.nd();
    let theta0 = match &opts.theta0 {
        Some(t) if t.len() != np => return Err(Error::invalid("theta0 has the wrong length")),
        Some(t) => t.clone(),
        None => problem.theta_bounds.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect(),
    };
    problem.model(&theta0)?;
    let settings = &problem.settings;
    let mut evals = 0;

    let mut p0 = problem.start.p.clone();
    let mut stage1_cost = f64::NAN;
    if opts.fit_p0 {
        let model = problem.model(&theta0)?;
        let mean_cost = |p: &[f64]| {
            let m0 = MomentState::deterministic(&problem.start_with(p));
            match final_moments(&m0, &problem.kernel, &model, problem.t_end, settings.moment_steps) {
                Ok(m) => cost_parts(&m, target, settings.gamma1, settings.gamma2).mean,
                Err(_) => f64::INFINITY,
            }
        };
        let pb: Vec<(f64, f64)> = p0.iter().map(|v| (v - settings.p0_radius, v + settings.p0_radius)).collect();
        let r = bfgs_fd(mean_cost, &p0, Some(&pb), &opts.stage1);
        evals += r.evaluations;
        p0 = r.x;
        stage1_cost = r.f;
    }

    let mut bounds: Vec<(f64, f64)> = Vec::with_capacity(nd + np);
    let mut x0 = Vec::with_capacity(nd + np);
    if opts.fit_p0 {
        bounds.extend(p0.iter().map(|v| (v - settings.p0_radius, v + settings.p0_radius)));
        x0.extend_from_slice(&p0);
    }
    bounds.extend_from_slice(&problem.theta_bounds);
    x0.extend(theta0.iter().zip(&problem.theta_bounds).map(|(v, (lo, hi))| v.clamp(*lo, *hi)));
    let split = |x: &[f64]| -> (Vec<f64>, Vec<f64>) {
        if opts.fit_p0 {
            (x[..nd].to_vec(), x[nd..].to_vec())
        } else {
            (p0.clone(), x.to_vec())
        }
    };
    let cost = |x: &[f64]| {
        let (p, th) = split(x);
        moment_cost(problem, &p, &th).unwrap_or(f64::INFINITY)
    };
    let r = match method {
        FitMethod::DifferentialEvolution => {
            let de = DeOptions { x0: Some(x0), ..opts.de.clone() };
            differential_evolution(cost, &bounds, &de)?
        }
        FitMethod::GradientDescent => bfgs_fd(cost, &x0, Some(&bounds), &opts.bfgs),
    };
    evals += r.evaluations;
    let (p_hat, th_hat) = split(&r.x);
    let parts = moment_cost_parts(problem, &p_hat, &th_hat)?;
    Ok(MomentFit {
        method,
        theta: th_hat,
        p0: p_hat,
        cost: r.f,
        parts,
        stage1_cost,
        trace: r.trace,
        evaluations: evals,
        converged: r.converged,
    })
}

/// Euler log-likelihood of a path of full states.
///
/// Each transition is scored against `N(x + b Δt, Σ Σᵀ Δt + ε I)` with the Itô
/// drift and `Σ` taken at the left end of the step. `ε` keeps the momentum
/// block usable where the noise barely acts on momenta.
pub fn path_loglik(
    times: &[f64],
    states: &[LandmarkState],
    k: &KernelSpec,
    model: &NoiseModel,
    eps_reg: f64,
) -> Result<f64> {
    if times.len() != states.len() || states.is_empty() {
        return Err(Error::invalid("path needs matching, non-empty times and states"));
    }
    Ok(loglik_inner(times, states, None, None, k, model, eps_reg)?.0)
}

/// Log-likelihood of a bridge completed by the final position increment onto
/// its target at `t_end` (momenta at `t_end` are not observed).
pub fn bridge_loglik(bridge: &BridgePath, t_end: f64, k: &KernelSpec, model: &NoiseModel, eps_reg: f64) -> Result<f64> {
    let times = bridge_times(bridge, t_end);
    Ok(loglik_inner(&times, &bridge.states, Some(&bridge.target), None, k, model, eps_reg)?.0)
}

/// Log importance weight of a bridge for the time-discrete model: completed
/// path likelihood over the density of the guided transitions that produced
/// it. Unless the bridge shrank its noise, both share the step covariance and
/// only the residuals differ.
pub fn bridge_log_weight(bridge: &BridgePath, t_end: f64, k: &KernelSpec, model: &NoiseModel, eps_reg: f64) -> Result<f64> {
    if bridge.noise.len() + 1 != bridge.states.len() {
        return Err(Error::invalid("bridge carries no noise record; it cannot be reweighted"));
    }
    let times = bridge_times(bridge, t_end);
    let noise = Some((bridge.noise.as_slice(), bridge.shrink_noise));
    let (ll, prop) = loglik_inner(&times, &bridge.states, Some(&bridge.target), noise, k, model, eps_reg)?;
    Ok(ll - prop)
}

fn bridge_times(bridge: &BridgePath, t_end: f64) -> Vec<f64> {
    let mut times = bridge.times.clone();
    times.push(t_end);
    times
}

/// Returns the path log-likelihood and, given the noise of each transition,
/// the proposal log-density `Σ log N(noise; 0, C)` with the same covariances
/// (or the shrunk ones, see `GuidingScheme::shrink_noise`).
fn loglik_inner(
    times: &[f64],
    states: &[LandmarkState],
    terminal: Option<&[f64]>,
    noise: Option<(&[Vec<f64>], bool)>,
    k: &KernelSpec,
    model: &NoiseModel,
    eps_reg: f64,
) -> Result<(f64, f64)> {
    let (n, d) = (states[0].n, states[0].dim);
    if model.dim() != d {
        return Err(Error::invalid("noise model dimension does not match the path"));
    }
    let nd = n * d;
    let j = model.n_fields();
    let mut cache = FieldCache::new(model, n);
    let mut b = vec![0.0; 2 * nd];
    let mut sig = DMatrix::zeros(2 * nd, j);
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let (mut ll, mut prop) = (0.0, 0.0);
    let last = states.len() - 1 + usize::from(terminal.is_some());
    for step in 0..last {
        let s = &states[step];
        let dt = times[step + 1] - times[step];
        if !(dt > 0.0) {
            return Err(Error::invalid(format!("path times must increase (step {step})")));
        }
        ito_drift_into(n, d, k, model, &mut cache, &s.q, &s.p, &mut b);
        diffusion_from_cache(model, &cache, &s.p, &mut sig);
        let full = step + 1 < states.len();
        let m = if full { 2 * nd } else { nd };
        let sm = sig.rows(0, m);
        let c0 = &sm * sm.transpose() * dt;
        let mut c = c0.clone();
        for r in 0..m {
            c[(r, r)] += eps_reg;
        }
        let r = if full {
            let x1 = &states[step + 1];
            DVector::from_iterator(
                m,
                (0..m).map(|r| if r < nd { x1.q[r] - s.q[r] } else { x1.p[r - nd] - s.p[r - nd] } - b[r] * dt),
            )
        } else {
            let v = terminal.expect("terminal step only exists with a target");
            DVector::from_iterator(m, (0..m).map(|r| v[r] - s.q[r] - b[r] * dt))
        };
        let ch = c.cholesky().ok_or_else(|| {
            Error::numeric(format!("step covariance is not positive definite at step {step}; increase eps_reg"))
        })?;
        let norm = |ch: &Cholesky<f64, Dyn>| -0.5 * (m as f64 * ln2pi + 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>());
        ll += -0.5 * r.dot(&ch.solve(&r)) + norm(&ch);
        if let (Some((nz, shrink)), true) = (noise, full) {
            let z = DVector::from_column_slice(&nz[step]);
            if shrink {
                // Σ (I − (1−f) Σ_q† Σ_q) Σᵀ Δt
                let tau = times[times.len() - 1] - times[step];
                let f = (tau - dt) / tau;
                let sq = sig.rows(0, nd).into_owned();
                let (sq_pinv, _) = pinv(&sq, DEFAULT_RCOND)?;
                let mut cp = &c0 - (&sig * sq_pinv) * (sq * sig.transpose()) * ((1.0 - f) * dt);
                for r in 0..m {
                    cp[(r, r)] += eps_reg;
                }
                let chp = cp.cholesky().ok_or_else(|| {
                    Error::numeric(format!("shrunk proposal covariance is not positive definite at step {step}"))
                })?;
                prop += -0.5 * z.dot(&chp.solve(&z)) + norm(&chp);
            } else {
                prop += -0.5 * z.dot(&ch.solve(&z)) + norm(&ch);
            }
        }
    }
    if !(ll.is_finite() && prop.is_finite()) {
        return Err(Error::numeric("path log-likelihood is not finite"));
    }
    Ok((ll, prop))
}

/// Importance weights of the bridges in the E-step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmWeights {
    /// Ratio of the discretised path likelihood (under `θ_{k−1}`, completed
    /// by the final step onto the observation) to the guided proposal density.
    /// Exact for the time-discrete model.
    Discrete,
    /// The continuous-time correction factor `φ`. Its Euler bridges carry an
    /// excess of roughly `ln(steps)` per coordinate in the squared increments
    /// that `φ` does not see, which biases the amplitude gradient upwards.
    Phi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmOptions {
    pub iterations: usize,
    pub n_bridges: usize,
    pub weights: EmWeights,
    /// Gradient step in log-amplitude coordinates.
    pub step: f64,
    /// Finite-difference step in log-amplitude coordinates.
    pub fd_step: f64,
    /// Step halvings allowed when Q drops by more than two standard errors.
    /// Off by default: `Q(·|θ_{k−1})` is curved in proportion to the number of
    /// time steps while its gradient stays of order one, so the test would cap
    /// every step at the (very slow) exact-EM rate.
    pub max_halvings: usize,
    /// Fraction of the iterations after which the iterates are averaged (in
    /// `log θ`) to form the estimate.
    pub average_from: f64,
    /// Simulate the E-step bridges with `GuidingScheme::shrink_noise`, which
    /// evens out the discrete weights. Needs `EmWeights::Discrete`.
    pub shrink_noise: bool,
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { iterations: 20, n_bridges: 32, weights: EmWeights::Discrete, step: 0.1, fd_step: 1e-4, max_halvings: 0, average_from: 0.5, shrink_noise: true, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmResult {
    /// Geometric mean of the averaged iterates.
    pub theta_hat: Vec<f64>,
    /// `θ_0, θ_1, …, θ_K`.
    pub theta_trace: Vec<Vec<f64>>,
    /// `Q(θ_k | θ_{k−1})` per iteration.
    pub q_trace: Vec<f64>,
    /// `∇ Q` in log-amplitude coordinates at `θ_{k−1}`.
    pub grad_trace: Vec<Vec<f64>>,
    /// Mean and smallest effective sample size over observations, per iteration.
    pub ess_mean: Vec<f64>,
    pub ess_min: Vec<f64>,
    pub halvings: Vec<usize>,
}

impl EmResult {
    pub fn theta(&self) -> &[f64] {
        &self.theta_hat
    }
}

/// Bridges and their normalised weights for one observation.
struct EStep {
    bridges: Vec<BridgePath>,
    weights: Vec<f64>,
}

fn e_step(
    problem: &InferenceProblem,
    scheme: &GuidingScheme,
    model: &NoiseModel,
    n_bridges: usize,
    weights: EmWeights,
    seed: u64,
) -> Result<(Vec<EStep>, Vec<f64>)> {
    let s = &problem.settings;
    let mut out = Vec::with_capacity(problem.observations.len());
    let mut ess = Vec::with_capacity(problem.observations.len());
    for (i, v) in problem.observations.iter().enumerate() {
        let bridges = sample_bridges(
            &problem.start,
            &problem.kernel,
            model,
            scheme,
            problem.t_end,
            s.bridge_steps,
            v,
            n_bridges,
            derive_seed(seed, i as u64),
        )
        .map_err(|e| e.in_task(&format!("bridges for observation {i}")))?;
        let w = match weights {
            EmWeights::Phi => stabilised_weights(&bridges)?,
            EmWeights::Discrete => {
                let lw: Vec<f64> = bridges
                    .par_iter()
                    .map(|b| bridge_log_weight(b, problem.t_end, &problem.kernel, model, s.eps_reg))
                    .collect::<Result<_>>()?;
                let mx = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                lw.iter().map(|l| (l - mx).exp()).collect()
            }
        };
        let sw: f64 = w.iter().sum();
        let e = sw * sw / w.iter().map(|x| x * x).sum::<f64>();
        if e < 2.0 {
            log::warn!("observation {i}: effective sample size {e:.2} < 2; consider more bridges");
        }
        ess.push(e);
        out.push(EStep { weights: w.iter().map(|x| x / sw).collect(), bridges });
    }
    Ok((out, ess))
}

/// Per-observation weighted path log-likelihoods under `theta`.
fn q_terms(problem: &InferenceProblem, es: &[EStep], theta: &[f64]) -> Result<Vec<f64>> {
    let model = problem.model(theta)?;
    es.par_iter()
        .map(|e| {
            let mut acc = 0.0;
            for (b, w) in e.bridges.iter().zip(&e.weights) {
                if *w == 0.0 {
                    continue;
                }
                acc += w * bridge_loglik(b, problem.t_end, &problem.kernel, &model, problem.settings.eps_reg)?;
            }
            Ok(acc)
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_positive_bounds(problem: &InferenceProblem) -> Result<()> {
    if problem.theta_bounds.iter().any(|(lo, _)| !(*lo > 0.0)) {
        return Err(Error::invalid("likelihood fits work in log-amplitudes and need positive lower bounds"));
    }
    Ok(())
}

/// Stochastic generalised EM over positive amplitude multipliers.
///
/// Each iteration samples bridges under `θ_{k−1}`, forms the weighted
/// `Q(·|θ_{k−1})` (mean over observations) and takes one gradient step in
/// `log θ`, projected to the bounds. The estimate averages the later
/// iterates, which wander with the Monte Carlo noise of the gradient. With `max_halvings > 0` the step is
/// halved while `Q` at the proposal falls more than two standard errors below
/// `Q(θ_{k−1}|θ_{k−1})`.
pub fn em_fit(problem: &InferenceProblem, theta0: &[f64], opts: &EmOptions) -> Result<EmResult> {
    if problem.observations.is_empty() {
        return Err(Error::invalid("EM needs at least one observation"));
    }
    if opts.iterations == 0 || opts.n_bridges == 0 {
        return Err(Error::invalid("EM needs at least one iteration and one bridge"));
    }
    if !(opts.step > 0.0 && opts.fd_step > 0.0) {
        return Err(Error::invalid("EM step sizes must be positive"));
    }
    if !(0.0..1.0).contains(&opts.average_from) {
        return Err(Error::invalid("average_from must lie in [0, 1)"));
    }
    if opts.shrink_noise && opts.weights == EmWeights::Phi {
        return Err(Error::invalid("bridges with shrunk noise need discrete weights"));
    }
    let scheme = GuidingScheme { shrink_noise: opts.shrink_noise, ..problem.settings.scheme.clone() };
    check_positive_bounds(problem)?;
    let np = problem.n_params();
    if theta0.len() != np {
        return Err(Error::invalid("theta0 has the wrong length"));
    }
    let lb: Vec<(f64, f64)> = problem.theta_bounds.iter().map(|(lo, hi)| (lo.ln(), hi.ln())).collect();
    let mut lt: Vec<f64> = theta0.iter().zip(&lb).map(|(v, (lo, hi))| v.ln().clamp(*lo, *hi)).collect();
    let exp = |x: &[f64]| x.iter().map(|v| v.exp()).collect::<Vec<f64>>();
    let mut res = EmResult {
        theta_hat: Vec::new(),
        theta_trace: vec![exp(&lt)],
        q_trace: Vec::new(),
        grad_trace: Vec::new(),
        ess_mean: Vec::new(),
        ess_min: Vec::new(),
        halvings: Vec::new(),
    };
    for it in 0..opts.iterations {
        let theta = exp(&lt);
        let model = problem.model(&theta)?;
        let (es, ess) = e_step(problem, &scheme, &model, opts.n_bridges, opts.weights, derive_seed(opts.seed, it as u64))
            .map_err(|e| e.in_task(&format!("EM iteration {}", it + 1)))?;
        let q_at = |x: &[f64]| -> f64 { q_terms(problem, &es, &exp(x)).map(|t| mean(&t)).unwrap_or(f64::NEG_INFINITY) };
        let neg = |x: &[f64]| -q_at(x);
        let grad: Vec<f64> = fd_gradient(&neg, &lt, opts.fd_step, Some(&lb)).iter().map(|g| -g).collect();
        let base = q_terms(problem, &es, &theta)?;
        let mut eps = opts.step;
        let mut halvings = 0;
        let (next, q_next) = loop {
            let cand: Vec<f64> = lt.iter().zip(&grad).zip(&lb).map(|((x, g), (lo, hi))| (x + eps * g).clamp(*lo, *hi)).collect();
            let terms = q_terms(problem, &es, &exp(&cand));
            let (accept, q) = match &terms {
                Ok(t) => {
                    let diff: Vec<f64> = t.iter().zip(&base).map(|(a, b)| a - b).collect();
                    let md = mean(&diff);
                    let se = if diff.len() > 1 {
                        (diff.iter().map(|x| (x - md).powi(2)).sum::<f64>() / (diff.len() - 1) as f64 / diff.len() as f64).sqrt()
                    } else {
                        0.0
                    };
                    (opts.max_halvings == 0 || md >= -2.0 * se, mean(t))
                }
                Err(_) => (false, f64::NEG_INFINITY),
            };
            if accept || halvings >= opts.max_halvings {
                if !accept {
                    log::warn!("EM iteration {}: Q decreased after {halvings} halvings; keeping θ", it + 1);
                    break (lt.clone(), mean(&base));
                }
                break (cand, q);
            }
            halvings += 1;
            eps *= 0.5;
        };
        log::debug!("EM iteration {}: θ = {:?}, Q = {q_next:.6e}, mean ESS {:.1}", it + 1, exp(&next), mean(&ess));
        lt = next;
        res.theta_trace.push(exp(&lt));
        res.q_trace.push(q_next);
        res.grad_trace.push(grad);
        res.ess_mean.push(mean(&ess));
        res.ess_min.push(ess.iter().cloned().fold(f64::INFINITY, f64::min));
        res.halvings.push(halvings);
    }
    let first = ((opts.average_from * opts.iterations as f64).floor() as usize + 1).min(opts.iterations);
    let tail = &res.theta_trace[first..];
    res.theta_hat =
        (0..np).map(|a| (tail.iter().map(|t| t[a].ln()).sum::<f64>() / tail.len() as f64).exp()).collect();
    Ok(res)
}

/// `Σ_i log p_T(q^i | q0, p0; θ)` estimated with bridges. Observation `i`
/// always uses the same random streams, so repeated calls with different `θ`
/// share common random numbers.
pub fn log_likelihood(problem: &InferenceProblem, theta: &[f64], n_bridges: usize, seed: u64) -> Result<f64> {
    let model = problem.model(theta)?;
    let s = &problem.settings;
    let mut total = 0.0;
    for (i, v) in problem.observations.iter().enumerate() {
        let bridges = sample_bridges(
            &problem.start,
            &problem.kernel,
            &model,
            &s.scheme,
            problem.t_end,
            s.bridge_steps,
            v,
            n_bridges,
            derive_seed(seed, i as u64),
        )?;
        total += density_from_bridges(&problem.start, &model, problem.t_end, &bridges, s.scheme.rcond)?.log_density;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MleOptions {
    pub n_bridges: usize,
    pub seed: u64,
    pub nelder_mead: NelderMeadOptions,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self { n_bridges: 16, seed: 0, nelder_mead: NelderMeadOptions { ftol: 1e-8, xtol: 1e-6, ..Default::default() } }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleResult {
    pub theta: Vec<f64>,
    pub loglik: f64,
    /// Best log-likelihood per Nelder–Mead iteration.
    pub trace: Vec<f64>,
    pub evaluations: usize,
    pub converged: bool,
}

/// Direct maximisation of the bridge-estimated likelihood with Nelder–Mead in
/// `log θ`.
pub fn mle_direct(problem: &InferenceProblem, theta0: &[f64], opts: &MleOptions) -> Result<MleResult> {
    if problem.observations.is_empty() {
        return Err(Error::invalid("MLE needs at least one observation"));
    }
    if opts.n_bridges == 0 {
        return Err(Error::invalid("MLE needs at least one bridge"));
    }
    check_positive_bounds(problem)?;
    if theta0.len() != problem.n_params() {
        return Err(Error::invalid("theta0 has the wrong length"));
    }
    let lb: Vec<(f64, f64)> = problem.theta_bounds.iter().map(|(lo, hi)| (lo.ln(), hi.ln())).collect();
    let x0: Vec<f64> = theta0.iter().map(|v| v.ln()).collect();
    let f = |x: &[f64]| {
        let th: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        match log_likelihood(problem, &th, opts.n_bridges, opts.seed) {
            Ok(ll) => -ll,
            Err(e) => {
                log::debug!("likelihood failed at θ = {th:?}: {e}");
                f64::INFINITY
            }
        }
    };
    let r = nelder_mead(f, &x0, Some(&lb as &Bounds), &opts.nelder_mead);
    if !r.f.is_finite() {
        return Err(Error::Estimation("likelihood could not be evaluated at any simplex point".into()));
    }
    Ok(MleResult {
        theta: r.x.iter().map(|v| v.exp()).collect(),
        loglik: -r.f,
        trace: r.trace.iter().map(|v| -v).collect(),
        evaluations: r.evaluations,
        converged: r.converged,
    })
}
