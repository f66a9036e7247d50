//! Second-order moment closure of the Fokker–Planck equation.
//!
//! The Itô drift `f` and diffusion `Σ` are polynomials in `q`, `p` and
//! `q − δ_l` multiplied by kernel factors. The closure evaluates every kernel
//! factor (`K`, `K′/ρ`, `k_{r_l}` and its radial derivatives) at the current
//! means and treats the remaining polynomial with a second-order cluster
//! expansion, which is the same as taking Gaussian moments. With `C` the full
//! `2Nd × 2Nd` covariance this gives
//!
//! ```text
//! dm/dt = E[f]
//! dC/dt = E[∇f] C + C E[∇f]ᵀ + E[Σ Σᵀ]
//! ```
//!
//! Index layout of `C`: `q_i^α` at `i*d + α`, `p_i^α` at `Nd + i*d + α`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelKind, KernelSpec, NoiseModel};
use crate::linalg::{sym_min_eigenvalue, symmetrize};
use crate::state::LandmarkState;

/// B-spline `h = g′/ρ` diverges at the field centre; the closure evaluates it
/// no closer than this fraction of the field scale.
const BSPLINE_H_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct MomentState {
    pub n: usize,
    pub dim: usize,
    pub mq: Vec<f64>,
    pub mp: Vec<f64>,
    pub cqq: DMatrix<f64>,
    /// Rows index positions, columns momenta.
    pub cqp: DMatrix<f64>,
    pub cpp: DMatrix<f64>,
}

impl MomentState {
    /// Point mass at `state`.
    pub fn deterministic(state: &LandmarkState) -> Self {
        let nd = state.nd();
        Self {
            n: state.n,
            dim: state.dim,
            mq: state.q.clone(),
            mp: state.p.clone(),
            cqq: DMatrix::zeros(nd, nd),
            cqp: DMatrix::zeros(nd, nd),
            cpp: DMatrix::zeros(nd, nd),
        }
    }

    pub fn nd(&self) -> usize {
        self.n * self.dim
    }

    pub fn full_cov(&self) -> DMatrix<f64> {
        let nd = self.nd();
        let mut c = DMatrix::zeros(2 * nd, 2 * nd);
        c.view_mut((0, 0), (nd, nd)).copy_from(&self.cqq);
        c.view_mut((0, nd), (nd, nd)).copy_from(&self.cqp);
        c.view_mut((nd, 0), (nd, nd)).copy_from(&self.cqp.transpose());
        c.view_mut((nd, nd), (nd, nd)).copy_from(&self.cpp);
        c
    }

    pub fn from_full(n: usize, dim: usize, mean: &[f64], c: &DMatrix<f64>) -> Self {
        let nd = n * dim;
        Self {
            n,
            dim,
            mq: mean[..nd].to_vec(),
            mp: mean[nd..].to_vec(),
            cqq: c.view((0, 0), (nd, nd)).into_owned(),
            cqp: c.view((0, nd), (nd, nd)).into_owned(),
            cpp: c.view((nd, nd), (nd, nd)).into_owned(),
        }
    }

    /// `d × d` position covariance of landmark `i`.
    pub fn qq_block(&self, i: usize) -> DMatrix<f64> {
        let d = self.dim;
        self.cqq.view((i * d, i * d), (d, d)).into_owned()
    }

    pub fn validate(&self) -> Result<()> {
        let nd = self.nd();
        if self.n == 0 || self.dim == 0 {
            return Err(Error::invalid("moment state needs n >= 1 and dim >= 1"));
        }
        if self.mq.len() != nd
            || self.mp.len() != nd
            || self.cqq.shape() != (nd, nd)
            || self.cqp.shape() != (nd, nd)
            || self.cpp.shape() != (nd, nd)
        {
            return Err(Error::invalid("moment state blocks do not match n * dim"));
        }
        let finite = self.mq.iter().chain(&self.mp).all(|v| v.is_finite())
            && self.cqq.iter().chain(self.cqp.iter()).chain(self.cpp.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("moment state has non-finite entries"));
        }
        Ok(())
    }
}

/// Kernel factors frozen at the means.
struct Frozen {
    /// `K(‖m_i − m_j‖)`, `N × N`.
    kk: Vec<f64>,
    /// `K′/ρ`, zero on the diagonal.
    gg: Vec<f64>,
    /// Per (landmark, field): value, `g`, `h`, mean offset `ū = m_i − δ_l`.
    k: Vec<f64>,
    g: Vec<f64>,
    h: Vec<f64>,
    u: Vec<f64>,
    active: Vec<bool>,
}

fn freeze(n: usize, d: usize, kern: &KernelSpec, model: &NoiseModel, mq: &[f64]) -> Frozen {
    let j = model.n_fields();
    let mut kk = vec![0.0; n * n];
    let mut gg = vec![0.0; n * n];
    for a in 0..n {
        kk[a * n + a] = 1.0;
        for b in (a + 1)..n {
            let rho: f64 = (0..d).map(|x| (mq[a * d + x] - mq[b * d + x]).powi(2)).sum::<f64>().sqrt();
            let rf = kern.radial(rho);
            kk[a * n + b] = rf.value;
            kk[b * n + a] = rf.value;
            gg[a * n + b] = rf.g;
            gg[b * n + a] = rf.g;
        }
    }
    let mut fr = Frozen {
        kk,
        gg,
        k: vec![0.0; n * j],
        g: vec![0.0; n * j],
        h: vec![0.0; n * j],
        u: vec![0.0; n * j * d],
        active: vec![false; n * j],
    };
    for i in 0..n {
        for l in 0..j {
            let idx = i * j + l;
            let u = &mut fr.u[idx * d..(idx + 1) * d];
            let (rho, rf) = model.radial_at(l, &mq[i * d..(i + 1) * d], u);
            fr.k[idx] = rf.value;
            fr.g[idx] = rf.g;
            let spec = model.kernel(l);
            fr.h[idx] = match spec.kind {
                KernelKind::Gaussian => rf.h,
                KernelKind::CubicBSpline => spec.radial(rho.max(BSPLINE_H_FLOOR * spec.scale)).h,
            };
            fr.active[idx] = rf.value != 0.0 || rf.g != 0.0;
        }
    }
    fr
}

/// Right-hand side of the closed moment system for mean `m` (length `2Nd`)
/// and covariance `c`; returns `(dm, dC)`.
pub(crate) fn rhs_full(
    n: usize,
    d: usize,
    kern: &KernelSpec,
    model: &NoiseModel,
    m: &[f64],
    c: &DMatrix<f64>,
) -> (Vec<f64>, DMatrix<f64>) {
    let nd = n * d;
    let dim = 2 * nd;
    let j = model.n_fields();
    let qi = |i: usize, a: usize| i * d + a;
    let pi = |i: usize, a: usize| nd + i * d + a;
    let (mq, mp) = m.split_at(nd);
    let fr = freeze(n, d, kern, model, mq);

    let mut dm = vec![0.0; dim];
    let mut jac = DMatrix::<f64>::zeros(dim, dim);
    let mut gamma = DMatrix::<f64>::zeros(dim, dim);

    // Hamiltonian part
    for i in 0..n {
        for jj in 0..n {
            let kij = fr.kk[i * n + jj];
            for a in 0..d {
                dm[qi(i, a)] += kij * mp[jj * d + a];
                jac[(qi(i, a), pi(jj, a))] += kij;
            }
        }
        for jj in 0..n {
            if jj == i {
                continue;
            }
            let gij = fr.gg[i * n + jj];
            if gij == 0.0 {
                continue;
            }
            // E[p_i·p_j]
            let mut epp = 0.0;
            for gm in 0..d {
                epp += mp[i * d + gm] * mp[jj * d + gm] + c[(pi(i, gm), pi(jj, gm))];
            }
            for a in 0..d {
                let xbar = mq[i * d + a] - mq[jj * d + a];
                // E[(p_i·p_j) x^α] for x = q_i − q_j
                let mut e3 = xbar * epp;
                for gm in 0..d {
                    let cov_pj_x = c[(pi(jj, gm), qi(i, a))] - c[(pi(jj, gm), qi(jj, a))];
                    let cov_pi_x = c[(pi(i, gm), qi(i, a))] - c[(pi(i, gm), qi(jj, a))];
                    e3 += mp[i * d + gm] * cov_pj_x + mp[jj * d + gm] * cov_pi_x;
                    jac[(pi(i, a), pi(i, gm))] -= gij * (mp[jj * d + gm] * xbar + cov_pj_x);
                    jac[(pi(i, a), pi(jj, gm))] -= gij * (mp[i * d + gm] * xbar + cov_pi_x);
                }
                dm[pi(i, a)] -= gij * e3;
                jac[(pi(i, a), qi(i, a))] -= gij * epp;
                jac[(pi(i, a), qi(jj, a))] += gij * epp;
            }
        }
    }

    // Noise part. For each active (i, l):
    //   s = p_i·λ_l, w = λ_l·u, u = q_i − δ_l
    //   vs = C e_s (covariance of s with every coordinate), vw = C e_w
    let mut vs = vec![0.0; n * j * dim];
    let mut sbar = vec![0.0; n * j];
    for i in 0..n {
        for l in 0..j {
            let idx = i * j + l;
            if !fr.active[idx] {
                continue;
            }
            let lam = &model.fields[l].amplitude;
            let v = &mut vs[idx * dim..(idx + 1) * dim];
            for (gm, lg) in lam.iter().enumerate() {
                if *lg == 0.0 {
                    continue;
                }
                for (r, vr) in v.iter_mut().enumerate() {
                    *vr += lg * c[(r, pi(i, gm))];
                }
            }
            sbar[idx] = (0..d).map(|gm| lam[gm] * mp[i * d + gm]).sum();
        }
    }
    let mut vw = vec![0.0; dim];
    for i in 0..n {
        for l in 0..j {
            let idx = i * j + l;
            if !fr.active[idx] {
                continue;
            }
            let lam = &model.fields[l].amplitude;
            let (k, g, h) = (fr.k[idx], fr.g[idx], fr.h[idx]);
            let ub = &fr.u[idx * d..(idx + 1) * d];
            let v = &vs[idx * dim..(idx + 1) * dim];
            vw.iter_mut().for_each(|x| *x = 0.0);
            for (gm, lg) in lam.iter().enumerate() {
                if *lg == 0.0 {
                    continue;
                }
                for (r, x) in vw.iter_mut().enumerate() {
                    *x += lg * c[(r, qi(i, gm))];
                }
            }
            let s = sbar[idx];
            let wbar: f64 = (0..d).map(|gm| lam[gm] * ub[gm]).sum();
            let cov_sw: f64 = (0..d).map(|gm| lam[gm] * v[qi(i, gm)]).sum();
            let e_sw = s * wbar + cov_sw;
            let aq = 0.5 * g * k;
            let c1 = 0.5 * (g * g - h * k);
            let c2 = -0.5 * g * k;
            for a in 0..d {
                // q-drift correction ½ g k λ^α w
                dm[qi(i, a)] += aq * lam[a] * wbar;
                for mu in 0..d {
                    jac[(qi(i, a), qi(i, mu))] += aq * lam[a] * lam[mu];
                }
                // p-drift correction c1 s w u^α + c2 s λ^α
                let cov_w_u = vw[qi(i, a)];
                let cov_s_u = v[qi(i, a)];
                let e_swu = s * wbar * ub[a] + s * cov_w_u + wbar * cov_s_u + ub[a] * cov_sw;
                dm[pi(i, a)] += c1 * e_swu + c2 * s * lam[a];
                let e_wu = wbar * ub[a] + cov_w_u;
                let e_su = s * ub[a] + cov_s_u;
                for gm in 0..d {
                    jac[(pi(i, a), pi(i, gm))] += lam[gm] * (c1 * e_wu + c2 * lam[a]);
                    jac[(pi(i, a), qi(i, gm))] += c1 * lam[gm] * e_su;
                }
                jac[(pi(i, a), qi(i, a))] += c1 * e_sw;
            }
        }
    }

    // E[Σ Σᵀ]: q-rows λ^α k, p-rows −s g u^α
    for l in 0..j {
        let lam = &model.fields[l].amplitude;
        for i in 0..n {
            let ii = i * j + l;
            if !fr.active[ii] {
                continue;
            }
            let (ki, gi) = (fr.k[ii], fr.g[ii]);
            let ui = &fr.u[ii * d..(ii + 1) * d];
            let vi = &vs[ii * dim..(ii + 1) * dim];
            let si = sbar[ii];
            for jj in 0..n {
                let jl = jj * j + l;
                if !fr.active[jl] {
                    continue;
                }
                let (kj, gj) = (fr.k[jl], fr.g[jl]);
                let uj = &fr.u[jl * d..(jl + 1) * d];
                let vj = &vs[jl * dim..(jl + 1) * dim];
                let sj = sbar[jl];
                let cov_si_sj: f64 = (0..d).map(|gm| lam[gm] * vi[pi(jj, gm)]).sum();
                for a in 0..d {
                    for b in 0..d {
                        gamma[(qi(i, a), qi(jj, b))] += ki * kj * lam[a] * lam[b];
                        // E[s_j u_j^β]
                        let e_su_j = sj * uj[b] + vj[qi(jj, b)];
                        gamma[(qi(i, a), pi(jj, b))] -= lam[a] * ki * gj * e_su_j;
                        // E[s_i u_i^α s_j u_j^β], Isserlis
                        let (ma, mb, mc, md) = (si, ui[a], sj, uj[b]);
                        let c_ab = vi[qi(i, a)];
                        let c_ac = cov_si_sj;
                        let c_ad = vi[qi(jj, b)];
                        let c_bc = vj[qi(i, a)];
                        let c_bd = c[(qi(i, a), qi(jj, b))];
                        let c_cd = vj[qi(jj, b)];
                        let e4 = ma * mb * mc * md
                            + ma * mb * c_cd
                            + ma * mc * c_bd
                            + ma * md * c_bc
                            + mb * mc * c_ad
                            + mb * md * c_ac
                            + mc * md * c_ab
                            + c_ab * c_cd
                            + c_ac * c_bd
                            + c_ad * c_bc;
                        gamma[(pi(i, a), pi(jj, b))] += gi * gj * e4;
                    }
                }
            }
        }
    }
    for r in 0..nd {
        for s in 0..nd {
            gamma[(nd + s, r)] = gamma[(r, nd + s)];
        }
    }

    let jc = &jac * c;
    let dc = &jc + jc.transpose() + gamma;
    (dm, dc)
}

/// `d/dt` of a [`MomentState`].
pub fn moment_rhs(m: &MomentState, kern: &KernelSpec, model: &NoiseModel) -> Result<MomentState> {
    m.validate()?;
    if model.dim() != m.dim {
        return Err(Error::invalid("noise model dimension does not match moment state"));
    }
    let mean: Vec<f64> = m.mq.iter().chain(&m.mp).cloned().collect();
    let (dm, dc) = rhs_full(m.n, m.dim, kern, model, &mean, &m.full_cov());
    Ok(MomentState::from_full(m.n, m.dim, &dm, &dc))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<MomentState>,
    /// Smallest eigenvalue of the full covariance at each recorded time.
    pub min_eigenvalue: Vec<f64>,
}

impl MomentTrajectory {
    pub fn last(&self) -> &MomentState {
        self.states.last().expect("trajectory is never empty")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentOptions {
    /// Store every `record_every`-th step (the final step is always stored).
    pub record_every: usize,
    /// Track the smallest covariance eigenvalue.
    pub monitor_psd: bool,
}

impl Default for MomentOptions {
    fn default() -> Self {
        Self { record_every: 1, monitor_psd: true }
    }
}

/// RK4 integration of the moment system; covariances are symmetrised after
/// every step.
pub fn integrate_moments(
    m0: &MomentState,
    kern: &KernelSpec,
    model: &NoiseModel,
    t_end: f64,
    steps: usize,
) -> Result<MomentTrajectory> {
    integrate_moments_with(m0, kern, model, t_end, steps, &MomentOptions::default())
}

pub fn integrate_moments_with(
    m0: &MomentState,
    kern: &KernelSpec,
    model: &NoiseModel,
    t_end: f64,
    steps: usize,
    opts: &MomentOptions,
) -> Result<MomentTrajectory> {
    m0.validate()?;
    if model.dim() != m0.dim {
        return Err(Error::invalid("noise model dimension does not match moment state"));
    }
    if steps == 0 {
        return Err(Error::invalid("steps must be >= 1"));
    }
    if !(t_end.is_finite() && t_end > 0.0) {
        return Err(Error::invalid(format!("final time must be positive, got {t_end}")));
    }
    let (n, d) = (m0.n, m0.dim);
    let dt = t_end / steps as f64;
    let every = opts.record_every.max(1);
    let mut mean: Vec<f64> = m0.mq.iter().chain(&m0.mp).cloned().collect();
    let mut cov = m0.full_cov();
    let mut times = vec![0.0];
    let mut states = vec![m0.clone()];
    let mut min_eig = Vec::new();
    if opts.monitor_psd {
        min_eig.push(sym_min_eigenvalue(&cov));
    }
    let axpy = |m: &[f64], c: &DMatrix<f64>, dm: &[f64], dc: &DMatrix<f64>, h: f64| {
        let mm: Vec<f64> = m.iter().zip(dm).map(|(a, b)| a + h * b).collect();
        (mm, c + dc * h)
    };
    for step in 1..=steps {
        let (k1m, k1c) = rhs_full(n, d, kern, model, &mean, &cov);
        let (m2, c2) = axpy(&mean, &cov, &k1m, &k1c, 0.5 * dt);
        let (k2m, k2c) = rhs_full(n, d, kern, model, &m2, &c2);
        let (m3, c3) = axpy(&mean, &cov, &k2m, &k2c, 0.5 * dt);
        let (k3m, k3c) = rhs_full(n, d, kern, model, &m3, &c3);
        let (m4, c4) = axpy(&mean, &cov, &k3m, &k3c, dt);
        let (k4m, k4c) = rhs_full(n, d, kern, model, &m4, &c4);
        for r in 0..mean.len() {
            mean[r] += dt / 6.0 * (k1m[r] + 2.0 * k2m[r] + 2.0 * k3m[r] + k4m[r]);
        }
        cov += (k1c + k2c * 2.0 + k3c * 2.0 + k4c) * (dt / 6.0);
        symmetrize(&mut cov);
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Integration { step, message: "non-finite moments".into() });
        }
        if step % every == 0 || step == steps {
            times.push(t_end * step as f64 / steps as f64);
            states.push(MomentState::from_full(n, d, &mean, &cov));
            if opts.monitor_psd {
                let e = sym_min_eigenvalue(&cov);
                if e < -1e-12 * cov.amax().max(1e-300) {
                    log::debug!("moment covariance lost positive semidefiniteness at step {step}: {e:e}");
                }
                min_eig.push(e);
            }
        }
    }
    Ok(MomentTrajectory { times, states, min_eigenvalue: min_eig })
}

/// Final moments only.
pub fn final_moments(
    m0: &MomentState,
    kern: &KernelSpec,
    model: &NoiseModel,
    t_end: f64,
    steps: usize,
) -> Result<MomentState> {
    let opts = MomentOptions { record_every: usize::MAX, monitor_psd: false };
    let mut tr = integrate_moments_with(m0, kern, model, t_end, steps, &opts)?;
    Ok(tr.states.pop().expect("final state recorded"))
}

/// Sample means and unbiased (divisor `n − 1`) centred second moments.
pub fn empirical_moments(samples: &[LandmarkState]) -> Result<MomentState> {
    if samples.len() < 2 {
        return Err(Error::invalid("empirical moments need at least two samples"));
    }
    let (n, d) = (samples[0].n, samples[0].dim);
    if samples.iter().any(|s| s.n != n || s.dim != d) {
        return Err(Error::invalid("samples have inconsistent shapes"));
    }
    let dim = 2 * n * d;
    let ns = samples.len() as f64;
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.q.iter().chain(&s.p)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= ns);
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut dev = vec![0.0; dim];
    for s in samples {
        for ((x, v), m) in dev.iter_mut().zip(s.q.iter().chain(&s.p)).zip(&mean) {
            *x = v - m;
        }
        for a in 0..dim {
            if dev[a] == 0.0 {
                continue;
            }
            for b in a..dim {
                cov[(a, b)] += dev[a] * dev[b];
            }
        }
    }
    for a in 0..dim {
        for b in a..dim {
            let v = cov[(a, b)] / (ns - 1.0);
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    Ok(MomentState::from_full(n, d, &mean, &cov))
}

/// Relative Frobenius distance `‖a − b‖ / ‖b‖`.
pub fn frobenius_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}
