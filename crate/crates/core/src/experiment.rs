//! Runs one task of an experiment config and writes its artifacts plus a
//! manifest into an output directory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::bridges::{density_from_bridges, effective_sample_size, sample_bridges, stabilised_weights};
use crate::config::{DataSpec, ExperimentConfig};
use crate::csvio::{axis_name, fmt, write_rows, write_states};
use crate::error::{Error, Result};
use crate::hamiltonian::{flow_deterministic, flow_heun, shoot};
use crate::inference::{em_fit, fit_moments, mle_direct, InferenceProblem, MomentTarget};
use crate::kernels::NoiseModel;
use crate::moments::{empirical_moments, frobenius_rel, integrate_moments_with, MomentOptions, MomentState};
use crate::rng::derive_seed;
use crate::sde::{sample_endpoints, simulate_additive_baseline, simulate_sde_stream};
use crate::state::{LandmarkState, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Simulate,
    Moments,
    Bridge,
    InferMoments,
    InferEm,
    InferMle,
    Shoot,
    CompareBaseline,
}

impl Task {
    pub const ALL: [Task; 8] = [
        Task::Simulate,
        Task::Moments,
        Task::Bridge,
        Task::InferMoments,
        Task::InferEm,
        Task::InferMle,
        Task::Shoot,
        Task::CompareBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Simulate => "simulate",
            Task::Moments => "moments",
            Task::Bridge => "bridge",
            Task::InferMoments => "infer-moments",
            Task::InferEm => "infer-em",
            Task::InferMle => "infer-mle",
            Task::Shoot => "shoot",
            Task::CompareBaseline => "compare-baseline",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| Error::invalid(format!("unknown task `{s}`")))
    }
}

// Tags for the per-purpose seeds derived from the config seed.
const TAG_SAMPLES: u64 = 1;
const TAG_BRIDGES: u64 = 2;
const TAG_DATA: u64 = 3;
const TAG_FIT: u64 = 4;
const TAG_EM: u64 = 5;
const TAG_MLE: u64 = 6;
const TAG_BASELINE: u64 = 7;
const TAG_CHECK: u64 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: Task,
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub files: Vec<ManifestFile>,
    pub wall_time_s: f64,
    pub version: String,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    files: Vec<String>,
    seeds: BTreeMap<String, u64>,
}

impl Ctx<'_> {
    fn seed(&mut self, name: &str, tag: u64) -> u64 {
        let s = derive_seed(self.cfg.seed, tag);
        self.seeds.insert(name.to_string(), s);
        s
    }

    fn file(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn json(&mut self, name: &str, value: &serde_json::Value) -> Result<()> {
        let path = self.file(name);
        let s = serde_json::to_string_pretty(value)? + "\n";
        std::fs::write(&path, s).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    fn trajectory_csv(&mut self, name: &str, lead: &str, paths: &[Trajectory]) -> Result<()> {
        let every = self.cfg.sampling.record_every;
        let s0 = &paths[0].states[0];
        let path = self.file(name);
        let rows = paths.iter().enumerate().flat_map(|(i, tr)| {
            let last = tr.len() - 1;
            tr.times
                .iter()
                .zip(&tr.states)
                .enumerate()
                .filter(move |(k, _)| k % every == 0 || *k == last)
                .map(move |(_, (t, s))| (vec![i.to_string(), fmt(*t)], s))
        });
        write_states(&path, &[lead, "t"], s0.n, s0.dim, rows)
    }

    /// Field centres, scales and amplitudes; extra columns hold alternative
    /// amplitude sets (e.g. estimates) for the same fields.
    fn noise_csv(&mut self, base: &NoiseModel, sets: &[(String, NoiseModel)]) -> Result<()> {
        let d = base.dim();
        let mut header = vec!["field".to_string()];
        header.extend((0..d).map(|a| format!("center_{}", axis_name(a))));
        header.push("scale".into());
        for (label, _) in sets {
            header.extend((0..d).map(|a| format!("{label}_{}", axis_name(a))));
        }
        let rows = (0..base.n_fields()).map(|l| {
            let f = &base.fields[l];
            let mut r = vec![l.to_string()];
            r.extend(f.center.iter().map(|v| fmt(*v)));
            r.push(fmt(f.scale));
            for (_, m) in sets {
                r.extend(m.fields[l].amplitude.iter().map(|v| fmt(*v)));
            }
            r
        });
        let path = self.file("noise_fields.csv");
        write_rows(&path, &header, rows)
    }
}

/// Run `task`, writing `config.json`, the task artifacts and `manifest.json`
/// into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, task: Task, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut ctx = Ctx { cfg, dir: out_dir.to_path_buf(), files: Vec::new(), seeds: BTreeMap::new() };
    let cpath = ctx.file("config.json");
    cfg.save(&cpath)?;
    let t0 = Instant::now();
    let run = match task {
        Task::Simulate => simulate(&mut ctx),
        Task::Moments => moments(&mut ctx),
        Task::Bridge => bridge(&mut ctx),
        Task::InferMoments => infer_moments(&mut ctx),
        Task::InferEm => infer_em(&mut ctx),
        Task::InferMle => infer_mle(&mut ctx),
        Task::Shoot => shoot_task(&mut ctx),
        Task::CompareBaseline => baseline(&mut ctx),
    };
    run.map_err(|e| e.in_task(task.name()))?;
    let wall = t0.elapsed().as_secs_f64();
    let mut files = Vec::with_capacity(ctx.files.len());
    for f in &ctx.files {
        let p = out_dir.join(f);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
        files.push(ManifestFile { path: f.clone(), bytes: bytes.len() as u64, sha256: hex::encode(Sha256::digest(&bytes)) });
    }
    let manifest = Manifest {
        task,
        name: cfg.name.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        seeds: ctx.seeds,
        files,
        wall_time_s: wall,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let mpath = out_dir.join("manifest.json");
    let s = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&mpath, s).map_err(|e| Error::io(format!("writing {}", mpath.display()), e))?;
    Ok(manifest)
}

fn endpoints(ctx: &mut Ctx, s0: &LandmarkState, m: &NoiseModel) -> Result<Vec<LandmarkState>> {
    let cfg = ctx.cfg;
    let seed = ctx.seed("samples", TAG_SAMPLES);
    sample_endpoints(s0, &cfg.kernel, m, cfg.sim.t_end, cfg.sim.steps, cfg.sampling.n_samples, seed)
}

fn simulate(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let s0 = cfg.initial_state()?;
    let m = cfg.noise_model()?;
    let ends = endpoints(ctx, &s0, &m)?;
    let seed = ctx.seeds["samples"];
    let path = ctx.file("endpoints.csv");
    write_states(&path, &["sample"], s0.n, s0.dim, ends.iter().enumerate().map(|(i, s)| (vec![i.to_string()], s)))?;
    let k = cfg.sampling.record_paths.min(cfg.sampling.n_samples);
    if k > 0 {
        let paths = (0..k as u64)
            .map(|i| simulate_sde_stream(&s0, &cfg.kernel, &m, cfg.sim.t_end, cfg.sim.steps, seed, i).map(|p| p.trajectory()))
            .collect::<Result<Vec<_>>>()?;
        ctx.trajectory_csv("paths.csv", "path", &paths)?;
    }
    let det = flow_heun(&s0, &cfg.kernel, cfg.sim.t_end, cfg.sim.steps)?;
    ctx.trajectory_csv("deterministic.csv", "path", &[det])?;
    ctx.noise_csv(&m, &[("amplitude".into(), m.clone())])
}

fn moment_row(source: &str, t: f64, m: &MomentState) -> Vec<String> {
    let d = m.dim;
    let mut r = vec![source.to_string(), fmt(t)];
    r.extend(m.mq.iter().chain(&m.mp).map(|v| fmt(*v)));
    for i in 0..m.n {
        let b = m.qq_block(i);
        for a in 0..d {
            for c in a..d {
                r.push(fmt(b[(a, c)]));
            }
        }
    }
    r
}

fn moments(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let s0 = cfg.initial_state()?;
    let m = cfg.noise_model()?;
    let opts = MomentOptions { record_every: cfg.moments.record_every, monitor_psd: true };
    let ode = integrate_moments_with(&MomentState::deterministic(&s0), &cfg.kernel, &m, cfg.sim.t_end, cfg.moments.steps, &opts)?;
    let mc = empirical_moments(&endpoints(ctx, &s0, &m)?)?;
    let (n, d) = (s0.n, s0.dim);
    let mut header = vec!["source".to_string(), "t".to_string()];
    header.extend(crate::csvio::state_columns(n, d));
    for i in 0..n {
        for a in 0..d {
            for c in a..d {
                header.push(format!("cqq{i}_{}{}", axis_name(a), axis_name(c)));
            }
        }
    }
    let mut rows: Vec<Vec<String>> = ode.times.iter().zip(&ode.states).map(|(t, s)| moment_row("ode", *t, s)).collect();
    rows.push(moment_row("mc", cfg.sim.t_end, &mc));
    let path = ctx.file("moments.csv");
    write_rows(&path, &header, rows)?;
    let last = ode.last();
    let block_err: Vec<f64> = (0..n).map(|i| frobenius_rel(&last.qq_block(i), &mc.qq_block(i))).collect();
    let mean_err = last.mq.iter().zip(&mc.mq).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let summary = json!({
        "t_end": cfg.sim.t_end,
        "n_samples": cfg.sampling.n_samples,
        "qq_block_rel_err": block_err,
        "cqq_rel_err": frobenius_rel(&last.cqq, &mc.cqq),
        "max_mean_abs_err": mean_err,
        "min_eigenvalue": ode.min_eigenvalue.iter().cloned().fold(f64::INFINITY, f64::min),
        "seeds": ctx.seeds,
    });
    ctx.json("moments_summary.json", &summary)?;
    ctx.noise_csv(&m, &[("amplitude".into(), m.clone())])
}

fn bridge(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let task = cfg.bridge.as_ref().ok_or_else(|| Error::Config { path: "bridge".into(), message: "this task needs a bridge block".into() })?;
    let s0 = cfg.initial_state()?;
    let m = cfg.noise_model()?;
    let v = task.target.concat();
    let seed = ctx.seed("bridges", TAG_BRIDGES);
    let bs = sample_bridges(&s0, &cfg.kernel, &m, &task.scheme, cfg.sim.t_end, task.steps, &v, task.n_bridges, seed)?;
    let k = task.record_paths.min(bs.len());
    if k > 0 {
        let paths: Vec<Trajectory> =
            bs[..k].iter().map(|b| Trajectory { times: b.times.clone(), states: b.states.clone() }).collect();
        ctx.trajectory_csv("bridges.csv", "bridge", &paths)?;
    }
    let w = stabilised_weights(&bs)?;
    let sw: f64 = w.iter().sum();
    let density = if task.scheme.shrink_noise { None } else { Some(density_from_bridges(&s0, &m, cfg.sim.t_end, &bs, task.scheme.rcond)?) };
    let hit: Vec<f64> = bs.iter().map(|b| b.hit_error).collect();
    let sidecar = json!({
        "target": v,
        "n_bridges": task.n_bridges,
        "steps": task.steps,
        "scheme": task.scheme,
        "log_phi": bs.iter().map(|b| b.log_phi).collect::<Vec<_>>(),
        "weights": w.iter().map(|x| x / sw).collect::<Vec<_>>(),
        "ess": effective_sample_size(&w),
        "hit_error": hit,
        "max_hit_error": hit.iter().cloned().fold(0.0, f64::max),
        "density": density,
        "seeds": ctx.seeds,
    });
    ctx.json("bridges.json", &sidecar)?;
    ctx.noise_csv(&m, &[("amplitude".into(), m.clone())])
}

/// The inference problem with its observations and, for synthetic data, the
/// generating parameters.
fn problem(ctx: &mut Ctx) -> Result<(InferenceProblem, Option<Vec<f64>>)> {
    let cfg = ctx.cfg;
    let task = cfg.inference_task()?;
    let s0 = cfg.initial_state()?;
    let layout = cfg.layout()?;
    let (obs, truth) = match &task.data {
        DataSpec::Synthetic { theta, n_observations, steps } => {
            let seed = ctx.seed("data", TAG_DATA);
            let m = layout.model(theta)?;
            let ends = sample_endpoints(&s0, &cfg.kernel, &m, cfg.sim.t_end, *steps, *n_observations, seed)?;
            (ends.into_iter().map(|e| e.q).collect::<Vec<_>>(), Some(theta.clone()))
        }
        DataSpec::Observations(o) => (o.clone(), None),
        DataSpec::Csv(p) => (crate::csvio::read_positions(p, s0.n, s0.dim)?, None),
    };
    let mut header = vec!["observation".to_string()];
    header.extend(crate::csvio::state_columns(s0.n, s0.dim).into_iter().take(s0.nd()));
    let path = ctx.file("observations.csv");
    write_rows(&path, &header, obs.iter().enumerate().map(|(i, o)| std::iter::once(i.to_string()).chain(o.iter().map(|v| fmt(*v))).collect()))?;
    let pr = InferenceProblem::new(s0, cfg.kernel, layout, task.theta_bounds.clone(), cfg.sim.t_end, obs, task.settings.clone())?;
    Ok((pr, truth))
}

fn theta_start(ctx: &Ctx) -> Result<Vec<f64>> {
    let task = ctx.cfg.inference_task()?;
    Ok(task.theta0.clone().unwrap_or_else(|| {
        task.theta_bounds.iter().map(|(lo, hi)| if *lo > 0.0 { (lo * hi).sqrt() } else { 0.5 * (lo + hi) }).collect()
    }))
}

fn position_cov(qs: &[Vec<f64>]) -> DMatrix<f64> {
    let n = qs.len() as f64;
    let dim = qs[0].len();
    let mean: Vec<f64> = (0..dim).map(|a| qs.iter().map(|q| q[a]).sum::<f64>() / n).collect();
    DMatrix::from_fn(dim, dim, |a, b| qs.iter().map(|q| (q[a] - mean[a]) * (q[b] - mean[b])).sum::<f64>() / (n - 1.0))
}

/// Endpoint position covariance under `theta` from forward samples.
fn model_cov(ctx: &mut Ctx, pr: &InferenceProblem, theta: &[f64]) -> Result<DMatrix<f64>> {
    let cfg = ctx.cfg;
    let seed = ctx.seed("covariance_check", TAG_CHECK);
    let n = cfg.inference_task()?.check_samples;
    let ends = sample_endpoints(&pr.start, &pr.kernel, &pr.model(theta)?, pr.t_end, cfg.sim.steps, n, seed)?;
    Ok(position_cov(&ends.into_iter().map(|e| e.q).collect::<Vec<_>>()))
}

fn cov_json(c: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..c.nrows()).map(|r| c.row(r).iter().cloned().collect()).collect()
}

fn infer_moments(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let task = cfg.inference_task()?;
    let (mut pr, truth) = problem(ctx)?;
    if task.moment_fit.exact_target {
        let th = truth.as_ref().expect("validated: exact targets need synthetic data");
        pr = pr.clone().with_target(MomentTarget::from_moments(&pr.moments_at(&pr.start.p, th)?));
    }
    let fit_seed = ctx.seed("fit", TAG_FIT);
    let mut results = Vec::new();
    let mut sets = Vec::new();
    if let Some(th) = &truth {
        sets.push(("true".to_string(), pr.model(th)?));
    }
    for method in &task.moment_fit.methods {
        let mut opts = task.moment_fit.options.clone();
        opts.de.seed = fit_seed;
        let r = fit_moments(&pr, *method, &opts)?;
        sets.push((serde_json::to_value(method)?.as_str().unwrap_or("fit").to_string(), pr.model(&r.theta)?));
        results.push(r);
    }
    let out = json!({
        "theta_true": truth,
        "results": results,
        "seeds": ctx.seeds,
        "config_hash": cfg.hash(),
        "config": cfg,
    });
    ctx.json("inference_moments.json", &out)?;
    ctx.noise_csv(&pr.layout.base, &sets)
}

fn infer_em(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let task = cfg.inference_task()?;
    let (pr, truth) = problem(ctx)?;
    let theta0 = theta_start(ctx)?;
    let mut opts = task.em.clone();
    opts.seed = ctx.seed("em", TAG_EM);
    let r = em_fit(&pr, &theta0, &opts)?;
    let data_cov = position_cov(&pr.observations);
    let cov_hat = model_cov(ctx, &pr, r.theta())?;
    let truth_err = match &truth {
        Some(th) => Some(frobenius_rel(&model_cov(ctx, &pr, th)?, &data_cov)),
        None => None,
    };
    let out = json!({
        "theta_hat": r.theta(),
        "theta_true": truth,
        "theta0": theta0,
        "em": r,
        "cov_data": cov_json(&data_cov),
        "cov_model": cov_json(&cov_hat),
        "cov_rel_err": frobenius_rel(&cov_hat, &data_cov),
        "cov_rel_err_truth": truth_err,
        "seeds": ctx.seeds,
        "config_hash": cfg.hash(),
        "config": cfg,
    });
    ctx.json("inference_em.json", &out)?;
    let mut sets = vec![("estimate".to_string(), pr.model(r.theta())?)];
    if let Some(th) = &truth {
        sets.insert(0, ("true".to_string(), pr.model(th)?));
    }
    ctx.noise_csv(&pr.layout.base, &sets)
}

fn infer_mle(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let task = cfg.inference_task()?;
    let (pr, truth) = problem(ctx)?;
    let theta0 = theta_start(ctx)?;
    let mut opts = task.mle.clone();
    opts.seed = ctx.seed("mle", TAG_MLE);
    let r = mle_direct(&pr, &theta0, &opts)?;
    let out = json!({
        "theta_hat": r.theta,
        "theta_true": truth,
        "theta0": theta0,
        "mle": {
            "loglik": r.loglik,
            "trace": r.trace,
            "evaluations": r.evaluations,
            "converged": r.converged,
        },
        "seeds": ctx.seeds,
        "config_hash": cfg.hash(),
        "config": cfg,
    });
    ctx.json("inference_mle.json", &out)
}

fn shoot_task(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let task = cfg.shoot.as_ref().ok_or_else(|| Error::Config { path: "shoot".into(), message: "this task needs a shoot block".into() })?;
    let s0 = cfg.initial_state()?;
    let target = task.target.concat();
    let r = shoot(&s0.q, &target, s0.n, s0.dim, &cfg.kernel, cfg.sim.t_end, cfg.sim.steps, &task.options)?;
    let tr = flow_deterministic(&s0.with_momentum(r.p0.clone()), &cfg.kernel, cfg.sim.t_end, cfg.sim.steps)?;
    ctx.trajectory_csv("shoot_path.csv", "path", &[tr])?;
    let out = json!({
        "p0": r.p0,
        "mismatch": r.mismatch,
        "converged": r.converged,
        "iterations": r.iterations,
        "target": target,
    });
    ctx.json("shoot.json", &out)
}

/// Root mean square distance to the deterministic endpoint and relative
/// change of consecutive-landmark distances, averaged over paths.
fn spread(ends: &[&LandmarkState], det: &LandmarkState) -> (f64, f64) {
    let (n, d) = (det.n, det.dim);
    let dist = |q: &[f64], i: usize, j: usize| (0..d).map(|a| (q[i * d + a] - q[j * d + a]).powi(2)).sum::<f64>().sqrt();
    let mut disp = 0.0;
    let mut strain = 0.0;
    for e in ends {
        disp += (e.q.iter().zip(&det.q).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64).sqrt();
        if n > 1 {
            let s: f64 = (0..n - 1).map(|i| (dist(&e.q, i, i + 1) / dist(&det.q, i, i + 1) - 1.0).powi(2)).sum();
            strain += (s / (n - 1) as f64).sqrt();
        }
    }
    (disp / ends.len() as f64, strain / ends.len() as f64)
}

fn baseline(ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    let task =
        cfg.baseline.as_ref().ok_or_else(|| Error::Config { path: "baseline".into(), message: "this task needs a baseline block".into() })?;
    if task.n_paths == 0 {
        return Err(Error::Config { path: "baseline.n_paths".into(), message: "need at least one path".into() });
    }
    let s0 = cfg.initial_state()?;
    let m = cfg.noise_model()?;
    let (t_end, steps) = (cfg.sim.t_end, cfg.sim.steps);
    let seed = ctx.seed("baseline", TAG_BASELINE);
    let eul = (0..task.n_paths as u64)
        .map(|i| simulate_sde_stream(&s0, &cfg.kernel, &m, t_end, steps, seed, i).map(|p| p.trajectory()))
        .collect::<Result<Vec<_>>>()?;
    let add_seed = derive_seed(seed, u64::MAX);
    let add = (0..task.n_paths as u64)
        .map(|i| simulate_additive_baseline(&s0, &cfg.kernel, task.sigma_const, t_end, steps, derive_seed(add_seed, i)).map(|p| p.trajectory()))
        .collect::<Result<Vec<_>>>()?;
    ctx.trajectory_csv("eulerian_paths.csv", "path", &eul)?;
    ctx.trajectory_csv("additive_paths.csv", "path", &add)?;
    let det = flow_heun(&s0, &cfg.kernel, t_end, steps)?;
    let (ed, es) = spread(&eul.iter().map(|t| t.last()).collect::<Vec<_>>(), det.last());
    let (ad, as_) = spread(&add.iter().map(|t| t.last()).collect::<Vec<_>>(), det.last());
    let out = json!({
        "eulerian": {"rms_displacement": ed, "neighbour_strain": es},
        "additive": {"rms_displacement": ad, "neighbour_strain": as_},
        "sigma_const": task.sigma_const,
        "seeds": ctx.seeds,
    });
    ctx.json("baseline.json", &out)?;
    ctx.noise_csv(&m, &[("amplitude".into(), m.clone())])
}
