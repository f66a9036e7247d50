//! Experiment configuration: JSON in, fully resolved JSON out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridges::GuidingScheme;
use crate::error::{Error, Result};
use crate::hamiltonian::{shoot, ShootOptions};
use crate::inference::{EmOptions, FitMethod, FitOptions, InferenceSettings, LayoutKind, MleOptions, ThetaLayout};
use crate::kernels::{make_grid_noise, Extent, KernelKind, KernelSpec, NoiseModel};
use crate::sde::SimSettings;
use crate::state::{ellipse_points, LandmarkState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub landmarks: LandmarkSpec,
    #[serde(default)]
    pub momenta: MomentumSpec,
    pub kernel: KernelSpec,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub sim: SimSettings,
    #[serde(default)]
    pub sampling: SamplingSpec,
    #[serde(default)]
    pub moments: MomentSpec,
    #[serde(default)]
    pub bridge: Option<BridgeTask>,
    #[serde(default)]
    pub inference: Option<InferenceTask>,
    #[serde(default)]
    pub shoot: Option<ShootTask>,
    #[serde(default)]
    pub baseline: Option<BaselineTask>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Initial landmark positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LandmarkSpec {
    /// One row per landmark.
    Points(Vec<Vec<f64>>),
    Ellipse { n: usize, radii: [f64; 2], center: [f64; 2] },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MomentumSpec {
    #[default]
    Zero,
    /// The same momentum for every landmark.
    Uniform(Vec<f64>),
    /// One row per landmark.
    Points(Vec<Vec<f64>>),
    /// Momenta of the geodesic reaching `target` at `sim.t_end`.
    Shoot {
        target: LandmarkSpec,
        #[serde(default = "default_shoot_steps")]
        steps: usize,
        #[serde(default)]
        options: ShootOptions,
    },
}

fn default_shoot_steps() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    /// Explicit fields.
    Fields(NoiseModel),
    /// Regular grids of fields, one grid per amplitude in `families`.
    Grid(GridNoise),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridNoise {
    pub kind: KernelKind,
    pub n_per_side: usize,
    pub extent: Extent,
    pub scale: f64,
    pub families: Vec<Vec<f64>>,
    /// Divide each family's amplitudes by `Σ_l k_l` at the first landmark, so
    /// a partition-of-unity grid has unit total amplitude there.
    #[serde(default)]
    pub normalise_at_start: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSpec {
    pub n_samples: usize,
    /// Number of full paths written next to the endpoints.
    pub record_paths: usize,
    /// Keep every `record_every`-th time step of recorded paths.
    pub record_every: usize,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self { n_samples: 1000, record_paths: 10, record_every: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentSpec {
    pub steps: usize,
    pub record_every: usize,
}

impl Default for MomentSpec {
    fn default() -> Self {
        Self { steps: 500, record_every: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeTask {
    /// Target positions, one row per landmark.
    pub target: Vec<Vec<f64>>,
    #[serde(default)]
    pub scheme: GuidingScheme,
    #[serde(default = "default_bridges")]
    pub n_bridges: usize,
    #[serde(default = "default_bridge_steps")]
    pub steps: usize,
    #[serde(default = "default_record_paths")]
    pub record_paths: usize,
}

fn default_bridges() -> usize {
    100
}

fn default_bridge_steps() -> usize {
    1000
}

fn default_record_paths() -> usize {
    20
}

/// Where the observed endpoints come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Forward samples under `theta` (Heun with `steps` steps).
    Synthetic { theta: Vec<f64>, n_observations: usize, steps: usize },
    /// Flat position vectors, one per observation.
    Observations(Vec<Vec<f64>>),
    /// A CSV file with `q{i}_{axis}` columns.
    Csv(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceTask {
    pub layout: LayoutKind,
    pub theta_bounds: Vec<(f64, f64)>,
    /// Start for EM and MLE; the geometric centre of the bounds when absent.
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    pub data: DataSpec,
    #[serde(default)]
    pub settings: InferenceSettings,
    #[serde(default)]
    pub moment_fit: MomentFitTask,
    #[serde(default)]
    pub em: EmOptions,
    #[serde(default)]
    pub mle: MleOptions,
    /// Forward samples used to compare model and data covariances.
    #[serde(default = "default_check_samples")]
    pub check_samples: usize,
}

fn default_check_samples() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentFitTask {
    pub methods: Vec<FitMethod>,
    /// Match the moment-ODE moments at the synthetic `theta` instead of the
    /// sample moments of the observations.
    pub exact_target: bool,
    pub options: FitOptions,
}

impl Default for MomentFitTask {
    fn default() -> Self {
        Self {
            methods: vec![FitMethod::DifferentialEvolution, FitMethod::GradientDescent],
            exact_target: false,
            options: FitOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShootTask {
    pub target: Vec<Vec<f64>>,
    #[serde(default)]
    pub options: ShootOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineTask {
    /// Standard deviation rate of the additive momentum noise.
    pub sigma_const: f64,
    #[serde(default = "default_baseline_paths")]
    pub n_paths: usize,
}

fn default_baseline_paths() -> usize {
    10
}

fn config_error(path: String, message: String) -> Error {
    Error::Config { path: if path.is_empty() { ".".into() } else { path }, message }
}

fn flatten_rows(rows: &[Vec<f64>], d: usize, what: &str) -> Result<Vec<f64>> {
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid(format!("{what}: every row needs {d} coordinates")));
    }
    Ok(rows.concat())
}

impl LandmarkSpec {
    fn positions(&self, d: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            LandmarkSpec::Points(rows) => flatten_rows(rows, d, what),
            LandmarkSpec::Ellipse { n, radii, center } => {
                if d != 2 {
                    return Err(config_error(what.into(), "ellipses need d = 2".into()));
                }
                Ok(ellipse_points(*n, *radii, *center))
            }
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(s);
        let cfg: Self =
            serde_path_to_error::deserialize(de).map_err(|e| config_error(e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json_str(&s)
    }

    /// Pretty JSON with every default written out.
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_pretty() + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// SHA-256 of the compact resolved JSON.
    pub fn hash(&self) -> String {
        let s = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(s.as_bytes()))
    }

    pub fn dim(&self) -> usize {
        match &self.landmarks {
            LandmarkSpec::Points(rows) => rows.first().map_or(0, |r| r.len()),
            LandmarkSpec::Ellipse { .. } => 2,
        }
    }

    pub fn initial_state(&self) -> Result<LandmarkState> {
        let d = self.dim();
        let q = self.landmarks.positions(d, "landmarks")?;
        let n = q.len() / d.max(1);
        let p = match &self.momenta {
            MomentumSpec::Zero => vec![0.0; q.len()],
            MomentumSpec::Uniform(v) => {
                if v.len() != d {
                    return Err(config_error("momenta.uniform".into(), format!("expected {d} coordinates")));
                }
                v.repeat(n)
            }
            MomentumSpec::Points(rows) => {
                if rows.len() != n {
                    return Err(config_error("momenta.points".into(), format!("expected {n} rows")));
                }
                flatten_rows(rows, d, "momenta")?
            }
            MomentumSpec::Shoot { target, steps, options } => {
                let qt = target.positions(d, "momenta.shoot.target")?;
                if qt.len() != q.len() {
                    return Err(config_error("momenta.shoot.target".into(), format!("expected {n} landmarks")));
                }
                let r = shoot(&q, &qt, n, d, &self.kernel, self.sim.t_end, *steps, options)?;
                if !r.converged {
                    log::warn!("shooting for the initial momenta stopped at mismatch {:e}", r.mismatch);
                }
                r.p0
            }
        };
        LandmarkState::new(n, d, q, p)
    }

    /// The noise model; an error if the config has none.
    pub fn noise_model(&self) -> Result<NoiseModel> {
        let spec = self.noise.as_ref().ok_or_else(|| config_error("noise".into(), "this task needs a noise model".into()))?;
        match spec {
            NoiseSpec::Fields(m) => {
                m.validate()?;
                Ok(m.clone())
            }
            NoiseSpec::Grid(g) => {
                let q0 = self.initial_state()?.q[..self.dim()].to_vec();
                let mut out: Option<NoiseModel> = None;
                for (f, amp) in g.families.iter().enumerate() {
                    let mut fam = make_grid_noise(g.kind, g.n_per_side, &g.extent, g.scale, std::slice::from_ref(amp))?;
                    if g.normalise_at_start {
                        let sum: f64 = (0..fam.n_fields()).map(|l| fam.kernel(l).radial(dist(&q0, &fam.fields[l].center)).value).sum();
                        if !(sum > 0.0) {
                            return Err(config_error(
                                format!("noise.grid.families[{f}]"),
                                "no field reaches the first landmark, cannot normalise".into(),
                            ));
                        }
                        fam = fam.scaled(1.0 / sum);
                    }
                    out = Some(match out {
                        None => fam,
                        Some(m) => m.concat(fam)?,
                    });
                }
                out.ok_or_else(|| config_error("noise.grid.families".into(), "need at least one family".into()))
            }
        }
    }

    pub fn layout(&self) -> Result<ThetaLayout> {
        let t = self.inference_task()?;
        ThetaLayout::new(t.layout, self.noise_model()?)
    }

    pub fn inference_task(&self) -> Result<&InferenceTask> {
        self.inference.as_ref().ok_or_else(|| config_error("inference".into(), "this task needs an inference block".into()))
    }

    /// Cross-field checks that the schema cannot express.
    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(config_error("landmarks".into(), "need at least one landmark".into()));
        }
        if let LandmarkSpec::Ellipse { n, .. } = &self.landmarks {
            if *n == 0 {
                return Err(config_error("landmarks.ellipse.n".into(), "need at least one landmark".into()));
            }
        }
        self.initial_state()?;
        self.kernel.validate().map_err(|e| config_error("kernel".into(), e.to_string()))?;
        if self.sim.steps == 0 || !(self.sim.t_end.is_finite() && self.sim.t_end > 0.0) {
            return Err(config_error("sim".into(), "need steps >= 1 and a positive t_end".into()));
        }
        if self.sampling.record_every == 0 || self.moments.record_every == 0 || self.moments.steps == 0 {
            return Err(config_error("sampling/moments".into(), "steps and record_every must be >= 1".into()));
        }
        if self.noise.is_some() {
            let m = self.noise_model()?;
            if m.dim() != d {
                return Err(config_error("noise".into(), format!("fields are {}-dimensional, landmarks {d}", m.dim())));
            }
        }
        let rows_ok = |rows: &[Vec<f64>], n: usize| rows.len() == n && rows.iter().all(|r| r.len() == d);
        let n = self.initial_state()?.n;
        if let Some(b) = &self.bridge {
            if !rows_ok(&b.target, n) {
                return Err(config_error("bridge.target".into(), format!("expected {n} rows of {d} coordinates")));
            }
            b.scheme.validate().map_err(|e| config_error("bridge.scheme".into(), e.to_string()))?;
        }
        if let Some(s) = &self.shoot {
            if !rows_ok(&s.target, n) {
                return Err(config_error("shoot.target".into(), format!("expected {n} rows of {d} coordinates")));
            }
        }
        if let Some(t) = &self.inference {
            let layout = self.layout()?;
            if t.theta_bounds.len() != layout.n_params() {
                return Err(config_error(
                    "inference.theta_bounds".into(),
                    format!("layout has {} parameters, got {} bounds", layout.n_params(), t.theta_bounds.len()),
                ));
            }
            if let Some(th) = &t.theta0 {
                if th.len() != layout.n_params() {
                    return Err(config_error("inference.theta0".into(), format!("expected {} values", layout.n_params())));
                }
            }
            if let DataSpec::Synthetic { theta, n_observations, steps } = &t.data {
                if theta.len() != layout.n_params() || *n_observations < 2 || *steps == 0 {
                    return Err(config_error(
                        "inference.data.synthetic".into(),
                        format!("need {} theta values, >= 2 observations and >= 1 step", layout.n_params()),
                    ));
                }
            }
            if t.moment_fit.exact_target && !matches!(t.data, DataSpec::Synthetic { .. }) {
                return Err(config_error("inference.moment_fit.exact_target".into(), "needs synthetic data".into()));
            }
        }
        Ok(())
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "t",
        "landmarks": {"points": [[0.3, 0.5], [0.7, 0.5]]},
        "kernel": {"kind": "gaussian", "scale": 0.2}
    }"#;

    #[test]
    fn defaults_are_written_out() {
        let c = ExperimentConfig::from_json_str(MINIMAL).unwrap();
        let json = c.to_json_pretty();
        assert!(json.contains("\"n_samples\": 1000") && json.contains("\"output_dir\": \"out\""));
        assert_eq!(ExperimentConfig::from_json_str(&json).unwrap(), c);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let bad = MINIMAL.replace("\"scale\": 0.2", "\"scale\": 0.2, \"sclae\": 1");
        match ExperimentConfig::from_json_str(&bad) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "kernel.sclae"),
            other => panic!("{other:?}"),
        }
        let bad = MINIMAL.replace("\"name\": \"t\",", "\"name\": \"t\", \"sampling\": {\"n_sample\": 3},");
        match ExperimentConfig::from_json_str(&bad) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "sampling.n_sample"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn type_errors_name_their_path() {
        let bad = MINIMAL.replace("0.2}", "\"wide\"}");
        match ExperimentConfig::from_json_str(&bad) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "kernel.scale"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn normalised_grid_sums_to_one_at_start() {
        let s = MINIMAL.replace(
            "\"kernel\"",
            r#""noise": {"grid": {"kind": "cubic_b_spline", "n_per_side": 8, "extent": {"lower": [-0.5, -0.5], "upper": [1.5, 1.5]},
                "scale": 0.3, "families": [[0.1, 0.0]], "normalise_at_start": true}},
               "kernel""#,
        );
        let c = ExperimentConfig::from_json_str(&s).unwrap();
        let m = c.noise_model().unwrap();
        let mut sig = vec![0.0; 2 * m.n_fields()];
        m.sigma_at(&[0.3, 0.5], &mut sig);
        let sx: f64 = sig.iter().step_by(2).sum();
        assert!((sx - 0.1).abs() < 1e-12, "{sx}");
    }

    #[test]
    fn cross_field_checks() {
        let s = MINIMAL.replace("\"kernel\"", "\"shoot\": {\"target\": [[0.3, 0.5]]}, \"kernel\"");
        match ExperimentConfig::from_json_str(&s) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "shoot.target"),
            other => panic!("{other:?}"),
        }
        let s = MINIMAL.replace("\"kernel\"", "\"momenta\": {\"uniform\": [1.0]}, \"kernel\"");
        assert!(ExperimentConfig::from_json_str(&s).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_json_str(MINIMAL).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
