//! Radial scalar kernels and the Eulerian noise fields built from them.
//!
//! A noise field is `σ_l(q) = λ_l k_{r_l}(‖q − δ_l‖)`: a fixed amplitude vector
//! modulated by a radial bump centred at `δ_l`. Fields live in the image domain,
//! not on the landmarks, so nearby landmarks see correlated perturbations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Gaussian,
    CubicBSpline,
}

/// A radial kernel `k(x)` with length scale `scale`.
///
/// Both kinds satisfy `k(0) = 1`. The cubic B-spline is the centred cardinal
/// spline `S₃(x / r)` rescaled by `1 / S₃(0) = 3/2`, supported on `|x| < 2r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub scale: f64,
}

/// Value and first two derivatives of a scalar kernel at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelValue {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Radial factors of a kernel at distance `ρ`, chosen so that derivatives of
/// `x ↦ k(‖x‖)` never divide by `ρ`:
///
/// * `∇ k(‖x‖) = g(ρ) x`
/// * `∇² k(‖x‖) = g(ρ) I + h(ρ) x xᵀ`
///
/// with `g = k′/ρ` and `h = g′/ρ`. For the B-spline `h` diverges like `1/ρ` at
/// the centre while `h x xᵀ → 0`; callers get the product via [`RadialFactors::hess_outer`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadialFactors {
    pub value: f64,
    pub g: f64,
    pub h: f64,
}

impl RadialFactors {
    /// `h(ρ)·ρ²`, i.e. the coefficient multiplying the unit outer product `x̂ x̂ᵀ`.
    pub fn hess_outer(&self, rho: f64) -> f64 {
        if rho == 0.0 {
            0.0
        } else {
            self.h * rho * rho
        }
    }
}

const BSPLINE_NORM: f64 = 1.5;

impl KernelSpec {
    pub fn new(kind: KernelKind, scale: f64) -> Result<Self> {
        let spec = Self { kind, scale };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gaussian(scale: f64) -> Self {
        Self { kind: KernelKind::Gaussian, scale }
    }

    pub fn cubic_bspline(scale: f64) -> Self {
        Self { kind: KernelKind::CubicBSpline, scale }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::invalid(format!(
                "kernel scale must be positive and finite, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Radius beyond which the kernel is identically zero, if any.
    pub fn support(&self) -> Option<f64> {
        match self.kind {
            KernelKind::Gaussian => None,
            KernelKind::CubicBSpline => Some(2.0 * self.scale),
        }
    }

    /// `k(x)`, `k′(x)`, `k″(x)` for `x ≥ 0`.
    pub fn eval(&self, x: f64) -> Result<KernelValue> {
        if !x.is_finite() {
            return Err(Error::invalid(format!("kernel argument must be finite, got {x}")));
        }
        if x < 0.0 {
            return Err(Error::invalid(format!("kernel argument must be non-negative, got {x}")));
        }
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: f64) -> KernelValue {
        let r = self.scale;
        match self.kind {
            KernelKind::Gaussian => {
                let inv_r2 = 1.0 / (r * r);
                let value = (-0.5 * x * x * inv_r2).exp();
                KernelValue {
                    value,
                    d1: -x * inv_r2 * value,
                    d2: (x * x * inv_r2 - 1.0) * inv_r2 * value,
                }
            }
            KernelKind::CubicBSpline => {
                let s = x / r;
                if s < 1.0 {
                    KernelValue {
                        value: 1.0 - 1.5 * s * s + 0.75 * s * s * s,
                        d1: (-3.0 * s + 2.25 * s * s) / r,
                        d2: (-3.0 + 4.5 * s) / (r * r),
                    }
                } else if s < 2.0 {
                    let u = 2.0 - s;
                    KernelValue {
                        value: 0.25 * u * u * u,
                        d1: -0.75 * u * u / r,
                        d2: 1.5 * u / (r * r),
                    }
                } else {
                    KernelValue { value: 0.0, d1: 0.0, d2: 0.0 }
                }
            }
        }
    }

    /// Radial factors at distance `rho ≥ 0`; see [`RadialFactors`].
    pub fn radial(&self, rho: f64) -> RadialFactors {
        let r = self.scale;
        match self.kind {
            KernelKind::Gaussian => {
                let inv_r2 = 1.0 / (r * r);
                let value = (-0.5 * rho * rho * inv_r2).exp();
                RadialFactors { value, g: -inv_r2 * value, h: inv_r2 * inv_r2 * value }
            }
            KernelKind::CubicBSpline => {
                let s = rho / r;
                let r2 = r * r;
                if s < 1.0 {
                    let value = 1.0 - 1.5 * s * s + 0.75 * s * s * s;
                    let g = (-3.0 + 2.25 * s) / r2;
                    // g′(ρ)/ρ = 2.25 / (r³ ρ)
                    let h = if s == 0.0 { f64::INFINITY } else { 2.25 / (r2 * r2 * s) };
                    RadialFactors { value, g, h }
                } else if s < 2.0 {
                    let u = 2.0 - s;
                    let value = 0.25 * u * u * u;
                    let g = -0.75 * u * u / (r2 * s);
                    let h = (1.5 * u + 0.75 * u * u / s) / (r2 * r2 * s * s);
                    RadialFactors { value, g, h }
                } else {
                    RadialFactors { value: 0.0, g: 0.0, h: 0.0 }
                }
            }
        }
    }

    /// Normalisation used for the B-spline (`1 / S₃(0)`), exposed for tests.
    pub fn bspline_normalisation() -> f64 {
        BSPLINE_NORM
    }
}

/// A single Eulerian noise field `σ(q) = amplitude · k(‖q − center‖)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseField {
    pub center: Vec<f64>,
    pub scale: f64,
    pub amplitude: Vec<f64>,
}

/// The collection of `J` noise fields sharing one kernel kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub kind: KernelKind,
    pub fields: Vec<NoiseField>,
}

/// `σ_l(q)` and its first two derivatives for every field.
///
/// Layout (row-major, `d` the ambient dimension):
/// `sigma[l*d + β]`, `grad[(l*d + β)*d + γ] = ∂σ_l^β/∂q^γ`,
/// `hess[((l*d + β)*d + γ)*d + μ] = ∂²σ_l^β/∂q^γ∂q^μ`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldEval {
    pub n_fields: usize,
    pub dim: usize,
    pub sigma: Vec<f64>,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

impl FieldEval {
    pub fn sigma(&self, l: usize, beta: usize) -> f64 {
        self.sigma[l * self.dim + beta]
    }

    pub fn grad(&self, l: usize, beta: usize, gamma: usize) -> f64 {
        self.grad[(l * self.dim + beta) * self.dim + gamma]
    }

    pub fn hess(&self, l: usize, beta: usize, gamma: usize, mu: usize) -> f64 {
        let d = self.dim;
        self.hess[((l * d + beta) * d + gamma) * d + mu]
    }
}

impl NoiseModel {
    pub fn new(kind: KernelKind, fields: Vec<NoiseField>) -> Result<Self> {
        let model = Self { kind, fields };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.fields.first() else {
            return Err(Error::invalid("noise model needs at least one field"));
        };
        let d = first.center.len();
        if d == 0 {
            return Err(Error::invalid("noise field centers must have dimension >= 1"));
        }
        for (l, f) in self.fields.iter().enumerate() {
            if f.center.len() != d || f.amplitude.len() != d {
                return Err(Error::invalid(format!("noise field {l} has inconsistent dimension")));
            }
            if !(f.scale.is_finite() && f.scale > 0.0) {
                return Err(Error::invalid(format!("noise field {l} has non-positive scale {}", f.scale)));
            }
            if f.center.iter().chain(&f.amplitude).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("noise field {l} has non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn n_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn dim(&self) -> usize {
        self.fields.first().map_or(0, |f| f.center.len())
    }

    pub fn kernel(&self, l: usize) -> KernelSpec {
        KernelSpec { kind: self.kind, scale: self.fields[l].scale }
    }

    /// Join two field collections of the same kernel kind.
    pub fn concat(mut self, other: NoiseModel) -> Result<Self> {
        if self.kind != other.kind {
            return Err(Error::invalid("cannot join noise models with different kernel kinds"));
        }
        self.fields.extend(other.fields);
        self.validate()?;
        Ok(self)
    }

    /// Copy with every amplitude multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for f in &mut out.fields {
            for a in &mut f.amplitude {
                *a *= factor;
            }
        }
        out
    }

    /// Offset `q − δ_l`, its norm and the radial factors for field `l`.
    pub(crate) fn radial_at(&self, l: usize, q: &[f64], offset: &mut [f64]) -> (f64, RadialFactors) {
        let field = &self.fields[l];
        let mut rho2 = 0.0;
        for ((o, qa), ca) in offset.iter_mut().zip(q).zip(&field.center) {
            *o = qa - ca;
            rho2 += *o * *o;
        }
        let rho = rho2.sqrt();
        (rho, self.kernel(l).radial(rho))
    }

    /// Values of all fields at `q` (no derivatives).
    pub fn sigma_at(&self, q: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let mut offset = vec![0.0; d];
        for l in 0..self.n_fields() {
            let (_, rf) = self.radial_at(l, q, &mut offset);
            let amp = &self.fields[l].amplitude;
            for b in 0..d {
                out[l * d + b] = amp[b] * rf.value;
            }
        }
    }

    /// Evaluate every field with its gradient and Hessian at `q`.
    pub fn eval(&self, q: &[f64]) -> Result<FieldEval> {
        let d = self.dim();
        if q.len() != d {
            return Err(Error::invalid(format!("point has dimension {}, noise model {d}", q.len())));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("noise field evaluation at non-finite point"));
        }
        Ok(self.eval_unchecked(q))
    }

    pub(crate) fn eval_unchecked(&self, q: &[f64]) -> FieldEval {
        let d = self.dim();
        let j = self.n_fields();
        let mut sigma = vec![0.0; j * d];
        let mut grad = vec![0.0; j * d * d];
        let mut hess = vec![0.0; j * d * d * d];
        let mut u = vec![0.0; d];
        for l in 0..j {
            let (rho, rf) = self.radial_at(l, q, &mut u);
            if rf.value == 0.0 && rf.g == 0.0 {
                continue;
            }
            let outer = rf.hess_outer(rho);
            let inv_rho2 = if rho > 0.0 { 1.0 / (rho * rho) } else { 0.0 };
            let amp = &self.fields[l].amplitude;
            for b in 0..d {
                let a = amp[b];
                sigma[l * d + b] = a * rf.value;
                for g in 0..d {
                    grad[(l * d + b) * d + g] = a * rf.g * u[g];
                    for m in 0..d {
                        let delta = if g == m { rf.g } else { 0.0 };
                        hess[((l * d + b) * d + g) * d + m] = a * (delta + outer * u[g] * u[m] * inv_rho2);
                    }
                }
            }
        }
        FieldEval { n_fields: j, dim: d, sigma, grad, hess }
    }
}

/// Axis-aligned box used to lay out noise grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Extent {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Extent {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self { lower, upper }
    }

    pub fn unit_square() -> Self {
        Self::new(vec![0.0, 0.0], vec![1.0, 1.0])
    }
}

/// Regular grid of `n_per_side^d` fields covering `extent`.
///
/// Centres are inset by half a cell from the boundary, so `n = 1` puts a single
/// field in the middle. `amplitudes` holds either one vector shared by all
/// fields or one vector per field in grid order (first axis slowest).
pub fn make_grid_noise(
    kind: KernelKind,
    n_per_side: usize,
    extent: &Extent,
    scale: f64,
    amplitudes: &[Vec<f64>],
) -> Result<NoiseModel> {
    if n_per_side == 0 {
        return Err(Error::invalid("grid needs at least one field per side"));
    }
    let d = extent.lower.len();
    if d == 0 || extent.upper.len() != d {
        return Err(Error::invalid("grid extent has inconsistent dimension"));
    }
    for a in 0..d {
        let (lo, hi) = (extent.lower[a], extent.upper[a]);
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::invalid(format!("degenerate grid extent on axis {a}: [{lo}, {hi}]")));
        }
    }
    let total = n_per_side.pow(d as u32);
    if amplitudes.len() != 1 && amplitudes.len() != total {
        return Err(Error::invalid(format!(
            "grid of {total} fields needs 1 or {total} amplitude vectors, got {}",
            amplitudes.len()
        )));
    }
    let mut fields = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    for flat in 0..total {
        let mut rem = flat;
        for a in (0..d).rev() {
            idx[a] = rem % n_per_side;
            rem /= n_per_side;
        }
        let center = (0..d)
            .map(|a| {
                let cell = (extent.upper[a] - extent.lower[a]) / n_per_side as f64;
                extent.lower[a] + (idx[a] as f64 + 0.5) * cell
            })
            .collect();
        let amplitude = if amplitudes.len() == 1 { amplitudes[0].clone() } else { amplitudes[flat].clone() };
        fields.push(NoiseField { center, scale, amplitude });
    }
    NoiseModel::new(kind, fields)
}
