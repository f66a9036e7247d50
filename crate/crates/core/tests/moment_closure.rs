//! Independent checks of the moment closure right-hand side.
//!
//! 1. A generic engine: the Itô drift and diffusion are assembled as sums of
//!    products of affine forms straight from the tensor expressions
//!    `∂σ`, `∂²σ`, with kernel factors frozen at the means, and all
//!    expectations are taken by Isserlis recursion.
//! 2. The expanded Gaussian-field term formulas (drift, noise and Hamiltonian
//!    contributions written out index by index) for two landmarks.

use nalgebra::DMatrix;
use rand::Rng;
use stochlm::kernels::{KernelKind, KernelSpec, NoiseField, NoiseModel};
use stochlm::moments::{moment_rhs, MomentState};
use stochlm::rng::stream_rng;

#[derive(Clone, Debug)]
struct Lin {
    a: Vec<(usize, f64)>,
    c0: f64,
}

impl Lin {
    fn var(i: usize) -> Self {
        Lin { a: vec![(i, 1.0)], c0: 0.0 }
    }
    fn mean(&self, m: &[f64]) -> f64 {
        self.c0 + self.a.iter().map(|(i, v)| v * m[*i]).sum::<f64>()
    }
    fn cov(&self, o: &Lin, c: &DMatrix<f64>) -> f64 {
        let mut s = 0.0;
        for (i, a) in &self.a {
            for (j, b) in &o.a {
                s += a * b * c[(*i, *j)];
            }
        }
        s
    }
}

#[derive(Clone, Debug)]
struct Term {
    coef: f64,
    factors: Vec<Lin>,
}

type Poly = Vec<Term>;

fn gauss_e(f: &[Lin], m: &[f64], c: &DMatrix<f64>) -> f64 {
    if f.is_empty() {
        return 1.0;
    }
    let rest = &f[1..];
    let mut e = f[0].mean(m) * gauss_e(rest, m, c);
    for k in 0..rest.len() {
        let cv = f[0].cov(&rest[k], c);
        if cv != 0.0 {
            let others: Vec<Lin> = rest.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, l)| l.clone()).collect();
            e += cv * gauss_e(&others, m, c);
        }
    }
    e
}

fn poly_e(p: &Poly, m: &[f64], c: &DMatrix<f64>) -> f64 {
    p.iter().map(|t| t.coef * gauss_e(&t.factors, m, c)).sum()
}

fn poly_grad_e(p: &Poly, dim: usize, m: &[f64], c: &DMatrix<f64>) -> Vec<f64> {
    let mut g = vec![0.0; dim];
    for t in p {
        for k in 0..t.factors.len() {
            let others: Vec<Lin> =
                t.factors.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, l)| l.clone()).collect();
            let e = t.coef * gauss_e(&others, m, c);
            for (i, a) in &t.factors[k].a {
                g[*i] += a * e;
            }
        }
    }
    g
}

fn poly_mul(a: &Poly, b: &Poly) -> Poly {
    let mut out = Vec::new();
    for x in a {
        for y in b {
            let mut f = x.factors.clone();
            f.extend(y.factors.iter().cloned());
            out.push(Term { coef: x.coef * y.coef, factors: f });
        }
    }
    out
}

struct Setup {
    n: usize,
    d: usize,
    kern: KernelSpec,
    model: NoiseModel,
    mean: Vec<f64>,
    cov: DMatrix<f64>,
}

fn random_setup(kind: KernelKind, n: usize, seed: u64) -> Setup {
    let d = 2;
    let mut rng = stream_rng(seed, 0);
    let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    let fields = (0..4)
        .map(|_| NoiseField {
            center: vec![u(0.0, 1.0), u(0.0, 1.0)],
            scale: u(0.25, 0.6),
            amplitude: vec![u(-0.1, 0.1), u(-0.1, 0.1)],
        })
        .collect();
    let model = NoiseModel::new(kind, fields).unwrap();
    let dim = 2 * n * d;
    let mut mean = vec![0.0; dim];
    for i in 0..n * d {
        mean[i] = u(0.2, 0.8);
        mean[n * d + i] = u(-1.0, 1.0);
    }
    let a = DMatrix::from_fn(dim, dim, |_, _| u(-0.1, 0.1));
    let cov = &a * a.transpose();
    Setup { n, d, kern: KernelSpec::gaussian(0.3), model, mean, cov }
}

/// Itô drift and diffusion of the landmark system as polynomials with frozen
/// kernel factors, built from the tensor formulas.
fn build_polys(s: &Setup) -> (Vec<Poly>, Vec<Vec<Poly>>) {
    let (n, d) = (s.n, s.d);
    let nd = n * d;
    let dim = 2 * nd;
    let j = s.model.n_fields();
    let pv = |i: usize, a: usize| Lin::var(nd + i * d + a);
    let mq = &s.mean[..nd];
    let mut f: Vec<Poly> = vec![Vec::new(); dim];
    // Σ[row][l]
    let mut sig: Vec<Vec<Poly>> = vec![vec![Vec::new(); j]; dim];

    for i in 0..n {
        for k in 0..n {
            let rho: f64 = (0..d).map(|a| (mq[i * d + a] - mq[k * d + a]).powi(2)).sum::<f64>().sqrt();
            let rf = s.kern.radial(rho);
            for a in 0..d {
                f[i * d + a].push(Term { coef: rf.value, factors: vec![pv(k, a)] });
                if k != i {
                    for gm in 0..d {
                        // −∂h/∂q_i^α = −Σ_k (p_i·p_k) K′/ρ (q_i − q_k)^α
                        let x = Lin { a: vec![(i * d + a, 1.0), (k * d + a, -1.0)], c0: 0.0 };
                        f[nd + i * d + a].push(Term { coef: -rf.g, factors: vec![pv(i, gm), pv(k, gm), x] });
                    }
                }
            }
        }
    }
    for i in 0..n {
        for l in 0..j {
            let fl = &s.model.fields[l];
            let lam = &fl.amplitude;
            let spec = s.model.kernel(l);
            let rho: f64 = (0..d).map(|a| (mq[i * d + a] - fl.center[a]).powi(2)).sum::<f64>().sqrt();
            let rf = spec.radial(rho);
            let (k, g) = (rf.value, rf.g);
            let h = if kind_is_bspline(&s.model) { spec.radial(rho.max(1e-3 * spec.scale)).h } else { rf.h };
            let u = |a: usize| Lin { a: vec![(i * d + a, 1.0)], c0: -fl.center[a] };
            // σ^β = λ^β k ; ∂_γ σ^β = λ^β g u^γ ; ∂_α∂_γ σ^β = λ^β (g δ_αγ + h u^α u^γ)
            let sigma = |b: usize| -> Poly { vec![Term { coef: lam[b] * k, factors: vec![] }] };
            let dsig = |b: usize, gm: usize| -> Poly { vec![Term { coef: lam[b] * g, factors: vec![u(gm)] }] };
            let ddsig = |b: usize, a: usize, gm: usize| -> Poly {
                let mut p = vec![Term { coef: lam[b] * h, factors: vec![u(a), u(gm)] }];
                if a == gm {
                    p.push(Term { coef: lam[b] * g, factors: vec![] });
                }
                p
            };
            let pp = |b: usize| -> Poly { vec![Term { coef: 1.0, factors: vec![pv(i, b)] }] };
            for a in 0..d {
                // ½ Σ_γ ∂_γ σ^α σ^γ
                for gm in 0..d {
                    for t in poly_mul(&dsig(a, gm), &sigma(gm)) {
                        f[i * d + a].push(Term { coef: 0.5 * t.coef, ..t });
                    }
                }
                // ½ Σ_{β,δ} p^δ ∂_β σ^δ ∂_α σ^β − ½ Σ_{β,γ} p^β ∂_α∂_γ σ^β σ^γ
                for b in 0..d {
                    for dl in 0..d {
                        for t in poly_mul(&poly_mul(&pp(dl), &dsig(dl, b)), &dsig(b, a)) {
                            f[nd + i * d + a].push(Term { coef: 0.5 * t.coef, ..t });
                        }
                    }
                    for gm in 0..d {
                        for t in poly_mul(&poly_mul(&pp(b), &ddsig(b, a, gm)), &sigma(gm)) {
                            f[nd + i * d + a].push(Term { coef: -0.5 * t.coef, ..t });
                        }
                    }
                }
                sig[i * d + a][l] = sigma(a);
                // −∂_α (p·σ) = −Σ_β p^β ∂_α σ^β
                let mut col = Vec::new();
                for b in 0..d {
                    for t in poly_mul(&pp(b), &dsig(b, a)) {
                        col.push(Term { coef: -t.coef, ..t });
                    }
                }
                sig[nd + i * d + a][l] = col;
            }
        }
    }
    (f, sig)
}

fn kind_is_bspline(m: &NoiseModel) -> bool {
    m.kind == KernelKind::CubicBSpline
}

fn engine_rhs(s: &Setup) -> (Vec<f64>, DMatrix<f64>) {
    let dim = s.mean.len();
    let (f, sig) = build_polys(s);
    let dm: Vec<f64> = f.iter().map(|p| poly_e(p, &s.mean, &s.cov)).collect();
    let mut jac = DMatrix::zeros(dim, dim);
    for (r, p) in f.iter().enumerate() {
        let g = poly_grad_e(p, dim, &s.mean, &s.cov);
        for c in 0..dim {
            jac[(r, c)] = g[c];
        }
    }
    let mut gamma = DMatrix::zeros(dim, dim);
    for r in 0..dim {
        for c in 0..dim {
            let mut v = 0.0;
            for l in 0..s.model.n_fields() {
                v += poly_e(&poly_mul(&sig[r][l], &sig[c][l]), &s.mean, &s.cov);
            }
            gamma[(r, c)] = v;
        }
    }
    let jc = &jac * &s.cov;
    (dm, &jc + jc.transpose() + gamma)
}

fn closure_rhs(s: &Setup) -> (Vec<f64>, DMatrix<f64>) {
    let st = MomentState::from_full(s.n, s.d, &s.mean, &s.cov);
    let r = moment_rhs(&st, &s.kern, &s.model).unwrap();
    (r.mq.iter().chain(&r.mp).cloned().collect(), r.full_cov())
}

fn assert_close(a: &[f64], b: &[f64], what: &str) {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= 1e-11 * scale.max(1e-12), "{what}[{k}]: {x} vs {y}");
    }
}

#[test]
fn closure_matches_generic_expectation_engine() {
    for kind in [KernelKind::Gaussian, KernelKind::CubicBSpline] {
        for (n, seed) in [(1, 1), (2, 2), (3, 3)] {
            let s = random_setup(kind, n, seed);
            let (dm_a, dc_a) = closure_rhs(&s);
            let (dm_b, dc_b) = engine_rhs(&s);
            assert_close(&dm_a, &dm_b, &format!("{kind:?} n={n} mean"));
            assert_close(dc_a.as_slice(), dc_b.as_slice(), &format!("{kind:?} n={n} cov"));
        }
    }
}

/// Expanded Gaussian-field formulas for two landmarks, written term by term.
struct Expanded<'a> {
    s: &'a Setup,
}

impl Expanded<'_> {
    fn nd(&self) -> usize {
        self.s.n * self.s.d
    }
    fn q(&self, i: usize, a: usize) -> f64 {
        self.s.mean[i * self.s.d + a]
    }
    fn p(&self, i: usize, a: usize) -> f64 {
        self.s.mean[self.nd() + i * self.s.d + a]
    }
    fn dqq(&self, i: usize, a: usize, j: usize, b: usize) -> f64 {
        self.s.cov[(i * self.s.d + a, j * self.s.d + b)]
    }
    fn dpp(&self, i: usize, a: usize, j: usize, b: usize) -> f64 {
        let nd = self.nd();
        self.s.cov[(nd + i * self.s.d + a, nd + j * self.s.d + b)]
    }
    /// Δ⟨p_i^α q_j^β⟩
    fn dpq(&self, i: usize, a: usize, j: usize, b: usize) -> f64 {
        self.s.cov[(self.nd() + i * self.s.d + a, j * self.s.d + b)]
    }
    fn kern(&self, i: usize, j: usize) -> f64 {
        let d = self.s.d;
        let r2: f64 = (0..d).map(|a| (self.q(i, a) - self.q(j, a)).powi(2)).sum();
        let al = self.s.kern.scale;
        (-r2 / (2.0 * al * al)).exp()
    }
    fn alpha2(&self) -> f64 {
        self.s.kern.scale.powi(2)
    }
    fn r2(&self, l: usize) -> f64 {
        self.s.model.fields[l].scale.powi(2)
    }
    fn delta(&self, l: usize, a: usize) -> f64 {
        self.s.model.fields[l].center[a]
    }
    /// σ_l^α(⟨q_i⟩)
    fn sig(&self, l: usize, i: usize, a: usize) -> f64 {
        let f = &self.s.model.fields[l];
        let r2: f64 = (0..self.s.d).map(|b| (self.q(i, b) - f.center[b]).powi(2)).sum();
        f.amplitude[a] * (-r2 / (2.0 * self.r2(l))).exp()
    }
    fn nf(&self) -> usize {
        self.s.model.n_fields()
    }

    fn dq_mean(&self, i: usize, a: usize) -> f64 {
        let (n, d) = (self.s.n, self.s.d);
        let mut v = 0.0;
        for j in 0..n {
            v += self.p(j, a) * self.kern(i, j);
        }
        for l in 0..self.nf() {
            for g in 0..d {
                v -= 1.0 / (2.0 * self.r2(l)) * self.sig(l, i, a) * (self.q(i, g) - self.delta(l, g)) * self.sig(l, i, g);
            }
        }
        v
    }

    fn dp_mean(&self, i: usize, a: usize) -> f64 {
        let (n, d) = (self.s.n, self.s.d);
        let mut ap = 0.0;
        for j in 0..n {
            for g in 0..d {
                ap += self.kern(i, j)
                    * (self.p(i, g) * self.p(j, g) * self.q(i, a)
                        + self.dpp(i, g, j, g) * self.q(i, a)
                        + self.p(i, g) * self.dpq(j, g, i, a)
                        + self.dpq(i, g, i, a) * self.p(j, g)
                        - self.p(i, g) * self.p(j, g) * self.q(j, a)
                        - self.dpp(i, g, j, g) * self.q(j, a)
                        - self.p(i, g) * self.dpq(j, g, j, a)
                        - self.dpq(i, g, j, a) * self.p(j, g));
            }
        }
        ap /= self.alpha2();
        let mut bp = 0.0;
        for l in 0..self.nf() {
            for g in 0..d {
                bp += 1.0 / (2.0 * self.r2(l)) * self.p(i, g) * self.sig(l, i, g) * self.sig(l, i, a);
            }
        }
        ap + bp
    }

    fn dqq_rate(&self, i: usize, a: usize, j: usize, b: usize) -> f64 {
        let half = |i: usize, a: usize, j: usize, b: usize| {
            let mut v = 0.0;
            for k in 0..self.s.n {
                v += self.dpq(k, b, i, a) * self.kern(j, k);
            }
            for l in 0..self.nf() {
                for g in 0..self.s.d {
                    v -= 1.0 / (2.0 * self.r2(l)) * self.dqq(i, a, j, g) * self.sig(l, j, g) * self.sig(l, j, b);
                }
            }
            v
        };
        let mut bqq = 0.0;
        for l in 0..self.nf() {
            bqq += self.sig(l, i, a) * self.sig(l, j, b);
        }
        half(i, a, j, b) + half(j, b, i, a) + bqq
    }

    fn dpp_rate(&self, i: usize, a: usize, j: usize, b: usize) -> f64 {
        let d = self.s.d;
        let n = self.s.n;
        let app = |i: usize, a: usize, j: usize, b: usize| {
            let mut v = 0.0;
            for k in 0..n {
                for g in 0..d {
                    v += self.kern(j, k)
                        * (self.dpp(i, a, j, g) * self.p(k, g) * self.q(j, b)
                            + self.dpp(i, a, k, g) * self.p(j, g) * self.q(j, b)
                            + self.dpq(i, a, j, b) * self.p(j, g) * self.p(k, g)
                            + self.dpp(i, a, j, g) * self.dpq(k, g, j, b)
                            + self.dpp(i, a, k, g) * self.dpq(j, g, j, b)
                            + self.dpq(i, a, j, b) * self.dpp(k, g, j, g)
                            - self.dpp(i, a, j, g) * self.p(k, g) * self.q(k, b)
                            - self.dpp(i, a, k, g) * self.p(j, g) * self.q(k, b)
                            - self.dpq(i, a, k, b) * self.p(j, g) * self.p(k, g)
                            - self.dpp(i, a, j, g) * self.dpq(k, g, k, b)
                            - self.dpp(i, a, k, g) * self.dpq(j, g, k, b)
                            - self.dpq(i, a, k, b) * self.dpp(k, g, j, g));
                }
            }
            v / self.alpha2()
        };
        let cpp = |i: usize, a: usize, j: usize, b: usize| {
            let mut v = 0.0;
            for l in 0..self.nf() {
                for g in 0..d {
                    v += 0.5 / self.r2(l) * self.sig(l, j, b) * self.sig(l, j, g) * self.dpp(i, a, j, g);
                }
            }
            v
        };
        let mut bpp = 0.0;
        for l in 0..self.nf() {
            let r4 = self.r2(l).powi(2);
            for g in 0..d {
                for dl in 0..d {
                    let (db, da) = (self.delta(l, b), self.delta(l, a));
                    let e = self.p(i, dl) * self.p(j, g) * self.q(i, a) * self.q(j, b)
                        + self.dpp(i, dl, j, g) * self.q(i, a) * self.q(j, b)
                        + self.p(i, dl) * self.dpq(j, g, i, a) * self.q(j, b)
                        + self.p(i, dl) * self.p(j, g) * self.dqq(i, a, j, b)
                        + self.dpq(i, dl, i, a) * self.p(j, g) * self.q(j, b)
                        + self.dpq(i, dl, j, b) * self.p(j, g) * self.q(i, a)
                        + self.p(i, dl) * self.q(i, a) * self.dpq(j, g, j, b)
                        + self.dpp(i, dl, j, g) * self.dqq(i, a, j, b)
                        + self.dpq(i, dl, i, a) * self.dpq(j, g, j, b)
                        + self.dpq(i, dl, j, b) * self.dpq(j, g, i, a)
                        - self.p(i, dl) * self.p(j, g) * self.q(i, a) * db
                        - self.dpp(i, dl, j, g) * self.q(i, a) * db
                        - self.p(i, dl) * self.dpq(j, g, i, a) * db
                        - self.dpq(i, dl, i, a) * self.p(j, g) * db
                        - self.p(i, dl) * self.p(j, g) * self.q(j, b) * da
                        - self.dpp(i, dl, j, g) * self.q(j, b) * da
                        - self.p(i, dl) * self.dpq(j, g, j, b) * da
                        - self.dpq(i, dl, j, b) * self.p(j, g) * da
                        + self.p(i, dl) * self.p(j, g) * da * db
                        + self.dpp(i, dl, j, g) * da * db;
                    bpp += self.sig(l, i, dl) * self.sig(l, j, g) * e / r4;
                }
            }
        }
        app(i, a, j, b) + app(j, b, i, a) + cpp(i, a, j, b) + cpp(j, b, i, a) + bpp
    }

    /// d/dt Δ⟨p_i^α q_j^β⟩
    fn dpq_rate(&self, i: usize, a: usize, j: usize, b: usize) -> f64 {
        let (n, d) = (self.s.n, self.s.d);
        let mut apq = 0.0;
        for k in 0..n {
            for g in 0..d {
                apq += self.kern(i, k)
                    * (self.dpq(i, g, j, b) * self.p(k, g) * self.q(i, a)
                        + self.dpq(k, g, j, b) * self.p(i, g) * self.q(i, a)
                        + self.dqq(i, a, j, b) * self.p(i, g) * self.p(k, g)
                        + self.dpq(i, g, j, b) * self.dpq(k, g, i, a)
                        + self.dpq(k, g, j, b) * self.dpq(i, g, i, a)
                        + self.dqq(i, a, j, b) * self.dpp(k, g, i, g)
                        - self.dpq(i, g, j, b) * self.p(k, g) * self.q(k, a)
                        - self.dpq(k, g, j, b) * self.p(i, g) * self.q(k, a)
                        - self.dqq(j, b, k, a) * self.p(i, g) * self.p(k, g)
                        - self.dpq(i, g, j, b) * self.dpq(k, g, k, a)
                        - self.dpq(k, g, j, b) * self.dpq(i, g, k, a)
                        - self.dqq(j, b, k, a) * self.dpp(k, g, i, g));
            }
        }
        apq /= self.alpha2();
        // the trailing momentum-coupling term carries no sum over γ
        for k in 0..n {
            apq += self.kern(j, k) * self.dpp(i, a, k, b);
        }
        let mut bpq = 0.0;
        let mut cpq = 0.0;
        for l in 0..self.nf() {
            for g in 0..d {
                let full_pq = self.dpq(i, g, i, a) + self.p(i, g) * self.q(i, a);
                bpq += 1.0 / self.r2(l) * self.sig(l, j, b) * self.sig(l, i, g) * (full_pq - self.p(i, g) * self.delta(l, a));
                cpq -= 1.0 / (2.0 * self.r2(l)) * self.sig(l, j, b) * self.sig(l, j, g) * self.dpq(i, a, j, g);
                cpq += 1.0 / (2.0 * self.r2(l)) * self.dpq(i, g, j, b) * self.sig(l, i, g) * self.sig(l, i, a);
            }
        }
        apq + bpq + cpq
    }
}

#[test]
fn gaussian_closure_matches_expanded_term_formulas() {
    for seed in [5, 6, 7] {
        let s = random_setup(KernelKind::Gaussian, 2, seed);
        let ex = Expanded { s: &s };
        let st = MomentState::from_full(s.n, s.d, &s.mean, &s.cov);
        let r = moment_rhs(&st, &s.kern, &s.model).unwrap();
        let (n, d) = (s.n, s.d);
        let tol = |x: f64, y: f64| (x - y).abs() <= 1e-11 * x.abs().max(y.abs()).max(1e-6);
        for i in 0..n {
            for a in 0..d {
                let (x, y) = (r.mq[i * d + a], ex.dq_mean(i, a));
                assert!(tol(x, y), "mean q {i}{a}: {x} vs {y}");
                let (x, y) = (r.mp[i * d + a], ex.dp_mean(i, a));
                assert!(tol(x, y), "mean p {i}{a}: {x} vs {y}");
                for j in 0..n {
                    for b in 0..d {
                        let (x, y) = (r.cqq[(i * d + a, j * d + b)], ex.dqq_rate(i, a, j, b));
                        assert!(tol(x, y), "qq {i}{a}{j}{b}: {x} vs {y}");
                        let (x, y) = (r.cpp[(i * d + a, j * d + b)], ex.dpp_rate(i, a, j, b));
                        assert!(tol(x, y), "pp {i}{a}{j}{b}: {x} vs {y}");
                        let (x, y) = (r.cqp[(j * d + b, i * d + a)], ex.dpq_rate(i, a, j, b));
                        assert!(tol(x, y), "pq {i}{a}{j}{b}: {x} vs {y}");
                    }
                }
            }
        }
    }
}
