use stochlm::bridges::{sample_bridges, GuidingScheme};
use stochlm::inference::*;
use stochlm::kernels::{KernelKind, KernelSpec, NoiseField, NoiseModel};
use stochlm::optim::DeOptions;
use stochlm::sde::sample_endpoints;
use stochlm::state::LandmarkState;

fn field(c: [f64; 2], r: f64, a: [f64; 2]) -> NoiseField {
    NoiseField { center: c.to_vec(), scale: r, amplitude: a.to_vec() }
}

/// Two spatially constant fields, one per axis, scaled by θ.
fn brownian_layout() -> ThetaLayout {
    let base = NoiseModel::new(
        KernelKind::Gaussian,
        vec![field([0.5, 0.5], 1e6, [1.0, 0.0]), field([0.5, 0.5], 1e6, [0.0, 1.0])],
    )
    .unwrap();
    ThetaLayout::new(LayoutKind::ByDirection, base).unwrap()
}

fn brownian_problem(truth: [f64; 2], n_obs: usize, steps: usize, seed: u64) -> (InferenceProblem, Vec<f64>) {
    let layout = brownian_layout();
    let s = LandmarkState::at_rest(1, 2, vec![0.5, 0.5]).unwrap();
    let k = KernelSpec::gaussian(0.2);
    let ends = sample_endpoints(&s, &k, &layout.model(&truth).unwrap(), 1.0, 50, n_obs, seed).unwrap();
    let obs: Vec<Vec<f64>> = ends.iter().map(|e| e.q.clone()).collect();
    // known mean: the maximum likelihood amplitude is the root mean square displacement
    let closed: Vec<f64> =
        (0..2).map(|a| (obs.iter().map(|o| (o[a] - 0.5).powi(2)).sum::<f64>() / n_obs as f64).sqrt()).collect();
    let settings = InferenceSettings { bridge_steps: steps, scheme: GuidingScheme::basic(), ..Default::default() };
    let pr = InferenceProblem::new(s, k, layout, vec![(0.005, 1.0); 2], 1.0, obs, settings).unwrap();
    (pr, closed)
}

#[test]
fn discrete_weights_estimate_the_transition_density() {
    let lam = 0.1;
    let m = brownian_layout().model(&[lam, lam]).unwrap();
    let k = KernelSpec::gaussian(0.2);
    let s = LandmarkState::new(1, 2, vec![0.3, 0.5], vec![0.3, -0.2]).unwrap();
    let v = [0.62, 0.33];
    let r2 = (0.62f64 - 0.6).powi(2) + (0.33f64 - 0.3).powi(2);
    let want = (-r2 / (2.0 * lam * lam)).exp() / (2.0 * std::f64::consts::PI * lam * lam);
    let n = 4000;
    let mut rel_se = Vec::new();
    for shrink in [false, true] {
        let sch = GuidingScheme { shrink_noise: shrink, ..GuidingScheme::phi_predictor() };
        let bs = sample_bridges(&s, &k, &m, &sch, 1.0, 50, &v, n, 13).unwrap();
        let w: Vec<f64> = bs.iter().map(|b| bridge_log_weight(b, 1.0, &k, &m, 1e-12).unwrap().exp()).collect();
        let mean = w.iter().sum::<f64>() / n as f64;
        let se = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt();
        // ε = 1e-12 against step variances of 2e-4 perturbs each step by ~5e-9
        assert!((mean - want).abs() < 3.0 * se + 1e-6 * want, "shrink {shrink}: {mean} ± {se} vs {want}");
        rel_se.push(se / want);
    }
    // a Brownian bridge step is exact once shrunk
    assert!(rel_se[1] < 1e-6, "{rel_se:?}");
}

#[test]
fn weights_need_a_noise_record() {
    let m = brownian_layout().model(&[0.1, 0.1]).unwrap();
    let k = KernelSpec::gaussian(0.2);
    let s = LandmarkState::at_rest(1, 2, vec![0.5, 0.5]).unwrap();
    let mut b = sample_bridges(&s, &k, &m, &GuidingScheme::basic(), 1.0, 10, &[0.6, 0.5], 1, 1).unwrap().remove(0);
    b.noise.clear();
    assert!(bridge_log_weight(&b, 1.0, &k, &m, 1e-12).is_err());
}

#[test]
fn mle_matches_the_closed_form_for_brownian_motion() {
    let (pr, closed) = brownian_problem([0.1, 0.07], 50, 50, 808);
    let r = mle_direct(&pr, &[0.05, 0.05], &MleOptions { n_bridges: 4, seed: 3, ..Default::default() }).unwrap();
    for a in 0..2 {
        assert!(((r.theta[a] - closed[a]) / closed[a]).abs() < 1e-3, "{:?} vs {closed:?}", r.theta);
    }
}

#[test]
fn em_recovers_brownian_amplitudes() {
    let (pr, closed) = brownian_problem([0.1, 0.07], 50, 20, 17);
    let opts = EmOptions { iterations: 40, n_bridges: 16, seed: 2, ..Default::default() };
    let r = em_fit(&pr, &[0.2, 0.2], &opts).unwrap();
    for a in 0..2 {
        assert!(((r.theta()[a] - closed[a]) / closed[a]).abs() < 0.1, "{:?} vs {closed:?}", r.theta());
    }
    assert_eq!(r.theta_trace.len(), 41);
    assert!(r.ess_min.iter().all(|e| *e >= 1.0));
}

#[test]
fn em_is_reproducible() {
    let (pr, _) = brownian_problem([0.1, 0.07], 5, 10, 4);
    let opts = EmOptions { iterations: 3, n_bridges: 4, seed: 9, ..Default::default() };
    let a = em_fit(&pr, &[0.2, 0.2], &opts).unwrap();
    let b = em_fit(&pr, &[0.2, 0.2], &opts).unwrap();
    assert_eq!(a, b);
    let c = em_fit(&pr, &[0.2, 0.2], &EmOptions { seed: 10, ..opts }).unwrap();
    assert_ne!(a.theta_trace, c.theta_trace);
}

#[test]
fn em_rejects_bad_options() {
    let (pr, _) = brownian_problem([0.1, 0.07], 5, 10, 4);
    let bad = EmOptions { average_from: 1.0, ..Default::default() };
    assert!(em_fit(&pr, &[0.2, 0.2], &bad).is_err());
    assert!(em_fit(&pr, &[0.2], &EmOptions::default()).is_err());
    let mut zero = pr.clone();
    zero.theta_bounds = vec![(0.0, 1.0); 2];
    assert!(em_fit(&zero, &[0.2, 0.2], &EmOptions::default()).is_err());
}

#[test]
fn moment_fits_are_reproducible() {
    let base = NoiseModel::new(
        KernelKind::Gaussian,
        vec![field([0.3, 0.5], 0.3, [0.1, 0.0]), field([0.7, 0.5], 0.3, [0.0, 0.1])],
    )
    .unwrap();
    let layout = ThetaLayout::new(LayoutKind::PerField, base).unwrap();
    let s = LandmarkState::new(1, 2, vec![0.4, 0.5], vec![0.2, 0.0]).unwrap();
    let k = KernelSpec::gaussian(0.2);
    let settings = InferenceSettings { moment_steps: 10, p0_radius: 0.3, ..Default::default() };
    let pr = InferenceProblem::new(s.clone(), k, layout, vec![(0.0, 3.0); 2], 1.0, vec![], settings).unwrap();
    let target = MomentTarget::from_moments(&pr.moments_at(&s.p, &[1.0, 1.5]).unwrap());
    let pr = pr.with_target(target);
    let opts = FitOptions { de: DeOptions { max_generations: 5, seed: 3, ..Default::default() }, ..Default::default() };
    let a = fit_moments(&pr, FitMethod::DifferentialEvolution, &opts).unwrap();
    let b = fit_moments(&pr, FitMethod::DifferentialEvolution, &opts).unwrap();
    assert_eq!(a, b);
    assert!(a.cost <= a.trace[0] && a.trace.windows(2).all(|w| w[1] <= w[0]));
    let g = fit_moments(&pr, FitMethod::GradientDescent, &FitOptions::default()).unwrap();
    assert!(g.cost < 1e-8, "gradient fit cost {}", g.cost);
}
