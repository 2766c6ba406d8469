use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use zsv_core::diffusion::{
    ddim_sample, linear_beta_schedule, mixture_eps_predictor, DdimConfig, LinearSchedule,
    MixtureComponent, MixtureModel, MixturePredictor,
};
use zsv_core::numerics::{randn, RngState, Tensor};

#[test]
fn linear_schedule_matches_f64_product() {
    let sched = LinearSchedule::default().build().unwrap();
    let mut ab = 1.0f64;
    for t in 1..=1000 {
        let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0;
        ab *= 1.0 - beta;
        assert!((sched.alpha_bar(t).unwrap() - ab).abs() <= 1e-12, "t = {t}");
    }
    assert_eq!(sched.alpha_bar(0).unwrap(), 1.0);
}

#[test]
fn gaussian_posterior_matches_monte_carlo() {
    // x0 ~ N(mu0, s0^2), x_t = sqrt(ab) x0 + sqrt(1 - ab) eps. Estimate
    // E[x0 | x_t near target] by importance weighting prior draws.
    let (mu0, s0, ab, x_t) = (0.4f64, 0.8f64, 0.35f64, 0.9f64);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let prior = Normal::new(mu0, s0).unwrap();
    let draws: Vec<(f64, f64)> = (0..1_000_000)
        .map(|_| {
            let x0: f64 = prior.sample(&mut rng);
            let r = x_t - ab.sqrt() * x0;
            (x0, (-r * r / (2.0 * (1.0 - ab))).exp())
        })
        .collect();
    let den: f64 = draws.iter().map(|d| d.1).sum();
    let mc = draws.iter().map(|d| d.0 * d.1).sum::<f64>() / den;
    // Delta-method standard error of a self-normalised estimate.
    let se = draws
        .iter()
        .map(|(x, w)| (w * (x - mc)).powi(2))
        .sum::<f64>()
        .sqrt()
        / den;

    let mix = MixtureModel::single(Tensor::scalar(mu0 as f32), s0);
    let sched = linear_beta_schedule(1, 1.0 - ab, 1.0 - ab).unwrap();
    let post = mix
        .posterior_mean(&[x_t as f32], sched.alpha_bar(1).unwrap())
        .unwrap()[0];
    assert!(
        (post - mc).abs() <= 3.0 * se,
        "closed form {post} vs monte carlo {mc} (se {se})"
    );

    let eps = mixture_eps_predictor(&mix, &Tensor::scalar(x_t as f32), 1, &sched).unwrap();
    let want = (x_t - ab.sqrt() * post) / (1.0 - ab).sqrt();
    assert!((f64::from(eps.data()[0]) - want).abs() < 1e-6);
}

#[test]
fn ddim_on_gaussian_matches_closed_form_linear_map() {
    // Deterministic DDIM with an exact Gaussian predictor is affine in x_T.
    let (mu0, s0) = (-0.3f64, 0.6f64);
    let sched = LinearSchedule::default().build().unwrap();
    let cfg = DdimConfig::uniform(1000, 50).unwrap();
    let mut gain = 1.0f64;
    for (i, &t) in cfg.timesteps.iter().enumerate() {
        let tp = cfg.timesteps.get(i + 1).copied().unwrap_or(0);
        let (a, ap) = (sched.alpha_bar(t).unwrap(), sched.alpha_bar(tp).unwrap());
        let g = a.sqrt() * s0 * s0 / (a * s0 * s0 + 1.0 - a);
        gain *= ap.sqrt() * g + (1.0 - ap).sqrt() * (1.0 - a.sqrt() * g) / (1.0 - a).sqrt();
    }
    let offset = mu0 - gain * sched.alpha_bar(1000).unwrap().sqrt() * mu0;
    let pred = MixturePredictor::new(MixtureModel::single(
        Tensor::full(&[32], mu0 as f32).unwrap(),
        s0,
    ))
    .unwrap();
    let x_t = randn(&mut RngState::new(3), &[1, 32]).unwrap();
    let out = ddim_sample(&pred, &x_t, &cfg, &sched, false).unwrap();
    for (&x, &y) in x_t.data().iter().zip(out.x0.data()) {
        let want = offset + gain * f64::from(x);
        assert!((f64::from(y) - want).abs() < 1e-5, "{y} vs {want}");
    }
}

#[test]
fn two_pattern_sampling_lands_near_a_pattern() {
    let shape = [16, 16];
    let mix = MixtureModel::two_patterns(&shape).unwrap();
    let pred = MixturePredictor::new(mix.clone()).unwrap();
    let sched = LinearSchedule::default().build().unwrap();
    let cfg = DdimConfig::uniform(1000, 50).unwrap();
    for seed in 0..6u64 {
        let x_t = randn(&mut RngState::new(seed), &[1, 16, 16]).unwrap();
        let x0 = ddim_sample(&pred, &x_t, &cfg, &sched, false).unwrap().x0;
        let rms = |c: &MixtureComponent| -> f64 {
            let s: f64 = x0
                .data()
                .iter()
                .zip(&c.mean)
                .map(|(&x, &m)| f64::from(x - m).powi(2))
                .sum();
            (s / 256.0).sqrt()
        };
        let nearest = mix.components.iter().map(rms).fold(f64::INFINITY, f64::min);
        // A draw from N(mean, 0.2^2) has rms distance about 0.2.
        assert!(
            nearest < 0.3,
            "seed {seed}: rms to nearest pattern {nearest}"
        );
    }
}
