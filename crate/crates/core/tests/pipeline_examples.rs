use zsv_core::diffusion::{ddim_sample, DdimConfig, EpsPredictor};
use zsv_core::noise::{kl_noise, SearchConfig};
use zsv_core::numerics::{randn, RngState, Tensor};
use zsv_core::pipeline::{
    autoregressive_extend, frame_correlation_report, noise_model_comparison, zs2_sample,
    ComparisonParams, Zs2Config,
};

fn config(seed: u64, m: usize, lambda: f64, side: usize, steps: usize) -> Zs2Config {
    let mut cfg = Zs2Config {
        seed,
        frame_shape: vec![side, side],
        ..Zs2Config::default()
    }
    .with_frames(m, lambda, 0.98);
    cfg.ddim = DdimConfig::uniform(1000, steps).unwrap();
    cfg
}

#[test]
fn vanishing_lambda_gives_static_video() {
    let clip = zs2_sample(&config(3, 4, 1e-9, 32, 20)).unwrap();
    for f in &clip.frames[1..] {
        let d = f.max_abs_diff(&clip.frames[0]).unwrap();
        assert!(d <= 1e-4, "frame differs by {d}");
    }
}

#[test]
fn default_clip_is_more_correlated_than_iid_baseline() {
    let (mut dep, mut iid) = (0.0, 0.0);
    for seed in 0..20u64 {
        let cfg = config(seed, 8, 0.01, 32, 20);
        dep += frame_correlation_report(&zs2_sample(&cfg).unwrap().frames)
            .unwrap()
            .mean_correlation;

        let denoiser = cfg.denoiser_with(&cfg.mus).build(&cfg.frame_shape).unwrap();
        let sched = cfg.schedule.build().unwrap();
        let noise: Vec<Tensor> = (0..8)
            .map(|i| randn(&mut RngState::with_stream(seed, 1000 + i), &cfg.frame_shape).unwrap())
            .collect();
        let x_t = Tensor::stack(&noise).unwrap();
        let out = ddim_sample(
            &denoiser as &dyn EpsPredictor,
            &x_t,
            &cfg.ddim,
            &sched,
            false,
        )
        .unwrap();
        iid += frame_correlation_report(&out.x0.unstack())
            .unwrap()
            .mean_correlation;
    }
    assert!(
        dep > iid,
        "dependency {dep} vs iid {iid} (sums over 20 seeds)"
    );
}

#[test]
fn junction_kl_sits_in_interior_band() {
    let m = 6;
    let lambda = 0.01;
    let cfg = config(21, m, lambda, 64, 5);
    let clip = zs2_sample(&cfg).unwrap();
    let longer = autoregressive_extend(&cfg, &clip, m).unwrap();
    let kl = &longer.manifest.achieved_kl;
    assert_eq!(kl.len(), 2 * m - 1);
    let junction = kl[m - 1];
    let direct = kl_noise(&longer.terminal_noise[m], &longer.terminal_noise[m - 1]).unwrap();
    assert!((direct - junction).abs() < 1e-12);
    let worst = kl
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != m - 1)
        .map(|(_, k)| (k - lambda).abs())
        .fold(0.0, f64::max);
    assert!(
        (junction - lambda).abs() <= worst.max(0.5 * lambda),
        "junction {junction} vs interior worst deviation {worst}"
    );
}

#[test]
fn successive_extensions_keep_first_segment() {
    let cfg = config(8, 3, 0.01, 16, 5);
    let clip = zs2_sample(&cfg).unwrap();
    let once = autoregressive_extend(&cfg, &clip, 4).unwrap();
    let twice =
        autoregressive_extend(&cfg, &autoregressive_extend(&cfg, &clip, 2).unwrap(), 2).unwrap();
    assert_eq!(once.frames.len(), twice.frames.len());
    assert_eq!(&once.frames[..3], &twice.frames[..3]);
    assert_eq!(&once.frames[..3], &clip.frames[..]);
}

#[test]
fn comparison_marginals_stay_normal_for_linear_priors() {
    let params = ComparisonParams {
        alpha_mixed: 0.99,
        alpha_progressive: 0.98,
        lambda: 0.01,
        search: SearchConfig::default(),
    };
    let reports = noise_model_comparison(13, 8, &[64, 64], &params).unwrap();
    assert_eq!(reports.len(), 3);
    for r in &reports {
        assert!(r.frames[0].passes, "{} frame 1", r.model);
    }
    for r in &reports[..2] {
        assert!(r.all_normal, "{}", r.model);
        for &k in &r.adjacent_kl {
            assert!((0.005..=0.02).contains(&k), "{} adjacent KL {k}", r.model);
        }
    }
}
