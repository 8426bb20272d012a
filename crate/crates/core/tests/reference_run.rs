//! Reference run at the documented default seed.

use gamm_r2::sampler::SamplerConfig;
use gamm_r2::simstudy::{run_section5, Section5Config, DEFAULT_SEED, F1_RMSE_THRESHOLD};

#[test]
fn default_seed_reference_run() {
    let cfg = Section5Config::default();
    assert_eq!(cfg.seed, DEFAULT_SEED);
    let rep = run_section5(&cfg, &SamplerConfig { seed: DEFAULT_SEED, ..Default::default() }).unwrap();
    let m: Vec<f64> = rep.fits.iter().map(|f| f.r2.mean).collect();
    assert!(m[0] < m[1] && m[1] < m[2], "{m:?}");
    assert!((0.03..=0.25).contains(&m[0]));
    assert!((0.20..=0.50).contains(&m[1]));
    assert!((0.45..=0.75).contains(&m[2]));
    assert!((0.40..=0.70).contains(&rep.partial_r2.mean));
    assert!((1.0..=3.0).contains(&rep.fits[2].beta1_mean));
    assert!(rep.f1_rmse <= F1_RMSE_THRESHOLD, "{}", rep.f1_rmse);
    for fit in &rep.fits {
        assert!(fit.r2.samples.iter().all(|r| (0.0..=1.0).contains(r)));
        assert!(fit.naive_r2.is_finite() && fit.naive_r2 > 0.0);
        for r in &fit.accept_rates {
            assert!((0.1..=0.5).contains(r), "{}: {r}", fit.name);
        }
    }
    for r in rep.partial_r2.samples.iter().chain(&rep.marginal_ratio.samples) {
        assert!((0.0..=1.0).contains(r));
    }
    let b1 = rep.fits[2].draws.split_rhat(|d| d.beta[1]);
    assert!(b1 < 1.1, "split R-hat {b1}");
}
