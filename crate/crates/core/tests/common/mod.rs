//! Random models and posterior-like draws shared by the integration suites.
#![allow(dead_code)]

use gamm_r2::families::Dispersion;
use gamm_r2::model::{Dataset, GroupFactor, Model, ModelSpec, ParamDraw};
use gamm_r2::splines::SmoothConfig;
use gamm_r2::Family;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A random model: family, size and term structure vary; the response is
/// drawn from the family so it lies in the support.
pub fn fuzz_model(rng: &mut ChaCha8Rng) -> Model {
    loop {
        let fam = Family::ALL[rng.random_range(0..Family::ALL.len())];
        let n = rng.random_range(5..=30);
        let mut spec = ModelSpec::new(fam);
        let fixed_cols = rng.random_range(0..=2);
        let x = DMatrix::from_fn(n, fixed_cols, |_, _| rng.random::<f64>());
        for j in 0..fixed_cols {
            spec = spec.with_fixed(&format!("x{}", j + 1));
        }
        let mut groups = Vec::new();
        if rng.random_bool(0.5) {
            let levels = rng.random_range(2..=4);
            let labels: Vec<String> = (0..n).map(|_| format!("g{}", rng.random_range(0..levels))).collect();
            groups.push(GroupFactor::from_labels(&labels));
            spec = spec.with_random("g");
        }
        let mut u = DMatrix::zeros(n, 0);
        if rng.random_bool(0.5) {
            let mut cfg = SmoothConfig::new("u");
            cfg.k = rng.random_range(5..=8);
            spec = spec.with_smooth(cfg);
            u = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>());
        }
        let base_mean = match fam {
            Family::Gaussian => 0.0,
            Family::Bernoulli | Family::Beta => 0.5,
            _ => 2.0,
        };
        let phi = Some(Dispersion::new(2.0).unwrap()).filter(|_| fam.has_dispersion());
        let y: Vec<f64> = (0..n)
            .map(|_| fam.sample_response(base_mean, phi, rng).unwrap())
            .collect();
        let Ok(data) = Dataset::new(y, x, groups, u) else { continue };
        if let Ok(m) = Model::new(spec, data) {
            return m;
        }
    }
}

/// A draw with coefficients scaled so the means stay in the family's mean
/// space (retried otherwise).
pub fn fuzz_draw(model: &Model, rng: &mut ChaCha8Rng) -> ParamDraw {
    let fam = model.family();
    loop {
        let mut d = ParamDraw::zeros(model.layout(), fam);
        let (lo, hi, s) = match fam {
            Family::Gaussian => (-2.0, 2.0, 1.0),
            Family::Poisson | Family::NegativeBinomial => (0.0, 2.0, 0.3),
            Family::Bernoulli | Family::Beta => (-1.0, 1.0, 0.5),
            Family::Gamma | Family::InverseGaussian => (1.0, 2.0, 0.1),
        };
        d.beta[0] = rng.random_range(lo..hi);
        for v in d.beta[1..].iter_mut().chain(d.b.iter_mut()).chain(d.gamma.iter_mut()) {
            *v = rng.random_range(-s..s);
        }
        for v in d.psi.iter_mut().chain(d.tau.iter_mut()) {
            *v = rng.random_range(0.2..1.5);
        }
        if fam.has_dispersion() {
            d.phi = Some(Dispersion::new(rng.random_range(0.5..5.0)).unwrap());
        }
        if model.means(&d).is_ok() {
            return d;
        }
    }
}
