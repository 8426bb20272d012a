//! Posterior-predictive sums of squares and Bayesian R-squared.
//!
//! For one posterior draw with conditional means `mu_i` and conditional
//! variances `sigma_i^2`, the expected total sum of squares of a predictive
//! replicate splits exactly into
//!
//! ```text
//! TSS~ = ESS~ + RSS~,   ESS~ = sum_i (mu_i - mean(mu))^2,
//!                       RSS~ = (n - 1) / n * sum_i sigma_i^2
//! ```
//!
//! and `R2 = ESS~ / TSS~` lies in `[0, 1]` by construction. The residual part
//! is always evaluated in closed form here; simulation lives in
//! [`crate::oracle`].

use crate::error::{Error, Result};
use crate::model::{Model, ParamDraw};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Centered sum of squares `sum (x_i - mean(x))^2`, two-pass.
pub fn centered_ss(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m) * (x - m)).sum()
}

/// `(n - 1) / n * sum sigma_i^2`.
pub fn rss_from_variances(variances: &[f64]) -> f64 {
    let n = variances.len() as f64;
    (n - 1.0) * (variances.iter().sum::<f64>() / n)
}

/// Per-draw decomposition of the expected predictive sum of squares.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsDecomp {
    pub ess: f64,
    pub rss: f64,
    pub tss: f64,
    pub r2: f64,
}

impl SsDecomp {
    pub fn new(ess: f64, rss: f64) -> Result<Self> {
        if !(ess >= 0.0 && rss >= 0.0) || !(ess + rss).is_finite() {
            return Err(Error::InvalidData(format!(
                "sums of squares must be finite and nonnegative (ess={ess}, rss={rss})"
            )));
        }
        let tss = ess + rss;
        if tss == 0.0 {
            return Err(Error::DegenerateR2);
        }
        Ok(SsDecomp {
            ess,
            rss,
            tss,
            r2: ess / tss,
        })
    }
}

fn require_rows(model: &Model) -> Result<()> {
    if model.n() < 2 {
        Err(Error::TooFewRows(model.n()))
    } else {
        Ok(())
    }
}

/// Explained sum of squares of the conditional means; never touches `y`.
pub fn ess_tilde(model: &Model, draw: &ParamDraw) -> Result<f64> {
    require_rows(model)?;
    Ok(centered_ss(&model.means(draw)?))
}

/// Closed-form expected residual sum of squares of a predictive replicate.
pub fn rss_tilde(model: &Model, draw: &ParamDraw) -> Result<f64> {
    require_rows(model)?;
    let means = model.means(draw)?;
    Ok(rss_from_variances(&model.variances(draw, &means)?))
}

pub fn decompose(model: &Model, draw: &ParamDraw) -> Result<SsDecomp> {
    require_rows(model)?;
    let means = model.means(draw)?;
    let vars = model.variances(draw, &means)?;
    SsDecomp::new(centered_ss(&means), rss_from_variances(&vars))
}

/// `var_fit / (var_fit + var_res)` with `var_fit = ESS~ / (n - 1)` and
/// `var_res = mean(sigma^2)`.
pub fn gelman_form_r2(model: &Model, draw: &ParamDraw) -> Result<f64> {
    require_rows(model)?;
    let means = model.means(draw)?;
    let vars = model.variances(draw, &means)?;
    let n = means.len() as f64;
    let var_fit = centered_ss(&means) / (n - 1.0);
    let var_res = vars.iter().sum::<f64>() / n;
    if var_fit + var_res == 0.0 {
        return Err(Error::DegenerateR2);
    }
    Ok(var_fit / (var_fit + var_res))
}

/// Empirical quantile with linear interpolation between order statistics
/// (type 7). `sorted` must be ascending and non-empty.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summary of per-draw ratios, samples kept in draw order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RsqSummary {
    #[serde(skip)]
    pub samples: Vec<f64>,
    /// Draw index of each kept sample.
    #[serde(skip)]
    pub draw_ids: Vec<usize>,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub q05: f64,
    pub q95: f64,
    pub n_degenerate: usize,
}

impl RsqSummary {
    pub fn from_samples(samples: Vec<f64>, draw_ids: Vec<usize>, n_degenerate: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::AllDegenerate(n_degenerate));
        }
        let n = samples.len() as f64;
        // incremental mean: exact when all samples coincide
        let mut mean = 0.0;
        for (k, x) in samples.iter().enumerate() {
            mean += (x - mean) / (k + 1) as f64;
        }
        let sd = if samples.len() > 1 {
            (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let mut sorted = samples.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(RsqSummary {
            median: quantile_type7(&sorted, 0.5),
            q05: quantile_type7(&sorted, 0.05),
            q95: quantile_type7(&sorted, 0.95),
            mean,
            sd,
            samples,
            draw_ids,
            n_degenerate,
        })
    }

    /// Counts of samples in `bins` equal-width bins over `[0, 1]`; the last
    /// bin is closed.
    pub fn histogram(&self, bins: usize) -> Vec<(f64, f64, usize)> {
        let mut counts = vec![0usize; bins];
        for &s in &self.samples {
            let k = ((s * bins as f64).floor() as usize).min(bins - 1);
            counts[k] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .map(|(k, c)| (k as f64 / bins as f64, (k + 1) as f64 / bins as f64, c))
            .collect()
    }
}

/// Decomposes every draw; degenerate draws are reported as `None`.
pub fn decompose_all(model: &Model, draws: &[ParamDraw]) -> Result<Vec<Option<SsDecomp>>> {
    draws
        .par_iter()
        .map(|d| match decompose(model, d) {
            Ok(s) => Ok(Some(s)),
            Err(Error::DegenerateR2) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

/// Summarizes a sequence of optional per-draw ratios.
pub(crate) fn summarize(values: impl IntoIterator<Item = Option<f64>>) -> Result<RsqSummary> {
    let mut samples = Vec::new();
    let mut ids = Vec::new();
    let mut degenerate = 0;
    for (i, v) in values.into_iter().enumerate() {
        match v {
            Some(r) => {
                samples.push(r);
                ids.push(i);
            }
            None => degenerate += 1,
        }
    }
    RsqSummary::from_samples(samples, ids, degenerate)
}

/// Posterior distribution of the per-draw Bayesian R-squared.
pub fn bayes_r2(model: &Model, draws: &[ParamDraw]) -> Result<RsqSummary> {
    if draws.is_empty() {
        return Err(Error::InvalidData("no posterior draws".into()));
    }
    summarize(decompose_all(model, draws)?.into_iter().map(|d| d.map(|s| s.r2)))
}

/// Posterior mean of the explained sum of squares over the observed total
/// sum of squares. Not bounded by one.
pub fn naive_bayes_r2(model: &Model, draws: &[ParamDraw]) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::InvalidData("no posterior draws".into()));
    }
    let tss = centered_ss(&model.data().y);
    if tss == 0.0 {
        return Err(Error::ConstantResponse);
    }
    let ess: Vec<f64> = draws
        .par_iter()
        .map(|d| ess_tilde(model, d))
        .collect::<Result<_>>()?;
    Ok(ess.iter().sum::<f64>() / ess.len() as f64 / tss)
}

/// Ordinary least-squares fit with its sum-of-squares decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassicalR2 {
    pub r2: f64,
    pub tss: f64,
    pub rss: f64,
    pub ess: f64,
    pub coefficients: Vec<f64>,
}

/// Classical R-squared of an OLS fit of `y` on `x` (which must contain an
/// intercept column).
pub fn classical_r2(y: &[f64], x: &DMatrix<f64>) -> Result<ClassicalR2> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::Dimension(format!("y has {} rows, X has {n}", y.len())));
    }
    if n <= p {
        return Err(Error::InvalidData(format!("need n > p, got n={n}, p={p}")));
    }
    let has_intercept = (0..p).any(|j| {
        let c = x.column(j);
        c[0] != 0.0 && c.iter().all(|&v| v == c[0])
    });
    if !has_intercept {
        return Err(Error::InvalidData("design has no intercept column".into()));
    }
    let tss = centered_ss(y);
    if tss == 0.0 {
        return Err(Error::ConstantResponse);
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let max_diag = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..p).any(|i| r[(i, i)].abs() <= 1e-10 * max_diag.max(1.0)) {
        return Err(Error::RankDeficient);
    }
    let yv = DVector::from_column_slice(y);
    let qty = qr.q().transpose() * &yv;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or(Error::RankDeficient)?;
    let fitted = x * &beta;
    let ybar = y.iter().sum::<f64>() / n as f64;
    let ess = fitted.iter().map(|f| (f - ybar).powi(2)).sum::<f64>();
    let rss = y
        .iter()
        .zip(fitted.iter())
        .map(|(a, f)| (a - f).powi(2))
        .sum::<f64>();
    Ok(ClassicalR2 {
        r2: ess / tss,
        tss,
        rss,
        ess,
        coefficients: beta.as_slice().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{Dispersion, Family};
    use crate::model::{Dataset, ModelSpec};

    /// Gaussian model with a single covariate `x` and the given response.
    fn gaussian_line(x: &[f64], y: &[f64]) -> Model {
        let n = x.len();
        let data = Dataset::new(
            y.to_vec(),
            DMatrix::from_column_slice(n, 1, x),
            vec![],
            DMatrix::zeros(n, 0),
        )
        .unwrap();
        Model::new(ModelSpec::new(Family::Gaussian).with_fixed("x"), data).unwrap()
    }

    fn line_draw(b0: f64, b1: f64, phi: f64) -> ParamDraw {
        ParamDraw {
            beta: vec![b0, b1],
            b: vec![],
            gamma: vec![],
            phi: Some(Dispersion::new(phi).unwrap()),
            psi: vec![],
            tau: vec![],
        }
    }

    #[test]
    fn ess_examples() {
        let m = gaussian_line(&[0.0, 1.0, 2.0], &[0.0, 0.0, 1.0]);
        assert_eq!(ess_tilde(&m, &line_draw(4.0, 0.0, 1.0)).unwrap(), 0.0);
        assert_eq!(ess_tilde(&m, &line_draw(0.0, 1.0, 1.0)).unwrap(), 2.0);
    }

    #[test]
    fn rss_examples() {
        let m = gaussian_line(&[0.0, 1.0, 2.0], &[0.0, 0.0, 1.0]);
        assert!((rss_tilde(&m, &line_draw(0.0, 1.0, 1.0)).unwrap() - 2.0).abs() < 1e-15);
        // Poisson means (1, 2, 3): (n - 1) / n * 6 = 4
        assert!((rss_from_variances(&[1.0, 2.0, 3.0]) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn decompose_examples() {
        let d = SsDecomp::new(2.0, 2.0).unwrap();
        assert_eq!((d.tss, d.r2), (4.0, 0.5));
        assert_eq!(SsDecomp::new(3.0, 0.0).unwrap().r2, 1.0);
        assert_eq!(SsDecomp::new(0.0, 3.0).unwrap().r2, 0.0);
        assert!(matches!(SsDecomp::new(0.0, 0.0), Err(Error::DegenerateR2)));
    }

    #[test]
    fn gelman_form_example_and_identity() {
        let m = gaussian_line(&[0.0, 1.0, 2.0], &[0.0, 0.0, 1.0]);
        let d = line_draw(0.0, 1.0, 1.0);
        assert!((gelman_form_r2(&m, &d).unwrap() - 0.5).abs() < 1e-15);
        assert!((decompose(&m, &d).unwrap().r2 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gaussian_reduction() {
        let x: Vec<f64> = (0..25).map(|i| (i as f64 * 0.37).sin()).collect();
        let m = gaussian_line(&x, &x);
        let d = line_draw(0.3, 1.7, 2.5);
        let ess = ess_tilde(&m, &d).unwrap();
        let expected = ess / (ess + 24.0 / 2.5);
        assert!((decompose(&m, &d).unwrap().r2 - expected).abs() < 1e-15);
    }

    #[test]
    fn naive_can_exceed_one() {
        let m = gaussian_line(&[-1.0, 1.0], &[-1.0, 1.0]);
        let d = line_draw(0.0, 2.0, 1.0);
        assert_eq!(naive_bayes_r2(&m, std::slice::from_ref(&d)).unwrap(), 4.0);
        let r2 = bayes_r2(&m, &[d]).unwrap();
        assert!((0.0..=1.0).contains(&r2.mean));

        let exact = line_draw(0.0, 1.0, 1.0);
        assert_eq!(naive_bayes_r2(&m, &[exact]).unwrap(), 1.0);

        let flat = gaussian_line(&[-1.0, 1.0], &[2.0, 2.0]);
        assert!(matches!(
            naive_bayes_r2(&flat, &[line_draw(0.0, 1.0, 1.0)]),
            Err(Error::ConstantResponse)
        ));
    }

    #[test]
    fn identical_draws_have_zero_sd() {
        let m = gaussian_line(&[0.0, 1.0, 2.0, 5.0], &[0.0, 0.0, 1.0, 3.0]);
        let d = line_draw(0.1, 0.8, 3.0);
        let r = decompose(&m, &d).unwrap().r2;
        let s = bayes_r2(&m, &vec![d; 7]).unwrap();
        assert_eq!(s.sd, 0.0);
        assert!((s.mean - r).abs() < 1e-15);
        assert_eq!(s.samples.len(), 7);
    }

    #[test]
    fn degenerate_draws_are_counted() {
        let m = gaussian_line(&[0.0, 1.0, 2.0], &[0.0, 1.0, 1.0]);
        let d = line_draw(0.0, 1.0, 1.0);
        let values = vec![Some(0.2), None, Some(0.4)];
        let s = summarize(values).unwrap();
        assert_eq!(s.n_degenerate, 1);
        assert_eq!(s.draw_ids, vec![0, 2]);
        assert!(matches!(summarize(vec![None, None]), Err(Error::AllDegenerate(2))));
        assert!(bayes_r2(&m, &[d]).is_ok());
        assert!(bayes_r2(&m, &[]).is_err());
    }

    #[test]
    fn type7_quantiles() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_type7(&s, 0.5), 2.5);
        assert!((quantile_type7(&s, 0.05) - 1.15).abs() < 1e-12);
        assert!((quantile_type7(&s, 0.95) - 3.85).abs() < 1e-12);
    }

    #[test]
    fn histogram_counts_all_samples() {
        let s = RsqSummary::from_samples(vec![0.0, 0.5, 1.0, 0.99, 0.01], vec![0, 1, 2, 3, 4], 0).unwrap();
        let h = s.histogram(10);
        assert_eq!(h.len(), 10);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), 5);
        assert_eq!(h[9].2, 2);
        assert_eq!(h[0].2, 2);
    }

    #[test]
    fn classical_examples() {
        let n = 12;
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let y: Vec<f64> = (0..n).map(|i| 1.0 + 2.0 * i as f64).collect();
        let fit = classical_r2(&y, &x).unwrap();
        assert!((fit.r2 - 1.0).abs() < 1e-12);

        let ones = DMatrix::from_element(n, 1, 1.0);
        let noisy: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).cos()).collect();
        assert!(classical_r2(&noisy, &ones).unwrap().r2.abs() < 1e-12);

        let dup = DMatrix::from_fn(n, 3, |i, j| if j == 0 { 1.0 } else { i as f64 });
        assert!(matches!(classical_r2(&noisy, &dup), Err(Error::RankDeficient)));
        assert!(matches!(
            classical_r2(&vec![3.0; n], &x),
            Err(Error::ConstantResponse)
        ));
    }

    #[test]
    fn classical_matches_normal_equations() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(50);
        let (n, p) = (50, 3);
        let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() });
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let fit = classical_r2(&y, &x).unwrap();

        // brute-force normal equations by Gauss-Jordan elimination
        let mut a = vec![vec![0.0; p + 1]; p];
        for r in 0..p {
            for c in 0..p {
                a[r][c] = (0..n).map(|i| x[(i, r)] * x[(i, c)]).sum();
            }
            a[r][p] = (0..n).map(|i| x[(i, r)] * y[i]).sum();
        }
        for col in 0..p {
            let piv = a[col][col];
            for v in a[col].iter_mut() {
                *v /= piv;
            }
            for r in 0..p {
                if r != col {
                    let f = a[r][col];
                    let row = a[col].clone();
                    for (v, w) in a[r].iter_mut().zip(row) {
                        *v -= f * w;
                    }
                }
            }
        }
        let beta: Vec<f64> = a.iter().map(|row| row[p]).collect();
        let ybar = y.iter().sum::<f64>() / n as f64;
        let fitted: Vec<f64> = (0..n)
            .map(|i| (0..p).map(|j| x[(i, j)] * beta[j]).sum())
            .collect();
        let ess: f64 = fitted.iter().map(|f| (f - ybar).powi(2)).sum();
        let tss: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
        assert!((fit.r2 - ess / tss).abs() < 1e-10);
        assert!(((fit.rss + fit.ess) - fit.tss).abs() <= 1e-10 * fit.tss);
    }
}
