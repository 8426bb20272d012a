//! Brute-force Monte-Carlo checks of the analytic sums of squares, and
//! closed-form conjugate posteriors used to validate the sampler.
//!
//! Replicates are generated in fixed-size chunks; chunk `c` draws from the
//! ChaCha stream `c` of the seed, so an estimate depends only on
//! `(seed, M)` and not on the number of worker threads. Chunk statistics
//! are merged in chunk order.

use crate::error::{Error, Result};
use crate::model::{Model, ParamDraw};
use crate::partial::{reduced_means, PartialSpec};
use crate::rsq::centered_ss;
use crate::sampler::sample_predictive_from_means;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Smallest replicate count accepted by the estimators.
pub const MIN_REPLICATES: usize = 1000;

const CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    /// Sample standard deviation over replicates divided by `sqrt(m)`.
    pub se: f64,
    pub m: usize,
    pub seed: u64,
}

impl McEstimate {
    /// Standardized distance of `analytic` from the estimate.
    pub fn z(&self, analytic: f64) -> f64 {
        let diff = self.mean - analytic;
        if self.se > 0.0 {
            diff / self.se
        } else if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        }
    }

    /// `|mean - analytic| <= k * se`.
    pub fn agrees(&self, analytic: f64, k: f64) -> bool {
        (self.mean - analytic).abs() <= k * self.se
    }
}

/// Running mean and sum of squared deviations.
#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.n as f64 * other.n as f64 / n as f64);
        self.n = n;
    }

    fn estimate(&self, seed: u64) -> McEstimate {
        let var = if self.n > 1 {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        } else {
            0.0
        };
        McEstimate {
            mean: self.mean,
            se: (var / self.n as f64).sqrt(),
            m: self.n,
            seed,
        }
    }
}

/// Estimates of the three predictive sums of squares from shared replicates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSums {
    /// `sum (y~_i - mean(y~))^2`
    pub tss: McEstimate,
    /// `sum (e~_i - mean(e~))^2` with `e~ = y~ - mu`
    pub rss: McEstimate,
    /// Same with `e~0 = y~ - mu0`; present when reduced means were given.
    pub rss0: Option<McEstimate>,
}

/// Monte-Carlo sums of squares for arbitrary means and a replicate
/// generator that fills its buffer with one draw of `y~`.
pub fn mc_sums_with<F>(
    means: &[f64],
    reduced: Option<&[f64]>,
    m: usize,
    seed: u64,
    generate: F,
) -> Result<McSums>
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]) -> Result<()> + Sync,
{
    if m < MIN_REPLICATES {
        return Err(Error::InvalidData(format!(
            "at least {MIN_REPLICATES} replicates are required, got {m}"
        )));
    }
    let n = means.len();
    if n < 2 {
        return Err(Error::TooFewRows(n));
    }
    if reduced.is_some_and(|r| r.len() != n) {
        return Err(Error::Dimension("reduced means length".into()));
    }
    let n_chunks = m.div_ceil(CHUNK);
    let chunks: Vec<[Moments; 3]> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let reps = CHUNK.min(m - c * CHUNK);
            let mut y = vec![0.0; n];
            let mut e = vec![0.0; n];
            let mut acc = [Moments::default(); 3];
            for _ in 0..reps {
                generate(&mut rng, &mut y)?;
                acc[0].push(centered_ss(&y));
                for ((ei, yi), mu) in e.iter_mut().zip(&y).zip(means) {
                    *ei = yi - mu;
                }
                acc[1].push(centered_ss(&e));
                if let Some(mu0) = reduced {
                    for ((ei, yi), mu) in e.iter_mut().zip(&y).zip(mu0) {
                        *ei = yi - mu;
                    }
                    acc[2].push(centered_ss(&e));
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = [Moments::default(); 3];
    for chunk in &chunks {
        for (t, c) in total.iter_mut().zip(chunk) {
            t.merge(c);
        }
    }
    Ok(McSums {
        tss: total[0].estimate(seed),
        rss: total[1].estimate(seed),
        rss0: reduced.map(|_| total[2].estimate(seed)),
    })
}

/// Monte-Carlo sums of squares for one posterior draw of `model`, sharing
/// the replicates across the three estimates.
pub fn mc_sums(
    model: &Model,
    partial: Option<&PartialSpec>,
    draw: &ParamDraw,
    m: usize,
    seed: u64,
) -> Result<McSums> {
    let means = model.means(draw)?;
    let reduced = partial
        .map(|p| reduced_means(model, p, draw))
        .transpose()?;
    let family = model.family();
    let phi = draw.phi;
    mc_sums_with(&means, reduced.as_deref(), m, seed, |rng, out| {
        sample_predictive_from_means(family, &means, phi, rng, out)
    })
}

/// Monte-Carlo estimate of the expected total sum of squares of `y~`.
pub fn mc_tss(model: &Model, draw: &ParamDraw, m: usize, seed: u64) -> Result<McEstimate> {
    Ok(mc_sums(model, None, draw, m, seed)?.tss)
}

/// Monte-Carlo estimate of the expected residual sum of squares.
pub fn mc_rss(model: &Model, draw: &ParamDraw, m: usize, seed: u64) -> Result<McEstimate> {
    Ok(mc_sums(model, None, draw, m, seed)?.rss)
}

/// Monte-Carlo estimate of the reduced model's expected residual sum of
/// squares.
pub fn mc_rss0(
    model: &Model,
    partial: &PartialSpec,
    draw: &ParamDraw,
    m: usize,
    seed: u64,
) -> Result<McEstimate> {
    Ok(mc_sums(model, Some(partial), draw, m, seed)?
        .rss0
        .expect("reduced means supplied"))
}

/// Posterior mean and standard deviation of a normal mean given iid
/// observations with known variance and a normal prior. An infinite
/// `prior_sd` gives the flat-prior limit.
pub fn conjugate_posterior(
    y: &[f64],
    prior_mean: f64,
    prior_sd: f64,
    noise_var: f64,
) -> Result<(f64, f64)> {
    if !(prior_sd > 0.0) || !(noise_var > 0.0 && noise_var.is_finite()) {
        return Err(Error::InvalidData("scales must be positive".into()));
    }
    if y.is_empty() && prior_sd.is_infinite() {
        return Err(Error::InvalidData("flat prior needs at least one observation".into()));
    }
    let prior_prec = if prior_sd.is_infinite() {
        0.0
    } else {
        1.0 / (prior_sd * prior_sd)
    };
    let data_prec = y.len() as f64 / noise_var;
    let prec = prior_prec + data_prec;
    let sum: f64 = y.iter().sum();
    let mean = (prior_prec * prior_mean + sum / noise_var) / prec;
    Ok((mean, prec.sqrt().recip()))
}

/// Posterior of `beta` in `y ~ N(X beta, noise_var I)` under iid
/// `N(0, prior_sd^2)` priors: returns the mean vector and covariance.
pub fn conjugate_regression(
    x: &DMatrix<f64>,
    y: &[f64],
    prior_sd: f64,
    noise_var: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !(prior_sd > 0.0) || !(noise_var > 0.0 && noise_var.is_finite()) {
        return Err(Error::InvalidData("scales must be positive".into()));
    }
    if x.nrows() != y.len() {
        return Err(Error::Dimension(format!(
            "X has {} rows, y has {}",
            x.nrows(),
            y.len()
        )));
    }
    let p = x.ncols();
    let prior_prec = if prior_sd.is_infinite() {
        0.0
    } else {
        1.0 / (prior_sd * prior_sd)
    };
    let prec = x.transpose() * x / noise_var + DMatrix::identity(p, p) * prior_prec;
    let chol = prec.cholesky().ok_or(Error::RankDeficient)?;
    let cov = chol.inverse();
    let mean = &cov * (x.transpose() * DVector::from_column_slice(y)) / noise_var;
    Ok((mean, cov))
}
