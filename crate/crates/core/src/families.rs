//! Exponential-family response distributions with their canonical links.
//!
//! Every family is parameterized by its mean `mu` and (where applicable) a
//! dispersion `phi`, so that `E[y] = mu` and `Var[y] = V(mu, phi)`:
//!
//! | family            | link g(x)        | V(x, phi)        | phi meaning          |
//! |-------------------|------------------|------------------|----------------------|
//! | gaussian          | x                | 1/phi            | 1 / variance         |
//! | gamma             | 1/x              | x^2/phi          | shape                |
//! | inverse_gaussian  | 1/x^2            | x^3/phi          | 1 / scale            |
//! | beta              | logit            | x(1-x)/(1+phi)   | shape1 + shape2      |
//! | bernoulli         | logit            | x(1-x)           | none                 |
//! | poisson           | log              | x                | none                 |
//! | neg_binomial      | log              | x(1+x/phi)       | shape (size)         |
//!
//! Note the Gaussian dispersion is a *precision*, not a variance.

use rand::Rng;
use rand_distr::{Bernoulli, Beta, Distribution, Gamma, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use std::f64::consts::PI;
use std::fmt;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum FamilyError {
    #[error("mean {mu} is outside the mean space of the {family} family")]
    MeanDomain { family: Family, mu: f64 },

    #[error("linear predictor {eta} is outside the image of the {family} link")]
    LinkImage { family: Family, eta: f64 },

    #[error("the {0} family requires a dispersion parameter")]
    MissingDispersion(Family),

    #[error("the {0} family has no dispersion parameter")]
    UnexpectedDispersion(Family),

    #[error("dispersion must be finite and positive, got {0}")]
    InvalidDispersion(f64),

    #[error("invalid sampling parameters for {family}: {reason}")]
    InvalidParameters { family: Family, reason: String },
}

/// Positive family-specific dispersion parameter.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Dispersion(f64);

impl Dispersion {
    pub fn new(value: f64) -> Result<Self, FamilyError> {
        if value.is_finite() && value > 0.0 {
            Ok(Dispersion(value))
        } else {
            Err(FamilyError::InvalidDispersion(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Dispersion {
    type Error = FamilyError;
    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Dispersion::new(value)
    }
}

impl From<Dispersion> for f64 {
    fn from(d: Dispersion) -> f64 {
        d.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Gamma,
    InverseGaussian,
    Beta,
    Bernoulli,
    Poisson,
    #[serde(rename = "neg_binomial")]
    NegativeBinomial,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown family '{s}'"))
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn inv_logit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `x * ln(y)` with the convention `0 * ln(0) = 0`.
fn xlny(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

fn is_count(y: f64) -> bool {
    y >= 0.0 && y.fract() == 0.0 && y.is_finite()
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Gaussian,
        Family::Gamma,
        Family::InverseGaussian,
        Family::Beta,
        Family::Bernoulli,
        Family::Poisson,
        Family::NegativeBinomial,
    ];

    /// Lowercase name used in model configuration files.
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Gamma => "gamma",
            Family::InverseGaussian => "inverse_gaussian",
            Family::Beta => "beta",
            Family::Bernoulli => "bernoulli",
            Family::Poisson => "poisson",
            Family::NegativeBinomial => "neg_binomial",
        }
    }

    pub fn has_dispersion(self) -> bool {
        !matches!(self, Family::Bernoulli | Family::Poisson)
    }

    pub fn is_discrete(self) -> bool {
        matches!(
            self,
            Family::Bernoulli | Family::Poisson | Family::NegativeBinomial
        )
    }

    /// Whether `mu` lies in the (open) mean space of the family.
    pub fn in_mean_space(self, mu: f64) -> bool {
        if !mu.is_finite() {
            return false;
        }
        match self {
            Family::Gaussian => true,
            Family::Gamma | Family::InverseGaussian | Family::Poisson | Family::NegativeBinomial => {
                mu > 0.0
            }
            Family::Beta | Family::Bernoulli => mu > 0.0 && mu < 1.0,
        }
    }

    /// Whether `eta` lies in the image of the canonical link.
    pub fn in_link_image(self, eta: f64) -> bool {
        if !eta.is_finite() {
            return false;
        }
        match self {
            Family::Gamma | Family::InverseGaussian => eta > 0.0,
            _ => true,
        }
    }

    /// Whether `y` belongs to the response space.
    pub fn in_support(self, y: f64) -> bool {
        match self {
            Family::Gaussian => y.is_finite(),
            Family::Gamma | Family::InverseGaussian => y.is_finite() && y > 0.0,
            Family::Beta => (0.0..=1.0).contains(&y),
            Family::Bernoulli => y == 0.0 || y == 1.0,
            Family::Poisson | Family::NegativeBinomial => is_count(y),
        }
    }

    pub fn link(self, mu: f64) -> Result<f64, FamilyError> {
        if !self.in_mean_space(mu) {
            return Err(FamilyError::MeanDomain { family: self, mu });
        }
        Ok(match self {
            Family::Gaussian => mu,
            Family::Gamma => 1.0 / mu,
            Family::InverseGaussian => 1.0 / (mu * mu),
            Family::Beta | Family::Bernoulli => logit(mu),
            Family::Poisson | Family::NegativeBinomial => mu.ln(),
        })
    }

    pub fn inverse_link(self, eta: f64) -> Result<f64, FamilyError> {
        if !self.in_link_image(eta) {
            return Err(FamilyError::LinkImage { family: self, eta });
        }
        Ok(match self {
            Family::Gaussian => eta,
            Family::Gamma => 1.0 / eta,
            Family::InverseGaussian => 1.0 / eta.sqrt(),
            Family::Beta | Family::Bernoulli => inv_logit(eta),
            Family::Poisson | Family::NegativeBinomial => eta.exp(),
        })
    }

    fn check_dispersion(self, phi: Option<Dispersion>) -> Result<f64, FamilyError> {
        match (self.has_dispersion(), phi) {
            (true, Some(p)) => Ok(p.value()),
            (true, None) => Err(FamilyError::MissingDispersion(self)),
            (false, None) => Ok(f64::NAN),
            (false, Some(_)) => Err(FamilyError::UnexpectedDispersion(self)),
        }
    }

    /// Conditional variance `V(mu, phi)`.
    ///
    /// Boundary means `0` (Poisson, Bernoulli) and `1` (Bernoulli) are
    /// accepted here and give zero variance.
    pub fn variance(self, mu: f64, phi: Option<Dispersion>) -> Result<f64, FamilyError> {
        let phi = self.check_dispersion(phi)?;
        let boundary_ok = match self {
            Family::Bernoulli => mu == 0.0 || mu == 1.0,
            Family::Poisson => mu == 0.0,
            _ => false,
        };
        if !boundary_ok && !self.in_mean_space(mu) {
            return Err(FamilyError::MeanDomain { family: self, mu });
        }
        Ok(match self {
            Family::Gaussian => 1.0 / phi,
            Family::Gamma => mu * mu / phi,
            Family::InverseGaussian => mu * mu * mu / phi,
            Family::Beta => mu * (1.0 - mu) / (1.0 + phi),
            Family::Bernoulli => mu * (1.0 - mu),
            Family::Poisson => mu,
            Family::NegativeBinomial => mu * (1.0 + mu / phi),
        })
    }

    /// Log density (or mass) of `y` at mean `mu`.
    ///
    /// Responses outside the support give `f64::NEG_INFINITY`, never NaN.
    pub fn log_density(self, y: f64, mu: f64, phi: Option<Dispersion>) -> Result<f64, FamilyError> {
        let phi = self.check_dispersion(phi)?;
        if !self.in_mean_space(mu) {
            return Err(FamilyError::MeanDomain { family: self, mu });
        }
        if !self.in_support(y) {
            return Ok(f64::NEG_INFINITY);
        }
        let lp = match self {
            Family::Gaussian => {
                let r = y - mu;
                0.5 * (phi / (2.0 * PI)).ln() - 0.5 * phi * r * r
            }
            Family::Gamma => {
                // shape = phi, scale = mu / phi
                -ln_gamma(phi) - phi * (mu / phi).ln() + (phi - 1.0) * y.ln() - y * phi / mu
            }
            Family::InverseGaussian => {
                let r = y - mu;
                0.5 * (phi / (2.0 * PI * y * y * y)).ln() - phi * r * r / (2.0 * mu * mu * y)
            }
            Family::Beta => {
                let a = mu * phi;
                let b = (1.0 - mu) * phi;
                let ln_beta = ln_gamma(a) + ln_gamma(b) - ln_gamma(phi);
                xlny(a - 1.0, y) + xlny(b - 1.0, 1.0 - y) - ln_beta
            }
            Family::Bernoulli => {
                if y == 1.0 {
                    mu.ln()
                } else {
                    (1.0 - mu).ln()
                }
            }
            Family::Poisson => xlny(y, mu) - mu - ln_gamma(y + 1.0),
            Family::NegativeBinomial => {
                ln_gamma(y + phi) - ln_gamma(phi) - ln_gamma(y + 1.0)
                    + phi * (phi / (phi + mu)).ln()
                    + xlny(y, mu / (phi + mu))
            }
        };
        Ok(lp)
    }

    /// Draw one response with mean `mu` and variance `V(mu, phi)`.
    pub fn sample_response<R: Rng + ?Sized>(
        self,
        mu: f64,
        phi: Option<Dispersion>,
        rng: &mut R,
    ) -> Result<f64, FamilyError> {
        let phi = self.check_dispersion(phi)?;
        if !self.in_mean_space(mu) {
            return Err(FamilyError::MeanDomain { family: self, mu });
        }
        let invalid = |reason: String| FamilyError::InvalidParameters {
            family: self,
            reason,
        };
        let y = match self {
            Family::Gaussian => {
                let sd = (1.0 / phi).sqrt();
                Normal::new(mu, sd)
                    .map_err(|e| invalid(e.to_string()))?
                    .sample(rng)
            }
            Family::Gamma => Gamma::new(phi, mu / phi)
                .map_err(|e| invalid(e.to_string()))?
                .sample(rng),
            Family::InverseGaussian => sample_inverse_gaussian(mu, phi, rng),
            Family::Beta => {
                let (a, b) = (mu * phi, (1.0 - mu) * phi);
                if !(a > 0.0 && b > 0.0) {
                    return Err(invalid(format!("shapes ({a}, {b}) must be positive")));
                }
                Beta::new(a, b)
                    .map_err(|e| invalid(e.to_string()))?
                    .sample(rng)
            }
            Family::Bernoulli => {
                let hit = Bernoulli::new(mu)
                    .map_err(|e| invalid(e.to_string()))?
                    .sample(rng);
                if hit {
                    1.0
                } else {
                    0.0
                }
            }
            Family::Poisson => sample_poisson(mu, rng).map_err(invalid)?,
            Family::NegativeBinomial => {
                // Gamma-Poisson mixture: size = phi, prob = phi / (phi + mu).
                let rate = Gamma::new(phi, mu / phi)
                    .map_err(|e| invalid(e.to_string()))?
                    .sample(rng);
                if rate <= 0.0 {
                    0.0
                } else {
                    sample_poisson(rate, rng).map_err(invalid)?
                }
            }
        };
        Ok(y)
    }
}

fn sample_poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> Result<f64, String> {
    Poisson::new(lambda)
        .map(|d| d.sample(rng))
        .map_err(|e| format!("poisson rate {lambda}: {e}"))
}

/// Michael, Schucany & Haas transformation for IG(mean, shape).
fn sample_inverse_gaussian<R: Rng + ?Sized>(mean: f64, shape: f64, rng: &mut R) -> f64 {
    let nu: f64 = rng.sample(StandardNormal);
    let y = nu * nu;
    let m = mean;
    let x = m + m * m * y / (2.0 * shape)
        - (m / (2.0 * shape)) * (4.0 * m * shape * y + m * m * y * y).sqrt();
    let u: f64 = rng.random();
    if u <= m / (m + x) {
        x
    } else {
        m * m / x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn d(v: f64) -> Option<Dispersion> {
        Some(Dispersion::new(v).unwrap())
    }

    #[test]
    fn link_examples() {
        assert!((Family::Poisson.link(std::f64::consts::E).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(Family::Bernoulli.link(0.5).unwrap(), 0.0);
        assert_eq!(Family::Gamma.link(4.0).unwrap(), 0.25);
    }

    #[test]
    fn inverse_link_examples() {
        assert_eq!(Family::NegativeBinomial.inverse_link(0.0).unwrap(), 1.0);
        assert_eq!(Family::Beta.inverse_link(0.0).unwrap(), 0.5);
        assert_eq!(Family::InverseGaussian.inverse_link(4.0).unwrap(), 0.5);
    }

    #[test]
    fn boundary_means_rejected_by_link() {
        assert!(Family::Bernoulli.link(0.0).is_err());
        assert!(Family::Bernoulli.link(1.0).is_err());
        assert!(Family::Beta.link(1.0).is_err());
        assert!(Family::Poisson.link(0.0).is_err());
        assert!(Family::InverseGaussian.inverse_link(0.0).is_err());
        assert!(Family::Gamma.inverse_link(-1.0).is_err());
    }

    #[test]
    fn variance_examples() {
        assert_eq!(Family::Poisson.variance(4.0, None).unwrap(), 4.0);
        assert_eq!(Family::NegativeBinomial.variance(6.0, d(2.0)).unwrap(), 24.0);
        assert_eq!(Family::Bernoulli.variance(0.5, None).unwrap(), 0.25);
        assert_eq!(Family::Gaussian.variance(-17.0, d(4.0)).unwrap(), 0.25);
        assert_eq!(Family::Bernoulli.variance(0.0, None).unwrap(), 0.0);
        assert_eq!(Family::Poisson.variance(0.0, None).unwrap(), 0.0);
    }

    #[test]
    fn dispersion_presence_is_checked() {
        assert_eq!(
            Family::Gaussian.variance(0.0, None),
            Err(FamilyError::MissingDispersion(Family::Gaussian))
        );
        assert_eq!(
            Family::Poisson.variance(1.0, d(1.0)),
            Err(FamilyError::UnexpectedDispersion(Family::Poisson))
        );
        assert!(Dispersion::new(0.0).is_err());
        assert!(Dispersion::new(-1.0).is_err());
        assert!(Dispersion::new(f64::NAN).is_err());
    }

    #[test]
    fn log_density_examples() {
        // phi is a precision: phi = 2 pi gives variance 1 / (2 pi) and a
        // unit density at the mode.
        let g = Family::Gaussian.log_density(1.3, 1.3, d(2.0 * PI)).unwrap();
        assert!(g.abs() < 1e-14, "{g}");
        let g = Family::Gaussian
            .log_density(1.3, 1.3, d(1.0 / (2.0 * PI)))
            .unwrap();
        assert!((g + (2.0 * PI).ln()).abs() < 1e-14, "{g}");
        let b = Family::Bernoulli.log_density(1.0, 0.5, None).unwrap();
        assert!((b - 0.5f64.ln()).abs() < 1e-15);

        // NB(size=2, mean=6) at y=3: p = 2/8 = 1/4.
        // C(y+r-1, y) p^r (1-p)^y = C(4,3) (1/4)^2 (3/4)^3 = 4 * 27 / 1024
        let expected = (4.0 * 27.0 / 1024.0f64).ln();
        let nb = Family::NegativeBinomial.log_density(3.0, 6.0, d(2.0)).unwrap();
        assert!((nb - expected).abs() < 1e-12, "{nb} vs {expected}");
    }

    #[test]
    fn out_of_support_is_neg_infinity() {
        let cases = [
            (Family::Poisson, -1.0, None),
            (Family::Poisson, 1.5, None),
            (Family::Bernoulli, 0.3, None),
            (Family::Gamma, 0.0, d(1.0)),
            (Family::Beta, 1.2, d(2.0)),
        ];
        for (fam, y, phi) in cases {
            let mu = if fam == Family::Bernoulli || fam == Family::Beta { 0.4 } else { 2.0 };
            let lp = fam.log_density(y, mu, phi).unwrap();
            assert_eq!(lp, f64::NEG_INFINITY, "{fam} y={y}");
        }
    }

    #[test]
    fn discrete_pmfs_sum_to_one() {
        let bern: f64 = [0.0, 1.0]
            .iter()
            .map(|&y| Family::Bernoulli.log_density(y, 0.3, None).unwrap().exp())
            .sum();
        assert!((bern - 1.0).abs() < 1e-15);

        for (fam, mu, phi) in [
            (Family::Poisson, 4.0, None),
            (Family::Poisson, 37.5, None),
            (Family::NegativeBinomial, 6.0, d(2.0)),
            (Family::NegativeBinomial, 20.0, d(0.7)),
        ] {
            let mut total = 0.0;
            let mut y = 0.0;
            loop {
                let p = fam.log_density(y, mu, phi).unwrap().exp();
                total += p;
                y += 1.0;
                if y > mu && p < 1e-14 {
                    break;
                }
            }
            assert!((total - 1.0).abs() < 1e-10, "{fam}: {total}");
        }
    }

    #[test]
    fn continuous_densities_integrate_to_one() {
        // midpoint rule on a fine grid
        let cases = [
            (Family::Gamma, 2.0, 3.0, 0.0, 40.0),
            (Family::InverseGaussian, 1.5, 4.0, 0.0, 40.0),
            (Family::Beta, 0.3, 5.0, 0.0, 1.0),
            (Family::Gaussian, 0.7, 2.0, -10.0, 10.0),
        ];
        for (fam, mu, phi, lo, hi) in cases {
            let m = 400_000;
            let h = (hi - lo) / m as f64;
            let total: f64 = (0..m)
                .map(|i| {
                    let y = lo + (i as f64 + 0.5) * h;
                    fam.log_density(y, mu, d(phi)).unwrap().exp() * h
                })
                .sum();
            assert!((total - 1.0).abs() < 1e-4, "{fam}: {total}");
        }
    }

    #[test]
    fn sampler_is_deterministic_and_sharp_bernoulli() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for fam in Family::ALL {
            let (mu, phi) = match fam {
                Family::Beta | Family::Bernoulli => (0.3, d(4.0)),
                _ => (2.0, d(4.0)),
            };
            let phi = if fam.has_dispersion() { phi } else { None };
            let x = fam.sample_response(mu, phi, &mut a).unwrap();
            let y = fam.sample_response(mu, phi, &mut b).unwrap();
            assert_eq!(x.to_bits(), y.to_bits());
            assert!(fam.in_support(x), "{fam} produced {x}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let y = Family::Bernoulli
                .sample_response(1.0 - 1e-12, None, &mut rng)
                .unwrap();
            assert_eq!(y, 1.0);
        }
    }

    #[test]
    fn poisson_and_negbin_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let mean: f64 = (0..n)
            .map(|_| Family::Poisson.sample_response(4.0, None, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 4.0).abs() < 3.0 * 2.0 / 1000.0, "{mean}");

        let xs: Vec<f64> = (0..n)
            .map(|_| {
                Family::NegativeBinomial
                    .sample_response(6.0, d(2.0), &mut rng)
                    .unwrap()
            })
            .collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((v - 24.0).abs() < 0.05 * 24.0, "{v}");
    }

    #[test]
    fn serde_names() {
        let s = serde_json::to_string(&Family::NegativeBinomial).unwrap();
        assert_eq!(s, "\"neg_binomial\"");
        let f: Family = serde_json::from_str("\"inverse_gaussian\"").unwrap();
        assert_eq!(f, Family::InverseGaussian);
        for fam in Family::ALL {
            assert_eq!(fam.name().parse::<Family>().unwrap(), fam);
        }
    }
}
