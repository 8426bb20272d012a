//! Log joint posterior and a component-blocked adaptive random-walk
//! Metropolis sampler.
//!
//! Unknowns are updated in blocks: the fixed effects, the random intercepts,
//! each smooth's coefficients, `log psi`, `log tau` and `log phi`. Each block
//! carries a scalar step size tuned by Robbins-Monro toward the target
//! acceptance rate during warmup and a proposal covariance re-estimated from
//! warmup windows. All tuning is frozen once warmup ends.
//!
//! The smoothing prior is the proper version of the usual improper penalty
//! prior: on the range space of `S_j`, `gamma_j | tau_j ~ N(0, tau_j^2 S_j^+)`,
//! which is `exp(-gamma' S gamma / (2 tau^2))`, i.e. smoothing parameter
//! `1 / (2 tau^2)`. The unpenalized directions get `N(0, beta_scale^2)`.

use crate::error::{Error, Result};
use crate::families::{Dispersion, Family};
use crate::model::{DispersionPrior, Model, ParamDraw, Term};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn normal_lpdf(x: f64, sd: f64) -> f64 {
    -0.5 * LN_2PI - sd.ln() - 0.5 * (x / sd).powi(2)
}

fn half_normal_lpdf(x: f64, sd: f64) -> f64 {
    if x > 0.0 {
        std::f64::consts::LN_2 + normal_lpdf(x, sd)
    } else {
        f64::NEG_INFINITY
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub iters: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub thin: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 4,
            warmup: 1000,
            iters: 1000,
            seed: 20240917,
            target_accept: 0.234,
            thin: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::SamplerConfig("chains must be at least 1".into()));
        }
        if self.warmup == 0 || self.iters == 0 {
            return Err(Error::SamplerConfig("warmup and iters must be at least 1".into()));
        }
        if self.thin == 0 || self.iters / self.thin == 0 {
            return Err(Error::SamplerConfig("thin must be in 1..=iters".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::SamplerConfig("target_accept must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Posterior draws pooled over chains, ordered by chain then iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct DrawSet {
    pub draws: Vec<ParamDraw>,
    pub chain_ids: Vec<usize>,
    /// Post-warmup iteration index of each draw.
    pub iters: Vec<usize>,
    /// Post-warmup acceptance rate per chain, averaged over blocks.
    pub accept_rates: Vec<f64>,
    /// Post-warmup acceptance rate per chain and block.
    pub block_accept_rates: Vec<Vec<(String, f64)>>,
    pub seed: u64,
}

impl DrawSet {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn n_chains(&self) -> usize {
        self.chain_ids.iter().max().map_or(0, |m| m + 1)
    }

    /// Values of `f` split by chain.
    pub fn per_chain<F: Fn(&ParamDraw) -> f64>(&self, f: F) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); self.n_chains()];
        for (d, &c) in self.draws.iter().zip(&self.chain_ids) {
            out[c].push(f(d));
        }
        out
    }

    /// Split-chain potential scale reduction for a scalar functional.
    pub fn split_rhat<F: Fn(&ParamDraw) -> f64>(&self, f: F) -> f64 {
        let halves: Vec<Vec<f64>> = self
            .per_chain(f)
            .into_iter()
            .flat_map(|c| {
                let h = c.len() / 2;
                vec![c[..h].to_vec(), c[h..2 * h].to_vec()]
            })
            .filter(|c| c.len() >= 2)
            .collect();
        if halves.len() < 2 {
            return f64::NAN;
        }
        let m = halves.len() as f64;
        let n = halves[0].len() as f64;
        let means: Vec<f64> = halves.iter().map(|c| mean(c)).collect();
        let grand = mean(&means);
        let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
        let w = halves.iter().map(|c| variance(c)).sum::<f64>() / m;
        if w == 0.0 {
            return if b == 0.0 { 1.0 } else { f64::INFINITY };
        }
        (((n - 1.0) / n * w + b / n) / w).sqrt()
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub(crate) fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Effective sample size of a single chain by Geyer's initial monotone
/// sequence estimator.
pub fn effective_sample_size(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return n as f64;
    }
    let m = mean(xs);
    let c0 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        return n as f64;
    }
    let acf = |lag: usize| -> f64 {
        xs[..n - lag]
            .iter()
            .zip(&xs[lag..])
            .map(|(a, b)| (a - m) * (b - m))
            .sum::<f64>()
            / n as f64
            / c0
    };
    let mut sum = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = acf(lag) + acf(lag + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        sum += pair;
        prev_pair = pair;
        lag += 2;
    }
    let tau = -1.0 + 2.0 * sum;
    (n as f64 / tau.max(1e-12)).min(n as f64 * (n as f64).log10())
}

/// Per-smooth constants for the smoothing prior.
#[derive(Clone, Debug)]
struct SmoothPrior {
    null_space: DMatrix<f64>,
    rank: usize,
    log_pdet: f64,
}

/// Log joint posterior (up to the marginal likelihood) with cached prior
/// constants.
#[derive(Clone, Debug)]
pub struct Posterior<'a> {
    model: &'a Model,
    smooths: Vec<SmoothPrior>,
}

/// Additive pieces of the log posterior.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LogPosteriorTerms {
    pub likelihood: f64,
    pub beta: f64,
    pub random_effects: f64,
    pub smooth: f64,
    pub psi: f64,
    pub tau: f64,
    pub phi: f64,
}

impl LogPosteriorTerms {
    pub fn total(&self) -> f64 {
        let t = self.likelihood
            + self.beta
            + self.random_effects
            + self.smooth
            + self.psi
            + self.tau
            + self.phi;
        if t.is_nan() {
            f64::NEG_INFINITY
        } else {
            t
        }
    }

    fn priors(&self) -> f64 {
        self.beta + self.random_effects + self.smooth + self.psi + self.tau + self.phi
    }
}

impl<'a> Posterior<'a> {
    pub fn new(model: &'a Model) -> Self {
        let smooths = model
            .penalties()
            .iter()
            .map(|p| {
                let eig = p.s.clone().symmetric_eigen();
                let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
                ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let rank = p.rank();
                SmoothPrior {
                    null_space: p.null_space(),
                    rank,
                    log_pdet: ev[..rank].iter().map(|v| v.ln()).sum(),
                }
            })
            .collect();
        Posterior { model, smooths }
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    /// Sum of log-likelihood contributions; `-inf` when a mean leaves the
    /// family's mean space.
    pub fn log_likelihood(&self, eta: &[f64], phi: Option<Dispersion>) -> f64 {
        let fam = self.model.family();
        let y = &self.model.data().y;
        let mut total = 0.0;
        for (&yi, &e) in y.iter().zip(eta) {
            let lp = match fam.inverse_link(e).and_then(|mu| fam.log_density(yi, mu, phi)) {
                Ok(v) => v,
                Err(_) => return f64::NEG_INFINITY,
            };
            if lp == f64::NEG_INFINITY || lp.is_nan() {
                return f64::NEG_INFINITY;
            }
            total += lp;
        }
        total
    }

    /// Prior pieces of the log posterior.
    pub fn log_prior(&self, draw: &ParamDraw) -> LogPosteriorTerms {
        let priors = &self.model.spec().priors;
        let layout = self.model.layout();
        let mut t = LogPosteriorTerms {
            beta: draw
                .beta
                .iter()
                .map(|&b| normal_lpdf(b, priors.beta_scale))
                .sum(),
            ..Default::default()
        };

        for (j, &psi) in draw.psi.iter().enumerate() {
            t.psi += half_normal_lpdf(psi, priors.psi_scale);
            if psi > 0.0 {
                t.random_effects += draw.b[layout.b_range(j)]
                    .iter()
                    .map(|&b| normal_lpdf(b, psi))
                    .sum::<f64>();
            }
        }

        for (j, &tau) in draw.tau.iter().enumerate() {
            t.tau += half_normal_lpdf(tau, priors.tau_scale);
            if !(tau > 0.0) {
                continue;
            }
            let sp = &self.smooths[j];
            let gamma = DVector::from_column_slice(&draw.gamma[layout.gamma_range(j)]);
            let pen = &self.model.penalties()[j];
            let quad = gamma.dot(&(&pen.s * &gamma)).max(0.0);
            let rank = sp.rank as f64;
            let range_part =
                -0.5 * quad / (tau * tau) - rank * tau.ln() - 0.5 * rank * LN_2PI + 0.5 * sp.log_pdet;
            let null_part: f64 = (sp.null_space.transpose() * &gamma)
                .iter()
                .map(|&a| normal_lpdf(a, priors.beta_scale))
                .sum();
            t.smooth += range_part + null_part;
        }

        if let (Some(phi), DispersionPrior::LogNormal { scale }) =
            (draw.phi, &priors.dispersion_prior)
        {
            let lp = phi.value().ln();
            t.phi = normal_lpdf(lp, *scale) - lp;
        }
        t
    }

    /// Log posterior split into its additive pieces.
    pub fn terms(&self, draw: &ParamDraw) -> Result<LogPosteriorTerms> {
        self.model.check_dims(draw)?;
        let mut t = self.log_prior(draw);
        if draw.psi.iter().chain(&draw.tau).any(|&s| !(s > 0.0 && s.is_finite())) {
            t.likelihood = f64::NEG_INFINITY;
            return Ok(t);
        }
        if let (Some(phi), DispersionPrior::Fixed { value }) =
            (draw.phi, &self.model.spec().priors.dispersion_prior)
        {
            if phi.value() != *value {
                t.phi = f64::NEG_INFINITY;
            }
        }
        let eta = self.model.eta_from_coefficients(&draw.coefficients());
        t.likelihood = self.log_likelihood(&eta, draw.phi);
        Ok(t)
    }

    pub fn log_posterior(&self, draw: &ParamDraw) -> Result<f64> {
        Ok(self.terms(draw)?.total())
    }
}

/// Log of the unnormalized joint posterior density at `draw`.
///
/// Returns `-inf` (never NaN) when the draw is outside the support.
pub fn log_posterior(model: &Model, draw: &ParamDraw) -> Result<f64> {
    Posterior::new(model).log_posterior(draw)
}

/// Draws one predictive replicate `y~ | draw`, independently across rows.
pub fn sample_predictive<R: Rng + ?Sized>(
    model: &Model,
    draw: &ParamDraw,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let means = model.means(draw)?;
    let fam = model.family();
    means
        .into_iter()
        .map(|mu| fam.sample_response(mu, draw.phi, rng).map_err(Error::from))
        .collect()
}

/// Same as [`sample_predictive`] with the means already computed.
pub(crate) fn sample_predictive_from_means<R: Rng + ?Sized>(
    family: Family,
    means: &[f64],
    phi: Option<Dispersion>,
    rng: &mut R,
    out: &mut [f64],
) -> Result<()> {
    for (o, &mu) in out.iter_mut().zip(means) {
        *o = family.sample_response(mu, phi, rng)?;
    }
    Ok(())
}

/// Unconstrained sampler state: coefficients, then log psi, log tau and
/// (when sampled) log phi.
struct Layout {
    n_coef: usize,
    n_psi: usize,
    n_tau: usize,
    sample_phi: bool,
    fixed_phi: Option<f64>,
}

impl Layout {
    fn psi_start(&self) -> usize {
        self.n_coef
    }
    fn tau_start(&self) -> usize {
        self.n_coef + self.n_psi
    }
    fn phi_index(&self) -> usize {
        self.n_coef + self.n_psi + self.n_tau
    }
    fn dim(&self) -> usize {
        self.phi_index() + usize::from(self.sample_phi)
    }

    fn to_draw(&self, model: &Model, theta: &[f64]) -> ParamDraw {
        let l = model.layout();
        let nb = l.n_beta();
        let nr = l.n_b();
        let phi = if self.sample_phi {
            Dispersion::new(theta[self.phi_index()].exp()).ok()
        } else {
            self.fixed_phi.and_then(|v| Dispersion::new(v).ok())
        };
        ParamDraw {
            beta: theta[..nb].to_vec(),
            b: theta[nb..nb + nr].to_vec(),
            gamma: theta[nb + nr..self.n_coef].to_vec(),
            phi,
            psi: theta[self.psi_start()..self.tau_start()].iter().map(|v| v.exp()).collect(),
            tau: theta[self.tau_start()..self.phi_index()].iter().map(|v| v.exp()).collect(),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum BlockKind {
    Coefficients,
    Scales,
    /// Scale moves that rescale the penalized part of the coefficients they
    /// govern, keeping the standardized coefficients fixed.
    ScaleJoint,
    Dispersion,
}

/// Coefficients governed by a scale parameter.
struct ScaleLink {
    cols: std::ops::Range<usize>,
    /// Projector onto the penalized directions; `None` for the identity.
    proj: Option<DMatrix<f64>>,
    rank: usize,
}

#[derive(Clone)]
struct Block {
    name: String,
    kind: BlockKind,
    idx: Vec<usize>,
    log_step: f64,
    /// Lower Cholesky factor of the proposal covariance.
    chol: DMatrix<f64>,
    rm_iter: usize,
    window: Vec<Vec<f64>>,
    window_accepts: usize,
    accepted: usize,
    proposed: usize,
}

impl Block {
    fn new(name: String, kind: BlockKind, idx: Vec<usize>, init_sd: f64) -> Self {
        let d = idx.len();
        Block {
            name,
            kind,
            idx,
            log_step: (2.38 / (d as f64).sqrt()).ln(),
            chol: DMatrix::identity(d, d) * init_sd,
            rm_iter: 0,
            window: Vec::new(),
            window_accepts: 0,
            accepted: 0,
            proposed: 0,
        }
    }

    /// Re-estimates the proposal covariance from the current window.
    fn refit_covariance(&mut self) {
        let d = self.idx.len();
        let m = self.window.len();
        let accept_frac = self.window_accepts as f64 / m.max(1) as f64;
        if m >= (2 * d).max(20) && accept_frac >= 0.05 {
            let mut mu = DVector::zeros(d);
            for x in &self.window {
                mu += DVector::from_column_slice(x);
            }
            mu /= m as f64;
            let mut cov = DMatrix::zeros(d, d);
            for x in &self.window {
                let r = DVector::from_column_slice(x) - &mu;
                cov += &r * r.transpose();
            }
            cov /= (m - 1) as f64;
            let mean_diag = cov.trace() / d as f64;
            if mean_diag > 0.0 && mean_diag.is_finite() {
                for i in 0..d {
                    cov[(i, i)] += 1e-3 * cov[(i, i)] + 1e-10 * mean_diag + 1e-12;
                }
                if let Some(ch) = cov.cholesky() {
                    self.chol = ch.l();
                    self.log_step = (2.38 / (d as f64).sqrt()).ln();
                    self.rm_iter = 0;
                }
            }
        }
        self.window.clear();
        self.window_accepts = 0;
    }
}

struct ChainOutput {
    draws: Vec<ParamDraw>,
    iters: Vec<usize>,
    block_rates: Vec<(String, f64)>,
}

/// Current state with cached linear predictor and log-posterior pieces.
struct State {
    theta: Vec<f64>,
    eta: Vec<f64>,
    lik: f64,
    prior: f64,
}

impl State {
    /// Log target on the unconstrained scale (log-Jacobian for the log
    /// transformed scales included).
    fn target(&self, jacobian: f64) -> f64 {
        let t = self.lik + self.prior + jacobian;
        if t.is_nan() {
            f64::NEG_INFINITY
        } else {
            t
        }
    }
}

struct ChainRunner<'m> {
    post: Posterior<'m>,
    layout: Layout,
    cfg: SamplerConfig,
    /// Indexed by position in the unconstrained state.
    links: Vec<Option<ScaleLink>>,
}

impl<'m> ChainRunner<'m> {
    fn jacobian(&self, theta: &[f64]) -> f64 {
        theta[self.layout.psi_start()..self.layout.dim()].iter().sum()
    }

    fn evaluate(&self, theta: Vec<f64>, eta: Option<Vec<f64>>) -> State {
        let model = self.post.model();
        let draw = self.layout.to_draw(model, &theta);
        let eta = eta.unwrap_or_else(|| model.eta_from_coefficients(&theta[..self.layout.n_coef]));
        let lik = self.post.log_likelihood(&eta, draw.phi);
        let prior = self.post.log_prior(&draw).priors();
        State {
            theta,
            eta,
            lik,
            prior,
        }
    }

    fn blocks(&self) -> Vec<Block> {
        let model = self.post.model();
        let l = model.layout();
        let mut blocks = Vec::new();
        let shift = |r: std::ops::Range<usize>| r.collect::<Vec<_>>();
        blocks.push(Block::new(
            "beta".into(),
            BlockKind::Coefficients,
            shift(l.beta_range()),
            0.1,
        ));
        if l.n_b() > 0 {
            let start = l.n_beta();
            blocks.push(Block::new(
                "b".into(),
                BlockKind::Coefficients,
                (start..start + l.n_b()).collect(),
                0.1,
            ));
        }
        for j in 0..l.smooth_k.len() {
            blocks.push(Block::new(
                format!("gamma_{}", model.spec().smooth[j].var),
                BlockKind::Coefficients,
                shift(l.columns(Term::Smooth(j))),
                0.1,
            ));
        }
        if self.layout.n_psi > 0 {
            let s = self.layout.psi_start();
            blocks.push(Block::new(
                "log_psi".into(),
                BlockKind::Scales,
                (s..s + self.layout.n_psi).collect(),
                0.3,
            ));
            blocks.push(Block::new(
                "log_psi_joint".into(),
                BlockKind::ScaleJoint,
                (s..s + self.layout.n_psi).collect(),
                0.1,
            ));
        }
        if self.layout.n_tau > 0 {
            let s = self.layout.tau_start();
            blocks.push(Block::new(
                "log_tau".into(),
                BlockKind::Scales,
                (s..s + self.layout.n_tau).collect(),
                0.3,
            ));
            blocks.push(Block::new(
                "log_tau_joint".into(),
                BlockKind::ScaleJoint,
                (s..s + self.layout.n_tau).collect(),
                0.1,
            ));
        }
        if self.layout.sample_phi {
            blocks.push(Block::new(
                "log_phi".into(),
                BlockKind::Dispersion,
                vec![self.layout.phi_index()],
                0.3,
            ));
        }
        blocks
    }

    /// Starting point: least squares on link-transformed responses for the
    /// fixed effects, zero random effects and smooths, unit scales.
    fn base_init(&self) -> (Vec<f64>, Vec<f64>) {
        let model = self.post.model();
        let fam = model.family();
        let data = model.data();
        let n = model.n();
        let m1 = model.layout().n_fixed;
        let z: Vec<f64> = data.y.iter().map(|&y| link_transform(fam, y, n)).collect();

        let mut theta = vec![0.0; self.layout.dim()];
        let zbar = mean(&z);
        let intercept_only = {
            let mut t = theta.clone();
            t[0] = zbar;
            t
        };
        let x = DMatrix::from_fn(n, m1 + 1, |i, j| if j == 0 { 1.0 } else { data.fixed[(i, j - 1)] });
        let svd = x.svd(true, true);
        let ls = svd
            .solve(&DVector::from_column_slice(&z), 1e-10)
            .ok()
            .filter(|b| b.iter().all(|v| v.is_finite()));
        if let Some(b) = ls {
            theta[..=m1].copy_from_slice(b.as_slice());
        } else {
            theta = intercept_only.clone();
        }
        (theta, intercept_only)
    }

    fn initialize(&self, rng: &mut ChaCha8Rng) -> Result<State> {
        let (ls, fallback) = self.base_init();
        let jitter = |base: &[f64], scale: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            base.iter()
                .map(|&v| v + scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        for attempt in 0..100 {
            let theta = match attempt {
                0 => jitter(&ls, 0.05, rng),
                1 => jitter(&fallback, 0.05, rng),
                a => jitter(&fallback, 0.5 / (a as f64).sqrt(), rng),
            };
            let state = self.evaluate(theta, None);
            if state.target(self.jacobian(&state.theta)).is_finite() {
                return Ok(state);
            }
        }
        Err(Error::Initialization(
            "log posterior non-finite at 100 starting points".into(),
        ))
    }

    fn run(&self, chain: usize) -> Result<ChainOutput> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(chain as u64 + 1);
        let mut state = self.initialize(&mut rng)?;
        let mut blocks = self.blocks();
        let model = self.post.model();
        let design = model.design();

        let warmup = self.cfg.warmup;
        // covariance refits at these warmup iterations
        let schedule: Vec<usize> = [0.05, 0.1, 0.2, 0.4, 0.7]
            .iter()
            .map(|f| (f * warmup as f64).round() as usize)
            .filter(|&w| w > 0)
            .collect();

        let total = warmup + self.cfg.iters;
        let mut draws = Vec::with_capacity(self.cfg.iters / self.cfg.thin);
        let mut iters = Vec::with_capacity(self.cfg.iters / self.cfg.thin);
        let mut z = vec![0.0; self.layout.dim()];

        for it in 0..total {
            let in_warmup = it < warmup;
            if in_warmup && schedule.contains(&it) {
                for b in blocks.iter_mut() {
                    b.refit_covariance();
                }
            }
            if it == warmup {
                for b in blocks.iter_mut() {
                    b.accepted = 0;
                    b.proposed = 0;
                }
            }
            for block in blocks.iter_mut() {
                let d = block.idx.len();
                for zi in z[..d].iter_mut() {
                    *zi = rng.sample(StandardNormal);
                }
                let step = block.log_step.exp();
                let delta = &block.chol * DVector::from_column_slice(&z[..d]) * step;
                let mut theta = state.theta.clone();
                for (k, &i) in block.idx.iter().enumerate() {
                    theta[i] += delta[k];
                }
                let mut log_jac = 0.0;
                let proposal = match block.kind {
                    BlockKind::Coefficients => {
                        let mut eta = state.eta.clone();
                        for (k, &col) in block.idx.iter().enumerate() {
                            let dk = delta[k];
                            for (e, x) in eta.iter_mut().zip(design.column(col).iter()) {
                                *e += x * dk;
                            }
                        }
                        self.evaluate(theta, Some(eta))
                    }
                    BlockKind::Scales => {
                        let draw = self.layout.to_draw(model, &theta);
                        State {
                            prior: self.post.log_prior(&draw).priors(),
                            theta,
                            eta: state.eta.clone(),
                            lik: state.lik,
                        }
                    }
                    BlockKind::ScaleJoint => {
                        let mut eta = state.eta.clone();
                        for (k, &i) in block.idx.iter().enumerate() {
                            let link = self.links[i].as_ref().expect("scale link");
                            let g = DVector::from_column_slice(&state.theta[link.cols.clone()]);
                            let r = match &link.proj {
                                Some(p) => p * &g,
                                None => g,
                            };
                            let change = r * delta[k].exp_m1();
                            for (c, &dc) in link.cols.clone().zip(change.iter()) {
                                theta[c] += dc;
                                for (e, x) in eta.iter_mut().zip(design.column(c).iter()) {
                                    *e += x * dc;
                                }
                            }
                            log_jac += link.rank as f64 * delta[k];
                        }
                        self.evaluate(theta, Some(eta))
                    }
                    BlockKind::Dispersion => self.evaluate(theta, Some(state.eta.clone())),
                };
                let log_ratio = proposal.target(self.jacobian(&proposal.theta))
                    - state.target(self.jacobian(&state.theta))
                    + log_jac;
                let accept_prob = if log_ratio.is_nan() {
                    0.0
                } else {
                    log_ratio.min(0.0).exp()
                };
                let u: f64 = rng.random();
                let accepted = u < accept_prob;
                if accepted {
                    state = proposal;
                }
                block.proposed += 1;
                if accepted {
                    block.accepted += 1;
                }
                if in_warmup {
                    block.rm_iter += 1;
                    let gain = (block.rm_iter as f64).powf(-0.6);
                    block.log_step += gain * (accept_prob - self.cfg.target_accept);
                    block.window.push(block.idx.iter().map(|&i| state.theta[i]).collect());
                    if accepted {
                        block.window_accepts += 1;
                    }
                }
            }
            if !in_warmup {
                let k = it - warmup;
                if (k + 1) % self.cfg.thin == 0 {
                    draws.push(self.layout.to_draw(model, &state.theta));
                    iters.push(k);
                }
            }
        }
        let block_rates = blocks
            .iter()
            .map(|b| (b.name.clone(), b.accepted as f64 / b.proposed.max(1) as f64))
            .collect();
        Ok(ChainOutput {
            draws,
            iters,
            block_rates,
        })
    }
}

/// Response transformed to the link scale, nudged off the boundary so the
/// link is finite.
fn link_transform(fam: Family, y: f64, n: usize) -> f64 {
    let nf = n as f64;
    let mu = match fam {
        Family::Gaussian => y,
        Family::Gamma | Family::InverseGaussian => y.max(1e-8),
        Family::Beta => (y * (nf - 1.0) + 0.5) / nf,
        Family::Bernoulli => (y + 0.5) / 2.0,
        Family::Poisson | Family::NegativeBinomial => y + 0.5,
    };
    fam.link(mu).unwrap_or(0.0)
}

/// Runs `config.chains` independent chains and pools their draws.
///
/// Deterministic given the seed, regardless of the number of threads.
pub fn sample_posterior(model: &Model, config: &SamplerConfig) -> Result<DrawSet> {
    config.validate()?;
    let fixed_phi = match model.spec().priors.dispersion_prior {
        DispersionPrior::Fixed { value } => Some(value),
        _ => None,
    };
    let fam = model.family();
    let layout = Layout {
        n_coef: model.layout().n_coef(),
        n_psi: model.layout().factor_levels.len(),
        n_tau: model.layout().smooth_k.len(),
        sample_phi: fam.has_dispersion() && fixed_phi.is_none(),
        fixed_phi: if fam.has_dispersion() { fixed_phi } else { None },
    };
    let post = Posterior::new(model);
    let mut links: Vec<Option<ScaleLink>> = (0..layout.dim()).map(|_| None).collect();
    let ml = model.layout();
    for (j, &levels) in ml.factor_levels.iter().enumerate() {
        links[layout.psi_start() + j] = Some(ScaleLink {
            cols: ml.columns(Term::Random(j)),
            proj: None,
            rank: levels,
        });
    }
    for (j, sp) in post.smooths.iter().enumerate() {
        let k = sp.null_space.nrows();
        let proj = DMatrix::identity(k, k) - &sp.null_space * sp.null_space.transpose();
        links[layout.tau_start() + j] = Some(ScaleLink {
            cols: ml.columns(Term::Smooth(j)),
            proj: Some(proj),
            rank: sp.rank,
        });
    }
    let runner = ChainRunner {
        post,
        layout,
        cfg: config.clone(),
        links,
    };
    let outputs: Vec<Result<ChainOutput>> = (0..config.chains)
        .into_par_iter()
        .map(|c| runner.run(c))
        .collect();

    let mut set = DrawSet {
        draws: Vec::new(),
        chain_ids: Vec::new(),
        iters: Vec::new(),
        accept_rates: Vec::new(),
        block_accept_rates: Vec::new(),
        seed: config.seed,
    };
    for (c, out) in outputs.into_iter().enumerate() {
        let out = out?;
        set.chain_ids.extend(std::iter::repeat(c).take(out.draws.len()));
        set.iters.extend(out.iters);
        set.draws.extend(out.draws);
        let rates: Vec<f64> = out.block_rates.iter().map(|(_, r)| *r).collect();
        set.accept_rates.push(mean(&rates));
        set.block_accept_rates.push(out.block_rates);
    }
    Ok(set)
}
