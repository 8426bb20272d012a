//! Partial R-squared for a reduced model that drops whole terms.
//!
//! The reduced mean `mu0` is evaluated from the full model's draw with the
//! excluded terms' coefficients set to zero; nothing is refitted. With
//! `d_i = mu_i - mu0_i`,
//!
//! ```text
//! ESS~1 = sum_i (d_i - mean(d))^2,   RSS~0 = RSS~ + ESS~1
//! partial R2 = ESS~1 / (RSS~ + ESS~1),   marginal ratio = ESS~1 / TSS~
//! ```

use crate::error::{Error, Result};
use crate::model::{Model, ParamDraw, Term};
use crate::rsq::{centered_ss, rss_from_variances, summarize, RsqSummary};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Split of the model's terms into a kept (reduced) set and its complement.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialSpec {
    kept: Vec<Term>,
    excluded: Vec<Term>,
    mask: Vec<bool>,
}

impl PartialSpec {
    /// Reduced model made of `kept` plus the intercept.
    pub fn from_kept(model: &Model, kept: &[Term]) -> Self {
        let all = model.terms();
        let kept: Vec<Term> = all
            .iter()
            .copied()
            .filter(|t| *t == Term::Intercept || kept.contains(t))
            .collect();
        let excluded: Vec<Term> = all.into_iter().filter(|t| !kept.contains(t)).collect();
        let layout = model.layout();
        let mut mask = vec![false; layout.n_coef()];
        for &t in &kept {
            for c in layout.columns(t) {
                mask[c] = true;
            }
        }
        PartialSpec {
            kept,
            excluded,
            mask,
        }
    }

    /// Keeps the named terms (and the intercept), excludes the rest.
    pub fn keep<S: AsRef<str>>(model: &Model, labels: &[S]) -> Result<Self> {
        let terms = labels
            .iter()
            .map(|l| model.find_term(l.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_kept(model, &terms))
    }

    /// Excludes the named terms, keeps the rest.
    pub fn exclude<S: AsRef<str>>(model: &Model, labels: &[S]) -> Result<Self> {
        let dropped = labels
            .iter()
            .map(|l| model.find_term(l.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        if dropped.contains(&Term::Intercept) {
            return Err(Error::InvalidSpec("the intercept cannot be excluded".into()));
        }
        let kept: Vec<Term> = model
            .terms()
            .into_iter()
            .filter(|t| !dropped.contains(t))
            .collect();
        Ok(Self::from_kept(model, &kept))
    }

    pub fn kept(&self) -> &[Term] {
        &self.kept
    }

    pub fn excluded(&self) -> &[Term] {
        &self.excluded
    }

    /// Per-coefficient flag, true for columns of kept terms.
    pub fn column_mask(&self) -> &[bool] {
        &self.mask
    }

    fn check(&self, model: &Model) -> Result<()> {
        if self.mask.len() != model.layout().n_coef() {
            return Err(Error::Dimension(
                "partial specification built for a different model".into(),
            ));
        }
        Ok(())
    }
}

/// Reduced-model means for every row.
pub fn reduced_means(model: &Model, partial: &PartialSpec, draw: &ParamDraw) -> Result<Vec<f64>> {
    partial.check(model)?;
    let fam = model.family();
    model
        .eta_restricted(draw, partial.column_mask())?
        .into_iter()
        .map(|e| fam.inverse_link(e).map_err(Error::from))
        .collect()
}

/// Reduced-model mean for row `i`.
pub fn reduced_mean(model: &Model, partial: &PartialSpec, draw: &ParamDraw, i: usize) -> Result<f64> {
    if i >= model.n() {
        return Err(Error::Dimension(format!("row {i} out of range 0..{}", model.n())));
    }
    Ok(reduced_means(model, partial, draw)?[i])
}

/// Per-draw quantities of the partial decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartialDecomp {
    pub ess1: f64,
    pub ess: f64,
    pub rss: f64,
    pub rss0: f64,
    pub tss: f64,
}

impl PartialDecomp {
    /// `ESS~1 / (RSS~ + ESS~1)`, `None` when both are zero.
    pub fn partial_r2(&self) -> Option<f64> {
        (self.rss0 > 0.0).then(|| self.ess1 / self.rss0)
    }

    /// `ESS~1 / TSS~`, `None` when `TSS~ = 0`.
    pub fn marginal_ratio(&self) -> Option<f64> {
        (self.tss > 0.0).then(|| (self.ess1 / self.tss).min(1.0))
    }
}

fn require_rows(model: &Model) -> Result<()> {
    if model.n() < 2 {
        Err(Error::TooFewRows(model.n()))
    } else {
        Ok(())
    }
}

pub fn partial_decompose(
    model: &Model,
    partial: &PartialSpec,
    draw: &ParamDraw,
) -> Result<PartialDecomp> {
    require_rows(model)?;
    let mu = model.means(draw)?;
    let mu0 = reduced_means(model, partial, draw)?;
    let d: Vec<f64> = mu.iter().zip(&mu0).map(|(a, b)| a - b).collect();
    let ess1 = centered_ss(&d);
    let ess = centered_ss(&mu);
    let rss = rss_from_variances(&model.variances(draw, &mu)?);
    Ok(PartialDecomp {
        ess1,
        ess,
        rss,
        rss0: rss + ess1,
        tss: ess + rss,
    })
}

/// Centered sum of squares of the full-minus-reduced mean differences.
pub fn ess1(model: &Model, partial: &PartialSpec, draw: &ParamDraw) -> Result<f64> {
    Ok(partial_decompose(model, partial, draw)?.ess1)
}

/// Expected residual sum of squares of the reduced model, `RSS~ + ESS~1`.
pub fn rss0(model: &Model, partial: &PartialSpec, draw: &ParamDraw) -> Result<f64> {
    Ok(partial_decompose(model, partial, draw)?.rss0)
}

pub fn partial_decompose_all(
    model: &Model,
    partial: &PartialSpec,
    draws: &[ParamDraw],
) -> Result<Vec<PartialDecomp>> {
    if draws.is_empty() {
        return Err(Error::InvalidData("no posterior draws".into()));
    }
    draws
        .par_iter()
        .map(|d| partial_decompose(model, partial, d))
        .collect()
}

/// Posterior distribution of the partial R-squared.
pub fn partial_r2(model: &Model, partial: &PartialSpec, draws: &[ParamDraw]) -> Result<RsqSummary> {
    let parts = partial_decompose_all(model, partial, draws)?;
    summarize(parts.iter().map(PartialDecomp::partial_r2))
}

/// Posterior distribution of the share of `TSS~` explained by the excluded
/// terms.
pub fn marginal_ratio(
    model: &Model,
    partial: &PartialSpec,
    draws: &[ParamDraw],
) -> Result<RsqSummary> {
    let parts = partial_decompose_all(model, partial, draws)?;
    summarize(parts.iter().map(PartialDecomp::marginal_ratio))
}
