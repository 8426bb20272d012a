//! Model specification, design assembly and per-draw evaluation of the
//! conditional mean and variance.

use crate::error::{Error, Result};
use crate::families::{Dispersion, Family};
use crate::splines::{build_basis, penalty_matrix, PenaltyMatrix, SmoothBasis, SmoothConfig};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::ops::Range;

pub const SCHEMA_VERSION: u32 = 1;

/// Prior on the dispersion parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DispersionPrior {
    /// `log(phi) ~ N(0, scale^2)`.
    LogNormal { scale: f64 },
    /// `phi` is known and held at `value`.
    Fixed { value: f64 },
}

impl Default for DispersionPrior {
    fn default() -> Self {
        DispersionPrior::LogNormal { scale: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// Standard deviation of the iid normal prior on fixed effects, also
    /// used for the unpenalized directions of each smooth.
    pub beta_scale: f64,
    /// Half-normal scale for the random-effect standard deviations.
    pub psi_scale: f64,
    /// Half-normal scale for the smoothing standard deviations.
    pub tau_scale: f64,
    pub dispersion_prior: DispersionPrior,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            beta_scale: 10.0,
            psi_scale: 1.0,
            tau_scale: 1.0,
            dispersion_prior: DispersionPrior::default(),
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.beta_scale) && ok(self.psi_scale) && ok(self.tau_scale)) {
            return Err(Error::InvalidSpec("prior scales must be positive".into()));
        }
        match self.dispersion_prior {
            DispersionPrior::LogNormal { scale } if !ok(scale) => Err(Error::InvalidSpec(
                "dispersion prior scale must be positive".into(),
            )),
            DispersionPrior::Fixed { value } if !ok(value) => Err(Error::InvalidSpec(
                "fixed dispersion must be positive".into(),
            )),
            _ => Ok(()),
        }
    }
}

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_response() -> String {
    "y".to_string()
}

/// Declarative GAMM: intercept, fixed covariates, random intercepts per
/// grouping factor and penalized smooths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub family: Family,
    #[serde(default = "default_response")]
    pub response: String,
    #[serde(default)]
    pub fixed: Vec<String>,
    #[serde(default)]
    pub random: Vec<String>,
    #[serde(default)]
    pub smooth: Vec<SmoothConfig>,
    #[serde(default)]
    pub priors: PriorConfig,
}

impl ModelSpec {
    pub fn new(family: Family) -> Self {
        ModelSpec {
            schema_version: SCHEMA_VERSION,
            family,
            response: default_response(),
            fixed: Vec::new(),
            random: Vec::new(),
            smooth: Vec::new(),
            priors: PriorConfig::default(),
        }
    }

    pub fn with_fixed(mut self, name: &str) -> Self {
        self.fixed.push(name.to_string());
        self
    }

    pub fn with_random(mut self, name: &str) -> Self {
        self.random.push(name.to_string());
        self
    }

    pub fn with_smooth(mut self, smooth: SmoothConfig) -> Self {
        self.smooth.push(smooth);
        self
    }

    pub fn with_priors(mut self, priors: PriorConfig) -> Self {
        self.priors = priors;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidSpec(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        let mut seen = HashSet::new();
        seen.insert("intercept".to_string());
        let labels = self
            .fixed
            .iter()
            .cloned()
            .chain(self.random.iter().cloned())
            .chain(self.smooth.iter().map(|s| s.label()));
        for label in labels {
            if !seen.insert(label.clone()) {
                return Err(Error::InvalidSpec(format!("duplicate term '{label}'")));
            }
        }
        let vars: Vec<&String> = self
            .fixed
            .iter()
            .chain(&self.random)
            .chain(self.smooth.iter().map(|s| &s.var))
            .collect();
        if vars.contains(&&self.response) {
            return Err(Error::InvalidSpec(format!(
                "response '{}' also used as a covariate",
                self.response
            )));
        }
        for s in &self.smooth {
            if s.penalty_order >= s.k {
                return Err(Error::InvalidSpec(format!(
                    "smooth {}: penalty_order must be below k",
                    s.label()
                )));
            }
        }
        self.priors.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// One grouping factor: 1-based level codes per row and the level labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupFactor {
    pub codes: Vec<usize>,
    pub levels: Vec<String>,
}

impl GroupFactor {
    /// Codes levels in sorted order (numerically when every label is an
    /// integer).
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        let mut levels: Vec<String> = labels.iter().map(|s| s.as_ref().to_string()).collect();
        levels.sort();
        levels.dedup();
        if levels.iter().all(|l| l.parse::<i64>().is_ok()) {
            levels.sort_by_key(|l| l.parse::<i64>().unwrap());
        }
        let codes = labels
            .iter()
            .map(|l| levels.iter().position(|x| x == l.as_ref()).unwrap() + 1)
            .collect();
        GroupFactor { codes, levels }
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub y: Vec<f64>,
    /// n x m1
    pub fixed: DMatrix<f64>,
    pub groups: Vec<GroupFactor>,
    /// n x m3
    pub smooth_inputs: DMatrix<f64>,
}

impl Dataset {
    pub fn new(
        y: Vec<f64>,
        fixed: DMatrix<f64>,
        groups: Vec<GroupFactor>,
        smooth_inputs: DMatrix<f64>,
    ) -> Result<Self> {
        let n = y.len();
        if fixed.nrows() != n && fixed.ncols() > 0 {
            return Err(Error::Dimension(format!(
                "fixed covariates have {} rows, response has {n}",
                fixed.nrows()
            )));
        }
        if smooth_inputs.nrows() != n && smooth_inputs.ncols() > 0 {
            return Err(Error::Dimension(format!(
                "smooth inputs have {} rows, response has {n}",
                smooth_inputs.nrows()
            )));
        }
        for (j, g) in groups.iter().enumerate() {
            if g.codes.len() != n {
                return Err(Error::Dimension(format!(
                    "grouping factor {j} has {} rows, response has {n}",
                    g.codes.len()
                )));
            }
            if g.codes.iter().any(|&c| c == 0 || c > g.n_levels()) {
                return Err(Error::InvalidData(format!(
                    "grouping factor {j} has codes outside 1..={}",
                    g.n_levels()
                )));
            }
        }
        let fixed = if fixed.ncols() == 0 { DMatrix::zeros(n, 0) } else { fixed };
        let smooth_inputs = if smooth_inputs.ncols() == 0 {
            DMatrix::zeros(n, 0)
        } else {
            smooth_inputs
        };
        if fixed.iter().chain(smooth_inputs.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("covariates must be finite".into()));
        }
        Ok(Dataset {
            y,
            fixed,
            groups,
            smooth_inputs,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Returns a copy with rows reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(order.len(), m.ncols(), |i, j| m[(order[i], j)]);
        Dataset {
            y: order.iter().map(|&i| self.y[i]).collect(),
            fixed: pick(&self.fixed),
            groups: self
                .groups
                .iter()
                .map(|g| GroupFactor {
                    codes: order.iter().map(|&i| g.codes[i]).collect(),
                    levels: g.levels.clone(),
                })
                .collect(),
            smooth_inputs: pick(&self.smooth_inputs),
        }
    }
}

/// Position of each coefficient block inside the stacked vector
/// `[beta, b, gamma]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub n_fixed: usize,
    pub factor_levels: Vec<usize>,
    pub smooth_k: Vec<usize>,
}

impl Layout {
    pub fn n_beta(&self) -> usize {
        self.n_fixed + 1
    }

    pub fn n_b(&self) -> usize {
        self.factor_levels.iter().sum()
    }

    pub fn n_gamma(&self) -> usize {
        self.smooth_k.iter().sum()
    }

    pub fn n_coef(&self) -> usize {
        self.n_beta() + self.n_b() + self.n_gamma()
    }

    pub fn beta_range(&self) -> Range<usize> {
        0..self.n_beta()
    }

    /// Range of factor `j` inside the `b` vector.
    pub fn b_range(&self, j: usize) -> Range<usize> {
        let start: usize = self.factor_levels[..j].iter().sum();
        start..start + self.factor_levels[j]
    }

    /// Range of smooth `j` inside the `gamma` vector.
    pub fn gamma_range(&self, j: usize) -> Range<usize> {
        let start: usize = self.smooth_k[..j].iter().sum();
        start..start + self.smooth_k[j]
    }

    /// Columns of the full design occupied by `term`.
    pub fn columns(&self, term: Term) -> Range<usize> {
        let shift = |r: Range<usize>, by: usize| r.start + by..r.end + by;
        match term {
            Term::Intercept => 0..1,
            Term::Fixed(j) => j + 1..j + 2,
            Term::Random(j) => shift(self.b_range(j), self.n_beta()),
            Term::Smooth(j) => shift(self.gamma_range(j), self.n_beta() + self.n_b()),
        }
    }
}

/// One joint posterior draw.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDraw {
    /// `beta_0` (intercept) followed by one coefficient per fixed covariate.
    pub beta: Vec<f64>,
    /// Random intercepts stacked by factor, then level.
    pub b: Vec<f64>,
    /// Smooth coefficients stacked by term.
    pub gamma: Vec<f64>,
    pub phi: Option<Dispersion>,
    /// Random-effect standard deviation per factor.
    pub psi: Vec<f64>,
    /// Smoothing standard deviation per smooth.
    pub tau: Vec<f64>,
}

impl ParamDraw {
    /// All coefficients zero, all scales one.
    pub fn zeros(layout: &Layout, family: Family) -> Self {
        ParamDraw {
            beta: vec![0.0; layout.n_beta()],
            b: vec![0.0; layout.n_b()],
            gamma: vec![0.0; layout.n_gamma()],
            phi: family.has_dispersion().then(|| Dispersion::new(1.0).unwrap()),
            psi: vec![1.0; layout.factor_levels.len()],
            tau: vec![1.0; layout.smooth_k.len()],
        }
    }

    pub fn coefficients(&self) -> Vec<f64> {
        let mut c = Vec::with_capacity(self.beta.len() + self.b.len() + self.gamma.len());
        c.extend_from_slice(&self.beta);
        c.extend_from_slice(&self.b);
        c.extend_from_slice(&self.gamma);
        c
    }
}

/// Model term, indexed within its kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Term {
    Intercept,
    Fixed(usize),
    Random(usize),
    Smooth(usize),
}

/// A specification bound to data, with the design matrix assembled once.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    data: Dataset,
    layout: Layout,
    design: DMatrix<f64>,
    bases: Vec<SmoothBasis>,
    penalties: Vec<PenaltyMatrix>,
}

impl Model {
    pub fn new(spec: ModelSpec, data: Dataset) -> Result<Self> {
        spec.validate()?;
        let n = data.n();
        if data.fixed.ncols() != spec.fixed.len() {
            return Err(Error::Dimension(format!(
                "spec has {} fixed covariates, data has {}",
                spec.fixed.len(),
                data.fixed.ncols()
            )));
        }
        if data.groups.len() != spec.random.len() {
            return Err(Error::Dimension(format!(
                "spec has {} grouping factors, data has {}",
                spec.random.len(),
                data.groups.len()
            )));
        }
        if data.smooth_inputs.ncols() != spec.smooth.len() {
            return Err(Error::Dimension(format!(
                "spec has {} smooths, data has {}",
                spec.smooth.len(),
                data.smooth_inputs.ncols()
            )));
        }
        if let Some((i, y)) = data
            .y
            .iter()
            .enumerate()
            .find(|(_, &y)| !spec.family.in_support(y))
        {
            return Err(Error::InvalidData(format!(
                "response {y} at row {} is outside the {} support",
                i + 1,
                spec.family
            )));
        }

        let layout = Layout {
            n_fixed: spec.fixed.len(),
            factor_levels: data.groups.iter().map(GroupFactor::n_levels).collect(),
            smooth_k: spec.smooth.iter().map(|s| s.k).collect(),
        };
        let mut bases = Vec::with_capacity(spec.smooth.len());
        let mut penalties = Vec::with_capacity(spec.smooth.len());
        let mut blocks = Vec::with_capacity(spec.smooth.len());
        for (j, cfg) in spec.smooth.iter().enumerate() {
            let u: Vec<f64> = data.smooth_inputs.column(j).iter().copied().collect();
            let (basis, block) = build_basis(&u, cfg.k, cfg.degree)?;
            bases.push(basis);
            blocks.push(block);
            penalties.push(penalty_matrix(cfg.k, cfg.penalty_order)?);
        }

        let mut design = DMatrix::zeros(n, layout.n_coef());
        design.column_mut(0).fill(1.0);
        for j in 0..layout.n_fixed {
            design.set_column(j + 1, &data.fixed.column(j));
        }
        for (j, g) in data.groups.iter().enumerate() {
            let cols = layout.columns(Term::Random(j));
            for (i, &code) in g.codes.iter().enumerate() {
                design[(i, cols.start + code - 1)] = 1.0;
            }
        }
        for (j, block) in blocks.iter().enumerate() {
            let cols = layout.columns(Term::Smooth(j));
            design.columns_mut(cols.start, cols.len()).copy_from(block);
        }

        Ok(Model {
            spec,
            data,
            layout,
            design,
            bases,
            penalties,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn family(&self) -> Family {
        self.spec.family
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Full n x p design, columns ordered as `[beta, b, gamma]`.
    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn bases(&self) -> &[SmoothBasis] {
        &self.bases
    }

    pub fn penalties(&self) -> &[PenaltyMatrix] {
        &self.penalties
    }

    pub fn terms(&self) -> Vec<Term> {
        let mut t = vec![Term::Intercept];
        t.extend((0..self.spec.fixed.len()).map(Term::Fixed));
        t.extend((0..self.spec.random.len()).map(Term::Random));
        t.extend((0..self.spec.smooth.len()).map(Term::Smooth));
        t
    }

    pub fn term_label(&self, term: Term) -> String {
        match term {
            Term::Intercept => "intercept".to_string(),
            Term::Fixed(j) => self.spec.fixed[j].clone(),
            Term::Random(j) => self.spec.random[j].clone(),
            Term::Smooth(j) => self.spec.smooth[j].label(),
        }
    }

    /// Resolves a term label; smooths may be named `s(u)` or by their
    /// variable when that is unambiguous.
    pub fn find_term(&self, label: &str) -> Result<Term> {
        let label = label.trim();
        if let Some(t) = self.terms().into_iter().find(|&t| self.term_label(t) == label) {
            return Ok(t);
        }
        let by_var: Vec<usize> = (0..self.spec.smooth.len())
            .filter(|&j| self.spec.smooth[j].var == label)
            .collect();
        match by_var.as_slice() {
            [j] => Ok(Term::Smooth(*j)),
            _ => Err(Error::UnknownTerm(label.to_string())),
        }
    }

    /// Checks the draw's dimensions and scale parameters against the model.
    pub fn check_draw(&self, draw: &ParamDraw) -> Result<()> {
        self.check_dims(draw)?;
        if draw.psi.iter().chain(&draw.tau).any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidData("scale parameters must be positive".into()));
        }
        Ok(())
    }

    /// Checks only the draw's dimensions and dispersion presence.
    pub fn check_dims(&self, draw: &ParamDraw) -> Result<()> {
        let l = &self.layout;
        let checks = [
            ("beta", draw.beta.len(), l.n_beta()),
            ("b", draw.b.len(), l.n_b()),
            ("gamma", draw.gamma.len(), l.n_gamma()),
            ("psi", draw.psi.len(), l.factor_levels.len()),
            ("tau", draw.tau.len(), l.smooth_k.len()),
        ];
        for (name, found, expected) in checks {
            if found != expected {
                return Err(Error::Dimension(format!(
                    "{name} has length {found}, expected {expected}"
                )));
            }
        }
        if draw.phi.is_some() != self.family().has_dispersion() {
            return Err(Error::Dimension(format!(
                "dispersion presence does not match the {} family",
                self.family()
            )));
        }
        Ok(())
    }

    /// Linear predictor for row `i`, assembled term by term from the raw
    /// covariates.
    pub fn linear_predictor(&self, draw: &ParamDraw, i: usize) -> Result<f64> {
        self.check_draw(draw)?;
        if i >= self.n() {
            return Err(Error::Dimension(format!("row {i} out of range 0..{}", self.n())));
        }
        let mut eta = draw.beta[0];
        for j in 0..self.layout.n_fixed {
            eta += draw.beta[j + 1] * self.data.fixed[(i, j)];
        }
        for (j, g) in self.data.groups.iter().enumerate() {
            eta += draw.b[self.layout.b_range(j).start + g.codes[i] - 1];
        }
        for (j, basis) in self.bases.iter().enumerate() {
            let gamma = &draw.gamma[self.layout.gamma_range(j)];
            eta += basis.smooth_value(self.data.smooth_inputs[(i, j)], gamma);
        }
        Ok(eta)
    }

    pub fn conditional_mean(&self, draw: &ParamDraw, i: usize) -> Result<f64> {
        Ok(self.family().inverse_link(self.linear_predictor(draw, i)?)?)
    }

    pub fn conditional_variance(&self, draw: &ParamDraw, i: usize) -> Result<f64> {
        let mu = self.conditional_mean(draw, i)?;
        Ok(self.family().variance(mu, draw.phi)?)
    }

    /// All linear predictors via the cached design.
    pub fn eta(&self, draw: &ParamDraw) -> Result<Vec<f64>> {
        self.check_draw(draw)?;
        Ok(self.eta_from_coefficients(&draw.coefficients()))
    }

    pub(crate) fn eta_from_coefficients(&self, coef: &[f64]) -> Vec<f64> {
        let c = DVector::from_column_slice(coef);
        (&self.design * c).as_slice().to_vec()
    }

    /// Linear predictors using only the design columns flagged in `keep`.
    pub fn eta_restricted(&self, draw: &ParamDraw, keep: &[bool]) -> Result<Vec<f64>> {
        self.check_draw(draw)?;
        if keep.len() != self.layout.n_coef() {
            return Err(Error::Dimension("column mask length".into()));
        }
        let coef: Vec<f64> = draw
            .coefficients()
            .into_iter()
            .zip(keep)
            .map(|(c, &k)| if k { c } else { 0.0 })
            .collect();
        Ok(self.eta_from_coefficients(&coef))
    }

    pub fn means(&self, draw: &ParamDraw) -> Result<Vec<f64>> {
        let fam = self.family();
        self.eta(draw)?
            .into_iter()
            .map(|e| fam.inverse_link(e).map_err(Error::from))
            .collect()
    }

    pub fn variances(&self, draw: &ParamDraw, means: &[f64]) -> Result<Vec<f64>> {
        let fam = self.family();
        means
            .iter()
            .map(|&m| fam.variance(m, draw.phi).map_err(Error::from))
            .collect()
    }

    /// Value of smooth `j` at `u` under the draw's coefficients.
    pub fn smooth_at(&self, draw: &ParamDraw, j: usize, u: f64) -> f64 {
        self.bases[j].smooth_value(u, &draw.gamma[self.layout.gamma_range(j)])
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_model(family: Family) -> Model {
        let n = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<String> = (0..n).map(|i| ["a", "b", "c"][i % 3].to_string()).collect();
        let y = match family {
            Family::Bernoulli => (0..n).map(|i| (i % 2) as f64).collect(),
            Family::Beta => (0..n).map(|i| 0.1 + 0.8 * (i as f64) / n as f64).collect(),
            _ => (0..n).map(|i| 1.0 + i as f64).collect(),
        };
        let data = Dataset::new(
            y,
            DMatrix::from_column_slice(n, 1, &x),
            vec![GroupFactor::from_labels(&labels)],
            DMatrix::from_column_slice(n, 1, &u),
        )
        .unwrap();
        let mut cfg = SmoothConfig::new("u");
        cfg.k = 6;
        let spec = ModelSpec::new(family)
            .with_fixed("x")
            .with_random("g")
            .with_smooth(cfg);
        Model::new(spec, data).unwrap()
    }

    fn random_draw(model: &Model, rng: &mut ChaCha8Rng) -> ParamDraw {
        let mut d = ParamDraw::zeros(model.layout(), model.family());
        for v in d.beta.iter_mut().chain(d.b.iter_mut()).chain(d.gamma.iter_mut()) {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        d
    }

    #[test]
    fn zero_and_intercept_only_predictors() {
        let model = toy_model(Family::Gaussian);
        let mut d = ParamDraw::zeros(model.layout(), Family::Gaussian);
        assert_eq!(model.linear_predictor(&d, 4).unwrap(), 0.0);
        d.beta[0] = 3.0;
        for i in 0..model.n() {
            assert_eq!(model.linear_predictor(&d, i).unwrap(), 3.0);
        }
    }

    #[test]
    fn conditional_mean_examples() {
        let model = toy_model(Family::NegativeBinomial);
        let d = ParamDraw::zeros(model.layout(), model.family());
        assert_eq!(model.conditional_mean(&d, 0).unwrap(), 1.0);

        let model = toy_model(Family::Bernoulli);
        let mut d = ParamDraw::zeros(model.layout(), model.family());
        d.beta[0] = 3f64.ln();
        assert!((model.conditional_mean(&d, 2).unwrap() - 0.75).abs() < 1e-15);

        let model = toy_model(Family::Gaussian);
        let mut d = ParamDraw::zeros(model.layout(), model.family());
        d.beta[0] = -1.7;
        d.phi = Some(Dispersion::new(2.0).unwrap());
        assert_eq!(model.conditional_mean(&d, 2).unwrap(), -1.7);
        assert_eq!(model.conditional_variance(&d, 2).unwrap(), 0.5);
    }

    #[test]
    fn conditional_variance_examples() {
        let model = toy_model(Family::Poisson);
        let mut d = ParamDraw::zeros(model.layout(), model.family());
        d.beta[0] = 4f64.ln();
        assert!((model.conditional_variance(&d, 0).unwrap() - 4.0).abs() < 1e-12);

        let model = toy_model(Family::NegativeBinomial);
        let mut d = ParamDraw::zeros(model.layout(), model.family());
        d.beta[0] = 6f64.ln();
        d.phi = Some(Dispersion::new(2.0).unwrap());
        assert!((model.conditional_variance(&d, 0).unwrap() - 24.0).abs() < 1e-12);
    }

    #[test]
    fn design_dot_matches_rowwise_assembly() {
        let model = toy_model(Family::Gaussian);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let d = random_draw(&model, &mut rng);
            let eta = model.eta(&d).unwrap();
            for (i, e) in eta.iter().enumerate() {
                let direct = model.linear_predictor(&d, i).unwrap();
                assert!((e - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn group_indicator_has_single_unit_entry() {
        let model = toy_model(Family::Gaussian);
        let cols = model.layout().columns(Term::Random(0));
        for i in 0..model.n() {
            let row: Vec<f64> = cols.clone().map(|c| model.design()[(i, c)]).collect();
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), row.len() - 1);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let model = toy_model(Family::Gaussian);
        let mut d = ParamDraw::zeros(model.layout(), model.family());
        d.beta.push(1.0);
        assert!(matches!(model.linear_predictor(&d, 0), Err(Error::Dimension(_))));
        let mut d = ParamDraw::zeros(model.layout(), model.family());
        d.phi = None;
        assert!(model.eta(&d).is_err());
    }

    #[test]
    fn gamma_link_image_errors_propagate() {
        let model = toy_model(Family::Gamma);
        let mut d = ParamDraw::zeros(model.layout(), model.family());
        d.beta[0] = -1.0;
        assert!(matches!(model.conditional_mean(&d, 0), Err(Error::Family(_))));
    }

    #[test]
    fn terms_resolve_by_label() {
        let model = toy_model(Family::Gaussian);
        assert_eq!(model.find_term("intercept").unwrap(), Term::Intercept);
        assert_eq!(model.find_term("x").unwrap(), Term::Fixed(0));
        assert_eq!(model.find_term("g").unwrap(), Term::Random(0));
        assert_eq!(model.find_term("s(u)").unwrap(), Term::Smooth(0));
        assert_eq!(model.find_term("u").unwrap(), Term::Smooth(0));
        assert!(model.find_term("nope").is_err());
    }

    #[test]
    fn spec_validation() {
        let spec = ModelSpec::new(Family::Poisson).with_fixed("x").with_fixed("x");
        assert!(spec.validate().is_err());
        let spec = ModelSpec::new(Family::Poisson).with_fixed("y");
        assert!(spec.validate().is_err());
        let json = r#"{"schema_version":1,"family":"neg_binomial","fixed":["x1"],"random":["z1"],
            "smooth":[{"var":"u1","k":10,"degree":3,"penalty_order":2}],"priors":{"beta_scale":5}}"#;
        let spec = ModelSpec::from_json(json).unwrap();
        assert_eq!(spec.family, Family::NegativeBinomial);
        assert_eq!(spec.priors.beta_scale, 5.0);
        assert_eq!(spec.priors.psi_scale, 1.0);
        assert!(ModelSpec::from_json(r#"{"schema_version":2,"family":"poisson"}"#).is_err());
    }

    #[test]
    fn group_labels_code_numerically() {
        let g = GroupFactor::from_labels(&["10", "2", "2", "1"]);
        assert_eq!(g.levels, vec!["1", "2", "10"]);
        assert_eq!(g.codes, vec![3, 2, 2, 1]);
    }
}
