//! B-spline bases and finite-difference roughness penalties (P-splines).

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SplineError {
    #[error("basis dimension {k} is too small for degree {degree}: need k >= degree + 1")]
    BasisTooSmall { k: usize, degree: usize },

    #[error("need at least {required} distinct covariate values, found {found}")]
    TooFewDistinct { required: usize, found: usize },

    #[error("covariate values must be finite")]
    NonFinite,

    #[error("penalty order {order} must be smaller than the basis dimension {k}")]
    OrderTooLarge { order: usize, k: usize },

    #[error("coefficient vector has length {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// A clamped B-spline basis over `[lower, upper]` with equally spaced
/// interior knots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothBasis {
    pub k: usize,
    pub degree: usize,
    /// Full knot vector, `degree + 1` repeated boundary knots on each side.
    pub knots: Vec<f64>,
    pub centered: bool,
    /// Column means of the raw basis over the training values.
    pub transform: Vec<f64>,
}

impl SmoothBasis {
    /// Knot vector for `k` basis functions of the given degree on `[lo, hi]`.
    fn clamped_knots(lo: f64, hi: f64, k: usize, degree: usize) -> Vec<f64> {
        let segments = k - degree;
        let mut knots = Vec::with_capacity(k + degree + 1);
        knots.extend(std::iter::repeat(lo).take(degree + 1));
        let width = (hi - lo) / segments as f64;
        knots.extend((1..segments).map(|j| lo + width * j as f64));
        knots.extend(std::iter::repeat(hi).take(degree + 1));
        knots
    }

    pub fn lower(&self) -> f64 {
        self.knots[0]
    }

    pub fn upper(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    pub fn n_interior_knots(&self) -> usize {
        self.k - self.degree - 1
    }

    /// Index `s` of the knot span with `knots[s] <= u < knots[s + 1]`.
    fn span(&self, u: f64) -> usize {
        let p = self.degree;
        if u >= self.upper() {
            return self.k - 1;
        }
        // knots[p..=k] are the distinct breakpoints
        let mut lo = p;
        let mut hi = self.k;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if u < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Evaluates the raw (uncentered) basis at `u` into `out` (length k).
    ///
    /// Values outside the knot range are clamped to the boundary.
    pub fn evaluate_raw_into(&self, u: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.k);
        let u = if u < self.lower() || u > self.upper() {
            warn!(
                "smooth covariate {u} outside [{}, {}], clamped",
                self.lower(),
                self.upper()
            );
            u.clamp(self.lower(), self.upper())
        } else {
            u
        };
        out.iter_mut().for_each(|v| *v = 0.0);
        let p = self.degree;
        let s = self.span(u);
        let t = &self.knots;

        // Triangular Cox-de Boor scheme for the p + 1 nonzero functions.
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = u - t[s + 1 - j];
            right[j] = t[s + j] - u;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        for (j, v) in n.into_iter().enumerate() {
            out[s - p + j] = v;
        }
    }

    pub fn evaluate_raw(&self, u: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        self.evaluate_raw_into(u, &mut out);
        out
    }

    /// Evaluates the basis at `u` with the training centering applied.
    pub fn evaluate(&self, u: f64) -> Vec<f64> {
        let mut out = self.evaluate_raw(u);
        if self.centered {
            for (v, c) in out.iter_mut().zip(&self.transform) {
                *v -= c;
            }
        }
        out
    }

    /// Design block with one row per value of `u`.
    pub fn design(&self, u: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(u.len(), self.k);
        for (i, &ui) in u.iter().enumerate() {
            let row = self.evaluate(ui);
            for (j, v) in row.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// `f(u) = sum_l gamma_l h_l(u)` using the centered basis.
    pub fn smooth_value(&self, u: f64, gamma: &[f64]) -> f64 {
        self.evaluate(u).iter().zip(gamma).map(|(h, g)| h * g).sum()
    }
}

/// Builds a centered B-spline basis over the range of
/// `u` and returns it together with its `n x k` centered design block.
pub fn build_basis(
    u: &[f64],
    k: usize,
    degree: usize,
) -> Result<(SmoothBasis, DMatrix<f64>), SplineError> {
    if k < degree + 1 {
        return Err(SplineError::BasisTooSmall { k, degree });
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(SplineError::NonFinite);
    }
    let mut sorted = u.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted.dedup();
    let n_interior = k - degree - 1;
    let required = n_interior.max(2);
    if sorted.len() < required {
        return Err(SplineError::TooFewDistinct {
            required,
            found: sorted.len(),
        });
    }
    let lo = sorted[0];
    let hi = sorted[sorted.len() - 1];

    let mut basis = SmoothBasis {
        k,
        degree,
        knots: SmoothBasis::clamped_knots(lo, hi, k, degree),
        centered: false,
        transform: vec![0.0; k],
    };
    let raw = basis.design(u);
    let n = u.len() as f64;
    basis.transform = (0..k).map(|j| raw.column(j).sum() / n).collect();
    basis.centered = true;
    let mut centered = raw;
    for j in 0..k {
        let c = basis.transform[j];
        centered.column_mut(j).iter_mut().for_each(|v| *v -= c);
    }
    Ok((basis, centered))
}

/// Smooth term configuration as it appears in model JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothConfig {
    pub var: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_order")]
    pub penalty_order: usize,
}

fn default_k() -> usize {
    10
}
fn default_degree() -> usize {
    3
}
fn default_order() -> usize {
    2
}

impl SmoothConfig {
    pub fn new(var: impl Into<String>) -> Self {
        SmoothConfig {
            var: var.into(),
            k: default_k(),
            degree: default_degree(),
            penalty_order: default_order(),
        }
    }

    /// Term label used for term selection, e.g. `s(u1)`.
    pub fn label(&self) -> String {
        format!("s({})", self.var)
    }
}

/// Roughness penalty `S = D^T D` for a difference operator `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyMatrix {
    pub s: DMatrix<f64>,
    pub order: usize,
}

impl PenaltyMatrix {
    pub fn k(&self) -> usize {
        self.s.nrows()
    }

    pub fn rank(&self) -> usize {
        self.k() - self.order
    }

    /// Orthonormal basis (k x order) of the penalty nullspace: polynomials
    /// in the coefficient index of degree below `order`.
    pub fn null_space(&self) -> DMatrix<f64> {
        let k = self.k();
        if self.order == 0 {
            return DMatrix::zeros(k, 0);
        }
        let mid = (k as f64 - 1.0) / 2.0;
        let vander = DMatrix::from_fn(k, self.order, |i, j| ((i as f64 - mid) / k as f64).powi(j as i32));
        vander.qr().q()
    }
}

/// The `(k - order) x k` finite-difference operator of the given order.
pub fn difference_matrix(k: usize, order: usize) -> Result<DMatrix<f64>, SplineError> {
    if order >= k {
        return Err(SplineError::OrderTooLarge { order, k });
    }
    let mut d = DMatrix::<f64>::identity(k, k);
    for _ in 0..order {
        let rows = d.nrows() - 1;
        d = DMatrix::from_fn(rows, k, |i, j| d[(i + 1, j)] - d[(i, j)]);
    }
    Ok(d)
}

pub fn penalty_matrix(k: usize, order: usize) -> Result<PenaltyMatrix, SplineError> {
    let d = difference_matrix(k, order)?;
    Ok(PenaltyMatrix {
        s: d.transpose() * d,
        order,
    })
}

/// Quadratic roughness `gamma^T S gamma`.
pub fn wiggliness(gamma: &[f64], penalty: &PenaltyMatrix) -> Result<f64, SplineError> {
    if gamma.len() != penalty.k() {
        return Err(SplineError::DimensionMismatch {
            expected: penalty.k(),
            found: gamma.len(),
        });
    }
    let g = DVector::from_column_slice(gamma);
    Ok(g.dot(&(&penalty.s * &g)).max(0.0))
}
