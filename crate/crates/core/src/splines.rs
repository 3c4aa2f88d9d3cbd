//! Equally spaced B-spline bases.
//!
//! Knots are placed uniformly over a margin-expanded domain and continued
//! with the same spacing on both sides, so every basis function has the
//! same shape. Outside the expanded domain each function is continued
//! linearly from its boundary value and slope; such evaluations are
//! flagged as out of domain but remain well defined, which keeps gradients
//! available for any warped time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SmallMatrix;

/// Largest supported polynomial degree.
pub const MAX_DEGREE: usize = 10;
const MAX_ORDER: usize = MAX_DEGREE + 1;

/// Relative tolerance used when validating deserialized knot spacing.
const SPACING_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBasis", into = "RawBasis")]
pub struct BSplineBasis {
    degree: usize,
    n_seg: usize,
    domain_lo: f64,
    domain_hi: f64,
    spacing: f64,
    knots: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawBasis {
    degree: usize,
    knots: Vec<f64>,
}

impl TryFrom<RawBasis> for BSplineBasis {
    type Error = Error;

    fn try_from(raw: RawBasis) -> Result<Self> {
        BSplineBasis::from_knots(raw.degree, raw.knots)
    }
}

impl From<BSplineBasis> for RawBasis {
    fn from(b: BSplineBasis) -> Self {
        RawBasis { degree: b.degree, knots: b.knots }
    }
}

/// Basis functions that can be nonzero at one evaluation point:
/// indices `first..first + len`.
#[derive(Debug, Clone, Copy)]
pub struct LocalBasis {
    pub first: usize,
    pub len: usize,
    pub values: [f64; MAX_ORDER],
    pub derivs: [f64; MAX_ORDER],
    pub out_of_domain: bool,
}

impl LocalBasis {
    pub fn values(&self) -> &[f64] {
        &self.values[..self.len]
    }

    pub fn derivs(&self) -> &[f64] {
        &self.derivs[..self.len]
    }

    /// Σ_k B_k(t)·coef_k.
    pub fn dot(&self, coef: &[f64]) -> f64 {
        self.values().iter().zip(&coef[self.first..]).map(|(b, a)| b * a).sum()
    }

    /// Σ_k B'_k(t)·coef_k.
    pub fn dot_deriv(&self, coef: &[f64]) -> f64 {
        self.derivs().iter().zip(&coef[self.first..]).map(|(b, a)| b * a).sum()
    }
}

/// Builds `n_seg + degree` uniform B-splines over
/// `[lo − margin·(hi−lo), hi + margin·(hi−lo)]`.
pub fn make_basis(
    domain_lo: f64,
    domain_hi: f64,
    n_seg: usize,
    degree: usize,
    margin: f64,
) -> Result<BSplineBasis> {
    if !(domain_lo.is_finite() && domain_hi.is_finite()) || domain_hi <= domain_lo {
        return Err(Error::InvalidDomain { lo: domain_lo, hi: domain_hi });
    }
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(Error::InvalidCounts(format!("margin must be >= 0, got {margin}")));
    }
    if n_seg == 0 {
        return Err(Error::InvalidCounts("n_seg must be >= 1".into()));
    }
    if degree > MAX_DEGREE {
        return Err(Error::InvalidCounts(format!("degree {degree} exceeds {MAX_DEGREE}")));
    }
    let width = domain_hi - domain_lo;
    let lo = domain_lo - margin * width;
    let hi = domain_hi + margin * width;
    let spacing = (hi - lo) / n_seg as f64;
    let knots = (0..=n_seg + 2 * degree)
        .map(|i| {
            let offset = i as isize - degree as isize;
            if offset == 0 {
                lo
            } else if offset == n_seg as isize {
                hi
            } else {
                lo + offset as f64 * spacing
            }
        })
        .collect();
    Ok(BSplineBasis { degree, n_seg, domain_lo: lo, domain_hi: hi, spacing, knots })
}

impl BSplineBasis {
    /// Rebuilds a basis from a stored knot vector. The knots must be equally
    /// spaced; the evaluation domain is `[knots[degree], knots[len−1−degree]]`.
    pub fn from_knots(degree: usize, knots: Vec<f64>) -> Result<Self> {
        if degree > MAX_DEGREE {
            return Err(Error::InvalidCounts(format!("degree {degree} exceeds {MAX_DEGREE}")));
        }
        if knots.len() < 2 * degree + 2 {
            return Err(Error::InvalidCounts(format!(
                "degree {degree} needs at least {} knots, got {}",
                2 * degree + 2,
                knots.len()
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidCounts("knots must be finite and strictly increasing".into()));
        }
        let n_seg = knots.len() - 1 - 2 * degree;
        let lo = knots[degree];
        let hi = knots[degree + n_seg];
        let spacing = (hi - lo) / n_seg as f64;
        if knots.windows(2).any(|w| ((w[1] - w[0]) - spacing).abs() > SPACING_TOL * spacing.max(1.0)) {
            return Err(Error::InvalidCounts("knots must be equally spaced".into()));
        }
        Ok(Self { degree, n_seg, domain_lo: lo, domain_hi: hi, spacing, knots })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_seg(&self) -> usize {
        self.n_seg
    }

    /// Number of basis functions, `n_seg + degree`.
    pub fn size(&self) -> usize {
        self.n_seg + self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Expanded evaluation domain.
    pub fn domain(&self) -> (f64, f64) {
        (self.domain_lo, self.domain_hi)
    }

    pub fn is_out_of_domain(&self, t: f64) -> bool {
        t < self.domain_lo || t > self.domain_hi
    }

    /// Index i of the knot interval [knots[i], knots[i+1]) holding t,
    /// restricted to the domain intervals.
    fn span(&self, t: f64) -> usize {
        let first = self.degree;
        let last = self.degree + self.n_seg - 1;
        let guess = ((t - self.domain_lo) / self.spacing).floor();
        let mut i = if guess <= 0.0 { first } else { (first + guess as usize).min(last) };
        // Correct for round-off in the division.
        while i > first && t < self.knots[i] {
            i -= 1;
        }
        while i < last && t >= self.knots[i + 1] {
            i += 1;
        }
        i
    }

    /// Cox–de Boor triangle: values of the `degree + 1` functions
    /// `span−degree..=span` at t, for any degree ≤ self.degree.
    fn cox_de_boor(&self, span: usize, t: f64, degree: usize, out: &mut [f64; MAX_ORDER]) {
        let mut left = [0.0; MAX_ORDER];
        let mut right = [0.0; MAX_ORDER];
        out[0] = 1.0;
        for j in 1..=degree {
            left[j] = t - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = out[r] / (right[r + 1] + left[j - r]);
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
    }

    /// Values and t-derivatives at a point inside the expanded domain.
    fn local_inside(&self, t: f64) -> LocalBasis {
        let q = self.degree;
        let span = self.span(t);
        let mut values = [0.0; MAX_ORDER];
        let mut derivs = [0.0; MAX_ORDER];
        self.cox_de_boor(span, t, q, &mut values);
        if q > 0 {
            let mut lower = [0.0; MAX_ORDER];
            self.cox_de_boor(span, t, q - 1, &mut lower);
            // B'_{k,q} = q/(t_{k+q}−t_k)·B_{k,q−1} − q/(t_{k+q+1}−t_{k+1})·B_{k+1,q−1}
            // with lower[r] = B_{span−q+1+r, q−1}.
            let qf = q as f64;
            for (r, d) in derivs.iter_mut().enumerate().take(q + 1) {
                let k = span - q + r;
                let mut acc = 0.0;
                if r >= 1 {
                    acc += qf / (self.knots[k + q] - self.knots[k]) * lower[r - 1];
                }
                if r < q {
                    acc -= qf / (self.knots[k + q + 1] - self.knots[k + 1]) * lower[r];
                }
                *d = acc;
            }
        }
        LocalBasis { first: span - q, len: q + 1, values, derivs, out_of_domain: false }
    }

    /// Nonzero basis values and derivatives at t, with linear continuation
    /// outside the expanded domain.
    pub fn local(&self, t: f64) -> LocalBasis {
        let edge = if t < self.domain_lo {
            self.domain_lo
        } else if t > self.domain_hi {
            self.domain_hi
        } else {
            return self.local_inside(t);
        };
        let mut local = self.local_inside(edge);
        let dt = t - edge;
        for r in 0..local.len {
            local.values[r] += local.derivs[r] * dt;
        }
        local.out_of_domain = true;
        local
    }

    /// All m basis values at t.
    pub fn eval_basis(&self, t: f64) -> Vec<f64> {
        let local = self.local(t);
        let mut out = vec![0.0; self.size()];
        out[local.first..local.first + local.len].copy_from_slice(local.values());
        out
    }

    /// All m basis derivatives d B_k / dt at t.
    pub fn eval_basis_derivative(&self, t: f64) -> Vec<f64> {
        let local = self.local(t);
        let mut out = vec![0.0; self.size()];
        out[local.first..local.first + local.len].copy_from_slice(local.derivs());
        out
    }

    /// |times| × m matrix whose rows are `eval_basis` at each time.
    pub fn design_matrix(&self, times: &[f64]) -> SmallMatrix {
        let m = self.size();
        let mut out = SmallMatrix::zeros(times.len(), m);
        for (j, &t) in times.iter().enumerate() {
            let local = self.local(t);
            for (r, v) in local.values().iter().enumerate() {
                out[(j, local.first + r)] = *v;
            }
        }
        out
    }
}
