//! Shape-invariant decoder: one population spline, shifted and scaled per
//! individual.
//!
//! ŷ(t) = a0 + a1 + Σ_k B_k(w)·α_k,  w = (t − (b0 + b1))·exp(c0 + c1)

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cholesky_solve, cholesky_spd, SmallMatrix};
use crate::splines::BSplineBasis;

/// Individual deviations: size (a1), tempo (b1) and log-velocity (c1).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RandomEffects {
    pub a1: f64,
    pub b1: f64,
    pub c1: f64,
}

impl RandomEffects {
    pub const ZERO: RandomEffects = RandomEffects { a1: 0.0, b1: 0.0, c1: 0.0 };

    pub fn new(a1: f64, b1: f64, c1: f64) -> Self {
        Self { a1, b1, c1 }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.a1, self.b1, self.c1]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { a1: v[0], b1: v[1], c1: v[2] }
    }

    pub fn is_finite(&self) -> bool {
        self.a1.is_finite() && self.b1.is_finite() && self.c1.is_finite()
    }
}

/// Population offsets. Fixed to zero unless a caller sets them.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FixedEffects {
    pub a0: f64,
    pub b0: f64,
    pub c0: f64,
}

pub fn warp_time(t: f64, fixed: &FixedEffects, re: &RandomEffects) -> f64 {
    (t - (fixed.b0 + re.b1)) * (fixed.c0 + re.c1).exp()
}

/// Output of one decode: fitted values plus the number of warped times
/// that fell outside the spline domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub values: Vec<f64>,
    pub out_of_domain: usize,
}

/// Fitted values together with their partial derivatives at each time.
#[derive(Debug, Clone)]
pub struct DecoderJacobian {
    pub values: Vec<f64>,
    /// ∂ŷ_j/∂a1, always 1.
    pub d_a1: Vec<f64>,
    pub d_b1: Vec<f64>,
    pub d_c1: Vec<f64>,
    /// ∂ŷ_j/∂α_k, row j = basis values at the warped time.
    pub d_alpha: SmallMatrix,
    pub out_of_domain: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SitarDecoder {
    pub basis: BSplineBasis,
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub fixed: FixedEffects,
}

impl SitarDecoder {
    pub fn new(basis: BSplineBasis, alpha: Vec<f64>, fixed: FixedEffects) -> Result<Self> {
        if alpha.len() != basis.size() {
            return Err(Error::DimMismatch { expected: basis.size(), got: alpha.len() });
        }
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::Config("spline coefficients must be finite".into()));
        }
        Ok(Self { basis, alpha, fixed })
    }

    /// Decoder whose coefficients are the least-squares fit of the pooled
    /// measurements at their raw (unwarped) times.
    ///
    /// A light second-difference penalty extends the fit linearly over
    /// functions with little or no data in their support.
    pub fn least_squares(basis: BSplineBasis, times: &[f64], ys: &[&[f64]]) -> Result<Self> {
        let m = basis.size();
        let dm = basis.design_matrix(times);
        let mut gram = SmallMatrix::zeros(m, m);
        let mut rhs = vec![0.0; m];
        for y in ys {
            if y.len() != times.len() {
                return Err(Error::DimMismatch { expected: times.len(), got: y.len() });
            }
            for (j, &yj) in y.iter().enumerate() {
                let row = dm.row(j);
                for a in 0..m {
                    if row[a] == 0.0 {
                        continue;
                    }
                    rhs[a] += row[a] * yj;
                    for b in 0..m {
                        gram[(a, b)] += row[a] * row[b];
                    }
                }
            }
        }
        let ridge = 1e-4 * (gram.diag().iter().sum::<f64>() / m as f64).max(1.0);
        if m >= 3 {
            for i in 0..m - 2 {
                let d = [1.0, -2.0, 1.0];
                for a in 0..3 {
                    for b in 0..3 {
                        gram[(i + a, i + b)] += ridge * d[a] * d[b];
                    }
                }
            }
        } else {
            for i in 0..m {
                gram[(i, i)] += ridge;
            }
        }
        let l = cholesky_spd(&gram)?;
        let alpha = cholesky_solve(&l, &rhs);
        Self::new(basis, alpha, FixedEffects::default())
    }

    pub fn warp(&self, t: f64, re: &RandomEffects) -> f64 {
        warp_time(t, &self.fixed, re)
    }

    /// Spline value Σ_k B_k(w)·α_k at an already-warped time.
    pub fn curve_at(&self, w: f64) -> f64 {
        self.basis.local(w).dot(&self.alpha)
    }

    pub fn decode(&self, times: &[f64], re: &RandomEffects) -> Decoded {
        let offset = self.fixed.a0 + re.a1;
        let mut out_of_domain = 0;
        let values = times
            .iter()
            .map(|&t| {
                let local = self.basis.local(self.warp(t, re));
                out_of_domain += local.out_of_domain as usize;
                offset + local.dot(&self.alpha)
            })
            .collect();
        Decoded { values, out_of_domain }
    }

    pub fn decode_gradients(&self, times: &[f64], re: &RandomEffects) -> DecoderJacobian {
        let n = times.len();
        let m = self.basis.size();
        let scale = (self.fixed.c0 + re.c1).exp();
        let shift = self.fixed.b0 + re.b1;
        let offset = self.fixed.a0 + re.a1;
        let mut jac = DecoderJacobian {
            values: Vec::with_capacity(n),
            d_a1: vec![1.0; n],
            d_b1: Vec::with_capacity(n),
            d_c1: Vec::with_capacity(n),
            d_alpha: SmallMatrix::zeros(n, m),
            out_of_domain: 0,
        };
        for (j, &t) in times.iter().enumerate() {
            let w = (t - shift) * scale;
            let local = self.basis.local(w);
            jac.out_of_domain += local.out_of_domain as usize;
            let slope = local.dot_deriv(&self.alpha);
            jac.values.push(offset + local.dot(&self.alpha));
            jac.d_b1.push(-scale * slope);
            jac.d_c1.push(w * slope);
            for (r, v) in local.values().iter().enumerate() {
                jac.d_alpha[(j, local.first + r)] = *v;
            }
        }
        jac
    }

    /// Accumulates the gradient of Σ_j g_j·ŷ_j where `upstream[j] = g_j`:
    /// adds into `d_alpha` and returns the effect gradient. Also returns
    /// the fitted values and the out-of-domain count. This is the sparse
    /// form of `decode_gradients` used by the trainer.
    pub(crate) fn forward_backward<F>(
        &self,
        times: &[f64],
        re: &RandomEffects,
        mut upstream: F,
        d_alpha: &mut [f64],
    ) -> ([f64; 3], usize)
    where
        F: FnMut(usize, f64) -> f64,
    {
        let scale = (self.fixed.c0 + re.c1).exp();
        let shift = self.fixed.b0 + re.b1;
        let offset = self.fixed.a0 + re.a1;
        let mut grad = [0.0; 3];
        let mut ood = 0;
        for (j, &t) in times.iter().enumerate() {
            let w = (t - shift) * scale;
            let local = self.basis.local(w);
            ood += local.out_of_domain as usize;
            let y_hat = offset + local.dot(&self.alpha);
            let g = upstream(j, y_hat);
            if g == 0.0 {
                continue;
            }
            let slope = local.dot_deriv(&self.alpha);
            grad[0] += g;
            grad[1] -= g * scale * slope;
            grad[2] += g * w * slope;
            for (r, v) in local.values().iter().enumerate() {
                d_alpha[local.first + r] += g * v;
            }
        }
        (grad, ood)
    }
}
