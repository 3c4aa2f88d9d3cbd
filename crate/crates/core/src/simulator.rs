//! Synthetic balanced growth cohorts with known random effects.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{GrowthDataset, Individual, Split};
use crate::decoder::{FixedEffects, RandomEffects, SitarDecoder};
use crate::error::{Error, Result};
use crate::numerics::{cholesky_spd, SeededRng, SmallMatrix};
use crate::splines::make_basis;

/// Shipped generating parameters; see the file for the schema.
pub const DEFAULT_TRUTH_TOML: &str = include_str!("../data/default_truth.toml");

pub const AGE_FIRST: f64 = 9.0;
pub const AGE_LAST: f64 = 18.0;
pub const DEFAULT_AGES: usize = 20;

/// Generating parameters of a simulated cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthParams {
    pub decoder: SitarDecoder,
    pub lambda: SmallMatrix,
    pub noise_var: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthConfig {
    noise_var: f64,
    curve: CurveConfig,
    #[serde(default)]
    fixed: FixedEffects,
    random_effects: RandomEffectsConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CurveConfig {
    domain: [f64; 2],
    n_seg: usize,
    degree: usize,
    margin: f64,
    alpha: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RandomEffectsConfig {
    covariance: [[f64; 3]; 3],
}

impl TruthParams {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TruthConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let basis = make_basis(cfg.curve.domain[0], cfg.curve.domain[1], cfg.curve.n_seg, cfg.curve.degree, cfg.curve.margin)?;
        let decoder = SitarDecoder::new(basis, cfg.curve.alpha, cfg.fixed)?;
        let rows: Vec<Vec<f64>> = cfg.random_effects.covariance.iter().map(|r| r.to_vec()).collect();
        let lambda = SmallMatrix::from_rows(&rows)?;
        cholesky_spd(&lambda)?;
        if !(cfg.noise_var.is_finite() && cfg.noise_var > 0.0) {
            return Err(Error::Config(format!("noise_var must be positive, got {}", cfg.noise_var)));
        }
        Ok(Self { decoder, lambda, noise_var: cfg.noise_var })
    }

    /// Hex SHA-256 of the TOML text; identifies the truth a model was fitted to.
    pub fn hash_text(text: &str) -> String {
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn variances(&self) -> [f64; 3] {
        [self.lambda[(0, 0)], self.lambda[(1, 1)], self.lambda[(2, 2)]]
    }

    /// Noise-free curve of one individual.
    pub fn exact_curve(&self, times: &[f64], re: &RandomEffects) -> Vec<f64> {
        self.decoder.decode(times, re).values
    }
}

/// Population curve, covariance and noise shipped with the crate.
///
/// The curve is a 7-function cubic B-spline (four segments over ages 9–18
/// widened by 30 % on each side) rising from about 133 cm to 177 cm, with
/// a growth spurt peaking near 6 cm/year at age 12 and slowing to
/// 1.5 cm/year at 18. Random-effect standard deviations are 6 cm, 1 year
/// and 0.12 on the log scale; noise variance is 0.4 cm².
pub fn default_truth() -> TruthParams {
    TruthParams::from_toml(DEFAULT_TRUTH_TOML).expect("shipped truth config is valid")
}

/// `n_points` ages equally spaced over [9, 18].
pub fn make_ages(n_points: usize) -> Result<Vec<f64>> {
    if n_points < 2 {
        return Err(Error::InvalidCount(format!("need at least 2 ages, got {n_points}")));
    }
    let step = (AGE_LAST - AGE_FIRST) / (n_points - 1) as f64;
    Ok((0..n_points)
        .map(|j| if j + 1 == n_points { AGE_LAST } else { AGE_FIRST + j as f64 * step })
        .collect())
}

/// Number of training individuals for a cohort of `n` at fraction `split_frac`.
pub fn train_count(n: usize, split_frac: f64) -> usize {
    (split_frac * n as f64).round() as usize
}

/// Twenty ages per individual; see [`simulate_with_ages`].
pub fn simulate(n: usize, truth: &TruthParams, split_frac: f64, rng: &mut SeededRng) -> Result<GrowthDataset> {
    simulate_with_ages(n, &make_ages(DEFAULT_AGES)?, truth, split_frac, rng)
}

/// Draws `n` individuals: effects u ~ N(0, Λ) via the Cholesky factor,
/// measurements y = decode(t, u) + ε with ε ~ N(0, noise_var), then a
/// random assignment of `round(split_frac·n)` individuals to training.
///
/// Draw order is fixed: for each individual its three effect normals, then
/// its noise normals; the split permutation comes last.
pub fn simulate_with_ages(
    n: usize,
    ages: &[f64],
    truth: &TruthParams,
    split_frac: f64,
    rng: &mut SeededRng,
) -> Result<GrowthDataset> {
    if n < 2 {
        return Err(Error::TooFewIndividuals { needed: 2, got: n });
    }
    if !(split_frac > 0.0 && split_frac < 1.0) {
        return Err(Error::Config(format!("split fraction must lie in (0, 1), got {split_frac}")));
    }
    let n_train = train_count(n, split_frac);
    if n_train == 0 {
        return Err(Error::EmptySplit("train"));
    }
    let chol = cholesky_spd(&truth.lambda)?;
    let noise_sd = truth.noise_var.sqrt();
    let mut individuals = Vec::with_capacity(n);
    for i in 0..n {
        let z = [rng.standard_normal(), rng.standard_normal(), rng.standard_normal()];
        let u = chol.matvec(&z)?;
        let re = RandomEffects::from_slice(&u);
        let mut y = truth.exact_curve(ages, &re);
        for v in y.iter_mut() {
            *v += noise_sd * rng.standard_normal();
        }
        individuals.push(Individual { id: i as u64 + 1, y, split: Split::Validation, truth: Some(re) });
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    for &i in &order[..n_train] {
        individuals[i].split = Split::Train;
    }
    GrowthDataset::new(ages.to_vec(), individuals)
}
