//! Fit metrics, effect recovery and a per-individual optimization oracle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{GrowthDataset, Split};
use crate::decoder::{RandomEffects, SitarDecoder};
use crate::error::{Error, Result};
use crate::model::TrainedModel;
use crate::numerics::{cholesky_solve, cholesky_spd, SmallMatrix};
use crate::simulator::TruthParams;
use crate::trainer::CovarianceEstimate;

/// Mean and spread of per-individual mean squared errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseSummary {
    pub mean: f64,
    /// Sample standard deviation (N − 1); 0 for a single individual.
    pub sd: f64,
    pub ids: Vec<u64>,
    pub per_individual: Vec<f64>,
}

impl MseSummary {
    pub fn from_values(ids: Vec<u64>, per_individual: Vec<f64>) -> Result<Self> {
        let n = per_individual.len();
        if n == 0 {
            return Err(Error::EmptySplit("evaluation"));
        }
        let mean = per_individual.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (per_individual.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self { mean, sd, ids, per_individual })
    }
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// MSE_i = (1/n)‖y_i − ŷ_i‖² against the observed measurements.
pub fn per_individual_mse(model: &TrainedModel, ds: &GrowthDataset, split: Split) -> Result<MseSummary> {
    let inds: Vec<_> = ds.split(split).collect();
    if inds.is_empty() {
        return Err(Error::EmptySplit(split.as_str()));
    }
    let values = inds
        .par_iter()
        .map(|ind| {
            let (_, fit) = model.fit_curve(&ind.y, &ds.times)?;
            Ok(mean_sq_diff(&ind.y, &fit.values))
        })
        .collect::<Result<Vec<f64>>>()?;
    MseSummary::from_values(inds.iter().map(|i| i.id).collect(), values)
}

/// MSE against the noise-free curves decode_truth(t, u_i), where u_i are
/// the individual's generating effects.
pub fn per_individual_exact_mse(
    model: &TrainedModel,
    ds: &GrowthDataset,
    split: Split,
    truth: &TruthParams,
) -> Result<MseSummary> {
    let inds: Vec<_> = ds.split(split).collect();
    if inds.is_empty() {
        return Err(Error::EmptySplit(split.as_str()));
    }
    let values = inds
        .par_iter()
        .map(|ind| {
            let u = ind.truth.ok_or(Error::MissingGroundTruth)?;
            let exact = truth.exact_curve(&ds.times, &u);
            let (_, fit) = model.fit_curve(&ind.y, &ds.times)?;
            Ok(mean_sq_diff(&exact, &fit.values))
        })
        .collect::<Result<Vec<f64>>>()?;
    MseSummary::from_values(inds.iter().map(|i| i.id).collect(), values)
}

/// Per-effect |σ²_ref − σ̂²| with σ̂² from the model's final covariance.
pub fn variance_recovery(estimate: &CovarianceEstimate, reference: [f64; 3]) -> [f64; 3] {
    let est = estimate.variances();
    [(reference[0] - est[0]).abs(), (reference[1] - est[1]).abs(), (reference[2] - est[2]).abs()]
}

/// Sample variances (N − 1) of the generating effects in one split.
pub fn empirical_truth_variances(ds: &GrowthDataset, split: Split) -> Result<[f64; 3]> {
    let effects: Vec<[f64; 3]> = ds
        .split(split)
        .map(|i| i.truth.map(RandomEffects::to_array).ok_or(Error::MissingGroundTruth))
        .collect::<Result<_>>()?;
    if effects.len() < 2 {
        return Err(Error::TooFewIndividuals { needed: 2, got: effects.len() });
    }
    let n = effects.len() as f64;
    let mut out = [0.0; 3];
    for k in 0..3 {
        let mean = effects.iter().map(|e| e[k]).sum::<f64>() / n;
        out[k] = effects.iter().map(|e| (e[k] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    }
    Ok(out)
}

/// Effects from the encoder and the fitted curve at `times`; no parameter
/// changes.
pub fn predict_new_individual(model: &TrainedModel, y: &[f64], times: &[f64]) -> Result<(RandomEffects, Vec<f64>)> {
    let (u, fit) = model.fit_curve(y, times)?;
    Ok((u, fit.values))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleOptions {
    /// Grid points per axis for (b1, c1).
    pub grid_steps: usize,
    /// Grid half-width in standard deviations taken from the covariance.
    pub grid_width: f64,
    pub max_iterations: usize,
    /// Multiplier on uᵀΛ̂⁻¹u; 0 gives plain least squares.
    pub penalty_weight: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self { grid_steps: 25, grid_width: 3.0, max_iterations: 50, penalty_weight: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleFit {
    pub effects: RandomEffects,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// ‖y − decode(t, u)‖² + w·uᵀΛ̂⁻¹u.
pub fn oracle_objective(
    times: &[f64],
    y: &[f64],
    dec: &SitarDecoder,
    precision: &SmallMatrix,
    weight: f64,
    u: &RandomEffects,
) -> f64 {
    let fit = dec.decode(times, u);
    let sse: f64 = y.iter().zip(&fit.values).map(|(a, b)| (a - b) * (a - b)).sum();
    if weight == 0.0 {
        sse
    } else {
        sse + weight * precision.quadratic_form(&u.to_array())
    }
}

/// Minimizes the penalized per-individual objective over u: grid search on
/// (b1, c1) with a1 solved exactly at each node, then Gauss–Newton with
/// step halving from the best node. `converged = false` marks an
/// iteration cap or a failed descent; the best point found is returned.
pub fn oracle_fit_individual(
    times: &[f64],
    y: &[f64],
    dec: &SitarDecoder,
    cov: &CovarianceEstimate,
    opts: &OracleOptions,
) -> Result<OracleFit> {
    if times.len() != y.len() {
        return Err(Error::DimMismatch { expected: times.len(), got: y.len() });
    }
    if opts.grid_steps < 1 {
        return Err(Error::Config("oracle grid needs at least one step".into()));
    }
    let w = opts.penalty_weight;
    let p = &cov.inverse;
    let n = times.len() as f64;
    let var = cov.variances();
    let axis = |sd: f64, k: usize| -> f64 {
        if opts.grid_steps == 1 {
            0.0
        } else {
            -opts.grid_width * sd + 2.0 * opts.grid_width * sd * k as f64 / (opts.grid_steps - 1) as f64
        }
    };
    let objective = |u: &RandomEffects| oracle_objective(times, y, dec, p, w, u);

    let mut best = RandomEffects::ZERO;
    let mut best_obj = objective(&best);
    for i in 0..opts.grid_steps {
        let b = axis(var[1].sqrt(), i);
        for j in 0..opts.grid_steps {
            let c = axis(var[2].sqrt(), j);
            let shape = dec.decode(times, &RandomEffects::new(0.0, b, c));
            let resid: f64 = y.iter().zip(&shape.values).map(|(a, s)| a - s).sum();
            let a = (resid - w * (p[(0, 1)] * b + p[(0, 2)] * c)) / (n + w * p[(0, 0)]);
            let u = RandomEffects::new(a, b, c);
            let obj = objective(&u);
            if obj < best_obj {
                best = u;
                best_obj = obj;
            }
        }
    }

    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let jac = dec.decode_gradients(times, &best);
        let cols = [&jac.d_a1, &jac.d_b1, &jac.d_c1];
        let ua = best.to_array();
        let pu = p.matvec(&ua)?;
        let mut h = SmallMatrix::zeros(3, 3);
        let mut g = [0.0; 3];
        for a in 0..3 {
            for b in 0..3 {
                h[(a, b)] = cols[a].iter().zip(cols[b].iter()).map(|(x, z)| x * z).sum::<f64>() + w * p[(a, b)];
            }
            let jr: f64 = cols[a].iter().zip(y.iter().zip(&jac.values)).map(|(d, (yy, f))| d * (yy - f)).sum();
            g[a] = jr - w * pu[a];
        }
        let step = match cholesky_spd(&h) {
            Ok(l) => cholesky_solve(&l, &g),
            Err(_) => {
                let scale = (0..3).map(|k| h[(k, k)]).fold(0.0f64, f64::max).max(1.0);
                for k in 0..3 {
                    h[(k, k)] += 1e-10 * scale;
                }
                match cholesky_spd(&h) {
                    Ok(l) => cholesky_solve(&l, &g),
                    Err(_) => break,
                }
            }
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = RandomEffects::new(ua[0] + t * step[0], ua[1] + t * step[1], ua[2] + t * step[2]);
            let obj = objective(&cand);
            if obj.is_finite() && obj <= best_obj {
                accepted = Some((cand, obj));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, obj)) = accepted else {
            // No descent along the Gauss–Newton direction: already at a
            // stationary point up to rounding.
            converged = step.iter().zip(&ua).all(|(s, u)| s.abs() <= 1e-8 * (1.0 + u.abs()));
            break;
        };
        let small = step.iter().zip(&ua).all(|(s, u)| (t * s).abs() <= 1e-12 * (1.0 + u.abs()));
        let flat = best_obj - obj <= 1e-15 * (1.0 + best_obj);
        best = cand;
        best_obj = obj;
        if small || flat {
            converged = true;
            break;
        }
    }
    Ok(OracleFit { effects: best, objective: best_obj, iterations, converged })
}

/// Oracle fits for every individual in a split, in dataset order.
pub fn oracle_fit_split(
    ds: &GrowthDataset,
    split: Split,
    dec: &SitarDecoder,
    cov: &CovarianceEstimate,
    opts: &OracleOptions,
) -> Result<Vec<OracleFit>> {
    let inds: Vec<_> = ds.split(split).collect();
    inds.par_iter().map(|i| oracle_fit_individual(&ds.times, &i.y, dec, cov, opts)).collect()
}

/// Pearson correlations per effect; a coordinate where either side has
/// zero variance reports 0 and sets its degenerate flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectCorrelation {
    pub values: [f64; 3],
    pub degenerate: [bool; 3],
}

pub fn correlate_effects(predicted: &[RandomEffects], reference: &[RandomEffects]) -> Result<EffectCorrelation> {
    if predicted.len() != reference.len() {
        return Err(Error::DimMismatch { expected: reference.len(), got: predicted.len() });
    }
    if predicted.len() < 2 {
        return Err(Error::TooFewIndividuals { needed: 2, got: predicted.len() });
    }
    let n = predicted.len() as f64;
    let mut out = EffectCorrelation { values: [0.0; 3], degenerate: [false; 3] };
    for k in 0..3 {
        let x: Vec<f64> = predicted.iter().map(|u| u.to_array()[k]).collect();
        let z: Vec<f64> = reference.iter().map(|u| u.to_array()[k]).collect();
        let mx = x.iter().sum::<f64>() / n;
        let mz = z.iter().sum::<f64>() / n;
        let (mut sxz, mut sxx, mut szz) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(&z) {
            sxz += (a - mx) * (b - mz);
            sxx += (a - mx) * (a - mx);
            szz += (b - mz) * (b - mz);
        }
        if sxx <= 0.0 || szz <= 0.0 {
            out.degenerate[k] = true;
        } else {
            out.values[k] = (sxz / (sxx * szz).sqrt()).clamp(-1.0, 1.0);
        }
    }
    Ok(out)
}

/// Correlation of encoder effects with the generating effects of a split.
pub fn effect_recovery_correlation(model: &TrainedModel, ds: &GrowthDataset, split: Split) -> Result<EffectCorrelation> {
    let inds: Vec<_> = ds.split(split).collect();
    let truth: Vec<RandomEffects> = inds.iter().map(|i| i.truth.ok_or(Error::MissingGroundTruth)).collect::<Result<_>>()?;
    let pred: Vec<RandomEffects> = inds.iter().map(|i| model.predict_effects(&i.y)).collect::<Result<_>>()?;
    correlate_effects(&pred, &truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: Split,
    pub individuals: usize,
    /// Against the observed measurements.
    pub mse: MseSummary,
    /// Against the noise-free generating curves, when the truth is known.
    pub exact_mse: Option<MseSummary>,
    pub correlation: Option<EffectCorrelation>,
    pub out_of_domain: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    /// "truth_config" or "empirical_truth".
    pub reference_source: String,
    pub reference: [f64; 3],
    pub estimate: [f64; 3],
    pub abs_diff: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub n_individuals: usize,
    pub n_seg: usize,
    pub splits: Vec<SplitReport>,
    /// `None` when the dataset carries no generating effects.
    pub variance_recovery: Option<VarianceReport>,
}

/// Builds the full report. `truth` enables the exact-curve MSE and makes
/// its covariance the variance reference; without it the reference is the
/// sample variance of the generating effects in the training split.
pub fn evaluate(model: &TrainedModel, ds: &GrowthDataset, truth: Option<&TruthParams>) -> Result<FitReport> {
    if model.input_dim() != ds.n_points() {
        return Err(Error::DimMismatch { expected: model.input_dim(), got: ds.n_points() });
    }
    let mut splits = Vec::new();
    for split in [Split::Train, Split::Validation] {
        let count = ds.split_len(split);
        if count == 0 {
            continue;
        }
        let mse = per_individual_mse(model, ds, split)?;
        let has_truth = ds.split(split).all(|i| i.truth.is_some());
        let exact_mse = match (truth, has_truth) {
            (Some(t), true) => Some(per_individual_exact_mse(model, ds, split, t)?),
            _ => None,
        };
        let correlation = if has_truth && count >= 2 { Some(effect_recovery_correlation(model, ds, split)?) } else { None };
        let out_of_domain = ds
            .split(split)
            .map(|i| model.fit_curve(&i.y, &ds.times).map(|(_, d)| d.out_of_domain))
            .sum::<Result<usize>>()?;
        splits.push(SplitReport { split, individuals: count, mse, exact_mse, correlation, out_of_domain });
    }
    let variance_recovery = if !ds.has_truth() {
        None
    } else {
        let (source, reference) = match truth {
            Some(t) => ("truth_config", t.variances()),
            None => ("empirical_truth", empirical_truth_variances(ds, Split::Train)?),
        };
        Some(VarianceReport {
            reference_source: source.to_string(),
            reference,
            estimate: model.covariance.variances(),
            abs_diff: variance_recovery(&model.covariance, reference),
        })
    };
    Ok(FitReport { n_individuals: ds.len(), n_seg: model.architecture.n_seg, splits, variance_recovery })
}

impl FitReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn split(&self, split: Split) -> Option<&SplitReport> {
        self.splits.iter().find(|s| s.split == split)
    }

    /// Long-format table with columns N, n_seg, split, metric, value.
    pub fn write_summary_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["N", "n_seg", "split", "metric", "value"]).map_err(err)?;
        let (n, m) = (self.n_individuals.to_string(), self.n_seg.to_string());
        let mut row = |split: &str, metric: &str, value: f64| {
            w.write_record([n.as_str(), m.as_str(), split, metric, &value.to_string()])
        };
        const NAMES: [&str; 3] = ["a1", "b1", "c1"];
        for s in &self.splits {
            let name = s.split.as_str();
            row(name, "mse_mean", s.mse.mean).map_err(err)?;
            row(name, "mse_sd", s.mse.sd).map_err(err)?;
            if let Some(e) = &s.exact_mse {
                row(name, "exact_mse_mean", e.mean).map_err(err)?;
                row(name, "exact_mse_sd", e.sd).map_err(err)?;
            }
            if let Some(c) = &s.correlation {
                for k in 0..3 {
                    row(name, &format!("corr_{}", NAMES[k]), c.values[k]).map_err(err)?;
                }
            }
            row(name, "out_of_domain", s.out_of_domain as f64).map_err(err)?;
        }
        if let Some(v) = &self.variance_recovery {
            for k in 0..3 {
                row("train", &format!("var_abs_diff_{}", NAMES[k]), v.abs_diff[k]).map_err(err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
