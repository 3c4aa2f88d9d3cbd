//! Penalized autoencoder training by plain gradient descent.
//!
//! Each epoch: encode every training individual, re-estimate the 3×3
//! covariance Λ̂ of the predicted effects, then take a gradient step on
//!
//! ```text
//! L = (1/N) Σ_i ( ‖y_i − ŷ_i‖² + u_iᵀ Λ̂⁻¹ u_i ),   u_i = encode(y_i),  ŷ_i = decode(t, u_i)
//! ```
//!
//! Λ̂ is held constant inside the step; no gradient flows through it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{GrowthDataset, Split};
use crate::decoder::{RandomEffects, SitarDecoder};
use crate::encoder::{init_encoder, EncoderNet, ForwardCache, OutputMap, Standardizer, OUTPUT_DIM};
use crate::error::{Error, Result};
use crate::model::{Architecture, TrainedModel};
use crate::numerics::{cholesky_spd, spd_inverse, SeededRng, SmallMatrix};
use crate::splines::make_basis;

/// Individuals per parallel work unit. Partial sums are combined in chunk
/// order, so results do not depend on the thread count.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum BatchMode {
    Full,
    Minibatch { size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_mode: BatchMode,
    pub jitter: f64,
    pub gradient_clip: Option<f64>,
    pub penalty_on: bool,
    /// Epochs at the start during which the covariance penalty is off.
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 22_000,
            learning_rate: 1e-3,
            batch_mode: BatchMode::Full,
            jitter: 1e-6,
            gradient_clip: Some(10.0),
            penalty_on: true,
            warmup_epochs: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.jitter.is_finite() && self.jitter > 0.0) {
            return Err(Error::Config(format!("jitter must be positive, got {}", self.jitter)));
        }
        if let Some(c) = self.gradient_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("gradient clip must be positive, got {c}")));
            }
        }
        if let BatchMode::Minibatch { size: 0 } = self.batch_mode {
            return Err(Error::Config("minibatch size must be positive".into()));
        }
        Ok(())
    }

    fn penalty_active(&self, epoch: usize) -> bool {
        self.penalty_on && epoch >= self.warmup_epochs
    }
}

/// Sample covariance of predicted effects plus jitter on the diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    pub matrix: SmallMatrix,
    pub inverse: SmallMatrix,
    pub epoch: usize,
}

impl CovarianceEstimate {
    pub fn from_matrix(matrix: SmallMatrix, epoch: usize) -> Result<Self> {
        if matrix.rows() != OUTPUT_DIM || !matrix.is_square() {
            return Err(Error::Shape("covariance must be 3x3".into()));
        }
        let inverse = spd_inverse(&matrix)?;
        Ok(Self { matrix, inverse, epoch })
    }

    pub fn variances(&self) -> [f64; 3] {
        [self.matrix[(0, 0)], self.matrix[(1, 1)], self.matrix[(2, 2)]]
    }
}

/// Column covariance with denominator N − 1, plus `jitter·I`.
pub fn estimate_covariance(effects: &[[f64; 3]], jitter: f64, epoch: usize) -> Result<CovarianceEstimate> {
    if effects.len() < 2 {
        return Err(Error::TooFewIndividuals { needed: 2, got: effects.len() });
    }
    let n = effects.len() as f64;
    let mut mean = [0.0; 3];
    for e in effects {
        for k in 0..3 {
            mean[k] += e[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = SmallMatrix::zeros(3, 3);
    for e in effects {
        for a in 0..3 {
            for b in 0..=a {
                cov[(a, b)] += (e[a] - mean[a]) * (e[b] - mean[b]);
            }
        }
    }
    for a in 0..3 {
        for b in 0..=a {
            let v = cov[(a, b)] / (n - 1.0);
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
        cov[(a, a)] += jitter;
    }
    CovarianceEstimate::from_matrix(cov, epoch)
}

/// uᵀ Λ̂⁻¹ u.
pub fn penalty(re: &RandomEffects, cov: &CovarianceEstimate) -> f64 {
    cov.inverse.quadratic_form(&re.to_array())
}

/// Loss value and gradients for one pass over a set of individuals.
#[derive(Debug, Clone)]
pub struct LossGradient {
    /// Mean over individuals of reconstruction error plus penalty.
    pub loss: f64,
    /// Mean over individuals of ‖y − ŷ‖².
    pub reconstruction: f64,
    /// ∂L/∂θ in the encoder's flat layout.
    pub grad_encoder: Vec<f64>,
    /// ∂L/∂α.
    pub grad_alpha: Vec<f64>,
    pub out_of_domain: usize,
}

impl LossGradient {
    pub fn norm(&self) -> f64 {
        self.grad_encoder.iter().chain(&self.grad_alpha).map(|g| g * g).sum::<f64>().sqrt()
    }
}

struct Partial {
    loss: f64,
    sse: f64,
    grad_encoder: Vec<f64>,
    grad_alpha: Vec<f64>,
    ood: usize,
}

fn forward_all(encoder: &EncoderNet, std: &Standardizer, ys: &[&[f64]]) -> Result<Vec<ForwardCache>> {
    ys.par_iter().map(|y| encoder.forward(std, y)).collect()
}

/// Core accumulation shared by the public loss function and the training
/// loop. `with_grad = false` skips all gradient work.
fn accumulate(
    encoder: &EncoderNet,
    decoder: &SitarDecoder,
    times: &[f64],
    ys: &[&[f64]],
    caches: &[ForwardCache],
    precision: Option<&SmallMatrix>,
    with_grad: bool,
) -> LossGradient {
    let n_enc = if with_grad { encoder.param_count() } else { 0 };
    let n_alpha = if with_grad { decoder.alpha.len() } else { 0 };
    let partials: Vec<Partial> = ys
        .par_chunks(CHUNK)
        .zip(caches.par_chunks(CHUNK))
        .map(|(ys, caches)| {
            let mut p = Partial {
                loss: 0.0,
                sse: 0.0,
                grad_encoder: vec![0.0; n_enc],
                grad_alpha: vec![0.0; n_alpha],
                ood: 0,
            };
            let mut scratch_alpha = vec![0.0; decoder.alpha.len()];
            for (y, cache) in ys.iter().zip(caches) {
                let u = cache.output(encoder);
                let mut sse = 0.0;
                let alpha_sink = if with_grad { &mut p.grad_alpha } else { &mut scratch_alpha };
                let (mut g_u, ood) = decoder.forward_backward(
                    times,
                    &u,
                    |j, y_hat| {
                        let r = y[j] - y_hat;
                        sse += r * r;
                        if with_grad { -2.0 * r } else { 0.0 }
                    },
                    alpha_sink,
                );
                let mut pen = 0.0;
                if let Some(prec) = precision {
                    let ua = u.to_array();
                    pen = prec.quadratic_form(&ua);
                    if with_grad {
                        let pu = prec.matvec(&ua).expect("3x3 precision");
                        for k in 0..3 {
                            g_u[k] += 2.0 * pu[k];
                        }
                    }
                }
                if with_grad {
                    encoder.backward_into(cache, g_u, &mut p.grad_encoder);
                }
                p.loss += sse + pen;
                p.sse += sse;
                p.ood += ood;
            }
            p
        })
        .collect();

    let n = ys.len().max(1) as f64;
    let mut out = LossGradient {
        loss: 0.0,
        reconstruction: 0.0,
        grad_encoder: vec![0.0; n_enc],
        grad_alpha: vec![0.0; n_alpha],
        out_of_domain: 0,
    };
    for p in partials {
        out.loss += p.loss;
        out.reconstruction += p.sse;
        out.out_of_domain += p.ood;
        for (a, b) in out.grad_encoder.iter_mut().zip(&p.grad_encoder) {
            *a += b;
        }
        for (a, b) in out.grad_alpha.iter_mut().zip(&p.grad_alpha) {
            *a += b;
        }
    }
    out.loss /= n;
    out.reconstruction /= n;
    out.grad_encoder.iter_mut().chain(out.grad_alpha.iter_mut()).for_each(|g| *g /= n);
    out
}

/// Penalized reconstruction loss of the autoencoder and its gradient with
/// respect to encoder parameters and spline coefficients. `cov = None`
/// drops the penalty term.
pub fn autoencoder_loss(
    encoder: &EncoderNet,
    std: &Standardizer,
    decoder: &SitarDecoder,
    times: &[f64],
    ys: &[&[f64]],
    cov: Option<&CovarianceEstimate>,
) -> Result<LossGradient> {
    if ys.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let caches = forward_all(encoder, std, ys)?;
    Ok(accumulate(encoder, decoder, times, ys, &caches, cov.map(|c| &c.inverse), true))
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub ood_count: usize,
    /// Norm of the full-batch gradient before clipping; NaN in minibatch mode.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Columns: epoch, train_loss, train_log_loss, val_loss, val_log_loss, ood_count.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["epoch", "train_loss", "train_log_loss", "val_loss", "val_log_loss", "ood_count"])
            .map_err(io)?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.train_loss.ln().to_string(),
                r.val_loss.to_string(),
                r.val_loss.ln().to_string(),
                r.ood_count.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fixed output map M that whitens the decoder Jacobian J (columns
/// ∂ŷ/∂a1, ∂ŷ/∂b1, ∂ŷ/∂c1 at zero effects on the initial curve): with
/// JᵀJ/n = LLᵀ, M = L⁻ᵀ so that (JM)ᵀ(JM)/n = I. Falls back to the
/// identity when JᵀJ is singular.
pub fn output_map(decoder: &SitarDecoder, times: &[f64]) -> OutputMap {
    let identity = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let jac = decoder.decode_gradients(times, &RandomEffects::ZERO);
    let cols = [&jac.d_a1, &jac.d_b1, &jac.d_c1];
    let n = times.len() as f64;
    let mut gram = SmallMatrix::zeros(3, 3);
    for a in 0..3 {
        for b in 0..3 {
            gram[(a, b)] = cols[a].iter().zip(cols[b].iter()).map(|(x, y)| x * y).sum::<f64>() / n;
        }
    }
    let Ok(l) = cholesky_spd(&gram) else { return identity };
    if (0..3).any(|i| l[(i, i)] < 1e-8 * l[(0, 0)].max(1.0)) {
        return identity;
    }
    // Forward substitution for L⁻¹, column by column.
    let mut linv = [[0.0; 3]; 3];
    for c in 0..3 {
        for r in c..3 {
            let mut v = if r == c { 1.0 } else { 0.0 };
            for k in c..r {
                v -= l[(r, k)] * linv[k][c];
            }
            linv[r][c] = v / l[(r, r)];
        }
    }
    let mut m = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            m[r][c] = linv[c][r];
        }
    }
    m
}

fn split_rows(ds: &GrowthDataset, split: Split) -> Vec<&[f64]> {
    ds.split(split).map(|i| i.y.as_slice()).collect()
}

/// Rescales `grads` in place so their joint norm is at most `clip`.
fn clip_gradients(grads: &mut [&mut [f64]], clip: Option<f64>) {
    let Some(clip) = clip else { return };
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > clip {
        let s = clip / norm;
        grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }
}

fn init_model(ds: &GrowthDataset, arch: &Architecture, cfg: &TrainConfig, rng: &mut SeededRng) -> Result<TrainedModel> {
    arch.validate()?;
    cfg.validate()?;
    let train = split_rows(ds, Split::Train);
    if train.len() < 2 {
        return Err(Error::TooFewIndividuals { needed: 2, got: train.len() });
    }
    if arch.dims[0] != ds.n_points() {
        return Err(Error::DimMismatch { expected: arch.dims[0], got: ds.n_points() });
    }
    let standardizer =
        if let Some(ridge) = arch.whitening_ridge { Standardizer::fit_whitened(&train, ridge)? } else { Standardizer::fit(&train)? };
    let mut encoder = init_encoder(&arch.dims, rng)?;
    let lo = ds.times[0];
    let hi = *ds.times.last().unwrap();
    let basis = make_basis(lo, hi, arch.n_seg, arch.degree, arch.margin)?;
    let decoder = SitarDecoder::least_squares(basis, &ds.times, &train)?;
    if arch.precondition_outputs {
        encoder.output_map = output_map(&decoder, &ds.times);
    }
    let effects = effects_of(&encoder, &standardizer, &train)?;
    let covariance = estimate_covariance(&effects, cfg.jitter, 0)?;
    Ok(TrainedModel {
        encoder,
        standardizer,
        decoder,
        covariance,
        architecture: arch.clone(),
        config: cfg.clone(),
        truth_hash: None,
    })
}

fn effects_of(encoder: &EncoderNet, std: &Standardizer, ys: &[&[f64]]) -> Result<Vec<[f64; 3]>> {
    ys.par_iter().map(|y| encoder.encode(std, y).map(RandomEffects::to_array)).collect()
}

/// Trains encoder weights and spline coefficients jointly.
///
/// With `epochs = 0` the initialized model is returned with an empty
/// history. Fails with `DivergenceDetected` as soon as a loss is non-finite.
pub fn train_autoencoder(
    ds: &GrowthDataset,
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainHistory)> {
    let mut rng = SeededRng::new(cfg.seed);
    let mut init_rng = rng.fork();
    let mut batch_rng = rng.fork();
    let mut model = init_model(ds, arch, cfg, &mut init_rng)?;
    let train = split_rows(ds, Split::Train);
    let val = split_rows(ds, Split::Validation);
    let times = ds.times.as_slice();
    let mut history = TrainHistory { records: Vec::with_capacity(cfg.epochs) };
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        let caches = forward_all(&model.encoder, &model.standardizer, &train)?;
        let effects: Vec<[f64; 3]> = caches.iter().map(|c| c.output(&model.encoder).to_array()).collect();
        let cov = estimate_covariance(&effects, cfg.jitter, epoch)
            .map_err(|_| Error::DivergenceDetected { epoch })?;
        let precision = cfg.penalty_active(epoch).then_some(&cov.inverse);

        let full = cfg.batch_mode == BatchMode::Full;
        let mut lg = accumulate(&model.encoder, &model.decoder, times, &train, &caches, precision, full);
        let val_loss = if val.is_empty() {
            f64::NAN
        } else {
            let vc = forward_all(&model.encoder, &model.standardizer, &val)?;
            accumulate(&model.encoder, &model.decoder, times, &val, &vc, precision, false).loss
        };
        if !lg.loss.is_finite() || !(val.is_empty() || val_loss.is_finite()) {
            return Err(Error::DivergenceDetected { epoch });
        }
        history.records.push(EpochRecord {
            epoch,
            train_loss: lg.loss,
            val_loss,
            ood_count: lg.out_of_domain,
            grad_norm: if full { lg.norm() } else { f64::NAN },
        });

        match cfg.batch_mode {
            BatchMode::Full => {
                clip_gradients(&mut [&mut lg.grad_encoder, &mut lg.grad_alpha], cfg.gradient_clip);
                model.encoder.apply_step(&lg.grad_encoder, cfg.learning_rate);
                for (a, g) in model.decoder.alpha.iter_mut().zip(&lg.grad_alpha) {
                    *a -= cfg.learning_rate * g;
                }
            }
            BatchMode::Minibatch { size } => {
                batch_rng.shuffle(&mut order);
                for chunk in order.chunks(size) {
                    let ys: Vec<&[f64]> = chunk.iter().map(|&i| train[i]).collect();
                    let bc = forward_all(&model.encoder, &model.standardizer, &ys)?;
                    let mut g = accumulate(&model.encoder, &model.decoder, times, &ys, &bc, precision, true);
                    if !g.loss.is_finite() {
                        return Err(Error::DivergenceDetected { epoch });
                    }
                    clip_gradients(&mut [&mut g.grad_encoder, &mut g.grad_alpha], cfg.gradient_clip);
                    model.encoder.apply_step(&g.grad_encoder, cfg.learning_rate);
                    for (a, d) in model.decoder.alpha.iter_mut().zip(&g.grad_alpha) {
                        *a -= cfg.learning_rate * d;
                    }
                }
            }
        }
    }

    let effects = effects_of(&model.encoder, &model.standardizer, &train)?;
    model.covariance = estimate_covariance(&effects, cfg.jitter, cfg.epochs)
        .map_err(|_| Error::DivergenceDetected { epoch: cfg.epochs })?;
    if model.decoder.alpha.iter().any(|a| !a.is_finite()) {
        return Err(Error::DivergenceDetected { epoch: cfg.epochs });
    }
    Ok((model, history))
}

/// Encoder trained to regress known random effects directly.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedModel {
    pub encoder: EncoderNet,
    pub standardizer: Standardizer,
    pub covariance: CovarianceEstimate,
}

/// Loss (1/N) Σ (‖υ(y_i) − u_i‖² + υ(y_i)ᵀ Λ̂⁻¹ υ(y_i)) and its encoder gradient.
pub fn supervised_loss(
    encoder: &EncoderNet,
    std: &Standardizer,
    ys: &[&[f64]],
    targets: &[RandomEffects],
    cov: Option<&CovarianceEstimate>,
) -> Result<(f64, Vec<f64>)> {
    if ys.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let caches = forward_all(encoder, std, ys)?;
    Ok(supervised_accumulate(encoder, &caches, targets, cov.map(|c| &c.inverse), true))
}

fn supervised_accumulate(
    encoder: &EncoderNet,
    caches: &[ForwardCache],
    targets: &[RandomEffects],
    precision: Option<&SmallMatrix>,
    with_grad: bool,
) -> (f64, Vec<f64>) {
    let n_enc = if with_grad { encoder.param_count() } else { 0 };
    let partials: Vec<(f64, Vec<f64>)> = caches
        .par_chunks(CHUNK)
        .zip(targets.par_chunks(CHUNK))
        .map(|(caches, targets)| {
            let mut loss = 0.0;
            let mut grad = vec![0.0; n_enc];
            for (cache, target) in caches.iter().zip(targets) {
                let u = cache.output(encoder).to_array();
                let t = target.to_array();
                let mut g = [0.0; 3];
                for k in 0..3 {
                    let d = u[k] - t[k];
                    loss += d * d;
                    g[k] = 2.0 * d;
                }
                if let Some(prec) = precision {
                    loss += prec.quadratic_form(&u);
                    let pu = prec.matvec(&u).expect("3x3 precision");
                    for k in 0..3 {
                        g[k] += 2.0 * pu[k];
                    }
                }
                if with_grad {
                    encoder.backward_into(cache, g, &mut grad);
                }
            }
            (loss, grad)
        })
        .collect();
    let n = caches.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n_enc];
    for (l, g) in partials {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

/// Regresses the ground-truth effects of the training split. Same
/// covariance sequencing, warm-up and update rule as the autoencoder.
pub fn train_supervised(
    ds: &GrowthDataset,
    dims: &[usize],
    cfg: &TrainConfig,
) -> Result<(SupervisedModel, TrainHistory)> {
    cfg.validate()?;
    let truth_of = |split| -> Result<Vec<RandomEffects>> {
        ds.split(split).map(|i| i.truth.ok_or(Error::MissingGroundTruth)).collect()
    };
    let train_truth = truth_of(Split::Train)?;
    let val_truth = truth_of(Split::Validation)?;
    let train = split_rows(ds, Split::Train);
    let val = split_rows(ds, Split::Validation);
    if train.len() < 2 {
        return Err(Error::TooFewIndividuals { needed: 2, got: train.len() });
    }
    if dims.first() != Some(&ds.n_points()) {
        return Err(Error::DimMismatch { expected: dims.first().copied().unwrap_or(0), got: ds.n_points() });
    }
    let mut rng = SeededRng::new(cfg.seed);
    let mut init_rng = rng.fork();
    let mut batch_rng = rng.fork();
    let standardizer = Standardizer::fit(&train)?;
    let mut encoder = init_encoder(dims, &mut init_rng)?;
    let mut history = TrainHistory { records: Vec::with_capacity(cfg.epochs) };
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        let caches = forward_all(&encoder, &standardizer, &train)?;
        let effects: Vec<[f64; 3]> = caches.iter().map(|c| c.output(&encoder).to_array()).collect();
        let cov = estimate_covariance(&effects, cfg.jitter, epoch)
            .map_err(|_| Error::DivergenceDetected { epoch })?;
        let precision = cfg.penalty_active(epoch).then_some(&cov.inverse);
        let full = cfg.batch_mode == BatchMode::Full;
        let (loss, mut grad) = supervised_accumulate(&encoder, &caches, &train_truth, precision, full);
        let val_loss = if val.is_empty() {
            f64::NAN
        } else {
            let vc = forward_all(&encoder, &standardizer, &val)?;
            supervised_accumulate(&encoder, &vc, &val_truth, precision, false).0
        };
        if !loss.is_finite() || !(val.is_empty() || val_loss.is_finite()) {
            return Err(Error::DivergenceDetected { epoch });
        }
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss,
            val_loss,
            ood_count: 0,
            grad_norm: if full { grad.iter().map(|g| g * g).sum::<f64>().sqrt() } else { f64::NAN },
        });
        match cfg.batch_mode {
            BatchMode::Full => {
                clip_gradients(&mut [&mut grad], cfg.gradient_clip);
                encoder.apply_step(&grad, cfg.learning_rate);
            }
            BatchMode::Minibatch { size } => {
                batch_rng.shuffle(&mut order);
                for chunk in order.chunks(size) {
                    let ys: Vec<&[f64]> = chunk.iter().map(|&i| train[i]).collect();
                    let ts: Vec<RandomEffects> = chunk.iter().map(|&i| train_truth[i]).collect();
                    let bc = forward_all(&encoder, &standardizer, &ys)?;
                    let (_, mut g) = supervised_accumulate(&encoder, &bc, &ts, precision, true);
                    clip_gradients(&mut [&mut g], cfg.gradient_clip);
                    encoder.apply_step(&g, cfg.learning_rate);
                }
            }
        }
    }
    let effects = effects_of(&encoder, &standardizer, &train)?;
    let covariance = estimate_covariance(&effects, cfg.jitter, cfg.epochs)
        .map_err(|_| Error::DivergenceDetected { epoch: cfg.epochs })?;
    Ok((SupervisedModel { encoder, standardizer, covariance }, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Individual;
    use crate::decoder::FixedEffects;
    use crate::numerics::{cholesky_solve, finite_diff_gradient};
    use crate::simulator::{default_truth, make_ages, simulate};
    use proptest::prelude::*;

    fn cov_of(rows: &[[f64; 3]]) -> CovarianceEstimate {
        estimate_covariance(rows, 1e-6, 0).unwrap()
    }

    #[test]
    fn identical_rows_give_jitter() {
        let c = estimate_covariance(&[[1.0, 2.0, 3.0]; 5], 1e-6, 4).unwrap();
        assert!(c.matrix.max_abs_diff(&SmallMatrix::from_diag(&[1e-6; 3])) < 1e-18);
        assert_eq!(c.epoch, 4);
    }

    #[test]
    fn two_point_variance() {
        let c = estimate_covariance(&[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]], 1e-6, 0).unwrap();
        assert!((c.matrix[(0, 0)] - 2.0 - 1e-6).abs() < 1e-12);
        assert_eq!(c.matrix[(0, 1)], 0.0);
        assert_eq!(c.matrix[(0, 2)], 0.0);
        assert_eq!(c.matrix[(1, 2)], 0.0);
    }

    #[test]
    fn covariance_needs_two_rows() {
        assert!(matches!(
            estimate_covariance(&[[0.0; 3]], 1e-6, 0),
            Err(Error::TooFewIndividuals { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn monte_carlo_covariance() {
        let lambda = default_truth().lambda;
        let l = cholesky_spd(&lambda).unwrap();
        let mut rng = SeededRng::new(11);
        let rows: Vec<[f64; 3]> = (0..100_000)
            .map(|_| {
                let z = [rng.standard_normal(), rng.standard_normal(), rng.standard_normal()];
                let u = l.matvec(&z).unwrap();
                [u[0], u[1], u[2]]
            })
            .collect();
        let c = cov_of(&rows);
        for a in 0..3 {
            for b in 0..3 {
                let scale = (lambda[(a, a)] * lambda[(b, b)]).sqrt();
                let err = (c.matrix[(a, b)] - lambda[(a, b)]).abs() / scale;
                assert!(err < 0.03, "({a},{b}) off by {err}");
            }
        }
    }

    #[test]
    fn penalty_examples() {
        let id = CovarianceEstimate::from_matrix(SmallMatrix::identity(3), 0).unwrap();
        assert_eq!(penalty(&RandomEffects::ZERO, &id), 0.0);
        assert!((penalty(&RandomEffects::new(1.0, 2.0, 3.0), &id) - 14.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_matches_solve() {
        let mut rng = SeededRng::new(5);
        for _ in 0..20 {
            let rows: Vec<[f64; 3]> =
                (0..10).map(|_| [rng.standard_normal(), rng.standard_normal(), rng.standard_normal()]).collect();
            let c = cov_of(&rows);
            let u = [rng.standard_normal(), rng.standard_normal(), rng.standard_normal()];
            let x = cholesky_solve(&cholesky_spd(&c.matrix).unwrap(), &u);
            let direct: f64 = u.iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((penalty(&RandomEffects::from_slice(&u), &c) - direct).abs() < 1e-9 * direct.max(1.0));
        }
    }

    proptest! {
        #[test]
        fn penalty_is_nonnegative(
            rows in prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), 2..20),
            u in prop::array::uniform3(-10.0f64..10.0),
        ) {
            let c = cov_of(&rows);
            prop_assert!(penalty(&RandomEffects::from_slice(&u), &c) >= 0.0);
        }
    }

    fn tiny_setup(seed: u64) -> (EncoderNet, Standardizer, SitarDecoder, Vec<f64>, Vec<Vec<f64>>) {
        let mut rng = SeededRng::new(seed);
        let times = vec![9.0, 12.0, 15.0, 18.0];
        let basis = make_basis(9.0, 18.0, 2, 3, 0.15).unwrap();
        let alpha: Vec<f64> = (0..basis.size()).map(|k| 1.0 + 0.5 * k as f64 + 0.1 * rng.standard_normal()).collect();
        let decoder = SitarDecoder::new(basis, alpha, FixedEffects::default()).unwrap();
        let mut encoder = init_encoder(&[4, 5, 3], &mut rng).unwrap();
        let p: Vec<f64> = encoder.params().iter().map(|w| 0.3 * w).collect();
        encoder.set_params(&p).unwrap();
        encoder.output_map = [[0.5, 0.0, 0.0], [0.1, 0.3, 0.0], [0.0, 0.02, 0.05]];
        let ys: Vec<Vec<f64>> =
            (0..3).map(|_| times.iter().map(|t| 0.2 * t + rng.standard_normal()).collect()).collect();
        let rows: Vec<&[f64]> = ys.iter().map(|y| y.as_slice()).collect();
        let std = Standardizer::fit(&rows).unwrap();
        (encoder, std, decoder, times, ys)
    }

    fn loss_at(
        enc: &EncoderNet,
        std: &Standardizer,
        dec: &SitarDecoder,
        times: &[f64],
        ys: &[Vec<f64>],
        cov: Option<&CovarianceEstimate>,
    ) -> f64 {
        let rows: Vec<&[f64]> = ys.iter().map(|y| y.as_slice()).collect();
        autoencoder_loss(enc, std, dec, times, &rows, cov).unwrap().loss
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (enc, std, dec, times, ys) = tiny_setup(seed);
            let cov = CovarianceEstimate::from_matrix(
                SmallMatrix::from_rows(&[vec![0.5, 0.1, 0.0], vec![0.1, 0.4, 0.02], vec![0.0, 0.02, 0.05]]).unwrap(),
                0,
            )
            .unwrap();
            for c in [None, Some(&cov)] {
                let rows: Vec<&[f64]> = ys.iter().map(|y| y.as_slice()).collect();
                let lg = autoencoder_loss(&enc, &std, &dec, &times, &rows, c).unwrap();
                let f_theta = |p: &[f64]| {
                    let mut e = enc.clone();
                    e.set_params(p).unwrap();
                    loss_at(&e, &std, &dec, &times, &ys, c)
                };
                let fd = finite_diff_gradient(f_theta, &enc.params(), 1e-6).unwrap();
                for (a, b) in lg.grad_encoder.iter().zip(&fd) {
                    assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1.0), "theta {a} vs {b}");
                }
                let f_alpha = |al: &[f64]| {
                    let d = SitarDecoder { alpha: al.to_vec(), ..dec.clone() };
                    loss_at(&enc, &std, &d, &times, &ys, c)
                };
                let fd = finite_diff_gradient(f_alpha, &dec.alpha, 1e-6).unwrap();
                for (a, b) in lg.grad_alpha.iter().zip(&fd) {
                    assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1.0), "alpha {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn covariance_is_a_constant_in_the_gradient() {
        let (enc, std, dec, times, ys) = tiny_setup(2);
        let rows: Vec<&[f64]> = ys.iter().map(|y| y.as_slice()).collect();
        let effects = effects_of(&enc, &std, &rows).unwrap();
        let cov = estimate_covariance(&effects, 1e-3, 0).unwrap();
        let lg = autoencoder_loss(&enc, &std, &dec, &times, &rows, Some(&cov)).unwrap();

        // Same numbers when Λ̂ is handed over as a fresh constant.
        let frozen = CovarianceEstimate::from_matrix(cov.matrix.clone(), 7).unwrap();
        let again = autoencoder_loss(&enc, &std, &dec, &times, &rows, Some(&frozen)).unwrap();
        assert_eq!(lg.grad_encoder, again.grad_encoder);

        // Differentiating through the re-estimated Λ̂ gives something else.
        let through = |p: &[f64]| {
            let mut e = enc.clone();
            e.set_params(p).unwrap();
            let eff = effects_of(&e, &std, &rows).unwrap();
            let c = estimate_covariance(&eff, 1e-3, 0).unwrap();
            loss_at(&e, &std, &dec, &times, &ys, Some(&c))
        };
        let fd = finite_diff_gradient(through, &enc.params(), 1e-6).unwrap();
        let diff: f64 = lg.grad_encoder.iter().zip(&fd).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-3);
    }

    #[test]
    fn self_consistent_data_has_zero_loss() {
        let truth = default_truth();
        let times = make_ages(20).unwrap();
        let mut enc = init_encoder(&[20, 6, 3], &mut SeededRng::new(1)).unwrap();
        let u = RandomEffects::new(1.5, -0.4, 0.05);
        let last = enc.layers.last_mut().unwrap();
        last.weights = SmallMatrix::zeros(3, 6);
        last.bias = u.to_array().to_vec();
        let y = truth.exact_curve(&times, &u);
        let ys = vec![y.clone(), y.clone(), y];
        let std = Standardizer::identity(20);
        let loss = loss_at(&enc, &std, &truth.decoder, &times, &ys, None);
        assert!(loss.abs() < 1e-8, "loss {loss}");
    }

    #[test]
    fn zero_model_loss_is_mean_square() {
        let (mut enc, std, mut dec, times, ys) = tiny_setup(3);
        enc.set_params(&vec![0.0; enc.param_count()]).unwrap();
        dec.alpha.iter_mut().for_each(|a| *a = 0.0);
        let expected = ys.iter().map(|y| y.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / ys.len() as f64;
        let loss = loss_at(&enc, &std, &dec, &times, &ys, None);
        assert!((loss - expected).abs() < 1e-10 * expected);
    }

    #[test]
    fn penalty_never_lowers_the_loss() {
        for seed in 0..10 {
            let (enc, std, dec, times, ys) = tiny_setup(seed);
            let rows: Vec<&[f64]> = ys.iter().map(|y| y.as_slice()).collect();
            let cov = estimate_covariance(&effects_of(&enc, &std, &rows).unwrap(), 1e-6, 0).unwrap();
            let lg = autoencoder_loss(&enc, &std, &dec, &times, &rows, Some(&cov)).unwrap();
            assert!(lg.loss >= lg.reconstruction);
        }
    }

    fn degenerate_dataset(n: usize) -> GrowthDataset {
        let truth = default_truth();
        let times = make_ages(20).unwrap();
        let y = truth.exact_curve(&times, &RandomEffects::ZERO);
        let individuals = (0..n)
            .map(|i| Individual {
                id: i as u64 + 1,
                y: y.clone(),
                split: if i < n * 4 / 5 { Split::Train } else { Split::Validation },
                truth: Some(RandomEffects::ZERO),
            })
            .collect();
        GrowthDataset::new(times, individuals).unwrap()
    }

    #[test]
    fn degenerate_dataset_converges_to_the_mean_curve() {
        let ds = degenerate_dataset(20);
        let arch = Architecture::for_inputs(20);
        let cfg = TrainConfig { epochs: 2000, ..TrainConfig::default() };
        let (model, history) = train_autoencoder(&ds, &arch, &cfg).unwrap();
        assert_eq!(history.len(), 2000);
        for w in history.records[200..].windows(101) {
            assert!(w[100].train_loss <= w[0].train_loss + 1e-6);
        }
        let y = &ds.individuals[0].y;
        let (_, fit) = model.fit_curve(y, &ds.times).unwrap();
        let mse = y.iter().zip(&fit.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
        assert!(mse < 1e-2, "mse {mse}");
    }

    #[test]
    fn zero_epochs_returns_the_initial_model() {
        let ds = simulate(30, &default_truth(), 0.8, &mut SeededRng::new(2)).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (model, history) = train_autoencoder(&ds, &Architecture::for_inputs(20), &cfg).unwrap();
        assert!(history.is_empty());
        let mut rng = SeededRng::new(0);
        let fresh = init_model(&ds, &Architecture::for_inputs(20), &cfg, &mut rng.fork()).unwrap();
        assert_eq!(model, fresh);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = simulate(40, &default_truth(), 0.8, &mut SeededRng::new(3)).unwrap();
        for batch_mode in [BatchMode::Full, BatchMode::Minibatch { size: 8 }] {
            let cfg = TrainConfig { epochs: 60, seed: 9, batch_mode, ..TrainConfig::default() };
            let arch = Architecture::for_inputs(20);
            let (m1, h1) = train_autoencoder(&ds, &arch, &cfg).unwrap();
            let (m2, h2) = train_autoencoder(&ds, &arch, &cfg).unwrap();
            assert_eq!(m1, m2);
            assert_eq!(h1.records.len(), h2.records.len());
            for (a, b) in h1.records.iter().zip(&h2.records) {
                assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
                assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
            }
        }
    }

    #[test]
    fn training_lowers_the_loss() {
        let ds = simulate(60, &default_truth(), 0.8, &mut SeededRng::new(4)).unwrap();
        let cfg = TrainConfig { epochs: 300, ..TrainConfig::default() };
        let (_, h) = train_autoencoder(&ds, &Architecture::for_inputs(20), &cfg).unwrap();
        assert!(h.last().unwrap().train_loss < 0.5 * h.records[0].train_loss);
    }

    #[test]
    fn history_csv_columns() {
        let h = TrainHistory {
            records: vec![EpochRecord { epoch: 0, train_loss: 1.0, val_loss: f64::NAN, ood_count: 2, grad_norm: 0.0 }],
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,train_loss,train_log_loss,val_loss,val_log_loss,ood_count"));
        assert_eq!(lines.next(), Some("0,1,0,NaN,NaN,2"));
    }

    #[test]
    fn supervised_requires_truth() {
        let mut ds = simulate(10, &default_truth(), 0.8, &mut SeededRng::new(1)).unwrap();
        ds.individuals[3].truth = None;
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        assert!(matches!(train_supervised(&ds, &[20, 5, 3], &cfg), Err(Error::MissingGroundTruth)));
    }

    #[test]
    fn supervised_zero_effects_learns_the_zero_map() {
        let mut ds = simulate(40, &default_truth(), 0.8, &mut SeededRng::new(6)).unwrap();
        ds.individuals.iter_mut().for_each(|i| i.truth = Some(RandomEffects::ZERO));
        let cfg = TrainConfig { epochs: 5000, penalty_on: false, learning_rate: 0.05, ..TrainConfig::default() };
        let (_, h) = train_supervised(&ds, &[20, 10, 3], &cfg).unwrap();
        assert!(h.last().unwrap().train_loss < 1e-3, "loss {}", h.last().unwrap().train_loss);
    }

    #[test]
    fn supervised_zero_epochs() {
        let ds = simulate(10, &default_truth(), 0.8, &mut SeededRng::new(1)).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (m, h) = train_supervised(&ds, &[20, 5, 3], &cfg).unwrap();
        assert!(h.is_empty());
        let mut rng = SeededRng::new(0);
        assert_eq!(m.encoder, init_encoder(&[20, 5, 3], &mut rng.fork()).unwrap());
    }
}
