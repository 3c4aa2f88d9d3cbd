//! Fully connected encoder mapping a standardized measurement vector to
//! the three random effects.
//!
//! Parameters are addressed through one flat vector: for each layer, the
//! weight matrix in row-major (out × in) order followed by its bias.

use serde::{Deserialize, Serialize};

use crate::decoder::RandomEffects;
use crate::error::{Error, Result};
use crate::numerics::{cholesky_spd, SeededRng, SmallMatrix};

pub const OUTPUT_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: SmallMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }
}

/// Per-coordinate input centering and scaling, fitted on the training split,
/// optionally followed by a fixed lower-triangular decorrelating map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// W = L⁻¹ where LLᵀ is the correlation matrix of the standardized
    /// training rows; applied as x ↦ W x.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub whitening: Option<SmallMatrix>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], sd: vec![1.0; dim], whitening: None }
    }

    /// `fit` followed by Cholesky decorrelation of the standardized rows
    /// using the correlation matrix plus `ridge·I`. The ridge caps how far
    /// low-variance (noise) directions are amplified. Falls back to plain
    /// standardization when the result is singular.
    pub fn fit_whitened(rows: &[&[f64]], ridge: f64) -> Result<Self> {
        let mut std = Self::fit(rows)?;
        let dim = std.dim();
        if rows.len() < 2 || !(ridge.is_finite() && ridge >= 0.0) {
            return Ok(std);
        }
        let z: Vec<Vec<f64>> = rows.iter().map(|r| std.apply(r)).collect::<Result<_>>()?;
        let mut corr = SmallMatrix::zeros(dim, dim);
        for r in &z {
            for a in 0..dim {
                for b in 0..=a {
                    corr[(a, b)] += r[a] * r[b];
                }
            }
        }
        let denom = (rows.len() - 1) as f64;
        for a in 0..dim {
            for b in 0..=a {
                let v = corr[(a, b)] / denom;
                corr[(a, b)] = v;
                corr[(b, a)] = v;
            }
            corr[(a, a)] += ridge;
        }
        let Ok(l) = cholesky_spd(&corr) else { return Ok(std) };
        let mut w = SmallMatrix::zeros(dim, dim);
        for c in 0..dim {
            for r in c..dim {
                let mut v = if r == c { 1.0 } else { 0.0 };
                for k in c..r {
                    v -= l[(r, k)] * w[(k, c)];
                }
                w[(r, c)] = v / l[(r, r)];
            }
        }
        if w.as_slice().iter().all(|v| v.is_finite()) {
            std.whitening = Some(w);
        }
        Ok(std)
    }

    /// Column means and sample standard deviations; a zero or non-finite
    /// sd is replaced by 1.
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).ok_or(Error::EmptySplit("train"))?;
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimMismatch { expected: dim, got: bad.len() });
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut sd = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in sd.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in sd.iter_mut() {
            *s = if rows.len() > 1 { (*s / (n - 1.0)).sqrt() } else { 0.0 };
            if !(s.is_finite() && *s > 0.0) {
                *s = 1.0;
            }
        }
        Ok(Self { mean, sd, whitening: None })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.dim() {
            return Err(Error::DimMismatch { expected: self.dim(), got: y.len() });
        }
        let z: Vec<f64> = y.iter().zip(&self.mean).zip(&self.sd).map(|((v, m), s)| (v - m) / s).collect();
        match &self.whitening {
            None => Ok(z),
            Some(w) => Ok((0..z.len()).map(|r| w.row(r)[..=r].iter().zip(&z).map(|(a, b)| a * b).sum()).collect()),
        }
    }
}

pub type OutputMap = [[f64; OUTPUT_DIM]; OUTPUT_DIM];

fn identity_map() -> OutputMap {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

fn apply_map(m: &OutputMap, z: &[f64]) -> [f64; OUTPUT_DIM] {
    let mut u = [0.0; OUTPUT_DIM];
    for (ui, row) in u.iter_mut().zip(m) {
        *ui = row.iter().zip(z).map(|(a, b)| a * b).sum();
    }
    u
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderNet {
    pub layers: Vec<DenseLayer>,
    /// Fixed 3×3 matrix M applied to the last layer's output z, giving
    /// (a1, b1, c1) = M z. Not trained.
    #[serde(default = "identity_map")]
    pub output_map: OutputMap,
}

/// Activations of every layer for one input, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the standardized input; `activations[l + 1]` is
    /// the output of layer l.
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self, net: &EncoderNet) -> RandomEffects {
        let z = self.activations.last().expect("non-empty cache");
        let u = apply_map(&net.output_map, z);
        RandomEffects::new(u[0], u[1], u[2])
    }
}

/// Glorot-uniform weights, zero biases; tanh on hidden layers and a
/// linear output layer.
pub fn init_encoder(dims: &[usize], rng: &mut SeededRng) -> Result<EncoderNet> {
    if dims.len() < 2 {
        return Err(Error::InvalidDims(format!("need at least input and output sizes, got {dims:?}")));
    }
    if *dims.last().unwrap() != OUTPUT_DIM {
        return Err(Error::InvalidDims(format!("output size must be {OUTPUT_DIM}, got {dims:?}")));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidDims(format!("layer sizes must be positive, got {dims:?}")));
    }
    let n_layers = dims.len() - 1;
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.uniform_range(-limit, limit)).collect();
            DenseLayer {
                weights: SmallMatrix::new(fan_out, fan_in, data).expect("shape is consistent"),
                bias: vec![0.0; fan_out],
                activation: if l + 1 == n_layers { Activation::Linear } else { Activation::Tanh },
            }
        })
        .collect();
    Ok(EncoderNet { layers, output_map: identity_map() })
}

impl EncoderNet {
    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(DenseLayer::output_dim)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Checks layer chaining, output size and final activation.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidDims("encoder has no layers".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::InvalidDims("adjacent layer sizes do not chain".into()));
            }
        }
        for layer in &self.layers {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::InvalidDims("bias length differs from layer width".into()));
            }
        }
        let last = self.layers.last().unwrap();
        if last.output_dim() != OUTPUT_DIM || last.activation != Activation::Linear {
            return Err(Error::InvalidDims("final layer must be linear with 3 outputs".into()));
        }
        if self.output_map.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDims("output map must be finite".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimMismatch { expected: self.param_count(), got: flat.len() });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.rows() * layer.weights.cols();
            layer.weights.as_mut_slice().copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// θ ← θ − step·grad, in flat layout.
    pub(crate) fn apply_step(&mut self, grad: &[f64], step: f64) {
        debug_assert_eq!(grad.len(), self.param_count());
        let mut offset = 0;
        for layer in &mut self.layers {
            for w in layer.weights.as_mut_slice() {
                *w -= step * grad[offset];
                offset += 1;
            }
            for b in layer.bias.iter_mut() {
                *b -= step * grad[offset];
                offset += 1;
            }
        }
    }

    pub fn forward(&self, std: &Standardizer, y: &[f64]) -> Result<ForwardCache> {
        if y.len() != self.input_dim() {
            return Err(Error::DimMismatch { expected: self.input_dim(), got: y.len() });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(std.apply(y)?);
        for layer in &self.layers {
            let input = activations.last().unwrap();
            let out = (0..layer.output_dim())
                .map(|i| {
                    let pre: f64 =
                        layer.weights.row(i).iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + layer.bias[i];
                    layer.activation.apply(pre)
                })
                .collect();
            activations.push(out);
        }
        Ok(ForwardCache { activations })
    }

    pub fn encode(&self, std: &Standardizer, y: &[f64]) -> Result<RandomEffects> {
        Ok(self.forward(std, y)?.output(self))
    }

    /// Adds ∂⟨upstream, encode(y)⟩/∂θ into `grad` (flat layout).
    pub fn backward_into(&self, cache: &ForwardCache, upstream: [f64; OUTPUT_DIM], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.param_count());
        let mut delta: Vec<f64> = (0..OUTPUT_DIM)
            .map(|k| (0..OUTPUT_DIM).map(|i| self.output_map[i][k] * upstream[i]).sum())
            .collect();
        // Offsets of each layer's block in the flat vector.
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for layer in &self.layers {
            offsets.push(offset);
            offset += layer.param_count();
        }
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let out = &cache.activations[l + 1];
            let input = &cache.activations[l];
            for (d, o) in delta.iter_mut().zip(out) {
                *d *= layer.activation.derivative_from_output(*o);
            }
            let (n_out, n_in) = (layer.output_dim(), layer.input_dim());
            let base = offsets[l];
            for i in 0..n_out {
                let di = delta[i];
                if di == 0.0 {
                    continue;
                }
                let row = &mut grad[base + i * n_in..base + (i + 1) * n_in];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += di * x;
                }
                grad[base + n_out * n_in + i] += di;
            }
            if l > 0 {
                let mut next = vec![0.0; n_in];
                for i in 0..n_out {
                    let di = delta[i];
                    for (nx, w) in next.iter_mut().zip(layer.weights.row(i)) {
                        *nx += di * w;
                    }
                }
                delta = next;
            }
        }
    }

    /// Gradient of ⟨upstream, encode(y)⟩ with respect to every parameter.
    pub fn encode_backward(
        &self,
        std: &Standardizer,
        y: &[f64],
        upstream: [f64; OUTPUT_DIM],
    ) -> Result<Vec<f64>> {
        let cache = self.forward(std, y)?;
        let mut grad = vec![0.0; self.param_count()];
        self.backward_into(&cache, upstream, &mut grad);
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_gradient;

    fn random_input(rng: &mut SeededRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| 150.0 + 8.0 * rng.standard_normal()).collect()
    }

    /// Forward pass written independently of `EncoderNet::forward`.
    fn reference_forward(net: &EncoderNet, std: &Standardizer, y: &[f64]) -> [f64; 3] {
        let mut x: Vec<f64> = y.iter().enumerate().map(|(i, v)| (v - std.mean[i]) / std.sd[i]).collect();
        for layer in &net.layers {
            let w = &layer.weights;
            let xm = SmallMatrix::new(x.len(), 1, x.clone()).unwrap();
            let pre = w.matmul(&xm).unwrap();
            x = (0..w.rows())
                .map(|i| {
                    let v = pre[(i, 0)] + layer.bias[i];
                    if layer.activation == Activation::Tanh { v.tanh() } else { v }
                })
                .collect();
        }
        let m = &net.output_map;
        [
            m[0][0] * x[0] + m[0][1] * x[1] + m[0][2] * x[2],
            m[1][0] * x[0] + m[1][1] * x[1] + m[1][2] * x[2],
            m[2][0] * x[0] + m[2][1] * x[1] + m[2][2] * x[2],
        ]
    }

    #[test]
    fn parameter_counts() {
        let mut rng = SeededRng::new(0);
        let net = init_encoder(&[20, 30, 30, 3], &mut rng).unwrap();
        assert_eq!(net.param_count(), (20 * 30 + 30) + (30 * 30 + 30) + (30 * 3 + 3));
        assert_eq!(net.param_count(), 1653);
        assert_eq!(net.dims(), vec![20, 30, 30, 3]);
        assert_eq!(net.layers[0].activation, Activation::Tanh);
        assert_eq!(net.layers[2].activation, Activation::Linear);
        let single = init_encoder(&[4, 3], &mut rng).unwrap();
        assert_eq!(single.param_count(), 15);
        assert_eq!(single.layers[0].activation, Activation::Linear);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_encoder(&[20, 30, 30, 3], &mut SeededRng::new(7)).unwrap();
        let b = init_encoder(&[20, 30, 30, 3], &mut SeededRng::new(7)).unwrap();
        assert_eq!(a, b);
        let limit = (6.0f64 / 50.0).sqrt();
        assert!(a.layers[0].weights.as_slice().iter().all(|w| w.abs() <= limit));
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn invalid_dims_are_rejected() {
        let mut rng = SeededRng::new(0);
        assert!(matches!(init_encoder(&[3], &mut rng), Err(Error::InvalidDims(_))));
        assert!(matches!(init_encoder(&[20, 30, 2], &mut rng), Err(Error::InvalidDims(_))));
        assert!(matches!(init_encoder(&[20, 0, 3], &mut rng), Err(Error::InvalidDims(_))));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut net = init_encoder(&[20, 30, 30, 3], &mut SeededRng::new(1)).unwrap();
        net.set_params(&vec![0.0; net.param_count()]).unwrap();
        let re = net.encode(&Standardizer::identity(20), &[150.0; 20]).unwrap();
        assert_eq!(re, RandomEffects::ZERO);
    }

    #[test]
    fn linear_identity_selects_inputs() {
        let mut net = init_encoder(&[4, 3], &mut SeededRng::new(1)).unwrap();
        let mut w = SmallMatrix::zeros(3, 4);
        w[(0, 0)] = 1.0;
        w[(1, 2)] = 1.0;
        w[(2, 3)] = 1.0;
        net.layers[0].weights = w;
        let re = net.encode(&Standardizer::identity(4), &[1.5, -2.0, 3.25, 0.5]).unwrap();
        assert_eq!(re, RandomEffects::new(1.5, 3.25, 0.5));
    }

    #[test]
    fn dimension_mismatch() {
        let net = init_encoder(&[4, 3], &mut SeededRng::new(1)).unwrap();
        let std = Standardizer::identity(4);
        assert!(matches!(net.encode(&std, &[1.0; 5]), Err(Error::DimMismatch { expected: 4, got: 5 })));
        assert!(net.encode_backward(&std, &[1.0; 3], [1.0; 3]).is_err());
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = SeededRng::new(12);
        let mut net = init_encoder(&[20, 30, 30, 3], &mut rng).unwrap();
        net.output_map = [[2.0, 0.3, 0.0], [-0.1, 0.5, 0.0], [0.0, 0.02, 0.1]];
        let rows: Vec<Vec<f64>> = (0..30).map(|_| random_input(&mut rng, 20)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let std = Standardizer::fit(&refs).unwrap();
        for y in &rows {
            let got = net.encode(&std, y).unwrap().to_array();
            let want = reference_forward(&net, &std, y);
            for k in 0..3 {
                assert!((got[k] - want[k]).abs() < 1e-12);
            }
            assert_eq!(net.encode(&std, y).unwrap(), net.encode(&std, y).unwrap());
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = SeededRng::new(2);
        let net = init_encoder(&[6, 5, 3], &mut rng).unwrap();
        let g = net.encode_backward(&Standardizer::identity(6), &random_input(&mut rng, 6), [0.0; 3]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let mut rng = SeededRng::new(2);
        let net = init_encoder(&[4, 3], &mut rng).unwrap();
        let std = Standardizer { mean: vec![1.0; 4], sd: vec![2.0; 4], whitening: None };
        let y = [3.0, 5.0, -1.0, 1.0];
        let x = std.apply(&y).unwrap();
        let up = [0.5, -1.0, 2.0];
        let g = net.encode_backward(&std, &y, up).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((g[i * 4 + j] - up[i] * x[j]).abs() < 1e-15);
            }
            assert_eq!(g[12 + i], up[i]);
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = SeededRng::new(31);
        for case in 0..50 {
            let dims = if case % 2 == 0 { vec![20, 30, 30, 3] } else { vec![5, 7, 3] };
            let mut net = init_encoder(&dims, &mut rng).unwrap();
            // Non-zero biases so every path is exercised.
            let mut p = net.params();
            p.iter_mut().for_each(|v| *v += 0.1 * rng.standard_normal());
            net.set_params(&p).unwrap();
            net.output_map = [
                [1.0 + rng.uniform(), 0.0, 0.0],
                [rng.standard_normal(), 0.5, 0.0],
                [rng.standard_normal(), rng.standard_normal(), 0.05 + rng.uniform()],
            ];
            let y: Vec<f64> = (0..dims[0]).map(|_| rng.standard_normal()).collect();
            let std = Standardizer::identity(dims[0]);
            let up = [rng.standard_normal(), rng.standard_normal(), rng.standard_normal()];
            let analytic = net.encode_backward(&std, &y, up).unwrap();
            let objective = |theta: &[f64]| {
                let mut probe = net.clone();
                probe.set_params(theta).unwrap();
                let out = probe.encode(&std, &y).unwrap().to_array();
                (0..3).map(|k| up[k] * out[k]).sum()
            };
            let numeric = finite_diff_gradient(objective, &p, 1e-6).unwrap();
            let max_err = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
                .fold(0.0, f64::max);
            assert!(max_err < 1e-5, "case {case}: {max_err}");
        }
    }

    #[test]
    fn output_perturbation_is_lipschitz_bounded() {
        let mut rng = SeededRng::new(44);
        let net = init_encoder(&[20, 30, 30, 3], &mut rng).unwrap();
        let std = Standardizer::identity(20);
        // ∞-norm Lipschitz constant of tanh layers: product of max row sums of |W|.
        let lip: f64 = net
            .layers
            .iter()
            .map(|l| (0..l.output_dim()).map(|i| l.weights.row(i).iter().map(|w| w.abs()).sum::<f64>()).fold(0.0, f64::max))
            .product();
        for _ in 0..100 {
            let y: Vec<f64> = (0..20).map(|_| rng.standard_normal()).collect();
            let dy: Vec<f64> = (0..20).map(|_| 0.01 * rng.standard_normal()).collect();
            let y2: Vec<f64> = y.iter().zip(&dy).map(|(a, b)| a + b).collect();
            let a = net.encode(&std, &y).unwrap().to_array();
            let b = net.encode(&std, &y2).unwrap().to_array();
            let out = (0..3).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max);
            let inp = dy.iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(out <= lip * inp + 1e-12);
        }
    }

    #[test]
    fn standardizer_fit_and_degenerate_columns() {
        let rows = [vec![1.0, 5.0], vec![3.0, 5.0]];
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let s = Standardizer::fit(&refs).unwrap();
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert!((s.sd[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.sd[1], 1.0);
        assert!(Standardizer::fit(&[]).is_err());
    }

    #[test]
    fn params_round_trip() {
        let mut rng = SeededRng::new(3);
        let net = init_encoder(&[5, 4, 3], &mut rng).unwrap();
        let mut other = init_encoder(&[5, 4, 3], &mut rng).unwrap();
        other.set_params(&net.params()).unwrap();
        assert_eq!(other, net);
        assert!(other.set_params(&[0.0; 3]).is_err());
        net.validate().unwrap();
    }
}
