//! Trained model bundle and its on-disk JSON form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{Decoded, RandomEffects, SitarDecoder};
use crate::encoder::{EncoderNet, Standardizer, OUTPUT_DIM};
use crate::error::{Error, Result};
use crate::trainer::{CovarianceEstimate, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

/// Network and spline sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Layer widths from input to output; the last entry is 3.
    pub dims: Vec<usize>,
    pub n_seg: usize,
    pub degree: usize,
    /// Fraction of the age range added on each side of the spline domain.
    pub margin: f64,
    /// Map the decoder Jacobian at zero effects to orthonormal outputs.
    pub precondition_outputs: bool,
    /// Decorrelate standardized inputs with the training-split correlation
    /// plus this ridge; `None` keeps per-coordinate standardization only.
    pub whitening_ridge: Option<f64>,
}

impl Architecture {
    /// Two tanh layers of 30 units, 10 cubic segments, 15 % margin.
    pub fn for_inputs(n_points: usize) -> Self {
        Self {
            dims: vec![n_points, 30, 30, OUTPUT_DIM],
            n_seg: 10,
            degree: 3,
            margin: 0.15,
            precondition_outputs: true,
            whitening_ridge: Some(0.2),
        }
    }

    pub fn with_n_seg(mut self, n_seg: usize) -> Self {
        self.n_seg = n_seg;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidDims(format!("layer widths must be positive, got {:?}", self.dims)));
        }
        if self.dims.last() != Some(&OUTPUT_DIM) {
            return Err(Error::InvalidDims(format!("output width must be {OUTPUT_DIM}, got {:?}", self.dims)));
        }
        if self.n_seg == 0 {
            return Err(Error::InvalidCounts("n_seg must be positive".into()));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be non-negative, got {}", self.margin)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub encoder: EncoderNet,
    pub standardizer: Standardizer,
    pub decoder: SitarDecoder,
    /// Effect covariance at the final parameters.
    pub covariance: CovarianceEstimate,
    pub architecture: Architecture,
    pub config: TrainConfig,
    /// Hash of the truth config the training data came from, if known.
    pub truth_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    #[serde(flatten)]
    model: TrainedModel,
}

impl TrainedModel {
    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn predict_effects(&self, y: &[f64]) -> Result<RandomEffects> {
        self.encoder.encode(&self.standardizer, y)
    }

    /// Effects from the encoder and the curve they imply at `times`.
    pub fn fit_curve(&self, y: &[f64], times: &[f64]) -> Result<(RandomEffects, Decoded)> {
        let u = self.predict_effects(y)?;
        Ok((u, self.decoder.decode(times, &u)))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile { format_version: FORMAT_VERSION, model: self.clone() };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model format version {} (expected {FORMAT_VERSION})",
                file.format_version
            )));
        }
        let m = file.model;
        m.encoder.validate()?;
        if m.standardizer.dim() != m.encoder.input_dim() {
            return Err(Error::DimMismatch { expected: m.encoder.input_dim(), got: m.standardizer.dim() });
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
