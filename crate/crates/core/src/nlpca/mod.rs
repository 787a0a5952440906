//! Nonlinear PCA joint-density models.
//!
//! Only the decoder `x = W2·σ(W1·z + b1) + b2` is a network; the encoder is
//! gradient-descent inversion of the decoder over the observed components,
//! which is what lets a factor impute missing entries. Latent codes of the
//! training samples are learned jointly with the weights.

mod covariance;
mod invert;
mod model;
mod train;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use covariance::{factor_covariance, FactorCovariance};
pub use invert::{invert, Inversion, InvertConfig};
pub use model::{NlpcaModel, Standardizer, TrainingMetadata, MODEL_FORMAT, MODEL_VERSION};
pub use train::{
    masked_loss, masked_loss_gradient, train, Gradient, Optimizer, TrainConfig, TrainOutcome,
};

#[inline]
pub(crate) fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// Latent dimension used for an output of dimension `d`.
pub fn default_latent_dim(d: usize) -> usize {
    d / 2
}

/// Hidden width used for an output of dimension `d`.
pub fn default_hidden_dim(d: usize) -> usize {
    d
}

/// Decoder weight and bias count for the default architecture
/// (`q = ⌊d/2⌋`, `m = d`); trainable latent codes are not counted.
pub fn param_count(d: usize) -> Result<usize> {
    if d == 0 {
        return Err(Error::Domain("output dimension must be positive".into()));
    }
    let q = default_latent_dim(d);
    if q == 0 {
        return Err(Error::Domain(format!(
            "output dimension {d} leaves no latent dimension"
        )));
    }
    let m = default_hidden_dim(d);
    Ok(q * m + m + m * d + d)
}

/// Feed-forward decoder with a sigmoid hidden layer and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderNetwork {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    /// Diagonal of the output noise covariance `R`.
    pub noise: DVector<f64>,
}

/// Latent input of the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode(pub DVector<f64>);

/// Per-component availability of a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilityMask(pub Vec<bool>);

impl AvailabilityMask {
    pub fn full(d: usize) -> Self {
        Self(vec![true; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn observed(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &o)| o)
            .map(|(i, _)| i)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&o| o).count()
    }

    pub fn is_full(&self) -> bool {
        self.0.iter().all(|&o| o)
    }
}

impl DecoderNetwork {
    /// Default architecture for output dimension `d`, with seeded uniform
    /// `±1/√fan_in` weights, zero biases and unit output noise.
    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Result<Self> {
        let q = default_latent_dim(d);
        if q == 0 {
            return Err(Error::Domain(format!(
                "output dimension {d} leaves no latent dimension"
            )));
        }
        Ok(Self::init_with(q, default_hidden_dim(d), d, rng))
    }

    pub fn init_with<R: Rng>(q: usize, m: usize, d: usize, rng: &mut R) -> Self {
        let a1 = 1.0 / (q.max(1) as f64).sqrt();
        let a2 = 1.0 / (m.max(1) as f64).sqrt();
        let w1 = DMatrix::from_fn(m, q, |_, _| rng.random_range(-a1..=a1));
        let w2 = DMatrix::from_fn(d, m, |_, _| rng.random_range(-a2..=a2));
        Self {
            w1,
            b1: DVector::zeros(m),
            w2,
            b2: DVector::zeros(d),
            noise: DVector::from_element(d, 1.0),
        }
    }

    pub fn zeros(q: usize, m: usize, d: usize) -> Self {
        Self {
            w1: DMatrix::zeros(m, q),
            b1: DVector::zeros(m),
            w2: DMatrix::zeros(d, m),
            b2: DVector::zeros(d),
            noise: DVector::from_element(d, 1.0),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn weight_count(&self) -> usize {
        let (q, m, d) = (self.latent_dim(), self.hidden_dim(), self.output_dim());
        q * m + m + m * d + d
    }

    pub fn noise_covariance(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.noise)
    }

    pub fn validate(&self) -> Result<()> {
        let (q, m, d) = (self.latent_dim(), self.hidden_dim(), self.output_dim());
        if self.b1.len() != m {
            return Err(Error::dim("decoder b1", m, self.b1.len()));
        }
        if self.w2.ncols() != m {
            return Err(Error::dim("decoder W2 columns", m, self.w2.ncols()));
        }
        if self.b2.len() != d || self.noise.len() != d {
            return Err(Error::dim(
                "decoder output",
                d,
                self.b2.len().min(self.noise.len()),
            ));
        }
        if q == 0 {
            return Err(Error::Domain("decoder has no latent dimension".into()));
        }
        let finite = self
            .w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                what: "decoder weights".into(),
            });
        }
        if !self.noise.iter().all(|&r| r > 0.0 && r.is_finite()) {
            return Err(Error::Domain(
                "decoder noise covariance must be positive definite".into(),
            ));
        }
        Ok(())
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.latent_dim() {
            return Err(Error::dim("latent code", self.latent_dim(), z.len()));
        }
        Ok(())
    }

    /// Hidden activations `σ(W1·z + b1)` written into `hidden`.
    pub(crate) fn hidden_into(&self, z: &[f64], hidden: &mut [f64]) {
        let m = self.hidden_dim();
        let w1 = self.w1.as_slice();
        hidden.copy_from_slice(self.b1.as_slice());
        for (k, &zk) in z.iter().enumerate() {
            let col = &w1[k * m..(k + 1) * m];
            for (h, &w) in hidden.iter_mut().zip(col) {
                *h += w * zk;
            }
        }
        for h in hidden.iter_mut() {
            *h = sigmoid(*h);
        }
    }

    /// Output `W2·hidden + b2` written into `out`.
    pub(crate) fn output_into(&self, hidden: &[f64], out: &mut [f64]) {
        let d = self.output_dim();
        let w2 = self.w2.as_slice();
        out.copy_from_slice(self.b2.as_slice());
        for (j, &hj) in hidden.iter().enumerate() {
            let col = &w2[j * d..(j + 1) * d];
            for (o, &w) in out.iter_mut().zip(col) {
                *o += w * hj;
            }
        }
    }

    pub fn decode(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_latent(z.as_slice())?;
        let mut hidden = vec![0.0; self.hidden_dim()];
        let mut out = DVector::zeros(self.output_dim());
        self.hidden_into(z.as_slice(), &mut hidden);
        self.output_into(&hidden, out.as_mut_slice());
        Ok(out)
    }

    /// `∂decode/∂z = W2·diag(σ'(W1·z + b1))·W1`, a `d × q` matrix.
    pub fn jacobian(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_latent(z.as_slice())?;
        let mut hidden = vec![0.0; self.hidden_dim()];
        self.hidden_into(z.as_slice(), &mut hidden);
        let slope = DVector::from_iterator(hidden.len(), hidden.iter().map(|s| s * (1.0 - s)));
        let scaled_w1 = DMatrix::from_diagonal(&slope) * &self.w1;
        Ok(&self.w2 * scaled_w1)
    }
}

/// Decodes and then inverts to obtain the full reconstruction `h(h⁻¹(x))`,
/// imputing masked components.
pub fn reconstruct(
    net: &DecoderNetwork,
    x: &DVector<f64>,
    mask: &AvailabilityMask,
    z0: &DVector<f64>,
    config: &InvertConfig,
) -> Result<DVector<f64>> {
    let inv = invert(net, x, mask, z0, config)?;
    net.decode(&inv.code.0)
}
