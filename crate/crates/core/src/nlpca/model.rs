use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{invert, train, AvailabilityMask, DecoderNetwork, InvertConfig, TrainConfig};
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "gridfactor-nlpca";
pub const MODEL_VERSION: u32 = 1;

/// Affine map between physical units and the unit-variance coordinates the
/// decoder is trained in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: DVector<f64>,
    pub scale: DVector<f64>,
}

impl Standardizer {
    /// Mean and standard deviation per column over observed entries.
    /// Constant columns get unit scale.
    pub fn fit(values: &DMatrix<f64>, masks: &[AvailabilityMask]) -> Self {
        let d = values.ncols();
        let mut mean = DVector::zeros(d);
        let mut scale = DVector::from_element(d, 1.0);
        for i in 0..d {
            let obs: Vec<f64> = (0..values.nrows())
                .filter(|&s| masks[s].0[i])
                .map(|s| values[(s, i)])
                .collect();
            if obs.is_empty() {
                continue;
            }
            let mu = obs.iter().sum::<f64>() / obs.len() as f64;
            let var = obs.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / obs.len() as f64;
            mean[i] = mu;
            if var.sqrt() > 1e-12 * mu.abs().max(1.0) {
                scale[i] = var.sqrt();
            }
        }
        Self { mean, scale }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: DVector::zeros(d),
            scale: DVector::from_element(d, 1.0),
        }
    }

    pub fn to_unit(&self, x: &DVector<f64>) -> DVector<f64> {
        (x - &self.mean).component_div(&self.scale)
    }

    pub fn to_physical(&self, u: &DVector<f64>) -> DVector<f64> {
        u.component_mul(&self.scale) + &self.mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub epochs: usize,
    pub samples: usize,
    pub final_rmse: f64,
}

/// A trained decoder together with its unit conversion and the training
/// codes, persisted as versioned JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlpcaModel {
    pub format: String,
    pub version: u32,
    pub network: DecoderNetwork,
    pub standardizer: Standardizer,
    /// Training latent codes, `n × q`.
    pub codes: DMatrix<f64>,
    /// Training samples in unit coordinates, `n × d`.
    pub samples: DMatrix<f64>,
    pub sample_masks: Vec<AvailabilityMask>,
    pub metadata: TrainingMetadata,
}

impl NlpcaModel {
    /// Standardizes `values` (physical units) and trains a decoder on them.
    pub fn fit(
        values: &DMatrix<f64>,
        masks: &[AvailabilityMask],
        config: &TrainConfig,
    ) -> Result<Self> {
        let standardizer = Standardizer::fit(values, masks);
        let mut unit = values.clone();
        for s in 0..values.nrows() {
            for i in 0..values.ncols() {
                unit[(s, i)] = if masks[s].0[i] {
                    (values[(s, i)] - standardizer.mean[i]) / standardizer.scale[i]
                } else {
                    0.0
                };
            }
        }
        let outcome = train(&unit, masks, config)?;
        Ok(Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            network: outcome.network,
            standardizer,
            codes: outcome.codes,
            samples: unit,
            sample_masks: masks.to_vec(),
            metadata: TrainingMetadata {
                seed: config.seed,
                epochs: config.epochs,
                samples: values.nrows(),
                final_rmse: outcome.rmse,
            },
        })
    }

    /// Untrained all-zero model of the default shape for output `d`.
    pub fn placeholder(d: usize) -> Self {
        let q = super::default_latent_dim(d);
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            network: DecoderNetwork::zeros(q, super::default_hidden_dim(d), d),
            standardizer: Standardizer::identity(d),
            codes: DMatrix::zeros(0, q),
            samples: DMatrix::zeros(0, d),
            sample_masks: Vec::new(),
            metadata: TrainingMetadata {
                seed: 0,
                epochs: 0,
                samples: 0,
                final_rmse: f64::NAN,
            },
        }
    }

    pub fn output_dim(&self) -> usize {
        self.network.output_dim()
    }

    /// Code of the training sample closest to `unit` over the components
    /// observed in both; zero when there are no training samples.
    pub fn nearest_code(&self, unit: &DVector<f64>, mask: &AvailabilityMask) -> DVector<f64> {
        let q = self.network.latent_dim();
        let mut best = None;
        let mut best_dist = f64::INFINITY;
        for s in 0..self.samples.nrows() {
            let mut dist = 0.0;
            let mut shared = 0;
            for i in mask.observed() {
                if self.sample_masks[s].0[i] {
                    dist += (self.samples[(s, i)] - unit[i]).powi(2);
                    shared += 1;
                }
            }
            if shared == 0 {
                continue;
            }
            let dist = dist / shared as f64;
            if dist < best_dist {
                best_dist = dist;
                best = Some(s);
            }
        }
        match best {
            Some(s) => DVector::from_iterator(q, self.codes.row(s).iter().cloned()),
            None => DVector::zeros(q),
        }
    }

    /// Reconstruction in physical units with masked components imputed.
    pub fn reconstruct(
        &self,
        x: &DVector<f64>,
        mask: &AvailabilityMask,
        config: &InvertConfig,
    ) -> Result<DVector<f64>> {
        if x.len() != self.output_dim() {
            return Err(Error::dim(
                "reconstruction input",
                self.output_dim(),
                x.len(),
            ));
        }
        let unit = self.standardizer.to_unit(&masked_copy(x, mask));
        let z0 = self.nearest_code(&unit, mask);
        let inv = invert(&self.network, &unit, mask, &z0, config)?;
        Ok(self
            .standardizer
            .to_physical(&self.network.decode(&inv.code.0)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let model: Self = serde_json::from_str(&text)?;
        model.check_version()?;
        Ok(model)
    }

    pub fn check_version(&self) -> Result<()> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, found {} v{}",
                self.format, self.version
            )));
        }
        self.network.validate()
    }
}

/// Copy of `x` with masked entries zeroed so no stray value leaks through.
pub(crate) fn masked_copy(x: &DVector<f64>, mask: &AvailabilityMask) -> DVector<f64> {
    DVector::from_iterator(
        x.len(),
        x.iter()
            .zip(&mask.0)
            .map(|(&v, &o)| if o { v } else { 0.0 }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlpca::Optimizer;

    fn arc_data(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, 2, |s, j| {
            let t = std::f64::consts::FRAC_PI_2 * s as f64 / (n - 1) as f64;
            if j == 0 {
                t.cos()
            } else {
                t.sin()
            }
        })
    }

    #[test]
    fn circle_arc_masked_coordinate_is_recovered() {
        let values = arc_data(200);
        let masks = vec![AvailabilityMask::full(2); 200];
        let config = TrainConfig {
            epochs: 2000,
            seed: 3,
            ..TrainConfig::default()
        };
        let model = NlpcaModel::fit(&values, &masks, &config).unwrap();
        let mut err = 0.0;
        let inv = InvertConfig::default();
        let mask = AvailabilityMask(vec![true, false]);
        for s in 0..200 {
            let x = DVector::from_iterator(2, values.row(s).iter().cloned());
            let rec = model.reconstruct(&x, &mask, &inv).unwrap();
            err += (rec[1] - x[1]).powi(2);
        }
        let rmse = (err / 200.0).sqrt();
        assert!(rmse < 0.05, "masked-coordinate rmse {rmse}");
    }

    #[test]
    fn single_observed_coordinate_still_reconstructs() {
        let values = arc_data(50);
        let masks = vec![AvailabilityMask::full(2); 50];
        let model = NlpcaModel::fit(
            &values,
            &masks,
            &TrainConfig {
                epochs: 100,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let rec = model
            .reconstruct(
                &DVector::from_vec(vec![0.5, f64::NAN]),
                &AvailabilityMask(vec![true, false]),
                &InvertConfig::default(),
            )
            .unwrap();
        assert_eq!(rec.len(), 2);
        assert!(rec.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn persistence_round_trip_and_version_check() {
        let values = arc_data(20);
        let masks = vec![AvailabilityMask::full(2); 20];
        let config = TrainConfig {
            epochs: 20,
            optimizer: Optimizer::GradientDescent { growth: 1.0 },
            ..TrainConfig::default()
        };
        let model = NlpcaModel::fit(&values, &masks, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save(&path).unwrap();
        let back = NlpcaModel::load(&path).unwrap();
        assert_eq!(back.network, model.network);
        let mut bad = model.clone();
        bad.version = 99;
        bad.save(&path).unwrap();
        assert!(matches!(NlpcaModel::load(&path), Err(Error::Format(_))));
    }
}
