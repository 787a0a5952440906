use nalgebra::{DMatrix, DVector};

use super::{AvailabilityMask, DecoderNetwork};
use crate::error::{Error, Result};
use crate::linalg;

/// Gaussian approximation of an NLPCA factor around a latent solution.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorCovariance {
    /// `S_z = (H̃ᵀ R̃⁻¹ H̃)⁻¹`, `q × q`.
    pub latent: DMatrix<f64>,
    /// `Σ = H S_z Hᵀ + R`, `d × d`.
    pub output: DMatrix<f64>,
    /// Sensitivity of the reconstruction to the inputs,
    /// `G = H S_z H̃ᵀ R̃⁻¹`; masked input columns are zero.
    pub sensitivity: DMatrix<f64>,
    /// Full decoder Jacobian `H` at the solution.
    pub jacobian: DMatrix<f64>,
}

/// Latent and output-space covariances of an NLPCA factor at `z`, using
/// only the observed rows of the decoder Jacobian.
pub fn factor_covariance(
    net: &DecoderNetwork,
    z: &DVector<f64>,
    mask: &AvailabilityMask,
) -> Result<FactorCovariance> {
    let d = net.output_dim();
    if mask.len() != d {
        return Err(Error::dim("availability mask", d, mask.len()));
    }
    let h = net.jacobian(z)?;
    let observed: Vec<usize> = mask.observed().collect();
    if observed.is_empty() {
        return Err(Error::Degenerate("no observed components".into()));
    }
    let q = net.latent_dim();
    let all_latent: Vec<usize> = (0..q).collect();
    let h_obs = linalg::sub_block(&h, &observed, &all_latent);
    // H̃ᵀ R̃⁻¹ with a diagonal R
    let mut ht_rinv = h_obs.transpose();
    for (col, &i) in observed.iter().enumerate() {
        let w = 1.0 / net.noise[i];
        ht_rinv.column_mut(col).scale_mut(w);
    }
    let info = &ht_rinv * &h_obs;
    if !(info.trace() > 0.0) {
        return Err(Error::Degenerate(
            "observed rows of the decoder jacobian are all zero".into(),
        ));
    }
    let latent = linalg::spd_inverse(&info, "latent information H̃ᵀR̃⁻¹H̃").map_err(|e| match e {
        Error::Singular { what } => Error::Degenerate(what),
        other => other,
    })?;
    let output = linalg::symmetrize(&(&h * &latent * h.transpose() + net.noise_covariance()));
    let gain = &h * &latent * &ht_rinv;
    let mut sensitivity = DMatrix::zeros(d, d);
    for (col, &i) in observed.iter().enumerate() {
        sensitivity.set_column(i, &gain.column(col));
    }
    Ok(FactorCovariance {
        latent,
        output,
        sensitivity,
        jacobian: h,
    })
}
