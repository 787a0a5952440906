//! Information-form Gaussians and first-order linearization of factor
//! densities.
//!
//! A canonical Gaussian is `p(x) ∝ exp(-½ xᵀ J x + xᵀ h)`. In the inference
//! loop all canonical quantities are expressed over the *increment* `δx`
//! around a linearization point, so a factor's `h` vanishes whenever its
//! residual vanishes at that point.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, symmetrize};

/// Relative tolerance on negative eigenvalues when checking `J ⪰ 0`.
pub const PSD_TOLERANCE: f64 = 1e-9;

/// Maximum condition number accepted by [`canonical_from_moments`].
pub const MOMENT_MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalGaussian {
    j: DMatrix<f64>,
    h: DVector<f64>,
}

impl CanonicalGaussian {
    /// Builds a canonical Gaussian, symmetrizing `j` and checking it is PSD.
    pub fn new(j: DMatrix<f64>, h: DVector<f64>) -> Result<Self> {
        let g = Self::from_parts(j, h)?;
        let (lo, hi) = linalg::eigen_range(&g.j);
        if lo < -PSD_TOLERANCE * hi.abs().max(1.0) {
            return Err(Error::Domain(format!(
                "precision matrix is not PSD (min eigenvalue {lo:e})"
            )));
        }
        Ok(g)
    }

    /// Builds without the eigenvalue check. Used where PSD-ness holds by
    /// construction (quadratic forms, sums and Schur complements of PSD
    /// blocks).
    pub(crate) fn from_parts(j: DMatrix<f64>, h: DVector<f64>) -> Result<Self> {
        if j.nrows() != j.ncols() {
            return Err(Error::dim(
                "precision matrix (square)",
                j.nrows(),
                j.ncols(),
            ));
        }
        if h.len() != j.nrows() {
            return Err(Error::dim("information vector", j.nrows(), h.len()));
        }
        if !linalg::all_finite(&j) || !linalg::vec_finite(&h) {
            return Err(Error::NonFinite {
                what: "canonical gaussian".into(),
            });
        }
        Ok(Self {
            j: symmetrize(&j),
            h,
        })
    }

    /// The uninformative message over `dim` components.
    pub fn zeros(dim: usize) -> Self {
        Self {
            j: DMatrix::zeros(dim, dim),
            h: DVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.j
    }

    pub fn information(&self) -> &DVector<f64> {
        &self.h
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DVector<f64>) {
        (self.j, self.h)
    }

    pub fn add_assign(&mut self, other: &CanonicalGaussian) {
        self.j += &other.j;
        self.h += &other.h;
    }

    pub fn sub_assign(&mut self, other: &CanonicalGaussian) {
        self.j -= &other.j;
        self.h -= &other.h;
    }

    /// Mean and covariance, failing on a singular precision.
    pub fn to_moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let cov = linalg::spd_inverse_strict(&self.j, MOMENT_MAX_CONDITION, "precision matrix")?;
        let mean = &cov * &self.h;
        Ok((mean, cov))
    }
}

/// `J = cov⁻¹`, `h = J·mean`.
pub fn canonical_from_moments(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<CanonicalGaussian> {
    if cov.nrows() != mean.len() {
        return Err(Error::dim("covariance", mean.len(), cov.nrows()));
    }
    let j = linalg::spd_inverse_strict(cov, MOMENT_MAX_CONDITION, "covariance")?;
    let h = &j * mean;
    CanonicalGaussian::from_parts(j, h)
}

/// A state estimate at which factor Jacobians are evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizationPoint(DVector<f64>);

impl LinearizationPoint {
    pub fn new(x: DVector<f64>) -> Result<Self> {
        if !linalg::vec_finite(&x) {
            return Err(Error::NonFinite {
                what: "linearization point".into(),
            });
        }
        Ok(Self(x))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A map with a Jacobian, evaluated at a point of fixed input dimension.
pub trait DifferentiableMap {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
}

/// `f(x) = A·x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMap(pub DMatrix<f64>);

impl DifferentiableMap for LinearMap {
    fn input_dim(&self) -> usize {
        self.0.ncols()
    }
    fn output_dim(&self) -> usize {
        self.0.nrows()
    }
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.0 * x
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.0.clone()
    }
}

/// Identity on `n` components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityMap(pub usize);

impl DifferentiableMap for IdentityMap {
    fn input_dim(&self) -> usize {
        self.0
    }
    fn output_dim(&self) -> usize {
        self.0
    }
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.0, self.0)
    }
}

fn check_map(
    map: &dyn DifferentiableMap,
    point: &LinearizationPoint,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if point.len() != map.input_dim() {
        return Err(Error::dim(
            "linearization point",
            map.input_dim(),
            point.len(),
        ));
    }
    let value = map.eval(point.as_vector());
    let jac = map.jacobian(point.as_vector());
    if jac.nrows() != map.output_dim() || jac.ncols() != map.input_dim() {
        return Err(Error::dim("jacobian rows", map.output_dim(), jac.nrows()));
    }
    if !linalg::all_finite(&jac) {
        return Err(Error::NonFinite {
            what: "jacobian".into(),
        });
    }
    if !linalg::vec_finite(&value) {
        return Err(Error::NonFinite {
            what: "map value".into(),
        });
    }
    Ok((value, jac))
}

/// Linearizes `p(y | x) ∝ exp(-½ (y - f(x))ᵀ R⁻¹ (y - f(x)))` around `point`:
/// `J = Fᵀ R⁻¹ F`, `h = Fᵀ R⁻¹ (y - f(x̄))`.
pub fn linearize_conditional(
    f: &dyn DifferentiableMap,
    noise: &DMatrix<f64>,
    y: &DVector<f64>,
    point: &LinearizationPoint,
) -> Result<CanonicalGaussian> {
    let (value, jac) = check_map(f, point)?;
    if y.len() != value.len() {
        return Err(Error::dim("observation", value.len(), y.len()));
    }
    if noise.nrows() != y.len() {
        return Err(Error::dim("noise covariance", y.len(), noise.nrows()));
    }
    let r_inv = linalg::spd_inverse_strict(noise, 1e14, "noise covariance R")?;
    let ft_rinv = jac.transpose() * r_inv;
    let j = &ft_rinv * &jac;
    let h = &ft_rinv * (y - value);
    CanonicalGaussian::from_parts(j, h)
}

/// Linearizes a joint factor whose reconstruction map is `g` with factor
/// covariance `S`: `J = Gᵀ S⁻¹ G`, `h = Gᵀ S⁻¹ (x̄ - g(x̄))`, with `G` the
/// Jacobian of `g` at `x̄`.
pub fn linearize_joint(
    g: &dyn DifferentiableMap,
    cov: &DMatrix<f64>,
    point: &LinearizationPoint,
) -> Result<CanonicalGaussian> {
    let (value, jac) = check_map(g, point)?;
    if cov.nrows() != jac.nrows() || cov.ncols() != jac.nrows() {
        return Err(Error::dim("factor covariance S", jac.nrows(), cov.nrows()));
    }
    if value.len() != point.len() {
        return Err(Error::dim("reconstruction", point.len(), value.len()));
    }
    let s_inv = linalg::spd_inverse(cov, "factor covariance S")?;
    let gt_sinv = jac.transpose() * s_inv;
    let j = &gt_sinv * &jac;
    let h = &gt_sinv * (point.as_vector() - value);
    CanonicalGaussian::from_parts(j, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn moments_identity_case() {
        let g = canonical_from_moments(&dvector![0.0], &dmatrix![1.0]).unwrap();
        assert_eq!(g.precision(), &dmatrix![1.0]);
        assert_eq!(g.information(), &dvector![0.0]);
    }

    #[test]
    fn moments_scalar_inverse() {
        let g = canonical_from_moments(&dvector![1.0], &dmatrix![2.0]).unwrap();
        assert!((g.precision()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((g.information()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn moments_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let cov = random_pd(&mut rng, 3);
            let mean = DVector::from_fn(3, |_, _| rng.random_range(-5.0..5.0));
            let g = canonical_from_moments(&mean, &cov).unwrap();
            // independent dense inverse through LU
            let lu_inv = cov.clone().lu().try_inverse().unwrap();
            assert!((g.precision() - &lu_inv).norm() / lu_inv.norm() < 1e-9);
            let (m2, c2) = g.to_moments().unwrap();
            assert!((&m2 - &mean).norm() / mean.norm().max(1.0) < 1e-9);
            assert!((&c2 - &cov).norm() / cov.norm() < 1e-9);
        }
    }

    #[test]
    fn singular_covariance_is_named() {
        let cov = dmatrix![1.0, 1.0; 1.0, 1.0];
        match canonical_from_moments(&dvector![0.0, 0.0], &cov) {
            Err(Error::Singular { what }) => assert_eq!(what, "covariance"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identity_conditional_scalar() {
        let point = LinearizationPoint::new(dvector![0.0]).unwrap();
        let g = linearize_conditional(&IdentityMap(1), &dmatrix![0.01], &dvector![5.0], &point)
            .unwrap();
        assert!((g.precision()[(0, 0)] - 100.0).abs() < 1e-9);
        assert!((g.information()[0] - 500.0).abs() < 1e-9);
    }

    #[test]
    fn zero_residual_gives_zero_information() {
        let map = LinearMap(dmatrix![1.0, -3.0; 0.5, 2.0]);
        let x = dvector![0.3, -1.2];
        let y = map.eval(&x);
        let point = LinearizationPoint::new(x).unwrap();
        let g = linearize_conditional(&map, &dmatrix![0.2, 0.05; 0.05, 0.4], &y, &point).unwrap();
        assert!(g.information().norm() < 1e-12);
    }

    #[test]
    fn linear_conditional_hand_computed() {
        let map = LinearMap(dmatrix![1.0, 2.0]);
        let point = LinearizationPoint::new(dvector![1.0, 1.0]).unwrap();
        let g = linearize_conditional(&map, &dmatrix![1.0], &dvector![3.0], &point).unwrap();
        assert_eq!(g.precision(), &dmatrix![1.0, 2.0; 2.0, 4.0]);
        assert_eq!(g.information(), &dvector![0.0, 0.0]);
    }

    #[test]
    fn identity_conditional_precision_is_exact() {
        let sigma: f64 = 0.1;
        let point = LinearizationPoint::new(dvector![0.2, 0.4, -0.1]).unwrap();
        let r = DMatrix::identity(3, 3) * sigma.powi(2);
        let g =
            linearize_conditional(&IdentityMap(3), &r, &dvector![1.0, 1.0, 1.0], &point).unwrap();
        let expected = DMatrix::identity(3, 3) / sigma.powi(2);
        assert!((g.precision() - expected).norm() < 1e-9);
    }

    #[test]
    fn joint_identity_reconstruction_has_zero_information() {
        let point = LinearizationPoint::new(dvector![1.0, -2.0]).unwrap();
        let g = linearize_joint(&IdentityMap(2), &DMatrix::identity(2, 2), &point).unwrap();
        assert!(g.information().norm() < 1e-15);
    }

    #[test]
    fn joint_projection_hand_computed() {
        // P projects onto span{(1,1)}
        let p = dmatrix![0.5, 0.5; 0.5, 0.5];
        let xbar = dvector![2.0, 0.0];
        let point = LinearizationPoint::new(xbar.clone()).unwrap();
        let g = linearize_joint(&LinearMap(p.clone()), &DMatrix::identity(2, 2), &point).unwrap();
        let j_expected = p.transpose() * &p;
        let h_expected = p.transpose() * (&xbar - &p * &xbar);
        assert!((g.precision() - j_expected).norm() < 1e-14);
        assert!((g.information() - h_expected).norm() < 1e-14);
    }

    #[test]
    fn joint_zero_row_has_no_contribution() {
        // second output never depends on the state
        let a = dmatrix![1.0, 0.0; 0.0, 0.0];
        let point = LinearizationPoint::new(dvector![1.0, 1.0]).unwrap();
        let g = linearize_joint(&LinearMap(a), &DMatrix::identity(2, 2), &point).unwrap();
        assert_eq!(g.precision()[(1, 1)], 0.0);
        assert_eq!(g.precision()[(0, 1)], 0.0);
        assert_eq!(g.information()[1], 0.0);
    }

    #[test]
    fn joint_dimension_mismatch() {
        let point = LinearizationPoint::new(dvector![1.0, 1.0]).unwrap();
        let err = linearize_joint(&IdentityMap(2), &DMatrix::identity(3, 3), &point).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn singular_noise_rejected() {
        let point = LinearizationPoint::new(dvector![0.0]).unwrap();
        let err = linearize_conditional(&IdentityMap(1), &dmatrix![0.0], &dvector![1.0], &point)
            .unwrap_err();
        assert!(matches!(err, Error::Singular { .. }));
    }

    #[test]
    fn non_finite_jacobian_rejected() {
        struct Bad;
        impl DifferentiableMap for Bad {
            fn input_dim(&self) -> usize {
                1
            }
            fn output_dim(&self) -> usize {
                1
            }
            fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
                x.clone()
            }
            fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
                dmatrix![f64::NAN]
            }
        }
        let point = LinearizationPoint::new(dvector![0.0]).unwrap();
        let err = linearize_conditional(&Bad, &dmatrix![1.0], &dvector![1.0], &point).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn random_linearizations_are_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let n_in = rng.random_range(1..6);
            let n_out = rng.random_range(1..6);
            let a = DMatrix::from_fn(n_out, n_in, |_, _| rng.random_range(-2.0..2.0));
            let r = random_pd(&mut rng, n_out);
            let y = DVector::from_fn(n_out, |_, _| rng.random_range(-1.0..1.0));
            let point =
                LinearizationPoint::new(DVector::from_fn(n_in, |_, _| rng.random_range(-1.0..1.0)))
                    .unwrap();
            let g = linearize_conditional(&LinearMap(a), &r, &y, &point).unwrap();
            let j = g.precision();
            assert!((j - j.transpose()).norm() < 1e-10);
            assert!(CanonicalGaussian::new(j.clone(), g.information().clone()).is_ok());
        }
    }
}
