use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{AvailabilityMask, DecoderNetwork, LatentCode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertConfig {
    pub steps: usize,
    pub lr: f64,
    /// Step-size multiplier after an accepted step.
    pub growth: f64,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
    /// Consecutive rejected steps after which the current code is returned.
    pub max_rejections: usize,
    /// Damped Gauss-Newton steps run after gradient descent.
    #[serde(default)]
    pub refine_steps: usize,
}

impl Default for InvertConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.05,
            growth: 1.2,
            tolerance: 1e-10,
            max_rejections: 30,
            refine_steps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    pub code: LatentCode,
    /// Final noise-weighted mean squared error over the observed components.
    pub loss: f64,
    pub steps: usize,
}

struct Workspace {
    hidden: Vec<f64>,
    out: Vec<f64>,
    delta_h: Vec<f64>,
    grad: Vec<f64>,
}

/// Loss and (optionally) gradient at `z`. Masked components are skipped
/// entirely, so their values in `x` never reach the arithmetic.
fn loss_grad(
    net: &DecoderNetwork,
    x: &[f64],
    observed: &[usize],
    weights: &[f64],
    z: &[f64],
    ws: &mut Workspace,
    with_grad: bool,
) -> f64 {
    let (q, m, d) = (net.latent_dim(), net.hidden_dim(), net.output_dim());
    net.hidden_into(z, &mut ws.hidden);
    let w2 = net.w2.as_slice();
    let b2 = net.b2.as_slice();
    let mut loss = 0.0;
    // output only at observed rows
    for (slot, &i) in observed.iter().enumerate() {
        let mut y = b2[i];
        for j in 0..m {
            y += w2[i + j * d] * ws.hidden[j];
        }
        let r = y - x[i];
        ws.out[slot] = r;
        loss += weights[slot] * r * r;
    }
    if !with_grad {
        return loss;
    }
    // δh_j = Σ_i 2 w_i r_i W2[i, j] · σ'(a_j)
    for j in 0..m {
        let mut acc = 0.0;
        for (slot, &i) in observed.iter().enumerate() {
            acc += 2.0 * weights[slot] * ws.out[slot] * w2[i + j * d];
        }
        let s = ws.hidden[j];
        ws.delta_h[j] = acc * s * (1.0 - s);
    }
    let w1 = net.w1.as_slice();
    for k in 0..q {
        let col = &w1[k * m..(k + 1) * m];
        ws.grad[k] = col.iter().zip(&ws.delta_h).map(|(w, dh)| w * dh).sum();
    }
    loss
}

/// Finds the latent code whose decoding best matches the observed part of
/// `x`, by gradient descent on the noise-weighted squared error with the
/// decoder weights fixed.
///
/// Rejected steps (loss increase) halve the step size; accepted ones grow
/// it by `config.growth`.
pub fn invert(
    net: &DecoderNetwork,
    x: &DVector<f64>,
    mask: &AvailabilityMask,
    z0: &DVector<f64>,
    config: &InvertConfig,
) -> Result<Inversion> {
    let (q, m, d) = (net.latent_dim(), net.hidden_dim(), net.output_dim());
    if x.len() != d {
        return Err(Error::dim("inversion target", d, x.len()));
    }
    if mask.len() != d {
        return Err(Error::dim("availability mask", d, mask.len()));
    }
    if z0.len() != q {
        return Err(Error::dim("initial latent code", q, z0.len()));
    }
    let observed: Vec<usize> = mask.observed().collect();
    if observed.is_empty() {
        return Err(Error::Domain(
            "inversion needs at least one observed component".into(),
        ));
    }
    let raw: Vec<f64> = observed.iter().map(|&i| 1.0 / net.noise[i]).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();

    let mut ws = Workspace {
        hidden: vec![0.0; m],
        out: vec![0.0; observed.len()],
        delta_h: vec![0.0; m],
        grad: vec![0.0; q],
    };
    let xs = x.as_slice();
    let mut z: Vec<f64> = z0.iter().cloned().collect();
    let mut loss = loss_grad(net, xs, &observed, &weights, &z, &mut ws, true);
    let mut grad = ws.grad.clone();
    let mut lr = config.lr;
    let mut rejections = 0;
    let mut trace = vec![loss];
    let mut candidate = vec![0.0; q];
    let mut steps = 0;

    while steps < config.steps {
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Inversion {
                steps,
                trace: tail(&trace),
            });
        }
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < config.tolerance || rejections >= config.max_rejections {
            break;
        }
        steps += 1;
        for k in 0..q {
            candidate[k] = z[k] - lr * grad[k];
        }
        let new_loss = loss_grad(net, xs, &observed, &weights, &candidate, &mut ws, true);
        if new_loss <= loss {
            z.copy_from_slice(&candidate);
            loss = new_loss;
            grad.copy_from_slice(&ws.grad);
            lr *= config.growth;
            rejections = 0;
            trace.push(loss);
        } else if !new_loss.is_finite() && lr < 1e-300 {
            return Err(Error::Inversion {
                steps,
                trace: tail(&trace),
            });
        } else {
            lr *= 0.5;
            rejections += 1;
        }
    }
    if config.refine_steps > 0 && loss > 0.0 {
        loss = refine(
            net,
            xs,
            &observed,
            &weights,
            &mut z,
            loss,
            config.refine_steps,
            &mut ws,
        );
    }
    Ok(Inversion {
        code: LatentCode(DVector::from_vec(z)),
        loss,
        steps,
    })
}

/// Unweighted Levenberg-Marquardt refinement of one code; returns the mean
/// squared error over `observed`.
pub(super) fn refine_code(
    net: &DecoderNetwork,
    x: &[f64],
    observed: &[usize],
    z: &mut [f64],
    steps: usize,
) -> f64 {
    let weights = vec![1.0 / observed.len() as f64; observed.len()];
    let mut ws = Workspace {
        hidden: vec![0.0; net.hidden_dim()],
        out: vec![0.0; observed.len()],
        delta_h: vec![0.0; net.hidden_dim()],
        grad: vec![0.0; net.latent_dim()],
    };
    let loss = loss_grad(net, x, observed, &weights, z, &mut ws, false);
    refine(net, x, observed, &weights, z, loss, steps, &mut ws)
}

/// Levenberg-Marquardt on the weighted residual, starting from `z`.
#[allow(clippy::too_many_arguments)]
fn refine(
    net: &DecoderNetwork,
    x: &[f64],
    observed: &[usize],
    weights: &[f64],
    z: &mut [f64],
    mut loss: f64,
    steps: usize,
    ws: &mut Workspace,
) -> f64 {
    let q = z.len();
    let mut lambda = 1e-3;
    let mut candidate = vec![0.0; q];
    for _ in 0..steps {
        let zv = DVector::from_column_slice(z);
        let (Ok(h), Ok(y)) = (net.jacobian(&zv), net.decode(&zv)) else {
            break;
        };
        let mut normal = nalgebra::DMatrix::<f64>::zeros(q, q);
        let mut rhs = DVector::<f64>::zeros(q);
        for (slot, &i) in observed.iter().enumerate() {
            let r = x[i] - y[i];
            let row = h.row(i);
            for a in 0..q {
                rhs[a] += weights[slot] * row[a] * r;
                for b in 0..q {
                    normal[(a, b)] += weights[slot] * row[a] * row[b];
                }
            }
        }
        let scale = normal.diagonal().max().max(1e-300);
        let mut improved = false;
        for _ in 0..8 {
            let mut damped = normal.clone();
            for a in 0..q {
                damped[(a, a)] += lambda * scale;
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&rhs)) else {
                lambda *= 10.0;
                continue;
            };
            for k in 0..q {
                candidate[k] = z[k] + step[k];
            }
            let new_loss = loss_grad(net, x, observed, weights, &candidate, ws, false);
            if new_loss.is_finite() && new_loss < loss {
                let done = step.amax() < 1e-13 * (1.0 + zv.amax());
                z.copy_from_slice(&candidate);
                loss = new_loss;
                lambda = (lambda / 3.0).max(1e-12);
                improved = !done;
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    loss
}

fn tail(trace: &[f64]) -> Vec<f64> {
    trace[trace.len().saturating_sub(10)..].to_vec()
}

/// Plain squared-error loss of `decode(z)` against `x` on observed entries,
/// using the same weighting as [`invert`].
#[cfg(test)]
pub(crate) fn inversion_loss(
    net: &DecoderNetwork,
    x: &DVector<f64>,
    mask: &AvailabilityMask,
    z: &DVector<f64>,
) -> f64 {
    let observed: Vec<usize> = mask.observed().collect();
    let raw: Vec<f64> = observed.iter().map(|&i| 1.0 / net.noise[i]).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let mut ws = Workspace {
        hidden: vec![0.0; net.hidden_dim()],
        out: vec![0.0; observed.len()],
        delta_h: vec![0.0; net.hidden_dim()],
        grad: vec![0.0; net.latent_dim()],
    };
    loss_grad(
        net,
        x.as_slice(),
        &observed,
        &weights,
        z.as_slice(),
        &mut ws,
        false,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(rng: &mut ChaCha8Rng, q: usize, m: usize, d: usize) -> DecoderNetwork {
        let mut net = DecoderNetwork::init_with(q, m, d, rng);
        net.b2 = DVector::from_fn(d, |_, _| rng.random_range(-0.5..0.5));
        net
    }

    #[test]
    fn exact_code_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = random_net(&mut rng, 2, 4, 4);
        let z0 = DVector::from_vec(vec![0.3, -0.4]);
        let x = net.decode(&z0).unwrap();
        let inv = invert(
            &net,
            &x,
            &AvailabilityMask::full(4),
            &z0,
            &InvertConfig::default(),
        )
        .unwrap();
        assert_eq!(inv.code.0, z0);
        assert_eq!(inv.steps, 0);
    }

    /// A decoder that is affine to first order: tiny inner weights keep the
    /// sigmoid in its linear regime, and the outer weights undo the scale.
    fn near_linear(rng: &mut ChaCha8Rng, q: usize, d: usize) -> (DecoderNetwork, DMatrix<f64>) {
        let eps = 1e-4;
        let m = q;
        let a = DMatrix::from_fn(d, q, |_, _| rng.random_range(-1.0..1.0));
        let mut net = DecoderNetwork::zeros(q, m, d);
        net.w1 = DMatrix::identity(m, q) * eps;
        net.w2 = &a / (0.25 * eps);
        // cancel the constant 0.5 hidden offset
        net.b2 =
            -(&net.w2 * DVector::from_element(m, 0.5)) + DVector::from_fn(d, |i, _| 0.1 * i as f64);
        (net, a)
    }

    #[test]
    fn linear_decoder_matches_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, d) = (2, 5);
        let (net, a) = near_linear(&mut rng, q, d);
        let x = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let config = InvertConfig {
            steps: 5000,
            ..InvertConfig::default()
        };
        let inv = invert(
            &net,
            &x,
            &AvailabilityMask::full(d),
            &DVector::zeros(q),
            &config,
        )
        .unwrap();
        let b = DVector::from_fn(d, |i, _| 0.1 * i as f64);
        let ls = (a.transpose() * &a).try_inverse().unwrap() * a.transpose() * (&x - b);
        assert!(
            (&inv.code.0 - &ls).amax() < 1e-4,
            "{} vs {}",
            inv.code.0,
            ls
        );
    }

    #[test]
    fn refinement_reaches_least_squares_quickly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (q, d) = (3, 6);
        let (net, a) = near_linear(&mut rng, q, d);
        let x = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let config = InvertConfig {
            steps: 10,
            refine_steps: 10,
            ..InvertConfig::default()
        };
        let inv = invert(
            &net,
            &x,
            &AvailabilityMask::full(d),
            &DVector::zeros(q),
            &config,
        )
        .unwrap();
        let b = DVector::from_fn(d, |i, _| 0.1 * i as f64);
        let ls = (a.transpose() * &a).try_inverse().unwrap() * a.transpose() * (&x - b);
        assert!(
            (&inv.code.0 - &ls).amax() < 1e-6,
            "{} vs {}",
            inv.code.0,
            ls
        );
    }

    #[test]
    fn masked_values_do_not_influence_result() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = random_net(&mut rng, 2, 6, 6);
        let mask = AvailabilityMask(vec![true, false, true, true, false, true]);
        let mut x = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let z0 = DVector::zeros(2);
        let config = InvertConfig::default();
        let a = invert(&net, &x, &mask, &z0, &config).unwrap();
        x[1] = 1e6;
        x[4] = f64::NAN;
        let b = invert(&net, &x, &mask, &z0, &config).unwrap();
        assert_eq!(a.code.0.as_slice(), b.code.0.as_slice());
        assert_eq!(a.steps, b.steps);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let net = DecoderNetwork::zeros(1, 2, 2);
        let err = invert(
            &net,
            &DVector::zeros(2),
            &AvailabilityMask(vec![false, false]),
            &DVector::zeros(1),
            &InvertConfig::default(),
        );
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn loss_never_increases_along_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = random_net(&mut rng, 3, 8, 8);
        let x = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
        let mask = AvailabilityMask::full(8);
        let z0 = DVector::zeros(3);
        let start = inversion_loss(&net, &x, &mask, &z0);
        let inv = invert(&net, &x, &mask, &z0, &InvertConfig::default()).unwrap();
        assert!(inv.loss <= start);
        assert!((inversion_loss(&net, &x, &mask, &inv.code.0) - inv.loss).abs() < 1e-15);
    }
}
