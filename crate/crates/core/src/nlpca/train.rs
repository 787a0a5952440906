use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{default_hidden_dim, default_latent_dim, AvailabilityMask, DecoderNetwork};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// Full-batch gradient descent; a step that increases the loss is
    /// rejected and the step size halved, an accepted one grows it.
    GradientDescent { growth: f64 },
    /// Adam over mini-batches (or the full batch when no batch size is set).
    Adam { beta1: f64, beta2: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub batch_size: Option<usize>,
    pub latent_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    /// Lower bound on the learned per-output noise variance.
    pub min_noise: f64,
    /// Rounds of exact output-layer and per-code updates after the main
    /// optimizer, each followed by a short gradient phase.
    #[serde(default)]
    pub refine_rounds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            lr: 0.05,
            seed: 0,
            optimizer: Optimizer::GradientDescent { growth: 1.05 },
            batch_size: None,
            latent_dim: None,
            hidden_dim: None,
            min_noise: 1e-10,
            refine_rounds: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub network: DecoderNetwork,
    /// One latent code per sample, `n × q`.
    pub codes: DMatrix<f64>,
    /// Root of the masked mean squared error at the end of training.
    pub rmse: f64,
    /// Masked mean squared error after every epoch.
    pub loss_trace: Vec<f64>,
}

/// Gradient of the masked mean squared error.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub codes: DMatrix<f64>,
}

/// Flat parameter vector: decoder weights followed by the codes
/// (row-major, one row per sample).
#[derive(Clone)]
struct Params {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    codes: Vec<f64>,
}

impl Params {
    fn from_net(net: &DecoderNetwork, codes: &DMatrix<f64>) -> Self {
        let (n, q) = codes.shape();
        let mut flat = Vec::with_capacity(n * q);
        for s in 0..n {
            for k in 0..q {
                flat.push(codes[(s, k)]);
            }
        }
        Self {
            w1: net.w1.as_slice().to_vec(),
            b1: net.b1.as_slice().to_vec(),
            w2: net.w2.as_slice().to_vec(),
            b2: net.b2.as_slice().to_vec(),
            codes: flat,
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
            codes: vec![0.0; self.codes.len()],
        }
    }

    fn groups_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.codes,
        ]
    }

    fn groups(&self) -> [&Vec<f64>; 5] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.codes]
    }

    fn is_finite(&self) -> bool {
        self.groups()
            .iter()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

struct Shape {
    q: usize,
    m: usize,
    d: usize,
}

/// Masked squared-error loss and gradient over the samples in `rows`.
/// Returns `(sum of squared residuals, observed entry count)`; the gradient
/// (when requested) is of the *sum*, to be scaled by the caller.
fn sum_loss_grad(
    p: &Params,
    shape: &Shape,
    values: &DMatrix<f64>,
    mask: &[bool],
    rows: &[usize],
    mut grad: Option<&mut Params>,
) -> (f64, usize) {
    let Shape { q, m, d } = *shape;
    let mut hidden = vec![0.0; m];
    let mut resid = vec![0.0; d];
    let mut delta_h = vec![0.0; m];
    let mut total = 0.0;
    let mut count = 0;
    if let Some(g) = grad.as_deref_mut() {
        for grp in g.groups_mut() {
            grp.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    for &s in rows {
        let z = &p.codes[s * q..(s + 1) * q];
        hidden.copy_from_slice(&p.b1);
        for (k, &zk) in z.iter().enumerate() {
            let col = &p.w1[k * m..(k + 1) * m];
            for (h, &w) in hidden.iter_mut().zip(col) {
                *h += w * zk;
            }
        }
        for h in hidden.iter_mut() {
            *h = super::sigmoid(*h);
        }
        let mut any = false;
        for i in 0..d {
            if !mask[s * d + i] {
                resid[i] = 0.0;
                continue;
            }
            let mut y = p.b2[i];
            for j in 0..m {
                y += p.w2[i + j * d] * hidden[j];
            }
            let r = y - values[(s, i)];
            resid[i] = r;
            total += r * r;
            count += 1;
            any = true;
        }
        let Some(g) = grad.as_deref_mut() else {
            continue;
        };
        if !any {
            continue;
        }
        for i in 0..d {
            g.b2[i] += 2.0 * resid[i];
        }
        for j in 0..m {
            let col = &p.w2[j * d..(j + 1) * d];
            let gcol = &mut g.w2[j * d..(j + 1) * d];
            let mut acc = 0.0;
            for i in 0..d {
                let e = 2.0 * resid[i];
                gcol[i] += e * hidden[j];
                acc += e * col[i];
            }
            delta_h[j] = acc * hidden[j] * (1.0 - hidden[j]);
        }
        for j in 0..m {
            g.b1[j] += delta_h[j];
        }
        let gz = &mut g.codes[s * q..(s + 1) * q];
        for k in 0..q {
            let col = &p.w1[k * m..(k + 1) * m];
            let gcol = &mut g.w1[k * m..(k + 1) * m];
            let mut acc = 0.0;
            for j in 0..m {
                gcol[j] += delta_h[j] * z[k];
                acc += col[j] * delta_h[j];
            }
            gz[k] += acc;
        }
    }
    (total, count)
}

fn flatten_mask(masks: &[AvailabilityMask], d: usize) -> Result<Vec<bool>> {
    let mut flat = Vec::with_capacity(masks.len() * d);
    for mask in masks {
        if mask.len() != d {
            return Err(Error::dim("sample mask", d, mask.len()));
        }
        flat.extend_from_slice(&mask.0);
    }
    Ok(flat)
}

fn shape_of(net: &DecoderNetwork) -> Shape {
    Shape {
        q: net.latent_dim(),
        m: net.hidden_dim(),
        d: net.output_dim(),
    }
}

fn check_inputs(
    net: &DecoderNetwork,
    codes: &DMatrix<f64>,
    values: &DMatrix<f64>,
    masks: &[AvailabilityMask],
) -> Result<()> {
    if values.ncols() != net.output_dim() {
        return Err(Error::dim(
            "sample dimension",
            net.output_dim(),
            values.ncols(),
        ));
    }
    if codes.nrows() != values.nrows() || masks.len() != values.nrows() {
        return Err(Error::dim(
            "sample count",
            values.nrows(),
            codes.nrows().min(masks.len()),
        ));
    }
    if codes.ncols() != net.latent_dim() {
        return Err(Error::dim("latent code", net.latent_dim(), codes.ncols()));
    }
    Ok(())
}

/// Masked mean squared error of `decode(codes[s])` against `values[s]`.
pub fn masked_loss(
    net: &DecoderNetwork,
    codes: &DMatrix<f64>,
    values: &DMatrix<f64>,
    masks: &[AvailabilityMask],
) -> Result<f64> {
    check_inputs(net, codes, values, masks)?;
    let shape = shape_of(net);
    let flat = flatten_mask(masks, shape.d)?;
    let rows: Vec<usize> = (0..values.nrows()).collect();
    let (sum, count) = sum_loss_grad(
        &Params::from_net(net, codes),
        &shape,
        values,
        &flat,
        &rows,
        None,
    );
    if count == 0 {
        return Err(Error::Domain("no observed entries".into()));
    }
    Ok(sum / count as f64)
}

/// Analytic gradient of [`masked_loss`] with respect to every weight and
/// every latent code.
pub fn masked_loss_gradient(
    net: &DecoderNetwork,
    codes: &DMatrix<f64>,
    values: &DMatrix<f64>,
    masks: &[AvailabilityMask],
) -> Result<Gradient> {
    check_inputs(net, codes, values, masks)?;
    let shape = shape_of(net);
    let flat = flatten_mask(masks, shape.d)?;
    let rows: Vec<usize> = (0..values.nrows()).collect();
    let params = Params::from_net(net, codes);
    let mut g = params.zeros_like();
    let (_, count) = sum_loss_grad(&params, &shape, values, &flat, &rows, Some(&mut g));
    if count == 0 {
        return Err(Error::Domain("no observed entries".into()));
    }
    let scale = 1.0 / count as f64;
    let Shape { q, m, d } = shape;
    let n = values.nrows();
    Ok(Gradient {
        w1: DMatrix::from_column_slice(m, q, &g.w1) * scale,
        b1: DVector::from_column_slice(&g.b1) * scale,
        w2: DMatrix::from_column_slice(d, m, &g.w2) * scale,
        b2: DVector::from_column_slice(&g.b2) * scale,
        codes: DMatrix::from_row_slice(n, q, &g.codes) * scale,
    })
}

fn to_network(p: &Params, shape: &Shape, noise: DVector<f64>) -> DecoderNetwork {
    let Shape { q, m, d } = *shape;
    DecoderNetwork {
        w1: DMatrix::from_column_slice(m, q, &p.w1),
        b1: DVector::from_column_slice(&p.b1),
        w2: DMatrix::from_column_slice(d, m, &p.w2),
        b2: DVector::from_column_slice(&p.b2),
        noise,
    }
}

/// Per-output mean squared residual over observed entries.
fn output_noise(
    p: &Params,
    shape: &Shape,
    values: &DMatrix<f64>,
    mask: &[bool],
    floor: f64,
) -> DVector<f64> {
    let d = shape.d;
    let net = to_network(p, shape, DVector::from_element(d, 1.0));
    let q = shape.q;
    let mut sums = vec![0.0; d];
    let mut counts = vec![0usize; d];
    let mut hidden = vec![0.0; shape.m];
    let mut out = vec![0.0; d];
    for s in 0..values.nrows() {
        net.hidden_into(&p.codes[s * q..(s + 1) * q], &mut hidden);
        net.output_into(&hidden, &mut out);
        for i in 0..d {
            if mask[s * d + i] {
                let r = out[i] - values[(s, i)];
                sums[i] += r * r;
                counts[i] += 1;
            }
        }
    }
    let pooled = sums.iter().sum::<f64>() / counts.iter().sum::<usize>().max(1) as f64;
    DVector::from_iterator(
        d,
        sums.iter().zip(&counts).map(|(s, &c)| {
            let v = if c > 0 { s / c as f64 } else { pooled };
            v.max(floor)
        }),
    )
}

/// Gradient epochs between the exact block updates of a refinement round.
const REFINE_EPOCHS: usize = 20;

struct Problem<'a> {
    shape: &'a Shape,
    values: &'a DMatrix<f64>,
    mask: &'a [bool],
    rows: &'a [usize],
    count: usize,
    code_scale: f64,
}

/// Full-batch gradient descent with step rejection; returns the final
/// loss and step size.
fn descend(
    params: &mut Params,
    pb: &Problem,
    mut loss: f64,
    mut lr: f64,
    growth: f64,
    epochs: usize,
    trace: &mut Vec<f64>,
) -> Result<(f64, f64)> {
    let mut grad = params.zeros_like();
    let mut next_grad = params.zeros_like();
    sum_loss_grad(
        params,
        pb.shape,
        pb.values,
        pb.mask,
        pb.rows,
        Some(&mut grad),
    );
    let mut candidate = params.clone();
    let inv = 1.0 / pb.count as f64;
    for epoch in 0..epochs {
        for (gi, ((c, p), g)) in candidate
            .groups_mut()
            .into_iter()
            .zip(params.groups())
            .zip(grad.groups())
            .enumerate()
        {
            let step = if gi == 4 {
                lr * pb.code_scale * inv
            } else {
                lr * inv
            };
            for ((cv, pv), gv) in c.iter_mut().zip(p.iter()).zip(g.iter()) {
                *cv = pv - step * gv;
            }
        }
        let (sum, _) = sum_loss_grad(
            &candidate,
            pb.shape,
            pb.values,
            pb.mask,
            pb.rows,
            Some(&mut next_grad),
        );
        let new_loss = sum * inv;
        if !new_loss.is_finite() && !loss.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: "loss is not finite".into(),
            });
        }
        if new_loss <= loss {
            std::mem::swap(params, &mut candidate);
            std::mem::swap(&mut grad, &mut next_grad);
            loss = new_loss;
            lr *= growth;
        } else {
            lr *= 0.5;
        }
        trace.push(loss);
    }
    Ok((loss, lr))
}

fn hidden_matrix(params: &Params, pb: &Problem) -> DMatrix<f64> {
    let Shape { q, m, d } = *pb.shape;
    let net = to_network(params, pb.shape, DVector::from_element(d, 1.0));
    let n = pb.values.nrows();
    let mut out = DMatrix::zeros(n, m);
    let mut hidden = vec![0.0; m];
    for s in 0..n {
        net.hidden_into(&params.codes[s * q..(s + 1) * q], &mut hidden);
        for j in 0..m {
            out[(s, j)] = hidden[j];
        }
    }
    out
}

/// Least-squares output weights and bias for the current hidden
/// activations, output by output; kept only where the error drops.
fn fit_output_layer(params: &mut Params, pb: &Problem) {
    let Shape { m, d, .. } = *pb.shape;
    let hidden = hidden_matrix(params, pb);
    let n = pb.values.nrows();
    for i in 0..d {
        let mut normal = DMatrix::<f64>::zeros(m + 1, m + 1);
        let mut rhs = DVector::<f64>::zeros(m + 1);
        let rows: Vec<usize> = (0..n).filter(|&s| pb.mask[s * d + i]).collect();
        if rows.is_empty() {
            continue;
        }
        let mut a = vec![0.0; m + 1];
        for &s in &rows {
            for j in 0..m {
                a[j] = hidden[(s, j)];
            }
            a[m] = 1.0;
            let x = pb.values[(s, i)];
            for u in 0..=m {
                rhs[u] += a[u] * x;
                for v in 0..=m {
                    normal[(u, v)] += a[u] * a[v];
                }
            }
        }
        let ridge = 1e-12 * normal.trace().max(1e-300);
        for u in 0..=m {
            normal[(u, u)] += ridge;
        }
        let Some(sol) = normal.cholesky().map(|c| c.solve(&rhs)) else {
            continue;
        };
        let err = |w: &dyn Fn(usize) -> f64, b: f64| -> f64 {
            rows.iter()
                .map(|&s| {
                    let y = b + (0..m).map(|j| w(j) * hidden[(s, j)]).sum::<f64>();
                    (y - pb.values[(s, i)]).powi(2)
                })
                .sum()
        };
        let current = err(&|j| params.w2[i + j * d], params.b2[i]);
        let proposed = err(&|j| sol[j], sol[m]);
        if proposed.is_finite() && proposed < current {
            for j in 0..m {
                params.w2[i + j * d] = sol[j];
            }
            params.b2[i] = sol[m];
        }
    }
}

/// Levenberg-Marquardt on every sample's code with the weights fixed.
fn fit_codes(params: &mut Params, pb: &Problem) {
    let Shape { q, d, .. } = *pb.shape;
    let net = to_network(params, pb.shape, DVector::from_element(d, 1.0));
    let mut x = vec![0.0; d];
    for s in 0..pb.values.nrows() {
        let observed: Vec<usize> = (0..d).filter(|&i| pb.mask[s * d + i]).collect();
        if observed.is_empty() {
            continue;
        }
        for i in 0..d {
            x[i] = pb.values[(s, i)];
        }
        super::invert::refine_code(
            &net,
            &x,
            &observed,
            &mut params.codes[s * q..(s + 1) * q],
            5,
        );
    }
}

/// Jointly fits decoder weights and per-sample latent codes to the
/// observed entries of `values` (`n × d`, one row per sample).
pub fn train(
    values: &DMatrix<f64>,
    masks: &[AvailabilityMask],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let (n, d) = values.shape();
    if n < 2 {
        return Err(Error::Domain(format!(
            "training needs at least 2 samples, got {n}"
        )));
    }
    if d < 2 {
        return Err(Error::Domain(format!(
            "training needs output dimension >= 2, got {d}"
        )));
    }
    let flat = flatten_mask(masks, d)?;
    if masks.len() != n {
        return Err(Error::dim("sample masks", n, masks.len()));
    }
    let q = config.latent_dim.unwrap_or_else(|| default_latent_dim(d));
    let m = config.hidden_dim.unwrap_or_else(|| default_hidden_dim(d));
    if q == 0 || m == 0 {
        return Err(Error::Domain(
            "latent and hidden dimensions must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = DecoderNetwork::init_with(q, m, d, &mut rng);
    let shape = Shape { q, m, d };
    let mut params = Params::from_net(&init, &DMatrix::zeros(n, q));
    let all_rows: Vec<usize> = (0..n).collect();
    // codes receive one sample's share of the gradient; rescale so they
    // move at the same rate as the shared weights
    let code_scale = n as f64;

    let (sum0, count) = sum_loss_grad(&params, &shape, values, &flat, &all_rows, None);
    if count == 0 {
        return Err(Error::Domain("no observed training entries".into()));
    }
    let mut loss = sum0 / count as f64;
    let mut trace = Vec::with_capacity(config.epochs);

    match config.optimizer {
        Optimizer::GradientDescent { growth } => {
            let problem = Problem {
                shape: &shape,
                values,
                mask: &flat,
                rows: &all_rows,
                count,
                code_scale,
            };
            (loss, _) = descend(
                &mut params,
                &problem,
                loss,
                config.lr,
                growth,
                config.epochs,
                &mut trace,
            )?;
        }
        Optimizer::Adam { beta1, beta2 } => {
            let eps = 1e-8;
            let mut first = params.zeros_like();
            let mut second = params.zeros_like();
            let mut grad = params.zeros_like();
            let batch = config.batch_size.unwrap_or(n).clamp(1, n);
            let mut order = all_rows.clone();
            let mut t = 0i32;
            for epoch in 0..config.epochs {
                order.shuffle(&mut rng);
                for rows in order.chunks(batch) {
                    let (_, c) =
                        sum_loss_grad(&params, &shape, values, &flat, rows, Some(&mut grad));
                    if c == 0 {
                        continue;
                    }
                    t += 1;
                    let inv = 1.0 / c as f64;
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for (gi, (((p, g), m1), m2)) in params
                        .groups_mut()
                        .into_iter()
                        .zip(grad.groups())
                        .zip(first.groups_mut())
                        .zip(second.groups_mut())
                        .enumerate()
                    {
                        let scale = if gi == 4 {
                            inv * rows.len() as f64
                        } else {
                            inv
                        };
                        for (((pv, gv), a), b) in p
                            .iter_mut()
                            .zip(g.iter())
                            .zip(m1.iter_mut())
                            .zip(m2.iter_mut())
                        {
                            let gs = gv * scale;
                            *a = beta1 * *a + (1.0 - beta1) * gs;
                            *b = beta2 * *b + (1.0 - beta2) * gs * gs;
                            *pv -= config.lr * (*a / bc1) / ((*b / bc2).sqrt() + eps);
                        }
                    }
                }
                let (sum, _) = sum_loss_grad(&params, &shape, values, &flat, &all_rows, None);
                loss = sum / count as f64;
                if !loss.is_finite() || !params.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        reason: "loss is not finite".into(),
                    });
                }
                trace.push(loss);
            }
        }
    }
    if !params.is_finite() {
        return Err(Error::Training {
            epoch: config.epochs,
            reason: "parameters are not finite".into(),
        });
    }
    if config.refine_rounds > 0 {
        let growth = match config.optimizer {
            Optimizer::GradientDescent { growth } => growth,
            Optimizer::Adam { .. } => 1.05,
        };
        let problem = Problem {
            shape: &shape,
            values,
            mask: &flat,
            rows: &all_rows,
            count,
            code_scale,
        };
        let mut lr = config.lr;
        for _ in 0..config.refine_rounds {
            fit_output_layer(&mut params, &problem);
            fit_codes(&mut params, &problem);
            let (sum, _) = sum_loss_grad(&params, &shape, values, &flat, &all_rows, None);
            (loss, lr) = descend(
                &mut params,
                &problem,
                sum / count as f64,
                lr,
                growth,
                REFINE_EPOCHS,
                &mut trace,
            )?;
        }
    }
    let noise = output_noise(&params, &shape, values, &flat, config.min_noise);
    let network = to_network(&params, &shape, noise);
    let codes = DMatrix::from_row_slice(n, q, &params.codes);
    Ok(TrainOutcome {
        network,
        codes,
        rmse: loss.sqrt(),
        loss_trace: trace,
    })
}
