use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::messages::{sweep, update_estimates};
use super::schedule::schedule_for;
use super::{
    ConditionalFactor, Factor, FactorGraph, FactorId, JointFactor, JointForm, JointModel, Topology,
};
use crate::error::{Error, Result};
use crate::gaussian::{linearize_conditional, CanonicalGaussian, LinearMap, LinearizationPoint};
use crate::linalg;
use crate::nlpca::{factor_covariance, invert, AvailabilityMask, InvertConfig, NlpcaModel};

/// Values and per-component availability for one conditional factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub values: DVector<f64>,
    pub available: Vec<bool>,
}

/// Observations for every conditional factor of a graph, indexed by
/// factor id. Joint factors carry `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub observations: Vec<Option<Observation>>,
}

impl Evidence {
    /// The observations stored on the graph's conditional factors.
    pub fn from_graph(graph: &FactorGraph) -> Self {
        let observations = graph
            .factors
            .iter()
            .map(|f| match f {
                Factor::Conditional(c) => Some(Observation {
                    values: c.observation.clone(),
                    available: c.available.clone(),
                }),
                Factor::Joint(_) => None,
            })
            .collect();
        Self { observations }
    }

    pub fn set(&mut self, factor: FactorId, values: DVector<f64>, available: Vec<bool>) {
        self.observations[factor.0] = Some(Observation { values, available });
    }

    pub fn get(&self, factor: FactorId) -> Option<&Observation> {
        self.observations.get(factor.0).and_then(Option::as_ref)
    }

    pub fn any_available(&self) -> bool {
        self.observations
            .iter()
            .flatten()
            .any(|o| o.available.iter().any(|&a| a))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub max_outer: usize,
    pub tol: f64,
    /// Fraction of each Gauss-Newton step applied, in `[0.1, 1]`.
    pub damping: f64,
    pub invert: InvertConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            max_outer: 20,
            tol: 1e-6,
            damping: 1.0,
            invert: InvertConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub estimates: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm of the last undamped increment.
    pub residual: f64,
    /// Max-norm of the increment at every outer iteration.
    pub trace: Vec<f64>,
}

/// Canonical forms of every factor at one linearization point, plus the
/// latent codes found for the NLPCA factors (reused as warm starts).
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub factors: Vec<CanonicalGaussian>,
    pub codes: Vec<Option<DVector<f64>>>,
}

/// Per variable and component: whether any available sensor row touches it.
pub fn observed_components(graph: &FactorGraph, evidence: &Evidence) -> Vec<Vec<bool>> {
    let mut out: Vec<Vec<bool>> = graph
        .variables
        .iter()
        .map(|v| vec![false; v.dim()])
        .collect();
    for (fi, f) in graph.factors.iter().enumerate() {
        let (Factor::Conditional(c), Some(obs)) = (f, evidence.get(FactorId(fi))) else {
            continue;
        };
        let input = c.input_dim();
        let a = c.mapping.matrix(input);
        for (row, _) in obs.available.iter().enumerate().filter(|(_, &av)| av) {
            let mut col = 0;
            for s in &c.scope {
                for &k in &s.components {
                    if row < a.nrows() && a[(row, col)] != 0.0 {
                        out[s.var.0][k] = true;
                    }
                    col += 1;
                }
            }
        }
    }
    out
}

/// Observed components take the first available identity reading; the
/// rest start at the variable's prior mean.
pub fn initial_point(graph: &FactorGraph, evidence: &Evidence) -> Vec<DVector<f64>> {
    let mut x: Vec<DVector<f64>> = graph
        .variables
        .iter()
        .map(|v| v.prior_mean.clone())
        .collect();
    let mut set: Vec<Vec<bool>> = graph
        .variables
        .iter()
        .map(|v| vec![false; v.dim()])
        .collect();
    for (fi, f) in graph.factors.iter().enumerate() {
        let (Factor::Conditional(c), Some(obs)) = (f, evidence.get(FactorId(fi))) else {
            continue;
        };
        if c.mapping != super::Mapping::Identity {
            continue;
        }
        let mut row = 0;
        for s in &c.scope {
            for &k in &s.components {
                if obs.available[row] && !set[s.var.0][k] {
                    x[s.var.0][k] = obs.values[row];
                    set[s.var.0][k] = true;
                }
                row += 1;
            }
        }
    }
    x
}

fn embed(local: CanonicalGaussian, positions: &[usize], total: usize) -> Result<CanonicalGaussian> {
    let (j, h) = local.into_parts();
    let mut jf = DMatrix::zeros(total, total);
    let mut hf = DVector::zeros(total);
    for (a, &pa) in positions.iter().enumerate() {
        hf[pa] += h[a];
        for (b, &pb) in positions.iter().enumerate() {
            jf[(pa, pb)] += j[(a, b)];
        }
    }
    CanonicalGaussian::from_parts(jf, hf)
}

fn linearize_sensor(
    graph: &FactorGraph,
    c: &ConditionalFactor,
    obs: Option<&Observation>,
    x: &[DVector<f64>],
) -> Result<CanonicalGaussian> {
    let vars = c.variables();
    let mut offsets = Vec::new();
    let mut total = 0;
    for v in &vars {
        offsets.push(total);
        total += graph.variable(*v).dim();
    }
    let Some(obs) = obs else {
        return Ok(CanonicalGaussian::zeros(total));
    };
    let rows: Vec<usize> = obs
        .available
        .iter()
        .enumerate()
        .filter(|(_, &a)| a)
        .map(|(i, _)| i)
        .collect();
    if rows.is_empty() {
        return Ok(CanonicalGaussian::zeros(total));
    }
    let mut positions = Vec::new();
    let mut xs = Vec::new();
    for s in &c.scope {
        let slot = vars
            .iter()
            .position(|v| *v == s.var)
            .expect("scope variable");
        for &k in &s.components {
            positions.push(offsets[slot] + k);
            xs.push(x[s.var.0][k]);
        }
    }
    let input = xs.len();
    let a = c.mapping.matrix(input);
    let all_cols: Vec<usize> = (0..input).collect();
    let f = LinearMap(linalg::sub_block(&a, &rows, &all_cols));
    let r = linalg::sub_block(&c.noise, &rows, &rows);
    let y = linalg::sub_vec(&obs.values, &rows);
    let point = LinearizationPoint::new(DVector::from_vec(xs))?;
    let local = linearize_conditional(&f, &r, &y, &point).map_err(|e| match e {
        Error::Singular { what } => Error::singular(format!("factor {}: {what}", c.name)),
        other => other,
    })?;
    embed(local, &positions, total)
}

/// Quadratic form of a linear residual `r(δx) = r̄ + F δx` with covariance
/// given by its inverse `w`: `J = Fᵀ W F`, `h = −Fᵀ W r̄`.
fn residual_form(
    f: &DMatrix<f64>,
    w: &DMatrix<f64>,
    residual: &DVector<f64>,
) -> Result<CanonicalGaussian> {
    let ftw = f.transpose() * w;
    let j = &ftw * f;
    let h = -(&ftw * residual);
    CanonicalGaussian::from_parts(j, h)
}

fn linearize_linear_joint(
    name: &str,
    form: JointForm,
    projection: &DMatrix<f64>,
    offset: &DVector<f64>,
    covariance: &DMatrix<f64>,
    x: &DVector<f64>,
) -> Result<CanonicalGaussian> {
    let d = x.len();
    let w = linalg::spd_inverse(covariance, &format!("factor {name}: covariance S"))?;
    let residual = x - projection * x - offset;
    match form {
        JointForm::Residual => {
            residual_form(&(DMatrix::identity(d, d) - projection), &w, &residual)
        }
        JointForm::Reconstruction => {
            let gtw = projection.transpose() * &w;
            let j = &gtw * projection;
            let h = &gtw * &residual;
            CanonicalGaussian::from_parts(j, h)
        }
    }
}

fn linearize_nlpca_joint(
    name: &str,
    form: JointForm,
    model: &NlpcaModel,
    x: &DVector<f64>,
    mask: &AvailabilityMask,
    warm: Option<&DVector<f64>>,
    config: &InvertConfig,
) -> Result<(CanonicalGaussian, Option<DVector<f64>>)> {
    let d = x.len();
    if mask.count() == 0 {
        return Ok((CanonicalGaussian::zeros(d), None));
    }
    let st = &model.standardizer;
    let unit = st.to_unit(x);
    let target = DVector::from_iterator(
        d,
        unit.iter()
            .zip(&mask.0)
            .map(|(&u, &o)| if o { u } else { 0.0 }),
    );
    let z0 = match warm {
        Some(z) => z.clone(),
        None => model.nearest_code(&target, mask),
    };
    let net = &model.network;
    let inv = invert(net, &target, mask, &z0, config)?;
    let z = inv.code.0;
    let cov = factor_covariance(net, &z, mask).map_err(|e| match e {
        Error::Degenerate(what) => Error::Degenerate(format!("factor {name}: {what}")),
        other => other,
    })?;
    let g = net.decode(&z)?;
    let w = linalg::spd_inverse(&cov.output, &format!("factor {name}: output covariance"))?;
    // Everything in unit coordinates u = D⁻¹(x − μ); chain rule adds D⁻¹.
    let mut d_inv = DMatrix::zeros(d, d);
    for i in 0..d {
        d_inv[(i, i)] = 1.0 / st.scale[i];
    }
    let residual = &unit - &g;
    let lin = match form {
        JointForm::Residual => {
            let f = (DMatrix::identity(d, d) - &cov.sensitivity) * &d_inv;
            residual_form(&f, &w, &residual)?
        }
        JointForm::Reconstruction => {
            let gm = &cov.sensitivity * &d_inv;
            let gtw = gm.transpose() * &w;
            let j = &gtw * &gm;
            let h = &gtw * &residual;
            CanonicalGaussian::from_parts(j, h)?
        }
    };
    Ok((lin, Some(z)))
}

fn linearize_joint_factor(
    jf: &JointFactor,
    observed: &[Vec<bool>],
    x: &[DVector<f64>],
    warm: Option<&DVector<f64>>,
    config: &InvertConfig,
) -> Result<(CanonicalGaussian, Option<DVector<f64>>)> {
    let vars = jf.variables();
    let xs: Vec<f64> = vars.iter().flat_map(|v| x[v.0].iter().cloned()).collect();
    let xs = DVector::from_vec(xs);
    let expected = jf.model.output_dim();
    if xs.len() != expected {
        return Err(Error::dim(
            format!("joint factor {} scope", jf.name),
            expected,
            xs.len(),
        ));
    }
    match &jf.model {
        JointModel::Linear {
            projection,
            offset,
            covariance,
        } => Ok((
            linearize_linear_joint(&jf.name, jf.form, projection, offset, covariance, &xs)?,
            None,
        )),
        JointModel::Nlpca(model) => {
            let mask = AvailabilityMask(
                vars.iter()
                    .flat_map(|v| observed[v.0].iter().cloned())
                    .collect(),
            );
            linearize_nlpca_joint(&jf.name, jf.form, model, &xs, &mask, warm, config)
        }
    }
}

/// Linearizes every factor around `x`, using the latent codes of
/// `previous` as inversion warm starts when given.
pub fn linearize_factors(
    graph: &FactorGraph,
    evidence: &Evidence,
    x: &[DVector<f64>],
    previous: Option<&Linearization>,
    config: &InvertConfig,
) -> Result<Linearization> {
    let observed = observed_components(graph, evidence);
    let mut factors = Vec::with_capacity(graph.factors.len());
    let mut codes = Vec::with_capacity(graph.factors.len());
    for (fi, f) in graph.factors.iter().enumerate() {
        match f {
            Factor::Conditional(c) => {
                factors.push(linearize_sensor(graph, c, evidence.get(FactorId(fi)), x)?);
                codes.push(None);
            }
            Factor::Joint(j) => {
                let warm = previous
                    .and_then(|p| p.codes.get(fi))
                    .and_then(Option::as_ref);
                let (lin, z) = linearize_joint_factor(j, &observed, x, warm, config)?;
                factors.push(lin);
                codes.push(z);
            }
        }
    }
    Ok(Linearization { factors, codes })
}

/// Smallest fraction of an update tried when relinearizing fails after it.
const MIN_RETREAT_STEP: f64 = 1.0 / 1024.0;

/// Relinearize, sweep and update until the increment falls below
/// `config.tol` or `config.max_outer` iterations have run. A graph of
/// purely linear factors is solved exactly in one undamped iteration.
pub fn run_inference(
    graph: &FactorGraph,
    evidence: &Evidence,
    config: &InferenceConfig,
) -> Result<InferenceResult> {
    if !(0.1..=1.0).contains(&config.damping) {
        return Err(Error::Domain(format!(
            "damping {} outside [0.1, 1]",
            config.damping
        )));
    }
    if config.max_outer == 0 {
        return Err(Error::Domain("max_outer must be at least 1".into()));
    }
    if evidence.observations.len() != graph.factors.len() {
        return Err(Error::dim(
            "evidence",
            graph.factors.len(),
            evidence.observations.len(),
        ));
    }
    if !evidence.any_available() {
        return Err(Error::Domain(
            "inference needs at least one observed component".into(),
        ));
    }
    let topo = Topology::of(graph)?;
    let order = schedule_for(&topo)?;
    let one_shot = graph.all_linear() && config.damping == 1.0;

    let mut x = initial_point(graph, evidence);
    let mut covariances: Vec<DMatrix<f64>> = graph
        .variables
        .iter()
        .map(|v| v.covariance.clone())
        .collect();
    let mut previous: Option<Linearization> = None;
    // state before the last update, that update's increments and its step
    let mut retreat: Option<(Vec<DVector<f64>>, Vec<DVector<f64>>, f64)> = None;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut residual = f64::INFINITY;
    while trace.len() < config.max_outer {
        let lin = match linearize_factors(graph, evidence, &x, previous.as_ref(), &config.invert) {
            Ok(lin) => lin,
            Err(e) if e.is_numerical() => {
                // a full step can leave the region where the decoders invert
                let Some((base, deltas, step)) = retreat.as_mut() else {
                    return Err(e);
                };
                *step *= 0.5;
                if *step < MIN_RETREAT_STEP {
                    return Err(e);
                }
                for (i, xi) in x.iter_mut().enumerate() {
                    *xi = &base[i] + &deltas[i] * *step;
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        let messages = sweep(graph, &lin.factors, &topo, &order)?;
        let updates = update_estimates(graph, &messages)?;
        residual = updates
            .iter()
            .map(|u| linalg::max_abs(&u.delta))
            .fold(0.0, f64::max);
        trace.push(residual);
        if !residual.is_finite() {
            return Err(Error::NonFinite {
                what: "state increment".into(),
            });
        }
        let base = x.clone();
        let mut deltas = Vec::with_capacity(updates.len());
        for (i, up) in updates.into_iter().enumerate() {
            x[i] += &up.delta * config.damping;
            covariances[i] = up.covariance;
            deltas.push(up.delta);
        }
        retreat = Some((base, deltas, config.damping));
        if one_shot || residual < config.tol {
            converged = true;
            break;
        }
        previous = Some(lin);
    }
    Ok(InferenceResult {
        estimates: x,
        covariances,
        iterations: trace.len(),
        converged,
        residual,
        trace,
    })
}
