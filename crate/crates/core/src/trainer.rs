//! Expectation-maximization: alternate per-sample inference over the
//! factor graph with per-factor NLPCA fits on the inferred states.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::builder::ModelBlueprint;
use crate::datagen::GridDataset;
use crate::error::{Error, Result};
use crate::graph::{run_inference, FactorGraph, InferenceConfig, InferenceResult};
use crate::nlpca::{AvailabilityMask, NlpcaModel, TrainConfig};
use crate::seeds;

pub const TRAINED_FORMAT: &str = "gridfactor-model";
pub const TRAINED_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub em_iters: usize,
    pub nlpca: TrainConfig,
    pub inference: InferenceConfig,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            em_iters: 5,
            nlpca: TrainConfig {
                epochs: 1000,
                refine_rounds: 20,
                ..TrainConfig::default()
            },
            inference: InferenceConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    /// Mean over joint factors of the final NLPCA training RMSE (unit
    /// coordinates).
    pub training_rmse: f64,
    /// False when the fit regressed and the previous models were kept.
    pub accepted: bool,
    /// Largest change of any filled-in entry since the previous iteration.
    pub state_change: Option<f64>,
    pub mean_inference_iterations: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorReport {
    pub name: String,
    pub d: usize,
    pub q: usize,
    pub m: usize,
    pub parameters: usize,
    pub seed: u64,
    pub final_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub seed: u64,
    pub em_iters: usize,
    pub samples: usize,
    pub iterations: Vec<IterationReport>,
    pub best_iteration: usize,
    pub factors: Vec<FactorReport>,
}

/// A blueprint with one trained model per joint factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format: String,
    pub version: u32,
    pub blueprint: ModelBlueprint,
    pub models: BTreeMap<String, NlpcaModel>,
    pub inference: InferenceConfig,
    pub report: TrainingReport,
}

impl TrainedModel {
    pub fn shared_models(&self) -> BTreeMap<String, Arc<NlpcaModel>> {
        self.models
            .iter()
            .map(|(k, v)| (k.clone(), Arc::new(v.clone())))
            .collect()
    }

    pub fn graph(&self) -> Result<FactorGraph> {
        self.blueprint.instantiate(&self.shared_models())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.format != TRAINED_FORMAT || m.version != TRAINED_VERSION {
            return Err(Error::Format(format!(
                "expected {TRAINED_FORMAT} v{TRAINED_VERSION}, found {} v{}",
                m.format, m.version
            )));
        }
        for model in m.models.values() {
            model.check_version()?;
        }
        Ok(m)
    }
}

/// Per-sample, per-variable states.
type States = Vec<Vec<DVector<f64>>>;

/// Observed values where present, column means of the observed values
/// elsewhere; the second result marks which entries were observed.
fn bootstrap(
    bp: &ModelBlueprint,
    dataset: &GridDataset,
    columns: &[usize],
) -> Result<(States, Vec<Vec<Vec<bool>>>)> {
    let hours = dataset.hours();
    let mut fill = vec![0.0; columns.len()];
    for (i, &col) in columns.iter().enumerate() {
        let obs: Vec<f64> = (0..hours)
            .filter(|&t| dataset.observed[(t, col)] && dataset.measured[(t, col)].is_finite())
            .map(|t| dataset.measured[(t, col)])
            .collect();
        if obs.is_empty() {
            return Err(Error::Domain(format!(
                "series {} has no observations",
                bp.conditionals[i].series
            )));
        }
        fill[i] = obs.iter().sum::<f64>() / obs.len() as f64;
    }
    let mut states = Vec::with_capacity(hours);
    let mut masks = Vec::with_capacity(hours);
    for t in 0..hours {
        let mut x: Vec<DVector<f64>> = bp
            .variables
            .iter()
            .map(|v| DVector::zeros(v.dim()))
            .collect();
        let mut m: Vec<Vec<bool>> = bp.variables.iter().map(|v| vec![false; v.dim()]).collect();
        for (i, (c, &col)) in bp.conditionals.iter().zip(columns).enumerate() {
            let ok = dataset.observed[(t, col)] && dataset.measured[(t, col)].is_finite();
            x[c.var][c.component] = if ok {
                dataset.measured[(t, col)]
            } else {
                fill[i]
            };
            m[c.var][c.component] = ok;
        }
        states.push(x);
        masks.push(m);
    }
    Ok((states, masks))
}

fn fit_joints(
    bp: &ModelBlueprint,
    states: &States,
    masks: &[Vec<Vec<bool>>],
    config: &EmConfig,
) -> Result<(BTreeMap<String, NlpcaModel>, Vec<FactorReport>)> {
    let fitted: Vec<Result<(NlpcaModel, FactorReport)>> = bp
        .joints
        .par_iter()
        .map(|j| {
            let n = states.len();
            let [a, b] = j.vars;
            let values = DMatrix::from_fn(n, j.d, |s, i| {
                let da = states[s][a].len();
                if i < da {
                    states[s][a][i]
                } else {
                    states[s][b][i - da]
                }
            });
            let sample_masks: Vec<AvailabilityMask> = (0..n)
                .map(|s| {
                    AvailabilityMask(masks[s][a].iter().chain(&masks[s][b]).cloned().collect())
                })
                .collect();
            let seed = seeds::derive(config.seed, &format!("{}/{}", seeds::TRAINING, j.name));
            let tc = TrainConfig {
                seed,
                latent_dim: Some(j.q),
                hidden_dim: Some(j.m),
                ..config.nlpca.clone()
            };
            let model = NlpcaModel::fit(&values, &sample_masks, &tc).map_err(|e| match e {
                Error::Training { epoch, reason } => Error::Training {
                    epoch,
                    reason: format!("joint factor {}: {reason}", j.name),
                },
                other => other,
            })?;
            let report = FactorReport {
                name: j.name.clone(),
                d: j.d,
                q: j.q,
                m: j.m,
                parameters: model.network.weight_count(),
                seed,
                final_rmse: model.metadata.final_rmse,
            };
            Ok((model, report))
        })
        .collect();
    let mut models = BTreeMap::new();
    let mut reports = Vec::new();
    for r in fitted {
        let (m, rep) = r?;
        models.insert(rep.name.clone(), m);
        reports.push(rep);
    }
    Ok((models, reports))
}

fn infer_all(
    bp: &ModelBlueprint,
    graph: &FactorGraph,
    dataset: &GridDataset,
    columns: &[usize],
    config: &InferenceConfig,
) -> Result<Vec<InferenceResult>> {
    (0..dataset.hours())
        .into_par_iter()
        .map(|t| {
            let ev = bp.evidence(graph, dataset, columns, t);
            run_inference(graph, &ev, config).map_err(|e| match e {
                Error::Observability { variables } => Error::Observability {
                    variables: variables
                        .into_iter()
                        .map(|v| format!("{v} (hour {t})"))
                        .collect(),
                },
                other => other,
            })
        })
        .collect()
}

fn mean_rmse(reports: &[FactorReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().map(|r| r.final_rmse).sum::<f64>() / reports.len() as f64
}

fn with_prior_means(bp: &ModelBlueprint, states: &States) -> ModelBlueprint {
    let mut out = bp.clone();
    let n = states.len().max(1) as f64;
    for (v, var) in out.variables.iter_mut().enumerate() {
        let mut mean = DVector::zeros(var.dim());
        for s in states {
            mean += &s[v];
        }
        var.prior_mean = (mean / n).iter().cloned().collect();
    }
    out.refresh_document();
    out
}

/// Trains one NLPCA model per joint factor of `blueprint` on `dataset`.
///
/// Iteration 1 fits on the observed entries only. Each later iteration
/// infers every sample's state with the current models, fills the missing
/// entries with those estimates and refits on the completed samples; a
/// refit that raises the mean training RMSE is discarded.
pub fn em_train(
    blueprint: &ModelBlueprint,
    dataset: &GridDataset,
    config: &EmConfig,
) -> Result<TrainedModel> {
    if config.em_iters == 0 {
        return Err(Error::Domain("em_iters must be at least 1".into()));
    }
    let columns = blueprint.series_columns(dataset)?;
    let (raw, masks) = bootstrap(blueprint, dataset, &columns)?;
    let mut states = raw.clone();
    let bp = with_prior_means(blueprint, &raw);
    let full: Vec<Vec<Vec<bool>>> = masks
        .iter()
        .map(|m| m.iter().map(|v| vec![true; v.len()]).collect())
        .collect();

    let (mut best_models, mut best_factors) = fit_joints(&bp, &states, &masks, config)?;
    let mut best_rmse = mean_rmse(&best_factors);
    let mut best_iteration = 1;
    let mut iterations = vec![IterationReport {
        iteration: 1,
        training_rmse: best_rmse,
        accepted: true,
        state_change: None,
        mean_inference_iterations: 0.0,
    }];

    // after a rejected refit the next iteration would repeat it exactly
    let mut stale: Option<IterationReport> = None;
    for iteration in 2..=config.em_iters {
        if let Some(prev) = &stale {
            iterations.push(IterationReport {
                iteration,
                state_change: Some(0.0),
                ..prev.clone()
            });
            continue;
        }
        let shared = best_models
            .iter()
            .map(|(k, v)| (k.clone(), Arc::new(v.clone())))
            .collect();
        let graph = bp.instantiate(&shared)?;
        let results = infer_all(&bp, &graph, dataset, &columns, &config.inference)?;
        let mean_iters =
            results.iter().map(|r| r.iterations as f64).sum::<f64>() / results.len() as f64;
        // observed entries keep their readings; only gaps take the E-step
        // estimates
        let completed: States = results
            .into_iter()
            .zip(raw.iter().zip(&masks))
            .map(|(r, (x, m))| {
                r.estimates
                    .into_iter()
                    .zip(x.iter().zip(m))
                    .map(|(est, (obs, on))| {
                        DVector::from_iterator(
                            est.len(),
                            (0..est.len()).map(|k| if on[k] { obs[k] } else { est[k] }),
                        )
                    })
                    .collect()
            })
            .collect();
        let mut change: f64 = 0.0;
        for (a, b) in states.iter().flatten().zip(completed.iter().flatten()) {
            change = change.max((a - b).amax());
        }
        states = completed;
        let (models, factors) = fit_joints(&bp, &states, &full, config)?;
        let rmse = mean_rmse(&factors);
        let accepted = rmse <= best_rmse;
        if accepted {
            best_models = models;
            best_factors = factors;
            best_rmse = rmse;
            best_iteration = iteration;
        }
        let report = IterationReport {
            iteration,
            training_rmse: rmse,
            accepted,
            state_change: Some(change),
            mean_inference_iterations: mean_iters,
        };
        if !accepted {
            stale = Some(report.clone());
        }
        iterations.push(report);
    }

    Ok(TrainedModel {
        format: TRAINED_FORMAT.into(),
        version: TRAINED_VERSION,
        blueprint: bp,
        models: best_models,
        inference: config.inference.clone(),
        report: TrainingReport {
            seed: config.seed,
            em_iters: config.em_iters,
            samples: dataset.hours(),
            iterations,
            best_iteration,
            factors: best_factors,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableResidual {
    pub name: String,
    pub evaluated: usize,
    pub rmse: f64,
    pub mean_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Over the masked entries, or every entry when nothing is masked.
    pub rmse: f64,
    pub evaluated: usize,
    pub masked_only: bool,
    pub per_variable: Vec<VariableResidual>,
    /// Estimates laid out like `dataset.measured`; series outside the
    /// blueprint stay NaN.
    pub estimates: DMatrix<f64>,
    /// Marginal variances, same layout.
    pub variances: DMatrix<f64>,
}

/// Per-hour inference results for `dataset` under its observation mask.
pub fn infer_dataset(
    model: &TrainedModel,
    dataset: &GridDataset,
) -> Result<(Vec<usize>, Vec<InferenceResult>)> {
    let bp = &model.blueprint;
    let columns = bp.series_columns(dataset)?;
    let graph = model.graph()?;
    let results = infer_all(bp, &graph, dataset, &columns, &model.inference)?;
    Ok((columns, results))
}

/// Imputes `dataset` and scores the estimates against its ground truth.
pub fn evaluate(model: &TrainedModel, dataset: &GridDataset) -> Result<Evaluation> {
    let truth = dataset
        .truth
        .as_ref()
        .ok_or_else(|| Error::Domain("evaluation needs a dataset with ground truth".into()))?;
    let (columns, results) = infer_dataset(model, dataset)?;
    let bp = &model.blueprint;
    let shape = dataset.measured.shape();
    let mut estimates = DMatrix::from_element(shape.0, shape.1, f64::NAN);
    let mut variances = DMatrix::from_element(shape.0, shape.1, f64::NAN);
    for (t, r) in results.iter().enumerate() {
        for (c, &col) in bp.conditionals.iter().zip(&columns) {
            estimates[(t, col)] = r.estimates[c.var][c.component];
            variances[(t, col)] = r.covariances[c.var][(c.component, c.component)];
        }
    }
    let masked_only = columns
        .iter()
        .any(|&col| (0..shape.0).any(|t| !dataset.observed[(t, col)]));
    let mut sums = vec![(0usize, 0.0f64, 0.0f64); bp.variables.len()];
    for (c, &col) in bp.conditionals.iter().zip(&columns) {
        for t in 0..shape.0 {
            if masked_only && dataset.observed[(t, col)] {
                continue;
            }
            let e = estimates[(t, col)] - truth[(t, col)];
            let acc = &mut sums[c.var];
            acc.0 += 1;
            acc.1 += e * e;
            acc.2 += e;
        }
    }
    let evaluated: usize = sums.iter().map(|s| s.0).sum();
    if evaluated == 0 {
        return Err(Error::Domain("no entries to evaluate".into()));
    }
    let total: f64 = sums.iter().map(|s| s.1).sum();
    let per_variable = bp
        .variables
        .iter()
        .zip(&sums)
        .map(|(v, &(n, sq, sum))| VariableResidual {
            name: v.name.clone(),
            evaluated: n,
            rmse: if n > 0 {
                (sq / n as f64).sqrt()
            } else {
                f64::NAN
            },
            mean_residual: if n > 0 { sum / n as f64 } else { f64::NAN },
        })
        .collect();
    Ok(Evaluation {
        rmse: (total / evaluated as f64).sqrt(),
        evaluated,
        masked_only,
        per_variable,
        estimates,
        variances,
    })
}
