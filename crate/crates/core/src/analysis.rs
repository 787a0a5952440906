//! Dense oracle, centralized baseline, error metrics, residual z-tests and
//! the scaling benchmark.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::builder::{build_blueprint, ModelBlueprint};
use crate::datagen::{generate, mask_missing, GridDataset, Kind, SeriesKey};
use crate::error::{Error, Result};
use crate::graph::{
    initial_point, linearize_factors, schedule, sweep, update_estimates, Evidence, FactorGraph,
    InferenceConfig, Topology,
};
use crate::nlpca::{param_count, AvailabilityMask, InvertConfig, NlpcaModel, TrainConfig};
use crate::partition::{ConnectivityGraph, PartitionResult};
use crate::seeds;
use crate::trainer::{em_train, evaluate, infer_dataset, EmConfig, TrainedModel};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseSolution {
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

/// Exact marginals of the Gaussian obtained by linearizing every factor at
/// `x` and summing them into one global canonical form.
pub fn dense_solve(
    graph: &FactorGraph,
    evidence: &Evidence,
    x: &[DVector<f64>],
    invert: &InvertConfig,
) -> Result<DenseSolution> {
    if x.len() != graph.variables.len() {
        return Err(Error::dim(
            "linearization point",
            graph.variables.len(),
            x.len(),
        ));
    }
    let mut offsets = Vec::with_capacity(x.len());
    let mut total = 0;
    for v in &graph.variables {
        offsets.push(total);
        total += v.dim();
    }
    let lin = linearize_factors(graph, evidence, x, None, invert)?;
    let mut j = DMatrix::<f64>::zeros(total, total);
    let mut h = DVector::<f64>::zeros(total);
    for (factor, canon) in graph.factors.iter().zip(&lin.factors) {
        let mut positions = Vec::new();
        for v in factor.variables() {
            positions.extend((0..graph.variable(v).dim()).map(|k| offsets[v.0] + k));
        }
        for (a, &pa) in positions.iter().enumerate() {
            h[pa] += canon.information()[a];
            for (b, &pb) in positions.iter().enumerate() {
                j[(pa, pb)] += canon.precision()[(a, b)];
            }
        }
    }
    let cov = j
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Observability {
            variables: graph
                .variables
                .iter()
                .enumerate()
                .filter(|(i, v)| (0..v.dim()).any(|k| j[(offsets[*i] + k, offsets[*i] + k)] <= 0.0))
                .map(|(_, v)| v.name.clone())
                .collect(),
        })?;
    let delta = &cov * h;
    let mut means = Vec::new();
    let mut covariances = Vec::new();
    for (i, v) in graph.variables.iter().enumerate() {
        let (o, d) = (offsets[i], v.dim());
        means.push(&x[i] + delta.rows(o, d));
        covariances.push(cov.view((o, o), (d, d)).into_owned());
    }
    Ok(DenseSolution { means, covariances })
}

/// Root mean square of `estimates − truth` over entries where `evaluate`
/// is set.
pub fn rmse(estimates: &[f64], truth: &[f64], evaluate: &[bool]) -> Result<f64> {
    if estimates.len() != truth.len() {
        return Err(Error::dim("rmse truth", estimates.len(), truth.len()));
    }
    if estimates.len() != evaluate.len() {
        return Err(Error::dim("rmse mask", estimates.len(), evaluate.len()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((e, t), &on) in estimates.iter().zip(truth).zip(evaluate) {
        if on {
            sum += (e - t).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Domain("rmse over an empty evaluation set".into()));
    }
    Ok((sum / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZTest {
    pub n: usize,
    pub mean_residual: f64,
    pub sigma: f64,
    pub z: f64,
    /// `Φ(z)`.
    pub probability: f64,
    pub flagged: bool,
}

/// `z = mean·√n / σ`, flagged when `Φ(z)` leaves `[1 − threshold, threshold]`.
pub fn z_test(residuals: &[f64], sigma: f64, threshold: f64) -> Result<ZTest> {
    if residuals.is_empty() {
        return Err(Error::Domain("z-test needs at least one residual".into()));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!(
            "z-test sigma must be positive, got {sigma}"
        )));
    }
    if !(0.5..1.0).contains(&threshold) {
        return Err(Error::Domain(format!(
            "threshold {threshold} outside [0.5, 1)"
        )));
    }
    let n = residuals.len();
    let mean = residuals.iter().sum::<f64>() / n as f64;
    let z = mean * (n as f64).sqrt() / sigma;
    let probability = Normal::standard().cdf(z);
    Ok(ZTest {
        n,
        mean_residual: mean,
        sigma,
        z,
        probability,
        flagged: probability > threshold || probability < 1.0 - threshold,
    })
}

/// Prediction residuals of one sensor with the sensor's own reading
/// removed from the estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorResiduals {
    pub series: SeriesKey,
    pub hours: Vec<usize>,
    /// Predicted minus measured.
    pub residuals: Vec<f64>,
    /// Variance of each residual under the model.
    pub variances: Vec<f64>,
}

/// Residuals of every observed reading of the sensors whose kind is in
/// `kinds`.
///
/// The leave-one-out prediction is the marginal with the sensor's own
/// Gaussian factor divided out.
pub fn sensor_residuals(
    model: &TrainedModel,
    dataset: &GridDataset,
    kinds: &[Kind],
) -> Result<Vec<SensorResiduals>> {
    let (columns, results) = infer_dataset(model, dataset)?;
    let bp = &model.blueprint;
    let mut out = Vec::new();
    for (c, &col) in bp.conditionals.iter().zip(&columns) {
        if !kinds.contains(&c.series.kind) {
            continue;
        }
        let mut sr = SensorResiduals {
            series: c.series,
            hours: Vec::new(),
            residuals: Vec::new(),
            variances: Vec::new(),
        };
        for (t, r) in results.iter().enumerate() {
            if !dataset.observed[(t, col)] {
                continue;
            }
            let y = dataset.measured[(t, col)];
            let m = r.estimates[c.var][c.component];
            let s = r.covariances[c.var][(c.component, c.component)];
            let prec = 1.0 / s - 1.0 / c.variance;
            if !(prec > 0.0) || !prec.is_finite() {
                continue;
            }
            let mu = (m / s - y / c.variance) / prec;
            sr.hours.push(t);
            sr.residuals.push(mu - y);
            sr.variances.push(1.0 / prec + c.variance);
        }
        out.push(sr);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub threshold: f64,
    pub kinds: Vec<Kind>,
    /// Calibrate each kind's residual spread from its own window, see
    /// [`calibrate_kind`]. Without it σ is the bare model variance.
    #[serde(default = "default_calibrate")]
    pub calibrate: bool,
}

fn default_calibrate() -> bool {
    true
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            threshold: 0.99,
            kinds: vec![Kind::Solar],
            calibrate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorFlag {
    pub series: SeriesKey,
    pub test: ZTest,
}

/// Fewest sensors of one kind from which a calibration is pooled.
pub const MIN_POOLED_SENSORS: usize = 3;

/// Window statistics shared by the sensors of one kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindCalibration {
    /// Median ratio of sample to model residual variance, at least 1.
    pub variance_scale: f64,
    /// Median lag-1 autocorrelation of the residuals, in `[0, 0.95]`.
    pub correlation: f64,
    /// Variance `β²` of the per-window model offset.
    pub offset_variance: f64,
}

impl KindCalibration {
    pub const NONE: Self = Self {
        variance_scale: 1.0,
        correlation: 0.0,
        offset_variance: 0.0,
    };

    /// Variance of the window mean of `sr`'s residuals.
    pub fn mean_variance(&self, sr: &SensorResiduals) -> f64 {
        let n = sr.residuals.len() as f64;
        let rho = self.correlation;
        self.variance_scale * mean(&sr.variances) * (1.0 + rho) / (1.0 - rho) / n
            + self.offset_variance
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Lag-1 autocorrelation over pairs of consecutive hours.
fn lag_one(sr: &SensorResiduals) -> f64 {
    let m = mean(&sr.residuals);
    let c0: f64 = sr.residuals.iter().map(|r| (r - m).powi(2)).sum();
    if !(c0 > 0.0) {
        return 0.0;
    }
    let c1: f64 = (1..sr.residuals.len())
        .filter(|&i| sr.hours[i] == sr.hours[i - 1] + 1)
        .map(|i| (sr.residuals[i] - m) * (sr.residuals[i - 1] - m))
        .sum();
    c1 / c0
}

/// Pools a calibration over the sensors of one kind.
///
/// The model residual variance is scaled by the median sample-to-model
/// ratio and by the AR(1) factor `(1+ρ)/(1−ρ)` of the median lag-1
/// autocorrelation. Medians keep one disturbed sensor from widening its
/// own test. Each window mean is then modelled as `b + ē` with
/// `b ~ N(0, β²)` and `ē` the averaged noise; `β²` is the mean square of
/// the sensor means less the median noise part, floored at zero. The
/// offset includes every sensor, which keeps the test conservative when
/// one disturbance shifts several coupled sensors at once.
pub fn calibrate_kind(sensors: &[SensorResiduals]) -> KindCalibration {
    let usable: Vec<&SensorResiduals> = sensors.iter().filter(|s| s.residuals.len() >= 2).collect();
    if usable.len() < MIN_POOLED_SENSORS {
        return KindCalibration::NONE;
    }
    let mut ratios: Vec<f64> = usable
        .iter()
        .filter_map(|sr| {
            let m = mean(&sr.residuals);
            let n = sr.residuals.len() as f64;
            let sample = sr.residuals.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1.0);
            let model = mean(&sr.variances);
            (model > 0.0).then(|| sample / model)
        })
        .collect();
    let variance_scale = if ratios.is_empty() {
        1.0
    } else {
        median(&mut ratios).max(1.0)
    };
    let mut rhos: Vec<f64> = usable.iter().map(|sr| lag_one(sr)).collect();
    let correlation = median(&mut rhos).clamp(0.0, 0.95);
    let base = KindCalibration {
        variance_scale,
        correlation,
        offset_variance: 0.0,
    };
    let square = usable
        .iter()
        .map(|sr| mean(&sr.residuals).powi(2))
        .sum::<f64>()
        / usable.len() as f64;
    let mut noise: Vec<f64> = usable.iter().map(|sr| base.mean_variance(sr)).collect();
    KindCalibration {
        offset_variance: (square - median(&mut noise)).max(0.0),
        ..base
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

/// Z-tests of each selected sensor's residuals over the whole window,
/// with `σ/√n` the standard deviation of the window mean under
/// [`calibrate_kind`] (or the bare model variance when `calibrate` is off).
pub fn detect(
    model: &TrainedModel,
    dataset: &GridDataset,
    config: &DetectConfig,
) -> Result<Vec<SensorFlag>> {
    let mut residuals = sensor_residuals(model, dataset, &config.kinds)?;
    residuals.retain(|s| !s.residuals.is_empty());
    window_tests(&residuals, config)
}

fn window_tests(residuals: &[SensorResiduals], config: &DetectConfig) -> Result<Vec<SensorFlag>> {
    let mut calibration = std::collections::BTreeMap::new();
    if config.calibrate {
        for kind in &config.kinds {
            let group: Vec<SensorResiduals> = residuals
                .iter()
                .filter(|s| s.series.kind == *kind)
                .cloned()
                .collect();
            calibration.insert(*kind, calibrate_kind(&group));
        }
    }
    let mut out = Vec::new();
    for sr in residuals.iter().filter(|s| !s.residuals.is_empty()) {
        let cal = calibration
            .get(&sr.series.kind)
            .copied()
            .unwrap_or(KindCalibration::NONE);
        let sigma = (cal.mean_variance(sr) * sr.residuals.len() as f64).sqrt();
        out.push(SensorFlag {
            series: sr.series,
            test: z_test(&sr.residuals, sigma, config.threshold)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub nlpca: TrainConfig,
    pub invert: InvertConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            nlpca: TrainConfig::default(),
            invert: InvertConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub d: usize,
    pub parameters: usize,
    pub rmse: f64,
    pub evaluated: usize,
}

/// One NLPCA model over every series in `blueprint`, trained on `train`
/// and scored on the masked entries of `test` (all entries when nothing is
/// masked).
pub fn centralized_baseline(
    blueprint: &ModelBlueprint,
    train: &GridDataset,
    test: &GridDataset,
    config: &BaselineConfig,
) -> Result<BaselineResult> {
    let truth = test
        .truth
        .as_ref()
        .ok_or_else(|| Error::Domain("baseline evaluation needs ground truth".into()))?;
    let train_cols = blueprint.series_columns(train)?;
    let test_cols = blueprint.series_columns(test)?;
    let d = train_cols.len();
    if d < 2 {
        return Err(Error::Domain(format!(
            "centralized model needs d >= 2, got {d}"
        )));
    }
    let values = DMatrix::from_fn(train.hours(), d, |t, i| {
        let v = train.measured[(t, train_cols[i])];
        if v.is_finite() {
            v
        } else {
            0.0
        }
    });
    let masks: Vec<AvailabilityMask> = (0..train.hours())
        .map(|t| {
            AvailabilityMask(
                train_cols
                    .iter()
                    .map(|&c| train.observed[(t, c)] && train.measured[(t, c)].is_finite())
                    .collect(),
            )
        })
        .collect();
    let model = NlpcaModel::fit(&values, &masks, &config.nlpca)?;
    let masked_only = test_cols
        .iter()
        .any(|&c| (0..test.hours()).any(|t| !test.observed[(t, c)]));
    let (mut est, mut tru, mut on) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..test.hours() {
        let mask = AvailabilityMask(test_cols.iter().map(|&c| test.observed[(t, c)]).collect());
        let x = DVector::from_iterator(
            d,
            test_cols.iter().map(|&c| {
                if test.observed[(t, c)] {
                    test.measured[(t, c)]
                } else {
                    0.0
                }
            }),
        );
        let r = model.reconstruct(&x, &mask, &config.invert)?;
        for (i, &c) in test_cols.iter().enumerate() {
            est.push(r[i]);
            tru.push(truth[(t, c)]);
            on.push(!masked_only || !mask.0[i]);
        }
    }
    Ok(BaselineResult {
        d,
        parameters: model.network.weight_count(),
        rmse: rmse(&est, &tru, &on)?,
        evaluated: on.iter().filter(|&&b| b).count(),
    })
}

/// Sections of `size` consecutive buses.
pub fn block_partition(graph: &ConnectivityGraph, size: usize) -> Result<PartitionResult> {
    if size == 0 {
        return Err(Error::Domain("section size must be positive".into()));
    }
    PartitionResult::from_assignment(graph, (0..graph.n).map(|b| b / size).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub buses_per_section: usize,
    pub kinds: Vec<Kind>,
    pub hours: usize,
    pub train_hours: usize,
    pub seed: u64,
    /// Timed sweeps per size; the fastest counts.
    pub repeats: usize,
    /// Train and score imputation at 10% missing for every size.
    pub evaluate: bool,
    pub em: EmConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            buses_per_section: 2,
            kinds: Kind::ALL.to_vec(),
            hours: 72,
            train_hours: 48,
            seed: 0,
            repeats: 7,
            evaluate: true,
            em: EmConfig {
                em_iters: 1,
                nlpca: TrainConfig {
                    epochs: 300,
                    ..TrainConfig::default()
                },
                inference: InferenceConfig::default(),
                seed: 0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub sections: usize,
    pub variables: usize,
    pub graph_parameters: usize,
    pub centralized_parameters: usize,
    pub iteration_seconds: f64,
    pub rmse_10: Option<f64>,
}

/// Blueprint for `sections` sections of the configured size on a fresh
/// synthetic grid, with the dataset it was built from.
pub fn bench_system(
    sections: usize,
    config: &BenchConfig,
) -> Result<(ModelBlueprint, GridDataset)> {
    let buses = sections * config.buses_per_section;
    let ds = generate(buses.max(2), config.hours, config.seed)?;
    let part = block_partition(&ds.topology, config.buses_per_section)?;
    let quantities = vec![config.kinds.clone(); ds.buses()];
    let bp = build_blueprint(&part, &quantities, &ds.noise)?;
    Ok((bp, ds))
}

/// Untrained models of the right shapes, seeded from the init stream.
fn random_models(bp: &ModelBlueprint, ds: &GridDataset, seed: u64) -> Result<TrainedModel> {
    let config = EmConfig {
        em_iters: 1,
        nlpca: TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
        seed: seeds::derive(seed, seeds::INIT),
        ..EmConfig::default()
    };
    em_train(bp, ds, &config)
}

/// Fastest of `repeats` timed sweep-and-update passes over the factors of
/// `graph` linearized at hour 0.
pub fn time_iteration(model: &TrainedModel, ds: &GridDataset, repeats: usize) -> Result<f64> {
    let graph = model.graph()?;
    let columns = model.blueprint.series_columns(ds)?;
    let ev = model.blueprint.evidence(&graph, ds, &columns, 0);
    let x = initial_point(&graph, &ev);
    let lin = linearize_factors(&graph, &ev, &x, None, &model.inference.invert)?;
    let topo = Topology::of(&graph)?;
    let order = schedule(&graph)?;
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let messages = sweep(&graph, &lin.factors, &topo, &order)?;
        let updates = update_estimates(&graph, &messages)?;
        std::hint::black_box(&updates);
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}

pub fn scaling_benchmark(sizes: &[usize], config: &BenchConfig) -> Result<Vec<BenchRow>> {
    if config.train_hours == 0 || config.train_hours >= config.hours {
        return Err(Error::Domain(format!(
            "train_hours {} must lie in 1..{}",
            config.train_hours, config.hours
        )));
    }
    let mut rows = Vec::new();
    for &sections in sizes {
        if sections == 0 {
            return Err(Error::Domain("section count must be positive".into()));
        }
        let (bp, ds) = bench_system(sections, config)?;
        let variables = bp.state_dim();
        let train = ds.slice_hours(0, config.train_hours)?;
        let (model, rmse_10) = if config.evaluate {
            let em = EmConfig {
                seed: config.seed,
                ..config.em.clone()
            };
            let model = em_train(&bp, &train, &em)?;
            let test = mask_missing(
                &ds.slice_hours(config.train_hours, config.hours)?,
                0.1,
                config.seed,
            )?;
            let score = evaluate(&model, &test)?.rmse;
            (model, Some(score))
        } else {
            (random_models(&bp, &train, config.seed)?, None)
        };
        rows.push(BenchRow {
            sections,
            variables,
            graph_parameters: bp.parameter_count()?,
            centralized_parameters: param_count(variables)?,
            iteration_seconds: time_iteration(&model, &ds, config.repeats)?,
            rmse_10,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(
        "sections,variables,graph_parameters,centralized_parameters,iteration_seconds,rmse_10\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:e},{}\n",
            r.sections,
            r.variables,
            r.graph_parameters,
            r.centralized_parameters,
            r.iteration_seconds,
            r.rmse_10
                .map_or_else(|| "NA".to_string(), |v| format!("{v:e}"))
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{
        run_inference, ConditionalFactor, JointFactor, JointForm, JointModel, VarId, VariableNode,
    };
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0], &[true, true]).unwrap(), 0.0);
        assert_eq!(
            rmse(&[2.0, 3.0, 9.0], &[1.0, 2.0, 0.0], &[true, true, false]).unwrap(),
            1.0
        );
        assert!(
            (rmse(&[1.0, 2.0], &[0.0, 0.0], &[true, true]).unwrap() - 2.5f64.sqrt()).abs() < 1e-15
        );
        assert!(rmse(&[1.0], &[0.0], &[false]).is_err());
        assert!(rmse(&[1.0], &[0.0, 1.0], &[true]).is_err());
    }

    #[test]
    fn z_test_examples() {
        let t = z_test(&[1.0, -1.0], 1.0, 0.99).unwrap();
        assert_eq!(t.probability, 0.5);
        assert!(!t.flagged);
        let t = z_test(&[3.0], 1.0, 0.99).unwrap();
        assert!((t.probability - 0.998650101968).abs() < 1e-9);
        assert!(t.flagged);
        assert!(z_test(&[1.0], 0.0, 0.99).is_err());
        assert!(z_test(&[], 1.0, 0.99).is_err());
    }

    #[test]
    fn z_test_is_antisymmetric() {
        let r = [0.3, -0.1, 0.7];
        let a = z_test(&r, 0.4, 0.99).unwrap();
        let b = z_test(&r.map(|v| -v), 0.4, 0.99).unwrap();
        assert!((a.probability - (1.0 - b.probability)).abs() < 1e-15);
    }

    #[test]
    fn dense_single_factor_moments() {
        let mut g = FactorGraph::new();
        let v = g.add_variable(VariableNode::new("x", vec!["x".into()]));
        let mut c = ConditionalFactor::identity("y", v, 0, 0.25);
        c.observation = dvector![2.0];
        c.available = vec![true];
        g.add_conditional(c);
        let ev = Evidence::from_graph(&g);
        let sol = dense_solve(&g, &ev, &[dvector![0.0]], &InvertConfig::default()).unwrap();
        assert!((sol.means[0][0] - 2.0).abs() < 1e-15);
        assert!((sol.covariances[0][(0, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn dense_independent_blocks() {
        let mut g = FactorGraph::new();
        let a = g.add_variable(VariableNode::new("a", vec!["a".into()]));
        let b = g.add_variable(VariableNode::new("b", vec!["b".into()]));
        for (v, y, r) in [(a, 1.0, 0.5), (b, -3.0, 2.0)] {
            let mut c = ConditionalFactor::identity(format!("s{}", v.0), v, 0, r);
            c.observation = dvector![y];
            c.available = vec![true];
            g.add_conditional(c);
        }
        let ev = Evidence::from_graph(&g);
        let sol = dense_solve(
            &g,
            &ev,
            &[dvector![0.0], dvector![0.0]],
            &InvertConfig::default(),
        )
        .unwrap();
        assert!((sol.means[0][0] - 1.0).abs() < 1e-14 && (sol.means[1][0] + 3.0).abs() < 1e-14);
        assert!((sol.covariances[1][(0, 0)] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn dense_matches_tree_inference_on_a_chain() {
        let mut g = FactorGraph::new();
        let a = g.add_variable(VariableNode::new("a", vec!["a0".into(), "a1".into()]));
        let b = g.add_variable(VariableNode::new("b", vec!["b0".into()]));
        let mut c = ConditionalFactor::identity("sa", a, 0, 0.1);
        c.observation = dvector![1.0];
        c.available = vec![true];
        g.add_conditional(c);
        g.add_joint(JointFactor {
            name: "ab".into(),
            vars: vec![a, VarId(b.0)],
            model: JointModel::gaussian(
                dvector![0.5, 0.0, -1.0],
                dmatrix![1.0, 0.3, 0.1; 0.3, 2.0, 0.2; 0.1, 0.2, 1.5],
            ),
            form: JointForm::Residual,
        });
        let ev = Evidence::from_graph(&g);
        let x0 = initial_point(&g, &ev);
        let bp = run_inference(&g, &ev, &InferenceConfig::default()).unwrap();
        let dense = dense_solve(&g, &ev, &x0, &InvertConfig::default()).unwrap();
        for i in 0..2 {
            assert!((&bp.estimates[i] - &dense.means[i]).amax() < 1e-10);
            assert!((&bp.covariances[i] - &dense.covariances[i]).amax() < 1e-10);
        }
    }

    #[test]
    fn singular_global_precision_is_unobservable() {
        let mut g = FactorGraph::new();
        let a = g.add_variable(VariableNode::new("a", vec!["a".into()]));
        let v = g.add_variable(VariableNode::new("free", vec!["f".into()]));
        let mut c = ConditionalFactor::identity("sa", a, 0, 0.1);
        c.observation = dvector![1.0];
        c.available = vec![true];
        g.add_conditional(c);
        g.add_conditional(ConditionalFactor::identity("sf", v, 0, 0.1));
        let ev = Evidence::from_graph(&g);
        match dense_solve(
            &g,
            &ev,
            &[dvector![0.0], dvector![0.0]],
            &InvertConfig::default(),
        ) {
            Err(Error::Observability { variables }) => {
                assert_eq!(variables, vec!["free".to_string()])
            }
            other => panic!("{other:?}"),
        }
    }

    fn sensor(bus: usize, residuals: Vec<f64>, variance: f64) -> SensorResiduals {
        SensorResiduals {
            series: SeriesKey {
                bus,
                kind: Kind::Solar,
            },
            hours: (0..residuals.len()).collect(),
            variances: vec![variance; residuals.len()],
            residuals,
        }
    }

    #[test]
    fn calibration_examples() {
        // means 1, -1, 2, -2 with negligible noise: mean square 2.5
        let group: Vec<SensorResiduals> = [1.0, -1.0, 2.0, -2.0]
            .iter()
            .enumerate()
            .map(|(b, &m)| sensor(b, vec![m; 4], 0.0))
            .collect();
        let cal = calibrate_kind(&group);
        assert_eq!((cal.variance_scale, cal.correlation), (1.0, 0.0));
        assert!((cal.offset_variance - 2.5).abs() < 1e-12);
        // noise that explains the spread leaves no offset
        let noisy: Vec<SensorResiduals> = (0..4).map(|b| sensor(b, vec![0.1; 4], 4.0)).collect();
        assert_eq!(calibrate_kind(&noisy), KindCalibration::NONE);
        assert_eq!(calibrate_kind(&group[..2]), KindCalibration::NONE);
        // alternating ±1 against model variance 0.25: sample variance 8/7, anticorrelated
        let alternating: Vec<SensorResiduals> = (0..3)
            .map(|b| {
                sensor(
                    b,
                    (0..8)
                        .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
                        .collect(),
                    0.25,
                )
            })
            .collect();
        let cal = calibrate_kind(&alternating);
        assert!((cal.variance_scale - 32.0 / 7.0).abs() < 1e-12);
        assert_eq!(cal.correlation, 0.0);
        // slow square wave: lag-1 autocorrelation 5/8, AR(1) factor 13/3
        let slow: Vec<SensorResiduals> = (0..3)
            .map(|b| sensor(b, vec![1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0], 8.0))
            .collect();
        let cal = calibrate_kind(&slow);
        assert!((cal.correlation - 0.625).abs() < 1e-12);
        assert!((cal.mean_variance(&slow[0]) - 8.0 * 13.0 / 3.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn a_gap_in_the_hours_breaks_the_lag() {
        let mut sr = sensor(0, vec![1.0, 1.0, -1.0, -1.0], 1.0);
        assert!((lag_one(&sr) - 0.25).abs() < 1e-12);
        sr.hours = vec![0, 1, 5, 6];
        assert!((lag_one(&sr) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn block_partition_sizes() {
        let g = ConnectivityGraph::new(5, [(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap();
        let p = block_partition(&g, 2).unwrap();
        assert_eq!(p.sections, vec![vec![0, 1], vec![2, 3], vec![4]]);
    }

    #[test]
    fn parameter_counts_favour_the_graph_model() {
        let config = BenchConfig {
            evaluate: false,
            ..BenchConfig::default()
        };
        for sections in [10, 20] {
            let (bp, _) = bench_system(sections, &config).unwrap();
            assert!(bp.parameter_count().unwrap() < param_count(bp.state_dim()).unwrap());
        }
    }
}
