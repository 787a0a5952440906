//! Factor-graph data model, tree message passing and the outer
//! relinearize-and-update inference loop.

mod inference;
mod io;
mod messages;
mod schedule;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::nlpca::NlpcaModel;

pub use inference::{
    initial_point, linearize_factors, observed_components, run_inference, Evidence,
    InferenceConfig, InferenceResult, Linearization, Observation,
};
pub use io::{GraphDocument, GRAPH_FORMAT, GRAPH_VERSION};
pub use messages::{
    message_factor_to_var, message_var_to_factor, sweep, update_estimates, Message, MessageSet,
    VariableUpdate,
};
pub use schedule::{schedule, DirectedEdge, Direction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VarId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FactorId(pub usize);

/// Endpoint of a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Node {
    Var(VarId),
    Factor(FactorId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableNode {
    pub name: String,
    pub labels: Vec<String>,
    pub estimate: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Fallback linearization point for unobserved components.
    pub prior_mean: DVector<f64>,
}

impl VariableNode {
    pub fn new(name: impl Into<String>, labels: Vec<String>) -> Self {
        let d = labels.len();
        Self {
            name: name.into(),
            labels,
            estimate: DVector::zeros(d),
            covariance: DMatrix::identity(d, d),
            prior_mean: DVector::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.estimate.len()
    }
}

/// Components of one variable that feed a conditional factor's mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeEntry {
    pub var: VarId,
    pub components: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mapping {
    Identity,
    Linear(DMatrix<f64>),
}

impl Mapping {
    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            Mapping::Identity => input_dim,
            Mapping::Linear(a) => a.nrows(),
        }
    }

    pub fn matrix(&self, input_dim: usize) -> DMatrix<f64> {
        match self {
            Mapping::Identity => DMatrix::identity(input_dim, input_dim),
            Mapping::Linear(a) => a.clone(),
        }
    }
}

/// Sensor factor `p(y | x)` with `y = f(x_scope) + noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalFactor {
    pub name: String,
    pub scope: Vec<ScopeEntry>,
    pub mapping: Mapping,
    pub noise: DMatrix<f64>,
    pub observation: DVector<f64>,
    pub available: Vec<bool>,
}

impl ConditionalFactor {
    /// Identity sensor on a single component with noise variance `variance`.
    pub fn identity(name: impl Into<String>, var: VarId, component: usize, variance: f64) -> Self {
        Self {
            name: name.into(),
            scope: vec![ScopeEntry {
                var,
                components: vec![component],
            }],
            mapping: Mapping::Identity,
            noise: DMatrix::from_element(1, 1, variance),
            observation: DVector::zeros(1),
            available: vec![false],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.scope.iter().map(|s| s.components.len()).sum()
    }

    pub fn variables(&self) -> Vec<VarId> {
        dedup(self.scope.iter().map(|s| s.var))
    }
}

fn dedup(ids: impl Iterator<Item = VarId>) -> Vec<VarId> {
    let mut out: Vec<VarId> = Vec::new();
    for v in ids {
        if !out.contains(&v) {
            out.push(v);
        }
    }
    out
}

/// How a joint factor turns its reconstruction map into a canonical form.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointForm {
    /// Gauss-Newton on the reconstruction residual `x − g(x)`:
    /// `J = (I−G)ᵀ S⁻¹ (I−G)`, `h = (I−G)ᵀ S⁻¹ (g(x̄) − x̄)`.
    #[default]
    Residual,
    /// `J = Gᵀ S⁻¹ G`, `h = Gᵀ S⁻¹ (x̄ − g(x̄))`.
    Reconstruction,
}

#[derive(Debug, Clone, PartialEq)]
pub enum JointModel {
    Nlpca(Arc<NlpcaModel>),
    /// `g(x) = P·x + c` with fixed covariance `S`. With `P = 0` this is a
    /// plain Gaussian density `N(c, S)` over the scope.
    Linear {
        projection: DMatrix<f64>,
        offset: DVector<f64>,
        covariance: DMatrix<f64>,
    },
}

impl JointModel {
    pub fn output_dim(&self) -> usize {
        match self {
            JointModel::Nlpca(m) => m.output_dim(),
            JointModel::Linear { offset, .. } => offset.len(),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, JointModel::Linear { .. })
    }

    pub fn gaussian(mean: DVector<f64>, covariance: DMatrix<f64>) -> Self {
        let d = mean.len();
        JointModel::Linear {
            projection: DMatrix::zeros(d, d),
            offset: mean,
            covariance,
        }
    }
}

/// Learned density over the concatenation of full variable vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct JointFactor {
    pub name: String,
    pub vars: Vec<VarId>,
    pub model: JointModel,
    pub form: JointForm,
}

impl JointFactor {
    pub fn variables(&self) -> Vec<VarId> {
        dedup(self.vars.iter().cloned())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    Conditional(ConditionalFactor),
    Joint(JointFactor),
}

impl Factor {
    pub fn name(&self) -> &str {
        match self {
            Factor::Conditional(c) => &c.name,
            Factor::Joint(j) => &j.name,
        }
    }

    /// Distinct variables in scope order.
    pub fn variables(&self) -> Vec<VarId> {
        match self {
            Factor::Conditional(c) => c.variables(),
            Factor::Joint(j) => j.variables(),
        }
    }

    pub fn is_linear(&self) -> bool {
        match self {
            Factor::Conditional(_) => true,
            Factor::Joint(j) => j.model.is_linear(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FactorGraph {
    pub variables: Vec<VariableNode>,
    pub factors: Vec<Factor>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_variable(&mut self, node: VariableNode) -> VarId {
        self.variables.push(node);
        VarId(self.variables.len() - 1)
    }

    pub fn add_factor(&mut self, factor: Factor) -> FactorId {
        self.factors.push(factor);
        FactorId(self.factors.len() - 1)
    }

    pub fn add_conditional(&mut self, factor: ConditionalFactor) -> FactorId {
        self.add_factor(Factor::Conditional(factor))
    }

    pub fn add_joint(&mut self, factor: JointFactor) -> FactorId {
        self.add_factor(Factor::Joint(factor))
    }

    pub fn variable(&self, id: VarId) -> &VariableNode {
        &self.variables[id.0]
    }

    pub fn factor(&self, id: FactorId) -> &Factor {
        &self.factors[id.0]
    }

    pub fn edge_count(&self) -> usize {
        self.factors.iter().map(|f| f.variables().len()).sum()
    }

    pub fn all_linear(&self) -> bool {
        self.factors.iter().all(Factor::is_linear)
    }

    /// Writes per-variable estimates and covariances back into the nodes.
    pub fn apply(&mut self, result: &InferenceResult) {
        for (node, (x, s)) in self
            .variables
            .iter_mut()
            .zip(result.estimates.iter().zip(&result.covariances))
        {
            node.estimate = x.clone();
            node.covariance = s.clone();
        }
    }

    /// Fails with [`Error::Validation`] listing every violation.
    pub fn ensure_valid(&self) -> Result<()> {
        let report = validate(self);
        if report.is_valid() {
            Ok(())
        } else {
            Err(Error::Validation(report.violations))
        }
    }
}

/// Dense edge indexing of the bipartite graph. Edge `e` joins
/// `edges[e].0` and `edges[e].1`; messages are addressed by edge and
/// direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub edges: Vec<(FactorId, VarId)>,
    /// Per variable: attached factors with the joining edge.
    pub var_edges: Vec<Vec<(FactorId, usize)>>,
    /// Per factor: scope variables in order with the joining edge.
    pub factor_edges: Vec<Vec<(VarId, usize)>>,
}

impl Topology {
    pub fn of(graph: &FactorGraph) -> Result<Self> {
        let n = graph.variables.len();
        let mut edges = Vec::new();
        let mut var_edges = vec![Vec::new(); n];
        let mut factor_edges = Vec::with_capacity(graph.factors.len());
        for (fi, factor) in graph.factors.iter().enumerate() {
            let mut mine = Vec::new();
            for v in factor.variables() {
                if v.0 >= n {
                    return Err(Error::Validation(vec![format!(
                        "factor {}: references missing variable {}",
                        factor.name(),
                        v.0
                    )]));
                }
                let e = edges.len();
                edges.push((FactorId(fi), v));
                var_edges[v.0].push((FactorId(fi), e));
                mine.push((v, e));
            }
            factor_edges.push(mine);
        }
        Ok(Self {
            edges,
            var_edges,
            factor_edges,
        })
    }

    pub fn edge_between(&self, f: FactorId, v: VarId) -> Option<usize> {
        self.factor_edges
            .get(f.0)?
            .iter()
            .find(|(w, _)| *w == v)
            .map(|(_, e)| *e)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Checks acyclicity, the joint-degree bound and dimension consistency.
pub fn validate(graph: &FactorGraph) -> ValidationReport {
    let mut out = Vec::new();
    let n = graph.variables.len();
    for v in &graph.variables {
        let d = v.dim();
        if d == 0 {
            out.push(format!("variable {}: dim must be at least 1", v.name));
        }
        if v.labels.len() != d {
            out.push(format!(
                "variable {}: {} labels for dim {}",
                v.name,
                v.labels.len(),
                d
            ));
        }
        if v.prior_mean.len() != d {
            out.push(format!(
                "variable {}: prior mean has length {}",
                v.name,
                v.prior_mean.len()
            ));
        }
        if v.covariance.shape() != (d, d) {
            out.push(format!(
                "variable {}: covariance shape {:?}",
                v.name,
                v.covariance.shape()
            ));
        } else if d > 0 {
            let asym = (&v.covariance - v.covariance.transpose()).amax();
            if asym > 1e-9 * v.covariance.amax().max(1.0) || !linalg::is_psd(&v.covariance, 1e-9) {
                out.push(format!(
                    "variable {}: covariance is not symmetric PSD",
                    v.name
                ));
            }
        }
    }

    let mut joint_degree = vec![0usize; n];
    for f in &graph.factors {
        let name = f.name();
        let mut dangling = false;
        let mut seen = Vec::new();
        let scope_vars: Vec<VarId> = match f {
            Factor::Conditional(c) => c.scope.iter().map(|s| s.var).collect(),
            Factor::Joint(j) => j.vars.clone(),
        };
        for v in &scope_vars {
            if v.0 >= n {
                out.push(format!(
                    "factor {name}: references missing variable {}",
                    v.0
                ));
                dangling = true;
            } else if seen.contains(v) {
                out.push(format!(
                    "factor {name}: lists variable {} twice",
                    graph.variables[v.0].name
                ));
            } else {
                seen.push(*v);
            }
        }
        if scope_vars.is_empty() {
            out.push(format!("factor {name}: empty scope"));
        }
        if dangling {
            continue;
        }
        match f {
            Factor::Conditional(c) => {
                for s in &c.scope {
                    let d = graph.variables[s.var.0].dim();
                    for &k in &s.components {
                        if k >= d {
                            out.push(format!(
                                "factor {name}: component {k} out of range for variable {} (dim {d})",
                                graph.variables[s.var.0].name
                            ));
                        }
                    }
                }
                let input = c.input_dim();
                if let Mapping::Linear(a) = &c.mapping {
                    if a.ncols() != input {
                        out.push(format!(
                            "factor {name}: mapping takes {} inputs, scope has {input}",
                            a.ncols()
                        ));
                    }
                }
                let m = c.mapping.output_dim(input);
                if m != c.observation.len() {
                    out.push(format!(
                        "factor {name}: mapping output dim {m} != observation dim {}",
                        c.observation.len()
                    ));
                }
                if c.available.len() != c.observation.len() {
                    out.push(format!(
                        "factor {name}: {} availability flags for {} observations",
                        c.available.len(),
                        c.observation.len()
                    ));
                }
                if c.noise.shape() != (m, m) {
                    out.push(format!(
                        "factor {name}: noise shape {:?} for output dim {m}",
                        c.noise.shape()
                    ));
                } else if m > 0 {
                    let (lo, _) = linalg::eigen_range(&c.noise);
                    if !(lo > 0.0) {
                        out.push(format!(
                            "factor {name}: noise covariance is not positive definite"
                        ));
                    }
                }
            }
            Factor::Joint(j) => {
                let d: usize = j.vars.iter().map(|v| graph.variables[v.0].dim()).sum();
                if j.model.output_dim() != d {
                    out.push(format!(
                        "factor {name}: model output dim {} != scope dim {d}",
                        j.model.output_dim()
                    ));
                }
                if let JointModel::Linear {
                    projection,
                    covariance,
                    ..
                } = &j.model
                {
                    let k = j.model.output_dim();
                    if projection.shape() != (k, k) || covariance.shape() != (k, k) {
                        out.push(format!(
                            "factor {name}: linear model matrices must be {k}x{k}"
                        ));
                    }
                }
                for v in &seen {
                    joint_degree[v.0] += 1;
                }
            }
        }
    }
    for (i, &k) in joint_degree.iter().enumerate() {
        if k > 2 {
            out.push(format!(
                "variable {}: joint-degree > 2 ({k} joint factors)",
                graph.variables[i].name
            ));
        }
    }

    // union-find over the bipartite graph: variables first, then factors
    let mut parent: Vec<usize> = (0..n + graph.factors.len()).collect();
    let mut cyclic = false;
    for (fi, f) in graph.factors.iter().enumerate() {
        for v in f.variables() {
            if v.0 >= n {
                continue;
            }
            let a = find(&mut parent, v.0);
            let b = find(&mut parent, n + fi);
            if a == b {
                cyclic = true;
            } else {
                parent[a] = b;
            }
        }
    }
    if cyclic {
        out.push("graph contains a cycle".into());
    }
    ValidationReport { violations: out }
}
