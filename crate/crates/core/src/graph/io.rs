//! JSON graph document.
//!
//! ```json
//! {
//!   "format": "gridfactor-graph", "version": 1,
//!   "variables": [{"id": 0, "name": "s0", "labels": ["bus3/p"], "prior_mean": [0.1]}],
//!   "factors": [
//!     {"id": 0, "kind": "conditional", "name": "bus3/p", "scope": [{"var": 0, "components": [0]}],
//!      "mapping": "identity", "noise": [[1e-6]]},
//!     {"id": 1, "kind": "joint", "name": "j0", "vars": [0, 1], "form": "residual",
//!      "model": {"reference": "j0"}}
//!   ],
//!   "edges": [[0, 0], [1, 0], [1, 1]]
//! }
//! ```
//!
//! Edges are `[factor, variable]` pairs. Joint models are either inline
//! linear-Gaussian parameters or a reference resolved against a model set
//! when the graph is rebuilt. Observations are not part of the document.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    ConditionalFactor, Factor, FactorGraph, JointFactor, JointForm, JointModel, Mapping,
    ScopeEntry, VarId, VariableNode,
};
use crate::error::{Error, Result};
use crate::nlpca::NlpcaModel;

pub const GRAPH_FORMAT: &str = "gridfactor-graph";
pub const GRAPH_VERSION: u32 = 1;

type Rows = Vec<Vec<f64>>;

fn to_rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows())
        .map(|i| m.row(i).iter().cloned().collect())
        .collect()
}

fn from_rows(rows: &Rows, what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(Error::Format(format!("{what}: ragged matrix rows")));
    }
    Ok(DMatrix::from_fn(n, c, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableDoc {
    pub id: usize,
    pub name: String,
    pub labels: Vec<String>,
    pub prior_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingDoc {
    Identity,
    Linear(Rows),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelDoc {
    Reference(String),
    Linear {
        projection: Rows,
        offset: Vec<f64>,
        covariance: Rows,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FactorDoc {
    Conditional {
        id: usize,
        name: String,
        scope: Vec<ScopeEntry>,
        mapping: MappingDoc,
        noise: Rows,
    },
    Joint {
        id: usize,
        name: String,
        vars: Vec<usize>,
        form: JointForm,
        model: ModelDoc,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub format: String,
    pub version: u32,
    pub variables: Vec<VariableDoc>,
    pub factors: Vec<FactorDoc>,
    pub edges: Vec<(usize, usize)>,
}

impl GraphDocument {
    /// Describes `graph`; NLPCA joint models are written as references to
    /// the factor name.
    pub fn from_graph(graph: &FactorGraph) -> Self {
        let variables = graph
            .variables
            .iter()
            .enumerate()
            .map(|(id, v)| VariableDoc {
                id,
                name: v.name.clone(),
                labels: v.labels.clone(),
                prior_mean: v.prior_mean.iter().cloned().collect(),
            })
            .collect();
        let factors = graph
            .factors
            .iter()
            .enumerate()
            .map(|(id, f)| match f {
                Factor::Conditional(c) => FactorDoc::Conditional {
                    id,
                    name: c.name.clone(),
                    scope: c.scope.clone(),
                    mapping: match &c.mapping {
                        Mapping::Identity => MappingDoc::Identity,
                        Mapping::Linear(a) => MappingDoc::Linear(to_rows(a)),
                    },
                    noise: to_rows(&c.noise),
                },
                Factor::Joint(j) => FactorDoc::Joint {
                    id,
                    name: j.name.clone(),
                    vars: j.vars.iter().map(|v| v.0).collect(),
                    form: j.form,
                    model: match &j.model {
                        JointModel::Nlpca(_) => ModelDoc::Reference(j.name.clone()),
                        JointModel::Linear {
                            projection,
                            offset,
                            covariance,
                        } => ModelDoc::Linear {
                            projection: to_rows(projection),
                            offset: offset.iter().cloned().collect(),
                            covariance: to_rows(covariance),
                        },
                    },
                },
            })
            .collect();
        let edges = graph
            .factors
            .iter()
            .enumerate()
            .flat_map(|(fi, f)| f.variables().into_iter().map(move |v| (fi, v.0)))
            .collect();
        Self {
            format: GRAPH_FORMAT.into(),
            version: GRAPH_VERSION,
            variables,
            factors,
            edges,
        }
    }

    pub fn check_version(&self) -> Result<()> {
        if self.format != GRAPH_FORMAT || self.version != GRAPH_VERSION {
            return Err(Error::Format(format!(
                "expected {GRAPH_FORMAT} v{GRAPH_VERSION}, found {} v{}",
                self.format, self.version
            )));
        }
        Ok(())
    }

    /// Rebuilds the graph, resolving model references in `models`. The
    /// edge list must agree with the factor scopes.
    pub fn to_graph(&self, models: &BTreeMap<String, Arc<NlpcaModel>>) -> Result<FactorGraph> {
        self.check_version()?;
        let mut g = FactorGraph::new();
        for (i, v) in self.variables.iter().enumerate() {
            if v.id != i {
                return Err(Error::Format(format!(
                    "variable ids must be 0..n in order, found {} at {i}",
                    v.id
                )));
            }
            let mut node = VariableNode::new(v.name.clone(), v.labels.clone());
            if v.prior_mean.len() != node.dim() {
                return Err(Error::dim(
                    format!("prior mean of {}", v.name),
                    node.dim(),
                    v.prior_mean.len(),
                ));
            }
            node.prior_mean = DVector::from_vec(v.prior_mean.clone());
            g.add_variable(node);
        }
        for (i, f) in self.factors.iter().enumerate() {
            let factor = match f {
                FactorDoc::Conditional {
                    id,
                    name,
                    scope,
                    mapping,
                    noise,
                } => {
                    check_id(*id, i)?;
                    let noise = from_rows(noise, name)?;
                    let mapping = match mapping {
                        MappingDoc::Identity => Mapping::Identity,
                        MappingDoc::Linear(rows) => Mapping::Linear(from_rows(rows, name)?),
                    };
                    let input: usize = scope.iter().map(|s| s.components.len()).sum();
                    let m = mapping.output_dim(input);
                    Factor::Conditional(ConditionalFactor {
                        name: name.clone(),
                        scope: scope.clone(),
                        mapping,
                        noise,
                        observation: DVector::zeros(m),
                        available: vec![false; m],
                    })
                }
                FactorDoc::Joint {
                    id,
                    name,
                    vars,
                    form,
                    model,
                } => {
                    check_id(*id, i)?;
                    let model = match model {
                        ModelDoc::Reference(key) => {
                            JointModel::Nlpca(models.get(key).cloned().ok_or_else(|| {
                                Error::Format(format!("factor {name}: no model named {key}"))
                            })?)
                        }
                        ModelDoc::Linear {
                            projection,
                            offset,
                            covariance,
                        } => JointModel::Linear {
                            projection: from_rows(projection, name)?,
                            offset: DVector::from_vec(offset.clone()),
                            covariance: from_rows(covariance, name)?,
                        },
                    };
                    Factor::Joint(JointFactor {
                        name: name.clone(),
                        vars: vars.iter().map(|&v| VarId(v)).collect(),
                        model,
                        form: *form,
                    })
                }
            };
            g.add_factor(factor);
        }
        let mut declared = self.edges.clone();
        let mut actual: Vec<(usize, usize)> = GraphDocument::from_graph(&g).edges;
        declared.sort_unstable();
        actual.sort_unstable();
        if declared != actual {
            return Err(Error::Format(
                "edge list does not match factor scopes".into(),
            ));
        }
        Ok(g)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text)?;
        doc.check_version()?;
        Ok(doc)
    }
}

fn check_id(id: usize, index: usize) -> Result<()> {
    if id != index {
        return Err(Error::Format(format!(
            "factor ids must be 0..n in order, found {id} at {index}"
        )));
    }
    Ok(())
}
