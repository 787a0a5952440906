//! Factor-graph construction from a partition: one variable per section,
//! one identity sensor factor per metered series, and NLPCA joint factors
//! on a tree of adjacent section pairs.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datagen::{GridDataset, Kind, SeriesKey};
use crate::error::{Error, Result};
use crate::graph::validate;
use crate::graph::{
    ConditionalFactor, Evidence, FactorGraph, FactorId, GraphDocument, JointFactor, JointForm,
    JointModel, ValidationReport, VarId, VariableNode,
};
use crate::nlpca::{default_hidden_dim, default_latent_dim, param_count, NlpcaModel};
use crate::partition::PartitionResult;

pub const BLUEPRINT_FORMAT: &str = "gridfactor-blueprint";
pub const BLUEPRINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableEntry {
    pub name: String,
    pub section: usize,
    pub buses: Vec<usize>,
    /// Quantity carried by each component.
    pub components: Vec<SeriesKey>,
    pub prior_mean: Vec<f64>,
}

impl VariableEntry {
    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn labels(&self) -> Vec<String> {
        self.components.iter().map(ToString::to_string).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalEntry {
    pub name: String,
    pub series: SeriesKey,
    pub var: usize,
    pub component: usize,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointEntry {
    pub name: String,
    pub vars: [usize; 2],
    /// Crossing edges between the two sections.
    pub weight: usize,
    pub d: usize,
    pub q: usize,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBlueprint {
    pub format: String,
    pub version: u32,
    pub variables: Vec<VariableEntry>,
    pub conditionals: Vec<ConditionalEntry>,
    pub joints: Vec<JointEntry>,
    /// The same structure in the shared graph schema.
    pub graph: GraphDocument,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Section pairs that receive a joint factor.
///
/// Kruskal's maximum spanning forest over the section adjacency (heavier
/// first, ties to the smaller pair), then edges at sections of degree
/// above two are dropped lightest first, preferring edges whose other end
/// keeps a joint factor. A last pass re-attaches sections left without
/// one wherever both ends still have room and no cycle forms.
pub fn select_joint_pairs(
    k: usize,
    adjacency: &[(usize, usize, usize)],
) -> Vec<(usize, usize, usize)> {
    let mut ranked = adjacency.to_vec();
    ranked.sort_by(|x, y| y.2.cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
    let mut parent: Vec<usize> = (0..k).collect();
    let mut tree = Vec::new();
    for &(a, b, w) in &ranked {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            tree.push((a, b, w));
        }
    }

    let mut degree = vec![0usize; k];
    for &(a, b, _) in &tree {
        degree[a] += 1;
        degree[b] += 1;
    }
    loop {
        let candidates: Vec<usize> = (0..tree.len())
            .filter(|&i| degree[tree[i].0] > 2 || degree[tree[i].1] > 2)
            .collect();
        if candidates.is_empty() {
            break;
        }
        let keeps_other = |i: usize| {
            let (a, b, _) = tree[i];
            let other = if degree[a] > 2 { b } else { a };
            degree[other] >= 2
        };
        // lightest first; among equals the later-ranked pair
        let pick = candidates
            .iter()
            .copied()
            .min_by(|&i, &j| {
                keeps_other(j)
                    .cmp(&keeps_other(i))
                    .then(tree[i].2.cmp(&tree[j].2))
                    .then((tree[j].0, tree[j].1).cmp(&(tree[i].0, tree[i].1)))
            })
            .expect("nonempty candidates");
        let (a, b, _) = tree.remove(pick);
        degree[a] -= 1;
        degree[b] -= 1;
    }

    let mut parent: Vec<usize> = (0..k).collect();
    for &(a, b, _) in &tree {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    for &(a, b, w) in &ranked {
        if degree[a] < 2 && degree[b] < 2 && (degree[a] == 0 || degree[b] == 0) {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
                degree[a] += 1;
                degree[b] += 1;
                tree.push((a, b, w));
            }
        }
    }
    tree.sort_by_key(|&(a, b, _)| (a, b));
    tree
}

/// Quantity kinds per bus, as found in `dataset`.
pub fn quantities_of(dataset: &GridDataset) -> Vec<Vec<Kind>> {
    (0..dataset.buses()).map(|b| dataset.kinds_at(b)).collect()
}

pub fn build_blueprint(
    partition: &PartitionResult,
    quantities: &[Vec<Kind>],
    noise: &BTreeMap<Kind, f64>,
) -> Result<ModelBlueprint> {
    if partition.sections.is_empty() {
        return Err(Error::Domain("partition has no sections".into()));
    }
    let mut variables = Vec::new();
    let mut conditionals = Vec::new();
    for (s, buses) in partition.sections.iter().enumerate() {
        if buses.is_empty() {
            return Err(Error::Domain(format!("section {s} is empty")));
        }
        let mut buses = buses.clone();
        buses.sort_unstable();
        let mut components = Vec::new();
        for &bus in &buses {
            let kinds = quantities
                .get(bus)
                .ok_or_else(|| Error::Domain(format!("no quantity list for bus {bus}")))?;
            if kinds.is_empty() {
                return Err(Error::Domain(format!("bus {bus} has no quantities")));
            }
            for &kind in kinds {
                let sigma = noise.get(&kind).copied().ok_or_else(|| {
                    Error::Domain(format!("unknown quantity kind {kind}: no noise level"))
                })?;
                let key = SeriesKey { bus, kind };
                conditionals.push(ConditionalEntry {
                    name: key.to_string(),
                    series: key,
                    var: s,
                    component: components.len(),
                    variance: sigma * sigma,
                });
                components.push(key);
            }
        }
        variables.push(VariableEntry {
            name: format!("section{s}"),
            section: s,
            buses,
            prior_mean: vec![0.0; components.len()],
            components,
        });
    }
    let joints = select_joint_pairs(variables.len(), &partition.section_adjacency)
        .into_iter()
        .map(|(a, b, w)| {
            let d = variables[a].dim() + variables[b].dim();
            JointEntry {
                name: format!("joint{a}-{b}"),
                vars: [a, b],
                weight: w,
                d,
                q: default_latent_dim(d),
                m: default_hidden_dim(d),
            }
        })
        .collect();
    let mut bp = ModelBlueprint {
        format: BLUEPRINT_FORMAT.into(),
        version: BLUEPRINT_VERSION,
        variables,
        conditionals,
        joints,
        graph: GraphDocument::from_graph(&FactorGraph::new()),
    };
    bp.refresh_document();
    Ok(bp)
}

impl ModelBlueprint {
    /// Factor id of conditional `i` in instantiated graphs.
    pub fn conditional_factor(&self, i: usize) -> FactorId {
        FactorId(i)
    }

    /// Factor id of joint entry `i` in instantiated graphs.
    pub fn joint_factor(&self, i: usize) -> FactorId {
        FactorId(self.conditionals.len() + i)
    }

    pub fn state_dim(&self) -> usize {
        self.variables.iter().map(VariableEntry::dim).sum()
    }

    /// Decoder parameters over all joint factors.
    pub fn parameter_count(&self) -> Result<usize> {
        self.joints.iter().map(|j| param_count(j.d)).sum()
    }

    fn skeleton(&self) -> FactorGraph {
        let mut g = FactorGraph::new();
        for v in &self.variables {
            let mut node = VariableNode::new(v.name.clone(), v.labels());
            node.prior_mean = DVector::from_vec(v.prior_mean.clone());
            g.add_variable(node);
        }
        for c in &self.conditionals {
            g.add_conditional(ConditionalFactor::identity(
                c.name.clone(),
                VarId(c.var),
                c.component,
                c.variance,
            ));
        }
        g
    }

    /// The full graph with an untrained placeholder model per joint entry.
    fn placeholder_graph(&self) -> FactorGraph {
        let mut g = self.skeleton();
        for j in &self.joints {
            g.add_joint(JointFactor {
                name: j.name.clone(),
                vars: vec![VarId(j.vars[0]), VarId(j.vars[1])],
                model: JointModel::Nlpca(Arc::new(NlpcaModel::placeholder(j.d))),
                form: JointForm::Residual,
            });
        }
        g
    }

    /// Rewrites [`ModelBlueprint::graph`] from the entries. The document only
    /// records model references, so placeholders stand in for them.
    pub fn refresh_document(&mut self) {
        self.graph = GraphDocument::from_graph(&self.placeholder_graph());
    }

    /// Structural checks of the graph the blueprint describes.
    pub fn validation_report(&self) -> ValidationReport {
        validate(&self.placeholder_graph())
    }

    /// Graph of the variables and sensor factors only.
    pub fn sensor_graph(&self) -> FactorGraph {
        self.skeleton()
    }

    /// The full graph with a trained model for every joint entry.
    pub fn instantiate(&self, models: &BTreeMap<String, Arc<NlpcaModel>>) -> Result<FactorGraph> {
        let mut g = self.skeleton();
        for j in &self.joints {
            let model = models.get(&j.name).ok_or_else(|| {
                Error::Domain(format!("no trained model for joint factor {}", j.name))
            })?;
            if model.output_dim() != j.d {
                return Err(Error::dim(
                    format!("model for joint factor {}", j.name),
                    j.d,
                    model.output_dim(),
                ));
            }
            g.add_joint(JointFactor {
                name: j.name.clone(),
                vars: vec![VarId(j.vars[0]), VarId(j.vars[1])],
                model: JointModel::Nlpca(model.clone()),
                form: JointForm::Residual,
            });
        }
        g.ensure_valid()?;
        Ok(g)
    }

    /// Dataset columns feeding each conditional entry.
    pub fn series_columns(&self, dataset: &GridDataset) -> Result<Vec<usize>> {
        self.conditionals
            .iter()
            .map(|c| {
                dataset
                    .index(c.series.bus, c.series.kind)
                    .ok_or_else(|| Error::Domain(format!("dataset lacks series {}", c.series)))
            })
            .collect()
    }

    /// Evidence for hour `t` of `dataset`, using its observation mask.
    pub fn evidence(
        &self,
        graph: &FactorGraph,
        dataset: &GridDataset,
        columns: &[usize],
        t: usize,
    ) -> Evidence {
        let mut ev = Evidence::from_graph(graph);
        for (i, &col) in columns.iter().enumerate() {
            let obs = dataset.observed[(t, col)] && dataset.measured[(t, col)].is_finite();
            ev.set(
                self.conditional_factor(i),
                DVector::from_element(1, if obs { dataset.measured[(t, col)] } else { 0.0 }),
                vec![obs],
            );
        }
        ev
    }

    /// Per-variable vectors taken from row `t` of an `hours × series`
    /// matrix such as the ground truth.
    pub fn split_row(
        &self,
        values: &DMatrix<f64>,
        columns: &[usize],
        t: usize,
    ) -> Vec<DVector<f64>> {
        let mut out: Vec<DVector<f64>> = self
            .variables
            .iter()
            .map(|v| DVector::zeros(v.dim()))
            .collect();
        for (c, &col) in self.conditionals.iter().zip(columns) {
            out[c.var][c.component] = values[(t, col)];
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bp: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if bp.format != BLUEPRINT_FORMAT || bp.version != BLUEPRINT_VERSION {
            return Err(Error::Format(format!(
                "expected {BLUEPRINT_FORMAT} v{BLUEPRINT_VERSION}, found {} v{}",
                bp.format, bp.version
            )));
        }
        Ok(bp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate;
    use crate::partition::ConnectivityGraph;

    fn noise() -> BTreeMap<Kind, f64> {
        Kind::ALL
            .into_iter()
            .map(|k| (k, k.default_sigma()))
            .collect()
    }

    #[test]
    fn two_adjacent_single_bus_sections() {
        let g = ConnectivityGraph::new(2, [(0, 1)]).unwrap();
        let p = PartitionResult::from_assignment(&g, vec![0, 1]).unwrap();
        let q = vec![vec![Kind::Voltage, Kind::P, Kind::Q]; 2];
        let bp = build_blueprint(&p, &q, &noise()).unwrap();
        assert_eq!(bp.variables.len(), 2);
        assert!(bp.variables.iter().all(|v| v.dim() == 3));
        assert_eq!(bp.conditionals.len(), 6);
        assert_eq!(bp.joints.len(), 1);
        assert_eq!((bp.joints[0].d, bp.joints[0].q, bp.joints[0].m), (6, 3, 6));
        assert_eq!(bp.conditionals[1].variance, 1e-6);
    }

    #[test]
    fn triangle_keeps_two_pairs() {
        let pairs = select_joint_pairs(3, &[(0, 1, 1), (0, 2, 1), (1, 2, 1)]);
        assert_eq!(pairs, vec![(0, 1, 1), (0, 2, 1)]);
        let line = select_joint_pairs(3, &[(0, 1, 2), (1, 2, 1)]);
        assert_eq!(line.len(), 2);
    }

    #[test]
    fn star_is_pruned_to_degree_two() {
        let adj: Vec<_> = (1..6).map(|i| (0, i, i)).collect();
        let pairs = select_joint_pairs(6, &adj);
        let mut degree = [0; 6];
        for &(a, b, _) in &pairs {
            degree[a] += 1;
            degree[b] += 1;
        }
        assert!(degree.iter().all(|&d| d <= 2));
        // heaviest spokes survive
        assert_eq!(pairs, vec![(0, 4, 4), (0, 5, 5)]);
    }

    #[test]
    fn unknown_kind_and_empty_bus_are_rejected() {
        let g = ConnectivityGraph::new(2, [(0, 1)]).unwrap();
        let p = PartitionResult::from_assignment(&g, vec![0, 1]).unwrap();
        let mut partial = noise();
        partial.remove(&Kind::Wind);
        assert!(build_blueprint(&p, &[vec![Kind::Wind], vec![Kind::P]], &partial).is_err());
        assert!(build_blueprint(&p, &[vec![], vec![Kind::P]], &noise()).is_err());
    }

    #[test]
    fn instantiate_checks_model_dims() {
        let g = ConnectivityGraph::new(2, [(0, 1)]).unwrap();
        let p = PartitionResult::from_assignment(&g, vec![0, 1]).unwrap();
        let bp = build_blueprint(&p, &[vec![Kind::P, Kind::Q], vec![Kind::P]], &noise()).unwrap();
        let mut models = BTreeMap::new();
        models.insert(
            bp.joints[0].name.clone(),
            Arc::new(NlpcaModel::placeholder(3)),
        );
        let graph = bp.instantiate(&models).unwrap();
        assert!(validate(&graph).is_valid());
        models.insert(
            bp.joints[0].name.clone(),
            Arc::new(NlpcaModel::placeholder(4)),
        );
        match bp.instantiate(&models) {
            Err(Error::Dimension { what, .. }) => assert!(what.contains("joint0-1")),
            other => panic!("{other:?}"),
        }
    }
}
