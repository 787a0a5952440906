use nalgebra::{DMatrix, DVector};

use super::schedule::{DirectedEdge, Direction};
use super::{FactorGraph, FactorId, Node, Topology, VarId};
use crate::error::{Error, Result};
use crate::gaussian::CanonicalGaussian;
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub source: Node,
    pub target: Node,
    pub payload: CanonicalGaussian,
}

/// Storage for one message per edge and direction.
#[derive(Debug, Clone)]
pub struct MessageSet {
    topo: Topology,
    slots: Vec<Option<CanonicalGaussian>>,
}

impl MessageSet {
    pub fn new(graph: &FactorGraph) -> Result<Self> {
        Ok(Self::for_topology(Topology::of(graph)?))
    }

    pub fn for_topology(topo: Topology) -> Self {
        let slots = vec![None; 2 * topo.edges.len()];
        Self { topo, slots }
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    fn slot(&self, source: Node, target: Node) -> Option<usize> {
        let de = match (source, target) {
            (Node::Factor(f), Node::Var(v)) => DirectedEdge {
                edge: self.topo.edge_between(f, v)?,
                direction: Direction::FactorToVar,
            },
            (Node::Var(v), Node::Factor(f)) => DirectedEdge {
                edge: self.topo.edge_between(f, v)?,
                direction: Direction::VarToFactor,
            },
            _ => return None,
        };
        Some(de.slot())
    }

    pub fn get(&self, source: Node, target: Node) -> Option<&CanonicalGaussian> {
        self.slots[self.slot(source, target)?].as_ref()
    }

    pub fn insert(&mut self, message: Message) -> Result<()> {
        let slot = self.slot(message.source, message.target).ok_or_else(|| {
            Error::Scheduling(format!(
                "no edge {:?} -> {:?}",
                message.source, message.target
            ))
        })?;
        self.slots[slot] = Some(message.payload);
        Ok(())
    }

    fn by_edge(&self, edge: usize, direction: Direction) -> Option<&CanonicalGaussian> {
        self.slots[DirectedEdge { edge, direction }.slot()].as_ref()
    }
}

fn missing(source: Node, target: Node) -> Error {
    Error::Scheduling(format!("message {source:?} -> {target:?} not yet computed"))
}

/// Sum of the messages from every factor attached to `v` except `f`.
pub fn message_var_to_factor(
    graph: &FactorGraph,
    messages: &MessageSet,
    v: VarId,
    f: FactorId,
) -> Result<Message> {
    let topo = &messages.topo;
    if topo.edge_between(f, v).is_none() {
        return Err(Error::Scheduling(format!(
            "variable {} is not attached to factor {}",
            v.0, f.0
        )));
    }
    let mut acc = CanonicalGaussian::zeros(graph.variable(v).dim());
    for &(g, e) in &topo.var_edges[v.0] {
        if g == f {
            continue;
        }
        let m = messages
            .by_edge(e, Direction::FactorToVar)
            .ok_or_else(|| missing(Node::Factor(g), Node::Var(v)))?;
        acc.add_assign(m);
    }
    Ok(Message {
        source: Node::Var(v),
        target: Node::Factor(f),
        payload: acc,
    })
}

/// Marginalizes every other scope variable out of the factor combined
/// with their incoming messages (a Schur complement over the joint block).
pub fn message_factor_to_var(
    graph: &FactorGraph,
    linearized: &[CanonicalGaussian],
    messages: &MessageSet,
    f: FactorId,
    v: VarId,
) -> Result<Message> {
    let topo = &messages.topo;
    let scope = topo
        .factor_edges
        .get(f.0)
        .ok_or_else(|| Error::Scheduling(format!("unknown factor {}", f.0)))?;
    let lin = linearized
        .get(f.0)
        .ok_or_else(|| Error::Scheduling(format!("factor {} has not been linearized", f.0)))?;
    let wrap = |payload| Message {
        source: Node::Factor(f),
        target: Node::Var(v),
        payload,
    };
    if !scope.iter().any(|(w, _)| *w == v) {
        return Err(Error::Scheduling(format!(
            "variable {} is not attached to factor {}",
            v.0, f.0
        )));
    }
    if scope.len() == 1 {
        return Ok(wrap(lin.clone()));
    }

    let mut keep = Vec::new();
    let mut other = Vec::new();
    let mut incoming: Vec<(usize, &CanonicalGaussian)> = Vec::new();
    let mut offset = 0;
    for &(w, e) in scope {
        let d = graph.variable(w).dim();
        let range = offset..offset + d;
        if w == v {
            keep.extend(range);
        } else {
            let m = messages
                .by_edge(e, Direction::VarToFactor)
                .ok_or_else(|| missing(Node::Var(w), Node::Factor(f)))?;
            incoming.push((other.len(), m));
            other.extend(range);
        }
        offset += d;
    }
    if offset != lin.dim() {
        return Err(Error::dim(
            format!("linearized factor {}", graph.factor(f).name()),
            offset,
            lin.dim(),
        ));
    }
    let j = lin.precision();
    let h = lin.information();
    let j_kk = linalg::sub_block(j, &keep, &keep);
    let j_ko = linalg::sub_block(j, &keep, &other);
    let h_k = linalg::sub_vec(h, &keep);
    let mut a = linalg::sub_block(j, &other, &other);
    let mut b = linalg::sub_vec(h, &other);
    for (start, m) in incoming {
        let d = m.dim();
        let mut block = a.view_mut((start, start), (d, d));
        block += m.precision();
        let mut seg = b.rows_mut(start, d);
        seg += m.information();
    }
    if a.amax() == 0.0 {
        if j_ko.amax() == 0.0 {
            return Ok(wrap(CanonicalGaussian::from_parts(j_kk, h_k)?));
        }
        return Err(Error::singular(format!(
            "factor {}: marginalized block J_kk + J_x->f toward variable {}",
            graph.factor(f).name(),
            graph.variable(v).name
        )));
    }
    let a_inv = linalg::spd_inverse(
        &a,
        &format!(
            "factor {}: marginalized block J_kk + J_x->f toward variable {}",
            graph.factor(f).name(),
            graph.variable(v).name
        ),
    )?;
    let t = &j_ko * &a_inv;
    let jm = &j_kk - &t * j_ko.transpose();
    let hm = &h_k - &t * &b;
    Ok(wrap(CanonicalGaussian::from_parts(jm, hm)?))
}

/// Computes every message in `order`.
pub fn sweep(
    graph: &FactorGraph,
    linearized: &[CanonicalGaussian],
    topo: &Topology,
    order: &[DirectedEdge],
) -> Result<MessageSet> {
    let mut set = MessageSet::for_topology(topo.clone());
    for de in order {
        let (f, v) = topo.edges[de.edge];
        let msg = match de.direction {
            Direction::FactorToVar => message_factor_to_var(graph, linearized, &set, f, v)?,
            Direction::VarToFactor => message_var_to_factor(graph, &set, v, f)?,
        };
        set.slots[de.slot()] = Some(msg.payload);
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariableUpdate {
    pub delta: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// `δx = (Σ J)⁻¹ Σ h` and `S = (Σ J)⁻¹` from all incoming factor messages.
pub fn update_estimates(graph: &FactorGraph, messages: &MessageSet) -> Result<Vec<VariableUpdate>> {
    let topo = &messages.topo;
    let mut unobservable = Vec::new();
    let mut totals = Vec::with_capacity(graph.variables.len());
    for (i, node) in graph.variables.iter().enumerate() {
        let mut acc = CanonicalGaussian::zeros(node.dim());
        for &(g, e) in &topo.var_edges[i] {
            let m = messages
                .by_edge(e, Direction::FactorToVar)
                .ok_or_else(|| missing(Node::Factor(g), Node::Var(VarId(i))))?;
            acc.add_assign(m);
        }
        if acc.precision().diagonal().iter().any(|&p| !(p > 0.0)) {
            unobservable.push(node.name.clone());
        }
        totals.push(acc);
    }
    if !unobservable.is_empty() {
        return Err(Error::Observability {
            variables: unobservable,
        });
    }
    let mut out = Vec::with_capacity(totals.len());
    for (node, acc) in graph.variables.iter().zip(totals) {
        let cov = linalg::spd_inverse(
            acc.precision(),
            &format!("total precision of {}", node.name),
        )
        .map_err(|e| match e {
            Error::Singular { .. } => Error::Observability {
                variables: vec![node.name.clone()],
            },
            other => other,
        })?;
        let delta = &cov * acc.information();
        out.push(VariableUpdate {
            delta,
            covariance: cov,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ConditionalFactor, JointFactor, JointForm, JointModel, VariableNode};
    use nalgebra::{dmatrix, dvector};

    fn scalar(g: &mut FactorGraph, name: &str) -> VarId {
        g.add_variable(VariableNode::new(name, vec![name.into()]))
    }

    fn cg(j: f64, h: f64) -> CanonicalGaussian {
        CanonicalGaussian::new(dmatrix![j], dvector![h]).unwrap()
    }

    #[test]
    fn var_to_factor_sums_other_messages() {
        let mut g = FactorGraph::new();
        let v = scalar(&mut g, "v");
        let a = g.add_conditional(ConditionalFactor::identity("a", v, 0, 1.0));
        let b = g.add_conditional(ConditionalFactor::identity("b", v, 0, 1.0));
        let c = g.add_conditional(ConditionalFactor::identity("c", v, 0, 1.0));
        let mut set = MessageSet::new(&g).unwrap();
        assert!(matches!(
            message_var_to_factor(&g, &set, v, a),
            Err(Error::Scheduling(_))
        ));
        for (f, (j, h)) in [(b, (2.0, 1.0)), (c, (4.0, 3.0))] {
            set.insert(Message {
                source: Node::Factor(f),
                target: Node::Var(v),
                payload: cg(j, h),
            })
            .unwrap();
        }
        let m = message_var_to_factor(&g, &set, v, a).unwrap();
        assert_eq!(m.payload, cg(6.0, 4.0));
    }

    #[test]
    fn lone_factor_gets_an_empty_message() {
        let mut g = FactorGraph::new();
        let v = scalar(&mut g, "v");
        let a = g.add_conditional(ConditionalFactor::identity("a", v, 0, 1.0));
        let set = MessageSet::new(&g).unwrap();
        let m = message_var_to_factor(&g, &set, v, a).unwrap();
        assert_eq!(m.payload, CanonicalGaussian::zeros(1));
    }

    fn pair_graph() -> (FactorGraph, VarId, VarId, FactorId) {
        let mut g = FactorGraph::new();
        let x1 = scalar(&mut g, "x1");
        let x2 = scalar(&mut g, "x2");
        let f = g.add_joint(JointFactor {
            name: "f".into(),
            vars: vec![x1, x2],
            model: JointModel::gaussian(DVector::zeros(2), DMatrix::identity(2, 2)),
            form: JointForm::Residual,
        });
        (g, x1, x2, f)
    }

    #[test]
    fn schur_complement_of_a_pair_factor() {
        let (g, x1, x2, f) = pair_graph();
        let lin =
            vec![CanonicalGaussian::new(dmatrix![2.0, 1.0; 1.0, 2.0], dvector![1.0, 1.0]).unwrap()];
        let mut set = MessageSet::new(&g).unwrap();
        set.insert(Message {
            source: Node::Var(x2),
            target: Node::Factor(f),
            payload: CanonicalGaussian::zeros(1),
        })
        .unwrap();
        let m = message_factor_to_var(&g, &lin, &set, f, x1).unwrap();
        assert!((m.payload.precision()[(0, 0)] - 1.5).abs() < 1e-14);
        assert!((m.payload.information()[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn strong_incoming_message_conditions_on_the_other_variable() {
        let (g, x1, x2, f) = pair_graph();
        let jf = dmatrix![2.0, 1.0; 1.0, 2.0];
        let hf = dvector![1.0, 1.0];
        let lin = vec![CanonicalGaussian::new(jf.clone(), hf.clone()).unwrap()];
        let x2_fixed = 0.7;
        let big = 1e9;
        let mut set = MessageSet::new(&g).unwrap();
        set.insert(Message {
            source: Node::Var(x2),
            target: Node::Factor(f),
            payload: cg(big, big * x2_fixed),
        })
        .unwrap();
        let m = message_factor_to_var(&g, &lin, &set, f, x1).unwrap();
        // conditioning the factor density on x2: J = J11, h = h1 − J12·x2
        let j_cond = jf[(0, 0)];
        let h_cond = hf[0] - jf[(0, 1)] * x2_fixed;
        assert!((m.payload.precision()[(0, 0)] - j_cond).abs() < 1e-6);
        assert!((m.payload.information()[0] - h_cond).abs() < 1e-6);
    }

    #[test]
    fn single_variable_factor_message_is_the_factor() {
        let mut g = FactorGraph::new();
        let v = scalar(&mut g, "v");
        let f = g.add_conditional(ConditionalFactor::identity("a", v, 0, 1.0));
        let lin = vec![cg(3.0, 2.0)];
        let set = MessageSet::new(&g).unwrap();
        assert_eq!(
            message_factor_to_var(&g, &lin, &set, f, v).unwrap().payload,
            cg(3.0, 2.0)
        );
    }

    #[test]
    fn update_from_one_message() {
        let mut g = FactorGraph::new();
        let v = scalar(&mut g, "v");
        let f = g.add_conditional(ConditionalFactor::identity("a", v, 0, 1.0));
        let mut set = MessageSet::new(&g).unwrap();
        set.insert(Message {
            source: Node::Factor(f),
            target: Node::Var(v),
            payload: cg(100.0, 500.0),
        })
        .unwrap();
        let up = update_estimates(&g, &set).unwrap();
        assert!((up[0].delta[0] - 5.0).abs() < 1e-12);
        assert!((up[0].covariance[(0, 0)] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn update_from_two_equal_messages() {
        let mut g = FactorGraph::new();
        let v = scalar(&mut g, "v");
        let fs: Vec<_> = (0..2)
            .map(|k| g.add_conditional(ConditionalFactor::identity(format!("c{k}"), v, 0, 1.0)))
            .collect();
        let mut set = MessageSet::new(&g).unwrap();
        for f in fs {
            set.insert(Message {
                source: Node::Factor(f),
                target: Node::Var(v),
                payload: cg(1.0, 1.0),
            })
            .unwrap();
        }
        let up = update_estimates(&g, &set).unwrap();
        assert!((up[0].delta[0] - 1.0).abs() < 1e-12);
        assert!((up[0].covariance[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_precision_is_unobservable() {
        let mut g = FactorGraph::new();
        let v = scalar(&mut g, "lonely");
        let f = g.add_conditional(ConditionalFactor::identity("a", v, 0, 1.0));
        let mut set = MessageSet::new(&g).unwrap();
        set.insert(Message {
            source: Node::Factor(f),
            target: Node::Var(v),
            payload: CanonicalGaussian::zeros(1),
        })
        .unwrap();
        match update_estimates(&g, &set) {
            Err(Error::Observability { variables }) => {
                assert_eq!(variables, vec!["lonely".to_string()])
            }
            other => panic!("{other:?}"),
        }
    }
}
