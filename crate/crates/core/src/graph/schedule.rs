use std::collections::VecDeque;

use super::{FactorGraph, Topology};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    FactorToVar,
    VarToFactor,
}

/// One message in a sweep: edge index into [`Topology::edges`] plus
/// direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DirectedEdge {
    pub edge: usize,
    pub direction: Direction,
}

impl DirectedEdge {
    pub(crate) fn slot(&self) -> usize {
        2 * self.edge
            + match self.direction {
                Direction::FactorToVar => 0,
                Direction::VarToFactor => 1,
            }
    }
}

/// Leaves-inward-then-outward order in which each message comes after
/// every message it depends on. Covers both directions of every edge.
pub fn schedule(graph: &FactorGraph) -> Result<Vec<DirectedEdge>> {
    let topo = Topology::of(graph)?;
    schedule_for(&topo)
}

pub(crate) fn schedule_for(topo: &Topology) -> Result<Vec<DirectedEdge>> {
    let m = topo.edges.len();
    let var_deg = |v: usize| topo.var_edges[v].len();
    let fac_deg = |f: usize| topo.factor_edges[f].len();
    // pending prerequisites per directed message
    let mut pending = vec![0usize; 2 * m];
    let mut queue = VecDeque::new();
    for (e, &(f, v)) in topo.edges.iter().enumerate() {
        for de in [
            DirectedEdge {
                edge: e,
                direction: Direction::FactorToVar,
            },
            DirectedEdge {
                edge: e,
                direction: Direction::VarToFactor,
            },
        ] {
            let deg = match de.direction {
                Direction::FactorToVar => fac_deg(f.0),
                Direction::VarToFactor => var_deg(v.0),
            };
            pending[de.slot()] = deg - 1;
            if deg == 1 {
                queue.push_back(de);
            }
        }
    }

    let mut order = Vec::with_capacity(2 * m);
    while let Some(de) = queue.pop_front() {
        order.push(de);
        let (f, v) = topo.edges[de.edge];
        match de.direction {
            Direction::FactorToVar => {
                // unlocks v → f' for f' ≠ f
                for &(g, e) in &topo.var_edges[v.0] {
                    if g == f {
                        continue;
                    }
                    let next = DirectedEdge {
                        edge: e,
                        direction: Direction::VarToFactor,
                    };
                    pending[next.slot()] -= 1;
                    if pending[next.slot()] == 0 {
                        queue.push_back(next);
                    }
                }
            }
            Direction::VarToFactor => {
                for &(w, e) in &topo.factor_edges[f.0] {
                    if w == v {
                        continue;
                    }
                    let next = DirectedEdge {
                        edge: e,
                        direction: Direction::FactorToVar,
                    };
                    pending[next.slot()] -= 1;
                    if pending[next.slot()] == 0 {
                        queue.push_back(next);
                    }
                }
            }
        }
    }
    if order.len() != 2 * m {
        return Err(Error::Scheduling(format!(
            "graph contains a cycle ({} of {} messages schedulable)",
            order.len(),
            2 * m
        )));
    }
    Ok(order)
}
