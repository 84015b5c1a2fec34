//! Exact solver for the capacity-constrained partial transport problem
//!
//!   min sum c_ij pi_ij    s.t.  row sums = supplies,
//!                               column sums <= capacities,  pi >= 0
//!
//! by successive shortest augmenting paths with node potentials on the
//! bipartite residual graph. Each augmentation exhausts a source or fills a
//! sink, so the plan stays a basic solution and the optimum is exact up to
//! floating-point rounding. Ties in the path search are broken by lowest
//! node index for determinism.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::measure::{Coupling, PlanEntry};
use crate::transport::SparseCost;

/// Mass below this fraction of the total supply is treated as exhausted.
const MASS_EPS_REL: f64 = 1e-13;

struct Arc {
    row: usize,
    /// Sink index; `n_image` addresses the overflow column.
    sink: usize,
    cost: f64,
    flow: f64,
}

#[derive(Copy, Clone, PartialEq)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on (dist, node).
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Solves the partial transport problem over a sparse cost. Returns the
/// optimal plan and its objective value.
pub fn solve_partial_transport(
    cost: &SparseCost,
    supplies: &[f64],
    capacities: &[f64],
) -> Result<(Coupling, f64)> {
    let n_rows = cost.rows.len();
    let n_img = cost.n_image;
    if supplies.len() != n_rows {
        return Err(Error::InvalidInput(format!(
            "{} supplies for {} cost rows",
            supplies.len(),
            n_rows
        )));
    }
    if capacities.len() != n_img {
        return Err(Error::InvalidInput(format!(
            "{} capacities for {} image points",
            capacities.len(),
            n_img
        )));
    }
    if supplies.iter().any(|&s| s < 0.0 || !s.is_finite()) {
        return Err(Error::InvalidInput("supplies must be nonnegative and finite".into()));
    }
    if capacities.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
        return Err(Error::InvalidInput("capacities must be strictly positive".into()));
    }

    let total_supply: f64 = supplies.iter().sum();
    let mass_eps = MASS_EPS_REL * total_supply.max(1.0);

    // Build arcs. The overflow column participates only where its cost is
    // finite; its capacity is effectively unbounded.
    let n_sinks = n_img + 1;
    let mut arcs: Vec<Arc> = Vec::new();
    let mut row_arcs: Vec<Vec<usize>> = vec![Vec::new(); n_rows];
    let mut sink_arcs: Vec<Vec<usize>> = vec![Vec::new(); n_sinks];
    for (i, row) in cost.rows.iter().enumerate() {
        for &(j, c) in row {
            if j >= n_img {
                return Err(Error::IndexOutOfRange { index: j, len: n_img });
            }
            if !c.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite cost at ({i}, {j})")));
            }
            row_arcs[i].push(arcs.len());
            sink_arcs[j].push(arcs.len());
            arcs.push(Arc { row: i, sink: j, cost: c, flow: 0.0 });
        }
        let ofl = cost.overflow[i];
        if ofl.is_finite() {
            row_arcs[i].push(arcs.len());
            sink_arcs[n_img].push(arcs.len());
            arcs.push(Arc { row: i, sink: n_img, cost: ofl, flow: 0.0 });
        }
    }

    // Node layout: rows 0..n_rows, sinks n_rows..n_rows + n_sinks.
    let n_nodes = n_rows + n_sinks;
    let sink_node = |j: usize| n_rows + j;

    let mut remaining: Vec<f64> = supplies.to_vec();
    let mut residual_cap: Vec<f64> = capacities.to_vec();
    residual_cap.push(total_supply); // overflow takes anything

    // Initial potentials: phi(source) = 0, phi(sink) = min incoming cost,
    // which makes all reduced costs nonnegative before any flow exists.
    let mut potential = vec![0.0_f64; n_nodes];
    for j in 0..n_sinks {
        let m = sink_arcs[j]
            .iter()
            .map(|&a| arcs[a].cost)
            .fold(f64::INFINITY, f64::min);
        potential[sink_node(j)] = if m.is_finite() { m } else { 0.0 };
    }

    let mut dist = vec![f64::INFINITY; n_nodes];
    let mut settled = vec![false; n_nodes];
    let mut parent_arc = vec![usize::MAX; n_nodes];
    let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::new();

    for src in 0..n_rows {
        while remaining[src] > mass_eps {
            // Shortest augmenting path from this source to any sink with
            // residual capacity, under reduced costs.
            dist.iter_mut().for_each(|d| *d = f64::INFINITY);
            settled.iter_mut().for_each(|s| *s = false);
            parent_arc.iter_mut().for_each(|p| *p = usize::MAX);
            heap.clear();
            dist[src] = 0.0;
            heap.push(HeapEntry { dist: 0.0, node: src });
            let mut target: Option<usize> = None;

            while let Some(HeapEntry { dist: d, node }) = heap.pop() {
                if settled[node] || d > dist[node] {
                    continue;
                }
                settled[node] = true;
                if node >= n_rows && residual_cap[node - n_rows] > mass_eps {
                    target = Some(node);
                    break;
                }
                if node < n_rows {
                    // Forward arcs: row -> sink, unbounded above.
                    for &a in &row_arcs[node] {
                        let arc = &arcs[a];
                        let v = sink_node(arc.sink);
                        if settled[v] {
                            continue;
                        }
                        let rc = (arc.cost + potential[node] - potential[v]).max(0.0);
                        let nd = d + rc;
                        if nd < dist[v] {
                            dist[v] = nd;
                            parent_arc[v] = a;
                            heap.push(HeapEntry { dist: nd, node: v });
                        }
                    }
                } else {
                    // Backward arcs: sink -> row, limited by placed flow.
                    let j = node - n_rows;
                    for &a in &sink_arcs[j] {
                        let arc = &arcs[a];
                        if arc.flow <= mass_eps {
                            continue;
                        }
                        let u = arc.row;
                        if settled[u] {
                            continue;
                        }
                        let rc = (-arc.cost + potential[node] - potential[u]).max(0.0);
                        let nd = d + rc;
                        if nd < dist[u] {
                            dist[u] = nd;
                            parent_arc[u] = a;
                            heap.push(HeapEntry { dist: nd, node: u });
                        }
                    }
                }
            }

            let Some(target) = target else {
                let deficit: f64 = remaining.iter().sum();
                return Err(Error::Infeasible { deficit });
            };
            let d_target = dist[target];

            // Bottleneck along the path.
            let mut delta = remaining[src].min(residual_cap[target - n_rows]);
            let mut node = target;
            while node != src {
                let a = parent_arc[node];
                let arc = &arcs[a];
                if node >= n_rows {
                    node = arc.row;
                } else {
                    delta = delta.min(arc.flow);
                    node = sink_node(arc.sink);
                }
            }
            if delta <= mass_eps {
                // Degenerate residual path; treat the remainder as placed to
                // avoid stalling. Within the solver tolerance.
                remaining[src] = 0.0;
                continue;
            }

            // Apply the augmentation.
            let mut node = target;
            while node != src {
                let a = parent_arc[node];
                if node >= n_rows {
                    arcs[a].flow += delta;
                    node = arcs[a].row;
                } else {
                    arcs[a].flow -= delta;
                    node = sink_node(arcs[a].sink);
                }
            }
            remaining[src] -= delta;
            residual_cap[target - n_rows] -= delta;

            // Potential update keeps reduced costs nonnegative.
            for v in 0..n_nodes {
                potential[v] += dist[v].min(d_target);
            }
        }
    }

    let mut entries = Vec::new();
    let mut objective = 0.0;
    for arc in &arcs {
        if arc.flow > 0.0 {
            objective += arc.cost * arc.flow;
            entries.push(PlanEntry {
                i: arc.row,
                j: if arc.sink < n_img { Some(arc.sink) } else { None },
                mass: arc.flow,
            });
        }
    }
    let plan = Coupling::new(entries)?;
    Ok((plan, objective))
}
