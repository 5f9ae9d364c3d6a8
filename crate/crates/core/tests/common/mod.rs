#![allow(dead_code)]

use mixrag::pcst::{PcstEdge, PcstInstance};
use mixrag::rng::Rng;

/// Random multigraph instance with `n` nodes, up to `max_edges` edges
/// (occasional self-loops), prizes uniform in [0, 5].
pub fn random_instance(rng: &mut Rng, n: usize, max_edges: usize, cost: f64) -> PcstInstance {
    let m = rng.below(max_edges + 1);
    let edges = (0..m)
        .map(|_| {
            let u = rng.below(n);
            let v = if rng.unit() < 0.1 { u } else { rng.below(n) };
            PcstEdge { u, v, prize: rng.range(0.0, 5.0) }
        })
        .collect();
    PcstInstance {
        node_prizes: (0..n).map(|_| rng.range(0.0, 5.0)).collect(),
        edges,
        edge_cost: cost,
    }
}

fn connected(n: usize, nodes: u32, edges: &[(usize, usize)]) -> bool {
    let start = (0..n).find(|v| nodes & (1 << v) != 0).unwrap();
    let mut seen = 1u32 << start;
    loop {
        let before = seen;
        for &(u, v) in edges {
            if seen & (1 << u) != 0 || seen & (1 << v) != 0 {
                seen |= (1 << u) | (1 << v);
            }
        }
        if seen == before {
            return seen == nodes;
        }
    }
}

/// Best objective over every connected subgraph, found by enumerating all
/// edge subsets plus every single node.
pub fn brute_force(inst: &PcstInstance) -> f64 {
    let n = inst.node_prizes.len();
    let m = inst.edges.len();
    assert!(m <= 20);
    let mut best = inst.node_prizes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for mask in 1u32..(1u32 << m) {
        let mut nodes = 0u32;
        let mut chosen = Vec::new();
        let mut value = 0.0;
        for (i, e) in inst.edges.iter().enumerate() {
            if mask & (1 << i) != 0 {
                nodes |= (1 << e.u) | (1 << e.v);
                chosen.push((e.u, e.v));
                value += e.prize - inst.edge_cost;
            }
        }
        if !connected(n, nodes, &chosen) {
            continue;
        }
        value += (0..n).filter(|v| nodes & (1 << v) != 0).map(|v| inst.node_prizes[v]).sum::<f64>();
        best = best.max(value);
    }
    best
}

/// Whether `nodes` is connected by `edges` (indices into `inst.edges`).
pub fn solution_connected(inst: &PcstInstance, nodes: &[usize], edges: &[usize]) -> bool {
    if nodes.is_empty() {
        return false;
    }
    let mut seen = vec![nodes[0]];
    let mut changed = true;
    while changed {
        changed = false;
        for &e in edges {
            let PcstEdge { u, v, .. } = inst.edges[e];
            let (hu, hv) = (seen.contains(&u), seen.contains(&v));
            if hu != hv {
                seen.push(if hu { v } else { u });
                changed = true;
            }
        }
    }
    nodes.iter().all(|v| seen.contains(v))
        && edges
            .iter()
            .all(|&e| nodes.contains(&inst.edges[e].u) && nodes.contains(&inst.edges[e].v))
}

use std::collections::BTreeMap;

use mixrag::graph::{Entity, RelationType, TextualGraph, Triple};
use mixrag::params::ParamStore;
use mixrag::tensor::Tensor;

pub fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

/// Graph with `n` nodes and `m` random triples (self-loops allowed).
pub fn random_graph(rng: &mut Rng, n: usize, m: usize) -> TextualGraph {
    let entities = (0..n).map(|id| Entity { id, text: format!("node {id}") }).collect();
    let relations = (0..3).map(|id| RelationType { id, text: format!("rel {id}") }).collect();
    let triples = (0..m)
        .map(|_| Triple {
            head: rng.below(n),
            relation: rng.below(3),
            tail: rng.below(n),
            edge_text: None,
        })
        .collect();
    TextualGraph::build(entities, relations, triples).unwrap().0
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error per parameter between `analytic` and central
/// differences of `f` with step 1e-5.
pub fn finite_difference_errors(
    store: &ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    f: impl Fn(&ParamStore) -> f64,
) -> BTreeMap<String, f64> {
    let h = 1e-5;
    let mut out = BTreeMap::new();
    for (name, t) in store.iter() {
        let g = &analytic[name];
        let mut worst = 0.0f64;
        for i in 0..t.len() {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[i], numeric));
        }
        out.insert(name.to_string(), worst);
    }
    out
}
