//! Subgraph expert retrieval: cosine top-k over nodes and triples, rank
//! prizes, and prize-collecting Steiner tree extraction of a connected
//! query-relevant subgraph.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::{format_error, GraphDocument, Subgraph, TextualGraph};
use crate::pcst::{self, PcstEdge, PcstInstance, DEFAULT_EXACT_LIMIT};
use crate::tensor::{cosine, Tensor};

pub const DEFAULT_EDGE_COST: f64 = 0.5;

/// Ids of the `k` rows of `table` most cosine-similar to `query`, descending,
/// ties by ascending id. Zero rows score 0.
pub fn cosine_topk(query: &[f64], table: &Tensor, k: usize) -> Result<Vec<(usize, f64)>> {
    if table.rank() != 2 || table.rows() == 0 {
        return Err(Error::Parameter("cosine_topk needs a non-empty table".into()));
    }
    if k == 0 {
        return Err(Error::Parameter("cosine_topk needs k >= 1".into()));
    }
    if table.cols() != query.len() {
        return Err(Error::dim("cosine_topk", &[query.len()], table.shape()));
    }
    let mut scored: Vec<(usize, f64)> = (0..table.rows())
        .map(|i| (i, cosine(query, table.row(i))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrizeRule {
    /// `k − rank`.
    #[default]
    LinearRank,
    /// `k · similarity`.
    Similarity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrizeAssignment {
    pub node_prizes: BTreeMap<usize, f64>,
    pub edge_prizes: BTreeMap<usize, f64>,
    pub edge_cost: f64,
}

impl PrizeAssignment {
    pub fn node(&self, id: usize) -> f64 {
        self.node_prizes.get(&id).copied().unwrap_or(0.0)
    }

    pub fn edge(&self, id: usize) -> f64 {
        self.edge_prizes.get(&id).copied().unwrap_or(0.0)
    }
}

fn rank_prizes(ranked: &[(usize, f64)], k: usize, rule: PrizeRule) -> BTreeMap<usize, f64> {
    ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(r, &(id, sim))| {
            let p = match rule {
                PrizeRule::LinearRank => (k - r) as f64,
                PrizeRule::Similarity => k as f64 * sim.max(0.0),
            };
            (id, p)
        })
        .collect()
}

/// Prizes by rank: the item at rank `r < k` gets `k − r`, everything else 0.
pub fn assign_prizes(
    ranked_nodes: &[(usize, f64)],
    ranked_edges: &[(usize, f64)],
    k: usize,
    edge_cost: f64,
) -> PrizeAssignment {
    assign_prizes_with(ranked_nodes, ranked_edges, k, edge_cost, PrizeRule::LinearRank)
}

pub fn assign_prizes_with(
    ranked_nodes: &[(usize, f64)],
    ranked_edges: &[(usize, f64)],
    k: usize,
    edge_cost: f64,
    rule: PrizeRule,
) -> PrizeAssignment {
    PrizeAssignment {
        node_prizes: rank_prizes(ranked_nodes, k, rule),
        edge_prizes: rank_prizes(ranked_edges, k, rule),
        edge_cost,
    }
}

/// A connected subgraph chosen by PCST, with the prizes it collected.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedSubgraph {
    pub subgraph: Subgraph,
    pub objective: f64,
    /// Prize of each subgraph node, indexed by subgraph id.
    pub node_prizes: Vec<f64>,
    /// Prize of each subgraph triple, indexed by subgraph id.
    pub edge_prizes: Vec<f64>,
    pub edge_cost: f64,
}

#[derive(Serialize, Deserialize)]
struct RetrievedDocument {
    #[serde(flatten)]
    graph: GraphDocument,
    objective: f64,
    node_map: Vec<usize>,
    triple_map: Vec<usize>,
    node_prizes: Vec<f64>,
    edge_prizes: Vec<f64>,
    edge_cost: f64,
}

impl RetrievedSubgraph {
    pub fn graph(&self) -> &TextualGraph {
        &self.subgraph.graph
    }

    pub fn recompute_objective(&self) -> f64 {
        let np: f64 = self.node_prizes.iter().sum();
        let ep: f64 = self.edge_prizes.iter().sum();
        np + ep - self.edge_cost * self.edge_prizes.len() as f64
    }

    pub fn is_connected(&self) -> bool {
        self.subgraph.graph.is_connected()
    }

    /// Graph JSON plus `objective`, back-maps and prizes.
    pub fn to_json(&self) -> String {
        let doc = RetrievedDocument {
            graph: self.subgraph.graph.to_document(),
            objective: self.objective,
            node_map: self.subgraph.node_map.clone(),
            triple_map: self.subgraph.triple_map.clone(),
            node_prizes: self.node_prizes.clone(),
            edge_prizes: self.edge_prizes.clone(),
            edge_cost: self.edge_cost,
        };
        serde_json::to_string_pretty(&doc).expect("subgraph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: RetrievedDocument = serde_json::from_str(text).map_err(format_error)?;
        let (graph, _) = TextualGraph::from_document(doc.graph)?;
        if doc.node_map.len() != graph.num_entities()
            || doc.node_prizes.len() != graph.num_entities()
            || doc.triple_map.len() != graph.num_triples()
            || doc.edge_prizes.len() != graph.num_triples()
        {
            return Err(Error::Parameter(
                "back-maps and prizes must match the subgraph size".into(),
            ));
        }
        Ok(Self {
            subgraph: Subgraph {
                graph,
                node_map: doc.node_map,
                triple_map: doc.triple_map,
            },
            objective: doc.objective,
            node_prizes: doc.node_prizes,
            edge_prizes: doc.edge_prizes,
            edge_cost: doc.edge_cost,
        })
    }
}

/// Solves PCST on the whole graph.
pub fn solve_pcst(graph: &TextualGraph, prizes: &PrizeAssignment) -> Result<RetrievedSubgraph> {
    let all: Vec<usize> = (0..graph.num_entities()).collect();
    solve_on(graph, prizes, &all, DEFAULT_EXACT_LIMIT)
}

/// Solves PCST restricted to `nodes` (ascending source ids) and the triples
/// among them.
fn solve_on(
    graph: &TextualGraph,
    prizes: &PrizeAssignment,
    nodes: &[usize],
    exact_limit: usize,
) -> Result<RetrievedSubgraph> {
    if graph.num_entities() == 0 || nodes.is_empty() {
        return Err(Error::Parameter("PCST needs a non-empty graph".into()));
    }
    if !(prizes.edge_cost > 0.0) {
        return Err(Error::Parameter(format!(
            "edge cost must be positive, got {}",
            prizes.edge_cost
        )));
    }
    let mut local = vec![usize::MAX; graph.num_entities()];
    for (i, &v) in nodes.iter().enumerate() {
        local[v] = i;
    }
    let mut edge_ids = Vec::new();
    let mut edges = Vec::new();
    for (t, tr) in graph.triples().iter().enumerate() {
        let (u, v) = (local[tr.head], local[tr.tail]);
        if u != usize::MAX && v != usize::MAX {
            edge_ids.push(t);
            edges.push(PcstEdge {
                u,
                v,
                prize: prizes.edge(t),
            });
        }
    }
    let inst = PcstInstance {
        node_prizes: nodes.iter().map(|&v| prizes.node(v)).collect(),
        edges,
        edge_cost: prizes.edge_cost,
    };
    let sol = pcst::solve(&inst, exact_limit);
    let node_set: BTreeSet<usize> = sol.nodes.iter().map(|&i| nodes[i]).collect();
    let triple_set: BTreeSet<usize> = sol.edges.iter().map(|&e| edge_ids[e]).collect();
    let subgraph = graph.induced_subgraph(&node_set, &triple_set)?;
    let node_prizes = subgraph.node_map.iter().map(|&v| prizes.node(v)).collect();
    let edge_prizes = subgraph.triple_map.iter().map(|&t| prizes.edge(t)).collect();
    let out = RetrievedSubgraph {
        subgraph,
        objective: 0.0,
        node_prizes,
        edge_prizes,
        edge_cost: prizes.edge_cost,
    };
    Ok(RetrievedSubgraph {
        objective: out.recompute_objective(),
        ..out
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubgraphConfig {
    pub k: usize,
    pub edge_cost: f64,
    pub prize_rule: PrizeRule,
    /// Restrict the search to nodes within this many hops of a prized item.
    pub hop_radius: Option<usize>,
    pub exact_limit: usize,
}

impl Default for SubgraphConfig {
    fn default() -> Self {
        Self {
            k: crate::experts::DEFAULT_TOP_K,
            edge_cost: DEFAULT_EDGE_COST,
            prize_rule: PrizeRule::LinearRank,
            hop_radius: None,
            exact_limit: DEFAULT_EXACT_LIMIT,
        }
    }
}

/// Top-k retrieval, prizes and PCST for one query embedding.
///
/// Only items with positive similarity are prized, so a node unrelated to
/// the query never enters the subgraph on its own merit.
pub fn run_subgraph_expert(
    query: &[f64],
    graph: &TextualGraph,
    table: &EmbeddingTable,
    config: &SubgraphConfig,
) -> Result<RetrievedSubgraph> {
    if config.k == 0 {
        return Err(Error::Parameter("subgraph expert needs k >= 1".into()));
    }
    if graph.num_entities() == 0 {
        return Err(Error::Parameter("subgraph expert needs a non-empty graph".into()));
    }
    let k_nodes = clamp_k(config.k, graph.num_entities(), "nodes");
    let mut ranked_nodes = cosine_topk(query, table.nodes(), k_nodes)?;
    ranked_nodes.retain(|&(_, s)| s > 0.0);
    let mut ranked_edges = if graph.num_triples() > 0 {
        let k_edges = clamp_k(config.k, graph.num_triples(), "triples");
        cosine_topk(query, table.triples(), k_edges)?
    } else {
        Vec::new()
    };
    ranked_edges.retain(|&(_, s)| s > 0.0);
    let prizes = assign_prizes_with(
        &ranked_nodes,
        &ranked_edges,
        config.k,
        config.edge_cost,
        config.prize_rule,
    );
    let nodes: Vec<usize> = match config.hop_radius {
        Some(h) => within_hops(graph, &prizes, h),
        None => (0..graph.num_entities()).collect(),
    };
    solve_on(graph, &prizes, &nodes, config.exact_limit)
}

fn clamp_k(k: usize, n: usize, what: &str) -> usize {
    if k > n {
        log::debug!("k={k} exceeds {n} {what}; using {n}");
        n
    } else {
        k
    }
}

/// Nodes within `radius` undirected hops of any prized node or prized-edge
/// endpoint, ascending. Falls back to all nodes when nothing is prized.
fn within_hops(graph: &TextualGraph, prizes: &PrizeAssignment, radius: usize) -> Vec<usize> {
    let n = graph.num_entities();
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    let seed = |v: usize, dist: &mut Vec<usize>, queue: &mut VecDeque<usize>| {
        if dist[v] == usize::MAX {
            dist[v] = 0;
            queue.push_back(v);
        }
    };
    for &v in prizes.node_prizes.keys() {
        seed(v, &mut dist, &mut queue);
    }
    for &t in prizes.edge_prizes.keys() {
        let tr = &graph.triples()[t];
        seed(tr.head, &mut dist, &mut queue);
        seed(tr.tail, &mut dist, &mut queue);
    }
    if queue.is_empty() {
        return (0..n).collect();
    }
    while let Some(v) = queue.pop_front() {
        if dist[v] == radius {
            continue;
        }
        for &t in graph.adjacency(v) {
            let tr = &graph.triples()[t];
            let other = if tr.head == v { tr.tail } else { tr.head };
            if dist[other] == usize::MAX {
                dist[other] = dist[v] + 1;
                queue.push_back(other);
            }
        }
    }
    (0..n).filter(|&v| dist[v] != usize::MAX).collect()
}
