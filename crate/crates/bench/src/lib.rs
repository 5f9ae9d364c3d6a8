//! Shared fixtures for the benchmarks.

use mixrag::data::GraphSet;
use mixrag::embedding::HashEmbedder;
use mixrag::pcst::{PcstEdge, PcstInstance};
use mixrag::rng::Rng;
use mixrag::synth::{generate_synthetic, SyntheticCorpus, SyntheticSpec};

/// Random connected PCST instance: a spanning path plus `extra` chords.
pub fn pcst_instance(n: usize, extra: usize, seed: u64) -> PcstInstance {
    let mut rng = Rng::new(seed);
    let mut edges: Vec<PcstEdge> = (1..n)
        .map(|v| PcstEdge { u: rng.below(v), v, prize: rng.range(0.0, 2.0) })
        .collect();
    for _ in 0..extra {
        edges.push(PcstEdge { u: rng.below(n), v: rng.below(n), prize: rng.range(0.0, 2.0) });
    }
    PcstInstance {
        node_prizes: (0..n).map(|_| if rng.unit() < 0.3 { rng.range(0.0, 5.0) } else { 0.0 }).collect(),
        edges,
        edge_cost: 0.5,
    }
}

/// One synthetic graph of `nodes` nodes, hash-embedded at `dim`.
pub fn corpus(nodes: usize, dim: usize) -> (SyntheticCorpus, GraphSet) {
    let spec = SyntheticSpec {
        num_graphs: 1,
        nodes_per_graph: nodes,
        train_queries: 4,
        eval_queries: 0,
        ..SyntheticSpec::default()
    };
    let c = generate_synthetic(&spec).expect("valid spec");
    let mut set = GraphSet::new(HashEmbedder::new(dim, 0).expect("positive dim"));
    for (name, g) in &c.graphs {
        set.insert_hashed(name, g.clone()).expect("graph embeds");
    }
    (c, set)
}
