mod common;

use std::collections::BTreeMap;

use common::{brute_force, random_instance, solution_connected};
use mixrag::embedding::EmbeddingTable;
use mixrag::graph::{Entity, RelationType, TextualGraph, Triple};
use mixrag::pcst::{solve, solve_exact, solve_heuristic, DEFAULT_EXACT_LIMIT};
use mixrag::rng::Rng;
use mixrag::subgraph::{run_subgraph_expert, solve_pcst, PrizeAssignment, SubgraphConfig};
use mixrag::tensor::Tensor;

#[test]
fn exact_solver_matches_enumeration() {
    let mut rng = Rng::new(2024);
    for _ in 0..100 {
        let n = 1 + rng.below(7);
        for cost in [0.5, 1.0, 2.0] {
            let inst = random_instance(&mut rng, n, 10, cost);
            let s = solve_exact(&inst);
            assert!((s.objective - brute_force(&inst)).abs() < 1e-9, "{inst:?}");
            assert!(solution_connected(&inst, &s.nodes, &s.edges));
            assert!((s.objective - inst.objective_of(&s.nodes, &s.edges)).abs() < 1e-9);
        }
    }
}

#[test]
fn heuristic_is_feasible_and_never_beats_the_optimum() {
    let mut rng = Rng::new(77);
    let mut ratio_sum = 0.0;
    let trials = 60;
    for _ in 0..trials {
        let n = 4 + rng.below(9);
        let cost = [0.5, 1.0, 2.0][rng.below(3)];
        let inst = random_instance(&mut rng, n, 2 * n, cost);
        let h = solve_heuristic(&inst);
        let e = solve_exact(&inst);
        assert!(solution_connected(&inst, &h.nodes, &h.edges));
        assert!((h.objective - inst.objective_of(&h.nodes, &h.edges)).abs() < 1e-9);
        assert!(h.objective <= e.objective + 1e-9);
        ratio_sum += h.objective / e.objective;
    }
    // quality is not guaranteed, but a regression to poor solutions should show
    assert!(ratio_sum / f64::from(trials) > 0.9, "{}", ratio_sum / f64::from(trials));
}

#[test]
fn heuristic_on_large_graphs_is_connected_and_consistent() {
    let mut rng = Rng::new(5);
    for _ in 0..20 {
        let n = 30 + rng.below(60);
        let mut inst = random_instance(&mut rng, n, 3 * n, 1.0);
        // sparse prizes, as from top-k retrieval
        for p in inst.node_prizes.iter_mut() {
            if rng.unit() < 0.7 {
                *p = 0.0;
            }
        }
        let s = solve(&inst, DEFAULT_EXACT_LIMIT);
        assert!(solution_connected(&inst, &s.nodes, &s.edges));
        assert!((s.objective - inst.objective_of(&s.nodes, &s.edges)).abs() < 1e-9);
        let best_single = inst.node_prizes.iter().copied().fold(0.0, f64::max);
        assert!(s.objective >= best_single - 1e-9);
    }
}

#[test]
fn raising_an_included_prize_never_lowers_the_optimum() {
    let mut rng = Rng::new(9);
    for _ in 0..100 {
        let n = 2 + rng.below(7);
        let mut inst = random_instance(&mut rng, n, 10, 1.0);
        let before = solve_exact(&inst);
        let v = before.nodes[rng.below(before.nodes.len())];
        inst.node_prizes[v] += rng.range(0.01, 3.0);
        assert!(solve_exact(&inst).objective >= before.objective - 1e-12);
    }
}

#[test]
fn huge_edge_cost_leaves_the_best_single_node() {
    let mut rng = Rng::new(10);
    for _ in 0..50 {
        let n = 2 + rng.below(20);
        let inst = random_instance(&mut rng, n, 2 * n, 1e6);
        let best = (0..n)
            .max_by(|&a, &b| inst.node_prizes[a].total_cmp(&inst.node_prizes[b]).then(b.cmp(&a)))
            .unwrap();
        for s in [solve(&inst, DEFAULT_EXACT_LIMIT), solve_heuristic(&inst)] {
            assert_eq!(s.nodes, vec![best]);
            assert!(s.edges.iter().all(|&e| inst.edges[e].u == inst.edges[e].v));
        }
    }
}

fn star() -> TextualGraph {
    let entities = (0..6).map(|id| Entity { id, text: format!("n{id}") }).collect();
    let relations = vec![RelationType { id: 0, text: "r".into() }];
    let triples = (1..6)
        .map(|leaf| Triple { head: 0, relation: 0, tail: leaf, edge_text: None })
        .collect();
    TextualGraph::new(entities, relations, triples).unwrap()
}

#[test]
fn star_center_and_two_relevant_leaves_are_kept() {
    let g = star();
    let q = [1.0, 0.0, 0.0];
    let node_rows: [&[f64]; 6] = [
        &[1.0, 0.0, 0.0],
        &[0.9, 0.1, 0.0],
        &[0.0, 1.0, 0.0],
        &[0.8, 0.0, 0.2],
        &[0.0, 0.0, 1.0],
        &[0.0, -1.0, 0.0],
    ];
    let edge_rows: [&[f64]; 5] = [&[0.0, 1.0, 0.0]; 5];
    let table = EmbeddingTable::new(
        3,
        Tensor::from_rows(&node_rows).unwrap(),
        Tensor::from_rows(&[&[1.0, 0.0, 0.0]]).unwrap(),
        Tensor::from_rows(&edge_rows).unwrap(),
    )
    .unwrap();
    let config = SubgraphConfig { k: 3, edge_cost: 0.5, ..SubgraphConfig::default() };
    let r = run_subgraph_expert(&q, &g, &table, &config).unwrap();
    assert_eq!(r.subgraph.node_map, vec![0, 1, 3]);
    assert_eq!(r.subgraph.triple_map, vec![0, 2]);
    // brute-force oracle over the same prizes: 3 + 2 + 1 − 2·0.5
    let inst = mixrag::pcst::PcstInstance {
        node_prizes: vec![3.0, 2.0, 0.0, 1.0, 0.0, 0.0],
        edges: (1..6).map(|l| mixrag::pcst::PcstEdge { u: 0, v: l, prize: 0.0 }).collect(),
        edge_cost: 0.5,
    };
    assert!((brute_force(&inst) - r.objective).abs() < 1e-12);
    assert!((r.objective - 5.0).abs() < 1e-12);
}

#[test]
fn k_beyond_graph_size_is_clamped() {
    let g = star();
    let mut rng = Rng::new(1);
    let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.range(0.1, 1.0)).collect()).collect();
    let node_rows: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let edge_rows: Vec<&[f64]> = rows[..5].iter().map(Vec::as_slice).collect();
    let table = EmbeddingTable::new(
        3,
        Tensor::from_rows(&node_rows).unwrap(),
        Tensor::from_rows(&[&[1.0, 0.0, 0.0]]).unwrap(),
        Tensor::from_rows(&edge_rows).unwrap(),
    )
    .unwrap();
    let config = SubgraphConfig { k: 100, ..SubgraphConfig::default() };
    let r = run_subgraph_expert(&[0.5, 0.5, 0.5], &g, &table, &config).unwrap();
    assert!(r.is_connected());
    // all positive similarities, so every item is prized and all of them pay
    assert_eq!(r.subgraph.node_map.len(), 6);
    assert!((r.objective - r.recompute_objective()).abs() < 1e-9);
}

#[test]
fn empty_prizes_give_a_single_node() {
    let g = star();
    let prizes = PrizeAssignment { node_prizes: BTreeMap::new(), edge_prizes: BTreeMap::new(), edge_cost: 1.0 };
    let r = solve_pcst(&g, &prizes).unwrap();
    assert_eq!(r.graph().num_entities(), 1);
    assert_eq!(r.objective, 0.0);
}
