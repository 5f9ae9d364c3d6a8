//! Planted synthetic question-answering corpora over random trees.
//!
//! Every graph is a random tree whose nodes carry two-word pseudo-word
//! names with no token shared inside a graph. Sibling edges use distinct
//! relations, so each (entity, relation) pair has exactly one answer.

use std::collections::{BTreeMap, BTreeSet};

use crate::data::{EvalExample, QueryClass, TrainExample};
use crate::error::{Error, Result};
use crate::gate::ExpertId;
use crate::graph::{Entity, RelationType, TextualGraph, Triple};
use crate::rng::Rng;

pub const RELATIONS: &[&str] = &[
    "capital", "founder", "mentor", "rival", "birthplace", "employer", "neighbor", "author",
    "owner", "successor", "origin", "patron",
];

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "th"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "", "n", "r", "l", "x", "sh", "k"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_graphs: usize,
    pub nodes_per_graph: usize,
    /// Most children per node.
    pub branching: usize,
    /// Fraction of queries that are single-hop.
    pub one_hop_fraction: f64,
    pub train_queries: usize,
    /// Held-out queries, disjoint from the training ones.
    pub eval_queries: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_graphs: 50,
            nodes_per_graph: 15,
            branching: 3,
            one_hop_fraction: 1.0,
            train_queries: 200,
            eval_queries: 100,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("num_graphs", self.num_graphs),
            ("nodes_per_graph", self.nodes_per_graph),
            ("branching", self.branching),
        ] {
            if v == 0 {
                return Err(Error::Parameter(format!("{what} must be positive")));
            }
        }
        if self.train_queries + self.eval_queries == 0 {
            return Err(Error::Parameter("no queries requested".into()));
        }
        if self.branching > RELATIONS.len() {
            return Err(Error::Parameter(format!(
                "branching {} exceeds the {} relation types",
                self.branching,
                RELATIONS.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.one_hop_fraction) {
            return Err(Error::Parameter("one_hop_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub graphs: Vec<(String, TextualGraph)>,
    pub train: Vec<TrainExample>,
    pub eval: Vec<EvalExample>,
    /// Retrieval supervision for each held-out example, aligned with `eval`.
    pub eval_gold: Vec<TrainExample>,
}

fn pseudo_word(rng: &mut Rng) -> String {
    let syllables = 2 + rng.below(2);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.below(ONSETS.len())]);
        w.push_str(VOWELS[rng.below(VOWELS.len())]);
    }
    w.push_str(CODAS[rng.below(CODAS.len())]);
    let mut chars = w.chars();
    let first = chars.next().expect("non-empty").to_ascii_uppercase();
    std::iter::once(first).chain(chars).collect()
}

/// Two-word names with every word distinct across the graph.
fn names(rng: &mut Rng, n: usize) -> Vec<String> {
    let mut used = BTreeSet::new();
    let mut word = |rng: &mut Rng| loop {
        let w = pseudo_word(rng);
        if used.insert(w.to_lowercase()) {
            return w;
        }
    };
    (0..n).map(|_| format!("{} {}", word(rng), word(rng))).collect()
}

fn random_tree(rng: &mut Rng, n: usize, branching: usize) -> TextualGraph {
    let entities: Vec<Entity> = names(rng, n)
        .into_iter()
        .enumerate()
        .map(|(id, text)| Entity { id, text })
        .collect();
    let relations: Vec<RelationType> = RELATIONS
        .iter()
        .enumerate()
        .map(|(id, t)| RelationType { id, text: t.to_string() })
        .collect();
    let mut used: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    let mut triples = Vec::new();
    for child in 1..n {
        let open: Vec<usize> = (0..child).filter(|&p| used[p].len() < branching).collect();
        // a full tree of this branching cannot grow; fall back to any node
        let parent = if open.is_empty() {
            rng.below(child)
        } else {
            open[rng.below(open.len())]
        };
        let free: Vec<usize> = (0..RELATIONS.len()).filter(|r| !used[parent].contains(r)).collect();
        let rel = free[rng.below(free.len())];
        used[parent].insert(rel);
        triples.push(Triple { head: parent, relation: rel, tail: child, edge_text: None });
    }
    TextualGraph::new(entities, relations, triples).expect("tree is well formed")
}

#[derive(Debug, Clone)]
struct Planted {
    graph: usize,
    question: String,
    topic: usize,
    triples: Vec<usize>,
    answer: usize,
    class: QueryClass,
}

fn candidates(gi: usize, g: &TextualGraph) -> (Vec<Planted>, Vec<Planted>) {
    let mut one = Vec::new();
    let mut two = Vec::new();
    let out: BTreeMap<usize, Vec<usize>> = g.triples().iter().enumerate().fold(BTreeMap::new(), |mut m, (i, t)| {
        m.entry(t.head).or_insert_with(Vec::new).push(i);
        m
    });
    for (i, t) in g.triples().iter().enumerate() {
        let x = g.entity_text(t.head);
        let r1 = g.relation_text(t.relation);
        one.push(Planted {
            graph: gi,
            question: format!("What is {r1} of {x}?"),
            topic: t.head,
            triples: vec![i],
            answer: t.tail,
            class: QueryClass::Simple,
        });
        for &j in out.get(&t.tail).into_iter().flatten() {
            let t2 = &g.triples()[j];
            let r2 = g.relation_text(t2.relation);
            two.push(Planted {
                graph: gi,
                question: format!("What is {r2} of the {r1} of {x}?"),
                topic: t.head,
                triples: vec![i, j],
                answer: t2.tail,
                class: QueryClass::Complex,
            });
        }
    }
    (one, two)
}

/// Random trees and planted queries, deterministic in `spec.seed`.
///
/// Single-hop questions read "What is R of X?" and multi-hop ones "What is
/// R2 of the R1 of X?". The gold entity is the mentioned entity X and the
/// gold triples are the path to the answer.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = Rng::derive(spec.seed, "synthetic");
    let graphs: Vec<(String, TextualGraph)> = (0..spec.num_graphs)
        .map(|i| (format!("g{i:03}"), random_tree(&mut rng, spec.nodes_per_graph, spec.branching)))
        .collect();
    let mut one = Vec::new();
    let mut two = Vec::new();
    for (gi, (_, g)) in graphs.iter().enumerate() {
        let (a, b) = candidates(gi, g);
        one.extend(a);
        two.extend(b);
    }
    rng.shuffle(&mut one);
    rng.shuffle(&mut two);
    let total = spec.train_queries + spec.eval_queries;
    let want_one = (spec.one_hop_fraction * total as f64).round() as usize;
    let mut take_one = want_one.min(one.len());
    let mut take_two = (total - want_one).min(two.len());
    // top up from the other pool when one runs short
    take_one = (take_one + (total - take_one - take_two)).min(one.len());
    take_two = (total - take_one).min(two.len());
    if take_one + take_two < total {
        log::warn!(
            "only {} distinct queries available, {} requested",
            take_one + take_two,
            total
        );
    }
    // keep both classes in both splits
    let mut planted: Vec<Planted> = one.into_iter().take(take_one).chain(two.into_iter().take(take_two)).collect();
    rng.shuffle(&mut planted);
    let n_train = spec.train_queries.min(planted.len());

    let mut corpus = SyntheticCorpus {
        graphs,
        train: Vec::new(),
        eval: Vec::new(),
        eval_gold: Vec::new(),
    };
    for (qi, p) in planted.into_iter().enumerate() {
        let (name, g) = &corpus.graphs[p.graph];
        let ex = TrainExample {
            query: p.question.clone(),
            graph: name.clone(),
            gold_entities: BTreeSet::from([p.topic]),
            gold_triples: p.triples.iter().copied().collect(),
            best_expert: Some(match p.class {
                QueryClass::Simple => ExpertId::Relation,
                QueryClass::Complex => ExpertId::Subgraph,
            }),
        };
        if qi < n_train {
            corpus.train.push(ex);
        } else {
            corpus.eval.push(EvalExample {
                id: format!("q{:04}", qi - n_train),
                question: p.question,
                graph: name.clone(),
                answers: vec![g.entity_text(p.answer).to_string()],
                query_class: Some(p.class),
            });
            corpus.eval_gold.push(ex);
        }
    }
    Ok(corpus)
}
