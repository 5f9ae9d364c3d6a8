//! Textual graph store: entities, relation types and triples, each carrying
//! text. Graphs are validated on construction and immutable afterwards.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationType {
    pub id: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
    pub edge_text: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// The queried node is the head.
    Outgoing,
    /// The queried node is the tail.
    Incoming,
    /// Head and tail coincide.
    Loop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub triple: usize,
    pub other: usize,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextualGraph {
    entities: Vec<Entity>,
    relations: Vec<RelationType>,
    triples: Vec<Triple>,
    adjacency: Vec<Vec<usize>>,
}

/// Result of [`TextualGraph::induced_subgraph`]: a graph with fresh dense ids
/// plus maps from the new ids back to the source graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph {
    pub graph: TextualGraph,
    pub node_map: Vec<usize>,
    pub triple_map: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct NodeRecord {
    pub id: usize,
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct TripleRecord {
    pub head: usize,
    pub rel: usize,
    pub tail: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// On-disk graph document.
#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct GraphDocument {
    pub nodes: Vec<NodeRecord>,
    pub relations: Vec<NodeRecord>,
    pub triples: Vec<TripleRecord>,
}

impl TextualGraph {
    /// Validates and builds a graph. Entities and relations may arrive in any
    /// order but their ids must be exactly `0..n`. Duplicate triples are
    /// dropped; the number dropped is returned alongside the graph.
    pub fn build(
        mut entities: Vec<Entity>,
        mut relations: Vec<RelationType>,
        triples: Vec<Triple>,
    ) -> Result<(Self, usize)> {
        entities.sort_by_key(|e| e.id);
        relations.sort_by_key(|r| r.id);
        check_dense("node", entities.iter().map(|e| e.id))?;
        check_dense("relation", relations.iter().map(|r| r.id))?;
        for e in &entities {
            if e.text.trim().is_empty() {
                return Err(Error::Parameter(format!("entity {} has empty text", e.id)));
            }
        }
        for r in &relations {
            if r.text.trim().is_empty() {
                return Err(Error::Parameter(format!("relation {} has empty text", r.id)));
            }
        }
        let mut seen = HashSet::new();
        let mut kept = Vec::with_capacity(triples.len());
        let mut duplicates = 0;
        for (i, t) in triples.into_iter().enumerate() {
            for (role, id, len) in [
                ("head", t.head, entities.len()),
                ("tail", t.tail, entities.len()),
            ] {
                if id >= len {
                    return Err(Error::ReferentialIntegrity {
                        triple: i,
                        detail: format!("{role} references unknown node {id}"),
                    });
                }
            }
            if t.relation >= relations.len() {
                return Err(Error::ReferentialIntegrity {
                    triple: i,
                    detail: format!("relation references unknown relation {}", t.relation),
                });
            }
            if seen.insert(t.clone()) {
                kept.push(t);
            } else {
                duplicates += 1;
            }
        }
        let adjacency = build_adjacency(entities.len(), &kept);
        Ok((
            Self {
                entities,
                relations,
                triples: kept,
                adjacency,
            },
            duplicates,
        ))
    }

    /// Like [`TextualGraph::build`] but logs and discards the duplicate count.
    pub fn new(
        entities: Vec<Entity>,
        relations: Vec<RelationType>,
        triples: Vec<Triple>,
    ) -> Result<Self> {
        let (g, dups) = Self::build(entities, relations, triples)?;
        if dups > 0 {
            log::warn!("removed {dups} duplicate triple(s)");
        }
        Ok(g)
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn relations(&self) -> &[RelationType] {
        &self.relations
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn entity_text(&self, id: usize) -> &str {
        &self.entities[id].text
    }

    pub fn relation_text(&self, id: usize) -> &str {
        &self.relations[id].text
    }

    /// Incident triple ids of `v`, ascending.
    pub fn adjacency(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    /// `(head text, relation text, tail text)` of a triple.
    pub fn triple_texts(&self, t: usize) -> (&str, &str, &str) {
        let tr = &self.triples[t];
        (
            &self.entities[tr.head].text,
            &self.relations[tr.relation].text,
            &self.entities[tr.tail].text,
        )
    }

    /// Text used to embed a triple: its explicit edge text, otherwise
    /// `head [SEP] relation [SEP] tail`.
    pub fn triple_embedding_text(&self, t: usize) -> String {
        if let Some(text) = self.triples[t].edge_text.as_deref() {
            if !text.trim().is_empty() {
                return text.to_string();
            }
        }
        let (h, r, tl) = self.triple_texts(t);
        format!("{h} [SEP] {r} [SEP] {tl}")
    }

    pub fn neighbors(&self, v: usize) -> Result<Vec<Neighbor>> {
        if v >= self.entities.len() {
            return Err(Error::Range {
                what: "entity",
                index: v,
                len: self.entities.len(),
            });
        }
        Ok(self.adjacency[v]
            .iter()
            .map(|&t| {
                let tr = &self.triples[t];
                let (other, direction) = if tr.head == tr.tail {
                    (v, Direction::Loop)
                } else if tr.head == v {
                    (tr.tail, Direction::Outgoing)
                } else {
                    (tr.head, Direction::Incoming)
                };
                Neighbor {
                    triple: t,
                    other,
                    direction,
                }
            })
            .collect())
    }

    /// Weak connectivity, treating triples as undirected edges. The empty
    /// graph counts as disconnected.
    pub fn is_connected(&self) -> bool {
        let n = self.entities.len();
        if n == 0 {
            return false;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &t in &self.adjacency[v] {
                let tr = &self.triples[t];
                let other = if tr.head == v { tr.tail } else { tr.head };
                if !seen[other] {
                    seen[other] = true;
                    count += 1;
                    stack.push(other);
                }
            }
        }
        count == n
    }

    /// True when the stored adjacency equals a fresh rebuild from the triples.
    pub fn adjacency_is_consistent(&self) -> bool {
        build_adjacency(self.entities.len(), &self.triples) == self.adjacency
    }

    /// Subgraph on `node_ids` keeping `triple_ids`, with ids renumbered in
    /// ascending order of the source ids. Relation types are carried over
    /// unchanged.
    pub fn induced_subgraph(
        &self,
        node_ids: &BTreeSet<usize>,
        triple_ids: &BTreeSet<usize>,
    ) -> Result<Subgraph> {
        let mut remap = HashMap::with_capacity(node_ids.len());
        let mut entities = Vec::with_capacity(node_ids.len());
        for (new, &old) in node_ids.iter().enumerate() {
            if old >= self.entities.len() {
                return Err(Error::Range {
                    what: "entity",
                    index: old,
                    len: self.entities.len(),
                });
            }
            remap.insert(old, new);
            entities.push(Entity {
                id: new,
                text: self.entities[old].text.clone(),
            });
        }
        let mut triples = Vec::with_capacity(triple_ids.len());
        for &t in triple_ids {
            let tr = self.triples.get(t).ok_or(Error::Range {
                what: "triple",
                index: t,
                len: self.triples.len(),
            })?;
            let (Some(&head), Some(&tail)) = (remap.get(&tr.head), remap.get(&tr.tail)) else {
                return Err(Error::Contract(format!(
                    "triple {t} has an endpoint outside the node set"
                )));
            };
            triples.push(Triple {
                head,
                relation: tr.relation,
                tail,
                edge_text: tr.edge_text.clone(),
            });
        }
        let adjacency = build_adjacency(entities.len(), &triples);
        Ok(Subgraph {
            graph: TextualGraph {
                entities,
                relations: self.relations.clone(),
                triples,
                adjacency,
            },
            node_map: node_ids.iter().copied().collect(),
            triple_map: triple_ids.iter().copied().collect(),
        })
    }

    pub(crate) fn to_document(&self) -> GraphDocument {
        GraphDocument {
            nodes: self
                .entities
                .iter()
                .map(|e| NodeRecord {
                    id: e.id,
                    text: e.text.clone(),
                })
                .collect(),
            relations: self
                .relations
                .iter()
                .map(|r| NodeRecord {
                    id: r.id,
                    text: r.text.clone(),
                })
                .collect(),
            triples: self
                .triples
                .iter()
                .map(|t| TripleRecord {
                    head: t.head,
                    rel: t.relation,
                    tail: t.tail,
                    text: t.edge_text.clone(),
                })
                .collect(),
        }
    }

    pub(crate) fn from_document(doc: GraphDocument) -> Result<(Self, usize)> {
        Self::build(
            doc.nodes
                .into_iter()
                .map(|n| Entity { id: n.id, text: n.text })
                .collect(),
            doc.relations
                .into_iter()
                .map(|r| RelationType { id: r.id, text: r.text })
                .collect(),
            doc.triples
                .into_iter()
                .map(|t| Triple {
                    head: t.head,
                    relation: t.rel,
                    tail: t.tail,
                    edge_text: t.text,
                })
                .collect(),
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("graph serializes")
    }

    /// Parses a graph document, returning the graph and the number of
    /// duplicate triples removed.
    pub fn from_json(text: &str) -> Result<(Self, usize)> {
        let doc: GraphDocument = serde_json::from_str(text).map_err(format_error)?;
        Self::from_document(doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn format_error(e: serde_json::Error) -> Error {
    Error::Format {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Loads and validates a graph file, warning about removed duplicates.
pub fn load_graph(path: impl AsRef<Path>) -> Result<TextualGraph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (g, dups) = TextualGraph::from_json(&text)?;
    if dups > 0 {
        log::warn!("{}: removed {dups} duplicate triple(s)", path.display());
    }
    Ok(g)
}

fn check_dense(kind: &str, ids: impl Iterator<Item = usize>) -> Result<()> {
    for (expected, id) in ids.enumerate() {
        if id != expected {
            return Err(Error::Parameter(format!(
                "{kind} ids must be dense 0..n; expected {expected}, found {id}"
            )));
        }
    }
    Ok(())
}

fn build_adjacency(n: usize, triples: &[Triple]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for (i, t) in triples.iter().enumerate() {
        adj[t.head].push(i);
        if t.tail != t.head {
            adj[t.tail].push(i);
        }
    }
    adj
}

/// Converts a GraphQA-style tab-separated export into a graph.
///
/// Two-field lines are nodes (`node_id \t node_text`), three-field lines are
/// edges (`src \t edge_text \t dst`). Lines whose id fields are not integers
/// (headers) and blank lines are skipped. Each distinct edge text becomes a
/// relation type, numbered in order of first appearance.
pub fn convert_tsv(text: &str) -> Result<TextualGraph> {
    let mut entities = Vec::new();
    let mut relations: Vec<RelationType> = Vec::new();
    let mut rel_ids: HashMap<String, usize> = HashMap::new();
    let mut triples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.as_slice() {
            [id, node_text] => {
                let Ok(id) = id.trim().parse::<usize>() else { continue };
                entities.push(Entity {
                    id,
                    text: node_text.trim().to_string(),
                });
            }
            [src, edge_text, dst] => {
                let (Ok(src), Ok(dst)) = (src.trim().parse::<usize>(), dst.trim().parse::<usize>())
                else {
                    continue;
                };
                let edge_text = edge_text.trim().to_string();
                let next = relations.len();
                let rel = *rel_ids.entry(edge_text.clone()).or_insert_with(|| {
                    relations.push(RelationType {
                        id: next,
                        text: edge_text.clone(),
                    });
                    next
                });
                triples.push(Triple {
                    head: src,
                    relation: rel,
                    tail: dst,
                    edge_text: None,
                });
            }
            _ => {
                return Err(Error::Format {
                    line: lineno + 1,
                    column: 1,
                    message: format!("expected 2 or 3 tab-separated fields, got {}", fields.len()),
                })
            }
        }
    }
    TextualGraph::new(entities, relations, triples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ent(id: usize, text: &str) -> Entity {
        Entity {
            id,
            text: text.into(),
        }
    }

    fn rel(id: usize, text: &str) -> RelationType {
        RelationType {
            id,
            text: text.into(),
        }
    }

    fn tri(head: usize, relation: usize, tail: usize) -> Triple {
        Triple {
            head,
            relation,
            tail,
            edge_text: None,
        }
    }

    #[test]
    fn two_nodes_one_edge() {
        let json = r#"{"nodes":[{"id":0,"text":"a"},{"id":1,"text":"b"}],
            "relations":[{"id":0,"text":"r"}],
            "triples":[{"head":0,"rel":0,"tail":1}]}"#;
        let (g, dups) = TextualGraph::from_json(json).unwrap();
        assert_eq!((g.num_entities(), g.num_triples(), dups), (2, 1, 0));
    }

    #[test]
    fn dangling_node_is_rejected() {
        let json = r#"{"nodes":[{"id":0,"text":"a"},{"id":1,"text":"b"}],
            "relations":[{"id":0,"text":"r"}],
            "triples":[{"head":0,"rel":0,"tail":99}]}"#;
        let err = TextualGraph::from_json(json).unwrap_err();
        assert!(
            matches!(err, Error::ReferentialIntegrity { triple: 0, .. }),
            "{err}"
        );
    }

    #[test]
    fn parse_error_reports_position() {
        let err = TextualGraph::from_json("{\n\"nodes\": [oops]}").unwrap_err();
        assert!(matches!(err, Error::Format { line: 2, .. }), "{err}");
    }

    #[test]
    fn duplicates_are_counted_and_removed() {
        let (g, dups) = TextualGraph::build(
            vec![ent(0, "a"), ent(1, "b")],
            vec![rel(0, "r")],
            vec![tri(0, 0, 1), tri(0, 0, 1), tri(1, 0, 0)],
        )
        .unwrap();
        assert_eq!((g.num_triples(), dups), (2, 1));
    }

    #[test]
    fn non_dense_ids_are_rejected() {
        assert!(TextualGraph::new(vec![ent(0, "a"), ent(2, "b")], vec![], vec![]).is_err());
    }

    #[test]
    fn neighbors_of_isolated_and_cycle_nodes() {
        let g = TextualGraph::new(
            vec![ent(0, "a"), ent(1, "b"), ent(2, "c"), ent(3, "lonely")],
            vec![rel(0, "r")],
            vec![tri(0, 0, 1), tri(1, 0, 2), tri(2, 0, 0)],
        )
        .unwrap();
        assert!(g.neighbors(3).unwrap().is_empty());
        let n = g.neighbors(0).unwrap();
        assert_eq!(n.len(), 2);
        assert_eq!(n[0].direction, Direction::Outgoing);
        assert_eq!(n[1].direction, Direction::Incoming);
        assert!(matches!(g.neighbors(4), Err(Error::Range { .. })));
    }

    #[test]
    fn induced_subgraph_identity_and_singleton() {
        let g = TextualGraph::new(
            vec![ent(0, "a"), ent(1, "b"), ent(2, "c")],
            vec![rel(0, "r")],
            vec![tri(0, 0, 1), tri(1, 0, 2)],
        )
        .unwrap();
        let all_nodes: BTreeSet<usize> = (0..3).collect();
        let all_triples: BTreeSet<usize> = (0..2).collect();
        let s = g.induced_subgraph(&all_nodes, &all_triples).unwrap();
        assert_eq!(s.graph, g);
        let one = g
            .induced_subgraph(&BTreeSet::from([2]), &BTreeSet::new())
            .unwrap();
        assert_eq!(one.graph.num_entities(), 1);
        assert_eq!(one.graph.entity_text(0), "c");
        assert_eq!(one.node_map, vec![2]);
        let err = g
            .induced_subgraph(&BTreeSet::from([0]), &BTreeSet::from([0]))
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn triple_text_defaults_to_sep_join() {
        let g = TextualGraph::new(
            vec![ent(0, "Mushroom"), ent(1, "Decaying wood")],
            vec![rel(0, "grows_on")],
            vec![tri(0, 0, 1)],
        )
        .unwrap();
        assert_eq!(
            g.triple_embedding_text(0),
            "Mushroom [SEP] grows_on [SEP] Decaying wood"
        );
    }

    #[test]
    fn tsv_blocks_convert() {
        let tsv = "node_id\tnode_attr\n0\tjustin bieber\n1\tcanada\n2\tsinger\n\nsrc\tedge_attr\tdst\n0\tpeople.person.nationality\t1\n0\tpeople.person.profession\t2\n";
        let g = convert_tsv(tsv).unwrap();
        assert_eq!((g.num_entities(), g.num_triples(), g.relations().len()), (3, 2, 2));
        assert_eq!(g.triple_texts(0), ("justin bieber", "people.person.nationality", "canada"));
    }
}
