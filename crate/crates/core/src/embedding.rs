//! Embeddings for queries and graph elements.
//!
//! Two sources are supported: precomputed vectors loaded from text files,
//! or the deterministic [`HashEmbedder`], which hashes token 1- to 3-grams
//! into signed buckets and L2-normalizes the result.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::TextualGraph;
use crate::tensor::Tensor;

pub const DEFAULT_DIM: usize = 256;
const MAX_NGRAM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Parameter("embedding dim must be positive".into()));
        }
        Ok(Self { dim, seed })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embed(&self, text: &str) -> Result<Tensor> {
        Ok(Tensor::vector(self.embed_vec(text)?))
    }

    pub fn embed_vec(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::Parameter("cannot embed empty text".into()));
        }
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            tokens.push(text.trim().to_lowercase());
        }
        let mut v = vec![0.0; self.dim];
        for n in 1..=MAX_NGRAM.min(tokens.len()) {
            for gram in tokens.windows(n) {
                let (bucket, sign) = self.bucket(&gram.join(" "));
                v[bucket] += sign;
            }
        }
        let mut norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // every n-gram cancelled against another; fall back to the full text
            let (bucket, sign) = self.bucket(text);
            v[bucket] = sign;
            norm = 1.0;
        }
        for x in v.iter_mut() {
            *x /= norm;
        }
        Ok(v)
    }

    fn bucket(&self, gram: &str) -> (usize, f64) {
        let h = crate::rng::derive_seed(self.seed, gram);
        let bucket = (h % self.dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        (bucket, sign)
    }
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EmbeddingKind {
    Node,
    Relation,
    Triple,
}

impl EmbeddingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingKind::Node => "node",
            EmbeddingKind::Relation => "relation",
            EmbeddingKind::Triple => "triple",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "node" => Some(EmbeddingKind::Node),
            "relation" => Some(EmbeddingKind::Relation),
            "triple" => Some(EmbeddingKind::Triple),
            _ => None,
        }
    }

    const ALL: [EmbeddingKind; 3] = [
        EmbeddingKind::Node,
        EmbeddingKind::Relation,
        EmbeddingKind::Triple,
    ];
}

/// Per-graph embeddings, stored as one `[count, dim]` matrix per kind.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    nodes: Tensor,
    relations: Tensor,
    triples: Tensor,
}

impl EmbeddingTable {
    pub fn new(dim: usize, nodes: Tensor, relations: Tensor, triples: Tensor) -> Result<Self> {
        for t in [&nodes, &relations, &triples] {
            if t.rank() != 2 || t.cols() != dim {
                return Err(Error::dim("embedding table", t.shape(), &[dim]));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite("embedding table entry".into()));
            }
        }
        Ok(Self {
            dim,
            nodes,
            relations,
            triples,
        })
    }

    /// Embeds every element of `graph` with the hash embedder.
    pub fn from_hash(graph: &TextualGraph, embedder: &HashEmbedder) -> Result<Self> {
        let d = embedder.dim();
        let embed_all = |texts: Vec<String>| -> Result<Tensor> {
            let mut data = Vec::with_capacity(texts.len() * d);
            for t in &texts {
                data.extend(embedder.embed_vec(t)?);
            }
            Tensor::matrix(texts.len(), d, data)
        };
        let nodes = embed_all(graph.entities().iter().map(|e| e.text.clone()).collect())?;
        let relations = embed_all(graph.relations().iter().map(|r| r.text.clone()).collect())?;
        let triples = embed_all(
            (0..graph.num_triples())
                .map(|t| graph.triple_embedding_text(t))
                .collect(),
        )?;
        Self::new(d, nodes, relations, triples)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node(&self, id: usize) -> &[f64] {
        self.nodes.row(id)
    }

    pub fn relation(&self, id: usize) -> &[f64] {
        self.relations.row(id)
    }

    pub fn triple(&self, id: usize) -> &[f64] {
        self.triples.row(id)
    }

    pub fn nodes(&self) -> &Tensor {
        &self.nodes
    }

    pub fn relations(&self) -> &Tensor {
        &self.relations
    }

    pub fn triples(&self) -> &Tensor {
        &self.triples
    }

    pub fn matrix(&self, kind: EmbeddingKind) -> &Tensor {
        match kind {
            EmbeddingKind::Node => &self.nodes,
            EmbeddingKind::Relation => &self.relations,
            EmbeddingKind::Triple => &self.triples,
        }
    }

    /// Checks the table has exactly one row per element of `graph`.
    pub fn covers(&self, graph: &TextualGraph) -> bool {
        self.nodes.rows() == graph.num_entities()
            && self.relations.rows() == graph.relations().len()
            && self.triples.rows() == graph.num_triples()
    }

    /// One section in the embedding file format.
    pub fn section_text(&self, kind: EmbeddingKind) -> String {
        let m = self.matrix(kind);
        let mut out = format!("dim={} kind={}\n", self.dim, kind.as_str());
        for i in 0..m.rows() {
            write!(out, "{i}").unwrap();
            for x in m.row(i) {
                write!(out, " {x}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// All three sections concatenated.
    pub fn to_text(&self) -> String {
        EmbeddingKind::ALL
            .iter()
            .map(|&k| self.section_text(k))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Parses one or more embedding documents (sections may be spread over
    /// several files) and binds them to `graph`.
    pub fn from_texts(texts: &[&str], graph: &TextualGraph) -> Result<Self> {
        let mut dim: Option<usize> = None;
        let mut sections: BTreeMap<EmbeddingKind, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
        for text in texts {
            let mut current: Option<EmbeddingKind> = None;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                let ferr = |message: String| Error::Format {
                    line: lineno + 1,
                    column: 1,
                    message,
                };
                if line.starts_with("dim=") {
                    let (d, kind) = parse_header(line).ok_or_else(|| {
                        ferr(format!("malformed header {line:?}"))
                    })?;
                    if dim.is_some_and(|prev| prev != d) {
                        return Err(ferr(format!("dim {d} disagrees with earlier dim {}", dim.unwrap())));
                    }
                    dim = Some(d);
                    current = Some(kind);
                    sections.entry(kind).or_default();
                    continue;
                }
                let (Some(kind), Some(d)) = (current, dim) else {
                    return Err(ferr("row before any header".into()));
                };
                let mut fields = line.split_whitespace();
                let id: usize = fields
                    .next()
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| ferr("row id is not an integer".into()))?;
                let values = fields
                    .map(|f| f.parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| ferr(format!("bad float: {e}")))?;
                if values.len() != d {
                    return Err(ferr(format!("row {id} has {} values, expected {d}", values.len())));
                }
                if sections.get_mut(&kind).unwrap().insert(id, values).is_some() {
                    return Err(ferr(format!("duplicate {} id {id}", kind.as_str())));
                }
            }
        }
        let dim = dim.ok_or_else(|| Error::Format {
            line: 0,
            column: 0,
            message: "no embedding sections found".into(),
        })?;
        let counts = [
            graph.num_entities(),
            graph.relations().len(),
            graph.num_triples(),
        ];
        let mut mats = Vec::with_capacity(3);
        for (kind, count) in EmbeddingKind::ALL.into_iter().zip(counts) {
            let rows = sections.remove(&kind).unwrap_or_default();
            let missing: Vec<usize> = (0..count).filter(|i| !rows.contains_key(i)).collect();
            if !missing.is_empty() {
                return Err(Error::Coverage {
                    kind: kind.as_str(),
                    missing,
                });
            }
            let mut data = Vec::with_capacity(count * dim);
            for i in 0..count {
                data.extend_from_slice(&rows[&i]);
            }
            mats.push(Tensor::matrix(count, dim, data)?);
        }
        let triples = mats.pop().unwrap();
        let relations = mats.pop().unwrap();
        let nodes = mats.pop().unwrap();
        Self::new(dim, nodes, relations, triples)
    }
}

fn parse_header(line: &str) -> Option<(usize, EmbeddingKind)> {
    let mut dim = None;
    let mut kind = None;
    for part in line.split_whitespace() {
        if let Some(d) = part.strip_prefix("dim=") {
            dim = d.parse().ok().filter(|&d| d > 0);
        } else if let Some(k) = part.strip_prefix("kind=") {
            kind = EmbeddingKind::parse(k);
        }
    }
    Some((dim?, kind?))
}

/// Loads embeddings for `graph` from one concatenated file or several
/// single-kind files.
pub fn load_embeddings<P: AsRef<Path>>(paths: &[P], graph: &TextualGraph) -> Result<EmbeddingTable> {
    let texts = paths
        .iter()
        .map(|p| fs::read_to_string(p).map_err(|e| Error::io(p.as_ref(), e)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    EmbeddingTable::from_texts(&refs, graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Entity, RelationType, Triple};

    fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for i in 0..a.len() {
            ab += a[i] * b[i];
            aa += a[i] * a[i];
            bb += b[i] * b[i];
        }
        ab / (aa.sqrt() * bb.sqrt())
    }

    fn tiny_graph() -> TextualGraph {
        TextualGraph::new(
            (0..4)
                .map(|i| Entity {
                    id: i,
                    text: format!("node {i}"),
                })
                .collect(),
            vec![RelationType {
                id: 0,
                text: "links".into(),
            }],
            vec![Triple {
                head: 0,
                relation: 0,
                tail: 1,
                edge_text: None,
            }],
        )
        .unwrap()
    }

    #[test]
    fn deterministic_and_normalized() {
        let e = HashEmbedder::new(256, 7).unwrap();
        assert_eq!(e.embed("mushroom").unwrap(), e.embed("mushroom").unwrap());
        for t in ["mushroom", "a cut peony", "x", "!!!", "the the the"] {
            let v = e.embed(t).unwrap();
            assert!((v.norm() - 1.0).abs() < 1e-12, "{t}");
        }
        assert!(e.embed("").is_err());
        assert!(e.embed("   ").is_err());
    }

    #[test]
    fn shared_tokens_are_closer() {
        let e = HashEmbedder::new(256, 7).unwrap();
        let a = e.embed_vec("a cut peony").unwrap();
        let b = e.embed_vec("the cut peony").unwrap();
        let c = e.embed_vec("flying eagle").unwrap();
        assert!(oracle_cos(&a, &b) > oracle_cos(&a, &c));
    }

    #[test]
    fn unrelated_texts_are_nearly_orthogonal() {
        let e = HashEmbedder::new(256, 7).unwrap();
        let mut rng = crate::rng::Rng::new(5);
        let texts: Vec<String> = (0..1000)
            .map(|_| {
                (0..1 + rng.below(6))
                    .map(|_| {
                        (0..3 + rng.below(5))
                            .map(|_| (b'a' + rng.below(26) as u8) as char)
                            .collect::<String>()
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let vecs: Vec<Vec<f64>> = texts.iter().map(|t| e.embed_vec(t).unwrap()).collect();
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                sum += oracle_cos(&vecs[i], &vecs[j]);
                count += 1;
            }
        }
        let mean = sum / count as f64;
        assert!(mean > -0.1 && mean < 0.1, "mean pairwise cosine {mean}");
    }

    #[test]
    fn file_round_trip_is_bit_identical() {
        let g = tiny_graph();
        let table = EmbeddingTable::from_hash(&g, &HashEmbedder::new(4, 1).unwrap()).unwrap();
        let back = EmbeddingTable::from_texts(&[&table.to_text()], &g).unwrap();
        assert_eq!(back.dim(), 4);
        let bits = |t: &EmbeddingTable| {
            t.nodes()
                .data()
                .iter()
                .chain(t.relations().data())
                .chain(t.triples().data())
                .map(|x| x.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&table), bits(&back));
    }

    #[test]
    fn split_files_are_accepted() {
        let g = tiny_graph();
        let table = EmbeddingTable::from_hash(&g, &HashEmbedder::new(4, 1).unwrap()).unwrap();
        let parts: Vec<String> = EmbeddingKind::ALL
            .iter()
            .map(|&k| table.section_text(k))
            .collect();
        let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
        assert_eq!(EmbeddingTable::from_texts(&refs, &g).unwrap(), table);
    }

    #[test]
    fn missing_node_is_reported() {
        let g = tiny_graph();
        let table = EmbeddingTable::from_hash(&g, &HashEmbedder::new(4, 1).unwrap()).unwrap();
        // drop node row 3 only (the first section)
        let mut out = String::new();
        let mut section = 0;
        for line in table.to_text().lines() {
            if line.starts_with("dim=") {
                section += 1;
            }
            if section == 1 && line.starts_with("3 ") {
                continue;
            }
            out.push_str(line);
            out.push('\n');
        }
        let err = EmbeddingTable::from_texts(&[&out], &g).unwrap_err();
        match err {
            Error::Coverage { kind, missing } => {
                assert_eq!(kind, "node");
                assert_eq!(missing, vec![3]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn ragged_rows_are_format_errors() {
        let g = tiny_graph();
        let text = "dim=2 kind=node\n0 1 2\n1 1 2 3\n";
        assert!(matches!(
            EmbeddingTable::from_texts(&[text], &g),
            Err(Error::Format { line: 3, .. })
        ));
    }
}
