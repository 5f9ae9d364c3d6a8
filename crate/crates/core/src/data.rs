//! Named graph collections and the JSON-lines example files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::embedding::{load_embeddings, EmbeddingTable, HashEmbedder};
use crate::error::{Error, Result};
use crate::gate::ExpertId;
use crate::graph::{load_graph, TextualGraph};
use crate::tensor::Tensor;

/// A graph with the embeddings of its elements.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphContext {
    pub graph: TextualGraph,
    pub table: EmbeddingTable,
}

/// Graphs by name, plus the embedder used for queries against them.
#[derive(Debug, Clone)]
pub struct GraphSet {
    pub embedder: HashEmbedder,
    graphs: BTreeMap<String, GraphContext>,
}

impl GraphSet {
    pub fn new(embedder: HashEmbedder) -> Self {
        Self {
            embedder,
            graphs: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.embedder.dim()
    }

    /// Adds `graph`, embedding it with the set's hash embedder.
    pub fn insert_hashed(&mut self, name: &str, graph: TextualGraph) -> Result<()> {
        let table = EmbeddingTable::from_hash(&graph, &self.embedder)?;
        self.graphs.insert(name.to_string(), GraphContext { graph, table });
        Ok(())
    }

    pub fn insert(&mut self, name: &str, graph: TextualGraph, table: EmbeddingTable) -> Result<()> {
        if table.dim() != self.dim() {
            return Err(Error::dim("graph set", &[self.dim()], &[table.dim()]));
        }
        if !table.covers(&graph) {
            return Err(Error::Parameter(format!("embeddings of `{name}` do not cover the graph")));
        }
        self.graphs.insert(name.to_string(), GraphContext { graph, table });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&GraphContext> {
        self.graphs
            .get(name)
            .ok_or_else(|| Error::UnknownGraph(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.graphs.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn embed_query(&self, text: &str) -> Result<Tensor> {
        self.embedder.embed(text)
    }

    /// Loads every `<name>.json` graph in `dir`. A graph with
    /// `<name>.nodes.emb`, `<name>.relations.emb` and `<name>.triples.emb`
    /// beside it uses those embeddings; otherwise it is hash-embedded.
    pub fn load_dir(dir: impl AsRef<Path>, embedder: HashEmbedder) -> Result<Self> {
        let dir = dir.as_ref();
        let mut set = Self::new(embedder);
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        entries.sort();
        for path in entries {
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Parameter(format!("bad graph file name {}", path.display())))?
                .to_string();
            let graph = load_graph(&path)?;
            let emb: Vec<_> = ["nodes", "relations", "triples"]
                .iter()
                .map(|k| dir.join(format!("{name}.{k}.emb")))
                .collect();
            if emb.iter().all(|p| p.exists()) {
                let table = load_embeddings(&emb, &graph)?;
                set.insert(&name, graph, table)?;
            } else {
                set.insert_hashed(&name, graph)?;
            }
        }
        Ok(set)
    }

    /// Writes each graph as `<name>.json` into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, ctx) in &self.graphs {
            ctx.graph.save(dir.join(format!("{name}.json")))?;
        }
        Ok(())
    }
}

/// Retrieval supervision for one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub query: String,
    pub graph: String,
    #[serde(default)]
    pub gold_entities: BTreeSet<usize>,
    #[serde(default)]
    pub gold_triples: BTreeSet<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_expert: Option<ExpertId>,
}

impl TrainExample {
    pub fn validate(&self) -> Result<()> {
        if self.gold_entities.is_empty() && self.gold_triples.is_empty() {
            return Err(Error::Contract("example has no gold entities or triples".into()));
        }
        Ok(())
    }

    /// Checks gold ids against the graph.
    pub fn check_ids(&self, graph: &TextualGraph) -> Result<()> {
        if let Some(&id) = self.gold_entities.iter().find(|&&i| i >= graph.num_entities()) {
            return Err(Error::Range { what: "gold entities", index: id, len: graph.num_entities() });
        }
        if let Some(&id) = self.gold_triples.iter().find(|&&i| i >= graph.num_triples()) {
            return Err(Error::Range { what: "gold triples", index: id, len: graph.num_triples() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryClass {
    Simple,
    Complex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalExample {
    pub id: String,
    pub question: String,
    pub graph: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_class: Option<QueryClass>,
}

impl EvalExample {
    pub fn validate(&self) -> Result<()> {
        if self.answers.is_empty() {
            return Err(Error::Contract(format!("example {} has no answers", self.id)));
        }
        Ok(())
    }
}

/// One record per non-blank line. Parse failures report the file line.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Format {
            line: i + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(records).as_bytes()).map_err(|e| Error::io(path, e))
}

/// Training examples from a JSON-lines file, each checked for gold sets.
pub fn load_train_examples(path: impl AsRef<Path>) -> Result<Vec<TrainExample>> {
    let examples: Vec<TrainExample> = read_jsonl(path)?;
    for (i, ex) in examples.iter().enumerate() {
        ex.validate().map_err(|e| Error::Format { line: i + 1, column: 1, message: e.to_string() })?;
    }
    Ok(examples)
}

pub fn load_eval_examples(path: impl AsRef<Path>) -> Result<Vec<EvalExample>> {
    let examples: Vec<EvalExample> = read_jsonl(path)?;
    for (i, ex) in examples.iter().enumerate() {
        ex.validate().map_err(|e| Error::Format { line: i + 1, column: 1, message: e.to_string() })?;
    }
    Ok(examples)
}
