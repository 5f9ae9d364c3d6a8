//! The full retrieval model: three experts, graph encoder, projection bank
//! and gate, with seeded initialization and checkpointing.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::embedding::EmbeddingTable;
use crate::encoder::{
    encode_subgraph, project_soft_prompt, EncoderConfig, GraphEncoder, SoftPromptProjector,
    DEFAULT_LAYERS,
};
use crate::error::{Error, Result};
use crate::experts::{
    run_entity_expert, run_relation_expert, BilinearScorer, ExpertOutput, GumbelSelector,
    TripleProjector, DEFAULT_TOP_K,
};
use crate::gate::{fuse, gate, gate_with_keys, ExpertId, ExpertProjectionBank, ExpertSet, Gate, GateParams};
use crate::graph::TextualGraph;
use crate::params::ParamStore;
use crate::rng::{Rng, UniformSource};
use crate::subgraph::{run_subgraph_expert, PrizeRule, RetrievedSubgraph, SubgraphConfig, DEFAULT_EDGE_COST};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Embedding width `d`.
    pub dim: usize,
    /// Encoder hidden width.
    pub hidden: usize,
    /// Prompt-space width.
    pub prompt_dim: usize,
    pub num_prompt_vectors: usize,
    pub layers: usize,
    pub k_entity: usize,
    pub k_relation: usize,
    pub k_subgraph: usize,
    pub edge_cost: f64,
    pub prize_rule: PrizeRule,
    pub hop_radius: Option<usize>,
    /// Use the experts' projected outputs as gate keys.
    pub dynamic_keys: bool,
    pub init_scale: f64,
    pub tau0: f64,
    pub tau_min: f64,
    pub anneal_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: crate::embedding::DEFAULT_DIM,
            hidden: 64,
            prompt_dim: 64,
            num_prompt_vectors: 1,
            layers: DEFAULT_LAYERS,
            k_entity: DEFAULT_TOP_K,
            k_relation: DEFAULT_TOP_K,
            k_subgraph: DEFAULT_TOP_K,
            edge_cost: DEFAULT_EDGE_COST,
            prize_rule: PrizeRule::LinearRank,
            hop_radius: None,
            dynamic_keys: false,
            init_scale: 0.1,
            tau0: 1.0,
            tau_min: 0.05,
            anneal_rate: 0.9,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("dim", self.dim),
            ("hidden", self.hidden),
            ("prompt_dim", self.prompt_dim),
            ("num_prompt_vectors", self.num_prompt_vectors),
            ("k_entity", self.k_entity),
            ("k_relation", self.k_relation),
            ("k_subgraph", self.k_subgraph),
        ] {
            if v == 0 {
                return Err(Error::Parameter(format!("{what} must be positive")));
            }
        }
        if !(self.edge_cost > 0.0) {
            return Err(Error::Parameter("edge cost must be positive".into()));
        }
        self.encoder()?;
        self.selector()?;
        Ok(())
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        EncoderConfig::new(self.layers, self.hidden)
    }

    pub fn selector(&self) -> Result<GumbelSelector> {
        GumbelSelector::new(self.tau0, self.tau_min, self.anneal_rate)
    }

    pub fn subgraph(&self) -> SubgraphConfig {
        SubgraphConfig {
            k: self.k_subgraph,
            edge_cost: self.edge_cost,
            prize_rule: self.prize_rule,
            hop_radius: self.hop_radius,
            ..SubgraphConfig::default()
        }
    }

    fn fused_width(&self) -> usize {
        self.num_prompt_vectors * self.prompt_dim
    }

    /// The configuration as a flat JSON object of its string values.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut store = ParamStore::new();
        self.to_meta(&mut store);
        let keys: Vec<String> = store.meta_keys().map(str::to_string).collect();
        keys.into_iter()
            .map(|k| {
                let v = store.meta(&k).unwrap_or_default().to_string();
                (k, serde_json::Value::String(v))
            })
            .collect::<serde_json::Map<_, _>>()
            .into()
    }

    fn to_meta(&self, store: &mut ParamStore) {
        store.set_meta("dim", self.dim);
        store.set_meta("hidden", self.hidden);
        store.set_meta("prompt_dim", self.prompt_dim);
        store.set_meta("num_prompt_vectors", self.num_prompt_vectors);
        store.set_meta("layers", self.layers);
        store.set_meta("k_entity", self.k_entity);
        store.set_meta("k_relation", self.k_relation);
        store.set_meta("k_subgraph", self.k_subgraph);
        store.set_meta("edge_cost", self.edge_cost);
        store.set_meta(
            "prize_rule",
            match self.prize_rule {
                PrizeRule::LinearRank => "linear_rank",
                PrizeRule::Similarity => "similarity",
            },
        );
        store.set_meta(
            "hop_radius",
            self.hop_radius.map_or("none".to_string(), |h| h.to_string()),
        );
        store.set_meta("dynamic_keys", self.dynamic_keys);
        store.set_meta("init_scale", self.init_scale);
        store.set_meta("tau0", self.tau0);
        store.set_meta("tau_min", self.tau_min);
        store.set_meta("anneal_rate", self.anneal_rate);
    }

    fn from_meta(store: &ParamStore) -> Result<Self> {
        fn get<T: std::str::FromStr>(store: &ParamStore, key: &str) -> Result<T> {
            let raw = store
                .meta(key)
                .ok_or_else(|| Error::Parameter(format!("checkpoint lacks meta `{key}`")))?;
            raw.parse()
                .map_err(|_| Error::Parameter(format!("bad checkpoint meta {key}={raw}")))
        }
        let prize_rule = match store.meta("prize_rule") {
            Some("similarity") => PrizeRule::Similarity,
            _ => PrizeRule::LinearRank,
        };
        let hop_radius = match store.meta("hop_radius") {
            None | Some("none") => None,
            Some(_) => Some(get(store, "hop_radius")?),
        };
        Ok(Self {
            dim: get(store, "dim")?,
            hidden: get(store, "hidden")?,
            prompt_dim: get(store, "prompt_dim")?,
            num_prompt_vectors: get(store, "num_prompt_vectors")?,
            layers: get(store, "layers")?,
            k_entity: get(store, "k_entity")?,
            k_relation: get(store, "k_relation")?,
            k_subgraph: get(store, "k_subgraph")?,
            edge_cost: get(store, "edge_cost")?,
            prize_rule,
            hop_radius,
            dynamic_keys: get(store, "dynamic_keys")?,
            init_scale: get(store, "init_scale")?,
            tau0: get(store, "tau0")?,
            tau_min: get(store, "tau_min")?,
            anneal_rate: get(store, "anneal_rate")?,
        })
    }
}

/// Query embedding plus the graph it is asked against.
#[derive(Debug, Clone, Copy)]
pub struct QueryInput<'a> {
    pub graph: &'a TextualGraph,
    pub table: &'a EmbeddingTable,
    pub query: &'a Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub active: ExpertSet,
    pub tau: f64,
    pub noise: bool,
    /// Build the fused soft prompt. Without it only expert selections and
    /// gate weights are computed.
    pub prompt: bool,
}

impl ForwardOptions {
    pub fn eval(tau: f64) -> Self {
        Self {
            active: ExpertSet::ALL,
            tau,
            noise: false,
            prompt: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SubgraphPath {
    pub retrieved: RetrievedSubgraph,
    pub pooled: Var,
    pub prompt: Var,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub entity: Option<ExpertOutput>,
    pub relation: Option<ExpertOutput>,
    pub subgraph: Option<SubgraphPath>,
    pub gate: Gate,
    /// Each active expert's output in prompt space, `[m, d_p]`.
    pub outputs: BTreeMap<ExpertId, Var>,
    /// Fused soft prompt `[m, d_p]`, when requested.
    pub p_soft: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Selection temperature used at inference.
    pub tau: f64,
}

impl Model {
    /// Gaussian initialization (scale from the config; gate keys unit
    /// scale) from a seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let s = config.init_scale;
        let mut rng = Rng::derive(seed, "model-init");
        let mut params = ParamStore::new();
        params.init_normal(&mut rng, "entity.W_r", &[d, d], s);
        params.init_normal(&mut rng, "relation.W_r", &[d, d], s);
        params.init_normal(&mut rng, "relation.W_t", &[d, 3 * d], s);
        GraphEncoder::init(&mut params, &mut rng, &config.encoder()?, d, d, d, s)?;
        SoftPromptProjector::init(
            &mut params,
            &mut rng,
            config.hidden,
            config.prompt_dim,
            config.num_prompt_vectors,
            s,
        );
        ExpertProjectionBank::init(
            &mut params,
            &mut rng,
            d,
            config.prompt_dim,
            config.num_prompt_vectors,
            s,
        );
        let key_dim = if config.dynamic_keys {
            config.fused_width()
        } else {
            d
        };
        GateParams::init(&mut params, &mut rng, d, key_dim, s);
        if config.dynamic_keys {
            // outputs act as keys; the learned ones would be dead weight
            for e in ExpertId::ALL {
                params.remove(&e.key_param());
            }
        }
        Ok(Self {
            tau: config.tau0,
            config,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_store().save(path)
    }

    pub fn to_store(&self) -> ParamStore {
        let mut store = self.params.clone();
        self.config.to_meta(&mut store);
        store.set_meta("tau", self.tau);
        store
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let config = ModelConfig::from_meta(&store)?;
        config.validate()?;
        let tau = store
            .meta("tau")
            .and_then(|t| t.parse().ok())
            .unwrap_or(config.tau0);
        Ok(Self {
            config,
            params: store,
            tau,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(ParamStore::load(path)?)
    }

    /// Experts that can run on `graph`: the relation expert needs triples.
    pub fn runnable(&self, graph: &TextualGraph, active: ExpertSet) -> ExpertSet {
        if graph.num_triples() == 0 && active.contains(ExpertId::Relation) {
            log::debug!("graph has no triples; relation expert skipped");
            active.without(ExpertId::Relation)
        } else {
            active
        }
    }

    /// Runs the pipeline up to the fused soft prompt on `tape`, binding
    /// every parameter as a named tape parameter.
    pub fn forward<R: UniformSource + ?Sized>(
        &self,
        tape: &mut Tape,
        input: QueryInput<'_>,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<Forward> {
        let c = &self.config;
        let d = c.dim;
        if input.query.shape() != [d] || input.table.dim() != d {
            return Err(Error::dim("model input", &[d], input.query.shape()));
        }
        let active = self.runnable(input.graph, opts.active);
        if active.is_empty() {
            return Err(Error::Parameter("no runnable expert is active".into()));
        }
        let selector = GumbelSelector {
            noise: opts.noise,
            ..GumbelSelector::fixed(opts.tau)?
        };
        let p = &self.params;
        let h_q = tape.constant(input.query.clone());
        let need_outputs = opts.prompt || c.dynamic_keys;

        let mut outputs = BTreeMap::new();
        let bank = if need_outputs {
            Some(ExpertProjectionBank::bind(tape, p, c.num_prompt_vectors)?)
        } else {
            None
        };
        let entity = if active.contains(ExpertId::Entity) {
            let scorer = BilinearScorer::new(p.bind(tape, "entity.W_r")?);
            let out = run_entity_expert(tape, h_q, input.graph, input.table, &scorer, &selector, c.k_entity, rng)?;
            if let Some(bank) = &bank {
                outputs.insert(ExpertId::Entity, bank.project(tape, ExpertId::Entity, out.representation)?);
            }
            Some(out)
        } else {
            None
        };
        let relation = if active.contains(ExpertId::Relation) {
            let projector = TripleProjector::new(p.bind(tape, "relation.W_t")?);
            let scorer = BilinearScorer::new(p.bind(tape, "relation.W_r")?);
            let out = run_relation_expert(
                tape, h_q, input.graph, input.table, &projector, &scorer, &selector, c.k_relation, rng,
            )?;
            if let Some(bank) = &bank {
                outputs.insert(ExpertId::Relation, bank.project(tape, ExpertId::Relation, out.representation)?);
            }
            Some(out)
        } else {
            None
        };
        let subgraph = if active.contains(ExpertId::Subgraph) && need_outputs {
            let path = self.subgraph_path(tape, input, h_q)?;
            outputs.insert(ExpertId::Subgraph, path.prompt);
            Some(path)
        } else {
            None
        };

        let gate = if c.dynamic_keys {
            let w_g = p.bind(tape, "gate.W_g")?;
            let keys = outputs
                .iter()
                .map(|(&e, &v)| {
                    let n = tape.value(v).len();
                    Ok((e, tape.reshape(v, &[n])?))
                })
                .collect::<Result<Vec<_>>>()?;
            gate_with_keys(tape, w_g, h_q, &keys)?
        } else {
            let params = GateParams::bind(tape, p)?;
            gate(tape, &params, h_q, active)?
        };
        let p_soft = if opts.prompt {
            Some(fuse(tape, &gate, &outputs)?)
        } else {
            None
        };
        Ok(Forward {
            entity,
            relation,
            subgraph,
            gate,
            outputs,
            p_soft,
        })
    }

    fn subgraph_path(&self, tape: &mut Tape, input: QueryInput<'_>, h_q: Var) -> Result<SubgraphPath> {
        let c = &self.config;
        let retrieved = run_subgraph_expert(input.query.data(), input.graph, input.table, &c.subgraph())?;
        let sub = &retrieved.subgraph;
        let d = c.dim;
        let mut x = Vec::with_capacity(sub.node_map.len() * d);
        for &v in &sub.node_map {
            x.extend_from_slice(input.table.node(v));
        }
        let mut e = Vec::with_capacity(sub.triple_map.len() * d);
        for &t in &sub.triple_map {
            e.extend_from_slice(input.table.triple(t));
        }
        let x = Tensor::matrix(sub.node_map.len(), d, x)?;
        let e = Tensor::matrix(sub.triple_map.len(), d, e)?;
        let encoder = GraphEncoder::bind(tape, &self.params, &c.encoder()?, d, d)?;
        let projector = SoftPromptProjector::bind(tape, &self.params, c.num_prompt_vectors)?;
        let pooled = encode_subgraph(tape, &encoder, &sub.graph, &x, &e, h_q)?;
        let prompt = project_soft_prompt(tape, &projector, pooled)?;
        Ok(SubgraphPath {
            retrieved,
            pooled,
            prompt,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use crate::graph::{Entity, RelationType, Triple};

    fn small() -> (TextualGraph, EmbeddingTable, HashEmbedder) {
        let names = ["oak tree", "acorn", "forest", "squirrel"];
        let entities = names
            .iter()
            .enumerate()
            .map(|(id, t)| Entity { id, text: t.to_string() })
            .collect();
        let relations = vec![
            RelationType { id: 0, text: "produces".into() },
            RelationType { id: 1, text: "grows in".into() },
        ];
        let triples = [(0, 0, 1), (0, 1, 2), (3, 1, 2)]
            .iter()
            .map(|&(head, relation, tail)| Triple { head, relation, tail, edge_text: None })
            .collect();
        let g = TextualGraph::new(entities, relations, triples).unwrap();
        let emb = HashEmbedder::new(16, 1).unwrap();
        let table = EmbeddingTable::from_hash(&g, &emb).unwrap();
        (g, table, emb)
    }

    fn config() -> ModelConfig {
        ModelConfig {
            dim: 16,
            hidden: 6,
            prompt_dim: 5,
            layers: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn forward_produces_a_prompt_and_normalized_gate() {
        let (g, table, emb) = small();
        let model = Model::init(config(), 7).unwrap();
        let q = emb.embed("what does the oak tree produce").unwrap();
        let mut tape = Tape::new();
        let input = QueryInput { graph: &g, table: &table, query: &q };
        let f = model.forward(&mut tape, input, &ForwardOptions::eval(1.0), &mut Rng::new(0)).unwrap();
        let p = tape.value(f.p_soft.unwrap());
        assert_eq!(p.shape(), &[1, 5]);
        assert!((f.gate.weights(&tape).total() - 1.0).abs() < 1e-12);
        assert_eq!(f.gate.order, ExpertId::ALL.to_vec());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Model::init(ModelConfig { dynamic_keys: true, hop_radius: Some(2), ..config() }, 3).unwrap();
        let back = Model::from_store(ParamStore::from_text(&model.to_store().to_text()).unwrap()).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.tau, model.tau);
        for (name, t) in model.params.iter() {
            assert_eq!(back.params.get(name).unwrap(), t);
        }
        assert!(!back.params.contains("gate.key.entity"));
    }

    #[test]
    fn dynamic_keys_gate_over_outputs() {
        let (g, table, emb) = small();
        let model = Model::init(ModelConfig { dynamic_keys: true, ..config() }, 7).unwrap();
        let q = emb.embed("where does the squirrel grow").unwrap();
        let mut tape = Tape::new();
        let input = QueryInput { graph: &g, table: &table, query: &q };
        let opts = ForwardOptions { active: "E+S".parse().unwrap(), ..ForwardOptions::eval(0.5) };
        let f = model.forward(&mut tape, input, &opts, &mut Rng::new(0)).unwrap();
        assert_eq!(f.gate.order, vec![ExpertId::Entity, ExpertId::Subgraph]);
        assert!(f.relation.is_none());
    }
}
