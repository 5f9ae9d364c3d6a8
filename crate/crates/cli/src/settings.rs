//! `key = value` settings files and their mapping onto library configs.
//!
//! Blank lines and `#` comments are ignored. Keys may use dots or dashes
//! (`gate.dynamic_keys`, `learning-rate`); they are folded to underscores.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use mixrag::eval::{EvalConfig, Metric};
use mixrag::gate::ExpertSet;
use mixrag::model::ModelConfig;
use mixrag::prompt::HttpConfig;
use mixrag::subgraph::PrizeRule;
use mixrag::synth::SyntheticSpec;
use mixrag::training::{LossWeights, TrainConfig};

use crate::Failure;

const KEYS: &[&str] = &[
    "seed",
    "embed_seed",
    // model
    "dim",
    "hidden",
    "prompt_dim",
    "num_prompt_vectors",
    "layers",
    "k",
    "k_entity",
    "k_relation",
    "k_subgraph",
    "edge_cost",
    "prize_rule",
    "hop_radius",
    "gate_dynamic_keys",
    "dynamic_keys",
    "init_scale",
    "tau0",
    "tau_min",
    "anneal_rate",
    // training
    "epochs",
    "learning_rate",
    "batch_size",
    "lambda_entity",
    "lambda_relation",
    "lambda_gate",
    "noise",
    "train_experts",
    // evaluation
    "experts",
    "budget",
    "task",
    "metric",
    "backend",
    "endpoint",
    "llm_model",
    "timeout_secs",
    "retries",
    // synthetic corpora
    "num_graphs",
    "nodes_per_graph",
    "branching",
    "one_hop_fraction",
    "train_queries",
    "eval_queries",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn fold(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace(['.', '-'], "_")
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| Failure::usage(format!("config line {}: expected `key = value`", i + 1)))?;
            let key = fold(k);
            if !KEYS.contains(&key.as_str()) {
                return Err(Failure::usage(format!("config line {}: unknown key `{}`", i + 1, k.trim())));
            }
            values.insert(key, v.trim().trim_matches('"').to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(fold(key), value.to_string());
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, Failure>
    where
        T::Err: Display,
    {
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| Failure::usage(format!("bad value `{v}` for `{key}`: {e}"))))
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T, Failure>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn seed(&self) -> Result<u64, Failure> {
        self.or("seed", 0)
    }

    pub fn embed_seed(&self) -> Result<u64, Failure> {
        self.or("embed_seed", 0)
    }

    pub fn model(&self) -> Result<ModelConfig, Failure> {
        let d = ModelConfig::default();
        let k = self.or("k", d.k_entity)?;
        let prize_rule = match self.get::<String>("prize_rule")?.as_deref() {
            None | Some("linear_rank") | Some("rank") => PrizeRule::LinearRank,
            Some("similarity") => PrizeRule::Similarity,
            Some(other) => return Err(Failure::usage(format!("unknown prize rule `{other}`"))),
        };
        let dynamic = match self.get("gate_dynamic_keys")? {
            Some(v) => v,
            None => self.or("dynamic_keys", d.dynamic_keys)?,
        };
        Ok(ModelConfig {
            dim: self.or("dim", d.dim)?,
            hidden: self.or("hidden", d.hidden)?,
            prompt_dim: self.or("prompt_dim", d.prompt_dim)?,
            num_prompt_vectors: self.or("num_prompt_vectors", d.num_prompt_vectors)?,
            layers: self.or("layers", d.layers)?,
            k_entity: self.or("k_entity", k)?,
            k_relation: self.or("k_relation", k)?,
            k_subgraph: self.or("k_subgraph", k)?,
            edge_cost: self.or("edge_cost", d.edge_cost)?,
            prize_rule,
            hop_radius: self.get("hop_radius")?,
            dynamic_keys: dynamic,
            init_scale: self.or("init_scale", d.init_scale)?,
            tau0: self.or("tau0", d.tau0)?,
            tau_min: self.or("tau_min", d.tau_min)?,
            anneal_rate: self.or("anneal_rate", d.anneal_rate)?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig, Failure> {
        let d = TrainConfig::default();
        let w = LossWeights::default();
        Ok(TrainConfig {
            epochs: self.or("epochs", d.epochs)?,
            learning_rate: self.or("learning_rate", d.learning_rate)?,
            batch_size: self.or("batch_size", d.batch_size)?,
            tau0: self.or("tau0", d.tau0)?,
            anneal_rate: self.or("anneal_rate", d.anneal_rate)?,
            tau_min: self.or("tau_min", d.tau_min)?,
            seed: self.seed()?,
            weights: LossWeights {
                entity: self.or("lambda_entity", w.entity)?,
                relation: self.or("lambda_relation", w.relation)?,
                gate: self.or("lambda_gate", w.gate)?,
            },
            active: self.experts("train_experts")?,
            noise: self.or("noise", d.noise)?,
            checkpoint: None,
        })
    }

    fn experts(&self, key: &str) -> Result<ExpertSet, Failure> {
        match self.get::<String>(key)? {
            None => Ok(ExpertSet::ALL),
            Some(v) => v.parse().map_err(|e| Failure::usage(format!("`{key}`: {e}"))),
        }
    }

    pub fn eval(&self) -> Result<EvalConfig, Failure> {
        let d = EvalConfig::default();
        Ok(EvalConfig {
            active: self.experts("experts")?,
            task: self.or("task", d.task)?,
            budget: self.or("budget", d.budget)?,
            seed: self.seed()?,
            metric: match self.get::<String>("metric")? {
                None => d.metric,
                Some(m) => m.parse::<Metric>().map_err(|e| Failure::usage(e.to_string()))?,
            },
        })
    }

    pub fn backend(&self) -> Result<Option<HttpConfig>, Failure> {
        match self.get::<String>("backend")?.as_deref() {
            None | Some("mock") => Ok(None),
            Some("http") => {
                let endpoint: String = self
                    .get("endpoint")?
                    .ok_or_else(|| Failure::usage("the http backend needs `endpoint`"))?;
                let model: String = self
                    .get("llm_model")?
                    .ok_or_else(|| Failure::usage("the http backend needs `llm_model`"))?;
                let mut cfg = HttpConfig::new(&endpoint, &model);
                if let Some(s) = self.get::<f64>("timeout_secs")? {
                    cfg.timeout = Duration::from_secs_f64(s);
                }
                cfg.retries = self.or("retries", cfg.retries)?;
                Ok(Some(cfg))
            }
            Some(other) => Err(Failure::usage(format!("unknown backend `{other}`"))),
        }
    }

    pub fn synthetic(&self) -> Result<SyntheticSpec, Failure> {
        let d = SyntheticSpec::default();
        Ok(SyntheticSpec {
            num_graphs: self.or("num_graphs", d.num_graphs)?,
            nodes_per_graph: self.or("nodes_per_graph", d.nodes_per_graph)?,
            branching: self.or("branching", d.branching)?,
            one_hop_fraction: self.or("one_hop_fraction", d.one_hop_fraction)?,
            train_queries: self.or("train_queries", d.train_queries)?,
            eval_queries: self.or("eval_queries", d.eval_queries)?,
            seed: self.seed()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_aliases() {
        let s = Settings::parse("# run\nlearning-rate = 0.5\ngate.dynamic_keys: true\n\nk=5 # small\n").unwrap();
        let t = s.train().unwrap();
        assert_eq!(t.learning_rate, 0.5);
        let m = s.model().unwrap();
        assert!(m.dynamic_keys);
        assert_eq!((m.k_entity, m.k_relation, m.k_subgraph), (5, 5, 5));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert_eq!(Settings::parse("colour = red").unwrap_err().code, 1);
        let s = Settings::parse("epochs = many").unwrap();
        assert_eq!(s.train().unwrap_err().code, 1);
    }

    #[test]
    fn per_expert_k_overrides_global() {
        let s = Settings::parse("k = 7\nk_subgraph = 3").unwrap();
        let m = s.model().unwrap();
        assert_eq!((m.k_entity, m.k_subgraph), (7, 3));
    }
}
