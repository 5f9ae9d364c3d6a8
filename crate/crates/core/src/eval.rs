//! End-to-end evaluation, answer metrics, expert ablations and layer sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{EvalExample, GraphSet, QueryClass, TrainExample};
use crate::error::{Error, Result};
use crate::gate::{ExpertId, ExpertSet};
use crate::model::{ForwardOptions, Model, ModelConfig, QueryInput};
use crate::prompt::{assemble, soft_prompt_rows, textualize, Evidence, GenerationBackend, DEFAULT_BUDGET, DEFAULT_TASK};
use crate::rng::Rng;
use crate::training::{train, TrainConfig};

/// Share of failed generations above which a run is degraded.
pub const DEGRADED_FAILURE_RATE: f64 = 0.1;

/// Lowercase, trim and collapse inner whitespace.
pub fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Fraction of predictions equal to their gold answer after normalization.
pub fn compute_accuracy<S: AsRef<str>, T: AsRef<str>>(preds: &[S], golds: &[T]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} gold answers",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Parameter("accuracy of zero predictions".into()));
    }
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| normalize(p.as_ref()) == normalize(g.as_ref()))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Whether `pred` matches any of `answers` after normalization.
pub fn compute_hit_at_1<S: AsRef<str>>(pred: &str, answers: &[S]) -> bool {
    let p = normalize(pred);
    answers.iter().any(|a| normalize(a.as_ref()) == p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Exact match against the first answer.
    #[default]
    Accuracy,
    /// Match against any answer.
    HitAt1,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "acc" | "accuracy" => Ok(Self::Accuracy),
            "hit@1" | "hit_at_1" | "hit1" => Ok(Self::HitAt1),
            _ => Err(Error::Parameter(format!("unknown metric `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    #[serde(serialize_with = "crate::gate::serialize_label")]
    pub active: ExpertSet,
    pub task: String,
    pub budget: usize,
    pub seed: u64,
    pub metric: Metric,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            active: ExpertSet::ALL,
            task: DEFAULT_TASK.to_string(),
            budget: DEFAULT_BUDGET,
            seed: 0,
            metric: Metric::Accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub graph: String,
    pub question: String,
    pub prediction: String,
    pub answers: Vec<String>,
    /// Exact match against the first answer.
    pub correct: bool,
    pub hit: bool,
    pub gate: BTreeMap<ExpertId, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_class: Option<QueryClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub accuracy: f64,
    pub hit_at_1: f64,
    pub metric: Metric,
    pub failures: usize,
    pub degraded: bool,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Builds the aggregates from the records.
    pub fn from_records(records: Vec<EvalRecord>, metric: Metric, config: serde_json::Value) -> Self {
        let n = records.len().max(1) as f64;
        let accuracy = records.iter().filter(|r| r.correct).count() as f64 / n;
        let hit_at_1 = records.iter().filter(|r| r.hit).count() as f64 / n;
        let failures = records.iter().filter(|r| r.error.is_some()).count();
        let degraded = failures as f64 > DEGRADED_FAILURE_RATE * records.len() as f64;
        Self {
            records,
            accuracy,
            hit_at_1,
            metric,
            failures,
            degraded,
            config,
        }
    }

    /// The score selected by the dataset's metric.
    pub fn score(&self) -> f64 {
        match self.metric {
            Metric::Accuracy => self.accuracy,
            Metric::HitAt1 => self.hit_at_1,
        }
    }

    /// Mean gate weight per expert, over all records or one query class.
    pub fn mean_gate(&self, class: Option<QueryClass>) -> BTreeMap<ExpertId, f64> {
        let rows: Vec<&EvalRecord> = self
            .records
            .iter()
            .filter(|r| class.is_none() || r.query_class == class)
            .collect();
        let mut sums = BTreeMap::new();
        for r in &rows {
            for (&e, &w) in &r.gate {
                *sums.entry(e).or_insert(0.0) += w;
            }
        }
        for v in sums.values_mut() {
            *v /= rows.len().max(1) as f64;
        }
        sums
    }

    pub fn records_jsonl(&self) -> String {
        crate::data::to_jsonl(&self.records)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "examples: {}", self.records.len());
        let _ = writeln!(s, "accuracy: {:.4}", self.accuracy);
        let _ = writeln!(s, "hit@1: {:.4}", self.hit_at_1);
        let _ = writeln!(s, "failures: {}", self.failures);
        if self.degraded {
            let _ = writeln!(s, "status: DEGRADED (more than 10% of generations failed)");
        }
        for (label, class) in [("all", None), ("simple", Some(QueryClass::Simple)), ("complex", Some(QueryClass::Complex))] {
            let n = self.records.iter().filter(|r| class.is_none() || r.query_class == class).count();
            if n == 0 || (class.is_some() && n == self.records.len()) && label != "all" {
                continue;
            }
            let g = self.mean_gate(class);
            let parts: Vec<String> = g.iter().map(|(e, w)| format!("{e}={w:.3}")).collect();
            let _ = writeln!(s, "mean gate [{label}, n={n}]: {}", parts.join(" "));
        }
        s
    }

    /// One row per example: `id,class,entity,relation,subgraph`.
    pub fn gate_matrix_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "class", "entity", "relation", "subgraph"])?;
        for r in &self.records {
            let class = match r.query_class {
                Some(QueryClass::Simple) => "simple",
                Some(QueryClass::Complex) => "complex",
                None => "",
            };
            let mut row = vec![r.id.clone(), class.to_string()];
            row.extend(ExpertId::ALL.iter().map(|e| r.gate.get(e).map_or(String::new(), |w| w.to_string())));
            w.write_record(&row)?;
        }
        csv_string(w)
    }

    /// Mean gate weight per query class: `class,entity,relation,subgraph`.
    pub fn gate_by_class_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["class", "entity", "relation", "subgraph"])?;
        for (label, class) in [("all", None), ("simple", Some(QueryClass::Simple)), ("complex", Some(QueryClass::Complex))] {
            if class.is_some() && !self.records.iter().any(|r| r.query_class == class) {
                continue;
            }
            let g = self.mean_gate(class);
            let mut row = vec![label.to_string()];
            row.extend(ExpertId::ALL.iter().map(|e| g.get(e).map_or(String::new(), |w| w.to_string())));
            w.write_record(&row)?;
        }
        csv_string(w)
    }

    /// `records.jsonl`, `summary.txt`, `gate_matrix.csv` and
    /// `gate_by_class.csv` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        write("records.jsonl", self.records_jsonl())?;
        write("summary.txt", self.summary())?;
        write("gate_matrix.csv", self.gate_matrix_csv()?)?;
        write("gate_by_class.csv", self.gate_by_class_csv()?)
    }
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn evaluate_one(
    model: &Model,
    graphs: &GraphSet,
    ex: &EvalExample,
    backend: &dyn GenerationBackend,
    config: &EvalConfig,
) -> Result<EvalRecord> {
    let ctx = graphs.get(&ex.graph)?;
    let query = graphs.embed_query(&ex.question)?;
    let mut tape = Tape::new();
    let mut rng = Rng::derive(config.seed, &ex.id);
    let opts = ForwardOptions {
        active: config.active,
        ..ForwardOptions::eval(model.tau)
    };
    let input = QueryInput {
        graph: &ctx.graph,
        table: &ctx.table,
        query: &query,
    };
    let forward = model.forward(&mut tape, input, &opts, &mut rng)?;
    let gate = forward.gate.weights(&tape);
    let evidence = textualize(&ctx.graph, &Evidence::from_forward(&tape, &forward), config.budget);
    let soft = match forward.p_soft {
        Some(p) if backend.accepts_soft_prompt() => soft_prompt_rows(tape.value(p)),
        _ => Vec::new(),
    };
    let bundle = assemble(&config.task, soft, &evidence, &ex.question)?.with_priority(gate.clone());
    let (prediction, error) = match backend.generate(&bundle) {
        Ok(a) => (a.text, None),
        Err(e) => {
            log::warn!("generation failed for {}: {e}", ex.id);
            (String::new(), Some(e.to_string()))
        }
    };
    Ok(EvalRecord {
        id: ex.id.clone(),
        graph: ex.graph.clone(),
        question: ex.question.clone(),
        correct: error.is_none() && normalize(&prediction) == normalize(&ex.answers[0]),
        hit: error.is_none() && compute_hit_at_1(&prediction, &ex.answers),
        prediction,
        answers: ex.answers.clone(),
        gate: gate.alpha,
        query_class: ex.query_class,
        error,
    })
}

/// Runs the full pipeline on every example in parallel. Generation
/// failures are recorded per example; other errors abort the run.
pub fn run_eval(
    model: &Model,
    graphs: &GraphSet,
    dataset: &[EvalExample],
    backend: &dyn GenerationBackend,
    config: &EvalConfig,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Parameter("evaluation dataset is empty".into()));
    }
    if config.active.is_empty() {
        return Err(Error::Parameter("no expert is active".into()));
    }
    for ex in dataset {
        ex.validate()?;
        graphs.get(&ex.graph)?;
    }
    let records = dataset
        .par_iter()
        .map(|ex| evaluate_one(model, graphs, ex, backend, config))
        .collect::<Result<Vec<_>>>()?;
    let snapshot = serde_json::json!({
        "eval": config,
        "model": model.config.snapshot(),
        "tau": model.tau,
        "backend": backend.name(),
    });
    Ok(EvalReport::from_records(records, config.metric, snapshot))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub experts: String,
    pub accuracy: f64,
    pub hit_at_1: f64,
    pub failures: usize,
    pub mean_gate: BTreeMap<ExpertId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    #[serde(skip)]
    pub reports: Vec<EvalReport>,
}

impl AblationTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["experts", "accuracy", "hit_at_1", "failures", "gate_entity", "gate_relation", "gate_subgraph"])?;
        for r in &self.rows {
            let mut row = vec![
                r.experts.clone(),
                r.accuracy.to_string(),
                r.hit_at_1.to_string(),
                r.failures.to_string(),
            ];
            row.extend(ExpertId::ALL.iter().map(|e| r.mean_gate.get(e).map_or(String::new(), |w| w.to_string())));
            w.write_record(&row)?;
        }
        csv_string(w)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<8} {:>9} {:>9}\n", "experts", "accuracy", "hit@1");
        for r in &self.rows {
            let _ = writeln!(s, "{:<8} {:>9.4} {:>9.4}", r.experts, r.accuracy, r.hit_at_1);
        }
        s
    }
}

/// One evaluation per expert subset, with the other experts masked at the
/// gate.
pub fn run_ablation(
    model: &Model,
    graphs: &GraphSet,
    dataset: &[EvalExample],
    backend: &dyn GenerationBackend,
    config: &EvalConfig,
    combos: &[ExpertSet],
) -> Result<AblationTable> {
    if combos.is_empty() {
        return Err(Error::Parameter("no expert combinations given".into()));
    }
    let mut table = AblationTable {
        rows: Vec::new(),
        reports: Vec::new(),
    };
    for &combo in combos {
        if combo.is_empty() {
            return Err(Error::Parameter("empty expert combination".into()));
        }
        let cfg = EvalConfig {
            active: combo,
            ..config.clone()
        };
        let report = run_eval(model, graphs, dataset, backend, &cfg)?;
        table.rows.push(AblationRow {
            experts: combo.label(),
            accuracy: report.accuracy,
            hit_at_1: report.hit_at_1,
            failures: report.failures,
            mean_gate: report.mean_gate(None),
        });
        table.reports.push(report);
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRow {
    pub layers: usize,
    pub accuracy: f64,
    pub hit_at_1: f64,
    pub final_loss: f64,
}

/// Trains a fresh model for each encoder depth and evaluates it.
#[allow(clippy::too_many_arguments)]
pub fn sweep_layers(
    base: &ModelConfig,
    model_seed: u64,
    train_set: &[TrainExample],
    graphs: &GraphSet,
    train_config: &TrainConfig,
    dataset: &[EvalExample],
    backend: &dyn GenerationBackend,
    eval_config: &EvalConfig,
    layers: &[usize],
) -> Result<Vec<LayerRow>> {
    layers
        .iter()
        .map(|&l| {
            let config = ModelConfig {
                layers: l,
                ..base.clone()
            };
            let mut model = Model::init(config, model_seed)?;
            let tc = TrainConfig {
                checkpoint: None,
                ..train_config.clone()
            };
            let rep = train(&mut model, train_set, graphs, &tc)?;
            let ev = run_eval(&model, graphs, dataset, backend, eval_config)?;
            log::info!("layers {l}: accuracy {:.4}", ev.accuracy);
            Ok(LayerRow {
                layers: l,
                accuracy: ev.accuracy,
                hit_at_1: ev.hit_at_1,
                final_loss: rep.epoch_losses.last().copied().unwrap_or(f64::NAN),
            })
        })
        .collect()
}

pub fn layer_sweep_csv(rows: &[LayerRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layers", "accuracy", "hit_at_1", "final_loss"])?;
    for r in rows {
        w.write_record([
            r.layers.to_string(),
            r.accuracy.to_string(),
            r.hit_at_1.to_string(),
            r.final_loss.to_string(),
        ])?;
    }
    csv_string(w)
}
