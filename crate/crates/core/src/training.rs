//! Surrogate retrieval supervision, gradient-descent training and gradient
//! verification against central differences.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{GraphContext, GraphSet, TrainExample};
use crate::error::{Error, Result};
use crate::gate::ExpertSet;
use crate::model::{Forward, ForwardOptions, Model, QueryInput};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub entity: f64,
    pub relation: f64,
    pub gate: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            entity: 1.0,
            relation: 1.0,
            gate: 1.0,
        }
    }
}

/// `−log Σ_{i∈gold} softmax(logits)_i`, computed as
/// `lse(logits) − lse(logits[gold])`.
pub fn set_cross_entropy(tape: &mut Tape, logits: Var, gold: &BTreeSet<usize>) -> Result<Var> {
    let n = tape.value(logits).len();
    if gold.is_empty() {
        return Err(Error::Contract("cross-entropy against an empty gold set".into()));
    }
    let idx: Vec<usize> = gold.iter().copied().collect();
    if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
        return Err(Error::Range { what: "logits", index: bad, len: n });
    }
    let all = tape.log_sum_exp(logits)?;
    let picked = tape.gather(logits, &idx)?;
    let gold = tape.log_sum_exp(picked)?;
    tape.sub(all, gold)
}

/// `λ_e · CE(entity) + λ_r · CE(relation) + λ_g · CE(gate, best expert)`.
///
/// The expert terms use the categorical distribution `softmax(φ)` that the
/// Gumbel-softmax samples from, so neither noise nor temperature enters
/// the loss.
///
/// A term is left out when its weight is zero, its gold set is empty, or
/// the expert did not run.
pub fn surrogate_loss(
    tape: &mut Tape,
    forward: &Forward,
    example: &TrainExample,
    weights: &LossWeights,
) -> Result<Var> {
    example.validate()?;
    let mut terms = Vec::new();
    if let Some(out) = &forward.entity {
        if weights.entity != 0.0 && !example.gold_entities.is_empty() {
            let ce = set_cross_entropy(tape, out.scores, &example.gold_entities)?;
            terms.push(tape.scale(ce, weights.entity));
        }
    }
    if let Some(out) = &forward.relation {
        if weights.relation != 0.0 && !example.gold_triples.is_empty() {
            let ce = set_cross_entropy(tape, out.scores, &example.gold_triples)?;
            terms.push(tape.scale(ce, weights.relation));
        }
    }
    if let Some(best) = example.best_expert {
        if weights.gate != 0.0 {
            match forward.gate.order.iter().position(|&e| e == best) {
                Some(pos) => {
                    let ce = set_cross_entropy(tape, forward.gate.scores, &BTreeSet::from([pos]))?;
                    terms.push(tape.scale(ce, weights.gate));
                }
                None => log::debug!("best expert {best} is not active; gate term skipped"),
            }
        }
    }
    let mut iter = terms.into_iter();
    let Some(mut loss) = iter.next() else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    for t in iter {
        loss = tape.add(loss, t)?;
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub tau0: f64,
    pub anneal_rate: f64,
    pub tau_min: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Experts run during training.
    #[serde(serialize_with = "crate::gate::serialize_label")]
    pub active: ExpertSet,
    /// Gumbel noise on the selection scores.
    pub noise: bool,
    #[serde(skip)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-2,
            batch_size: 8,
            tau0: 1.0,
            anneal_rate: 0.9,
            tau_min: 0.05,
            seed: 0,
            weights: LossWeights::default(),
            active: ExpertSet::ALL,
            noise: true,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Parameter(format!("bad learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        if self.active.is_empty() {
            return Err(Error::Parameter("no expert is active".into()));
        }
        // same domain checks as the selector
        crate::experts::GumbelSelector::new(self.tau0, self.tau_min, self.anneal_rate)?;
        Ok(())
    }

    /// Temperature used during `epoch` (0-based); `tau_at(epochs)` is the
    /// temperature left after training.
    pub fn tau_at(&self, epoch: usize) -> f64 {
        let exp = i32::try_from(epoch).unwrap_or(i32::MAX);
        (self.tau0 * self.anneal_rate.powi(exp)).max(self.tau_min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over the examples of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Temperature used in each epoch.
    pub epoch_taus: Vec<f64>,
    pub final_tau: f64,
    pub steps: usize,
    pub examples: usize,
}

/// A training example resolved against its graph.
#[derive(Debug, Clone)]
pub struct PreparedExample<'a> {
    pub example: &'a TrainExample,
    pub context: &'a GraphContext,
    pub query: Tensor,
}

pub fn prepare<'a>(examples: &'a [TrainExample], graphs: &'a GraphSet) -> Result<Vec<PreparedExample<'a>>> {
    examples
        .iter()
        .map(|ex| {
            ex.validate()?;
            let context = graphs.get(&ex.graph)?;
            ex.check_ids(&context.graph)?;
            Ok(PreparedExample {
                example: ex,
                context,
                query: graphs.embed_query(&ex.query)?,
            })
        })
        .collect()
}

/// Loss and parameter gradients of one example.
pub fn example_gradients(
    model: &Model,
    prepared: &PreparedExample<'_>,
    opts: &ForwardOptions,
    weights: &LossWeights,
    rng: &mut Rng,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let input = QueryInput {
        graph: &prepared.context.graph,
        table: &prepared.context.table,
        query: &prepared.query,
    };
    let forward = model.forward(&mut tape, input, opts, rng)?;
    let loss = surrogate_loss(&mut tape, &forward, prepared.example, weights)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    Ok((value, grads.into_params()))
}

fn non_finite_diagnosis(params: &ParamStore, grads: &[BTreeMap<String, Tensor>]) -> String {
    if let Some(name) = params.first_non_finite() {
        return format!("first non-finite parameter {name}");
    }
    for g in grads {
        if let Some((name, _)) = g.iter().find(|(_, t)| !t.is_finite()) {
            return format!("first non-finite gradient in parameter {name}");
        }
    }
    "all parameters finite".into()
}

/// Plain mini-batch gradient descent over `examples`, shuffled each epoch.
/// Updates `model` in place; its inference temperature becomes the
/// annealed value.
pub fn train(model: &mut Model, examples: &[TrainExample], graphs: &GraphSet, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Parameter("training corpus is empty".into()));
    }
    if graphs.dim() != model.config.dim {
        return Err(Error::dim("train", &[model.config.dim], &[graphs.dim()]));
    }
    let prepared = prepare(examples, graphs)?;
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(config.epochs),
        epoch_taus: Vec::with_capacity(config.epochs),
        final_tau: config.tau_at(config.epochs),
        steps: 0,
        examples: examples.len(),
    };
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 0..config.epochs {
        let tau = config.tau_at(epoch);
        let opts = ForwardOptions {
            active: config.active,
            tau,
            noise: config.noise,
            prompt: false,
        };
        Rng::derive(config.seed, &format!("shuffle/{epoch}")).shuffle(&mut order);
        let mut total = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let results = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = Rng::derive(config.seed, &format!("train/{epoch}/{i}"));
                    example_gradients(model, &prepared[i], &opts, &config.weights, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let (losses, grads): (Vec<f64>, Vec<_>) = results.into_iter().unzip();
            let batch_loss: f64 = losses.iter().sum();
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {batch_loss} at epoch {epoch}, step {step}; {}",
                    non_finite_diagnosis(&model.params, &grads)
                )));
            }
            total += batch_loss;
            let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
            for g in grads {
                for (name, t) in g {
                    match sum.get_mut(&name) {
                        Some(acc) => acc.add_assign_scaled(&t, 1.0)?,
                        None => {
                            sum.insert(name, t);
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for t in sum.values_mut() {
                *t = t.map(|v| v * scale);
            }
            model.params.descend(&sum, config.learning_rate)?;
            if let Some(name) = model.params.first_non_finite() {
                return Err(Error::NonFinite(format!(
                    "parameter {name} became non-finite at epoch {epoch}, step {step}"
                )));
            }
            report.steps += 1;
        }
        let mean = total / prepared.len() as f64;
        log::info!("epoch {epoch}: loss {mean:.6}, tau {tau:.4}");
        report.epoch_losses.push(mean);
        report.epoch_taus.push(tau);
    }
    model.tau = report.final_tau;
    if let Some(path) = &config.checkpoint {
        model.save(path)?;
    }
    Ok(report)
}

/// Scalar checked by [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckObjective {
    Surrogate,
    /// `‖p_soft‖²`, reaching the encoder, projector and projection bank.
    SoftPromptNorm,
    /// Sum of the two.
    Combined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub objective: CheckObjective,
    pub active: ExpertSet,
    pub tau: f64,
    pub weights: LossWeights,
    /// Central-difference step.
    pub step: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            objective: CheckObjective::Combined,
            active: ExpertSet::ALL,
            tau: 1.0,
            weights: LossWeights::default(),
            step: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// Largest relative error per parameter.
    pub errors: BTreeMap<String, f64>,
    pub max_error: f64,
    pub worst: Option<String>,
}

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn objective_value(
    model: &Model,
    tape: &mut Tape,
    input: QueryInput<'_>,
    example: &TrainExample,
    opts: &GradCheckOptions,
) -> Result<Var> {
    let fwd_opts = ForwardOptions {
        active: opts.active,
        tau: opts.tau,
        noise: false,
        prompt: opts.objective != CheckObjective::Surrogate,
    };
    // noise is off, so the generator is never drawn from
    let mut rng = Rng::new(0);
    let forward = model.forward(tape, input, &fwd_opts, &mut rng)?;
    let norm = |tape: &mut Tape| -> Result<Var> {
        let p = forward
            .p_soft
            .ok_or_else(|| Error::Contract("soft prompt was not built".into()))?;
        Ok(tape.sum_squares(p))
    };
    match opts.objective {
        CheckObjective::Surrogate => surrogate_loss(tape, &forward, example, &opts.weights),
        CheckObjective::SoftPromptNorm => norm(tape),
        CheckObjective::Combined => {
            let a = surrogate_loss(tape, &forward, example, &opts.weights)?;
            let b = norm(tape)?;
            tape.add(a, b)
        }
    }
}

/// Compares analytic gradients of the chosen objective with central
/// differences for every entry of every parameter. Frozen parameters
/// report zero.
pub fn grad_check(
    model: &Model,
    context: &GraphContext,
    query: &Tensor,
    example: &TrainExample,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let input = QueryInput {
        graph: &context.graph,
        table: &context.table,
        query,
    };
    let mut tape = Tape::new();
    let out = objective_value(model, &mut tape, input, example, opts)?;
    let analytic = crate::params::full_gradients(&model.params, &tape.backward(out)?);

    let eval = |m: &Model| -> Result<f64> {
        let mut tape = Tape::new();
        let v = objective_value(m, &mut tape, input, example, opts)?;
        tape.value(v).item()
    };
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let errors = names
        .par_iter()
        .map(|name| {
            if model.params.is_frozen(name) {
                return Ok((name.clone(), 0.0));
            }
            let mut probe = model.clone();
            let n = probe.params.get(name)?.len();
            let mut worst: f64 = 0.0;
            for i in 0..n {
                let orig = probe.params.get(name)?.data()[i];
                probe.params.get_mut(name)?.data_mut()[i] = orig + opts.step;
                let up = eval(&probe)?;
                probe.params.get_mut(name)?.data_mut()[i] = orig - opts.step;
                let down = eval(&probe)?;
                probe.params.get_mut(name)?.data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * opts.step);
                worst = worst.max(relative_error(analytic[name].data()[i], numeric));
            }
            Ok((name.clone(), worst))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let (worst, max_error) = errors
        .iter()
        .fold((None, 0.0), |(w, m), (name, &e)| if e > m { (Some(name.clone()), e) } else { (w, m) });
    Ok(GradCheckReport {
        errors,
        max_error,
        worst,
    })
}
