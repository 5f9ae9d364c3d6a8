//! Query-to-expert gating and fusion of expert outputs into the soft prompt.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertId {
    Entity,
    Relation,
    Subgraph,
}

impl ExpertId {
    pub const ALL: [ExpertId; 3] = [ExpertId::Entity, ExpertId::Relation, ExpertId::Subgraph];

    pub fn as_str(self) -> &'static str {
        match self {
            ExpertId::Entity => "entity",
            ExpertId::Relation => "relation",
            ExpertId::Subgraph => "subgraph",
        }
    }

    pub fn letter(self) -> char {
        match self {
            ExpertId::Entity => 'E',
            ExpertId::Relation => 'R',
            ExpertId::Subgraph => 'S',
        }
    }

    fn bit(self) -> u8 {
        1 << self as u8
    }

    pub fn key_param(self) -> String {
        format!("gate.key.{}", self.as_str())
    }
}

impl fmt::Display for ExpertId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExpertId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "entity" | "e" => Ok(ExpertId::Entity),
            "relation" | "r" | "triple" => Ok(ExpertId::Relation),
            "subgraph" | "s" => Ok(ExpertId::Subgraph),
            other => Err(Error::Parameter(format!("unknown expert `{other}`"))),
        }
    }
}

/// A subset of the experts, iterated in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ExpertSet(u8);

impl ExpertSet {
    pub const ALL: ExpertSet = ExpertSet(0b111);
    pub const EMPTY: ExpertSet = ExpertSet(0);

    pub fn single(e: ExpertId) -> Self {
        Self(e.bit())
    }

    pub fn from_iter_ids(ids: impl IntoIterator<Item = ExpertId>) -> Self {
        Self(ids.into_iter().fold(0, |m, e| m | e.bit()))
    }

    pub fn contains(self, e: ExpertId) -> bool {
        self.0 & e.bit() != 0
    }

    pub fn with(self, e: ExpertId) -> Self {
        Self(self.0 | e.bit())
    }

    pub fn without(self, e: ExpertId) -> Self {
        Self(self.0 & !e.bit())
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = ExpertId> {
        ExpertId::ALL.into_iter().filter(move |&e| self.contains(e))
    }

    /// `E`, `R+S`, `E+R+S`, ...
    pub fn label(self) -> String {
        let parts: Vec<String> = self.iter().map(|e| e.letter().to_string()).collect();
        parts.join("+")
    }

    /// The seven non-empty subsets: singles, pairs, then all three.
    pub fn ablation_combos() -> Vec<ExpertSet> {
        use ExpertId::*;
        [
            &[Entity][..],
            &[Relation],
            &[Subgraph],
            &[Entity, Relation],
            &[Entity, Subgraph],
            &[Relation, Subgraph],
            &[Entity, Relation, Subgraph],
        ]
        .iter()
        .map(|ids| Self::from_iter_ids(ids.iter().copied()))
        .collect()
    }
}

impl FromStr for ExpertSet {
    type Err = Error;

    /// Parses `E+R`, `entity,subgraph`, `all`.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(Self::ALL);
        }
        let set = s
            .split(['+', ','])
            .map(str::parse::<ExpertId>)
            .collect::<Result<Vec<_>>>()
            .map(Self::from_iter_ids)?;
        if set.is_empty() {
            return Err(Error::Parameter("empty expert set".into()));
        }
        Ok(set)
    }
}

impl fmt::Display for ExpertSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Serializes an expert set as its label, e.g. `"E+R"`.
pub fn serialize_label<S: serde::Serializer>(set: &ExpertSet, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&set.label())
}

/// Per-expert weights for one query.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GateWeights {
    pub alpha: BTreeMap<ExpertId, f64>,
}

impl GateWeights {
    pub fn get(&self, e: ExpertId) -> f64 {
        self.alpha.get(&e).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.alpha.values().sum()
    }

    /// Expert with the largest weight, ties to canonical order.
    pub fn argmax(&self) -> Option<ExpertId> {
        let mut best: Option<(ExpertId, f64)> = None;
        for (&e, &w) in &self.alpha {
            if best.is_none_or(|(_, b)| w > b) {
                best = Some((e, w));
            }
        }
        best.map(|(e, _)| e)
    }
}

/// Bound gate parameters.
#[derive(Debug, Clone)]
pub struct GateParams {
    pub w_g: Var,
    pub keys: BTreeMap<ExpertId, Var>,
}

impl GateParams {
    /// `key_dim` is `d` for learned keys, or the fused output width when
    /// experts' own outputs act as keys.
    pub fn init(store: &mut ParamStore, rng: &mut Rng, dim: usize, key_dim: usize, scale: f64) {
        store.init_normal(rng, "gate.W_g", &[dim, key_dim], scale);
        for e in ExpertId::ALL {
            store.init_normal(rng, &e.key_param(), &[key_dim], 1.0);
        }
    }

    pub fn bind(tape: &mut Tape, store: &ParamStore) -> Result<Self> {
        let w_g = store.bind(tape, "gate.W_g")?;
        let mut keys = BTreeMap::new();
        for e in ExpertId::ALL {
            if store.contains(&e.key_param()) {
                keys.insert(e, store.bind(tape, &e.key_param())?);
            }
        }
        Ok(Self { w_g, keys })
    }
}

/// Softmax gate over the active experts.
#[derive(Debug, Clone)]
pub struct Gate {
    pub order: Vec<ExpertId>,
    pub scores: Var,
    pub alpha: Var,
}

impl Gate {
    pub fn weights(&self, tape: &Tape) -> GateWeights {
        GateWeights {
            alpha: self
                .order
                .iter()
                .copied()
                .zip(tape.value(self.alpha).data().iter().copied())
                .collect(),
        }
    }
}

/// `α = softmax(h_qᵀ W_g e_i)` over `active`, with the learned keys.
pub fn gate(tape: &mut Tape, params: &GateParams, h_q: Var, active: ExpertSet) -> Result<Gate> {
    let mut keys = Vec::new();
    for e in active.iter() {
        let k = params
            .keys
            .get(&e)
            .ok_or_else(|| Error::Parameter(format!("no gate key for expert {e}")))?;
        keys.push((e, *k));
    }
    gate_with_keys(tape, params.w_g, h_q, &keys)
}

/// `α = softmax(h_qᵀ W_g e_i)` for explicit `(expert, key)` pairs.
pub fn gate_with_keys(tape: &mut Tape, w_g: Var, h_q: Var, keys: &[(ExpertId, Var)]) -> Result<Gate> {
    if keys.is_empty() {
        return Err(Error::Parameter("gate over an empty expert set".into()));
    }
    let ws = tape.value(w_g).shape().to_vec();
    let d = tape.value(h_q).len();
    if ws.len() != 2 || ws[0] != d {
        return Err(Error::dim("gate", &ws, tape.value(h_q).shape()));
    }
    let key_vars: Vec<Var> = keys.iter().map(|&(_, k)| k).collect();
    let k = tape.stack_rows(&key_vars)?;
    let q_row = tape.reshape(h_q, &[1, d])?;
    let u = tape.matmul(q_row, w_g)?;
    let u = tape.transpose(u)?;
    let phi = tape.matmul(k, u)?;
    let phi = tape.reshape(phi, &[keys.len()])?;
    let alpha = tape.softmax(phi, 1.0)?;
    Ok(Gate {
        order: keys.iter().map(|&(e, _)| e).collect(),
        scores: phi,
        alpha,
    })
}

/// `p_soft = Σ α_i f_i` over the gate's experts.
pub fn fuse(tape: &mut Tape, gate: &Gate, outputs: &BTreeMap<ExpertId, Var>) -> Result<Var> {
    let mut rows = Vec::with_capacity(gate.order.len());
    for e in &gate.order {
        let v = outputs
            .get(e)
            .ok_or_else(|| Error::Contract(format!("no output for weighted expert {e}")))?;
        rows.push(*v);
    }
    let shape = tape.value(rows[0]).shape().to_vec();
    let flat: Vec<Var> = rows
        .iter()
        .map(|&r| {
            let n = tape.value(r).len();
            tape.reshape(r, &[n])
        })
        .collect::<Result<_>>()?;
    let m = tape.stack_rows(&flat)?;
    let a = tape.reshape(gate.alpha, &[1, gate.order.len()])?;
    let p = tape.matmul(a, m)?;
    tape.reshape(p, &shape)
}

/// Affine maps lifting the entity and relation representations into the
/// prompt space. The subgraph expert already produces prompt vectors.
#[derive(Debug, Clone)]
pub struct ExpertProjectionBank {
    maps: BTreeMap<ExpertId, (Var, Var)>,
    pub num_vectors: usize,
}

impl ExpertProjectionBank {
    pub fn param_names(e: ExpertId) -> (String, String) {
        (format!("bank.{e}.W"), format!("bank.{e}.b"))
    }

    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        dim: usize,
        prompt_dim: usize,
        num_vectors: usize,
        scale: f64,
    ) {
        for e in [ExpertId::Entity, ExpertId::Relation] {
            let (w, b) = Self::param_names(e);
            store.init_normal(rng, &w, &[dim, num_vectors * prompt_dim], scale);
            store.init_normal(rng, &b, &[num_vectors * prompt_dim], scale);
        }
    }

    pub fn bind(tape: &mut Tape, store: &ParamStore, num_vectors: usize) -> Result<Self> {
        let mut maps = BTreeMap::new();
        for e in [ExpertId::Entity, ExpertId::Relation] {
            let (w, b) = Self::param_names(e);
            maps.insert(e, (store.bind(tape, &w)?, store.bind(tape, &b)?));
        }
        Ok(Self { maps, num_vectors })
    }

    /// Lifts `h` (`[d]`) to `[num_vectors, d_p]`.
    pub fn project(&self, tape: &mut Tape, e: ExpertId, h: Var) -> Result<Var> {
        let &(w, b) = self
            .maps
            .get(&e)
            .ok_or_else(|| Error::Contract(format!("no projection for expert {e}")))?;
        let d = tape.value(h).len();
        let ws = tape.value(w).shape().to_vec();
        if ws[0] != d {
            return Err(Error::dim("projection bank", &ws, tape.value(h).shape()));
        }
        let row = tape.reshape(h, &[1, d])?;
        let y = tape.matmul(row, w)?;
        let y = tape.reshape(y, &[ws[1]])?;
        let y = tape.add(y, b)?;
        tape.reshape(y, &[self.num_vectors, ws[1] / self.num_vectors])
    }
}
