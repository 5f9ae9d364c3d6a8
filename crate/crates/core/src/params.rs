//! Named parameter tensors, their registration on a tape, gradient steps and
//! the text checkpoint format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const CHECKPOINT_HEADER: &str = "mixrag-checkpoint v1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
    meta: BTreeMap<String, String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    /// Inserts a Gaussian tensor with standard deviation `scale`.
    pub fn init_normal(&mut self, rng: &mut Rng, name: &str, shape: &[usize], scale: f64) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| scale * rng.normal()).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape matches"));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Parameter(format!("missing parameter {name}")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.frozen.remove(name);
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Frozen parameters are bound as constants and never updated.
    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn meta_keys(&self) -> impl Iterator<Item = &str> {
        self.meta.keys().map(String::as_str)
    }

    /// Registers `name` on `tape`, as a constant when frozen.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let value = self.get(name)?;
        if self.is_frozen(name) {
            Ok(tape.constant(value.clone()))
        } else {
            Ok(tape.param(name, value))
        }
    }

    /// `θ ← θ − lr · g` for every unfrozen parameter present in `grads`.
    pub fn descend(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if self.is_frozen(name) {
                continue;
            }
            self.get_mut(name)?.add_assign_scaled(g, -lr)?;
        }
        Ok(())
    }

    /// Name of the first parameter holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(CHECKPOINT_HEADER);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "meta {k} {v}");
        }
        for name in &self.frozen {
            let _ = writeln!(out, "frozen {name}");
        }
        for (name, t) in &self.tensors {
            let _ = write!(out, "param {name} {}", t.rank());
            for d in t.shape() {
                let _ = write!(out, " {d}");
            }
            out.push('\n');
            let values: Vec<String> = t.data().iter().map(f64::to_string).collect();
            out.push_str(&values.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, message: String| Error::Format {
            line: line + 1,
            column: 1,
            message,
        };
        match lines.next() {
            Some((_, h)) if h.trim() == CHECKPOINT_HEADER => {}
            _ => return Err(bad(0, format!("expected header `{CHECKPOINT_HEADER}`"))),
        }
        let mut store = Self::new();
        while let Some((i, line)) = lines.next() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("meta") => {
                    let key = parts.next().ok_or_else(|| bad(i, "meta without key".into()))?;
                    let value: Vec<&str> = parts.collect();
                    store.meta.insert(key.to_string(), value.join(" "));
                }
                Some("frozen") => {
                    let name = parts.next().ok_or_else(|| bad(i, "frozen without name".into()))?;
                    store.frozen.insert(name.to_string());
                }
                Some("param") => {
                    let name = parts.next().ok_or_else(|| bad(i, "param without name".into()))?;
                    let nums: Vec<usize> = parts
                        .map(str::parse)
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| bad(i, format!("bad shape: {e}")))?;
                    let (&rank, dims) = nums
                        .split_first()
                        .ok_or_else(|| bad(i, "param without rank".into()))?;
                    if dims.len() != rank {
                        return Err(bad(i, format!("rank {rank} but {} dims", dims.len())));
                    }
                    let (j, values) = lines
                        .next()
                        .ok_or_else(|| bad(i, format!("no values for {name}")))?;
                    let data: Vec<f64> = values
                        .split_whitespace()
                        .map(str::parse)
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| bad(j, format!("bad value: {e}")))?;
                    let t = Tensor::new(dims.to_vec(), data).map_err(|e| bad(j, e.to_string()))?;
                    store.insert(name, t);
                }
                Some(other) => return Err(bad(i, format!("unknown record `{other}`"))),
                None => {}
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Gradients of every parameter in `store`, zeros for those the tape did not
/// see or that are frozen.
pub fn full_gradients(store: &ParamStore, grads: &Gradients) -> BTreeMap<String, Tensor> {
    store
        .iter()
        .map(|(name, t)| {
            let g = match grads.get(name) {
                Some(g) if !store.is_frozen(name) => g.clone(),
                _ => Tensor::zeros(t.shape()),
            };
            (name.to_string(), g)
        })
        .collect()
}
