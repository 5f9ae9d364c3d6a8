//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value to a [`Tape`].
//! [`Tape::backward`] walks the tape in reverse and accumulates adjoints
//! into every node that requires a gradient. Nodes built only from
//! constants are recorded as plain values and cost nothing on the way back.
//!
//! ```
//! use mixrag::autodiff::Tape;
//! use mixrag::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param("x", &Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get("x").unwrap().item().unwrap(), 6.0);
//! ```

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    ScaleBy(Var, Var),
    Tanh(Var),
    Log(Var),
    Softmax(Var),
    LogSumExp(Var),
    Sum(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    SliceRows(Var, usize, usize),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    by_param: BTreeMap<String, Tensor>,
    by_var: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a named parameter registered on the tape.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_param.get(name)
    }

    /// Gradient with respect to any node that required one.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.by_var.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.by_param
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a named trainable leaf. Registering the same name twice
    /// returns the existing handle.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.params.insert(name.to_string(), v);
        self.param_order.push(name.to_string());
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Adds vector `v` (length `k`) to every row of matrix `m` (`[n, k]`).
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (mt, vt) = (self.value(m), self.value(v));
        if mt.rank() != 2 || vt.len() != mt.cols() {
            return Err(Error::dim("add_row", mt.shape(), vt.shape()));
        }
        let k = mt.cols();
        let mut data = mt.data().to_vec();
        for row in data.chunks_mut(k) {
            for (x, &b) in row.iter_mut().zip(vt.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(mt.shape().to_vec(), data)?;
        let rg = self.rg(&[m, v]);
        Ok(self.push(value, Op::AddRow(m, v), rg))
    }

    /// Multiplies row `i` of `m` (`[n, k]`) by `v[i]`.
    pub fn scale_rows(&mut self, m: Var, v: Var) -> Result<Var> {
        let (mt, vt) = (self.value(m), self.value(v));
        if mt.rank() != 2 || vt.len() != mt.rows() {
            return Err(Error::dim("scale_rows", mt.shape(), vt.shape()));
        }
        let k = mt.cols();
        let mut data = mt.data().to_vec();
        for (row, &s) in data.chunks_mut(k).zip(vt.data()) {
            for x in row.iter_mut() {
                *x *= s;
            }
        }
        let value = Tensor::new(mt.shape().to_vec(), data)?;
        let rg = self.rg(&[m, v]);
        Ok(self.push(value, Op::ScaleRows(m, v), rg))
    }

    /// Multiplies every entry of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::dim("scale_by", self.value(x).shape(), sv.shape()));
        }
        let c = sv.data()[0];
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::ScaleBy(x, s), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(value, Op::Log(a), rg)
    }

    /// Softmax over a vector at the given temperature.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let a = if temperature == 1.0 {
            a
        } else {
            self.scale(a, 1.0 / temperature)
        };
        let x = self.value(a);
        if x.rank() != 1 || x.is_empty() {
            return Err(Error::Parameter(format!(
                "softmax expects a non-empty vector, got shape {:?}",
                x.shape()
            )));
        }
        let value = Tensor::vector(tensor::softmax_in_place(x.data().to_vec()));
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// `ln Σ exp(x_i)` as a scalar.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Parameter("log_sum_exp over empty input".into()));
        }
        let value = Tensor::scalar(tensor::log_sum_exp(x.data()));
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LogSumExp(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Sum of squares.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a).expect("same shape");
        self.sum(sq)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 1 {
                return Err(Error::dim("concat", t.shape(), &[]));
            }
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg))
    }

    /// Stacks equally sized vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Parameter("stack_rows of nothing".into()));
        }
        let cols = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            let t = self.value(r);
            if t.len() != cols {
                return Err(Error::dim("stack_rows", &[cols], t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows.len(), cols, data)?;
        let rg = self.rg(rows);
        Ok(self.push(value, Op::StackRows(rows.to_vec()), rg))
    }

    /// Picks entries of a vector by index (repeats allowed).
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= x.len() {
                return Err(Error::Range {
                    what: "gather",
                    index: i,
                    len: x.len(),
                });
            }
            data.push(x.data()[i]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::vector(data), Op::Gather(a, idx.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || start > end || end > x.rows() {
            return Err(Error::dim("slice_rows", x.shape(), &[start, end]));
        }
        let c = x.cols();
        let value = Tensor::matrix(end - start, c, x.data()[start * c..end * c].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceRows(a, start, end), rg))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if hard.shape() != self.value(soft).shape() {
            return Err(Error::dim(
                "straight_through",
                self.value(soft).shape(),
                hard.shape(),
            ));
        }
        let rg = self.rg(&[soft]);
        Ok(self.push(hard, Op::StraightThrough(soft), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every registered parameter receives a gradient; parameters the loss
    /// does not depend on receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut by_param = BTreeMap::new();
        for name in &self.param_order {
            let v = self.params[name];
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            by_param.insert(name.clone(), g);
        }
        Ok(Gradients {
            by_param,
            by_var: grads,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = g.matmul(&self.value(*b).transpose()?)?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let gb = self.value(*a).transpose()?.matmul(g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?)?,
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y)?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c))?,
            Op::AddRow(m, v) => {
                self.accumulate(grads, *m, g.clone())?;
                if self.requires_grad(*v) {
                    let k = g.cols();
                    let mut gv = vec![0.0; k];
                    for row in g.data().chunks(k) {
                        for (s, &x) in gv.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    let shape = self.value(*v).shape().to_vec();
                    self.accumulate(grads, *v, Tensor::new(shape, gv)?)?;
                }
            }
            Op::ScaleRows(m, v) => {
                let (mv, vv) = (self.value(*m), self.value(*v));
                let k = mv.cols();
                if self.requires_grad(*m) {
                    let mut gm = g.data().to_vec();
                    for (row, &s) in gm.chunks_mut(k).zip(vv.data()) {
                        for x in row.iter_mut() {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, *m, Tensor::new(mv.shape().to_vec(), gm)?)?;
                }
                if self.requires_grad(*v) {
                    let gv: Vec<f64> = g
                        .data()
                        .chunks(k)
                        .zip(mv.data().chunks(k))
                        .map(|(gr, mr)| tensor::dot(gr, mr))
                        .collect();
                    self.accumulate(grads, *v, Tensor::new(vv.shape().to_vec(), gv)?)?;
                }
            }
            Op::ScaleBy(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                if self.requires_grad(*x) {
                    let c = sv.data()[0];
                    self.accumulate(grads, *x, g.map(|v| v * c))?;
                }
                if self.requires_grad(*s) {
                    let gs = tensor::dot(g.data(), xv.data());
                    self.accumulate(grads, *s, Tensor::new(sv.shape().to_vec(), vec![gs])?)?;
                }
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Log(a) => {
                let ga = g.zip_map(self.value(*a), |gv, xv| gv / xv)?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Softmax(a) => {
                let inner = tensor::dot(g.data(), y.data());
                let ga = g.zip_map(y, |gv, yv| yv * (gv - inner))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::LogSumExp(a) => {
                let x = self.value(*a);
                let p = tensor::softmax_in_place(x.data().to_vec());
                let gs = g.data()[0];
                let ga = Tensor::new(x.shape().to_vec(), p.into_iter().map(|v| v * gs).collect())?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Sum(a) => {
                let gs = g.data()[0];
                self.accumulate(grads, *a, Tensor::filled(self.value(*a).shape(), gs))?;
            }
            Op::Reshape(a) => {
                let ga = g.reshape(self.value(*a).shape())?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let ga = Tensor::vector(g.data()[offset..offset + n].to_vec());
                    offset += n;
                    self.accumulate(grads, p, ga)?;
                }
            }
            Op::StackRows(rows) => {
                let c = g.cols();
                for (r, &p) in rows.iter().enumerate() {
                    let shape = self.value(p).shape().to_vec();
                    let ga = Tensor::new(shape, g.data()[r * c..(r + 1) * c].to_vec())?;
                    self.accumulate(grads, p, ga)?;
                }
            }
            Op::Gather(a, idx) => {
                let x = self.value(*a);
                let mut ga = vec![0.0; x.len()];
                for (k, &j) in idx.iter().enumerate() {
                    ga[j] += g.data()[k];
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), ga)?)?;
            }
            Op::SliceRows(a, start, end) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut ga = vec![0.0; x.len()];
                ga[start * c..end * c].copy_from_slice(g.data());
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), ga)?)?;
            }
            Op::StraightThrough(soft) => self.accumulate(grads, *soft, g.clone())?,
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.requires_grad(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign_scaled(&g, 1.0)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    /// Checks d(sum(op(inputs) * weights))/d(inputs) against central differences.
    fn check_op(
        inputs: Vec<Tensor>,
        build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
        rng: &mut Rng,
    ) {
        let eval = |vals: &[Tensor], weights: Option<&Tensor>| -> (f64, Option<Gradients>, Tensor) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals
                .iter()
                .enumerate()
                .map(|(i, t)| tape.param(&format!("in{i}"), t))
                .collect();
            let out = build(&mut tape, &vars).unwrap();
            let shape = tape.value(out).shape().to_vec();
            let w = weights.cloned().unwrap_or_else(|| Tensor::filled(&shape, 1.0));
            let wv = tape.constant(w.clone());
            let prod = tape.mul(out, wv).unwrap();
            let s = tape.sum(prod);
            let val = tape.value(s).item().unwrap();
            let grads = tape.backward(s).ok();
            (val, grads, w)
        };
        let (_, _, shape_probe) = eval(&inputs, None);
        let weights = random(rng, shape_probe.shape());
        let (_, grads, _) = eval(&inputs, Some(&weights));
        let grads = grads.unwrap();
        let h = 1e-5;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.get(&format!("in{i}")).unwrap().clone();
            for j in 0..t.len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let numeric = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * h);
                let a = analytic.data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel <= 1e-4, "input {i} entry {j}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get("x").unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::vector(vec![1.0, 2.0]));
        let _unused = tape.param("w", &Tensor::vector(vec![5.0, 5.0, 5.0]));
        let s = tape.sum_squares(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn tanh_of_matvec_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let w = random(&mut rng, &[3, 4]);
        let x = random(&mut rng, &[4, 1]);
        let loss = |w: &Tensor| -> f64 {
            w.matmul(&x).unwrap().data().iter().map(|v| v.tanh()).sum()
        };
        let mut tape = Tape::new();
        let wv = tape.param("W", &w);
        let xv = tape.constant(x.clone());
        let y = tape.matmul(wv, xv).unwrap();
        let t = tape.tanh(y);
        let s = tape.sum(t);
        let g = tape.backward(s).unwrap();
        let analytic = g.get("W").unwrap();
        let h = 1e-5;
        for j in 0..w.len() {
            let mut p = w.clone();
            p.data_mut()[j] += h;
            let mut m = w.clone();
            m.data_mut()[j] -= h;
            let numeric = (loss(&p) - loss(&m)) / (2.0 * h);
            let a = analytic.data()[j];
            assert!((a - numeric).abs() / a.abs().max(1e-8) <= 1e-4);
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = Rng::new(2024);
        for _ in 0..100 {
            let m = 1 + rng.below(3);
            let k = 1 + rng.below(3);
            let n = 1 + rng.below(3);
            check_op(
                vec![random(&mut rng, &[m, k]), random(&mut rng, &[k, n])],
                &|t, v| t.matmul(v[0], v[1]),
                &mut rng,
            );
            check_op(vec![random(&mut rng, &[m, k])], &|t, v| t.transpose(v[0]), &mut rng);
            check_op(
                vec![random(&mut rng, &[m, k]), random(&mut rng, &[m, k])],
                &|t, v| {
                    let a = t.add(v[0], v[1])?;
                    let b = t.sub(a, v[1])?;
                    let c = t.mul(b, v[1])?;
                    Ok(t.scale(c, -0.7))
                },
                &mut rng,
            );
            check_op(
                vec![random(&mut rng, &[m, k]), random(&mut rng, &[k])],
                &|t, v| t.add_row(v[0], v[1]),
                &mut rng,
            );
            check_op(
                vec![random(&mut rng, &[m, k]), random(&mut rng, &[m])],
                &|t, v| t.scale_rows(v[0], v[1]),
                &mut rng,
            );
            check_op(
                vec![random(&mut rng, &[k]), random(&mut rng, &[])],
                &|t, v| t.scale_by(v[0], v[1]),
                &mut rng,
            );
            check_op(vec![random(&mut rng, &[n])], &|t, v| Ok(t.tanh(v[0])), &mut rng);
            check_op(
                vec![random(&mut rng, &[n]).map(|x| x.abs() + 0.5)],
                &|t, v| Ok(t.log(v[0])),
                &mut rng,
            );
            let tau = 0.3 + rng.unit();
            check_op(vec![random(&mut rng, &[n + 1])], &move |t, v| t.softmax(v[0], tau), &mut rng);
            check_op(vec![random(&mut rng, &[n + 1])], &|t, v| t.log_sum_exp(v[0]), &mut rng);
            check_op(vec![random(&mut rng, &[m, k])], &|t, v| Ok(t.sum(v[0])), &mut rng);
            check_op(
                vec![random(&mut rng, &[m, k])],
                &move |t, v| t.reshape(v[0], &[m * k]),
                &mut rng,
            );
            check_op(
                vec![random(&mut rng, &[k]), random(&mut rng, &[n])],
                &|t, v| t.concat(v),
                &mut rng,
            );
            check_op(
                vec![random(&mut rng, &[k]), random(&mut rng, &[k])],
                &|t, v| t.stack_rows(v),
                &mut rng,
            );
            let idx: Vec<usize> = (0..4).map(|_| rng.below(n)).collect();
            check_op(vec![random(&mut rng, &[n])], &move |t, v| t.gather(v[0], &idx), &mut rng);
            let start = rng.below(m);
            check_op(
                vec![random(&mut rng, &[m, k])],
                &move |t, v| t.slice_rows(v[0], start, m),
                &mut rng,
            );
        }
    }

    #[test]
    fn straight_through_passes_gradient_to_soft() {
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::vector(vec![0.2, 0.8]));
        let hard = tape
            .straight_through(x, Tensor::vector(vec![0.0, 1.0]))
            .unwrap();
        assert_eq!(tape.value(hard).data(), &[0.0, 1.0]);
        let w = tape.constant(Tensor::vector(vec![3.0, -1.0]));
        let p = tape.mul(hard, w).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn constants_are_not_recorded_for_backward() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::identity(2));
        let b = tape.constant(Tensor::identity(2));
        let c = tape.matmul(a, b).unwrap();
        assert!(!tape.requires_grad(c));
    }
}
