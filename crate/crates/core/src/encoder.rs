//! Query-conditioned graph encoder and soft-prompt projector.
//!
//! Each layer scores every message `i → j` with
//! `ζ = tanh(α(z_i, q) + γ(z_e, q) − β(z_j, q))`, builds the message from
//! `[z_i; z_j; z_e; q]` and replaces `z_j` by the degree-normalized sum of
//! its ζ-weighted incoming messages. Layers are evaluated for all messages
//! at once: one-hot gather matrices pick message endpoints and an
//! aggregation matrix holding `1/deg` sums them back into nodes. Affine maps
//! over concatenations are computed as sums of row blocks of their weights.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::TextualGraph;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_LAYERS: usize = 3;
pub const MAX_LAYERS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub add_self_loops: bool,
    pub bidirectional: bool,
}

impl EncoderConfig {
    pub fn new(num_layers: usize, hidden: usize) -> Result<Self> {
        let c = Self {
            num_layers,
            hidden,
            add_self_loops: true,
            bidirectional: true,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_LAYERS).contains(&self.num_layers) {
            return Err(Error::Parameter(format!(
                "encoder layers must be in 1..={MAX_LAYERS}, got {}",
                self.num_layers
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Parameter("encoder hidden size must be positive".into()));
        }
        Ok(())
    }
}

pub fn layer_param(l: usize, part: &str) -> String {
    format!("encoder.layer{l}.{part}")
}

/// Bound parameters of one encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub w_alpha: Var,
    pub b_alpha: Var,
    pub w_beta: Var,
    pub b_beta: Var,
    pub w_gamma: Var,
    pub b_gamma: Var,
    pub w_msg: Var,
    pub b_msg: Var,
    pub hidden: usize,
    pub edge_dim: usize,
    pub query_dim: usize,
}

const LAYER_PARTS: [&str; 8] = [
    "W_alpha", "b_alpha", "W_beta", "b_beta", "W_gamma", "b_gamma", "W_msg", "b_msg",
];

impl EncoderLayer {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        l: usize,
        hidden: usize,
        edge_dim: usize,
        query_dim: usize,
        scale: f64,
    ) {
        let shapes: [Vec<usize>; 8] = [
            vec![hidden + query_dim, 1],
            vec![1],
            vec![hidden + query_dim, 1],
            vec![1],
            vec![edge_dim + query_dim, 1],
            vec![1],
            vec![2 * hidden + edge_dim + query_dim, hidden],
            vec![hidden],
        ];
        for (part, shape) in LAYER_PARTS.iter().zip(shapes) {
            store.init_normal(rng, &layer_param(l, part), &shape, scale);
        }
    }

    /// Binds layer `l` and checks its shapes against the given sizes.
    pub fn bind(
        tape: &mut Tape,
        store: &ParamStore,
        l: usize,
        hidden: usize,
        edge_dim: usize,
        query_dim: usize,
    ) -> Result<Self> {
        let expect: [Vec<usize>; 8] = [
            vec![hidden + query_dim, 1],
            vec![1],
            vec![hidden + query_dim, 1],
            vec![1],
            vec![edge_dim + query_dim, 1],
            vec![1],
            vec![2 * hidden + edge_dim + query_dim, hidden],
            vec![hidden],
        ];
        let mut vars = Vec::with_capacity(8);
        for (part, shape) in LAYER_PARTS.iter().zip(&expect) {
            let name = layer_param(l, part);
            let got = store.get(&name)?.shape();
            if got != shape.as_slice() {
                return Err(Error::Parameter(format!(
                    "{name} has shape {got:?}, expected {shape:?}"
                )));
            }
            vars.push(store.bind(tape, &name)?);
        }
        let [w_alpha, b_alpha, w_beta, b_beta, w_gamma, b_gamma, w_msg, b_msg]: [Var; 8] =
            vars.try_into().expect("eight parts");
        Ok(Self {
            w_alpha,
            b_alpha,
            w_beta,
            b_beta,
            w_gamma,
            b_gamma,
            w_msg,
            b_msg,
            hidden,
            edge_dim,
            query_dim,
        })
    }
}

/// `x · W + b` for a single vector `x`; `W` is `[len(x), k]`, result `[k]`.
fn affine_vec(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let n = tape.value(x).len();
    let k = tape.value(w).cols();
    let row = tape.reshape(x, &[1, n])?;
    let y = tape.matmul(row, w)?;
    let y = tape.reshape(y, &[k])?;
    tape.add(y, b)
}

/// The attention weight of one message `v_i → v_j` carried by edge `e`.
pub fn edge_attention(
    tape: &mut Tape,
    layer: &EncoderLayer,
    z_vi: Var,
    z_vj: Var,
    z_e: Var,
    q: Var,
) -> Result<Var> {
    let check = |tape: &Tape, v: Var, n: usize| {
        let s = tape.value(v).shape();
        if s != [n] {
            Err(Error::dim("edge_attention", &[n], s))
        } else {
            Ok(())
        }
    };
    check(tape, z_vi, layer.hidden)?;
    check(tape, z_vj, layer.hidden)?;
    check(tape, z_e, layer.edge_dim)?;
    check(tape, q, layer.query_dim)?;
    let xi = tape.concat(&[z_vi, q])?;
    let xj = tape.concat(&[z_vj, q])?;
    let xe = tape.concat(&[z_e, q])?;
    let alpha = affine_vec(tape, xi, layer.w_alpha, layer.b_alpha)?;
    let beta = affine_vec(tape, xj, layer.w_beta, layer.b_beta)?;
    let gamma = affine_vec(tape, xe, layer.w_gamma, layer.b_gamma)?;
    let s = tape.add(alpha, gamma)?;
    let s = tape.sub(s, beta)?;
    let zeta = tape.tanh(s);
    tape.reshape(zeta, &[])
}

/// Message list of a subgraph and the constant matrices that route it.
#[derive(Debug, Clone, PartialEq)]
pub struct MessagePlan {
    pub num_nodes: usize,
    /// `(source, destination, triple)`; self-loop messages carry no triple.
    pub messages: Vec<(usize, usize, Option<usize>)>,
    pub degree: Vec<usize>,
    gather_src: Tensor,
    gather_dst: Tensor,
    aggregate: Tensor,
}

impl MessagePlan {
    /// Triples in id order give `head → tail` and, when bidirectional,
    /// `tail → head`; a triple looping on one node gives one message.
    /// Self-loop messages follow, one per node.
    pub fn new(graph: &TextualGraph, config: &EncoderConfig) -> Result<Self> {
        let n = graph.num_entities();
        let mut messages = Vec::new();
        for (t, tr) in graph.triples().iter().enumerate() {
            messages.push((tr.head, tr.tail, Some(t)));
            if config.bidirectional && tr.head != tr.tail {
                messages.push((tr.tail, tr.head, Some(t)));
            }
        }
        if config.add_self_loops {
            messages.extend((0..n).map(|v| (v, v, None)));
        }
        let mut degree = vec![0; n];
        for &(_, j, _) in &messages {
            degree[j] += 1;
        }
        if let Some(v) = degree.iter().position(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "node {v} receives no messages; enable self-loops"
            )));
        }
        let m = messages.len();
        let mut gather_src = vec![0.0; m * n];
        let mut gather_dst = vec![0.0; m * n];
        let mut aggregate = vec![0.0; n * m];
        for (k, &(i, j, _)) in messages.iter().enumerate() {
            gather_src[k * n + i] = 1.0;
            gather_dst[k * n + j] = 1.0;
            aggregate[j * m + k] = 1.0 / degree[j] as f64;
        }
        Ok(Self {
            num_nodes: n,
            messages,
            degree,
            gather_src: Tensor::matrix(m, n, gather_src)?,
            gather_dst: Tensor::matrix(m, n, gather_dst)?,
            aggregate: Tensor::matrix(n, m, aggregate)?,
        })
    }

    pub fn num_messages(&self) -> usize {
        self.messages.len()
    }

    /// Edge features per message (`[M, d_e]`), zero rows for self-loops.
    pub fn message_features(&self, edge_feats: &Tensor) -> Result<Tensor> {
        let d = edge_feats.cols();
        let mut data = vec![0.0; self.messages.len() * d];
        for (k, &(_, _, t)) in self.messages.iter().enumerate() {
            if let Some(t) = t {
                if t >= edge_feats.rows() {
                    return Err(Error::Range {
                        what: "edge feature",
                        index: t,
                        len: edge_feats.rows(),
                    });
                }
                data[k * d..(k + 1) * d].copy_from_slice(edge_feats.row(t));
            }
        }
        Tensor::matrix(self.messages.len(), d, data)
    }
}

/// `X · W[rows] ` for a row block of `W`.
fn block(tape: &mut Tape, x: Var, w: Var, start: usize, end: usize) -> Result<Var> {
    let wb = tape.slice_rows(w, start, end)?;
    tape.matmul(x, wb)
}

/// `q · W[rows]` as a vector, for broadcasting over rows.
fn query_block(tape: &mut Tape, q_row: Var, w: Var, start: usize, end: usize) -> Result<Var> {
    let y = block(tape, q_row, w, start, end)?;
    let k = tape.value(y).cols();
    tape.reshape(y, &[k])
}

/// One round of message passing. `states` is `[n, d_h]`, `msg_feats` the
/// output of [`MessagePlan::message_features`], `q` is `[d_q]`.
pub fn layer_forward(
    tape: &mut Tape,
    layer: &EncoderLayer,
    plan: &MessagePlan,
    states: Var,
    msg_feats: &Tensor,
    q: Var,
) -> Result<Var> {
    let (h, e, dq) = (layer.hidden, layer.edge_dim, layer.query_dim);
    let ss = tape.value(states).shape().to_vec();
    if ss != [plan.num_nodes, h] {
        return Err(Error::dim("layer_forward states", &[plan.num_nodes, h], &ss));
    }
    if msg_feats.shape() != [plan.num_messages(), e] {
        return Err(Error::dim(
            "layer_forward edge features",
            &[plan.num_messages(), e],
            msg_feats.shape(),
        ));
    }
    if tape.value(q).shape() != [dq] {
        return Err(Error::dim("layer_forward query", &[dq], tape.value(q).shape()));
    }
    let q_row = tape.reshape(q, &[1, dq])?;
    let g_src = tape.constant(plan.gather_src.clone());
    let g_dst = tape.constant(plan.gather_dst.clone());
    let agg = tape.constant(plan.aggregate.clone());
    let ef = tape.constant(msg_feats.clone());

    // per-node α and β, per-message γ
    let node_score = |tape: &mut Tape, w: Var, b: Var| -> Result<Var> {
        let s = block(tape, states, w, 0, h)?;
        let sq = query_block(tape, q_row, w, h, h + dq)?;
        let s = tape.add_row(s, sq)?;
        tape.add_row(s, b)
    };
    let alpha = node_score(tape, layer.w_alpha, layer.b_alpha)?;
    let beta = node_score(tape, layer.w_beta, layer.b_beta)?;
    let gamma = block(tape, ef, layer.w_gamma, 0, e)?;
    let gq = query_block(tape, q_row, layer.w_gamma, e, e + dq)?;
    let gamma = tape.add_row(gamma, gq)?;
    let gamma = tape.add_row(gamma, layer.b_gamma)?;
    let a_src = tape.matmul(g_src, alpha)?;
    let b_dst = tape.matmul(g_dst, beta)?;
    let s = tape.add(a_src, gamma)?;
    let s = tape.sub(s, b_dst)?;
    let zeta = tape.tanh(s);
    let zeta = tape.reshape(zeta, &[plan.num_messages()])?;

    // messages from [z_i; z_j; z_e; q]
    let from_src = block(tape, states, layer.w_msg, 0, h)?;
    let from_src = tape.matmul(g_src, from_src)?;
    let from_dst = block(tape, states, layer.w_msg, h, 2 * h)?;
    let from_dst = tape.matmul(g_dst, from_dst)?;
    let from_edge = block(tape, ef, layer.w_msg, 2 * h, 2 * h + e)?;
    let from_q = query_block(tape, q_row, layer.w_msg, 2 * h + e, 2 * h + e + dq)?;
    let msg = tape.add(from_src, from_dst)?;
    let msg = tape.add(msg, from_edge)?;
    let msg = tape.add_row(msg, from_q)?;
    let msg = tape.add_row(msg, layer.b_msg)?;
    let weighted = tape.scale_rows(msg, zeta)?;
    tape.matmul(agg, weighted)
}

/// Input map plus message-passing layers.
#[derive(Debug, Clone)]
pub struct GraphEncoder {
    pub config: EncoderConfig,
    pub w_in: Var,
    pub b_in: Var,
    pub layers: Vec<EncoderLayer>,
}

impl GraphEncoder {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        config: &EncoderConfig,
        input_dim: usize,
        edge_dim: usize,
        query_dim: usize,
        scale: f64,
    ) -> Result<()> {
        config.validate()?;
        store.init_normal(rng, "encoder.input.W", &[input_dim, config.hidden], scale);
        store.init_normal(rng, "encoder.input.b", &[config.hidden], scale);
        for l in 0..config.num_layers {
            EncoderLayer::init(store, rng, l, config.hidden, edge_dim, query_dim, scale);
        }
        Ok(())
    }

    pub fn bind(
        tape: &mut Tape,
        store: &ParamStore,
        config: &EncoderConfig,
        edge_dim: usize,
        query_dim: usize,
    ) -> Result<Self> {
        config.validate()?;
        let w_in = store.bind(tape, "encoder.input.W")?;
        let b_in = store.bind(tape, "encoder.input.b")?;
        let ws = tape.value(w_in).shape().to_vec();
        if ws.len() != 2 || ws[1] != config.hidden {
            return Err(Error::dim("encoder.input.W", &[0, config.hidden], &ws));
        }
        let layers = (0..config.num_layers)
            .map(|l| EncoderLayer::bind(tape, store, l, config.hidden, edge_dim, query_dim))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: *config,
            w_in,
            b_in,
            layers,
        })
    }

    /// Final node states `[n, d_h]`.
    pub fn node_states(
        &self,
        tape: &mut Tape,
        graph: &TextualGraph,
        node_feats: &Tensor,
        edge_feats: &Tensor,
        q: Var,
    ) -> Result<Var> {
        let n = graph.num_entities();
        if n == 0 {
            return Err(Error::Contract("cannot encode an empty subgraph".into()));
        }
        if node_feats.rank() != 2 || node_feats.rows() != n {
            return Err(Error::dim("encoder node features", &[n, 0], node_feats.shape()));
        }
        let plan = MessagePlan::new(graph, &self.config)?;
        let edge_dim = self.layers.first().map_or(0, |l| l.edge_dim);
        let edge_feats = if graph.num_triples() == 0 {
            Tensor::zeros(&[0, edge_dim])
        } else {
            edge_feats.clone()
        };
        let msg_feats = plan.message_features(&edge_feats)?;
        let x = tape.constant(node_feats.clone());
        let z = tape.matmul(x, self.w_in)?;
        let mut z = tape.add_row(z, self.b_in)?;
        for layer in &self.layers {
            z = layer_forward(tape, layer, &plan, z, &msg_feats, q)?;
        }
        Ok(z)
    }
}

/// Mean of the rows of `states` as a vector.
pub fn mean_pool(tape: &mut Tape, states: Var) -> Result<Var> {
    let (n, d) = {
        let s = tape.value(states);
        (s.rows(), s.cols())
    };
    if n == 0 {
        return Err(Error::Contract("mean pooling over no nodes".into()));
    }
    let ones = tape.constant(Tensor::filled(&[1, n], 1.0 / n as f64));
    let z = tape.matmul(ones, states)?;
    tape.reshape(z, &[d])
}

/// Encodes a subgraph into `z_S` (`[d_h]`).
pub fn encode_subgraph(
    tape: &mut Tape,
    encoder: &GraphEncoder,
    graph: &TextualGraph,
    node_feats: &Tensor,
    edge_feats: &Tensor,
    q: Var,
) -> Result<Var> {
    let states = encoder.node_states(tape, graph, node_feats, edge_feats, q)?;
    mean_pool(tape, states)
}

/// Two affine maps with tanh between, reshaped into prompt vectors.
#[derive(Debug, Clone, Copy)]
pub struct SoftPromptProjector {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub num_vectors: usize,
}

impl SoftPromptProjector {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut Rng,
        hidden: usize,
        prompt_dim: usize,
        num_vectors: usize,
        scale: f64,
    ) {
        store.init_normal(rng, "projector.W1", &[hidden, hidden], scale);
        store.init_normal(rng, "projector.b1", &[hidden], scale);
        store.init_normal(rng, "projector.W2", &[hidden, num_vectors * prompt_dim], scale);
        store.init_normal(rng, "projector.b2", &[num_vectors * prompt_dim], scale);
    }

    pub fn bind(tape: &mut Tape, store: &ParamStore, num_vectors: usize) -> Result<Self> {
        let w2 = store.get("projector.W2")?;
        if num_vectors == 0 || w2.rank() != 2 || w2.cols() % num_vectors != 0 {
            return Err(Error::Parameter(format!(
                "projector output {:?} does not split into {num_vectors} vectors",
                w2.shape()
            )));
        }
        Ok(Self {
            w1: store.bind(tape, "projector.W1")?,
            b1: store.bind(tape, "projector.b1")?,
            w2: store.bind(tape, "projector.W2")?,
            b2: store.bind(tape, "projector.b2")?,
            num_vectors,
        })
    }

    pub fn prompt_dim(&self, tape: &Tape) -> usize {
        tape.value(self.w2).cols() / self.num_vectors
    }
}

/// `p_graph = W2 · tanh(W1 · z + b1) + b2` as `[num_vectors, d_p]`.
pub fn project_soft_prompt(tape: &mut Tape, proj: &SoftPromptProjector, z: Var) -> Result<Var> {
    let w1 = tape.value(proj.w1).shape().to_vec();
    if tape.value(z).shape() != [w1[0]] {
        return Err(Error::dim("project_soft_prompt", &w1, tape.value(z).shape()));
    }
    let hidden = affine_vec(tape, z, proj.w1, proj.b1)?;
    let hidden = tape.tanh(hidden);
    let out = affine_vec(tape, hidden, proj.w2, proj.b2)?;
    let dp = proj.prompt_dim(tape);
    tape.reshape(out, &[proj.num_vectors, dp])
}
