//! Entity and relation experts.
//!
//! Both experts score graph elements against the query with a bilinear form
//! `h_qᵀ W_r h_i`, turn the scores into a distribution with a Gumbel-Softmax
//! selector and summarize the graph as the expectation of the element
//! vectors under that distribution. Triples are first projected from the
//! concatenation `[h_head; h_rel; h_tail]` into the entity space.

use crate::autodiff::{Tape, Var};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::TextualGraph;
use crate::rng::{gumbel_sample, UniformSource};
use crate::tensor::Tensor;

pub const DEFAULT_TOP_K: usize = 20;

/// `φ_i = h_qᵀ W h_i` with a square learnable `W`.
#[derive(Debug, Clone, Copy)]
pub struct BilinearScorer {
    pub weight: Var,
}

impl BilinearScorer {
    pub fn new(weight: Var) -> Self {
        Self { weight }
    }

    /// Scores the rows of `elements` (`[n, d]`) against `h_q` (`[d]`).
    pub fn score(&self, tape: &mut Tape, h_q: Var, elements: Var) -> Result<Var> {
        let (n, d) = {
            let e = tape.value(elements);
            if e.rank() != 2 || e.rows() == 0 {
                return Err(Error::Parameter("bilinear score over an empty element list".into()));
            }
            (e.rows(), e.cols())
        };
        let w = tape.value(self.weight).shape().to_vec();
        let q = tape.value(h_q).shape().to_vec();
        if w != [d, d] || q != [d] {
            return Err(Error::dim("bilinear score", &w, &q));
        }
        let q_row = tape.reshape(h_q, &[1, d])?;
        let u = tape.matmul(q_row, self.weight)?;
        let u_col = tape.reshape(u, &[d, 1])?;
        let phi = tape.matmul(elements, u_col)?;
        tape.reshape(phi, &[n])
    }
}

/// `h = W_t [h_h; h_r; h_t]` with `W_t` of shape `[d, 3d]`.
#[derive(Debug, Clone, Copy)]
pub struct TripleProjector {
    pub weight: Var,
}

impl TripleProjector {
    pub fn new(weight: Var) -> Self {
        Self { weight }
    }

    pub fn project(&self, tape: &mut Tape, h_h: Var, h_r: Var, h_t: Var) -> Result<Var> {
        let d = tape.value(h_h).len();
        for v in [h_r, h_t] {
            if tape.value(v).len() != d {
                return Err(Error::dim("project_triple", &[d], tape.value(v).shape()));
            }
        }
        let x = tape.concat(&[h_h, h_r, h_t])?;
        let x = tape.reshape(x, &[1, 3 * d])?;
        let rows = self.project_rows(tape, x)?;
        tape.reshape(rows, &[d])
    }

    /// Projects every row of `x` (`[n, 3d]`) to `[n, d]`.
    pub fn project_rows(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let ws = tape.value(self.weight).shape().to_vec();
        let xs = tape.value(x).shape().to_vec();
        if ws.len() != 2 || xs.len() != 2 || ws[1] != xs[1] || ws[1] != 3 * ws[0] {
            return Err(Error::dim("project_triple", &ws, &xs));
        }
        let wt = tape.transpose(self.weight)?;
        tape.matmul(x, wt)
    }
}

/// Gumbel-Softmax selection with an annealed temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelSelector {
    /// Current temperature.
    pub tau: f64,
    pub tau0: f64,
    pub tau_min: f64,
    pub anneal_rate: f64,
    /// Emit a straight-through one-hot sample instead of the soft distribution.
    pub hard: bool,
    /// Add Gumbel noise to the scores.
    pub noise: bool,
}

impl Default for GumbelSelector {
    fn default() -> Self {
        Self {
            tau: 1.0,
            tau0: 1.0,
            tau_min: 0.05,
            anneal_rate: 0.9,
            hard: false,
            noise: false,
        }
    }
}

/// Output of [`GumbelSelector::select`].
#[derive(Debug, Clone, Copy)]
pub struct Selection {
    /// `(φ + g) / τ`.
    pub logits: Var,
    /// Probability vector (one-hot in hard mode).
    pub weights: Var,
    pub sampled: Option<usize>,
}

impl GumbelSelector {
    pub fn new(tau0: f64, tau_min: f64, anneal_rate: f64) -> Result<Self> {
        if !(tau_min > 0.0) || !(tau0 >= tau_min) {
            return Err(Error::Parameter(format!(
                "need tau0 >= tau_min > 0, got tau0={tau0} tau_min={tau_min}"
            )));
        }
        if !(anneal_rate > 0.0 && anneal_rate <= 1.0) {
            return Err(Error::Parameter(format!(
                "anneal rate must lie in (0, 1], got {anneal_rate}"
            )));
        }
        Ok(Self {
            tau: tau0,
            tau0,
            tau_min,
            anneal_rate,
            hard: false,
            noise: false,
        })
    }

    /// Fixed temperature, no annealing.
    pub fn fixed(tau: f64) -> Result<Self> {
        Self::new(tau, tau, 1.0)
    }

    /// `max(τ₀ · rate^steps, τ_min)`.
    pub fn tau_after(&self, steps: usize) -> f64 {
        let exp = i32::try_from(steps).unwrap_or(i32::MAX);
        (self.tau0 * self.anneal_rate.powi(exp)).max(self.tau_min)
    }

    pub fn anneal_to(&mut self, steps: usize) {
        self.tau = self.tau_after(steps);
    }

    pub fn select<R: UniformSource + ?Sized>(
        &self,
        tape: &mut Tape,
        phi: Var,
        rng: &mut R,
    ) -> Result<Selection> {
        let n = tape.value(phi).len();
        if n == 0 {
            return Err(Error::Parameter("selection over zero elements".into()));
        }
        let perturbed = if self.noise {
            let g = tape.constant(gumbel_sample(rng, n));
            tape.add(phi, g)?
        } else {
            phi
        };
        let logits = tape.scale(perturbed, 1.0 / self.tau);
        let soft = tape.softmax(logits, 1.0)?;
        if !self.hard {
            return Ok(Selection {
                logits,
                weights: soft,
                sampled: None,
            });
        }
        let idx = tape.value(soft).argmax().expect("non-empty");
        let mut one_hot = vec![0.0; n];
        one_hot[idx] = 1.0;
        let weights = tape.straight_through(soft, Tensor::vector(one_hot))?;
        Ok(Selection {
            logits,
            weights,
            sampled: Some(idx),
        })
    }
}

/// `Σ_i p_i · h_i` for `p` of length `n` and `elements` of shape `[n, d]`.
pub fn aggregate(tape: &mut Tape, p: Var, elements: Var) -> Result<Var> {
    let n = tape.value(p).len();
    let es = tape.value(elements).shape().to_vec();
    if es.len() != 2 || es[0] != n {
        return Err(Error::dim("aggregate", &[n], &es));
    }
    let row = tape.reshape(p, &[1, n])?;
    let out = tape.matmul(row, elements)?;
    tape.reshape(out, &[es[1]])
}

/// One expert's contribution for a query.
#[derive(Debug, Clone)]
pub struct ExpertOutput {
    /// Query-specific graph summary `h̃_G`.
    pub representation: Var,
    /// Noise-free relevance scores `φ`.
    pub scores: Var,
    /// Selection logits `(φ + g) / τ`.
    pub logits: Var,
    pub weights: Var,
    /// The `k` highest-weight element ids, descending by weight, ties by id.
    pub top_items: Vec<(usize, f64)>,
}

/// Top `k` entries of a weight vector, descending, ties broken by index.
pub fn top_k_weights(weights: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut items: Vec<(usize, f64)> = weights.iter().copied().enumerate().collect();
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    items.truncate(k);
    items
}

fn clamp_k(k: usize, n: usize, what: &str) -> Result<usize> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if k > n {
        log::debug!("k={k} exceeds {n} {what}; clamping");
    }
    Ok(k.min(n))
}

fn finish(
    tape: &mut Tape,
    selector: &GumbelSelector,
    phi: Var,
    elements: Var,
    k: usize,
    rng: &mut (impl UniformSource + ?Sized),
) -> Result<ExpertOutput> {
    let sel = selector.select(tape, phi, rng)?;
    let representation = aggregate(tape, sel.weights, elements)?;
    let top_items = top_k_weights(tape.value(sel.weights).data(), k);
    Ok(ExpertOutput {
        representation,
        scores: phi,
        logits: sel.logits,
        weights: sel.weights,
        top_items,
    })
}

/// Scores every entity of the graph against the query.
#[allow(clippy::too_many_arguments)]
pub fn run_entity_expert<R: UniformSource + ?Sized>(
    tape: &mut Tape,
    h_q: Var,
    graph: &TextualGraph,
    table: &EmbeddingTable,
    scorer: &BilinearScorer,
    selector: &GumbelSelector,
    k: usize,
    rng: &mut R,
) -> Result<ExpertOutput> {
    let n = graph.num_entities();
    if n == 0 {
        return Err(Error::Parameter("entity expert on an empty graph".into()));
    }
    let k = clamp_k(k, n, "entities")?;
    let elements = tape.constant(table.nodes().clone());
    let phi = scorer.score(tape, h_q, elements)?;
    finish(tape, selector, phi, elements, k, rng)
}

/// `[h_head; h_rel; h_tail]` for every triple, as an `[n, 3d]` matrix.
pub fn triple_inputs(graph: &TextualGraph, table: &EmbeddingTable) -> Result<Tensor> {
    let d = table.dim();
    let mut data = Vec::with_capacity(graph.num_triples() * 3 * d);
    for t in graph.triples() {
        data.extend_from_slice(table.node(t.head));
        data.extend_from_slice(table.relation(t.relation));
        data.extend_from_slice(table.node(t.tail));
    }
    Tensor::matrix(graph.num_triples(), 3 * d, data)
}

/// Scores every (projected) triple of the graph against the query.
#[allow(clippy::too_many_arguments)]
pub fn run_relation_expert<R: UniformSource + ?Sized>(
    tape: &mut Tape,
    h_q: Var,
    graph: &TextualGraph,
    table: &EmbeddingTable,
    projector: &TripleProjector,
    scorer: &BilinearScorer,
    selector: &GumbelSelector,
    k: usize,
    rng: &mut R,
) -> Result<ExpertOutput> {
    let n = graph.num_triples();
    if n == 0 {
        return Err(Error::Parameter("relation expert on a graph without triples".into()));
    }
    let k = clamp_k(k, n, "triples")?;
    let x = tape.constant(triple_inputs(graph, table)?);
    let elements = projector.project_rows(tape, x)?;
    let phi = scorer.score(tape, h_q, elements)?;
    finish(tape, selector, phi, elements, k, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use crate::graph::{Entity, RelationType, Triple};
    use crate::rng::Rng;

    struct NoNoise;
    impl UniformSource for NoNoise {
        fn next_uniform(&mut self) -> f64 {
            std::f64::consts::E.recip()
        }
    }

    fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn oracle_softmax(x: &[f64]) -> Vec<f64> {
        let m = x.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    fn random_graph(rng: &mut Rng, n: usize, m: usize) -> TextualGraph {
        let entities = (0..n)
            .map(|i| Entity {
                id: i,
                text: format!("entity {i} w{}", rng.below(1000)),
            })
            .collect();
        let relations = (0..3)
            .map(|i| RelationType {
                id: i,
                text: format!("rel {i}"),
            })
            .collect();
        let triples = (0..m)
            .map(|i| Triple {
                head: i % n,
                relation: i % 3,
                tail: (i * 7 + 1) % n,
                edge_text: None,
            })
            .collect();
        TextualGraph::new(entities, relations, triples).unwrap()
    }

    #[test]
    fn selector_projection_returns_head() {
        let d = 3;
        let mut w = Tensor::zeros(&[d, 3 * d]);
        for i in 0..d {
            w.data_mut()[i * 3 * d + i] = 1.0;
        }
        let mut tape = Tape::new();
        let p = TripleProjector::new(tape.param("W_t", &w));
        let hh = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let hr = tape.constant(Tensor::vector(vec![4.0, 5.0, 6.0]));
        let ht = tape.constant(Tensor::vector(vec![7.0, 8.0, 9.0]));
        let out = p.project(&mut tape, hh, hr, ht).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0]);
        let z = tape.constant(Tensor::zeros(&[d]));
        let out = p.project(&mut tape, z, z, z).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0; 3]);
        let short = tape.constant(Tensor::zeros(&[2]));
        assert!(p.project(&mut tape, hh, short, ht).is_err());
    }

    #[test]
    fn random_projection_matches_loop_oracle() {
        let mut rng = Rng::new(3);
        let d = 4;
        let w = rand_t(&mut rng, &[d, 3 * d]);
        let parts: Vec<Tensor> = (0..3).map(|_| rand_t(&mut rng, &[d])).collect();
        let mut tape = Tape::new();
        let p = TripleProjector::new(tape.constant(w.clone()));
        let vs: Vec<Var> = parts.iter().map(|t| tape.constant(t.clone())).collect();
        let out = p.project(&mut tape, vs[0], vs[1], vs[2]).unwrap();
        let concat: Vec<f64> = parts.iter().flat_map(|t| t.data().to_vec()).collect();
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..3 * d {
                acc += w.data()[i * 3 * d + j] * concat[j];
            }
            assert!((tape.value(out).data()[i] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_identity_cases() {
        let mut tape = Tape::new();
        let s = BilinearScorer::new(tape.constant(Tensor::identity(2)));
        let hq = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let e = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let phi = s.score(&mut tape, hq, e).unwrap();
        assert_eq!(tape.value(phi).data(), &[1.0, 0.0]);
        let empty = tape.constant(Tensor::zeros(&[0, 2]));
        assert!(matches!(s.score(&mut tape, hq, empty), Err(Error::Parameter(_))));
    }

    #[test]
    fn bilinear_matches_two_step_oracle() {
        let mut rng = Rng::new(9);
        let (n, d) = (5, 4);
        let w = rand_t(&mut rng, &[d, d]);
        let q = rand_t(&mut rng, &[d]);
        let e = rand_t(&mut rng, &[n, d]);
        let mut tape = Tape::new();
        let s = BilinearScorer::new(tape.constant(w.clone()));
        let (qv, ev) = (tape.constant(q.clone()), tape.constant(e.clone()));
        let phi = s.score(&mut tape, qv, ev).unwrap();
        for i in 0..n {
            let mut wh = vec![0.0; d];
            for a in 0..d {
                for b in 0..d {
                    wh[a] += w.data()[a * d + b] * e.row(i)[b];
                }
            }
            let expect: f64 = (0..d).map(|a| q.data()[a] * wh[a]).sum();
            assert!((tape.value(phi).data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_selection_is_tempered_softmax() {
        let mut tape = Tape::new();
        let phi = tape.constant(Tensor::vector(vec![0.5, 0.5, 0.5]));
        let mut sel = GumbelSelector::fixed(1.0).unwrap();
        sel.noise = true;
        // u = 1/e gives zero noise
        let out = sel.select(&mut tape, phi, &mut NoNoise).unwrap();
        for &p in tape.value(out.weights).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let phi_vals = [1.3, -0.2, 0.7, 2.0];
        let sel = GumbelSelector::fixed(0.4).unwrap();
        let phi = tape.constant(Tensor::vector(phi_vals.to_vec()));
        let out = sel.select(&mut tape, phi, &mut Rng::new(0)).unwrap();
        let expect = oracle_softmax(&phi_vals.map(|x| x / 0.4));
        for (a, b) in tape.value(out.weights).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn shift_invariance() {
        let phi_vals = vec![0.3, -1.0, 2.2];
        let sel = GumbelSelector::fixed(0.7).unwrap();
        let base = {
            let mut tape = Tape::new();
            let phi = tape.constant(Tensor::vector(phi_vals.clone()));
            let out = sel.select(&mut tape, phi, &mut Rng::new(0)).unwrap();
            tape.value(out.weights).clone()
        };
        for c in [-10.0, 10.0] {
            let mut tape = Tape::new();
            let phi = tape.constant(Tensor::vector(phi_vals.iter().map(|x| x + c).collect()));
            let out = sel.select(&mut tape, phi, &mut Rng::new(0)).unwrap();
            for (a, b) in tape.value(out.weights).data().iter().zip(base.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn low_temperature_sampling_prefers_dominant_score() {
        let mut sel = GumbelSelector::new(1.0, 0.05, 0.5).unwrap();
        sel.anneal_to(100);
        assert_eq!(sel.tau, 0.05);
        sel.noise = true;
        sel.hard = true;
        let mut rng = Rng::new(17);
        let mut hits = 0;
        for _ in 0..10_000 {
            let mut tape = Tape::new();
            let phi = tape.constant(Tensor::vector(vec![5.0, 0.0, 0.0]));
            if sel.select(&mut tape, phi, &mut rng).unwrap().sampled == Some(0) {
                hits += 1;
            }
        }
        // Gumbel-max picks index 0 with probability e^5 / (e^5 + 2) whatever τ is
        let p0 = 5f64.exp() / (5f64.exp() + 2.0);
        let freq = f64::from(hits) / 10_000.0;
        assert!((freq - p0).abs() < 0.005, "{freq} vs {p0}");
    }

    #[test]
    fn annealing_schedule_is_monotone_with_floor() {
        let sel = GumbelSelector::new(1.0, 0.05, 0.9).unwrap();
        let mut prev = f64::INFINITY;
        for t in 0..100 {
            let tau = sel.tau_after(t);
            assert!(tau <= prev);
            assert_eq!(tau, (0.9f64.powi(t as i32)).max(0.05));
            prev = tau;
        }
        assert!(GumbelSelector::new(0.01, 0.05, 0.9).is_err());
        assert!(GumbelSelector::new(1.0, 0.05, 1.5).is_err());
    }

    #[test]
    fn aggregate_cases() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = tape.constant(Tensor::vector(vec![0.0, 1.0, 0.0]));
        let out = aggregate(&mut tape, p, e).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);
        let same = tape.constant(Tensor::matrix(3, 2, vec![7.0, -1.0, 7.0, -1.0, 7.0, -1.0]).unwrap());
        let u = tape.constant(Tensor::vector(vec![1.0 / 3.0; 3]));
        let out = aggregate(&mut tape, u, same).unwrap();
        for (a, b) in tape.value(out).data().iter().zip([7.0, -1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let short = tape.constant(Tensor::vector(vec![1.0]));
        assert!(aggregate(&mut tape, short, e).is_err());
    }

    #[test]
    fn aggregate_matches_loop_sum() {
        let mut rng = Rng::new(4);
        let e = rand_t(&mut rng, &[6, 3]);
        let p = Tensor::vector(oracle_softmax(rand_t(&mut rng, &[6]).data()));
        let mut tape = Tape::new();
        let (pv, ev) = (tape.constant(p.clone()), tape.constant(e.clone()));
        let out = aggregate(&mut tape, pv, ev).unwrap();
        for j in 0..3 {
            let expect: f64 = (0..6).map(|i| p.data()[i] * e.row(i)[j]).sum();
            assert!((tape.value(out).data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn single_entity_graph() {
        let g = TextualGraph::new(
            vec![Entity {
                id: 0,
                text: "solo".into(),
            }],
            vec![],
            vec![],
        )
        .unwrap();
        let table = EmbeddingTable::from_hash(&g, &HashEmbedder::new(8, 1).unwrap()).unwrap();
        let mut tape = Tape::new();
        let scorer = BilinearScorer::new(tape.param("W", &Tensor::identity(8)));
        let hq = tape.constant(HashEmbedder::new(8, 1).unwrap().embed("question").unwrap());
        let out = run_entity_expert(
            &mut tape,
            hq,
            &g,
            &table,
            &scorer,
            &GumbelSelector::default(),
            20,
            &mut Rng::new(0),
        )
        .unwrap();
        assert_eq!(out.top_items, vec![(0, 1.0)]);
        assert_eq!(tape.value(out.representation).data(), table.node(0));
    }

    #[test]
    fn planted_entity_ranks_first() {
        let mut rng = Rng::new(8);
        let g = random_graph(&mut rng, 12, 10);
        let table = EmbeddingTable::from_hash(&g, &HashEmbedder::new(64, 2).unwrap()).unwrap();
        let planted = 5;
        let mut tape = Tape::new();
        let scorer = BilinearScorer::new(tape.param("W", &Tensor::identity(64)));
        let hq = tape.constant(Tensor::vector(table.node(planted).to_vec()));
        let sel = GumbelSelector::fixed(0.05).unwrap();
        let out = run_entity_expert(&mut tape, hq, &g, &table, &scorer, &sel, 3, &mut rng).unwrap();
        assert_eq!(out.top_items[0].0, planted);
        assert_eq!(out.top_items.len(), 3);
    }

    #[test]
    fn entity_weights_match_end_to_end_oracle() {
        let mut rng = Rng::new(21);
        let g = random_graph(&mut rng, 20, 15);
        let d = 16;
        let table = EmbeddingTable::from_hash(&g, &HashEmbedder::new(d, 3).unwrap()).unwrap();
        let w = rand_t(&mut rng, &[d, d]);
        let q = rand_t(&mut rng, &[d]);
        let tau = 0.8;
        let mut tape = Tape::new();
        let scorer = BilinearScorer::new(tape.param("W", &w));
        let hq = tape.constant(q.clone());
        let sel = GumbelSelector::fixed(tau).unwrap();
        let out = run_entity_expert(&mut tape, hq, &g, &table, &scorer, &sel, 20, &mut rng).unwrap();
        let phi: Vec<f64> = (0..20)
            .map(|i| {
                let h = table.node(i);
                let mut s = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        s += q.data()[a] * w.data()[a * d + b] * h[b];
                    }
                }
                s / tau
            })
            .collect();
        let expect = oracle_softmax(&phi);
        let got = tape.value(out.weights).data();
        for i in 0..20 {
            assert!((got[i] - expect[i]).abs() < 1e-9);
        }
        let sum: f64 = got.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(out.top_items.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn relation_expert_matches_project_score_softmax_oracle() {
        let mut rng = Rng::new(31);
        let g = random_graph(&mut rng, 9, 15);
        let d = 8;
        let table = EmbeddingTable::from_hash(&g, &HashEmbedder::new(d, 3).unwrap()).unwrap();
        let wt = rand_t(&mut rng, &[d, 3 * d]);
        let wr = rand_t(&mut rng, &[d, d]);
        let q = rand_t(&mut rng, &[d]);
        let mut tape = Tape::new();
        let projector = TripleProjector::new(tape.param("W_t", &wt));
        let scorer = BilinearScorer::new(tape.param("W_r", &wr));
        let hq = tape.constant(q.clone());
        let sel = GumbelSelector::fixed(1.0).unwrap();
        let out = run_relation_expert(&mut tape, hq, &g, &table, &projector, &scorer, &sel, 20, &mut rng)
            .unwrap();
        assert_eq!(out.top_items.len(), g.num_triples());
        let phi: Vec<f64> = g
            .triples()
            .iter()
            .map(|t| {
                let x: Vec<f64> = [table.node(t.head), table.relation(t.relation), table.node(t.tail)].concat();
                let h: Vec<f64> = (0..d)
                    .map(|i| (0..3 * d).map(|j| wt.data()[i * 3 * d + j] * x[j]).sum())
                    .collect();
                (0..d)
                    .map(|a| q.data()[a] * (0..d).map(|b| wr.data()[a * d + b] * h[b]).sum::<f64>())
                    .sum()
            })
            .collect();
        let expect = oracle_softmax(&phi);
        for (a, b) in tape.value(out.weights).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn planted_triple_ranks_first() {
        let mut rng = Rng::new(12);
        let g = random_graph(&mut rng, 8, 10);
        let d = 32;
        let table = EmbeddingTable::from_hash(&g, &HashEmbedder::new(d, 3).unwrap()).unwrap();
        let wt = rand_t(&mut rng, &[d, 3 * d]);
        let target = 6;
        let x = triple_inputs(&g, &table).unwrap();
        let projected = x.matmul(&wt.transpose().unwrap()).unwrap();
        let mut tape = Tape::new();
        let projector = TripleProjector::new(tape.param("W_t", &wt));
        let scorer = BilinearScorer::new(tape.param("W_r", &Tensor::identity(d)));
        let hq = tape.constant(Tensor::vector(projected.row(target).to_vec()));
        let sel = GumbelSelector::fixed(0.05).unwrap();
        let out = run_relation_expert(&mut tape, hq, &g, &table, &projector, &scorer, &sel, 5, &mut rng)
            .unwrap();
        assert_eq!(out.top_items[0].0, target);
    }

    #[test]
    fn single_triple_gets_all_weight() {
        let g = TextualGraph::new(
            vec![
                Entity { id: 0, text: "a".into() },
                Entity { id: 1, text: "b".into() },
            ],
            vec![RelationType { id: 0, text: "r".into() }],
            vec![Triple { head: 0, relation: 0, tail: 1, edge_text: None }],
        )
        .unwrap();
        let table = EmbeddingTable::from_hash(&g, &HashEmbedder::new(4, 1).unwrap()).unwrap();
        let mut rng = Rng::new(1);
        let mut tape = Tape::new();
        let projector = TripleProjector::new(tape.param("W_t", &rand_t(&mut rng, &[4, 12])));
        let scorer = BilinearScorer::new(tape.param("W_r", &rand_t(&mut rng, &[4, 4])));
        let hq = tape.constant(rand_t(&mut rng, &[4]));
        let out = run_relation_expert(
            &mut tape,
            hq,
            &g,
            &table,
            &projector,
            &scorer,
            &GumbelSelector::default(),
            20,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.top_items, vec![(0, 1.0)]);
    }

    #[test]
    fn soft_selection_gradient_matches_finite_differences() {
        let mut rng = Rng::new(77);
        let (n, d) = (5, 3);
        let e = rand_t(&mut rng, &[n, d]);
        let q = rand_t(&mut rng, &[d]);
        let w = rand_t(&mut rng, &[d, d]);
        let r = rand_t(&mut rng, &[d]);
        let sel = GumbelSelector::fixed(0.6).unwrap();
        let f = |w: &Tensor| -> (f64, Tensor) {
            let mut tape = Tape::new();
            let scorer = BilinearScorer::new(tape.param("W", w));
            let (qv, ev, rv) = (tape.constant(q.clone()), tape.constant(e.clone()), tape.constant(r.clone()));
            let phi = scorer.score(&mut tape, qv, ev).unwrap();
            let s = sel.select(&mut tape, phi, &mut Rng::new(0)).unwrap();
            let h = aggregate(&mut tape, s.weights, ev).unwrap();
            let prod = tape.mul(h, rv).unwrap();
            let loss = tape.sum(prod);
            let g = tape.backward(loss).unwrap();
            (tape.value(loss).item().unwrap(), g.get("W").unwrap().clone())
        };
        let (_, analytic) = f(&w);
        let h = 1e-5;
        for j in 0..w.len() {
            let mut p = w.clone();
            p.data_mut()[j] += h;
            let mut m = w.clone();
            m.data_mut()[j] -= h;
            let numeric = (f(&p).0 - f(&m).0) / (2.0 * h);
            let a = analytic.data()[j];
            assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6) <= 1e-4);
        }
    }
}
