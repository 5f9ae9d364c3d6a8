//! Prize-collecting Steiner tree solver with node and edge prizes.
//!
//! Objective for a connected subgraph `(U, F)`:
//! `Σ_{v∈U} prize(v) + Σ_{e∈F} prize(e) − cost·|F|`.
//!
//! For a fixed node set the best edge set is known in closed form: every
//! edge whose prize covers its cost is taken, and the remaining components
//! are joined by a minimum spanning forest over edges weighted
//! `cost − prize(e)`. The solver therefore searches over node sets only:
//! exhaustively up to [`DEFAULT_EXACT_LIMIT`] nodes, and with a
//! Goemans–Williamson growth phase followed by strong pruning above that.

/// Largest node count solved by exhaustive enumeration.
pub const DEFAULT_EXACT_LIMIT: usize = 12;

const EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcstEdge {
    pub u: usize,
    pub v: usize,
    pub prize: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcstInstance {
    pub node_prizes: Vec<f64>,
    pub edges: Vec<PcstEdge>,
    pub edge_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcstSolution {
    /// Selected node ids, ascending.
    pub nodes: Vec<usize>,
    /// Selected edge indices into [`PcstInstance::edges`], ascending.
    pub edges: Vec<usize>,
    pub objective: f64,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi] = lo;
        true
    }
}

impl PcstInstance {
    pub fn num_nodes(&self) -> usize {
        self.node_prizes.len()
    }

    /// Objective of an explicit `(nodes, edges)` choice, without checks.
    pub fn objective_of(&self, nodes: &[usize], edges: &[usize]) -> f64 {
        let np: f64 = nodes.iter().map(|&v| self.node_prizes[v]).sum();
        let ep: f64 = edges.iter().map(|&e| self.edges[e].prize).sum();
        np + ep - self.edge_cost * edges.len() as f64
    }

    /// Edge indices sorted by `(cost − prize, index)`.
    fn sorted_edges(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.edges.len()).collect();
        order.sort_by(|&a, &b| {
            let wa = self.edge_cost - self.edges[a].prize;
            let wb = self.edge_cost - self.edges[b].prize;
            wa.total_cmp(&wb).then(a.cmp(&b))
        });
        order
    }

    /// Best edge set for a fixed node set, or `None` if the node set cannot
    /// be connected.
    fn best_edges(
        &self,
        in_set: &[bool],
        size: usize,
        order: &[usize],
        uf: &mut UnionFind,
    ) -> Option<(f64, Vec<usize>)> {
        for (i, p) in uf.parent.iter_mut().enumerate() {
            *p = i;
        }
        let mut components = size;
        let mut gain = 0.0;
        let mut chosen = Vec::new();
        for &e in order {
            let PcstEdge { u, v, prize } = self.edges[e];
            if !in_set[u] || !in_set[v] {
                continue;
            }
            let w = self.edge_cost - prize;
            let joined = uf.union(u, v);
            if joined {
                components -= 1;
            }
            if w <= 0.0 || joined {
                gain -= w;
                chosen.push(e);
            }
        }
        if components != 1 {
            return None;
        }
        chosen.sort_unstable();
        Some((gain, chosen))
    }

    fn evaluate(
        &self,
        in_set: &[bool],
        order: &[usize],
        uf: &mut UnionFind,
    ) -> Option<(f64, Vec<usize>)> {
        let size = in_set.iter().filter(|&&b| b).count();
        if size == 0 {
            return None;
        }
        let (gain, edges) = self.best_edges(in_set, size, order, uf)?;
        let np: f64 = in_set
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(v, _)| self.node_prizes[v])
            .sum();
        Some((np + gain, edges))
    }

    fn solution_from(&self, in_set: &[bool], edges: Vec<usize>) -> PcstSolution {
        let nodes: Vec<usize> = (0..in_set.len()).filter(|&v| in_set[v]).collect();
        let objective = self.objective_of(&nodes, &edges);
        PcstSolution {
            nodes,
            edges,
            objective,
        }
    }

    fn best_singleton(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (v, &p) in self.node_prizes.iter().enumerate() {
            if best.is_none_or(|b| p > self.node_prizes[b]) {
                best = Some(v);
            }
        }
        best
    }
}

/// Solves `inst`, exactly when it has at most `exact_limit` nodes.
pub fn solve(inst: &PcstInstance, exact_limit: usize) -> PcstSolution {
    let n = inst.num_nodes();
    if n == 0 {
        return PcstSolution {
            nodes: Vec::new(),
            edges: Vec::new(),
            objective: 0.0,
        };
    }
    if n <= exact_limit.min(24) {
        solve_exact(inst)
    } else {
        solve_heuristic(inst)
    }
}

/// Exhaustive search over all node subsets. Ties keep the first subset in
/// increasing bitmask order.
pub fn solve_exact(inst: &PcstInstance) -> PcstSolution {
    let n = inst.num_nodes();
    assert!(n <= 24, "exact PCST limited to 24 nodes");
    let order = inst.sorted_edges();
    let mut uf = UnionFind::new(n);
    let mut in_set = vec![false; n];
    let mut best: Option<(f64, u32, Vec<usize>)> = None;
    for mask in 1u32..(1u32 << n) {
        for (v, slot) in in_set.iter_mut().enumerate() {
            *slot = mask & (1 << v) != 0;
        }
        if let Some((value, edges)) = inst.evaluate(&in_set, &order, &mut uf) {
            if best.as_ref().is_none_or(|(b, _, _)| value > *b + EPS) {
                best = Some((value, mask, edges));
            }
        }
    }
    let (_, mask, edges) = best.expect("a single node is always feasible");
    for (v, slot) in in_set.iter_mut().enumerate() {
        *slot = mask & (1 << v) != 0;
    }
    inst.solution_from(&in_set, edges)
}

/// Goemans–Williamson growth on the edge-prize-folded instance, strong
/// pruning of the resulting forest, then local node removal.
pub fn solve_heuristic(inst: &PcstInstance) -> PcstSolution {
    let n = inst.num_nodes();
    let order = inst.sorted_edges();
    let mut uf = UnionFind::new(n);

    let mut candidate = grow_and_prune(inst);
    // never worse than the best single node
    let single = inst.best_singleton().expect("non-empty");
    let mut in_set = vec![false; n];
    for &v in &candidate {
        in_set[v] = true;
    }
    let mut current = inst.evaluate(&in_set, &order, &mut uf);
    let single_value = inst.node_prizes[single];
    if current.as_ref().is_none_or(|(v, _)| *v < single_value) {
        in_set.iter_mut().for_each(|b| *b = false);
        in_set[single] = true;
        candidate = vec![single];
        current = inst.evaluate(&in_set, &order, &mut uf);
    }
    let (mut value, mut edges) = current.expect("feasible");

    // drop nodes while that improves the objective and keeps connectivity
    let mut improved = candidate.len() > 1;
    while improved {
        improved = false;
        for v in 0..n {
            if !in_set[v] || in_set.iter().filter(|&&b| b).count() == 1 {
                continue;
            }
            in_set[v] = false;
            match inst.evaluate(&in_set, &order, &mut uf) {
                Some((nv, ne)) if nv > value + EPS => {
                    value = nv;
                    edges = ne;
                    improved = true;
                }
                _ => in_set[v] = true,
            }
        }
    }
    inst.solution_from(&in_set, edges)
}

#[derive(Clone, Copy)]
struct FoldedEdge {
    u: usize,
    v: usize,
    cost: f64,
}

/// Returns the original node ids of the best pruned tree.
fn grow_and_prune(inst: &PcstInstance) -> Vec<usize> {
    let n = inst.num_nodes();
    let c = inst.edge_cost;
    // fold edge prizes: cheap edges get reduced cost, profitable edges become
    // a virtual node carrying the surplus joined by zero-cost half edges
    let mut prizes = inst.node_prizes.clone();
    let mut origin: Vec<Option<usize>> = vec![None; n];
    let mut fedges = Vec::new();
    for (i, e) in inst.edges.iter().enumerate() {
        if e.u == e.v {
            continue;
        }
        if e.prize > c {
            let s = prizes.len();
            prizes.push(e.prize - c);
            origin.push(Some(i));
            fedges.push(FoldedEdge { u: e.u, v: s, cost: 0.0 });
            fedges.push(FoldedEdge { u: s, v: e.v, cost: 0.0 });
        } else {
            fedges.push(FoldedEdge {
                u: e.u,
                v: e.v,
                cost: c - e.prize,
            });
        }
    }
    let nf = prizes.len();

    // growth phase
    let mut uf = UnionFind::new(nf);
    let mut members: Vec<Vec<usize>> = (0..nf).map(|v| vec![v]).collect();
    let mut budget = prizes.clone();
    let mut active: Vec<bool> = prizes.iter().map(|&p| p > EPS).collect();
    let mut load = vec![0.0; nf];
    let mut forest: Vec<usize> = Vec::new();
    loop {
        let mut best_dt = f64::INFINITY;
        let mut event: Option<Result<usize, usize>> = None;
        for (i, e) in fedges.iter().enumerate() {
            let (cu, cv) = (uf.find(e.u), uf.find(e.v));
            if cu == cv {
                continue;
            }
            let rate = active[cu] as u8 + active[cv] as u8;
            if rate == 0 {
                continue;
            }
            let slack = (e.cost - load[e.u] - load[e.v]).max(0.0);
            let dt = slack / f64::from(rate);
            if dt < best_dt {
                best_dt = dt;
                event = Some(Ok(i));
            }
        }
        for root in 0..nf {
            if uf.find(root) == root && active[root] && budget[root] < best_dt {
                best_dt = budget[root].max(0.0);
                event = Some(Err(root));
            }
        }
        let Some(event) = event else { break };
        if best_dt > 0.0 {
            for root in 0..nf {
                if uf.find(root) == root && active[root] {
                    budget[root] -= best_dt;
                    for &m in &members[root] {
                        load[m] += best_dt;
                    }
                }
            }
        }
        match event {
            Ok(i) => {
                let e = fedges[i];
                let (cu, cv) = (uf.find(e.u), uf.find(e.v));
                uf.union(cu, cv);
                let root = uf.find(cu);
                let other = if root == cu { cv } else { cu };
                let moved = std::mem::take(&mut members[other]);
                members[root].extend(moved);
                budget[root] = budget[cu].max(0.0) + budget[cv].max(0.0);
                active[root] = budget[root] > EPS;
                active[other] = false;
                forest.push(i);
            }
            Err(root) => {
                budget[root] = 0.0;
                active[root] = false;
            }
        }
    }

    // strong pruning of every tree, keeping the single best rooted subtree
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nf];
    for &i in &forest {
        let e = fedges[i];
        adj[e.u].push((e.v, e.cost));
        adj[e.v].push((e.u, e.cost));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut seen = vec![false; nf];
    for start in 0..nf {
        if seen[start] {
            continue;
        }
        let mut tree = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(x) = stack.pop() {
            tree.push(x);
            for &(y, _) in &adj[x] {
                if !seen[y] {
                    seen[y] = true;
                    stack.push(y);
                }
            }
        }
        for (value, kept) in tree.iter().map(|&r| pruned_value(&adj, &prizes, r)) {
            if best.as_ref().is_none_or(|(b, _)| value > *b + EPS) {
                best = Some((value, kept));
            }
        }
    }
    let (_, kept) = best.expect("non-empty forest");
    let mut nodes: Vec<usize> = Vec::new();
    for x in kept {
        match origin.get(x).copied().flatten() {
            Some(e) => {
                nodes.push(inst.edges[e].u);
                nodes.push(inst.edges[e].v);
            }
            None => nodes.push(x),
        }
    }
    nodes.sort_unstable();
    nodes.dedup();
    nodes
}

/// Strong-pruning value of the tree rooted at `root` and the kept nodes.
fn pruned_value(adj: &[Vec<(usize, f64)>], prizes: &[f64], root: usize) -> (f64, Vec<usize>) {
    // iterative post-order
    let mut order = Vec::new();
    let mut parent: Vec<(usize, f64)> = Vec::new();
    let mut stack = vec![(root, usize::MAX, 0.0)];
    while let Some((x, p, c)) = stack.pop() {
        order.push(x);
        parent.push((p, c));
        for &(y, cost) in &adj[x] {
            if y != p {
                stack.push((y, x, cost));
            }
        }
    }
    let index: std::collections::HashMap<usize, usize> =
        order.iter().enumerate().map(|(i, &x)| (x, i)).collect();
    let mut value: Vec<f64> = order.iter().map(|&x| prizes[x]).collect();
    for i in (1..order.len()).rev() {
        let (p, c) = parent[i];
        let contrib = value[i] - c;
        if contrib > 0.0 {
            value[index[&p]] += contrib;
        }
    }
    let mut kept = vec![root];
    let mut keep = vec![false; order.len()];
    keep[0] = true;
    for i in 1..order.len() {
        let (p, c) = parent[i];
        if keep[index[&p]] && value[i] - c > 0.0 {
            keep[i] = true;
            kept.push(order[i]);
        }
    }
    (value[0], kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_instance() -> PcstInstance {
        PcstInstance {
            node_prizes: vec![3.0, 0.0, 3.0],
            edges: vec![
                PcstEdge { u: 0, v: 1, prize: 0.0 },
                PcstEdge { u: 1, v: 2, prize: 0.0 },
            ],
            edge_cost: 1.0,
        }
    }

    #[test]
    fn path_takes_everything() {
        let s = solve_exact(&path_instance());
        assert_eq!(s.nodes, vec![0, 1, 2]);
        assert_eq!(s.objective, 4.0);
        let h = solve_heuristic(&path_instance());
        assert_eq!(h.objective, 4.0);
    }

    #[test]
    fn lone_prized_node() {
        let inst = PcstInstance {
            node_prizes: vec![5.0],
            edges: vec![],
            edge_cost: 1.0,
        };
        let s = solve(&inst, DEFAULT_EXACT_LIMIT);
        assert_eq!((s.nodes, s.objective), (vec![0], 5.0));
    }

    #[test]
    fn zero_prizes_never_pay_for_edges() {
        let inst = PcstInstance {
            node_prizes: vec![0.0; 4],
            edges: (0..3).map(|i| PcstEdge { u: i, v: i + 1, prize: 0.0 }).collect(),
            edge_cost: 1.0,
        };
        for s in [solve_exact(&inst), solve_heuristic(&inst)] {
            assert_eq!(s.nodes.len(), 1);
            assert!(s.edges.is_empty());
            assert_eq!(s.objective, 0.0);
        }
    }

    #[test]
    fn profitable_edge_pays_for_itself() {
        let inst = PcstInstance {
            node_prizes: vec![0.0, 0.0],
            edges: vec![PcstEdge { u: 0, v: 1, prize: 3.0 }],
            edge_cost: 1.0,
        };
        let s = solve_exact(&inst);
        assert_eq!(s.edges, vec![0]);
        assert_eq!(s.objective, 2.0);
        assert_eq!(solve_heuristic(&inst).objective, 2.0);
    }

    #[test]
    fn cycle_edges_are_kept_only_when_profitable() {
        // triangle with one cheap closing edge and one expensive one
        let inst = PcstInstance {
            node_prizes: vec![4.0, 4.0, 4.0],
            edges: vec![
                PcstEdge { u: 0, v: 1, prize: 0.0 },
                PcstEdge { u: 1, v: 2, prize: 0.0 },
                PcstEdge { u: 2, v: 0, prize: 2.5 },
            ],
            edge_cost: 1.0,
        };
        let s = solve_exact(&inst);
        assert_eq!(s.edges.len(), 2);
        assert!(s.edges.contains(&2));
        assert!((s.objective - (12.0 + 2.5 - 2.0)).abs() < 1e-12);
    }
}
