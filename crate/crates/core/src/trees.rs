//! Spanning-tree combinatorics and tree-factorized distributions.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{decode, encode, pair_marginals, table_len, Alphabet, DenseJoint, PairJoint, SampleMatrix};
use crate::error::{Error, Result};

/// Absolute tolerance for treating two MST weights as tied.
pub const TIE_TOL: f64 = 1e-12;

/// Pairwise marginals closer than this (L-infinity) to the product of their
/// node marginals are treated as product distributions.
pub const PRODUCT_TOL: f64 = 1e-12;

/// Tolerance for edge marginals agreeing with node marginals.
pub const CONSISTENCY_TOL: f64 = 1e-10;

/// Largest node count accepted by [`enumerate_spanning_trees`].
pub const MAX_ENUM_NODES: usize = 8;

/// An unordered node pair, stored with `lo < hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 2]", into = "[usize; 2]")]
pub struct Edge {
    lo: usize,
    hi: usize,
}

impl Edge {
    /// Panics on a self-loop; use [`Edge::try_new`] for untrusted input.
    pub fn new(a: usize, b: usize) -> Self {
        Self::try_new(a, b).expect("self-loop")
    }

    pub fn try_new(a: usize, b: usize) -> Result<Self> {
        match a.cmp(&b) {
            std::cmp::Ordering::Less => Ok(Edge { lo: a, hi: b }),
            std::cmp::Ordering::Greater => Ok(Edge { lo: b, hi: a }),
            std::cmp::Ordering::Equal => Err(Error::InvalidEdgeSet(format!("self-loop at {a}"))),
        }
    }

    pub fn lo(self) -> usize {
        self.lo
    }

    pub fn hi(self) -> usize {
        self.hi
    }

    pub fn touches(self, v: usize) -> bool {
        self.lo == v || self.hi == v
    }

    pub fn shares_node(self, other: Edge) -> bool {
        self.touches(other.lo) || self.touches(other.hi)
    }

    /// All `C(d, 2)` pairs in lexicographic order.
    pub fn all_pairs(d: usize) -> impl Iterator<Item = Edge> {
        (0..d).flat_map(move |i| (i + 1..d).map(move |j| Edge { lo: i, hi: j }))
    }
}

impl TryFrom<[usize; 2]> for Edge {
    type Error = Error;
    fn try_from(v: [usize; 2]) -> Result<Self> {
        Edge::try_new(v[0], v[1])
    }
}

impl From<Edge> for [usize; 2] {
    fn from(e: Edge) -> [usize; 2] {
        [e.lo, e.hi]
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.lo, self.hi)
    }
}

/// A simple undirected graph on nodes `0..d`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeSet {
    d: usize,
    edges: BTreeSet<Edge>,
}

impl EdgeSet {
    pub fn new(d: usize, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for e in edges {
            if e.hi >= d {
                return Err(Error::InvalidEdgeSet(format!("edge {e} out of range for {d} nodes")));
            }
            if !set.insert(e) {
                return Err(Error::InvalidEdgeSet(format!("duplicate edge {e}")));
            }
        }
        Ok(EdgeSet { d, edges: set })
    }

    /// Like [`EdgeSet::new`] but also requires a spanning tree.
    pub fn spanning_tree(d: usize, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let set = EdgeSet::new(d, edges)?;
        if set.edges.len() + 1 != d.max(1) {
            return Err(Error::InvalidEdgeSet(format!(
                "a spanning tree on {d} nodes has {} edges, got {}",
                d.saturating_sub(1),
                set.edges.len()
            )));
        }
        if !set.is_acyclic() {
            return Err(Error::Cyclic);
        }
        Ok(set)
    }

    /// Convenience constructor from `(a, b)` tuples.
    pub fn from_pairs(d: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let edges = pairs
            .iter()
            .map(|&(a, b)| Edge::try_new(a, b))
            .collect::<Result<Vec<_>>>()?;
        EdgeSet::new(d, edges)
    }

    pub fn star(d: usize, center: usize) -> Self {
        EdgeSet::spanning_tree(d, (0..d).filter(|&v| v != center).map(|v| Edge::new(center, v)))
            .expect("star is a spanning tree")
    }

    pub fn chain(d: usize) -> Self {
        EdgeSet::spanning_tree(d, (1..d).map(|v| Edge::new(v - 1, v))).expect("chain is a spanning tree")
    }

    pub fn num_nodes(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn contains(&self, e: Edge) -> bool {
        self.edges.contains(&e)
    }

    pub fn iter(&self) -> impl Iterator<Item = Edge> + '_ {
        self.edges.iter().copied()
    }

    pub fn edges(&self) -> Vec<Edge> {
        self.iter().collect()
    }

    /// Node pairs not in the set, lexicographically.
    pub fn non_edges(&self) -> Vec<Edge> {
        Edge::all_pairs(self.d).filter(|e| !self.contains(*e)).collect()
    }

    pub fn is_spanning_tree(&self) -> bool {
        self.edges.len() + 1 == self.d.max(1) && self.is_acyclic()
    }

    pub fn is_acyclic(&self) -> bool {
        let mut uf = UnionFind::new(self.d);
        self.iter().all(|e| uf.union(e.lo, e.hi))
    }

    /// `E \ {remove} ∪ {add}`.
    pub fn swap(&self, remove: Edge, add: Edge) -> EdgeSet {
        let mut edges = self.edges.clone();
        edges.remove(&remove);
        edges.insert(add);
        EdgeSet { d: self.d, edges }
    }

    /// Edges in `self` but not in `other`.
    pub fn difference(&self, other: &EdgeSet) -> Vec<Edge> {
        self.edges.difference(&other.edges).copied().collect()
    }

    pub(crate) fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.d];
        for e in self.iter() {
            adj[e.lo].push(e.hi);
            adj[e.hi].push(e.lo);
        }
        adj
    }

    fn bfs_parents(&self, root: usize) -> (Vec<Option<usize>>, Vec<usize>) {
        let adj = self.adjacency();
        let mut parent = vec![None; self.d];
        let mut seen = vec![false; self.d];
        let mut order = Vec::with_capacity(self.d);
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some(u);
                    queue.push_back(v);
                }
            }
        }
        (parent, order)
    }
}

impl fmt::Display for EdgeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, e) in self.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, "}}")
    }
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns `false` if `a` and `b` were already connected.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

/// The unique path in `tree` between the endpoints of `pair`, ordered from
/// `pair.lo()` to `pair.hi()`. For a pair that is itself an edge the path is
/// that single edge.
pub fn path_between(tree: &EdgeSet, pair: Edge) -> Result<Vec<Edge>> {
    if pair.hi >= tree.d {
        return Err(Error::InvalidIndex(format!("pair {pair} out of range")));
    }
    if tree.contains(pair) {
        return Ok(vec![pair]);
    }
    let (parent, _) = tree.bfs_parents(pair.hi);
    if parent[pair.lo].is_none() {
        return Err(Error::Disconnected(format!(
            "no path between {} and {}",
            pair.lo, pair.hi
        )));
    }
    // walking parents from lo leads back to the BFS root hi
    let mut path = Vec::new();
    let mut v = pair.lo;
    while let Some(p) = parent[v] {
        path.push(Edge::new(v, p));
        v = p;
    }
    Ok(path)
}

/// Hop distance between `u` and `v`, if connected.
pub fn hop_distance(tree: &EdgeSet, u: usize, v: usize) -> Option<usize> {
    if u == v {
        return Some(0);
    }
    path_between(tree, Edge::new(u, v)).ok().map(|p| p.len())
}

/// Longest shortest-path length between any two connected nodes.
pub fn diameter(tree: &EdgeSet) -> usize {
    let adj = tree.adjacency();
    let mut best = 0;
    for s in 0..tree.d {
        let mut dist = vec![usize::MAX; tree.d];
        dist[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            best = best.max(dist[u]);
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    best
}

/// A group of node pairs whose weights agree within [`TIE_TOL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TieGroup {
    pub weight: f64,
    pub pairs: Vec<Edge>,
    /// Members of the group that ended up in the tree.
    pub chosen: Vec<Edge>,
}

impl TieGroup {
    /// The tie changed which edges were selected: some but not all members
    /// were chosen, and the rejected ones were rejected only because of order.
    pub fn is_decisive(&self) -> bool {
        !self.chosen.is_empty() && self.chosen.len() < self.pairs.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MwstResult {
    pub tree: EdgeSet,
    pub ties: Vec<TieGroup>,
}

/// Pairs sorted by decreasing weight; pairs within [`TIE_TOL`] of a group's
/// leading weight form a group ordered lexicographically.
fn tie_groups(weights: &BTreeMap<Edge, f64>) -> Vec<(f64, Vec<Edge>)> {
    let mut sorted: Vec<(Edge, f64)> = weights.iter().map(|(&e, &w)| (e, w)).collect();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut groups: Vec<(f64, Vec<Edge>)> = Vec::new();
    for (e, w) in sorted {
        match groups.last_mut() {
            Some((lead, members)) if (*lead - w).abs() <= TIE_TOL => members.push(e),
            _ => groups.push((w, vec![e])),
        }
    }
    for (_, members) in &mut groups {
        members.sort();
    }
    groups
}

/// Maximum-weight spanning tree by Kruskal's algorithm with a deterministic
/// lexicographic tie-break.
pub fn mwst(d: usize, weights: &BTreeMap<Edge, f64>) -> Result<MwstResult> {
    for e in Edge::all_pairs(d) {
        match weights.get(&e) {
            Some(w) if w.is_finite() => {}
            Some(w) => return Err(Error::InvalidEdgeSet(format!("weight {w} for {e}"))),
            None => return Err(Error::InvalidEdgeSet(format!("missing weight for {e}"))),
        }
    }
    if weights.len() != d * d.saturating_sub(1) / 2 {
        return Err(Error::InvalidEdgeSet(
            "weights given for pairs outside the node set".into(),
        ));
    }
    let mut uf = UnionFind::new(d);
    let mut chosen = Vec::with_capacity(d.saturating_sub(1));
    let mut ties = Vec::new();
    for (weight, members) in tie_groups(weights) {
        let mut taken = Vec::new();
        for &e in &members {
            if uf.union(e.lo, e.hi) {
                taken.push(e);
            }
        }
        chosen.extend_from_slice(&taken);
        if members.len() > 1 {
            ties.push(TieGroup {
                weight,
                pairs: members,
                chosen: taken,
            });
        }
    }
    Ok(MwstResult {
        tree: EdgeSet::spanning_tree(d, chosen)?,
        ties,
    })
}

/// Decodes a Prüfer sequence into its labelled tree.
fn prufer_decode(d: usize, seq: &[usize]) -> EdgeSet {
    let mut degree = vec![1usize; d];
    for &s in seq {
        degree[s] += 1;
    }
    let mut edges = Vec::with_capacity(d - 1);
    for &s in seq {
        let leaf = (0..d).find(|&v| degree[v] == 1).expect("a leaf exists");
        edges.push(Edge::new(leaf, s));
        degree[leaf] -= 1;
        degree[s] -= 1;
    }
    let rest: Vec<usize> = (0..d).filter(|&v| degree[v] == 1).collect();
    if rest.len() == 2 {
        edges.push(Edge::new(rest[0], rest[1]));
    }
    EdgeSet::spanning_tree(d, edges).expect("prüfer sequences decode to spanning trees")
}

/// All `d^(d-2)` labelled spanning trees on `d` nodes, via Prüfer sequences.
pub fn enumerate_spanning_trees(d: usize) -> Result<impl Iterator<Item = EdgeSet>> {
    if d > MAX_ENUM_NODES {
        return Err(Error::TooLarge(format!(
            "enumerating spanning trees on {d} > {MAX_ENUM_NODES} nodes"
        )));
    }
    let len = d.saturating_sub(2);
    let total = if d < 2 { 1 } else { d.pow(len as u32) };
    Ok((0..total).map(move |idx| {
        if d < 2 {
            return EdgeSet::new(d, []).unwrap();
        }
        let mut seq = vec![0; len];
        decode(idx, d, &mut seq);
        prufer_decode(d, &seq)
    }))
}

/// An acyclic graph with fewer than `d - 1` edges.
pub fn is_proper_forest(structure: &EdgeSet) -> Result<bool> {
    if !structure.is_acyclic() {
        return Err(Error::Cyclic);
    }
    Ok(structure.len() + 1 < structure.d)
}

/// A distribution that factorizes over a spanning tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    structure: EdgeSet,
    alphabet: Alphabet,
    node_marginals: Vec<Vec<f64>>,
    /// `k x k` tables indexed `[x_lo * k + x_hi]`.
    edge_marginals: BTreeMap<Edge, Vec<f64>>,
}

impl TreeModel {
    /// Validated constructor. Edge marginals must be consistent with node
    /// marginals and must not be product distributions.
    pub fn new(
        structure: EdgeSet,
        alphabet: Alphabet,
        node_marginals: Vec<Vec<f64>>,
        edge_marginals: BTreeMap<Edge, Vec<f64>>,
    ) -> Result<Self> {
        let model = Self::projection(structure, alphabet, node_marginals, edge_marginals)?;
        if let Some(e) = model.product_edges().first() {
            return Err(Error::ProductEdge(e.lo, e.hi));
        }
        Ok(model)
    }

    /// Like [`TreeModel::new`] but accepts product edge marginals. Tree
    /// projections of arbitrary distributions can have them.
    pub fn projection(
        structure: EdgeSet,
        alphabet: Alphabet,
        mut node_marginals: Vec<Vec<f64>>,
        mut edge_marginals: BTreeMap<Edge, Vec<f64>>,
    ) -> Result<Self> {
        if !structure.is_spanning_tree() {
            return Err(Error::InvalidEdgeSet(format!("{structure} is not a spanning tree")));
        }
        let d = structure.num_nodes();
        let k = alphabet.size();
        if node_marginals.len() != d {
            return Err(Error::InvalidTable(format!(
                "expected {d} node marginals, got {}",
                node_marginals.len()
            )));
        }
        for m in &mut node_marginals {
            *m = DenseJoint::new(1, alphabet, std::mem::take(m))?.probs().to_vec();
        }
        if edge_marginals.len() != structure.len() || structure.iter().any(|e| !edge_marginals.contains_key(&e)) {
            return Err(Error::InvalidTable("edge marginals do not match the structure".into()));
        }
        for (e, t) in &mut edge_marginals {
            *t = DenseJoint::new(2, alphabet, std::mem::take(t))?.probs().to_vec();
            let (row, col) = pair_marginals(k, t);
            let gap = row
                .iter()
                .zip(&node_marginals[e.lo])
                .chain(col.iter().zip(&node_marginals[e.hi]))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if gap > CONSISTENCY_TOL {
                return Err(Error::InconsistentMarginals(format!(
                    "edge {e} disagrees with node marginals by {gap:e}"
                )));
            }
        }
        Ok(TreeModel {
            structure,
            alphabet,
            node_marginals,
            edge_marginals,
        })
    }

    /// Tree model carrying `dense`'s own node and pairwise marginals on
    /// `structure` (the reverse I-projection onto that structure).
    pub fn project(dense: &DenseJoint, structure: &EdgeSet) -> Result<Self> {
        if structure.num_nodes() != dense.num_vars() {
            return Err(Error::InvalidEdgeSet("structure and joint differ in node count".into()));
        }
        let nodes = (0..dense.num_vars())
            .map(|i| dense.marginalize(&[i]).map(|m| m.probs().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let edges = structure
            .iter()
            .map(|e| Ok((e, dense.pair_table(e.lo, e.hi)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        TreeModel::projection(structure.clone(), dense.alphabet(), nodes, edges)
    }

    /// Builds a model from a root marginal and per-node conditionals
    /// `P(x_child | x_parent)` given as `k x k` tables indexed
    /// `[x_parent * k + x_child]`, with parents defined by rooting at `root`.
    pub fn from_conditionals(
        structure: EdgeSet,
        alphabet: Alphabet,
        root: usize,
        root_marginal: Vec<f64>,
        conditionals: &BTreeMap<usize, Vec<f64>>,
    ) -> Result<Self> {
        if !structure.is_spanning_tree() {
            return Err(Error::InvalidEdgeSet(format!("{structure} is not a spanning tree")));
        }
        let d = structure.num_nodes();
        let k = alphabet.size();
        if root >= d {
            return Err(Error::InvalidIndex(format!("root {root}")));
        }
        let (parent, order) = structure.bfs_parents(root);
        let mut nodes = vec![Vec::new(); d];
        nodes[root] = root_marginal;
        let mut edges = BTreeMap::new();
        for &v in order.iter().skip(1) {
            let p = parent[v].expect("non-root nodes have parents");
            let cond = conditionals
                .get(&v)
                .ok_or_else(|| Error::InvalidTable(format!("missing conditional for node {v}")))?;
            if cond.len() != k * k {
                return Err(Error::InvalidTable(format!("conditional for node {v} has wrong size")));
            }
            let mut joint = vec![0.0; k * k];
            let mut marg = vec![0.0; k];
            for a in 0..k {
                let row = &cond[a * k..(a + 1) * k];
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > crate::dist::RENORMALIZE_TOL || row.iter().any(|&c| c < 0.0) {
                    return Err(Error::InvalidTable(format!("conditional row {a} of node {v}")));
                }
                for b in 0..k {
                    let pab = nodes[p][a] * row[b];
                    marg[b] += pab;
                    // tables are keyed (lo, hi)
                    if p < v {
                        joint[a * k + b] = pab;
                    } else {
                        joint[b * k + a] = pab;
                    }
                }
            }
            nodes[v] = marg;
            edges.insert(Edge::new(p, v), joint);
        }
        TreeModel::new(structure, alphabet, nodes, edges)
    }

    pub fn structure(&self) -> &EdgeSet {
        &self.structure
    }

    pub fn alphabet(&self) -> Alphabet {
        self.alphabet
    }

    pub fn num_nodes(&self) -> usize {
        self.structure.num_nodes()
    }

    pub fn node_marginals(&self) -> &[Vec<f64>] {
        &self.node_marginals
    }

    pub fn edge_marginals(&self) -> &BTreeMap<Edge, Vec<f64>> {
        &self.edge_marginals
    }

    pub fn edge_marginal(&self, e: Edge) -> Option<&[f64]> {
        self.edge_marginals.get(&e).map(Vec::as_slice)
    }

    /// Edges whose pairwise marginal is (within [`PRODUCT_TOL`]) a product.
    pub fn product_edges(&self) -> Vec<Edge> {
        let k = self.alphabet.size();
        self.edge_marginals
            .iter()
            .filter(|(e, t)| {
                (0..k * k).all(|c| {
                    let (a, b) = (c / k, c % k);
                    (t[c] - self.node_marginals[e.lo][a] * self.node_marginals[e.hi][b]).abs() <= PRODUCT_TOL
                })
            })
            .map(|(e, _)| *e)
            .collect()
    }

    /// Conditional `P(x_child | x_parent)` from an edge table.
    fn conditional(&self, parent: usize, child: usize, xp: usize, xc: usize) -> f64 {
        let k = self.alphabet.size();
        let e = Edge::new(parent, child);
        let t = &self.edge_marginals[&e];
        let joint = if parent < child { t[xp * k + xc] } else { t[xc * k + xp] };
        let pm = self.node_marginals[parent][xp];
        if pm > 0.0 {
            joint / pm
        } else {
            0.0
        }
    }

    /// Probability of a full outcome under the tree factorization.
    pub fn evaluate(&self, x: &[usize]) -> Result<f64> {
        let d = self.num_nodes();
        if x.len() != d || x.iter().any(|&s| s >= self.alphabet.size()) {
            return Err(Error::InvalidIndex(format!("outcome {x:?}")));
        }
        let (parent, order) = self.structure.bfs_parents(0);
        let mut p = self.node_marginals[0][x[0]];
        for &v in order.iter().skip(1) {
            if p == 0.0 {
                break;
            }
            let u = parent[v].unwrap();
            p *= self.conditional(u, v, x[u], x[v]);
        }
        Ok(p)
    }

    pub fn to_dense(&self) -> Result<DenseJoint> {
        let d = self.num_nodes();
        let k = self.alphabet.size();
        let len = table_len(self.alphabet, d)
            .ok_or_else(|| Error::TooLarge(format!("{k}^{d} cells exceeds the dense budget")))?;
        let mut xs = vec![0; d];
        let mut probs = Vec::with_capacity(len);
        for idx in 0..len {
            decode(idx, k, &mut xs);
            probs.push(self.evaluate(&xs)?);
        }
        DenseJoint::new(d, self.alphabet, probs)
    }

    /// Mutual information of every tree edge.
    pub fn edge_mutual_information(&self) -> BTreeMap<Edge, f64> {
        let k = self.alphabet.size();
        self.edge_marginals
            .iter()
            .map(|(e, t)| (*e, crate::dist::pair_mi(k, t)))
            .collect()
    }

    /// Joint marginal over `vars` (distinct, in the given order), computed by
    /// passing messages toward `vars[0]` so the full table is never built.
    pub fn marginal(&self, vars: &[usize]) -> Result<DenseJoint> {
        let d = self.num_nodes();
        let k = self.alphabet.size();
        if vars.is_empty() || vars.iter().any(|&v| v >= d) {
            return Err(Error::InvalidIndex(format!("marginal over {vars:?}")));
        }
        let mut seen = vec![false; d];
        for &v in vars {
            if std::mem::replace(&mut seen[v], true) {
                return Err(Error::InvalidIndex(format!("repeated variable {v}")));
            }
        }
        let root = vars[0];
        let (parent, order) = self.structure.bfs_parents(root);
        // scope[v]: kept variables below v; table[v][x_v * k^|scope| + a]
        let mut scope: Vec<Vec<usize>> = vec![Vec::new(); d];
        let mut table: Vec<Vec<f64>> = vec![Vec::new(); d];
        for &v in order.iter().rev() {
            let mut sc = Vec::new();
            let mut t = vec![1.0; k];
            if seen[v] {
                sc.push(v);
                t = (0..k * k).map(|c| if c / k == c % k { 1.0 } else { 0.0 }).collect();
            }
            for &c in order.iter().filter(|&&c| parent[c] == Some(v)) {
                if scope[c].is_empty() {
                    continue;
                }
                let child_scope = std::mem::take(&mut scope[c]);
                let child_table = std::mem::take(&mut table[c]);
                let wc = k.pow(child_scope.len() as u32);
                let wv = t.len() / k;
                let mut next = vec![0.0; k * wv * wc];
                for xv in 0..k {
                    let mut msg = vec![0.0; wc];
                    for xc in 0..k {
                        let w = self.conditional(v, c, xv, xc);
                        if w != 0.0 {
                            for (m, &tc) in msg.iter_mut().zip(&child_table[xc * wc..(xc + 1) * wc]) {
                                *m += w * tc;
                            }
                        }
                    }
                    for av in 0..wv {
                        let base = t[xv * wv + av];
                        for (ac, m) in msg.iter().enumerate() {
                            next[(xv * wv + av) * wc + ac] = base * m;
                        }
                    }
                }
                sc.extend(child_scope);
                t = next;
            }
            scope[v] = sc;
            table[v] = t;
        }
        let w = table[root].len() / k;
        let mut by_scope = vec![0.0; w];
        for xr in 0..k {
            let pr = self.node_marginals[root][xr];
            for (a, out) in by_scope.iter_mut().enumerate() {
                *out += pr * table[root][xr * w + a];
            }
        }
        // reorder from scope order to the requested order
        let sc = &scope[root];
        let perm: Vec<usize> = vars.iter().map(|v| sc.iter().position(|s| s == v).unwrap()).collect();
        let mut xs = vec![0; vars.len()];
        let mut ys = vec![0; vars.len()];
        let probs = (0..w)
            .map(|idx| {
                decode(idx, k, &mut ys);
                for (&y, &p) in ys.iter().zip(&perm) {
                    xs[p] = y;
                }
                by_scope[encode(&xs, k)]
            })
            .collect();
        DenseJoint::new(vars.len(), self.alphabet, probs)
    }

    /// Joint of the variables of `edge` and `nonedge` in the canonical
    /// [`PairJoint`] layout.
    pub fn pair_joint(&self, edge: Edge, nonedge: Edge) -> Result<PairJoint> {
        let mut vars = vec![edge.lo, edge.hi];
        for v in [nonedge.lo, nonedge.hi] {
            if !vars.contains(&v) {
                vars.push(v);
            }
        }
        let m = self.marginal(&vars)?;
        PairJoint::new(edge, nonedge, self.alphabet, m.probs().to_vec())
    }

    pub fn sampler(&self) -> TreeSampler {
        TreeSampler::new(self)
    }

    /// Draws `n` i.i.d. samples by ancestral sampling from node 0.
    pub fn sample(&self, n: usize, seed: u64) -> SampleMatrix {
        let sampler = self.sampler();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.num_nodes();
        let mut data = vec![0; n * d];
        for row in data.chunks_exact_mut(d) {
            sampler.draw(&mut rng, row);
        }
        SampleMatrix::new(d, data).expect("rows have width d")
    }
}

/// Precomputed ancestral sampler for a [`TreeModel`].
#[derive(Debug, Clone)]
pub struct TreeSampler {
    k: usize,
    root_cdf: Vec<f64>,
    /// `(node, parent, cdf rows indexed by parent symbol)` in BFS order.
    steps: Vec<(usize, usize, Vec<Vec<f64>>)>,
}

fn cdf(weights: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

/// Index of the first CDF entry exceeding `u`; falls back to the last
/// positive-mass cell when rounding leaves the total just below `u`.
pub(crate) fn draw_from_cdf(cdf: &[f64], u: f64) -> usize {
    let u = u * cdf[cdf.len() - 1];
    match cdf.iter().position(|&c| u < c) {
        Some(i) => i,
        None => cdf.len() - 1,
    }
}

impl TreeSampler {
    fn new(model: &TreeModel) -> Self {
        let k = model.alphabet.size();
        let (parent, order) = model.structure.bfs_parents(0);
        let steps = order
            .iter()
            .skip(1)
            .map(|&v| {
                let u = parent[v].unwrap();
                let rows = (0..k)
                    .map(|xu| {
                        let c = cdf((0..k).map(|xv| model.conditional(u, v, xu, xv)));
                        if c[k - 1] > 0.0 {
                            c
                        } else {
                            // unreachable parent symbol
                            cdf((0..k).map(|_| 1.0))
                        }
                    })
                    .collect();
                (v, u, rows)
            })
            .collect();
        TreeSampler {
            k,
            root_cdf: cdf(model.node_marginals[0].iter().copied()),
            steps,
        }
    }

    pub fn alphabet_size(&self) -> usize {
        self.k
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [usize]) {
        out[0] = draw_from_cdf(&self.root_cdf, rng.random::<f64>());
        for (v, u, rows) in &self.steps {
            out[*v] = draw_from_cdf(&rows[out[*u]], rng.random::<f64>());
        }
    }
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-run seed for run `index` of a seeded experiment. Independent of how
/// runs are distributed over workers.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(a: usize, b: usize) -> Edge {
        Edge::new(a, b)
    }

    #[test]
    fn edge_normalizes_order_and_rejects_loops() {
        assert_eq!(e(3, 1), e(1, 3));
        assert!(Edge::try_new(2, 2).is_err());
    }

    #[test]
    fn edge_set_validation() {
        assert!(EdgeSet::from_pairs(3, &[(0, 1), (1, 0)]).is_err());
        assert!(EdgeSet::from_pairs(3, &[(0, 3)]).is_err());
        assert!(matches!(
            EdgeSet::spanning_tree(3, [e(0, 1), e(1, 2), e(0, 2)]),
            Err(Error::InvalidEdgeSet(_))
        ));
        assert!(matches!(
            EdgeSet::spanning_tree(4, [e(0, 1), e(1, 2), e(0, 2)]),
            Err(Error::Cyclic)
        ));
    }

    #[test]
    fn star_path_goes_through_center() {
        let star = EdgeSet::star(4, 0);
        let path = path_between(&star, e(1, 2)).unwrap();
        let set: BTreeSet<_> = path.iter().copied().collect();
        assert_eq!(set, BTreeSet::from([e(0, 1), e(0, 2)]));
        assert!(path[0].touches(1) && path[1].touches(2));
    }

    #[test]
    fn chain_path_is_ordered() {
        let chain = EdgeSet::chain(4);
        assert_eq!(path_between(&chain, e(0, 3)).unwrap(), vec![e(0, 1), e(1, 2), e(2, 3)]);
        assert_eq!(path_between(&chain, e(1, 2)).unwrap(), vec![e(1, 2)]);
    }

    #[test]
    fn path_in_disconnected_graph_errors() {
        let forest = EdgeSet::from_pairs(4, &[(0, 1), (2, 3)]).unwrap();
        assert!(matches!(path_between(&forest, e(0, 3)), Err(Error::Disconnected(_))));
    }

    #[test]
    fn replacement_subtree_has_length_four_path() {
        // a path u - a - b - c - v
        // with side branches hanging off the interior nodes
        let t = EdgeSet::from_pairs(7, &[(0, 1), (1, 2), (2, 3), (3, 4), (1, 5), (3, 6)]).unwrap();
        assert_eq!(hop_distance(&t, 0, 4), Some(4));
    }

    #[test]
    fn diameters() {
        for d in 3..10 {
            assert_eq!(diameter(&EdgeSet::star(d, 0)), 2);
            assert_eq!(diameter(&EdgeSet::chain(d)), d - 1);
        }
        let balanced = EdgeSet::from_pairs(7, &[(0, 1), (0, 2), (1, 3), (1, 4), (2, 5), (2, 6)]).unwrap();
        assert_eq!(diameter(&balanced), 4);
    }

    #[test]
    fn all_equal_weights_pick_lexicographic_tree() {
        let w: BTreeMap<Edge, f64> = Edge::all_pairs(3).map(|p| (p, 0.5)).collect();
        let r = mwst(3, &w).unwrap();
        assert_eq!(r.tree.edges(), vec![e(0, 1), e(0, 2)]);
        assert_eq!(r.ties.len(), 1);
        assert_eq!(r.ties[0].pairs, vec![e(0, 1), e(0, 2), e(1, 2)]);
        assert!(r.ties[0].is_decisive());
    }

    #[test]
    fn near_ties_are_grouped_lexicographically() {
        // (1,2) is larger by 1e-15 but (0,2) still comes first within the group
        let w = BTreeMap::from([(e(0, 1), 1.0), (e(0, 2), 0.2), (e(1, 2), 0.2 + 1e-15)]);
        let r = mwst(3, &w).unwrap();
        assert_eq!(r.tree.edges(), vec![e(0, 1), e(0, 2)]);
        assert_eq!(r.ties[0].pairs, vec![e(0, 2), e(1, 2)]);
    }

    #[test]
    fn mwst_requires_all_weights() {
        let w = BTreeMap::from([(e(0, 1), 1.0)]);
        assert!(mwst(3, &w).is_err());
    }

    #[test]
    fn cayley_counts() {
        for (d, count) in [(1, 1), (2, 1), (3, 3), (4, 16), (5, 125), (6, 1296)] {
            let trees: BTreeSet<EdgeSet> = enumerate_spanning_trees(d).unwrap().collect();
            assert_eq!(trees.len(), count, "d = {d}");
            assert!(trees.iter().all(EdgeSet::is_spanning_tree));
        }
        assert!(matches!(enumerate_spanning_trees(9), Err(Error::TooLarge(_))));
    }

    #[test]
    fn proper_forest_cases() {
        assert!(!is_proper_forest(&EdgeSet::chain(4)).unwrap());
        assert!(is_proper_forest(&EdgeSet::from_pairs(4, &[(0, 1), (2, 3)]).unwrap()).unwrap());
        assert!(is_proper_forest(&EdgeSet::new(4, []).unwrap()).unwrap());
        let cyc = EdgeSet::from_pairs(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        assert!(matches!(is_proper_forest(&cyc), Err(Error::Cyclic)));
    }

    fn two_node_model() -> TreeModel {
        let t = vec![0.4, 0.1, 0.2, 0.3];
        TreeModel::new(
            EdgeSet::chain(2),
            Alphabet::binary(),
            vec![vec![0.5, 0.5], vec![0.6, 0.4]],
            BTreeMap::from([(e(0, 1), t)]),
        )
        .unwrap()
    }

    #[test]
    fn single_edge_model_evaluates_to_its_table() {
        let m = two_node_model();
        let dense = m.to_dense().unwrap();
        for (got, want) in dense.probs().iter().zip([0.4, 0.1, 0.2, 0.3]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(m.evaluate(&[0, 2]).is_err());
    }

    #[test]
    fn product_edges_rejected_at_construction() {
        let r = TreeModel::new(
            EdgeSet::chain(2),
            Alphabet::binary(),
            vec![vec![0.5, 0.5], vec![0.6, 0.4]],
            BTreeMap::from([(e(0, 1), vec![0.3, 0.2, 0.3, 0.2])]),
        );
        assert!(matches!(r, Err(Error::ProductEdge(0, 1))));
    }

    #[test]
    fn inconsistent_marginals_rejected() {
        let r = TreeModel::new(
            EdgeSet::chain(2),
            Alphabet::binary(),
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            BTreeMap::from([(e(0, 1), vec![0.4, 0.1, 0.2, 0.3])]),
        );
        assert!(matches!(r, Err(Error::InconsistentMarginals(_))));
    }

    #[test]
    fn sampling_is_deterministic_and_handles_point_masses() {
        let m = two_node_model();
        assert_eq!(m.sample(50, 7), m.sample(50, 7));
        assert_ne!(m.sample(50, 7), m.sample(50, 8));

        // point masses are product distributions, so only a projection accepts them
        let point = TreeModel::projection(
            EdgeSet::chain(2),
            Alphabet::binary(),
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            BTreeMap::from([(e(0, 1), vec![0.0, 1.0, 0.0, 0.0])]),
        )
        .unwrap();
        assert!(point.sample(100, 1).rows().all(|r| r == [0, 1]));
    }

    #[test]
    fn mixed_seeds_differ() {
        let seeds: BTreeSet<u64> = (0..1000).map(|i| mix_seed(42, i)).collect();
        assert_eq!(seeds.len(), 1000);
    }

    #[test]
    fn message_passing_marginal_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let structure = EdgeSet::from_pairs(6, &[(0, 3), (3, 1), (3, 4), (4, 2), (2, 5)]).unwrap();
        let k = 3;
        let alphabet = Alphabet::new(k).unwrap();
        let mut draw = |len: usize| {
            let v: Vec<f64> = (0..len).map(|_| 0.1 + rng.random::<f64>()).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let root = draw(k);
        let conds: BTreeMap<usize, Vec<f64>> = (1..6).map(|v| (v, (0..k).flat_map(|_| draw(k)).collect())).collect();
        let m = TreeModel::from_conditionals(structure, alphabet, 0, root, &conds).unwrap();
        let dense = m.to_dense().unwrap();
        for vars in [
            vec![5, 1],
            vec![1, 5, 0],
            vec![2, 3, 1, 0],
            vec![4],
            vec![0, 1, 2, 3, 4, 5],
        ] {
            let a = m.marginal(&vars).unwrap();
            let b = dense.marginalize(&vars).unwrap();
            assert!(a.linf_distance(&b).unwrap() < 1e-15, "{vars:?}");
        }
        assert!(m.marginal(&[1, 1]).is_err());
        assert!(m.marginal(&[6]).is_err());
    }
}
