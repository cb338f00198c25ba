#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treerate::dist::{Alphabet, DenseJoint, PairJoint};
use treerate::trees::{enumerate_spanning_trees, Edge, EdgeSet, TreeModel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Probability vector with every entry at least `floor / len`.
pub fn simplex_point(rng: &mut ChaCha8Rng, len: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| floor + rng.random::<f64>()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

pub fn random_structure(rng: &mut ChaCha8Rng, d: usize) -> EdgeSet {
    let trees: Vec<EdgeSet> = enumerate_spanning_trees(d).unwrap().collect();
    trees[rng.random_range(0..trees.len())].clone()
}

/// Tree model with random strictly positive conditionals rooted at node 0.
pub fn random_tree_model(rng: &mut ChaCha8Rng, structure: &EdgeSet, k: usize) -> TreeModel {
    let alphabet = Alphabet::new(k).unwrap();
    let root = simplex_point(rng, k, 0.2);
    let conditionals: BTreeMap<usize, Vec<f64>> = (1..structure.num_nodes())
        .map(|v| (v, (0..k).flat_map(|_| simplex_point(rng, k, 0.2)).collect()))
        .collect();
    TreeModel::from_conditionals(structure.clone(), alphabet, 0, root, &conditionals).unwrap()
}

pub fn random_dense(rng: &mut ChaCha8Rng, d: usize, k: usize) -> DenseJoint {
    let len = k.pow(d as u32);
    DenseJoint::new(d, Alphabet::new(k).unwrap(), simplex_point(rng, len, 0.05)).unwrap()
}

pub fn random_pair_joint(rng: &mut ChaCha8Rng, shared: bool) -> PairJoint {
    let (nonedge, cells) = if shared {
        (Edge::new(1, 2), 8)
    } else {
        (Edge::new(2, 3), 16)
    };
    PairJoint::new(
        Edge::new(0, 1),
        nonedge,
        Alphabet::binary(),
        simplex_point(rng, cells, 0.05),
    )
    .unwrap()
}

/// Mutual information of a `k x k` table, written out directly.
pub fn mi_oracle(k: usize, t: &[f64]) -> f64 {
    let row: Vec<f64> = (0..k).map(|a| (0..k).map(|b| t[a * k + b]).sum()).collect();
    let col: Vec<f64> = (0..k).map(|b| (0..k).map(|a| t[a * k + b]).sum()).collect();
    let mut s = 0.0;
    for a in 0..k {
        for b in 0..k {
            let p = t[a * k + b];
            if p > 0.0 {
                s += p * (p / (row[a] * col[b])).ln();
            }
        }
    }
    s
}

/// Mutual information of every node pair of a dense joint.
pub fn mi_table_oracle(dense: &DenseJoint) -> BTreeMap<Edge, f64> {
    let k = dense.alphabet().size();
    Edge::all_pairs(dense.num_vars())
        .map(|e| (e, mi_oracle(k, dense.marginalize(&[e.lo(), e.hi()]).unwrap().probs())))
        .collect()
}

/// `Var(s_e' - s_e)` and `E[s_e' - s_e]` under a pair joint, from its own
/// pairwise tables.
pub fn density_moments(pj: &PairJoint) -> (f64, f64) {
    let k = pj.alphabet().size();
    let nv = pj.vars().len();
    let dense = pj.to_dense();
    let pos = |v: usize| pj.vars().iter().position(|&w| w == v).unwrap();
    let (e, f) = (pj.edge(), pj.nonedge());
    let te = dense.marginalize(&[pos(e.lo()), pos(e.hi())]).unwrap();
    let tf = dense.marginalize(&[pos(f.lo()), pos(f.hi())]).unwrap();
    let density = |t: &DenseJoint, x: usize, y: usize| {
        let p = t.probs();
        let r: f64 = (0..k).map(|b| p[x * k + b]).sum();
        let c: f64 = (0..k).map(|a| p[a * k + y]).sum();
        (p[x * k + y] / (r * c)).ln()
    };
    let mut xs = vec![0; nv];
    let mut mean = 0.0;
    let mut second = 0.0;
    for (idx, &p) in dense.probs().iter().enumerate() {
        let mut rem = idx;
        for slot in xs.iter_mut().rev() {
            *slot = rem % k;
            rem /= k;
        }
        let diff = density(&tf, xs[pos(f.lo())], xs[pos(f.hi())]) - density(&te, xs[pos(e.lo())], xs[pos(e.hi())]);
        mean += p * diff;
        second += p * diff * diff;
    }
    (second - mean * mean, mean)
}
