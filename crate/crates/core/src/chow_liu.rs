//! Chow-Liu maximum-likelihood tree estimation.
//!
//! The structure is a maximum-weight spanning tree over empirical pairwise
//! mutual information, and the parameters are the empirical pairwise
//! marginals on the chosen edges.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dist::{decode, pair_mi, Alphabet, EmpiricalCounts, SampleMatrix};
use crate::error::{Error, Result};
use crate::trees::{mwst, Edge, EdgeSet, MwstResult, TieGroup, TreeModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnResult {
    pub structure: EdgeSet,
    pub model: TreeModel,
    pub mi_table: BTreeMap<Edge, f64>,
    pub ties: Vec<TieGroup>,
}

/// Pairwise count tables for every node pair plus per-node counts.
struct PairCounts {
    d: usize,
    k: usize,
    n: u64,
    nodes: Vec<Vec<u64>>,
    pairs: BTreeMap<Edge, Vec<u64>>,
}

impl PairCounts {
    fn from_samples(samples: &SampleMatrix, alphabet: Alphabet) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySamples);
        }
        let d = samples.num_vars();
        let k = alphabet.size();
        let mut nodes = vec![vec![0u64; k]; d];
        let mut flat = vec![vec![0u64; k * k]; d * d];
        for (row_idx, row) in samples.rows().enumerate() {
            if let Some((col, &symbol)) = row.iter().enumerate().find(|(_, &s)| s >= k) {
                return Err(Error::OutOfRangeSymbol {
                    row: row_idx,
                    col,
                    symbol,
                    alphabet: k,
                });
            }
            for i in 0..d {
                nodes[i][row[i]] += 1;
                for j in i + 1..d {
                    flat[i * d + j][row[i] * k + row[j]] += 1;
                }
            }
        }
        let pairs = Edge::all_pairs(d)
            .map(|e| (e, std::mem::take(&mut flat[e.lo() * d + e.hi()])))
            .collect();
        Ok(PairCounts {
            d,
            k,
            n: samples.len() as u64,
            nodes,
            pairs,
        })
    }

    fn from_counts(counts: &EmpiricalCounts) -> Self {
        let d = counts.num_vars();
        let k = counts.alphabet().size();
        let mut nodes = vec![vec![0u64; k]; d];
        let mut flat = vec![vec![0u64; k * k]; d * d];
        let mut xs = vec![0; d];
        for (idx, &c) in counts.counts().iter().enumerate() {
            if c == 0 {
                continue;
            }
            decode(idx, k, &mut xs);
            for i in 0..d {
                nodes[i][xs[i]] += c;
                for j in i + 1..d {
                    flat[i * d + j][xs[i] * k + xs[j]] += c;
                }
            }
        }
        let pairs = Edge::all_pairs(d)
            .map(|e| (e, std::mem::take(&mut flat[e.lo() * d + e.hi()])))
            .collect();
        PairCounts {
            d,
            k,
            n: counts.n(),
            nodes,
            pairs,
        }
    }

    fn normalized(&self, c: &[u64]) -> Vec<f64> {
        let n = self.n as f64;
        c.iter().map(|&x| x as f64 / n).collect()
    }

    fn mi_table(&self) -> BTreeMap<Edge, f64> {
        self.pairs
            .iter()
            .map(|(&e, c)| (e, pair_mi(self.k, &self.normalized(c))))
            .collect()
    }

    fn learn(&self, alphabet: Alphabet) -> Result<LearnResult> {
        let mi_table = self.mi_table();
        let MwstResult { tree, ties } = structure_from_mi(self.d, &mi_table)?;
        let nodes = self.nodes.iter().map(|c| self.normalized(c)).collect();
        let edges = tree.iter().map(|e| (e, self.normalized(&self.pairs[&e]))).collect();
        let model = TreeModel::projection(tree.clone(), alphabet, nodes, edges)?;
        Ok(LearnResult {
            structure: tree,
            model,
            mi_table,
            ties,
        })
    }
}

/// Learns the maximum-likelihood tree from a sample matrix.
pub fn learn(samples: &SampleMatrix, alphabet: Alphabet) -> Result<LearnResult> {
    PairCounts::from_samples(samples, alphabet)?.learn(alphabet)
}

/// Learns from a joint histogram; identical to [`learn`] on any sample set
/// with these counts.
pub fn learn_from_counts(counts: &EmpiricalCounts) -> Result<LearnResult> {
    PairCounts::from_counts(counts).learn(counts.alphabet())
}

/// Only the learned edge set, skipping parameter construction.
pub fn learn_structure_from_counts(counts: &EmpiricalCounts) -> Result<EdgeSet> {
    let pc = PairCounts::from_counts(counts);
    Ok(structure_from_mi(pc.d, &pc.mi_table())?.tree)
}

/// Empirical mutual information for every node pair.
pub fn empirical_mi_table(samples: &SampleMatrix, alphabet: Alphabet) -> Result<BTreeMap<Edge, f64>> {
    Ok(PairCounts::from_samples(samples, alphabet)?.mi_table())
}

/// Structure step: the MWST over the given mutual information weights.
pub fn structure_from_mi(d: usize, mi_table: &BTreeMap<Edge, f64>) -> Result<MwstResult> {
    mwst(d, mi_table)
}

/// Sample log-likelihood `sum_k log P(x_k)` under a tree model.
pub fn log_likelihood(model: &TreeModel, samples: &SampleMatrix) -> Result<f64> {
    samples.rows().map(|r| model.evaluate(r).map(f64::ln)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{empirical_distribution, DenseJoint};

    #[test]
    fn two_node_dataset_learns_single_edge_with_empirical_table() {
        let rows = [vec![0, 0], vec![0, 0], vec![1, 1], vec![0, 1]];
        let s = SampleMatrix::from_rows(&rows).unwrap();
        let r = learn(&s, Alphabet::binary()).unwrap();
        assert_eq!(r.structure.edges(), vec![Edge::new(0, 1)]);
        assert_eq!(r.model.edge_marginal(Edge::new(0, 1)).unwrap(), &[0.5, 0.25, 0.0, 0.25]);
    }

    #[test]
    fn counts_and_samples_paths_agree() {
        let rows: Vec<Vec<usize>> = (0..40)
            .map(|i| vec![i % 2, (i / 2) % 2, (i * 7 / 3) % 3 % 2, (i % 5 == 0) as usize])
            .collect();
        let s = SampleMatrix::from_rows(&rows).unwrap();
        let a = learn(&s, Alphabet::binary()).unwrap();
        let b = learn_from_counts(&empirical_distribution(&s, Alphabet::binary()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_range_symbol_rejected() {
        let s = SampleMatrix::from_rows(&[vec![0, 3]]).unwrap();
        assert!(matches!(
            learn(&s, Alphabet::binary()),
            Err(Error::OutOfRangeSymbol { .. })
        ));
    }

    #[test]
    fn learned_parameters_match_empirical_marginals() {
        let rows: Vec<Vec<usize>> = (0..30)
            .map(|i| vec![i % 3, (i / 3) % 3, (i % 3 + i / 10) % 3])
            .collect();
        let s = SampleMatrix::from_rows(&rows).unwrap();
        let alphabet = Alphabet::new(3).unwrap();
        let r = learn(&s, alphabet).unwrap();
        let dense: DenseJoint = empirical_distribution(&s, alphabet).unwrap().to_joint();
        for e in r.structure.iter() {
            let want = dense.pair_table(e.lo(), e.hi()).unwrap();
            let got = r.model.edge_marginal(e).unwrap();
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-15);
            }
        }
    }
}
