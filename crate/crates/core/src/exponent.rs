//! The structure-learning error exponent: the slowest crossover rate among
//! all (edge, non-edge) pairs whose swap produces a spanning tree.
//!
//! For a non-edge `e'`, only edges on the tree path between its endpoints
//! can be replaced by it. The cheapest such edge is its dominant
//! replacement, and the cheapest non-edge overall determines the exponent
//! and the dominant error tree (the true tree with that one swap applied).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::crossover::{approx_rate, exact_rate, CrossoverProblem, SolverConfig};
use crate::dist::{entropy, pair_mi, DenseJoint, PairJoint};
use crate::error::{Error, Result};
use crate::trees::{diameter, enumerate_spanning_trees, mwst, path_between, Edge, EdgeSet, TreeModel, TIE_TOL};

/// Rates within this absolute distance of the minimum are co-minimal.
pub const RATE_TIE_TOL: f64 = 1e-10;

/// An (edge, non-edge) pair with `I(P_e) - I(P_e')` at or below this is an
/// equality witness against positivity.
pub const WITNESS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Exact,
    Approx,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Mode::Exact),
            "approx" => Ok(Mode::Approx),
            _ => Err(Error::ParameterOutOfRange(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRate {
    pub edge: Edge,
    pub nonedge: Edge,
    #[serde(with = "crate::serde_rate")]
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentReport {
    pub mode: Mode,
    pub structure: EdgeSet,
    #[serde(with = "crate::serde_rate")]
    pub k_p: f64,
    /// `None` when there are no non-edges (two or fewer nodes).
    pub dominant_nonedge: Option<Edge>,
    pub replacement: Option<Edge>,
    pub dominant_error_tree: Option<EdgeSet>,
    /// Every `(edge, non-edge)` pair whose rate is within [`RATE_TIE_TOL`]
    /// of the exponent.
    pub co_minimal: Vec<(Edge, Edge)>,
    /// Rates of every evaluated pair, ordered by non-edge then edge.
    pub pair_rates: Vec<PairRate>,
    pub evaluations: usize,
}

impl ExponentReport {
    /// `evaluations <= diam * (d - 1) * (d - 2) / 2`.
    pub fn within_evaluation_bound(&self) -> bool {
        2 * self.evaluations <= evaluation_bound(&self.structure)
    }
}

/// Rate of a single pair under `mode`.
pub fn pair_rate(pair_joint: PairJoint, mode: Mode, cfg: &SolverConfig) -> Result<f64> {
    let problem = CrossoverProblem::new(pair_joint)?;
    match mode {
        Mode::Exact => Ok(exact_rate(&problem, cfg)?.rate),
        Mode::Approx => approx_rate(&problem, cfg.var_tol),
    }
}

/// Edge on the path of `nonedge` with the smallest rate, ties going to the
/// lexicographically smallest edge.
pub fn dominant_replacement<F>(tree: &EdgeSet, nonedge: Edge, mut rate_fn: F) -> Result<(Edge, f64)>
where
    F: FnMut(Edge, Edge) -> Result<f64>,
{
    if tree.contains(nonedge) {
        return Err(Error::InvalidEdgeSet(format!("{nonedge} is an edge of the tree")));
    }
    let mut rates = Vec::new();
    for e in path_between(tree, nonedge)? {
        rates.push((e, rate_fn(e, nonedge)?));
    }
    Ok(argmin_by_edge(&rates).expect("paths are non-empty"))
}

fn argmin_by_edge(rates: &[(Edge, f64)]) -> Option<(Edge, f64)> {
    let best = rates.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    rates
        .iter()
        .filter(|r| r.1 <= best + RATE_TIE_TOL)
        .min_by_key(|r| r.0)
        .map(|&(e, _)| (e, best))
}

/// `(non-edge, edge)` pairs searched by the exponent computation.
fn search_pairs(tree: &EdgeSet) -> Result<Vec<(Edge, Edge)>> {
    let mut pairs = Vec::new();
    for f in tree.non_edges() {
        for e in path_between(tree, f)? {
            pairs.push((f, e));
        }
    }
    Ok(pairs)
}

/// Number of rate evaluations [`error_exponent`] performs on `tree`.
pub fn evaluation_budget(tree: &EdgeSet) -> Result<usize> {
    if !tree.is_spanning_tree() {
        return Err(Error::InvalidEdgeSet(format!("{tree} is not a spanning tree")));
    }
    Ok(search_pairs(tree)?.len())
}

/// Twice the upper bound `diam * (d - 1) * (d - 2) / 2`, kept integral.
fn evaluation_bound(tree: &EdgeSet) -> usize {
    let d = tree.num_nodes();
    diameter(tree) * d.saturating_sub(1) * d.saturating_sub(2)
}

/// Upper bound on the evaluation count, `diam * (d - 1) * (d - 2) / 2`.
pub fn evaluation_upper_bound(tree: &EdgeSet) -> f64 {
    evaluation_bound(tree) as f64 / 2.0
}

fn eval_pairs<F>(pairs: &[(Edge, Edge)], rate_fn: F) -> Result<Vec<f64>>
where
    F: Fn(Edge, Edge) -> Result<f64> + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        pairs.par_iter().map(|&(f, e)| rate_fn(e, f)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        pairs.iter().map(|&(f, e)| rate_fn(e, f)).collect()
    }
}

/// Per-non-edge dominant replacement, then the overall minimum.
struct Search {
    k: f64,
    dominant: Option<(Edge, Edge)>,
    co_minimal: Vec<(Edge, Edge)>,
}

/// `candidates` holds `(non-edge, edge, rate)` for allowed swaps. Returns
/// the minimum over non-edges of the dominant replacement rate.
fn minimize(candidates: &[(Edge, Edge, f64)]) -> Search {
    let mut by_nonedge: std::collections::BTreeMap<Edge, Vec<(Edge, f64)>> = Default::default();
    for &(f, e, r) in candidates {
        by_nonedge.entry(f).or_default().push((e, r));
    }
    let dominant: Vec<(Edge, Edge, f64)> = by_nonedge
        .iter()
        .filter_map(|(&f, rates)| argmin_by_edge(rates).map(|(e, r)| (f, e, r)))
        .collect();
    let k = dominant.iter().map(|d| d.2).fold(f64::INFINITY, f64::min);
    let pick = dominant
        .iter()
        .filter(|d| d.2 <= k + RATE_TIE_TOL)
        .min_by_key(|d| (d.0, d.1))
        .filter(|d| d.2.is_finite())
        .map(|d| (d.0, d.1));
    let co_minimal = candidates
        .iter()
        .filter(|c| k.is_finite() && c.2 <= k + RATE_TIE_TOL)
        .map(|c| (c.1, c.0))
        .collect();
    Search {
        k,
        dominant: pick,
        co_minimal,
    }
}

/// Error exponent of a tree model.
pub fn error_exponent(model: &TreeModel, mode: Mode, cfg: &SolverConfig) -> Result<ExponentReport> {
    let tree = model.structure();
    let pairs = search_pairs(tree)?;
    let rates = eval_pairs(&pairs, |e, f| pair_rate(model.pair_joint(e, f)?, mode, cfg))?;
    let candidates: Vec<(Edge, Edge, f64)> = pairs.iter().zip(&rates).map(|(&(f, e), &r)| (f, e, r)).collect();
    let search = minimize(&candidates);
    let (dominant_nonedge, replacement) = match search.dominant {
        Some((f, e)) => (Some(f), Some(e)),
        None => (None, None),
    };
    Ok(ExponentReport {
        mode,
        structure: tree.clone(),
        k_p: search.k,
        dominant_nonedge,
        replacement,
        dominant_error_tree: search.dominant.map(|(f, e)| tree.swap(e, f)),
        co_minimal: search.co_minimal,
        pair_rates: candidates
            .iter()
            .map(|&(f, e, rate)| PairRate {
                edge: e,
                nonedge: f,
                rate,
            })
            .collect(),
        evaluations: pairs.len(),
    })
}

/// Log of the finite-sample bound
/// `(d-1)^2 (d-2) / 2 * C(n + 1 + |X|^4, n + 1) * exp(-n K)`.
/// Returns `-inf` when no error is possible (`d <= 2` or `K = inf`).
pub fn finite_sample_bound(k_p: f64, d: usize, alphabet_size: usize, n: u64) -> f64 {
    let pre = (d.saturating_sub(1).pow(2) * d.saturating_sub(2)) as f64 / 2.0;
    if pre == 0.0 || k_p == f64::INFINITY {
        return f64::NEG_INFINITY;
    }
    let m = (alphabet_size as f64).powi(4);
    let n1 = n as f64 + 1.0;
    let log_binom = ln_gamma(n1 + m + 1.0) - ln_gamma(n1 + 1.0) - ln_gamma(m + 1.0);
    pre.ln() + log_binom - n as f64 * k_p
}

/// A non-edge whose information is not strictly below that of an edge on
/// its path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub edge: Edge,
    pub nonedge: Edge,
    /// `I(P_e) - I(P_e')`.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositivityCertificate {
    pub structure: EdgeSet,
    pub positive: bool,
    pub witness: Option<Witness>,
    /// Edges whose pairwise marginal is a product; their removal leaves a
    /// proper forest.
    pub product_edges: Vec<Edge>,
}

impl PositivityCertificate {
    pub fn proper_forest(&self) -> bool {
        !self.product_edges.is_empty()
    }

    /// The path-information test and the structural test agree.
    pub fn consistent(&self) -> bool {
        self.positive != self.proper_forest()
    }
}

fn certify(model: &TreeModel, mi: impl Fn(Edge) -> Result<f64>) -> Result<PositivityCertificate> {
    let tree = model.structure();
    let mut witness: Option<Witness> = None;
    for f in tree.non_edges() {
        let i_f = mi(f)?;
        for e in path_between(tree, f)? {
            let gap = mi(e)? - i_f;
            if gap <= WITNESS_TOL && witness.as_ref().is_none_or(|w| gap < w.gap) {
                witness = Some(Witness {
                    edge: e,
                    nonedge: f,
                    gap,
                });
            }
        }
    }
    Ok(PositivityCertificate {
        structure: tree.clone(),
        positive: witness.is_none(),
        witness,
        product_edges: model.product_edges(),
    })
}

/// Checks that every non-edge carries strictly less information than every
/// edge on its path, for a tree model.
pub fn positivity_certificate(model: &TreeModel) -> Result<PositivityCertificate> {
    let k = model.alphabet().size();
    if model.edge_marginals().values().any(|t| t.iter().any(|&p| p <= 0.0)) {
        return Err(Error::NotStrictlyPositive);
    }
    certify(model, |f| Ok(pair_mi(k, model.marginal(&[f.lo(), f.hi()])?.probs())))
}

/// As [`positivity_certificate`], against the maximum-weight tree
/// projection of an arbitrary strictly positive joint.
pub fn positivity_certificate_dense(dense: &DenseJoint) -> Result<PositivityCertificate> {
    if !dense.strictly_positive() {
        return Err(Error::NotStrictlyPositive);
    }
    let k = dense.alphabet().size();
    let d = dense.num_vars();
    let mut mi = std::collections::BTreeMap::new();
    for e in Edge::all_pairs(d) {
        mi.insert(e, pair_mi(k, &dense.pair_table(e.lo(), e.hi())?));
    }
    let tree = mwst(d, &mi)?.tree;
    let model = TreeModel::project(dense, &tree)?;
    certify(&model, |e| Ok(mi[&e]))
}

/// All maximum-weight tree projections of a joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSet {
    /// `D(P || P*)`, equal for every member.
    pub pi_star: f64,
    /// Total edge information of the members.
    pub weight: f64,
    pub structures: Vec<EdgeSet>,
    pub models: Vec<TreeModel>,
}

impl ProjectionSet {
    pub fn contains(&self, s: &EdgeSet) -> bool {
        self.structures.binary_search(s).is_ok()
    }

    pub fn is_singleton(&self) -> bool {
        self.structures.len() == 1
    }
}

/// Every spanning tree whose total pairwise information is within
/// [`TIE_TOL`] of the maximum, by enumeration.
pub fn optimal_projections(dense: &DenseJoint) -> Result<ProjectionSet> {
    let d = dense.num_vars();
    let k = dense.alphabet().size();
    let mut mi = std::collections::BTreeMap::new();
    for e in Edge::all_pairs(d) {
        mi.insert(e, pair_mi(k, &dense.pair_table(e.lo(), e.hi())?));
    }
    let weighted: Vec<(f64, EdgeSet)> = enumerate_spanning_trees(d)?
        .map(|t| (t.iter().map(|e| mi[&e]).sum(), t))
        .collect();
    let weight = weighted.iter().map(|w| w.0).fold(f64::NEG_INFINITY, f64::max);
    let mut structures: Vec<EdgeSet> = weighted
        .into_iter()
        .filter(|w| w.0 >= weight - TIE_TOL)
        .map(|w| w.1)
        .collect();
    structures.sort();
    let models = structures
        .iter()
        .map(|s| TreeModel::project(dense, s))
        .collect::<Result<Vec<_>>>()?;
    let node_entropy: f64 = (0..d)
        .map(|i| dense.marginalize(&[i]).map(|m| entropy(m.probs())))
        .sum::<Result<f64>>()?;
    let pi_star = (node_entropy - dense.entropy() - weight).max(0.0);
    Ok(ProjectionSet {
        pi_star,
        weight,
        structures,
        models,
    })
}

/// A candidate swap skipped because its result is itself an optimal
/// projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedSwap {
    pub structure: EdgeSet,
    pub edge: Edge,
    pub nonedge: Edge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedReport {
    /// The exponent with `structure` set to the dominant projection.
    pub report: ExponentReport,
    pub projections: ProjectionSet,
    pub excluded: Vec<ExcludedSwap>,
    /// `(structure, non-edge)` pairs all of whose swaps were excluded; each
    /// contributes an infinite rate.
    pub unreachable: Vec<(EdgeSet, Edge)>,
}

/// Error exponent for learning any optimal tree projection of `dense`.
///
/// A swap that turns one optimal projection into another is not an error
/// and is skipped. With a single projection this is [`error_exponent`] on
/// that projection, with pair joints taken from `dense`.
pub fn generalized_exponent(dense: &DenseJoint, mode: Mode, cfg: &SolverConfig) -> Result<GeneralizedReport> {
    let projections = optimal_projections(dense)?;
    let members: BTreeSet<&EdgeSet> = projections.structures.iter().collect();

    let mut excluded = Vec::new();
    let mut unreachable = Vec::new();
    let mut reports = Vec::new();
    for structure in &projections.structures {
        let mut pairs = Vec::new();
        for (f, e) in search_pairs(structure)? {
            if members.contains(&structure.swap(e, f)) {
                excluded.push(ExcludedSwap {
                    structure: structure.clone(),
                    edge: e,
                    nonedge: f,
                });
            } else {
                pairs.push((f, e));
            }
        }
        for f in structure.non_edges() {
            if !pairs.iter().any(|p| p.0 == f) {
                unreachable.push((structure.clone(), f));
            }
        }
        let rates = eval_pairs(&pairs, |e, f| pair_rate(PairJoint::from_dense(dense, e, f)?, mode, cfg))?;
        let candidates: Vec<(Edge, Edge, f64)> = pairs.iter().zip(&rates).map(|(&(f, e), &r)| (f, e, r)).collect();
        let search = minimize(&candidates);
        let report = ExponentReport {
            mode,
            structure: structure.clone(),
            k_p: search.k,
            dominant_nonedge: search.dominant.map(|d| d.0),
            replacement: search.dominant.map(|d| d.1),
            dominant_error_tree: search.dominant.map(|(f, e)| structure.swap(e, f)),
            co_minimal: search.co_minimal,
            pair_rates: candidates
                .iter()
                .map(|&(f, e, rate)| PairRate {
                    edge: e,
                    nonedge: f,
                    rate,
                })
                .collect(),
            evaluations: pairs.len(),
        };
        reports.push(report);
    }
    let evaluations = reports.iter().map(|r| r.evaluations).sum();
    let k = reports.iter().map(|r| r.k_p).fold(f64::INFINITY, f64::min);
    // structures are sorted, so the first co-minimal one is lexicographically smallest
    let mut report = reports
        .into_iter()
        .find(|r| r.k_p <= k + RATE_TIE_TOL || k == f64::INFINITY)
        .expect("at least one spanning tree");
    report.evaluations = evaluations;
    Ok(GeneralizedReport {
        report,
        projections,
        excluded,
        unreachable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::Alphabet;
    use crate::simulate::{star4, table1_distribution};
    use std::collections::BTreeMap;

    #[test]
    fn star_budget_counts() {
        assert_eq!(evaluation_budget(&EdgeSet::star(4, 0)).unwrap(), 6);
        assert_eq!(evaluation_upper_bound(&EdgeSet::star(9, 0)), 56.0);
        // chain: non-edges (0,2), (1,3), (0,3) with paths of length 2, 2, 3
        assert_eq!(evaluation_budget(&EdgeSet::chain(4)).unwrap(), 7);
        assert_eq!(evaluation_upper_bound(&EdgeSet::chain(4)), 9.0);
    }

    #[test]
    fn bound_prefactor_and_zero_exponent() {
        // with n = 0 the binomial term is C(1 + 16, 1) = 17
        let b = finite_sample_bound(0.0, 4, 2, 0);
        assert!((b - (9.0f64 * 17.0).ln()).abs() < 1e-12);
        // K = 0 means no decay in n beyond the polynomial term
        let b1 = finite_sample_bound(0.0, 4, 2, 10);
        let b2 = finite_sample_bound(0.5, 4, 2, 10);
        assert!((b1 - b2 - 5.0).abs() < 1e-12);
        assert_eq!(finite_sample_bound(0.1, 2, 2, 10), f64::NEG_INFINITY);
    }

    #[test]
    fn symmetric_tie_breaks_lexicographically() {
        let m = star4(0.2).unwrap();
        let (e, r) = dominant_replacement(m.structure(), Edge::new(1, 2), |_, _| Ok(1.0)).unwrap();
        assert_eq!(e, Edge::new(0, 1));
        assert_eq!(r, 1.0);
        assert!(dominant_replacement(m.structure(), Edge::new(0, 1), |_, _| Ok(1.0)).is_err());
    }

    #[test]
    fn chain_replacement_matches_exhaustive() {
        let table: BTreeMap<Edge, f64> = [((0, 1), 0.3), ((1, 2), 0.1), ((2, 3), 0.2)]
            .into_iter()
            .map(|((a, b), r)| (Edge::new(a, b), r))
            .collect();
        let (e, r) = dominant_replacement(&EdgeSet::chain(4), Edge::new(0, 3), |e, _| Ok(table[&e])).unwrap();
        assert_eq!((e, r), (Edge::new(1, 2), 0.1));
    }

    #[test]
    fn approx_exponent_on_star4_is_six_pair_minimum() {
        let m = star4(0.2).unwrap();
        let cfg = SolverConfig::default();
        let r = error_exponent(&m, Mode::Approx, &cfg).unwrap();
        assert_eq!(r.evaluations, 6);
        assert_eq!(r.pair_rates.len(), 6);
        let min = r.pair_rates.iter().map(|p| p.rate).fold(f64::INFINITY, f64::min);
        assert_eq!(r.k_p, min);
        assert_eq!(r.dominant_nonedge, Some(Edge::new(1, 2)));
        assert_eq!(r.replacement, Some(Edge::new(0, 1)));
        assert_eq!(
            r.dominant_error_tree.unwrap().difference(m.structure()),
            vec![Edge::new(1, 2)]
        );
        assert_eq!(r.co_minimal.len(), 6);
    }

    #[test]
    fn star4_is_certified_positive() {
        let c = positivity_certificate(&star4(0.2).unwrap()).unwrap();
        assert!(c.positive && c.witness.is_none() && c.consistent());
    }

    #[test]
    fn independent_node_yields_witness() {
        // x0 independent of (x1, x2), which are correlated
        let pair = [0.4, 0.1, 0.1, 0.4];
        let probs: Vec<f64> = (0..8).map(|i| [0.3, 0.7][i / 4] * pair[i % 4]).collect();
        let dense = DenseJoint::new(3, Alphabet::binary(), probs).unwrap();
        let c = positivity_certificate_dense(&dense).unwrap();
        assert!(!c.positive);
        let w = c.witness.as_ref().unwrap();
        assert!(w.gap.abs() < 1e-12);
        assert!(c.proper_forest() && c.consistent());
    }

    #[test]
    fn tree_projection_is_singleton_with_zero_divergence() {
        let dense = star4(0.1).unwrap().to_dense().unwrap();
        let p = optimal_projections(&dense).unwrap();
        assert_eq!(p.structures, vec![EdgeSet::star(4, 0)]);
        assert!(p.pi_star.abs() < 1e-12);
    }

    #[test]
    fn table1_has_two_projections_and_excluded_swaps() {
        let dense = table1_distribution(0.1, 0.01).unwrap();
        let p = optimal_projections(&dense).unwrap();
        let want = vec![
            EdgeSet::from_pairs(3, &[(0, 1), (0, 2)]).unwrap(),
            EdgeSet::from_pairs(3, &[(0, 1), (1, 2)]).unwrap(),
        ];
        assert_eq!(p.structures, want);
        assert!(p.pi_star > 0.0);
        let g = generalized_exponent(&dense, Mode::Approx, &SolverConfig::default()).unwrap();
        // (0,2) <-> (1,2) swaps connect the two projections
        assert!(g
            .excluded
            .iter()
            .any(|x| x.structure == want[1] && x.edge == Edge::new(1, 2) && x.nonedge == Edge::new(0, 2)));
        assert!(g
            .excluded
            .iter()
            .any(|x| x.structure == want[0] && x.edge == Edge::new(0, 2) && x.nonedge == Edge::new(1, 2)));
        let dom = g.report.dominant_error_tree.unwrap();
        assert!(!p.contains(&dom));
    }

    #[test]
    fn all_swaps_excluded_gives_infinite_rate() {
        // uniform joint: every tree is optimal, so nothing counts as an error
        let dense = DenseJoint::uniform(3, Alphabet::binary()).unwrap();
        let g = generalized_exponent(&dense, Mode::Approx, &SolverConfig::default()).unwrap();
        assert_eq!(g.projections.structures.len(), 3);
        assert_eq!(g.report.k_p, f64::INFINITY);
        assert!(g.report.dominant_nonedge.is_none());
        assert_eq!(g.unreachable.len(), 3);
        let json = serde_json::to_string(&g.report).unwrap();
        assert!(json.contains("\"k_p\":\"inf\""));
        let back: ExponentReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g.report);
    }
}
