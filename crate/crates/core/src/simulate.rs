//! Monte Carlo estimation of the structure-learning error probability, and
//! constructors for the experiment models.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chow_liu::{learn, learn_structure_from_counts};
use crate::dist::{pair_mi, table_len, Alphabet, DenseJoint, EmpiricalCounts, PairJoint};
use crate::error::{Error, Result};
use crate::exponent::optimal_projections;
use crate::trees::{mix_seed, Edge, EdgeSet, TreeModel, TreeSampler};

/// Runs above this count trigger a warning from the CLI.
pub const RUNS_WARN_THRESHOLD: u64 = 10_000_000;

pub const DEFAULT_RUNS: u64 = 100_000;

/// Dense tables up to this size are sampled one joint cell per draw.
const JOINT_SAMPLER_CELLS: usize = 1 << 12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Samples per run.
    pub n: usize,
    /// Number of independent runs.
    pub runs: u64,
    pub seed: u64,
    /// Worker threads; `None` uses the global pool. Results do not depend on it.
    pub workers: Option<usize>,
}

impl SimConfig {
    pub fn new(n: usize, runs: u64, seed: u64) -> Self {
        SimConfig {
            n,
            runs,
            seed,
            workers: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.runs == 0 {
            return Err(Error::ParameterOutOfRange(
                "samples per run and run count must be positive".into(),
            ));
        }
        if self.workers == Some(0) {
            return Err(Error::ParameterOutOfRange("workers must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub n: usize,
    pub runs: u64,
    pub errors: u64,
    pub p_hat: f64,
    /// `-(1/n) log p_hat`, infinite when no errors were observed.
    #[serde(with = "crate::serde_rate")]
    pub simulated_rate: f64,
    /// Set when no errors were observed, so the rate is not estimable at
    /// this run count.
    pub insufficient_runs: bool,
    /// `displaced[k]` counts erroneous runs whose learned tree differs from
    /// the truth in exactly `k` edges.
    pub displaced: Vec<u64>,
    /// Erroneous structures with their counts, most frequent first.
    pub error_structures: Vec<(EdgeSet, u64)>,
}

impl SimResult {
    /// Standard error of `p_hat`.
    pub fn std_error(&self) -> f64 {
        (self.p_hat * (1.0 - self.p_hat) / self.runs as f64).sqrt()
    }

    /// Number of edges by which the most frequent erroneous structure differs.
    pub fn modal_displacement(&self) -> Option<usize> {
        self.displaced
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .max_by_key(|(k, &c)| (c, std::cmp::Reverse(*k)))
            .map(|(k, _)| k)
    }
}

/// Inverse-CDF sampler over the cells of a small dense joint.
struct JointSampler {
    cdf: Vec<f64>,
}

impl JointSampler {
    fn new(joint: &DenseJoint) -> Self {
        let mut acc = 0.0;
        let cdf = joint
            .probs()
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        JointSampler { cdf }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        let u = rng.random::<f64>() * self.cdf[self.cdf.len() - 1];
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}

enum Source {
    Joint(JointSampler, DenseJoint),
    Tree(TreeSampler, usize, Alphabet),
}

impl Source {
    fn from_model(model: &TreeModel) -> Result<Self> {
        match table_len(model.alphabet(), model.num_nodes()) {
            Some(len) if len <= JOINT_SAMPLER_CELLS => {
                let dense = model.to_dense()?;
                Ok(Source::Joint(JointSampler::new(&dense), dense))
            }
            _ => Ok(Source::Tree(model.sampler(), model.num_nodes(), model.alphabet())),
        }
    }

    fn from_dense(dense: &DenseJoint) -> Self {
        Source::Joint(JointSampler::new(dense), dense.clone())
    }

    /// Learns the Chow-Liu structure from `n` fresh samples.
    fn learned_structure(&self, n: usize, seed: u64) -> Result<EdgeSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            Source::Joint(sampler, dense) => {
                let mut counts = vec![0u64; dense.probs().len()];
                for _ in 0..n {
                    counts[sampler.draw(&mut rng)] += 1;
                }
                let counts = EmpiricalCounts::from_counts(dense.num_vars(), dense.alphabet(), counts)?;
                learn_structure_from_counts(&counts)
            }
            Source::Tree(sampler, d, alphabet) => {
                let mut data = vec![0; n * d];
                for row in data.chunks_exact_mut(*d) {
                    sampler.draw(&mut rng, row);
                }
                let samples = crate::dist::SampleMatrix::new(*d, data)?;
                Ok(learn(&samples, *alphabet)?.structure)
            }
        }
    }
}

#[derive(Default)]
struct Tally {
    errors: u64,
    displaced: Vec<u64>,
    structures: BTreeMap<EdgeSet, u64>,
}

impl Tally {
    fn merge(mut self, other: Tally) -> Tally {
        self.errors += other.errors;
        if self.displaced.len() < other.displaced.len() {
            self.displaced.resize(other.displaced.len(), 0);
        }
        for (a, b) in self.displaced.iter_mut().zip(&other.displaced) {
            *a += b;
        }
        for (s, c) in other.structures {
            *self.structures.entry(s).or_default() += c;
        }
        self
    }
}

const CHUNK: u64 = 2048;

fn run_chunk(source: &Source, truth: &BTreeSet<EdgeSet>, d: usize, cfg: &SimConfig, chunk: u64) -> Result<Tally> {
    let mut tally = Tally {
        displaced: vec![0; d],
        ..Tally::default()
    };
    let start = chunk * CHUNK;
    let end = (start + CHUNK).min(cfg.runs);
    for run in start..end {
        let learned = source.learned_structure(cfg.n, mix_seed(cfg.seed, run))?;
        if truth.contains(&learned) {
            continue;
        }
        let displaced = truth.iter().map(|t| t.difference(&learned).len()).min().unwrap_or(0);
        tally.errors += 1;
        tally.displaced[displaced] += 1;
        *tally.structures.entry(learned).or_default() += 1;
    }
    Ok(tally)
}

fn run_all(source: &Source, truth: &BTreeSet<EdgeSet>, d: usize, cfg: &SimConfig) -> Result<SimResult> {
    cfg.validate()?;
    let chunks = cfg.runs.div_ceil(CHUNK);
    #[cfg(feature = "parallel")]
    let tallies: Vec<Result<Tally>> = {
        use rayon::prelude::*;
        let work = || {
            (0..chunks)
                .into_par_iter()
                .map(|c| run_chunk(source, truth, d, cfg, c))
                .collect()
        };
        match cfg.workers {
            Some(w) => rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::ParameterOutOfRange(e.to_string()))?
                .install(work),
            None => work(),
        }
    };
    #[cfg(not(feature = "parallel"))]
    let tallies: Vec<Result<Tally>> = (0..chunks).map(|c| run_chunk(source, truth, d, cfg, c)).collect();

    let mut total = Tally {
        displaced: vec![0; d],
        ..Tally::default()
    };
    for t in tallies {
        total = total.merge(t?);
    }
    let p_hat = total.errors as f64 / cfg.runs as f64;
    let simulated_rate = if total.errors == 0 {
        f64::INFINITY
    } else {
        -p_hat.ln() / cfg.n as f64
    };
    let mut error_structures: Vec<(EdgeSet, u64)> = total.structures.into_iter().collect();
    error_structures.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(SimResult {
        n: cfg.n,
        runs: cfg.runs,
        errors: total.errors,
        p_hat,
        simulated_rate,
        insufficient_runs: total.errors == 0,
        displaced: total.displaced,
        error_structures,
    })
}

/// Estimates `P(E_ML != E_P)` by repeated sampling and Chow-Liu learning.
pub fn estimate_error_probability(model: &TreeModel, cfg: &SimConfig) -> Result<SimResult> {
    let source = Source::from_model(model)?;
    let truth = BTreeSet::from([model.structure().clone()]);
    run_all(&source, &truth, model.num_nodes(), cfg)
}

/// Like [`estimate_error_probability`], but learning any optimal tree
/// projection of `dense` counts as success.
pub fn estimate_generalized_error_probability(dense: &DenseJoint, cfg: &SimConfig) -> Result<SimResult> {
    let projections = optimal_projections(dense)?;
    let truth: BTreeSet<EdgeSet> = projections.structures.iter().cloned().collect();
    run_all(&Source::from_dense(dense), &truth, dense.num_vars(), cfg)
}

/// The 4-node binary star used in the experiments: node 0 is the hub with
/// `P(x_0 = 0) = 1/3`, and each leaf copies the hub with probability
/// `1/2 + gamma`.
pub fn star4(gamma: f64) -> Result<TreeModel> {
    if !(gamma > 0.0 && gamma < 0.5) {
        return Err(Error::ParameterOutOfRange(format!(
            "gamma = {gamma} must lie in (0, 1/2)"
        )));
    }
    let cond = vec![0.5 + gamma, 0.5 - gamma, 0.5 - gamma, 0.5 + gamma];
    let conditionals = (1..4).map(|v| (v, cond.clone())).collect();
    TreeModel::from_conditionals(
        EdgeSet::star(4, 0),
        Alphabet::binary(),
        0,
        vec![1.0 / 3.0, 2.0 / 3.0],
        &conditionals,
    )
}

/// Star model on `d` nodes whose hub-leaf-leaf-leaf marginals all equal
/// `q_ab`, a joint over `(hub, i, j, k)`.
///
/// `q_ab` must itself factorize as a star around its first variable with
/// identical leaf conditionals, and the edge pair marginal `Q_a` must carry
/// strictly more information than the leaf pair marginal `Q_b`, which must
/// be positive.
pub fn symmetric_star(d: usize, q_ab: &PairJoint) -> Result<TreeModel> {
    if q_ab.vars().len() != 4 {
        return Err(Error::InconsistentMarginals(
            "Q_ab must cover four distinct variables".into(),
        ));
    }
    let q_ab = &q_ab.to_dense();
    if d < 3 {
        return Err(Error::ParameterOutOfRange(format!(
            "symmetric star needs d >= 3, got {d}"
        )));
    }
    const TOL: f64 = 1e-10;
    let k = q_ab.alphabet().size();
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= TOL);
    let q_a = q_ab.pair_table(0, 1)?;
    for leaf in [2, 3] {
        if !close(&q_ab.pair_table(0, leaf)?, &q_a) {
            return Err(Error::InconsistentMarginals(format!(
                "hub-leaf marginal (0,{leaf}) differs from Q_a"
            )));
        }
    }
    let q_b = q_ab.pair_table(1, 2)?;
    for (i, j) in [(1, 3), (2, 3)] {
        if !close(&q_ab.pair_table(i, j)?, &q_b) {
            return Err(Error::InconsistentMarginals(format!(
                "leaf marginal ({i},{j}) differs from Q_b"
            )));
        }
    }
    let hub = q_ab.marginalize(&[0])?.probs().to_vec();
    let cond = |a: usize, b: usize| if hub[a] > 0.0 { q_a[a * k + b] / hub[a] } else { 0.0 };
    let mut xs = [0usize; 4];
    for (idx, &p) in q_ab.probs().iter().enumerate() {
        crate::dist::decode(idx, k, &mut xs);
        let want = hub[xs[0]] * cond(xs[0], xs[1]) * cond(xs[0], xs[2]) * cond(xs[0], xs[3]);
        if (p - want).abs() > TOL {
            return Err(Error::InconsistentMarginals(
                "Q_ab does not factorize as a star around its first variable".into(),
            ));
        }
    }
    let (ia, ib) = (pair_mi(k, &q_a), pair_mi(k, &q_b));
    if !(ia > ib && ib > 0.0) {
        return Err(Error::InconsistentMarginals(format!(
            "need I(Q_a) > I(Q_b) > 0, got {ia} and {ib}"
        )));
    }
    let conditional: Vec<f64> = (0..k * k).map(|c| cond(c / k, c % k)).collect();
    let conditionals = (1..d).map(|v| (v, conditional.clone())).collect();
    TreeModel::from_conditionals(EdgeSet::star(d, 0), q_ab.alphabet(), 0, hub, &conditionals)
}

/// Binary tree model with the root marginal and every conditional drawn
/// uniformly on `[0, 1]`, rooted at node 0.
pub fn example2_random_tree(structure: &EdgeSet, seed: u64) -> Result<TreeModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || rng.random::<f64>();
    let root0 = draw();
    let d = structure.num_nodes();
    // BFS from the root so conditionals are drawn parent before child
    let adj = structure.adjacency();
    let mut seen = vec![false; d];
    let mut queue = std::collections::VecDeque::from([0usize]);
    seen[0] = true;
    let mut conditionals = BTreeMap::new();
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                let (t0, t1) = (draw(), draw());
                conditionals.insert(v, vec![t0, 1.0 - t0, t1, 1.0 - t1]);
                queue.push_back(v);
            }
        }
    }
    TreeModel::from_conditionals(
        structure.clone(),
        Alphabet::binary(),
        0,
        vec![root0, 1.0 - root0],
        &conditionals,
    )
}

/// The three-variable non-tree distribution whose optimal tree projection is
/// not unique: `x_0, x_1` agree with probability `1 - 2 kappa`, and the two
/// pairwise informations `I(x_1; x_2)` and `I(x_0; x_2)` coincide.
pub fn table1_distribution(xi: f64, kappa: f64) -> Result<DenseJoint> {
    if !(xi > 0.0 && xi < 1.0 / 3.0) {
        return Err(Error::ParameterOutOfRange(format!("xi = {xi} must lie in (0, 1/3)")));
    }
    if !(kappa > 0.0 && kappa < 0.5) {
        return Err(Error::ParameterOutOfRange(format!(
            "kappa = {kappa} must lie in (0, 1/2)"
        )));
    }
    let big = 0.5 - kappa;
    let probs = vec![
        (0.5 - xi) * big,
        (0.5 + xi) * big,
        (1.0 / 3.0 + xi) * kappa,
        (2.0 / 3.0 - xi) * kappa,
        (2.0 / 3.0 - xi) * kappa,
        (1.0 / 3.0 + xi) * kappa,
        (0.5 - xi) * big,
        (0.5 + xi) * big,
    ];
    DenseJoint::new(3, Alphabet::binary(), probs)
}

/// Closed form of `I(x_0; x_1)` for [`table1_distribution`].
pub fn table1_edge_information(kappa: f64) -> f64 {
    std::f64::consts::LN_2 + (1.0 - 2.0 * kappa) * (1.0 - 2.0 * kappa).ln() + 2.0 * kappa * (2.0 * kappa).ln()
}

/// Distribution in which node 0 is independent of all other nodes, with
/// random strictly positive factors.
pub fn independent_component_distribution(d: usize, seed: u64) -> Result<DenseJoint> {
    if d < 3 {
        return Err(Error::ParameterOutOfRange(format!("need d >= 3, got {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos = || 0.05 + rng.random::<f64>();
    let a = pos();
    let lone = [a, 1.0];
    let rest_len = 1usize << (d - 1);
    let rest: Vec<f64> = (0..rest_len).map(|_| pos()).collect();
    let (sa, sr) = (lone.iter().sum::<f64>(), rest.iter().sum::<f64>());
    let probs = (0..2 * rest_len)
        .map(|idx| lone[idx / rest_len] / sa * rest[idx % rest_len] / sr)
        .collect();
    DenseJoint::new(d, Alphabet::binary(), probs)
}

/// Convenience: the (edge, non-edge) pair the star experiments report.
pub fn star4_reference_pair() -> (Edge, Edge) {
    (Edge::new(0, 1), Edge::new(1, 2))
}
