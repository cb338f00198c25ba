//! Crossover rates between an edge `e` and a non-edge `e'`: the exponential
//! rate at which the empirical mutual information of `e'` overtakes that of
//! `e`.
//!
//! Three routes are provided:
//!
//! * [`exact_rate`] minimizes `D(Q || P_{e,e'})` subject to
//!   `I(Q_e') = I(Q_e)` with a multi-start penalty solver,
//! * [`approx_rate`] is the closed form `(I(P_e') - I(P_e))^2 / (2 Var(s_e' - s_e))`
//!   valid when the two pairwise marginals are close,
//! * [`empirical_rate`] runs the exact solver on the empirical pair joint.

mod solver;

use nalgebra::{DMatrix, DVector, Matrix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{
    empirical_distribution, information_density, Alphabet, EmpiricalCounts, PairJoint, PairSide, SampleMatrix,
};
use crate::error::{Error, Result};
use crate::trees::Edge;

use solver::{solve_from, LocalSolution, Objective};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub restarts: usize,
    pub penalty_stages: usize,
    pub penalty_growth: f64,
    /// Starting penalty weight; `None` uses `1 / Var(s_e' - s_e)` at `P`.
    pub initial_penalty: Option<f64>,
    pub constraint_tol: f64,
    pub stationarity_tol: f64,
    pub var_tol: f64,
    pub max_inner_iters: usize,
    pub seed: u64,
    /// Add `1 / (2n)` to every empirical cell before solving.
    pub smoothing: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            restarts: 20,
            penalty_stages: 6,
            penalty_growth: 10.0,
            initial_penalty: None,
            constraint_tol: 1e-8,
            stationarity_tol: 1e-10,
            var_tol: 1e-12,
            max_inner_iters: 500,
            seed: 0x5EED,
            smoothing: false,
        }
    }
}

/// The joint of an (edge, non-edge) pair, validated for the solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossoverProblem {
    pair_joint: PairJoint,
}

impl CrossoverProblem {
    pub fn new(pair_joint: PairJoint) -> Result<Self> {
        if !pair_joint.strictly_positive() {
            return Err(Error::NotStrictlyPositive);
        }
        Ok(CrossoverProblem { pair_joint })
    }

    pub fn pair_joint(&self) -> &PairJoint {
        &self.pair_joint
    }

    pub fn edge(&self) -> Edge {
        self.pair_joint.edge()
    }

    pub fn nonedge(&self) -> Edge {
        self.pair_joint.nonedge()
    }

    /// `I(P_e') - I(P_e)`.
    pub fn mi_gap(&self) -> f64 {
        self.pair_joint.mutual_information(PairSide::NonEdge) - self.pair_joint.mutual_information(PairSide::Edge)
    }

    /// `Var(s_e' - s_e)` under `P_{e,e'}`.
    pub fn info_density_variance(&self) -> f64 {
        let delta = self.density_difference();
        let p = self.pair_joint.probs();
        let mean: f64 = delta.iter().zip(p).map(|(s, q)| s * q).sum();
        delta.iter().zip(p).map(|(s, q)| q * (s - mean).powi(2)).sum()
    }

    fn density_difference(&self) -> Vec<f64> {
        let se = information_density(&self.pair_joint, PairSide::Edge).expect("strictly positive");
        let sf = information_density(&self.pair_joint, PairSide::NonEdge).expect("strictly positive");
        sf.values.iter().zip(&se.values).map(|(a, b)| a - b).collect()
    }

    fn objective(&self) -> Objective<'_> {
        Objective {
            p: self.pair_joint.probs(),
            k: self.pair_joint.alphabet().size(),
            nv: self.pair_joint.vars().len(),
            edge_pos: self.pair_joint.positions(PairSide::Edge),
            nonedge_pos: self.pair_joint.positions(PairSide::NonEdge),
        }
    }

    /// `D(Q || P_{e,e'})` for a candidate table in this problem's layout.
    pub fn divergence(&self, q: &[f64]) -> f64 {
        self.objective().divergence(q)
    }

    /// `I(Q_e') - I(Q_e)` for a candidate table in this problem's layout.
    pub fn constraint(&self, q: &[f64]) -> f64 {
        self.objective().constraint(q)
    }
}

/// Summary of one restart of the exact solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub objective: f64,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverOutcome {
    pub rate: f64,
    pub q_star: PairJoint,
    /// `|I(Q*_e') - I(Q*_e)|`.
    pub constraint_residual: f64,
    /// Largest KKT stationarity residual of the returned point.
    pub stationarity: f64,
    pub restarts_used: usize,
    pub converged: bool,
    pub restarts: Vec<RestartSummary>,
}

impl CrossoverOutcome {
    /// Spread of the objective over converged restarts that reached the
    /// best basin (within `basin_tol` of the best objective).
    pub fn consensus_spread(&self, basin_tol: f64) -> f64 {
        let conv: Vec<f64> = self
            .restarts
            .iter()
            .filter(|r| r.converged)
            .map(|r| r.objective)
            .collect();
        let best = conv.iter().copied().fold(f64::INFINITY, f64::min);
        let basin: Vec<f64> = conv.into_iter().filter(|&o| o - best <= basin_tol).collect();
        basin.iter().copied().fold(f64::NEG_INFINITY, f64::max) - best
    }

    /// Number of converged restarts.
    pub fn converged_restarts(&self) -> usize {
        self.restarts.iter().filter(|r| r.converged).count()
    }
}

/// Starting points: `P` itself, the uniform table, then Dirichlet(1) draws.
fn starting_points(p: &[f64], restarts: usize, seed: u64) -> Vec<Vec<f64>> {
    let m = p.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = vec![p.to_vec(), vec![1.0 / m as f64; m]];
    while starts.len() < restarts {
        let g: Vec<f64> = (0..m).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let s: f64 = g.iter().sum();
        starts.push(g.iter().map(|v| v / s).collect());
    }
    starts.truncate(restarts.max(1));
    starts
}

fn run_restarts(problem: &CrossoverProblem, starts: &[Vec<f64>], mu0: f64, cfg: &SolverConfig) -> Vec<LocalSolution> {
    let obj = problem.objective();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        starts.par_iter().map(|q0| solve_from(&obj, q0, mu0, cfg)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        starts.iter().map(|q0| solve_from(&obj, q0, mu0, cfg)).collect()
    }
}

/// Exact crossover rate by constrained KL minimization.
pub fn exact_rate(problem: &CrossoverProblem, cfg: &SolverConfig) -> Result<CrossoverOutcome> {
    let pj = problem.pair_joint();
    let gap = problem.mi_gap();
    if gap.abs() <= cfg.constraint_tol {
        return Ok(CrossoverOutcome {
            rate: 0.0,
            q_star: pj.clone(),
            constraint_residual: gap.abs(),
            stationarity: 0.0,
            restarts_used: 0,
            converged: true,
            restarts: Vec::new(),
        });
    }
    let var = problem.info_density_variance();
    let mu0 = cfg
        .initial_penalty
        .unwrap_or(if var > cfg.var_tol { 1.0 / var } else { 1.0 });
    let starts = starting_points(pj.probs(), cfg.restarts, cfg.seed);
    let solutions = run_restarts(problem, &starts, mu0, cfg);

    let restarts: Vec<RestartSummary> = solutions
        .iter()
        .map(|s| RestartSummary {
            objective: s.objective,
            residual: s.residual,
            converged: s.converged(cfg),
        })
        .collect();
    // best converged restart, ties broken by restart index
    let pick = |only_converged: bool| {
        solutions
            .iter()
            .enumerate()
            .filter(|(_, s)| !only_converged || s.converged(cfg))
            .filter(|(_, s)| s.objective.is_finite())
            .min_by(|(i, a), (j, b)| {
                let key = |s: &LocalSolution| if only_converged { s.objective } else { s.residual };
                key(a).total_cmp(&key(b)).then(i.cmp(j))
            })
            .map(|(i, _)| i)
    };
    let (best, converged) = match pick(true) {
        Some(i) => (i, true),
        None => (pick(false).unwrap_or(0), false),
    };
    let sol = &solutions[best];
    let q_star = pj.with_probs(sol.q.clone())?;
    let outcome = CrossoverOutcome {
        rate: problem.divergence(q_star.probs()),
        constraint_residual: problem.constraint(q_star.probs()).abs(),
        stationarity: sol.stationarity,
        q_star,
        restarts_used: solutions.len(),
        converged,
        restarts,
    };
    if converged {
        Ok(outcome)
    } else {
        Err(Error::SolverNonConvergence {
            restarts: solutions.len(),
            best: Box::new(outcome),
        })
    }
}

/// Euclidean approximation `(I(P_e') - I(P_e))^2 / (2 Var(s_e' - s_e))`.
pub fn approx_rate(problem: &CrossoverProblem, var_tol: f64) -> Result<f64> {
    let gap = problem.mi_gap();
    let var = problem.info_density_variance();
    if var < var_tol {
        if gap.abs() <= var_tol {
            return Ok(0.0);
        }
        return Err(Error::DegenerateInformationDensity { variance: var, gap });
    }
    Ok(gap * gap / (2.0 * var))
}

/// The weighting `psi = [(L K^-1 L^T)^-1]_11` of the linearized least-squares
/// problem, with `L = [s_e' - s_e; 1]` and `K^-1 = diag(P)`.
pub fn psi_least_squares(problem: &CrossoverProblem) -> Result<f64> {
    let (l, kinv) = least_squares_system(problem);
    let m = &l * DMatrix::from_diagonal(&kinv) * l.transpose();
    let m = Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    let inv = m.try_inverse().ok_or(Error::DegenerateInformationDensity {
        variance: m.determinant(),
        gap: problem.mi_gap(),
    })?;
    Ok(inv[(0, 0)])
}

fn least_squares_system(problem: &CrossoverProblem) -> (DMatrix<f64>, DVector<f64>) {
    let delta = problem.density_difference();
    let m = delta.len();
    let mut l = DMatrix::<f64>::zeros(2, m);
    for (j, d) in delta.iter().enumerate() {
        l[(0, j)] = *d;
        l[(1, j)] = 1.0;
    }
    let kinv = DVector::from_column_slice(problem.pair_joint().probs());
    (l, kinv)
}

/// Solves the linearized least-squares problem directly and returns the
/// minimizing perturbation together with `J~ = 1/2 eps^T K eps`.
pub fn approx_rate_least_squares(problem: &CrossoverProblem) -> Result<(Vec<f64>, f64)> {
    let (l, kinv) = least_squares_system(problem);
    let kinv_lt = DMatrix::from_diagonal(&kinv) * l.transpose();
    let m = &l * &kinv_lt;
    let rhs = DVector::from_row_slice(&[-problem.mi_gap(), 0.0]);
    let sol = m.lu().solve(&rhs).ok_or(Error::DegenerateInformationDensity {
        variance: 0.0,
        gap: problem.mi_gap(),
    })?;
    let eps = kinv_lt * sol;
    let p = problem.pair_joint().probs();
    let j = 0.5 * eps.iter().zip(p).map(|(e, q)| e * e / q).sum::<f64>();
    Ok((eps.iter().copied().collect(), j))
}

/// `||P_e - P_e'||_inf < eps`.
pub fn is_very_noisy(pair_joint: &PairJoint, eps: f64) -> bool {
    let a = pair_joint.side_marginal(PairSide::Edge);
    let b = pair_joint.side_marginal(PairSide::NonEdge);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) < eps
}

/// Empirical pair joint of `(edge, nonedge)` from a full sample matrix,
/// smoothed when `smoothing` is set.
pub fn empirical_pair_joint(
    samples: &SampleMatrix,
    alphabet: Alphabet,
    edge: Edge,
    nonedge: Edge,
    smoothing: bool,
) -> Result<PairJoint> {
    let layout = PairJoint::new(edge, nonedge, alphabet, {
        let nv = if edge.shares_node(nonedge) { 3 } else { 4 };
        vec![1.0 / alphabet.size().pow(nv) as f64; alphabet.size().pow(nv)]
    })?;
    let restricted = samples.select_columns(layout.vars())?;
    let counts = empirical_distribution(&restricted, alphabet)?;
    pair_joint_from_counts(&counts, edge, nonedge, smoothing)
}

/// Pair joint from counts already laid out in canonical variable order.
pub fn pair_joint_from_counts(
    counts: &EmpiricalCounts,
    edge: Edge,
    nonedge: Edge,
    smoothing: bool,
) -> Result<PairJoint> {
    let joint = if counts.has_zero_cells() {
        if !smoothing {
            return Err(Error::ZeroCellsWithoutSmoothing);
        }
        counts.smoothed(1.0 / (2.0 * counts.n() as f64))
    } else {
        counts.to_joint()
    };
    PairJoint::new(edge, nonedge, counts.alphabet(), joint.probs().to_vec())
}

/// Plug-in crossover rate computed from samples.
pub fn empirical_rate(
    samples: &SampleMatrix,
    alphabet: Alphabet,
    edge: Edge,
    nonedge: Edge,
    cfg: &SolverConfig,
) -> Result<CrossoverOutcome> {
    let pj = empirical_pair_joint(samples, alphabet, edge, nonedge, cfg.smoothing)?;
    exact_rate(&CrossoverProblem::new(pj)?, cfg)
}
