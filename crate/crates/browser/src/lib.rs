//! Browser bindings. Every export returns a JSON string.

use serde::Serialize;
use treerate::crossover::{approx_rate, exact_rate, CrossoverProblem, SolverConfig};
use treerate::dist::{mutual_information, PairSide};
use treerate::exponent::{error_exponent, finite_sample_bound, generalized_exponent, optimal_projections, Mode};
use treerate::serde_rate;
use treerate::simulate::{
    estimate_error_probability, star4, star4_reference_pair, table1_distribution, table1_edge_information, SimConfig,
};
use treerate::trees::{Edge, EdgeSet};
use wasm_bindgen::prelude::*;

/// Largest sweep and run count the page will request.
pub const MAX_STEPS: usize = 60;
pub const MAX_RUNS: u64 = 200_000;

#[derive(Debug, Serialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub mi_edge: f64,
    pub mi_nonedge: f64,
    pub exact: f64,
    pub approx: f64,
}

pub fn sweep(gamma_min: f64, gamma_max: f64, steps: usize) -> treerate::Result<Vec<SweepRow>> {
    let steps = steps.clamp(2, MAX_STEPS);
    let cfg = SolverConfig::default();
    let (edge, nonedge) = star4_reference_pair();
    (0..steps)
        .map(|i| {
            let gamma = gamma_min + (gamma_max - gamma_min) * i as f64 / (steps - 1) as f64;
            let problem = CrossoverProblem::new(star4(gamma)?.pair_joint(edge, nonedge)?)?;
            Ok(SweepRow {
                gamma,
                mi_edge: problem.pair_joint().mutual_information(PairSide::Edge),
                mi_nonedge: problem.pair_joint().mutual_information(PairSide::NonEdge),
                exact: exact_rate(&problem, &cfg)?.rate,
                approx: approx_rate(&problem, cfg.var_tol)?,
            })
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct PairInformation {
    pub edge: Edge,
    pub mi: f64,
}

#[derive(Debug, Serialize)]
pub struct Projection {
    pub probs: Vec<f64>,
    pub information: Vec<PairInformation>,
    pub closed_form: f64,
    pub pi_star: f64,
    pub structures: Vec<EdgeSet>,
    #[serde(with = "serde_rate")]
    pub k_approx: f64,
    pub excluded: Vec<(Edge, Edge)>,
}

pub fn projection(xi: f64, kappa: f64) -> treerate::Result<Projection> {
    let p = table1_distribution(xi, kappa)?;
    let information = Edge::all_pairs(3)
        .map(|e| {
            Ok(PairInformation {
                edge: e,
                mi: mutual_information(&p.marginalize(&[e.lo(), e.hi()])?)?,
            })
        })
        .collect::<treerate::Result<_>>()?;
    let set = optimal_projections(&p)?;
    let g = generalized_exponent(&p, Mode::Approx, &SolverConfig::default())?;
    Ok(Projection {
        probs: p.probs().to_vec(),
        information,
        closed_form: table1_edge_information(kappa),
        pi_star: set.pi_star,
        structures: set.structures,
        k_approx: g.report.k_p,
        excluded: g.excluded.iter().map(|x| (x.edge, x.nonedge)).collect(),
    })
}

#[derive(Debug, Serialize)]
pub struct Simulation {
    pub n: usize,
    pub runs: u64,
    pub errors: u64,
    pub p_hat: f64,
    #[serde(with = "serde_rate")]
    pub simulated_rate: f64,
    pub k_exact: f64,
    pub log_bound: f64,
    pub error_structures: Vec<(EdgeSet, u64)>,
}

pub fn simulation(gamma: f64, n: usize, runs: u64, seed: u64) -> treerate::Result<Simulation> {
    let model = star4(gamma)?;
    let k = error_exponent(&model, Mode::Exact, &SolverConfig::default())?.k_p;
    let mut r = estimate_error_probability(&model, &SimConfig::new(n, runs.min(MAX_RUNS), seed))?;
    r.error_structures.truncate(6);
    Ok(Simulation {
        n,
        runs: r.runs,
        errors: r.errors,
        p_hat: r.p_hat,
        simulated_rate: r.simulated_rate,
        k_exact: k,
        log_bound: finite_sample_bound(k, 4, 2, n as u64),
        error_structures: r.error_structures,
    })
}

fn to_js<T: Serialize>(r: treerate::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// Exact and approximate crossover rates of the star's dominant pair over
/// an evenly spaced gamma grid.
#[wasm_bindgen]
pub fn star4_sweep(gamma_min: f64, gamma_max: f64, steps: usize) -> Result<String, JsError> {
    to_js(sweep(gamma_min, gamma_max, steps))
}

/// Optimal tree projections of the three-variable counterexample.
#[wasm_bindgen]
pub fn table1_projection(xi: f64, kappa: f64) -> Result<String, JsError> {
    to_js(projection(xi, kappa))
}

/// Monte Carlo structure error on the star, capped at [`MAX_RUNS`] runs.
#[wasm_bindgen]
pub fn star4_simulation(gamma: f64, n: usize, runs: u32, seed: u32) -> Result<String, JsError> {
    to_js(simulation(gamma, n, runs as u64, seed as u64))
}
