//! Subcommand implementations.

use std::fs;
use std::io::{self, Write};

use serde::Serialize;
use treerate::chow_liu;
use treerate::crossover::{approx_rate, empirical_rate, exact_rate, pair_joint_from_counts, CrossoverProblem};
use treerate::dist::{empirical_distribution, Alphabet, DenseJoint, EmpiricalCounts, PairJoint, PairSide};
use treerate::exponent::{
    error_exponent, evaluation_budget, evaluation_upper_bound, finite_sample_bound, generalized_exponent,
    optimal_projections, positivity_certificate, positivity_certificate_dense, ExcludedSwap, ExponentReport, Mode,
    Witness,
};
use treerate::serde_rate;
use treerate::simulate::{
    estimate_error_probability, estimate_generalized_error_probability, star4, star4_reference_pair, SimConfig,
    SimResult, RUNS_WARN_THRESHOLD,
};
use treerate::trees::{mix_seed, Edge, EdgeSet, TieGroup, TreeModel};

use crate::files::{read_model, read_samples, Model, ModelFile};
use crate::output::{self, fmt_rate, opt_rate, Format};
use crate::{
    CliError, CrossoverArgs, CrossoverMode, Experiment, ExperimentArgs, ExponentArgs, LearnArgs, ProjectArgs,
    SimulateArgs,
};

#[derive(Debug, Serialize)]
pub struct EdgeInformation {
    pub edge: Edge,
    pub mi: f64,
    pub selected: bool,
}

#[derive(Debug, Serialize)]
pub struct LearnReport {
    pub samples: usize,
    pub d: usize,
    pub alphabet: usize,
    pub structure: EdgeSet,
    pub mi_table: Vec<EdgeInformation>,
    /// Groups of pairs with equal empirical information.
    pub ties: Vec<TieGroup>,
}

pub fn learn(a: &LearnArgs, format: Format, out: &mut dyn Write) -> Result<(), CliError> {
    let samples = read_samples(&a.samples)?;
    let k = match a.alphabet {
        Some(k) => k,
        None => samples.rows().flatten().max().map_or(2, |&m| (m + 1).max(2)),
    };
    let learned = chow_liu::learn(&samples, Alphabet::new(k)?)?;
    let report = LearnReport {
        samples: samples.len(),
        d: samples.num_vars(),
        alphabet: k,
        structure: learned.structure.clone(),
        mi_table: learned
            .mi_table
            .iter()
            .map(|(&edge, &mi)| EdgeInformation {
                edge,
                mi,
                selected: learned.structure.contains(edge),
            })
            .collect(),
        ties: learned.ties.into_iter().filter(|t| t.pairs.len() > 1).collect(),
    };
    let model = ModelFile::from_tree(&learned.model).to_json();
    match &a.out {
        Some(path) => {
            fs::write(path, format!("{model}\n")).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            write_learn_report(out, format, &report)
        }
        None => {
            writeln!(out, "{model}")?;
            write_learn_report(&mut io::stderr(), format, &report)
        }
    }
}

fn write_learn_report(out: &mut dyn Write, format: Format, r: &LearnReport) -> Result<(), CliError> {
    if format == Format::Json {
        return output::json(out, r);
    }
    writeln!(out, "samples {}, nodes {}, alphabet {}", r.samples, r.d, r.alphabet)?;
    writeln!(out, "structure {}", r.structure)?;
    writeln!(out, "{:<10} {:>22}", "pair", "mutual information")?;
    for row in &r.mi_table {
        let mark = if row.selected { "  *" } else { "" };
        writeln!(out, "{:<10} {:>22.15e}{mark}", row.edge.to_string(), row.mi)?;
    }
    if r.ties.is_empty() {
        writeln!(out, "ties: none")?;
    }
    for t in &r.ties {
        let list = |v: &[Edge]| v.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(" ");
        let note = if t.is_decisive() { " (broken by order)" } else { "" };
        writeln!(
            out,
            "tie at {:.15e}: {} chose [{}]{note}",
            t.weight,
            list(&t.pairs),
            list(&t.chosen)
        )?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct ExponentOutput {
    /// `tree` or `dense`.
    pub input: &'static str,
    pub mode: Mode,
    #[serde(with = "serde_rate")]
    pub k_p: f64,
    pub positive: bool,
    pub witness: Option<Witness>,
    pub report: Option<ExponentReport>,
    /// Pair count the search performs on a tree input.
    pub evaluation_budget: Option<usize>,
    pub evaluation_bound: Option<f64>,
    /// Optimal tree projections of a dense input.
    pub projections: Vec<EdgeSet>,
    pub excluded: Vec<ExcludedSwap>,
    pub unreachable: Vec<(EdgeSet, Edge)>,
}

pub fn exponent(a: &ExponentArgs, format: Format, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = a.solver.config(a.seed.seed);
    let mode: Mode = a.mode.into();
    let result = match read_model(&a.model)? {
        Model::Tree(model) => {
            let cert = positivity_certificate(&model)?;
            let report = error_exponent(&model, mode, &cfg)?;
            ExponentOutput {
                input: "tree",
                mode,
                k_p: report.k_p,
                positive: cert.positive,
                witness: cert.witness,
                evaluation_budget: Some(evaluation_budget(model.structure())?),
                evaluation_bound: Some(evaluation_upper_bound(model.structure())),
                report: Some(report),
                projections: vec![model.structure().clone()],
                excluded: Vec::new(),
                unreachable: Vec::new(),
            }
        }
        Model::Dense(dense) => {
            let cert = positivity_certificate_dense(&dense)?;
            if cert.positive {
                let g = generalized_exponent(&dense, mode, &cfg)?;
                ExponentOutput {
                    input: "dense",
                    mode,
                    k_p: g.report.k_p,
                    positive: true,
                    witness: None,
                    evaluation_budget: None,
                    evaluation_bound: None,
                    report: Some(g.report),
                    projections: g.projections.structures,
                    excluded: g.excluded,
                    unreachable: g.unreachable,
                }
            } else {
                ExponentOutput {
                    input: "dense",
                    mode,
                    k_p: 0.0,
                    positive: false,
                    witness: cert.witness,
                    evaluation_budget: None,
                    evaluation_bound: None,
                    report: None,
                    projections: vec![cert.structure],
                    excluded: Vec::new(),
                    unreachable: Vec::new(),
                }
            }
        }
    };
    if format == Format::Json {
        return output::json(out, &result);
    }
    write_exponent(out, &result)
}

fn write_exponent(out: &mut dyn Write, r: &ExponentOutput) -> Result<(), CliError> {
    let mode = match r.mode {
        Mode::Exact => "exact",
        Mode::Approx => "approx",
    };
    writeln!(out, "K_P = {} ({mode}, {} input)", fmt_rate(r.k_p), r.input)?;
    if let Some(w) = &r.witness {
        writeln!(
            out,
            "not positive: witness edge {} non-edge {} with I(P_e) - I(P_e') = {:e}",
            w.edge, w.nonedge, w.gap
        )?;
    }
    if r.input == "dense" {
        for s in &r.projections {
            writeln!(out, "projection {s}")?;
        }
    }
    let Some(report) = &r.report else {
        return Ok(());
    };
    writeln!(out, "structure {}", report.structure)?;
    if let (Some(f), Some(e), Some(t)) = (report.dominant_nonedge, report.replacement, &report.dominant_error_tree) {
        writeln!(out, "dominant non-edge {f} replaces {e}")?;
        writeln!(out, "dominant error tree {t}")?;
    }
    match (r.evaluation_budget, r.evaluation_bound) {
        (Some(b), Some(bound)) => writeln!(out, "evaluations {} (budget {b}, bound {bound})", report.evaluations)?,
        _ => writeln!(out, "evaluations {}", report.evaluations)?,
    }
    for x in &r.excluded {
        writeln!(out, "excluded swap {} -> {} on {}", x.edge, x.nonedge, x.structure)?;
    }
    for (s, f) in &r.unreachable {
        writeln!(out, "unreachable non-edge {f} on {s}")?;
    }
    writeln!(out, "{:<10} {:<10} {:>20}", "edge", "non-edge", "rate")?;
    for p in &report.pair_rates {
        let mark = if report.co_minimal.contains(&(p.edge, p.nonedge)) {
            "  min"
        } else {
            ""
        };
        writeln!(
            out,
            "{:<10} {:<10} {:>20}{mark}",
            p.edge.to_string(),
            p.nonedge.to_string(),
            fmt_rate(p.rate)
        )?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct CrossoverOutput {
    pub mode: &'static str,
    pub edge: Edge,
    pub nonedge: Edge,
    pub rate: f64,
    /// Information of the model's own pair marginals.
    pub mi_edge: f64,
    pub mi_nonedge: f64,
    /// `Var(s_e' - s_e)` under the pair joint the rate was computed from.
    pub variance: f64,
    pub constraint_residual: Option<f64>,
    pub stationarity: Option<f64>,
    pub converged_restarts: Option<usize>,
    pub restarts: Option<usize>,
    /// Exact rate of the model's own pair joint, for empirical mode.
    pub model_rate: Option<f64>,
    pub samples: Option<usize>,
}

fn pair_joint(model: &Model, edge: Edge, nonedge: Edge) -> Result<PairJoint, CliError> {
    Ok(match model {
        Model::Tree(t) => t.pair_joint(edge, nonedge)?,
        Model::Dense(d) => PairJoint::from_dense(d, edge, nonedge)?,
    })
}

pub fn crossover(a: &CrossoverArgs, format: Format, out: &mut dyn Write) -> Result<(), CliError> {
    if a.mode == CrossoverMode::Empirical && a.samples.is_none() {
        return Err(CliError::Usage("--mode empirical requires --samples".into()));
    }
    let mut cfg = a.solver.config(a.seed.seed);
    cfg.smoothing = a.smoothing;
    let model = read_model(&a.model)?;
    let problem = CrossoverProblem::new(pair_joint(&model, a.edge, a.nonedge)?)?;
    let describe = |problem: &CrossoverProblem, mode, rate| CrossoverOutput {
        mode,
        edge: a.edge,
        nonedge: a.nonedge,
        rate,
        mi_edge: problem.pair_joint().mutual_information(PairSide::Edge),
        mi_nonedge: problem.pair_joint().mutual_information(PairSide::NonEdge),
        variance: problem.info_density_variance(),
        constraint_residual: None,
        stationarity: None,
        converged_restarts: None,
        restarts: None,
        model_rate: None,
        samples: None,
    };
    let result = match a.mode {
        CrossoverMode::Approx => describe(&problem, "approx", approx_rate(&problem, cfg.var_tol)?),
        CrossoverMode::Exact => {
            let o = exact_rate(&problem, &cfg)?;
            CrossoverOutput {
                constraint_residual: Some(o.constraint_residual),
                stationarity: Some(o.stationarity),
                converged_restarts: Some(o.converged_restarts()),
                restarts: Some(o.restarts_used),
                ..describe(&problem, "exact", o.rate)
            }
        }
        CrossoverMode::Empirical => {
            let samples = read_samples(a.samples.as_ref().expect("checked above"))?;
            if samples.num_vars() != model.num_vars() {
                return Err(CliError::Validation(format!(
                    "samples have {} columns but the model has {} variables",
                    samples.num_vars(),
                    model.num_vars()
                )));
            }
            let o = empirical_rate(&samples, model.alphabet(), a.edge, a.nonedge, &cfg)?;
            let truth = exact_rate(&problem, &cfg)?.rate;
            let mut r = describe(&problem, "empirical", o.rate);
            r.constraint_residual = Some(o.constraint_residual);
            r.converged_restarts = Some(o.converged_restarts());
            r.restarts = Some(o.restarts_used);
            r.model_rate = Some(truth);
            r.samples = Some(samples.len());
            r
        }
    };
    if format == Format::Json {
        return output::json(out, &result);
    }
    writeln!(
        out,
        "{} rate {} -> {}: {:.15e}",
        result.mode, result.edge, result.nonedge, result.rate
    )?;
    writeln!(
        out,
        "I(P_e) = {:.15e}, I(P_e') = {:.15e}",
        result.mi_edge, result.mi_nonedge
    )?;
    writeln!(out, "Var(s_e' - s_e) = {:.15e}", result.variance)?;
    if let (Some(res), Some(c), Some(n)) = (result.constraint_residual, result.converged_restarts, result.restarts) {
        writeln!(out, "constraint residual {res:e}, {c}/{n} restarts converged")?;
    }
    if let (Some(t), Some(n)) = (result.model_rate, result.samples) {
        writeln!(out, "model rate {t:.15e} (from {n} samples)")?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct SimRow {
    pub n: usize,
    pub runs: u64,
    pub errors: u64,
    pub p_hat: f64,
    pub std_error: f64,
    #[serde(with = "serde_rate")]
    pub simulated_rate: f64,
    /// No errors were observed, so the rate is not estimable.
    pub insufficient_runs: bool,
    pub modal_displacement: Option<usize>,
    #[serde(serialize_with = "opt_rate")]
    pub k_p: Option<f64>,
    #[serde(serialize_with = "opt_rate")]
    pub log_bound: Option<f64>,
    /// `p_hat <= exp(log_bound)`.
    pub within_bound: Option<bool>,
}

impl SimRow {
    fn new(r: &SimResult, k_p: Option<f64>, log_bound: Option<f64>) -> Self {
        SimRow {
            n: r.n,
            runs: r.runs,
            errors: r.errors,
            p_hat: r.p_hat,
            std_error: r.std_error(),
            simulated_rate: r.simulated_rate,
            insufficient_runs: r.insufficient_runs,
            modal_displacement: r.modal_displacement(),
            k_p,
            log_bound,
            within_bound: log_bound.map(|b| r.p_hat <= b.exp()),
        }
    }
}

fn warn_runs(runs: u64) {
    if runs > RUNS_WARN_THRESHOLD {
        eprintln!("warning: {runs} runs per row exceeds the desk-scale cap of {RUNS_WARN_THRESHOLD}");
    }
}

pub fn simulate(a: &SimulateArgs, format: Format, out: &mut dyn Write) -> Result<(), CliError> {
    warn_runs(a.runs);
    let model = read_model(&a.model)?;
    let sim_cfg = |n| SimConfig {
        workers: a.workers,
        ..SimConfig::new(n, a.runs, a.seed.seed)
    };
    let rows = match &model {
        Model::Tree(tree) => {
            let k = error_exponent(tree, Mode::Exact, &a.solver.config(a.seed.seed))?.k_p;
            let (d, q) = (tree.num_nodes(), tree.alphabet().size());
            a.n.iter()
                .map(|&n| {
                    let r = estimate_error_probability(tree, &sim_cfg(n))?;
                    Ok(SimRow::new(&r, Some(k), Some(finite_sample_bound(k, d, q, n as u64))))
                })
                .collect::<Result<Vec<_>, CliError>>()?
        }
        Model::Dense(dense) => {
            a.n.iter()
                .map(|&n| {
                    Ok(SimRow::new(
                        &estimate_generalized_error_probability(dense, &sim_cfg(n))?,
                        None,
                        None,
                    ))
                })
                .collect::<Result<Vec<_>, CliError>>()?
        }
    };
    output::rows(out, format, &rows)
}

#[derive(Debug, Serialize)]
pub struct ProjectOutput {
    pub pi_star: f64,
    pub weight: f64,
    pub singleton: bool,
    pub structures: Vec<EdgeSet>,
    pub exponent: Option<ExponentOutput>,
}

pub fn project(a: &ProjectArgs, format: Format, out: &mut dyn Write) -> Result<(), CliError> {
    let dense: DenseJoint = match read_model(&a.model)? {
        Model::Dense(d) => d,
        Model::Tree(t) => t.to_dense()?,
    };
    let set = optimal_projections(&dense)?;
    let exponent = if a.exponent {
        let mode: Mode = a.mode.into();
        let g = generalized_exponent(&dense, mode, &a.solver.config(a.seed.seed))?;
        Some(ExponentOutput {
            input: "dense",
            mode,
            k_p: g.report.k_p,
            positive: g.report.k_p > 0.0,
            witness: None,
            report: Some(g.report),
            evaluation_budget: None,
            evaluation_bound: None,
            projections: g.projections.structures,
            excluded: g.excluded,
            unreachable: g.unreachable,
        })
    } else {
        None
    };
    let result = ProjectOutput {
        pi_star: set.pi_star,
        weight: set.weight,
        singleton: set.is_singleton(),
        structures: set.structures.clone(),
        exponent,
    };
    if format == Format::Json {
        return output::json(out, &result);
    }
    writeln!(out, "projection divergence {:.15e}", result.pi_star)?;
    writeln!(out, "tree weight {:.15e}", result.weight)?;
    writeln!(out, "{} optimal structure(s)", result.structures.len())?;
    for s in &result.structures {
        writeln!(out, "  {s}")?;
    }
    if let Some(e) = &result.exponent {
        writeln!(out)?;
        write_exponent(out, e)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct RatesRow {
    pub gamma: f64,
    pub mi_edge: f64,
    pub mi_nonedge: f64,
    pub exact: f64,
    pub approx: f64,
    pub relative_gap: f64,
}

#[derive(Debug, Serialize)]
pub struct SimExperimentRow {
    pub gamma: f64,
    pub n: usize,
    pub runs: u64,
    pub errors: u64,
    pub p_hat: f64,
    #[serde(with = "serde_rate")]
    pub simulated: f64,
    pub insufficient_runs: bool,
    pub exact: f64,
    pub approx: f64,
}

#[derive(Debug, Serialize)]
pub struct EmpiricalRow {
    pub gamma: f64,
    pub n: usize,
    pub seed: u64,
    pub empirical: f64,
    pub exact: f64,
    pub approx: f64,
    pub relative_error: f64,
}

/// Sample size of the long empirical run.
pub const FULL_SCALE_N: usize = 8_000_000;
const SAMPLE_CHUNK: usize = 1 << 20;

/// Counts of the pair variables of `(edge, nonedge)` in `n` fresh samples,
/// drawn in bounded chunks.
fn sampled_pair_counts(
    model: &TreeModel,
    edge: Edge,
    nonedge: Edge,
    n: usize,
    seed: u64,
) -> Result<EmpiricalCounts, CliError> {
    let vars = model.pair_joint(edge, nonedge)?.vars().to_vec();
    let alphabet = model.alphabet();
    let mut counts = vec![0u64; alphabet.size().pow(vars.len() as u32)];
    let (mut left, mut chunk) = (n, 0);
    while left > 0 {
        let m = left.min(SAMPLE_CHUNK);
        let rows = model.sample(m, mix_seed(seed, chunk)).select_columns(&vars)?;
        for (c, x) in counts.iter_mut().zip(empirical_distribution(&rows, alphabet)?.counts()) {
            *c += x;
        }
        left -= m;
        chunk += 1;
    }
    Ok(EmpiricalCounts::from_counts(vars.len(), alphabet, counts)?)
}

pub fn experiment(a: &ExperimentArgs, format: Format, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = a.solver.config(a.seed.seed);
    let (edge, nonedge) = star4_reference_pair();
    let rates = |gamma: f64| -> Result<(TreeModel, CrossoverProblem, f64, f64), CliError> {
        let model = star4(gamma)?;
        let problem = CrossoverProblem::new(model.pair_joint(edge, nonedge)?)?;
        let exact = exact_rate(&problem, &cfg)?.rate;
        let approx = approx_rate(&problem, cfg.var_tol)?;
        Ok((model, problem, exact, approx))
    };
    let mut buf: Vec<u8> = Vec::new();
    match a.name {
        Experiment::Star4Rates => {
            let gammas = a
                .gamma_list
                .clone()
                .unwrap_or_else(|| vec![0.01, 0.02, 0.05, 0.1, 0.15, 0.2]);
            let mut rows = Vec::new();
            for gamma in gammas {
                let (_, problem, exact, approx) = rates(gamma)?;
                rows.push(RatesRow {
                    gamma,
                    mi_edge: problem.pair_joint().mutual_information(PairSide::Edge),
                    mi_nonedge: problem.pair_joint().mutual_information(PairSide::NonEdge),
                    exact,
                    approx,
                    relative_gap: (approx - exact).abs() / exact,
                });
            }
            output::rows(&mut buf, format, &rows)?;
        }
        Experiment::Star4Sim => {
            warn_runs(a.runs);
            let gammas = a.gamma_list.clone().unwrap_or_else(|| vec![0.2]);
            let ns = a.n_list.clone().unwrap_or_else(|| vec![100, 200, 300, 400, 500]);
            let mut rows = Vec::new();
            for gamma in gammas {
                let model = star4(gamma)?;
                let exact = error_exponent(&model, Mode::Exact, &cfg)?.k_p;
                let approx = error_exponent(&model, Mode::Approx, &cfg)?.k_p;
                for &n in &ns {
                    let r = estimate_error_probability(&model, &SimConfig::new(n, a.runs, a.seed.seed))?;
                    rows.push(SimExperimentRow {
                        gamma,
                        n,
                        runs: r.runs,
                        errors: r.errors,
                        p_hat: r.p_hat,
                        simulated: r.simulated_rate,
                        insufficient_runs: r.insufficient_runs,
                        exact,
                        approx,
                    });
                }
            }
            output::rows(&mut buf, format, &rows)?;
        }
        Experiment::Star4Empirical => {
            let gammas = a.gamma_list.clone().unwrap_or_else(|| vec![0.2]);
            let base = a.n_list.clone().unwrap_or_else(|| vec![1_000, 10_000, 100_000]);
            let mut solver = cfg.clone();
            // plug-in estimates at small n can have empty cells
            solver.smoothing = true;
            let mut rows = Vec::new();
            for gamma in gammas {
                let (model, _, exact, approx) = rates(gamma)?;
                let mut ns = base.clone();
                if a.full && (gamma - 0.01).abs() < 1e-12 && !ns.contains(&FULL_SCALE_N) {
                    ns.push(FULL_SCALE_N);
                }
                for &n in &ns {
                    for r in 0..a.repeats {
                        let seed = mix_seed(a.seed.seed, r);
                        let counts = sampled_pair_counts(&model, edge, nonedge, n, seed)?;
                        let pj = pair_joint_from_counts(&counts, edge, nonedge, solver.smoothing)?;
                        let empirical = exact_rate(&CrossoverProblem::new(pj)?, &solver)?.rate;
                        rows.push(EmpiricalRow {
                            gamma,
                            n,
                            seed,
                            empirical,
                            exact,
                            approx,
                            relative_error: (empirical - exact).abs() / exact,
                        });
                    }
                }
            }
            output::rows(&mut buf, format, &rows)?;
        }
    }
    match &a.out {
        Some(path) => fs::write(path, &buf).map_err(|e| CliError::Io(format!("{}: {e}", path.display()))),
        None => Ok(out.write_all(&buf)?),
    }
}
