use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde_json::json;

use super::config::{KernelChoice, ProblemKind, RunConfig};
use super::output::{fmt_f64, OutputFile};
use crate::error::{Error, Result};
use crate::kl::{build_kl, build_kl_with_modes, draw_realizations, sample_paths};
use crate::numerics::null_space;
use crate::problems::{
    build_tolerance_expected, build_tolerance_saa, build_variance_saa, variability_metric,
    ProblemSetup,
};
use crate::randomfield::{assemble_covariance, CovarianceModel, Grid1D};
use crate::saa::{
    inference, optimality_asymptotics_check, sample_skewness, sample_std, HessianSource,
    InferenceReport,
};
use crate::sqp::{minimize, ConvergenceStatus, OptimizationResult};

/// How a command that ran to completion ended.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Success,
    /// A self-check (such as the gradient check) did not pass.
    CheckFailed(String),
    NotConverged(String),
}

pub const EXIT_SUCCESS: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Success => EXIT_SUCCESS,
            Self::CheckFailed(_) => EXIT_NUMERICAL,
            Self::NotConverged(_) => EXIT_NOT_CONVERGED,
        }
    }
}

/// Exit status for an error.
pub fn error_exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_)
        | Error::Unsupported(_)
        | Error::Io(_)
        | Error::Json(_) => EXIT_VALIDATION,
        Error::Replication { source, .. } => error_exit_code(source),
        _ => EXIT_NUMERICAL,
    }
}

fn provenance(cfg: &RunConfig) -> String {
    format!("config_hash={} seed={}", cfg.hash(), cfg.seed)
}

fn eval_points(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Problem for the configured kind and method.
pub fn build_setup(cfg: &RunConfig, seed: u64, samples: usize) -> Result<ProblemSetup> {
    match cfg.problem {
        ProblemKind::Variance => {
            build_variance_saa(&cfg.variance, seed, samples, cfg.method.sensitivity())
        }
        ProblemKind::Tolerance if cfg.expected_objective => build_tolerance_expected(&cfg.tolerance),
        ProblemKind::Tolerance => build_tolerance_saa(&cfg.tolerance, seed, samples),
    }
}

/// Asymptotic inference at an SAA solution. Directions fixed by active
/// constraints are removed before inverting the Hessian.
pub fn solution_inference(
    setup: &ProblemSetup,
    result: &OptimizationResult,
    confidence_level: f64,
) -> Result<Option<InferenceReport>> {
    let Some(saa) = &setup.saa else {
        return Ok(None);
    };
    let p = &result.solution;
    let estimate = saa.evaluate(p)?;
    let hessian = saa.hessian_estimate(p)?;
    let active = result.active_bounds(&setup.bounds);
    let n = p.len();
    let m = setup.equalities.len();
    let z = if m + active.len() == 0 {
        None
    } else {
        let mut rows = DMatrix::zeros(m + active.len(), n);
        if m > 0 {
            rows.rows_mut(0, m).copy_from(&setup.equalities.a);
        }
        for (r, &i) in active.iter().enumerate() {
            rows[(m + r, i)] = 1.0;
        }
        Some(null_space(&rows)?)
    };
    inference(&estimate, &HessianSource::Mean(hessian), z.as_ref(), confidence_level).map(Some)
}

/// `sample`: realizations and spectrum of a stationary field.
pub fn cmd_sample(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate_sample()?;
    let s = &cfg.sample;
    let realizations = OutputFile::create(&cfg.output_dir, "realizations.csv")?;
    let spectrum_file = OutputFile::create(&cfg.output_dir, "spectrum.csv")?;

    let grid = Grid1D::uniform(s.grid_points)?;
    let model = match s.kernel {
        KernelChoice::SquaredExponential => CovarianceModel::squared_exponential(s.correlation_length)?,
        KernelChoice::Exponential => CovarianceModel::exponential(s.correlation_length)?,
    };
    let cov = assemble_covariance(&model, &grid)?;
    let basis = match s.modes {
        Some(k) => build_kl_with_modes(&cov, None, k)?,
        None => build_kl(&cov, None, s.threshold)?,
    };
    let draws = draw_realizations(cfg.seed, s.paths, basis.truncation_level())?;
    let paths = sample_paths(&basis, &draws)?;

    let prov = provenance(cfg);
    let mut header = vec!["x".to_string()];
    header.extend((1..=s.paths).map(|k| format!("path_{k}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    realizations.write_csv(
        &prov,
        &header,
        grid.points().iter().enumerate().map(|(j, &x)| {
            std::iter::once(fmt_f64(x))
                .chain(paths.column(j).iter().map(|&v| fmt_f64(v)))
                .collect::<Vec<_>>()
        }),
    )?;
    let spectrum = basis.spectrum();
    let scatter = spectrum.partial_scatter();
    let k = basis.truncation_level();
    spectrum_file.write_csv(
        &prov,
        &["k", "eigenvalue", "partial_scatter", "retained"],
        spectrum.eigenvalues().iter().enumerate().map(|(i, &l)| {
            vec![
                (i + 1).to_string(),
                fmt_f64(l),
                fmt_f64(scatter[i]),
                u8::from(i < k).to_string(),
            ]
        }),
    )?;
    println!(
        "wrote {} paths with {k} modes (partial scatter {:.6})",
        s.paths,
        basis.partial_scatter()
    );
    Ok(Outcome::Success)
}

/// One row of the gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub parameter: String,
    pub pathwise: f64,
    pub fd: f64,
    pub rel_err: f64,
}

/// `|a - b| / max(|a|, |b|)`; infinite when either side is not finite.
pub fn relative_error(a: f64, b: f64) -> f64 {
    if !(a.is_finite() && b.is_finite()) {
        return f64::INFINITY;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Pathwise gradient against central differences of the same SAA objective.
pub fn gradcheck_rows(cfg: &RunConfig) -> Result<Vec<GradcheckRow>> {
    let setup = build_setup(cfg, cfg.seed, cfg.samples)?;
    let p = setup.initial.clone();
    let (_, grad) = setup.objective(&p)?;
    let offset = setup.sigma_offset;
    let mut rows = Vec::with_capacity(p.len());
    for k in 0..p.len() {
        let (name, h) = if k < offset {
            (format!("mean_{k}"), cfg.gradcheck.mean_fd_step)
        } else {
            (format!("sigma_{}", k - offset), cfg.gradcheck.fd_step)
        };
        let shifted = |sign: f64| -> Result<f64> {
            let mut q = p.clone();
            q[k] += sign * h;
            Ok(setup.objective(&q)?.0)
        };
        // an evaluation outside the admissible set makes the check fail
        let fd = match (shifted(1.0), shifted(-1.0)) {
            (Ok(a), Ok(b)) => (a - b) / (2.0 * h),
            _ => f64::NAN,
        };
        rows.push(GradcheckRow {
            parameter: name,
            pathwise: grad[k],
            fd,
            rel_err: relative_error(grad[k], fd),
        });
    }
    Ok(rows)
}

/// `gradcheck`: fails when any relative error exceeds the configured tolerance.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate_gradcheck()?;
    let out = OutputFile::create(&cfg.output_dir, "gradcheck.csv")?;
    let rows = gradcheck_rows(cfg)?;
    let worst = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    out.write_csv(
        &provenance(cfg),
        &["parameter", "pathwise", "fd", "rel_err"],
        rows.iter().map(|r| {
            vec![r.parameter.clone(), fmt_f64(r.pathwise), fmt_f64(r.fd), fmt_f64(r.rel_err)]
        }),
    )?;
    println!("checked {} parameters, largest relative error {worst:e}", rows.len());
    if worst.is_nan() || worst > cfg.gradcheck.tolerance {
        return Ok(Outcome::CheckFailed(format!(
            "relative error {worst:e} exceeds {:e}",
            cfg.gradcheck.tolerance
        )));
    }
    Ok(Outcome::Success)
}

/// Result of a single optimization with its reporting data.
#[derive(Debug)]
pub struct OptimizeRun {
    pub setup: ProblemSetup,
    pub result: OptimizationResult,
    pub inference: Option<InferenceReport>,
    pub points: Vec<f64>,
    pub sigma_hat: DVector<f64>,
    pub sigma_true: Option<DVector<f64>>,
    pub sigma_std_err: Option<DVector<f64>>,
    pub baseline_objective: f64,
}

impl OptimizeRun {
    pub fn ci(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        let (se, inf) = (self.sigma_std_err.as_ref()?, self.inference.as_ref()?);
        Some((&self.sigma_hat - se * inf.z, &self.sigma_hat + se * inf.z))
    }

    /// Evaluation points where the analytic optimum lies inside the interval.
    pub fn coverage(&self) -> Option<usize> {
        let truth = self.sigma_true.as_ref()?;
        let (lo, hi) = self.ci()?;
        Some((0..truth.len()).filter(|&i| lo[i] <= truth[i] && truth[i] <= hi[i]).count())
    }

    pub fn max_error(&self) -> Option<f64> {
        Some((&self.sigma_hat - self.sigma_true.as_ref()?).amax())
    }
}

/// Optimize the configured problem and compute inference at the solution.
pub fn run_optimization(cfg: &RunConfig) -> Result<OptimizeRun> {
    cfg.validate()?;
    let setup = build_setup(cfg, cfg.seed, cfg.samples)?;
    let baseline_objective = setup.objective(&setup.initial)?.0;
    let result = minimize(setup.optimization_spec(cfg.solver))?;
    let inference = solution_inference(&setup, &result, cfg.confidence_level)?;
    let points = eval_points(cfg.eval_points);
    let rows = setup.sigma_rows(&points)?;
    let sigma_hat = &rows * &result.solution;
    let sigma_true = match cfg.problem {
        ProblemKind::Variance => Some(DVector::from_iterator(
            points.len(),
            points.iter().map(|&x| cfg.variance.sigma_star(x)),
        )),
        ProblemKind::Tolerance => None,
    };
    let sigma_std_err = inference.as_ref().map(|r| r.linear_std_errors(&rows));
    Ok(OptimizeRun {
        setup,
        result,
        inference,
        points,
        sigma_hat,
        sigma_true,
        sigma_std_err,
        baseline_objective,
    })
}

/// `optimize`: optimum, iteration trace and a JSON report.
pub fn cmd_optimize(cfg: &RunConfig, trace: bool) -> Result<Outcome> {
    cfg.validate()?;
    let optimum_file = OutputFile::create(&cfg.output_dir, "optimum.csv")?;
    let trace_file = OutputFile::create(&cfg.output_dir, "trace.csv")?;
    let report_file = OutputFile::create(&cfg.output_dir, "report.json")?;
    let run = run_optimization(cfg)?;
    let prov = provenance(cfg);
    let r = &run.result;

    if trace {
        for h in &r.history {
            eprintln!(
                "iter {:4}  f {:.12e}  step {:.3e}  kkt {:.3e}  backtracks {}",
                h.iter, h.f, h.step_norm, h.kkt, h.backtracks
            );
        }
    }
    let nan = DVector::from_element(run.points.len(), f64::NAN);
    let truth = run.sigma_true.clone().unwrap_or_else(|| nan.clone());
    let (lo, hi) = run.ci().unwrap_or((nan.clone(), nan));
    optimum_file.write_csv(
        &prov,
        &["x", "sigma_hat", "sigma_true", "ci_low", "ci_high"],
        run.points.iter().enumerate().map(|(i, &x)| {
            vec![
                fmt_f64(x),
                fmt_f64(run.sigma_hat[i]),
                fmt_f64(truth[i]),
                fmt_f64(lo[i]),
                fmt_f64(hi[i]),
            ]
        }),
    )?;
    trace_file.write_csv(
        &prov,
        &["iter", "f", "step_norm", "kkt", "backtracks"],
        r.history.iter().map(|h| {
            vec![
                h.iter.to_string(),
                fmt_f64(h.f),
                fmt_f64(h.step_norm),
                fmt_f64(h.kkt),
                h.backtracks.to_string(),
            ]
        }),
    )?;

    let sigma = run.setup.sigma(&r.solution)?;
    let rule = match cfg.problem {
        ProblemKind::Variance => cfg.variance.rule()?,
        ProblemKind::Tolerance => cfg.tolerance.rule()?,
    };
    let (variability, _) = variability_metric(&sigma, &rule)?;
    let epsilon = run.inference.as_ref().map(|i| i.standard_errors.amax());
    let report = json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "problem": cfg.problem,
        "method": cfg.method.name(),
        "samples": cfg.samples,
        "modes": run.setup.saa.as_ref().map(|s| s.draws().n_modes()),
        "status": r.status,
        "objective": r.value,
        "baseline_objective": run.baseline_objective,
        "kkt_residual": r.kkt_residual,
        "iterations": r.iterations,
        "equality_residual": r.equality_residual,
        "bound_violation": r.bound_violation,
        "variability": variability,
        "sigma_max_eval": run.sigma_hat.max(),
        "sigma_min_eval": run.sigma_hat.min(),
        "epsilon_n_max": epsilon,
        "max_abs_error": run.max_error(),
        "coverage": run.coverage(),
        "eval_points": cfg.eval_points,
        "inference": run.inference.as_ref().map(InferenceReport::to_json),
    });
    report_file.write_json(&report)?;
    println!(
        "{:?} after {} iterations, objective {:.10}, kkt {:.3e}",
        r.status, r.iterations, r.value, r.kkt_residual
    );
    if let (Some(e), Some(c)) = (run.max_error(), run.coverage()) {
        println!("max |sigma_hat - sigma*| = {e:.3e}, coverage {c}/{}", cfg.eval_points);
    }
    if r.status.is_success() {
        Ok(Outcome::Success)
    } else {
        Ok(Outcome::NotConverged(format!("solver stopped with status {:?}", r.status)))
    }
}

/// Per-sample-size summary of a convergence study.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergeSummary {
    pub sample_sizes: Vec<usize>,
    /// `errors[i][r]`: optimum error at the study point for size `i`, replication `r`.
    pub errors: Vec<Vec<f64>>,
    pub slope: f64,
}

impl ConvergeSummary {
    pub fn std(&self) -> Vec<f64> {
        self.errors.iter().map(|e| sample_std(e)).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.errors.iter().map(|e| crate::numerics::ordered_mean(e)).collect()
    }

    pub fn skewness(&self) -> Vec<f64> {
        self.errors.iter().map(|e| sample_skewness(e)).collect()
    }
}

/// Replicated optimizations with seeds `seed + r`.
pub fn run_convergence(cfg: &RunConfig) -> Result<std::result::Result<ConvergeSummary, String>> {
    cfg.validate_converge()?;
    let c = &cfg.converge;
    let truth = cfg.variance.sigma_star(c.point);
    let mut errors = Vec::with_capacity(c.sample_sizes.len());
    for &n in &c.sample_sizes {
        let runs: Vec<Result<(ConvergenceStatus, f64)>> = (0..c.replications)
            .into_par_iter()
            .map(|r| {
                let seed = cfg.seed + r as u64;
                let wrap = |e: Error| Error::Replication {
                    seed,
                    source: Box::new(e),
                };
                let setup = build_setup(cfg, seed, n).map_err(wrap)?;
                let result = minimize(setup.optimization_spec(cfg.solver)).map_err(wrap)?;
                let sigma = setup.sigma(&result.solution).map_err(wrap)?;
                Ok((result.status, sigma.eval(c.point).map_err(wrap)? - truth))
            })
            .collect();
        let mut column = Vec::with_capacity(runs.len());
        for (r, run) in runs.into_iter().enumerate() {
            let (status, err) = run?;
            if !status.is_success() {
                return Ok(Err(format!(
                    "replication with seed {} and N = {n} stopped with status {status:?}",
                    cfg.seed + r as u64
                )));
            }
            column.push(err);
        }
        errors.push(column);
    }
    let replicates: Vec<(usize, Vec<f64>)> =
        c.sample_sizes.iter().copied().zip(errors.iter().cloned()).collect();
    let slope = optimality_asymptotics_check(&replicates)?;
    Ok(Ok(ConvergeSummary {
        sample_sizes: c.sample_sizes.clone(),
        errors,
        slope,
    }))
}

/// `converge`: error histograms per sample size and the fitted slope.
pub fn cmd_converge(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate_converge()?;
    let mut hist_files = Vec::new();
    for &n in &cfg.converge.sample_sizes {
        hist_files.push(OutputFile::create(&cfg.output_dir, &format!("hist_{n}.csv"))?);
    }
    let slopes_file = OutputFile::create(&cfg.output_dir, "slopes.json")?;
    let summary = match run_convergence(cfg)? {
        Ok(s) => s,
        Err(msg) => return Ok(Outcome::NotConverged(msg)),
    };
    let prov = provenance(cfg);
    for (file, errors) in hist_files.into_iter().zip(&summary.errors) {
        file.write_csv(
            &prov,
            &["replication", "seed", "error"],
            errors.iter().enumerate().map(|(r, &e)| {
                vec![r.to_string(), (cfg.seed + r as u64).to_string(), fmt_f64(e)]
            }),
        )?;
    }
    let report = json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "method": cfg.method.name(),
        "point": cfg.converge.point,
        "replications": cfg.converge.replications,
        "sample_sizes": summary.sample_sizes,
        "mean": summary.mean(),
        "std": summary.std(),
        "skewness": summary.skewness(),
        "slope": summary.slope,
    });
    slopes_file.write_json(&report)?;
    println!("log-log slope of the error standard deviation: {:.4}", summary.slope);
    Ok(Outcome::Success)
}
