use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::problems::{ToleranceProblem, VarianceProblem};
use crate::sensitivity::SensitivityMethod;
use crate::sqp::Tolerances;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Variance,
    Tolerance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Eigenvalue/eigenvector perturbation of the expansion.
    Eigen,
    /// Differentiate `sigma * e_unit` directly.
    Scaled,
}

impl Method {
    pub fn sensitivity(self) -> SensitivityMethod {
        match self {
            Self::Eigen => SensitivityMethod::EigenPerturbation,
            Self::Scaled => SensitivityMethod::ScaledField,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Eigen => "eigen",
            Self::Scaled => "scaled",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelChoice {
    SquaredExponential,
    Exponential,
}

/// Settings of the `sample` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub kernel: KernelChoice,
    pub correlation_length: f64,
    pub grid_points: usize,
    pub paths: usize,
    /// Fixed number of modes; when absent the scatter threshold decides.
    pub modes: Option<usize>,
    pub threshold: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            kernel: KernelChoice::SquaredExponential,
            correlation_length: 0.1,
            grid_points: 201,
            paths: 5,
            modes: None,
            threshold: 0.99,
        }
    }
}

/// Settings of the `gradcheck` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Central difference step for sigma coefficients.
    pub fd_step: f64,
    /// Central difference step for mean coefficients (the objective is
    /// quadratic in them, so a large step is exact and avoids roundoff).
    pub mean_fd_step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            fd_step: 1e-5,
            mean_fd_step: 1e-3,
            tolerance: 1e-4,
        }
    }
}

/// Settings of the `converge` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergeConfig {
    pub replications: usize,
    pub sample_sizes: Vec<usize>,
    /// Location where the optimum error is recorded.
    pub point: f64,
}

impl Default for ConvergeConfig {
    fn default() -> Self {
        Self {
            replications: 200,
            sample_sizes: vec![100, 400],
            point: 0.5,
        }
    }
}

/// Everything a run depends on. Unset keys take the defaults shown by `--help`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemKind,
    pub seed: u64,
    pub samples: usize,
    pub method: Method,
    pub solver: Tolerances,
    pub confidence_level: f64,
    /// Number of equally spaced points on which the optimum is reported.
    pub eval_points: usize,
    /// Tolerance problem only: optimize the exact expectation instead of the SAA mean.
    pub expected_objective: bool,
    pub variance: VarianceProblem,
    pub tolerance: ToleranceProblem,
    pub sample: SampleConfig,
    pub gradcheck: GradcheckConfig,
    pub converge: ConvergeConfig,
    pub output_dir: PathBuf,
    /// Worker threads; results do not depend on it.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: ProblemKind::Variance,
            seed: 5,
            samples: 10_000,
            method: Method::Scaled,
            solver: Tolerances::default(),
            confidence_level: 0.95,
            eval_points: 101,
            expected_objective: false,
            variance: VarianceProblem::default(),
            tolerance: ToleranceProblem::default(),
            sample: SampleConfig::default(),
            gradcheck: GradcheckConfig::default(),
            converge: ConvergeConfig::default(),
            output_dir: PathBuf::from("out"),
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks shared by every command.
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(invalid("samples must be at least 1"));
        }
        if !(self.confidence_level > 0.0 && self.confidence_level < 1.0) {
            return Err(invalid("confidence_level must be in (0, 1)"));
        }
        if self.eval_points < 2 {
            return Err(invalid("eval_points must be at least 2"));
        }
        let t = &self.solver;
        if !(t.kkt_tol > 0.0 && t.step_tol >= 0.0) || t.max_iter == 0 {
            return Err(invalid("solver tolerances must be positive"));
        }
        if self.threads == Some(0) {
            return Err(invalid("threads must be at least 1"));
        }
        match self.problem {
            ProblemKind::Variance => {
                self.variance.validate()?;
                if self.expected_objective {
                    return Err(invalid("expected_objective applies to the tolerance problem only"));
                }
            }
            ProblemKind::Tolerance => {
                self.tolerance.validate()?;
                if self.method != Method::Scaled {
                    return Err(invalid("the tolerance problem uses the scaled method"));
                }
            }
        }
        Ok(())
    }

    pub fn validate_sample(&self) -> Result<()> {
        let s = &self.sample;
        if s.modes == Some(0) {
            return Err(invalid("at least one mode must be requested"));
        }
        if let Some(m) = s.modes {
            if m > s.grid_points {
                return Err(invalid(format!(
                    "{m} modes requested on a {}-point grid",
                    s.grid_points
                )));
            }
        }
        if s.paths == 0 {
            return Err(invalid("paths must be at least 1"));
        }
        if s.grid_points < 2 {
            return Err(invalid("grid_points must be at least 2"));
        }
        if !(s.correlation_length > 0.0) {
            return Err(invalid("correlation_length must be positive"));
        }
        if !(s.threshold > 0.0 && s.threshold <= 1.0) {
            return Err(invalid("threshold must be in (0, 1]"));
        }
        Ok(())
    }

    pub fn validate_gradcheck(&self) -> Result<()> {
        self.validate()?;
        let g = &self.gradcheck;
        if !(g.fd_step > 0.0 && g.mean_fd_step > 0.0 && g.tolerance > 0.0) {
            return Err(invalid("gradcheck steps and tolerance must be positive"));
        }
        if self.problem == ProblemKind::Tolerance && self.expected_objective {
            return Err(invalid("gradcheck needs the sampled objective"));
        }
        Ok(())
    }

    pub fn validate_converge(&self) -> Result<()> {
        self.validate()?;
        let c = &self.converge;
        if self.problem != ProblemKind::Variance {
            return Err(invalid("the convergence study runs on the variance problem"));
        }
        if c.replications < 30 {
            return Err(invalid("converge needs at least 30 replications"));
        }
        let mut sizes = c.sample_sizes.clone();
        sizes.sort_unstable();
        sizes.dedup();
        if sizes.len() < 2 || sizes.len() != c.sample_sizes.len() || sizes[0] == 0 {
            return Err(invalid("converge needs at least two distinct positive sample sizes"));
        }
        if !(0.0..=1.0).contains(&c.point) {
            return Err(invalid("converge point must lie in [0, 1]"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring where outputs go and
    /// how many threads run.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
            map.remove("threads");
        }
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        let partial: RunConfig = serde_json::from_str(r#"{"samples": 100}"#).unwrap();
        assert_eq!(partial.samples, 100);
        assert_eq!(partial.variance, VarianceProblem::default());
        assert!(serde_json::from_str::<RunConfig>(r#"{"sampels": 100}"#).is_err());
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/elsewhere");
        b.threads = Some(3);
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let mut c = RunConfig::default();
        c.sample.modes = Some(0);
        assert!(c.validate_sample().is_err());
        let mut c = RunConfig::default();
        c.converge.replications = 10;
        assert!(c.validate_converge().is_err());
        let mut c = RunConfig::default();
        c.converge.sample_sizes = vec![100];
        assert!(c.validate_converge().is_err());
        let c = RunConfig {
            problem: ProblemKind::Tolerance,
            method: Method::Eigen,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
