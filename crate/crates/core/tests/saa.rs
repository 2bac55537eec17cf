use approx::assert_relative_eq;
use nalgebra::DVector;
use rfopt::kl::{draw_realizations, standard_normal};
use rfopt::numerics::{QuadratureRule, SplineField};
use rfopt::problems::{build_variance_saa, exact_f1, f2, VarianceProblem, Weight, WeightedSquare};
use rfopt::randomfield::{assemble_covariance, CovarianceModel, Grid1D};
use rfopt::saa::{sample_std, FieldParameterization, PathFunctional, SAAProblem};
use rfopt::sensitivity::SensitivityMethod;
use rfopt::Result;

const ROUTES: [SensitivityMethod; 2] = [
    SensitivityMethod::ScaledField,
    SensitivityMethod::EigenPerturbation,
];

/// `integral e dx`, linear in the path.
struct Integral(Vec<f64>);

impl PathFunctional for Integral {
    fn value(&self, path: &[f64]) -> Result<f64> {
        Ok(path.iter().zip(&self.0).map(|(e, w)| e * w).sum())
    }

    fn path_gradient(&self, _path: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.0);
        Ok(())
    }
}

struct One;

impl PathFunctional for One {
    fn value(&self, _path: &[f64]) -> Result<f64> {
        Ok(1.0)
    }

    fn path_gradient(&self, _path: &[f64], out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
}

fn rule() -> QuadratureRule {
    QuadratureRule::composite_gauss(20, 2).unwrap()
}

fn field(sigma: SplineField, mean_len: usize) -> FieldParameterization {
    let n = sigma.len();
    FieldParameterization {
        grid: Grid1D::from_rule(&rule()).unwrap(),
        mean: (mean_len > 0).then(|| SplineField::constant(mean_len, 0.0).unwrap()),
        covariance: CovarianceModel::scaled(0.1, sigma).unwrap(),
        covariance_params: (1..=n).collect(),
    }
}

fn wavy_sigma(n: usize) -> SplineField {
    SplineField::from_greville(n, |x| 0.8 + 0.4 * (3.0 * x).sin()).unwrap()
}

fn problem(
    functional: Box<dyn PathFunctional>,
    method: SensitivityMethod,
    seed: u64,
    n: usize,
    mean_len: usize,
) -> SAAProblem {
    SAAProblem::with_seed(field(wavy_sigma(8), mean_len), functional, None, method, seed, n, 0.999_999)
        .unwrap()
}

#[test]
fn linear_functional_of_zero_mean_field_is_near_zero() {
    let rule = rule();
    let weights = rule.weights().to_vec();
    let f = field(wavy_sigma(8), 0);
    let cov = assemble_covariance(&f.covariance, &f.grid).unwrap();
    let q = DVector::from_vec(weights.clone());
    let gamma = (q.transpose() * cov.entries() * &q)[(0, 0)].sqrt();
    let n = 4000;
    for method in ROUTES {
        let saa = problem(Box::new(Integral(weights.clone())), method, 11, n, 0);
        let est = saa.evaluate(&saa.initial_parameters()).unwrap();
        assert!(
            est.value.abs() <= 4.0 * gamma / (n as f64).sqrt(),
            "{method:?}: {} vs gamma {gamma}",
            est.value
        );
        assert_relative_eq!(sample_std(&est.per_sample_values), gamma, max_relative = 0.1);
    }
}

#[test]
fn constant_functional_has_zero_gradient() {
    for method in ROUTES {
        let saa = problem(Box::new(One), method, 3, 200, 4);
        let est = saa.evaluate(&saa.initial_parameters()).unwrap();
        assert_eq!(est.value, 1.0);
        assert!(est.gradient.iter().all(|&g| g == 0.0));
    }
}

#[test]
fn draws_depend_only_on_seed_and_index() {
    let mut first_draws = Vec::new();
    for seed in 0..100u64 {
        let small = draw_realizations(seed, 20, 5).unwrap();
        let large = draw_realizations(seed, 60, 7).unwrap();
        for n in 0..20 {
            for i in 0..5 {
                assert_eq!(small.draws()[(n, i)], large.draws()[(n, i)]);
                assert_eq!(small.draws()[(n, i)], standard_normal(seed, n, i));
            }
        }
        first_draws.push(small.draws()[(0, 0)].to_bits());
    }
    first_draws.sort_unstable();
    first_draws.dedup();
    assert_eq!(first_draws.len(), 100);
}

#[test]
fn gradient_matches_central_differences() {
    let weight = Weight::model();
    for method in ROUTES {
        let saa = problem(Box::new(WeightedSquare::new(&weight, &rule())), method, 7, 50, 4);
        let mut p = saa.initial_parameters();
        for k in 0..4 {
            p[k] = 0.3 * (k as f64 - 1.5);
        }
        let est = saa.evaluate(&p).unwrap();
        let h = 1e-5;
        let scale = est.gradient.amax();
        for k in 0..p.len() {
            let (mut up, mut down) = (p.clone(), p.clone());
            up[k] += h;
            down[k] -= h;
            let fd = (saa.value(&up).unwrap() - saa.value(&down).unwrap()) / (2.0 * h);
            let err = (fd - est.gradient[k]).abs() / scale;
            assert!(err <= 1e-6, "{method:?} parameter {k}: fd {fd} vs {}", est.gradient[k]);
        }
    }
}

#[test]
fn evaluation_is_bitwise_reproducible() {
    let weight = Weight::model();
    for method in ROUTES {
        let saa = problem(Box::new(WeightedSquare::new(&weight, &rule())), method, 9, 300, 4);
        let p = saa.initial_parameters();
        let a = saa.evaluate(&p).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| saa.evaluate(&p)).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.gradient, b.gradient);
        assert_eq!(a.per_sample_values, b.per_sample_values);
    }
}

fn rms_error(n: usize, reps: u64) -> f64 {
    let problem = VarianceProblem::default();
    let rule = problem.rule().unwrap();
    let sigma = wavy_sigma(problem.n_sigma);
    let exact = exact_f1(&sigma, &problem.weight, &rule).unwrap();
    let (f2_value, _) = f2(&sigma, &rule, problem.sigma_min).unwrap();
    let p = DVector::from_column_slice(sigma.coefficients());
    let sq: f64 = (0..reps)
        .map(|r| {
            let setup = build_variance_saa(&problem, 1000 + r, n, SensitivityMethod::ScaledField)
                .unwrap();
            let v = setup.saa.as_ref().unwrap().value(&p).unwrap() - f2_value;
            (v - exact).powi(2)
        })
        .sum();
    (sq / reps as f64).sqrt()
}

#[test]
fn objective_error_shrinks_like_root_n() {
    let ratio = rms_error(100, 50) / rms_error(400, 50);
    assert!((ratio - 2.0).abs() <= 0.4, "rms error ratio {ratio}");
}

#[test]
fn variance_objective_is_midpoint_convex() {
    let problem = VarianceProblem::default();
    let setup = build_variance_saa(&problem, 2, 200, SensitivityMethod::ScaledField).unwrap();
    for pair in 0..10 {
        let a = DVector::from_fn(problem.n_sigma, |k, _| {
            0.3 + 1.2 * standard_normal(77, pair, k).abs().min(1.0)
        });
        let b = DVector::from_fn(problem.n_sigma, |k, _| {
            0.3 + 1.2 * standard_normal(78, pair, k).abs().min(1.0)
        });
        let mid = (&a + &b) * 0.5;
        let fa = setup.objective(&a).unwrap().0;
        let fb = setup.objective(&b).unwrap().0;
        let fm = setup.objective(&mid).unwrap().0;
        assert!(fm <= 0.5 * (fa + fb) + 1e-12, "pair {pair}: {fm} > {}", 0.5 * (fa + fb));
    }
}
