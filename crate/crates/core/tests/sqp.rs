use nalgebra::{DMatrix, DVector};
use rfopt::problems::{build_tolerance_saa, ToleranceProblem};
use rfopt::sqp::{minimize, Bounds, LinearEqualities, OptimizationSpec, Tolerances};

#[test]
fn tolerance_optimum_does_not_depend_on_start() {
    let problem = ToleranceProblem::default();
    let setup = build_tolerance_saa(&problem, 5, 2_000).unwrap();
    let tight = Tolerances {
        kkt_tol: 1e-10,
        ..Tolerances::default()
    };
    let n = setup.n_parameters();
    let starts = [
        setup.initial.clone(),
        DVector::from_fn(n, |k, _| 0.5 + 0.4 * (k as f64 / (n - 1) as f64)),
        DVector::from_fn(n, |k, _| 0.95 - 0.5 * (k as f64 / (n - 1) as f64)),
    ];
    let solutions: Vec<DVector<f64>> = starts
        .into_iter()
        .map(|start| {
            let mut spec = setup.optimization_spec(tight);
            spec.initial = start;
            let r = minimize(spec).unwrap();
            assert!(r.status.is_success(), "{:?}", r.status);
            r.solution
        })
        .collect();
    for s in &solutions[1..] {
        let diff = (s - &solutions[0]).amax();
        assert!(diff <= 1e-6, "solutions differ by {diff}");
    }
}

#[test]
fn equality_and_bound_constrained_quadratic() {
    // min |x - c|^2 subject to sum x = 1, 0 <= x <= 0.5
    let c = DVector::from_vec(vec![1.0, 0.2, -0.4, 0.1]);
    let target = c.clone();
    let spec = OptimizationSpec::new(
        Box::new(move |x: &DVector<f64>| {
            let d = x - &target;
            Ok((d.norm_squared(), d * 2.0))
        }),
        DVector::from_element(4, 0.25),
    )
    .with_equalities(LinearEqualities::new(DMatrix::from_element(1, 4, 1.0), DVector::from_element(1, 1.0)).unwrap())
    .with_bounds(Bounds::new(DVector::zeros(4), DVector::from_element(4, 0.5)).unwrap())
    .with_tolerances(Tolerances {
        kkt_tol: 1e-10,
        ..Tolerances::default()
    });
    let r = minimize(spec).unwrap();
    // x = clamp(c + 0.1, 0, 0.5)
    let expected = DVector::from_vec(vec![0.5, 0.3, 0.0, 0.2]);
    assert!((&r.solution - &expected).amax() <= 1e-8, "{}", r.solution);
    assert!(r.equality_residual <= 1e-12);
    assert!(r.bound_violation <= 1e-12);
}
