use super::{
    jacobian, norm, residuals, scatter_update, PfError, PfOptions, PfProblem, PfSolution, PfState,
    DEFAULT_NR_MAX_ITER,
};
use crate::sparse::SparseLu;

/// Full Newton-Raphson in polar coordinates. Each iteration refactors the
/// Jacobian. On failure to converge the best iterate is returned inside
/// [`PfError::NotConverged`].
pub fn solve_nr(
    problem: &PfProblem<'_>,
    start: Option<&PfState>,
    options: PfOptions,
) -> Result<PfSolution, PfError> {
    assert!(options.tol > 0.0, "tolerance must be positive");
    let max_iter = options.max_iter.unwrap_or(DEFAULT_NR_MAX_ITER);
    let net = problem.network;
    let (mut v, mut theta) = problem.initial_state(start);

    let mut best: Option<PfSolution> = None;
    let mut factorizations = 0;
    let mut iterations = 0;
    loop {
        let f = residuals(problem, &v, &theta);
        let res = norm(&f);
        if best.as_ref().is_none_or(|b| res < b.residual_norm) {
            best = Some(PfSolution {
                v: v.clone(),
                theta: theta.clone(),
                iterations,
                residual_norm: res,
                converged: false,
                factorizations,
            });
        }
        if res < options.tol {
            return Ok(PfSolution {
                v,
                theta,
                iterations,
                residual_norm: res,
                converged: true,
                factorizations,
            });
        }
        if iterations >= max_iter || !res.is_finite() {
            break;
        }
        let jac = jacobian(problem, &v, &theta);
        let lu = SparseLu::factor(&jac.matrix).map_err(PfError::SingularJacobian)?;
        factorizations += 1;
        // F + J dx = 0
        let dx = lu.solve(&f);
        scatter_update(net, &dx, &mut v, &mut theta, -1.0);
        iterations += 1;
    }
    let mut best = best.expect("at least one residual evaluation");
    best.iterations = iterations;
    best.factorizations = factorizations;
    Err(PfError::NotConverged(Box::new(best)))
}

#[cfg(test)]
mod tests {
    use super::super::test_networks::*;
    use super::super::{PfOptions, PfProblem};
    use super::*;

    #[test]
    fn flat_no_load_converges_immediately() {
        let net = two_bus(0.0, 0.0, 0.0);
        let pb = PfProblem::from_case(&net).unwrap();
        let sol = solve_nr(&pb, None, PfOptions::default()).unwrap();
        assert!(sol.converged && sol.iterations <= 1);
        assert!(sol.v.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(sol.theta.iter().all(|&t| t.abs() < 1e-12));
    }

    #[test]
    fn two_bus_matches_closed_form() {
        let net = two_bus(0.0, 0.1, 0.0);
        let pb = PfProblem::from_case(&net).unwrap();
        let sol = solve_nr(&pb, None, PfOptions { tol: 1e-12, max_iter: None }).unwrap();
        let s: f64 = 0.01;
        let v2 = ((1.0 + (1.0 - 4.0 * s * s).sqrt()) / 2.0).sqrt();
        let t2 = -(s / v2).asin();
        assert!((sol.v[1] - v2).abs() < 1e-8);
        assert!((sol.theta[1] - t2).abs() < 1e-8);
        assert_eq!(sol.theta[0], 0.0);
        assert_eq!(sol.factorizations, sol.iterations);
    }

    #[test]
    fn infeasible_load_does_not_converge() {
        // far beyond the 2-bus maximum transfer of b/2 = 5 p.u.
        let net = two_bus(0.0, 8.0, 0.0);
        let pb = PfProblem::from_case(&net).unwrap();
        match solve_nr(&pb, None, PfOptions { tol: 1e-8, max_iter: Some(15) }) {
            Err(PfError::NotConverged(best)) => {
                assert!(!best.converged);
                assert!(best.residual_norm.is_finite());
            }
            Err(PfError::SingularJacobian(_)) => {}
            other => panic!("expected failure, got {other:?}"),
        }
    }
}
