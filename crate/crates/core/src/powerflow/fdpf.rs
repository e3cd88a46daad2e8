use std::sync::atomic::Ordering;
use std::sync::Arc;

use super::{norm, residuals, PfError, PfOptions, PfProblem, PfSolution, PfState, DEFAULT_FDPF_MAX_ITER};
use crate::case_io::NetworkModel;
use crate::sparse::{CsrMatrix, SingularMatrix, SparseLu};

/// Factored B′ (angles at PV∪PQ) and B″ (magnitudes at PQ) of the XB
/// scheme. Built once per network and shared by every solve.
#[derive(Debug)]
pub struct DecoupledFactors {
    pub b_prime: SparseLu,
    pub b_double_prime: Option<SparseLu>,
}

impl DecoupledFactors {
    /// B′ uses series reactances only; B″ is the negated imaginary part of
    /// the admittance matrix with phase shifts removed, shunts and charging
    /// kept.
    pub fn build(net: &NetworkModel) -> Result<Self, SingularMatrix> {
        let n = net.n_bus();
        let mut bp = Vec::with_capacity(4 * net.n_branch());
        let mut bpp = Vec::with_capacity(4 * net.n_branch() + n);
        for (i, bus) in net.buses.iter().enumerate() {
            bpp.push((i, i, -bus.bs));
        }
        for br in &net.branches {
            let (f, t) = (br.from, br.to);
            let s = 1.0 / br.x;
            bp.extend([(f, f, s), (t, t, s), (f, t, -s), (t, f, -s)]);

            let mut unshifted = br.clone();
            unshifted.shift = 0.0;
            let y = unshifted.admittance();
            bpp.extend([(f, f, -y.ff.im), (t, t, -y.tt.im), (f, t, -y.ft.im), (t, f, -y.tf.im)]);
        }
        let pvpq: Vec<usize> = net.pv().iter().chain(net.pq()).copied().collect();
        let b_prime = SparseLu::factor(&CsrMatrix::from_triplets(n, n, bp).select(&pvpq, &pvpq))?;
        let b_double_prime = if net.pq().is_empty() {
            None
        } else {
            Some(SparseLu::factor(
                &CsrMatrix::from_triplets(n, n, bpp).select(net.pq(), net.pq()),
            )?)
        };
        Ok(DecoupledFactors {
            b_prime,
            b_double_prime,
        })
    }

    /// The network's cached factors, building them on first use. The flag is
    /// true when this call performed the build.
    pub fn cached(net: &NetworkModel) -> Result<(Arc<Self>, bool), SingularMatrix> {
        let mut built = false;
        let entry = net.fdpf_cache.get_or_init(|| {
            built = true;
            net.fdpf_builds.fetch_add(1, Ordering::SeqCst);
            DecoupledFactors::build(net).map(Arc::new)
        });
        entry.clone().map(|f| (f, built))
    }
}

/// Fast-decoupled power flow: alternating angle and magnitude corrections
/// `Δθ = B′⁻¹ ΔP/V`, `ΔV = B″⁻¹ ΔQ/V` with constant factored matrices.
pub fn solve_fdpf(
    problem: &PfProblem<'_>,
    start: Option<&PfState>,
    options: PfOptions,
) -> Result<PfSolution, PfError> {
    assert!(options.tol > 0.0, "tolerance must be positive");
    let max_iter = options.max_iter.unwrap_or(DEFAULT_FDPF_MAX_ITER);
    let net = problem.network;
    let (factors, built) = DecoupledFactors::cached(net).map_err(PfError::SingularDecoupledMatrix)?;
    let factorizations = if built {
        1 + usize::from(factors.b_double_prime.is_some())
    } else {
        0
    };

    let (mut v, mut theta) = problem.initial_state(start);
    let pvpq: Vec<usize> = net.pv().iter().chain(net.pq()).copied().collect();
    let n_ang = pvpq.len();

    let mut iterations = 0;
    let mut best: Option<PfSolution> = None;
    let mut f = residuals(problem, &v, &theta);
    let mut consider = |v: &[f64], theta: &[f64], f: &[f64], iterations: usize| {
        let res = norm(f);
        if best.as_ref().is_none_or(|b| res < b.residual_norm) {
            best = Some(PfSolution {
                v: v.to_vec(),
                theta: theta.to_vec(),
                iterations,
                residual_norm: res,
                converged: false,
                factorizations,
            });
        }
        res
    };
    let finish = |v: Vec<f64>, theta: Vec<f64>, res: f64, iterations: usize| PfSolution {
        v,
        theta,
        iterations,
        residual_norm: res,
        converged: true,
        factorizations,
    };

    let res = consider(&v, &theta, &f, 0);
    if res < options.tol {
        return Ok(finish(v, theta, res, 0));
    }
    while iterations < max_iter {
        iterations += 1;

        let rhs: Vec<f64> = pvpq.iter().enumerate().map(|(k, &bus)| f[k] / v[bus]).collect();
        let d_theta = factors.b_prime.solve(&rhs);
        for (&bus, d) in pvpq.iter().zip(&d_theta) {
            theta[bus] += d;
        }
        f = residuals(problem, &v, &theta);
        let res = consider(&v, &theta, &f, iterations);
        if res < options.tol {
            return Ok(finish(v, theta, res, iterations));
        }
        if !res.is_finite() {
            break;
        }

        if let Some(bpp) = &factors.b_double_prime {
            let rhs: Vec<f64> = net
                .pq()
                .iter()
                .enumerate()
                .map(|(k, &bus)| f[n_ang + k] / v[bus])
                .collect();
            let d_v = bpp.solve(&rhs);
            for (&bus, d) in net.pq().iter().zip(&d_v) {
                v[bus] += d;
            }
            f = residuals(problem, &v, &theta);
            let res = consider(&v, &theta, &f, iterations);
            if res < options.tol {
                return Ok(finish(v, theta, res, iterations));
            }
            if !res.is_finite() {
                break;
            }
        }
    }
    let mut best = best.expect("at least one residual evaluation");
    best.iterations = iterations;
    Err(PfError::NotConverged(Box::new(best)))
}

#[cfg(test)]
mod tests {
    use super::super::test_networks::*;
    use super::super::{solve_nr, PfOptions, PfProblem};
    use super::*;

    #[test]
    fn flat_no_load() {
        let net = two_bus(0.0, 0.0, 0.0);
        let pb = PfProblem::from_case(&net).unwrap();
        let sol = solve_fdpf(&pb, None, PfOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.v.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(sol.theta.iter().all(|&t| t.abs() < 1e-12));
    }

    #[test]
    fn agrees_with_newton_on_two_bus() {
        let net = two_bus(0.0, 0.1, 0.0);
        let pb = PfProblem::from_case(&net).unwrap();
        let opts = PfOptions { tol: 1e-8, max_iter: None };
        let fd = solve_fdpf(&pb, None, opts).unwrap();
        let nr = solve_nr(&pb, None, opts).unwrap();
        for i in 0..2 {
            assert!((fd.v[i] - nr.v[i]).abs() < 1e-6);
            assert!((fd.theta[i] - nr.theta[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn factors_built_once_per_network() {
        let net = three_bus();
        let pb = PfProblem::from_case(&net).unwrap();
        let first = solve_fdpf(&pb, None, PfOptions::default()).unwrap();
        assert_eq!(first.factorizations, 2);
        for _ in 0..5 {
            let again = solve_fdpf(&pb, None, PfOptions::default()).unwrap();
            assert_eq!(again.factorizations, 0);
        }
        assert_eq!(net.fdpf_factor_builds(), 1);
        // a clone starts with an empty cache
        let copy = net.clone();
        assert_eq!(copy.fdpf_factor_builds(), 0);
    }
}
