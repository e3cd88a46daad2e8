//! AC power flow: mismatch equations, Newton-Raphson and fast-decoupled
//! solvers, and implicit sensitivities of the solution.
//!
//! Unknowns and equations share one ordering: angles at PV buses, angles at
//! PQ buses, then magnitudes at PQ buses (each ascending by bus index). The
//! matching equations are ΔP at PV, ΔP at PQ and ΔQ at PQ.

mod fdpf;
mod jacobian;
mod newton;
mod sensitivity;

use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::case_io::NetworkModel;
use crate::sparse::{CsrMatrix, SingularMatrix};

pub use fdpf::{solve_fdpf, DecoupledFactors};
pub use jacobian::{jacobian, power_derivatives, PfJacobian};
pub use newton::solve_nr;
pub use sensitivity::{sensitivity, Sensitivity};

pub(crate) type FactorCache = OnceLock<Result<Arc<DecoupledFactors>, SingularMatrix>>;

pub const DEFAULT_TOL: f64 = 1e-5;
pub const DEFAULT_NR_MAX_ITER: usize = 30;
pub const DEFAULT_FDPF_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    #[default]
    Nr,
    Fdpf,
}

impl std::str::FromStr for SolverKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nr" => Ok(SolverKind::Nr),
            "fdpf" => Ok(SolverKind::Fdpf),
            other => Err(format!("unknown solver `{other}` (expected nr or fdpf)")),
        }
    }
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolverKind::Nr => "nr",
            SolverKind::Fdpf => "fdpf",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PfError {
    #[error("power flow did not converge in {} iterations (residual {:.3e})", .0.iterations, .0.residual_norm)]
    NotConverged(Box<PfSolution>),
    #[error("singular power-flow Jacobian: {0}")]
    SingularJacobian(SingularMatrix),
    #[error("singular decoupled matrix: {0}")]
    SingularDecoupledMatrix(SingularMatrix),
    #[error("sensitivities need a converged solution")]
    NotConvergedInput,
    #[error("invalid power-flow problem: {0}")]
    InvalidProblem(String),
}

/// Injections and setpoints that define one power-flow solve.
#[derive(Debug, Clone)]
pub struct PfProblem<'a> {
    pub network: &'a NetworkModel,
    /// Net active injection `Pg − Pd` at PV then PQ buses.
    pub p_injection: Vec<f64>,
    /// Net reactive injection `−Qd` at PQ buses.
    pub q_injection: Vec<f64>,
    /// Magnitudes at the slack bus followed by the PV buses.
    pub v_setpoint: Vec<f64>,
    pub theta_ref: f64,
}

/// Slack of the setpoint box check, so box-mapped outputs that round a
/// hair past a bound are still accepted.
const SETPOINT_SLACK: f64 = 1e-9;

impl<'a> PfProblem<'a> {
    pub fn new(
        network: &'a NetworkModel,
        p_injection: Vec<f64>,
        q_injection: Vec<f64>,
        v_setpoint: Vec<f64>,
        theta_ref: f64,
    ) -> Result<Self, PfError> {
        let (npv, npq) = (network.n_gen(), network.n_load());
        if p_injection.len() != npv + npq || q_injection.len() != npq || v_setpoint.len() != npv + 1 {
            return Err(PfError::InvalidProblem(format!(
                "expected {} P, {} Q and {} V entries, got {}, {} and {}",
                npv + npq,
                npq,
                npv + 1,
                p_injection.len(),
                q_injection.len(),
                v_setpoint.len()
            )));
        }
        let controlled = std::iter::once(network.slack()).chain(network.pv().iter().copied());
        for (bus, &v) in controlled.zip(&v_setpoint) {
            let b = &network.buses[bus];
            if !(v >= b.vmin - SETPOINT_SLACK && v <= b.vmax + SETPOINT_SLACK) {
                return Err(PfError::InvalidProblem(format!(
                    "setpoint {v} at bus {} outside [{}, {}]",
                    b.id, b.vmin, b.vmax
                )));
            }
        }
        if p_injection.iter().chain(&q_injection).any(|v| !v.is_finite()) {
            return Err(PfError::InvalidProblem("non-finite injection".into()));
        }
        Ok(PfProblem {
            network,
            p_injection,
            q_injection,
            v_setpoint,
            theta_ref,
        })
    }

    /// The case file's own dispatch and setpoints at nominal load.
    pub fn from_case(network: &'a NetworkModel) -> Result<Self, PfError> {
        let mut p = Vec::with_capacity(network.n_gen() + network.n_load());
        for (&bus, g) in network.pv().iter().zip(network.pv_generators()) {
            p.push(g.pg - network.buses[bus].pd);
        }
        p.extend(network.pq().iter().map(|&i| -network.buses[i].pd));
        let q = network.pq().iter().map(|&i| -network.buses[i].qd).collect();
        let v = std::iter::once(network.ref_generator().vg)
            .chain(network.pv_generators().map(|g| g.vg))
            .collect();
        PfProblem::new(network, p, q, v, 0.0)
    }

    pub fn n_unknowns(&self) -> usize {
        self.network.n_gen() + 2 * self.network.n_load()
    }

    /// Flat start: setpoints at controlled buses, 1.0 elsewhere, all angles
    /// at the reference angle.
    pub fn flat_start(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.network.n_bus();
        let mut v = vec![1.0; n];
        self.apply_setpoints(&mut v);
        (v, vec![self.theta_ref; n])
    }

    /// Overwrites the controlled magnitudes in `v`.
    pub fn apply_setpoints(&self, v: &mut [f64]) {
        v[self.network.slack()] = self.v_setpoint[0];
        for (&bus, &vs) in self.network.pv().iter().zip(&self.v_setpoint[1..]) {
            v[bus] = vs;
        }
    }

    /// Starting state, warm when `start` is given, with setpoints and the
    /// reference angle enforced.
    pub(crate) fn initial_state(&self, start: Option<&PfState>) -> (Vec<f64>, Vec<f64>) {
        match start {
            Some(s) if s.v.len() == self.network.n_bus() && s.theta.len() == self.network.n_bus() => {
                let mut v = s.v.clone();
                let mut theta = s.theta.clone();
                self.apply_setpoints(&mut v);
                theta[self.network.slack()] = self.theta_ref;
                (v, theta)
            }
            _ => self.flat_start(),
        }
    }
}

/// Voltage magnitudes and angles at every bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfState {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfSolution {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub iterations: usize,
    /// Euclidean norm of the final mismatch vector, per unit.
    pub residual_norm: f64,
    pub converged: bool,
    /// Matrix factorizations performed by this call.
    pub factorizations: usize,
}

impl PfSolution {
    pub fn state(&self) -> PfState {
        PfState {
            v: self.v.clone(),
            theta: self.theta.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfOptions {
    pub tol: f64,
    pub max_iter: Option<usize>,
}

impl Default for PfOptions {
    fn default() -> Self {
        PfOptions {
            tol: DEFAULT_TOL,
            max_iter: None,
        }
    }
}

/// Complex power injected by the network at each bus, `S = V ⊙ conj(Y V)`.
pub fn bus_power(ybus: &CsrMatrix<Complex64>, v: &[f64], theta: &[f64]) -> Vec<Complex64> {
    let phasors: Vec<Complex64> = v
        .iter()
        .zip(theta)
        .map(|(&m, &a)| Complex64::from_polar(m, a))
        .collect();
    let current = ybus.mul_vec(&phasors);
    phasors
        .iter()
        .zip(&current)
        .map(|(vi, ii)| vi * ii.conj())
        .collect()
}

/// Specified minus calculated injections: ΔP at PV∪PQ, then ΔQ at PQ.
pub fn residuals(problem: &PfProblem<'_>, v: &[f64], theta: &[f64]) -> Vec<f64> {
    let net = problem.network;
    let s = bus_power(&net.ybus, v, theta);
    let pvpq = net.pv().iter().chain(net.pq());
    let mut out: Vec<f64> = pvpq
        .zip(&problem.p_injection)
        .map(|(&i, &p)| p - s[i].re)
        .collect();
    out.extend(net.pq().iter().zip(&problem.q_injection).map(|(&i, &q)| q - s[i].im));
    out
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Writes an unknown-ordered update into full bus vectors.
pub(crate) fn scatter_update(net: &NetworkModel, dx: &[f64], v: &mut [f64], theta: &mut [f64], sign: f64) {
    let npv = net.n_gen();
    let npq = net.n_load();
    for (k, &bus) in net.pv().iter().chain(net.pq()).enumerate() {
        theta[bus] += sign * dx[k];
    }
    for (k, &bus) in net.pq().iter().enumerate() {
        v[bus] += sign * dx[npv + npq + k];
    }
}

/// Solves with the chosen method.
pub fn solve(
    problem: &PfProblem<'_>,
    solver: SolverKind,
    start: Option<&PfState>,
    options: PfOptions,
) -> Result<PfSolution, PfError> {
    match solver {
        SolverKind::Nr => solve_nr(problem, start, options),
        SolverKind::Fdpf => solve_fdpf(problem, start, options),
    }
}

/// Unknown vector `(θ_PV, θ_PQ, V_PQ)` read out of full bus vectors.
pub fn unknowns(net: &NetworkModel, v: &[f64], theta: &[f64]) -> Vec<f64> {
    net.pv()
        .iter()
        .chain(net.pq())
        .map(|&i| theta[i])
        .chain(net.pq().iter().map(|&i| v[i]))
        .collect()
}
