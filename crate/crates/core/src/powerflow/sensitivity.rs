use super::jacobian::unknown_positions;
use super::{jacobian, power_derivatives, PfError, PfProblem, PfSolution};
use crate::sparse::{CsrMatrix, SparseLu};

/// Implicit derivative of the power-flow unknowns with respect to the
/// control vector `u = (P at PV, V at PV, V at slack, θ at slack)`:
/// `dz/du = −J⁻¹ ∂F/∂u` with `J` the mismatch Jacobian at the solution.
///
/// The control ordering is the same as the network output `y`.
#[derive(Debug, Clone)]
pub struct Sensitivity {
    lu: SparseLu,
    /// `∂F/∂u`, equations × controls
    d_residual_d_control: CsrMatrix<f64>,
}

impl Sensitivity {
    pub fn n_unknowns(&self) -> usize {
        self.lu.dim()
    }

    pub fn n_controls(&self) -> usize {
        self.d_residual_d_control.ncols()
    }

    /// `dz/du · du`.
    pub fn apply(&self, du: &[f64]) -> Vec<f64> {
        let rhs = self.d_residual_d_control.mul_vec(du);
        self.lu.solve(&rhs).into_iter().map(|x| -x).collect()
    }

    /// `(dz/du)ᵀ g`, one transposed solve regardless of the control count.
    pub fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        let adjoint = self.lu.solve_transpose(g);
        self.d_residual_d_control
            .transpose_mul_vec(&adjoint)
            .into_iter()
            .map(|x| -x)
            .collect()
    }

    /// Dense `dz/du`, unknowns × controls.
    pub fn matrix(&self) -> Vec<Vec<f64>> {
        let (nz, nu) = (self.n_unknowns(), self.n_controls());
        let mut out = vec![vec![0.0; nu]; nz];
        for c in 0..nu {
            let mut e = vec![0.0; nu];
            e[c] = 1.0;
            for (r, value) in self.apply(&e).into_iter().enumerate() {
                out[r][c] = value;
            }
        }
        out
    }
}

pub fn sensitivity(problem: &PfProblem<'_>, solution: &PfSolution) -> Result<Sensitivity, PfError> {
    if !solution.converged {
        return Err(PfError::NotConvergedInput);
    }
    let net = problem.network;
    let (v, theta) = (&solution.v, &solution.theta);
    let jac = jacobian(problem, v, theta);
    let lu = SparseLu::factor(&jac.matrix).map_err(PfError::SingularJacobian)?;

    let (d_va, d_vm) = power_derivatives(&net.ybus, v, theta);
    let (angle_pos, mag_pos) = unknown_positions(net);
    let npv = net.n_gen();
    let slack = net.slack();

    let mut triplets = Vec::new();
    for k in 0..npv {
        triplets.push((k, k, 1.0));
    }
    // magnitude controls: PV buses then the slack; angle control: the slack
    let magnitude_controls = net
        .pv()
        .iter()
        .enumerate()
        .map(|(k, &bus)| (npv + k, bus))
        .chain(std::iter::once((2 * npv, slack)));
    for (col, bus) in magnitude_controls {
        push_column(&mut triplets, &d_vm, bus, col, &angle_pos, &mag_pos);
    }
    push_column(&mut triplets, &d_va, slack, 2 * npv + 1, &angle_pos, &mag_pos);

    Ok(Sensitivity {
        lu,
        d_residual_d_control: CsrMatrix::from_triplets(jac.dim(), 2 * npv + 2, triplets),
    })
}

/// Adds `−∂S/∂(bus quantity)` restricted to the mismatch rows as column
/// `col`.
fn push_column(
    triplets: &mut Vec<(usize, usize, f64)>,
    d_s: &CsrMatrix<num_complex::Complex64>,
    bus: usize,
    col: usize,
    angle_pos: &[Option<usize>],
    mag_pos: &[Option<usize>],
) {
    for i in 0..d_s.nrows() {
        let d = d_s.get(i, bus);
        if d == num_complex::Complex64::default() {
            continue;
        }
        if let Some(r) = angle_pos[i] {
            triplets.push((r, col, -d.re));
        }
        if let Some(r) = mag_pos[i] {
            triplets.push((r, col, -d.im));
        }
    }
}
