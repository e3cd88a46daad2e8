use num_complex::Complex64;

use super::PfProblem;
use crate::case_io::NetworkModel;
use crate::sparse::CsrMatrix;

/// Partial derivatives of the bus injections `S = V ⊙ conj(Y V)` with
/// respect to every angle and every magnitude, in polar coordinates.
pub fn power_derivatives(
    ybus: &CsrMatrix<Complex64>,
    v: &[f64],
    theta: &[f64],
) -> (CsrMatrix<Complex64>, CsrMatrix<Complex64>) {
    let n = v.len();
    let unit: Vec<Complex64> = theta.iter().map(|&a| Complex64::from_polar(1.0, a)).collect();
    let phasor: Vec<Complex64> = unit.iter().zip(v).map(|(u, &m)| u * m).collect();
    let current = ybus.mul_vec(&phasor);
    let j = Complex64::new(0.0, 1.0);

    let mut d_va = Vec::with_capacity(ybus.nnz());
    let mut d_vm = Vec::with_capacity(ybus.nnz());
    for i in 0..n {
        for (k, y) in ybus.row(i) {
            let mut a = -j * phasor[i] * (y * phasor[k]).conj();
            let mut m = phasor[i] * (y * unit[k]).conj();
            if k == i {
                a += j * phasor[i] * current[i].conj();
                m += current[i].conj() * unit[i];
            }
            d_va.push((i, k, a));
            d_vm.push((i, k, m));
        }
    }
    (
        CsrMatrix::from_triplets(n, n, d_va),
        CsrMatrix::from_triplets(n, n, d_vm),
    )
}

/// Jacobian of the mismatch vector with respect to the unknowns.
#[derive(Debug, Clone)]
pub struct PfJacobian {
    pub matrix: CsrMatrix<f64>,
    pub n_pv: usize,
    pub n_pq: usize,
}

impl PfJacobian {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Position of each bus among the angle unknowns and the magnitude unknowns.
pub(crate) fn unknown_positions(net: &NetworkModel) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
    let n = net.n_bus();
    let mut angle = vec![None; n];
    let mut magnitude = vec![None; n];
    for (k, &bus) in net.pv().iter().chain(net.pq()).enumerate() {
        angle[bus] = Some(k);
    }
    let offset = net.n_gen() + net.n_load();
    for (k, &bus) in net.pq().iter().enumerate() {
        magnitude[bus] = Some(offset + k);
    }
    (angle, magnitude)
}

/// Analytic Jacobian of the residuals (specified − calculated), so every
/// block is the negated injection derivative.
pub fn jacobian(problem: &PfProblem<'_>, v: &[f64], theta: &[f64]) -> PfJacobian {
    let net = problem.network;
    let (d_va, d_vm) = power_derivatives(&net.ybus, v, theta);
    let (angle_pos, mag_pos) = unknown_positions(net);
    // equation rows share the unknown numbering: P rows by angle position,
    // Q rows by magnitude position
    let dim = problem.n_unknowns();
    let mut triplets = Vec::with_capacity(4 * net.ybus.nnz());
    for i in 0..net.n_bus() {
        let p_row = angle_pos[i];
        let q_row = mag_pos[i];
        if p_row.is_none() && q_row.is_none() {
            continue;
        }
        for ((k, a), (_, m)) in d_va.row(i).zip(d_vm.row(i)) {
            if let Some(col) = angle_pos[k] {
                if let Some(r) = p_row {
                    triplets.push((r, col, -a.re));
                }
                if let Some(r) = q_row {
                    triplets.push((r, col, -a.im));
                }
            }
            if let Some(col) = mag_pos[k] {
                if let Some(r) = p_row {
                    triplets.push((r, col, -m.re));
                }
                if let Some(r) = q_row {
                    triplets.push((r, col, -m.im));
                }
            }
        }
    }
    PfJacobian {
        matrix: CsrMatrix::from_triplets(dim, dim, triplets),
        n_pv: net.n_gen(),
        n_pq: net.n_load(),
    }
}
