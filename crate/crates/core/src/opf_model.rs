//! Variable split of the AC-OPF problem and evaluation of its objective and
//! inequality constraints.
//!
//! * `x`: loads `[Pd; Qd]` at every bus
//! * `y`: network output `[Pg at PV; V at PV; V_ref; θ_ref]`
//! * `z1`: power-flow unknowns `[θ at PV; θ at PQ; V at PQ]`
//! * `z2`: derived `[Pg_ref; Qg_ref; Qg at PV; S² per branch]`
//!
//! The inequality vector `h` is laid out as
//! `[S² − S²max (M); V − Vmax (N); Vmin − V (N); Pg − Pgmax; Pgmin − Pg;
//! Qg − Qgmax; Qgmin − Qg]`, the last four blocks running over the PV
//! generators followed by the reference generator.

use std::ops::Range;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::case_io::NetworkModel;
use crate::powerflow::{
    bus_power, power_derivatives, solve, PfError, PfOptions, PfProblem, PfSolution, PfState,
    SolverKind,
};

/// Value of `h` at branches without a rating.
pub const UNCONSTRAINED_SENTINEL: f64 = -1e6;

/// A physical quantity behind one slot of a split vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quantity {
    Pd(usize),
    Qd(usize),
    Pg(usize),
    Qg(usize),
    V(usize),
    Theta(usize),
    BranchFlow(usize),
}

/// Constraint families used to group violations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstraintGroup {
    Pg,
    Qg,
    V,
    S2,
}

impl ConstraintGroup {
    pub const ALL: [ConstraintGroup; 4] = [
        ConstraintGroup::Pg,
        ConstraintGroup::Qg,
        ConstraintGroup::V,
        ConstraintGroup::S2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConstraintGroup::Pg => "Pg",
            ConstraintGroup::Qg => "Qg",
            ConstraintGroup::V => "V",
            ConstraintGroup::S2 => "S2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitLayout {
    pub n_bus: usize,
    pub n_branch: usize,
    pub n_gen: usize,
    pub n_load: usize,
    slack: usize,
    pv: Vec<usize>,
    pq: Vec<usize>,
    constrained: Vec<bool>,
}

impl SplitLayout {
    pub fn new(net: &NetworkModel) -> Self {
        SplitLayout {
            n_bus: net.n_bus(),
            n_branch: net.n_branch(),
            n_gen: net.n_gen(),
            n_load: net.n_load(),
            slack: net.slack(),
            pv: net.pv().to_vec(),
            pq: net.pq().to_vec(),
            constrained: net.branches.iter().map(|b| b.s_max.is_some()).collect(),
        }
    }

    pub fn dim_x(&self) -> usize {
        2 * self.n_bus
    }

    pub fn dim_y(&self) -> usize {
        2 * self.n_gen + 2
    }

    pub fn dim_z1(&self) -> usize {
        2 * self.n_load + self.n_gen
    }

    pub fn dim_z2(&self) -> usize {
        self.n_gen + self.n_branch + 2
    }

    pub fn dim_h(&self) -> usize {
        self.n_branch + 2 * self.n_bus + 4 * (self.n_gen + 1)
    }

    pub fn y_v_ref(&self) -> usize {
        2 * self.n_gen
    }

    pub fn y_theta_ref(&self) -> usize {
        2 * self.n_gen + 1
    }

    pub fn z2_qg(&self, k: usize) -> usize {
        2 + k
    }

    pub fn z2_s2(&self, l: usize) -> usize {
        2 + self.n_gen + l
    }

    pub fn h_s2(&self) -> Range<usize> {
        0..self.n_branch
    }

    pub fn h_v_upper(&self) -> Range<usize> {
        let s = self.n_branch;
        s..s + self.n_bus
    }

    pub fn h_v_lower(&self) -> Range<usize> {
        let s = self.n_branch + self.n_bus;
        s..s + self.n_bus
    }

    fn gen_block(&self, which: usize) -> Range<usize> {
        let g = self.n_gen + 1;
        let s = self.n_branch + 2 * self.n_bus + which * g;
        s..s + g
    }

    pub fn h_pg_upper(&self) -> Range<usize> {
        self.gen_block(0)
    }

    pub fn h_pg_lower(&self) -> Range<usize> {
        self.gen_block(1)
    }

    pub fn h_qg_upper(&self) -> Range<usize> {
        self.gen_block(2)
    }

    pub fn h_qg_lower(&self) -> Range<usize> {
        self.gen_block(3)
    }

    /// Whether slot `i` of `h` is a real constraint (not an unrated branch).
    pub fn is_constrained(&self, i: usize) -> bool {
        i >= self.n_branch || self.constrained[i]
    }

    pub fn group_of(&self, i: usize) -> ConstraintGroup {
        if i < self.n_branch {
            ConstraintGroup::S2
        } else if i < self.n_branch + 2 * self.n_bus {
            ConstraintGroup::V
        } else if i < self.h_qg_upper().start {
            ConstraintGroup::Pg
        } else {
            ConstraintGroup::Qg
        }
    }

    /// Buses of the generators in `h` order: PV buses then the slack.
    pub fn generator_buses(&self) -> impl Iterator<Item = usize> + '_ {
        self.pv.iter().copied().chain(std::iter::once(self.slack))
    }

    pub fn x_slots(&self) -> Vec<Quantity> {
        (0..self.n_bus)
            .map(Quantity::Pd)
            .chain((0..self.n_bus).map(Quantity::Qd))
            .collect()
    }

    pub fn y_slots(&self) -> Vec<Quantity> {
        self.pv
            .iter()
            .map(|&b| Quantity::Pg(b))
            .chain(self.pv.iter().map(|&b| Quantity::V(b)))
            .chain([Quantity::V(self.slack), Quantity::Theta(self.slack)])
            .collect()
    }

    pub fn z1_slots(&self) -> Vec<Quantity> {
        self.pv
            .iter()
            .chain(&self.pq)
            .map(|&b| Quantity::Theta(b))
            .chain(self.pq.iter().map(|&b| Quantity::V(b)))
            .collect()
    }

    pub fn z2_slots(&self) -> Vec<Quantity> {
        [Quantity::Pg(self.slack), Quantity::Qg(self.slack)]
            .into_iter()
            .chain(self.pv.iter().map(|&b| Quantity::Qg(b)))
            .chain((0..self.n_branch).map(Quantity::BranchFlow))
            .collect()
    }

    /// Assembles full bus vectors from `y` and `z1`.
    pub fn full_state(&self, y: &[f64], z1: &[f64]) -> PfState {
        let mut v = vec![0.0; self.n_bus];
        let mut theta = vec![0.0; self.n_bus];
        let ng = self.n_gen;
        for (k, &b) in self.pv.iter().enumerate() {
            v[b] = y[ng + k];
        }
        v[self.slack] = y[self.y_v_ref()];
        theta[self.slack] = y[self.y_theta_ref()];
        for (k, &b) in self.pv.iter().chain(&self.pq).enumerate() {
            theta[b] = z1[k];
        }
        let off = self.n_gen + self.n_load;
        for (k, &b) in self.pq.iter().enumerate() {
            v[b] = z1[off + k];
        }
        PfState { v, theta }
    }

    /// `z1` read out of full bus vectors.
    pub fn z1_from_state(&self, v: &[f64], theta: &[f64]) -> Vec<f64> {
        self.pv
            .iter()
            .chain(&self.pq)
            .map(|&b| theta[b])
            .chain(self.pq.iter().map(|&b| v[b]))
            .collect()
    }

    /// Splits a gradient over full bus vectors into its `y` part (PV and
    /// slack magnitudes, slack angle) and its `z1` part.
    pub fn split_state_gradient(&self, dv: &[f64], dtheta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut dy = vec![0.0; self.dim_y()];
        for (k, &b) in self.pv.iter().enumerate() {
            dy[self.n_gen + k] = dv[b];
        }
        dy[self.y_v_ref()] = dv[self.slack];
        dy[self.y_theta_ref()] = dtheta[self.slack];
        (dy, self.z1_from_state(dv, dtheta))
    }
    /// Adds the state-valued parts of `(dy, dz1)` onto full bus gradients.
    /// The `Pg` slots of `dy` are not voltage quantities and are skipped.
    pub fn scatter_to_state(&self, dy: &[f64], dz1: &[f64], dv: &mut [f64], dtheta: &mut [f64]) {
        for (k, &b) in self.pv.iter().enumerate() {
            dv[b] += dy[self.n_gen + k];
        }
        dv[self.slack] += dy[self.y_v_ref()];
        dtheta[self.slack] += dy[self.y_theta_ref()];
        for (k, &b) in self.pv.iter().chain(&self.pq).enumerate() {
            dtheta[b] += dz1[k];
        }
        let off = self.n_gen + self.n_load;
        for (k, &b) in self.pq.iter().enumerate() {
            dv[b] += dz1[off + k];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityVector {
    pub h: Vec<f64>,
}

impl InequalityVector {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
}

/// `β lo + (1 − β) hi`: maps a sigmoid output onto a box.
pub fn apply_box(beta: f64, lo: f64, hi: f64) -> f64 {
    beta * lo + (1.0 - beta) * hi
}

/// Element-wise `max(h, 0)`.
pub fn violation_nu(h: &[f64]) -> Vec<f64> {
    h.iter().map(|&v| v.max(0.0)).collect()
}

/// Gradients of a scalar with respect to the split vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitGradient {
    pub dy: Vec<f64>,
    pub dz1: Vec<f64>,
    pub dz2: Vec<f64>,
}

impl SplitGradient {
    pub fn zeros(layout: &SplitLayout) -> Self {
        SplitGradient {
            dy: vec![0.0; layout.dim_y()],
            dz1: vec![0.0; layout.dim_z1()],
            dz2: vec![0.0; layout.dim_z2()],
        }
    }
}

/// The AC-OPF problem on one network: boxes for `y`, recovery of `z1`/`z2`
/// and evaluation of the cost and `h`.
#[derive(Debug, Clone)]
pub struct OpfModel {
    network: Arc<NetworkModel>,
    layout: SplitLayout,
}

impl OpfModel {
    pub fn new(network: Arc<NetworkModel>) -> Self {
        let layout = SplitLayout::new(&network);
        OpfModel { network, layout }
    }

    pub fn network(&self) -> &NetworkModel {
        &self.network
    }

    pub fn network_arc(&self) -> &Arc<NetworkModel> {
        &self.network
    }

    pub fn layout(&self) -> &SplitLayout {
        &self.layout
    }

    /// Lower and upper bounds of every `y` slot; `θ_ref` gets `[0, 0]`.
    pub fn y_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let net = &*self.network;
        let mut lo = Vec::with_capacity(self.layout.dim_y());
        let mut hi = Vec::with_capacity(self.layout.dim_y());
        for g in net.pv_generators() {
            lo.push(g.pmin);
            hi.push(g.pmax);
        }
        for &b in net.pv() {
            lo.push(net.buses[b].vmin);
            hi.push(net.buses[b].vmax);
        }
        let slack = &net.buses[net.slack()];
        lo.extend([slack.vmin, 0.0]);
        hi.extend([slack.vmax, 0.0]);
        (lo, hi)
    }

    /// Bounds for a head that predicts every magnitude then every angle.
    /// The slack angle is pinned to zero, the others lie in `±angle_band`.
    pub fn voltage_bounds(&self, angle_band: f64) -> (Vec<f64>, Vec<f64>) {
        let net = &*self.network;
        let mut lo: Vec<f64> = net.buses.iter().map(|b| b.vmin).collect();
        let mut hi: Vec<f64> = net.buses.iter().map(|b| b.vmax).collect();
        for i in 0..net.n_bus() {
            let band = if i == net.slack() { 0.0 } else { angle_band };
            lo.push(-band);
            hi.push(band);
        }
        (lo, hi)
    }

    /// Reads `(y, z1, z2)` off a full voltage state, taking `Pg` at the PV
    /// buses from the injections the state implies.
    pub fn split_from_state(&self, x: &[f64], v: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let net = &*self.network;
        let s = bus_power(&net.ybus, v, theta);
        let mut y: Vec<f64> = net.pv().iter().map(|&b| s[b].re + x[b]).collect();
        y.extend(net.pv().iter().map(|&b| v[b]));
        y.push(v[net.slack()]);
        y.push(theta[net.slack()]);
        let z1 = self.layout.z1_from_state(v, theta);
        (y, z1, self.compute_z2(x, v, theta))
    }

    pub fn pf_problem(&self, x: &[f64], y: &[f64]) -> Result<PfProblem<'_>, PfError> {
        let net = &*self.network;
        let n = net.n_bus();
        let ng = net.n_gen();
        let mut p = Vec::with_capacity(ng + net.n_load());
        for (k, &b) in net.pv().iter().enumerate() {
            p.push(y[k] - x[b]);
        }
        p.extend(net.pq().iter().map(|&b| -x[b]));
        let q = net.pq().iter().map(|&b| -x[n + b]).collect();
        let v = std::iter::once(y[self.layout.y_v_ref()])
            .chain(y[ng..2 * ng].iter().copied())
            .collect();
        PfProblem::new(net, p, q, v, y[self.layout.y_theta_ref()])
    }

    /// Solves the power flow for `z1` given loads and network outputs.
    pub fn recover_z1(
        &self,
        x: &[f64],
        y: &[f64],
        solver: SolverKind,
        start: Option<&PfState>,
        options: PfOptions,
    ) -> Result<(Vec<f64>, PfSolution), PfError> {
        let problem = self.pf_problem(x, y)?;
        let sol = solve(&problem, solver, start, options)?;
        Ok((self.layout.z1_from_state(&sol.v, &sol.theta), sol))
    }

    /// From-side complex power of every branch.
    pub fn branch_flows(&self, v: &[f64], theta: &[f64]) -> Vec<Complex64> {
        self.network
            .branches
            .iter()
            .map(|br| {
                let y = br.admittance();
                let vf = Complex64::from_polar(v[br.from], theta[br.from]);
                let vt = Complex64::from_polar(v[br.to], theta[br.to]);
                vf * (y.ff * vf + y.ft * vt).conj()
            })
            .collect()
    }

    /// `z2` from the loads and a full voltage state.
    pub fn compute_z2(&self, x: &[f64], v: &[f64], theta: &[f64]) -> Vec<f64> {
        let net = &*self.network;
        let n = net.n_bus();
        let s = bus_power(&net.ybus, v, theta);
        let slack = net.slack();
        let mut z2 = Vec::with_capacity(self.layout.dim_z2());
        z2.push(s[slack].re + x[slack]);
        z2.push(s[slack].im + x[n + slack]);
        z2.extend(net.pv().iter().map(|&b| s[b].im + x[n + b]));
        z2.extend(self.branch_flows(v, theta).iter().map(|sf| sf.norm_sqr()));
        z2
    }

    /// Total generation cost in the case file's units (power in MW).
    pub fn objective(&self, y: &[f64], z2: &[f64]) -> f64 {
        let base = self.network.base_mva;
        let pv_cost: f64 = self
            .network
            .pv_generators()
            .zip(y)
            .map(|(g, &p)| g.cost.eval(p * base))
            .sum();
        pv_cost + self.network.ref_generator().cost.eval(z2[0] * base)
    }

    /// Adds `scale · ∂cost` to `grad`.
    pub fn objective_gradient(&self, y: &[f64], z2: &[f64], scale: f64, grad: &mut SplitGradient) {
        let base = self.network.base_mva;
        for (k, g) in self.network.pv_generators().enumerate() {
            grad.dy[k] += scale * base * g.cost.derivative(y[k] * base);
        }
        grad.dz2[0] += scale * base * self.network.ref_generator().cost.derivative(z2[0] * base);
    }

    /// The inequality vector; unrated branches hold the sentinel.
    pub fn inequality_h(&self, y: &[f64], z1: &[f64], z2: &[f64]) -> InequalityVector {
        let state = self.layout.full_state(y, z1);
        let pg: Vec<f64> = y[..self.layout.n_gen].iter().copied().chain([z2[0]]).collect();
        let qg: Vec<f64> = z2[2..2 + self.layout.n_gen].iter().copied().chain([z2[1]]).collect();
        let s2 = &z2[2 + self.layout.n_gen..];
        self.h_from_parts(&state.v, &pg, &qg, s2)
    }

    /// `h` from magnitudes at every bus, generator outputs in `h` order and
    /// squared branch flows.
    pub fn h_from_parts(&self, v: &[f64], pg: &[f64], qg: &[f64], s2: &[f64]) -> InequalityVector {
        let net = &*self.network;
        let mut h = Vec::with_capacity(self.layout.dim_h());
        for (br, &s) in net.branches.iter().zip(s2) {
            h.push(match br.s_max {
                Some(m) => s - m * m,
                None => UNCONSTRAINED_SENTINEL,
            });
        }
        h.extend(net.buses.iter().zip(v).map(|(b, &vi)| vi - b.vmax));
        h.extend(net.buses.iter().zip(v).map(|(b, &vi)| b.vmin - vi));
        let gens: Vec<_> = net.pv_generators().chain([net.ref_generator()]).collect();
        h.extend(gens.iter().zip(pg).map(|(g, &p)| p - g.pmax));
        h.extend(gens.iter().zip(pg).map(|(g, &p)| g.pmin - p));
        h.extend(gens.iter().zip(qg).map(|(g, &q)| q - g.qmax));
        h.extend(gens.iter().zip(qg).map(|(g, &q)| g.qmin - q));
        InequalityVector { h }
    }

    /// Adds the pull-back of `dh` (a gradient with respect to `h`) to the
    /// split gradients. Sentinel slots are ignored.
    pub fn inequality_vjp(&self, dh: &[f64], grad: &mut SplitGradient) {
        let l = &self.layout;
        let ng = l.n_gen;
        for (k, i) in l.h_s2().enumerate() {
            if l.is_constrained(i) {
                grad.dz2[l.z2_s2(k)] += dh[i];
            }
        }
        let mut dv = vec![0.0; l.n_bus];
        for (b, (iu, il)) in l.h_v_upper().zip(l.h_v_lower()).enumerate() {
            dv[b] += dh[iu] - dh[il];
        }
        let (dy_v, dz1_v) = l.split_state_gradient(&dv, &vec![0.0; l.n_bus]);
        for (g, d) in grad.dy.iter_mut().zip(dy_v) {
            *g += d;
        }
        for (g, d) in grad.dz1.iter_mut().zip(dz1_v) {
            *g += d;
        }
        for (k, (iu, il)) in l.h_pg_upper().zip(l.h_pg_lower()).enumerate() {
            let d = dh[iu] - dh[il];
            if k < ng {
                grad.dy[k] += d;
            } else {
                grad.dz2[0] += d;
            }
        }
        for (k, (iu, il)) in l.h_qg_upper().zip(l.h_qg_lower()).enumerate() {
            let d = dh[iu] - dh[il];
            if k < ng {
                grad.dz2[l.z2_qg(k)] += d;
            } else {
                grad.dz2[1] += d;
            }
        }
    }

    /// Pull-back of gradients on bus injections and squared branch flows
    /// onto the voltage state: returns `(∂/∂V, ∂/∂θ)` at every bus.
    pub fn injection_vjp(
        &self,
        v: &[f64],
        theta: &[f64],
        d_p: &[f64],
        d_q: &[f64],
        d_s2: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let net = &*self.network;
        let n = net.n_bus();
        let mut dv = vec![0.0; n];
        let mut dtheta = vec![0.0; n];

        if d_p.iter().chain(d_q).any(|&g| g != 0.0) {
            let (d_va, d_vm) = power_derivatives(&net.ybus, v, theta);
            for i in 0..n {
                let (gp, gq) = (d_p[i], d_q[i]);
                if gp == 0.0 && gq == 0.0 {
                    continue;
                }
                for ((k, a), (_, m)) in d_va.row(i).zip(d_vm.row(i)) {
                    dtheta[k] += gp * a.re + gq * a.im;
                    dv[k] += gp * m.re + gq * m.im;
                }
            }
        }

        for (br, &g) in net.branches.iter().zip(d_s2) {
            if g == 0.0 {
                continue;
            }
            let (f, t) = (br.from, br.to);
            let y = br.admittance();
            let rot = Complex64::from_polar(1.0, theta[f] - theta[t]);
            let cross = y.ft.conj() * rot;
            let sf = v[f] * v[f] * y.ff.conj() + v[f] * v[t] * cross;
            let d_vf = 2.0 * v[f] * y.ff.conj() + v[t] * cross;
            let d_vt = v[f] * cross;
            let d_af = Complex64::new(0.0, 1.0) * v[f] * v[t] * cross;
            // d|S|² = 2 Re(conj(S) dS)
            let w = |ds: Complex64| 2.0 * g * (sf.conj() * ds).re;
            dv[f] += w(d_vf);
            dv[t] += w(d_vt);
            dtheta[f] += w(d_af);
            dtheta[t] -= w(d_af);
        }
        (dv, dtheta)
    }

    /// Pull-back of `dz2` onto the voltage state.
    pub fn z2_vjp(&self, v: &[f64], theta: &[f64], dz2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let net = &*self.network;
        let n = net.n_bus();
        let mut d_p = vec![0.0; n];
        let mut d_q = vec![0.0; n];
        d_p[net.slack()] += dz2[0];
        d_q[net.slack()] += dz2[1];
        for (k, &b) in net.pv().iter().enumerate() {
            d_q[b] += dz2[self.layout.z2_qg(k)];
        }
        self.injection_vjp(v, theta, &d_p, &d_q, &dz2[2 + net.n_gen()..])
    }

    /// Loads implied by the full state and the generator outputs
    /// `(Pg at PV from y, Pg_ref and Qg from z2)`, as `[Pd; Qd]` at every bus.
    pub fn reconstructed_load(&self, y: &[f64], z2: &[f64], v: &[f64], theta: &[f64]) -> Vec<f64> {
        let net = &*self.network;
        let n = net.n_bus();
        let s = bus_power(&net.ybus, v, theta);
        let mut pg = vec![0.0; n];
        let mut qg = vec![0.0; n];
        for (k, &b) in net.pv().iter().enumerate() {
            pg[b] = y[k];
            qg[b] = z2[self.layout.z2_qg(k)];
        }
        pg[net.slack()] = z2[0];
        qg[net.slack()] = z2[1];
        (0..n)
            .map(|i| pg[i] - s[i].re)
            .chain((0..n).map(|i| qg[i] - s[i].im))
            .collect()
    }
}
