use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{parse_case, CaseError, RawCase};
use crate::powerflow::FactorCache;
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusKind {
    Slack,
    PV,
    PQ,
}

/// A bus with all quantities in per unit on the system base.
#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    pub pd: f64,
    pub qd: f64,
    pub gs: f64,
    pub bs: f64,
    pub vmin: f64,
    pub vmax: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    /// internal bus index
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    /// total line-charging susceptance
    pub b: f64,
    /// off-nominal ratio, 1 for lines
    pub tap: f64,
    /// phase shift in radians
    pub shift: f64,
    /// apparent-power limit in per unit; `None` when unconstrained
    pub s_max: Option<f64>,
}

/// Two-port admittances of a branch: `[If; It] = [[ff, ft]; [tf, tt]] [Vf; Vt]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchAdmittance {
    pub ff: Complex64,
    pub ft: Complex64,
    pub tf: Complex64,
    pub tt: Complex64,
}

impl Branch {
    pub fn series_admittance(&self) -> Complex64 {
        Complex64::new(1.0, 0.0) / Complex64::new(self.r, self.x)
    }

    pub fn admittance(&self) -> BranchAdmittance {
        let ys = self.series_admittance();
        let ratio = Complex64::from_polar(self.tap, self.shift);
        let tt = ys + Complex64::new(0.0, self.b / 2.0);
        BranchAdmittance {
            ff: tt / (self.tap * self.tap),
            ft: -ys / ratio.conj(),
            tf: -ys / ratio,
            tt,
        }
    }
}

/// Polynomial generation cost in the case file's native units (power in MW).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostCurve {
    /// Highest order first; at most three entries.
    pub coeffs: Vec<f64>,
}

impl CostCurve {
    pub fn eval(&self, p_mw: f64) -> f64 {
        self.coeffs.iter().fold(0.0, |acc, c| acc * p_mw + c)
    }

    pub fn derivative(&self, p_mw: f64) -> f64 {
        let n = self.coeffs.len();
        self.coeffs
            .iter()
            .take(n.saturating_sub(1))
            .enumerate()
            .fold(0.0, |acc, (k, c)| acc * p_mw + c * (n - 1 - k) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    /// internal bus index
    pub bus: usize,
    /// case-file dispatch, per unit
    pub pg: f64,
    pub vg: f64,
    pub pmin: f64,
    pub pmax: f64,
    pub qmin: f64,
    pub qmax: f64,
    pub cost: CostCurve,
}

/// Per-unit network with bus classification and the nodal admittance
/// matrix. Only in-service branches and generators are kept.
#[derive(Debug)]
pub struct NetworkModel {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    pub ybus: CsrMatrix<Complex64>,
    pub checksum: String,
    slack: usize,
    pv: Vec<usize>,
    pq: Vec<usize>,
    ref_gen: usize,
    pv_gens: Vec<usize>,
    pub(crate) fdpf_cache: FactorCache,
    pub(crate) fdpf_builds: AtomicUsize,
}

impl Clone for NetworkModel {
    fn clone(&self) -> Self {
        NetworkModel {
            base_mva: self.base_mva,
            buses: self.buses.clone(),
            branches: self.branches.clone(),
            generators: self.generators.clone(),
            ybus: self.ybus.clone(),
            checksum: self.checksum.clone(),
            slack: self.slack,
            pv: self.pv.clone(),
            pq: self.pq.clone(),
            ref_gen: self.ref_gen,
            pv_gens: self.pv_gens.clone(),
            fdpf_cache: OnceLock::new(),
            fdpf_builds: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for NetworkModel {
    fn eq(&self, other: &Self) -> bool {
        self.base_mva == other.base_mva
            && self.buses == other.buses
            && self.branches == other.branches
            && self.generators == other.generators
            && self.ybus == other.ybus
    }
}

impl NetworkModel {
    /// Assembles a network from per-unit components. Bus kinds are taken
    /// as given; the slack bus must carry exactly one generator and every
    /// PV bus exactly one.
    pub fn from_parts(
        base_mva: f64,
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        generators: Vec<Generator>,
        checksum: String,
    ) -> Result<Self, CaseError> {
        let n = buses.len();
        let slacks: Vec<usize> = (0..n).filter(|&i| buses[i].kind == BusKind::Slack).collect();
        let slack = match slacks.len() {
            0 => return Err(CaseError::NoSlackBus),
            1 => slacks[0],
            k => return Err(CaseError::MultipleSlackBuses(k)),
        };

        let mut gens_at = vec![Vec::new(); n];
        for (k, g) in generators.iter().enumerate() {
            gens_at[g.bus].push(k);
            if g.pmin > g.pmax || g.qmin > g.qmax {
                return Err(CaseError::InvalidLimits {
                    what: "generator",
                    detail: format!("generator {k}: P [{}, {}], Q [{}, {}]", g.pmin, g.pmax, g.qmin, g.qmax),
                });
            }
            if g.cost.coeffs.len() > 3 {
                return Err(CaseError::UnsupportedCostModel {
                    generator: k,
                    reason: format!("polynomial of degree {} (at most 2 supported)", g.cost.coeffs.len() - 1),
                });
            }
        }
        for (i, at) in gens_at.iter().enumerate() {
            if at.len() > 1 {
                return Err(CaseError::MultipleGenerators {
                    bus: buses[i].id,
                    count: at.len(),
                });
            }
            let has_gen = !at.is_empty();
            let ok = match buses[i].kind {
                BusKind::Slack => has_gen,
                BusKind::PV => has_gen,
                BusKind::PQ => !has_gen,
            };
            if !ok {
                if buses[i].kind == BusKind::Slack {
                    return Err(CaseError::NoReferenceGenerator);
                }
                return Err(CaseError::InvalidLimits {
                    what: "bus classification",
                    detail: format!("bus {} is {:?} but has {} generators", buses[i].id, buses[i].kind, at.len()),
                });
            }
        }
        for b in &buses {
            if b.vmin > b.vmax {
                return Err(CaseError::InvalidLimits {
                    what: "voltage",
                    detail: format!("bus {}: [{}, {}]", b.id, b.vmin, b.vmax),
                });
            }
        }
        for (k, br) in branches.iter().enumerate() {
            if br.r == 0.0 && br.x == 0.0 {
                return Err(CaseError::SingularBranch { index: k });
            }
            if let Some(s) = br.s_max {
                if s <= 0.0 {
                    return Err(CaseError::InvalidLimits {
                        what: "branch rating",
                        detail: format!("branch {k}: s_max = {s}"),
                    });
                }
            }
        }

        let pv: Vec<usize> = (0..n).filter(|&i| buses[i].kind == BusKind::PV).collect();
        let pq: Vec<usize> = (0..n).filter(|&i| buses[i].kind == BusKind::PQ).collect();
        let ref_gen = gens_at[slack][0];
        let pv_gens = pv.iter().map(|&i| gens_at[i][0]).collect();
        let ybus = assemble_ybus(n, &buses, &branches);

        Ok(NetworkModel {
            base_mva,
            buses,
            branches,
            generators,
            ybus,
            checksum,
            slack,
            pv,
            pq,
            ref_gen,
            pv_gens,
            fdpf_cache: OnceLock::new(),
            fdpf_builds: AtomicUsize::new(0),
        })
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branch(&self) -> usize {
        self.branches.len()
    }

    /// Number of generator (PV) buses, excluding the reference generator.
    pub fn n_gen(&self) -> usize {
        self.pv.len()
    }

    pub fn n_load(&self) -> usize {
        self.pq.len()
    }

    pub fn slack(&self) -> usize {
        self.slack
    }

    /// PV bus indices, ascending.
    pub fn pv(&self) -> &[usize] {
        &self.pv
    }

    /// PQ bus indices, ascending.
    pub fn pq(&self) -> &[usize] {
        &self.pq
    }

    pub fn ref_generator(&self) -> &Generator {
        &self.generators[self.ref_gen]
    }

    /// Generator at each PV bus, in `pv()` order.
    pub fn pv_generators(&self) -> impl Iterator<Item = &Generator> + '_ {
        self.pv_gens.iter().map(move |&k| &self.generators[k])
    }

    /// `[Pd; Qd]` over all buses, per unit.
    pub fn nominal_load(&self) -> Vec<f64> {
        self.buses
            .iter()
            .map(|b| b.pd)
            .chain(self.buses.iter().map(|b| b.qd))
            .collect()
    }

    /// How many times the fast-decoupled factorizations were built.
    pub fn fdpf_factor_builds(&self) -> usize {
        self.fdpf_builds.load(Ordering::SeqCst)
    }
}

fn assemble_ybus(n: usize, buses: &[Bus], branches: &[Branch]) -> CsrMatrix<Complex64> {
    let mut triplets = Vec::with_capacity(n + 4 * branches.len());
    for (i, b) in buses.iter().enumerate() {
        triplets.push((i, i, Complex64::new(b.gs, b.bs)));
    }
    for br in branches {
        let y = br.admittance();
        triplets.push((br.from, br.from, y.ff));
        triplets.push((br.from, br.to, y.ft));
        triplets.push((br.to, br.from, y.tf));
        triplets.push((br.to, br.to, y.tt));
    }
    CsrMatrix::from_triplets(n, n, triplets)
}

/// Converts a parsed case to per unit, classifies buses and assembles the
/// admittance matrix. The reference bus becomes the slack, buses with an
/// in-service generator become PV and the rest PQ.
pub fn build_network(raw: &RawCase) -> Result<NetworkModel, CaseError> {
    let base = raw.base_mva;
    let mut index = std::collections::HashMap::new();
    for (i, b) in raw.bus.iter().enumerate() {
        index.insert(b.id, i);
    }

    let in_service: Vec<(usize, &super::GenRow)> =
        raw.gen.iter().enumerate().filter(|(_, g)| g.status).collect();
    let mut has_gen = vec![false; raw.bus.len()];
    for (_, g) in &in_service {
        has_gen[index[&g.bus]] = true;
    }

    let buses = raw
        .bus
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let kind = match b.kind {
                3 => BusKind::Slack,
                4 => return Err(CaseError::IsolatedBus(b.id)),
                _ if has_gen[i] => BusKind::PV,
                _ => BusKind::PQ,
            };
            Ok(Bus {
                id: b.id,
                kind,
                pd: b.pd / base,
                qd: b.qd / base,
                gs: b.gs / base,
                bs: b.bs / base,
                vmin: b.vmin,
                vmax: b.vmax,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let branches = raw
        .branch
        .iter()
        .filter(|br| br.status)
        .map(|br| Branch {
            from: index[&br.from],
            to: index[&br.to],
            r: br.r,
            x: br.x,
            b: br.b,
            tap: if br.tap == 0.0 { 1.0 } else { br.tap },
            shift: br.shift.to_radians(),
            s_max: (br.rate_a > 0.0).then(|| br.rate_a / base),
        })
        .collect();

    let generators = in_service
        .iter()
        .map(|&(k, g)| {
            let cost = &raw.gencost[k];
            if cost.model != 2 {
                return Err(CaseError::UnsupportedCostModel {
                    generator: k,
                    reason: "piecewise-linear cost is not supported".into(),
                });
            }
            Ok(Generator {
                bus: index[&g.bus],
                pg: g.pg / base,
                vg: g.vg,
                pmin: g.pmin / base,
                pmax: g.pmax / base,
                qmin: g.qmin / base,
                qmax: g.qmax / base,
                cost: CostCurve {
                    coeffs: cost.coeffs.clone(),
                },
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    NetworkModel::from_parts(base, buses, branches, generators, raw.checksum.clone())
}

/// Reads, parses and builds a case file.
pub fn load_case(path: impl AsRef<Path>) -> Result<NetworkModel, CaseError> {
    let text = std::fs::read_to_string(path)?;
    build_network(&parse_case(&text)?)
}
