//! Test-set metrics: generation cost, grouped violations, feasibility rate,
//! load mismatch and per-stage timing.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case_io::NetworkModel;
use crate::neural::{Checkpoint, OutputHead};
use crate::opf_model::{violation_nu, ConstraintGroup, OpfModel, SplitLayout, UNCONSTRAINED_SENTINEL};
use crate::powerflow::{solve, PfError, PfOptions, PfProblem, SolverKind};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_FEASIBILITY_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("checkpoint does not match the network: {0}")]
    LayoutMismatch(String),
    #[error("load vector has zero norm")]
    ZeroLoadNorm,
    #[error("no sample produced a converged power flow ({failures} failures)")]
    NoConvergedSamples { failures: usize },
}

/// Wall-clock seconds of the three inference stages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub forward: f64,
    pub power_flow: f64,
    pub z2: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.forward + self.power_flow + self.z2
    }

    fn add(&mut self, other: &StageTimes) {
        self.forward += other.forward;
        self.power_flow += other.power_flow;
        self.z2 += other.z2;
    }

    fn scaled(&self, s: f64) -> StageTimes {
        StageTimes {
            forward: self.forward * s,
            power_flow: self.power_flow * s,
            z2: self.z2 * s,
        }
    }
}

/// Full decision point produced for one load sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub y: Vec<f64>,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub h: Vec<f64>,
    pub cost: f64,
    /// Loads at PQ buses, `[Pd; Qd]`
    pub load: Vec<f64>,
    /// The same loads as implied by the predicted state
    pub load_reconstructed: Vec<f64>,
    pub times: StageTimes,
}

fn load_bus_restrict(net: &NetworkModel, full: &[f64]) -> Vec<f64> {
    let n = net.n_bus();
    net.pq()
        .iter()
        .map(|&b| full[b])
        .chain(net.pq().iter().map(|&b| full[n + b]))
        .collect()
}

/// Runs the network on `x` and completes the decision point: by a power
/// flow for the split head, algebraically for the voltage head.
pub fn predict(
    checkpoint: &Checkpoint,
    opf: &OpfModel,
    x: &[f64],
    solver: SolverKind,
    pf: PfOptions,
) -> Result<Prediction, PfError> {
    let net = opf.network();
    let t0 = Instant::now();
    let trace = checkpoint.mlp.forward(x);
    let t1 = Instant::now();
    let (y, z1, z2, v, theta, t2) = match checkpoint.head {
        OutputHead::Split => {
            let (z1, sol) = opf.recover_z1(x, &trace.y, solver, None, pf)?;
            let t2 = Instant::now();
            let z2 = opf.compute_z2(x, &sol.v, &sol.theta);
            (trace.y, z1, z2, sol.v, sol.theta, t2)
        }
        OutputHead::Voltage => {
            let n = net.n_bus();
            let (v, theta) = (trace.y[..n].to_vec(), trace.y[n..].to_vec());
            let t2 = Instant::now();
            let (y, z1, z2) = opf.split_from_state(x, &v, &theta);
            (y, z1, z2, v, theta, t2)
        }
    };
    let h = opf.inequality_h(&y, &z1, &z2).h;
    let cost = opf.objective(&y, &z2);
    let t3 = Instant::now();
    let full = opf.reconstructed_load(&y, &z2, &v, &theta);
    Ok(Prediction {
        load: load_bus_restrict(net, x),
        load_reconstructed: load_bus_restrict(net, &full),
        y,
        z1,
        z2,
        h,
        cost,
        times: StageTimes {
            forward: (t1 - t0).as_secs_f64(),
            power_flow: (t2 - t1).as_secs_f64(),
            z2: (t3 - t2).as_secs_f64(),
        },
    })
}

/// Percentage of real (non-sentinel) entries with `h ≤ tol`, pooled over
/// all samples.
pub fn feasibility_rate<H: AsRef<[f64]>>(h_batch: &[H], tol: f64) -> f64 {
    let mut total = 0usize;
    let mut ok = 0usize;
    for h in h_batch {
        for &v in h.as_ref() {
            if v == UNCONSTRAINED_SENTINEL {
                continue;
            }
            total += 1;
            if v <= tol {
                ok += 1;
            }
        }
    }
    if total == 0 {
        100.0
    } else {
        100.0 * ok as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: ConstraintGroup,
    pub mean: f64,
    pub max: f64,
}

/// Mean and maximum of `ν` per constraint group over all real entries and
/// samples.
pub fn grouped_violations<N: AsRef<[f64]>>(nu_batch: &[N], layout: &SplitLayout) -> Vec<GroupStats> {
    ConstraintGroup::ALL
        .iter()
        .map(|&group| {
            let mut sum = 0.0;
            let mut count = 0usize;
            let mut max: f64 = 0.0;
            for nu in nu_batch {
                for (i, &v) in nu.as_ref().iter().enumerate() {
                    if layout.group_of(i) == group && layout.is_constrained(i) {
                        sum += v;
                        count += 1;
                        max = max.max(v);
                    }
                }
            }
            GroupStats {
                group,
                mean: if count == 0 { 0.0 } else { sum / count as f64 },
                max,
            }
        })
        .collect()
}

/// `100 · ‖x − x̂‖ / ‖x‖`.
pub fn load_mismatch(x: &[f64], x_hat: &[f64]) -> Result<f64, EvalError> {
    let den = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(EvalError::ZeroLoadNorm);
    }
    let num = x.iter().zip(x_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(100.0 * num / den)
}

/// Per-unit averages of the decision variables at a reference dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NominalAverages {
    pub pg: f64,
    pub qg: f64,
    pub v: f64,
    pub s2: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Averages over every generator, bus and branch at the case file's own
/// dispatch and nominal load.
pub fn nominal_averages(network: &NetworkModel) -> Result<NominalAverages, PfError> {
    let problem = PfProblem::from_case(network)?;
    let sol = solve(&problem, SolverKind::Nr, None, PfOptions { tol: 1e-10, max_iter: None })?;
    let opf = OpfModel::new(std::sync::Arc::new(network.clone()));
    let x = network.nominal_load();
    let z2 = opf.compute_z2(&x, &sol.v, &sol.theta);
    let ng = network.n_gen();
    let pg: Vec<f64> = network.pv_generators().map(|g| g.pg).chain([z2[0]]).collect();
    let qg: Vec<f64> = z2[2..2 + ng].iter().copied().chain([z2[1]]).collect();
    Ok(NominalAverages {
        pg: mean(&pg),
        qg: mean(&qg),
        v: mean(&sol.v),
        s2: mean(&z2[2 + ng..]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub y: Vec<f64>,
    pub z2: Vec<f64>,
    pub h: Vec<f64>,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    /// Mean seconds per sample
    pub per_sample: StageTimes,
    /// Summed seconds over the whole split
    pub total: StageTimes,
    /// Whether samples ran one at a time on a single thread
    pub single_thread: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub label: String,
    pub head: OutputHead,
    pub solver: SolverKind,
    pub case_checksum: String,
    pub seed: u64,
    pub samples: usize,
    pub pf_failures: usize,
    /// Mean generation cost, cost curves applied to MW
    pub mean_cost: f64,
    pub cost_note: String,
    pub feasibility_rate: f64,
    pub feasibility_tol: f64,
    pub nu_mean: f64,
    pub nu_sum_mean: f64,
    pub violations: Vec<GroupStats>,
    /// Mean over samples of the PQ-bus load mismatch, percent
    pub load_mismatch_percent: f64,
    pub timing: TimingReport,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub records: Vec<SampleRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub pf: PfOptions,
    pub feasibility_tol: f64,
    pub keep_records: bool,
    pub parallel: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            pf: PfOptions::default(),
            feasibility_tol: DEFAULT_FEASIBILITY_TOL,
            keep_records: true,
            parallel: false,
        }
    }
}

/// Checks that a checkpoint was produced for this network.
pub fn check_layout(checkpoint: &Checkpoint, opf: &OpfModel) -> Result<(), EvalError> {
    let layout = opf.layout();
    let p = &checkpoint.mlp.params;
    let dim_out = match checkpoint.head {
        OutputHead::Split => layout.dim_y(),
        OutputHead::Voltage => 2 * layout.n_bus,
    };
    if p.dim_in != layout.dim_x() || p.dim_out != dim_out {
        return Err(EvalError::LayoutMismatch(format!(
            "network expects {} inputs and {} outputs, checkpoint has {} and {}",
            layout.dim_x(),
            dim_out,
            p.dim_in,
            p.dim_out
        )));
    }
    let sum = &opf.network().checksum;
    if !checkpoint.case_checksum.is_empty() && !sum.is_empty() && &checkpoint.case_checksum != sum {
        return Err(EvalError::LayoutMismatch(format!(
            "case checksum {} differs from checkpoint {}",
            sum, checkpoint.case_checksum
        )));
    }
    Ok(())
}

/// Runs inference over `samples` and assembles the report. Samples whose
/// power flow fails are counted and excluded from the metrics.
pub fn evaluate<X: AsRef<[f64]> + Sync>(
    checkpoint: &Checkpoint,
    opf: &OpfModel,
    samples: &[X],
    solver: SolverKind,
    options: EvalOptions,
) -> Result<MetricsReport, EvalError> {
    check_layout(checkpoint, opf)?;
    let run = |x: &X| predict(checkpoint, opf, x.as_ref(), solver, options.pf);
    let results: Vec<Result<Prediction, PfError>> = if options.parallel {
        samples.par_iter().map(run).collect()
    } else {
        samples.iter().map(run).collect()
    };
    let failures = results.iter().filter(|r| r.is_err()).count();
    let preds: Vec<Prediction> = results.into_iter().filter_map(Result::ok).collect();
    if preds.is_empty() {
        return Err(EvalError::NoConvergedSamples { failures });
    }
    let layout = opf.layout();
    let n = preds.len() as f64;
    let h_batch: Vec<&[f64]> = preds.iter().map(|p| p.h.as_slice()).collect();
    let nu_batch: Vec<Vec<f64>> = preds.iter().map(|p| violation_nu(&p.h)).collect();
    let real = (0..layout.dim_h()).filter(|&i| layout.is_constrained(i)).count().max(1) as f64;
    let nu_sums: Vec<f64> = nu_batch.iter().map(|nu| nu.iter().sum()).collect();
    let mismatch = preds
        .iter()
        .map(|p| load_mismatch(&p.load, &p.load_reconstructed))
        .collect::<Result<Vec<f64>, _>>();
    let mut total = StageTimes::default();
    for p in &preds {
        total.add(&p.times);
    }
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        label: String::new(),
        head: checkpoint.head,
        solver,
        case_checksum: opf.network().checksum.clone(),
        seed: checkpoint.seed,
        samples: samples.len(),
        pf_failures: failures,
        mean_cost: preds.iter().map(|p| p.cost).sum::<f64>() / n,
        cost_note: "cost curves evaluated at MW, summed over generators, no rescaling".into(),
        feasibility_rate: feasibility_rate(&h_batch, options.feasibility_tol),
        feasibility_tol: options.feasibility_tol,
        nu_mean: nu_sums.iter().sum::<f64>() / (n * real),
        nu_sum_mean: nu_sums.iter().sum::<f64>() / n,
        violations: grouped_violations(&nu_batch, layout),
        load_mismatch_percent: mismatch.map(|m| mean(&m)).unwrap_or(f64::NAN),
        timing: TimingReport {
            per_sample: total.scaled(1.0 / n),
            total,
            single_thread: !options.parallel,
        },
        config: serde_json::Value::Null,
        records: if options.keep_records {
            preds
                .into_iter()
                .map(|p| SampleRecord {
                    y: p.y,
                    z2: p.z2,
                    h: p.h,
                    cost: p.cost,
                })
                .collect()
        } else {
            Vec::new()
        },
    })
}

impl MetricsReport {
    pub fn group(&self, group: ConstraintGroup) -> Option<&GroupStats> {
        self.violations.iter().find(|g| g.group == group)
    }

    /// Column names of [`MetricsReport::table_row`].
    pub fn table_header() -> Vec<String> {
        let mut h: Vec<String> = [
            "label", "head", "solver", "case_checksum", "seed", "samples", "pf_failures", "mean_cost",
            "feasibility_rate", "nu_mean",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for g in ConstraintGroup::ALL {
            h.push(format!("nu_{}_mean", g.name()));
            h.push(format!("nu_{}_max", g.name()));
        }
        h.extend(
            [
                "load_mismatch_percent",
                "time_forward_s",
                "time_power_flow_s",
                "time_z2_s",
                "time_per_sample_s",
                "time_total_s",
            ]
            .map(String::from),
        );
        h
    }

    /// One flat row per report, for comparison tables.
    pub fn table_row(&self) -> Vec<String> {
        let head = match self.head {
            OutputHead::Split => "split",
            OutputHead::Voltage => "voltage",
        };
        let mut r = vec![
            self.label.clone(),
            head.to_string(),
            self.solver.to_string(),
            self.case_checksum.clone(),
            self.seed.to_string(),
            self.samples.to_string(),
            self.pf_failures.to_string(),
            format!("{:e}", self.mean_cost),
            format!("{:e}", self.feasibility_rate),
            format!("{:e}", self.nu_mean),
        ];
        for g in ConstraintGroup::ALL {
            let s = self.group(g).copied().unwrap_or(GroupStats { group: g, mean: 0.0, max: 0.0 });
            r.push(format!("{:e}", s.mean));
            r.push(format!("{:e}", s.max));
        }
        let t = &self.timing;
        r.extend([
            format!("{:e}", self.load_mismatch_percent),
            format!("{:e}", t.per_sample.forward),
            format!("{:e}", t.per_sample.power_flow),
            format!("{:e}", t.per_sample.z2),
            format!("{:e}", t.per_sample.total()),
            format!("{:e}", t.total.total()),
        ]);
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{InputScaler, Mlp, MlpParams};
    use crate::powerflow::test_networks::*;
    use std::sync::Arc;

    #[test]
    fn feasibility_examples() {
        assert!((feasibility_rate(&[vec![-1.0, -1.0, 0.1]], 1e-6) - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(feasibility_rate(&[vec![-1.0, 0.0], vec![-0.5, 5e-7]], 1e-6), 100.0);
        // sentinel slots are not constraints
        assert_eq!(feasibility_rate(&[vec![UNCONSTRAINED_SENTINEL, 0.2]], 1e-6), 0.0);
    }

    #[test]
    fn grouped_arithmetic() {
        let m = OpfModel::new(Arc::new(three_bus()));
        let l = m.layout();
        let mut nu = vec![0.0; l.dim_h()];
        let zero = grouped_violations(&[nu.clone()], l);
        assert!(zero.iter().all(|g| g.mean == 0.0 && g.max == 0.0));
        // V block holds 2N = 6 entries
        nu[l.h_v_upper().start] = 2e-6;
        nu[l.h_v_lower().start + 1] = 4e-6;
        let g = grouped_violations(&[nu], l);
        let v = g.iter().find(|g| g.group == ConstraintGroup::V).unwrap();
        assert!((v.mean - 1e-6).abs() < 1e-18);
        assert_eq!(v.max, 4e-6);
    }

    #[test]
    fn mismatch_arithmetic() {
        assert_eq!(load_mismatch(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!((load_mismatch(&[1.0, 0.0], &[1.1, 0.0]).unwrap() - 10.0).abs() < 1e-12);
        assert!(matches!(load_mismatch(&[0.0, 0.0], &[1.0, 0.0]), Err(EvalError::ZeroLoadNorm)));
    }

    #[test]
    fn uniform_voltage_average_is_one() {
        let net = two_bus(0.0, 0.0, 0.0);
        let avg = nominal_averages(&net).unwrap();
        assert_eq!(avg.v, 1.0);
        assert!(avg.pg.abs() < 1e-12 && avg.s2.abs() < 1e-12);
    }

    fn zero_checkpoint(opf: &OpfModel) -> Checkpoint {
        let l = opf.layout();
        let (lo, hi) = opf.y_bounds();
        let mlp = Mlp::new(MlpParams::zeros(l.dim_x(), 4, l.dim_y()), InputScaler::identity(l.dim_x()), lo, hi);
        Checkpoint::new(OutputHead::Split, opf.network().checksum.clone(), 0, mlp)
    }

    #[test]
    fn split_predictions_balance_loads() {
        let opf = OpfModel::new(Arc::new(three_bus()));
        let ck = zero_checkpoint(&opf);
        let x = opf.network().nominal_load();
        let r = evaluate(&ck, &opf, &[x.clone(), x], SolverKind::Nr, EvalOptions::default()).unwrap();
        assert_eq!(r.pf_failures, 0);
        assert!(r.load_mismatch_percent < 1e-3);
        assert!((0.0..=100.0).contains(&r.feasibility_rate));
        for g in &r.violations {
            assert!(g.max >= g.mean && g.mean >= 0.0);
        }
        // stored records reproduce the pooled metrics
        let hs: Vec<&[f64]> = r.records.iter().map(|s| s.h.as_slice()).collect();
        assert_eq!(feasibility_rate(&hs, r.feasibility_tol), r.feasibility_rate);
        for s in &r.records {
            assert!((opf.objective(&s.y, &s.z2) - s.cost).abs() < 1e-12);
        }
    }

    #[test]
    fn layout_mismatch_is_reported() {
        let opf = OpfModel::new(Arc::new(three_bus()));
        let other = OpfModel::new(Arc::new(two_bus(0.0, 0.1, 0.0)));
        let ck = zero_checkpoint(&other);
        let x = vec![opf.network().nominal_load()];
        assert!(matches!(
            evaluate(&ck, &opf, &x, SolverKind::Nr, EvalOptions::default()),
            Err(EvalError::LayoutMismatch(_))
        ));
    }

    #[test]
    fn exact_voltage_state_has_no_mismatch() {
        let opf = OpfModel::new(Arc::new(three_bus()));
        let net = opf.network();
        let x = net.nominal_load();
        let sol = solve(&PfProblem::from_case(net).unwrap(), SolverKind::Nr, None, PfOptions { tol: 1e-12, max_iter: None }).unwrap();
        let (y, z1, z2) = opf.split_from_state(&x, &sol.v, &sol.theta);
        let full = opf.reconstructed_load(&y, &z2, &sol.v, &sol.theta);
        assert!(load_mismatch(&load_bus_restrict(net, &x), &load_bus_restrict(net, &full)).unwrap() < 1e-9);
        assert_eq!(z1, opf.layout().z1_from_state(&sol.v, &sol.theta));
    }
}
