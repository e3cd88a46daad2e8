//! Acceptance suite. Every test prints one `criterion N: PASS|FAIL ...` line
//! to stderr, uncaptured, then asserts the same condition.
//!
//! Criterion 6 is a multi-hour run and is ignored by default:
//! `cargo test --release -p acopf-core --test acceptance -- --ignored`.

use std::io::Write;
use std::path::Path;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use acopf::evaluation::{load_mismatch, MetricsReport};
use acopf::opf_model::{ConstraintGroup, OpfModel};
use acopf::powerflow::{jacobian, residuals, solve, solve_fdpf, solve_nr, unknowns, PfOptions, PfProblem};
use acopf::training::{
    augmented_loss, dual_update, init_model, sample_dataset, sample_loss_and_gradient, train, Dataset, EpochRecord,
    LossKind, TrainConfig,
};
use acopf::{build_network, load_case, parse_case, NetworkModel, SolverKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, pass: bool, detail: impl AsRef<str>) {
    let line = format!("criterion {n}: {} {}\n", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    // straight to the handle so the harness does not capture it
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn case(name: &str) -> NetworkModel {
    load_case(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../cases").join(name)).unwrap()
}

fn network_from_text(text: &str) -> NetworkModel {
    build_network(&parse_case(text).unwrap()).unwrap()
}

struct CaseText {
    buses: Vec<String>,
    gens: Vec<String>,
    branches: Vec<String>,
    costs: Vec<String>,
}

impl CaseText {
    fn render(&self) -> String {
        let block = |name: &str, rows: &[String]| format!("mpc.{name} = [\n{}\n];\n", rows.join("\n"));
        format!(
            "function mpc = generated\nmpc.version = '2';\nmpc.baseMVA = 100;\n{}{}{}{}",
            block("bus", &self.buses),
            block("gen", &self.gens),
            block("branch", &self.branches),
            block("gencost", &self.costs)
        )
    }
}

fn bus_row(id: usize, kind: u8, pd: f64, qd: f64, vmin: f64, vmax: f64) -> String {
    format!("{id} {kind} {pd} {qd} 0 0 1 1 0 100 1 {vmax} {vmin};")
}

fn gen_row(bus: usize, pg: f64, qmax: f64, qmin: f64, vg: f64, pmax: f64, pmin: f64) -> String {
    format!("{bus} {pg} 0 {qmax} {qmin} {vg} 100 1 {pmax} {pmin};")
}

fn branch_row(f: usize, t: usize, r: f64, x: f64, b: f64, rate: f64) -> String {
    format!("{f} {t} {r} {x} {b} {rate} {rate} {rate} 0 0 1 -360 360;")
}

fn random_case(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(3..=6);
    let n_pv = rng.random_range(0..=(n - 2).min(2));
    let mut c = CaseText {
        buses: Vec::new(),
        gens: Vec::new(),
        branches: Vec::new(),
        costs: Vec::new(),
    };
    for id in 1..=n {
        let kind = if id == 1 {
            3
        } else if id <= 1 + n_pv {
            2
        } else {
            1
        };
        let (pd, qd) = if kind == 1 {
            (rng.random_range(0.0..30.0), rng.random_range(-5.0..15.0))
        } else {
            (0.0, 0.0)
        };
        c.buses.push(bus_row(id, kind, pd, qd, 0.9, 1.1));
        if kind != 1 {
            let vg = rng.random_range(0.98..1.05);
            let pg = if kind == 2 { rng.random_range(0.0..40.0) } else { 0.0 };
            c.gens.push(gen_row(id, pg, 300.0, -300.0, vg, 300.0, 0.0));
            c.costs.push("2 0 0 3 0.01 10 0;".into());
        }
    }
    let line = |rng: &mut ChaCha8Rng, f: usize, t: usize| {
        let x = rng.random_range(0.03..0.2);
        let r = x * rng.random_range(0.0..0.4);
        let b = rng.random_range(0.0..0.05);
        branch_row(f, t, r, x, b, 0.0)
    };
    for t in 2..=n {
        let f = rng.random_range(1..t);
        let row = line(rng, f, t);
        c.branches.push(row);
    }
    for _ in 0..rng.random_range(0..=2) {
        let f = rng.random_range(1..n);
        let t = rng.random_range(f + 1..=n);
        let row = line(rng, f, t);
        c.branches.push(row);
    }
    c.render()
}

#[test]
fn criterion_1_power_flow_correctness() {
    let opts = PfOptions::default();
    let mut worst_res: f64 = 0.0;
    let mut worst_gap: f64 = 0.0;
    let mut failures = Vec::new();

    // lossless 2-bus, reactance 0.1, load s at bus 2: V2⁴ − V2² + (0.1 s)² = 0
    for pd in [0.0, 20.0, 80.0, 150.0] {
        let text = CaseText {
            buses: vec![bus_row(1, 3, 0.0, 0.0, 0.9, 1.1), bus_row(2, 1, pd, 0.0, 0.5, 1.5)],
            gens: vec![gen_row(1, 0.0, 300.0, -300.0, 1.0, 300.0, 0.0)],
            branches: vec![branch_row(1, 2, 0.0, 0.1, 0.0, 0.0)],
            costs: vec!["2 0 0 3 0.01 10 0;".into()],
        }
        .render();
        let net = network_from_text(&text);
        let s = 0.1 * pd / 100.0;
        let v2 = ((1.0 + (1.0 - 4.0 * s * s).sqrt()) / 2.0).sqrt();
        let t2 = -(s / v2).asin();
        let pb = PfProblem::from_case(&net).unwrap();
        for solver in [SolverKind::Nr, SolverKind::Fdpf] {
            let sol = solve(&pb, solver, None, opts).unwrap();
            worst_res = worst_res.max(sol.residual_norm);
            let err = (sol.v[1] - v2).abs().max((sol.theta[1] - t2).abs());
            if err > 1e-4 {
                failures.push(format!("2-bus pd {pd} {solver}: error {err:.2e}"));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let trials = 300;
    for trial in 0..trials {
        let net = network_from_text(&random_case(&mut rng));
        let pb = PfProblem::from_case(&net).unwrap();
        let (nr, fd) = match (solve_nr(&pb, None, opts), solve_fdpf(&pb, None, opts)) {
            (Ok(a), Ok(b)) => (a, b),
            (a, b) => {
                failures.push(format!("trial {trial}: nr {} fdpf {}", a.is_ok(), b.is_ok()));
                continue;
            }
        };
        for sol in [&nr, &fd] {
            let res = acopf::powerflow::norm(&residuals(&pb, &sol.v, &sol.theta));
            worst_res = worst_res.max(res);
        }
        for i in 0..net.n_bus() {
            worst_gap = worst_gap.max((nr.v[i] - fd.v[i]).abs()).max((nr.theta[i] - fd.theta[i]).abs());
        }
    }
    let pass = failures.is_empty() && worst_res < 1e-5 && worst_gap < 1e-4;
    verdict(
        1,
        pass,
        format!(
            "{trials} random 3-6 bus networks + 2-bus closed form: max residual {worst_res:.2e} (< 1e-5), \
             max NR/FDPF gap {worst_gap:.2e} (< 1e-4), failures {failures:?}"
        ),
    );
    assert!(pass);
}

fn tight_three_bus() -> NetworkModel {
    let text = CaseText {
        buses: vec![
            bus_row(1, 3, 0.0, 0.0, 0.95, 1.05),
            bus_row(2, 2, 20.0, 5.0, 0.95, 1.05),
            bus_row(3, 1, 90.0, 30.0, 0.97, 1.03),
        ],
        gens: vec![
            gen_row(1, 0.0, 40.0, -10.0, 1.02, 150.0, 10.0),
            gen_row(2, 60.0, 25.0, -10.0, 1.0, 80.0, 0.0),
        ],
        branches: vec![
            branch_row(1, 2, 0.02, 0.08, 0.03, 70.0),
            branch_row(1, 3, 0.03, 0.12, 0.02, 60.0),
            branch_row(2, 3, 0.025, 0.1, 0.02, 45.0),
        ],
        costs: vec!["2 0 0 3 0.02 12 0;".into(), "2 0 0 3 0.035 9 0;".into()],
    };
    network_from_text(&text.render())
}

#[test]
fn criterion_2_jacobian_and_pipeline_gradients() {
    // analytic power-flow Jacobian against central differences on case30
    let net = case("case30.m");
    let pb = PfProblem::from_case(&net).unwrap();
    let sol = solve_nr(&pb, None, PfOptions { tol: 1e-12, max_iter: None }).unwrap();
    // move away from the solution so every term matters
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v: Vec<f64> = sol.v.iter().map(|v| v + rng.random_range(-0.02..0.02)).collect();
    let theta: Vec<f64> = sol.theta.iter().map(|t| t + rng.random_range(-0.05..0.05)).collect();
    let jac = jacobian(&pb, &v, &theta).matrix.to_dense();
    let pvpq: Vec<usize> = net.pv().iter().chain(net.pq()).copied().collect();
    let n_ang = pvpq.len();
    let eps = 1e-6;
    let mut jac_err: f64 = 0.0;
    for col in 0..jac.len() {
        let shifted = |d: f64| {
            let (mut v, mut t) = (v.clone(), theta.clone());
            if col < n_ang {
                t[pvpq[col]] += d;
            } else {
                v[net.pq()[col - n_ang]] += d;
            }
            residuals(&pb, &v, &t)
        };
        let (fp, fm) = (shifted(eps), shifted(-eps));
        for row in 0..jac.len() {
            let fd = (fp[row] - fm[row]) / (2.0 * eps);
            let scale = fd.abs().max(1.0);
            jac_err = jac_err.max((jac[row][col] - fd).abs() / scale);
        }
    }
    assert_eq!(unknowns(&net, &v, &theta).len(), jac.len());

    // dL/dW through forward, power flow, z2 and the augmented loss
    let opf = OpfModel::new(Arc::new(tight_three_bus()));
    let data = sample_dataset(opf.network(), 12, 3);
    let config = TrainConfig {
        pf_tol: 1e-12,
        hidden: Some(6),
        seed: 9,
        ..TrainConfig::default()
    };
    let mlp = init_model(&opf, &config, data.train());
    let mu: Vec<f64> = (0..opf.layout().dim_h()).map(|i| 0.05 * (i % 3) as f64).collect();
    let mut pipe_err: f64 = 0.0;
    let mut active = 0;
    for x in data.train().iter().take(4) {
        let out = sample_loss_and_gradient(&mlp, &opf, x, &config, &mu).unwrap();
        active += out.h.iter().filter(|&&h| h > 0.0).count();
        let analytic: Vec<f64> = out.grads.values().copied().collect();
        let mut fd = Vec::with_capacity(analytic.len());
        for k in 0..analytic.len() {
            let loss = |d: f64| {
                let mut m = mlp.clone();
                *m.params.values_mut().nth(k).unwrap() += d;
                sample_loss_and_gradient(&m, &opf, x, &config, &mu).unwrap().loss.total
            };
            let h = 1e-6;
            fd.push((loss(h) - loss(-h)) / (2.0 * h));
        }
        let diff: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
        pipe_err = pipe_err.max(diff / norm);
    }
    let pass = jac_err < 1e-5 && pipe_err < 1e-3 && active > 0;
    verdict(
        2,
        pass,
        format!(
            "Jacobian max rel error {jac_err:.2e} (< 1e-5); pipeline dL/dW rel error {pipe_err:.2e} (< 1e-3) \
             with {active} active constraints"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_equality_constraints_hold() {
    let opf = OpfModel::new(Arc::new(case("case30.m")));
    let net = opf.network();
    let (lo, hi) = opf.y_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let data = sample_dataset(net, 400, 17);
    let (mut converged, mut attempts) = (0, 0);
    let mut worst: f64 = 0.0;
    for x in &data.samples {
        if converged == 100 {
            break;
        }
        attempts += 1;
        let y: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(&l, &h)| if h > l { rng.random_range(l..=h) } else { l })
            .collect();
        let Ok((_, sol)) = opf.recover_z1(x, &y, SolverKind::Nr, None, PfOptions::default()) else {
            continue;
        };
        converged += 1;
        let z2 = opf.compute_z2(x, &sol.v, &sol.theta);
        let x_hat = opf.reconstructed_load(&y, &z2, &sol.v, &sol.theta);
        worst = worst.max(load_mismatch(x, &x_hat).unwrap());
    }
    let pass = converged == 100 && worst < 1e-3;
    verdict(
        3,
        pass,
        format!("{converged} converged of {attempts} random (x, y) on case30: max load error {worst:.2e}% (< 1e-3%)"),
    );
    assert!(pass);
}

#[test]
fn criterion_4_loss_and_dual_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut loss_err: f64 = 0.0;
    let mut dual_err: f64 = 0.0;
    let mut min_mu = f64::INFINITY;
    for _ in 0..500 {
        let n = rng.random_range(1..40);
        let h: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f = rng.random_range(-5.0..5.0);
        let alpha = rng.random_range(0.1..10.0);
        let at_zero = augmented_loss(f, &h, &vec![0.0; n], alpha).total;
        let expected = f + alpha / 2.0 * h.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>();
        loss_err = loss_err.max((at_zero - expected).abs());

        let mut mu: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        for _ in 0..5 {
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let next = dual_update(&mu, &g, alpha);
            for i in 0..n {
                let oracle = if mu[i] + alpha * g[i] > 0.0 { mu[i] + alpha * g[i] } else { 0.0 };
                dual_err = dual_err.max((next[i] - oracle).abs());
                min_mu = min_mu.min(next[i]);
            }
            mu = next;
        }
    }
    let pass = loss_err <= 1e-12 && dual_err == 0.0 && min_mu >= 0.0;
    verdict(
        4,
        pass,
        format!("loss at μ=0 error {loss_err:.1e} (≤ 1e-12); dual update vs loop max error {dual_err:.1e}; min μ {min_mu}"),
    );
    assert!(pass);
}

struct Run {
    records: Vec<EpochRecord>,
    test: MetricsReport,
}

fn desk_dataset(opf: &OpfModel) -> Dataset {
    sample_dataset(opf.network(), 500, 7)
}

fn case30() -> &'static OpfModel {
    static OPF: OnceLock<OpfModel> = OnceLock::new();
    OPF.get_or_init(|| OpfModel::new(Arc::new(case("case30.m"))))
}

fn desk_run(loss: LossKind, lambda: f64, epochs: usize) -> Run {
    let opf = case30();
    let config = TrainConfig {
        loss,
        lambda,
        epochs,
        batch_size: 32,
        alpha: 2.0,
        dual_period: 10,
        seed: 7,
        ..TrainConfig::default()
    };
    let out = train(&config, opf, &desk_dataset(opf), |_| ()).unwrap();
    Run {
        records: out.records,
        test: out.test_report.unwrap(),
    }
}

const DESK_EPOCHS: usize = 200;
// the λ sweep needs longer training before the penalty weight separates runs
const SWEEP_EPOCHS: usize = 1000;

fn dual_desk() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| desk_run(LossKind::Dual, 1.0, DESK_EPOCHS))
}

fn dc3_sweep() -> &'static [Run; 3] {
    static RUNS: OnceLock<[Run; 3]> = OnceLock::new();
    RUNS.get_or_init(|| [1.0, 5.0, 20.0].map(|l| desk_run(LossKind::Dc3, l, SWEEP_EPOCHS)))
}

#[test]
fn criterion_5_desk_scale_training() {
    let run = dual_desk();
    let first = run.records.first().unwrap().nu_mean;
    let last = run.records.last().unwrap().nu_mean;
    let ratio = first / last;
    let feas = run.test.feasibility_rate;
    let pg = run.test.group(ConstraintGroup::Pg).unwrap();
    let (a, b, c) = (ratio >= 10.0, feas >= 99.0, pg.mean == 0.0 && pg.max == 0.0);
    verdict(
        5,
        a && b && c,
        format!(
            "case30, 500 samples, {DESK_EPOCHS} epochs: ν {first:.3e} → {last:.3e} ({ratio:.1}×, need ≥ 10×) [{}]; \
             test feasibility {feas:.2}% (need ≥ 99%) [{}]; Pg ν max {} [{}]",
            ok(a),
            ok(b),
            pg.max,
            ok(c)
        ),
    );
    assert!(a, "violation reduction {ratio}");
    assert!(c, "Pg block violated");
    assert!(b, "test feasibility {feas}%");
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "fail"
    }
}

#[test]
#[ignore = "full-scale run, hours"]
fn criterion_6_full_scale_reproduction() {
    let opf = case30();
    let data = sample_dataset(opf.network(), 5000, 7);
    let run = |loss| {
        let config = TrainConfig {
            loss,
            lambda: 1.0,
            epochs: 1000,
            seed: 7,
            ..TrainConfig::default()
        };
        train(&config, opf, &data, |_| ()).unwrap().test_report.unwrap()
    };
    let dual = run(LossKind::Dual);
    let dc3 = run(LossKind::Dc3);
    let feas = dual.feasibility_rate >= 99.5;
    let groups = dual.violations.iter().all(|g| g.mean <= 1e-5);
    let gap = (dual.mean_cost - dc3.mean_cost).abs() / dc3.mean_cost;
    let cost = gap <= 0.02;
    verdict(
        6,
        feas && groups && cost,
        format!(
            "dual feasibility {:.2}% (≥ 99.5%) [{}]; grouped ν means {:?} (≤ 1e-5) [{}]; cost {:.2} vs DC3 {:.2} \
             ({:.2}%, ≤ 2%) [{}]",
            dual.feasibility_rate,
            ok(feas),
            dual.violations.iter().map(|g| g.mean).collect::<Vec<_>>(),
            ok(groups),
            dual.mean_cost,
            dc3.mean_cost,
            100.0 * gap,
            ok(cost)
        ),
    );
    assert!(feas && groups && cost);
}

#[test]
fn criterion_7_dc3_lambda_tradeoff() {
    let runs = dc3_sweep();
    let nu: Vec<f64> = runs.iter().map(|r| r.test.nu_mean).collect();
    let cost: Vec<f64> = runs.iter().map(|r| r.test.mean_cost).collect();
    let nu_ok = nu.windows(2).all(|w| w[1] <= w[0]);
    let cost_ok = cost.windows(2).all(|w| w[1] >= w[0]);
    verdict(
        7,
        nu_ok && cost_ok,
        format!(
            "DC3 λ = 1, 5, 20 ({SWEEP_EPOCHS} epochs): test mean ν {:.3e}, {:.3e}, {:.3e} non-increasing [{}]; \
             cost {:.2}, {:.2}, {:.2} non-decreasing [{}]",
            nu[0],
            nu[1],
            nu[2],
            ok(nu_ok),
            cost[0],
            cost[1],
            cost[2],
            ok(cost_ok)
        ),
    );
    assert!(nu_ok && cost_ok);
}

#[test]
fn criterion_8_ngt_load_mismatch() {
    let ngt = desk_run(LossKind::Ngt, 1.0, DESK_EPOCHS).test.load_mismatch_percent;
    let dual = dual_desk().test.load_mismatch_percent;
    let dc3 = dc3_sweep()[0].test.load_mismatch_percent;
    let pass = ngt > 1.0 && dual < 1e-3 && dc3 < 1e-3;
    verdict(
        8,
        pass,
        format!("test load mismatch: NGT {ngt:.3}% (> 1%), dual {dual:.2e}%, DC3 {dc3:.2e}% (< 1e-3%)"),
    );
    assert!(pass);
}

fn per_solve_seconds(mut f: impl FnMut()) -> f64 {
    let reps = 30;
    let mut times: Vec<f64> = (0..7)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..reps {
                f();
            }
            t.elapsed().as_secs_f64() / reps as f64
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

#[test]
fn criterion_9_fdpf_efficiency() {
    let net = case("case118.m");
    let pb = PfProblem::from_case(&net).unwrap();
    let opts = PfOptions::default();
    let first = solve_fdpf(&pb, None, opts).unwrap();
    solve_nr(&pb, None, opts).unwrap();
    let mut refactored = 0;
    let fdpf = per_solve_seconds(|| refactored += solve_fdpf(&pb, None, opts).unwrap().factorizations);
    let nr = per_solve_seconds(|| {
        solve_nr(&pb, None, opts).unwrap();
    });
    let builds = net.fdpf_factor_builds();
    let pass = fdpf < nr && refactored == 0 && builds == 1 && first.factorizations > 0;
    verdict(
        9,
        pass,
        format!(
            "case118 per solve: FDPF {:.1} µs vs NR {:.1} µs; factorizations after warm-up {refactored}, \
             factor builds {builds}",
            fdpf * 1e6,
            nr * 1e6
        ),
    );
    assert!(pass);
}
