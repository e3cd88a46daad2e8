//! Augmented-Lagrangian training with periodic dual updates, plus the
//! penalty (DC3-style) and voltage-prediction (NGT-style) baselines.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case_io::NetworkModel;
use crate::evaluation::{evaluate, EvalError, EvalOptions, MetricsReport, DEFAULT_FEASIBILITY_TOL};
use crate::neural::{
    chain_total_gradient, AdamConfig, AdamState, Checkpoint, InputScaler, Mlp, MlpParams, OutputHead,
};
use crate::opf_model::{violation_nu, OpfModel, SplitGradient};
use crate::powerflow::{sensitivity, solve, PfError, PfOptions, SolverKind, DEFAULT_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Dual,
    Dc3,
    Ngt,
}

impl LossKind {
    pub fn head(self) -> OutputHead {
        match self {
            LossKind::Ngt => OutputHead::Voltage,
            _ => OutputHead::Split,
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dual" => Ok(LossKind::Dual),
            "dc3" => Ok(LossKind::Dc3),
            "ngt" => Ok(LossKind::Ngt),
            other => Err(format!("unknown loss `{other}` (expected dual, dc3 or ngt)")),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Dual => "dual",
            LossKind::Dc3 => "dc3",
            LossKind::Ngt => "ngt",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub solver: SolverKind,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs between dual updates
    pub dual_period: usize,
    pub alpha: f64,
    /// Penalty weight of the DC3 loss
    pub lambda: f64,
    pub eta: f64,
    pub tau: f64,
    pub learning_rate: f64,
    /// Factor applied to the learning rate after every epoch
    pub lr_decay: f64,
    /// Hidden width; 50 for networks up to 50 buses, 100 beyond
    pub hidden: Option<usize>,
    pub seed: u64,
    /// Factor applied to the generation cost inside the loss
    pub cost_scale: f64,
    pub pf_tol: f64,
    /// Largest tolerated fraction of diverging power flows per epoch
    pub max_pf_failure_rate: f64,
    /// Angle band of the voltage head, radians
    pub angle_band: f64,
    /// Weight of the summed violation in the validation score
    pub selection_weight: f64,
    pub split_ratio: [u32; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Dual,
            solver: SolverKind::Nr,
            epochs: 1000,
            batch_size: 32,
            dual_period: 10,
            alpha: 2.0,
            lambda: 1.0,
            eta: 10.0,
            tau: 0.5,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            hidden: None,
            seed: 0,
            cost_scale: 1e-4,
            pf_tol: DEFAULT_TOL,
            max_pf_failure_rate: 0.01,
            angle_band: 0.5,
            selection_weight: 100.0,
            split_ratio: [10, 1, 1],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.dual_period == 0 {
            return bad("epochs, batch size and dual period must be at least 1");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if !(self.lambda >= 0.0 && self.eta >= 0.0 && (0.0..=1.0).contains(&self.tau)) {
            return bad("lambda and eta must be nonnegative and tau in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.lr_decay > 0.0 && self.cost_scale >= 0.0 && self.pf_tol > 0.0) {
            return bad("learning rate, its decay and the power-flow tolerance must be positive");
        }
        if self.hidden == Some(0) {
            return bad("hidden width must be at least 1");
        }
        if self.split_ratio[0] == 0 {
            return bad("the training share of the split ratio must be positive");
        }
        Ok(())
    }

    pub fn hidden_width(&self, network: &NetworkModel) -> usize {
        self.hidden
            .unwrap_or(if network.n_bus() <= 50 { 50 } else { 100 })
    }

    fn pf_options(&self) -> PfOptions {
        PfOptions {
            tol: self.pf_tol,
            max_iter: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("the training split is empty")]
    EmptyDataset,
    #[error("epoch {epoch}: {failures} of {samples} power flows failed")]
    TooManyPfFailures {
        epoch: usize,
        failures: usize,
        samples: usize,
    },
    #[error("epoch {epoch}: loss is not finite")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Load samples with a contiguous train/validation/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Vec<f64>>,
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub seed: u64,
    pub case_checksum: String,
}

impl Dataset {
    pub fn train(&self) -> &[Vec<f64>] {
        &self.samples[self.train.clone()]
    }

    pub fn val(&self) -> &[Vec<f64>] {
        &self.samples[self.val.clone()]
    }

    pub fn test(&self) -> &[Vec<f64>] {
        &self.samples[self.test.clone()]
    }
}

/// Train and validation sizes rounded to nearest, test takes the rest.
pub fn split_sizes(count: usize, ratio: [u32; 3]) -> (usize, usize, usize) {
    let total: u32 = ratio.iter().sum();
    let share = |r: u32| ((count as f64) * r as f64 / total as f64).round() as usize;
    let train = share(ratio[0]).min(count);
    let val = share(ratio[1]).min(count - train);
    (train, val, count - train - val)
}

/// `count` load vectors, each component uniform within ±10 % of nominal.
pub fn sample_dataset(network: &NetworkModel, count: usize, seed: u64) -> Dataset {
    sample_dataset_with_split(network, count, seed, [10, 1, 1])
}

pub fn sample_dataset_with_split(network: &NetworkModel, count: usize, seed: u64, ratio: [u32; 3]) -> Dataset {
    let nominal = network.nominal_load();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..count)
        .map(|_| {
            nominal
                .iter()
                .map(|&v| {
                    let u: f64 = rng.random();
                    if v == 0.0 {
                        0.0
                    } else {
                        v * (0.9 + 0.2 * u)
                    }
                })
                .collect()
        })
        .collect();
    let (tr, va, _) = split_sizes(count, ratio);
    Dataset {
        samples,
        train: 0..tr,
        val: tr..tr + va,
        test: tr + va..count,
        seed,
        case_checksum: network.checksum.clone(),
    }
}

/// Loss value split into its terms; `total = cost + penalty + mismatch`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cost: f64,
    pub penalty: f64,
    pub mismatch: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.cost += o.cost;
        self.penalty += o.penalty;
        self.mismatch += o.mismatch;
    }

    fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            total: self.total * s,
            cost: self.cost * s,
            penalty: self.penalty * s,
            mismatch: self.mismatch * s,
        }
    }
}

/// `f + (1/2α) Σ [relu(μ + α h)² − μ²]`.
pub fn augmented_loss(f: f64, h: &[f64], mu: &[f64], alpha: f64) -> LossBreakdown {
    let penalty = h
        .iter()
        .zip(mu)
        .map(|(&h, &m)| {
            let r = (m + alpha * h).max(0.0);
            r * r - m * m
        })
        .sum::<f64>()
        / (2.0 * alpha);
    LossBreakdown {
        total: f + penalty,
        cost: f,
        penalty,
        mismatch: 0.0,
    }
}

/// `∂/∂h` of the augmented penalty: `relu(μ + α h)`.
pub fn augmented_loss_grad(h: &[f64], mu: &[f64], alpha: f64) -> Vec<f64> {
    h.iter().zip(mu).map(|(&h, &m)| (m + alpha * h).max(0.0)).collect()
}

/// `relu(μ + α h)`.
pub fn dual_update(mu: &[f64], h_aggregate: &[f64], alpha: f64) -> Vec<f64> {
    augmented_loss_grad(h_aggregate, mu, alpha)
}

/// `f + λ ‖ν‖²`.
pub fn dc3_loss(f: f64, nu: &[f64], lambda: f64) -> LossBreakdown {
    let penalty = lambda * nu.iter().map(|v| v * v).sum::<f64>();
    LossBreakdown {
        total: f + penalty,
        cost: f,
        penalty,
        mismatch: 0.0,
    }
}

/// `f + η(1−τ) ‖ν‖² + ητ ‖x_d − x̂_d‖²`, given the squared mismatch.
pub fn ngt_loss(f: f64, nu: &[f64], mismatch_sq: f64, eta: f64, tau: f64) -> LossBreakdown {
    let penalty = eta * (1.0 - tau) * nu.iter().map(|v| v * v).sum::<f64>();
    let mismatch = eta * tau * mismatch_sq;
    LossBreakdown {
        total: f + penalty + mismatch,
        cost: f,
        penalty,
        mismatch,
    }
}

/// Multipliers shared by all samples, refreshed every `period` epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub mu: Vec<f64>,
    pub alpha: f64,
    pub period: usize,
}

impl Multipliers {
    pub fn zeros(len: usize, alpha: f64, period: usize) -> Self {
        Multipliers {
            mu: vec![0.0; len],
            alpha,
            period,
        }
    }

    pub fn is_due(&self, epoch: usize) -> bool {
        epoch.is_multiple_of(self.period)
    }

    pub fn update(&mut self, h_aggregate: &[f64]) {
        self.mu = dual_update(&self.mu, h_aggregate, self.alpha);
    }

    pub fn norm(&self) -> f64 {
        self.mu.iter().map(|m| m * m).sum::<f64>().sqrt()
    }
}

/// Loss, constraint values and parameter gradient for one sample.
#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub loss: LossBreakdown,
    /// Generation cost without the loss scale
    pub cost: f64,
    pub h: Vec<f64>,
    pub grads: MlpParams,
}

/// The split-head pipeline: forward, power flow, `z2`, loss and the
/// gradient through the implicit power-flow sensitivities.
pub fn split_sample(
    mlp: &Mlp,
    opf: &OpfModel,
    x: &[f64],
    config: &TrainConfig,
    mu: &[f64],
) -> Result<SampleOutcome, PfError> {
    let trace = mlp.forward(x);
    let problem = opf.pf_problem(x, &trace.y)?;
    let sol = solve(&problem, config.solver, None, config.pf_options())?;
    let layout = opf.layout();
    let z1 = layout.z1_from_state(&sol.v, &sol.theta);
    let z2 = opf.compute_z2(x, &sol.v, &sol.theta);
    let h = opf.inequality_h(&trace.y, &z1, &z2).h;
    let cost = opf.objective(&trace.y, &z2);
    let f = config.cost_scale * cost;
    let (loss, dh) = match config.loss {
        LossKind::Dual => (
            augmented_loss(f, &h, mu, config.alpha),
            augmented_loss_grad(&h, mu, config.alpha),
        ),
        LossKind::Dc3 | LossKind::Ngt => {
            let nu = violation_nu(&h);
            let dh = nu.iter().map(|v| 2.0 * config.lambda * v).collect();
            (dc3_loss(f, &nu, config.lambda), dh)
        }
    };
    let mut grad = SplitGradient::zeros(layout);
    opf.objective_gradient(&trace.y, &z2, config.cost_scale, &mut grad);
    opf.inequality_vjp(&dh, &mut grad);
    let sens = sensitivity(&problem, &sol)?;
    let grads = chain_total_gradient(mlp, &trace, opf, &sol.state(), &sens, &grad);
    Ok(SampleOutcome { loss, cost, h, grads })
}

/// Output of the voltage-head pipeline.
#[derive(Debug, Clone)]
pub struct NgtOutcome {
    pub sample: SampleOutcome,
    /// `[Pd; Qd]` at every bus implied by the predicted state
    pub reconstructed: Vec<f64>,
}

/// The voltage-head pipeline: magnitudes and angles come straight from the
/// network, generator outputs and loads are read off the implied
/// injections, and no power flow is solved.
pub fn ngt_forward_and_loss(mlp: &Mlp, opf: &OpfModel, x: &[f64], config: &TrainConfig) -> NgtOutcome {
    let net = opf.network();
    let layout = opf.layout();
    let n = net.n_bus();
    let trace = mlp.forward(x);
    let (v, theta) = trace.y.split_at(n);
    let (y, z1, z2) = opf.split_from_state(x, v, theta);
    let h = opf.inequality_h(&y, &z1, &z2).h;
    let nu = violation_nu(&h);
    let cost = opf.objective(&y, &z2);
    let full = opf.reconstructed_load(&y, &z2, v, theta);
    let mismatch_sq: f64 = net
        .pq()
        .iter()
        .map(|&b| (x[b] - full[b]).powi(2) + (x[n + b] - full[n + b]).powi(2))
        .sum();
    let (eta, tau) = (config.eta, config.tau);
    let loss = ngt_loss(config.cost_scale * cost, &nu, mismatch_sq, eta, tau);

    let mut grad = SplitGradient::zeros(layout);
    opf.objective_gradient(&y, &z2, config.cost_scale, &mut grad);
    let dh: Vec<f64> = nu.iter().map(|v| 2.0 * eta * (1.0 - tau) * v).collect();
    opf.inequality_vjp(&dh, &mut grad);

    // Pg at a PV bus is the calculated injection plus the fixed load, and
    // x̂ at a PQ bus is minus the calculated injection
    let mut d_p = vec![0.0; n];
    let mut d_q = vec![0.0; n];
    for (k, &b) in net.pv().iter().enumerate() {
        d_p[b] += grad.dy[k];
    }
    for &b in net.pq() {
        d_p[b] += 2.0 * eta * tau * (x[b] - full[b]);
        d_q[b] += 2.0 * eta * tau * (x[n + b] - full[n + b]);
    }
    let (mut dv, mut dtheta) = opf.injection_vjp(v, theta, &d_p, &d_q, &[]);
    let (dv2, dtheta2) = opf.z2_vjp(v, theta, &grad.dz2);
    for i in 0..n {
        dv[i] += dv2[i];
        dtheta[i] += dtheta2[i];
    }
    layout.scatter_to_state(&grad.dy, &grad.dz1, &mut dv, &mut dtheta);
    dv.extend(dtheta);
    let grads = mlp.backward(&trace, &dv);
    NgtOutcome {
        sample: SampleOutcome { loss, cost, h, grads },
        reconstructed: full,
    }
}

/// Dispatches on the configured loss.
pub fn sample_loss_and_gradient(
    mlp: &Mlp,
    opf: &OpfModel,
    x: &[f64],
    config: &TrainConfig,
    mu: &[f64],
) -> Result<SampleOutcome, PfError> {
    match config.loss {
        LossKind::Ngt => Ok(ngt_forward_and_loss(mlp, opf, x, config).sample),
        _ => split_sample(mlp, opf, x, config, mu),
    }
}

/// Fresh model for a network: He-initialized weights, inputs standardized
/// on `train`, outputs boxed per the loss's head.
pub fn init_model(opf: &OpfModel, config: &TrainConfig, train: &[Vec<f64>]) -> Mlp {
    let layout = opf.layout();
    let (lo, hi) = match config.loss.head() {
        OutputHead::Split => opf.y_bounds(),
        OutputHead::Voltage => opf.voltage_bounds(config.angle_band),
    };
    let params = MlpParams::init(layout.dim_x(), config.hidden_width(opf.network()), lo.len(), config.seed);
    Mlp::new(params, InputScaler::fit(train), lo, hi)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Means over the epoch's converged training samples
    pub loss: LossBreakdown,
    pub mean_cost: f64,
    pub nu_mean: f64,
    pub nu_max: f64,
    pub feasibility_rate: f64,
    pub pf_failures: usize,
    pub dual_updated: bool,
    pub mu_norm: f64,
    pub val_score: Option<f64>,
    pub val_feasibility_rate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The model with the best validation score
    pub checkpoint: Checkpoint,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub multipliers: Multipliers,
    pub test_report: Option<MetricsReport>,
}

fn validation_score(report: &MetricsReport, config: &TrainConfig) -> f64 {
    let mut s = config.cost_scale * report.mean_cost + config.selection_weight * report.nu_sum_mean;
    if config.loss == LossKind::Ngt {
        s += config.selection_weight * report.load_mismatch_percent / 100.0;
    }
    s
}

/// Minibatch training over `dataset.train()`. Each epoch visits the
/// training split in a seeded random order; a batch's per-sample work runs
/// in parallel and gradients are reduced in sample order. Multipliers are
/// refreshed from the epoch-mean `h` every `dual_period` epochs.
pub fn train(
    config: &TrainConfig,
    opf: &OpfModel,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let train_set = dataset.train();
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let layout = opf.layout();
    let head = config.loss.head();
    let checksum = opf.network().checksum.clone();
    let mut mlp = init_model(opf, config, train_set);
    let mut adam = AdamState::new(
        &mlp.params,
        AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut multipliers = Multipliers::zeros(layout.dim_h(), config.alpha, config.dual_period);
    let real: Vec<bool> = (0..layout.dim_h()).map(|i| layout.is_constrained(i)).collect();
    let n_real = real.iter().filter(|&&r| r).count().max(1) as f64;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let eval_options = EvalOptions {
        pf: config.pf_options(),
        feasibility_tol: DEFAULT_FEASIBILITY_TOL,
        keep_records: false,
        parallel: true,
    };

    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Mlp)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut cost_sum = 0.0;
        let mut h_sum = vec![0.0; layout.dim_h()];
        let mut nu_sum = 0.0;
        let mut nu_max: f64 = 0.0;
        let mut feasible = 0usize;
        let mut ok = 0usize;
        let mut failures = 0usize;
        for batch in order.chunks(config.batch_size) {
            let outcomes: Vec<Result<SampleOutcome, PfError>> = batch
                .par_iter()
                .map(|&i| sample_loss_and_gradient(&mlp, opf, &train_set[i], config, &multipliers.mu))
                .collect();
            let mut grads = MlpParams::zeros(mlp.params.dim_in, mlp.params.hidden, mlp.params.dim_out);
            let mut batch_ok = 0usize;
            for out in outcomes {
                let Ok(out) = out else {
                    failures += 1;
                    continue;
                };
                batch_ok += 1;
                grads.add_scaled(&out.grads, 1.0);
                sum.add(&out.loss);
                cost_sum += out.cost;
                for (i, &h) in out.h.iter().enumerate() {
                    h_sum[i] += h;
                    if real[i] {
                        nu_sum += h.max(0.0);
                        nu_max = nu_max.max(h);
                        if h <= DEFAULT_FEASIBILITY_TOL {
                            feasible += 1;
                        }
                    }
                }
            }
            if batch_ok > 0 {
                ok += batch_ok;
                grads.values_mut().for_each(|g| *g /= batch_ok as f64);
                adam.step(&mut mlp.params, &grads);
            }
        }
        if failures as f64 > config.max_pf_failure_rate * train_set.len() as f64 {
            return Err(TrainError::TooManyPfFailures {
                epoch,
                failures,
                samples: train_set.len(),
            });
        }
        let inv = 1.0 / ok as f64;
        let loss = sum.scaled(inv);
        if !loss.total.is_finite() || !mlp.params.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        let dual_updated = config.loss == LossKind::Dual && multipliers.is_due(epoch);
        if dual_updated {
            let h_mean: Vec<f64> = h_sum.iter().map(|h| h * inv).collect();
            multipliers.update(&h_mean);
        }

        let candidate = Checkpoint::new(head, checksum.clone(), config.seed, mlp.clone());
        let (val_score, val_feas) = if dataset.val().is_empty() {
            (None, None)
        } else {
            match evaluate(&candidate, opf, dataset.val(), config.solver, eval_options) {
                Ok(r) => (Some(validation_score(&r, config)), Some(r.feasibility_rate)),
                Err(EvalError::NoConvergedSamples { .. }) => (Some(f64::INFINITY), None),
                Err(e) => return Err(e.into()),
            }
        };
        let score = val_score.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _, _)| score <= *s) {
            best = Some((score, epoch, mlp.clone()));
        }

        let record = EpochRecord {
            epoch,
            loss,
            mean_cost: cost_sum * inv,
            nu_mean: nu_sum * inv / n_real,
            nu_max: nu_max.max(0.0),
            feasibility_rate: 100.0 * feasible as f64 * inv / n_real,
            pf_failures: failures,
            dual_updated,
            mu_norm: multipliers.norm(),
            val_score,
            val_feasibility_rate: val_feas,
        };
        on_epoch(&record);
        records.push(record);
        adam.config.lr *= config.lr_decay;
    }

    let (_, best_epoch, best_mlp) = best.expect("at least one epoch");
    let checkpoint = Checkpoint::new(head, checksum, config.seed, best_mlp);
    let test_report = if dataset.test().is_empty() {
        None
    } else {
        let options = EvalOptions {
            parallel: false,
            ..eval_options
        };
        Some(evaluate(&checkpoint, opf, dataset.test(), config.solver, options)?)
    };
    Ok(TrainOutcome {
        checkpoint,
        records,
        best_epoch,
        multipliers,
        test_report,
    })
}
