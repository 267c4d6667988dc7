//! Data generation, the self-supervised training loop, and the evaluation
//! protocols.
//!
//! Training data follows the generation recipe of random matrices with
//! uniform [0, 1] entries pushed through the matrix exponential, which is
//! always invertible (det exp A = exp tr A > 0). Each epoch regenerates its
//! training pool from streams keyed by (seed, epoch, sample), the frozen test
//! set lives on its own stream namespace, and every evaluation is seeded, so
//! identical configurations reproduce bit-identical curves and reports.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Relaxation;
use crate::error::{Error, Result};
use crate::lattice::{log_defect, Basis};
use crate::lll::{lll_reduce, LLLParams};
use crate::mat::Mat;
use crate::policy::{
    rollout, LossAggregation, PolicyConfig, PolicyParams, RolloutConfig,
};
use crate::rng::{epoch_sample_index, stream_rng, NS_DATASET, NS_EVAL, NS_TEST_SET, NS_TRAIN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n: usize,
    pub train_per_epoch: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(n: usize, seed: u64) -> Self {
        DatasetSpec { n, train_per_epoch: 1000, test_count: 4000, seed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Moves per rollout; `None` uses the lattice dimension.
    pub k: Option<usize>,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub minibatch: usize,
    pub aggregation: LossAggregation,
    pub policy: PolicyConfig,
    /// Evaluate the frozen test set every this many epochs (and at the end);
    /// 0 evaluates only at the end.
    pub eval_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            epochs: 200,
            k: None,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            minibatch: 50,
            aggregation: LossAggregation::MeanSteps,
            policy: PolicyConfig::default(),
            eval_every: 50,
            seed,
        }
    }
}

/// B = exp(A) with A_ij drawn i.i.d. uniform from [0, 1) in row-major order.
pub fn generate_basis_from_rng<R: Rng>(n: usize, rng: &mut R) -> Basis {
    let mut a = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = rng.gen::<f64>();
        }
    }
    Basis::new(expm(&a)).expect("exp(A) is invertible")
}

pub fn generate_basis(n: usize, seed: u64, index: u64) -> Basis {
    let mut rng = stream_rng(seed, NS_DATASET, index);
    generate_basis_from_rng(n, &mut rng)
}

/// The frozen test set: its own stream namespace, independent of epochs.
pub fn generate_test_set(spec: &DatasetSpec) -> Vec<Basis> {
    (0..spec.test_count)
        .map(|i| {
            let mut rng = stream_rng(spec.seed, NS_TEST_SET, i as u64);
            generate_basis_from_rng(spec.n, &mut rng)
        })
        .collect()
}

fn train_basis(spec: &DatasetSpec, epoch: usize, sample: usize) -> Basis {
    let mut rng = stream_rng(spec.seed, NS_DATASET, epoch_sample_index(epoch, sample));
    generate_basis_from_rng(spec.n, &mut rng)
}

/// Matrix exponential by scaling-and-squaring with a truncated Taylor
/// series; terms are added until they fall below 1e-16 of the partial sum,
/// comfortably inside the 1e-12 relative target.
pub fn expm(a: &Mat) -> Mat {
    assert!(a.is_square());
    let n = a.rows();
    let norm1 = (0..n)
        .map(|j| (0..n).map(|i| a[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let s = if norm1 > 0.5 { (norm1 / 0.5).log2().ceil() as i32 } else { 0 };
    let x = a.scale(0.5f64.powi(s));
    let mut sum = Mat::identity(n);
    let mut term = Mat::identity(n);
    for k in 1..=80 {
        term = term.matmul(&x).scale(1.0 / k as f64);
        sum = sum.add(&term);
        let tn: f64 = term.data().iter().map(|v| v.abs()).sum();
        let sn: f64 = sum.data().iter().map(|v| v.abs()).sum();
        if tn <= 1e-16 * sn {
            break;
        }
    }
    let mut result = sum;
    for _ in 0..s {
        result = result.matmul(&result);
    }
    result
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    fn new(lr: f64, dim: usize) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            theta[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

fn flatten_params(params: &PolicyParams) -> Vec<f64> {
    params.tensors().iter().flat_map(|(_, t)| t.data.iter().copied()).collect()
}

fn unflatten_params(params: &mut PolicyParams, flat: &[f64]) {
    let mut offset = 0;
    for t in params.tensors_mut() {
        let len = t.data.len();
        t.data.copy_from_slice(&flat[offset..offset + len]);
        offset += len;
    }
    debug_assert_eq!(offset, flat.len());
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_mean_logdefect: f64,
    pub test_std_logdefect: f64,
    pub lll_mean_logdefect: f64,
    pub lll_std_logdefect: f64,
}

pub struct TrainOutcome {
    pub params: PolicyParams,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone)]
pub struct EpochProgress {
    pub epoch: usize,
    pub epochs: usize,
    pub train_loss: f64,
    pub test_mean: Option<f64>,
    pub test_std: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd { mean: f64::NAN, std: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    MeanStd { mean, std: var.sqrt() }
}

/// Self-supervised training: each epoch regenerates `train_per_epoch` bases,
/// rolls the policy out for k moves on each, backpropagates the aggregated
/// log-defect loss and applies minibatch optimizer updates.
pub fn train(
    spec: &DatasetSpec,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochProgress),
) -> Result<TrainOutcome> {
    if cfg.learning_rate <= 0.0 {
        return Err(Error::InvalidParameter("learning rate must be positive".into()));
    }
    if cfg.minibatch == 0 {
        return Err(Error::InvalidParameter("minibatch must be nonzero".into()));
    }
    let k = cfg.k.unwrap_or(spec.n);
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    let mut params = PolicyParams::init(cfg.policy.clone(), cfg.seed);
    let dim = params.param_count();
    let mut adam = Adam::new(cfg.learning_rate, dim);

    let test_set = generate_test_set(spec);
    let lll_stats = lll_stats(&test_set)?;

    let mut roll_cfg = RolloutConfig::training(k);
    roll_cfg.aggregation = cfg.aggregation;

    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut last_test = MeanStd { mean: f64::NAN, std: f64::NAN };
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { params, curve });
    }

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut sample = 0;
        while sample < spec.train_per_epoch {
            let batch_end = (sample + cfg.minibatch).min(spec.train_per_epoch);
            let batch_len = batch_end - sample;
            let mut grad_acc = vec![0.0; dim];
            for idx in sample..batch_end {
                let basis = train_basis(spec, epoch, idx);
                let mut roll_rng =
                    stream_rng(cfg.seed, NS_TRAIN, epoch_sample_index(epoch, idx));
                let roll = rollout(&basis, &params, &roll_cfg, &mut roll_rng)?;
                let loss = roll.tape.scalar(roll.loss);
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch, seed: cfg.seed, loss });
                }
                epoch_loss += loss;
                let grads = roll.tape.backward(roll.objective)?;
                let mut offset = 0;
                for &pnode in &roll.param_nodes {
                    let g = grads.wrt(pnode);
                    for (slot, gv) in grad_acc[offset..offset + g.len()].iter_mut().zip(g) {
                        *slot += gv / batch_len as f64;
                    }
                    offset += g.len();
                }
            }
            let mut flat = flatten_params(&params);
            match cfg.optimizer {
                OptimizerKind::Adam => adam.step(&mut flat, &grad_acc),
                OptimizerKind::Sgd => {
                    for (t, g) in flat.iter_mut().zip(&grad_acc) {
                        *t -= cfg.learning_rate * g;
                    }
                }
            }
            unflatten_params(&mut params, &flat);
            sample = batch_end;
        }
        let train_loss = epoch_loss / spec.train_per_epoch as f64;
        if !train_loss.is_finite() {
            return Err(Error::Divergence { epoch, seed: cfg.seed, loss: train_loss });
        }

        let is_last = epoch + 1 == cfg.epochs;
        let eval_now = is_last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0);
        if eval_now {
            let defects = policy_defects(&params, &test_set, k, cfg.seed)?;
            last_test = mean_std(&defects);
        }
        curve.push(CurvePoint {
            epoch,
            train_loss,
            test_mean_logdefect: last_test.mean,
            test_std_logdefect: last_test.std,
            lll_mean_logdefect: lll_stats.mean,
            lll_std_logdefect: lll_stats.std,
        });
        progress(&EpochProgress {
            epoch,
            epochs: cfg.epochs,
            train_loss,
            test_mean: eval_now.then_some(last_test.mean),
            test_std: eval_now.then_some(last_test.std),
        });
    }
    Ok(TrainOutcome { params, curve })
}

fn lll_stats(test_set: &[Basis]) -> Result<MeanStd> {
    let params = LLLParams::default();
    let defects: Result<Vec<f64>> = test_set
        .iter()
        .map(|b| lll_reduce(b, &params).map(|o| log_defect(&o.basis)))
        .collect();
    Ok(mean_std(&defects?))
}

/// Final per-matrix log defects of policy rollouts (hard moves) over a set.
pub fn policy_defects(
    params: &PolicyParams,
    test_set: &[Basis],
    k: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let cfg = RolloutConfig {
        steps: k,
        relaxation: Relaxation::StraightThrough,
        aggregation: LossAggregation::FinalStep,
        expected_index_loss: false,
    };
    test_set
        .iter()
        .enumerate()
        .map(|(idx, b)| {
            let mut rng = stream_rng(seed, NS_EVAL, idx as u64);
            let roll = rollout(b, params, &cfg, &mut rng)?;
            Ok(log_defect(&roll.final_basis))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerMatrixRecord {
    pub policy: f64,
    pub lll: f64,
    pub baseline: f64,
}

/// Statistics for one worst-subset selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstPSection {
    pub p: f64,
    pub selected_by: String,
    pub size: usize,
    pub indices: Vec<usize>,
    pub policy: MeanStd,
    pub lll: MeanStd,
    pub baseline: MeanStd,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalTimings {
    pub policy_secs: f64,
    pub lll_secs: f64,
}

/// Per-matrix final log defects for the policy, the reducer and the identity
/// baseline, with aggregates and optional worst-subset sections.
///
/// Wall-clock timings stay out of the serialized form so reports are
/// byte-identical across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub k: usize,
    pub count: usize,
    pub per_matrix: Vec<PerMatrixRecord>,
    pub policy: MeanStd,
    pub lll: MeanStd,
    pub baseline: MeanStd,
    pub worst_p: Vec<WorstPSection>,
    #[serde(skip)]
    pub timings: EvalTimings,
}

/// Evaluates policy rollouts (k moves), the reducer and the no-reduction
/// baseline on a frozen test set.
pub fn evaluate(
    params: &PolicyParams,
    test_set: &[Basis],
    k: usize,
    seed: u64,
) -> Result<EvalReport> {
    if test_set.is_empty() {
        return Err(Error::EmptyReport);
    }
    let n = test_set[0].n();
    let lll_params = LLLParams::default();

    let t0 = std::time::Instant::now();
    let policy_vals = policy_defects(params, test_set, k, seed)?;
    let policy_secs = t0.elapsed().as_secs_f64();

    let t1 = std::time::Instant::now();
    let lll_vals: Result<Vec<f64>> = test_set
        .iter()
        .map(|b| lll_reduce(b, &lll_params).map(|o| log_defect(&o.basis)))
        .collect();
    let lll_vals = lll_vals?;
    let lll_secs = t1.elapsed().as_secs_f64();

    let baseline_vals: Vec<f64> = test_set.iter().map(log_defect).collect();

    let per_matrix: Vec<PerMatrixRecord> = (0..test_set.len())
        .map(|i| PerMatrixRecord {
            policy: policy_vals[i],
            lll: lll_vals[i],
            baseline: baseline_vals[i],
        })
        .collect();
    Ok(EvalReport {
        n,
        k,
        count: test_set.len(),
        policy: mean_std(&policy_vals),
        lll: mean_std(&lll_vals),
        baseline: mean_std(&baseline_vals),
        per_matrix,
        worst_p: Vec::new(),
        timings: EvalTimings { policy_secs, lll_secs },
    })
}

/// The two subsets of size ceil(p * N) on which each method performs worst
/// (largest final log defect), with both methods' statistics on each.
pub fn worst_p_analysis(report: &EvalReport, p: f64) -> Result<Vec<WorstPSection>> {
    if report.per_matrix.is_empty() {
        return Err(Error::EmptyReport);
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidParameter(format!("p must lie in (0, 1], got {p}")));
    }
    let count = report.per_matrix.len();
    let size = (p * count as f64).ceil() as usize;
    let select = |key: &dyn Fn(&PerMatrixRecord) -> f64, name: &str| -> WorstPSection {
        let mut order: Vec<usize> = (0..count).collect();
        order.sort_by(|&a, &b| {
            key(&report.per_matrix[b])
                .partial_cmp(&key(&report.per_matrix[a]))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let indices: Vec<usize> = order.into_iter().take(size).collect();
        let pick = |f: &dyn Fn(&PerMatrixRecord) -> f64| -> Vec<f64> {
            indices.iter().map(|&i| f(&report.per_matrix[i])).collect()
        };
        WorstPSection {
            p,
            selected_by: name.to_string(),
            size,
            policy: mean_std(&pick(&|r| r.policy)),
            lll: mean_std(&pick(&|r| r.lll)),
            baseline: mean_std(&pick(&|r| r.baseline)),
            indices,
        }
    };
    Ok(vec![select(&|r| r.lll, "lll"), select(&|r| r.policy, "policy")])
}
