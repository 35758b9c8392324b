//! Non-private mini-batch SGD and a conservatively accounted DP-SGD.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::{argmax, LabeledDataset, TaskKind};
use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::loss::LossKind;
use crate::model::{ParamVector, Tape};
use crate::par::{chunked_tree_reduce, Execution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInputs("epochs and batch size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidInputs("lr and weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpsgdConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Replaces the accounted noise multiplier; only for tests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_override: Option<f64>,
}

/// One row per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    /// Mean training loss over the epoch's mini-batches.
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub clip_fraction: Option<f64>,
    pub sigma: Option<f64>,
}

pub fn write_trace_csv(rows: &[TraceRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "step,epoch,loss,accuracy,clip_fraction,sigma")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.10e}")).unwrap_or_default();
    for r in rows {
        writeln!(
            w,
            "{},{},{:.10e},{},{},{}",
            r.step,
            r.epoch,
            r.loss,
            opt(r.accuracy),
            opt(r.clip_fraction),
            opt(r.sigma)
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ParamVector,
    pub trace: Vec<TraceRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpAccounting {
    pub epsilon: f64,
    pub delta: f64,
    pub steps: usize,
    pub sigma: f64,
    pub clip_norm: f64,
    pub method: String,
    /// Per-example gradients that hit the clip bound, over all steps.
    pub clipped: u64,
    pub examples: u64,
}

pub const DPSGD_ACCOUNTING: &str = "conservative naive composition, no subsampling amplification";

#[derive(Clone, Debug)]
pub struct DpTrainOutput {
    pub params: ParamVector,
    pub trace: Vec<TraceRow>,
    pub accounting: DpAccounting,
}

struct BatchSum {
    tape: Tape,
    grad: Vec<f64>,
    loss: f64,
    correct: usize,
    clipped: u64,
    max_norm: f64,
}

/// Sums (optionally clipped) per-example gradients over `batch`.
fn batch_gradient(
    params: &ParamVector,
    loss: LossKind,
    data: &LabeledDataset,
    batch: &[usize],
    clip: Option<f64>,
    exec: Execution,
) -> Result<BatchSum> {
    let spec = params.spec();
    let theta = params.values();
    let p = theta.len();
    let first_err = std::sync::Mutex::new(None::<Error>);
    let sum = chunked_tree_reduce(
        exec,
        batch,
        || BatchSum {
            tape: Tape::default(),
            grad: vec![0.0; p],
            loss: 0.0,
            correct: 0,
            clipped: 0,
            max_norm: 0.0,
        },
        |acc, _, &i| {
            let s = &data.samples[i];
            let mut step = || -> Result<()> {
                spec.forward_tape(theta, &s.x, &mut acc.tape)?;
                let tape = &acc.tape;
                let f = tape.output();
                acc.loss += loss.value(&s.y, f)?;
                if data.task == TaskKind::Classification && argmax(f) == argmax(&s.y) {
                    acc.correct += 1;
                }
                let w = loss.grad_f(&s.y, f)?;
                match clip {
                    None => spec.vjp_tape(theta, tape, &w, 1.0, &mut acc.grad)?,
                    Some(c) => {
                        let mut g = vec![0.0; p];
                        spec.vjp_tape(theta, tape, &w, 1.0, &mut g)?;
                        let n = norm(&g);
                        let scale = if n > c {
                            acc.clipped += 1;
                            c / n
                        } else {
                            1.0
                        };
                        acc.max_norm = acc.max_norm.max(n * scale);
                        for (a, v) in acc.grad.iter_mut().zip(&g) {
                            *a += scale * v;
                        }
                    }
                }
                Ok(())
            };
            if let Err(e) = step() {
                first_err.lock().expect("poisoned").get_or_insert(e);
            }
        },
        |mut a, b| {
            for (x, y) in a.grad.iter_mut().zip(&b.grad) {
                *x += y;
            }
            a.loss += b.loss;
            a.correct += b.correct;
            a.clipped += b.clipped;
            a.max_norm = a.max_norm.max(b.max_norm);
            a
        },
    )
    .expect("non-empty batch");
    if let Some(e) = first_err.into_inner().expect("poisoned") {
        return Err(e);
    }
    Ok(sum)
}

struct Loop<'a> {
    init: &'a ParamVector,
    loss: LossKind,
    data: &'a LabeledDataset,
    epochs: usize,
    lr: f64,
    weight_decay: f64,
    batch_size: usize,
    seed: u64,
    clip: Option<f64>,
    /// Noise standard deviation on the summed gradient, before dividing by
    /// the batch size.
    noise_std: f64,
    sigma: Option<f64>,
    exec: Execution,
}

struct LoopOutput {
    params: ParamVector,
    trace: Vec<TraceRow>,
    clipped: u64,
    examples: u64,
}

fn run_loop(l: Loop) -> Result<LoopOutput> {
    if l.data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = l.init.clone();
    let mut order: Vec<usize> = (0..l.data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(l.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(l.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut trace = Vec::with_capacity(l.epochs);
    let mut step = 0usize;
    let (mut clipped_total, mut examples_total) = (0u64, 0u64);
    for epoch in 0..l.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct, mut clipped) = (0.0, 0usize, 0u64);
        for batch in order.chunks(l.batch_size) {
            let s = batch_gradient(&params, l.loss, l.data, batch, l.clip, l.exec)?;
            loss_sum += s.loss;
            correct += s.correct;
            clipped += s.clipped;
            let inv_b = 1.0 / batch.len() as f64;
            let theta = params.values_mut();
            for (th, g) in theta.iter_mut().zip(&s.grad) {
                let noise = if l.noise_std > 0.0 {
                    l.noise_std * noise_rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                *th -= l.lr * ((g + noise) * inv_b + l.weight_decay * *th);
            }
            step += 1;
        }
        let loss = loss_sum / l.data.len() as f64;
        if !loss.is_finite() || params.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::DivergedLoss { step });
        }
        clipped_total += clipped;
        examples_total += l.data.len() as u64;
        trace.push(TraceRow {
            step,
            epoch: epoch + 1,
            loss,
            accuracy: (l.data.task == TaskKind::Classification).then(|| correct as f64 / l.data.len() as f64),
            clip_fraction: l.clip.map(|_| clipped as f64 / l.data.len() as f64),
            sigma: l.sigma,
        });
    }
    Ok(LoopOutput {
        params,
        trace,
        clipped: clipped_total,
        examples: examples_total,
    })
}

/// Mini-batch SGD with decoupled weight decay and a seeded shuffle per epoch.
pub fn sgd_train(
    init: &ParamVector,
    loss: LossKind,
    data: &LabeledDataset,
    cfg: &SgdConfig,
    exec: Execution,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let out = run_loop(Loop {
        init,
        loss,
        data,
        epochs: cfg.epochs,
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        clip: None,
        noise_std: 0.0,
        sigma: None,
        exec,
    })?;
    Ok(TrainOutput {
        params: out.params,
        trace: out.trace,
    })
}

/// Several short probe runs from independent initializations; the one with
/// the lowest full-data loss is trained further with the main config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartConfig {
    pub candidates: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartReport {
    pub probe_losses: Vec<f64>,
    pub chosen: usize,
}

/// Candidate `k` is initialized from `seed + k` and probed with shuffle seed
/// `seed + k`; the main phase uses `cfg.seed`. The returned trace is the
/// winner's probe trace followed by the main phase.
pub fn sgd_train_restarts(
    layout: &std::sync::Arc<crate::model::ModelSpec>,
    loss: LossKind,
    data: &LabeledDataset,
    restarts: &RestartConfig,
    cfg: &SgdConfig,
    exec: Execution,
) -> Result<(TrainOutput, RestartReport)> {
    if restarts.candidates == 0 {
        return Err(Error::InvalidInputs("need at least one restart candidate".into()));
    }
    let mut best: Option<(f64, usize, TrainOutput)> = None;
    let mut probe_losses = Vec::with_capacity(restarts.candidates);
    for k in 0..restarts.candidates {
        let seed = cfg.seed.wrapping_add(k as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = ParamVector::init_uniform(layout.clone(), &mut rng);
        let out = if restarts.probe_epochs == 0 {
            TrainOutput {
                params: init,
                trace: Vec::new(),
            }
        } else {
            let probe = SgdConfig {
                epochs: restarts.probe_epochs,
                lr: restarts.probe_lr,
                weight_decay: 0.0,
                batch_size: cfg.batch_size,
                seed,
            };
            sgd_train(&init, loss, data, &probe, exec)?
        };
        let l = crate::curvature::mean_loss(layout, out.params.values(), loss, data)?;
        probe_losses.push(l);
        if best.as_ref().is_none_or(|(bl, _, _)| l < *bl) {
            best = Some((l, k, out));
        }
    }
    let (_, chosen, probe) = best.expect("at least one candidate");
    let main = sgd_train(&probe.params, loss, data, cfg, exec)?;
    let offset_steps = probe.trace.last().map_or(0, |r| r.step);
    let offset_epochs = probe.trace.len();
    let mut trace = probe.trace;
    trace.extend(main.trace.into_iter().map(|mut r| {
        r.step += offset_steps;
        r.epoch += offset_epochs;
        r
    }));
    Ok((
        TrainOutput {
            params: main.params,
            trace,
        },
        RestartReport { probe_losses, chosen },
    ))
}

/// Noise multiplier for `T` Gaussian-mechanism steps at `(ε/T, δ/T)` each.
pub fn naive_composition_sigma(epsilon: f64, delta: f64, steps: usize) -> Result<f64> {
    let t = steps as f64;
    let sigma = (2.0 * (1.25 * t / delta).ln()).sqrt() * t / epsilon;
    if sigma.is_finite() {
        Ok(sigma)
    } else {
        Err(Error::BudgetInfeasible(format!(
            "sigma = {sigma} for eps={epsilon}, delta={delta}, T={steps}"
        )))
    }
}

/// DP-SGD with per-example clipping and Gaussian noise `σC` on the summed
/// gradient, accounted by naive sequential composition.
pub fn dpsgd_train(
    init: &ParamVector,
    loss: LossKind,
    data: &LabeledDataset,
    cfg: &DpsgdConfig,
    exec: Execution,
) -> Result<DpTrainOutput> {
    if !(cfg.epsilon > 0.0) || !(cfg.delta > 0.0 && cfg.delta < 1.0) || !(cfg.clip_norm > 0.0) {
        return Err(Error::InvalidInputs(
            "need epsilon > 0, delta in (0,1), clip > 0".into(),
        ));
    }
    SgdConfig {
        epochs: cfg.epochs,
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    }
    .validate()?;
    let steps = cfg.epochs * data.len().div_ceil(cfg.batch_size);
    let sigma = match cfg.sigma_override {
        Some(s) => s,
        None => naive_composition_sigma(cfg.epsilon, cfg.delta, steps)?,
    };
    let out = run_loop(Loop {
        init,
        loss,
        data,
        epochs: cfg.epochs,
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        clip: Some(cfg.clip_norm),
        noise_std: sigma * cfg.clip_norm,
        sigma: Some(sigma),
        exec,
    })?;
    Ok(DpTrainOutput {
        params: out.params,
        trace: out.trace,
        accounting: DpAccounting {
            epsilon: cfg.epsilon,
            delta: cfg.delta,
            steps,
            sigma,
            clip_norm: cfg.clip_norm,
            method: DPSGD_ACCOUNTING.to_string(),
            clipped: out.clipped,
            examples: out.examples,
        },
    })
}

/// Largest per-example gradient norm after clipping, over one pass of `data`.
pub fn max_clipped_norm(params: &ParamVector, loss: LossKind, data: &LabeledDataset, clip: f64) -> Result<f64> {
    let all: Vec<usize> = (0..data.len()).collect();
    Ok(batch_gradient(params, loss, data, &all, Some(clip), Execution::Sequential)?.max_norm)
}
