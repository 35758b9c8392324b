//! `pretrain` and `finetune`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use quadmech::baselines::{
    dpsgd_train, sgd_train, sgd_train_restarts, write_trace_csv, DpAccounting, DpsgdConfig, RestartReport, SgdConfig,
};
use quadmech::curvature::{dataset_curvature, mean_loss, CurvatureBundle, DENSE_HESSIAN_CAP};
use quadmech::loss::LossKind;
use quadmech::mechanism::{run_mechanism, stiefel_sample, utility_gap, MechanismConfig, RunDiagnostics};
use quadmech::model::{ModelSpec, ParamVector};
use quadmech::par::Execution;
use quadmech::privacy::{empirical_jacobian_bound, raw_error_bound, sensitivity, SensitivityInputs, SensitivityReport};
use quadmech::stats::{mean, std_dev};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map};

use crate::config::RunConfig;
use crate::data::{load_task, streams, sub_seed, Metric, TaskData};
use crate::error::{read_input, CliError, Result};
use crate::manifest::{input_hash, record, write_json, Entry};
use crate::results::{ResultRow, ResultWriter, METHOD_DPSGD, METHOD_MECHANISM, METHOD_SGD, METHOD_ZERO_SHOT};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRACE_FILE: &str = "pretrain_trace.csv";
pub const PRETRAIN_SUMMARY_FILE: &str = "pretrain_summary.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

pub const THREADS_ENV: &str = "QUADMECH_THREADS";

/// Pool sized by `QUADMECH_THREADS` (all cores when unset).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n =
        match std::env::var(THREADS_ENV) {
            Ok(v) => v.trim().parse::<usize>().ok().filter(|n| *n >= 1).ok_or_else(|| {
                CliError::ConfigInvalid(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))
            })?,
            Err(_) => 0,
        };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| CliError::ConfigInvalid(format!("thread pool: {e}")))
}

fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

fn create_file(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn data_inputs(cfg: &RunConfig) -> Result<Vec<(String, Vec<u8>)>> {
    Ok(cfg
        .read_data_files()?
        .into_iter()
        .map(|(p, b)| (p.display().to_string(), b))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub train_loss: f64,
    /// Loss of the pretrained model on the fine-tune set.
    pub zero_shot_loss: f64,
    pub zero_shot_test_metric: f64,
    pub metric: Metric,
    pub p: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restarts: Option<RestartReport>,
}

pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<PretrainSummary> {
    create_dir(out)?;
    let data = load_task(cfg)?;
    let pool = thread_pool()?;
    pool.install(|| pretrain_in(cfg, out, &data))
}

fn pretrain_in(cfg: &RunConfig, out: &Path, data: &TaskData) -> Result<PretrainSummary> {
    let spec = Arc::new(cfg.model.clone());
    let loss = cfg.loss();
    let exec = Execution::Parallel;
    let sgd = SgdConfig {
        seed: cfg.seed.wrapping_add(cfg.pretrain.seed),
        ..cfg.pretrain.clone()
    };
    let (trained, restarts) = match &cfg.restarts {
        Some(r) => {
            let (t, rep) = sgd_train_restarts(&spec, loss, &data.pretrain, r, &sgd, exec)?;
            (t, Some(rep))
        }
        None => {
            let init = ParamVector::init_uniform(spec.clone(), &mut ChaCha8Rng::seed_from_u64(sgd.seed));
            (sgd_train(&init, loss, &data.pretrain, &sgd, exec)?, None)
        }
    };
    let params = trained.params;
    let summary = PretrainSummary {
        train_loss: mean_loss(&spec, params.values(), loss, &data.pretrain)?,
        zero_shot_loss: mean_loss(&spec, params.values(), loss, &data.finetune)?,
        zero_shot_test_metric: data
            .metric
            .evaluate(&spec, std::slice::from_ref(&params), &data.test, exec)?[0],
        metric: data.metric,
        p: spec.param_count(),
        seed: cfg.seed,
        restarts,
    };

    let ckpt = out.join(CHECKPOINT_FILE);
    params.write_checkpoint(create_file(&ckpt)?, cfg.seed)?;
    let trace = out.join(TRACE_FILE);
    write_trace_csv(&trained.trace, create_file(&trace)?)?;
    let summary_path = out.join(PRETRAIN_SUMMARY_FILE);
    write_json(&summary_path, &summary)?;

    let inputs = data_inputs(cfg)?;
    record(
        out,
        cfg,
        Entry {
            command: "pretrain",
            input_hash: input_hash(cfg, &inputs)?,
            inputs: inputs.into_iter().map(|(n, _)| n).collect(),
            artifacts: vec![ckpt, trace, summary_path],
            extra: Map::new(),
        },
    )?;
    Ok(summary)
}

/// Diagnostics of one sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub epsilon: f64,
    pub radius: f64,
    pub p_tilde: usize,
    pub seed: u64,
    pub projection_seed: Option<u64>,
    pub delta_u: f64,
    pub utility_gap: Option<f64>,
    pub run: RunDiagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneDiagnostics {
    pub jac_bound: f64,
    pub err_bound: f64,
    pub n_finetune: usize,
    pub sensitivity: Vec<SensitivityReport>,
    pub cells: Vec<CellReport>,
    pub dpsgd: Vec<DpAccounting>,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutput {
    pub rows: Vec<ResultRow>,
    pub diagnostics: FinetuneDiagnostics,
}

struct Subspace {
    dim: usize,
    seed: Option<u64>,
    bundle: CurvatureBundle,
    gap: Option<f64>,
}

struct Cell {
    index: usize,
    space: usize,
    radius: usize,
    epsilon: f64,
}

/// Runs the (p̃, R, ε) sweep plus baselines and writes `results.csv`,
/// `diagnostics.json` and the manifest entry. Rows of finished cells are on
/// disk before any error is returned.
pub fn finetune(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<FinetuneOutput> {
    create_dir(out)?;
    let data = load_task(cfg)?;
    let ckpt_bytes = read_input(checkpoint)?;
    let (anchor, _) = ParamVector::read_checkpoint(&ckpt_bytes[..])?;
    if anchor.spec() != &cfg.model {
        return Err(CliError::ConfigInvalid(format!(
            "checkpoint {} was written for a different model layout",
            checkpoint.display()
        )));
    }
    let pool = thread_pool()?;
    let mut inputs = data_inputs(cfg)?;
    inputs.push((checkpoint.display().to_string(), ckpt_bytes));
    pool.install(|| finetune_in(cfg, out, &data, &anchor, inputs))
}

fn finetune_in(
    cfg: &RunConfig,
    out: &Path,
    data: &TaskData,
    anchor: &ParamVector,
    inputs: Vec<(String, Vec<u8>)>,
) -> Result<FinetuneOutput> {
    let spec = anchor.layout().clone();
    let p = spec.param_count();
    let loss = cfg.loss();
    let m = &cfg.mechanism;
    let exec = Execution::Parallel;
    let ft = &data.finetune;

    let full = if p <= DENSE_HESSIAN_CAP {
        Some(dataset_curvature(&spec, anchor, loss, ft, m.lambda, None, exec)?)
    } else {
        None
    };
    let jac_bound = empirical_jacobian_bound(&spec, anchor.values(), ft, m.inflation, exec)?;
    let err_bound = match loss {
        LossKind::MeanSquared => raw_error_bound(&spec, anchor.values(), ft, m.inflation, exec)?,
        LossKind::CrossEntropy => 0.0,
    };
    let sens = m
        .radii
        .iter()
        .map(|&radius| {
            sensitivity(&SensitivityInputs {
                loss,
                m: spec.output_dim,
                n_min: ft.len(),
                radius,
                jac_bound,
                err_bound,
                inflation: m.inflation,
            })
        })
        .collect::<quadmech::Result<Vec<_>>>()?;

    let dims: Vec<usize> = if m.p_tildes.is_empty() {
        vec![p]
    } else {
        m.p_tildes.iter().map(|&k| k.min(p)).collect()
    };
    let spaces = dims
        .iter()
        .map(|&k| -> Result<Subspace> {
            if k == p {
                let bundle = match &full {
                    Some(f) => f.clone(),
                    None => {
                        return Err(quadmech::Error::DimensionCap {
                            dim: p,
                            cap: DENSE_HESSIAN_CAP,
                        }
                        .into())
                    }
                };
                return Ok(Subspace {
                    dim: k,
                    seed: None,
                    bundle,
                    gap: None,
                });
            }
            let seed = sub_seed(cfg.seed, streams::PROJECTION + k as u64);
            let a = stiefel_sample(p, k, seed)?.a;
            let (bundle, gap) = match &full {
                Some(f) => {
                    let b = f.project(a)?;
                    // The full H_λ is singular when λ = 0 and some units are dead.
                    let gap = match utility_gap(f, &b) {
                        Ok(g) => Some(g),
                        Err(quadmech::Error::NotPositiveDefinite { .. }) => None,
                        Err(e) => return Err(e.into()),
                    };
                    (b, gap)
                }
                None => (
                    dataset_curvature(&spec, anchor, loss, ft, m.lambda, Some(a), exec)?,
                    None,
                ),
            };
            Ok(Subspace {
                dim: k,
                seed: Some(seed),
                bundle,
                gap,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    for space in 0..spaces.len() {
        for radius in 0..m.radii.len() {
            for &epsilon in &m.epsilons {
                cells.push(Cell {
                    index: cells.len(),
                    space,
                    radius,
                    epsilon,
                });
            }
        }
    }

    let n = cfg.eval.n_candidate_samples;
    let run_cell = |c: &Cell| -> Result<(ResultRow, CellReport)> {
        let s = &spaces[c.space];
        let rep = &sens[c.radius];
        let seed = sub_seed(cfg.seed, streams::CELL + c.index as u64);
        let mc = MechanismConfig {
            epsilon: c.epsilon,
            delta_u: rep.delta_u,
            radius: m.radii[c.radius],
            sampler: m.sampler,
            gibbs_burn_in: m.gibbs_burn_in,
            gibbs_thin: m.gibbs_thin,
            max_rejection_proposals: m.max_rejection_proposals,
            seed,
        };
        let (thetas, run) = run_mechanism(&s.bundle, &mc, n, Some(rep))?;
        let vals = data.metric.evaluate(&spec, &thetas, &data.test, exec)?;
        let row = ResultRow {
            method: METHOD_MECHANISM.into(),
            epsilon: c.epsilon,
            radius: mc.radius,
            p_tilde: s.dim,
            metric_name: data.metric,
            mean: mean(&vals),
            std: std_dev(&vals),
            n_models: n,
            seed: cfg.seed,
        };
        let report = CellReport {
            epsilon: c.epsilon,
            radius: mc.radius,
            p_tilde: s.dim,
            seed,
            projection_seed: s.seed,
            delta_u: rep.delta_u,
            utility_gap: s.gap,
            run,
        };
        Ok((row, report))
    };

    let results_path = out.join(RESULTS_FILE);
    let diag_path = out.join(DIAGNOSTICS_FILE);
    let mut writer = ResultWriter::new(create_file(&results_path)?)?;
    let mut diagnostics = FinetuneDiagnostics {
        jac_bound,
        err_bound,
        n_finetune: ft.len(),
        sensitivity: sens.clone(),
        cells: Vec::new(),
        dpsgd: Vec::new(),
    };
    let mut rows = Vec::new();

    let wave = rayon::current_num_threads().max(1);
    for chunk in cells.chunks(wave) {
        let done: Vec<Result<(ResultRow, CellReport)>> = chunk.par_iter().map(run_cell).collect();
        let mut batch = Vec::new();
        let mut failure = None;
        for r in done {
            match r {
                Ok((row, rep)) if failure.is_none() => {
                    batch.push(row);
                    diagnostics.cells.push(rep);
                }
                Ok(_) => {}
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        writer.write_rows(&batch)?;
        rows.extend(batch);
        if let Some(e) = failure {
            write_json(&diag_path, &diagnostics)?;
            return Err(e);
        }
    }

    let baseline_rows = baselines(cfg, data, anchor, &spec, &mut diagnostics)?;
    writer.write_rows(&baseline_rows)?;
    rows.extend(baseline_rows);
    drop(writer);
    write_json(&diag_path, &diagnostics)?;

    let mut extra = Map::new();
    extra.insert("sensitivity".into(), serde_json::to_value(&diagnostics.sensitivity)?);
    extra.insert("diagnostics".into(), serde_json::to_value(&diagnostics.cells)?);
    extra.insert("rows".into(), json!(rows.len()));
    record(
        out,
        cfg,
        Entry {
            command: "finetune",
            input_hash: input_hash(cfg, &inputs)?,
            inputs: inputs.into_iter().map(|(n, _)| n).collect(),
            artifacts: vec![results_path, diag_path],
            extra,
        },
    )?;
    Ok(FinetuneOutput { rows, diagnostics })
}

fn baselines(
    cfg: &RunConfig,
    data: &TaskData,
    anchor: &ParamVector,
    spec: &Arc<ModelSpec>,
    diagnostics: &mut FinetuneDiagnostics,
) -> Result<Vec<ResultRow>> {
    let exec = Execution::Parallel;
    let loss = cfg.loss();
    let p = spec.param_count();
    let runs = cfg.baselines.runs;
    let row = |method: &str, epsilon: f64, radius: f64, vals: &[f64]| ResultRow {
        method: method.into(),
        epsilon,
        radius,
        p_tilde: p,
        metric_name: data.metric,
        mean: mean(vals),
        std: std_dev(vals),
        n_models: vals.len(),
        seed: cfg.seed,
    };
    let zero = data
        .metric
        .evaluate(spec, std::slice::from_ref(anchor), &data.test, exec)?;
    let mut rows = vec![row(METHOD_ZERO_SHOT, f64::INFINITY, 0.0, &zero)];

    if let Some(sgd) = &cfg.baselines.sgd {
        let models = (0..runs)
            .into_par_iter()
            .map(|r| {
                let c = SgdConfig {
                    seed: cfg.seed.wrapping_add(sgd.seed).wrapping_add(r as u64),
                    ..sgd.clone()
                };
                Ok(sgd_train(anchor, loss, &data.finetune, &c, exec)?.params)
            })
            .collect::<Result<Vec<_>>>()?;
        let vals = data.metric.evaluate(spec, &models, &data.test, exec)?;
        rows.push(row(METHOD_SGD, f64::INFINITY, f64::INFINITY, &vals));
    }

    if let Some(d) = &cfg.baselines.dpsgd {
        let jobs: Vec<(f64, usize)> = cfg
            .mechanism
            .epsilons
            .iter()
            .flat_map(|&e| (0..runs).map(move |r| (e, r)))
            .collect();
        let trained = jobs
            .par_iter()
            .map(|&(epsilon, r)| {
                let c = DpsgdConfig {
                    epsilon,
                    delta: d.delta,
                    clip_norm: d.clip_norm,
                    epochs: d.epochs,
                    lr: d.lr,
                    weight_decay: d.weight_decay,
                    batch_size: d.batch_size,
                    seed: cfg.seed.wrapping_add(d.seed).wrapping_add(r as u64),
                    sigma_override: None,
                };
                Ok(dpsgd_train(anchor, loss, &data.finetune, &c, exec)?)
            })
            .collect::<Result<Vec<_>>>()?;
        for (k, &epsilon) in cfg.mechanism.epsilons.iter().enumerate() {
            let outs = &trained[k * runs..(k + 1) * runs];
            let models: Vec<ParamVector> = outs.iter().map(|o| o.params.clone()).collect();
            let vals = data.metric.evaluate(spec, &models, &data.test, exec)?;
            rows.push(row(METHOD_DPSGD, epsilon, f64::INFINITY, &vals));
            diagnostics.dpsgd.push(outs[0].accounting.clone());
        }
    }
    Ok(rows)
}

/// Default checkpoint location for a run directory.
pub fn default_checkpoint(out: &Path) -> PathBuf {
    out.join(CHECKPOINT_FILE)
}
