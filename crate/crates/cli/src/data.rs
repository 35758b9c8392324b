//! Task datasets and the evaluation metric.

use quadmech::curvature::evaluate_candidates;
use quadmech::datasets::{
    argmax, corrupt_and_normalize, load_tabular_csv, mnist_load_idx, sinusoidal_generate, split_and_subset,
    LabeledDataset, SinusoidalParams, TaskKind,
};
use quadmech::loss::LossKind;
use quadmech::model::{ModelSpec, ParamVector, Tape};
use quadmech::par::{map_indexed, Execution};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TaskConfig};
use crate::error::{CliError, Result};

/// Independent 64-bit seed for stream `stream` of run seed `seed`.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

pub mod streams {
    pub const PRETRAIN_DATA: u64 = 1;
    pub const FINETUNE_DATA: u64 = 2;
    pub const TEST_DATA: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const PROJECTION: u64 = 1 << 20;
    pub const CELL: u64 = 2 << 20;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mse,
    Accuracy,
}

impl Metric {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Regression => Metric::Mse,
            TaskKind::Classification => Metric::Accuracy,
        }
    }

    pub fn higher_is_better(self) -> bool {
        self == Metric::Accuracy
    }

    pub fn evaluate(
        self,
        spec: &ModelSpec,
        candidates: &[ParamVector],
        data: &LabeledDataset,
        exec: Execution,
    ) -> Result<Vec<f64>> {
        match self {
            Metric::Mse => Ok(evaluate_candidates(
                spec,
                candidates,
                LossKind::MeanSquared,
                data,
                exec,
            )?),
            Metric::Accuracy => map_indexed(exec, candidates.len(), |i| accuracy(spec, candidates[i].values(), data))
                .into_iter()
                .collect(),
        }
    }
}

pub fn accuracy(spec: &ModelSpec, theta: &[f64], data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(quadmech::Error::EmptyDataset.into());
    }
    let mut tape = Tape::default();
    let mut hits = 0usize;
    for s in &data.samples {
        spec.forward_tape(theta, &s.x, &mut tape)?;
        if argmax(tape.output()) == argmax(&s.y) {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

pub struct TaskData {
    pub pretrain: LabeledDataset,
    pub finetune: LabeledDataset,
    pub test: LabeledDataset,
    pub metric: Metric,
}

pub fn load_task(cfg: &RunConfig) -> Result<TaskData> {
    cfg.check_data()?;
    let seed = cfg.seed;
    let (pretrain, finetune, test) = match &cfg.task {
        TaskConfig::Sinusoidal {
            pretrain_n,
            finetune_n,
            test_n,
            shift_model_inputs,
        } => {
            let ft = |n, stream| {
                let mut p = SinusoidalParams::finetune(n, sub_seed(seed, stream));
                p.shift_model_inputs = *shift_model_inputs;
                sinusoidal_generate(&p)
            };
            (
                sinusoidal_generate(&SinusoidalParams::pretrain(
                    *pretrain_n,
                    sub_seed(seed, streams::PRETRAIN_DATA),
                )),
                ft(*finetune_n, streams::FINETUNE_DATA),
                ft(*test_n, streams::TEST_DATA),
            )
        }
        TaskConfig::Mnist {
            images,
            labels,
            pretrain_n,
            finetune_n,
            test_n,
            noise_std,
            pixel_mean,
            pixel_std,
        } => {
            let pool = mnist_load_idx(images, labels)?;
            let clean = corrupt_and_normalize(&pool, 0.0, *pixel_mean, *pixel_std, 0)?.to_labeled();
            let noisy = corrupt_and_normalize(
                &pool,
                *noise_std,
                *pixel_mean,
                *pixel_std,
                sub_seed(seed, streams::NOISE),
            )?
            .to_labeled();
            // Both copies share labels, so the same seed gives the same
            // permutation: the clean pretrain subset and the noisy
            // fine-tune/test subsets are disjoint.
            let split = sub_seed(seed, streams::SPLIT);
            let (pre, _) = split_and_subset(&clean, *pretrain_n, split, true)?;
            let (_, rest) = split_and_subset(&noisy, *pretrain_n, split, true)?;
            let (ft, rest) = split_and_subset(&rest, *finetune_n, split.wrapping_add(1), true)?;
            let (te, _) = split_and_subset(&rest, *test_n, split.wrapping_add(2), true)?;
            (pre, ft, te)
        }
        TaskConfig::Tabular {
            pretrain,
            finetune,
            test,
            test_n,
        } => {
            let pre = load_tabular_csv(pretrain)?;
            let ft = load_tabular_csv(finetune)?;
            match test {
                Some(t) => (pre, ft, load_tabular_csv(t)?),
                None => {
                    let (te, ft) = split_and_subset(&ft, *test_n, sub_seed(seed, streams::SPLIT), false)?;
                    (pre, ft, te)
                }
            }
        }
    };
    for (name, d) in [("pretrain", &pretrain), ("finetune", &finetune), ("test", &test)] {
        if d.input_dim != cfg.model.input_dim || d.output_dim != cfg.model.output_dim {
            return Err(CliError::ConfigInvalid(format!(
                "{name} data is {} -> {}, model is {} -> {}",
                d.input_dim, d.output_dim, cfg.model.input_dim, cfg.model.output_dim
            )));
        }
    }
    let metric = Metric::for_task(finetune.task);
    Ok(TaskData {
        pretrain,
        finetune,
        test,
        metric,
    })
}
