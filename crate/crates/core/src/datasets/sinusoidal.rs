use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Sample, TaskKind};

/// Input dimension of the sinusoidal task; only the first two coordinates
/// carry signal.
pub const SINUSOID_INPUT_DIM: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinusoidalParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Evaluate the target on `1.1·(x_i + 0.1)` for `i = 1, 2`.
    pub shift: bool,
    /// Also hand the shifted coordinates to the model instead of the raw `x`.
    #[serde(default)]
    pub shift_model_inputs: bool,
    pub n: usize,
    pub seed: u64,
}

impl SinusoidalParams {
    pub fn pretrain(n: usize, seed: u64) -> Self {
        Self {
            a: 1.0,
            b: 0.3,
            c: 0.25,
            shift: false,
            shift_model_inputs: false,
            n,
            seed,
        }
    }

    pub fn finetune(n: usize, seed: u64) -> Self {
        Self {
            a: 0.9,
            b: 0.35,
            c: 0.25,
            shift: true,
            shift_model_inputs: false,
            n,
            seed,
        }
    }

    /// Coordinates 1 and 2 after the fine-tuning affine map (identity when
    /// `shift` is off).
    pub fn shifted(&self, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        if self.shift {
            v[0] = 1.1 * (v[0] + 0.1);
            v[1] = 1.1 * (v[1] + 0.1);
        }
        v
    }

    pub fn target(&self, x: &[f64]) -> f64 {
        let v = self.shifted(x);
        self.a * (2.0 * std::f64::consts::PI * v[0]).sin() + self.b * v[1] + self.c
    }
}

/// `x ~ N(0, I₅)`, `y = a·sin(2πx₁) + b·x₂ + c` (on the shifted coordinates
/// when `shift` is set). The model sees the unshifted `x` unless
/// `shift_model_inputs` is set.
pub fn sinusoidal_generate(p: &SinusoidalParams) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let samples = (0..p.n)
        .map(|_| {
            let x: Vec<f64> = (0..SINUSOID_INPUT_DIM)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let y = vec![p.target(&x)];
            let x = if p.shift_model_inputs { p.shifted(&x) } else { x };
            Sample { x, y }
        })
        .collect();
    LabeledDataset {
        task: TaskKind::Regression,
        input_dim: SINUSOID_INPUT_DIM,
        output_dim: 1,
        samples,
    }
}
