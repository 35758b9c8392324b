//! Fully connected models with exact reverse- and forward-mode derivatives
//! against a flat parameter vector.
//!
//! Parameter packing is layer-major; within a layer the weight matrix
//! (`out × in`, row-major) precedes the bias vector. Hidden layers apply the
//! activation, the output layer is affine.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_len, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation. ReLU uses 0 at exactly 0.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Hidden layer widths; empty for a linear model.
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
    /// Offset of the weight block in the flat vector.
    offset: usize,
}

impl LayerShape {
    fn bias_offset(&self) -> usize {
        self.offset + self.fan_in * self.fan_out
    }
}

impl ModelSpec {
    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden: Vec::new(),
            activation: Activation::Identity,
        }
    }

    pub fn mlp(input_dim: usize, hidden: &[usize], output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden: hidden.to_vec(),
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidInputs(format!("model dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    fn width(&self, i: usize) -> usize {
        if i == 0 {
            self.input_dim
        } else if i <= self.hidden.len() {
            self.hidden[i - 1]
        } else {
            self.output_dim
        }
    }

    fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// Shape of layer `li`, computed without allocating.
    fn layer(&self, li: usize) -> LayerShape {
        let mut offset = 0;
        for k in 0..li {
            offset += (self.width(k) + 1) * self.width(k + 1);
        }
        LayerShape {
            fan_in: self.width(li),
            fan_out: self.width(li + 1),
            offset,
        }
    }

    fn layers(&self) -> Vec<LayerShape> {
        (0..self.n_layers()).map(|li| self.layer(li)).collect()
    }

    pub fn param_count(&self) -> usize {
        (0..self.n_layers())
            .map(|k| (self.width(k) + 1) * self.width(k + 1))
            .sum()
    }

    pub fn is_linear(&self) -> bool {
        self.hidden.is_empty()
    }
}

/// Flat parameter vector tied to the layout of a [`ModelSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: Arc<ModelSpec>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
    p: usize,
    seed: u64,
}

impl ParamVector {
    pub fn new(layout: Arc<ModelSpec>, values: Vec<f64>) -> Result<Self> {
        check_len(layout.param_count(), values.len())?;
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Arc<ModelSpec>) -> Self {
        let p = layout.param_count();
        Self {
            layout,
            values: vec![0.0; p],
        }
    }

    /// PyTorch-style default initialization: `U(-1/√fan_in, 1/√fan_in)` for
    /// weights and biases.
    pub fn init_uniform(layout: Arc<ModelSpec>, rng: &mut impl rand::Rng) -> Self {
        let mut values = vec![0.0; layout.param_count()];
        for l in layout.layers() {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            let end = l.bias_offset() + l.fan_out;
            for v in &mut values[l.offset..end] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Self { layout, values }
    }

    pub fn layout(&self) -> &Arc<ModelSpec> {
        &self.layout
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.layout.clone(), values)
    }

    /// Splits into per-layer `(weights out×in, bias)` blocks.
    pub fn unpack(&self) -> Vec<(Matrix, Vec<f64>)> {
        self.layout
            .layers()
            .iter()
            .map(|l| {
                let w = Matrix::from_vec(l.fan_out, l.fan_in, self.values[l.offset..l.bias_offset()].to_vec())
                    .expect("layout");
                let b = self.values[l.bias_offset()..l.bias_offset() + l.fan_out].to_vec();
                (w, b)
            })
            .collect()
    }

    pub fn pack(layout: Arc<ModelSpec>, blocks: &[(Matrix, Vec<f64>)]) -> Result<Self> {
        let mut values = Vec::with_capacity(layout.param_count());
        for (w, b) in blocks {
            values.extend_from_slice(w.as_slice());
            values.extend_from_slice(b);
        }
        Self::new(layout, values)
    }

    /// Writes a one-line JSON header `{spec, p, seed}` followed by the
    /// parameters as little-endian `f64`.
    pub fn write_checkpoint(&self, mut w: impl Write, seed: u64) -> Result<()> {
        let header = CheckpointHeader {
            spec: (*self.layout).clone(),
            p: self.values.len(),
            seed,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Returns the parameters and the seed recorded in the header.
    pub fn read_checkpoint(mut r: impl Read) -> Result<(Self, u64)> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse("checkpoint header missing".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
        header.spec.validate()?;
        check_len(header.spec.param_count(), header.p)?;
        let body = &bytes[nl + 1..];
        if body.len() != header.p * 8 {
            return Err(Error::TruncatedFile(format!(
                "checkpoint body has {} bytes, expected {}",
                body.len(),
                header.p * 8
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((Self::new(Arc::new(header.spec), values)?, header.seed))
    }
}

/// Activations recorded by a forward pass, reusable across calls.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    /// `pre[l]` = pre-activation of layer `l`.
    pre: Vec<Vec<f64>>,
    /// `post[0]` = input, `post[l+1]` = activation of layer `l`.
    post: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("forward ran")
    }

    /// Smallest `|pre-activation|` over hidden units; used to keep ReLU
    /// derivative checks away from kinks.
    pub fn min_hidden_preactivation(&self) -> f64 {
        let n = self.pre.len();
        self.pre[..n.saturating_sub(1)]
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}

impl ModelSpec {
    fn check(&self, theta: &[f64], x: &[f64]) -> Result<()> {
        check_len(self.param_count(), theta.len())?;
        check_len(self.input_dim, x.len())
    }

    /// Forward pass recording activations in `tape`.
    pub fn forward_tape(&self, theta: &[f64], x: &[f64], tape: &mut Tape) -> Result<()> {
        self.check(theta, x)?;
        let n_layers = self.n_layers();
        tape.pre.resize(n_layers, Vec::new());
        tape.post.resize(n_layers + 1, Vec::new());
        tape.post[0].clear();
        tape.post[0].extend_from_slice(x);
        let last = n_layers - 1;
        for li in 0..n_layers {
            let l = self.layer(li);
            let (before, after) = tape.post.split_at_mut(li + 1);
            let input = &before[li];
            let z = &mut tape.pre[li];
            z.clear();
            let w = &theta[l.offset..l.bias_offset()];
            let b = &theta[l.bias_offset()..l.bias_offset() + l.fan_out];
            for o in 0..l.fan_out {
                let row = &w[o * l.fan_in..(o + 1) * l.fan_in];
                let mut s = b[o];
                for (wi, xi) in row.iter().zip(input.iter()) {
                    s += wi * xi;
                }
                z.push(s);
            }
            let a = &mut after[0];
            a.clear();
            if li == last {
                a.extend_from_slice(z);
            } else {
                a.extend(z.iter().map(|&v| self.activation.apply(v)));
            }
        }
        Ok(())
    }

    pub fn forward(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::default();
        self.forward_tape(theta, x, &mut tape)?;
        Ok(tape.output().to_vec())
    }

    /// Accumulates `scale · Jᵀ w` into `grad` using a recorded tape.
    pub fn vjp_tape(&self, theta: &[f64], tape: &Tape, w: &[f64], scale: f64, grad: &mut [f64]) -> Result<()> {
        check_len(self.output_dim, w.len())?;
        check_len(self.param_count(), grad.len())?;
        let mut delta: Vec<f64> = w.iter().map(|v| v * scale).collect();
        let mut next: Vec<f64> = Vec::with_capacity(self.hidden.iter().copied().max().unwrap_or(0).max(self.input_dim));
        for li in (0..self.n_layers()).rev() {
            let l = self.layer(li);
            let input = &tape.post[li][..l.fan_in];
            let (gw, rest) = grad[l.offset..].split_at_mut(l.fan_in * l.fan_out);
            let gb = &mut rest[..l.fan_out];
            for ((grow, &d), b) in gw.chunks_exact_mut(l.fan_in).zip(&delta).zip(gb.iter_mut()) {
                *b += d;
                for (g, xi) in grow.iter_mut().zip(input) {
                    *g += d * xi;
                }
            }
            if li > 0 {
                let wmat = &theta[l.offset..l.bias_offset()];
                let prev_pre = &tape.pre[li - 1];
                next.clear();
                next.resize(l.fan_in, 0.0);
                for (row, &d) in wmat.chunks_exact(l.fan_in).zip(&delta) {
                    for (n, wi) in next.iter_mut().zip(row) {
                        *n += d * wi;
                    }
                }
                for (n, z) in next.iter_mut().zip(prev_pre) {
                    *n *= self.activation.derivative(*z);
                }
                std::mem::swap(&mut delta, &mut next);
            }
        }
        Ok(())
    }

    /// `J v` from a recorded tape (forward-mode tangent sweep).
    pub fn jvp_tape(&self, theta: &[f64], tape: &Tape, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.param_count(), v.len())?;
        let last = self.n_layers() - 1;
        let mut tangent = vec![0.0; self.input_dim];
        for li in 0..=last {
            let l = self.layer(li);
            let input = &tape.post[li];
            let wmat = &theta[l.offset..l.bias_offset()];
            let dw = &v[l.offset..l.bias_offset()];
            let db = &v[l.bias_offset()..l.bias_offset() + l.fan_out];
            let mut dz = Vec::with_capacity(l.fan_out);
            for o in 0..l.fan_out {
                let r = o * l.fan_in..(o + 1) * l.fan_in;
                let mut s = db[o];
                for ((dwi, wi), (xi, ti)) in dw[r.clone()].iter().zip(&wmat[r]).zip(input.iter().zip(&tangent)) {
                    s += dwi * xi + wi * ti;
                }
                dz.push(s);
            }
            if li != last {
                for (d, z) in dz.iter_mut().zip(&tape.pre[li]) {
                    *d *= self.activation.derivative(*z);
                }
            }
            tangent = dz;
        }
        Ok(tangent)
    }

    pub fn jvp(&self, theta: &[f64], x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::default();
        self.forward_tape(theta, x, &mut tape)?;
        self.jvp_tape(theta, &tape, v)
    }

    pub fn vjp(&self, theta: &[f64], x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::default();
        self.forward_tape(theta, x, &mut tape)?;
        let mut g = vec![0.0; self.param_count()];
        self.vjp_tape(theta, &tape, w, 1.0, &mut g)?;
        Ok(g)
    }

    /// `m × p` Jacobian from a tape, one reverse sweep per output.
    pub fn jacobian_tape(&self, theta: &[f64], tape: &Tape) -> Result<Matrix> {
        let m = self.output_dim;
        let p = self.param_count();
        let mut jac = Matrix::zeros(m, p);
        let mut e = vec![0.0; m];
        for k in 0..m {
            e.fill(0.0);
            e[k] = 1.0;
            self.vjp_tape(theta, tape, &e, 1.0, jac.row_mut(k))?;
        }
        Ok(jac)
    }

    pub fn jacobian(&self, theta: &[f64], x: &[f64]) -> Result<Matrix> {
        let mut tape = Tape::default();
        self.forward_tape(theta, x, &mut tape)?;
        self.jacobian_tape(theta, &tape)
    }
}
