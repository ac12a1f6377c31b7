//! From-scratch MLP and LSTM classifiers over flattened sample windows,
//! with analytic gradients and an Adam optimizer.
//!
//! Parameters of a model live in one flat `Vec<f64>`; [`ParamBlock`]s
//! name the slices. Weight matrices are stored input-major (`[in, out]`),
//! so the inner loops of both passes run over contiguous output rows.

mod adam;
mod checkpoint;
mod lstm;
mod mlp;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState, AdamStep};
pub use checkpoint::Checkpoint;
pub use lstm::LstmConfig;
pub use mlp::MlpConfig;

use crate::error::{Error, Result};
use crate::losses::LossFn;
use crate::par::{self, Parallelism};
use crate::rng::{self, Stream};

/// Samples per gradient-accumulation chunk. Chunk sums are reduced in
/// order, so the batch gradient does not depend on the execution mode.
pub const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Lstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 2] = [ModelKind::Mlp, ModelKind::Lstm];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mlp => "mlp",
            ModelKind::Lstm => "lstm",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ModelKind::Mlp),
            "lstm" => Ok(ModelKind::Lstm),
            _ => Err(Error::Config(format!("unknown model `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Mlp(MlpConfig),
    Lstm(LstmConfig),
}

impl Architecture {
    pub fn kind(&self) -> ModelKind {
        match self {
            Architecture::Mlp(_) => ModelKind::Mlp,
            Architecture::Lstm(_) => ModelKind::Lstm,
        }
    }

    pub fn input_len(&self) -> usize {
        match self {
            Architecture::Mlp(c) => c.structure[0],
            Architecture::Lstm(c) => c.seq_len * c.input_dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Architecture::Mlp(c) => *c.structure.last().unwrap_or(&0),
            Architecture::Lstm(c) => c.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Mlp(c) => c.validate(),
            Architecture::Lstm(c) => c.validate(),
        }
    }

    /// Named parameter slices in storage order.
    pub fn layout(&self) -> Vec<ParamBlock> {
        let shapes = match self {
            Architecture::Mlp(c) => c.block_shapes(),
            Architecture::Lstm(c) => c.block_shapes(),
        };
        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let b = ParamBlock { name, shape, offset, fan_in };
                offset += b.len();
                b
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(ParamBlock::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Inputs feeding this block; sets the initialization range.
    pub fan_in: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// An architecture and its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub params: Vec<f64>,
}

impl Model {
    /// Uniform initialization in `+-1/sqrt(fan_in)` per block.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::derived(seed, Stream::Init, 0);
        let mut params = Vec::with_capacity(arch.num_params());
        for block in arch.layout() {
            let bound = 1.0 / (block.fan_in.max(1) as f64).sqrt();
            params.extend((0..block.len()).map(|_| rng.random_range(-bound..=bound)));
        }
        Ok(Model { arch, params })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let n = arch.num_params();
        Ok(Model { arch, params: vec![0.0; n] })
    }

    pub fn with_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.num_params() {
            return Err(Error::Shape(format!(
                "architecture needs {} parameters, got {}",
                arch.num_params(),
                params.len()
            )));
        }
        Ok(Model { arch, params })
    }

    pub fn kind(&self) -> ModelKind {
        self.arch.kind()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        let b = self.arch.layout().into_iter().find(|b| b.name == name)?;
        Some(&self.params[b.range()])
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.arch.input_len() {
            return Err(Error::Shape(format!(
                "model expects {} inputs, got {}",
                self.arch.input_len(),
                input.len()
            )));
        }
        if input.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }

    /// Logits for one flattened window.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        Ok(match &self.arch {
            Architecture::Mlp(c) => mlp::forward(c, &self.params, input),
            Architecture::Lstm(c) => lstm::forward(c, &self.params, input),
        })
    }

    /// Index of the largest logit (first on ties).
    pub fn predict(&self, input: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(input)?))
    }

    /// Mean loss and mean parameter gradient over a batch.
    pub fn loss_and_grad(
        &self,
        inputs: &[&[f64]],
        targets: &[usize],
        loss: &LossFn,
        mode: Parallelism,
    ) -> Result<(f64, Vec<f64>)> {
        if inputs.len() != targets.len() {
            return Err(Error::Shape(format!("{} inputs but {} targets", inputs.len(), targets.len())));
        }
        if inputs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let classes = self.arch.num_classes();
        for (x, &y) in inputs.iter().zip(targets) {
            self.check_input(x)?;
            if y >= classes {
                return Err(Error::Shape(format!("target {y} out of range for {classes} classes")));
            }
        }
        let pairs: Vec<(&[f64], usize)> = inputs.iter().copied().zip(targets.iter().copied()).collect();
        let n = self.params.len();
        let partials = par::map_chunks(mode, &pairs, GRAD_CHUNK, |chunk| {
            let mut grad = vec![0.0; n];
            let xs: Vec<&[f64]> = chunk.iter().map(|p| p.0).collect();
            let ys: Vec<usize> = chunk.iter().map(|p| p.1).collect();
            let l = match &self.arch {
                Architecture::Mlp(c) => mlp::accumulate(c, &self.params, &xs, &ys, loss, &mut grad),
                Architecture::Lstm(c) => lstm::accumulate(c, &self.params, &xs, &ys, loss, &mut grad),
            };
            (l, grad)
        });
        let mut total = 0.0;
        let mut grad = vec![0.0; n];
        for (l, g) in partials {
            total += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let scale = 1.0 / inputs.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((total * scale, grad))
    }

    /// Mean loss over a batch, forward pass only.
    pub fn batch_loss(&self, inputs: &[&[f64]], targets: &[usize], loss: &LossFn) -> Result<f64> {
        let mut total = 0.0;
        for (x, &y) in inputs.iter().zip(targets) {
            total += loss.loss(&self.forward(x)?, y);
        }
        Ok(total / inputs.len().max(1) as f64)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Rescales `grad` so its L2 norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// `y += a * x`
#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
