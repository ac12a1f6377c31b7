use serde::{Deserialize, Serialize};

use super::{axpy, dot};
use crate::error::{Error, Result};
use crate::losses::LossFn;

/// Fully connected network with LeakyReLU activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Layer widths including input and output, e.g. `[780, 64, 64, 3]`.
    pub structure: Vec<usize>,
    pub negative_slope: f64,
    /// Apply LeakyReLU to the output layer as well. It is monotone, so the
    /// predicted class is unaffected; only the logits fed to softmax change.
    pub output_activation: bool,
}

impl MlpConfig {
    pub fn new(structure: Vec<usize>) -> Self {
        MlpConfig {
            structure,
            negative_slope: 0.01,
            output_activation: true,
        }
    }

    /// `[780, 64, 64, 3]`.
    pub fn standard() -> Self {
        Self::new(vec![crate::WINDOW_LEN * crate::FEATURE_DIM, 64, 64, crate::NUM_CLASSES])
    }

    pub(super) fn validate(&self) -> Result<()> {
        if self.structure.len() < 2 || self.structure.contains(&0) {
            return Err(Error::Shape(format!("bad MLP structure {:?}", self.structure)));
        }
        if !self.negative_slope.is_finite() {
            return Err(Error::Config("negative_slope must be finite".into()));
        }
        Ok(())
    }

    pub(super) fn block_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        for (l, w) in self.structure.windows(2).enumerate() {
            out.push((format!("layer{l}.weight"), vec![w[0], w[1]], w[0]));
            out.push((format!("layer{l}.bias"), vec![w[1]], w[0]));
        }
        out
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 2 < self.structure.len() || self.output_activation
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Per-layer pre-activations and outputs for a chunk of samples, each
/// stored as `batch x width`.
struct Trace {
    acts: Vec<Vec<f64>>,
    pres: Vec<Vec<f64>>,
}

fn run(cfg: &MlpConfig, params: &[f64], inputs: &[&[f64]]) -> Trace {
    let b = inputs.len();
    let mut acts = Vec::with_capacity(cfg.structure.len());
    acts.push(inputs.iter().flat_map(|x| x.iter().copied()).collect::<Vec<f64>>());
    let mut pres = Vec::with_capacity(cfg.structure.len() - 1);
    let mut offset = 0;
    for (l, w) in cfg.structure.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let weight = &params[offset..offset + n_in * n_out];
        let bias = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
        offset += n_in * n_out + n_out;

        let input = &acts[l];
        let mut pre = Vec::with_capacity(b * n_out);
        for _ in 0..b {
            pre.extend_from_slice(bias);
        }
        // input-major loop so each weight row is reused across the chunk
        for i in 0..n_in {
            let row = &weight[i * n_out..(i + 1) * n_out];
            for s in 0..b {
                let x = input[s * n_in + i];
                if x != 0.0 {
                    axpy(x, row, &mut pre[s * n_out..(s + 1) * n_out]);
                }
            }
        }
        let act = if cfg.activated(l) {
            pre.iter().map(|&z| leaky(z, cfg.negative_slope)).collect()
        } else {
            pre.clone()
        };
        pres.push(pre);
        acts.push(act);
    }
    Trace { acts, pres }
}

pub(super) fn forward(cfg: &MlpConfig, params: &[f64], input: &[f64]) -> Vec<f64> {
    run(cfg, params, &[input]).acts.pop().unwrap_or_default()
}

/// Adds the summed gradient of a chunk to `grad`; returns the summed loss.
pub(super) fn accumulate(
    cfg: &MlpConfig,
    params: &[f64],
    inputs: &[&[f64]],
    targets: &[usize],
    loss: &LossFn,
    grad: &mut [f64],
) -> f64 {
    let b = inputs.len();
    let trace = run(cfg, params, inputs);
    let n_layers = cfg.structure.len() - 1;
    let classes = cfg.structure[n_layers];

    let logits = &trace.acts[n_layers];
    let mut delta = vec![0.0; b * classes];
    let mut total = 0.0;
    for s in 0..b {
        total += loss.loss_and_grad(
            &logits[s * classes..(s + 1) * classes],
            targets[s],
            &mut delta[s * classes..(s + 1) * classes],
        );
    }

    let mut offsets = Vec::with_capacity(n_layers);
    let mut off = 0;
    for w in cfg.structure.windows(2) {
        offsets.push(off);
        off += w[0] * w[1] + w[1];
    }

    for l in (0..n_layers).rev() {
        let (n_in, n_out) = (cfg.structure[l], cfg.structure[l + 1]);
        if cfg.activated(l) {
            for (d, &z) in delta.iter_mut().zip(&trace.pres[l]) {
                if z < 0.0 {
                    *d *= cfg.negative_slope;
                }
            }
        }
        let w_off = offsets[l];
        let b_off = w_off + n_in * n_out;
        {
            let gb = &mut grad[b_off..b_off + n_out];
            for s in 0..b {
                gb.iter_mut().zip(&delta[s * n_out..(s + 1) * n_out]).for_each(|(g, d)| *g += d);
            }
        }
        let input = &trace.acts[l];
        {
            let gw = &mut grad[w_off..w_off + n_in * n_out];
            for i in 0..n_in {
                let row = &mut gw[i * n_out..(i + 1) * n_out];
                for s in 0..b {
                    let x = input[s * n_in + i];
                    if x != 0.0 {
                        axpy(x, &delta[s * n_out..(s + 1) * n_out], row);
                    }
                }
            }
        }
        if l > 0 {
            let weight = &params[w_off..w_off + n_in * n_out];
            let mut prev = vec![0.0; b * n_in];
            for s in 0..b {
                let d = &delta[s * n_out..(s + 1) * n_out];
                for i in 0..n_in {
                    prev[s * n_in + i] = dot(&weight[i * n_out..(i + 1) * n_out], d);
                }
            }
            delta = prev;
        }
    }
    total
}
