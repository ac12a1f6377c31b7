use serde::{Deserialize, Serialize};

use super::{axpy, dot};
use crate::error::{Error, Result};
use crate::losses::LossFn;

/// Stacked LSTM over the window rows followed by a linear projection of the
/// last hidden state.
///
/// Each layer has separate input, recurrent and bias parameters per gate.
/// The gate parameters of a layer are stored side by side in one
/// `[in, 4 * hidden]` block, in the column order input, forget, output,
/// candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub seq_len: usize,
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub classes: usize,
}

impl LstmConfig {
    /// One layer of 64 units over 60 x 13 windows.
    pub fn standard() -> Self {
        LstmConfig {
            seq_len: crate::WINDOW_LEN,
            input_dim: crate::FEATURE_DIM,
            hidden: 64,
            layers: 1,
            classes: crate::NUM_CLASSES,
        }
    }

    pub(super) fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.input_dim == 0 || self.hidden == 0 || self.layers == 0 || self.classes == 0 {
            return Err(Error::Shape(format!("bad LSTM shape {self:?}")));
        }
        Ok(())
    }

    fn layer_input(&self, k: usize) -> usize {
        if k == 0 {
            self.input_dim
        } else {
            self.hidden
        }
    }

    pub(super) fn block_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        let h = self.hidden;
        let mut out = Vec::new();
        for k in 0..self.layers {
            let n_in = self.layer_input(k);
            out.push((format!("lstm{k}.w_x"), vec![n_in, 4 * h], n_in));
            out.push((format!("lstm{k}.w_h"), vec![h, 4 * h], h));
            out.push((format!("lstm{k}.bias"), vec![4 * h], h));
        }
        out.push(("out.weight".into(), vec![h, self.classes], h));
        out.push(("out.bias".into(), vec![self.classes], h));
        out
    }

    /// Offsets of (w_x, w_h, bias) for layer `k`, and of the output block.
    fn offsets(&self) -> (Vec<[usize; 3]>, usize) {
        let h = self.hidden;
        let mut off = 0;
        let mut layers = Vec::with_capacity(self.layers);
        for k in 0..self.layers {
            let n_in = self.layer_input(k);
            let wx = off;
            let wh = wx + n_in * 4 * h;
            let b = wh + h * 4 * h;
            off = b + 4 * h;
            layers.push([wx, wh, b]);
        }
        (layers, off)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations of one layer over the sequence.
struct LayerTrace {
    /// `seq x 4h`: post-activation i, f, o, g.
    gates: Vec<f64>,
    /// `seq x h`
    cells: Vec<f64>,
    /// `seq x h`
    hidden: Vec<f64>,
}

fn layer_forward(cfg: &LstmConfig, params: &[f64], offs: [usize; 3], n_in: usize, xs: &[f64]) -> LayerTrace {
    let h = cfg.hidden;
    let g4 = 4 * h;
    let t_len = cfg.seq_len;
    let wx = &params[offs[0]..offs[0] + n_in * g4];
    let wh = &params[offs[1]..offs[1] + h * g4];
    let bias = &params[offs[2]..offs[2] + g4];
    let mut gates = vec![0.0; t_len * g4];
    let mut cells = vec![0.0; t_len * h];
    let mut hidden = vec![0.0; t_len * h];
    let zeros = vec![0.0; h];
    for t in 0..t_len {
        let a = &mut gates[t * g4..(t + 1) * g4];
        a.copy_from_slice(bias);
        let x = &xs[t * n_in..(t + 1) * n_in];
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, &wx[i * g4..(i + 1) * g4], a);
            }
        }
        let h_prev = if t == 0 { &zeros[..] } else { &hidden[(t - 1) * h..t * h] };
        for (j, &hj) in h_prev.iter().enumerate() {
            if hj != 0.0 {
                axpy(hj, &wh[j * g4..(j + 1) * g4], a);
            }
        }
        for v in &mut a[..3 * h] {
            *v = sigmoid(*v);
        }
        for v in &mut a[3 * h..] {
            *v = v.tanh();
        }
        for u in 0..h {
            let c_prev = if t == 0 { 0.0 } else { cells[(t - 1) * h + u] };
            let c = a[h + u] * c_prev + a[u] * a[3 * h + u];
            cells[t * h + u] = c;
            hidden[t * h + u] = a[2 * h + u] * c.tanh();
        }
    }
    LayerTrace { gates, cells, hidden }
}

fn run(cfg: &LstmConfig, params: &[f64], input: &[f64]) -> (Vec<LayerTrace>, Vec<f64>) {
    let (offs, out_off) = cfg.offsets();
    let mut traces: Vec<LayerTrace> = Vec::with_capacity(cfg.layers);
    for k in 0..cfg.layers {
        let xs = if k == 0 { input } else { &traces[k - 1].hidden[..] };
        let tr = layer_forward(cfg, params, offs[k], cfg.layer_input(k), xs);
        traces.push(tr);
    }
    let h = cfg.hidden;
    let top = &traces[cfg.layers - 1].hidden;
    let last = &top[(cfg.seq_len - 1) * h..cfg.seq_len * h];
    let w = &params[out_off..out_off + h * cfg.classes];
    let mut logits = params[out_off + h * cfg.classes..out_off + h * cfg.classes + cfg.classes].to_vec();
    for (j, &hj) in last.iter().enumerate() {
        axpy(hj, &w[j * cfg.classes..(j + 1) * cfg.classes], &mut logits);
    }
    (traces, logits)
}

pub(super) fn forward(cfg: &LstmConfig, params: &[f64], input: &[f64]) -> Vec<f64> {
    run(cfg, params, input).1
}

pub(super) fn accumulate(
    cfg: &LstmConfig,
    params: &[f64],
    inputs: &[&[f64]],
    targets: &[usize],
    loss: &LossFn,
    grad: &mut [f64],
) -> f64 {
    let mut total = 0.0;
    for (x, &y) in inputs.iter().zip(targets) {
        total += accumulate_one(cfg, params, x, y, loss, grad);
    }
    total
}

fn accumulate_one(cfg: &LstmConfig, params: &[f64], input: &[f64], y: usize, loss: &LossFn, grad: &mut [f64]) -> f64 {
    let (offs, out_off) = cfg.offsets();
    let (traces, logits) = run(cfg, params, input);
    let h = cfg.hidden;
    let g4 = 4 * h;
    let t_len = cfg.seq_len;
    let c = cfg.classes;

    let mut dlogits = vec![0.0; c];
    let l = loss.loss_and_grad(&logits, y, &mut dlogits);

    // output projection
    let top = &traces[cfg.layers - 1].hidden;
    let last = &top[(t_len - 1) * h..t_len * h];
    for (j, &hj) in last.iter().enumerate() {
        axpy(hj, &dlogits, &mut grad[out_off + j * c..out_off + (j + 1) * c]);
    }
    for (g, d) in grad[out_off + h * c..out_off + h * c + c].iter_mut().zip(&dlogits) {
        *g += d;
    }
    // gradient flowing into each hidden state of the current layer
    let mut dh_seq = vec![0.0; t_len * h];
    let w_out = &params[out_off..out_off + h * c];
    for j in 0..h {
        dh_seq[(t_len - 1) * h + j] = dot(&w_out[j * c..(j + 1) * c], &dlogits);
    }

    let zeros = vec![0.0; h];
    for k in (0..cfg.layers).rev() {
        let n_in = cfg.layer_input(k);
        let [wx_off, wh_off, b_off] = offs[k];
        let tr = &traces[k];
        let xs: &[f64] = if k == 0 { input } else { &traces[k - 1].hidden };
        let mut dx_seq = if k > 0 { vec![0.0; t_len * n_in] } else { Vec::new() };
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut da = vec![0.0; g4];
        for t in (0..t_len).rev() {
            let gates = &tr.gates[t * g4..(t + 1) * g4];
            let c_prev = if t == 0 { &zeros[..] } else { &tr.cells[(t - 1) * h..t * h] };
            for u in 0..h {
                let (i, f, o, g) = (gates[u], gates[h + u], gates[2 * h + u], gates[3 * h + u]);
                let tc = tr.cells[t * h + u].tanh();
                let dh = dh_seq[t * h + u] + dh_next[u];
                let d_o = dh * tc;
                let dc = dh * o * (1.0 - tc * tc) + dc_next[u];
                let di = dc * g;
                let dg = dc * i;
                let df = dc * c_prev[u];
                dc_next[u] = dc * f;
                da[u] = di * i * (1.0 - i);
                da[h + u] = df * f * (1.0 - f);
                da[2 * h + u] = d_o * o * (1.0 - o);
                da[3 * h + u] = dg * (1.0 - g * g);
            }
            for (gb, d) in grad[b_off..b_off + g4].iter_mut().zip(&da) {
                *gb += d;
            }
            let x = &xs[t * n_in..(t + 1) * n_in];
            for (i, &xi) in x.iter().enumerate() {
                if xi != 0.0 {
                    axpy(xi, &da, &mut grad[wx_off + i * g4..wx_off + (i + 1) * g4]);
                }
            }
            if t > 0 {
                let h_prev = &tr.hidden[(t - 1) * h..t * h];
                for (j, &hj) in h_prev.iter().enumerate() {
                    if hj != 0.0 {
                        axpy(hj, &da, &mut grad[wh_off + j * g4..wh_off + (j + 1) * g4]);
                    }
                }
            }
            let wh = &params[wh_off..wh_off + h * g4];
            for j in 0..h {
                dh_next[j] = dot(&wh[j * g4..(j + 1) * g4], &da);
            }
            if k > 0 {
                let wx = &params[wx_off..wx_off + n_in * g4];
                for i in 0..n_in {
                    dx_seq[t * n_in + i] = dot(&wx[i * g4..(i + 1) * g4], &da);
                }
            }
        }
        if k > 0 {
            dh_seq = dx_seq;
        }
    }
    l
}
