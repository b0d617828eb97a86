//! Fully connected network with SiLU hidden activations and a linear output,
//! plus exact reverse-mode gradients for that fixed topology.
//!
//! Parameters live in one flat buffer in declaration order
//! (`W_0, b_0, W_1, b_1, ...`), each weight matrix stored `[out, in]` row-major.
//! The flat layout is what the optimizer and the checkpoint format consume.

use super::{RngStream, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Gradients of `<upstream, output>` with respect to parameters and input.
#[derive(Clone, Debug)]
pub struct MlpGrads {
    /// Same layout as [`Mlp::params`].
    pub params: Vec<f64>,
    pub input: Tensor,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

fn param_len(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    /// All-zero network with the given layer widths (input first).
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid("an mlp needs at least input and output widths"));
        }
        if widths.contains(&0) {
            return Err(Error::invalid(format!("zero layer width in {widths:?}")));
        }
        Ok(Self {
            widths: widths.to_vec(),
            params: vec![0.0; param_len(widths)],
        })
    }

    /// Weights drawn `N(0, 1/fan_in)`, biases zero. The output layer is
    /// additionally scaled by `output_gain`.
    pub fn init(widths: &[usize], output_gain: f64, stream: &mut RngStream) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        let layers = net.num_layers();
        for l in 0..layers {
            let fan_in = net.widths[l] as f64;
            let gain = if l + 1 == layers { output_gain } else { 1.0 };
            let (w, _) = net.layer_range(l);
            let slice = &mut net.params[w];
            stream.fill_normal(slice);
            let std = gain / fan_in.sqrt();
            slice.iter_mut().for_each(|v| *v *= std);
        }
        Ok(net)
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        if params.len() != net.params.len() {
            return Err(Error::shape(format!(
                "widths {widths:?} need {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(i, "non-finite parameter"));
        }
        net.params = params;
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_range(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start = param_len(&self.widths[..=l]);
        let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
        let w_end = start + fan_in * fan_out;
        (start..w_end, w_end..w_end + fan_out)
    }

    /// Weight `[out, in]` and bias `[out]` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (w, b) = self.layer_range(l);
        (&self.params[w], &self.params[b])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (w, b) = self.layer_range(l);
        let (head, tail) = self.params.split_at_mut(b.start);
        (&mut head[w], &mut tail[..b.len()])
    }

    pub fn weight(&self, l: usize) -> Tensor {
        let (w, _) = self.layer(l);
        Tensor::from_parts(vec![self.widths[l + 1], self.widths[l]], w.to_vec())
    }

    pub fn bias(&self, l: usize) -> Tensor {
        let (_, b) = self.layer(l);
        Tensor::from_parts(vec![self.widths[l + 1]], b.to_vec())
    }

    fn batch_rows(&self, input: &Tensor, width: usize, what: &str) -> Result<usize> {
        match input.shape() {
            [w] if *w == width => Ok(1),
            [n, w] if *w == width => Ok(*n),
            s => Err(Error::shape(format!(
                "{what}: expected width {width} (shape [w] or [n, w]), got {s:?}"
            ))),
        }
    }

    /// Pre-activations of every layer for a row-major batch.
    fn pre_activations(&self, x: &[f64], rows: usize) -> Vec<Vec<f64>> {
        let layers = self.num_layers();
        let mut pre = Vec::with_capacity(layers);
        let mut act: Vec<f64> = x.to_vec();
        for l in 0..layers {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let (w, b) = self.layer(l);
            let mut z = vec![0.0; rows * fan_out];
            for r in 0..rows {
                let a = &act[r * fan_in..(r + 1) * fan_in];
                let zr = &mut z[r * fan_out..(r + 1) * fan_out];
                for (o, zo) in zr.iter_mut().enumerate() {
                    let wo = &w[o * fan_in..(o + 1) * fan_in];
                    *zo = b[o] + wo.iter().zip(a).map(|(p, q)| p * q).sum::<f64>();
                }
            }
            act = if l + 1 < layers {
                z.iter().map(|&v| silu(v)).collect()
            } else {
                Vec::new()
            };
            pre.push(z);
        }
        pre
    }

    /// Raw forward pass over `rows` row-major inputs.
    pub(crate) fn forward_slice(&self, x: &[f64], rows: usize) -> Vec<f64> {
        self.pre_activations(x, rows).pop().unwrap()
    }

    /// Raw backward pass. Accumulates parameter gradients into `param_grads`
    /// and returns the input gradient.
    pub(crate) fn backward_slice(
        &self,
        x: &[f64],
        rows: usize,
        upstream: &[f64],
        param_grads: &mut [f64],
    ) -> Vec<f64> {
        let layers = self.num_layers();
        let pre = self.pre_activations(x, rows);
        let mut g = upstream.to_vec();
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let a_prev: Vec<f64> = if l == 0 {
                x.to_vec()
            } else {
                pre[l - 1].iter().map(|&v| silu(v)).collect()
            };
            let (w_range, b_range) = self.layer_range(l);
            {
                let (dw, db) = param_grads[w_range.start..b_range.end].split_at_mut(w_range.len());
                for r in 0..rows {
                    let gr = &g[r * fan_out..(r + 1) * fan_out];
                    let ar = &a_prev[r * fan_in..(r + 1) * fan_in];
                    for (o, &go) in gr.iter().enumerate() {
                        db[o] += go;
                        if go != 0.0 {
                            let row = &mut dw[o * fan_in..(o + 1) * fan_in];
                            row.iter_mut().zip(ar).for_each(|(d, a)| *d += go * a);
                        }
                    }
                }
            }
            let w = &self.params[w_range];
            let mut g_prev = vec![0.0; rows * fan_in];
            for r in 0..rows {
                let gr = &g[r * fan_out..(r + 1) * fan_out];
                let out = &mut g_prev[r * fan_in..(r + 1) * fan_in];
                for (o, &go) in gr.iter().enumerate() {
                    if go != 0.0 {
                        let wo = &w[o * fan_in..(o + 1) * fan_in];
                        out.iter_mut().zip(wo).for_each(|(d, p)| *d += go * p);
                    }
                }
            }
            if l > 0 {
                g_prev
                    .iter_mut()
                    .zip(&pre[l - 1])
                    .for_each(|(d, &z)| *d *= silu_grad(z));
            }
            g = g_prev;
        }
        g
    }

    /// Forward evaluation for a single input `[in]` or a batch `[n, in]`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let rows = self.batch_rows(input, self.input_dim(), "mlp_forward")?;
        let out = self.forward_slice(input.data(), rows);
        let shape = if input.rank() == 1 {
            vec![self.output_dim()]
        } else {
            vec![rows, self.output_dim()]
        };
        Tensor::from_parts(shape, out).ensure_finite()
    }

    /// Gradients of `<upstream, forward(input)>`; batch gradients are summed
    /// over rows.
    pub fn backward(&self, input: &Tensor, upstream: &Tensor) -> Result<MlpGrads> {
        let rows = self.batch_rows(input, self.input_dim(), "mlp_backward input")?;
        let up_rows = self.batch_rows(upstream, self.output_dim(), "mlp_backward upstream")?;
        if rows != up_rows || input.rank() != upstream.rank() {
            return Err(Error::shape(format!(
                "mlp_backward: input {:?} and upstream {:?} disagree on batch",
                input.shape(),
                upstream.shape()
            )));
        }
        let mut params = vec![0.0; self.params.len()];
        let g = self.backward_slice(input.data(), rows, upstream.data(), &mut params);
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(i, "non-finite parameter gradient"));
        }
        Ok(MlpGrads {
            params,
            input: Tensor::from_parts(input.shape().to_vec(), g).ensure_finite()?,
        })
    }
}

/// Free-function form of [`Mlp::forward`].
pub fn mlp_forward(net: &Mlp, input: &Tensor) -> Result<Tensor> {
    net.forward(input)
}

/// Free-function form of [`Mlp::backward`].
pub fn mlp_backward(net: &Mlp, input: &Tensor, upstream: &Tensor) -> Result<MlpGrads> {
    net.backward(input, upstream)
}
