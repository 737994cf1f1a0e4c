//! A tiny feed-forward network with hand-written layer gradients.
//!
//! Weights are passed to `forward`/`backward` explicitly so the caller can run
//! the network on quantized images of the master weights it owns.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::WeightTensor;

/// Per-sample activation shape, channels x height x width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn flat(len: usize) -> Self {
        Self { c: len, h: 1, w: 1 }
    }

    pub fn image(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// Fully connected on the flattened input.
    Fc {
        outputs: usize,
    },
    /// Stride-1 convolution without padding.
    Conv {
        out_ch: usize,
        size: usize,
    },
    Relu,
    GlobalAvgPool,
}

/// Master weights and float bias of one parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub layer: usize,
    pub name: String,
    pub weight: WeightTensor,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet {
    input: Shape,
    specs: Vec<LayerSpec>,
    /// Input shape of every layer, plus the output shape at the end.
    shapes: Vec<Shape>,
    params: Vec<Param>,
    param_of_layer: Vec<Option<usize>>,
}

/// Activations saved by a forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub batch: usize,
    /// `acts[l]` is the batch input of layer `l`; the last entry is the output.
    pub acts: Vec<Vec<f64>>,
}

impl Forward {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

impl TinyNet {
    /// Builds the network with He-normal weights and zero biases.
    pub fn new(input: Shape, specs: Vec<LayerSpec>, rng: &mut impl Rng) -> Result<Self> {
        let mut shapes = vec![input];
        let mut params = Vec::new();
        let mut param_of_layer = Vec::with_capacity(specs.len());
        let (mut n_fc, mut n_conv) = (0, 0);
        for (l, spec) in specs.iter().enumerate() {
            let cur = *shapes.last().unwrap();
            let (next, param) = match *spec {
                LayerSpec::Fc { outputs } => {
                    n_fc += 1;
                    let fan_in = cur.len();
                    let data = he_normal(outputs * fan_in, fan_in, rng);
                    let weight = WeightTensor::fc(outputs, fan_in, data)?;
                    (Shape::flat(outputs), Some((format!("fc{n_fc}"), weight, outputs)))
                }
                LayerSpec::Conv { out_ch, size } => {
                    if size == 0 || size > cur.h || size > cur.w {
                        return Err(Error::Config(format!(
                            "kernel {size} does not fit input {}x{}",
                            cur.h, cur.w
                        )));
                    }
                    n_conv += 1;
                    let fan_in = cur.c * size * size;
                    let data = he_normal(out_ch * fan_in, fan_in, rng);
                    let weight = WeightTensor::conv(out_ch, cur.c, size, data)?;
                    let next = Shape::image(out_ch, cur.h - size + 1, cur.w - size + 1);
                    (next, Some((format!("conv{n_conv}"), weight, out_ch)))
                }
                LayerSpec::Relu => (cur, None),
                LayerSpec::GlobalAvgPool => (Shape::flat(cur.c), None),
            };
            match param {
                Some((name, weight, outs)) => {
                    param_of_layer.push(Some(params.len()));
                    params.push(Param {
                        layer: l,
                        name,
                        weight,
                        bias: vec![0.0; outs],
                    });
                }
                None => param_of_layer.push(None),
            }
            shapes.push(next);
        }
        Ok(Self {
            input,
            specs,
            shapes,
            params,
            param_of_layer,
        })
    }

    /// Fully-connected ReLU network `inputs -> hidden... -> outputs`.
    pub fn mlp(inputs: usize, hidden: &[usize], outputs: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut specs = Vec::new();
        for &h in hidden {
            specs.push(LayerSpec::Fc { outputs: h });
            specs.push(LayerSpec::Relu);
        }
        specs.push(LayerSpec::Fc { outputs });
        Self::new(Shape::flat(inputs), specs, rng)
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_len(&self) -> usize {
        self.shapes.last().unwrap().len()
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Master weight slices, one per parametric layer.
    pub fn master_weights(&self) -> Vec<&[f64]> {
        self.params.iter().map(|p| p.weight.data()).collect()
    }

    pub fn forward(&self, weights: &[&[f64]], x: &[f64], batch: usize) -> Forward {
        assert_eq!(weights.len(), self.params.len());
        assert_eq!(x.len(), batch * self.input.len());
        let mut acts = Vec::with_capacity(self.specs.len() + 1);
        acts.push(x.to_vec());
        for (l, spec) in self.specs.iter().enumerate() {
            let (inp, out) = (self.shapes[l], self.shapes[l + 1]);
            let x = acts.last().unwrap();
            let y = match *spec {
                LayerSpec::Fc { .. } => {
                    let p = self.param_of_layer[l].unwrap();
                    fc_forward(weights[p], &self.params[p].bias, x, inp.len(), out.len(), batch)
                }
                LayerSpec::Conv { size, .. } => {
                    let p = self.param_of_layer[l].unwrap();
                    conv_forward(weights[p], &self.params[p].bias, x, inp, out, size, batch)
                }
                LayerSpec::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
                LayerSpec::GlobalAvgPool => {
                    let area = (inp.h * inp.w) as f64;
                    x.chunks_exact(inp.h * inp.w)
                        .map(|c| c.iter().sum::<f64>() / area)
                        .collect()
                }
            };
            acts.push(y);
        }
        Forward { batch, acts }
    }

    /// Gradients of the loss with respect to the weights used in `forward`.
    pub fn backward(&self, weights: &[&[f64]], fwd: &Forward, d_out: &[f64]) -> Vec<ParamGrad> {
        let batch = fwd.batch;
        let mut grads: Vec<ParamGrad> = self
            .params
            .iter()
            .map(|p| ParamGrad {
                weight: vec![0.0; p.weight.len()],
                bias: vec![0.0; p.bias.len()],
            })
            .collect();
        let mut dy = d_out.to_vec();
        for (l, spec) in self.specs.iter().enumerate().rev() {
            let (inp, out) = (self.shapes[l], self.shapes[l + 1]);
            let x = &fwd.acts[l];
            dy = match *spec {
                LayerSpec::Fc { .. } => {
                    let p = self.param_of_layer[l].unwrap();
                    fc_backward(weights[p], x, &dy, inp.len(), out.len(), batch, &mut grads[p])
                }
                LayerSpec::Conv { size, .. } => {
                    let p = self.param_of_layer[l].unwrap();
                    conv_backward(weights[p], x, &dy, inp, out, size, batch, &mut grads[p])
                }
                LayerSpec::Relu => x
                    .iter()
                    .zip(&dy)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect(),
                LayerSpec::GlobalAvgPool => {
                    let area = inp.h * inp.w;
                    dy.iter()
                        .flat_map(|&g| std::iter::repeat_n(g / area as f64, area))
                        .collect()
                }
            };
        }
        grads
    }
}

fn he_normal(len: usize, fan_in: usize, rng: &mut impl Rng) -> Vec<f64> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    (0..len).map(|_| dist.sample(rng)).collect()
}

fn fc_forward(w: &[f64], b: &[f64], x: &[f64], n_in: usize, n_out: usize, batch: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(batch * n_out);
    for xs in x.chunks_exact(n_in) {
        for o in 0..n_out {
            let row = &w[o * n_in..(o + 1) * n_in];
            y.push(b[o] + row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    y
}

fn fc_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    n_in: usize,
    n_out: usize,
    batch: usize,
    grad: &mut ParamGrad,
) -> Vec<f64> {
    let mut dx = vec![0.0; batch * n_in];
    for s in 0..batch {
        let xs = &x[s * n_in..(s + 1) * n_in];
        let dxs = &mut dx[s * n_in..(s + 1) * n_in];
        for o in 0..n_out {
            let g = dy[s * n_out + o];
            grad.bias[o] += g;
            let row = &w[o * n_in..(o + 1) * n_in];
            let grow = &mut grad.weight[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                grow[i] += g * xs[i];
                dxs[i] += g * row[i];
            }
        }
    }
    dx
}

fn conv_forward(w: &[f64], b: &[f64], x: &[f64], inp: Shape, out: Shape, size: usize, batch: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * out.len()];
    for s in 0..batch {
        let xs = &x[s * inp.len()..(s + 1) * inp.len()];
        let ys = &mut y[s * out.len()..(s + 1) * out.len()];
        for o in 0..out.c {
            for r in 0..out.h {
                for c in 0..out.w {
                    let mut acc = b[o];
                    for ci in 0..inp.c {
                        for u in 0..size {
                            for v in 0..size {
                                let wi = ((o * inp.c + ci) * size + u) * size + v;
                                let xi = (ci * inp.h + r + u) * inp.w + c + v;
                                acc += w[wi] * xs[xi];
                            }
                        }
                    }
                    ys[(o * out.h + r) * out.w + c] = acc;
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    inp: Shape,
    out: Shape,
    size: usize,
    batch: usize,
    grad: &mut ParamGrad,
) -> Vec<f64> {
    let mut dx = vec![0.0; batch * inp.len()];
    for s in 0..batch {
        let xs = &x[s * inp.len()..(s + 1) * inp.len()];
        let dxs = &mut dx[s * inp.len()..(s + 1) * inp.len()];
        let dys = &dy[s * out.len()..(s + 1) * out.len()];
        for o in 0..out.c {
            for r in 0..out.h {
                for c in 0..out.w {
                    let g = dys[(o * out.h + r) * out.w + c];
                    grad.bias[o] += g;
                    for ci in 0..inp.c {
                        for u in 0..size {
                            for v in 0..size {
                                let wi = ((o * inp.c + ci) * size + u) * size + v;
                                let xi = (ci * inp.h + r + u) * inp.w + c + v;
                                grad.weight[wi] += g * xs[xi];
                                dxs[xi] += g * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Mean softmax cross-entropy over the batch.
///
/// Returns the loss, its gradient with respect to the logits, and how many
/// samples were classified correctly (first maximum wins).
pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>, usize) {
    let batch = labels.len();
    assert_eq!(logits.len(), batch * classes);
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    let mut correct = 0;
    for (s, (z, &label)) in logits.chunks_exact(classes).zip(labels).enumerate() {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let log_sum = max + sum.ln();
        loss += log_sum - z[label];
        let argmax = z
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > z[best] { i } else { best });
        correct += usize::from(argmax == label);
        for (c, g) in grad[s * classes..(s + 1) * classes].iter_mut().enumerate() {
            let p = (z[c] - log_sum).exp();
            *g = (p - f64::from(u8::from(c == label))) / batch as f64;
        }
    }
    (loss / batch as f64, grad, correct)
}
