use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::layers::LayerSpec;
use super::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("layer {index} ({kind}): {reason}")]
    BadLayer {
        index: usize,
        kind: &'static str,
        reason: String,
    },
    #[error("input shape {actual:?} does not match [batch]+{expected:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("tape does not match this network: {0}")]
    TapeMismatch(String),
    #[error("output gradient shape {actual:?} does not match output shape {expected:?}")]
    GradShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("parameter {0} has no gradient; run backward first")]
    MissingGrad(String),
    #[error("learning rate must be positive and finite, got {0}")]
    BadLearningRate(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    name: String,
    pub tensor: Tensor,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }
}

/// All trainable tensors of one network, in layer order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// One step of vanilla SGD: `theta -= mu * grad` for every parameter,
    /// then zeroes all gradients. Fails before touching anything if a
    /// gradient is missing.
    pub fn sgd_step(&mut self, mu: f64) -> Result<(), NetError> {
        if !mu.is_finite() || mu <= 0.0 {
            return Err(NetError::BadLearningRate(mu));
        }
        if let Some(p) = self.params.iter().find(|p| !p.tensor.has_grad()) {
            return Err(NetError::MissingGrad(p.name.clone()));
        }
        for p in &mut self.params {
            for i in 0..p.tensor.len() {
                let g = p.tensor.grad().expect("checked above")[i];
                p.tensor.values_mut()[i] -= mu * g;
            }
            p.tensor.zero_grad();
        }
        Ok(())
    }

    fn push(&mut self, name: String, tensor: Tensor) {
        self.params.push(Param { name, tensor });
    }
}

/// Per-layer record of whatever the backward pass needs.
#[derive(Debug, Clone)]
enum Trace {
    Dense { input: Vec<f64> },
    Conv2d { input: Vec<f64> },
    Relu { active: Vec<bool> },
    MaxPool { argmax: Vec<usize> },
    Flatten,
    /// Per-element multipliers (0 or 1/(1-rate)); empty means identity.
    Dropout { scale: Vec<f64> },
    Softmax { output: Vec<f64> },
}

impl Trace {
    fn kind(&self) -> &'static str {
        match self {
            Trace::Dense { .. } => "dense",
            Trace::Conv2d { .. } => "conv2d",
            Trace::Relu { .. } => "relu",
            Trace::MaxPool { .. } => "maxpool2x2",
            Trace::Flatten => "flatten",
            Trace::Dropout { .. } => "dropout",
            Trace::Softmax { .. } => "softmax",
        }
    }
}

/// Execution trace of one forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    traces: Vec<Trace>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

/// Feed-forward network: an immutable layer plan plus its parameters.
/// Inputs always carry a leading batch dimension.
#[derive(Debug, Clone)]
pub struct Network {
    specs: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    /// Output shape of each layer, batch dimension excluded.
    shapes: Vec<Vec<usize>>,
    /// For dense/conv layers, indices of (weight, bias) in `params`.
    param_slots: Vec<Option<(usize, usize)>>,
    pub params: ParamSet,
}

impl Network {
    /// Builds the network and initializes parameters: Glorot-uniform weights
    /// drawn from `rng`, zero biases.
    pub fn build(
        specs: Vec<LayerSpec>,
        input_shape: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NetError> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(NetError::InputShape {
                expected: vec![],
                actual: input_shape.to_vec(),
            });
        }
        let mut shapes = Vec::with_capacity(specs.len());
        let mut params = ParamSet::default();
        let mut param_slots = Vec::with_capacity(specs.len());
        let mut cur = input_shape.to_vec();
        for (i, spec) in specs.iter().enumerate() {
            let out = spec.infer_shape(i, &cur)?;
            match spec {
                LayerSpec::Dense { units } => {
                    let f = cur[0];
                    let w = glorot(&[f, *units], f, *units, rng);
                    param_slots.push(Some((params.len(), params.len() + 1)));
                    params.push(format!("l{i}.weight"), w);
                    params.push(format!("l{i}.bias"), Tensor::zeros(vec![*units]));
                }
                LayerSpec::Conv2d { filters, kernel } => {
                    let (kh, kw) = *kernel;
                    let c = cur[2];
                    let fan_in = kh * kw * c;
                    let fan_out = kh * kw * *filters;
                    let w = glorot(&[kh, kw, c, *filters], fan_in, fan_out, rng);
                    param_slots.push(Some((params.len(), params.len() + 1)));
                    params.push(format!("l{i}.weight"), w);
                    params.push(format!("l{i}.bias"), Tensor::zeros(vec![*filters]));
                }
                _ => param_slots.push(None),
            }
            shapes.push(out.clone());
            cur = out;
        }
        Ok(Network {
            specs,
            input_shape: input_shape.to_vec(),
            shapes,
            param_slots,
            params,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes
            .last()
            .map(Vec::as_slice)
            .unwrap_or(&self.input_shape)
    }

    pub fn num_layers(&self) -> usize {
        self.specs.len()
    }

    /// Evaluation-mode forward pass: dropout is the identity, nothing is
    /// recorded. Deterministic in (parameters, input).
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NetError> {
        Ok(self.run(input, None, false)?.0)
    }

    /// Forward pass that records a tape for [`Network::backward`]. Dropout
    /// layers are active iff `dropout_rng` is provided.
    pub fn forward_traced(
        &self,
        input: &Tensor,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, Tape), NetError> {
        let (out, tape) = self.run(input, dropout_rng, true)?;
        Ok((out, tape.expect("taping was requested")))
    }

    fn run(
        &self,
        input: &Tensor,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
        taping: bool,
    ) -> Result<(Tensor, Option<Tape>), NetError> {
        let n = self.check_input(input)?;
        let mut cur = input.values().to_vec();
        let mut cur_shape = self.input_shape.clone();
        let mut traces: Vec<Trace> = Vec::with_capacity(if taping { self.specs.len() } else { 0 });
        for (i, spec) in self.specs.iter().enumerate() {
            let next = match spec {
                LayerSpec::Dense { units } => {
                    let (w_ix, b_ix) = self.param_slots[i].expect("dense owns params");
                    let w = self.params.params[w_ix].tensor.values();
                    let b = self.params.params[b_ix].tensor.values();
                    let out = dense_forward(&cur, n, cur_shape[0], *units, w, b);
                    if taping {
                        traces.push(Trace::Dense {
                            input: std::mem::take(&mut cur),
                        });
                    }
                    out
                }
                LayerSpec::Conv2d { filters, kernel } => {
                    let (w_ix, b_ix) = self.param_slots[i].expect("conv owns params");
                    let k = self.params.params[w_ix].tensor.values();
                    let b = self.params.params[b_ix].tensor.values();
                    let dims = ConvDims::new(&cur_shape, *kernel, *filters);
                    let out = conv_forward(&cur, n, &dims, k, b);
                    if taping {
                        traces.push(Trace::Conv2d {
                            input: std::mem::take(&mut cur),
                        });
                    }
                    out
                }
                LayerSpec::Relu => {
                    let out: Vec<f64> = cur.iter().map(|&v| v.max(0.0)).collect();
                    if taping {
                        traces.push(Trace::Relu {
                            active: cur.iter().map(|&v| v > 0.0).collect(),
                        });
                    }
                    out
                }
                LayerSpec::MaxPool2x2 => {
                    let (out, argmax) = maxpool_forward(&cur, n, &cur_shape);
                    if taping {
                        traces.push(Trace::MaxPool { argmax });
                    }
                    out
                }
                LayerSpec::Flatten => {
                    if taping {
                        traces.push(Trace::Flatten);
                    }
                    cur
                }
                LayerSpec::Dropout { rate } => {
                    let mut scale = Vec::new();
                    let out = match (&mut dropout_rng, *rate) {
                        (Some(rng), r) if r > 0.0 => {
                            let keep = 1.0 / (1.0 - r);
                            scale = cur
                                .iter()
                                .map(|_| if rng.random::<f64>() < r { 0.0 } else { keep })
                                .collect();
                            cur.iter().zip(&scale).map(|(&v, &s)| v * s).collect()
                        }
                        _ => cur,
                    };
                    if taping {
                        traces.push(Trace::Dropout { scale });
                    }
                    out
                }
                LayerSpec::Softmax => {
                    let out = softmax_rows(&cur, n, cur_shape[0]);
                    if taping {
                        traces.push(Trace::Softmax { output: out.clone() });
                    }
                    out
                }
            };
            cur = next;
            cur_shape = self.shapes[i].clone();
        }
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&cur_shape);
        let out = Tensor::new(out_shape, cur)?;
        let tape = taping.then_some(Tape { batch: n, traces });
        Ok((out, tape))
    }

    /// Reverse pass over a recorded tape. Parameter gradients accumulate
    /// (`+=`) into the grad buffers; the returned tensor is the gradient with
    /// respect to the network input.
    pub fn backward(&mut self, tape: &Tape, output_grad: &Tensor) -> Result<Tensor, NetError> {
        if tape.traces.len() != self.specs.len() {
            return Err(NetError::TapeMismatch(format!(
                "tape has {} layers, network has {}",
                tape.traces.len(),
                self.specs.len()
            )));
        }
        for (i, (t, s)) in tape.traces.iter().zip(&self.specs).enumerate() {
            if t.kind() != s.kind() {
                return Err(NetError::TapeMismatch(format!(
                    "layer {i} is {} but tape recorded {}",
                    s.kind(),
                    t.kind()
                )));
            }
        }
        let n = tape.batch;
        let mut expected = vec![n];
        expected.extend_from_slice(self.output_shape());
        if output_grad.shape() != expected.as_slice() {
            return Err(NetError::GradShape {
                expected,
                actual: output_grad.shape().to_vec(),
            });
        }
        let mut g = output_grad.values().to_vec();
        for i in (0..self.specs.len()).rev() {
            let in_shape = if i == 0 {
                self.input_shape.clone()
            } else {
                self.shapes[i - 1].clone()
            };
            g = match (&self.specs[i], &tape.traces[i]) {
                (LayerSpec::Dense { units }, Trace::Dense { input }) => {
                    let (w_ix, b_ix) = self.param_slots[i].expect("dense owns params");
                    let f = in_shape[0];
                    let w = self.params.params[w_ix].tensor.values().to_vec();
                    let dx = dense_backward_input(&g, n, f, *units, &w);
                    let (left, right) = self.params.params.split_at_mut(b_ix);
                    dense_backward_params(
                        &g,
                        input,
                        n,
                        f,
                        *units,
                        left[w_ix].tensor.grad_mut(),
                        right[0].tensor.grad_mut(),
                    );
                    dx
                }
                (LayerSpec::Conv2d { filters, kernel }, Trace::Conv2d { input }) => {
                    let (w_ix, b_ix) = self.param_slots[i].expect("conv owns params");
                    let dims = ConvDims::new(&in_shape, *kernel, *filters);
                    let k = self.params.params[w_ix].tensor.values().to_vec();
                    let dx = conv_backward_input(&g, n, &dims, &k);
                    let (left, right) = self.params.params.split_at_mut(b_ix);
                    conv_backward_params(
                        &g,
                        input,
                        n,
                        &dims,
                        left[w_ix].tensor.grad_mut(),
                        right[0].tensor.grad_mut(),
                    );
                    dx
                }
                (LayerSpec::Relu, Trace::Relu { active }) => {
                    if active.len() != g.len() {
                        return Err(NetError::TapeMismatch("relu trace length".into()));
                    }
                    g.iter()
                        .zip(active)
                        .map(|(&v, &a)| if a { v } else { 0.0 })
                        .collect()
                }
                (LayerSpec::MaxPool2x2, Trace::MaxPool { argmax }) => {
                    let in_len: usize = n * in_shape.iter().product::<usize>();
                    if argmax.len() != g.len() {
                        return Err(NetError::TapeMismatch("maxpool trace length".into()));
                    }
                    let mut dx = vec![0.0; in_len];
                    for (ix, &src) in argmax.iter().enumerate() {
                        dx[src] += g[ix];
                    }
                    dx
                }
                (LayerSpec::Flatten, Trace::Flatten) => g,
                (LayerSpec::Dropout { .. }, Trace::Dropout { scale }) => {
                    if scale.is_empty() {
                        g
                    } else {
                        if scale.len() != g.len() {
                            return Err(NetError::TapeMismatch("dropout trace length".into()));
                        }
                        g.iter().zip(scale).map(|(&v, &s)| v * s).collect()
                    }
                }
                (LayerSpec::Softmax, Trace::Softmax { output }) => {
                    if output.len() != g.len() {
                        return Err(NetError::TapeMismatch("softmax trace length".into()));
                    }
                    let f = in_shape[0];
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..n {
                        let y = &output[r * f..(r + 1) * f];
                        let gy = &g[r * f..(r + 1) * f];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..f {
                            dx[r * f + j] = y[j] * (gy[j] - dot);
                        }
                    }
                    dx
                }
                _ => unreachable!("kinds were checked above"),
            };
        }
        let mut in_shape = vec![n];
        in_shape.extend_from_slice(&self.input_shape);
        Ok(Tensor::new(in_shape, g)?)
    }

    fn check_input(&self, input: &Tensor) -> Result<usize, NetError> {
        let shape = input.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(NetError::InputShape {
                expected: self.input_shape.clone(),
                actual: shape.to_vec(),
            });
        }
        Ok(shape[0])
    }
}

struct ConvDims {
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    o: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn new(in_shape: &[usize], kernel: (usize, usize), filters: usize) -> Self {
        let (kh, kw) = kernel;
        ConvDims {
            h: in_shape[0],
            w: in_shape[1],
            c: in_shape[2],
            kh,
            kw,
            o: filters,
            oh: in_shape[0] - kh + 1,
            ow: in_shape[1] - kw + 1,
        }
    }
}

fn dense_forward(x: &[f64], n: usize, f: usize, u: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * u];
    for r in 0..n {
        let xr = &x[r * f..(r + 1) * f];
        let or = &mut out[r * u..(r + 1) * u];
        or.copy_from_slice(b);
        for (i, &xi) in xr.iter().enumerate() {
            let wr = &w[i * u..(i + 1) * u];
            for (j, &wij) in wr.iter().enumerate() {
                or[j] += xi * wij;
            }
        }
    }
    out
}

fn dense_backward_input(g: &[f64], n: usize, f: usize, u: usize, w: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; n * f];
    for r in 0..n {
        let gr = &g[r * u..(r + 1) * u];
        let dr = &mut dx[r * f..(r + 1) * f];
        for i in 0..f {
            let wr = &w[i * u..(i + 1) * u];
            dr[i] = wr.iter().zip(gr).map(|(a, b)| a * b).sum();
        }
    }
    dx
}

fn dense_backward_params(
    g: &[f64],
    x: &[f64],
    n: usize,
    f: usize,
    u: usize,
    dw: &mut [f64],
    db: &mut [f64],
) {
    for r in 0..n {
        let xr = &x[r * f..(r + 1) * f];
        let gr = &g[r * u..(r + 1) * u];
        for (i, &xi) in xr.iter().enumerate() {
            let dwr = &mut dw[i * u..(i + 1) * u];
            for (j, &gj) in gr.iter().enumerate() {
                dwr[j] += xi * gj;
            }
        }
        for (j, &gj) in gr.iter().enumerate() {
            db[j] += gj;
        }
    }
}

fn conv_forward(x: &[f64], n: usize, d: &ConvDims, k: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * d.oh * d.ow * d.o];
    for r in 0..n {
        let x_base = r * d.h * d.w * d.c;
        for i in 0..d.oh {
            for j in 0..d.ow {
                let o_base = ((r * d.oh + i) * d.ow + j) * d.o;
                out[o_base..o_base + d.o].copy_from_slice(b);
                for a in 0..d.kh {
                    for bb in 0..d.kw {
                        let x_px = x_base + ((i + a) * d.w + (j + bb)) * d.c;
                        let k_px = (a * d.kw + bb) * d.c;
                        for ci in 0..d.c {
                            let xv = x[x_px + ci];
                            let k_row = (k_px + ci) * d.o;
                            for f in 0..d.o {
                                out[o_base + f] += xv * k[k_row + f];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_input(g: &[f64], n: usize, d: &ConvDims, k: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; n * d.h * d.w * d.c];
    for r in 0..n {
        let x_base = r * d.h * d.w * d.c;
        for i in 0..d.oh {
            for j in 0..d.ow {
                let g_base = ((r * d.oh + i) * d.ow + j) * d.o;
                for a in 0..d.kh {
                    for bb in 0..d.kw {
                        let x_px = x_base + ((i + a) * d.w + (j + bb)) * d.c;
                        let k_px = (a * d.kw + bb) * d.c;
                        for ci in 0..d.c {
                            let k_row = (k_px + ci) * d.o;
                            let mut acc = 0.0;
                            for f in 0..d.o {
                                acc += k[k_row + f] * g[g_base + f];
                            }
                            dx[x_px + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv_backward_params(
    g: &[f64],
    x: &[f64],
    n: usize,
    d: &ConvDims,
    dk: &mut [f64],
    db: &mut [f64],
) {
    for r in 0..n {
        let x_base = r * d.h * d.w * d.c;
        for i in 0..d.oh {
            for j in 0..d.ow {
                let g_base = ((r * d.oh + i) * d.ow + j) * d.o;
                for f in 0..d.o {
                    db[f] += g[g_base + f];
                }
                for a in 0..d.kh {
                    for bb in 0..d.kw {
                        let x_px = x_base + ((i + a) * d.w + (j + bb)) * d.c;
                        let k_px = (a * d.kw + bb) * d.c;
                        for ci in 0..d.c {
                            let xv = x[x_px + ci];
                            let k_row = (k_px + ci) * d.o;
                            for f in 0..d.o {
                                dk[k_row + f] += xv * g[g_base + f];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn maxpool_forward(x: &[f64], n: usize, in_shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * oh * ow * c];
    let mut argmax = vec![0usize; out.len()];
    for r in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for ci in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_ix = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let src = ((r * h + 2 * i + dy) * w + 2 * j + dx) * c + ci;
                            // first maximum wins ties, keeping pooling deterministic
                            if x[src] > best {
                                best = x[src];
                                best_ix = src;
                            }
                        }
                    }
                    let dst = ((r * oh + i) * ow + j) * c + ci;
                    out[dst] = best;
                    argmax[dst] = best_ix;
                }
            }
        }
    }
    (out, argmax)
}

fn softmax_rows(x: &[f64], n: usize, f: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..n {
        let xr = &x[r * f..(r + 1) * f];
        let or = &mut out[r * f..(r + 1) * f];
        let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in or.iter_mut() {
            *o /= z;
        }
    }
    out
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.random_range(-s..s)).collect();
    Tensor::new(shape.to_vec(), values).expect("shape/len agree by construction")
}
