//! Minimal deterministic neural-network engine.
//!
//! Layer forward/backward passes over [`Tensor`] batches, softmax
//! cross-entropy, momentum SGD, prediction, and closed-form cost
//! accounting (multiply-accumulate and parameter counts).
//!
//! Backward passes produce exact reverse-mode gradients for every
//! parameter *and* for the input batch; the input gradient is what the
//! FGSM attack consumes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A single layer descriptor.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense {
        input: usize,
        output: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
}

impl Layer {
    fn name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "Dense",
            Layer::Conv2d { .. } => "Conv2d",
            Layer::Relu => "Relu",
            Layer::MaxPool { .. } => "MaxPool",
            Layer::Flatten => "Flatten",
        }
    }

    /// Output shape (per example, batch dimension excluded) for a given
    /// input shape, or an error when the two are incompatible.
    fn output_shape(&self, input: &[usize], layer_idx: usize) -> Result<Vec<usize>> {
        let bad = |reason: String| Error::InvalidSpec {
            layer: layer_idx,
            reason,
        };
        match self {
            Layer::Dense { input: ins, output } => {
                if *ins == 0 || *output == 0 {
                    return Err(bad("Dense dimensions must be positive".into()));
                }
                if input != [*ins] {
                    return Err(bad(format!(
                        "Dense expects flat input of {ins}, got shape {input:?}"
                    )));
                }
                Ok(vec![*output])
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if *kernel == 0 || *stride == 0 || *in_channels == 0 || *out_channels == 0 {
                    return Err(bad("Conv2d sizes must be positive".into()));
                }
                let [c, h, w] = *input else {
                    return Err(bad(format!("Conv2d expects (C,H,W) input, got {input:?}")));
                };
                if c != *in_channels {
                    return Err(bad(format!(
                        "Conv2d expects {in_channels} input channels, got {c}"
                    )));
                }
                let hp = h + 2 * padding;
                let wp = w + 2 * padding;
                if hp < *kernel || wp < *kernel {
                    return Err(bad(format!(
                        "Conv2d kernel {kernel} larger than padded input {hp}x{wp}"
                    )));
                }
                Ok(vec![
                    *out_channels,
                    (hp - kernel) / stride + 1,
                    (wp - kernel) / stride + 1,
                ])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool { kernel, stride } => {
                if *kernel == 0 || *stride == 0 {
                    return Err(bad("MaxPool sizes must be positive".into()));
                }
                let [c, h, w] = *input else {
                    return Err(bad(format!("MaxPool expects (C,H,W) input, got {input:?}")));
                };
                if h < *kernel || w < *kernel {
                    return Err(bad(format!(
                        "MaxPool kernel {kernel} larger than input {h}x{w}"
                    )));
                }
                Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Ordered layer list plus the expected per-example input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub class_count: usize,
}

impl NetworkSpec {
    /// Plain dense MLP: `dims[0]` inputs through hidden widths to
    /// `dims.last()` classes, ReLU between dense layers.
    pub fn mlp(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArg(
                "mlp needs at least input and output dims".into(),
            ));
        }
        let mut layers = Vec::new();
        for (i, pair) in dims.windows(2).enumerate() {
            layers.push(Layer::Dense {
                input: pair[0],
                output: pair[1],
            });
            if i + 2 < dims.len() {
                layers.push(Layer::Relu);
            }
        }
        let spec = NetworkSpec {
            input_shape: vec![dims[0]],
            layers,
            class_count: *dims.last().unwrap(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Per-example shape entering each layer; the final entry is the
    /// network output shape.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.output_shape(shapes.last().unwrap(), i)?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 {
            return Err(Error::InvalidArg("class_count must be positive".into()));
        }
        let shapes = self.layer_shapes()?;
        let out = shapes.last().unwrap();
        if out != &[self.class_count] {
            return Err(Error::InvalidSpec {
                layer: self.layers.len().saturating_sub(1),
                reason: format!(
                    "final output shape {out:?} does not match class_count {}",
                    self.class_count
                ),
            });
        }
        Ok(())
    }

    /// Canonical one-line-per-layer text form; used by checkpoints and
    /// report headers.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "input={}\n",
            self.input_shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x")
        ));
        for layer in &self.layers {
            let line = match layer {
                Layer::Dense { input, output } => format!("dense:{input}:{output}"),
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => format!("conv2d:{in_channels}:{out_channels}:{kernel}:{stride}:{padding}"),
                Layer::Relu => "relu".into(),
                Layer::MaxPool { kernel, stride } => format!("maxpool:{kernel}:{stride}"),
                Layer::Flatten => "flatten".into(),
            };
            s.push_str(&format!("layer={line}\n"));
        }
        s.push_str(&format!("classes={}\n", self.class_count));
        s
    }

    /// Inverse of [`NetworkSpec::canonical`].
    pub fn from_canonical(text: &str) -> Result<Self> {
        let mut input_shape = None;
        let mut layers = Vec::new();
        let mut class_count = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad spec line: {line}")))?;
            match key {
                "input" => {
                    let dims = value
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::Config(format!("bad input shape: {value}")))?;
                    input_shape = Some(dims);
                }
                "layer" => layers.push(parse_layer(value)?),
                "classes" => {
                    class_count = Some(
                        value
                            .parse()
                            .map_err(|_| Error::Config(format!("bad class count: {value}")))?,
                    )
                }
                _ => return Err(Error::Config(format!("unknown spec key: {key}"))),
            }
        }
        let spec = NetworkSpec {
            input_shape: input_shape.ok_or_else(|| Error::Config("missing input shape".into()))?,
            layers,
            class_count: class_count.ok_or_else(|| Error::Config("missing class count".into()))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_layer(value: &str) -> Result<Layer> {
    let parts: Vec<&str> = value.split(':').collect();
    let nums = |idx: usize| -> Result<usize> {
        parts
            .get(idx)
            .and_then(|p| p.parse().ok())
            .ok_or_else(|| Error::Config(format!("bad layer descriptor: {value}")))
    };
    match parts[0] {
        "dense" => Ok(Layer::Dense {
            input: nums(1)?,
            output: nums(2)?,
        }),
        "conv2d" => Ok(Layer::Conv2d {
            in_channels: nums(1)?,
            out_channels: nums(2)?,
            kernel: nums(3)?,
            stride: nums(4)?,
            padding: nums(5)?,
        }),
        "relu" => Ok(Layer::Relu),
        "maxpool" => Ok(Layer::MaxPool {
            kernel: nums(1)?,
            stride: nums(2)?,
        }),
        "flatten" => Ok(Layer::Flatten),
        other => Err(Error::Config(format!("unknown layer kind: {other}"))),
    }
}

/// Weight and bias tensors of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// A layer list plus its parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Option<LayerParams>>,
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams>] {
        &mut self.params
    }

    pub fn from_parts(spec: NetworkSpec, params: Vec<Option<LayerParams>>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.layers.len() {
            return Err(Error::InvalidArg(format!(
                "expected {} param slots, got {}",
                spec.layers.len(),
                params.len()
            )));
        }
        let reference = init_network(&spec, 0)?;
        for (i, (p, r)) in params.iter().zip(reference.params.iter()).enumerate() {
            match (p, r) {
                (None, None) => {}
                (Some(p), Some(r)) => {
                    if p.weights.shape() != r.weights.shape() || p.bias.shape() != r.bias.shape() {
                        return Err(Error::InvalidSpec {
                            layer: i,
                            reason: "parameter shapes do not match spec".into(),
                        });
                    }
                }
                _ => {
                    return Err(Error::InvalidSpec {
                        layer: i,
                        reason: "parameter slot does not match layer kind".into(),
                    })
                }
            }
        }
        Ok(Network { spec, params })
    }

    /// Short hex identity of spec plus parameters; used to tag crafted
    /// datasets and report metadata.
    pub fn identity(&self) -> String {
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(self.spec.canonical().as_bytes());
        for p in self.params.iter().flatten() {
            for &v in p.weights.data().iter().chain(p.bias.data()) {
                hasher.update(&v.to_le_bytes());
            }
        }
        format!("{:08x}", hasher.finalize())
    }
}

/// Per-layer activations from a forward pass. `values[0]` is the input
/// batch; `values[i+1]` is the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Activations {
    pub values: Vec<Tensor>,
}

impl Activations {
    pub fn logits(&self) -> &Tensor {
        self.values.last().unwrap()
    }
}

/// Parameter gradients mirroring `Network::params`, plus the gradient
/// with respect to the input batch.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub param_grads: Vec<Option<LayerParams>>,
    pub input_grad: Tensor,
}

/// Closed-form per-example compute and size accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub macc_ops: u64,
    pub param_count: u64,
}

/// Deterministic initialization: weights uniform in
/// `±sqrt(6 / fan_in)`, biases zero.
pub fn init_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        params.push(match layer {
            Layer::Dense { input, output } => {
                let bound = (6.0 / *input as f64).sqrt();
                let w: Vec<f64> = (0..input * output)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Some(LayerParams {
                    weights: Tensor::new(vec![*input, *output], w)?,
                    bias: Tensor::zeros(vec![*output]),
                })
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let fan_in = kernel * kernel * in_channels;
                let bound = (6.0 / fan_in as f64).sqrt();
                let w: Vec<f64> = (0..out_channels * fan_in)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Some(LayerParams {
                    weights: Tensor::new(
                        vec![*out_channels, *in_channels, *kernel, *kernel],
                        w,
                    )?,
                    bias: Tensor::zeros(vec![*out_channels]),
                })
            }
            _ => None,
        });
    }
    Ok(Network {
        spec: spec.clone(),
        params,
    })
}

fn batch_shape_of(per_example: &[usize], batch: usize) -> Vec<usize> {
    let mut s = vec![batch];
    s.extend_from_slice(per_example);
    s
}

/// Forward pass over a batch; returns every layer's output, final entry
/// being the logits of shape `(batch, class_count)`.
pub fn forward(net: &Network, batch: &Tensor) -> Result<Activations> {
    let expected = &net.spec.input_shape;
    if batch.shape().len() != expected.len() + 1 || &batch.shape()[1..] != expected.as_slice() {
        return Err(Error::ShapeMismatch {
            expected: format!("(batch, {expected:?})"),
            actual: format!("{:?}", batch.shape()),
        });
    }
    batch.check_finite("forward input")?;
    let b = batch.rows();
    let shapes = net.spec.layer_shapes()?;
    let mut values = Vec::with_capacity(net.spec.layers.len() + 1);
    values.push(batch.clone());
    for (i, layer) in net.spec.layers.iter().enumerate() {
        let input = values.last().unwrap();
        let out_shape = batch_shape_of(&shapes[i + 1], b);
        let out = match layer {
            Layer::Dense { .. } => {
                let p = net.params[i].as_ref().unwrap();
                dense_forward(input, &p.weights, &p.bias)
            }
            Layer::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => {
                let p = net.params[i].as_ref().unwrap();
                conv2d_forward(input, &p.weights, &p.bias, *kernel, *stride, *padding, &out_shape)
            }
            Layer::Relu => {
                let mut out = input.clone();
                for v in out.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                out
            }
            Layer::MaxPool { kernel, stride } => {
                maxpool_forward(input, *kernel, *stride, &out_shape)
            }
            Layer::Flatten => Tensor::new(out_shape.clone(), input.data().to_vec())?,
        };
        debug_assert_eq!(out.shape(), out_shape.as_slice());
        out.check_finite(layer.name())?;
        values.push(out);
    }
    Ok(Activations { values })
}

fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (batch, ins, outs) = (x.rows(), w.shape()[0], w.shape()[1]);
    let mut y = Tensor::zeros(vec![batch, outs]);
    let wd = w.data();
    for i in 0..batch {
        let xr = x.row(i);
        let yr = y.row_mut(i);
        yr.copy_from_slice(b.data());
        for k in 0..ins {
            let a = xr[k];
            if a != 0.0 {
                let wr = &wd[k * outs..(k + 1) * outs];
                for (yv, wv) in yr.iter_mut().zip(wr) {
                    *yv += a * wv;
                }
            }
        }
    }
    y
}

fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_shape: &[usize],
) -> Tensor {
    let [batch, ic, h, wd_] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [oc, ho, wo] = [out_shape[1], out_shape[2], out_shape[3]];
    let mut y = Tensor::zeros(out_shape.to_vec());
    let xd = x.data();
    let wd = w.data();
    let yd = y.data_mut();
    for n in 0..batch {
        for o in 0..oc {
            let bias = b.data()[o];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias;
                    for c in 0..ic {
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix as usize >= wd_ {
                                    continue;
                                }
                                let xi = ((n * ic + c) * h + iy as usize) * wd_ + ix as usize;
                                let wi = ((o * ic + c) * kernel + ky) * kernel + kx;
                                acc += xd[xi] * wd[wi];
                            }
                        }
                    }
                    yd[((n * oc + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    y
}

fn maxpool_forward(x: &Tensor, kernel: usize, stride: usize, out_shape: &[usize]) -> Tensor {
    let [batch, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [ho, wo] = [out_shape[2], out_shape[3]];
    let mut y = Tensor::zeros(out_shape.to_vec());
    let xd = x.data();
    let yd = y.data_mut();
    for n in 0..batch {
        for ch in 0..c {
            let plane = (n * c + ch) * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let v = xd[plane + (oy * stride + ky) * w + (ox * stride + kx)];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    yd[((n * c + ch) * ho + oy) * wo + ox] = best;
                }
            }
        }
    }
    y
}

/// Mean softmax cross-entropy over the batch plus its gradient with
/// respect to the logits, `(softmax - one_hot) / batch`.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let (batch, classes) = (logits.rows(), logits.row_len());
    if targets.len() != batch {
        return Err(Error::ShapeMismatch {
            expected: format!("{batch} labels"),
            actual: format!("{}", targets.len()),
        });
    }
    for (i, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: t,
                classes,
            });
        }
    }
    let mut dlogits = Tensor::zeros(vec![batch, classes]);
    let mut loss = 0.0;
    let inv_b = 1.0 / batch as f64;
    for i in 0..batch {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        loss += -(row[targets[i]] - max - log_denom);
        let dr = dlogits.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            dr[j] = ((v - max).exp() / denom) * inv_b;
        }
        dr[targets[i]] -= inv_b;
    }
    Ok((loss * inv_b, dlogits))
}

/// Reverse-mode pass: exact gradients for every parameter and for the
/// input batch.
pub fn backward(net: &Network, acts: &Activations, dlogits: &Tensor) -> Result<Gradients> {
    if acts.values.len() != net.spec.layers.len() + 1 {
        return Err(Error::InvalidArg(format!(
            "activations carry {} tensors, network has {} layers",
            acts.values.len(),
            net.spec.layers.len()
        )));
    }
    let shapes = net.spec.layer_shapes()?;
    let b = acts.values[0].rows();
    for (i, act) in acts.values.iter().enumerate() {
        let expected = batch_shape_of(&shapes[i], b);
        if act.shape() != expected.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: format!("activation {i} of shape {expected:?}"),
                actual: format!("{:?}", act.shape()),
            });
        }
    }
    if dlogits.shape() != acts.logits().shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", acts.logits().shape()),
            actual: format!("{:?}", dlogits.shape()),
        });
    }

    let mut param_grads: Vec<Option<LayerParams>> = vec![None; net.spec.layers.len()];
    let mut upstream = dlogits.clone();
    for (i, layer) in net.spec.layers.iter().enumerate().rev() {
        let input = &acts.values[i];
        upstream = match layer {
            Layer::Dense { .. } => {
                let p = net.params[i].as_ref().unwrap();
                let (dx, dw, db) = dense_backward(input, &p.weights, &upstream);
                param_grads[i] = Some(LayerParams {
                    weights: dw,
                    bias: db,
                });
                dx
            }
            Layer::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => {
                let p = net.params[i].as_ref().unwrap();
                let (dx, dw, db) =
                    conv2d_backward(input, &p.weights, &upstream, *kernel, *stride, *padding);
                param_grads[i] = Some(LayerParams {
                    weights: dw,
                    bias: db,
                });
                dx
            }
            Layer::Relu => {
                let mut dx = upstream;
                for (g, &x) in dx.data_mut().iter_mut().zip(input.data()) {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                }
                dx
            }
            Layer::MaxPool { kernel, stride } => {
                maxpool_backward(input, &upstream, *kernel, *stride)
            }
            Layer::Flatten => Tensor::new(input.shape().to_vec(), upstream.into_data())?,
        };
    }
    Ok(Gradients {
        param_grads,
        input_grad: upstream,
    })
}

fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (batch, ins, outs) = (x.rows(), w.shape()[0], w.shape()[1]);
    let mut dx = Tensor::zeros(vec![batch, ins]);
    let mut dw = Tensor::zeros(vec![ins, outs]);
    let mut db = Tensor::zeros(vec![outs]);
    let wd = w.data();
    for i in 0..batch {
        let dyr = dy.row(i);
        let dxr = dx.row_mut(i);
        for (k, slot) in dxr.iter_mut().enumerate() {
            let wr = &wd[k * outs..(k + 1) * outs];
            let mut acc = 0.0;
            for (a, b) in dyr.iter().zip(wr) {
                acc += a * b;
            }
            *slot = acc;
        }
        let dbd = db.data_mut();
        for (slot, v) in dbd.iter_mut().zip(dyr) {
            *slot += v;
        }
    }
    let dwd = dw.data_mut();
    for i in 0..batch {
        let xr = x.row(i);
        let dyr = dy.row(i);
        for k in 0..ins {
            let a = xr[k];
            if a != 0.0 {
                let dwr = &mut dwd[k * outs..(k + 1) * outs];
                for (slot, v) in dwr.iter_mut().zip(dyr) {
                    *slot += a * v;
                }
            }
        }
    }
    (dx, dw, db)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (Tensor, Tensor, Tensor) {
    let [batch, ic, h, wd_] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [oc, ho, wo] = [dy.shape()[1], dy.shape()[2], dy.shape()[3]];
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut db = Tensor::zeros(vec![oc]);
    let xd = x.data();
    let wdat = w.data();
    let dyd = dy.data();
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    let dbd = db.data_mut();
    for n in 0..batch {
        for o in 0..oc {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = dyd[((n * oc + o) * ho + oy) * wo + ox];
                    if g == 0.0 {
                        continue;
                    }
                    dbd[o] += g;
                    for c in 0..ic {
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix as usize >= wd_ {
                                    continue;
                                }
                                let xi = ((n * ic + c) * h + iy as usize) * wd_ + ix as usize;
                                let wi = ((o * ic + c) * kernel + ky) * kernel + kx;
                                dwd[wi] += g * xd[xi];
                                dxd[xi] += g * wdat[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn maxpool_backward(x: &Tensor, dy: &Tensor, kernel: usize, stride: usize) -> Tensor {
    let [batch, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [ho, wo] = [dy.shape()[2], dy.shape()[3]];
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let xd = x.data();
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for n in 0..batch {
        for ch in 0..c {
            let plane = (n * c + ch) * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    // first occurrence wins on ties
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = plane + (oy * stride + ky) * w + (ox * stride + kx);
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    dxd[best_idx] += dyd[((n * c + ch) * ho + oy) * wo + ox];
                }
            }
        }
    }
    dx
}

/// Velocity buffers for momentum SGD, mirroring the network parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocity: Vec<Option<LayerParams>>,
}

impl OptimizerState {
    pub fn new(net: &Network) -> Self {
        let velocity = net
            .params
            .iter()
            .map(|p| {
                p.as_ref().map(|p| LayerParams {
                    weights: Tensor::zeros(p.weights.shape().to_vec()),
                    bias: Tensor::zeros(p.bias.shape().to_vec()),
                })
            })
            .collect();
        OptimizerState { velocity }
    }
}

/// One momentum-SGD update: `v = momentum*v - lr*g; p += v`.
pub fn sgd_step(
    net: &mut Network,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    state: &mut OptimizerState,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::InvalidArg(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidArg(format!(
            "momentum must be in [0,1), got {momentum}"
        )));
    }
    if grads.param_grads.len() != net.params.len() {
        return Err(Error::InvalidArg(
            "gradient layout does not match network".into(),
        ));
    }
    for ((p, g), v) in net
        .params
        .iter_mut()
        .zip(&grads.param_grads)
        .zip(&mut state.velocity)
    {
        let (Some(p), Some(g), Some(v)) = (p.as_mut(), g.as_ref(), v.as_mut()) else {
            continue;
        };
        if p.weights.shape() != g.weights.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", p.weights.shape()),
                actual: format!("{:?}", g.weights.shape()),
            });
        }
        for ((pv, gv), vv) in p
            .weights
            .data_mut()
            .iter_mut()
            .zip(g.weights.data())
            .zip(v.weights.data_mut())
        {
            *vv = momentum * *vv - lr * gv;
            *pv += *vv;
        }
        for ((pv, gv), vv) in p
            .bias
            .data_mut()
            .iter_mut()
            .zip(g.bias.data())
            .zip(v.bias.data_mut())
        {
            *vv = momentum * *vv - lr * gv;
            *pv += *vv;
        }
    }
    Ok(())
}

/// Class probabilities plus argmax labels; ties break toward the lowest
/// class index.
pub fn predict(net: &Network, batch: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let acts = forward(net, batch)?;
    let logits = acts.logits();
    let (batch_n, classes) = (logits.rows(), logits.row_len());
    let mut probs = Tensor::zeros(vec![batch_n, classes]);
    let mut labels = Vec::with_capacity(batch_n);
    for i in 0..batch_n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let pr = probs.row_mut(i);
        for (slot, &v) in pr.iter_mut().zip(row) {
            *slot = (v - max).exp() / denom;
        }
        labels.push(argmax(pr));
    }
    Ok((probs, labels))
}

/// Index of the strictly greatest value; first index wins on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of examples whose argmax prediction equals the label.
pub fn accuracy(net: &Network, batch: &Tensor, labels: &[usize]) -> Result<f64> {
    let (_, predicted) = predict(net, batch)?;
    let hits = predicted
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Exact multiply-accumulate and parameter counts per single-example
/// forward pass, computed from layer shapes alone.
pub fn estimate_cost(spec: &NetworkSpec) -> Result<CostReport> {
    spec.validate().or_else(|e| {
        // a spec without a classifier head is still countable
        if spec.layers.is_empty() {
            Ok(())
        } else {
            Err(e)
        }
    })?;
    let shapes = spec.layer_shapes()?;
    let mut macc = 0u64;
    let mut params = 0u64;
    for (i, layer) in spec.layers.iter().enumerate() {
        match layer {
            Layer::Dense { input, output } => {
                macc += (input * output) as u64;
                params += (input * output + output) as u64;
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let out = &shapes[i + 1];
                let per_pos = kernel * kernel * in_channels * out_channels;
                macc += (per_pos * out[1] * out[2]) as u64;
                params += (per_pos + out_channels) as u64;
            }
            Layer::Relu | Layer::MaxPool { .. } | Layer::Flatten => {}
        }
    }
    Ok(CostReport {
        macc_ops: macc,
        param_count: params,
    })
}
