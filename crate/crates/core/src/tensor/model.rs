use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::{self, ConvGeom};
use super::Tensor;
use crate::error::{CimError, Result};

/// Parameters keyed by name. Iteration order defines the flat layout.
pub type NamedTensors = BTreeMap<String, Tensor>;

/// One entry of the fixed layer vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    /// Kernel parameter is `K×K×D×N`; optional bias has length `N`.
    Conv2d {
        name: String,
        kernel: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
        stride: usize,
        pad: usize,
    },
    /// Weight parameter is `in×out`; the input is flattened first.
    Dense {
        name: String,
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    Relu,
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv2d { name, .. } | Layer::Dense { name, .. } => name,
            Layer::Relu => "relu",
        }
    }
}

/// Location of one parameter tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub(crate) enum Step {
    Conv {
        geom: ConvGeom,
        k_off: usize,
        b_off: Option<usize>,
    },
    Dense {
        inputs: usize,
        outputs: usize,
        w_off: usize,
        b_off: Option<usize>,
    },
    Relu,
}

/// A feed-forward network over the fixed layer vocabulary, ending in logits
/// scored by softmax cross-entropy.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<Layer>,
    params: NamedTensors,
    slots: Vec<ParamSlot>,
    steps: Vec<Step>,
    act_shapes: Vec<Vec<usize>>,
}

impl ModelGraph {
    pub fn new(
        input_shape: Vec<usize>,
        num_classes: usize,
        layers: Vec<Layer>,
        params: NamedTensors,
    ) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(CimError::Shape(format!("invalid input shape {input_shape:?}")));
        }
        if num_classes < 2 {
            return Err(CimError::Argument("a classifier needs at least 2 classes".into()));
        }
        let mut slots = Vec::with_capacity(params.len());
        let mut offset = 0;
        for (name, t) in &params {
            slots.push(ParamSlot {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len(),
            });
            offset += t.len();
        }
        let slot = |name: &str| -> Result<&ParamSlot> {
            slots
                .iter()
                .find(|s| s.name == name)
                .ok_or_else(|| CimError::Shape(format!("missing parameter '{name}'")))
        };

        let mut steps = Vec::with_capacity(layers.len());
        let mut act_shapes = vec![input_shape.clone()];
        let mut used = BTreeMap::new();
        for (idx, layer) in layers.iter().enumerate() {
            let cur = act_shapes.last().unwrap().clone();
            let mut claim = |name: &str| -> Result<()> {
                if let Some(prev) = used.insert(name.to_string(), idx) {
                    return Err(CimError::Shape(format!(
                        "parameter '{name}' used by layers {prev} and {idx}"
                    )));
                }
                Ok(())
            };
            let (step, next) = match layer {
                Layer::Conv2d {
                    kernel,
                    bias,
                    stride,
                    pad,
                    ..
                } => {
                    claim(kernel)?;
                    let ks = slot(kernel)?;
                    let geom = conv::geometry(&cur, &ks.shape, *stride, *pad)
                        .map_err(|e| CimError::Shape(format!("layer {idx}: {e}")))?;
                    let b_off = match bias {
                        Some(b) => {
                            claim(b)?;
                            let bs = slot(b)?;
                            if bs.len != geom.out_channels {
                                return Err(CimError::dim(
                                    format!("layer {idx} bias length"),
                                    geom.out_channels,
                                    bs.len,
                                ));
                            }
                            Some(bs.offset)
                        }
                        None => None,
                    };
                    let next = vec![geom.out_channels, geom.out_h(), geom.out_w()];
                    (
                        Step::Conv {
                            geom,
                            k_off: ks.offset,
                            b_off,
                        },
                        next,
                    )
                }
                Layer::Dense { weight, bias, .. } => {
                    claim(weight)?;
                    let ws = slot(weight)?;
                    let inputs: usize = cur.iter().product();
                    if ws.shape.len() != 2 || ws.shape[0] != inputs {
                        return Err(CimError::Shape(format!(
                            "layer {idx}: dense weight shape {:?} does not accept {inputs} inputs",
                            ws.shape
                        )));
                    }
                    let outputs = ws.shape[1];
                    let b_off = match bias {
                        Some(b) => {
                            claim(b)?;
                            let bs = slot(b)?;
                            if bs.len != outputs {
                                return Err(CimError::dim(
                                    format!("layer {idx} bias length"),
                                    outputs,
                                    bs.len,
                                ));
                            }
                            Some(bs.offset)
                        }
                        None => None,
                    };
                    (
                        Step::Dense {
                            inputs,
                            outputs,
                            w_off: ws.offset,
                            b_off,
                        },
                        vec![outputs],
                    )
                }
                Layer::Relu => (Step::Relu, cur),
            };
            steps.push(step);
            act_shapes.push(next);
        }
        let out: usize = act_shapes.last().unwrap().iter().product();
        if out != num_classes {
            return Err(CimError::dim("logit count", num_classes, out));
        }
        if let Some(unused) = slots.iter().find(|s| !used.contains_key(&s.name)) {
            return Err(CimError::Shape(format!("parameter '{}' is not used by any layer", unused.name)));
        }
        Ok(ModelGraph {
            input_shape,
            num_classes,
            layers,
            params,
            slots,
            steps,
            act_shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &NamedTensors {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.slots.iter().map(|s| s.len).sum()
    }

    /// Shape of the tensor entering layer `i`; index `layers().len()` gives the logits.
    pub fn activation_shape(&self, i: usize) -> &[usize] {
        &self.act_shapes[i]
    }

    /// All parameters concatenated in layout order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for t in self.params.values() {
            flat.extend_from_slice(t.data());
        }
        flat
    }

    pub fn with_flat_params(&self, flat: &[f64]) -> Result<ModelGraph> {
        if flat.len() != self.param_count() {
            return Err(CimError::dim("flat parameter length", self.param_count(), flat.len()));
        }
        let mut m = self.clone();
        for (slot, t) in m.slots.iter().zip(m.params.values_mut()) {
            t.data_mut().copy_from_slice(&flat[slot.offset..slot.offset + slot.len]);
        }
        Ok(m)
    }

    /// Replaces one parameter tensor; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let cur = self
            .params
            .get_mut(name)
            .ok_or_else(|| CimError::Argument(format!("unknown parameter '{name}'")))?;
        if cur.shape() != value.shape() {
            return Err(CimError::Shape(format!(
                "parameter '{name}' has shape {:?}, replacement has {:?}",
                cur.shape(),
                value.shape()
            )));
        }
        *cur = value;
        Ok(())
    }

    /// Flattens named tensors shaped like this model's parameters.
    pub fn flatten_like(&self, named: &NamedTensors) -> Result<Vec<f64>> {
        let mut flat = Vec::with_capacity(self.param_count());
        for slot in &self.slots {
            let t = named
                .get(&slot.name)
                .ok_or_else(|| CimError::Argument(format!("missing tensor for '{}'", slot.name)))?;
            if t.shape() != slot.shape.as_slice() {
                return Err(CimError::Shape(format!(
                    "tensor for '{}' has shape {:?}, parameter has {:?}",
                    slot.name,
                    t.shape(),
                    slot.shape
                )));
            }
            flat.extend_from_slice(t.data());
        }
        Ok(flat)
    }

    pub fn unflatten(&self, flat: &[f64]) -> Result<NamedTensors> {
        if flat.len() != self.param_count() {
            return Err(CimError::dim("flat parameter length", self.param_count(), flat.len()));
        }
        self.slots
            .iter()
            .map(|s| {
                Ok((
                    s.name.clone(),
                    Tensor::new(s.shape.clone(), flat[s.offset..s.offset + s.len].to_vec())?,
                ))
            })
            .collect()
    }

    /// Logits for one sample.
    pub fn forward(&self, sample: &[f64]) -> Result<Vec<f64>> {
        self.forward_hooked(sample, &mut |_, _| {})
    }

    /// Forward pass where `conv_input_hook(layer_id, activation)` may rewrite
    /// every convolution input before it is consumed.
    pub fn forward_hooked(
        &self,
        sample: &[f64],
        conv_input_hook: &mut dyn FnMut(usize, &mut [f64]),
    ) -> Result<Vec<f64>> {
        let expected: usize = self.input_shape.iter().product();
        if sample.len() != expected {
            return Err(CimError::dim("sample length", expected, sample.len()));
        }
        let flat = self.flat_params();
        let mut acts = forward_acts(self, &flat, sample, Some(conv_input_hook), None);
        Ok(acts.pop().unwrap())
    }

    pub fn predict(&self, sample: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(sample)?))
    }

    /// Fraction of correctly classified samples.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let mut correct = 0usize;
        for i in 0..data.len() {
            if self.predict(data.sample(i))? == data.label(i) {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-step ReLU activation pattern: `gates[idx][j]` is true where the input
/// of ReLU step `idx` is positive. Non-ReLU steps hold an empty vector.
pub(crate) type Gates = Vec<Vec<bool>>;

pub(crate) fn relu_gates(model: &ModelGraph, acts: &[Vec<f64>]) -> Gates {
    model
        .steps
        .iter()
        .enumerate()
        .map(|(idx, step)| match step {
            Step::Relu => acts[idx].iter().map(|v| *v > 0.0).collect(),
            _ => Vec::new(),
        })
        .collect()
}

/// Activations of every layer boundary: `acts[0]` is the input, `acts[i+1]`
/// the output of layer `i`. With `gates`, every ReLU passes exactly the
/// entries the pattern marks open, whatever the sign of its input.
pub(crate) fn forward_acts(
    model: &ModelGraph,
    flat: &[f64],
    sample: &[f64],
    mut hook: Option<&mut dyn FnMut(usize, &mut [f64])>,
    gates: Option<&Gates>,
) -> Vec<Vec<f64>> {
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(model.steps.len() + 1);
    acts.push(sample.to_vec());
    for (idx, step) in model.steps.iter().enumerate() {
        let x = acts.last_mut().unwrap();
        let y = match step {
            Step::Conv { geom, k_off, b_off } => {
                if let Some(h) = hook.as_deref_mut() {
                    h(idx, x);
                }
                let klen = geom.ksize * geom.ksize * geom.depth * geom.out_channels;
                let mut y = vec![0.0; geom.out_len()];
                conv::conv_raw(geom, x, &flat[*k_off..k_off + klen], &mut y);
                if let Some(b) = b_off {
                    let plane = geom.out_h() * geom.out_w();
                    for (o, chunk) in y.chunks_mut(plane).enumerate() {
                        let bv = flat[b + o];
                        chunk.iter_mut().for_each(|v| *v += bv);
                    }
                }
                y
            }
            Step::Dense {
                inputs,
                outputs,
                w_off,
                b_off,
            } => {
                let w = &flat[*w_off..w_off + inputs * outputs];
                let mut y = match b_off {
                    Some(b) => flat[*b..b + outputs].to_vec(),
                    None => vec![0.0; *outputs],
                };
                for (i, xv) in x.iter().enumerate() {
                    if *xv == 0.0 {
                        continue;
                    }
                    let row = &w[i * outputs..(i + 1) * outputs];
                    for (yo, wv) in y.iter_mut().zip(row) {
                        *yo += xv * wv;
                    }
                }
                y
            }
            Step::Relu => match gates {
                Some(g) => x.iter().zip(&g[idx]).map(|(v, open)| if *open { *v } else { 0.0 }).collect(),
                None => x.iter().map(|v| v.max(0.0)).collect(),
            },
        };
        acts.push(y);
    }
    acts
}

/// Accumulates the parameter gradient of one sample into `grad`, given the
/// gradient with respect to the logits.
pub(crate) fn backward(
    model: &ModelGraph,
    flat: &[f64],
    acts: &[Vec<f64>],
    dlogits: Vec<f64>,
    grad: &mut [f64],
    gates: Option<&Gates>,
) {
    let mut dy = dlogits;
    for (idx, step) in model.steps.iter().enumerate().rev() {
        let x = &acts[idx];
        let need_dx = idx > 0;
        dy = match step {
            Step::Conv { geom, k_off, b_off } => {
                let klen = geom.ksize * geom.ksize * geom.depth * geom.out_channels;
                if let Some(b) = b_off {
                    let plane = geom.out_h() * geom.out_w();
                    for (o, chunk) in dy.chunks(plane).enumerate() {
                        grad[b + o] += chunk.iter().sum::<f64>();
                    }
                }
                let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
                let (_, gk) = grad.split_at_mut(*k_off);
                conv::conv_backward_raw(
                    geom,
                    x,
                    &flat[*k_off..k_off + klen],
                    &dy,
                    need_dx.then_some(dx.as_mut_slice()),
                    &mut gk[..klen],
                );
                dx
            }
            Step::Dense {
                inputs,
                outputs,
                w_off,
                b_off,
            } => {
                if let Some(b) = b_off {
                    for (g, d) in grad[*b..b + outputs].iter_mut().zip(&dy) {
                        *g += d;
                    }
                }
                let w = &flat[*w_off..w_off + inputs * outputs];
                let mut dx = vec![0.0; *inputs];
                for i in 0..*inputs {
                    let xv = x[i];
                    let row = i * outputs;
                    let mut back = 0.0;
                    for o in 0..*outputs {
                        grad[w_off + row + o] += xv * dy[o];
                        back += w[row + o] * dy[o];
                    }
                    dx[i] = back;
                }
                dx
            }
            // subgradient 0 at the kink
            Step::Relu => match gates {
                Some(g) => dy.iter().zip(&g[idx]).map(|(d, open)| if *open { *d } else { 0.0 }).collect(),
                None => dy.iter().zip(x).map(|(d, xv)| if *xv > 0.0 { *d } else { 0.0 }).collect(),
            },
        };
    }
}

/// Labelled samples; `inputs` is `n × (sample shape)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape().len() < 2 {
            return Err(CimError::Shape("dataset inputs need a sample axis and a feature axis".into()));
        }
        let n = inputs.shape()[0];
        if labels.len() != n {
            return Err(CimError::dim("label count", n, labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(CimError::Argument(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.sample_len();
        &self.inputs.data()[i * len..(i + 1) * len]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(CimError::Argument("empty subset".into()));
        }
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(CimError::Argument(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        Dataset::new(Tensor::new(shape, data)?, labels, self.num_classes)
    }

    /// A reproducible subsample of `min(count, n)` samples, kept in dataset order.
    pub fn seeded_subsample(&self, count: usize, seed: u64) -> Result<Dataset> {
        if count >= self.len() {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, self.len(), count).into_vec();
        idx.sort_unstable();
        self.subset(&idx)
    }
}
