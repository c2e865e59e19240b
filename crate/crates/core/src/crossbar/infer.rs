use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{mixed_mvm, HardwareConfig, TilePlacement};
use crate::error::{CimError, Result};
use crate::quant::{fake_quantize_activation, BitwidthMap};
use crate::strips::{conv_layers, ConvLayerInfo};
use crate::tensor::{argmax, Dataset, Layer, ModelGraph, Tensor};

/// Logits of one sample with every convolution executed on the crossbar
/// tiles. Biases, ReLU and dense layers run digitally in `f64`; the dense
/// layers use the weights stored in `model`.
pub fn crossbar_forward(
    model: &ModelGraph,
    placement: &TilePlacement,
    map: &BitwidthMap,
    hw: &HardwareConfig,
    sample: &[f64],
) -> Result<Vec<f64>> {
    let convs: BTreeMap<usize, ConvLayerInfo> = conv_layers(model).into_iter().map(|c| (c.layer_id, c)).collect();
    forward_with(model, placement, map, hw, &convs, sample)
}

fn forward_with(
    model: &ModelGraph,
    placement: &TilePlacement,
    map: &BitwidthMap,
    hw: &HardwareConfig,
    convs: &BTreeMap<usize, ConvLayerInfo>,
    sample: &[f64],
) -> Result<Vec<f64>> {
    let expected: usize = model.input_shape().iter().product();
    if sample.len() != expected {
        return Err(CimError::dim("sample length", expected, sample.len()));
    }
    let mut x = sample.to_vec();
    for (idx, layer) in model.layers().iter().enumerate() {
        x = match layer {
            Layer::Conv2d { bias, .. } => {
                let act = Tensor::new(model.activation_shape(idx).to_vec(), x)?;
                let mut y = mixed_mvm(placement, &convs[&idx], &act, map, hw)?.into_data();
                if let Some(b) = bias {
                    let b = param(model, b)?;
                    let plane = y.len() / b.len();
                    for (chunk, bv) in y.chunks_mut(plane).zip(b.data()) {
                        chunk.iter_mut().for_each(|v| *v += bv);
                    }
                }
                y
            }
            Layer::Dense { weight, bias, .. } => {
                let w = param(model, weight)?;
                let outputs = w.shape()[1];
                let mut y = match bias {
                    Some(b) => param(model, b)?.data().to_vec(),
                    None => vec![0.0; outputs],
                };
                for (xv, row) in x.iter().zip(w.data().chunks(outputs)) {
                    for (yo, wv) in y.iter_mut().zip(row) {
                        *yo += xv * wv;
                    }
                }
                y
            }
            Layer::Relu => x.into_iter().map(|v| v.max(0.0)).collect(),
        };
    }
    Ok(x)
}

fn param<'a>(model: &'a ModelGraph, name: &str) -> Result<&'a Tensor> {
    model
        .param(name)
        .ok_or_else(|| CimError::Argument(format!("missing parameter '{name}'")))
}

/// Software path of the crossbar arithmetic: the dequantized model with every
/// convolution input replaced by its 8-bit dequantized image.
pub fn reference_forward(compressed: &ModelGraph, sample: &[f64]) -> Result<Vec<f64>> {
    compressed.forward_hooked(sample, &mut |_, act| fake_quantize_activation(act))
}

/// Classification accuracy of [`crossbar_forward`] over a dataset.
pub fn crossbar_accuracy(
    model: &ModelGraph,
    placement: &TilePlacement,
    map: &BitwidthMap,
    hw: &HardwareConfig,
    data: &Dataset,
) -> Result<f64> {
    let convs: BTreeMap<usize, ConvLayerInfo> = conv_layers(model).into_iter().map(|c| (c.layer_id, c)).collect();
    accuracy_by(data, |s| forward_with(model, placement, map, hw, &convs, s))
}

/// Classification accuracy of [`reference_forward`] over a dataset.
pub fn reference_accuracy(compressed: &ModelGraph, data: &Dataset) -> Result<f64> {
    accuracy_by(data, |s| reference_forward(compressed, s))
}

/// Crossbar and reference paths over one dataset.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PathComparison {
    pub samples: usize,
    pub crossbar_accuracy: f64,
    pub reference_accuracy: f64,
    /// Largest `|crossbar − reference|` over every logit of every sample.
    pub max_logit_deviation: f64,
}

/// Runs every sample through both [`crossbar_forward`] and
/// [`reference_forward`].
pub fn compare_paths(
    model: &ModelGraph,
    compressed: &ModelGraph,
    placement: &TilePlacement,
    map: &BitwidthMap,
    hw: &HardwareConfig,
    data: &Dataset,
) -> Result<PathComparison> {
    if data.is_empty() {
        return Err(CimError::Argument("accuracy over an empty dataset".into()));
    }
    let convs: BTreeMap<usize, ConvLayerInfo> = conv_layers(model).into_iter().map(|c| (c.layer_id, c)).collect();
    let per_sample: Vec<(bool, bool, f64)> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let x = forward_with(model, placement, map, hw, &convs, data.sample(i))?;
            let r = reference_forward(compressed, data.sample(i))?;
            let dev = x.iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            Ok((argmax(&x) == data.label(i), argmax(&r) == data.label(i), dev))
        })
        .collect::<Result<_>>()?;
    let n = data.len() as f64;
    Ok(PathComparison {
        samples: data.len(),
        crossbar_accuracy: per_sample.iter().filter(|s| s.0).count() as f64 / n,
        reference_accuracy: per_sample.iter().filter(|s| s.1).count() as f64 / n,
        max_logit_deviation: per_sample.iter().map(|s| s.2).fold(0.0, f64::max),
    })
}

fn accuracy_by(data: &Dataset, f: impl Fn(&[f64]) -> Result<Vec<f64>> + Sync) -> Result<f64> {
    if data.is_empty() {
        return Err(CimError::Argument("accuracy over an empty dataset".into()));
    }
    let hits: Vec<bool> = (0..data.len())
        .into_par_iter()
        .map(|i| Ok(argmax(&f(data.sample(i))?) == data.label(i)))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / data.len() as f64)
}
