//! Builders and dense oracles shared by the integration tests.
#![allow(dead_code)]

use cimq_core::tensor::{grad_flat, Dataset, Layer, ModelGraph, NamedTensors};
use cimq_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// dense(inputs→hidden) → relu → dense(hidden→classes), with biases.
pub fn mlp(inputs: usize, hidden: usize, classes: usize, seed: u64) -> ModelGraph {
    let mut r = rng(seed);
    let mut params = NamedTensors::new();
    params.insert("l1.w".into(), random_tensor(vec![inputs, hidden], 1.0, &mut r));
    params.insert("l1.b".into(), random_tensor(vec![hidden], 0.5, &mut r));
    params.insert("l2.w".into(), random_tensor(vec![hidden, classes], 1.0, &mut r));
    params.insert("l2.b".into(), random_tensor(vec![classes], 0.5, &mut r));
    let layers = vec![
        Layer::Dense {
            name: "l1".into(),
            weight: "l1.w".into(),
            bias: Some("l1.b".into()),
        },
        Layer::Relu,
        Layer::Dense {
            name: "l2".into(),
            weight: "l2.w".into(),
            bias: Some("l2.b".into()),
        },
    ];
    ModelGraph::new(vec![inputs], classes, layers, params).unwrap()
}

/// A single convolution (no bias) followed by a dense classifier.
pub fn conv_net(k: usize, d: usize, n: usize, side: usize, stride: usize, pad: usize, seed: u64) -> ModelGraph {
    let mut r = rng(seed);
    let out = (side + 2 * pad - k) / stride + 1;
    let mut params = NamedTensors::new();
    params.insert("c.k".into(), random_tensor(vec![k, k, d, n], 1.0, &mut r));
    params.insert("fc.w".into(), random_tensor(vec![n * out * out, 2], 1.0, &mut r));
    let layers = vec![
        Layer::Conv2d {
            name: "c".into(),
            kernel: "c.k".into(),
            bias: None,
            stride,
            pad,
        },
        Layer::Relu,
        Layer::Dense {
            name: "fc".into(),
            weight: "fc.w".into(),
            bias: None,
        },
    ];
    ModelGraph::new(vec![d, side, side], 2, layers, params).unwrap()
}

pub fn random_data(n: usize, sample_shape: &[usize], classes: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut shape = vec![n];
    shape.extend_from_slice(sample_shape);
    let x = random_tensor(shape, 1.0, &mut r);
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    Dataset::new(x, labels, classes).unwrap()
}

pub fn loss_at(model: &ModelGraph, w: &[f64], batch: &Dataset) -> f64 {
    grad_flat(model, w, batch).unwrap().0
}

/// Central finite-difference gradient of the loss.
pub fn fd_grad(model: &ModelGraph, batch: &Dataset, h: f64) -> Vec<f64> {
    let w = model.flat_params();
    (0..w.len())
        .map(|i| {
            let mut p = w.clone();
            let mut m = w.clone();
            p[i] += h;
            m[i] -= h;
            (loss_at(model, &p, batch) - loss_at(model, &m, batch)) / (2.0 * h)
        })
        .collect()
}

/// Columns `cols` of the Hessian, each a central difference of exact gradients.
pub fn fd_hessian_cols(model: &ModelGraph, batch: &Dataset, cols: &[usize], h: f64) -> Vec<Vec<f64>> {
    let w = model.flat_params();
    cols.iter()
        .map(|&j| {
            let mut p = w.clone();
            let mut m = w.clone();
            p[j] += h;
            m[j] -= h;
            let gp = grad_flat(model, &p, batch).unwrap().1;
            let gm = grad_flat(model, &m, batch).unwrap().1;
            gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
        })
        .collect()
}

/// Trace of the Hessian block on `group`.
pub fn dense_block_trace(model: &ModelGraph, batch: &Dataset, group: &[usize]) -> f64 {
    fd_hessian_cols(model, batch, group, 1e-5)
        .iter()
        .zip(group)
        .map(|(col, &j)| col[j])
        .sum()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}
