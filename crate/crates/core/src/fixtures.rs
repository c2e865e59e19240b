//! Bundled synthetic workloads: Gaussian-blob images and a small two-conv
//! network trained on them, optionally with one frozen dominant strip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::strips::{decompose_strips, StripKey};
use crate::tensor::{grad_flat, Dataset, Layer, ModelGraph, NamedTensors, Tensor};

pub const IMAGE_SIDE: usize = 8;
pub const CLASSES: usize = 4;
pub const TRAIN_SAMPLES: usize = 512;
pub const EVAL_SAMPLES: usize = 256;

const CENTERS: [(f64, f64); CLASSES] = [(2.0, 2.0), (2.0, 5.0), (5.0, 2.0), (5.0, 5.0)];

/// `n` single-channel 8×8 images, one blurred blob each, labels cycling
/// through the four class centres.
pub fn blob_dataset(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.9).expect("valid sigma");
    let pixel = Normal::new(0.0, 0.1).expect("valid sigma");
    let side = IMAGE_SIDE;
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % CLASSES;
        let (cy, cx) = CENTERS[label];
        let cy = cy + jitter.sample(&mut rng);
        let cx = cx + jitter.sample(&mut rng);
        let width = rng.random_range(1.4..2.2);
        let amp = rng.random_range(0.7..1.3);
        for y in 0..side {
            for x in 0..side {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                data.push(amp * (-d2 / (2.0 * width * width)).exp() + pixel.sample(&mut rng));
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![n, 1, side, side], data)?, labels, CLASSES)
}

/// conv 3×3 (1→2, pad 1) → relu → conv 3×3 (2→4, stride 2, pad 1) → relu →
/// dense 64→4, He-initialised. 54 strips in total.
pub fn toy_cnn(seed: u64) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut he = |shape: Vec<usize>, fan_in: usize| -> Result<Tensor> {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid sigma");
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
    };
    let mut params = NamedTensors::new();
    params.insert("conv1.kernel".into(), he(vec![3, 3, 1, 2], 9)?);
    params.insert("conv1.bias".into(), Tensor::zeros(vec![2])?);
    params.insert("conv2.kernel".into(), he(vec![3, 3, 2, 4], 18)?);
    params.insert("conv2.bias".into(), Tensor::zeros(vec![4])?);
    params.insert("fc.weight".into(), he(vec![64, CLASSES], 64)?);
    params.insert("fc.bias".into(), Tensor::zeros(vec![CLASSES])?);
    let layers = vec![
        Layer::Conv2d {
            name: "conv1".into(),
            kernel: "conv1.kernel".into(),
            bias: Some("conv1.bias".into()),
            stride: 1,
            pad: 1,
        },
        Layer::Relu,
        Layer::Conv2d {
            name: "conv2".into(),
            kernel: "conv2.kernel".into(),
            bias: Some("conv2.bias".into()),
            stride: 2,
            pad: 1,
        },
        Layer::Relu,
        Layer::Dense {
            name: "fc".into(),
            weight: "fc.weight".into(),
            bias: Some("fc.bias".into()),
        },
    ];
    ModelGraph::new(vec![1, IMAGE_SIDE, IMAGE_SIDE], CLASSES, layers, params)
}

/// Full-batch gradient descent with heavy-ball momentum. Entries listed in
/// `frozen` keep their values.
pub fn train(model: &ModelGraph, data: &Dataset, steps: usize, lr: f64, frozen: &[usize]) -> Result<ModelGraph> {
    let mut w = model.flat_params();
    let mut velocity = vec![0.0; w.len()];
    for _ in 0..steps {
        let (_, mut g) = grad_flat(model, &w, data)?;
        for &i in frozen {
            g[i] = 0.0;
        }
        for ((wi, vi), gi) in w.iter_mut().zip(velocity.iter_mut()).zip(&g) {
            *vi = 0.9 * *vi - lr * gi;
            *wi += *vi;
        }
    }
    model.with_flat_params(&w)
}

/// A trained toy network with its data.
#[derive(Debug, Clone)]
pub struct ToyFixture {
    pub model: ModelGraph,
    pub train: Dataset,
    pub eval: Dataset,
    /// The strip every prediction depends on, for the rigged variant.
    pub dominant: Option<StripKey>,
}

pub const TRAIN_STEPS: usize = 150;
pub const LEARNING_RATE: f64 = 0.05;

/// The toy CNN trained on the blob data.
pub fn toy_fixture(seed: u64) -> Result<ToyFixture> {
    build(seed, false)
}

/// The toy CNN with a single information path. The first convolution is a
/// fixed pair of box filters, the dense layer reads only output channel 0 of
/// the second convolution, and that channel keeps only its centre strip.
/// Every other strip is zero, invisible to the loss, or a small tap of a
/// smoothing filter, so the centre strip's sensitivity dominates.
pub fn rigged_fixture(seed: u64) -> Result<ToyFixture> {
    build(seed, true)
}

/// Key of the strip [`rigged_fixture`] routes everything through.
pub const DOMINANT_STRIP: StripKey = StripKey {
    layer_id: 2,
    out_channel: 0,
    m: 1,
    n: 1,
};

fn build(seed: u64, rigged: bool) -> Result<ToyFixture> {
    let train_set = blob_dataset(TRAIN_SAMPLES, seed)?;
    let eval_set = blob_dataset(EVAL_SAMPLES, seed ^ 0x5eed_e7a1)?;
    let mut model = toy_cnn(seed.wrapping_add(1))?;
    let mut frozen = Vec::new();
    if rigged {
        let mut w = model.flat_params();
        for s in decompose_strips(&model)? {
            if s.key.layer_id == 0 {
                let tap = [0.35, 0.25][s.key.out_channel];
                s.flat_indices.iter().for_each(|&i| w[i] = tap);
                frozen.extend_from_slice(&s.flat_indices);
            } else if s.key == DOMINANT_STRIP {
                // start alive: a negative start can leave the only path dead
                s.flat_indices.iter().for_each(|&i| w[i] = 0.5);
            } else if s.key.out_channel == 0 {
                s.flat_indices.iter().for_each(|&i| w[i] = 0.0);
                frozen.extend_from_slice(&s.flat_indices);
            }
        }
        // dense weights are `64 × 4`, inputs ordered channel-major, 16 per channel
        let fc = model.slot("fc.weight").expect("toy network has fc.weight").offset;
        for i in (16 * CLASSES..64 * CLASSES).map(|i| fc + i) {
            w[i] = 0.0;
            frozen.push(i);
        }
        model = model.with_flat_params(&w)?;
    }
    let model = train(&model, &train_set, TRAIN_STEPS, LEARNING_RATE, &frozen)?;
    Ok(ToyFixture {
        model,
        train: train_set,
        eval: eval_set,
        dominant: rigged.then_some(DOMINANT_STRIP),
    })
}
