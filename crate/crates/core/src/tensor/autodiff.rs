use rayon::prelude::*;

use super::model::{backward, forward_acts, relu_gates, Dataset, Gates, ModelGraph, NamedTensors};
use crate::error::{CimError, Result};

/// Samples per parallel work item. Partial sums are combined in chunk order
/// so results do not depend on scheduling.
const CHUNK: usize = 8;

/// Mean softmax cross-entropy over `batch` and its gradient per parameter.
pub fn loss_and_grad(model: &ModelGraph, batch: &Dataset) -> Result<(f64, NamedTensors)> {
    let (loss, grad) = grad_flat(model, &model.flat_params(), batch)?;
    Ok((loss, model.unflatten(&grad)?))
}

/// [`loss_and_grad`] on an explicit flat parameter vector.
pub fn grad_flat(model: &ModelGraph, flat: &[f64], batch: &Dataset) -> Result<(f64, Vec<f64>)> {
    check_batch(model, flat, batch)?;
    let n = batch.len();
    let p = flat.len();
    let partials: Vec<Result<(f64, Vec<f64>)>> = chunk_starts(n)
        .into_par_iter()
        .map(|start| {
            let mut grad = vec![0.0; p];
            let mut loss = 0.0;
            for i in start..(start + CHUNK).min(n) {
                let (l, dz, acts) = sample_loss(model, flat, batch, i, None)?;
                loss += l;
                backward(model, flat, &acts, dz, &mut grad, None);
            }
            Ok((loss, grad))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; p];
    for part in partials {
        let (l, g) = part?;
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, grad))
}

/// Mean over samples of the squared per-sample gradient, entry by entry.
///
/// The per-sample gradient of the log-likelihood is the negated per-sample
/// loss gradient; squaring removes the sign.
pub fn per_sample_sq_grad_mean(model: &ModelGraph, flat: &[f64], data: &Dataset) -> Result<Vec<f64>> {
    check_batch(model, flat, data)?;
    let n = data.len();
    let p = flat.len();
    let partials: Vec<Result<Vec<f64>>> = chunk_starts(n)
        .into_par_iter()
        .map(|start| {
            let mut acc = vec![0.0; p];
            let mut g = vec![0.0; p];
            for i in start..(start + CHUNK).min(n) {
                let (_, dz, acts) = sample_loss(model, flat, data, i, None)?;
                g.iter_mut().for_each(|v| *v = 0.0);
                backward(model, flat, &acts, dz, &mut g, None);
                acc.iter_mut().zip(&g).for_each(|(a, gi)| *a += gi * gi);
            }
            Ok(acc)
        })
        .collect();
    let mut total = vec![0.0; p];
    for part in partials {
        total.iter_mut().zip(&part?).for_each(|(a, b)| *a += b);
    }
    let inv = 1.0 / n as f64;
    total.iter_mut().for_each(|v| *v *= inv);
    Ok(total)
}

/// Default finite-difference step for [`hvp`]: `1e-4 · (1 + ‖w‖∞)`.
pub fn default_hvp_eps(model: &ModelGraph) -> f64 {
    let inf = model.flat_params().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    1e-4 * (1.0 + inf)
}

/// Hessian-vector product by central difference of gradients:
/// `(∇L(w + eps·v) − ∇L(w − eps·v)) / (2·eps)`. The model is not modified.
///
/// Both gradients are taken with every ReLU held at its activation pattern
/// at `w`, so the result is the Hessian of the smooth piece containing `w`
/// even when a step of size `eps` would cross a kink.
pub fn hvp(model: &ModelGraph, batch: &Dataset, v: &NamedTensors, eps: f64) -> Result<NamedTensors> {
    let dir = model.flatten_like(v)?;
    let objective = ModelLoss::new(model, batch);
    let hv = hvp_flat(&objective, &model.flat_params(), &dir, eps)?;
    model.unflatten(&hv)
}

/// Central-difference Hessian-vector product of any [`Objective`] at `w`.
pub fn hvp_flat(objective: &dyn Objective, w: &[f64], v: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(CimError::Argument(format!("hvp step must be positive and finite, got {eps}")));
    }
    if v.len() != w.len() {
        return Err(CimError::dim("direction length", w.len(), v.len()));
    }
    let plus: Vec<f64> = w.iter().zip(v).map(|(x, d)| x + eps * d).collect();
    let minus: Vec<f64> = w.iter().zip(v).map(|(x, d)| x - eps * d).collect();
    let (gp, gm) = objective.grad_pair(w, &plus, &minus)?;
    let inv = 1.0 / (2.0 * eps);
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) * inv).collect())
}

/// A scalar loss over a flat parameter vector with an exact gradient.
pub trait Objective: Sync {
    /// The point at which curvature is measured.
    fn params(&self) -> Vec<f64>;
    fn value_and_grad(&self, w: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Gradients at `plus` and `minus`, both on the smooth piece of the
    /// objective that contains `center`.
    fn grad_pair(&self, center: &[f64], plus: &[f64], minus: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let _ = center;
        Ok((self.value_and_grad(plus)?.1, self.value_and_grad(minus)?.1))
    }
}

/// Mean cross-entropy of a model on a fixed batch.
#[derive(Debug, Clone, Copy)]
pub struct ModelLoss<'a> {
    pub model: &'a ModelGraph,
    pub batch: &'a Dataset,
}

impl<'a> ModelLoss<'a> {
    pub fn new(model: &'a ModelGraph, batch: &'a Dataset) -> Self {
        ModelLoss { model, batch }
    }
}

impl Objective for ModelLoss<'_> {
    fn params(&self) -> Vec<f64> {
        self.model.flat_params()
    }

    fn value_and_grad(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        grad_flat(self.model, w, self.batch)
    }

    fn grad_pair(&self, center: &[f64], plus: &[f64], minus: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (model, batch) = (self.model, self.batch);
        check_batch(model, center, batch)?;
        let n = batch.len();
        let p = center.len();
        let partials: Vec<Result<(Vec<f64>, Vec<f64>)>> = chunk_starts(n)
            .into_par_iter()
            .map(|start| {
                let (mut gp, mut gm) = (vec![0.0; p], vec![0.0; p]);
                for i in start..(start + CHUNK).min(n) {
                    let gates = relu_gates(model, &forward_acts(model, center, batch.sample(i), None, None));
                    for (w, g) in [(plus, &mut gp), (minus, &mut gm)] {
                        let (_, dz, acts) = sample_loss(model, w, batch, i, Some(&gates))?;
                        backward(model, w, &acts, dz, g, Some(&gates));
                    }
                }
                Ok((gp, gm))
            })
            .collect();
        let (mut gp, mut gm) = (vec![0.0; p], vec![0.0; p]);
        for part in partials {
            let (a, b) = part?;
            gp.iter_mut().zip(&a).for_each(|(x, y)| *x += y);
            gm.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        }
        let inv = 1.0 / n as f64;
        gp.iter_mut().chain(gm.iter_mut()).for_each(|g| *g *= inv);
        Ok((gp, gm))
    }
}

/// `L(w) = ½ wᵀ A w` for a symmetric matrix `A`, evaluated around `point`.
/// Its Hessian is `A` everywhere, which makes it a convenient oracle.
#[derive(Debug, Clone)]
pub struct Quadratic {
    dim: usize,
    matrix: Vec<f64>,
    point: Vec<f64>,
}

impl Quadratic {
    /// `matrix` is row-major `dim × dim` and must be symmetric.
    pub fn new(matrix: Vec<f64>, point: Vec<f64>) -> Result<Self> {
        let dim = point.len();
        if matrix.len() != dim * dim {
            return Err(CimError::dim("matrix entries", dim * dim, matrix.len()));
        }
        for i in 0..dim {
            for j in 0..i {
                if matrix[i * dim + j] != matrix[j * dim + i] {
                    return Err(CimError::Argument(format!("matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Quadratic { dim, matrix, point })
    }

    pub fn diagonal(diag: &[f64], point: Vec<f64>) -> Result<Self> {
        let dim = diag.len();
        let mut matrix = vec![0.0; dim * dim];
        for (i, d) in diag.iter().enumerate() {
            matrix[i * dim + i] = *d;
        }
        Quadratic::new(matrix, point)
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }
}

impl Objective for Quadratic {
    fn params(&self) -> Vec<f64> {
        self.point.clone()
    }

    fn value_and_grad(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        if w.len() != self.dim {
            return Err(CimError::dim("parameter length", self.dim, w.len()));
        }
        let grad: Vec<f64> = (0..self.dim)
            .map(|i| {
                self.matrix[i * self.dim..(i + 1) * self.dim]
                    .iter()
                    .zip(w)
                    .map(|(a, x)| a * x)
                    .sum()
            })
            .collect();
        let value = 0.5 * w.iter().zip(&grad).map(|(x, g)| x * g).sum::<f64>();
        Ok((value, grad))
    }
}

fn chunk_starts(n: usize) -> Vec<usize> {
    (0..n).step_by(CHUNK).collect()
}

fn check_batch(model: &ModelGraph, flat: &[f64], batch: &Dataset) -> Result<()> {
    if batch.is_empty() {
        return Err(CimError::Argument("empty batch".into()));
    }
    if flat.len() != model.param_count() {
        return Err(CimError::dim("flat parameter length", model.param_count(), flat.len()));
    }
    if batch.sample_shape() != model.input_shape() {
        let expected: usize = model.input_shape().iter().product();
        return Err(CimError::dim("sample size", expected, batch.sample_len()));
    }
    if batch.num_classes() != model.num_classes() {
        return Err(CimError::dim("class count", model.num_classes(), batch.num_classes()));
    }
    Ok(())
}

/// Loss of sample `i`, gradient w.r.t. its logits, and the cached activations.
fn sample_loss(
    model: &ModelGraph,
    flat: &[f64],
    data: &Dataset,
    i: usize,
    gates: Option<&Gates>,
) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    let acts = forward_acts(model, flat, data.sample(i), None, gates);
    let z = acts.last().unwrap();
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
    let lse = zmax + sum.ln();
    let y = data.label(i);
    let loss = lse - z[y];
    if !loss.is_finite() {
        return Err(first_non_finite(&acts, i));
    }
    let mut dz: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
    dz[y] -= 1.0;
    Ok((loss, dz, acts))
}

fn first_non_finite(acts: &[Vec<f64>], sample: usize) -> CimError {
    for (idx, a) in acts.iter().enumerate() {
        if a.iter().any(|v| !v.is_finite()) {
            let (layer, context) = if idx == 0 {
                (0, format!("input of sample {sample}"))
            } else {
                (idx - 1, format!("output of layer {} for sample {sample}", idx - 1))
            };
            return CimError::Numeric { layer, context };
        }
    }
    CimError::Numeric {
        layer: acts.len().saturating_sub(2),
        context: format!("cross-entropy of sample {sample}"),
    }
}
