use super::Tensor;
use crate::error::{CimError, Result};

/// Geometry of one convolution: input `D×H×W`, kernel `K×K×D×N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub ksize: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.ksize) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.ksize) / self.stride + 1
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_h() * self.out_w()
    }

    /// Input coordinate seen by output `(oi, oj)` at kernel offset `(m, n)`,
    /// or `None` when it falls into padding.
    #[inline]
    pub fn source(&self, oi: usize, oj: usize, m: usize, n: usize) -> Option<(usize, usize)> {
        let i = (oi * self.stride + m).checked_sub(self.pad)?;
        let j = (oj * self.stride + n).checked_sub(self.pad)?;
        (i < self.height && j < self.width).then_some((i, j))
    }
}

/// Spatial output size `floor((len + 2·pad − k) / stride) + 1`.
pub fn conv_output_dim(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(CimError::Argument("stride must be >= 1".into()));
    }
    if len + 2 * pad < k {
        return Err(CimError::Shape(format!(
            "kernel size {k} exceeds padded input extent {}",
            len + 2 * pad
        )));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

pub(crate) fn geometry(
    input_shape: &[usize],
    kernel_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    if input_shape.len() != 3 {
        return Err(CimError::dim("input rank (D×H×W)", 3, input_shape.len()));
    }
    if kernel_shape.len() != 4 {
        return Err(CimError::dim("kernel rank (K×K×D×N)", 4, kernel_shape.len()));
    }
    if kernel_shape[0] != kernel_shape[1] {
        return Err(CimError::dim("kernel width (axis 1)", kernel_shape[0], kernel_shape[1]));
    }
    if kernel_shape[2] != input_shape[0] {
        return Err(CimError::dim(
            "kernel depth (kernel axis 2) vs input channels (input axis 0)",
            input_shape[0],
            kernel_shape[2],
        ));
    }
    conv_output_dim(input_shape[1], kernel_shape[0], stride, pad)?;
    conv_output_dim(input_shape[2], kernel_shape[0], stride, pad)?;
    Ok(ConvGeom {
        depth: input_shape[0],
        height: input_shape[1],
        width: input_shape[2],
        ksize: kernel_shape[0],
        out_channels: kernel_shape[3],
        stride,
        pad,
    })
}

/// Direct-summation convolution. `input` is `D×H×W`, `kernel` is `K×K×D×N`,
/// the result is `N×H'×W'`.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = geometry(input.shape(), kernel.shape(), stride, pad)?;
    let mut out = vec![0.0; g.out_len()];
    conv_raw(&g, input.data(), kernel.data(), &mut out);
    Tensor::new(vec![g.out_channels, g.out_h(), g.out_w()], out)
}

/// Gradients of a convolution with respect to its input and kernel, given
/// the upstream gradient `grad_out` (`N×H'×W'`). Returns `(d_input, d_kernel)`.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let g = geometry(input.shape(), kernel.shape(), stride, pad)?;
    if grad_out.len() != g.out_len() {
        return Err(CimError::dim("upstream gradient length", g.out_len(), grad_out.len()));
    }
    let mut dx = vec![0.0; input.len()];
    let mut dk = vec![0.0; kernel.len()];
    conv_backward_raw(&g, input.data(), kernel.data(), grad_out.data(), Some(&mut dx), &mut dk);
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
    ))
}

pub(crate) fn conv_raw(g: &ConvGeom, x: &[f64], k: &[f64], out: &mut [f64]) {
    let (oh, ow, nc) = (g.out_h(), g.out_w(), g.out_channels);
    let plane = oh * ow;
    let mut acc = vec![0.0; nc];
    for oi in 0..oh {
        for oj in 0..ow {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for m in 0..g.ksize {
                for n in 0..g.ksize {
                    let Some((i, j)) = g.source(oi, oj, m, n) else {
                        continue;
                    };
                    for d in 0..g.depth {
                        let xv = x[(d * g.height + i) * g.width + j];
                        if xv == 0.0 {
                            continue;
                        }
                        let base = ((m * g.ksize + n) * g.depth + d) * nc;
                        for (a, kv) in acc.iter_mut().zip(&k[base..base + nc]) {
                            *a += xv * kv;
                        }
                    }
                }
            }
            for (o, a) in acc.iter().enumerate() {
                out[o * plane + oi * ow + oj] = *a;
            }
        }
    }
}

pub(crate) fn conv_backward_raw(
    g: &ConvGeom,
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    dk: &mut [f64],
) {
    let (oh, ow, nc) = (g.out_h(), g.out_w(), g.out_channels);
    let plane = oh * ow;
    let mut gy = vec![0.0; nc];
    for oi in 0..oh {
        for oj in 0..ow {
            for (o, v) in gy.iter_mut().enumerate() {
                *v = dy[o * plane + oi * ow + oj];
            }
            if gy.iter().all(|v| *v == 0.0) {
                continue;
            }
            for m in 0..g.ksize {
                for n in 0..g.ksize {
                    let Some((i, j)) = g.source(oi, oj, m, n) else {
                        continue;
                    };
                    for d in 0..g.depth {
                        let xi = (d * g.height + i) * g.width + j;
                        let base = ((m * g.ksize + n) * g.depth + d) * nc;
                        let xv = x[xi];
                        let mut back = 0.0;
                        for o in 0..nc {
                            dk[base + o] += xv * gy[o];
                            back += k[base + o] * gy[o];
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[xi] += back;
                        }
                    }
                }
            }
        }
    }
}
