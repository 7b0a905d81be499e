//! 2-D cross-correlation with stride, zero padding and channel groups.
//!
//! Two interchangeable paths: direct loops (used for depthwise kernels) and
//! im2col followed by a GEMM per sample and group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let spec = Conv2dSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let Conv2dSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            groups,
            ..
        } = *self;
        if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 || groups == 0 {
            return Err(Error::InvalidSpec(format!(
                "conv dimensions must be positive: {self:?}"
            )));
        }
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::InvalidSpec(format!(
                "channels {in_channels}->{out_channels} not divisible by {groups} groups"
            )));
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels
    }

    /// `floor((H + 2p - k) / s) + 1` per axis; errors when a side would be empty.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |len: usize| {
            let padded = len + 2 * self.padding;
            if padded < self.kernel {
                Err(Error::InvalidShape(format!(
                    "conv k={} p={} s={} leaves no output for input {h}x{w}",
                    self.kernel, self.padding, self.stride
                )))
            } else {
                Ok((padded - self.kernel) / self.stride + 1)
            }
        };
        Ok((axis(h)?, axis(w)?))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels / self.groups * self.kernel * self.kernel
    }

    /// Multiply-accumulates for one image producing an `oh x ow` map.
    pub fn macs(&self, oh: usize, ow: usize) -> u64 {
        (self.kernel * self.kernel) as u64
            * (self.in_channels / self.groups) as u64
            * self.out_channels as u64
            * oh as u64
            * ow as u64
    }

    fn check<T: Scalar>(
        &self,
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
    ) -> Result<(usize, usize, usize, usize, usize)> {
        self.validate()?;
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "conv2d input channels",
                left: x.shape().to_vec(),
                right: vec![self.in_channels],
            });
        }
        if weight.shape() != self.weight_shape() {
            return Err(Error::ShapeMismatch {
                op: "conv2d weight",
                left: weight.shape().to_vec(),
                right: self.weight_shape().to_vec(),
            });
        }
        if let Some(b) = bias {
            if b.shape() != [self.out_channels] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: b.shape().to_vec(),
                    right: vec![self.out_channels],
                });
            }
        }
        let (oh, ow) = self.output_size(h, w)?;
        Ok((n, h, w, oh, ow))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    /// Direct loops for depthwise kernels, im2col otherwise.
    #[default]
    Auto,
    Direct,
    Im2col,
}

impl ConvAlgo {
    fn resolve(self, spec: &Conv2dSpec) -> ConvAlgo {
        match self {
            ConvAlgo::Auto if spec.is_depthwise() => ConvAlgo::Direct,
            ConvAlgo::Auto => ConvAlgo::Im2col,
            other => other,
        }
    }
}

pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &Conv2dSpec,
) -> Result<Tensor<T>> {
    conv2d_with(x, weight, bias, spec, ConvAlgo::Auto)
}

pub fn conv2d_with<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &Conv2dSpec,
    algo: ConvAlgo,
) -> Result<Tensor<T>> {
    let (n, h, w, oh, ow) = spec.check(x, weight, bias)?;
    let mut out = vec![T::zero(); n * spec.out_channels * oh * ow];
    match algo.resolve(spec) {
        ConvAlgo::Direct => direct_forward(x.data(), weight.data(), &mut out, spec, n, h, w, oh, ow),
        _ => im2col_forward(x.data(), weight.data(), &mut out, spec, n, h, w, oh, ow),
    }
    if let Some(b) = bias {
        let plane = oh * ow;
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b.data()[i % spec.out_channels];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(Tensor::from_parts(vec![n, spec.out_channels, oh, ow], out))
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &Conv2dSpec,
    with_bias: bool,
    algo: ConvAlgo,
) -> Result<ConvGrads<T>> {
    let (n, h, w, oh, ow) = spec.check(x, weight, None)?;
    let expected = [n, spec.out_channels, oh, ow];
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "conv2d backward",
            left: grad_out.shape().to_vec(),
            right: expected.to_vec(),
        });
    }
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    match algo.resolve(spec) {
        ConvAlgo::Direct => direct_backward(
            x.data(),
            weight.data(),
            grad_out.data(),
            &mut dx,
            &mut dw,
            spec,
            n,
            h,
            w,
            oh,
            ow,
        ),
        _ => im2col_backward(
            x.data(),
            weight.data(),
            grad_out.data(),
            &mut dx,
            &mut dw,
            spec,
            n,
            h,
            w,
            oh,
            ow,
        ),
    }
    let bias = with_bias.then(|| {
        let plane = oh * ow;
        let mut db = vec![T::zero(); spec.out_channels];
        for (i, chunk) in grad_out.data().chunks(plane).enumerate() {
            db[i % spec.out_channels] += chunk.iter().copied().sum::<T>();
        }
        Tensor::from_parts(vec![spec.out_channels], db)
    });
    Ok(ConvGrads {
        input: Tensor::from_parts(x.shape().to_vec(), dx),
        weight: Tensor::from_parts(weight.shape().to_vec(), dw),
        bias,
    })
}

/// Input coordinate for output coordinate `o` and kernel tap `k`, if inside.
#[inline]
fn tap(o: usize, k: usize, spec: &Conv2dSpec, len: usize) -> Option<usize> {
    let pos = (o * spec.stride + k) as isize - spec.padding as isize;
    (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
}

#[allow(clippy::too_many_arguments)]
fn direct_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    out: &mut [T],
    spec: &Conv2dSpec,
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) {
    let k = spec.kernel;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    for b in 0..n {
        for co in 0..spec.out_channels {
            let g = co / cout_g;
            let out_plane = &mut out[(b * spec.out_channels + co) * oh * ow..][..oh * ow];
            for ci in 0..cin_g {
                let in_plane = &x[(b * spec.in_channels + g * cin_g + ci) * h * w..][..h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight[((co * cin_g + ci) * k + ky) * k + kx];
                        for oy in 0..oh {
                            let Some(iy) = tap(oy, ky, spec, h) else {
                                continue;
                            };
                            let row = &in_plane[iy * w..][..w];
                            let out_row = &mut out_plane[oy * ow..][..ow];
                            for (ox, o) in out_row.iter_mut().enumerate() {
                                if let Some(ix) = tap(ox, kx, spec, w) {
                                    *o += wv * row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn direct_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    dx: &mut [T],
    dw: &mut [T],
    spec: &Conv2dSpec,
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) {
    let k = spec.kernel;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    for b in 0..n {
        for co in 0..spec.out_channels {
            let g = co / cout_g;
            let g_plane = &grad_out[(b * spec.out_channels + co) * oh * ow..][..oh * ow];
            for ci in 0..cin_g {
                let base = (b * spec.in_channels + g * cin_g + ci) * h * w;
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((co * cin_g + ci) * k + ky) * k + kx;
                        let wv = weight[widx];
                        let mut acc = T::zero();
                        for oy in 0..oh {
                            let Some(iy) = tap(oy, ky, spec, h) else {
                                continue;
                            };
                            for ox in 0..ow {
                                if let Some(ix) = tap(ox, kx, spec, w) {
                                    let gv = g_plane[oy * ow + ox];
                                    acc += gv * x[base + iy * w + ix];
                                    dx[base + iy * w + ix] += gv * wv;
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}

/// Unrolls one group of one sample into `[cin_g * k * k, oh * ow]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    sample: &[T],
    group: usize,
    spec: &Conv2dSpec,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let k = spec.kernel;
    let cin_g = spec.in_channels / spec.groups;
    let plane = oh * ow;
    for ci in 0..cin_g {
        let in_plane = &sample[(group * cin_g + ci) * h * w..][..h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * plane..][..plane];
                for oy in 0..oh {
                    let dst = &mut row[oy * ow..][..ow];
                    match tap(oy, ky, spec, h) {
                        None => dst.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match tap(ox, kx, spec, w) {
                                    Some(ix) => in_plane[iy * w + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    group: usize,
    spec: &Conv2dSpec,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    sample_grad: &mut [T],
) {
    let k = spec.kernel;
    let cin_g = spec.in_channels / spec.groups;
    let plane = oh * ow;
    for ci in 0..cin_g {
        let dst = &mut sample_grad[(group * cin_g + ci) * h * w..][..h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * plane..][..plane];
                for oy in 0..oh {
                    let Some(iy) = tap(oy, ky, spec, h) else {
                        continue;
                    };
                    for ox in 0..ow {
                        if let Some(ix) = tap(ox, kx, spec, w) {
                            dst[iy * w + ix] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    out: &mut [T],
    spec: &Conv2dSpec,
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) {
    let k = spec.kernel;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let rows = cin_g * k * k;
    let plane = oh * ow;
    let mut cols = vec![T::zero(); rows * plane];
    for b in 0..n {
        let sample = &x[b * spec.in_channels * h * w..][..spec.in_channels * h * w];
        for g in 0..spec.groups {
            im2col(sample, g, spec, h, w, oh, ow, &mut cols);
            let wg = &weight[g * cout_g * rows..][..cout_g * rows];
            let dst = &mut out[(b * spec.out_channels + g * cout_g) * plane..][..cout_g * plane];
            gemm(
                MatRef::new(wg, cout_g, rows),
                MatRef::new(&cols, rows, plane),
                T::zero(),
                dst,
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    dx: &mut [T],
    dw: &mut [T],
    spec: &Conv2dSpec,
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) {
    let k = spec.kernel;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let rows = cin_g * k * k;
    let plane = oh * ow;
    let sample_len = spec.in_channels * h * w;
    let mut cols = vec![T::zero(); rows * plane];
    let mut dcols = vec![T::zero(); rows * plane];
    for b in 0..n {
        let sample = &x[b * sample_len..][..sample_len];
        for g in 0..spec.groups {
            im2col(sample, g, spec, h, w, oh, ow, &mut cols);
            let wg = &weight[g * cout_g * rows..][..cout_g * rows];
            let gg = &grad_out[(b * spec.out_channels + g * cout_g) * plane..][..cout_g * plane];
            // dW_g += dY_g * cols^T
            gemm(
                MatRef::new(gg, cout_g, plane),
                MatRef::new(&cols, rows, plane).t(),
                T::one(),
                &mut dw[g * cout_g * rows..][..cout_g * rows],
            );
            // dcols = W_g^T * dY_g
            gemm(
                MatRef::new(wg, cout_g, rows).t(),
                MatRef::new(gg, cout_g, plane),
                T::zero(),
                &mut dcols,
            );
            col2im_add(
                &dcols,
                g,
                spec,
                h,
                w,
                oh,
                ow,
                &mut dx[b * sample_len..][..sample_len],
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_formula() {
        let s = Conv2dSpec::new(3, 8, 3, 2, 1, 1).unwrap();
        assert_eq!(s.output_size(32, 32).unwrap(), (16, 16));
        assert_eq!(s.output_size(7, 7).unwrap(), (4, 4));
        let s = Conv2dSpec::new(1, 1, 5, 1, 0, 1).unwrap();
        assert!(s.output_size(4, 4).is_err());
    }

    #[test]
    fn rejects_indivisible_groups() {
        assert!(Conv2dSpec::new(6, 4, 3, 1, 1, 4).is_err());
        assert!(Conv2dSpec::new(6, 6, 3, 1, 1, 3).is_ok());
    }

    #[test]
    fn identity_pointwise_kernel() {
        let spec = Conv2dSpec::new(3, 3, 1, 1, 0, 1).unwrap();
        let x = Tensor::<f64>::from_fn(vec![2, 3, 4, 5], |i| (i as f64).sin());
        let w = Tensor::from_fn(vec![3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        for algo in [ConvAlgo::Direct, ConvAlgo::Im2col] {
            let y = conv2d_with(&x, &w, None, &spec, algo).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn box_sum_on_constant_input() {
        let spec = Conv2dSpec::new(1, 1, 3, 1, 0, 1).unwrap();
        let x = Tensor::<f32>::ones(vec![1, 1, 5, 5]);
        let w = Tensor::ones(vec![1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn shape_errors() {
        let spec = Conv2dSpec::new(3, 4, 3, 1, 1, 1).unwrap();
        let x = Tensor::<f32>::zeros(vec![1, 2, 4, 4]);
        let w = Tensor::zeros(vec![4, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, None, &spec),
            Err(Error::ShapeMismatch { .. })
        ));
        let x = Tensor::<f32>::zeros(vec![1, 3, 4, 4]);
        let w = Tensor::zeros(vec![4, 3, 1, 1]);
        assert!(conv2d(&x, &w, None, &spec).is_err());
    }
}
