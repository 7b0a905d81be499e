//! Spatial resampling: nearest-neighbour 2x upsampling, 2x2 average pooling,
//! global average pooling and crop/pad alignment.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Largest per-axis size difference [`align_spatial`] will absorb.
pub const MAX_ALIGN_DELTA: usize = 2;

/// `out[n, c, i, j] = x[n, c, i / 2, j / 2]`.
pub fn nearest_upsample2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (plane, src) in out.chunks_mut(oh * ow).zip(x.data().chunks(h * w)) {
        for i in 0..oh {
            let row = &src[(i / 2) * w..][..w];
            for (j, o) in plane[i * ow..][..ow].iter_mut().enumerate() {
                *o = row[j / 2];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

/// Adjoint of [`nearest_upsample2x`]: sums each 2x2 block.
pub fn nearest_upsample2x_backward<T: Scalar>(grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = grad.dims4()?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::OddDimensions {
            op: "upsample backward",
            h: oh,
            w: ow,
        });
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut out = vec![T::zero(); n * c * h * w];
    for (dst, src) in out.chunks_mut(h * w).zip(grad.data().chunks(oh * ow)) {
        for i in 0..oh {
            for j in 0..ow {
                dst[(i / 2) * w + j / 2] += src[i * ow + j];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

/// Non-overlapping 2x2 mean; requires even spatial dimensions.
pub fn avg_pool2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddDimensions {
            op: "2x2 average pooling",
            h,
            w,
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (dst, src) in out.chunks_mut(oh * ow).zip(x.data().chunks(h * w)) {
        for i in 0..oh {
            for j in 0..ow {
                let top = 2 * i * w + 2 * j;
                let bottom = top + w;
                dst[i * ow + j] =
                    (src[top] + src[top + 1] + src[bottom] + src[bottom + 1]) * quarter;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub fn avg_pool2x_backward<T: Scalar>(grad: &Tensor<T>) -> Result<Tensor<T>> {
    let quarter = T::from_f64_lossy(0.25);
    Ok(nearest_upsample2x(grad)?.scale(quarter))
}

/// Mean over spatial positions: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let count = T::from_usize(h * w).unwrap();
    let out = x
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() / count)
        .collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub fn global_avg_pool_backward<T: Scalar>(
    grad: &Tensor<T>,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let (n, c) = grad.dims2()?;
    let count = T::from_usize(h * w).unwrap();
    let mut out = Vec::with_capacity(n * c * h * w);
    for &g in grad.data() {
        out.extend(std::iter::repeat_n(g / count, h * w));
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

/// Source offset along one axis: output index `i` reads source index
/// `i + offset` when that lies inside the source, zero otherwise.
fn axis_offset(src: usize, target: usize) -> usize {
    // larger: centre crop, odd remainder taken from the bottom/right
    // smaller: zero pad on the bottom/right
    if src > target {
        (src - target) / 2
    } else {
        0
    }
}

/// Center-crops or zero-pads `[N, C, H, W]` to `target_h x target_w`.
///
/// Crops remove `floor(d/2)` rows from the top and the rest from the bottom
/// (columns likewise); padding goes on the bottom/right.
pub fn align_spatial<T: Scalar>(
    x: &Tensor<T>,
    target_h: usize,
    target_w: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if h.abs_diff(target_h) > MAX_ALIGN_DELTA
        || w.abs_diff(target_w) > MAX_ALIGN_DELTA
        || target_h == 0
        || target_w == 0
    {
        return Err(Error::Alignment {
            from_h: h,
            from_w: w,
            to_h: target_h,
            to_w: target_w,
        });
    }
    if (h, w) == (target_h, target_w) {
        return Ok(x.clone());
    }
    let (oy, ox) = (axis_offset(h, target_h), axis_offset(w, target_w));
    let mut out = vec![T::zero(); n * c * target_h * target_w];
    for (dst, src) in out.chunks_mut(target_h * target_w).zip(x.data().chunks(h * w)) {
        for i in 0..target_h {
            let si = i + oy;
            if si >= h {
                continue;
            }
            for j in 0..target_w {
                let sj = j + ox;
                if sj < w {
                    dst[i * target_w + j] = src[si * w + sj];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, target_h, target_w], out))
}

/// Adjoint of [`align_spatial`] back to a `src_h x src_w` map.
pub fn align_spatial_backward<T: Scalar>(
    grad: &Tensor<T>,
    src_h: usize,
    src_w: usize,
) -> Result<Tensor<T>> {
    let (n, c, th, tw) = grad.dims4()?;
    if (th, tw) == (src_h, src_w) {
        return Ok(grad.clone());
    }
    let (oy, ox) = (axis_offset(src_h, th), axis_offset(src_w, tw));
    let mut out = vec![T::zero(); n * c * src_h * src_w];
    for (dst, g) in out.chunks_mut(src_h * src_w).zip(grad.data().chunks(th * tw)) {
        for i in 0..th {
            let si = i + oy;
            if si >= src_h {
                continue;
            }
            for j in 0..tw {
                let sj = j + ox;
                if sj < src_w {
                    dst[si * src_w + sj] += g[i * tw + j];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, src_h, src_w], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map2(rows: &[&[f64]]) -> Tensor<f64> {
        let h = rows.len();
        let w = rows[0].len();
        Tensor::new(vec![1, 1, h, w], rows.concat()).unwrap()
    }

    #[test]
    fn upsample_definition() {
        let y = nearest_upsample2x(&map2(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let g = Tensor::<f64>::ones(vec![1, 2, 4, 6]);
        let dx = nearest_upsample2x_backward(&g).unwrap();
        assert_eq!(dx.shape(), &[1, 2, 2, 3]);
        assert!(dx.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn avg_pool_and_gap() {
        let x = map2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(avg_pool2x(&x).unwrap().data(), &[2.5]);
        let x = map2(&[&[1.0, 3.0], &[5.0, 7.0]]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[4.0]);
        assert!(matches!(
            avg_pool2x(&Tensor::<f64>::zeros(vec![1, 1, 3, 2])),
            Err(Error::OddDimensions { .. })
        ));
    }

    #[test]
    fn align_crop_keeps_top_left_on_odd_delta() {
        let x = Tensor::<f64>::from_fn(vec![1, 1, 5, 5], |i| i as f64);
        let y = align_spatial(&x, 4, 4).unwrap();
        let expected: Vec<f64> = (0..4)
            .flat_map(|r| (0..4).map(move |c| (r * 5 + c) as f64))
            .collect();
        assert_eq!(y.data(), expected.as_slice());
    }

    #[test]
    fn align_crop_is_centered_on_even_delta() {
        let x = Tensor::<f64>::from_fn(vec![1, 1, 6, 6], |i| i as f64);
        let y = align_spatial(&x, 4, 4).unwrap();
        assert_eq!(y.get(&[0, 0, 0, 0]).unwrap(), 7.0);
        assert_eq!(y.get(&[0, 0, 3, 3]).unwrap(), 28.0);
    }

    #[test]
    fn align_pad_adds_zero_bottom_right() {
        let x = Tensor::<f64>::ones(vec![1, 1, 4, 4]);
        let y = align_spatial(&x, 5, 5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == 4 || j == 4 { 0.0 } else { 1.0 };
                assert_eq!(y.get(&[0, 0, i, j]).unwrap(), want);
            }
        }
        assert_eq!(align_spatial(&x, 4, 4).unwrap(), x);
    }

    #[test]
    fn align_refuses_large_mismatch() {
        let x = Tensor::<f64>::ones(vec![1, 1, 8, 8]);
        let err = align_spatial(&x, 4, 4).unwrap_err();
        assert!(matches!(err, Error::Alignment { .. }));
        assert!(err.to_string().contains("strides"));
    }

    #[test]
    fn align_backward_is_adjoint() {
        // <align(x), g> == <x, align^T(g)>
        for (src, tgt) in [(5, 4), (4, 6), (6, 4), (3, 3), (4, 5)] {
            let x = Tensor::<f64>::from_fn(vec![1, 2, src, src], |i| (i as f64 * 0.37).sin());
            let g = Tensor::<f64>::from_fn(vec![1, 2, tgt, tgt], |i| (i as f64 * 0.91).cos());
            let lhs: f64 = align_spatial(&x, tgt, tgt)
                .unwrap()
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a * b)
                .sum();
            let rhs: f64 = align_spatial_backward(&g, src, src)
                .unwrap()
                .data()
                .iter()
                .zip(x.data())
                .map(|(a, b)| a * b)
                .sum();
            assert!((lhs - rhs).abs() < 1e-12, "{src}->{tgt}");
        }
    }
}
