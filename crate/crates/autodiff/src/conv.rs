//! Grouped 2-D cross-correlation via im2col, plus its backward pass.

use crate::error::{AdError, Result};
use crate::ops::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            dilation: 1,
            padding: 0,
            groups: 1,
        }
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn conv_dims(
    x_shape: &[usize],
    k_shape: &[usize],
    spec: &Conv2dSpec,
) -> Result<ConvDims> {
    if x_shape.len() != 4 || k_shape.len() != 4 {
        return Err(AdError::ShapeError {
            op: "conv2d",
            shape: x_shape.to_vec(),
            reason: format!("expects rank-4 input and kernel, got kernel {k_shape:?}"),
        });
    }
    let (n, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (cout, kc, kh, kw) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
    if kh != kw {
        return Err(AdError::ShapeError {
            op: "conv2d",
            shape: k_shape.to_vec(),
            reason: "kernel must be square".into(),
        });
    }
    if kh % 2 == 0 {
        return Err(AdError::UnsupportedKernel { k: kh });
    }
    let g = spec.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 || kc != cin / g {
        return Err(AdError::DimMismatch {
            op: "conv2d",
            left: x_shape.to_vec(),
            right: k_shape.to_vec(),
        });
    }
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(AdError::ShapeError {
            op: "conv2d",
            shape: vec![spec.stride, spec.dilation],
            reason: "stride and dilation must be positive".into(),
        });
    }
    let span = spec.dilation * (kh - 1) + 1;
    let h_num = (h + 2 * spec.padding).checked_sub(span);
    let w_num = (w + 2 * spec.padding).checked_sub(span);
    let (h_num, w_num) = match (h_num, w_num) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(AdError::ShapeError {
                op: "conv2d",
                shape: x_shape.to_vec(),
                reason: format!("kernel span {span} exceeds padded input"),
            })
        }
    };
    Ok(ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        k: kh,
        ho: h_num / spec.stride + 1,
        wo: w_num / spec.stride + 1,
    })
}

/// Patch matrix for one (sample, group): rows are (channel, ky, kx), columns
/// output positions.
fn im2col<T: Scalar>(
    x: &[T],
    d: &ConvDims,
    spec: &Conv2dSpec,
    sample: usize,
    group: usize,
    cols: &mut [T],
) {
    let cg = d.cin / spec.groups;
    let p = d.ho * d.wo;
    for c in 0..cg {
        let ch = group * cg + c;
        let x_ch = &x[(sample * d.cin + ch) * d.h * d.w..(sample * d.cin + ch + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (c * d.k + ky) * d.k + kx;
                let out_row = &mut cols[row * p..(row + 1) * p];
                for ho in 0..d.ho {
                    let hin = (ho * spec.stride + ky * spec.dilation) as isize
                        - spec.padding as isize;
                    for wo in 0..d.wo {
                        let win = (wo * spec.stride + kx * spec.dilation) as isize
                            - spec.padding as isize;
                        out_row[ho * d.wo + wo] = if hin >= 0
                            && (hin as usize) < d.h
                            && win >= 0
                            && (win as usize) < d.w
                        {
                            x_ch[hin as usize * d.w + win as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of a patch matrix back into the input gradient.
fn col2im_acc<T: Scalar>(
    cols: &[T],
    d: &ConvDims,
    spec: &Conv2dSpec,
    sample: usize,
    group: usize,
    dx: &mut [T],
) {
    let cg = d.cin / spec.groups;
    let p = d.ho * d.wo;
    for c in 0..cg {
        let ch = group * cg + c;
        let base = (sample * d.cin + ch) * d.h * d.w;
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (c * d.k + ky) * d.k + kx;
                let col_row = &cols[row * p..(row + 1) * p];
                for ho in 0..d.ho {
                    let hin = (ho * spec.stride + ky * spec.dilation) as isize
                        - spec.padding as isize;
                    if hin < 0 || hin as usize >= d.h {
                        continue;
                    }
                    for wo in 0..d.wo {
                        let win = (wo * spec.stride + kx * spec.dilation) as isize
                            - spec.padding as isize;
                        if win < 0 || win as usize >= d.w {
                            continue;
                        }
                        let idx = base + hin as usize * d.w + win as usize;
                        dx[idx] = dx[idx] + col_row[ho * d.wo + wo];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    d: &ConvDims,
    spec: &Conv2dSpec,
) -> Vec<T> {
    let g = spec.groups;
    let cg = d.cin / g;
    let og = d.cout / g;
    let ckk = cg * d.k * d.k;
    let p = d.ho * d.wo;
    let mut out = vec![T::zero(); d.n * d.cout * p];
    let mut cols = vec![T::zero(); ckk * p];
    for sample in 0..d.n {
        for group in 0..g {
            im2col(x, d, spec, sample, group, &mut cols);
            let w_g = &kernel[group * og * ckk..(group + 1) * og * ckk];
            let out_block =
                &mut out[(sample * d.cout + group * og) * p..(sample * d.cout + (group + 1) * og) * p];
            matmul_acc(w_g, &cols, out_block, og, ckk, p);
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dk: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    gout: &[T],
    d: &ConvDims,
    spec: &Conv2dSpec,
    need_dx: bool,
    need_dk: bool,
) -> ConvGrads<T> {
    let g = spec.groups;
    let cg = d.cin / g;
    let og = d.cout / g;
    let ckk = cg * d.k * d.k;
    let p = d.ho * d.wo;
    let mut dx = need_dx.then(|| vec![T::zero(); d.n * d.cin * d.h * d.w]);
    let mut dk = need_dk.then(|| vec![T::zero(); d.cout * ckk]);
    let mut cols = vec![T::zero(); ckk * p];
    let mut dcols = vec![T::zero(); ckk * p];
    for sample in 0..d.n {
        for group in 0..g {
            let g_block =
                &gout[(sample * d.cout + group * og) * p..(sample * d.cout + (group + 1) * og) * p];
            if let Some(dk) = dk.as_mut() {
                im2col(x, d, spec, sample, group, &mut cols);
                let dk_g = &mut dk[group * og * ckk..(group + 1) * og * ckk];
                matmul_bt_acc(g_block, &cols, dk_g, og, p, ckk);
            }
            if let Some(dx) = dx.as_mut() {
                let w_g = &kernel[group * og * ckk..(group + 1) * og * ckk];
                dcols.iter_mut().for_each(|v| *v = T::zero());
                matmul_at_acc(w_g, g_block, &mut dcols, og, ckk, p);
                col2im_acc(&dcols, d, spec, sample, group, dx);
            }
        }
    }
    ConvGrads { dx, dk }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(stride: usize, dilation: usize, padding: usize, groups: usize) -> Conv2dSpec {
        Conv2dSpec {
            stride,
            dilation,
            padding,
            groups,
        }
    }

    #[test]
    fn identity_one_by_one_kernel() {
        // 1x1 kernel of value 1 reproduces the input channel mix.
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let d = conv_dims(&[1, 1, 3, 3], &[1, 1, 1, 1], &spec(1, 1, 0, 1)).unwrap();
        let out = conv2d_forward(&x, &[1.0], &d, &spec(1, 1, 0, 1));
        assert_eq!(out, x);
    }

    #[test]
    fn all_ones_three_by_three() {
        // Constant input 1, 3x3 ones kernel, padding 1: interior 9, corners 4.
        let x = vec![1.0f64; 25];
        let k = vec![1.0f64; 9];
        let sp = spec(1, 1, 1, 1);
        let d = conv_dims(&[1, 1, 5, 5], &[1, 1, 3, 3], &sp).unwrap();
        let out = conv2d_forward(&x, &k, &d, &sp);
        assert_eq!(out[0], 4.0); // corner
        assert_eq!(out[12], 9.0); // interior
        assert_eq!(out[2], 6.0); // edge
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(matches!(
            conv_dims(&[1, 1, 5, 5], &[1, 1, 4, 4], &spec(1, 1, 0, 1)),
            Err(AdError::UnsupportedKernel { k: 4 })
        ));
    }

    #[test]
    fn oversized_kernel_rejected() {
        assert!(conv_dims(&[1, 1, 3, 3], &[1, 1, 5, 5], &spec(1, 1, 0, 1)).is_err());
    }

    #[test]
    fn output_extent_formula() {
        // H' = floor((H + 2p - d(k-1) - 1)/s) + 1
        let sp = spec(2, 2, 4, 1);
        let d = conv_dims(&[1, 1, 10, 10], &[1, 1, 5, 5], &sp).unwrap();
        assert_eq!(d.ho, (10 + 8 - 2 * 4 - 1) / 2 + 1);
    }

    #[test]
    fn depthwise_groups() {
        // groups == cin: each channel convolved with its own kernel.
        let x = vec![1.0f64, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]; // [1,2,2,2]
        let k = vec![1.0f64, 3.0]; // [2,1,1,1]
        let sp = spec(1, 1, 0, 2);
        let d = conv_dims(&[1, 2, 2, 2], &[2, 1, 1, 1], &sp).unwrap();
        let out = conv2d_forward(&x, &k, &d, &sp);
        assert_eq!(out, vec![1.0, 1.0, 1.0, 1.0, 6.0, 6.0, 6.0, 6.0]);
    }
}
