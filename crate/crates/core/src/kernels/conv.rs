use serde::{Deserialize, Serialize};

use super::for_each_chunk;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weight axis that indexes filters. Per-filter importance is computed over
/// slices along this axis.
pub const FILTER_AXIS: usize = 0;

/// Bias-free 2-D convolution with square odd kernels and `k / 2` padding.
///
/// Weight layout is `[out_channels, in_channels, k, k]`; axis 0 indexes
/// filters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
}

impl ConvParams {
    pub fn new(weight: Tensor, stride: usize) -> Result<Self> {
        let p = ConvParams { weight, stride };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<ConvShape> {
        let (o, i, kh, kw) = self.weight.dims4("conv2d weight")?;
        if o == 0 || i == 0 {
            return Err(Error::structural("conv2d", "zero channel count"));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::structural(
                "conv2d",
                format!("kernel must be square and odd, got {kh}x{kw}"),
            ));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::structural(
                "conv2d",
                format!("stride must be 1 or 2, got {}", self.stride),
            ));
        }
        Ok(ConvShape {
            out_channels: o,
            in_channels: i,
            kernel: kh,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(FILTER_AXIS)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.dim(2)
    }

    pub fn padding(&self) -> usize {
        self.kernel_size() / 2
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel_size();
        let p = self.padding();
        (
            (h + 2 * p - k) / self.stride + 1,
            (w + 2 * p - k) / self.stride + 1,
        )
    }
}

/// Output positions `o` in `[lo, hi)` with `0 <= o*stride + tap - pad < in_len`.
#[inline]
fn valid_range(
    tap: usize,
    pad: usize,
    stride: usize,
    in_len: usize,
    out_len: usize,
) -> (usize, usize) {
    let lo = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    let limit = in_len + pad;
    let hi = if limit > tap {
        (limit - tap).div_ceil(stride).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

fn geometry(input: &Tensor, params: &ConvParams) -> Result<Geometry> {
    let shape = params.check()?;
    let (n, cin, h, w) = input.dims4("conv2d input")?;
    if cin != shape.in_channels {
        return Err(Error::structural(
            "conv2d",
            format!(
                "input has {cin} channels, weight expects {}",
                shape.in_channels
            ),
        ));
    }
    if h == 0 || w == 0 {
        return Err(Error::structural(
            "conv2d",
            format!("empty spatial extent {h}x{w}"),
        ));
    }
    let (oh, ow) = params.output_hw(h, w);
    Ok(Geometry {
        n,
        cin,
        h,
        w,
        cout: shape.out_channels,
        k: shape.kernel,
        stride: params.stride,
        pad: params.padding(),
        oh,
        ow,
    })
}

/// Cross-correlation of `input` `[N, Cin, H, W]` with the filters in `params`.
pub fn conv2d_forward(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let g = geometry(input, params)?;
    let x = input.data();
    let wt = params.weight.data();
    let plane = g.oh * g.ow;
    let mut out = vec![0f32; g.n * g.cout * plane];

    for_each_chunk(&mut out, plane, |idx, dst| {
        let b = idx / g.cout;
        let oc = idx % g.cout;
        let mut acc = vec![0f64; plane];
        for ic in 0..g.cin {
            let src = &x[(b * g.cin + ic) * g.h * g.w..][..g.h * g.w];
            for kh in 0..g.k {
                let (y0, y1) = valid_range(kh, g.pad, g.stride, g.h, g.oh);
                for kw in 0..g.k {
                    let wv = wt[((oc * g.cin + ic) * g.k + kh) * g.k + kw] as f64;
                    let (x0, x1) = valid_range(kw, g.pad, g.stride, g.w, g.ow);
                    for oy in y0..y1 {
                        let iy = oy * g.stride + kh - g.pad;
                        let row = &src[iy * g.w..(iy + 1) * g.w];
                        let arow = &mut acc[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let off = kw as isize - g.pad as isize;
                            for ox in x0..x1 {
                                arow[ox] += wv * row[(ox as isize + off) as usize] as f64;
                            }
                        } else {
                            for ox in x0..x1 {
                                arow[ox] += wv * row[ox * g.stride + kw - g.pad] as f64;
                            }
                        }
                    }
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(&acc) {
            *d = *a as f32;
        }
    });

    let out = Tensor::from_vec(&[g.n, g.cout, g.oh, g.ow], out)?;
    out.debug_assert_finite("conv2d_forward");
    Ok(out)
}

/// Returns `(grad_input, grad_weight)`.
pub fn conv2d_backward(
    input: &Tensor,
    params: &ConvParams,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = geometry(input, params)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(Error::structural(
            "conv2d",
            format!(
                "grad_out shape {:?} does not match output [{}, {}, {}, {}]",
                grad_out.shape(),
                g.n,
                g.cout,
                g.oh,
                g.ow
            ),
        ));
    }
    let x = input.data();
    let gy = grad_out.data();
    let wt = params.weight.data();
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;

    let filter_len = g.cin * g.k * g.k;
    let mut grad_w = vec![0f32; g.cout * filter_len];
    for_each_chunk(&mut grad_w, filter_len, |oc, dst| {
        let mut acc = vec![0f64; filter_len];
        for b in 0..g.n {
            let go = &gy[(b * g.cout + oc) * plane_out..][..plane_out];
            for ic in 0..g.cin {
                let src = &x[(b * g.cin + ic) * plane_in..][..plane_in];
                for kh in 0..g.k {
                    let (y0, y1) = valid_range(kh, g.pad, g.stride, g.h, g.oh);
                    for kw in 0..g.k {
                        let (x0, x1) = valid_range(kw, g.pad, g.stride, g.w, g.ow);
                        let mut s = 0f64;
                        for oy in y0..y1 {
                            let iy = oy * g.stride + kh - g.pad;
                            let row = &src[iy * g.w..(iy + 1) * g.w];
                            let grow = &go[oy * g.ow..(oy + 1) * g.ow];
                            for ox in x0..x1 {
                                s += grow[ox] as f64 * row[ox * g.stride + kw - g.pad] as f64;
                            }
                        }
                        acc[(ic * g.k + kh) * g.k + kw] += s;
                    }
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(&acc) {
            *d = *a as f32;
        }
    });

    let mut grad_in = vec![0f32; g.n * g.cin * plane_in];
    for_each_chunk(&mut grad_in, plane_in, |idx, dst| {
        let b = idx / g.cin;
        let ic = idx % g.cin;
        let mut acc = vec![0f64; plane_in];
        for oc in 0..g.cout {
            let go = &gy[(b * g.cout + oc) * plane_out..][..plane_out];
            for kh in 0..g.k {
                let (y0, y1) = valid_range(kh, g.pad, g.stride, g.h, g.oh);
                for kw in 0..g.k {
                    let wv = wt[((oc * g.cin + ic) * g.k + kh) * g.k + kw] as f64;
                    let (x0, x1) = valid_range(kw, g.pad, g.stride, g.w, g.ow);
                    for oy in y0..y1 {
                        let iy = oy * g.stride + kh - g.pad;
                        let arow = &mut acc[iy * g.w..(iy + 1) * g.w];
                        let grow = &go[oy * g.ow..(oy + 1) * g.ow];
                        for ox in x0..x1 {
                            arow[ox * g.stride + kw - g.pad] += wv * grow[ox] as f64;
                        }
                    }
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(&acc) {
            *d = *a as f32;
        }
    });

    let grad_in = Tensor::from_vec(input.shape(), grad_in)?;
    let grad_w = Tensor::from_vec(params.weight.shape(), grad_w)?;
    grad_in.debug_assert_finite("conv2d_backward input");
    grad_w.debug_assert_finite("conv2d_backward weight");
    Ok((grad_in, grad_w))
}
