//! Direct 2D cross-correlation kernels (no kernel flip) with their adjoints.
//!
//! Batch samples are processed in parallel; every output element is
//! accumulated in a fixed order (input channel, then window rows, then window
//! columns), and kernel gradients are reduced over the batch in sample order.
//! Results are therefore bit-identical for any thread count.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

/// Spatial zero padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Explicit `(rows, cols)` padding.
    Explicit(usize, usize),
    /// `(k - 1) / 2` on each axis; only odd kernel extents are admitted.
    Same,
}

impl Padding {
    pub fn resolve(self, kh: usize, kw: usize) -> Result<(usize, usize)> {
        match self {
            Padding::Explicit(ph, pw) => Ok((ph, pw)),
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::invalid(format!(
                        "same padding requires odd kernel extents, got {kh}x{kw}"
                    )));
                }
                Ok(((kh - 1) / 2, (kw - 1) / 2))
            }
        }
    }
}

/// Resolved shapes of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub depthwise: bool,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: Padding,
        depthwise: bool,
    ) -> Result<Self> {
        let (&[b, c, h, w], &[f, kc, kh, kw]) = (input, kernel) else {
            return Err(Error::shape(format!(
                "convolution needs rank-4 input and kernel, got {input:?} and {kernel:?}"
            )));
        };
        if !(stride == 1 || stride == 2) {
            return Err(Error::invalid(format!("stride must be 1 or 2, got {stride}")));
        }
        if depthwise {
            if kc != 1 || f != c {
                return Err(Error::shape(format!(
                    "depthwise kernel must be [{c}, 1, kh, kw], got {kernel:?}"
                )));
            }
        } else if kc != c {
            return Err(Error::shape(format!(
                "kernel expects {kc} input channels, input has {c}"
            )));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::shape("kernel extents must be positive"));
        }
        let (pad_h, pad_w) = padding.resolve(kh, kw)?;
        if kh > h + 2 * pad_h || kw > w + 2 * pad_w {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad_h,
                w + 2 * pad_w
            )));
        }
        Ok(ConvGeometry {
            batch: b,
            in_channels: c,
            height: h,
            width: w,
            filters: f,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            out_h: (h + 2 * pad_h - kh) / stride + 1,
            out_w: (w + 2 * pad_w - kw) / stride + 1,
            depthwise,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.filters, self.out_h, self.out_w]
    }

    /// Multiply-accumulate count of one call, ignoring zero padding.
    pub fn macs(&self) -> usize {
        let per_out = if self.depthwise { 1 } else { self.in_channels };
        self.batch * self.filters * self.out_h * self.out_w * per_out * self.kh * self.kw
    }

    /// Output indices `[lo, hi)` whose tap `i` lands inside an input extent.
    #[inline]
    fn valid(out_len: usize, stride: usize, pad: usize, tap: usize, extent: usize) -> (usize, usize) {
        // need 0 <= o*stride + tap - pad <= extent - 1
        let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
        let hi = if extent + pad > tap {
            ((extent - 1 + pad - tap) / stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Input channels read by filter `f`.
    #[inline]
    fn channels_of(&self, f: usize) -> std::ops::Range<usize> {
        if self.depthwise {
            f..f + 1
        } else {
            0..self.in_channels
        }
    }

    #[inline]
    fn kernel_channels(&self) -> usize {
        if self.depthwise {
            1
        } else {
            self.in_channels
        }
    }

    /// Visits every (filter, input channel, kernel tap, output row) with the
    /// matching input row and the valid output column range.
    #[inline]
    fn for_each_row(&self, mut f: impl FnMut(RowTask)) {
        let kc = self.kernel_channels();
        for filter in 0..self.filters {
            for c in self.channels_of(filter) {
                let kplane = (filter * kc + if self.depthwise { 0 } else { c }) * self.kh * self.kw;
                for i in 0..self.kh {
                    let (oy0, oy1) = Self::valid(self.out_h, self.stride, self.pad_h, i, self.height);
                    for j in 0..self.kw {
                        let (ox0, ox1) = Self::valid(self.out_w, self.stride, self.pad_w, j, self.width);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * self.stride + i - self.pad_h;
                            f(RowTask {
                                tap: kplane + i * self.kw + j,
                                out: (filter * self.out_h + oy) * self.out_w + ox0,
                                input: (c * self.height + iy) * self.width + ox0 * self.stride + j - self.pad_w,
                                len: ox1 - ox0,
                            });
                        }
                    }
                }
            }
        }
    }
}

/// One row of work: `len` outputs from offset `out`, reading the input every
/// `stride` elements from offset `input`, weighted by kernel entry `tap`.
#[derive(Clone, Copy)]
struct RowTask {
    tap: usize,
    out: usize,
    input: usize,
    len: usize,
}

pub fn forward(input: &Tensor, kernel: &Tensor, g: &ConvGeometry) -> Tensor {
    let mut out = Tensor::zeros(&g.output_shape());
    let sample_in = g.in_channels * g.height * g.width;
    let sample_out = g.filters * g.out_h * g.out_w;
    let x = input.data();
    let k = kernel.data();
    let s = g.stride;
    parallel::for_each_chunk_mut(out.data_mut(), sample_out, |b, o| {
        let xb = &x[b * sample_in..(b + 1) * sample_in];
        g.for_each_row(|t| {
            let w = k[t.tap];
            let dst = &mut o[t.out..t.out + t.len];
            if s == 1 {
                for (d, v) in dst.iter_mut().zip(&xb[t.input..t.input + t.len]) {
                    *d += w * v;
                }
            } else {
                for (d, v) in dst.iter_mut().zip(xb[t.input..].iter().step_by(s)) {
                    *d += w * v;
                }
            }
        });
    });
    out
}

/// Gradient with respect to the input.
pub fn backward_input(grad_out: &Tensor, kernel: &Tensor, g: &ConvGeometry) -> Tensor {
    let mut gi = Tensor::zeros(&[g.batch, g.in_channels, g.height, g.width]);
    let sample_in = g.in_channels * g.height * g.width;
    let sample_out = g.filters * g.out_h * g.out_w;
    let go = grad_out.data();
    let k = kernel.data();
    let s = g.stride;
    parallel::for_each_chunk_mut(gi.data_mut(), sample_in, |b, gib| {
        let gob = &go[b * sample_out..(b + 1) * sample_out];
        g.for_each_row(|t| {
            let w = k[t.tap];
            let src = &gob[t.out..t.out + t.len];
            if s == 1 {
                for (d, v) in gib[t.input..t.input + t.len].iter_mut().zip(src) {
                    *d += w * v;
                }
            } else {
                for (d, v) in gib[t.input..].iter_mut().step_by(s).zip(src) {
                    *d += w * v;
                }
            }
        });
    });
    gi
}

/// Gradient with respect to the kernel, summed over the batch in sample order.
pub fn backward_kernel(grad_out: &Tensor, input: &Tensor, g: &ConvGeometry) -> Tensor {
    let kc = g.kernel_channels();
    let klen = g.filters * kc * g.kh * g.kw;
    let sample_in = g.in_channels * g.height * g.width;
    let sample_out = g.filters * g.out_h * g.out_w;
    let go = grad_out.data();
    let x = input.data();
    let s = g.stride;
    let partials = parallel::map_indexed(g.batch, |b| {
        let mut part = vec![0.0; klen];
        let xb = &x[b * sample_in..(b + 1) * sample_in];
        let gob = &go[b * sample_out..(b + 1) * sample_out];
        g.for_each_row(|t| {
            let src = &gob[t.out..t.out + t.len];
            let dot: f64 = if s == 1 {
                src.iter().zip(&xb[t.input..t.input + t.len]).map(|(a, b)| a * b).sum()
            } else {
                src.iter().zip(xb[t.input..].iter().step_by(s)).map(|(a, b)| a * b).sum()
            };
            part[t.tap] += dot;
        });
        part
    });
    let mut gk = vec![0.0; klen];
    for part in &partials {
        for (a, p) in gk.iter_mut().zip(part) {
            *a += p;
        }
    }
    let shape = [g.filters, kc, g.kh, g.kw];
    Tensor::new(&shape, gk).expect("kernel gradient shape")
}

/// Plain `conv2d` without taping.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding, false)?;
    Ok(forward(input, kernel, &g))
}

/// Plain depthwise convolution without taping.
pub fn depthwise_conv2d(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding, true)?;
    Ok(forward(input, kernel, &g))
}
