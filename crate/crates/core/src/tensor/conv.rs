//! im2col convolution kernels over NHWC batches.
//!
//! Everything here is cross-correlation (no kernel flip). A transposed
//! convolution is the input-adjoint of the convolution it is paired with, so
//! the three raw routines below cover both layer kinds and their gradients.

use super::Real;
use crate::error::{Error, Result};

/// Upper bound on im2col buffer size, in elements.
const COLS_BUDGET: usize = 1 << 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output extent `ceil(in / stride)`; zeros split evenly, extra on the
    /// high side.
    Same,
    /// No padding.
    Valid,
}

/// Shape bookkeeping for one convolution `[n, in_h, in_w, in_c] ->
/// [n, out_h, out_w, out_c]` with kernel `[kh, kw, in_c, out_c]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn same_pad(input: usize, output: usize, kernel: usize, stride: usize) -> usize {
    ((output - 1) * stride + kernel).saturating_sub(input)
}

impl ConvGeometry {
    /// Geometry of a forward convolution.
    pub fn conv(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (n, h, w, ci) = nhwc("conv2d", input)?;
        let (kh, kw, kci, co) = kernel4("conv2d", kernel)?;
        if kci != ci {
            return Err(Error::dim(
                "conv2d",
                format!("input has {ci} channels but kernel expects {kci}"),
            ));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be >= 1".into()));
        }
        let (out_h, out_w, pad_h, pad_w) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                (oh, ow, same_pad(h, oh, kh, stride), same_pad(w, ow, kw, stride))
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::dim(
                        "conv2d",
                        format!("kernel {kh}x{kw} larger than input {h}x{w}"),
                    ));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        if out_h == 0 || out_w == 0 {
            return Err(Error::dim("conv2d", "empty output"));
        }
        Ok(ConvGeometry {
            batch: n,
            in_h: h,
            in_w: w,
            in_c: ci,
            out_h,
            out_w,
            out_c: co,
            kh,
            kw,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        })
    }

    /// Geometry of the convolution whose input-adjoint maps `input` (shaped
    /// like that convolution's output) to the transposed-convolution output.
    pub fn transpose(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (n, h, w, c) = nhwc("conv2d_transpose", input)?;
        let (kh, kw, kci, kco) = kernel4("conv2d_transpose", kernel)?;
        if kco != c {
            return Err(Error::dim(
                "conv2d_transpose",
                format!("input has {c} channels but kernel emits {kco}"),
            ));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d_transpose stride must be >= 1".into()));
        }
        let (big_h, big_w) = match padding {
            Padding::Same => (h * stride, w * stride),
            Padding::Valid => ((h - 1) * stride + kh, (w - 1) * stride + kw),
        };
        let g = Self::conv(&[n, big_h, big_w, kci], kernel, stride, padding)?;
        debug_assert_eq!((g.out_h, g.out_w), (h, w));
        Ok(g)
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_h, self.in_w, self.in_c]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.out_c]
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.in_c
    }

    fn rows_per_sample(&self) -> usize {
        self.out_h * self.out_w
    }

    fn chunk_samples(&self) -> usize {
        let per = self.rows_per_sample() * self.patch_len();
        (COLS_BUDGET / per.max(1)).clamp(1, self.batch.max(1))
    }
}

fn nhwc(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, h, w, c] if h > 0 && w > 0 && c > 0 => Ok((n, h, w, c)),
        _ => Err(Error::dim(op, format!("expected [N,H,W,C], got {shape:?}"))),
    }
}

fn kernel4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [kh, kw, ci, co] if kh > 0 && kw > 0 => Ok((kh, kw, ci, co)),
        _ => Err(Error::dim(
            op,
            format!("expected kernel [kh,kw,Cin,Cout], got {shape:?}"),
        )),
    }
}

/// Gathers receptive fields of samples `n0..n1` into rows of `cols`.
fn im2col<T: Real>(input: &[T], g: &ConvGeometry, n0: usize, n1: usize, cols: &mut [T]) {
    let plen = g.patch_len();
    let ci = g.in_c;
    let mut row = 0;
    for n in n0..n1 {
        let sample = &input[n * g.in_h * g.in_w * ci..(n + 1) * g.in_h * g.in_w * ci];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * plen..(row + 1) * plen];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        let d = &mut dst[(ky * g.kw + kx) * ci..(ky * g.kw + kx + 1) * ci];
                        if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                            d.fill(T::zero());
                        } else {
                            let o = (iy as usize * g.in_w + ix as usize) * ci;
                            d.copy_from_slice(&sample[o..o + ci]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds rows of `cols` back onto samples `n0..n1` of `out`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, n0: usize, n1: usize, out: &mut [T]) {
    let plen = g.patch_len();
    let ci = g.in_c;
    let mut row = 0;
    for n in n0..n1 {
        let sample = &mut out[n * g.in_h * g.in_w * ci..(n + 1) * g.in_h * g.in_w * ci];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[row * plen..(row + 1) * plen];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let o = (iy as usize * g.in_w + ix as usize) * ci;
                        let s = &src[(ky * g.kw + kx) * ci..(ky * g.kw + kx + 1) * ci];
                        for (acc, &v) in sample[o..o + ci].iter_mut().zip(s) {
                            *acc += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `out = conv(input, kernel)`.
pub(crate) fn conv_forward<T: Real>(input: &[T], kernel: &[T], g: &ConvGeometry) -> Vec<T> {
    let plen = g.patch_len();
    let rps = g.rows_per_sample();
    let co = g.out_c;
    let mut out = vec![T::zero(); g.batch * rps * co];
    let chunk = g.chunk_samples();
    let mut cols = vec![T::zero(); chunk * rps * plen];
    let mut n0 = 0;
    while n0 < g.batch {
        let n1 = (n0 + chunk).min(g.batch);
        let rows = (n1 - n0) * rps;
        im2col(input, g, n0, n1, &mut cols[..rows * plen]);
        T::gemm(
            rows,
            plen,
            co,
            T::one(),
            &cols[..rows * plen],
            (plen as isize, 1),
            kernel,
            (co as isize, 1),
            T::zero(),
            &mut out[n0 * rps * co..n1 * rps * co],
            (co as isize, 1),
        );
        n0 = n1;
    }
    out
}

/// Input-adjoint of [`conv_forward`]: maps an output-shaped array back to
/// input shape. This is also the forward map of a transposed convolution.
pub(crate) fn conv_input_adjoint<T: Real>(dout: &[T], kernel: &[T], g: &ConvGeometry) -> Vec<T> {
    let plen = g.patch_len();
    let rps = g.rows_per_sample();
    let co = g.out_c;
    let mut dinput = vec![T::zero(); g.batch * g.in_h * g.in_w * g.in_c];
    let chunk = g.chunk_samples();
    let mut cols = vec![T::zero(); chunk * rps * plen];
    let mut n0 = 0;
    while n0 < g.batch {
        let n1 = (n0 + chunk).min(g.batch);
        let rows = (n1 - n0) * rps;
        T::gemm(
            rows,
            co,
            plen,
            T::one(),
            &dout[n0 * rps * co..n1 * rps * co],
            (co as isize, 1),
            kernel,
            (1, co as isize),
            T::zero(),
            &mut cols[..rows * plen],
            (plen as isize, 1),
        );
        col2im(&cols[..rows * plen], g, n0, n1, &mut dinput);
        n0 = n1;
    }
    dinput
}

/// Gradient of `<dout, conv(input, K)>` with respect to `K`.
pub(crate) fn conv_kernel_grad<T: Real>(input: &[T], dout: &[T], g: &ConvGeometry) -> Vec<T> {
    let plen = g.patch_len();
    let rps = g.rows_per_sample();
    let co = g.out_c;
    let mut dk = vec![T::zero(); plen * co];
    let chunk = g.chunk_samples();
    let mut cols = vec![T::zero(); chunk * rps * plen];
    let mut n0 = 0;
    while n0 < g.batch {
        let n1 = (n0 + chunk).min(g.batch);
        let rows = (n1 - n0) * rps;
        im2col(input, g, n0, n1, &mut cols[..rows * plen]);
        T::gemm(
            plen,
            rows,
            co,
            T::one(),
            &cols[..rows * plen],
            (1, plen as isize),
            &dout[n0 * rps * co..n1 * rps * co],
            (co as isize, 1),
            T::one(),
            &mut dk,
            (co as isize, 1),
        );
        n0 = n1;
    }
    dk
}
