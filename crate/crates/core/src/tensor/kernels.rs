//! Convolution kernels (im2col + GEMM) over NHWC tensors.

use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

/// Spatial padding mode of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No padding.
    Valid,
    /// Symmetric zero padding of `(k - 1) / 2`; keeps the extent at stride 1.
    /// Only odd kernel sizes are accepted.
    Same,
}

impl Padding {
    pub fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => (kernel - 1) / 2,
        }
    }
}

/// Output extent `floor((input + 2p - kernel) / stride) + 1`.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Shape("kernel and stride must be positive".into()));
    }
    if padding == Padding::Same && kernel % 2 == 0 {
        return Err(Error::Shape(format!(
            "'same' padding needs an odd kernel, got {kernel}"
        )));
    }
    let padded = input + 2 * padding.amount(kernel);
    if kernel > padded {
        return Err(Error::Shape(format!(
            "kernel extent {kernel} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], k_shape: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let [n, h, w, c_in] = x_shape else {
            return Err(Error::Shape(format!(
                "conv2d input must be [N,H,W,C], got {x_shape:?}"
            )));
        };
        let [kh, kw, kc, c_out] = k_shape else {
            return Err(Error::Shape(format!(
                "conv2d kernel must be [KH,KW,Cin,Cout], got {k_shape:?}"
            )));
        };
        if kc != c_in {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {c_in}, kernel expects {kc}"
            )));
        }
        let ho = conv_output_extent(*h, *kh, stride, padding)?;
        let wo = conv_output_extent(*w, *kw, stride, padding)?;
        Ok(Self {
            n: *n,
            h: *h,
            w: *w,
            c_in: *c_in,
            kh: *kh,
            kw: *kw,
            c_out: *c_out,
            stride,
            pad_h: padding.amount(*kh),
            pad_w: padding.amount(*kw),
            ho,
            wo,
        })
    }

    /// Rows of the im2col matrix (one per output position over the batch).
    pub fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Columns of the im2col matrix, ordered (ky, kx, cin) like the kernel.
    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.ho, self.wo, self.c_out]
    }

    /// Visit each (patch row, patch column, input offset) triple that lands inside the input.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let patch = self.patch();
        for b in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (b * self.ho + oy) * self.wo + ox;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad_h as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad_w as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let col = (ky * self.kw + kx) * self.c_in;
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * self.c_in;
                            f(row * patch + col, src, self.c_in);
                        }
                    }
                }
            }
        }
    }

    pub fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut cols = vec![T::zero(); self.rows() * self.patch()];
        self.for_each_tap(|dst, src, len| {
            cols[dst..dst + len].copy_from_slice(&x[src..src + len]);
        });
        cols
    }

    pub fn col2im_add<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        self.for_each_tap(|dst, src, len| {
            for (d, &c) in dx[src..src + len].iter_mut().zip(&cols[dst..dst + len]) {
                *d = *d + c;
            }
        });
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let cols = g.im2col(x);
    let mut out = vec![T::zero(); g.rows() * g.c_out];
    T::gemm(g.rows(), g.patch(), g.c_out, &cols, false, kernel, false, &mut out, false);
    if let Some(bias) = bias {
        for row in out.chunks_exact_mut(g.c_out) {
            for (o, &b) in row.iter_mut().zip(bias) {
                *o = *o + b;
            }
        }
    }
    out
}

/// Accumulates input and kernel gradients for `dy` ([rows, c_out]).
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    kernel: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dk: Option<&mut [T]>,
) {
    if let Some(dk) = dk {
        let cols = g.im2col(x);
        T::gemm(g.patch(), g.rows(), g.c_out, &cols, true, dy, false, dk, true);
    }
    if let Some(dx) = dx {
        let mut dcols = vec![T::zero(); g.rows() * g.patch()];
        T::gemm(g.rows(), g.c_out, g.patch(), dy, false, kernel, true, &mut dcols, false);
        g.col2im_add(&dcols, dx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_follows_standard_formula() {
        assert_eq!(conv_output_extent(5, 3, 1, Padding::Valid).unwrap(), 3);
        assert_eq!(conv_output_extent(224, 3, 2, Padding::Same).unwrap(), 112);
        assert_eq!(conv_output_extent(7, 3, 1, Padding::Same).unwrap(), 7);
        assert_eq!(conv_output_extent(7, 3, 2, Padding::Same).unwrap(), 4);
        assert!(conv_output_extent(2, 3, 1, Padding::Valid).is_err());
        assert!(conv_output_extent(8, 2, 1, Padding::Same).is_err());
    }

    #[test]
    fn direct_convolution_agrees_with_im2col() {
        let g = ConvGeometry::new(&[2, 5, 4, 3], &[3, 3, 3, 2], 2, Padding::Same).unwrap();
        let x: Vec<f64> = (0..2 * 5 * 4 * 3).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let k: Vec<f64> = (0..3 * 3 * 3 * 2).map(|i| ((i * 5) % 7) as f64 * 0.25).collect();
        let y = conv2d_forward(&g, &x, &k, None);
        for b in 0..g.n {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    for co in 0..g.c_out {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                    continue;
                                }
                                for ci in 0..3 {
                                    let xv = x[((b * 5 + iy as usize) * 4 + ix as usize) * 3 + ci];
                                    let kv = k[((ky * 3 + kx) * 3 + ci) * 2 + co];
                                    acc += xv * kv;
                                }
                            }
                        }
                        let got = y[((b * g.ho + oy) * g.wo + ox) * 2 + co];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
