//! 2-D convolution by im2col gather and a single GEMM per batch item.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Shape, Tensor};

/// Output spatial size for a stride-1 convolution.
fn out_dim(input: usize, kernel: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(kernel).map(|d| d + 1)
}

pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
    pub o: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, weight: Shape, bias: Option<Shape>, pad: usize) -> Result<Self> {
        let [o, wc, kh, kw] = weight.0;
        if kh != kw {
            return Err(Error::config(format!("non-square kernel {kh}x{kw}")));
        }
        if wc != input.c() {
            return Err(Error::config(format!(
                "conv2d expects {wc} input channels, got {} (input {input})",
                input.c()
            )));
        }
        if let Some(b) = bias {
            if b.numel() != o {
                return Err(Error::config(format!(
                    "conv2d bias has {} values for {o} output channels",
                    b.numel()
                )));
            }
        }
        let (oh, ow) = match (out_dim(input.h(), kh, pad), out_dim(input.w(), kw, pad)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(Error::config(format!(
                    "input {input} smaller than kernel {kh}x{kw} after padding {pad}"
                )))
            }
        };
        Ok(Self {
            c: input.c(),
            h: input.h(),
            w: input.w(),
            k: kh,
            pad,
            oh,
            ow,
            o,
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

/// Gather every receptive field of one batch item into the rows of `cols`
/// (row = (channel, ky, kx), column = output pixel).
fn im2col<T: Scalar>(g: &ConvGeom, input: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        let chan = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((c * g.k + ky) * g.k + kx) * plane..][..plane];
                for oy in 0..g.oh {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let src = &chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the inverse of [`im2col`].
fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], out: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        let chan = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((c * g.k + ky) * g.k + kx) * plane..][..plane];
                for oy in 0..g.oh {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), weight.shape(), bias.map(|b| b.shape()), pad)?;
    let n = input.shape().n();
    let plane = g.out_plane();
    let out_shape = Shape::new(n, g.o, g.oh, g.ow);
    let mut out = vec![T::ZERO; out_shape.numel()];
    let mut cols = vec![T::ZERO; g.patch_len() * plane];
    let in_len = input.shape().item_len();
    let wmat = MatRef::new(weight.data(), g.o, g.patch_len());
    for b in 0..n {
        let dst = &mut out[b * g.o * plane..(b + 1) * g.o * plane];
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                dst[o * plane..(o + 1) * plane].fill(bv);
            }
        }
        im2col(&g, &input.data()[b * in_len..(b + 1) * in_len], &mut cols);
        let beta = if bias.is_some() { T::ONE } else { T::ZERO };
        gemm(wmat, MatRef::new(&cols, g.patch_len(), plane), beta, dst);
    }
    Tensor::from_vec(out_shape, out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    pad: usize,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let [need_input, need_weight, need_bias] = need;
    let g = ConvGeom::new(input.shape(), weight.shape(), None, pad)?;
    let n = input.shape().n();
    let plane = g.out_plane();
    let in_len = input.shape().item_len();
    let mut d_input = need_input.then(|| vec![T::ZERO; input.numel()]);
    let mut d_weight = need_weight.then(|| vec![T::ZERO; weight.numel()]);
    let mut d_bias = (need_bias && has_bias).then(|| vec![T::ZERO; g.o]);
    let mut cols = vec![T::ZERO; g.patch_len() * plane];
    let wmat = MatRef::new(weight.data(), g.o, g.patch_len());
    for b in 0..n {
        let dout = &grad_out.data()[b * g.o * plane..(b + 1) * g.o * plane];
        let dout_mat = MatRef::new(dout, g.o, plane);
        if let Some(db) = d_bias.as_mut() {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += dout[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = d_weight.as_mut() {
            im2col(&g, &input.data()[b * in_len..(b + 1) * in_len], &mut cols);
            gemm(dout_mat, MatRef::new(&cols, g.patch_len(), plane).t(), T::ONE, dw);
        }
        if let Some(di) = d_input.as_mut() {
            gemm(wmat.t(), dout_mat, T::ZERO, &mut cols);
            col2im_add(&g, &cols, &mut di[b * in_len..(b + 1) * in_len]);
        }
    }
    Ok(ConvGrads {
        input: d_input.map(|d| Tensor::from_vec(input.shape(), d)).transpose()?,
        weight: d_weight.map(|d| Tensor::from_vec(weight.shape(), d)).transpose()?,
        bias: d_bias
            .map(|d| Tensor::from_vec(Shape::new(g.o, 1, 1, 1), d))
            .transpose()?,
    })
}
