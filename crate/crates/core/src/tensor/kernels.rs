//! Raw numeric kernels behind the graph ops. Convolutions go through
//! im2col / col2im and a GEMM.

use super::{Real, Result, TensorError};

/// Output extent of a strided, zero-padded convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > input + 2 * padding {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input == 0 {
        return None;
    }
    let full = (input - 1) * stride + kernel;
    if full <= 2 * padding {
        return None;
    }
    Some(full - 2 * padding)
}

/// Geometry of a convolution as seen from its (wide) image side: `channels × height × width`
/// is the image that gets unfolded, `out_h × out_w` the sliding-window grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        (channels, height, width): (usize, usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op,
                msg: "stride must be at least 1".into(),
            });
        }
        let out_h = conv_out_extent(height, kh, stride, padding);
        let out_w = conv_out_extent(width, kw, stride, padding);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) => Ok(ConvGeom {
                channels,
                height,
                width,
                kh,
                kw,
                stride,
                padding,
                out_h,
                out_w,
            }),
            _ => Err(TensorError::InvalidArgument {
                op,
                msg: format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    height + 2 * padding,
                    width + 2 * padding
                ),
            }),
        }
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Unfold one image into `patch_len × positions` columns.
    pub fn im2col<T: Real>(&self, image: &[T], cols: &mut [T]) {
        let positions = self.positions();
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *d = if ix < 0 || ix >= self.width as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Fold columns back, accumulating into `image`. Adjoint of [`ConvGeom::im2col`].
    pub fn col2im<T: Real>(&self, cols: &[T], image: &mut [T]) {
        let positions = self.positions();
        for c in 0..self.channels {
            let plane = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * positions..(row + 1) * positions];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] = dst[ix as usize] + src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[b] = weight (K × patch) · im2col(x[b]) + bias`.
pub(crate) fn conv2d_forward<T: Real>(
    geom: &ConvGeom,
    batch: usize,
    x: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let k = bias.len();
    let (patch, positions) = (geom.patch_len(), geom.positions());
    let mut cols = vec![T::zero(); patch * positions];
    for b in 0..batch {
        geom.im2col(&x[b * geom.image_len()..(b + 1) * geom.image_len()], &mut cols);
        let o = &mut out[b * k * positions..(b + 1) * k * positions];
        for (ch, &bv) in bias.iter().enumerate() {
            o[ch * positions..(ch + 1) * positions].fill(bv);
        }
        T::gemm(k, patch, positions, weight, (patch as isize, 1), &cols, (positions as isize, 1), T::one(), o);
    }
}

pub(crate) struct ConvGrads<'a, T> {
    pub x: Option<&'a mut [T]>,
    pub weight: Option<&'a mut [T]>,
    pub bias: Option<&'a mut [T]>,
}

pub(crate) fn conv2d_backward<T: Real>(
    geom: &ConvGeom,
    batch: usize,
    x: &[T],
    weight: &[T],
    k: usize,
    grad_out: &[T],
    mut grads: ConvGrads<'_, T>,
) {
    let (patch, positions) = (geom.patch_len(), geom.positions());
    let mut cols = vec![T::zero(); patch * positions];
    for b in 0..batch {
        let go = &grad_out[b * k * positions..(b + 1) * k * positions];
        if let Some(gb) = grads.bias.as_deref_mut() {
            for (ch, g) in gb.iter_mut().enumerate() {
                *g = *g + go[ch * positions..(ch + 1) * positions].iter().copied().sum::<T>();
            }
        }
        if let Some(gw) = grads.weight.as_deref_mut() {
            geom.im2col(&x[b * geom.image_len()..(b + 1) * geom.image_len()], &mut cols);
            // gw (K × patch) += go (K × P) · colsᵀ (P × patch)
            T::gemm(k, positions, patch, go, (positions as isize, 1), &cols, (1, positions as isize), T::one(), gw);
        }
        if let Some(gx) = grads.x.as_deref_mut() {
            // cols (patch × P) = weightᵀ (patch × K) · go (K × P)
            T::gemm(patch, k, positions, weight, (1, patch as isize), go, (positions as isize, 1), T::zero(), &mut cols);
            geom.col2im(&cols, &mut gx[b * geom.image_len()..(b + 1) * geom.image_len()]);
        }
    }
}

/// Transposed convolution. `geom` describes the *output* image (the side a
/// matching conv2d would read from); the input grid is `geom.out_h × geom.out_w`.
/// `weight` is `C_in × (K·kh·kw)` with `K = geom.channels`.
pub(crate) fn conv_transpose2d_forward<T: Real>(
    geom: &ConvGeom,
    batch: usize,
    c_in: usize,
    x: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let (patch, positions) = (geom.patch_len(), geom.positions());
    let plane = geom.height * geom.width;
    let mut cols = vec![T::zero(); patch * positions];
    for b in 0..batch {
        let xb = &x[b * c_in * positions..(b + 1) * c_in * positions];
        // cols (patch × P) = weightᵀ (patch × C_in) · xb (C_in × P)
        T::gemm(patch, c_in, positions, weight, (1, patch as isize), xb, (positions as isize, 1), T::zero(), &mut cols);
        let o = &mut out[b * geom.image_len()..(b + 1) * geom.image_len()];
        for (ch, &bv) in bias.iter().enumerate() {
            o[ch * plane..(ch + 1) * plane].fill(bv);
        }
        geom.col2im(&cols, o);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Real>(
    geom: &ConvGeom,
    batch: usize,
    c_in: usize,
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    mut grads: ConvGrads<'_, T>,
) {
    let (patch, positions) = (geom.patch_len(), geom.positions());
    let plane = geom.height * geom.width;
    let mut cols = vec![T::zero(); patch * positions];
    for b in 0..batch {
        let go = &grad_out[b * geom.image_len()..(b + 1) * geom.image_len()];
        if let Some(gb) = grads.bias.as_deref_mut() {
            for (ch, g) in gb.iter_mut().enumerate() {
                *g = *g + go[ch * plane..(ch + 1) * plane].iter().copied().sum::<T>();
            }
        }
        if grads.x.is_none() && grads.weight.is_none() {
            continue;
        }
        geom.im2col(go, &mut cols);
        if let Some(gx) = grads.x.as_deref_mut() {
            // gx (C_in × P) += weight (C_in × patch) · cols (patch × P)
            T::gemm(
                c_in,
                patch,
                positions,
                weight,
                (patch as isize, 1),
                &cols,
                (positions as isize, 1),
                T::one(),
                &mut gx[b * c_in * positions..(b + 1) * c_in * positions],
            );
        }
        if let Some(gw) = grads.weight.as_deref_mut() {
            let xb = &x[b * c_in * positions..(b + 1) * c_in * positions];
            // gw (C_in × patch) += xb (C_in × P) · colsᵀ (P × patch)
            T::gemm(c_in, positions, patch, xb, (positions as isize, 1), &cols, (1, positions as isize), T::one(), gw);
        }
    }
}

/// Max-pool over `planes` independent `h × w` planes; returns argmax flat indices.
pub(crate) fn maxpool_forward<T: Real>(
    planes: usize,
    (h, w): (usize, usize),
    window: usize,
    stride: usize,
    x: &[T],
    out: &mut [T],
) -> Vec<usize> {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        // strict > keeps the first row-major maximum
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out[argmax.len()] = x[best];
                argmax.push(best);
            }
        }
    }
    argmax
}
