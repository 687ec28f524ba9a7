//! Convolution as an explicit im2col + GEMM.
//!
//! Candle's built-in CPU convolution backward goes through a transposed
//! convolution and a kernel-sized convolution, both of which are several times
//! slower than lowering to a matrix product. The two custom ops here are each
//! other's adjoint, so the backward pass is again a column rearrangement plus
//! a GEMM.

use candle_core::backend::BackendStorage;
use candle_core::{bail, CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding - self.kernel) / self.stride + 1,
            (self.width + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Calls `f(row, col, pixel)` for every in-bounds (column-matrix, image) pair.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_hw();
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let base = (c * self.height + iy as usize) * self.width;
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < self.width as isize {
                                f(row, oy * wo + ox, base + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: WithDType>(src: &[T], batch: usize, g: ConvGeometry) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let img_len = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); batch * g.rows() * n];
    for b in 0..batch {
        let img = &src[b * img_len..(b + 1) * img_len];
        let dst = &mut out[b * g.rows() * n..(b + 1) * g.rows() * n];
        g.for_each_tap(|row, col, px| dst[row * n + col] = img[px]);
    }
    out
}

fn col2im<T: WithDType>(src: &[T], batch: usize, g: ConvGeometry) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let img_len = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); batch * img_len];
    for b in 0..batch {
        let cols = &src[b * g.rows() * n..(b + 1) * g.rows() * n];
        let img = &mut out[b * img_len..(b + 1) * img_len];
        g.for_each_tap(|row, col, px| img[px] += cols[row * n + col]);
    }
    out
}

macro_rules! map_float_storage {
    ($storage:expr, $layout:expr, $f:ident, $batch:expr, $g:expr) => {{
        let Some((start, end)) = $layout.contiguous_offsets() else {
            bail!("{} requires a contiguous input", stringify!($f))
        };
        match $storage {
            CpuStorage::F32(v) => CpuStorage::F32($f(&v[start..end], $batch, $g)),
            CpuStorage::F64(v) => CpuStorage::F64($f(&v[start..end], $batch, $g)),
            other => bail!("{} does not support {:?}", stringify!($f), other.dtype()),
        }
    }};
}

/// `[B, C, H, W] -> [B, C*k*k, Ho*Wo]`.
pub struct Im2Col(pub ConvGeometry);

/// `[B, C*k*k, Ho*Wo] -> [B, C, H, W]`, summing overlapping taps.
pub struct Col2Im(pub ConvGeometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let batch = layout.dims()[0];
        let (ho, wo) = self.0.out_hw();
        let out = map_float_storage!(storage, layout, im2col, batch, self.0);
        Ok((out, Shape::from((batch, self.0.rows(), ho * wo))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let batch = layout.dims()[0];
        let g = self.0;
        let out = map_float_storage!(storage, layout, col2im, batch, g);
        Ok((out, Shape::from((batch, g.channels, g.height, g.width))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// 2-D convolution without bias: `x: [B, C, H, W]`, `weight: [O, C, k, k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, wc, k, k2) = weight.dims4()?;
    if wc != c || k != k2 {
        bail!("conv2d: input has {c} channels, kernel expects {wc} (k {k}x{k2})");
    }
    let g = ConvGeometry {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
    };
    let (ho, wo) = g.out_hw();
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    weight
        .reshape((o, c * k * k))?
        .broadcast_matmul(&cols)?
        .reshape((b, o, ho, wo))
}
