//! Convolution as im2col followed by one matrix product.
//!
//! The unfold step is a custom op whose gradient is the matching fold, so
//! the whole convolution stays differentiable while the heavy lifting goes
//! through the matmul kernel in both directions.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `kk`.
    #[inline]
    fn out_range(&self, kk: usize, size: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let off = kk as isize - p;
        // smallest o with o*s + off >= 0, largest with o*s + off <= size - 1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = (size as isize - 1 - off).div_euclid(s) + 1;
        (lo.max(0) as usize, (hi.max(0) as usize).min(out))
    }

    /// Visits every in-bounds row segment of kernel row `row`, calling
    /// `f(col_start, input_start, len)` with the input stepping by `stride`.
    #[inline]
    fn for_each_segment(&self, row: usize, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.kernel;
        let c = row / (k * k);
        let ki = (row / k) % k;
        let kj = row % k;
        let (oh, ow) = (self.out_h(), self.out_w());
        let (y_lo, y_hi) = self.out_range(ki, self.h, oh);
        let (x_lo, x_hi) = self.out_range(kj, self.w, ow);
        if x_lo >= x_hi {
            return;
        }
        for b in 0..self.batch {
            let in_base = (b * self.channels + c) * self.h * self.w;
            for oy in y_lo..y_hi {
                let iy = oy * self.stride + ki - self.padding;
                let ix = x_lo * self.stride + kj - self.padding;
                f((b * oh + oy) * ow + x_lo, in_base + iy * self.w + ix, x_hi - x_lo);
            }
        }
    }

    fn unfold<T: Copy + Default>(&self, src: &[T]) -> Vec<T> {
        let cols = self.cols();
        let s = self.stride;
        let mut dst = vec![T::default(); self.rows() * cols];
        for row in 0..self.rows() {
            let out = &mut dst[row * cols..(row + 1) * cols];
            self.for_each_segment(row, |col, idx, len| {
                if s == 1 {
                    out[col..col + len].copy_from_slice(&src[idx..idx + len]);
                } else {
                    for (o, i) in out[col..col + len].iter_mut().zip(src[idx..].iter().step_by(s)) {
                        *o = *i;
                    }
                }
            });
        }
        dst
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, src: &[T]) -> Vec<T> {
        let cols = self.cols();
        let s = self.stride;
        let mut dst = vec![T::default(); self.batch * self.channels * self.h * self.w];
        for row in 0..self.rows() {
            let inp = &src[row * cols..(row + 1) * cols];
            self.for_each_segment(row, |col, idx, len| {
                for (o, i) in dst[idx..].iter_mut().step_by(s).zip(&inp[col..col + len]) {
                    *o += *i;
                }
            });
        }
        dst
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

/// `[B, C, H, W]` → `[C·k·k, B·H_out·W_out]`.
struct Im2Col(Geometry);

/// Adjoint of [`Im2Col`].
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.rows(), g.cols()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.unfold(contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.unfold(contiguous(v, layout)?)),
            _ => candle_core::bail!("im2col: only f32 and f64 are supported"),
        };
        Ok((out, shape))
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
        let g = self.0;
        let shape = Shape::from((g.batch, g.channels, g.h, g.w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.fold(contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.fold(contiguous(v, layout)?)),
            _ => candle_core::bail!("col2im: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// 2-D convolution of `x: [B, C, H, W]` with `weight: [O, C, k, k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let (batch, channels, h, w) = x.dims4()?;
    let (out_ch, w_ch, kh, kw) = weight.dims4()?;
    if w_ch != channels || kh != kw {
        candle_core::bail!("conv2d: input {:?} incompatible with kernel {:?}", x.dims(), weight.dims());
    }
    if h + 2 * padding < kh || w + 2 * padding < kw || stride == 0 {
        candle_core::bail!("conv2d: kernel {kh} larger than padded input {h}x{w}");
    }
    let g = Geometry {
        batch,
        channels,
        h,
        w,
        kernel: kh,
        stride,
        padding,
    };
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = if kh == 1 && stride == 1 && padding == 0 {
        // a 1x1 conv needs no unfolding, only a channel-major layout
        x.transpose(0, 1)?.contiguous()?.reshape((channels, batch * h * w))?
    } else {
        x.contiguous()?.apply_op1(Im2Col(g))?
    };
    let y = weight.reshape((out_ch, g.rows()))?.matmul(&cols)?;
    y.reshape((out_ch, batch, oh, ow))?.transpose(0, 1)?.contiguous()
}
