//! Patch extraction for convolutions, with its adjoint as the backward pass.
//!
//! `im2col` maps `(N, C, H, W)` to `(C * K * K, N * Ho * Wo)` so a convolution
//! becomes a single 2-D matmul against the `(O, C * K * K)` kernel matrix.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};
use std::ops::AddAssign;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn cols_shape(&self) -> (usize, usize) {
        let (ho, wo) = self.out_hw();
        (self.c * self.k * self.k, self.n * ho * wo)
    }

    /// Visit every (column index, source index) pair that lies inside the image.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = self.out_hw();
        let span = self.n * ho * wo;
        for ci in 0..self.c {
            for dy in 0..self.k {
                for dx in 0..self.k {
                    let row = (ci * self.k + dy) * self.k + dx;
                    for b in 0..self.n {
                        let plane = (b * self.c + ci) * self.h;
                        for oy in 0..ho {
                            let iy = (oy * self.stride + dy) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let src_row = (plane + iy as usize) * self.w;
                            let dst_row = row * span + (b * ho + oy) * wo;
                            for ox in 0..wo {
                                let ix = (ox * self.stride + dx) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    f(dst_row + ox, src_row + ix as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn gather<T: Copy + Default>(&self, src: &[T]) -> Vec<T> {
        let (r, c) = self.cols_shape();
        let mut out = vec![T::default(); r * c];
        self.for_each(|d, s| out[d] = src[s]);
        out
    }

    fn scatter<T: Copy + Default + AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.n * self.c * self.h * self.w];
        self.for_each(|d, s| out[s] += cols[d]);
        out
    }
}

fn contiguous<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

struct Im2Col {
    k: usize,
    stride: usize,
    pad: usize,
}

struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = layout.shape().dims4()?;
        let g = Geometry { n, c, h, w, k: self.k, stride: self.stride, pad: self.pad };
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.gather(contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.gather(contiguous(v, layout)?)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((out, g.cols_shape().into()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (n, c, h, w) = arg.dims4()?;
        let g = Geometry { n, c, h, w, k: self.k, stride: self.stride, pad: self.pad };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(g))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.scatter(contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.scatter(contiguous(v, layout)?)),
            _ => candle_core::bail!("col2im supports f32 and f64"),
        };
        Ok((out, (g.n, g.c, g.h, g.w).into()))
    }
}

/// `(N, C, H, W)` to `(C * k * k, N * Ho * Wo)` with zero padding.
pub fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Im2Col { k, stride, pad })
}
