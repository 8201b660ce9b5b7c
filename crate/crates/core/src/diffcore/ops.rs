//! Hand-written CPU kernels with explicit backward passes.

use candle::{CpuStorage, CustomOp1, Layout, Result, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    b: usize,
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
        (self.c * self.k * self.k, self.b * ho * wo)
    }

    /// Visits every run of in-image positions as `(dst, src, len)`: column
    /// entries `dst..dst+len` read image entries `src, src+stride, ...`.
    /// Padding positions are skipped.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let Geometry { b, c, h, w, k, stride, pad } = *self;
        let (ho, wo) = self.out_hw();
        let n = ho * wo;
        for ci in 0..c {
            for dy in 0..k {
                for dx in 0..k {
                    let row = (ci * k + dy) * k + dx;
                    // output columns whose input column lies inside [0, w)
                    let ox_lo = if dx < pad { (pad - dx).div_ceil(stride) } else { 0 };
                    let ox_hi = if w + pad > dx { ((w + pad - dx - 1) / stride + 1).min(wo) } else { 0 };
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let ix0 = ox_lo * stride + dx - pad;
                    for bi in 0..b {
                        let img = (bi * c + ci) * h * w;
                        let col0 = row * b * n + bi * n;
                        for oy in 0..ho {
                            let iy = oy * stride + dy;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            f(col0 + oy * wo + ox_lo, img + (iy - pad) * w + ix0, ox_hi - ox_lo);
                        }
                    }
                }
            }
        }
    }
}

/// `(B, C, H, W)` to the column matrix `(C*k*k, B*Ho*Wo)`, rows ordered
/// `(c, ky, kx)` to match a `(Cout, C, k, k)` weight.
struct Im2Col(Geometry);

/// Adjoint of [`Im2Col`]: scatters-adds columns back onto the image.
struct Col2Im(Geometry);

fn contiguous<'a, T: WithDType>(s: &'a [T], l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle::bail!("im2col expects a contiguous tensor"),
    }
}

fn im2col<T: WithDType>(g: &Geometry, src: &[T]) -> Vec<T> {
    let (r, c) = g.cols_shape();
    let mut dst = vec![T::zero(); r * c];
    let st = g.stride;
    g.for_each_run(|d, s, len| {
        if st == 1 {
            dst[d..d + len].copy_from_slice(&src[s..s + len]);
        } else {
            for (i, v) in dst[d..d + len].iter_mut().enumerate() {
                *v = src[s + i * st];
            }
        }
    });
    dst
}

fn col2im<T: WithDType>(g: &Geometry, src: &[T]) -> Vec<T> {
    let mut dst = vec![T::zero(); g.b * g.c * g.h * g.w];
    let st = g.stride;
    g.for_each_run(|d, s, len| {
        for (i, v) in src[d..d + len].iter().enumerate() {
            dst[s + i * st] += *v;
        }
    });
    dst
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(g, contiguous(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(g, contiguous(v, l)?)),
            _ => candle::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, g.cols_shape().into()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(g, contiguous(v, l)?)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(g, contiguous(v, l)?)),
            _ => candle::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, (g.b, g.c, g.h, g.w).into()))
    }
}

/// Unfolds `x` `(B, C, H, W)` into `(C*k*k, B*Ho*Wo)` patches.
pub fn im2col_op(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h + 2 * pad < k || w + 2 * pad < k {
        candle::bail!("kernel {k} larger than padded input {h}x{w}");
    }
    let g = Geometry { b, c, h, w, k, stride, pad };
    x.contiguous()?.apply_op1(Im2Col(g))
}

/// Broadcasts a row vector `(D)` to `(n, D)` through a rank-one matmul, so
/// its gradient is a matmul too rather than a reduction over a leading axis
/// (which candle's CPU backend handles slowly).
pub fn expand_rows(v: &Tensor, n: usize) -> Result<Tensor> {
    let d = v.elem_count();
    let ones = Tensor::ones((n, 1), v.dtype(), v.device())?;
    ones.matmul(&v.reshape((1, d))?)
}
