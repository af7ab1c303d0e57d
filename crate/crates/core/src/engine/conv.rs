//! im2col convolution kernels.
//!
//! Columns are materialized a band of output rows at a time so that large
//! kernels at 256 x 256 stay within a few tens of megabytes.

use super::tensor::{gemm, MatRef, Real, Tensor};

const COLS_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug)]
struct Geom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
}

impl Geom {
    fn new(x: [usize; 4], weight: [usize; 4], stride: usize, pad: usize) -> Self {
        let [_, cin, h, w] = x;
        let [_, wcin, k, k2] = weight;
        assert_eq!(cin, wcin, "conv input has {cin} channels, weight expects {wcin}");
        assert_eq!(k, k2, "only square kernels");
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        let hout = (h + 2 * pad - k) / stride + 1;
        let wout = (w + 2 * pad - k) / stride + 1;
        Self { cin, h, w, k, stride, pad, hout, wout }
    }

    fn krows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn band(&self) -> usize {
        (COLS_BUDGET / (self.krows() * self.wout).max(1)).clamp(1, self.hout)
    }
}

fn im2col<T: Real>(x: &[T], g: &Geom, oy0: usize, oy1: usize, cols: &mut [T]) {
    let ncols = (oy1 - oy0) * g.wout;
    for c in 0..g.cin {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in oy0..oy1 {
                    let line = &mut dst[(oy - oy0) * g.wout..(oy - oy0 + 1) * g.wout];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix >= 0 && ix < g.w as isize { srow[ix as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geom, oy0: usize, oy1: usize, dx: &mut [T]) {
    let ncols = (oy1 - oy0) * g.wout;
    for c in 0..g.cin {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[(oy - oy0) * g.wout..(oy - oy0 + 1) * g.wout];
                    let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let g = Geom::new(x.shape(), weight.shape(), stride, pad);
    let n = x.shape()[0];
    let cout = weight.shape()[0];
    let hw = g.hout * g.wout;
    let mut out = Tensor::zeros([n, cout, g.hout, g.wout]);
    let band = g.band();
    let mut cols = vec![T::zero(); g.krows() * band * g.wout];
    let wmat = MatRef::new(weight.data(), cout, g.krows());
    for s in 0..n {
        let xs = x.sample(s);
        let ys = out.sample_mut(s);
        let mut oy0 = 0;
        while oy0 < g.hout {
            let oy1 = (oy0 + band).min(g.hout);
            let nc = (oy1 - oy0) * g.wout;
            let cols = &mut cols[..g.krows() * nc];
            im2col(xs, &g, oy0, oy1, cols);
            gemm(wmat, MatRef::new(cols, g.krows(), nc), T::zero(), &mut ys[oy0 * g.wout..], hw);
            oy0 = oy1;
        }
        if let Some(b) = bias {
            for (co, plane) in ys.chunks_mut(hw).enumerate() {
                let bv = b.data()[co];
                for v in plane {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    dy: &Tensor<T>,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_dx, need_dw, need_db) = need;
    let g = Geom::new(x.shape(), weight.shape(), stride, pad);
    let n = x.shape()[0];
    let cout = weight.shape()[0];
    let hw = g.hout * g.wout;
    let kr = g.krows();

    let db = need_db.then(|| {
        let mut db = Tensor::zeros([1, cout, 1, 1]);
        for s in 0..n {
            for (co, plane) in dy.sample(s).chunks(hw).enumerate() {
                db.data_mut()[co] += plane.iter().copied().sum();
            }
        }
        db
    });
    if !need_dx && !need_dw {
        return ConvGrads { dx: None, dw: None, db };
    }

    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(weight.shape()));
    let band = g.band();
    let mut cols = vec![T::zero(); kr * band * g.wout];
    let wmat = MatRef::new(weight.data(), cout, kr);
    for s in 0..n {
        let ys = dy.sample(s);
        let mut oy0 = 0;
        while oy0 < g.hout {
            let oy1 = (oy0 + band).min(g.hout);
            let nc = (oy1 - oy0) * g.wout;
            let cols = &mut cols[..kr * nc];
            let dyband = MatRef::with_stride(&ys[oy0 * g.wout..], cout, nc, hw);
            if let Some(dw) = dw.as_mut() {
                im2col(x.sample(s), &g, oy0, oy1, cols);
                gemm(dyband, MatRef::new(cols, kr, nc).t(), T::one(), dw.data_mut(), kr);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(wmat.t(), dyband, T::zero(), cols, nc);
                col2im(cols, &g, oy0, oy1, dx.sample_mut(s));
            }
            oy0 = oy1;
        }
    }
    ConvGrads { dx, dw, db }
}
