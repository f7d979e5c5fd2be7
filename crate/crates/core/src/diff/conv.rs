//! Cross-correlation kernels lowered to GEMM via im2col.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::{Backward, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geom2 {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn im2col2<T: Scalar>(x: &[T], g: &Geom2) -> Vec<T> {
    let cols = g.ho * g.wo;
    let mut out = vec![T::zero(); g.cin * g.kh * g.kw * cols];
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..];
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[oi * g.wo + oj] = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im2<T: Scalar>(cols_data: &[T], g: &Geom2) -> Vec<T> {
    let cols = g.ho * g.wo;
    let mut out = vec![T::zero(); g.cin * g.h * g.w];
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + ii as usize) * g.w;
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            out[base + jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `out(cout, cols) = kernel(cout, rows) @ cols(rows, cols) + bias`
fn gemm_forward<T: Scalar>(
    kernel: &[T],
    cols_data: &[T],
    bias: Option<&[T]>,
    cout: usize,
    rows: usize,
    cols: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); cout * cols];
    if let Some(b) = bias {
        for (o, &bv) in out.chunks_mut(cols).zip(b) {
            o.iter_mut().for_each(|v| *v = bv);
        }
    }
    T::gemm(
        cout,
        rows,
        cols,
        T::one(),
        kernel,
        rows as isize,
        1,
        cols_data,
        cols as isize,
        1,
        T::one(),
        &mut out,
        cols as isize,
        1,
    );
    out
}

/// Kernel, column and bias gradients shared by the 2-D and 3-D paths.
fn gemm_backward<T: Scalar>(
    g: &[T],
    kernel: &[T],
    cols_data: &[T],
    cout: usize,
    rows: usize,
    cols: usize,
    need_cols: bool,
) -> (Vec<T>, Option<Vec<T>>, Vec<T>) {
    let mut gk = vec![T::zero(); cout * rows];
    // dK = dY @ cols^T
    T::gemm(
        cout,
        cols,
        rows,
        T::one(),
        g,
        cols as isize,
        1,
        cols_data,
        1,
        cols as isize,
        T::zero(),
        &mut gk,
        rows as isize,
        1,
    );
    let gcols = need_cols.then(|| {
        let mut gc = vec![T::zero(); rows * cols];
        // dcols = K^T @ dY
        T::gemm(
            rows,
            cout,
            cols,
            T::one(),
            kernel,
            1,
            rows as isize,
            g,
            cols as isize,
            1,
            T::zero(),
            &mut gc,
            cols as isize,
            1,
        );
        gc
    });
    let gb = g.chunks(cols).map(|r| r.iter().copied().sum()).collect();
    (gk, gcols, gb)
}

struct Conv2dBackward {
    geom: Geom2,
    cout: usize,
}

impl<T: Scalar> Backward<T> for Conv2dBackward {
    fn backward(&self, _out: &Tensor<T>, g: &[T], p: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let geom = &self.geom;
        let cols_data = im2col2(&p[0].data(), geom);
        let rows = geom.cin * geom.kh * geom.kw;
        let (gk, gcols, gb) = gemm_backward(
            g,
            &p[1].data(),
            &cols_data,
            self.cout,
            rows,
            geom.ho * geom.wo,
            p[0].requires_grad(),
        );
        let mut grads = vec![gcols.map(|gc| col2im2(&gc, geom)), Some(gk)];
        if p.len() > 2 {
            grads.push(Some(gb));
        }
        grads
    }
}

#[derive(Clone, Copy, Debug)]
struct Geom3 {
    cin: usize,
    t: usize,
    h: usize,
    w: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    to: usize,
    ho: usize,
    wo: usize,
}

fn im2col3<T: Scalar>(x: &[T], g: &Geom3, scatter: Option<&[T]>) -> Vec<T> {
    // With `scatter` set this runs the adjoint (col2im) instead.
    let cols = g.to * g.ho * g.wo;
    let rows = g.cin * g.kt * g.kh * g.kw;
    let mut out = match scatter {
        None => vec![T::zero(); rows * cols],
        Some(_) => vec![T::zero(); g.cin * g.t * g.h * g.w],
    };
    for c in 0..g.cin {
        for a in 0..g.kt {
            for b in 0..g.kh {
                for d in 0..g.kw {
                    let row = ((c * g.kt + a) * g.kh + b) * g.kw + d;
                    for ot in 0..g.to {
                        for oi in 0..g.ho {
                            let src_base = ((c * g.t + ot + a) * g.h + oi + b) * g.w + d;
                            let col_base = row * cols + (ot * g.ho + oi) * g.wo;
                            match scatter {
                                None => out[col_base..col_base + g.wo].copy_from_slice(&x[src_base..src_base + g.wo]),
                                Some(s) => {
                                    for oj in 0..g.wo {
                                        out[src_base + oj] += s[col_base + oj];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

struct Conv3dBackward {
    geom: Geom3,
    cout: usize,
}

impl<T: Scalar> Backward<T> for Conv3dBackward {
    fn backward(&self, _out: &Tensor<T>, g: &[T], p: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let geom = &self.geom;
        let cols_data = im2col3(&p[0].data(), geom, None);
        let rows = geom.cin * geom.kt * geom.kh * geom.kw;
        let (gk, gcols, gb) = gemm_backward(
            g,
            &p[1].data(),
            &cols_data,
            self.cout,
            rows,
            geom.to * geom.ho * geom.wo,
            p[0].requires_grad(),
        );
        let gx = gcols.map(|gc| im2col3(&[], geom, Some(&gc)));
        let mut grads = vec![gx, Some(gk)];
        if p.len() > 2 {
            grads.push(Some(gb));
        }
        grads
    }
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [cout] => Err(Error::shape(op, format!("bias {:?} for {cout} outputs", b.shape()))),
        _ => Ok(()),
    }
}

impl<T: Scalar> Tensor<T> {
    /// 2-D cross-correlation of a `[C_in, H, W]` input with a
    /// `[C_out, C_in, kh, kw]` kernel.
    pub fn conv2d(
        &self,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        if stride < 1 {
            return Err(Error::InvalidStride(stride));
        }
        let [cin, h, w] = *self.shape() else {
            return Err(Error::shape("conv2d", format!("input {:?}", self.shape())));
        };
        let [cout, kcin, kh, kw] = *kernel.shape() else {
            return Err(Error::shape("conv2d", format!("kernel {:?}", kernel.shape())));
        };
        if kcin != cin || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} kernel {:?} pad {padding}", self.shape(), kernel.shape()),
            ));
        }
        check_bias("conv2d", bias, cout)?;
        let geom = Geom2 {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let out = {
            let cols_data = im2col2(&self.data(), &geom);
            let b = bias.map(|b| b.data());
            gemm_forward(
                &kernel.data(),
                &cols_data,
                b.as_ref().map(|g| g.as_slice()),
                cout,
                cin * kh * kw,
                geom.ho * geom.wo,
            )
        };
        let mut parents = vec![self.clone(), kernel.clone()];
        parents.extend(bias.cloned());
        Tensor::from_op(
            "conv2d",
            out,
            vec![cout, geom.ho, geom.wo],
            parents,
            Box::new(Conv2dBackward { geom, cout }),
        )
    }

    /// Unpadded, unit-stride 3-D cross-correlation of a `[C_in, T, H, W]`
    /// input with a `[C_out, C_in, kt, kh, kw]` kernel.
    pub fn conv3d(&self, kernel: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let [cin, t, h, w] = *self.shape() else {
            return Err(Error::shape("conv3d", format!("input {:?}", self.shape())));
        };
        let [cout, kcin, kt, kh, kw] = *kernel.shape() else {
            return Err(Error::shape("conv3d", format!("kernel {:?}", kernel.shape())));
        };
        if kcin != cin || kt > t || kh > h || kw > w || kt * kh * kw == 0 {
            return Err(Error::shape(
                "conv3d",
                format!("input {:?} kernel {:?}", self.shape(), kernel.shape()),
            ));
        }
        check_bias("conv3d", bias, cout)?;
        let geom = Geom3 {
            cin,
            t,
            h,
            w,
            kt,
            kh,
            kw,
            to: t - kt + 1,
            ho: h - kh + 1,
            wo: w - kw + 1,
        };
        let out = {
            let cols_data = im2col3(&self.data(), &geom, None);
            let b = bias.map(|b| b.data());
            gemm_forward(
                &kernel.data(),
                &cols_data,
                b.as_ref().map(|g| g.as_slice()),
                cout,
                cin * kt * kh * kw,
                geom.to * geom.ho * geom.wo,
            )
        };
        let mut parents = vec![self.clone(), kernel.clone()];
        parents.extend(bias.cloned());
        Tensor::from_op(
            "conv3d",
            out,
            vec![cout, geom.to, geom.ho, geom.wo],
            parents,
            Box::new(Conv3dBackward { geom, cout }),
        )
    }
}
