//! Fixed-weight spatial resampling: bilinear resize and warping.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::{Backward, Tensor};

/// A sparse linear map from an `in_h x in_w` grid to an `out_h x out_w`
/// grid, applied identically to every channel. Each output cell reads at
/// most four input cells.
#[derive(Clone, Debug, PartialEq)]
pub struct ResamplePlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    taps: Vec<[(u32, f64); 4]>,
}

fn source_coord(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let lambda = if i0 == i1 { 0.0 } else { src - i0 as f64 };
    (i0, i1, lambda)
}

impl ResamplePlan {
    /// Bilinear interpolation with half-pixel centers (align-corners off).
    pub fn bilinear(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let rows: Vec<_> = (0..out_h).map(|r| source_coord(r, in_h, out_h)).collect();
        let cols: Vec<_> = (0..out_w).map(|c| source_coord(c, in_w, out_w)).collect();
        let mut taps = Vec::with_capacity(out_h * out_w);
        for &(r0, r1, ly) in &rows {
            for &(c0, c1, lx) in &cols {
                let idx = |r: usize, c: usize| (r * in_w + c) as u32;
                taps.push([
                    (idx(r0, c0), (1.0 - ly) * (1.0 - lx)),
                    (idx(r0, c1), (1.0 - ly) * lx),
                    (idx(r1, c0), ly * (1.0 - lx)),
                    (idx(r1, c1), ly * lx),
                ]);
            }
        }
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            taps,
        }
    }

    /// Bilinear sampling at arbitrary fractional input indices, one per
    /// output cell in row-major order. Neighbours outside the input read 0.
    pub fn from_points(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        mut sample_at: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Self {
        let mut taps = Vec::with_capacity(out_h * out_w);
        for r in 0..out_h {
            for c in 0..out_w {
                let (y, x) = sample_at(r, c);
                let mut cell = [(0u32, 0.0); 4];
                if y.is_finite() && x.is_finite() {
                    let (y0, x0) = (y.floor(), x.floor());
                    let (ly, lx) = (y - y0, x - x0);
                    let corners = [
                        (y0, x0, (1.0 - ly) * (1.0 - lx)),
                        (y0, x0 + 1.0, (1.0 - ly) * lx),
                        (y0 + 1.0, x0, ly * (1.0 - lx)),
                        (y0 + 1.0, x0 + 1.0, ly * lx),
                    ];
                    for (slot, (yy, xx, w)) in cell.iter_mut().zip(corners) {
                        let inside = yy >= 0.0 && xx >= 0.0 && yy < in_h as f64 && xx < in_w as f64;
                        if inside && w != 0.0 {
                            *slot = ((yy as usize * in_w + xx as usize) as u32, w);
                        }
                    }
                }
                taps.push(cell);
            }
        }
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            taps,
        }
    }

    pub fn apply_slice<T: Scalar>(&self, input: &[T], channels: usize) -> Vec<T> {
        let (ni, no) = (self.in_h * self.in_w, self.out_h * self.out_w);
        let weights: Vec<[(usize, T); 4]> = self
            .taps
            .iter()
            .map(|cell| cell.map(|(i, w)| (i as usize, T::from_f64_lossy(w))))
            .collect();
        let mut out = vec![T::zero(); channels * no];
        for c in 0..channels {
            let src = &input[c * ni..(c + 1) * ni];
            for (o, cell) in out[c * no..(c + 1) * no].iter_mut().zip(&weights) {
                *o = cell.iter().map(|&(i, w)| w * src[i]).sum();
            }
        }
        out
    }

    fn adjoint<T: Scalar>(&self, grad: &[T], channels: usize) -> Vec<T> {
        let (ni, no) = (self.in_h * self.in_w, self.out_h * self.out_w);
        let mut out = vec![T::zero(); channels * ni];
        for c in 0..channels {
            let dst = &mut out[c * ni..(c + 1) * ni];
            for (&g, cell) in grad[c * no..(c + 1) * no].iter().zip(&self.taps) {
                for &(i, w) in cell {
                    dst[i as usize] += g * T::from_f64_lossy(w);
                }
            }
        }
        out
    }
}

struct ResampleBackward {
    plan: Arc<ResamplePlan>,
    channels: usize,
}

impl<T: Scalar> Backward<T> for ResampleBackward {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _p: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        vec![Some(self.plan.adjoint(g, self.channels))]
    }
}

impl<T: Scalar> Tensor<T> {
    /// Applies a resampling plan to every channel of a `[C, H, W]` tensor.
    pub fn resample(&self, plan: &Arc<ResamplePlan>) -> Result<Tensor<T>> {
        let [c, h, w] = *self.shape() else {
            return Err(Error::shape("resample", format!("input {:?}", self.shape())));
        };
        if h != plan.in_h || w != plan.in_w {
            return Err(Error::shape(
                "resample",
                format!("plan expects {}x{}, got {h}x{w}", plan.in_h, plan.in_w),
            ));
        }
        let out = plan.apply_slice(&self.data(), c);
        Tensor::from_op(
            "resample",
            out,
            vec![c, plan.out_h, plan.out_w],
            vec![self.clone()],
            Box::new(ResampleBackward {
                plan: Arc::clone(plan),
                channels: c,
            }),
        )
    }

    /// Bilinear resize of a `[C, H, W]` tensor (align-corners off).
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let [_, h, w] = *self.shape() else {
            return Err(Error::shape("bilinear_resize", format!("input {:?}", self.shape())));
        };
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::shape("bilinear_resize", format!("{h}x{w} -> {out_h}x{out_w}")));
        }
        self.resample(&Arc::new(ResamplePlan::bilinear(h, w, out_h, out_w)))
    }
}
