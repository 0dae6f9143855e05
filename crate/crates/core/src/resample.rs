//! Catmull-Rom bicubic resampling.
//!
//! Pixel centers sit at integer coordinates. Scaling by `s` maps output
//! pixel `j` to source coordinate `(j + 0.5) / s - 0.5` (upsampling) or
//! `(j + 0.5) * s - 0.5` (downscaling). Out-of-range taps clamp to the edge.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::graph::{GatherPlan, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Kernel parameter `a` of the cubic convolution family.
pub const CUBIC_A: f64 = -0.5;

/// Catmull-Rom cubic convolution kernel.
#[inline]
pub fn cubic_weight(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// The four edge-clamped taps `(index, weight)` interpolating position `x`
/// on an axis of length `n`.
#[inline]
pub fn cubic_taps(x: f64, n: usize) -> [(usize, f64); 4] {
    let base = libm::floor(x);
    let frac = x - base;
    let last = n.saturating_sub(1) as f64;
    let mut taps = [(0usize, 0.0f64); 4];
    for (t, tap) in taps.iter_mut().enumerate() {
        let offset = t as f64 - 1.0;
        let idx = (base + offset).clamp(0.0, last) as usize;
        *tap = (idx, cubic_weight(frac - offset));
    }
    taps
}

fn dims3<T>(x: &Tensor<T>) -> Result<(usize, usize, usize)>
where
    T: Scalar,
{
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(shape_err!("expected an [h,w,c] image, got {:?}", s)),
    }
}

/// Resamples one axis with precomputed per-output taps.
fn resample_axis<T: Scalar>(src: &[T], [outer, len, inner]: [usize; 3], taps: &[Vec<(usize, f64)>]) -> Vec<T> {
    let out_len = taps.len();
    let mut out = vec![T::zero(); outer * out_len * inner];
    for o in 0..outer {
        for (j, tj) in taps.iter().enumerate() {
            let dst = &mut out[(o * out_len + j) * inner..][..inner];
            for &(idx, w) in tj {
                if w == 0.0 {
                    continue;
                }
                let w = T::of(w);
                let s = &src[(o * len + idx) * inner..][..inner];
                for (d, &v) in dst.iter_mut().zip(s) {
                    *d += w * v;
                }
            }
        }
    }
    out
}

fn upsample_taps(n: usize, s: usize) -> Vec<Vec<(usize, f64)>> {
    (0..n * s)
        .map(|j| {
            let x = (j as f64 + 0.5) / s as f64 - 0.5;
            cubic_taps(x, n).to_vec()
        })
        .collect()
}

fn downscale_taps(n: usize, s: usize) -> Vec<Vec<(usize, f64)>> {
    let sf = s as f64;
    (0..n / s)
        .map(|i| {
            let c = (i as f64 + 0.5) * sf - 0.5;
            let lo = libm::ceil(c - 2.0 * sf) as i64;
            let hi = libm::floor(c + 2.0 * sf) as i64;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .map(|j| {
                    let idx = j.clamp(0, n as i64 - 1) as usize;
                    (idx, cubic_weight((j as f64 - c) / sf))
                })
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Bicubic upsampling of an `[h,w,c]` image by the integer factor `s`.
pub fn bicubic_upsample<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (h, w, c) = dims3(x)?;
    if s == 0 {
        return Err(Error::Config("scale factor must be at least 1".into()));
    }
    if s == 1 {
        return Ok(x.clone());
    }
    let rows = resample_axis(x.data(), [h, w, c], &upsample_taps(w, s));
    let out = resample_axis(&rows, [1, h, w * s * c], &upsample_taps(h, s));
    Tensor::new(&[h * s, w * s, c], out)
}

/// Antialiased bicubic downscaling by `s`: the kernel is stretched by `s`
/// and renormalized per output pixel. Output extents are `h / s`, `w / s`.
pub fn bicubic_downscale<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (h, w, c) = dims3(x)?;
    if s == 0 {
        return Err(Error::Config("scale factor must be at least 1".into()));
    }
    if s == 1 {
        return Ok(x.clone());
    }
    if h < s || w < s {
        return Err(shape_err!("{h}x{w} image is smaller than the scale factor {s}"));
    }
    let rows = resample_axis(x.data(), [h, w, c], &downscale_taps(w, s));
    let out = resample_axis(&rows, [1, h, (w / s) * c], &downscale_taps(h, s));
    Tensor::new(&[h / s, w / s, c], out)
}

/// Sixteen `(flat pixel index, weight)` taps sampling an `h x w` grid at
/// (`x`, `y`). Non-finite positions produce all-zero weights.
pub fn bicubic_taps(h: usize, w: usize, x: f64, y: f64) -> [(usize, f64); 16] {
    let mut out = [(0usize, 0.0f64); 16];
    if !x.is_finite() || !y.is_finite() {
        return out;
    }
    let tx = cubic_taps(x, w);
    let ty = cubic_taps(y, h);
    for (a, &(iy, wy)) in ty.iter().enumerate() {
        for (b, &(ix, wx)) in tx.iter().enumerate() {
            out[a * 4 + b] = (iy * w + ix, wy * wx);
        }
    }
    out
}

/// Appends one bicubic row per position to `plan` (16 taps).
pub fn push_bicubic_row<T: Scalar>(plan: &mut GatherPlan<T>, base: usize, h: usize, w: usize, x: f64, y: f64) {
    let taps = bicubic_taps(h, w, x, y);
    let mut row = [(0usize, T::zero()); 16];
    for (r, &(i, wt)) in row.iter_mut().zip(&taps) {
        *r = (base + i, T::of(wt));
    }
    plan.push_row(&row);
}

/// Bicubic sampling of `f` (`[h,w,c]`) at real pixel positions `(x, y)`,
/// giving `[n, c]`. Differentiable in `f`; positions are constants.
pub fn bicubic_sample_at<T: Scalar>(g: &mut Graph<T>, f: Var, coords: &[(f64, f64)]) -> Result<Var> {
    let (h, w, _) = dims3(g.value(f))?;
    let mut plan = GatherPlan::with_capacity(16, coords.len());
    for &(x, y) in coords {
        push_bicubic_row(&mut plan, 0, h, w, x, y);
    }
    g.gather(f, plan)
}

/// Plain (non-recorded) bicubic sample of an `[h,w,c]` tensor.
pub fn sample<T: Scalar>(f: &Tensor<T>, x: f64, y: f64) -> Result<Vec<T>> {
    let (h, w, c) = dims3(f)?;
    let mut out = vec![T::zero(); c];
    for (i, wt) in bicubic_taps(h, w, x, y) {
        if wt == 0.0 {
            continue;
        }
        let wt = T::of(wt);
        for (o, &v) in out.iter_mut().zip(&f.data()[i * c..(i + 1) * c]) {
            *o += wt * v;
        }
    }
    Ok(out)
}
