//! Image quality metrics and the degradation operator. Images are `[h,w,c]`
//! with values nominally in `[0, 1]`; all arithmetic is done in `f64`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::resample::bicubic_downscale;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reported in place of an infinite PSNR for identical images.
pub const PSNR_SENTINEL: f64 = 999.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn dims<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(shape_err!("expected an [h,w,c] image, got {:?}", s)),
    }
}

fn same_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let d = dims(a)?;
    if a.shape() != b.shape() {
        return Err(shape_err!("image shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(d)
}

/// Removes `border` pixels from each side.
pub fn crop_border<T: Scalar>(x: &Tensor<T>, border: usize) -> Result<Tensor<T>> {
    let (h, w, c) = dims(x)?;
    if 2 * border >= h || 2 * border >= w {
        return Err(Error::Invalid(format!(
            "border {border} leaves nothing of a {h}x{w} image"
        )));
    }
    if border == 0 {
        return Ok(x.clone());
    }
    let (oh, ow) = (h - 2 * border, w - 2 * border);
    let mut out = Vec::with_capacity(oh * ow * c);
    for y in border..h - border {
        let row = (y * w + border) * c;
        out.extend_from_slice(&x.data()[row..row + ow * c]);
    }
    Tensor::new(&[oh, ow, c], out)
}

/// `10 log10(1 / MSE)` after removing `border` pixels on each side.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, border: usize) -> Result<f64> {
    same_dims(a, b)?;
    let (a, b) = (crop_border(a, border)?, crop_border(b, border)?);
    let mut sse = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = x.f64() - y.f64();
        sse += d * d;
    }
    let mse = sse / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok(10.0 * libm::log10(1.0 / mse))
}

/// Rec.601 luma of an RGB image; single-channel images pass through.
pub fn luma<T: Scalar>(x: &Tensor<T>) -> Result<Vec<f64>> {
    let (_, _, c) = dims(x)?;
    match c {
        1 => Ok(x.data().iter().map(|v| v.f64()).collect()),
        3 => Ok(x
            .data()
            .chunks(3)
            .map(|p| 0.299 * p[0].f64() + 0.587 * p[1].f64() + 0.114 * p[2].f64())
            .collect()),
        _ => Err(shape_err!("luma needs 1 or 3 channels, got {c}")),
    }
}

/// Normalized `n x n` Gaussian window, row-major.
pub fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..n)
        .map(|i| {
            let d = i as f64 - c;
            libm::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let total: f64 = g.iter().sum();
    let mut out = Vec::with_capacity(n * n);
    for a in &g {
        for b in &g {
            out.push(a * b / (total * total));
        }
    }
    out
}

/// Mean SSIM over every fully contained 11x11 window of the luma images.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (h, w, _) = same_dims(a, b)?;
    let n = SSIM_WINDOW;
    if h < n || w < n {
        return Err(Error::Invalid(format!(
            "{h}x{w} image is smaller than the {n}x{n} SSIM window"
        )));
    }
    let (la, lb) = (luma(a)?, luma(b)?);
    let win = gaussian_window(n, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for y in 0..=h - n {
        for x in 0..=w - n {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let k = win[i * n + j];
                    let p = (y + i) * w + x + j;
                    let (va, vb) = (la[p], lb[p]);
                    ma += k * va;
                    mb += k * vb;
                    saa += k * va * va;
                    sbb += k * vb * vb;
                    sab += k * va * vb;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / ((h - n + 1) * (w - n + 1)) as f64)
}

/// Low-resolution observation model.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Degradation {
    /// Antialiased bicubic downscaling.
    Bicubic { scale: usize },
    /// Correlation with `kernel` (row-major `rows x cols`, anchored at
    /// `((rows-1)/2, (cols-1)/2)`, edges clamped), then keeping every
    /// `scale`-th pixel starting at 0.
    BlurDecimate {
        scale: usize,
        rows: usize,
        cols: usize,
        kernel: Vec<f64>,
    },
}

impl Degradation {
    pub fn scale(&self) -> usize {
        match self {
            Degradation::Bicubic { scale } | Degradation::BlurDecimate { scale, .. } => *scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale() == 0 {
            return Err(Error::Config("degradation scale must be at least 1".into()));
        }
        if let Degradation::BlurDecimate { rows, cols, kernel, .. } = self {
            if *rows == 0 || *cols == 0 || kernel.len() != rows * cols {
                return Err(Error::Config(format!(
                    "blur kernel has {} entries for {rows}x{cols}",
                    kernel.len()
                )));
            }
        }
        Ok(())
    }
}

/// Applies `spec` to a high-resolution image.
pub fn degrade<T: Scalar>(hr: &Tensor<T>, spec: &Degradation) -> Result<Tensor<T>> {
    spec.validate()?;
    match spec {
        Degradation::Bicubic { scale } => bicubic_downscale(hr, *scale),
        Degradation::BlurDecimate {
            scale,
            rows,
            cols,
            kernel,
        } => blur_decimate(hr, *scale, *rows, *cols, kernel),
    }
}

fn blur_decimate<T: Scalar>(hr: &Tensor<T>, s: usize, kr: usize, kc: usize, kernel: &[f64]) -> Result<Tensor<T>> {
    let (h, w, c) = dims(hr)?;
    if h % s != 0 || w % s != 0 {
        return Err(shape_err!("{h}x{w} image is not divisible by the scale factor {s}"));
    }
    let (ay, ax) = (((kr - 1) / 2) as i64, ((kc - 1) / 2) as i64);
    let (oh, ow) = (h / s, w / s);
    let mut out = vec![T::zero(); oh * ow * c];
    let mut acc = vec![0.0f64; c];
    for oy in 0..oh {
        for ox in 0..ow {
            acc.fill(0.0);
            let (y, x) = ((oy * s) as i64, (ox * s) as i64);
            for i in 0..kr {
                let sy = (y + i as i64 - ay).clamp(0, h as i64 - 1) as usize;
                for j in 0..kc {
                    let k = kernel[i * kc + j];
                    if k == 0.0 {
                        continue;
                    }
                    let sx = (x + j as i64 - ax).clamp(0, w as i64 - 1) as usize;
                    let p = &hr.data()[(sy * w + sx) * c..][..c];
                    for (a, v) in acc.iter_mut().zip(p) {
                        *a += k * v.f64();
                    }
                }
            }
            for (o, a) in out[(oy * ow + ox) * c..][..c].iter_mut().zip(&acc) {
                *o = T::of(*a);
            }
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

/// PSNR between the degraded super-resolved image and the observed
/// low-resolution image, cropping `border` low-resolution pixels.
pub fn lr_consistency<T: Scalar>(sr: &Tensor<T>, lr: &Tensor<T>, spec: &Degradation, border: usize) -> Result<f64> {
    let d = degrade(sr, spec)?;
    if d.shape() != lr.shape() {
        return Err(shape_err!(
            "degraded image {:?} does not match the observation {:?}",
            d.shape(),
            lr.shape()
        ));
    }
    psnr(&d, lr, border)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn psnr_cases() {
        let a = random(&[8, 8, 3], 1);
        assert_eq!(psnr(&a, &a, 0).unwrap(), PSNR_SENTINEL);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &b, 4).is_err());
        assert!(psnr(&a, &random(&[8, 7, 3], 1), 0).is_err());
    }

    #[test]
    fn psnr_matches_formula_and_crop() {
        let a = random(&[10, 12, 3], 2);
        let b = random(&[10, 12, 3], 3);
        let mut sse = 0.0;
        let mut n = 0.0;
        for y in 2..8 {
            for x in 2..10 {
                for c in 0..3 {
                    let d = a.at(&[y, x, c]) - b.at(&[y, x, c]);
                    sse += d * d;
                    n += 1.0;
                }
            }
        }
        let want = -10.0 * libm::log10(sse / n);
        assert!((psnr(&a, &b, 2).unwrap() - want).abs() < 1e-9);
        let (ca, cb) = (crop_border(&a, 2).unwrap(), crop_border(&b, 2).unwrap());
        assert_eq!(psnr(&ca, &cb, 0).unwrap(), psnr(&a, &b, 2).unwrap());
    }

    #[test]
    fn ssim_cases() {
        let a = random(&[16, 16, 3], 4);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &neg).unwrap() < 0.0);
        assert!(ssim(&random(&[10, 16, 3], 1), &random(&[10, 16, 3], 2)).is_err());
    }

    #[test]
    fn ssim_of_constant_images() {
        let (ca, cb) = (0.4, 0.5);
        let a = Tensor::<f64>::full(&[11, 11, 1], ca);
        let b = Tensor::<f64>::full(&[11, 11, 1], cb);
        let c1 = 0.01f64 * 0.01;
        let want = (2.0 * ca * cb + c1) / (ca * ca + cb * cb + c1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn window_is_normalized_and_symmetric() {
        let w = gaussian_window(11, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert_eq!(w[0], w[120]);
        assert!(w[60] > w[59]);
    }

    #[test]
    fn degradation_cases() {
        let x = random(&[6, 6, 3], 5);
        let delta = Degradation::BlurDecimate {
            scale: 1,
            rows: 1,
            cols: 1,
            kernel: vec![1.0],
        };
        assert_eq!(degrade(&x, &delta).unwrap(), x);

        let k = Tensor::<f64>::full(&[8, 8, 3], 0.3);
        for spec in [
            Degradation::Bicubic { scale: 2 },
            Degradation::BlurDecimate {
                scale: 2,
                rows: 3,
                cols: 3,
                kernel: vec![1.0 / 9.0; 9],
            },
        ] {
            let d = degrade(&k, &spec).unwrap();
            assert_eq!(d.shape(), &[4, 4, 3]);
            assert!(d.data().iter().all(|v| (v - 0.3).abs() < 1e-14));
        }

        let checker = Tensor::<f64>::from_fn(&[4, 4, 1], |i| ((i / 4 + i % 4) % 2) as f64);
        let block = Degradation::BlurDecimate {
            scale: 2,
            rows: 2,
            cols: 2,
            kernel: vec![0.25; 4],
        };
        let d = degrade(&checker, &block).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.5));
        assert!(degrade(&random(&[5, 4, 1], 1), &block).is_err());
    }

    #[test]
    fn lr_consistency_cases() {
        let hr = random(&[16, 16, 3], 6);
        let spec = Degradation::Bicubic { scale: 2 };
        let lr = degrade(&hr, &spec).unwrap();
        assert_eq!(lr_consistency(&hr, &lr, &spec, 0).unwrap(), PSNR_SENTINEL);

        let up = crate::resample::bicubic_upsample(&lr, 2).unwrap();
        assert!(lr_consistency(&up, &lr, &spec, 1).unwrap().is_finite());

        let sr = random(&[16, 16, 3], 7);
        let want = psnr(&degrade(&sr, &spec).unwrap(), &lr, 1).unwrap();
        assert!((lr_consistency(&sr, &lr, &spec, 1).unwrap() - want).abs() < 1e-9);
        assert!(lr_consistency(&sr, &random(&[7, 8, 3], 1), &spec, 0).is_err());
    }

    fn arb_image() -> impl proptest::strategy::Strategy<Value = Tensor<f64>> {
        use proptest::prelude::*;
        (11usize..20, 11usize..20, any::<u64>()).prop_map(|(h, w, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Tensor::from_fn(&[h, w, 3], |_| rng.random_range(0.0..1.0))
        })
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn metrics_are_symmetric_and_maximal_on_identity(a in arb_image(), seed in proptest::prelude::any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = Tensor::from_fn(a.shape(), |i| (a.data()[i] + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0));
            proptest::prop_assert_eq!(psnr(&a, &b, 0).unwrap(), psnr(&b, &a, 0).unwrap());
            proptest::prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
            proptest::prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            proptest::prop_assert!(ssim(&a, &b).unwrap() <= 1.0 + 1e-12);
            proptest::prop_assert!(psnr(&a, &b, 0).unwrap() < psnr(&a, &a, 0).unwrap());
        }
    }
}
