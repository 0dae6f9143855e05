//! Cast-and-project: rays from the target's super-resolved pixel grid are
//! sampled at a shared inverse-depth ladder, projected into each extra view
//! and used to gather bicubic feature samples.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::Vector3;

use crate::camera::Camera;
use crate::error::{shape_err, Error, Result};
use crate::graph::GatherPlan;
use crate::resample::{push_bicubic_row, sample};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smallest extra-camera depth accepted as "in front".
pub const MIN_DEPTH: f64 = 1e-6;

/// Depth ladder shared by every ray of a target view.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RaySampling {
    pub points: usize,
    pub near: f64,
    pub far: f64,
}

impl RaySampling {
    pub fn new(points: usize, near: f64, far: f64) -> Result<Self> {
        let s = Self { points, near, far };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points < 2 {
            return Err(Error::Invalid(format!(
                "need at least 2 ray points, got {}",
                self.points
            )));
        }
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::Invalid(format!(
                "depth bounds must satisfy 0 < near < far (near={}, far={})",
                self.near, self.far
            )));
        }
        Ok(())
    }
}

/// Depths uniform in inverse depth, `near` and `far` included.
pub fn sample_depths_hyperbolic(s: &RaySampling) -> Result<Vec<f64>> {
    s.validate()?;
    let last = (s.points - 1) as f64;
    Ok((0..s.points)
        .map(|i| {
            let u = i as f64 / last;
            1.0 / ((1.0 - u) / s.near + u / s.far)
        })
        .collect())
}

/// Normalized inverse-depth position of each ladder entry, `i / (P - 1)`.
/// A single-point ladder maps to 0.
pub fn ladder_positions(points: usize) -> Vec<f64> {
    if points <= 1 {
        return vec![0.0; points];
    }
    let last = (points - 1) as f64;
    (0..points).map(|i| i as f64 / last).collect()
}

/// A projection into an extra view is usable when it lies in front of the
/// camera and inside the `width x height` grid, borders included.
#[inline]
pub fn compute_validity(u: f64, v: f64, z: f64, width: usize, height: usize) -> bool {
    z > MIN_DEPTH && u >= 0.0 && u <= width as f64 - 1.0 && v >= 0.0 && v <= height as f64 - 1.0
}

/// One ray point projected into an extra view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub u: f64,
    pub v: f64,
    pub z: f64,
    pub valid: bool,
}

/// Precomputed projection of target-grid rays into one extra view, both
/// cameras already on their super-resolved grids.
#[derive(Debug, Clone)]
struct RayProjector {
    target: Camera,
    extra: Camera,
}

impl RayProjector {
    fn new(target_sr: Camera, extra_sr: Camera) -> Self {
        Self {
            target: target_sr,
            extra: extra_sr,
        }
    }

    fn hits(&self, x: f64, y: f64, depths: &[f64], out: &mut Vec<RayHit>) {
        let ray = self.target.backproject(x, y);
        let k = &self.extra.intrinsics;
        let (w, h) = (k.width, k.height);
        for &d in depths {
            let c: Vector3<f64> = self.extra.to_camera_frame(&ray.at_depth(d));
            let hit = if c.z.abs() < 1e-12 {
                RayHit {
                    u: f64::NAN,
                    v: f64::NAN,
                    z: c.z,
                    valid: false,
                }
            } else {
                let (xn, yn) = (c.x / c.z, c.y / c.z);
                let u = k.fx * xn + k.skew * yn + k.cx;
                let v = k.fy * yn + k.cy;
                RayHit {
                    u,
                    v,
                    z: c.z,
                    valid: compute_validity(u, v, c.z, w, h),
                }
            };
            out.push(hit);
        }
    }
}

/// Projections of the ray through SR pixel `(x, y)` of the target into the
/// extra view's SR grid, one per depth. Points on the extra camera's plane
/// get non-finite coordinates.
pub fn epipolar_line_segment(
    target: &Camera,
    extra: &Camera,
    pixel: (f64, f64),
    sampling: &RaySampling,
    s: usize,
) -> Result<Vec<(f64, f64)>> {
    let depths = sample_depths_hyperbolic(sampling)?;
    Ok(project_ray(target, extra, pixel, &depths, s)
        .into_iter()
        .map(|h| (h.u, h.v))
        .collect())
}

/// Projects the target ray through SR pixel `pixel` at each of `depths`.
pub fn project_ray(target: &Camera, extra: &Camera, pixel: (f64, f64), depths: &[f64], s: usize) -> Vec<RayHit> {
    let proj = RayProjector::new(target.upscaled(s), extra.upscaled(s));
    let mut out = Vec::with_capacity(depths.len());
    proj.hits(pixel.0, pixel.1, depths, &mut out);
    out
}

/// Epipolar feature tensor of one extra view.
#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarTensor<T> {
    /// `[P, sH, sW, C]`; invalid entries are zero.
    pub features: Tensor<T>,
    /// `[P, sH, sW]`; `true` marks a valid projection.
    pub mask: Tensor<bool>,
    /// The shared depth ladder, strictly increasing.
    pub depths: Vec<f64>,
}

fn feature_dims<T: Scalar>(f: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *f.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(shape_err!("feature map must be [h,w,c], got {:?}", s)),
    }
}

fn check_sr_extents(cam: &Camera, s: usize, h: usize, w: usize, what: &str) -> Result<()> {
    let (eh, ew) = (cam.intrinsics.height * s, cam.intrinsics.width * s);
    if (h, w) != (eh, ew) {
        return Err(shape_err!(
            "{what} feature map is {h}x{w}, the camera's x{s} grid is {eh}x{ew}"
        ));
    }
    Ok(())
}

fn check_scale(s: usize) -> Result<()> {
    if s == 0 {
        return Err(Error::Config("scale factor must be at least 1".into()));
    }
    Ok(())
}

/// Samples the extra view's SR features `f_v` along every ray of the
/// target's SR grid. Cameras are given on their low-resolution grids.
pub fn cast_and_project<T: Scalar>(
    target: &Camera,
    extra: &Camera,
    f_v: &Tensor<T>,
    sampling: &RaySampling,
    s: usize,
) -> Result<EpipolarTensor<T>> {
    check_scale(s)?;
    let (fh, fw, c) = feature_dims(f_v)?;
    check_sr_extents(extra, s, fh, fw, "extra view")?;
    let depths = sample_depths_hyperbolic(sampling)?;
    let p = depths.len();
    let (th, tw) = (target.intrinsics.height * s, target.intrinsics.width * s);
    let proj = RayProjector::new(target.upscaled(s), extra.upscaled(s));

    let mut features = vec![T::zero(); p * th * tw * c];
    let mut mask = vec![false; p * th * tw];
    let mut hits = Vec::with_capacity(p);
    for y in 0..th {
        for x in 0..tw {
            hits.clear();
            proj.hits(x as f64, y as f64, &depths, &mut hits);
            for (i, hit) in hits.iter().enumerate() {
                if !hit.valid {
                    continue;
                }
                let cell = (i * th + y) * tw + x;
                mask[cell] = true;
                let val = sample(f_v, hit.u, hit.v)?;
                features[cell * c..(cell + 1) * c].copy_from_slice(&val);
            }
        }
    }
    Ok(EpipolarTensor {
        features: Tensor::new(&[p, th, tw, c], features)?,
        mask: Tensor::new(&[p, th, tw], mask)?,
        depths,
    })
}

/// Gather plan sampling stacked view features for a batch of target pixels.
#[derive(Debug, Clone)]
pub struct RayGather<T> {
    /// Rows ordered `(pixel, point, view)`, indexing the row-stacked
    /// `[sum_v sH_v*sW_v, C]` extra-view features.
    pub plan: GatherPlan<T>,
    /// Validity per row, same order as the plan.
    pub mask: Vec<bool>,
    pub views: usize,
    pub points: usize,
}

/// Builds the bicubic gather for the given target SR `pixels` (`(x, y)`)
/// against `extras`, whose SR feature maps are stacked in order. Invalid
/// projections become all-zero rows. Row values match
/// [`cast_and_project`] exactly.
pub fn ray_gather<T: Scalar>(
    target: &Camera,
    extras: &[Camera],
    pixels: &[(usize, usize)],
    depths: &[f64],
    s: usize,
) -> Result<RayGather<T>> {
    check_scale(s)?;
    let (th, tw) = (target.intrinsics.height * s, target.intrinsics.width * s);
    if let Some(&(x, y)) = pixels.iter().find(|&&(x, y)| x >= tw || y >= th) {
        return Err(shape_err!("pixel ({x}, {y}) lies outside the {th}x{tw} target grid"));
    }
    let target_sr = target.upscaled(s);
    let mut bases = Vec::with_capacity(extras.len());
    let mut offset = 0;
    let projectors: Vec<RayProjector> = extras
        .iter()
        .map(|e| {
            bases.push(offset);
            offset += e.intrinsics.width * e.intrinsics.height * s * s;
            RayProjector::new(target_sr, e.upscaled(s))
        })
        .collect();
    let (v, p) = (extras.len(), depths.len());
    let rows = pixels.len() * p * v;
    let mut plan = GatherPlan::with_capacity(16, rows);
    let mut mask = Vec::with_capacity(rows);
    let mut per_view: Vec<Vec<RayHit>> = vec![Vec::with_capacity(p); v];
    for &(x, y) in pixels {
        for (hits, proj) in per_view.iter_mut().zip(&projectors) {
            hits.clear();
            proj.hits(x as f64, y as f64, depths, hits);
        }
        for i in 0..p {
            for (j, proj) in projectors.iter().enumerate() {
                let hit = per_view[j][i];
                mask.push(hit.valid);
                if hit.valid {
                    let k = &proj.extra.intrinsics;
                    push_bicubic_row(&mut plan, bases[j], k.height, k.width, hit.u, hit.v);
                } else {
                    plan.push_zero_row();
                }
            }
        }
    }
    Ok(RayGather {
        plan,
        mask,
        views: v,
        points: p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Pose};
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hyperbolic_ladder_cases() {
        let d = sample_depths_hyperbolic(&RaySampling::new(3, 1.0, 3.0).unwrap()).unwrap();
        assert_eq!(d[0], 1.0);
        assert!((d[1] - 1.5).abs() < 1e-15);
        assert!((d[2] - 3.0).abs() < 1e-15);
        assert!(RaySampling::new(3, 1.0, 1.0).is_err());
        assert!(RaySampling::new(1, 1.0, 2.0).is_err());

        let a = sample_depths_hyperbolic(&RaySampling::new(9, 1.0, 5.0).unwrap()).unwrap();
        let b = sample_depths_hyperbolic(&RaySampling::new(9, 2.0, 10.0).unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((2.0 * x - y).abs() < 1e-14);
        }
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn validity_cases() {
        assert!(!compute_validity(1.0, 1.0, -1.0, 4, 4));
        assert!(compute_validity(0.0, 0.0, 1.0, 4, 4));
        assert!(compute_validity(3.0, 3.0, 1.0, 4, 4));
        assert!(!compute_validity(3.0 + 1e-12, 3.0, 1.0, 4, 4));
        assert!(!compute_validity(1.0, 1.0, 1e-6, 4, 4));
    }

    fn oracle_valid(u: f64, v: f64, z: f64, w: usize, h: usize) -> bool {
        if !(z > 0.000001) {
            return false;
        }
        let inside_u = !(u < 0.0) && !(u > (w - 1) as f64);
        let inside_v = !(v < 0.0) && !(v > (h - 1) as f64);
        inside_u && inside_v
    }

    #[test]
    fn validity_matches_independent_predicate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100_000 {
            let (w, h) = (rng.random_range(1..40), rng.random_range(1..40));
            let u = rng.random_range(-5.0..45.0);
            let v = rng.random_range(-5.0..45.0);
            let z = rng.random_range(-1.0..1.0) * 1e-5;
            assert_eq!(compute_validity(u, v, z, w, h), oracle_valid(u, v, z, w, h));
        }
    }

    fn camera(t: [f64; 3]) -> Camera {
        let k = Intrinsics::new(8.0, 8.0, 3.5, 2.5, 0.0, 8, 6).unwrap();
        Camera::new(k, Pose::new(Matrix3::identity(), Vector3::from(t)).unwrap())
    }

    #[test]
    fn self_projection_copies_features() {
        let cam = camera([0.0, 0.0, 0.0]);
        let f = Tensor::<f64>::from_fn(&[12, 16, 3], |i| libm::cos(i as f64 * 0.3));
        let samp = RaySampling::new(4, 1.0, 4.0).unwrap();
        let e = cast_and_project(&cam, &cam, &f, &samp, 2).unwrap();
        assert_eq!(e.features.shape(), &[4, 12, 16, 3]);
        assert!(e.mask.data().iter().all(|&m| m));
        for i in 0..4 {
            for y in 0..12 {
                for x in 0..16 {
                    for c in 0..3 {
                        let d = e.features.at(&[i, y, x, c]) - f.at(&[y, x, c]);
                        assert!(d.abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn camera_facing_away_sees_nothing() {
        let target = camera([0.0, 0.0, 0.0]);
        let flip = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        let away = Camera::new(target.intrinsics, Pose::new(flip, Vector3::zeros()).unwrap());
        let f = Tensor::<f32>::full(&[12, 16, 2], 1.0);
        let e = cast_and_project(&target, &away, &f, &RaySampling::new(5, 1.0, 3.0).unwrap(), 2).unwrap();
        assert!(e.mask.data().iter().all(|&m| !m));
        assert!(e.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_extent_mismatch_is_rejected() {
        let cam = camera([0.0, 0.0, 0.0]);
        let f = Tensor::<f32>::zeros(&[12, 15, 2]);
        let r = cast_and_project(&cam, &cam, &f, &RaySampling::new(2, 1.0, 3.0).unwrap(), 2);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn identical_cameras_project_onto_the_pixel() {
        let cam = camera([0.1, 0.2, 0.3]);
        let samp = RaySampling::new(6, 1.0, 5.0).unwrap();
        for (u, v) in epipolar_line_segment(&cam, &cam, (5.0, 3.0), &samp, 2).unwrap() {
            assert!((u - 5.0).abs() < 1e-12 && (v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stereo_pair_spacing_is_uniform() {
        let a = camera([0.0, 0.0, 0.0]);
        let b = camera([-0.3, 0.0, 0.0]);
        let samp = RaySampling::new(64, 1.0, 20.0).unwrap();
        let pts = epipolar_line_segment(&a, &b, (4.0, 7.0), &samp, 2).unwrap();
        let gaps: Vec<f64> = pts
            .windows(2)
            .map(|w| libm::hypot(w[1].0 - w[0].0, w[1].1 - w[0].1))
            .collect();
        let max = gaps.iter().cloned().fold(f64::MIN, f64::max);
        let min = gaps.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min - 1.0 < 1e-6);
    }

    #[test]
    fn gather_rows_match_cast_and_project() {
        let target = camera([0.0, 0.0, 0.0]);
        let extras = [camera([-0.2, 0.05, 0.0]), camera([0.15, -0.1, 0.02])];
        let samp = RaySampling::new(5, 1.0, 6.0).unwrap();
        let depths = sample_depths_hyperbolic(&samp).unwrap();
        let maps: Vec<Tensor<f64>> = (0..2)
            .map(|k| Tensor::from_fn(&[12, 16, 3], |i| libm::sin(i as f64 * 0.17 + k as f64)))
            .collect();
        let stacked: Vec<f64> = maps.iter().flat_map(|m| m.data().to_vec()).collect();
        let pixels = [(0, 0), (7, 5), (15, 11), (3, 9)];
        let g = ray_gather::<f64>(&target, &extras, &pixels, &depths, 2).unwrap();
        let rows = g.plan.apply(&stacked, 3);
        let cap: Vec<EpipolarTensor<f64>> = extras
            .iter()
            .zip(&maps)
            .map(|(e, m)| cast_and_project(&target, e, m, &samp, 2).unwrap())
            .collect();
        let mut r = 0;
        for &(x, y) in &pixels {
            for i in 0..5 {
                for (v, e) in cap.iter().enumerate() {
                    assert_eq!(g.mask[r], e.mask.at(&[i, y, x]), "row {r} view {v}");
                    for c in 0..3 {
                        assert_eq!(rows[r * 3 + c], e.features.at(&[i, y, x, c]));
                    }
                    r += 1;
                }
            }
        }
        assert!(g.mask.iter().any(|&m| m) && g.mask.iter().any(|&m| !m));
    }

    proptest::proptest! {
        #[test]
        fn ladder_is_uniform_in_inverse_depth(points in 2usize..200, near in 0.01f64..10.0, ratio in 1.001f64..100.0) {
            let far = near * ratio;
            let d = sample_depths_hyperbolic(&RaySampling::new(points, near, far).unwrap()).unwrap();
            proptest::prop_assert_eq!(d.len(), points);
            proptest::prop_assert!((d[0] - near).abs() <= 1e-12 * near);
            proptest::prop_assert!((d[points - 1] - far).abs() <= 1e-12 * far);
            proptest::prop_assert!(d.windows(2).all(|w| w[0] < w[1]));
            let step = (1.0 / far - 1.0 / near) / (points - 1) as f64;
            for w in d.windows(2) {
                proptest::prop_assert!((1.0 / w[1] - 1.0 / w[0] - step).abs() < 1e-9 / near);
            }
        }

        #[test]
        fn points_behind_or_outside_are_invalid(u in -10.0f64..40.0, v in -10.0f64..40.0, z in -1.0f64..1.0) {
            let ok = compute_validity(u, v, z, 30, 20);
            let inside = (0.0..=29.0).contains(&u) && (0.0..=19.0).contains(&v);
            proptest::prop_assert_eq!(ok, inside && z > MIN_DEPTH);
        }
    }
}
