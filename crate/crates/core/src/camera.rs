//! Pinhole cameras with a world-to-camera pose convention.
//!
//! A world point `X` maps to camera coordinates `R X + t`; points in front
//! of the camera have positive camera-frame depth `z`. Pixel centers are at
//! integer coordinates.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Orthonormality tolerance for [`Pose`] rotations.
pub const ROTATION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, skew: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            skew,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, zero skew, principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            0.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.skew]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Geometry(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, self.skew, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        let (fx, fy, s, cx, cy) = (self.fx, self.fy, self.skew, self.cx, self.cy);
        Matrix3::new(
            1.0 / fx,
            -s / (fx * fy),
            (s * cy - cx * fy) / (fx * fy),
            0.0,
            1.0 / fy,
            -cy / fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Intrinsics of the same camera on an `s` times finer pixel grid,
    /// with half-pixel-centered coordinates.
    pub fn upscaled(&self, s: usize) -> Self {
        let sf = s as f64;
        let shift = (sf - 1.0) / 2.0;
        Self {
            fx: self.fx * sf,
            fy: self.fy * sf,
            cx: self.cx * sf + shift,
            cy: self.cy * sf + shift,
            skew: self.skew * sf,
            width: self.width * s,
            height: self.height * s,
        }
    }

    /// Inverse of [`Intrinsics::upscaled`].
    pub fn downscaled(&self, s: usize) -> Self {
        let sf = s as f64;
        let shift = (sf - 1.0) / 2.0;
        Self {
            fx: self.fx / sf,
            fy: self.fy / sf,
            cx: (self.cx - shift) / sf,
            cy: (self.cy - shift) / sf,
            skew: self.skew / sf,
            width: self.width / s,
            height: self.height / s,
        }
    }
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let p = Self { rotation, translation };
        p.validate(ROTATION_TOL)?;
        Ok(p)
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if !(ortho <= tol) || !((det - 1.0).abs() <= tol) || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Geometry(format!(
                "rotation is not proper orthonormal (|R^T R - I| = {ortho:e}, det = {det})"
            )));
        }
        Ok(())
    }

    /// Pose of a camera at `center` looking at `target`, with image rows
    /// pointing along `-up` projected on the image plane.
    pub fn look_at(center: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - center;
        if forward.norm() < 1e-12 {
            return Err(Error::Geometry("camera center coincides with its target".into()));
        }
        let z = forward.normalize();
        let x = z.cross(&(-up));
        if x.norm() < 1e-9 {
            return Err(Error::Geometry("up vector is parallel to the viewing direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * center);
        Ok(Self { rotation, translation })
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

/// Result of projecting a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Camera-frame depth; negative behind the camera.
    pub z: f64,
}

/// Back-projected pixel ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit direction.
    pub direction: Vector3<f64>,
    /// `R^T K^-1 (u, v, 1)`: advancing by one unit of camera-frame depth.
    pub depth_step: Vector3<f64>,
}

impl Ray {
    /// World point at camera-frame depth `d` along the ray.
    pub fn at_depth(&self, d: f64) -> Vector3<f64> {
        self.origin + self.depth_step * d
    }
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Pose) -> Self {
        Self { intrinsics, pose }
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.center()
    }

    /// The same camera on an `s` times finer pixel grid.
    pub fn upscaled(&self, s: usize) -> Self {
        Self {
            intrinsics: self.intrinsics.upscaled(s),
            pose: self.pose,
        }
    }

    pub fn downscaled(&self, s: usize) -> Self {
        Self {
            intrinsics: self.intrinsics.downscaled(s),
            pose: self.pose,
        }
    }

    pub fn to_camera_frame(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.pose.rotation * x + self.pose.translation
    }

    pub fn project(&self, x: &Vector3<f64>) -> Result<Projection> {
        let c = self.to_camera_frame(x);
        if c.z.abs() < 1e-12 {
            return Err(Error::AtCameraPlane);
        }
        let k = &self.intrinsics;
        let (xn, yn) = (c.x / c.z, c.y / c.z);
        Ok(Projection {
            u: k.fx * xn + k.skew * yn + k.cx,
            v: k.fy * yn + k.cy,
            z: c.z,
        })
    }

    pub fn backproject(&self, u: f64, v: f64) -> Ray {
        let local = self.intrinsics.inverse_matrix() * Vector3::new(u, v, 1.0);
        let depth_step = self.pose.rotation.transpose() * local;
        Ray {
            origin: self.center(),
            direction: depth_step.normalize(),
            depth_step,
        }
    }

    /// `K [R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let k = self.intrinsics.matrix();
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.pose.rotation);
        rt.set_column(3, &self.pose.translation);
        k * rt
    }
}

/// Splits a 3x4 projection matrix into intrinsics and pose (RQ
/// decomposition). The result has a positive intrinsic diagonal, unit
/// `K[2][2]`, and a proper rotation; the overall projective scale and its
/// sign are discarded.
pub fn decompose_projection_matrix(p: &Matrix3x4<f64>, width: usize, height: usize) -> Result<Camera> {
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::Decomposition("matrix has non-finite entries".into()));
    }
    let mut m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    let mut p4: Vector3<f64> = p.column(3).into_owned();
    let det = m.determinant();
    let scale = m.norm();
    if scale == 0.0 || det.abs() <= 1e-12 * scale * scale * scale {
        return Err(Error::Decomposition("left 3x3 block is singular".into()));
    }
    if det < 0.0 {
        m = -m;
        p4 = -p4;
    }
    let (mut k, mut r) = rq3(&m);
    for i in 0..3 {
        if k[(i, i)] < 0.0 {
            for row in 0..3 {
                k[(row, i)] = -k[(row, i)];
            }
            for col in 0..3 {
                r[(i, col)] = -r[(i, col)];
            }
        }
    }
    let t = k
        .try_inverse()
        .ok_or_else(|| Error::Decomposition("intrinsic matrix is singular".into()))?
        * p4;
    let k = k / k[(2, 2)];
    let intrinsics = Intrinsics::new(k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)], k[(0, 1)], width, height)
        .map_err(|e| Error::Decomposition(format!("{e}")))?;
    let pose = Pose {
        rotation: r,
        translation: t,
    };
    pose.validate(1e-8).map_err(|e| Error::Decomposition(format!("{e}")))?;
    Ok(Camera { intrinsics, pose })
}

/// `m = K R` with `K` upper triangular and `R` orthogonal, through a QR
/// factorization of the row-reversed transpose.
fn rq3(m: &Matrix3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let flip = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
    let qr = (flip * m).transpose().qr();
    let (q, u) = (qr.q(), qr.r());
    let k = flip * u.transpose() * flip;
    let r = flip * q.transpose();
    (k, r)
}

/// Rodrigues rotation about a unit `axis`.
pub fn rotation_from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Result<Matrix3<f64>> {
    if (axis.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "rotation axis must be unit length, got norm {}",
            axis.norm()
        )));
    }
    let k = axis.cross_matrix();
    let (s, c) = (libm::sin(angle), libm::cos(angle));
    Ok(Matrix3::identity() + k * s + k * k * (1.0 - c))
}

/// Angle of the relative rotation `a^T b`, in radians.
pub fn geodesic_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.transpose() * b;
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    libm::acos(c)
}

/// Noise model for extrinsic perturbations.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PerturbationSpec {
    /// Standard deviation of each translation component, world units.
    pub sigma_translation: f64,
    /// Scale of the rotation angle, radians.
    pub sigma_rotation: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_translation >= 0.0) || !(self.sigma_rotation >= 0.0) {
            return Err(Error::Invalid("perturbation sigmas must be non-negative".into()));
        }
        Ok(())
    }
}

/// Perturbs a pose: `t += N(0, sigma_t^2 I)` and `R <- exp([w]x) R` with
/// `w = sigma_r * |N(0,1)| * axis`, `axis` uniform on the sphere.
pub fn perturb_pose<R: Rng + ?Sized>(pose: &Pose, spec: &PerturbationSpec, rng: &mut R) -> Result<Pose> {
    spec.validate()?;
    let mut out = *pose;
    // Draws are made for every call so a fixed seed gives the same noise
    // direction at every sigma.
    let t: [f64; 3] = core::array::from_fn(|_| StandardNormal.sample(rng));
    let axis = loop {
        let a = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if a.norm() > 1e-6 {
            break a.normalize();
        }
    };
    let magnitude: f64 = StandardNormal.sample(rng);
    if spec.sigma_translation > 0.0 {
        for (i, n) in t.iter().enumerate() {
            out.translation[i] += spec.sigma_translation * n;
        }
    }
    if spec.sigma_rotation > 0.0 {
        let noise = rotation_from_axis_angle(&axis, spec.sigma_rotation * magnitude.abs())?;
        out.rotation = noise * pose.rotation;
    }
    Ok(out)
}

/// Angle in degrees between the rays from each camera center to `point`.
pub fn view_angle(a: &Camera, b: &Camera, point: &Vector3<f64>) -> Result<f64> {
    let da = point - a.center();
    let db = point - b.center();
    if da.norm() < 1e-12 || db.norm() < 1e-12 {
        return Err(Error::Geometry("scene point coincides with a camera center".into()));
    }
    let c = (da.dot(&db) / (da.norm() * db.norm())).clamp(-1.0, 1.0);
    Ok(libm::acos(c).to_degrees())
}

fn check_count(v: usize, n: usize) -> Result<()> {
    if v > n {
        return Err(Error::Invalid(format!("requested {v} views from {n} candidates")));
    }
    Ok(())
}

fn center_distances(target: &Camera, candidates: &[Camera]) -> Vec<f64> {
    let c = target.center();
    candidates.iter().map(|k| (k.center() - c).norm()).collect()
}

fn smallest_by_key(keys: &[f64], v: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[a].partial_cmp(&keys[b]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(v);
    idx
}

/// Indices of the `v` candidates whose centers are closest to the target's,
/// nearest first; ties go to the lower index.
pub fn select_nearest_views(target: &Camera, candidates: &[Camera], v: usize) -> Result<Vec<usize>> {
    check_count(v, candidates.len())?;
    Ok(smallest_by_key(&center_distances(target, candidates), v))
}

/// Indices of the `v` candidates whose center distance is closest to the
/// median distance over all candidates; ties go to the lower index.
pub fn select_median_distance_views(target: &Camera, candidates: &[Camera], v: usize) -> Result<Vec<usize>> {
    check_count(v, candidates.len())?;
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let d = center_distances(target, candidates);
    let mut sorted = d.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let keys: Vec<f64> = d.iter().map(|x| (x - median).abs()).collect();
    Ok(smallest_by_key(&keys, v))
}
