//! Analytic renderer for synthetic posed scenes.
//!
//! Surfaces carry a solid texture: color is a function of the 3D surface
//! point only, so every view of a point sees the same color and
//! correspondences are exact up to resampling. Each pixel is shaded by its
//! center ray with no lighting.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{Camera, Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Color of pixels whose ray misses every surface.
pub const BACKGROUND: f64 = 0.5;

/// Points `X` with `normal . X = offset`; `normal` need not be unit length.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlaneSpec {
    pub normal: [f64; 3],
    pub offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Geometry {
    TexturedPlane(PlaneSpec),
    /// An unbounded back plane partly occluded by a disc lying in `front`,
    /// centered at `front_center`.
    TwoPlanes {
        back: PlaneSpec,
        front: PlaneSpec,
        front_center: [f64; 3],
        front_radius: f64,
    },
    TexturedSphere {
        center: [f64; 3],
        radius: f64,
    },
}

/// Seeded multi-octave value noise.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TextureSpec {
    /// Lattice cells per world unit at the coarsest octave.
    pub base_frequency: f64,
    pub octaves: usize,
    /// Amplitude ratio between successive octaves.
    pub persistence: f64,
    /// Gain applied around 0.5 before clamping to `[0, 1]`.
    pub contrast: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            base_frequency: 2.0,
            octaves: 4,
            persistence: 0.6,
            contrast: 1.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum RigSpec {
    /// `count` cameras evenly spaced on a circle of `radius` whose center
    /// sits `distance` from `look_at` along `axis`; all look at `look_at`.
    Ring {
        count: usize,
        radius: f64,
        distance: f64,
        axis: [f64; 3],
        look_at: [f64; 3],
    },
    /// `count` cameras at `distance` from `look_at`, spread over an arc of
    /// `span_degrees` around the `up` direction, centered on `axis`.
    Arc {
        count: usize,
        distance: f64,
        span_degrees: f64,
        axis: [f64; 3],
        up: [f64; 3],
        look_at: [f64; 3],
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticSceneSpec {
    pub geometry: Geometry,
    pub rig: RigSpec,
    pub texture: TextureSpec,
    pub width: usize,
    pub height: usize,
    /// Focal length in high-resolution pixels.
    pub focal: f64,
    /// Ladder bounds are the observed depth range widened by this factor:
    /// `near = min / margin`, `far = max * margin`.
    pub depth_margin: f64,
    pub seed: u64,
}

/// One rendered high-resolution view.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub camera: Camera,
    /// `[H, W, 3]`.
    pub image: Tensor<f64>,
    /// Camera-frame depth per pixel `[H, W]`; 0 where the ray misses.
    pub depth: Tensor<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub views: Vec<RenderedView>,
    pub near: f64,
    pub far: f64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let mut h = splitmix(seed);
    h = splitmix(h ^ x as u64);
    h = splitmix(h ^ y as u64);
    h = splitmix(h ^ z as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
pub fn value_noise(seed: u64, p: [f64; 3]) -> f64 {
    let base = p.map(libm::floor);
    let f = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let w = f.map(fade);
    let (x0, y0, z0) = (base[0] as i64, base[1] as i64, base[2] as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let wx = if dx == 1 { w[0] } else { 1.0 - w[0] };
                let wy = if dy == 1 { w[1] } else { 1.0 - w[1] };
                let wz = if dz == 1 { w[2] } else { 1.0 - w[2] };
                acc += wx * wy * wz * lattice(seed, x0 + dx, y0 + dy, z0 + dz);
            }
        }
    }
    acc
}

/// Solid RGB texture at world point `p`.
pub fn texture_color(spec: &TextureSpec, seed: u64, p: &Vector3<f64>) -> [f64; 3] {
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let mut amp = 1.0;
        let mut freq = spec.base_frequency;
        let (mut total, mut norm) = (0.0, 0.0);
        for o in 0..spec.octaves {
            let s = splitmix(seed ^ ((c as u64) << 32) ^ o as u64);
            total += amp * value_noise(s, [p.x * freq, p.y * freq, p.z * freq]);
            norm += amp;
            amp *= spec.persistence;
            freq *= 2.0;
        }
        let v = if norm > 0.0 { total / norm } else { 0.5 };
        *out = (0.5 + spec.contrast * (v - 0.5)).clamp(0.0, 1.0);
    }
    rgb
}

fn vec3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn plane_hit(p: &PlaneSpec, origin: &Vector3<f64>, step: &Vector3<f64>) -> Option<f64> {
    let n = vec3(p.normal);
    let denom = n.dot(step);
    if denom.abs() < 1e-15 {
        return None;
    }
    let d = (p.offset - n.dot(origin)) / denom;
    (d > 0.0).then_some(d)
}

/// Camera-frame depth of the first surface hit along the ray
/// `origin + d * step`, where `step` advances one unit of depth.
pub fn intersect(geometry: &Geometry, origin: &Vector3<f64>, step: &Vector3<f64>) -> Option<f64> {
    match geometry {
        Geometry::TexturedPlane(p) => plane_hit(p, origin, step),
        Geometry::TwoPlanes {
            back,
            front,
            front_center,
            front_radius,
        } => {
            let disc = plane_hit(front, origin, step)
                .filter(|&d| (origin + step * d - vec3(*front_center)).norm() <= *front_radius);
            let wall = plane_hit(back, origin, step);
            match (disc, wall) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            }
        }
        Geometry::TexturedSphere { center, radius } => {
            let oc = origin - vec3(*center);
            let a = step.dot(step);
            let b = 2.0 * oc.dot(step);
            let c = oc.dot(&oc) - radius * radius;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = libm::sqrt(disc);
            // Numerically stable roots.
            let q = -0.5 * (b + libm::copysign(sq, b));
            let (r1, r2) = (q / a, if q != 0.0 { c / q } else { -q / a });
            let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
            if lo > 0.0 {
                Some(lo)
            } else if hi > 0.0 {
                Some(hi)
            } else {
                None
            }
        }
    }
}

fn perpendicular(axis: &Vector3<f64>) -> Vector3<f64> {
    let helper = if axis.x.abs() < 0.9 {
        Vector3::new(1.0, 0.0, 0.0)
    } else {
        Vector3::new(0.0, 1.0, 0.0)
    };
    axis.cross(&helper).normalize()
}

fn unit(a: [f64; 3], what: &str) -> Result<Vector3<f64>> {
    let v = vec3(a);
    if !(v.norm() > 1e-12) {
        return Err(Error::Config(format!("{what} must be a nonzero vector")));
    }
    Ok(v.normalize())
}

/// Camera centers and the shared look-at point of a rig.
pub fn rig_centers(rig: &RigSpec) -> Result<(Vec<Vector3<f64>>, Vector3<f64>, Vector3<f64>)> {
    match *rig {
        RigSpec::Ring {
            count,
            radius,
            distance,
            axis,
            look_at,
        } => {
            let ax = unit(axis, "ring axis")?;
            let u = perpendicular(&ax);
            let v = ax.cross(&u);
            let target = vec3(look_at);
            let centers = (0..count)
                .map(|i| {
                    let t = 2.0 * core::f64::consts::PI * i as f64 / count as f64;
                    target + ax * distance + (u * libm::cos(t) + v * libm::sin(t)) * radius
                })
                .collect();
            Ok((centers, target, v))
        }
        RigSpec::Arc {
            count,
            distance,
            span_degrees,
            axis,
            up,
            look_at,
        } => {
            let ax = unit(axis, "arc axis")?;
            let up = unit(up, "arc up vector")?;
            let side = ax.cross(&up);
            if side.norm() < 1e-9 {
                return Err(Error::Config("arc up vector is parallel to its axis".into()));
            }
            let side = side.normalize();
            let target = vec3(look_at);
            let span = span_degrees.to_radians();
            let centers = (0..count)
                .map(|i| {
                    let t = if count == 1 {
                        0.0
                    } else {
                        -span / 2.0 + span * i as f64 / (count - 1) as f64
                    };
                    target + (ax * libm::cos(t) + side * libm::sin(t)) * distance
                })
                .collect();
            Ok((centers, target, up))
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let count = match self.rig {
            RigSpec::Ring { count, .. } | RigSpec::Arc { count, .. } => count,
        };
        if count == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::Config("rig and image extents must be nonzero".into()));
        }
        if !(self.focal > 0.0) || !(self.depth_margin >= 1.0) {
            return Err(Error::Config(
                "focal must be positive and depth_margin at least 1".into(),
            ));
        }
        if self.texture.octaves == 0 || !(self.texture.base_frequency > 0.0) {
            return Err(Error::Config(
                "texture needs at least one octave and a positive frequency".into(),
            ));
        }
        Ok(())
    }

    /// High-resolution cameras of the rig.
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        self.validate()?;
        let k = Intrinsics::centered(self.focal, self.width, self.height)?;
        let (centers, target, up) = rig_centers(&self.rig)?;
        centers
            .into_iter()
            .map(|c| Ok(Camera::new(k, Pose::look_at(c, target, up)?)))
            .collect()
    }
}

/// Renders one view of `spec` from `camera`.
pub fn render_view(spec: &SyntheticSceneSpec, camera: &Camera) -> RenderedView {
    let (w, h) = (camera.intrinsics.width, camera.intrinsics.height);
    let mut image = vec![BACKGROUND; h * w * 3];
    let mut depth = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let ray = camera.backproject(x as f64, y as f64);
            if let Some(d) = intersect(&spec.geometry, &ray.origin, &ray.depth_step) {
                let p = ray.at_depth(d);
                let rgb = texture_color(&spec.texture, spec.seed, &p);
                image[(y * w + x) * 3..][..3].copy_from_slice(&rgb);
                depth[y * w + x] = d;
            }
        }
    }
    RenderedView {
        camera: *camera,
        image: Tensor::new(&[h, w, 3], image).expect("extents match"),
        depth: Tensor::new(&[h, w], depth).expect("extents match"),
    }
}

/// Renders every rig view. Fails when a camera does not face the look-at
/// point inside its image or sees no surface at all.
pub fn render_synthetic_views(spec: &SyntheticSceneSpec) -> Result<RenderedScene> {
    let cameras = spec.cameras()?;
    let (_, target, _) = rig_centers(&spec.rig)?;
    let mut views = Vec::with_capacity(cameras.len());
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for (i, cam) in cameras.iter().enumerate() {
        let p = cam
            .project(&target)
            .map_err(|_| Error::Geometry(format!("view {i}: look-at point lies on the camera plane")))?;
        let k = &cam.intrinsics;
        if !(p.z > 0.0 && p.u >= 0.0 && p.v >= 0.0 && p.u <= k.width as f64 - 1.0 && p.v <= k.height as f64 - 1.0) {
            return Err(Error::Geometry(format!(
                "view {i}: look-at point is outside the frustum"
            )));
        }
        let view = render_view(spec, cam);
        let hits: Vec<f64> = view.depth.data().iter().copied().filter(|&d| d > 0.0).collect();
        if hits.is_empty() {
            return Err(Error::Geometry(format!("view {i} does not see the geometry")));
        }
        for d in hits {
            lo = lo.min(d);
            hi = hi.max(d);
        }
        views.push(view);
    }
    Ok(RenderedScene {
        views,
        near: lo / spec.depth_margin,
        far: hi * spec.depth_margin,
    })
}

/// A varied corpus of `count` small scenes on 8-view rings: tilted planes,
/// a disc in front of a plane, and spheres, cycling in that order.
pub fn toy_corpus(count: usize, size: usize, seed: u64) -> Vec<SyntheticSceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let tilt = [rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25), 1.0];
            let geometry = match i % 4 {
                0 | 3 => Geometry::TexturedPlane(PlaneSpec {
                    normal: tilt,
                    offset: rng.random_range(-0.2..0.2),
                }),
                1 => Geometry::TwoPlanes {
                    back: PlaneSpec {
                        normal: tilt,
                        offset: 0.0,
                    },
                    front: PlaneSpec {
                        normal: [0.0, 0.0, 1.0],
                        offset: 0.7,
                    },
                    front_center: [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.7],
                    front_radius: rng.random_range(0.4..0.6),
                },
                _ => Geometry::TexturedSphere {
                    center: [0.0, 0.0, 0.0],
                    radius: rng.random_range(0.9..1.1),
                },
            };
            SyntheticSceneSpec {
                geometry,
                rig: RigSpec::Ring {
                    count: 8,
                    radius: rng.random_range(0.4..0.6),
                    distance: 3.0,
                    axis: [0.0, 0.0, 1.0],
                    look_at: [0.0, 0.0, 0.0],
                },
                texture: TextureSpec::default(),
                width: size,
                height: size,
                focal: 1.25 * size as f64,
                depth_margin: 1.2,
                seed: rng.random(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resample::sample;

    fn plane_spec(rig: RigSpec) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            geometry: Geometry::TexturedPlane(PlaneSpec {
                normal: [0.0, 0.0, 1.0],
                offset: 0.0,
            }),
            rig,
            texture: TextureSpec::default(),
            width: 24,
            height: 20,
            focal: 30.0,
            depth_margin: 2.0,
            seed: 3,
        }
    }

    fn ring(count: usize, radius: f64) -> RigSpec {
        RigSpec::Ring {
            count,
            radius,
            distance: 3.0,
            axis: [0.0, 0.0, 1.0],
            look_at: [0.0, 0.0, 0.0],
        }
    }

    #[test]
    fn fronto_parallel_plane_has_constant_depth() {
        let scene = render_synthetic_views(&plane_spec(ring(1, 0.0))).unwrap();
        let d = &scene.views[0].depth;
        assert!(d.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
        assert!((scene.near - 1.5).abs() < 1e-12 && (scene.far - 6.0).abs() < 1e-12);
    }

    #[test]
    fn texture_is_deterministic_and_in_range() {
        let t = TextureSpec::default();
        let p = Vector3::new(0.3, -1.2, 0.7);
        assert_eq!(texture_color(&t, 9, &p), texture_color(&t, 9, &p));
        assert_ne!(texture_color(&t, 9, &p), texture_color(&t, 10, &p));
        for i in 0..200 {
            let q = Vector3::new(i as f64 * 0.137, i as f64 * -0.071, 0.0);
            assert!(texture_color(&t, 1, &q).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn value_noise_matches_lattice_at_integers() {
        assert_eq!(value_noise(4, [2.0, -3.0, 5.0]), lattice(4, 2, -3, 5));
    }

    #[test]
    fn sphere_depths_lie_on_the_quadric() {
        let spec = SyntheticSceneSpec {
            geometry: Geometry::TexturedSphere {
                center: [0.1, 0.0, 0.2],
                radius: 0.8,
            },
            ..plane_spec(ring(3, 0.5))
        };
        let scene = render_synthetic_views(&spec).unwrap();
        let mut hits = 0;
        for v in &scene.views {
            for y in 0..20 {
                for x in 0..24 {
                    let d = v.depth.at(&[y, x]);
                    if d == 0.0 {
                        continue;
                    }
                    hits += 1;
                    let p = v.camera.backproject(x as f64, y as f64).at_depth(d);
                    let r = (p - Vector3::new(0.1, 0.0, 0.2)).norm();
                    assert!((r - 0.8).abs() < 1e-9);
                    assert!(d >= scene.near && d <= scene.far);
                }
            }
        }
        assert!(hits > 100);
    }

    #[test]
    fn two_plane_disc_occludes_the_back_plane() {
        let spec = SyntheticSceneSpec {
            geometry: Geometry::TwoPlanes {
                back: PlaneSpec {
                    normal: [0.0, 0.0, 1.0],
                    offset: 0.0,
                },
                front: PlaneSpec {
                    normal: [0.0, 0.0, 1.0],
                    offset: 1.0,
                },
                front_center: [0.0, 0.0, 1.0],
                front_radius: 0.4,
            },
            ..plane_spec(ring(1, 0.0))
        };
        let scene = render_synthetic_views(&spec).unwrap();
        let d = &scene.views[0].depth;
        assert!((d.at(&[10, 12]) - 2.0).abs() < 1e-12);
        assert!((d.at(&[0, 0]) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rig_that_misses_the_geometry_is_rejected() {
        let spec = SyntheticSceneSpec {
            geometry: Geometry::TexturedSphere {
                center: [50.0, 0.0, 0.0],
                radius: 0.1,
            },
            ..plane_spec(ring(2, 0.5))
        };
        assert!(matches!(render_synthetic_views(&spec), Err(Error::Geometry(_))));
        let behind = plane_spec(RigSpec::Ring {
            count: 2,
            radius: 0.5,
            distance: -3.0,
            axis: [0.0, 0.0, 1.0],
            look_at: [0.0, 0.0, 0.0],
        });
        // Cameras below the plane look up at its underside, which is still a plane hit.
        assert!(render_synthetic_views(&behind).is_ok());
    }

    #[test]
    fn arc_rig_keeps_distance() {
        let rig = RigSpec::Arc {
            count: 5,
            distance: 2.5,
            span_degrees: 40.0,
            axis: [0.0, 0.0, 1.0],
            up: [0.0, 1.0, 0.0],
            look_at: [0.0, 0.0, 0.0],
        };
        let (c, t, _) = rig_centers(&rig).unwrap();
        for p in &c {
            assert!(((p - t).norm() - 2.5).abs() < 1e-12);
        }
        let ang = (c[0] - t).angle(&(c[4] - t)).to_degrees();
        assert!((ang - 40.0).abs() < 1e-9);
    }

    /// Largest color difference between view 1 and view 0 warped onto it
    /// by the homography the plane `z = 0` induces.
    fn homography_warp_error(base_frequency: f64, octaves: usize) -> f64 {
        let mut spec = plane_spec(ring(4, 0.4));
        spec.width = 48;
        spec.height = 48;
        spec.focal = 60.0;
        spec.texture.octaves = octaves;
        spec.texture.base_frequency = base_frequency;
        let scene = render_synthetic_views(&spec).unwrap();
        let (a, b) = (&scene.views[0], &scene.views[1]);
        // Plane n.X = 0 in b's frame: n_b . Y = d_b with Y = R_b X + t_b.
        let n_b = b.camera.pose.rotation * Vector3::new(0.0, 0.0, 1.0);
        let d_b = n_b.dot(&b.camera.pose.translation);
        let r = a.camera.pose.rotation * b.camera.pose.rotation.transpose();
        let t = a.camera.pose.translation - r * b.camera.pose.translation;
        let h = a.camera.intrinsics.matrix() * (r + t * n_b.transpose() / d_b) * b.camera.intrinsics.inverse_matrix();
        let mut worst = 0.0f64;
        for y in 0..48 {
            for x in 0..48 {
                let q = h * Vector3::new(x as f64, y as f64, 1.0);
                let (u, v) = (q.x / q.z, q.y / q.z);
                if u < 1.0 || v < 1.0 || u > 46.0 || v > 46.0 {
                    continue;
                }
                let got = sample(&a.image, u, v).unwrap();
                for c in 0..3 {
                    worst = worst.max((got[c] - b.image.at(&[y, x, c])).abs());
                }
            }
        }
        worst
    }

    #[test]
    fn plane_views_agree_under_the_homography() {
        let worst = homography_warp_error(0.25, 2);
        assert!(worst < 1e-3, "worst warp difference {worst}");
    }

    #[test]
    fn broadband_texture_corresponds_exactly_at_surface_points() {
        let spec = plane_spec(ring(4, 0.4));
        let scene = render_synthetic_views(&spec).unwrap();
        let (a, b) = (&scene.views[0], &scene.views[2]);
        let mut checked = 0;
        for y in 0..20 {
            for x in 0..24 {
                // The point seen by pixel (x, y) of b, re-rendered from a's ray through its projection.
                let p = b.camera.backproject(x as f64, y as f64).at_depth(b.depth.at(&[y, x]));
                let q = a.camera.project(&p).unwrap();
                let ray = a.camera.backproject(q.u, q.v);
                let d = intersect(&spec.geometry, &ray.origin, &ray.depth_step).unwrap();
                let seen = texture_color(&spec.texture, spec.seed, &ray.at_depth(d));
                for c in 0..3 {
                    assert!((seen[c] - b.image.at(&[y, x, c])).abs() < 1e-9);
                }
                checked += 1;
            }
        }
        assert_eq!(checked, 480);
    }

    #[test]
    fn toy_corpus_renders() {
        let specs = toy_corpus(4, 16, 3);
        assert_eq!(specs, toy_corpus(4, 16, 3));
        for spec in &specs {
            let r = render_synthetic_views(spec).unwrap();
            assert_eq!(r.views.len(), 8);
            assert!(r.near > 0.0 && r.near < r.far);
        }
    }
}
