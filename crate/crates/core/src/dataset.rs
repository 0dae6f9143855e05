//! Posed multi-view scenes and training-sample assembly.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::{select_median_distance_views, select_nearest_views, Camera};
use crate::cap::RaySampling;
use crate::error::{shape_err, Error, Result};
use crate::metrics::{degrade, Degradation};
use crate::scalar::Scalar;
use crate::scene::RenderedScene;
use crate::tensor::Tensor;

/// One posed observation. The camera lives on the low-resolution grid.
#[derive(Debug, Clone, PartialEq)]
pub struct View<T> {
    pub camera: Camera,
    /// `[H, W, 3]`.
    pub lr: Tensor<T>,
    /// `[sH, sW, 3]` when available.
    pub hr: Option<Tensor<T>>,
    /// Ground-truth depth on the high-resolution grid, when known.
    pub depth: Option<Tensor<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene<T> {
    pub id: String,
    pub views: Vec<View<T>>,
    pub near: f64,
    pub far: f64,
    pub scale: usize,
    pub degradation: Degradation,
}

impl<T: Scalar> Scene<T> {
    /// Degrades every rendered view with `degradation`. High-resolution
    /// extents must be divisible by the scale factor.
    pub fn from_rendered(id: impl Into<String>, rendered: &RenderedScene, degradation: Degradation) -> Result<Self> {
        degradation.validate()?;
        let s = degradation.scale();
        let views = rendered
            .views
            .iter()
            .map(|v| {
                let k = &v.camera.intrinsics;
                if k.width % s != 0 || k.height % s != 0 {
                    return Err(shape_err!("{}x{} view is not divisible by {s}", k.height, k.width));
                }
                let hr: Tensor<T> = v.image.cast();
                Ok(View {
                    camera: v.camera.downscaled(s),
                    lr: degrade(&hr, &degradation)?,
                    hr: Some(hr),
                    depth: Some(v.depth.clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let scene = Self {
            id: id.into(),
            views,
            near: rendered.near,
            far: rendered.far,
            scale: s,
            degradation,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Invalid(format!(
                "scene {}: depth bounds must satisfy 0 < near < far",
                self.id
            )));
        }
        if self.degradation.scale() != self.scale {
            return Err(Error::Invalid(format!(
                "scene {}: degradation scale differs from the scene scale",
                self.id
            )));
        }
        for (i, v) in self.views.iter().enumerate() {
            let k = &v.camera.intrinsics;
            if v.lr.shape() != [k.height, k.width, 3] {
                return Err(shape_err!(
                    "scene {} view {i}: image {:?} does not match the {}x{} camera",
                    self.id,
                    v.lr.shape(),
                    k.height,
                    k.width
                ));
            }
            if let Some(hr) = &v.hr {
                if hr.shape() != [k.height * self.scale, k.width * self.scale, 3] {
                    return Err(shape_err!(
                        "scene {} view {i}: high-resolution image {:?} has the wrong size",
                        self.id,
                        hr.shape()
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn sampling(&self, points: usize) -> Result<RaySampling> {
        RaySampling::new(points, self.near, self.far)
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Selection {
    Nearest,
    Median,
}

impl Selection {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Selection::Nearest),
            "median" => Ok(Selection::Median),
            other => Err(Error::Config(format!("unknown view selection `{other}`"))),
        }
    }
}

/// Extra views for `target`, as indices into `cameras`.
pub fn select_views(cameras: &[Camera], target: usize, v: usize, selection: Selection) -> Result<Vec<usize>> {
    if target >= cameras.len() {
        return Err(Error::Invalid(format!(
            "target {target} out of {} views",
            cameras.len()
        )));
    }
    if v + 1 > cameras.len() {
        return Err(Error::Invalid(format!(
            "{v} extra views requested but the scene has {} views",
            cameras.len()
        )));
    }
    let others: Vec<usize> = (0..cameras.len()).filter(|&i| i != target).collect();
    let candidates: Vec<Camera> = others.iter().map(|&i| cameras[i]).collect();
    let picked = match selection {
        Selection::Nearest => select_nearest_views(&cameras[target], &candidates, v)?,
        Selection::Median => select_median_distance_views(&cameras[target], &candidates, v)?,
    };
    Ok(picked.into_iter().map(|i| others[i]).collect())
}

/// A target view with its extra views.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub scene: usize,
    pub target: usize,
    pub extras: Vec<usize>,
}

/// Which views of each scene become targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Targets {
    All,
    /// This many distinct views per scene, drawn with the dataset seed.
    Random(usize),
}

/// Assembles samples over `scenes`, scene by scene.
pub fn build_dataset<T: Scalar>(
    scenes: &[Scene<T>],
    v: usize,
    selection: Selection,
    targets: Targets,
    seed: u64,
) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        let n = scene.views.len();
        if v + 1 > n {
            return Err(Error::Invalid(format!(
                "scene {} has {n} views, {} needed",
                scene.id,
                v + 1
            )));
        }
        let chosen: Vec<usize> = match targets {
            Targets::All => (0..n).collect(),
            Targets::Random(k) => {
                let mut idx = sample_indices(&mut rng, n, k.min(n)).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        let cams = scene.cameras();
        for target in chosen {
            out.push(Sample {
                scene: si,
                target,
                extras: select_views(&cams, target, v, selection)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Pose};
    use crate::scene::{render_synthetic_views, Geometry, PlaneSpec, RigSpec, SyntheticSceneSpec, TextureSpec};
    use alloc::vec;
    use nalgebra::{Matrix3, Vector3};

    fn at_x(x: f64) -> Camera {
        let k = Intrinsics::centered(10.0, 4, 4).unwrap();
        Camera::new(k, Pose::new(Matrix3::identity(), Vector3::new(-x, 0.0, 0.0)).unwrap())
    }

    fn spec(count: usize) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            geometry: Geometry::TexturedPlane(PlaneSpec {
                normal: [0.0, 0.0, 1.0],
                offset: 0.0,
            }),
            rig: RigSpec::Ring {
                count,
                radius: 0.5,
                distance: 3.0,
                axis: [0.0, 0.0, 1.0],
                look_at: [0.0, 0.0, 0.0],
            },
            texture: TextureSpec::default(),
            width: 8,
            height: 8,
            focal: 10.0,
            depth_margin: 2.0,
            seed: 1,
        }
    }

    fn scene(count: usize) -> Scene<f32> {
        let r = render_synthetic_views(&spec(count)).unwrap();
        Scene::from_rendered("s", &r, Degradation::Bicubic { scale: 2 }).unwrap()
    }

    #[test]
    fn three_views_two_extras_takes_both_others() {
        let cams = [at_x(0.0), at_x(1.0), at_x(5.0)];
        assert_eq!(select_views(&cams, 0, 2, Selection::Nearest).unwrap(), [1, 2]);
        assert_eq!(select_views(&cams, 2, 2, Selection::Nearest).unwrap(), [1, 0]);
        assert!(select_views(&cams, 0, 3, Selection::Nearest).is_err());
    }

    #[test]
    fn ring_nearest_views_are_angular_neighbors() {
        let s = scene(10);
        let cams = s.cameras();
        for t in 0..10 {
            let mut got = select_views(&cams, t, 2, Selection::Nearest).unwrap();
            got.sort_unstable();
            let mut want = vec![(t + 1) % 10, (t + 9) % 10];
            want.sort_unstable();
            assert_eq!(got, want);
            let four = select_views(&cams, t, 4, Selection::Nearest).unwrap();
            let mut ring: Vec<usize> = four.iter().map(|&i| (i + 10 - t) % 10).collect();
            ring.sort_unstable();
            assert_eq!(ring, [1, 2, 8, 9]);
        }
    }

    #[test]
    fn median_selection_matches_brute_force_on_a_line() {
        let xs = [0.0, 0.7, 1.1, 2.9, 3.3, 4.0, 6.5];
        let cams: Vec<Camera> = xs.iter().map(|&x| at_x(x)).collect();
        for target in 0..xs.len() {
            let mut d: Vec<(f64, usize)> = (0..xs.len())
                .filter(|&i| i != target)
                .map(|i| ((xs[i] - xs[target]) as f64).abs())
                .zip((0..xs.len()).filter(|&i| i != target))
                .collect();
            let mut sorted: Vec<f64> = d.iter().map(|p| p.0).collect();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = (sorted[2] + sorted[3]) / 2.0;
            d.sort_by(|a, b| {
                (a.0 - med)
                    .abs()
                    .partial_cmp(&(b.0 - med).abs())
                    .unwrap()
                    .then(a.1.cmp(&b.1))
            });
            let want: Vec<usize> = d.iter().take(3).map(|p| p.1).collect();
            assert_eq!(select_views(&cams, target, 3, Selection::Median).unwrap(), want);
        }
    }

    #[test]
    fn dataset_is_deterministic_and_checks_view_count() {
        let scenes = [scene(5), scene(6)];
        let a = build_dataset(&scenes, 2, Selection::Nearest, Targets::Random(3), 7).unwrap();
        let b = build_dataset(&scenes, 2, Selection::Nearest, Targets::Random(3), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert!(a.iter().all(|s| !s.extras.contains(&s.target) && s.extras.len() == 2));
        let all = build_dataset(&scenes, 2, Selection::Median, Targets::All, 0).unwrap();
        assert_eq!(all.len(), 11);
        assert!(build_dataset(&scenes, 5, Selection::Nearest, Targets::All, 0).is_err());
    }

    #[test]
    fn rendered_scene_has_consistent_grids() {
        let s = scene(3);
        let v = &s.views[0];
        assert_eq!(v.lr.shape(), &[4, 4, 3]);
        assert_eq!(v.hr.as_ref().unwrap().shape(), &[8, 8, 3]);
        assert_eq!(v.camera.upscaled(2).intrinsics, v.camera.intrinsics.upscaled(2));
        assert!(s.sampling(8).is_ok());
        assert!(Selection::parse("median").is_ok() && Selection::parse("far").is_err());
    }

    proptest::proptest! {
        #[test]
        fn selected_views_are_distinct_and_exclude_the_target(
            xs in proptest::collection::vec(-5.0f64..5.0, 2..9),
            target_pick in 0usize..100,
            v_pick in 0usize..100,
            median in proptest::prelude::any::<bool>(),
        ) {
            let k = Intrinsics::centered(20.0, 16, 16).unwrap();
            let cams: Vec<Camera> = xs
                .iter()
                .map(|&x| Camera::new(k, Pose::new(Matrix3::identity(), Vector3::new(-x, 0.0, 0.0)).unwrap()))
                .collect();
            let target = target_pick % cams.len();
            let v = v_pick % cams.len();
            let sel = if median { Selection::Median } else { Selection::Nearest };
            let picked = select_views(&cams, target, v, sel).unwrap();
            proptest::prop_assert_eq!(picked.len(), v);
            proptest::prop_assert!(!picked.contains(&target));
            let mut sorted = picked.clone();
            sorted.sort_unstable();
            sorted.dedup();
            proptest::prop_assert_eq!(sorted.len(), v);
            proptest::prop_assert!(select_views(&cams, target, cams.len(), sel).is_err());
        }
    }
}
