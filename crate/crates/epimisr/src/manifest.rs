//! Scene manifests: JSON descriptions of posed views on disk.
//!
//! A scene manifest lists each view's low-resolution PNG, optional
//! high-resolution PNG and depth container, and its camera on the
//! low-resolution grid. Paths are relative to the manifest's directory. A
//! dataset manifest is a list of scene manifest paths.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use epimisr_core::camera::{Camera, Intrinsics, Pose};
use epimisr_core::dataset::{Scene, View};
use epimisr_core::metrics::{degrade, Degradation};
use epimisr_core::scene::{render_synthetic_views, SyntheticSceneSpec};
use epimisr_core::Tensor;

use crate::eptn;
use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_json};
use crate::image::{read_rgb, write_rgb};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsDoc {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
    pub width: usize,
    pub height: usize,
}

/// World-to-camera pose; `rotation` is row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseDoc {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraDoc {
    pub intrinsics: IntrinsicsDoc,
    pub pose: PoseDoc,
}

impl From<&Camera> for CameraDoc {
    fn from(c: &Camera) -> Self {
        let k = &c.intrinsics;
        let r = &c.pose.rotation;
        let t = &c.pose.translation;
        Self {
            intrinsics: IntrinsicsDoc {
                fx: k.fx,
                fy: k.fy,
                cx: k.cx,
                cy: k.cy,
                skew: k.skew,
                width: k.width,
                height: k.height,
            },
            pose: PoseDoc {
                rotation: core::array::from_fn(|i| r[(i / 3, i % 3)]),
                translation: [t[0], t[1], t[2]],
            },
        }
    }
}

impl CameraDoc {
    pub fn to_camera(&self) -> epimisr_core::Result<Camera> {
        let k = &self.intrinsics;
        let intrinsics = Intrinsics::new(k.fx, k.fy, k.cx, k.cy, k.skew, k.width, k.height)?;
        let pose = Pose::new(
            Matrix3::from_row_slice(&self.pose.rotation),
            Vector3::from_column_slice(&self.pose.translation),
        )?;
        Ok(Camera::new(intrinsics, pose))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hr_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_path: Option<PathBuf>,
    pub camera: CameraDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scene_id: String,
    pub split: Split,
    pub scale: usize,
    pub degradation: Degradation,
    pub near: f64,
    pub far: f64,
    pub views: Vec<ViewEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scenes: Vec<PathBuf>,
}

/// A loaded scene with its split.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub scene: Scene<f32>,
    pub split: Split,
}

fn base_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

pub fn load_scene(path: &Path) -> Result<LoadedScene> {
    let m: SceneManifest = read_json(path)?;
    let dir = base_dir(path);
    let bad = |msg: String| Error::format(path, msg);
    if m.degradation.scale() != m.scale {
        return Err(bad(format!(
            "degradation scale {} differs from scene scale {}",
            m.degradation.scale(),
            m.scale
        )));
    }
    let mut views = Vec::with_capacity(m.views.len());
    for (i, v) in m.views.iter().enumerate() {
        let camera = v.camera.to_camera().map_err(|e| bad(format!("view {i}: {e}")))?;
        let lr = read_rgb(&dir.join(&v.image_path))?;
        let hr = v.hr_path.as_ref().map(|p| read_rgb(&dir.join(p))).transpose()?;
        let depth = v
            .depth_path
            .as_ref()
            .map(|p| eptn::read_tensor::<f64>(&dir.join(p)))
            .transpose()?;
        views.push(View { camera, lr, hr, depth });
    }
    let scene = Scene {
        id: m.scene_id,
        views,
        near: m.near,
        far: m.far,
        scale: m.scale,
        degradation: m.degradation,
    };
    scene.validate().map_err(|e| bad(e.to_string()))?;
    Ok(LoadedScene { scene, split: m.split })
}

/// Loads a dataset manifest or a single scene manifest.
pub fn load(path: &Path) -> Result<Vec<LoadedScene>> {
    let value: serde_json::Value = read_json(path)?;
    if value.get("scenes").is_some() {
        let d: DatasetManifest = serde_json::from_value(value).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let dir = base_dir(path);
        d.scenes.iter().map(|p| load_scene(&dir.join(p))).collect()
    } else {
        Ok(vec![load_scene(path)?])
    }
}

/// One scene of a synthesis request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthScene {
    pub id: String,
    pub split: Split,
    pub spec: SyntheticSceneSpec,
}

/// Input of `epimisr synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRequest {
    pub degradation: Degradation,
    pub scenes: Vec<SynthScene>,
}

/// Renders one scene into `dir` and writes its manifest there. The
/// high-resolution image is quantized to 8 bits before it is degraded.
pub fn write_synthetic(dir: &Path, scene: &SynthScene, degradation: &Degradation) -> Result<SceneManifest> {
    degradation.validate()?;
    let rendered = render_synthetic_views(&scene.spec)?;
    let s = degradation.scale();
    let mut views = Vec::with_capacity(rendered.views.len());
    for (i, v) in rendered.views.iter().enumerate() {
        let k = &v.camera.intrinsics;
        if k.width % s != 0 || k.height % s != 0 {
            return Err(Error::Usage(format!(
                "{}x{} images are not divisible by scale {s}",
                k.height, k.width
            )));
        }
        let hr: Tensor<f32> = v.image.map(|x| crate::image::quantize(x) as f64 / 255.0).cast();
        let lr = degrade(&hr, degradation)?;
        let entry = ViewEntry {
            image_path: format!("view{i:02}_lr.png").into(),
            hr_path: Some(format!("view{i:02}_hr.png").into()),
            depth_path: Some(format!("view{i:02}_depth.eptn").into()),
            camera: CameraDoc::from(&v.camera.downscaled(s)),
        };
        write_rgb(&dir.join(&entry.image_path), &lr)?;
        write_rgb(&dir.join(entry.hr_path.as_ref().expect("set above")), &hr)?;
        eptn::write_tensor(&dir.join(entry.depth_path.as_ref().expect("set above")), &v.depth)?;
        views.push(entry);
    }
    let m = SceneManifest {
        scene_id: scene.id.clone(),
        split: scene.split,
        scale: s,
        degradation: degradation.clone(),
        near: rendered.near,
        far: rendered.far,
        views,
    };
    write_json(&dir.join("manifest.json"), &m)?;
    Ok(m)
}

/// Renders every scene of `req` under `out/<id>/` and writes
/// `out/dataset.json`.
pub fn synthesize(out: &Path, req: &SynthRequest) -> Result<DatasetManifest> {
    let mut scenes = Vec::with_capacity(req.scenes.len());
    for sc in &req.scenes {
        write_synthetic(&out.join(&sc.id), sc, &req.degradation)?;
        scenes.push(PathBuf::from(&sc.id).join("manifest.json"));
    }
    let d = DatasetManifest { scenes };
    write_json(&out.join("dataset.json"), &d)?;
    Ok(d)
}
