//! End-to-end model: forward pass, loss, two-stage training, evaluation and
//! the pose-noise sensitivity sweep.
//!
//! Training works on random pixel tiles. The tile path gathers epipolar
//! tokens straight from row-stacked extra-view features and is shared with
//! subset evaluation. Full-image inference goes through
//! [`cast_and_project`] and [`miff_forward`] and agrees with the tile path.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{perturb_pose, Camera, PerturbationSpec};
use crate::cap::{cast_and_project, ladder_positions, ray_gather, sample_depths_hyperbolic, RaySampling};
use crate::dataset::{build_dataset, select_views, Sample, Scene, Selection, Targets};
use crate::error::{shape_err, Error, Result};
use crate::graph::{GatherPlan, Graph, Var};
use crate::metrics::{crop_border, lr_consistency, psnr, ssim, PSNR_SENTINEL};
use crate::miff::{self, init_miff, miff_batch, miff_forward, AttentionMaps, MiffConfig};
use crate::optim::{adam_step, AdamState, LrSchedule};
use crate::params::{Binding, ParamStore};
use crate::scalar::Scalar;
use crate::sisr::{self, extract_features, init_sisr, project_to_rgb, SisrConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub sisr: SisrConfig,
    pub miff: MiffConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.sisr.validate()?;
        self.miff.validate()?;
        if self.sisr.channels != self.miff.channels {
            return Err(Error::Config(format!(
                "extractor emits {} channels but fusion expects {}",
                self.sisr.channels, self.miff.channels
            )));
        }
        Ok(())
    }
}

/// Weights plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_sisr(&mut params, &mut rng, &config.sisr)?;
        init_miff(&mut params, &mut rng, &config.miff)?;
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config,
            params: self.params.cast(),
        }
    }
}

/// A posed low-resolution image.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a, T> {
    pub camera: Camera,
    pub lr: &'a Tensor<T>,
}

/// Frozen extractor outputs of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct SisrCache<T> {
    /// `[sH, sW, C]`.
    pub features: Tensor<T>,
    /// `[sH, sW, 3]`.
    pub rgb: Tensor<T>,
}

pub fn run_sisr<T: Scalar>(model: &Model<T>, lr: &Tensor<T>, s: usize) -> Result<SisrCache<T>> {
    let mut g = Graph::new();
    let b = model.params.bind(&mut g, |_| false);
    let f = extract_features(&mut g, &b, &model.config.sisr, lr, s)?;
    let rgb = project_to_rgb(&mut g, &b, f)?;
    Ok(SisrCache {
        features: g.value(f.features).clone(),
        rgb: g.value(rgb).clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub misr: Tensor<T>,
    pub sisr: Tensor<T>,
    pub attention: AttentionMaps<T>,
    /// Depth ladder the attention maps index.
    pub depths: Vec<f64>,
}

/// Full-image prediction for `target` given posed `extras`, `chunk` target
/// pixels per fusion batch.
pub fn forward<T: Scalar>(
    model: &Model<T>,
    target: Observation<'_, T>,
    extras: &[Observation<'_, T>],
    sampling: &RaySampling,
    s: usize,
    chunk: usize,
) -> Result<Prediction<T>> {
    let t = run_sisr(model, target.lr, s)?;
    let caches = extras
        .iter()
        .map(|e| run_sisr(model, e.lr, s))
        .collect::<Result<Vec<_>>>()?;
    forward_cached(
        model,
        (&target.camera, &t),
        &extras_of(extras, &caches),
        sampling,
        s,
        chunk,
    )
}

fn extras_of<'a, T>(obs: &[Observation<'_, T>], caches: &'a [SisrCache<T>]) -> Vec<(Camera, &'a SisrCache<T>)> {
    obs.iter().zip(caches).map(|(o, c)| (o.camera, c)).collect()
}

/// [`forward`] with precomputed extractor outputs.
pub fn forward_cached<T: Scalar>(
    model: &Model<T>,
    target: (&Camera, &SisrCache<T>),
    extras: &[(Camera, &SisrCache<T>)],
    sampling: &RaySampling,
    s: usize,
    chunk: usize,
) -> Result<Prediction<T>> {
    let epi = extras
        .iter()
        .map(|(cam, c)| cast_and_project(target.0, cam, &c.features, sampling, s))
        .collect::<Result<Vec<_>>>()?;
    let (delta, attention) = miff_forward(&model.params, &model.config.miff, &target.1.features, &epi, chunk)?;
    let sisr = target.1.rgb.clone();
    let misr = add_tensors(&sisr, &delta)?;
    Ok(Prediction {
        misr,
        sisr,
        attention,
        depths: sample_depths_hyperbolic(sampling)?,
    })
}

fn add_tensors<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{:?} + {:?}", a.shape(), b.shape()));
    }
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect())
}

/// Geometry of one tile of target pixels.
struct Tile<'a> {
    target: &'a Camera,
    extras: &'a [Camera],
    depths: &'a [f64],
    s: usize,
    pixels: &'a [(usize, usize)],
}

struct TileOutput {
    misr: Var,
    sisr: Var,
    attention: Option<Var>,
}

/// Fusion over a tile. `stacked` is the row-stacked extra-view features
/// (absent without extra views); `target_feats` and `target_rgb` are the
/// target's `[sH, sW, *]` maps.
fn fuse_tile<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    cfg: &MiffConfig,
    stacked: Option<Var>,
    target_feats: Var,
    target_rgb: Var,
    tile: &Tile<'_>,
) -> Result<TileOutput> {
    let tw = tile.target.intrinsics.width * tile.s;
    let rows: Vec<usize> = tile.pixels.iter().map(|&(x, y)| y * tw + x).collect();
    let query = g.gather(target_feats, GatherPlan::select(&rows))?;
    let sisr = g.gather(target_rgb, GatherPlan::select(&rows))?;
    let positions = ladder_positions(tile.depths.len());
    let v = tile.extras.len();
    let (tokens, mask) = match stacked {
        Some(src) if v > 0 => {
            let rg = ray_gather::<T>(tile.target, tile.extras, tile.pixels, tile.depths, tile.s)?;
            (g.gather(src, rg.plan)?, rg.mask)
        }
        _ => (g.constant(Tensor::zeros(&[0, cfg.channels])), Vec::new()),
    };
    let out = miff_batch(g, b, cfg, tokens, &mask, query, v, &positions)?;
    let misr = g.add(sisr, out.delta)?;
    Ok(TileOutput {
        misr,
        sisr,
        attention: out.ray_attention,
    })
}

/// Tile prediction rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPrediction<T> {
    /// `[n, 3]`.
    pub misr: Tensor<T>,
    /// `[n, 3]`.
    pub sisr: Tensor<T>,
    /// Head-averaged ray attention, `[n, P]`.
    pub attention: Tensor<T>,
}

/// Prediction at the target SR `pixels` (`(x, y)`) only.
pub fn predict_pixels<T: Scalar>(
    model: &Model<T>,
    target: (&Camera, &SisrCache<T>),
    extras: &[(Camera, &SisrCache<T>)],
    depths: &[f64],
    s: usize,
    pixels: &[(usize, usize)],
    chunk: usize,
) -> Result<PixelPrediction<T>> {
    let cfg = &model.config.miff;
    let cams: Vec<Camera> = extras.iter().map(|e| e.0).collect();
    let stacked = stack_features(extras.iter().map(|e| &e.1.features))?;
    let p = depths.len();
    let n = pixels.len();
    let mut misr = Vec::with_capacity(n * 3);
    let mut sisr = Vec::with_capacity(n * 3);
    let mut attention = vec![T::zero(); n * p];
    let inv = T::of(1.0 / cfg.heads as f64);
    for (ci, part) in pixels.chunks(chunk.max(1)).enumerate() {
        let mut g = Graph::new();
        let b = model.params.bind(&mut g, |_| false);
        let src = stacked.clone().map(|t| g.constant(t));
        let tf = g.constant(target.1.features.clone());
        let tr = g.constant(target.1.rgb.clone());
        let tile = Tile {
            target: target.0,
            extras: &cams,
            depths,
            s,
            pixels: part,
        };
        let out = fuse_tile(&mut g, &b, cfg, src, tf, tr, &tile)?;
        misr.extend_from_slice(g.value(out.misr).data());
        sisr.extend_from_slice(g.value(out.sisr).data());
        if let Some(w) = out.attention.and_then(|a| g.attention_weights(a)) {
            let base = ci * chunk.max(1);
            for i in 0..part.len() {
                for j in 0..p {
                    let mut acc = T::zero();
                    for h in 0..cfg.heads {
                        acc += w[(i * cfg.heads + h) * p + j];
                    }
                    attention[(base + i) * p + j] = acc * inv;
                }
            }
        }
    }
    Ok(PixelPrediction {
        misr: Tensor::new(&[n, 3], misr)?,
        sisr: Tensor::new(&[n, 3], sisr)?,
        attention: Tensor::new(&[n, p], attention)?,
    })
}

fn stack_features<'a, T: Scalar + 'a>(maps: impl Iterator<Item = &'a Tensor<T>>) -> Result<Option<Tensor<T>>> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut c = None;
    for m in maps {
        let ch = *m
            .shape()
            .last()
            .ok_or_else(|| shape_err!("feature map without channels"))?;
        if c.is_some_and(|c| c != ch) {
            return Err(shape_err!("extra views disagree on channel count"));
        }
        c = Some(ch);
        rows += m.len() / ch.max(1);
        data.extend_from_slice(m.data());
    }
    match c {
        Some(c) => Ok(Some(Tensor::new(&[rows, c], data)?)),
        None => Ok(None),
    }
}

/// `L1(misr, hr) + alpha * L1(sisr, hr)`, each term a mean over elements.
pub fn loss<T: Scalar>(misr: &Tensor<T>, sisr: &Tensor<T>, hr: &Tensor<T>, alpha: f64) -> Result<f64> {
    if misr.shape() != hr.shape() || sisr.shape() != hr.shape() {
        return Err(shape_err!(
            "loss operands {:?}, {:?} and {:?} differ",
            misr.shape(),
            sisr.shape(),
            hr.shape()
        ));
    }
    if hr.is_empty() {
        return Err(shape_err!("loss of empty images"));
    }
    let l1 = |a: &Tensor<T>| -> f64 {
        a.data()
            .iter()
            .zip(hr.data())
            .map(|(&x, &y)| (x.f64() - y.f64()).abs())
            .sum::<f64>()
            / hr.len() as f64
    };
    Ok(l1(misr) + alpha * l1(sisr))
}

/// In-graph form of [`loss`].
pub fn loss_graph<T: Scalar>(g: &mut Graph<T>, misr: Var, sisr: Var, hr: &Tensor<T>, alpha: f64) -> Result<Var> {
    let a = g.l1_loss(misr, hr)?;
    if alpha == 0.0 {
        return Ok(a);
    }
    let b = g.l1_loss(sisr, hr)?;
    let b = g.scale(b, T::of(alpha))?;
    g.add(a, b)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub alpha: f64,
    pub schedule: LrSchedule,
    pub steps: usize,
    /// Target pixels per step.
    pub batch: usize,
    pub seed: u64,
    /// Extra views per sample. Zero runs extractor pretraining.
    pub views: usize,
    pub points: usize,
    /// Leading steps with the extractor frozen.
    pub freeze_sisr_steps: usize,
    pub selection: Selection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            schedule: LrSchedule {
                warmup_steps: 50,
                warmup_start: 1e-5,
                base_lr: 1e-3,
                milestones: Vec::new(),
                gamma: 0.5,
            },
            steps: 1000,
            batch: 64,
            seed: 0,
            views: 3,
            points: 32,
            freeze_sisr_steps: 500,
            selection: Selection::Nearest,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "alpha must be finite and non-negative, got {}",
                self.alpha
            )));
        }
        let s = &self.schedule;
        if !(s.base_lr > 0.0) || !(s.warmup_start > 0.0) || !(s.gamma > 0.0) {
            return Err(Error::Config("learning rates and gamma must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.points < 2 {
            return Err(Error::Config("rays need at least two points".into()));
        }
        Ok(())
    }
}

/// One line of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

fn is_sisr(name: &str) -> bool {
    name.starts_with(sisr::PREFIX)
}

fn is_miff(name: &str) -> bool {
    name.starts_with(miff::PREFIX)
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged {
            step,
            detail: format!("non-finite value in {what}"),
        },
        other => other,
    }
}

/// Trains `model` in place on `scenes` and returns the loss curve.
/// `on_step` sees each record as it is produced.
///
/// With `views == 0` only the extractor is trained, on whole target images
/// against the single-image loss. Otherwise the first `freeze_sisr_steps`
/// steps train the fusion stage over cached extractor outputs and the rest
/// train everything jointly.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    scenes: &[Scene<T>],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    model.config.validate()?;
    if scenes.is_empty() {
        return Err(Error::Invalid("training needs at least one scene".into()));
    }
    for sc in scenes {
        sc.validate()?;
        if sc.views.len() < cfg.views + 1 {
            return Err(Error::Invalid(format!(
                "scene {} has {} views, {} needed",
                sc.id,
                sc.views.len(),
                cfg.views + 1
            )));
        }
        if sc.views.iter().any(|v| v.hr.is_none()) {
            return Err(Error::Invalid(format!("scene {} lacks high-resolution images", sc.id)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.params, cfg.schedule.lr_at(0));
    let mut cache: Vec<Vec<SisrCache<T>>> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = cfg.schedule.lr_at(step);
        adam.lr = lr;
        let si = rng.random_range(0..scenes.len());
        let scene = &scenes[si];
        let target = rng.random_range(0..scene.views.len());
        let (value, grads, names) = if cfg.views == 0 {
            pretrain_step(model, scene, target)
        } else {
            let cams = scene.cameras();
            let extras = select_views(&cams, target, cfg.views, cfg.selection)?;
            let (sh, sw) = sr_extent(scene, target);
            let n = cfg.batch.min(sh * sw);
            let pixels: Vec<(usize, usize)> = sample_indices(&mut rng, sh * sw, n)
                .into_iter()
                .map(|i| (i % sw, i / sw))
                .collect();
            let job = Job {
                scene,
                target,
                extras: &extras,
                pixels: &pixels,
                depths: &sample_depths_hyperbolic(&scene.sampling(cfg.points)?)?,
                alpha: cfg.alpha,
            };
            if step < cfg.freeze_sisr_steps {
                if cache.is_empty() {
                    cache = scenes
                        .iter()
                        .map(|sc| sc.views.iter().map(|v| run_sisr(model, &v.lr, sc.scale)).collect())
                        .collect::<Result<_>>()?;
                }
                frozen_step(model, &job, &cache[si])
            } else {
                joint_step(model, &job)
            }
        }
        .map_err(|e| diverged(step, e))?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {value}"),
            });
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::Diverged {
                step,
                detail: format!("gradient of `{name}` is not finite"),
            });
        }
        adam_step(&mut model.params, &grads, &names, &mut adam)?;
        let rec = StepRecord { step, loss: value, lr };
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

type StepResult<T> = Result<(f64, BTreeMap<String, Tensor<T>>, Vec<String>)>;

fn sr_extent<T>(scene: &Scene<T>, view: usize) -> (usize, usize) {
    let k = &scene.views[view].camera.intrinsics;
    (k.height * scene.scale, k.width * scene.scale)
}

struct Job<'a, T> {
    scene: &'a Scene<T>,
    target: usize,
    extras: &'a [usize],
    pixels: &'a [(usize, usize)],
    depths: &'a [f64],
    alpha: f64,
}

impl<T: Scalar> Job<'_, T> {
    fn hr_rows(&self) -> Result<Tensor<T>> {
        let hr = self.scene.views[self.target]
            .hr
            .as_ref()
            .ok_or_else(|| Error::Invalid("target has no high-resolution image".into()))?;
        let w = hr.shape()[1];
        let mut rows = Vec::with_capacity(self.pixels.len() * 3);
        for &(x, y) in self.pixels {
            let o = (y * w + x) * 3;
            rows.extend_from_slice(&hr.data()[o..o + 3]);
        }
        Tensor::new(&[self.pixels.len(), 3], rows)
    }

    fn cameras(&self) -> (Camera, Vec<Camera>) {
        let v = &self.scene.views;
        (
            v[self.target].camera,
            self.extras.iter().map(|&i| v[i].camera).collect(),
        )
    }
}

fn finish<T: Scalar>(g: &Graph<T>, b: &Binding, loss: Var) -> StepResult<T> {
    let value = g.value(loss).data()[0].f64();
    let grads = g.backward(loss)?;
    Ok((value, b.collect(&grads), b.trainable_names()))
}

fn pretrain_step<T: Scalar>(model: &Model<T>, scene: &Scene<T>, target: usize) -> StepResult<T> {
    let view = &scene.views[target];
    let hr = view
        .hr
        .as_ref()
        .ok_or_else(|| Error::Invalid("target has no high-resolution image".into()))?;
    let mut g = Graph::new();
    let b = model.params.bind(&mut g, is_sisr);
    let f = extract_features(&mut g, &b, &model.config.sisr, &view.lr, scene.scale)?;
    let rgb = project_to_rgb(&mut g, &b, f)?;
    let loss = g.l1_loss(rgb, hr)?;
    finish(&g, &b, loss)
}

fn frozen_step<T: Scalar>(model: &Model<T>, job: &Job<'_, T>, cache: &[SisrCache<T>]) -> StepResult<T> {
    let mut g = Graph::new();
    let b = model.params.bind(&mut g, is_miff);
    let stacked = stack_features(job.extras.iter().map(|&i| &cache[i].features))?.map(|t| g.constant(t));
    let tf = g.constant(cache[job.target].features.clone());
    let tr = g.constant(cache[job.target].rgb.clone());
    let (tc, ec) = job.cameras();
    let tile = Tile {
        target: &tc,
        extras: &ec,
        depths: job.depths,
        s: job.scene.scale,
        pixels: job.pixels,
    };
    let out = fuse_tile(&mut g, &b, &model.config.miff, stacked, tf, tr, &tile)?;
    let loss = loss_graph(&mut g, out.misr, out.sisr, &job.hr_rows()?, job.alpha)?;
    finish(&g, &b, loss)
}

fn joint_step<T: Scalar>(model: &Model<T>, job: &Job<'_, T>) -> StepResult<T> {
    let mut g = Graph::new();
    let b = model.params.bind(&mut g, |_| true);
    let s = job.scene.scale;
    let sc = &model.config.sisr;
    let t = extract_features(&mut g, &b, sc, &job.scene.views[job.target].lr, s)?;
    let tf = t.features;
    let tr = project_to_rgb(&mut g, &b, t)?;
    let mut parts = Vec::with_capacity(job.extras.len());
    for &i in job.extras {
        let f = extract_features(&mut g, &b, sc, &job.scene.views[i].lr, s)?.features;
        let c = *g.shape(f).last().unwrap_or(&0);
        let rows = g.value(f).len() / c.max(1);
        parts.push(g.reshape(f, &[rows, c])?);
    }
    let stacked = if parts.is_empty() {
        None
    } else {
        Some(g.stack_rows(&parts)?)
    };
    let (tc, ec) = job.cameras();
    let tile = Tile {
        target: &tc,
        extras: &ec,
        depths: job.depths,
        s,
        pixels: job.pixels,
    };
    let out = fuse_tile(&mut g, &b, &model.config.miff, stacked, tf, tr, &tile)?;
    let loss = loss_graph(&mut g, out.misr, out.sisr, &job.hr_rows()?, job.alpha)?;
    finish(&g, &b, loss)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalConfig {
    pub views: usize,
    pub points: usize,
    pub selection: Selection,
    /// Targets evaluated per scene; `None` evaluates every view.
    pub targets_per_scene: Option<usize>,
    pub seed: u64,
    /// SR pixels cropped from each side before PSNR and SSIM.
    pub border: usize,
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            views: 3,
            points: 32,
            selection: Selection::Nearest,
            targets_per_scene: None,
            seed: 0,
            border: 4,
            chunk: 256,
        }
    }
}

impl EvalConfig {
    fn targets(&self) -> Targets {
        match self.targets_per_scene {
            Some(k) => Targets::Random(k),
            None => Targets::All,
        }
    }
}

/// Metrics averaged over the evaluated targets of one scene.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneReport {
    pub scene_id: String,
    pub targets: Vec<usize>,
    pub psnr_misr: f64,
    pub psnr_sisr: f64,
    pub ssim: f64,
    pub ssim_sisr: f64,
    pub lr_consistency_psnr: f64,
}

/// Scene-averaged metrics. PSNR values use [`PSNR_SENTINEL`] for identical
/// images.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub psnr_misr: f64,
    pub psnr_sisr: f64,
    pub ssim: f64,
    pub ssim_sisr: f64,
    pub lr_consistency_psnr: f64,
    pub border: usize,
    pub views: usize,
    pub points: usize,
    pub per_scene: Vec<SceneReport>,
}

fn mean(xs: &[f64]) -> f64 {
    match xs.first() {
        // Offsets from the first value keep the mean of equal values exact.
        Some(&x0) => x0 + xs.iter().map(|&x| x - x0).sum::<f64>() / xs.len() as f64,
        None => f64::NAN,
    }
}

fn hr_of<'a, T>(scene: &'a Scene<T>, view: usize) -> Result<&'a Tensor<T>> {
    scene.views[view]
        .hr
        .as_ref()
        .ok_or_else(|| Error::Invalid(format!("scene {} view {view} has no high-resolution image", scene.id)))
}

/// Targets and extra views evaluated under `cfg`.
pub fn eval_samples<T: Scalar>(scenes: &[Scene<T>], cfg: &EvalConfig) -> Result<Vec<Sample>> {
    build_dataset(scenes, cfg.views, cfg.selection, cfg.targets(), cfg.seed)
}

/// Full-image metrics of `scene` over those of `samples` that belong to
/// scene index `index`. `None` when no sample does.
pub fn evaluate_scene<T: Scalar>(
    model: &Model<T>,
    scene: &Scene<T>,
    index: usize,
    samples: &[Sample],
    cfg: &EvalConfig,
) -> Result<Option<SceneReport>> {
    let mine: Vec<&Sample> = samples.iter().filter(|x| x.scene == index).collect();
    if mine.is_empty() {
        return Ok(None);
    }
    let caches = scene
        .views
        .iter()
        .map(|v| run_sisr(model, &v.lr, scene.scale))
        .collect::<Result<Vec<_>>>()?;
    scene_metrics(model, scene, &scene.cameras(), &caches, &mine, cfg).map(Some)
}

/// Metrics of the `mine` targets of `scene` seen through `cameras`.
fn scene_metrics<T: Scalar>(
    model: &Model<T>,
    scene: &Scene<T>,
    cameras: &[Camera],
    caches: &[SisrCache<T>],
    mine: &[&Sample],
    cfg: &EvalConfig,
) -> Result<SceneReport> {
    let sampling = scene.sampling(cfg.points)?;
    let mut m = [Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    let mut targets = Vec::new();
    for smp in mine {
        let view = &scene.views[smp.target];
        let hr = hr_of(scene, smp.target)?;
        let extras: Vec<(Camera, &SisrCache<T>)> = smp.extras.iter().map(|&i| (cameras[i], &caches[i])).collect();
        let pred = forward_cached(
            model,
            (&cameras[smp.target], &caches[smp.target]),
            &extras,
            &sampling,
            scene.scale,
            cfg.chunk,
        )?;
        let hr_c = crop_border(hr, cfg.border)?;
        m[0].push(psnr(&pred.misr, hr, cfg.border)?);
        m[1].push(psnr(&pred.sisr, hr, cfg.border)?);
        m[2].push(ssim(&crop_border(&pred.misr, cfg.border)?, &hr_c)?);
        m[3].push(ssim(&crop_border(&pred.sisr, cfg.border)?, &hr_c)?);
        m[4].push(lr_consistency(
            &pred.misr,
            &view.lr,
            &scene.degradation,
            cfg.border / scene.scale,
        )?);
        targets.push(smp.target);
    }
    Ok(SceneReport {
        scene_id: scene.id.clone(),
        targets,
        psnr_misr: mean(&m[0]),
        psnr_sisr: mean(&m[1]),
        ssim: mean(&m[2]),
        ssim_sisr: mean(&m[3]),
        lr_consistency_psnr: mean(&m[4]),
    })
}

/// Scene averages of `per_scene`.
pub fn summarize(per_scene: Vec<SceneReport>, cfg: &EvalConfig) -> Result<EvalReport> {
    if per_scene.is_empty() {
        return Err(Error::Invalid("no targets to evaluate".into()));
    }
    let col = |f: fn(&SceneReport) -> f64| mean(&per_scene.iter().map(f).collect::<Vec<_>>());
    Ok(EvalReport {
        psnr_misr: col(|r| r.psnr_misr),
        psnr_sisr: col(|r| r.psnr_sisr),
        ssim: col(|r| r.ssim),
        ssim_sisr: col(|r| r.ssim_sisr),
        lr_consistency_psnr: col(|r| r.lr_consistency_psnr),
        border: cfg.border,
        views: cfg.views,
        points: cfg.points,
        per_scene,
    })
}

/// Full-image evaluation of every selected target.
pub fn evaluate<T: Scalar>(model: &Model<T>, scenes: &[Scene<T>], cfg: &EvalConfig) -> Result<EvalReport> {
    let samples = eval_samples(scenes, cfg)?;
    let mut per_scene = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        if let Some(r) = evaluate_scene(model, scene, si, &samples, cfg)? {
            per_scene.push(r);
        }
    }
    summarize(per_scene, cfg)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepConfig {
    /// Translation sigmas, world units.
    pub sigma_t: Vec<f64>,
    /// Rotation sigmas, radians.
    pub sigma_r: Vec<f64>,
    /// Noise draws per cell.
    pub seeds: usize,
    pub seed: u64,
    pub eval: EvalConfig,
    /// SR pixels scored per target, drawn inside the border, with PSNR
    /// over their pooled error. `None` scores full images exactly as
    /// [`evaluate`] does.
    pub pixels: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepCell {
    pub sigma_t: f64,
    pub sigma_r: f64,
    pub psnr: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepReport {
    /// PSNR of the unperturbed cameras on the same pixels.
    pub baseline: f64,
    pub cells: Vec<SweepCell>,
}

/// Frozen inputs of the sweep: targets, their scored pixels and all
/// extractor outputs.
struct SweepSet<T> {
    samples: Vec<Sample>,
    pixels: Option<Vec<Vec<(usize, usize)>>>,
    caches: Vec<Vec<SisrCache<T>>>,
}

fn sweep_set<T: Scalar>(model: &Model<T>, scenes: &[Scene<T>], cfg: &SweepConfig) -> Result<SweepSet<T>> {
    let e = &cfg.eval;
    let samples = eval_samples(scenes, e)?;
    let pixels = match cfg.pixels {
        None => None,
        Some(count) => {
            let mut rng = ChaCha8Rng::seed_from_u64(e.seed);
            let mut all = Vec::with_capacity(samples.len());
            for smp in &samples {
                let (h, w) = sr_extent(&scenes[smp.scene], smp.target);
                if 2 * e.border >= h || 2 * e.border >= w {
                    return Err(Error::Invalid(format!("border {} too large for {h}x{w}", e.border)));
                }
                let (ih, iw) = (h - 2 * e.border, w - 2 * e.border);
                let n = count.min(ih * iw);
                all.push(
                    sample_indices(&mut rng, ih * iw, n)
                        .into_iter()
                        .map(|i| (e.border + i % iw, e.border + i / iw))
                        .collect(),
                );
            }
            Some(all)
        }
    };
    let caches = scenes
        .iter()
        .map(|sc| sc.views.iter().map(|v| run_sisr(model, &v.lr, sc.scale)).collect())
        .collect::<Result<_>>()?;
    Ok(SweepSet {
        samples,
        pixels,
        caches,
    })
}

/// PSNR with the cameras of scene `i` replaced by `cameras[i]`.
fn sweep_psnr<T: Scalar>(
    model: &Model<T>,
    scenes: &[Scene<T>],
    set: &SweepSet<T>,
    cameras: &[Vec<Camera>],
    cfg: &EvalConfig,
) -> Result<f64> {
    match &set.pixels {
        Some(pixels) => pooled_psnr(model, scenes, set, pixels, cameras, cfg),
        None => {
            let mut per_scene = Vec::new();
            for (si, scene) in scenes.iter().enumerate() {
                let mine: Vec<&Sample> = set.samples.iter().filter(|x| x.scene == si).collect();
                if !mine.is_empty() {
                    per_scene.push(scene_metrics(model, scene, &cameras[si], &set.caches[si], &mine, cfg)?);
                }
            }
            Ok(summarize(per_scene, cfg)?.psnr_misr)
        }
    }
}

/// PSNR over the pooled squared error of every scored pixel.
fn pooled_psnr<T: Scalar>(
    model: &Model<T>,
    scenes: &[Scene<T>],
    set: &SweepSet<T>,
    pixels: &[Vec<(usize, usize)>],
    cameras: &[Vec<Camera>],
    cfg: &EvalConfig,
) -> Result<f64> {
    let (mut se, mut n) = (0.0f64, 0usize);
    for (smp, pix) in set.samples.iter().zip(pixels) {
        let scene = &scenes[smp.scene];
        let cams = &cameras[smp.scene];
        let caches = &set.caches[smp.scene];
        let depths = sample_depths_hyperbolic(&scene.sampling(cfg.points)?)?;
        let extras: Vec<(Camera, &SisrCache<T>)> = smp.extras.iter().map(|&i| (cams[i], &caches[i])).collect();
        let pred = predict_pixels(
            model,
            (&cams[smp.target], &caches[smp.target]),
            &extras,
            &depths,
            scene.scale,
            pix,
            cfg.chunk,
        )?;
        let hr = hr_of(scene, smp.target)?;
        let w = hr.shape()[1];
        for (k, &(x, y)) in pix.iter().enumerate() {
            for c in 0..3 {
                let d = pred.misr.data()[k * 3 + c].f64() - hr.data()[(y * w + x) * 3 + c].f64();
                se += d * d;
            }
            n += 3;
        }
    }
    if n == 0 {
        return Err(Error::Invalid("no pixels to score".into()));
    }
    let mse = se / n as f64;
    Ok(if mse == 0.0 {
        PSNR_SENTINEL
    } else {
        -10.0 * libm::log10(mse)
    })
}

/// MISR PSNR under Gaussian pose noise on every camera of every scene, for
/// each `(sigma_t, sigma_r)` pair. Draw `k` of every cell uses the same
/// seed, so cells differ only in noise magnitude.
pub fn sensitivity_sweep<T: Scalar>(model: &Model<T>, scenes: &[Scene<T>], cfg: &SweepConfig) -> Result<SweepReport> {
    if cfg.seeds == 0 {
        return Err(Error::Config("the sweep needs at least one seed".into()));
    }
    let set = sweep_set(model, scenes, cfg)?;
    let clean: Vec<Vec<Camera>> = scenes.iter().map(|s| s.cameras()).collect();
    let baseline = sweep_psnr(model, scenes, &set, &clean, &cfg.eval)?;
    let mut cells = Vec::with_capacity(cfg.sigma_t.len() * cfg.sigma_r.len());
    for &st in &cfg.sigma_t {
        for &sr in &cfg.sigma_r {
            let spec = PerturbationSpec {
                sigma_translation: st,
                sigma_rotation: sr,
                seed: cfg.seed,
            };
            spec.validate()?;
            let mut per_seed = Vec::with_capacity(cfg.seeds);
            for k in 0..cfg.seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(k as u64));
                let noisy = clean
                    .iter()
                    .map(|cams| {
                        cams.iter()
                            .map(|c| Ok(Camera::new(c.intrinsics, perturb_pose(&c.pose, &spec, &mut rng)?)))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                per_seed.push(sweep_psnr(model, scenes, &set, &noisy, &cfg.eval)?);
            }
            cells.push(SweepCell {
                sigma_t: st,
                sigma_r: sr,
                psnr: mean(&per_seed),
                per_seed,
            });
        }
    }
    Ok(SweepReport { baseline, cells })
}

/// The observations of `indices` in `scene`.
pub fn observations<'a, T>(scene: &'a Scene<T>, indices: &[usize]) -> Vec<Observation<'a, T>> {
    indices
        .iter()
        .map(|&i| Observation {
            camera: scene.views[i].camera,
            lr: &scene.views[i].lr,
        })
        .collect()
}
