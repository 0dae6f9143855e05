//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use log::{debug, info};

use epimisr_core::cap::cast_and_project;
use epimisr_core::dataset::{select_views, Scene, Selection};
use epimisr_core::metrics::Degradation;
use epimisr_core::miff::extract_depth_map;
use epimisr_core::optim::LrSchedule;
use epimisr_core::pipeline::{
    eval_samples, evaluate_scene, forward, observations, run_sisr, sensitivity_sweep, summarize, train, EvalConfig,
    Model, ModelConfig, SweepConfig, TrainConfig,
};
use epimisr_core::resample::bicubic_upsample;
use epimisr_core::scene::toy_corpus;
use epimisr_core::sisr::SisrVariant;
use epimisr_core::Tensor;

use crate::checkpoint;
use crate::eptn;
use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_atomic, write_json};
use crate::image::{hstack, write_gray, write_rgb};
use crate::manifest::{self, LoadedScene, Split, SynthRequest, SynthScene};
use crate::report::{eval_table, loss_csv, sweep_csv};

#[derive(Debug, Parser)]
#[command(name = "epimisr", version, about = "Geometry-aware multi-image super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic scenes and write a dataset manifest.
    Synth(SynthArgs),
    /// Pretrain the extractor, then train the fusion stage.
    Train(TrainArgs),
    /// Super-resolve one target view.
    Infer(InferArgs),
    /// Evaluate a checkpoint and write a JSON report and a text table.
    Eval(EvalArgs),
    /// Depth from ray attention for one target view.
    Depth(InferArgs),
    /// Dump the epipolar feature tensors of one target view.
    CapDump(CapDumpArgs),
    /// PSNR under camera pose noise over a grid of sigmas.
    Perturb(PerturbArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Dataset or scene manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output file or directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Expected scale factor; must match the manifest.
    #[arg(long)]
    pub scale: Option<usize>,
    /// Worker threads for per-scene work.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct ViewArgs {
    /// Extra views per target.
    #[arg(long = "views", default_value_t = 3)]
    pub views: usize,
    /// Samples per ray.
    #[arg(long = "ray-points", default_value_t = 32)]
    pub ray_points: usize,
    #[arg(long, default_value = "nearest", value_parser = parse_selection)]
    pub selection: Selection,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Synthesis request JSON.
    #[arg(long, conflicts_with = "toy", required_unless_present = "toy")]
    pub spec: Option<PathBuf>,
    /// Generate this many procedural scenes instead of reading a request.
    #[arg(long)]
    pub toy: Option<usize>,
    /// High-resolution size of procedural scenes.
    #[arg(long, default_value_t = 48)]
    pub size: usize,
    /// Procedural scenes held out as the test split.
    #[arg(long, default_value_t = 3)]
    pub test_scenes: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Scale factor; overrides the request's degradation.
    #[arg(long)]
    pub scale: Option<usize>,
    /// `bicubic` (antialiased) or `decimate` (every s-th pixel, no blur);
    /// overrides the request's degradation.
    #[arg(long, value_parser = ["bicubic", "decimate"])]
    pub degradation: Option<String>,
    /// Overrides every scene's texture seed (offset by scene index).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub view: ViewArgs,
    #[arg(long, default_value = "residual_stack", value_parser = parse_variant)]
    pub variant: SisrVariant,
    /// Model configuration JSON; `--variant` still applies.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Start from this checkpoint instead of fresh weights.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    pub pretrain_steps: usize,
    #[arg(long, default_value_t = 1500)]
    pub steps: usize,
    /// Leading fusion steps with the extractor frozen.
    #[arg(long, default_value_t = 1200)]
    pub freeze_steps: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub view: ViewArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene id; defaults to the first scene.
    #[arg(long)]
    pub scene: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub target: usize,
    /// Target pixels per fusion batch.
    #[arg(long, default_value_t = 256)]
    pub chunk: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub view: ViewArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// SR pixels cropped from each side.
    #[arg(long, default_value_t = 4)]
    pub border: usize,
    /// Targets per scene; all views when omitted.
    #[arg(long)]
    pub targets: Option<usize>,
    #[arg(long, default_value_t = 256)]
    pub chunk: usize,
}

#[derive(Debug, Args)]
pub struct CapDumpArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub view: ViewArgs,
    /// Extractor features to sample; the bicubic upsample when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub scene: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub target: usize,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Translation sigmas, comma separated.
    #[arg(long = "sigma-t", value_delimiter = ',', default_value = "0")]
    pub sigma_t: Vec<f64>,
    /// Rotation sigmas in radians, comma separated.
    #[arg(long = "sigma-r", value_delimiter = ',', default_value = "0")]
    pub sigma_r: Vec<f64>,
    /// Noise draws per cell.
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    /// Score this many random pixels per target instead of full images.
    #[arg(long)]
    pub pixels: Option<usize>,
}

fn parse_selection(s: &str) -> std::result::Result<Selection, String> {
    Selection::parse(s).map_err(|e| e.to_string())
}

fn parse_variant(s: &str) -> std::result::Result<SisrVariant, String> {
    SisrVariant::parse(s).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Depth(a) => cmd_depth(&a),
        Command::CapDump(a) => cmd_capdump(&a),
        Command::Perturb(a) => cmd_perturb(&a),
    }
}

fn synth_request(a: &SynthArgs) -> Result<SynthRequest> {
    let mut req = match (&a.spec, a.toy) {
        (Some(path), _) => read_json::<SynthRequest>(path)?,
        (None, Some(n)) => {
            if a.test_scenes > n {
                return Err(Error::Usage(format!(
                    "{} test scenes requested out of {n}",
                    a.test_scenes
                )));
            }
            let scenes = toy_corpus(n, a.size, a.seed.unwrap_or(0))
                .into_iter()
                .enumerate()
                .map(|(i, spec)| SynthScene {
                    id: format!("toy{i:02}"),
                    split: if i + a.test_scenes >= n {
                        Split::Test
                    } else {
                        Split::Train
                    },
                    spec,
                })
                .collect();
            SynthRequest {
                degradation: Degradation::Bicubic { scale: 2 },
                scenes,
            }
        }
        (None, None) => return Err(Error::Usage("either --spec or --toy is required".into())),
    };
    if a.scale.is_some() || a.degradation.is_some() {
        let scale = a.scale.unwrap_or(req.degradation.scale());
        req.degradation = match a.degradation.as_deref() {
            Some("decimate") => Degradation::BlurDecimate {
                scale,
                rows: 1,
                cols: 1,
                kernel: vec![1.0],
            },
            Some(_) => Degradation::Bicubic { scale },
            None => match &req.degradation {
                Degradation::Bicubic { .. } => Degradation::Bicubic { scale },
                Degradation::BlurDecimate { rows, cols, kernel, .. } => Degradation::BlurDecimate {
                    scale,
                    rows: *rows,
                    cols: *cols,
                    kernel: kernel.clone(),
                },
            },
        };
    }
    if let (Some(seed), Some(_)) = (a.seed, &a.spec) {
        for (i, sc) in req.scenes.iter_mut().enumerate() {
            sc.spec.seed = seed.wrapping_add(i as u64);
        }
    }
    req.degradation.validate()?;
    Ok(req)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let req = synth_request(a)?;
    for sc in &req.scenes {
        sc.spec.validate()?;
    }
    let d = manifest::synthesize(&a.out, &req)?;
    info!("wrote {} scenes to {}", d.scenes.len(), a.out.display());
    Ok(())
}

fn load_scenes(c: &Common) -> Result<Vec<LoadedScene>> {
    let scenes = manifest::load(&c.manifest)?;
    if scenes.is_empty() {
        return Err(Error::Usage(format!("{} lists no scenes", c.manifest.display())));
    }
    if let Some(s) = c.scale {
        if let Some(bad) = scenes.iter().find(|l| l.scene.scale != s) {
            return Err(Error::Usage(format!(
                "--scale {s} does not match scene {} (scale {})",
                bad.scene.id, bad.scene.scale
            )));
        }
    }
    Ok(scenes)
}

fn pick_split(scenes: Vec<LoadedScene>, split: Split) -> Result<Vec<Scene<f32>>> {
    let out: Vec<Scene<f32>> = scenes
        .into_iter()
        .filter(|l| l.split == split)
        .map(|l| l.scene)
        .collect();
    if out.is_empty() {
        return Err(Error::Usage(format!("no {split:?} scenes in the manifest")));
    }
    Ok(out)
}

fn pick_scene(scenes: Vec<LoadedScene>, id: Option<&str>) -> Result<Scene<f32>> {
    match id {
        None => Ok(scenes.into_iter().next().expect("nonempty").scene),
        Some(id) => scenes
            .into_iter()
            .find(|l| l.scene.id == id)
            .map(|l| l.scene)
            .ok_or_else(|| Error::Usage(format!("no scene `{id}` in the manifest"))),
    }
}

fn check_target(scene: &Scene<f32>, target: usize) -> Result<()> {
    if target >= scene.views.len() {
        return Err(Error::Usage(format!(
            "target {target} out of range: scene {} has {} views",
            scene.id,
            scene.views.len()
        )));
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let scenes = pick_split(load_scenes(&a.common)?, Split::Train)?;
    let mut model = match &a.init {
        Some(dir) => checkpoint::load::<f32>(dir)?.0,
        None => {
            let mut cfg = match &a.model_config {
                Some(p) => read_json::<ModelConfig>(p)?,
                None => ModelConfig::default(),
            };
            cfg.sisr.variant = a.variant;
            Model::new(cfg, a.view.seed)?
        }
    };
    let schedule = |steps: usize, lr: f64| LrSchedule {
        warmup_steps: (steps / 15).min(100),
        warmup_start: lr * 0.01,
        base_lr: lr,
        milestones: vec![steps * 2 / 3],
        gamma: 0.5,
    };
    let base = TrainConfig {
        alpha: a.alpha,
        schedule: schedule(a.pretrain_steps, 2.0 * a.lr),
        steps: a.pretrain_steps,
        batch: a.batch,
        seed: a.view.seed,
        views: 0,
        points: a.view.ray_points,
        freeze_sisr_steps: 0,
        selection: a.view.selection,
    };
    let logger = |stage: &'static str| {
        move |r: &epimisr_core::pipeline::StepRecord| {
            debug!("{stage} step {} loss {:.6} lr {:.3e}", r.step, r.loss, r.lr);
            if (r.step + 1) % 100 == 0 {
                info!("{stage} step {} loss {:.6}", r.step + 1, r.loss);
            }
        }
    };
    let pre = train(&mut model, &scenes, &base, logger("pretrain"))?;
    let main_cfg = TrainConfig {
        schedule: schedule(a.steps, a.lr),
        steps: a.steps,
        seed: a.view.seed.wrapping_add(1),
        views: a.view.views,
        freeze_sisr_steps: a.freeze_steps,
        ..base
    };
    let log = train(&mut model, &scenes, &main_cfg, logger("train"))?;
    let out = &a.common.out;
    checkpoint::save(out, &model, pre.len() + log.len())?;
    write_atomic(&out.join("pretrain_loss.csv"), loss_csv(&pre).as_bytes())?;
    write_atomic(&out.join("loss.csv"), loss_csv(&log).as_bytes())?;
    write_json(&out.join("train_config.json"), &main_cfg)?;
    info!("checkpoint written to {}", out.display());
    Ok(())
}

struct Inference {
    scene: Scene<f32>,
    model: Model<f32>,
    prediction: epimisr_core::pipeline::Prediction<f32>,
}

fn infer(a: &InferArgs) -> Result<Inference> {
    let scene = pick_scene(load_scenes(&a.common)?, a.scene.as_deref())?;
    check_target(&scene, a.target)?;
    let (model, _) = checkpoint::load::<f32>(&a.checkpoint)?;
    let extras = select_views(&scene.cameras(), a.target, a.view.views, a.view.selection)?;
    let sampling = scene.sampling(a.view.ray_points)?;
    let prediction = forward(
        &model,
        observations(&scene, &[a.target])[0],
        &observations(&scene, &extras),
        &sampling,
        scene.scale,
        a.chunk,
    )?;
    Ok(Inference {
        scene,
        model,
        prediction,
    })
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let r = infer(a)?;
    let out = &a.common.out;
    let p = &r.prediction;
    write_rgb(&out.join("misr.png"), &p.misr)?;
    write_rgb(&out.join("sisr.png"), &p.sisr)?;
    eptn::write_tensor(&out.join("misr.eptn"), &p.misr)?;
    eptn::write_tensor(&out.join("sisr.eptn"), &p.sisr)?;
    let view = &r.scene.views[a.target];
    let up = bicubic_upsample(&view.lr, r.scene.scale)?;
    let mut strip = vec![&up, &p.sisr, &p.misr];
    if let Some(hr) = &view.hr {
        strip.push(hr);
    }
    write_rgb(&out.join("strip.png"), &hstack(&strip)?)?;
    debug!("model has {} scalars", r.model.params.scalar_count());
    info!("wrote {}", out.display());
    Ok(())
}

fn cmd_depth(a: &InferArgs) -> Result<()> {
    let r = infer(a)?;
    let p = &r.prediction;
    let depth = extract_depth_map(&p.attention, &p.depths)?;
    let out = &a.common.out;
    eptn::write_tensor(&out.join("depth.eptn"), &depth.cast::<f32>())?;
    eptn::write_tensor(&out.join("attention.eptn"), &p.attention.averaged)?;
    let (near, far) = (r.scene.near, r.scene.far);
    let shade = depth.map(|d| {
        if d > 0.0 {
            (1.0 / d - 1.0 / far) / (1.0 / near - 1.0 / far)
        } else {
            0.0
        }
    });
    write_gray(&out.join("depth.png"), &shade)?;
    info!("wrote {}", out.display());
    Ok(())
}

fn cmd_capdump(a: &CapDumpArgs) -> Result<()> {
    let scene = pick_scene(load_scenes(&a.common)?, a.scene.as_deref())?;
    check_target(&scene, a.target)?;
    let model = a
        .checkpoint
        .as_ref()
        .map(|c| checkpoint::load::<f32>(c))
        .transpose()?
        .map(|m| m.0);
    let extras = select_views(&scene.cameras(), a.target, a.view.views, a.view.selection)?;
    let sampling = scene.sampling(a.view.ray_points)?;
    let target = scene.views[a.target].camera;
    let out = &a.common.out;
    for &j in &extras {
        let v = &scene.views[j];
        let features: Tensor<f32> = match &model {
            Some(m) => run_sisr(m, &v.lr, scene.scale)?.features,
            None => bicubic_upsample(&v.lr, scene.scale)?,
        };
        let e = cast_and_project(&target, &v.camera, &features, &sampling, scene.scale)?;
        eptn::write_tensor(&out.join(format!("view{j:02}_features.eptn")), &e.features)?;
        eptn::write_mask(&out.join(format!("view{j:02}_mask.eptn")), &e.mask)?;
        if j == extras[0] {
            eptn::write_tensor(
                &out.join("depths.eptn"),
                &Tensor::new(&[e.depths.len()], e.depths.clone())?,
            )?;
        }
    }
    write_json(&out.join("extras.json"), &extras)?;
    info!("dumped {} epipolar tensors to {}", extras.len(), out.display());
    Ok(())
}

fn eval_config(a: &EvalArgs) -> EvalConfig {
    EvalConfig {
        views: a.view.views,
        points: a.view.ray_points,
        selection: a.view.selection,
        targets_per_scene: a.targets,
        seed: a.view.seed,
        border: a.border,
        chunk: a.chunk,
    }
}

/// Evaluates scenes on up to `threads` workers; results keep scene order.
pub fn evaluate_parallel(
    model: &Model<f32>,
    scenes: &[Scene<f32>],
    cfg: &EvalConfig,
    threads: usize,
) -> Result<epimisr_core::pipeline::EvalReport> {
    let samples = eval_samples(scenes, cfg)?;
    let workers = threads.clamp(1, scenes.len().max(1));
    let mut slots: Vec<Option<epimisr_core::Result<Option<_>>>> = (0..scenes.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunks: Vec<_> = slots.chunks_mut(scenes.len().div_ceil(workers)).enumerate().collect();
        let per = scenes.len().div_ceil(workers);
        for (w, chunk) in chunks {
            let samples = &samples;
            s.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    let i = w * per + k;
                    *slot = Some(evaluate_scene(model, &scenes[i], i, samples, cfg));
                }
            });
        }
    });
    let mut per_scene = Vec::new();
    for r in slots {
        if let Some(rep) = r.expect("every slot is filled")? {
            per_scene.push(rep);
        }
    }
    Ok(summarize(per_scene, cfg)?)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let scenes = pick_split(load_scenes(&a.common)?, a.split)?;
    let (model, _) = checkpoint::load::<f32>(&a.checkpoint)?;
    let report = evaluate_parallel(&model, &scenes, &eval_config(a), a.common.threads)?;
    let out = &a.common.out;
    write_json(&out.join("report.json"), &report)?;
    let table = eval_table(&report);
    write_atomic(&out.join("report.txt"), table.as_bytes())?;
    info!("\n{table}");
    Ok(())
}

fn cmd_perturb(a: &PerturbArgs) -> Result<()> {
    let e = &a.eval;
    let scenes = pick_split(load_scenes(&e.common)?, e.split)?;
    let (model, _) = checkpoint::load::<f32>(&e.checkpoint)?;
    let cfg = SweepConfig {
        sigma_t: a.sigma_t.clone(),
        sigma_r: a.sigma_r.clone(),
        seeds: a.seeds,
        seed: e.view.seed,
        eval: eval_config(e),
        pixels: a.pixels,
    };
    let report = sensitivity_sweep(&model, &scenes, &cfg)?;
    let out = &e.common.out;
    write_atomic(&out.join("sweep.csv"), sweep_csv(&report).as_bytes())?;
    write_json(&out.join("sweep.json"), &report)?;
    info!("baseline {:.3} dB over {} cells", report.baseline, report.cells.len());
    Ok(())
}

/// Logging from `EPIMISR_LOG` (`error`, `info` or `debug`), default `info`.
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("EPIMISR_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
