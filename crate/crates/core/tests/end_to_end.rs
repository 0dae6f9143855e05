use epimisr_core::dataset::{select_views, Scene, Selection};
use epimisr_core::metrics::{psnr, Degradation};
use epimisr_core::miff::MiffConfig;
use epimisr_core::optim::LrSchedule;
use epimisr_core::pipeline::{
    evaluate, forward, observations, run_sisr, train, EvalConfig, Model, ModelConfig, TrainConfig,
};
use epimisr_core::resample::bicubic_upsample;
use epimisr_core::scene::{render_synthetic_views, toy_corpus};
use epimisr_core::sisr::{SisrConfig, SisrVariant};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        sisr: SisrConfig {
            variant: SisrVariant::ResidualStack,
            channels: 6,
            depth: 1,
        },
        miff: MiffConfig {
            channels: 6,
            d_model: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_width: 12,
        },
    }
}

fn corpus(count: usize, seed: u64) -> Vec<Scene<f32>> {
    toy_corpus(count, 16, seed)
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let r = render_synthetic_views(spec).unwrap();
            Scene::from_rendered(format!("s{i}"), &r, Degradation::Bicubic { scale: 2 }).unwrap()
        })
        .collect()
}

fn schedule(lr: f64) -> LrSchedule {
    LrSchedule {
        warmup_steps: 2,
        warmup_start: lr * 0.1,
        base_lr: lr,
        milestones: vec![],
        gamma: 0.5,
    }
}

#[test]
fn fresh_model_is_a_bicubic_upsampler() {
    let scenes = corpus(1, 3);
    let sc = &scenes[0];
    let model = Model::<f32>::new(tiny_config(), 1).unwrap();
    let extras = select_views(&sc.cameras(), 0, 3, Selection::Nearest).unwrap();
    let p = forward(
        &model,
        observations(sc, &[0])[0],
        &observations(sc, &extras),
        &sc.sampling(8).unwrap(),
        sc.scale,
        64,
    )
    .unwrap();
    assert_eq!(p.misr, p.sisr);
    assert_eq!(p.sisr.shape(), &[16, 16, 3]);
    let up = bicubic_upsample(&sc.views[0].lr, 2).unwrap();
    assert!(p.sisr.max_abs_diff(&up) < 1e-5);
}

#[test]
fn training_is_reproducible_and_moves_both_stages() {
    let scenes = corpus(2, 5);
    let pre = TrainConfig {
        schedule: schedule(3e-3),
        steps: 4,
        batch: 32,
        seed: 9,
        views: 0,
        points: 6,
        freeze_sisr_steps: 0,
        ..TrainConfig::default()
    };
    let fusion = TrainConfig {
        views: 2,
        seed: 10,
        freeze_sisr_steps: 2,
        ..pre.clone()
    };
    let run = || {
        let mut m = Model::<f32>::new(tiny_config(), 4).unwrap();
        let a = train(&mut m, &scenes, &pre, |_| {}).unwrap();
        let b = train(&mut m, &scenes, &fusion, |_| {}).unwrap();
        (m, a, b)
    };
    let (m1, a1, b1) = run();
    let (m2, a2, b2) = run();
    assert_eq!((&a1, &b1), (&a2, &b2));
    assert_eq!(m1.params, m2.params);
    assert_eq!(a1.len(), 4);
    assert!(b1.iter().all(|r| r.loss.is_finite()));

    let fresh = Model::<f32>::new(tiny_config(), 4).unwrap();
    let head = |m: &Model<f32>| m.params.get("miff.head.w").unwrap().data().iter().any(|&v| v != 0.0);
    assert!(!head(&fresh));
    assert!(head(&m1));
    let lr = &scenes[0].views[0].lr;
    let before = run_sisr(&fresh, lr, 2).unwrap().rgb;
    let after = run_sisr(&m1, lr, 2).unwrap().rgb;
    assert!(before.max_abs_diff(&after) > 0.0);
}

#[test]
fn evaluation_reports_consistent_psnr() {
    let scenes = corpus(2, 8);
    let model = Model::<f32>::new(tiny_config(), 2).unwrap();
    let cfg = EvalConfig {
        views: 2,
        points: 6,
        targets_per_scene: Some(1),
        border: 2,
        ..EvalConfig::default()
    };
    let r = evaluate(&model, &scenes, &cfg).unwrap();
    assert_eq!(r.per_scene.len(), 2);
    assert_eq!(r.psnr_misr, r.psnr_sisr);
    let sc = &scenes[0];
    let t = r.per_scene[0].targets[0];
    let up = bicubic_upsample(&sc.views[t].lr, 2).unwrap();
    let direct = psnr(&up, sc.views[t].hr.as_ref().unwrap(), 2).unwrap();
    assert!((r.per_scene[0].psnr_sisr - direct).abs() < 1e-3);
}
