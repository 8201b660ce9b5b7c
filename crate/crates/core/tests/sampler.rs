mod common;

use candle::{DType, Device, Tensor};
use facelab::au::{idx, AuDelta};
use facelab::diffcore::{ConditionBundle, EditModel, ModelConfig, NoiseSchedule, ScheduleConfig};
use facelab::estimators::Estimator;
use facelab::sampler::{
    ddim_loop, ddpm_loop, edit_image, expected_denoiser_calls, predict_noise, sample, transfer_expression, EditRequest,
    GuidanceConfig, PreparedConditions, SampleOptions, SamplerKind,
};
use facelab::Error;

fn schedule(t: usize) -> NoiseSchedule {
    NoiseSchedule::new(&ScheduleConfig {
        num_timesteps: t,
        beta_start: 0.01,
        beta_end: 0.2,
    })
}

fn start() -> Tensor {
    Tensor::new(&[[0.9f64, -1.4], [0.25, 2.0]], &Device::Cpu).unwrap()
}

fn toy_eps(z: &f64, t: usize) -> f64 {
    0.3 * z + 0.01 * t as f64
}

fn toy_predict(z: &Tensor, t: usize) -> facelab::Result<Tensor> {
    Ok(z.affine(0.3, 0.01 * t as f64)?)
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Scalar DDIM with eta = 0 over every timestep.
fn ddim_oracle(s: &NoiseSchedule, z0: &[f64], clip: bool) -> Vec<f64> {
    z0.iter()
        .map(|&z_start| {
            let mut z = z_start;
            for t in (0..s.len()).rev() {
                let ab = s.alpha_bars[t];
                let mut eps = toy_eps(&z, t);
                let mut x0 = (z - (1.0 - ab).sqrt() * eps) / ab.sqrt();
                if clip {
                    x0 = x0.clamp(-1.0, 1.0);
                    eps = (z - ab.sqrt() * x0) / (1.0 - ab).sqrt();
                }
                z = if t == 0 {
                    x0
                } else {
                    let abp = s.alpha_bars[t - 1];
                    abp.sqrt() * x0 + (1.0 - abp).sqrt() * eps
                };
            }
            z
        })
        .collect()
}

#[test]
fn ddim_matches_scalar_oracle_on_2x2_latent() {
    let s = schedule(6);
    let ts: Vec<usize> = (0..6).collect();
    for clip in [false, true] {
        let got = flat(&ddim_loop(&s, start(), &ts, clip, toy_predict).unwrap());
        let want = ddim_oracle(&s, &flat(&start()), clip);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "clip={clip}: {g} vs {w}");
        }
    }
}

#[test]
fn ddpm_matches_scalar_oracle_with_fixed_noise() {
    let s = schedule(5);
    let n = 0.5f64;
    let got = flat(&ddpm_loop(&s, start(), false, toy_predict, |z| Ok(z.ones_like()?.affine(n, 0.0)?)).unwrap());
    for (g, &z_start) in got.iter().zip(&flat(&start())) {
        let mut z = z_start;
        for t in (0..5).rev() {
            let (ab, b) = (s.alpha_bars[t], s.betas[t]);
            let abp = if t == 0 { 1.0 } else { s.alpha_bars[t - 1] };
            // posterior mean in the eps form
            let mean = (z - b / (1.0 - ab).sqrt() * toy_eps(&z, t)) / (1.0 - b).sqrt();
            let var = b * (1.0 - abp) / (1.0 - ab);
            z = if t > 0 { mean + var.sqrt() * n } else { mean };
        }
        assert!((g - z).abs() < 1e-10, "{g} vs {z}");
    }
}

#[test]
fn non_finite_latent_aborts_with_step_index() {
    let s = schedule(6);
    let ts: Vec<usize> = (0..6).collect();
    let err = ddim_loop(&s, start(), &ts, false, |z, t| {
        if t == 3 {
            Ok(z.affine(f64::NAN, 0.0)?)
        } else {
            toy_predict(z, t)
        }
    })
    .unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::NonFinite(_)));
    assert!(msg.contains("step 2") && msg.contains("t = 3"), "{msg}");
}

struct Fixture {
    model: EditModel,
    s: Tensor,
    g: Tensor,
}

fn fixture(n: usize) -> Fixture {
    let model = EditModel::new(ModelConfig::tiny(), DType::F32, &Device::Cpu).unwrap();
    let pairs = common::tiny_pairs(n, 4, 9);
    let ids: Vec<_> = pairs.iter().map(|p| &p.identity_image).collect();
    let conds: Vec<_> = pairs.iter().map(|p| &p.condition_image).collect();
    let s = model.encode_images(&ids).unwrap();
    let g = model.encode_conditions(&conds).unwrap();
    Fixture { model, s, g }
}

fn prepared(f: &Fixture, delta: AuDelta) -> PreparedConditions {
    let b = f.s.dim(0).unwrap();
    PreparedConditions::new(&f.model, &f.s, &f.g, &vec![delta; b]).unwrap()
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect()
}

fn opts(sampler: SamplerKind, steps: usize, guidance: GuidanceConfig) -> SampleOptions {
    SampleOptions {
        guidance,
        sampler,
        steps,
        clip_denoised: true,
    }
}

#[test]
fn id_features_computed_once_and_call_counts() {
    let f = fixture(2);
    let t = f.model.schedule.len();
    f.model.counters.reset();
    let conds = prepared(&f, AuDelta::single(idx::AU12, 2.0));
    for (o, calls) in [
        (opts(SamplerKind::Ddim, 5, GuidanceConfig::default()), 10),
        (opts(SamplerKind::Ddim, 5, GuidanceConfig::disabled()), 5),
        (opts(SamplerKind::Ddpm, 5, GuidanceConfig::default()), 2 * t),
    ] {
        f.model.counters.reset();
        sample(&f.model, &conds, &o, &[1, 2]).unwrap();
        assert_eq!(f.model.counters.denoise(), calls);
        assert_eq!(expected_denoiser_calls(&f.model, &o), calls);
        assert_eq!(f.model.counters.id_encode(), 0, "sampling must reuse the cached identity features");
    }
    f.model.counters.reset();
    let _ = prepared(&f, AuDelta::zeros());
    assert_eq!(f.model.counters.id_encode(), 1);
}

#[test]
fn ddim_50_needs_tenfold_fewer_calls_than_ddpm_1000() {
    let model = EditModel::new(
        ModelConfig {
            schedule: ScheduleConfig::default(),
            ..ModelConfig::tiny()
        },
        DType::F32,
        &Device::Cpu,
    )
    .unwrap();
    let g = GuidanceConfig::default();
    let ddpm = expected_denoiser_calls(&model, &opts(SamplerKind::Ddpm, 50, g));
    let ddim = expected_denoiser_calls(&model, &opts(SamplerKind::Ddim, 50, g));
    assert_eq!(ddpm, 2000);
    assert!(ddpm >= 10 * ddim);
}

#[test]
fn alpha_one_equals_guidance_disabled_bitwise() {
    let f = fixture(2);
    let conds = prepared(&f, AuDelta::single(idx::AU4, -3.0));
    for kind in [SamplerKind::Ddim, SamplerKind::Ddpm] {
        let on = sample(&f.model, &conds, &opts(kind, 4, GuidanceConfig { alpha: 1.0, enabled: true }), &[5, 6]).unwrap();
        let off = sample(&f.model, &conds, &opts(kind, 4, GuidanceConfig::disabled()), &[5, 6]).unwrap();
        assert_eq!(bits(&on), bits(&off), "{kind:?}");
    }
}

#[test]
fn unconditional_branch_drops_only_the_au_condition() {
    let f = fixture(2);
    let conds = prepared(&f, AuDelta::single(idx::AU12, 4.0));
    let z = Tensor::ones(f.s.shape(), DType::F32, &Device::Cpu).unwrap();
    let uncond = predict_noise(&f.model, &z, 7, &conds, &GuidanceConfig { alpha: 0.0, enabled: true }).unwrap();
    let zero = f.model.au_encode(&f.model.delta_tensor(&[AuDelta::zeros(); 2]).unwrap()).unwrap();
    let id = f.model.id_encode(&f.s).unwrap();
    let manual = f
        .model
        .denoise_step(
            &z,
            &[7, 7],
            ConditionBundle {
                au: Some(&zero),
                cond_latent: Some(&f.g),
                id: Some(&id),
            },
        )
        .unwrap();
    assert_eq!(bits(&uncond), bits(&manual));
}

#[test]
fn samplers_are_deterministic_per_seed() {
    let f = fixture(2);
    let conds = prepared(&f, AuDelta::single(idx::AU12, 2.0));
    for kind in [SamplerKind::Ddim, SamplerKind::Ddpm] {
        let o = opts(kind, 4, GuidanceConfig::default());
        let a = sample(&f.model, &conds, &o, &[11, 12]).unwrap();
        let b = sample(&f.model, &conds, &o, &[11, 12]).unwrap();
        let c = sample(&f.model, &conds, &o, &[13, 12]).unwrap();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a.get(0).unwrap()), bits(&c.get(0).unwrap()));
        assert_eq!(bits(&a.get(1).unwrap()), bits(&c.get(1).unwrap()), "items must not share noise streams");
    }
}

#[test]
fn hundred_seeds_give_finite_samples() {
    let f = fixture(1);
    let s = f.s.repeat((100, 1, 1, 1)).unwrap();
    let g = f.g.repeat((100, 1, 1, 1)).unwrap();
    let conds = PreparedConditions::new(&f.model, &s, &g, &vec![AuDelta::single(idx::AU4, -6.0); 100]).unwrap();
    let seeds: Vec<u64> = (0..100).collect();
    let z = sample(&f.model, &conds, &opts(SamplerKind::Ddim, 5, GuidanceConfig::default()), &seeds).unwrap();
    assert!(z.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn edit_image_validates_and_strips_provenance() {
    let model = EditModel::new(ModelConfig::tiny(), DType::F32, &Device::Cpu).unwrap();
    let pair = common::tiny_pairs(1, 1, 4).remove(0);
    let mut req = EditRequest::new(pair.identity_image.clone(), AuDelta::single(idx::AU12, 4.0), 3)
        .with_sampler(SamplerKind::Ddim, 3);
    let out = edit_image(&model, None, &req).unwrap();
    assert!(out.provenance.is_none() && out.face_mask.is_none());
    assert_eq!(out.size, 16);
    assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));

    req.au_delta = AuDelta::single(idx::AU4, -10.5);
    assert!(matches!(edit_image(&model, None, &req), Err(Error::Validation { .. })));
    req.au_delta = AuDelta::single(idx::AU4, -10.0);
    assert!(edit_image(&model, None, &req).is_ok());

    req.identity_image = pair.identity_image.clone().strip();
    assert!(matches!(edit_image(&model, None, &req), Err(Error::MissingCondition(_))));

    req.identity_image = facelab::synthface::SceneImage::filled(32, [0.0; 3]);
    assert!(matches!(edit_image(&model, Some(&Estimator::Oracle), &req), Err(Error::Resolution { .. })));
}

#[test]
fn transfer_from_self_is_a_zero_delta() {
    let model = EditModel::new(ModelConfig::tiny(), DType::F32, &Device::Cpu).unwrap();
    let pairs = common::tiny_pairs(2, 2, 5);
    let src = &pairs[0].target_image;
    let o = opts(SamplerKind::Ddim, 2, GuidanceConfig::default());
    let (_, delta) = transfer_expression(&model, &Estimator::Oracle, src, src, o, 1).unwrap();
    assert!(delta.is_zero());
    let (_, delta) = transfer_expression(&model, &Estimator::Oracle, src, &pairs[1].target_image, o, 1).unwrap();
    let want = pairs[0].target_scene().aus.delta_to(&pairs[1].target_scene().aus);
    assert_eq!(delta, want);
    let err = transfer_expression(&model, &Estimator::Oracle, src, &pairs[1].target_image.clone().strip(), o, 1).unwrap_err();
    assert!(matches!(err, Error::EstimatorItem { index: 1, .. }));
}
