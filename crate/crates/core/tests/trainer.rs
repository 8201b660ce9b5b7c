mod common;

use candle::{DType, Device, Tensor};
use common::{tiny_config, tiny_data};
use facelab::au::{AuDelta, NUM_AUS};
use facelab::checkpoint::Checkpoint;
use facelab::diffcore::{ConditionBundle, EditModel};
use facelab::rng;
use facelab::trainer::*;
use facelab::Error;
use rand::Rng;

fn weights(model: &EditModel) -> Vec<(String, Vec<f32>)> {
    let data = model.vars.data().lock().unwrap();
    let mut out: Vec<_> = data
        .iter()
        .map(|(k, v)| (k.clone(), v.flatten_all().unwrap().to_vec1::<f32>().unwrap()))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    s[s.len() / 2]
}

#[test]
fn dropout_rate_within_three_sigma() {
    let cfg = DropoutConfig::default();
    let mut r = rng::seeded(11);
    let d = AuDelta::single(5, 1.5);
    let n = 100_000;
    let dropped = (0..n)
        .filter(|_| {
            let u: f64 = r.random();
            au_dropout(&d, u, &cfg, &mut r).is_zero()
        })
        .count() as f64;
    let sigma = (n as f64 * 0.1 * 0.9).sqrt();
    assert!((dropped - 0.1 * n as f64).abs() <= 3.0 * sigma, "dropped {dropped}");
}

#[test]
fn zero_delta_perturbation_std() {
    let cfg = DropoutConfig::default();
    let mut r = rng::seeded(12);
    let mut samples = Vec::new();
    while samples.len() < 10_000 {
        let out = au_dropout(&AuDelta::zeros(), 0.99, &cfg, &mut r);
        samples.push(out.values()[0]);
        // every perturbed delta is non-zero in every component
        assert!(out.values().iter().all(|v| *v != 0.0));
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let std = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64).sqrt();
    assert!((0.19..=0.21).contains(&std), "std {std}");
}

#[test]
fn first_step_loss_is_near_one() {
    let data = tiny_data(16, 1);
    let mut t = Trainer::new(tiny_config(), DType::F32, &Device::Cpu).unwrap();
    let s = t.training_step(&data).unwrap();
    assert!((s.loss - 1.0).abs() < 0.2, "loss {}", s.loss);
}

#[test]
fn zero_learning_rate_leaves_weights_identical() {
    let data = tiny_data(8, 2);
    let mut cfg = tiny_config();
    cfg.optimizer.lr = 0.0;
    let mut t = Trainer::new(cfg, DType::F32, &Device::Cpu).unwrap();
    let before = weights(&t.model);
    for _ in 0..3 {
        t.training_step(&data).unwrap();
    }
    assert_eq!(before, weights(&t.model));
}

#[test]
fn batch_loss_matches_per_item_reduction() {
    // independent route: noise each item with the scalar formula, run the
    // network one item at a time, and average squared errors in f64
    let data = tiny_data(8, 3);
    let mut t = Trainer::new(tiny_config(), DType::F64, &Device::Cpu).unwrap();
    let b = t.sample_batch(&data).unwrap();
    let loss = batch_loss(&t.model, &b).unwrap().to_scalar::<f64>().unwrap();

    let m = &t.model;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..b.timesteps.len() {
        let ab = m.schedule.alpha_bars[b.timesteps[i]];
        let z0 = b.target.get(i).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eps = b.noise.get(i).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let zt: Vec<f64> = z0.iter().zip(&eps).map(|(z, e)| ab.sqrt() * z + (1.0 - ab).sqrt() * e).collect();
        let zt = Tensor::from_vec(zt, b.target.get(i).unwrap().dims(), &Device::Cpu).unwrap().unsqueeze(0).unwrap();
        let id = m.id_encode(&b.identity.narrow(0, i, 1).unwrap()).unwrap();
        let au = m.au_encode(&m.delta_tensor(&b.deltas[i..i + 1]).unwrap()).unwrap();
        let cond = b.condition.narrow(0, i, 1).unwrap();
        let pred = m
            .denoise_step(&zt, &b.timesteps[i..i + 1], ConditionBundle { au: Some(&au), cond_latent: Some(&cond), id: Some(&id) })
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        total += pred.iter().zip(&eps).map(|(p, e)| (e - p).powi(2)).sum::<f64>();
        count += pred.len();
    }
    let manual = total / count as f64;
    assert!((loss - manual).abs() < 1e-9 * manual.max(1.0), "{loss} vs {manual}");
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let data = tiny_data(8, 4);
    let mut t = Trainer::new(tiny_config(), DType::F32, &Device::Cpu).unwrap();
    t.training_step(&data).unwrap();
    {
        let vars = t.model.vars.data().lock().unwrap();
        let w = vars.get("denoiser.conv_in.weight").unwrap();
        let nan = Tensor::full(f32::NAN, w.dims(), &Device::Cpu).unwrap();
        w.set(&nan).unwrap();
    }
    match t.training_step(&data) {
        Err(Error::NonFinite(msg)) => {
            assert!(msg.contains("step 2"), "{msg}");
            assert!(msg.contains("timesteps"), "{msg}");
            assert!(msg.contains("recent losses"), "{msg}");
        }
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let train = tiny_data(12, 5);
    let val = tiny_data(4, 6);
    let mut cfg = tiny_config();
    cfg.steps = 6;
    let full = tempfile::tempdir().unwrap();
    let a = train_on(&train, &val, &cfg, full.path()).unwrap();

    let split = tempfile::tempdir().unwrap();
    let mut first = cfg.clone();
    first.steps = 3;
    train_on(&train, &val, &first, split.path()).unwrap();
    let b = train_on(&train, &val, &cfg, split.path()).unwrap();

    let ca = Checkpoint::load(&a.model_path).unwrap();
    let cb = Checkpoint::load(&b.model_path).unwrap();
    assert_eq!(ca.tensors, cb.tensors);
    assert_eq!(a.summary.val_loss.to_bits(), b.summary.val_loss.to_bits());
    let losses = |d: &std::path::Path| -> Vec<(u64, f64)> {
        std::fs::read_to_string(d.join(LOG_FILE))
            .unwrap()
            .lines()
            .map(|l| {
                let r: LogRecord = serde_json::from_str(l).unwrap();
                (r.step, r.loss)
            })
            .collect()
    };
    assert_eq!(losses(full.path()), losses(split.path()));
    assert_eq!(losses(full.path()).len(), 6);
}

#[test]
fn resume_with_changed_config_is_rejected() {
    let train = tiny_data(8, 7);
    let val = tiny_data(2, 8);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.steps = 2;
    train_on(&train, &val, &cfg, dir.path()).unwrap();
    cfg.steps = 4;
    cfg.dropout.prob = 0.3;
    let err = train_on(&train, &val, &cfg, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
}

#[test]
fn final_checkpoint_reloads_with_same_validation_loss() {
    let train = tiny_data(8, 9);
    let val = tiny_data(6, 10);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.steps = 3;
    let out = train_on(&train, &val, &cfg, dir.path()).unwrap();
    assert!(out.summary.val_loss.is_finite());
    let (model, ckpt) = EditModel::load(&out.model_path, &Device::Cpu).unwrap();
    let recorded = summary_of(&ckpt).unwrap();
    assert_eq!(recorded.steps, 3);
    let again = validation_loss(&model, &val, cfg.batch_size, cfg.seed).unwrap();
    assert_eq!(again.to_bits(), recorded.val_loss.to_bits());
    // the log has one JSON record per step with the documented fields
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for k in ["step", "loss", "lr", "wallclock"] {
            assert!(v.get(k).is_some(), "missing {k} in {line}");
        }
    }
}

#[test]
fn mlp_conv_variant_trains() {
    let data = tiny_data(8, 11);
    let mut cfg = tiny_config();
    cfg.model.au_encoder = facelab::diffcore::AuEncoderVariant::MlpConv;
    let mut t = Trainer::new(cfg, DType::F32, &Device::Cpu).unwrap();
    let before = weights(&t.model);
    for _ in 0..3 {
        assert!(t.training_step(&data).unwrap().loss.is_finite());
    }
    let after = weights(&t.model);
    let changed = |name: &str| {
        let a = &before.iter().find(|(k, _)| k == name).unwrap().1;
        let b = &after.iter().find(|(k, _)| k == name).unwrap().1;
        a != b
    };
    assert!(changed("au_encoder.fc1.weight"));
    assert!(changed("au_encoder.fc2.weight"));
}

#[test]
fn label_noise_is_fixed_per_pair_and_in_range() {
    let mut a = tiny_data(6, 12);
    let clean = a.deltas.clone();
    let mut b = a.clone();
    a.apply_label_noise(0.15, 5);
    b.apply_label_noise(0.15, 5);
    assert_eq!(a.deltas, b.deltas);
    assert_ne!(a.deltas, clean);
    for d in &a.deltas {
        assert!(d.values().iter().all(|v| v.abs() <= 5.0));
        assert_eq!(d.values().len(), NUM_AUS);
    }
}

#[test]
fn loss_decreases_over_500_steps() {
    let data = tiny_data(1000, 13);
    let mut cfg = tiny_config();
    cfg.batch_size = 16;
    let mut t = Trainer::new(cfg, DType::F32, &Device::Cpu).unwrap();
    let losses: Vec<f64> = (0..500).map(|_| t.training_step(&data).unwrap().loss).collect();
    let (first, last) = (median(&losses[..100]), median(&losses[400..]));
    assert!(last < first, "median loss {first} -> {last}");
}


#[test]
fn zeroed_side_inputs_without_dropout_give_plain_objective() {
    let data = tiny_data(8, 5);
    let mut cfg = tiny_config();
    cfg.dropout.prob = 0.0;
    let mut t = Trainer::new(cfg, DType::F64, &Device::Cpu).unwrap();
    let mut b = t.sample_batch(&data).unwrap();
    // dropout off: every sampled delta is one of the dataset's deltas, untouched
    for d in &b.deltas {
        assert!(data.deltas.iter().any(|x| x == d));
    }
    b.identity = b.identity.zeros_like().unwrap();
    b.condition = b.condition.zeros_like().unwrap();
    let loss = batch_loss(&t.model, &b).unwrap().to_scalar::<f64>().unwrap();

    // plain objective: eps_hat depends on (z_t, t) and a fixed AU code only
    let m = &t.model;
    let n = b.timesteps.len();
    let zero_id = m.id_encode(&b.identity).unwrap();
    let au = m.au_encode(&m.delta_tensor(&b.deltas).unwrap()).unwrap();
    let eps_hat = |z: &Tensor, ts: &[usize]| {
        m.denoise_step(z, ts, ConditionBundle { au: Some(&au), cond_latent: Some(&b.condition), id: Some(&zero_id) })
            .unwrap()
    };
    let dims = b.target.dims().to_vec();
    let mut zt = Vec::new();
    for i in 0..n {
        let ab = m.schedule.alpha_bars[b.timesteps[i]];
        let z0 = b.target.get(i).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let e = b.noise.get(i).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        zt.extend(z0.iter().zip(&e).map(|(z, e)| ab.sqrt() * z + (1.0 - ab).sqrt() * e));
    }
    let zt = Tensor::from_vec(zt, dims, &Device::Cpu).unwrap();
    let pred = eps_hat(&zt, &b.timesteps).flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let eps = b.noise.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let plain = pred.iter().zip(&eps).map(|(p, e)| (e - p).powi(2)).sum::<f64>() / eps.len() as f64;
    assert!((loss - plain).abs() < 1e-12 * plain.max(1.0), "{loss} vs {plain}");
}
