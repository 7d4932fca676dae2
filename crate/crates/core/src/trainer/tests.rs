use super::*;
use crate::decoder::DecoderConfig;
use crate::encoder::{Backbone, ViTConfig};

fn tiny_model(mode: BootstrapMode) -> ModelConfig {
    ModelConfig {
        data: BatchConfig {
            m: 16,
            n: 8,
            k: 2,
            ..BatchConfig::default()
        },
        encoder: EncoderConfig {
            backbone: Backbone::Vit(ViTConfig {
                patch_size: 4,
                embed_dim: 16,
                depth: 1,
                heads: 2,
                mlp_ratio: 2,
            }),
            context_size: 16,
            exemplar_size: 8,
        },
        decoder: DecoderConfig {
            width: 16,
            heads: 2,
            depth: 1,
            mlp_ratio: 2,
            ..DecoderConfig::default()
        },
        mode,
    }
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        total_steps: 20,
        warmup_steps: 2,
        peak_lr: 3e-3,
        batch_size: 2,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn images(count: usize) -> Vec<Image> {
    (0..count)
        .map(|i| {
            let f = i as f64 + 1.0;
            Image::from_fn(32, 32, move |c, y, x| {
                0.5 + 0.4 * ((x as f64 * 0.3 * f + c as f64).sin() * (y as f64 * 0.2 + f).cos())
            })
        })
        .collect()
}

fn state(mode: BootstrapMode) -> TrainState {
    TrainState::new(tiny_model(mode), tiny_train()).unwrap()
}

fn values(store: &ParamStore) -> Vec<Vec<f64>> {
    store.iter().map(|p| p.value.data().to_vec()).collect()
}

#[test]
fn config_validation() {
    let mut t = tiny_train();
    t.warmup_steps = t.total_steps;
    assert!(matches!(t.validate(), Err(TrainError::Config(_))));
    let mut t = tiny_train();
    t.peak_lr = 0.0;
    assert!(t.validate().is_err());
    let mut t = tiny_train();
    t.total_steps = 0;
    t.warmup_steps = 0;
    assert!(t.validate().is_ok());
    let mut m = tiny_model(BootstrapMode::Shared);
    m.encoder.context_size = 32;
    assert!(matches!(m.validate(), Err(TrainError::Config(_))));
}

#[test]
fn zero_lr_step_leaves_parameters_unchanged() {
    let mut s = state(BootstrapMode::OnlineToTarget);
    assert_eq!(s.train.lr(0), 0.0);
    let (theta, xi, dec) = (values(s.pair.theta()), values(s.pair.xi()), values(&s.decoder_params));
    let batches = s.sample_batches(&images(3)).unwrap();
    let m = s.train_step(&batches).unwrap();
    assert!(m.loss.is_finite() && m.loss > 0.0);
    assert_eq!(m.lr, 0.0);
    assert_eq!(values(s.pair.theta()), theta);
    assert_eq!(values(s.pair.xi()), xi);
    assert_eq!(values(&s.decoder_params), dec);
}

#[test]
fn fresh_states_give_identical_metrics() {
    let data = images(4);
    let run = || {
        let mut s = state(BootstrapMode::OnlineToTarget);
        (0..4)
            .map(|_| {
                let b = s.sample_batches(&data).unwrap();
                s.train_step(&b).unwrap()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn repeated_batch_loss_decreases() {
    let mut s = state(BootstrapMode::Shared);
    s.train.warmup_steps = 5;
    s.train.total_steps = 100;
    let batches = s.sample_batches(&images(2)).unwrap();
    let first = s.eval_loss(&batches).unwrap();
    for _ in 0..50 {
        s.train_step(&batches).unwrap();
    }
    let last = s.eval_loss(&batches).unwrap();
    assert!(last < first, "{last} !< {first}");
}

#[test]
fn target_moves_only_by_ema() {
    // tau = 1 freezes the EMA, so any change to the target would have to
    // come from the optimizer.
    for mode in [BootstrapMode::OnlineToTarget, BootstrapMode::TargetToOnline] {
        let mut t = tiny_train();
        t.tau = 1.0;
        let mut s = TrainState::new(tiny_model(mode), t).unwrap();
        let data = images(3);
        let (theta, xi) = (values(s.pair.theta()), values(s.pair.xi()));
        for _ in 0..4 {
            let b = s.sample_batches(&data).unwrap();
            s.train_step(&b).unwrap();
        }
        let (theta2, xi2) = (values(s.pair.theta()), values(s.pair.xi()));
        match mode {
            BootstrapMode::OnlineToTarget => {
                assert_eq!(xi2, xi);
                assert_ne!(theta2, theta);
            }
            _ => {
                assert_eq!(theta2, theta);
                assert_ne!(xi2, xi);
            }
        }
    }
}

#[test]
fn grad_norm_reports_pre_clip_value() {
    let mut t = tiny_train();
    t.grad_clip = Some(1e-6);
    let mut s = TrainState::new(tiny_model(BootstrapMode::Shared), t).unwrap();
    let b = s.sample_batches(&images(2)).unwrap();
    s.compute_grads(&b).unwrap();
    let raw = (optim::grad_sq_norm(s.pair.trained()) + optim::grad_sq_norm(&s.decoder_params)).sqrt();
    let m = s.train_step(&b).unwrap();
    assert_eq!(m.grad_norm, raw);
    assert!(raw > 1e-6);
}

#[test]
fn non_finite_parameter_reports_step() {
    let mut s = state(BootstrapMode::Shared);
    let data = images(2);
    for _ in 0..3 {
        let b = s.sample_batches(&data).unwrap();
        s.train_step(&b).unwrap();
    }
    s.decoder_params.iter_mut().next().unwrap().value.data_mut()[0] = f64::NAN;
    let b = s.sample_batches(&data).unwrap();
    match s.train_step(&b) {
        Err(TrainError::Numeric { step, .. }) => assert_eq!(step, 3),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn metrics_tsv_layout() {
    let mut w = MetricsWriter::new(Vec::new()).unwrap();
    w.write(&StepMetrics {
        step: 3,
        loss: 0.5,
        grad_norm: 1.25,
        lr: 1e-3,
    })
    .unwrap();
    let text = String::from_utf8(w.into_inner()).unwrap();
    assert_eq!(text, "step\tloss\tgrad_norm\tlr\n3\t0.5\t1.25\t0.001\n");
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    for mode in [BootstrapMode::Shared, BootstrapMode::OnlineToTarget, BootstrapMode::TargetToOnline] {
        let mut s = state(mode);
        s.config_text = "train.seed = 11\n".into();
        let data = images(3);
        for _ in 0..2 {
            let b = s.sample_batches(&data).unwrap();
            s.train_step(&b).unwrap();
        }
        let bytes = s.to_checkpoint().to_bytes();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        let r = TrainState::from_checkpoint(tiny_model(mode), tiny_train(), ckpt).unwrap();
        assert_eq!(r.to_checkpoint().to_bytes(), bytes);
        assert_eq!(r.step, 2);
        assert_eq!(r.config_text, "train.seed = 11\n");
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let s = state(BootstrapMode::OnlineToTarget);
    s.save_checkpoint(&path).unwrap();
    let r = TrainState::load_checkpoint(&path, tiny_model(BootstrapMode::OnlineToTarget), tiny_train()).unwrap();
    let path2 = dir.path().join("b.ckpt");
    r.save_checkpoint(&path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn mismatched_config_names_the_tensor() {
    let s = state(BootstrapMode::Shared);
    let ckpt = s.to_checkpoint();
    let mut other = tiny_model(BootstrapMode::Shared);
    other.decoder.mlp_ratio = 3;
    let err = TrainState::from_checkpoint(other, tiny_train(), ckpt).unwrap_err();
    match err {
        TrainError::Checkpoint(CheckpointError::ShapeMismatch { name, .. }) => {
            assert_eq!(name, "decoder/layers.0.mlp.fc1.weight")
        }
        e => panic!("unexpected {e:?}"),
    }
}

#[test]
fn mode_mismatch_is_detected() {
    let s = state(BootstrapMode::Shared);
    let err = TrainState::from_checkpoint(tiny_model(BootstrapMode::OnlineToTarget), tiny_train(), s.to_checkpoint())
        .unwrap_err();
    assert!(matches!(err, TrainError::Checkpoint(CheckpointError::MissingTensor(n)) if n.starts_with("xi/")));
    let s = state(BootstrapMode::OnlineToTarget);
    let err = TrainState::from_checkpoint(tiny_model(BootstrapMode::Shared), tiny_train(), s.to_checkpoint())
        .unwrap_err();
    assert!(matches!(err, TrainError::Checkpoint(CheckpointError::UnexpectedTensor(_))));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = images(5);
    let mut a = state(BootstrapMode::OnlineToTarget);
    let mut la = Vec::new();
    for _ in 0..10 {
        let b = a.sample_batches(&data).unwrap();
        la.push(a.train_step(&b).unwrap());
    }
    let mut b = state(BootstrapMode::OnlineToTarget);
    let mut lb = Vec::new();
    for _ in 0..5 {
        let x = b.sample_batches(&data).unwrap();
        lb.push(b.train_step(&x).unwrap());
    }
    let bytes = b.to_checkpoint().to_bytes();
    let mut b = TrainState::from_checkpoint(
        tiny_model(BootstrapMode::OnlineToTarget),
        tiny_train(),
        Checkpoint::from_bytes(&bytes).unwrap(),
    )
    .unwrap();
    for _ in 0..5 {
        let x = b.sample_batches(&data).unwrap();
        lb.push(b.train_step(&x).unwrap());
    }
    assert!((la[9].loss - lb[9].loss).abs() <= 1e-12);
    assert_eq!(la, lb);
}

#[test]
fn run_writes_one_row_per_step() {
    let mut s = state(BootstrapMode::Shared);
    s.train.total_steps = 3;
    s.train.warmup_steps = 1;
    let mut w = MetricsWriter::new(Vec::new()).unwrap();
    s.run(&images(2), Some(&mut w)).unwrap();
    let text = String::from_utf8(w.into_inner()).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().nth(3).unwrap().starts_with("2\t"));
}
