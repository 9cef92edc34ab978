//! Integration tests of the training loop: determinism, frozen-optimizer
//! behavior, checkpoint resume, and a short convergence smoke run.

use fmse_core::backbone::{Checkpoint, DiffBackbone, RefNet, RefNetConfig};
use fmse_core::data::{load_train_data, synth_corpus};
use fmse_core::objectives::ObjectiveKind;
use fmse_core::spectral::SpectralConfig;
use fmse_core::train::{train, resume, TrainConfig, TrainSetup};

fn small_spectral() -> SpectralConfig {
    SpectralConfig {
        n_fft: 126,
        hop: 64,
        ..SpectralConfig::default()
    }
}

fn tiny_setup(objective: ObjectiveKind, seed: u64, max_steps: u64) -> TrainSetup<'static> {
    let mut setup = TrainSetup::new(TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        ema_decay: 0.95,
        max_steps,
        val_interval: 5,
        alpha_p: 0.0,
        alpha_s: 0.0,
        objective,
        seed,
        crop_frames: 24,
    });
    setup.spectral = small_spectral();
    setup
}

fn tiny_net(seed: u64) -> RefNet {
    RefNet::new(
        RefNetConfig {
            channels: 6,
            depth: 1,
            emb_dim: 8,
        },
        seed,
    )
    .unwrap()
}

#[test]
fn seeded_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let scan = synth_corpus(dir.path(), 6, 2, 41, 0.4).unwrap();
    let data = load_train_data(&scan, &small_spectral()).unwrap();

    let mut net_a = tiny_net(7);
    let state_a = train(&tiny_setup(ObjectiveKind::X1, 3, 10), &data, &mut net_a).unwrap();
    let mut net_b = tiny_net(7);
    let state_b = train(&tiny_setup(ObjectiveKind::X1, 3, 10), &data, &mut net_b).unwrap();

    assert_eq!(state_a.history, state_b.history);
    for (a, b) in state_a.params.iter().zip(&state_b.params) {
        assert_eq!(a, b, "parameter trajectories diverged");
    }
    for (a, b) in state_a.ema_params.iter().zip(&state_b.ema_params) {
        assert_eq!(a, b);
    }
}

#[test]
fn zero_learning_rate_freezes_everything() {
    let dir = tempfile::tempdir().unwrap();
    let scan = synth_corpus(dir.path(), 4, 1, 43, 0.4).unwrap();
    let data = load_train_data(&scan, &small_spectral()).unwrap();

    let mut net = tiny_net(11);
    let initial = net.params().to_vec();
    let mut setup = tiny_setup(ObjectiveKind::Velocity, 5, 8);
    setup.config.learning_rate = 0.0;
    let state = train(&setup, &data, &mut net).unwrap();

    for (p, init) in state.params.iter().zip(&initial) {
        assert_eq!(p, init, "parameters changed with lr = 0");
    }
    for (e, init) in state.ema_params.iter().zip(&initial) {
        assert_eq!(e, init, "EMA diverged from initial parameters with lr = 0");
    }
}

#[test]
fn checkpoint_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let scan = synth_corpus(dir.path(), 6, 2, 47, 0.4).unwrap();
    let data = load_train_data(&scan, &small_spectral()).unwrap();

    // uninterrupted run to 20 steps
    let mut net_full = tiny_net(13);
    let full = train(&tiny_setup(ObjectiveKind::X1Edm, 9, 20), &data, &mut net_full).unwrap();

    // interrupted run: 10 steps with checkpointing, then resume to 20
    let out = tempfile::tempdir().unwrap();
    let mut setup_half = tiny_setup(ObjectiveKind::X1Edm, 9, 10);
    setup_half.out_dir = Some(out.path().to_path_buf());
    let mut net_half = tiny_net(13);
    train(&setup_half, &data, &mut net_half).unwrap();

    let ckpt = Checkpoint::load(&out.path().join("last.ckpt.json")).unwrap();
    assert_eq!(ckpt.step, 10);
    let setup_rest = tiny_setup(ObjectiveKind::X1Edm, 9, 20);
    let (_, resumed) = resume(&setup_rest, &data, &ckpt).unwrap();

    assert_eq!(full.step, resumed.step);
    for (a, b) in full.params.iter().zip(&resumed.params) {
        assert_eq!(a, b, "resumed parameters differ from uninterrupted run");
    }
    for (a, b) in full.ema_params.iter().zip(&resumed.ema_params) {
        assert_eq!(a, b, "resumed EMA differs from uninterrupted run");
    }
    assert_eq!(full.history, resumed.history);
}

#[test]
fn loss_drops_on_overfit_batch() {
    // reference-net smoke: a few dozen steps on a small fixed corpus move the
    // training loss well below its start
    let dir = tempfile::tempdir().unwrap();
    let scan = synth_corpus(dir.path(), 3, 1, 53, 0.4).unwrap();
    let data = load_train_data(&scan, &small_spectral()).unwrap();

    let out = tempfile::tempdir().unwrap();
    let mut setup = tiny_setup(ObjectiveKind::X1, 21, 60);
    setup.config.learning_rate = 3e-3;
    setup.out_dir = Some(out.path().to_path_buf());
    let mut net = tiny_net(17);
    train(&setup, &data, &mut net).unwrap();

    let log = std::fs::read_to_string(out.path().join("train_log.jsonl")).unwrap();
    let mut first = None;
    let mut last = None;
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if let Some(loss) = v.get("loss").and_then(|x| x.as_f64()) {
            if first.is_none() {
                first = Some(loss);
            }
            last = Some(loss);
        }
    }
    let (first, last) = (first.unwrap(), last.unwrap());
    assert!(
        last < 0.5 * first,
        "loss did not drop enough: {first} -> {last}"
    );
}
