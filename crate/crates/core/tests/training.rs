//! Optimizers, the alternating trainer and its checkpoints.

mod common;

use cellnas::nn::ParamKind;
use cellnas::optim::Flavor;
use cellnas::trainer::{history_csv, NetworkSpec, TrainConfig, Trainer};
use cellnas::Error;
use common::{closed_form, run_optimizer, tiny_spec, tiny_task, tiny_train};

const GRADS: [f32; 4] = [0.5, -0.25, 0.1, 2.0];

#[test]
fn adamw_first_step_matches_hand_value() {
    // p = 1 - lr*wd - lr * 0.5 / (0.5 + eps)
    let p = run_optimizer(Flavor::AdamW, 0.1, 0.01, &[0.5])[0] as f64;
    assert!((p - 0.899_000_002).abs() < 1e-7, "{p}");
}

#[test]
fn adam_first_step_matches_hand_value() {
    // g' = 0.5 + 0.01 * 1, p = 1 - 0.1 * g' / (g' + eps)
    let p = run_optimizer(Flavor::Adam, 0.1, 0.01, &[0.5])[0] as f64;
    assert!((p - 0.900_000_002).abs() < 1e-7, "{p}");
}

#[test]
fn optimizers_follow_the_closed_form_over_several_steps() {
    for flavor in [Flavor::AdamW, Flavor::Adam] {
        for (lr, wd) in [(1e-3, 1e-4), (3e-4, 1e-3), (0.05, 0.2)] {
            let got = run_optimizer(flavor, lr, wd, &GRADS);
            let want = closed_form(flavor, lr, wd, &GRADS);
            for (t, (g, w)) in got.iter().zip(&want).enumerate() {
                assert!(
                    (*g as f64 - w).abs() < 1e-7,
                    "{flavor:?} lr {lr} wd {wd} step {t}: {g} vs {w}"
                );
            }
        }
    }
}

#[test]
fn zero_decay_makes_both_flavors_identical() {
    let grads: Vec<f32> = (0..50).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.1).collect();
    let a = run_optimizer(Flavor::AdamW, 0.01, 0.0, &grads);
    let b = run_optimizer(Flavor::Adam, 0.01, 0.0, &grads);
    assert_eq!(a, b);
}

#[test]
fn config_validation_names_the_field() {
    let bad = TrainConfig {
        batch_size: 8,
        ..Default::default()
    };
    let msg = bad.validate().unwrap_err().to_string();
    assert!(msg.contains("batch_size"), "{msg}");
    assert!(TrainConfig::default().validate().is_ok());
}

#[test]
fn parity_decides_the_updated_set() {
    let data = tiny_task(0);
    let search = Trainer::new(tiny_train(0), tiny_spec(&data)).unwrap();
    assert!(search.is_search());
    for i in 0..6u64 {
        let want = if i % 2 == 0 { ParamKind::Weight } else { ParamKind::Arch };
        assert_eq!(search.update_kind(i), want);
    }
    let mut search = search;
    let g = cellnas::genotype::discretize(&search.net, &search.store).unwrap();
    let fixed_spec = NetworkSpec {
        fixed_cells: Some(g.cells.clone()),
        ..search.spec.clone()
    };
    let mut fixed = Trainer::new(tiny_train(0), fixed_spec).unwrap();
    assert!(!fixed.is_search());
    for i in 0..4u64 {
        let before = fixed.weight_values();
        let r = fixed.step(&data).unwrap();
        assert_eq!(r.updated, ParamKind::Weight);
        assert_ne!(before, fixed.weight_values(), "fixed network skipped step {i}");
    }
    // search steps actually move the set they report
    let w0 = search.weight_values();
    search.step(&data).unwrap();
    assert_ne!(w0, search.weight_values());
    let a0 = search.arch_values();
    search.step(&data).unwrap();
    assert_ne!(a0, search.arch_values());
}

#[test]
fn batches_cover_each_epoch_without_repeats() {
    let data = tiny_task(3);
    let t = Trainer::new(tiny_train(3), tiny_spec(&data)).unwrap();
    let n = data.train.len();
    let bpe = t.batches_per_epoch(n);
    assert_eq!(bpe, n / 32);
    let mut seen: Vec<usize> = (0..bpe as u64).flat_map(|s| t.batch_indices(n, s).unwrap()).collect();
    assert_eq!(seen.len(), bpe * 32);
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), bpe * 32);
    assert!(seen.iter().all(|&i| i < n));
    // a new epoch reshuffles, the same step repeats
    assert_ne!(t.batch_indices(n, 0).unwrap(), t.batch_indices(n, bpe as u64).unwrap());
    assert_eq!(t.batch_indices(n, 1).unwrap(), t.batch_indices(n, 1).unwrap());
}

#[test]
fn too_small_training_split_is_a_config_error() {
    let data = tiny_task(0);
    let mut cfg = tiny_train(0);
    cfg.batch_size = 512;
    let mut t = Trainer::new(cfg, tiny_spec(&data)).unwrap();
    assert!(matches!(t.run_epoch(&data), Err(Error::Config(_))));
}

#[test]
fn non_finite_loss_stops_before_any_update() {
    let data = tiny_task(1);
    let mut t = Trainer::new(tiny_train(1), tiny_spec(&data)).unwrap();
    let head = t.store.find("head.weight").expect("classifier weight");
    t.store.value_mut(head).data_mut()[0] = f32::NAN;
    let before = t.weight_values();
    match t.step(&data) {
        Err(Error::NonFinite { step: 0, loss }) => assert!(!loss.is_finite()),
        other => panic!("expected a non-finite error, got {:?}", other.map(|r| r.loss)),
    }
    assert_eq!(t.global_step, 0);
    assert_eq!(t.opt_w.step, 0);
    let after = t.weight_values();
    for (a, b) in before.iter().zip(&after) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn theta_on_val_only_changes_architecture_steps() {
    let data = tiny_task(2);
    let mut plain = Trainer::new(tiny_train(2), tiny_spec(&data)).unwrap();
    let mut cfg = tiny_train(2);
    cfg.theta_on_val = true;
    let mut held_out = Trainer::new(cfg, tiny_spec(&data)).unwrap();
    plain.step(&data).unwrap();
    held_out.step(&data).unwrap();
    assert_eq!(plain.weight_values(), held_out.weight_values());
    assert_eq!(plain.arch_values(), held_out.arch_values());
    plain.step(&data).unwrap();
    held_out.step(&data).unwrap();
    assert_eq!(plain.weight_values(), held_out.weight_values());
    assert_ne!(plain.arch_values(), held_out.arch_values());
}

fn train_epochs(seed: u64, epochs: usize) -> Trainer {
    let data = tiny_task(seed);
    let mut t = Trainer::new(tiny_train(seed), tiny_spec(&data)).unwrap();
    for _ in 0..epochs {
        let r = t.run_epoch(&data).unwrap();
        t.note_best(r.val_accuracy);
    }
    t
}

#[test]
fn reruns_produce_identical_history() {
    let a = train_epochs(5, 2);
    let b = train_epochs(5, 2);
    let csv = history_csv(&a.history);
    assert_eq!(csv, history_csv(&b.history));
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,train_loss,val_loss,val_accuracy,active_edge_fraction\n"));
    assert_ne!(csv, history_csv(&train_epochs(6, 2).history));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let full = train_epochs(4, 3);
    let data = tiny_task(4);
    let partial = train_epochs(4, 1);
    let mut resumed = Trainer::from_bytes(&partial.to_bytes().unwrap()).unwrap();
    assert_eq!(resumed.epoch, 1);
    for _ in 0..2 {
        let r = resumed.run_epoch(&data).unwrap();
        resumed.note_best(r.val_accuracy);
    }
    assert_eq!(resumed.to_bytes().unwrap(), full.to_bytes().unwrap());
    assert_eq!(history_csv(&resumed.history), history_csv(&full.history));
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    let t = train_epochs(7, 1);
    let bytes = t.to_bytes().unwrap();
    let back = Trainer::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.opt_w, t.opt_w);
    assert_eq!(back.opt_theta, t.opt_theta);
    assert_eq!(back.rng.snapshot(), t.rng.snapshot());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    t.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert!(Trainer::load(&dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = train_epochs(8, 1).to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(Trainer::from_bytes(&bad), Err(Error::Format(_))));
    assert!(Trainer::from_bytes(&bytes[..bytes.len() / 2]).is_err());
}
