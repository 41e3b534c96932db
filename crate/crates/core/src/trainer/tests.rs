use super::*;
use crate::synth::{gen_task, TaskKind, TaskParams};

fn task() -> TaskParams {
    TaskParams {
        kind: TaskKind::BlockReorder,
        tokens: 4,
        ..TaskParams::default()
    }
}

fn arch() -> ArchConfig {
    ArchConfig {
        d_model: 16,
        ..ArchConfig::for_task(&task())
    }
}

fn data() -> Vec<Utterance> {
    gen_task(&task(), 120, 5).unwrap()
}

fn cfg(stage: u8, steps: usize) -> TrainConfig {
    TrainConfig {
        stage,
        steps,
        batch_size: 4,
        lr: 3e-3,
        warmup_steps: 10,
        eval_samples: 8,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn stage1(steps: usize) -> Checkpoint {
    train_stage1(&arch(), &cfg(1, steps), &data()).unwrap()
}

#[test]
fn epochs_visit_every_index_once() {
    let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(10, 2, 3, s)).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
    assert_ne!(batch_indices(10, 10, 3, 0), batch_indices(10, 10, 3, 1));
}

#[test]
fn teacher_forcing_tags_and_labels() {
    let a = arch();
    let u = &data()[0];
    let (input, labels) = teacher_forcing(&a, u, false);
    assert_eq!(input[0], TGT_TAG);
    assert_eq!(input.len(), labels.len());
    assert_eq!(&input[1..], &labels[..labels.len() - 1]);
    assert_eq!(*labels.last().unwrap(), EOS);
    let (input, _) = teacher_forcing(&a, u, true);
    assert_eq!(input[0], SRC_TAG);
    assert_eq!(input[1], a.src_id(u.src_tokens[0]));
}

#[test]
fn stage1_is_deterministic_and_learns() {
    let a = stage1(40);
    let b = stage1(40);
    assert_eq!(a, b);
    let first = a.log[..5].iter().map(|r| r.loss).sum::<f64>();
    let last = a.log[35..].iter().map(|r| r.loss).sum::<f64>();
    assert!(last < first, "{first} -> {last}");
    assert_eq!(a.stage(), Some(1));
    assert_eq!(a.evals.last().unwrap().metric, "dev_ce");
}

#[test]
fn zero_asr_weight_never_samples_transcription() {
    let c = TrainConfig {
        asr_weight: 0.0,
        ..cfg(1, 10)
    };
    let ck = train_stage1(&arch(), &c, &data()).unwrap();
    assert_eq!(ck.stats.transcription_samples, 0);
    assert_eq!(ck.stats.translation_samples, 40);
    let mixed = stage1(10);
    assert!(mixed.stats.transcription_samples > 0);
}

#[test]
fn stage2_with_p_full_one_matches_continued_stage1() {
    let base = stage1(10);
    let c2 = TrainConfig {
        p_full: 1.0,
        ..cfg(2, 8)
    };
    let s2 = train_stage2(&base, &c2, &data()).unwrap();
    let s1 = resume_stage1(&base, &cfg(1, 8), &data()).unwrap();
    let l2: Vec<f64> = s2.log.iter().map(|r| r.loss).collect();
    let l1: Vec<f64> = s1.log.iter().map(|r| r.loss).collect();
    assert_eq!(l1, l2);
    assert_eq!(s1.params, s2.params);
    assert_eq!(s2.stats.truncated_samples, 0);
}

#[test]
fn stage2_keeps_about_a_fifth_whole() {
    let base = stage1(2);
    let s2 = train_stage2(&base, &cfg(2, 100), &data()).unwrap();
    let n = (s2.stats.full_samples + s2.stats.truncated_samples) as f64;
    let frac = s2.stats.full_samples as f64 / n;
    // 400 draws with p = 0.2: sd = 0.02.
    assert!((frac - 0.2).abs() < 0.08, "{frac}");
    assert_eq!(s2.provenance.iter().map(|p| p.stage).collect::<Vec<_>>(), [1, 2]);
}

#[test]
fn stage_preconditions_are_enforced() {
    let s1 = stage1(2);
    assert!(train_stage2(&s1, &cfg(1, 2), &data()).is_err());
    let s2 = train_stage2(&s1, &cfg(2, 2), &data()).unwrap();
    assert!(train_stage2(&s2, &cfg(2, 2), &data()).is_err());
    let s3 = train_stage3_policy(&s2, &cfg(3, 2), &data()).unwrap();
    assert!(train_stage3_policy(&s3, &cfg(3, 2), &data()).is_err());
    assert!(train_stage3_policy(&s1, &cfg(3, 2), &data()).is_ok());
    assert_eq!(s3.provenance.iter().map(|p| p.stage).collect::<Vec<_>>(), [1, 2, 3]);
    let empty: Vec<Utterance> = Vec::new();
    assert!(train_stage1(&arch(), &cfg(1, 2), &empty).is_err());
}

#[test]
fn stage3_freezes_the_base() {
    let s1 = stage1(5);
    let s3 = train_stage3_policy(&s1, &cfg(3, 100), &data()).unwrap();
    let start = s1.params.policy_start;
    assert_eq!(&s1.params.tensors[..start], &s3.params.tensors[..start]);
    assert_ne!(&s1.params.tensors[start..], &s3.params.tensors[start..]);
    assert!(s3.log.iter().all(|r| r.l_m >= 0.0 && r.l_r >= 0.0));
}

#[test]
fn no_mono_switch_zeroes_the_hinge() {
    let s1 = stage1(5);
    let c = TrainConfig {
        policy_loss: PolicyLossKind::ReinaNoMono,
        loss: LossConfig {
            epsilon: 0.0,
            ..LossConfig::default()
        },
        ..cfg(3, 20)
    };
    let s3 = train_stage3_policy(&s1, &c, &data()).unwrap();
    assert!(s3.log.iter().all(|r| r.l_m == 0.0));
    for r in &s3.log {
        assert!((r.loss - (r.l_p + c.loss.lambda * r.l_r)).abs() < 1e-12);
    }
}

#[test]
fn divergence_baseline_trains() {
    let s1 = stage1(5);
    let c = TrainConfig {
        policy_loss: PolicyLossKind::Divergence,
        ..cfg(3, 20)
    };
    let s3 = train_stage3_policy(&s1, &c, &data()).unwrap();
    assert!(s3.log.iter().all(|r| r.loss >= 0.0 && r.l_p == 0.0));
    assert_eq!(s3.provenance.last().unwrap().policy_loss, Some(PolicyLossKind::Divergence));
}

#[test]
fn clipping_is_logged() {
    let c = TrainConfig {
        clip_norm: 1e-6,
        ..cfg(1, 5)
    };
    let ck = train_stage1(&arch(), &c, &data()).unwrap();
    assert_eq!(ck.stats.clipped_steps, 5);
    assert!(ck.log.iter().all(|r| r.clipped && r.grad_norm > 1e-6));
    let plain = stage1(5);
    assert!(plain.log.iter().all(|r| r.clipped == (r.grad_norm > 10.0)));
}

#[test]
fn stage3_schedule_warms_up_then_decays() {
    let c = TrainConfig {
        lr: 1.0,
        warmup_steps: 4,
        ..cfg(3, 1)
    };
    assert_eq!(c.lr_at(0), 0.25);
    assert_eq!(c.lr_at(3), 1.0);
    assert_eq!(c.lr_at(15), 0.5);
    assert_eq!(cfg(1, 1).lr_at(123), 3e-3);
}

#[test]
fn bad_configs_are_rejected() {
    for c in [
        TrainConfig { stage: 0, ..cfg(1, 1) },
        TrainConfig { batch_size: 0, ..cfg(1, 1) },
        TrainConfig { lr: 0.0, ..cfg(1, 1) },
        TrainConfig { p_full: 1.5, ..cfg(1, 1) },
        TrainConfig { asr_weight: -1.0, ..cfg(1, 1) },
    ] {
        assert!(c.validate().is_err(), "{c:?}");
    }
}

#[test]
fn checkpoint_validation_catches_version_and_shape() {
    let mut ck = stage1(1);
    assert!(ck.validate().is_ok());
    ck.version = 99;
    assert!(ck.validate().is_err());
    ck.version = CHECKPOINT_VERSION;
    ck.params.tensors[0] = crate::autodiff::Tensor::zeros(&[1, 1]);
    assert!(ck.validate().is_err());
}
