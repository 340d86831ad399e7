use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lite3r::distill::{attn_kd_loss, run_qat, toy_task_loss, total_loss, train, Stage, ToyData, TrainConfig, HOOK_PATTERN};
use lite3r::model::{build_teacher, derive_student, HookRecord, ModelConfig};
use lite3r::tensor::{Sgd, Tape, Tensor};
use lite3r::Error;

fn small() -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 16,
        d_in: 8,
        d_out: 8,
        seq_len: 16,
        mlp_hidden: 32,
    }
}

fn small_train() -> TrainConfig {
    TrainConfig {
        train_samples: 16,
        eval_samples: 4,
        ..Default::default()
    }
}

fn mse64(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.numel() as f64
}

#[test]
fn kd_loss_is_mean_of_module_mses() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[5, 3], 1.0, &mut rng)).collect();
    let s: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[5, 3], 1.0, &mut rng)).collect();
    let rec = |name: &str, v: &Tensor| HookRecord {
        module: name.into(),
        value: v.clone(),
        node: None,
    };
    let mut tape = Tape::new();
    let l = attn_kd_loss(&mut tape, &[rec("a", &t[0]), rec("b", &t[1])], &[rec("a", &s[0]), rec("b", &s[1])]).unwrap();
    let expected = (mse64(&s[0], &t[0]) + mse64(&s[1], &t[1])) / 2.0;
    assert!((tape.value(l).unwrap().item() as f64 - expected).abs() < 1e-6);
}

#[test]
fn teacher_records_receive_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let tv = tape.variable(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let sv = tape.variable(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let teacher = HookRecord {
        module: "m".into(),
        value: tape.value(tv).unwrap().clone(),
        node: Some(tv),
    };
    let student = HookRecord {
        module: "m".into(),
        value: tape.value(sv).unwrap().clone(),
        node: Some(sv),
    };
    let l = attn_kd_loss(&mut tape, &[teacher], &[student]).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.get(tv).is_none());
    assert!(g.get(sv).unwrap().max_abs() > 0.0);
}

#[test]
fn task_loss_matches_naive_mean_of_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y = Tensor::randn(&[2, 4, 3], 1.0, &mut rng);
    let out = Tensor::randn(&[8, 3], 1.0, &mut rng);
    let mut tape = Tape::new();
    let ov = tape.constant(out.clone());
    let l = toy_task_loss(&mut tape, ov, &y).unwrap();
    assert!((tape.value(l).unwrap().item() as f64 - mse64(&out, &y)).abs() < 1e-6);
}

/// Gradient of the joint objective w.r.t. each trainable group, for a given
/// combination of task and KD terms.
fn student_grads(gamma: Option<f32>, task_only: bool) -> Vec<Tensor> {
    let teacher = build_teacher(small(), 4).unwrap();
    let mut student = derive_student(&teacher, 0.5).unwrap();
    // Move w_o off zero so every branch contributes.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for id in student.params().iter().filter(|(_, g)| g.trainable).map(|(id, _)| id).collect::<Vec<_>>() {
        let shape = student.params().get(id).tensor.shape().to_vec();
        student.params_mut().get_mut(id).tensor = Tensor::randn(&shape, 0.1, &mut rng);
    }
    let mut t = teacher.clone();
    t.register_hooks(HOOK_PATTERN).unwrap();
    student.register_hooks(HOOK_PATTERN).unwrap();
    let x = Tensor::randn(&[2, 16, 8], 1.0, &mut rng);
    let (y, trec) = t.predict_with_records(&x).unwrap();

    let mut tape = Tape::new();
    let pv = student.params().bind(&mut tape);
    let out = student.forward(&mut tape, &pv, &x).unwrap();
    let task = toy_task_loss(&mut tape, out.output, &y).unwrap();
    let kd = attn_kd_loss(&mut tape, &trec, &out.records).unwrap();
    let loss = match (gamma, task_only) {
        (Some(g), _) => total_loss(&mut tape, task, kd, g).unwrap(),
        (None, true) => task,
        (None, false) => kd,
    };
    let grads = pv.collect(&tape.backward(loss).unwrap());
    grads.into_iter().flatten().collect()
}

#[test]
fn joint_gradient_is_linear_in_gamma() {
    let gamma = 0.3;
    let total = student_grads(Some(gamma), false);
    let task = student_grads(None, true);
    let kd = student_grads(None, false);
    assert_eq!(total.len(), 2);
    for ((t, a), b) in total.iter().zip(&task).zip(&kd) {
        let combined = a.zip_map(b, |a, b| a + gamma * b);
        for (x, y) in t.data().iter().zip(combined.data()) {
            assert!((x - y).abs() <= 1e-5 * y.abs().max(1e-3), "{x} vs {y}");
        }
    }
}

#[test]
fn one_step_moves_w_o_and_nothing_else() {
    let teacher = build_teacher(small(), 6).unwrap();
    let mut student = derive_student(&teacher, 0.25).unwrap();
    let before = student.params().clone();
    let cfg = TrainConfig {
        train_samples: 4,
        eval_samples: 1,
        ..Default::default()
    };
    let data = ToyData::generate(&teacher, &cfg, 6).unwrap();
    run_qat(&teacher, &mut student, &data, &cfg).unwrap();
    let mut moved = 0;
    for ((_, a), (_, b)) in before.iter().zip(student.params().iter()) {
        if a.trainable {
            moved += !a.tensor.bit_eq(&b.tensor) as usize;
        } else {
            assert!(a.tensor.bit_eq(&b.tensor), "{}", a.name);
        }
    }
    assert!(moved >= 1);
}

#[test]
fn frozen_params_survive_a_hundred_steps() {
    let teacher = build_teacher(small(), 7).unwrap();
    let mut student = derive_student(&teacher, 0.25).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sgd = Sgd::new(0.05);
    for _ in 0..100 {
        let mut tape = Tape::new();
        let pv = student.params().bind(&mut tape);
        let x = Tensor::randn(&[1, 16, 8], 1.0, &mut rng);
        let out = student.forward(&mut tape, &pv, &x).unwrap();
        let l = tape.mean(out.output).unwrap();
        let grads = pv.collect(&tape.backward(l).unwrap());
        sgd.step(student.params_mut(), &grads).unwrap();
    }
    for (_, g) in teacher.params().iter() {
        let s = student.params().by_name(&g.name).unwrap();
        assert!(s.tensor.bit_eq(&g.tensor), "{}", g.name);
    }
}

#[test]
fn pretrain_then_qat_logs_both_stages() {
    let cfg = TrainConfig {
        pretrain_epochs: 1,
        ..small_train()
    };
    let run = train(small(), &cfg, 8).unwrap();
    let stages: Vec<Stage> = run.log.evals.iter().map(|e| e.stage).collect();
    assert_eq!(stages, [Stage::Pretrain, Stage::Pretrain, Stage::Qat, Stage::Qat]);
    assert!(run.log.steps.windows(2).all(|w| w[1].step == w[0].step + 1));
    assert!(run.log.steps.iter().all(|s| s.total_loss.is_finite()));
    assert_eq!(run.log.timings.len(), 2);
}

#[test]
fn twenty_epoch_drift_is_recorded() {
    let cfg = TrainConfig {
        epochs_qat: 20,
        ..small_train()
    };
    let run = train(small(), &cfg, 9).unwrap();
    assert_eq!(run.log.evals.len(), 21);
    let e1 = run.log.evals[1].eval_mse;
    let e20 = run.log.evals[20].eval_mse;
    assert!(e1.is_finite() && e20.is_finite());
    eprintln!("eval MSE epoch 1 {e1:.6e}, epoch 20 {e20:.6e} ({})", if e20 < e1 { "improved" } else { "drifted up" });
}

#[test]
fn divergence_aborts_with_diagnostic() {
    let cfg = TrainConfig {
        lr: 1e30,
        lr_qat_divisor: 1.0,
        epochs_qat: 3,
        ..small_train()
    };
    match train(small(), &cfg, 10) {
        Err(Error::Diverged { step, detail }) => assert!(!detail.is_empty() && step < 20),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.log.steps.len())),
    }
}
