//! End-to-end training invariants on small synthetic problems.

use featkd::data::{gen_dataset, Dataset, DatasetSpec};
use featkd::distill::{DistillConfig, LossKind};
use featkd::models::{build_model, Model, ModelSpec, Task};
use featkd::nn::TransformKind;
use featkd::train::{eval_metrics, pretrain, train_run, Distiller, TrainConfig};

struct Setup {
    train: Dataset,
    val: Dataset,
    teacher: Model,
    student: ModelSpec,
}

fn setup(task: Task) -> Setup {
    let (train, val) = gen_dataset(&DatasetSpec {
        task,
        num_train: 96,
        num_val: 48,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let classes = train.num_classes();
    let spec = |stages: Vec<usize>, seed| ModelSpec {
        task,
        in_channels: 1,
        tap: stages.len() - 1,
        stage_channels: stages,
        num_classes: classes,
        seed,
    };
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 16,
        lr_decay_epochs: vec![],
        ..Default::default()
    };
    let (teacher, _) = pretrain(&spec(vec![8, 12], 10), &train, &val, &cfg).unwrap();
    Setup {
        train,
        val,
        teacher,
        student: spec(vec![4, 8], 20),
    }
}

fn cfg(epochs: usize, dc: Option<DistillConfig>) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        base_lr: 0.02,
        lr_decay_epochs: vec![],
        distill: dc,
        ..Default::default()
    }
}

#[test]
fn feature_loss_mostly_decreases_with_an_mlp_transform() {
    let s = setup(Task::Classify);
    let dc = DistillConfig {
        alpha: 1e-2,
        ..Default::default()
    };
    let mut d = Distiller::new(s.teacher.clone(), &s.student, &dc, 1).unwrap();
    let mut student = build_model(&s.student).unwrap();
    let r = train_run(&mut student, Some(&mut d), &s.train, &s.val, &cfg(21, Some(dc))).unwrap();
    let feats: Vec<f64> = r.records.iter().map(|e| e.feat_loss).collect();
    let down = feats.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down * 10 >= 9 * (feats.len() - 1), "feat_loss curve {feats:?}");
}

#[test]
fn teacher_is_untouched_and_transform_is_trained() {
    let s = setup(Task::Segment);
    for loss in LossKind::ALL {
        let dc = DistillConfig {
            alpha: 1e-2,
            loss,
            transform: TransformKind::Mlp,
            ..Default::default()
        };
        let mut d = Distiller::new(s.teacher.clone(), &s.student, &dc, 2).unwrap();
        let before = d.transforms[0].params.clone();
        let mut student = build_model(&s.student).unwrap();
        train_run(&mut student, Some(&mut d), &s.train, &s.val, &cfg(2, Some(dc))).unwrap();
        for (a, b) in d.teacher.params.iter().zip(s.teacher.params.iter()) {
            assert_eq!(a.value, b.value, "teacher parameter {} moved", a.name);
            assert!(a.grad.is_none());
        }
        let moved = d.transforms[0]
            .params
            .iter()
            .zip(before.iter())
            .all(|(a, b)| a.value != b.value);
        assert!(moved, "{loss}: every transform parameter should receive updates");
    }
}

#[test]
fn evaluation_ignores_the_transform() {
    let s = setup(Task::Classify);
    let dc = DistillConfig {
        alpha: 1e-2,
        ..Default::default()
    };
    let mut d = Distiller::new(s.teacher.clone(), &s.student, &dc, 1).unwrap();
    let mut student = build_model(&s.student).unwrap();
    let r = train_run(&mut student, Some(&mut d), &s.train, &s.val, &cfg(2, Some(dc))).unwrap();
    assert_eq!(eval_metrics(&student, &s.val).unwrap(), r.final_metric);
    for p in d.transforms[0].params.iter_mut() {
        p.value = p.value.map(|_| f64::NAN);
    }
    assert_eq!(eval_metrics(&student, &s.val).unwrap(), r.final_metric);
}

#[test]
fn zero_alpha_reproduces_the_baseline_bit_exactly() {
    for task in [Task::Classify, Task::Segment] {
        let s = setup(task);
        let mut base = build_model(&s.student).unwrap();
        let b = train_run(&mut base, None, &s.train, &s.val, &cfg(3, None)).unwrap();
        let dc = DistillConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let mut d = Distiller::new(s.teacher.clone(), &s.student, &dc, 5).unwrap();
        let mut student = build_model(&s.student).unwrap();
        let r = train_run(&mut student, Some(&mut d), &s.train, &s.val, &cfg(3, Some(dc))).unwrap();
        for (x, y) in b.records.iter().zip(&r.records) {
            assert_eq!(x.task_loss.to_bits(), y.task_loss.to_bits());
            assert_eq!(x.val_metric.to_bits(), y.val_metric.to_bits());
        }
        for (p, q) in base.params.iter().zip(student.params.iter()) {
            assert_eq!(p.value, q.value);
        }
    }
}

#[test]
fn reruns_are_identical() {
    let s = setup(Task::Segment);
    let dc = DistillConfig {
        alpha: 1e-3,
        loss: LossKind::Cwd,
        ..Default::default()
    };
    let run = || {
        let mut d = Distiller::new(s.teacher.clone(), &s.student, &dc, 9).unwrap();
        let mut student = build_model(&s.student).unwrap();
        train_run(&mut student, Some(&mut d), &s.train, &s.val, &cfg(2, Some(dc.clone()))).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}
