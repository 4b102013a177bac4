//! Explanatory diagnostics: feature distances to the teacher, the both-sides
//! collapse, and channel attention profiles.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distill::TransformSide;
use crate::error::{Error, Result};
use crate::models::{build_model, Model, ModelSpec};
use crate::nn::{TransformKind, TransformModule};
use crate::tensor::Tensor;
use crate::train::{train_run, Distiller, ExperimentReport, TrainConfig};

const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    /// Raw student tap vs teacher tap; `None` when the channel counts differ.
    pub before: Option<f64>,
    /// Transformed student tap vs teacher tap.
    pub after: f64,
    pub transform_kind: TransformKind,
}

/// Root-mean-square difference of each sample pair, averaged over samples.
fn mean_rms(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.shape()[0];
    let per = a.len() / n;
    (0..n)
        .map(|i| {
            let sq: f64 = a.data()[i * per..(i + 1) * per]
                .iter()
                .zip(&b.data()[i * per..(i + 1) * per])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            (sq / per as f64).sqrt()
        })
        .sum()
}

/// Per-sample RMS distance of the student tap (raw and transformed) from the teacher tap,
/// averaged over `val`. Uses each model's spec tap.
pub fn l2_distance_report(
    teacher: &Model,
    student: &Model,
    transform: &TransformModule,
    val: &Dataset,
) -> Result<DistanceReport> {
    if val.is_empty() {
        return Err(Error::domain("cannot measure distances on an empty dataset"));
    }
    let comparable = student.spec.tap_channels() == teacher.spec.tap_channels();
    let (mut before, mut after) = (0.0, 0.0);
    let all: Vec<usize> = (0..val.len()).collect();
    for chunk in all.chunks(CHUNK) {
        let (x, _) = val.batch(chunk)?;
        let (_, t) = teacher.infer(&x, &[teacher.spec.tap])?;
        let (_, s) = student.infer(&x, &[student.spec.tap])?;
        let moved = transform.apply(&s[0])?;
        if moved.shape() != t[0].shape() {
            return Err(Error::shape(format!(
                "transformed student tap {:?} vs teacher tap {:?}",
                moved.shape(),
                t[0].shape()
            )));
        }
        if comparable && s[0].shape() == t[0].shape() {
            before += mean_rms(&s[0], &t[0]);
        }
        after += mean_rms(&moved, &t[0]);
    }
    let n = val.len() as f64;
    Ok(DistanceReport {
        before: comparable.then_some(before / n),
        after: after / n,
        transform_kind: transform.kind,
    })
}

/// Paired runs differing only in which side carries a learnable transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub student_only: ExperimentReport,
    pub both_sides: ExperimentReport,
}

impl CollapseReport {
    pub fn feat_curves(&self) -> (Vec<f64>, Vec<f64>) {
        let curve = |r: &ExperimentReport| r.records.iter().map(|e| e.feat_loss).collect();
        (curve(&self.student_only), curve(&self.both_sides))
    }
}

/// Trains two students from the same seed against a frozen teacher: one with the usual
/// student-side transform, one with an extra trainable transform on the teacher tap.
pub fn collapse_experiment(
    teacher: &Model,
    student: &ModelSpec,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<CollapseReport> {
    let base = cfg
        .distill
        .as_ref()
        .ok_or_else(|| Error::contract("collapse experiment needs a distillation config"))?;
    let run = |side: TransformSide| -> Result<ExperimentReport> {
        let mut dc = base.clone();
        dc.side = side;
        let mut d = Distiller::new(teacher.clone(), student, &dc, cfg.seed)?;
        let mut model = build_model(student)?;
        let c = TrainConfig {
            distill: Some(dc),
            ..cfg.clone()
        };
        train_run(&mut model, Some(&mut d), train, val, &c)
    };
    Ok(CollapseReport {
        student_only: run(TransformSide::StudentOnly)?,
        both_sides: run(TransformSide::BothSides)?,
    })
}

/// Mean absolute activation of each channel over `N, H, W`, softmaxed over channels at
/// `temperature`.
pub fn channel_attention_profile(features: &Tensor, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::domain(format!("temperature must be > 0, got {temperature}")));
    }
    let (n, c, h, w) = features.dims4()?;
    let hw = h * w;
    let means: Vec<f64> = (0..c)
        .map(|ch| {
            let total: f64 = (0..n)
                .flat_map(|i| &features.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw])
                .map(|v| v.abs())
                .sum();
            total / (n * hw) as f64
        })
        .collect();
    let top = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = means.iter().map(|m| ((m - top) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    pub teacher: Vec<f64>,
    /// Raw student tap; its length may differ from the teacher's.
    pub student: Vec<f64>,
    pub transformed: Vec<f64>,
}

/// Channel profiles of the teacher tap, the raw student tap, and the transformed student
/// tap over the whole of `val`.
pub fn attention_profiles(
    teacher: &Model,
    student: &Model,
    transform: &TransformModule,
    val: &Dataset,
    temperature: f64,
) -> Result<AttentionProfile> {
    let all: Vec<usize> = (0..val.len()).collect();
    let (x, _) = val.batch(&all)?;
    let (_, t) = teacher.infer(&x, &[teacher.spec.tap])?;
    let (_, s) = student.infer(&x, &[student.spec.tap])?;
    let moved = transform.apply(&s[0])?;
    Ok(AttentionProfile {
        teacher: channel_attention_profile(&t[0], temperature)?,
        student: channel_attention_profile(&s[0], temperature)?,
        transformed: channel_attention_profile(&moved, temperature)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, DatasetSpec};
    use crate::distill::{feature_loss, DistillConfig, LossKind};
    use crate::models::Task;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Model, ModelSpec, Dataset, Dataset) {
        let (train, val) = gen_dataset(&DatasetSpec {
            task: Task::Segment,
            image_size: 8,
            num_train: 16,
            num_val: 6,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let spec = ModelSpec {
            task: Task::Segment,
            in_channels: 1,
            stage_channels: vec![4, 6],
            num_classes: 3,
            tap: 1,
            seed: 8,
        };
        let mut t = build_model(&ModelSpec {
            seed: 80,
            ..spec.clone()
        })
        .unwrap();
        t.params.set_trainable(false);
        (t, spec, train, val)
    }

    #[test]
    fn identical_models_have_zero_before_distance() {
        let (t, spec, _, val) = setup();
        let s = build_model(&ModelSpec { seed: 80, ..spec }).unwrap();
        let id = TransformModule::new(TransformKind::Identity, 6, 6, None, 0).unwrap();
        let r = l2_distance_report(&t, &s, &id, &val).unwrap();
        assert_eq!(r.before, Some(0.0));
        assert_eq!(r.after, 0.0);
    }

    #[test]
    fn identity_after_equals_before() {
        let (t, spec, _, val) = setup();
        let s = build_model(&spec).unwrap();
        let id = TransformModule::new(TransformKind::Identity, 6, 6, None, 0).unwrap();
        let r = l2_distance_report(&t, &s, &id, &val).unwrap();
        assert!(r.after > 0.0);
        assert_eq!(r.before, Some(r.after));
    }

    #[test]
    fn heterogeneous_before_is_undefined() {
        let (t, mut spec, _, val) = setup();
        spec.stage_channels = vec![4, 3];
        let s = build_model(&spec).unwrap();
        let lin = TransformModule::new(TransformKind::Linear, 3, 6, None, 0).unwrap();
        let r = l2_distance_report(&t, &s, &lin, &val).unwrap();
        assert_eq!(r.before, None);
        assert!(r.after >= 0.0);
    }

    #[test]
    fn zero_initialised_both_sides_start_at_zero_loss() {
        let (t, spec, train, _) = setup();
        let dc = DistillConfig {
            side: TransformSide::BothSides,
            ..Default::default()
        };
        let mut d = Distiller::new(t, &spec, &dc, 3).unwrap();
        d.transforms[0].zero_output_layer();
        d.teacher_transforms[0].zero_output_layer();
        let s = build_model(&spec).unwrap();
        let (x, _) = train.batch(&[0, 1, 2]).unwrap();
        let (_, st) = s.infer(&x, &[1]).unwrap();
        let (_, tt) = d.teacher.infer(&x, &[1]).unwrap();
        let mut tape = Tape::new();
        let sv = tape.constant(d.transforms[0].apply(&st[0]).unwrap());
        let tv = tape.constant(d.teacher_transforms[0].apply(&tt[0]).unwrap());
        let l = feature_loss(&mut tape, LossKind::L2, sv, tv, 1.0, true).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn collapse_runs_are_deterministic() {
        let (t, spec, train, val) = setup();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr_decay_epochs: vec![],
            distill: Some(DistillConfig {
                alpha: 0.05,
                ..Default::default()
            }),
            ..Default::default()
        };
        let a = collapse_experiment(&t, &spec, &train, &val, &cfg).unwrap();
        let b = collapse_experiment(&t, &spec, &train, &val, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.feat_curves().0.len(), 2);
        assert_eq!(
            a.both_sides.config.distill.as_ref().unwrap().side,
            TransformSide::BothSides
        );
    }

    #[test]
    fn attention_profile_examples() {
        let equal = Tensor::full(&[2, 3, 2, 2], -0.7);
        let p = channel_attention_profile(&equal, 1.0).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let mut dominant = Tensor::zeros(&[1, 3, 2, 2]);
        dominant.data_mut()[4..8].fill(2.0);
        let p = channel_attention_profile(&dominant, 1e-3).unwrap();
        assert!((p[1] - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = Tensor::randn(&[1, 4, 2, 2], 1.0, &mut rng);
        let t = 0.5;
        let means: Vec<f64> = (0..4)
            .map(|c| f.data()[c * 4..c * 4 + 4].iter().map(|v| v.abs()).sum::<f64>() / 4.0)
            .collect();
        let z: f64 = means.iter().map(|m| (m / t).exp()).sum();
        let got = channel_attention_profile(&f, t).unwrap();
        for c in 0..4 {
            assert!((got[c] - (means[c] / t).exp() / z).abs() < 1e-10);
        }
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(channel_attention_profile(&f, 0.0).is_err());
    }
}
