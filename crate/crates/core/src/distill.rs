//! Feature losses and the teacher/student/transform training contract.
//!
//! The objective is `task + alpha * feat`, where `feat` compares a transformed
//! student feature against a frozen teacher feature.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::nn::TransformKind;
use crate::tensor::{Axes, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Squared error summed over all elements, divided by batch size.
    L2,
    /// KL between softmaxes over the flattened `C*H*W` feature of each sample.
    Kl,
    /// KL between per-channel spatial softmaxes, summed over channels.
    Cwd,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::L2, LossKind::Kl, LossKind::Cwd];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::L2 => "l2",
            LossKind::Kl => "kl",
            LossKind::Cwd => "cwd",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown loss '{s}', expected one of: l2, kl, cwd")))
    }
}

/// Where learnable transforms are attached.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformSide {
    StudentOnly,
    /// Also transforms the teacher tap with its own trainable MLP. Used only to
    /// demonstrate the collapse to a trivial zero-loss solution.
    BothSides,
}

impl TransformSide {
    pub fn name(self) -> &'static str {
        match self {
            TransformSide::StudentOnly => "student_only",
            TransformSide::BothSides => "both_sides",
        }
    }
}

impl fmt::Display for TransformSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformSide {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "student_only" => Ok(TransformSide::StudentOnly),
            "both_sides" => Ok(TransformSide::BothSides),
            other => Err(Error::Config(format!(
                "unknown transform side '{other}', expected one of: student_only, both_sides"
            ))),
        }
    }
}

/// Reference loss weights for full-scale settings.
pub const ALPHA_PRESETS: [(&str, f64); 5] = [
    ("classification", 7e-5),
    ("detection_two_stage", 5e-7),
    ("detection_one_stage", 2e-5),
    ("segmentation_homogeneous", 2e-5),
    ("segmentation_heterogeneous", 1e-5),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub transform: TransformKind,
    pub loss: LossKind,
    pub alpha: f64,
    /// Stage indices to distill, applied to both networks. Empty means each model's own tap.
    pub taps: Vec<usize>,
    pub side: TransformSide,
    /// Softmax temperature for the KL and CWD losses.
    pub temperature: f64,
    /// Hidden width of MLP / conv3x3 transforms; `None` means `max(c_in, c_out)`.
    pub hidden: Option<usize>,
    /// Learning-rate multiplier for transform parameters relative to the student's.
    pub transform_lr_scale: f64,
    /// Weight decay for transform parameters; `None` uses the student's.
    pub transform_weight_decay: Option<f64>,
    /// Start each student-side transform's output layer at zero, so the student receives
    /// no feature gradient until the transform has begun to fit the teacher.
    pub zero_init: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            transform: TransformKind::Mlp,
            loss: LossKind::L2,
            alpha: 1.0,
            taps: Vec::new(),
            side: TransformSide::StudentOnly,
            temperature: 4.0,
            hidden: None,
            transform_lr_scale: 1.0,
            transform_weight_decay: None,
            zero_init: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::domain(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::domain(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.transform_lr_scale > 0.0) || !self.transform_lr_scale.is_finite() {
            return Err(Error::domain(format!(
                "transform lr scale must be > 0, got {}",
                self.transform_lr_scale
            )));
        }
        if let Some(wd) = self
            .transform_weight_decay
            .filter(|wd| !(*wd >= 0.0) || !wd.is_finite())
        {
            return Err(Error::domain(format!("transform weight decay must be >= 0, got {wd}")));
        }
        if self.hidden == Some(0) {
            return Err(Error::domain("hidden width must be positive"));
        }
        Ok(())
    }
}

/// Scalar values of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub feat_loss: f64,
    pub total: f64,
}

fn check_pair(tape: &Tape, student: Var, teacher: Var, name: &str) -> Result<()> {
    if tape.shape(student) != tape.shape(teacher) {
        return Err(Error::shape(format!(
            "{name}: student feature {:?} vs teacher feature {:?}",
            tape.shape(student),
            tape.shape(teacher)
        )));
    }
    if tape.shape(student).len() != 4 {
        return Err(Error::shape(format!(
            "{name}: features must be N x C x H x W, got {:?}",
            tape.shape(student)
        )));
    }
    Ok(())
}

fn check_frozen_target(tape: &Tape, teacher: Var) -> Result<()> {
    if tape.requires_grad(teacher) {
        return Err(Error::contract(
            "teacher feature must not carry gradient (teacher is frozen)",
        ));
    }
    Ok(())
}

/// `sum((s - t)^2) / N`.
pub fn feat_l2_loss(tape: &mut Tape, student: Var, teacher: Var) -> Result<Var> {
    check_pair(tape, student, teacher, "feat_l2_loss")?;
    check_frozen_target(tape, teacher)?;
    l2(tape, student, teacher)
}

fn l2(tape: &mut Tape, student: Var, teacher: Var) -> Result<Var> {
    let n = tape.shape(student)[0];
    let diff = tape.sub(student, teacher)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq, Axes::All)?;
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// `T^2 / N * sum_rows KL(softmax(t/T) || softmax(s/T))` after reshaping both features
/// to `rows x len`.
fn row_kl(tape: &mut Tape, student: Var, teacher: Var, rows: usize, len: usize, temperature: f64) -> Result<Var> {
    let n = tape.shape(student)[0];
    let s = tape.reshape(student, &[rows, len])?;
    let t = tape.reshape(teacher, &[rows, len])?;
    let log_s = tape.log_softmax(s, 1, temperature)?;
    let log_t = tape.log_softmax(t, 1, temperature)?;
    let p_t = tape.softmax(t, 1, temperature)?;
    let gap = tape.sub(log_t, log_s)?;
    let weighted = tape.mul(p_t, gap)?;
    let total = tape.sum(weighted, Axes::All)?;
    Ok(tape.scale(total, temperature * temperature / n as f64))
}

fn kl(tape: &mut Tape, student: Var, teacher: Var, temperature: f64) -> Result<Var> {
    let shape = tape.shape(student).to_vec();
    let len = shape[1..].iter().product();
    row_kl(tape, student, teacher, shape[0], len, temperature)
}

fn cwd(tape: &mut Tape, student: Var, teacher: Var, temperature: f64) -> Result<Var> {
    let shape = tape.shape(student).to_vec();
    row_kl(
        tape,
        student,
        teacher,
        shape[0] * shape[1],
        shape[2] * shape[3],
        temperature,
    )
}

/// KL(teacher || student) of softmaxes over each sample's flattened feature, averaged over
/// the batch and scaled by `T^2`.
pub fn feat_kl_loss(tape: &mut Tape, student: Var, teacher: Var, temperature: f64) -> Result<Var> {
    check_pair(tape, student, teacher, "feat_kl_loss")?;
    check_frozen_target(tape, teacher)?;
    kl(tape, student, teacher, temperature)
}

/// Channel-wise distillation: KL(teacher || student) of each channel's spatial softmax,
/// summed over channels, averaged over the batch, scaled by `T^2`.
pub fn feat_cwd_loss(tape: &mut Tape, student: Var, teacher: Var, temperature: f64) -> Result<Var> {
    check_pair(tape, student, teacher, "feat_cwd_loss")?;
    check_frozen_target(tape, teacher)?;
    cwd(tape, student, teacher, temperature)
}

/// Dispatches on `kind`. With `trainable_target` the teacher side may carry gradient
/// (both-sides transforms); otherwise the frozen-teacher contract is enforced.
pub fn feature_loss(
    tape: &mut Tape,
    kind: LossKind,
    student: Var,
    teacher: Var,
    temperature: f64,
    trainable_target: bool,
) -> Result<Var> {
    check_pair(tape, student, teacher, kind.name())?;
    if !trainable_target {
        check_frozen_target(tape, teacher)?;
    }
    match kind {
        LossKind::L2 => l2(tape, student, teacher),
        LossKind::Kl => kl(tape, student, teacher, temperature),
        LossKind::Cwd => cwd(tape, student, teacher, temperature),
    }
}

/// `task + alpha * feat`; the returned var is the backward root.
pub fn total_loss(tape: &mut Tape, task: Var, feat: Var, alpha: f64) -> Result<(Var, LossBreakdown)> {
    let weighted = tape.scale(feat, alpha);
    let total = tape.add(task, weighted)?;
    let breakdown = LossBreakdown {
        task_loss: tape.value(task).item()?,
        feat_loss: tape.value(feat).item()?,
        total: tape.value(total).item()?,
    };
    Ok((total, breakdown))
}

/// Tap activations of a frozen teacher, detached from any tape.
pub fn teacher_forward_frozen(teacher: &Model, x: &Tensor, taps: &[usize]) -> Result<Vec<Tensor>> {
    if teacher.params.any_trainable() {
        return Err(Error::contract(
            "teacher has trainable parameters; freeze it before distillation",
        ));
    }
    Ok(teacher.infer(x, taps)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ModelSpec, Task};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(s: &Tensor, t: &Tensor) -> (Tape, Var, Var) {
        let mut tape = Tape::new();
        let sv = tape.variable(s.clone());
        let tv = tape.constant(t.clone());
        (tape, sv, tv)
    }

    fn eval(kind: LossKind, s: &Tensor, t: &Tensor, temp: f64) -> f64 {
        let (mut tape, sv, tv) = pair(s, t);
        let l = feature_loss(&mut tape, kind, sv, tv, temp, false).unwrap();
        tape.value(l).item().unwrap()
    }

    fn two_bin_kl() -> f64 {
        // KL([0.25, 0.75] || [0.5, 0.5])
        0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln()
    }

    #[test]
    fn l2_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        assert_eq!(eval(LossKind::L2, &f, &f, 1.0), 0.0);
        let t = Tensor::zeros(&[2, 1, 2, 2]);
        let s = Tensor::ones(&[2, 1, 2, 2]);
        assert_eq!(eval(LossKind::L2, &s, &t, 1.0), 4.0);
    }

    #[test]
    fn l2_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Tensor::randn(&[3, 2, 3, 2], 1.0, &mut rng);
        let t = Tensor::randn(&[3, 2, 3, 2], 1.0, &mut rng);
        let mut want = 0.0;
        for n in 0..3 {
            for i in 0..12 {
                let d = s.data()[n * 12 + i] - t.data()[n * 12 + i];
                want += d * d;
            }
        }
        want /= 3.0;
        assert!((eval(LossKind::L2, &s, &t, 1.0) - want).abs() < 1e-10);
    }

    #[test]
    fn l2_rejects_trainable_target_and_shape_mismatch() {
        let mut tape = Tape::new();
        let s = tape.variable(Tensor::zeros(&[1, 1, 2, 2]));
        let t = tape.variable(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(feat_l2_loss(&mut tape, s, t), Err(Error::Contract(_))));
        let u = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(feat_l2_loss(&mut tape, s, u), Err(Error::Shape(_))));
    }

    #[test]
    fn kl_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        assert!(eval(LossKind::Kl, &f, &f, 4.0).abs() < 1e-15);
        let a = Tensor::full(&[1, 2, 2, 2], 0.3);
        let b = Tensor::full(&[1, 2, 2, 2], -5.0);
        assert!(eval(LossKind::Kl, &a, &b, 1.0).abs() < 1e-15);
        let t = Tensor::new(&[1, 2, 1, 1], vec![0.0, 3f64.ln()]).unwrap();
        let s = Tensor::zeros(&[1, 2, 1, 1]);
        let got = eval(LossKind::Kl, &s, &t, 1.0);
        assert!((got - two_bin_kl()).abs() < 1e-12);
        assert!((got - 0.1308).abs() < 1e-4);
    }

    #[test]
    fn cwd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        assert!(eval(LossKind::Cwd, &t, &t, 4.0).abs() < 1e-15);
        // per-channel constant shift
        let mut s = t.clone();
        for n in 0..2 {
            for c in 0..3 {
                let shift = (n * 3 + c) as f64 - 2.0;
                s.data_mut()[(n * 3 + c) * 4..(n * 3 + c + 1) * 4]
                    .iter_mut()
                    .for_each(|v| *v += shift);
            }
        }
        assert!(eval(LossKind::Cwd, &s, &t, 4.0).abs() < 1e-12);
        let t = Tensor::new(&[1, 1, 1, 2], vec![0.0, 3f64.ln()]).unwrap();
        let s = Tensor::zeros(&[1, 1, 1, 2]);
        assert!((eval(LossKind::Cwd, &s, &t, 1.0) - two_bin_kl()).abs() < 1e-12);
    }

    #[test]
    fn kl_and_cwd_match_loop_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, c, hw) = (2, 3, 4);
        let s = Tensor::randn(&[n, c, 2, 2], 1.0, &mut rng);
        let t = Tensor::randn(&[n, c, 2, 2], 1.0, &mut rng);
        let temp = 2.0;
        let kl_rows = |rows: usize, len: usize| {
            let mut total = 0.0;
            for r in 0..rows {
                let srow: Vec<f64> = (0..len).map(|j| s.data()[r * len + j] / temp).collect();
                let trow: Vec<f64> = (0..len).map(|j| t.data()[r * len + j] / temp).collect();
                let zs: f64 = srow.iter().map(|v| v.exp()).sum();
                let zt: f64 = trow.iter().map(|v| v.exp()).sum();
                for j in 0..len {
                    let pt = trow[j].exp() / zt;
                    let ps = srow[j].exp() / zs;
                    total += pt * (pt / ps).ln();
                }
            }
            total * temp * temp / n as f64
        };
        assert!((eval(LossKind::Kl, &s, &t, temp) - kl_rows(n, c * hw)).abs() < 1e-10);
        assert!((eval(LossKind::Cwd, &s, &t, temp) - kl_rows(n * c, hw)).abs() < 1e-10);
    }

    #[test]
    fn total_loss_examples() {
        let mut tape = Tape::new();
        let task = tape.variable(Tensor::scalar(1.0));
        let feat = tape.variable(Tensor::scalar(2.0));
        let (_, b) = total_loss(&mut tape, task, feat, 7e-5).unwrap();
        assert!((b.total - 1.00014).abs() < 1e-12);
        let (_, b0) = total_loss(&mut tape, task, feat, 0.0).unwrap();
        assert_eq!(b0.total, b0.task_loss);
    }

    #[test]
    fn total_gradient_decomposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[1, 2, 2, 2], 1.0, &mut rng);
        let target = Tensor::randn(&[1, 2, 2, 2], 1.0, &mut rng);
        let alpha = 0.37;
        let grads = |which: u8| {
            let mut tape = Tape::new();
            let xv = tape.variable(x.clone());
            let tv = tape.constant(target.clone());
            let sq = tape.mul(xv, xv).unwrap();
            let task = tape.sum(sq, Axes::All).unwrap();
            let feat = feat_l2_loss(&mut tape, xv, tv).unwrap();
            let root = match which {
                0 => task,
                1 => feat,
                _ => total_loss(&mut tape, task, feat, alpha).unwrap().0,
            };
            tape.backward(root).unwrap();
            tape.grad(xv).unwrap().clone()
        };
        let (gt, gf, gall) = (grads(0), grads(1), grads(2));
        for i in 0..gall.len() {
            let want = gt.data()[i] + alpha * gf.data()[i];
            assert!((gall.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_teacher_contract() {
        let spec = ModelSpec {
            task: Task::Classify,
            in_channels: 1,
            stage_channels: vec![4, 8],
            num_classes: 4,
            tap: 1,
            seed: 3,
        };
        let mut teacher = build_model(&spec).unwrap();
        let x = Tensor::full(&[2, 1, 8, 8], 0.5);
        assert!(matches!(
            teacher_forward_frozen(&teacher, &x, &[1]),
            Err(Error::Contract(_))
        ));
        teacher.params.set_trainable(false);
        let taps = teacher_forward_frozen(&teacher, &x, &[1]).unwrap();
        let mut tape = Tape::new();
        let bound = teacher.params.bind(&mut tape);
        let xv = tape.constant(x);
        let (_, tap) = teacher.forward_with_tap(&mut tape, &bound, xv).unwrap();
        assert_eq!(tape.value(tap), &taps[0]);
    }

    #[test]
    fn parse_enums() {
        assert_eq!("cwd".parse::<LossKind>().unwrap(), LossKind::Cwd);
        assert!("huber".parse::<LossKind>().is_err());
        assert_eq!("both_sides".parse::<TransformSide>().unwrap(), TransformSide::BothSides);
    }
}
