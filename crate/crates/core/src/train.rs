//! SGD with step decay, the (optionally distilled) training loop, metrics and checkpoints.

use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::distill::{feature_loss, total_loss, DistillConfig, TransformSide};
use crate::error::{Error, Result};
use crate::models::{build_model, Model, ModelSpec, Task};
use crate::nn::{derive_seed, ParamSet, TransformModule};
use crate::tensor::{Tape, Tensor, Var};

/// Rows per gradient-free evaluation chunk.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per parameter, grouped by parameter set; allocated on first step.
    pub velocity: Vec<Vec<Tensor>>,
    /// Learning-rate multiplier per parameter set; missing entries mean 1.
    pub lr_scales: Vec<f64>,
    /// Weight decay per parameter set; missing entries use `weight_decay`.
    pub set_weight_decays: Vec<f64>,
}

impl OptimizerState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
            lr_scales: Vec::new(),
            set_weight_decays: Vec::new(),
        }
    }
}

/// `v <- momentum*v + g + wd*p; p <- p - lr*v`, then clears gradients. Frozen parameters
/// are skipped.
pub fn sgd_step(sets: &mut [&mut ParamSet], opt: &mut OptimizerState) -> Result<()> {
    if opt.velocity.len() < sets.len() {
        opt.velocity.resize(sets.len(), Vec::new());
    }
    for (k, (set, vel)) in sets.iter_mut().zip(&mut opt.velocity).enumerate() {
        let lr = opt.lr * opt.lr_scales.get(k).copied().unwrap_or(1.0);
        let wd = opt.set_weight_decays.get(k).copied().unwrap_or(opt.weight_decay);
        if vel.is_empty() {
            *vel = set.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        if vel.len() != set.len() {
            return Err(Error::contract("optimizer state does not match parameter set"));
        }
        for (p, v) in set.iter_mut().zip(vel.iter_mut()) {
            if !p.trainable {
                continue;
            }
            let g = p
                .grad
                .take()
                .ok_or_else(|| Error::contract(format!("trainable parameter '{}' has no gradient", p.name)))?;
            let (pv, vv) = (p.value.data_mut(), v.data_mut());
            for ((w, vel), g) in pv.iter_mut().zip(vv.iter_mut()).zip(g.data()) {
                *vel = opt.momentum * *vel + g + wd * *w;
                *w -= lr * *vel;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub distill: Option<DistillConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_epochs: vec![15, 25],
            lr_decay_factor: 0.1,
            seed: 0,
            distill: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::domain("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::domain("batch_size must be >= 1"));
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::domain(format!(
                "need base_lr > 0, 0 <= momentum < 1, weight_decay >= 0; got {}, {}, {}",
                self.base_lr, self.momentum, self.weight_decay
            )));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::domain("lr_decay_factor must be > 0"));
        }
        let decay = &self.lr_decay_epochs;
        if decay.windows(2).any(|w| w[0] >= w[1]) || decay.last().is_some_and(|&e| e >= self.epochs) {
            return Err(Error::domain(format!(
                "lr_decay_epochs must be strictly increasing and < epochs ({}), got {decay:?}",
                self.epochs
            )));
        }
        if let Some(d) = &self.distill {
            d.validate()?;
        }
        Ok(())
    }
}

/// Step schedule: `base_lr * factor^(#decay epochs <= epoch)`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::domain(format!(
            "epoch {epoch} out of range for {} epochs",
            cfg.epochs
        )));
    }
    let passed = cfg.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    Ok(cfg.base_lr * cfg.lr_decay_factor.powi(passed as i32))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub task_loss: f64,
    /// Unweighted feature loss, averaged over batches; zero without distillation.
    pub feat_loss: f64,
    pub val_metric: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub records: Vec<EpochRecord>,
    pub final_metric: f64,
    pub config: TrainConfig,
    /// Excluded from serialization so reports of equal runs are byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl PartialEq for ExperimentReport {
    /// Compares everything except wall time.
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
            && self.final_metric.to_bits() == other.final_metric.to_bits()
            && self.config == other.config
    }
}

/// A frozen teacher plus the learnable transforms that map student taps onto its taps.
#[derive(Clone, Debug)]
pub struct Distiller {
    pub teacher: Model,
    /// `(student stage, teacher stage)` per distilled tap.
    pub taps: Vec<(usize, usize)>,
    pub transforms: Vec<TransformModule>,
    /// Teacher-side transforms; non-empty only for [`TransformSide::BothSides`].
    pub teacher_transforms: Vec<TransformModule>,
}

impl Distiller {
    /// Freezes `teacher` and builds one transform per tap, sized from both specs.
    pub fn new(mut teacher: Model, student: &ModelSpec, cfg: &DistillConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        teacher.params.set_trainable(false);
        let taps: Vec<(usize, usize)> = if cfg.taps.is_empty() {
            vec![(student.tap, teacher.spec.tap)]
        } else {
            cfg.taps.iter().map(|&t| (t, t)).collect()
        };
        let mut transforms = Vec::new();
        let mut teacher_transforms = Vec::new();
        for (i, &(s, t)) in taps.iter().enumerate() {
            if s >= student.stage_channels.len() || t >= teacher.num_stages() {
                return Err(Error::shape(format!("tap {s}/{t} out of range")));
            }
            let (cs, ct) = (student.channels_at(s), teacher.spec.channels_at(t));
            let seed_i = derive_seed(seed, 0x7472_0000 + i as u64);
            transforms.push(TransformModule::new(cfg.transform, cs, ct, cfg.hidden, seed_i)?);
            if cfg.side == TransformSide::BothSides {
                let seed_t = derive_seed(seed, 0x7465_0000 + i as u64);
                teacher_transforms.push(TransformModule::new(cfg.transform, ct, ct, cfg.hidden, seed_t)?);
            }
        }
        // Teacher-side transforms keep their random start: zeroing both sides would sit
        // at the trivial zero-loss point from the first step.
        if cfg.zero_init {
            transforms.iter_mut().for_each(TransformModule::zero_output_layer);
        }
        Ok(Self {
            teacher,
            taps,
            transforms,
            teacher_transforms,
        })
    }

    fn teacher_stages(&self) -> Vec<usize> {
        self.taps.iter().map(|&(_, t)| t).collect()
    }

    fn student_stages(&self) -> Vec<usize> {
        self.taps.iter().map(|&(s, _)| s).collect()
    }
}

/// Teacher tap activations for every sample of `set`, per tap, each `1 x C x H x W`.
fn cache_teacher_taps(d: &Distiller, set: &Dataset) -> Result<Vec<Vec<Tensor>>> {
    let stages = d.teacher_stages();
    let mut per_tap: Vec<Vec<Tensor>> = vec![Vec::with_capacity(set.len()); stages.len()];
    let all: Vec<usize> = (0..set.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, _) = set.batch(chunk)?;
        let taps = crate::distill::teacher_forward_frozen(&d.teacher, &x, &stages)?;
        for (slot, tap) in per_tap.iter_mut().zip(taps) {
            let per = tap.len() / chunk.len();
            let mut shape = tap.shape().to_vec();
            shape[0] = 1;
            for j in 0..chunk.len() {
                slot.push(Tensor::new(&shape, tap.data()[j * per..(j + 1) * per].to_vec())?);
            }
        }
    }
    Ok(per_tap)
}

/// Trains `student` (and the distiller's transforms, when `cfg.distill` is set) and
/// evaluates on `val` after each epoch.
pub fn train_run(
    student: &mut Model,
    mut distiller: Option<&mut Distiller>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    let dcfg = cfg.distill.as_ref();
    if dcfg.is_some() && distiller.is_none() {
        return Err(Error::contract(
            "distillation configured but no teacher/transform supplied",
        ));
    }
    if dcfg.is_none() {
        distiller = None;
    }
    let cache = match distiller.as_deref() {
        Some(d) => cache_teacher_taps(d, train)?,
        None => Vec::new(),
    };
    let mut opt = OptimizerState::new(cfg.base_lr, cfg.momentum, cfg.weight_decay);
    if let (Some(d), Some(dc)) = (distiller.as_deref(), dcfg) {
        let n = d.transforms.len() + d.teacher_transforms.len();
        opt.lr_scales = std::iter::once(1.0)
            .chain(std::iter::repeat_n(dc.transform_lr_scale, n))
            .collect();
        if let Some(wd) = dc.transform_weight_decay {
            opt.set_weight_decays = std::iter::once(cfg.weight_decay)
                .chain(std::iter::repeat_n(wd, n))
                .collect();
        }
    }
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.lr = lr_at(cfg, epoch)?;
        let order = batches(train.len(), cfg.batch_size, epoch, derive_seed(cfg.seed, 0xba7c))?;
        let (mut task_sum, mut feat_sum) = (0.0, 0.0);
        for idx in &order {
            let (x, labels) = train.batch(idx)?;
            let mut tape = Tape::new();
            let sb = student.params.bind(&mut tape);
            let xv = tape.constant(x);
            let (root, task_v, feat_v) = match (distiller.as_deref_mut(), dcfg) {
                (Some(d), Some(dc)) => {
                    let fwd = student.forward_with_taps(&mut tape, &sb, xv, &d.student_stages())?;
                    let task = tape.cross_entropy(fwd.logits, &labels, None)?;
                    let tb: Vec<_> = d.transforms.iter().map(|t| t.params.bind(&mut tape)).collect();
                    let ttb: Vec<_> = d.teacher_transforms.iter().map(|t| t.params.bind(&mut tape)).collect();
                    let mut feat: Option<Var> = None;
                    for (i, &tap) in fwd.taps.iter().enumerate() {
                        let s = d.transforms[i].forward(&mut tape, &tb[i], tap)?;
                        let parts: Vec<&Tensor> = idx.iter().map(|&j| &cache[i][j]).collect();
                        let mut t = tape.constant(Tensor::stack(&parts)?);
                        if let Some(tt) = d.teacher_transforms.get(i) {
                            t = tt.forward(&mut tape, &ttb[i], t)?;
                        }
                        let both = dc.side == TransformSide::BothSides;
                        let l = feature_loss(&mut tape, dc.loss, s, t, dc.temperature, both)?;
                        feat = Some(match feat {
                            Some(acc) => tape.add(acc, l)?,
                            None => l,
                        });
                    }
                    let feat = feat.ok_or_else(|| Error::contract("no distillation taps"))?;
                    let (root, _) = total_loss(&mut tape, task, feat, dc.alpha)?;
                    tape.backward(root)?;
                    for (t, b) in d.transforms.iter_mut().zip(&tb) {
                        t.params.collect_grads(&tape, b);
                    }
                    for (t, b) in d.teacher_transforms.iter_mut().zip(&ttb) {
                        t.params.collect_grads(&tape, b);
                    }
                    (root, task, Some(feat))
                }
                _ => {
                    let (logits, _) = student.forward_with_tap(&mut tape, &sb, xv)?;
                    let task = tape.cross_entropy(logits, &labels, None)?;
                    tape.backward(task)?;
                    (task, task, None)
                }
            };
            let total = tape.value(root).item()?;
            if !total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("loss became {total}"),
                });
            }
            task_sum += tape.value(task_v).item()?;
            if let Some(f) = feat_v {
                feat_sum += tape.value(f).item()?;
            }
            student.params.collect_grads(&tape, &sb);
            let mut sets: Vec<&mut ParamSet> = vec![&mut student.params];
            if let Some(d) = distiller.as_deref_mut() {
                sets.extend(d.transforms.iter_mut().map(|t| &mut t.params));
                sets.extend(d.teacher_transforms.iter_mut().map(|t| &mut t.params));
            }
            sgd_step(&mut sets, &mut opt)?;
        }
        let n = order.len() as f64;
        records.push(EpochRecord {
            epoch,
            lr: opt.lr,
            task_loss: task_sum / n,
            feat_loss: feat_sum / n,
            val_metric: eval_metrics(student, val)?,
        });
    }
    let final_metric = records.last().map(|r| r.val_metric).unwrap_or(0.0);
    Ok(ExperimentReport {
        records,
        final_metric,
        config: cfg.clone(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Builds and trains a model from scratch without distillation, then freezes it.
pub fn pretrain(
    spec: &ModelSpec,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Model, ExperimentReport)> {
    let mut cfg = cfg.clone();
    cfg.distill = None;
    let mut model = build_model(spec)?;
    let report = train_run(&mut model, None, train, val, &cfg)?;
    model.params.set_trainable(false);
    Ok((model, report))
}

/// Index of the first maximum of `row`.
fn argmax(row: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Square confusion matrix, `counts[truth * k + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.k + pred] += 1;
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class is absent from truth and prediction.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.counts[c * self.k + c];
        let truth: u64 = self.counts[c * self.k..(c + 1) * self.k].iter().sum();
        let pred: u64 = (0..self.k).map(|t| self.counts[t * self.k + c]).sum();
        let union = truth + pred - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn mean_iou(&self) -> f64 {
        let ious: Vec<f64> = (0..self.k).filter_map(|c| self.iou(c)).collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }
}

/// Top-1 accuracy (classify) or mIoU over the whole set (segment), as a fraction.
/// Never touches distillation transforms.
pub fn eval_metrics(model: &Model, val: &Dataset) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::domain("cannot evaluate on an empty dataset"));
    }
    let k = model.spec.num_classes;
    let mut correct = 0usize;
    let mut confusion = Confusion::new(k);
    let all: Vec<usize> = (0..val.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, labels) = val.batch(chunk)?;
        let (logits, _) = model.infer(&x, &[])?;
        let d = logits.data();
        match model.spec.task {
            Task::Classify => {
                for (i, &y) in labels.iter().enumerate() {
                    correct += usize::from(argmax(d[i * k..(i + 1) * k].iter().copied()) == y);
                }
            }
            Task::Segment => {
                let hw = labels.len() / chunk.len();
                for (i, &y) in labels.iter().enumerate() {
                    let (n, p) = (i / hw, i % hw);
                    let pred = argmax((0..k).map(|c| d[(n * k + c) * hw + p]));
                    confusion.add(y, pred);
                }
            }
        }
    }
    Ok(match model.spec.task {
        Task::Classify => correct as f64 / val.len() as f64,
        Task::Segment => confusion.mean_iou(),
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SDKM";

fn spec_text(spec: &ModelSpec) -> String {
    let stages: Vec<String> = spec.stage_channels.iter().map(usize::to_string).collect();
    format!(
        "task = {}\nin_channels = {}\nstage_channels = {}\nnum_classes = {}\ntap = {}\nseed = {}\n",
        spec.task,
        spec.in_channels,
        stages.join(","),
        spec.num_classes,
        spec.tap,
        spec.seed
    )
}

fn parse_spec_text(text: &str) -> Result<ModelSpec> {
    let bad = |what: &str| Error::Format(format!("checkpoint spec: bad {what}"));
    let mut spec = ModelSpec {
        task: Task::Classify,
        in_channels: 0,
        stage_channels: Vec::new(),
        num_classes: 0,
        tap: 0,
        seed: 0,
    };
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad("line"))?;
        let v = v.trim();
        match k.trim() {
            "task" => spec.task = v.parse().map_err(|_| bad("task"))?,
            "in_channels" => spec.in_channels = v.parse().map_err(|_| bad("in_channels"))?,
            "stage_channels" => {
                spec.stage_channels = v
                    .split(',')
                    .map(|c| c.trim().parse().map_err(|_| bad("stage_channels")))
                    .collect::<Result<_>>()?
            }
            "num_classes" => spec.num_classes = v.parse().map_err(|_| bad("num_classes"))?,
            "tap" => spec.tap = v.parse().map_err(|_| bad("tap"))?,
            "seed" => spec.seed = v.parse().map_err(|_| bad("seed"))?,
            other => return Err(bad(other)),
        }
    }
    Ok(spec)
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

/// `SDKM`, spec echo, then `(name, dims, f64 LE values)` per parameter.
pub fn save_checkpoint<W: Write>(mut w: W, model: &Model) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    let text = spec_text(&model.spec);
    write_u32(&mut w, text.len())?;
    w.write_all(text.as_bytes())?;
    write_u32(&mut w, model.params.len())?;
    for p in model.params.iter() {
        write_u32(&mut w, p.name.len())?;
        w.write_all(p.name.as_bytes())?;
        write_u32(&mut w, p.value.rank())?;
        for &d in p.value.shape() {
            write_u32(&mut w, d)?;
        }
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Inverse of [`save_checkpoint`]; the loaded model is frozen.
pub fn load_checkpoint<R: Read>(mut r: R) -> Result<Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut text = vec![0u8; read_u32(&mut r)?];
    r.read_exact(&mut text)?;
    let text = String::from_utf8(text).map_err(|_| Error::Format("spec is not UTF-8".into()))?;
    let mut model = build_model(&parse_spec_text(&text)?)?;
    let count = read_u32(&mut r)?;
    if count != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} parameters, spec needs {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let mut name = vec![0u8; read_u32(&mut r)?];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)?;
        let shape = (0..rank).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        let param = model
            .params
            .get_mut(&name)
            .ok_or_else(|| Error::Format(format!("unknown parameter '{name}'")))?;
        if param.value.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "parameter '{name}' has shape {shape:?}, expected {:?}",
                param.value.shape()
            )));
        }
        param.value = Tensor::new(&shape, values)?;
    }
    model.params.set_trainable(false);
    Ok(model)
}
