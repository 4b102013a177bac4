//! Tiny teacher and student CNNs with a designated feature tap.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{derive_seed, Bound, LayerKind, LayerSpec, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Whole-image class id; stages downsample by 2.
    Classify,
    /// Per-pixel class id; stages keep resolution.
    Segment,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Segment => "segment",
        }
    }

    pub fn stage_stride(self) -> usize {
        match self {
            Task::Classify => 2,
            Task::Segment => 1,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "classify" => Ok(Task::Classify),
            "segment" => Ok(Task::Segment),
            other => Err(Error::Config(format!(
                "unknown task '{other}', expected one of: classify, segment"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub task: Task,
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub num_classes: usize,
    pub tap: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::domain("model needs at least one stage"));
        }
        if self.stage_channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::domain(format!(
                "channel counts must be positive: in {} stages {:?}",
                self.in_channels, self.stage_channels
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::domain(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.tap >= self.stage_channels.len() {
            return Err(Error::domain(format!(
                "tap {} out of range for {} stages",
                self.tap,
                self.stage_channels.len()
            )));
        }
        Ok(())
    }

    /// Channel count of stage `stage`'s output.
    pub fn channels_at(&self, stage: usize) -> usize {
        self.stage_channels[stage]
    }

    pub fn tap_channels(&self) -> usize {
        self.stage_channels[self.tap]
    }

    /// One `LayerSpec` per stage followed by the head.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let stride = self.task.stage_stride();
        let mut prev = self.in_channels;
        let mut layers = Vec::with_capacity(self.stage_channels.len() + 1);
        for (i, &c) in self.stage_channels.iter().enumerate() {
            layers.push(LayerSpec {
                kind: LayerKind::Conv,
                c_in: prev,
                c_out: c,
                kernel: 3,
                stride,
                seed: derive_seed(self.seed, i as u64),
            });
            prev = c;
        }
        let head_seed = derive_seed(self.seed, self.stage_channels.len() as u64);
        layers.push(LayerSpec {
            kind: match self.task {
                Task::Classify => LayerKind::Linear,
                Task::Segment => LayerKind::Conv,
            },
            c_in: prev,
            c_out: self.num_classes,
            kernel: 1,
            stride: 1,
            seed: head_seed,
        });
        layers
    }

    /// Closed-form parameter count.
    pub fn num_params(&self) -> usize {
        let mut prev = self.in_channels;
        let mut total = 0;
        for &c in &self.stage_channels {
            total += c * prev * 9 + c;
            prev = c;
        }
        total + prev * self.num_classes + self.num_classes
    }
}

/// A built network: `conv3x3 -> ReLU` stages, then a task head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamSet,
    layers: Vec<LayerSpec>,
}

/// Output of a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    pub taps: Vec<Var>,
}

pub fn build_model(spec: &ModelSpec) -> Result<Model> {
    spec.validate()?;
    let layers = spec.layers();
    let mut params = ParamSet::new();
    for (i, layer) in layers.iter().enumerate() {
        let (w, b) = layer.init()?;
        let prefix = if i < spec.stage_channels.len() {
            format!("stage{i}")
        } else {
            "head".to_string()
        };
        params.push(format!("{prefix}.weight"), w);
        params.push(format!("{prefix}.bias"), b);
    }
    Ok(Model {
        spec: spec.clone(),
        params,
        layers,
    })
}

impl Model {
    pub fn num_stages(&self) -> usize {
        self.spec.stage_channels.len()
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::shape(format!(
                "model expects N x {} x H x W input, got {shape:?}",
                self.spec.in_channels
            )));
        }
        Ok(())
    }

    /// Runs the stages up to and including `last_stage`, collecting the post-ReLU output
    /// of every stage.
    pub fn stages(&self, tape: &mut Tape, bound: &Bound, x: Var, last_stage: usize) -> Result<Vec<Var>> {
        self.check_input(tape, x)?;
        if last_stage >= self.num_stages() {
            return Err(Error::shape(format!(
                "stage {last_stage} out of range for {} stages",
                self.num_stages()
            )));
        }
        let mut outs = Vec::with_capacity(last_stage + 1);
        let mut h = x;
        for (i, layer) in self.layers[..=last_stage].iter().enumerate() {
            h = tape.conv2d(h, bound.get(2 * i), Some(bound.get(2 * i + 1)), layer.stride, 1)?;
            h = tape.relu(h);
            outs.push(h);
        }
        Ok(outs)
    }

    /// Full forward pass returning logits and the activations at `taps`.
    pub fn forward_with_taps(&self, tape: &mut Tape, bound: &Bound, x: Var, taps: &[usize]) -> Result<Forward> {
        let outs = self.stages(tape, bound, x, self.num_stages() - 1)?;
        let taps = taps
            .iter()
            .map(|&t| {
                outs.get(t)
                    .copied()
                    .ok_or_else(|| Error::shape(format!("tap {t} out of range for {} stages", outs.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        let last = *outs.last().expect("at least one stage");
        let hw = 2 * self.num_stages();
        let logits = match self.spec.task {
            Task::Classify => {
                let pooled = tape.global_avg_pool(last)?;
                let z = tape.matmul(pooled, bound.get(hw))?;
                tape.add_bias(z, bound.get(hw + 1))?
            }
            Task::Segment => tape.conv2d(last, bound.get(hw), Some(bound.get(hw + 1)), 1, 0)?,
        };
        Ok(Forward { logits, taps })
    }

    /// Logits and the activation at the spec's tap stage.
    pub fn forward_with_tap(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<(Var, Var)> {
        let f = self.forward_with_taps(tape, bound, x, &[self.spec.tap])?;
        Ok((f.logits, f.taps[0]))
    }

    /// Gradient-free logits and tap activations for a batch.
    pub fn infer(&self, x: &Tensor, taps: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let mut frozen = self.params.clone();
        frozen.set_trainable(false);
        let bound = frozen.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let f = self.forward_with_taps(&mut tape, &bound, xv, taps)?;
        let taps = f.taps.iter().map(|&t| tape.value(t).clone()).collect();
        Ok((tape.value(f.logits).clone(), taps))
    }
}
