use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{derive_seed, init_conv_params, Bound, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Which mapping sits between the student feature and the teacher feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    /// No transform; the student feature is compared directly.
    Identity,
    /// A single 1x1 convolution.
    Linear,
    /// 1x1 conv, ReLU, 1x1 conv.
    Mlp,
    /// 3x3 conv, ReLU, 3x3 conv.
    #[serde(rename = "conv3x3")]
    ConvSpatial,
    /// Embedded-Gaussian non-local block with a residual connection.
    NonLocal,
}

impl TransformKind {
    pub const ALL: [TransformKind; 5] = [
        TransformKind::Identity,
        TransformKind::Linear,
        TransformKind::Mlp,
        TransformKind::ConvSpatial,
        TransformKind::NonLocal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::Linear => "linear",
            TransformKind::Mlp => "mlp",
            TransformKind::ConvSpatial => "conv3x3",
            TransformKind::NonLocal => "nonlocal",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                let valid: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "unknown transform '{s}', expected one of: {}",
                    valid.join(", ")
                ))
            })
    }
}

/// A learnable mapping from student channels `c_in` to teacher channels `c_out`.
///
/// Parameter order per kind:
/// - `Linear`: `w`, `b`
/// - `Mlp`, `ConvSpatial`: `w1`, `b1`, `w2`, `b2`
/// - `NonLocal`: `theta_w`, `theta_b`, `phi_w`, `phi_b`, `g_w`, `g_b`, `out_w`, `out_b`
#[derive(Clone, Debug, PartialEq)]
pub struct TransformModule {
    pub kind: TransformKind,
    pub params: ParamSet,
    pub c_in: usize,
    pub c_out: usize,
    pub hidden: usize,
}

impl TransformModule {
    /// Builds a transform. `hidden` defaults to `max(c_in, c_out)` for `Mlp` and
    /// `ConvSpatial` and is ignored otherwise.
    pub fn new(kind: TransformKind, c_in: usize, c_out: usize, hidden: Option<usize>, seed: u64) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::domain("transform channel counts must be positive"));
        }
        let needs_square = matches!(kind, TransformKind::Identity | TransformKind::NonLocal);
        if needs_square && c_in != c_out {
            return Err(Error::shape(format!(
                "{kind} transform needs equal channels, got student {c_in} vs teacher {c_out}"
            )));
        }
        let mut params = ParamSet::new();
        let mut add_conv = |names: [&str; 2], ci: usize, co: usize, k: usize, stream: u64| -> Result<()> {
            let (w, b) = init_conv_params(ci, co, k, derive_seed(seed, stream))?;
            params.push(names[0], w);
            params.push(names[1], b);
            Ok(())
        };
        let hidden = match kind {
            TransformKind::Mlp | TransformKind::ConvSpatial => hidden.unwrap_or(c_in.max(c_out)),
            TransformKind::NonLocal => (c_in / 2).max(1),
            _ => 0,
        };
        match kind {
            TransformKind::Identity => {}
            TransformKind::Linear => add_conv(["w", "b"], c_in, c_out, 1, 0)?,
            TransformKind::Mlp | TransformKind::ConvSpatial => {
                if hidden == 0 {
                    return Err(Error::domain("hidden width must be positive"));
                }
                let k = if kind == TransformKind::Mlp { 1 } else { 3 };
                add_conv(["w1", "b1"], c_in, hidden, k, 0)?;
                add_conv(["w2", "b2"], hidden, c_out, k, 1)?;
            }
            TransformKind::NonLocal => {
                add_conv(["theta_w", "theta_b"], c_in, hidden, 1, 0)?;
                add_conv(["phi_w", "phi_b"], c_in, hidden, 1, 1)?;
                add_conv(["g_w", "g_b"], c_in, hidden, 1, 2)?;
                add_conv(["out_w", "out_b"], hidden, c_out, 1, 3)?;
            }
        }
        Ok(Self {
            kind,
            params,
            c_in,
            c_out,
            hidden,
        })
    }

    /// Zeroes the final layer so the module outputs zero (residual kinds: the identity).
    pub fn zero_output_layer(&mut self) {
        let names: &[&str] = match self.kind {
            TransformKind::Identity => &[],
            TransformKind::Linear => &["w", "b"],
            TransformKind::Mlp | TransformKind::ConvSpatial => &["w2", "b2"],
            TransformKind::NonLocal => &["out_w", "out_b"],
        };
        for name in names {
            if let Some(p) = self.params.get_mut(name) {
                p.value.data_mut().fill(0.0);
            }
        }
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != self.c_in {
            return Err(Error::shape(format!(
                "{} transform expects N x {} x H x W input, got {shape:?}",
                self.kind, self.c_in
            )));
        }
        Ok(())
    }

    /// Applies the transform to `x` using parameters bound on `tape`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        match self.kind {
            TransformKind::Identity => Ok(x),
            TransformKind::Linear => tape.conv2d(x, bound.get(0), Some(bound.get(1)), 1, 0),
            TransformKind::Mlp => self.two_layer(tape, bound, x, 0),
            TransformKind::ConvSpatial => self.two_layer(tape, bound, x, 1),
            TransformKind::NonLocal => self.non_local(tape, bound, x),
        }
    }

    /// Gradient-free forward on a plain tensor.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut frozen = self.params.clone();
        frozen.set_trainable(false);
        let bound = frozen.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(y).clone())
    }

    fn two_layer(&self, tape: &mut Tape, bound: &Bound, x: Var, pad: usize) -> Result<Var> {
        let h = tape.conv2d(x, bound.get(0), Some(bound.get(1)), 1, pad)?;
        let h = tape.relu(h);
        tape.conv2d(h, bound.get(2), Some(bound.get(3)), 1, pad)
    }

    /// `N x HW x HW` attention of the non-local block; row `i` is the softmax over
    /// positions `j` of `theta_i . phi_j`.
    pub fn non_local_attention(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        if self.kind != TransformKind::NonLocal {
            return Err(Error::contract(format!("{} transform has no attention", self.kind)));
        }
        self.check_input(tape, x)?;
        let (n, _, h, w) = tape.value(x).dims4()?;
        let e = self.hidden;
        let theta = tape.conv2d(x, bound.get(0), Some(bound.get(1)), 1, 0)?;
        let theta = tape.reshape(theta, &[n, e, h * w])?;
        let phi = tape.conv2d(x, bound.get(2), Some(bound.get(3)), 1, 0)?;
        let phi = tape.reshape(phi, &[n, e, h * w])?;
        let scores = tape.bmm(theta, phi, true, false)?;
        tape.softmax(scores, 2, 1.0)
    }

    fn non_local(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let (n, _, h, w) = tape.value(x).dims4()?;
        let e = self.hidden;
        let attn = self.non_local_attention(tape, bound, x)?;
        let g = tape.conv2d(x, bound.get(4), Some(bound.get(5)), 1, 0)?;
        let g = tape.reshape(g, &[n, e, h * w])?;
        // y[e, i] = sum_j g[e, j] * attn[i, j]
        let y = tape.bmm(g, attn, false, true)?;
        let y = tape.reshape(y, &[n, e, h, w])?;
        let z = tape.conv2d(y, bound.get(6), Some(bound.get(7)), 1, 0)?;
        tape.add(x, z)
    }
}
