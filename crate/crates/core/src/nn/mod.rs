//! Parameters, initialisation, and the feature-transform zoo.

mod transform;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub use transform::{TransformKind, TransformModule};

/// A named trainable (or frozen) tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

/// Ordered registry of parameters owned by one model or transform.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

/// Tape handles for a [`ParamSet`], in registry order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, i: usize) -> Var {
        self.0[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
            trainable: true,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.params[i].value
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
            if !trainable {
                p.grad = None;
            }
        }
    }

    pub fn any_trainable(&self) -> bool {
        self.params.iter().any(|p| p.trainable)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Places every parameter on `tape`; trainable ones become gradient-tracking leaves.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), p.trainable))
                .collect(),
        )
    }

    /// Adds the tape gradients of `bound` into each trainable parameter's `grad`.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(bound.vars()) {
            if !p.trainable {
                continue;
            }
            let Some(g) = tape.grad(v) else { continue };
            match &mut p.grad {
                Some(existing) => existing.add_assign(g),
                None => p.grad = Some(g.clone()),
            }
        }
    }
}

/// Deterministic sub-seed for stream `stream` of `base` (splitmix64 finaliser).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Kaiming-normal conv weight (`c_out x c_in x k x k`, variance `2 / (c_in k^2)`) and a
/// zero bias of length `c_out`.
pub fn init_conv_params(c_in: usize, c_out: usize, k: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    if c_in == 0 || c_out == 0 {
        return Err(Error::domain(format!(
            "conv extents must be positive, got c_in={c_in} c_out={c_out}"
        )));
    }
    if k != 1 && k != 3 {
        return Err(Error::domain(format!("kernel size must be 1 or 3, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = (2.0 / (c_in * k * k) as f64).sqrt();
    let weight = Tensor::randn(&[c_out, c_in, k, k], std, &mut rng);
    Ok((weight, Tensor::zeros(&[c_out])))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Linear,
}

/// Construction recipe for one parameterised layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub seed: u64,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.stride == 0 {
            return Err(Error::domain(format!("layer extents must be positive: {self:?}")));
        }
        if self.kernel != 1 && self.kernel != 3 {
            return Err(Error::domain(format!("kernel must be 1 or 3: {self:?}")));
        }
        Ok(())
    }

    /// Weight and bias for this layer. `Linear` layers store their weight as `c_in x c_out`.
    pub fn init(&self) -> Result<(Tensor, Tensor)> {
        self.validate()?;
        let (w, b) = init_conv_params(self.c_in, self.c_out, self.kernel, self.seed)?;
        match self.kind {
            LayerKind::Conv => Ok((w, b)),
            LayerKind::Linear => {
                // transpose c_out x c_in -> c_in x c_out
                let src = w.data();
                let mut t = vec![0.0; src.len()];
                for o in 0..self.c_out {
                    for i in 0..self.c_in {
                        t[i * self.c_out + o] = src[o * self.c_in + i];
                    }
                }
                Ok((Tensor::new(&[self.c_in, self.c_out], t)?, b))
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel + self.c_out
    }
}
