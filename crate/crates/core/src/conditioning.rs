//! Condition inputs, time embeddings and classifier-free guidance.
//!
//! Guidance uses `ε̂ = (1 + s)·ε(c) − s·ε(∅)`, so `s = 0` is the plain
//! conditional prediction. The other common convention, `ε(∅) + w·(ε(c) − ε(∅))`,
//! is the same family with `w = 1 + s`.

use crate::backbone::UViTModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum ConditionInput {
    Unconditional,
    Class(usize),
    /// The dropped condition used for classifier-free guidance.
    Null,
    /// Text-like context: `embeddings` is `[max_len, context_dim]`, rows at
    /// and beyond `valid_len` are zero.
    Context { embeddings: Tensor, valid_len: usize },
}

impl ConditionInput {
    pub fn context(embeddings: Tensor, valid_len: usize) -> Result<Self> {
        let &[max_len, dim] = embeddings.shape() else {
            return Err(Error::Shape(format!(
                "context embeddings must be [len, dim], got {:?}",
                embeddings.shape()
            )));
        };
        if valid_len > max_len {
            return Err(Error::Conditioning(format!(
                "valid_len {valid_len} exceeds max_len {max_len}"
            )));
        }
        if embeddings.data()[valid_len * dim..].iter().any(|v| *v != 0.0) {
            return Err(Error::Conditioning(
                "context rows past valid_len must be zero".into(),
            ));
        }
        Ok(ConditionInput::Context {
            embeddings,
            valid_len,
        })
    }

    /// True for `Null` and for empty contexts, which are treated as `Null`.
    pub fn is_null(&self) -> bool {
        match self {
            ConditionInput::Null => true,
            ConditionInput::Context { valid_len, .. } => *valid_len == 0,
            _ => false,
        }
    }
}

/// Sinusoidal embedding of a scalar step: `[sin(t·f_i) | cos(t·f_i)]` with
/// `f_i = 10000^(-i / (dim/2))`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "sinusoidal embedding needs an even positive dimension, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    Ok(out)
}

/// Classifier-free guided noise prediction with strength `s`.
pub fn guided_eps(
    model: &UViTModel,
    x_t: &Tensor,
    t: &[usize],
    cond: &[ConditionInput],
    strength: f64,
) -> Result<Tensor> {
    if cond.iter().any(ConditionInput::is_null) {
        return Err(Error::Parameter(
            "guidance needs a real condition, got Null".into(),
        ));
    }
    let conditional = model.forward(x_t, t, cond)?;
    if strength == 0.0 {
        return Ok(conditional);
    }
    let nulls = vec![ConditionInput::Null; cond.len()];
    let unconditional = model.forward(x_t, t, &nulls)?;
    combine_guidance(&conditional, &unconditional, strength)
}

/// `(1 + s)·cond − s·uncond`, elementwise.
pub fn combine_guidance(cond: &Tensor, uncond: &Tensor, strength: f64) -> Result<Tensor> {
    cond.zip_map(uncond, |c, u| (1.0 + strength) * c - strength * u)
}
