//! Named parameter storage and flat gradient views.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor;

pub const TEXT_PROMPT_PREFIX: &str = "prompt.text.";
pub const VISUAL_PROMPT_PREFIX: &str = "prompt.visual.";
pub const LOG_TEMPERATURE: &str = "temperature.log_tau";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("parameter `{name}`: expected shape {expected:?}, got {actual:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("gradient layouts differ")]
    LayoutMismatch,
    #[error("flat vector has {actual} values, layout needs {expected}")]
    Length { expected: usize, actual: usize },
}

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    TextPrompt,
    VisualPrompt,
    Temperature,
    Encoder,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with(TEXT_PROMPT_PREFIX) {
            Self::TextPrompt
        } else if name.starts_with(VISUAL_PROMPT_PREFIX) {
            Self::VisualPrompt
        } else if name == LOG_TEMPERATURE {
            Self::Temperature
        } else {
            Self::Encoder
        }
    }
}

/// Ordered map from parameter name to tensor. Iteration order (sorted by
/// name) is the canonical order used for checkpoints and flat views.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor.detached());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, ParamError> {
        self.get(name).ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn names_in(&self, groups: &[ParamGroup]) -> Vec<String> {
        self.names()
            .filter(|n| groups.contains(&ParamGroup::of(n)))
            .cloned()
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Replaces an existing tensor, keeping its shape.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<(), ParamError> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        if slot.shape() != tensor.shape() {
            return Err(ParamError::Shape {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                actual: tensor.shape().to_vec(),
            });
        }
        *slot = tensor.detached();
        Ok(())
    }

    /// Adds `delta` to one coordinate.
    pub fn perturb(&mut self, name: &str, index: usize, delta: f64) {
        if let Some(t) = self.tensors.get_mut(name) {
            let mut data = t.to_vec();
            data[index] += delta;
            *t = Tensor::new(t.shape().to_vec(), data).expect("shape unchanged");
        }
    }

    /// Flat view of the named tensors, in the order given.
    pub fn flatten(&self, names: &[String]) -> Result<GradientVector, ParamError> {
        let mut layout = Vec::with_capacity(names.len());
        let mut values = Vec::new();
        for name in names {
            let t = self.require(name)?;
            layout.push(Slot {
                name: name.clone(),
                offset: values.len(),
                shape: t.shape().to_vec(),
            });
            values.extend_from_slice(t.data());
        }
        Ok(GradientVector { values, layout })
    }

    /// Writes a flat vector back into the tensors its layout names.
    pub fn assign(&mut self, flat: &GradientVector) -> Result<(), ParamError> {
        for (name, t) in flat.unflatten() {
            self.replace(&name, t)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values of the tensors
    /// selected by `filter`, in canonical order.
    pub fn checksum(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.tensors.iter().filter(|(n, _)| filter(n)) {
            hasher.update((name.len() as u32).to_le_bytes());
            hasher.update(name.as_bytes());
            for &d in t.shape() {
                hasher.update((d as u32).to_le_bytes());
            }
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One tensor's position inside a [`GradientVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat 1-D vector over an ordered subset of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
    layout: Vec<Slot>,
}

impl GradientVector {
    pub fn from_parts(values: Vec<f64>, layout: Vec<Slot>) -> Result<Self, ParamError> {
        let expected: usize = layout.iter().map(Slot::len).sum();
        if expected != values.len() {
            return Err(ParamError::Length {
                expected,
                actual: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    /// Flattens the named entries of `tensors`.
    pub fn from_tensors(
        names: &[String],
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<Self, ParamError> {
        let mut layout = Vec::with_capacity(names.len());
        let mut values = Vec::new();
        for name in names {
            let t = tensors
                .get(name)
                .ok_or_else(|| ParamError::Unknown(name.clone()))?;
            layout.push(Slot {
                name: name.clone(),
                offset: values.len(),
                shape: t.shape().to_vec(),
            });
            values.extend_from_slice(t.data());
        }
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &[Slot] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.layout == other.layout
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, ParamError> {
        Self::from_parts(values, self.layout.clone())
    }

    pub fn unflatten(&self) -> Vec<(String, Tensor)> {
        self.layout
            .iter()
            .map(|slot| {
                let data = self.values[slot.offset..slot.offset + slot.len()].to_vec();
                (
                    slot.name.clone(),
                    Tensor::new(slot.shape.clone(), data).expect("layout shapes are valid"),
                )
            })
            .collect()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.layout == other.layout
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
