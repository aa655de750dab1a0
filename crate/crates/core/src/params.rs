//! Named, ordered parameter collections with paired gradient buffers.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    params: Vec<Param>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> usize {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter name {name}");
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            kind,
            value,
            grad,
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

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn value(&self, index: usize) -> &Tensor {
        &self.params[index].value
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.params[index].value
    }

    pub fn grad(&self, index: usize) -> &Tensor {
        &self.params[index].grad
    }

    pub fn grad_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.params[index].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Number of scalar trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// `(name, value)` pairs whose name starts with `prefix`.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrite every parameter whose name starts with `prefix` from
    /// `tensors`. Validates names and shapes before touching anything, so a
    /// failed load leaves `self` unchanged. Entries in `tensors` outside the
    /// prefix are ignored. Returns the number of tensors loaded.
    pub fn load_prefixed(&mut self, tensors: &[(String, Tensor)], prefix: &str) -> Result<usize> {
        let mut plan = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            if !p.name.starts_with(prefix) {
                continue;
            }
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::MissingParam(p.name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(alloc::format!(
                    "shape of {} is {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            plan.push((i, t));
        }
        if plan.is_empty() {
            return Err(Error::MissingParam(prefix.to_string() + "*"));
        }
        for (i, t) in &plan {
            self.params[*i].value = (*t).clone();
        }
        Ok(plan.len())
    }

    /// Structural equality of names, kinds and shapes.
    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.kind == b.kind && a.value.shape() == b.value.shape())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample() -> ModelParams {
        let mut p = ModelParams::new();
        p.add("encoder.w", ParamKind::Trainable, Tensor::full(&[2], 1.0));
        p.add("encoder.rm", ParamKind::Buffer, Tensor::full(&[2], 0.0));
        p.add("decoder.w", ParamKind::Trainable, Tensor::full(&[3], 2.0));
        p
    }

    #[test]
    fn prefix_load_leaves_rest_untouched() {
        let mut p = sample();
        let src = vec![
            ("encoder.w".to_string(), Tensor::full(&[2], 9.0)),
            ("encoder.rm".to_string(), Tensor::full(&[2], 8.0)),
            ("decoder.w".to_string(), Tensor::full(&[3], 7.0)),
        ];
        assert_eq!(p.load_prefixed(&src, "encoder.").unwrap(), 2);
        assert_eq!(p.value(0).data(), &[9.0, 9.0]);
        assert_eq!(p.value(2).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn failed_load_is_atomic() {
        let mut p = sample();
        let src = vec![
            ("encoder.w".to_string(), Tensor::full(&[2], 9.0)),
            ("encoder.rm".to_string(), Tensor::full(&[5], 8.0)),
        ];
        assert!(p.load_prefixed(&src, "encoder.").is_err());
        assert_eq!(p, sample());
        assert!(matches!(p.load_prefixed(&src, "head."), Err(Error::MissingParam(_))));
    }

    #[test]
    fn trainable_count_skips_buffers() {
        assert_eq!(sample().trainable_count(), 5);
    }
}
