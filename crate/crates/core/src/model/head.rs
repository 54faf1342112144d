use rand::Rng;

use crate::error::{DpatError, Result};
use crate::tensor::Tensor;

/// Linear classifier that grows by one slot per newly seen class.
///
/// Slot `i` scores class `classes()[i]`; slots are assigned in arrival order
/// and existing rows are copied unchanged when the head grows.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    classes: Vec<usize>,
    task_of_slot: Vec<usize>,
    /// `(C, D)`.
    pub weight: Tensor,
    pub bias: Tensor,
    dim: usize,
}

impl ClassifierHead {
    pub fn new(dim: usize) -> Self {
        Self {
            classes: Vec::new(),
            task_of_slot: Vec::new(),
            weight: Tensor::zeros(&[0, dim]),
            bias: Tensor::zeros(&[0]),
            dim,
        }
    }

    pub fn width(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn slot_of(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn task_of_slot(&self, slot: usize) -> Option<usize> {
        self.task_of_slot.get(slot).copied()
    }

    /// Appends rows for `new_classes` belonging to `task`.
    pub fn grow<R: Rng + ?Sized>(&mut self, task: usize, new_classes: &[usize], rng: &mut R) -> Result<()> {
        for (i, c) in new_classes.iter().enumerate() {
            if self.slot_of(*c).is_some() || new_classes[..i].contains(c) {
                return Err(DpatError::Protocol(format!(
                    "class {c} was already introduced by an earlier task"
                )));
            }
        }
        let old = self.width();
        let width = old + new_classes.len();
        let mut weight = self.weight.data().to_vec();
        weight.extend(Tensor::randn(&[new_classes.len(), self.dim], 0.02, rng).into_data());
        let mut bias = self.bias.data().to_vec();
        bias.extend(std::iter::repeat_n(0.0, new_classes.len()));
        self.weight = Tensor::from_vec(&[width, self.dim], weight)?;
        self.bias = Tensor::from_vec(&[width], bias)?;
        self.classes.extend_from_slice(new_classes);
        self.task_of_slot.extend(std::iter::repeat_n(task, new_classes.len()));
        Ok(())
    }

    /// Active-slot mask for a set of class ids.
    pub fn mask_for(&self, classes: &[usize]) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.width()];
        for c in classes {
            let slot = self.slot_of(*c).ok_or_else(|| {
                DpatError::Config(format!(
                    "class {c} is not covered by the {}-wide head",
                    self.width()
                ))
            })?;
            mask[slot] = true;
        }
        Ok(mask)
    }

    pub(crate) fn restore(
        classes: Vec<usize>,
        task_of_slot: Vec<usize>,
        weight: Tensor,
        bias: Tensor,
    ) -> Result<Self> {
        let dim = weight.cols();
        if weight.rows() != classes.len() || bias.len() != classes.len() || task_of_slot.len() != classes.len() {
            return Err(DpatError::Checkpoint("head tensors disagree on width".into()));
        }
        Ok(Self {
            classes,
            task_of_slot,
            weight,
            bias,
            dim,
        })
    }
}
