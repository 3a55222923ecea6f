use std::collections::BTreeSet;

use super::tape::Gradients;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Named set of tensors sharing one learning rate.
#[derive(Debug)]
pub struct ParamGroup<'a> {
    name: String,
    tensors: Vec<&'a mut Tensor>,
    learning_rate: Scalar,
}

impl<'a> ParamGroup<'a> {
    /// A learning rate of exactly zero is accepted and freezes the group.
    pub fn new(name: impl Into<String>, learning_rate: Scalar, tensors: Vec<&'a mut Tensor>) -> Result<Self> {
        let name = name.into();
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::InvalidGroup(format!(
                "group `{name}` has learning rate {learning_rate}"
            )));
        }
        Ok(ParamGroup {
            name,
            tensors,
            learning_rate,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn learning_rate(&self) -> Scalar {
        self.learning_rate
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

/// Rejects duplicate group names.
pub fn check_unique_names(groups: &[ParamGroup<'_>]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for g in groups {
        if !seen.insert(g.name()) {
            return Err(Error::InvalidGroup(format!("duplicate group name `{}`", g.name())));
        }
    }
    Ok(())
}

/// Plain SGD: `v ← v − lr·g` for every member, then clears the consumed
/// gradients. Fails without touching any value if a member has no gradient.
pub fn sgd_step(group: &mut ParamGroup<'_>, grads: &mut Gradients) -> Result<()> {
    if let Some(t) = group.tensors.iter().find(|t| !grads.contains(t.id())) {
        return Err(Error::MissingGradient {
            group: group.name.clone(),
            id: t.id().raw(),
        });
    }
    let lr = group.learning_rate;
    for t in group.tensors.iter_mut() {
        let g = grads.remove(t.id()).expect("checked above");
        if g.len() != t.numel() {
            return Err(Error::shape(
                "sgd_step",
                format!("gradient {} vs tensor {}", g.len(), t.numel()),
            ));
        }
        t.data_mut().iter_mut().zip(&g).for_each(|(v, gv)| *v -= lr * gv);
        t.clear_grad();
    }
    Ok(())
}
