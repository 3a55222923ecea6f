use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::Route;
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seeding;

/// Standard deviation of freshly initialized prompt entries.
pub const PROMPT_INIT_STD: Scalar = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Classification,
    Contrastive,
}

impl PromptKind {
    /// Key under which the set is stored in per-client prompt files.
    pub fn key(self) -> &'static str {
        match self {
            PromptKind::Classification => "p_kappa",
            PromptKind::Contrastive => "p_rho",
        }
    }
}

/// `n` learnable prompt vectors in feature space, kept on the client.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    kind: PromptKind,
    dim: usize,
    matrix: Option<Tensor>,
}

impl PromptSet {
    pub fn new(kind: PromptKind, dim: usize, matrix: Option<Tensor>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("prompt dimension must be positive".into()));
        }
        if let Some(t) = &matrix {
            if t.shape().len() != 2 || t.shape()[1] != dim {
                return Err(Error::shape(
                    "prompt set",
                    format!("matrix {:?} for dimension {dim}", t.shape()),
                ));
            }
        }
        Ok(PromptSet { kind, dim, matrix })
    }

    pub fn empty(kind: PromptKind, dim: usize) -> Result<Self> {
        Self::new(kind, dim, None)
    }

    pub fn kind(&self) -> PromptKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.matrix.as_ref().map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_none()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> Option<&Tensor> {
        self.matrix.as_ref()
    }

    pub fn matrix_mut(&mut self) -> Option<&mut Tensor> {
        self.matrix.as_mut()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, route: Route) -> Option<Var<'t>> {
        self.matrix.as_ref().map(|t| match route {
            Route::Train => tape.param(t),
            Route::Frozen => tape.constant(t),
        })
    }

    /// Rows reordered so that row `i` of the result is row `order[i]` here.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let Some(t) = &self.matrix else {
            return Ok(self.clone());
        };
        let n = t.rows();
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..n).collect::<Vec<_>>() {
            return Err(Error::InvalidArgument(format!(
                "{order:?} is not a permutation of 0..{n}"
            )));
        }
        let m = self.dim;
        let data = order
            .iter()
            .flat_map(|&r| t.data()[r * m..(r + 1) * m].iter().copied())
            .collect();
        let matrix = Tensor::param(vec![n, m], data)?;
        Self::new(self.kind, m, Some(matrix))
    }
}

/// `n` prompts of dimension `m` drawn from `N(0, 0.02²)`; `n = 0` gives an
/// empty set.
pub fn init_prompts(kind: PromptKind, n: usize, m: usize, seed: u64) -> Result<PromptSet> {
    if m == 0 {
        return Err(Error::InvalidArgument("prompt dimension must be positive".into()));
    }
    if n == 0 {
        return PromptSet::empty(kind, m);
    }
    let tag = match kind {
        PromptKind::Classification => seeding::tags::PROMPT_KAPPA,
        PromptKind::Contrastive => seeding::tags::PROMPT_RHO,
    };
    let mut rng = seeding::stream(seed, tag, 0);
    let normal = Normal::new(0.0, PROMPT_INIT_STD).expect("valid std");
    let data = (0..n * m).map(|_| normal.sample(&mut rng)).collect();
    PromptSet::new(kind, m, Some(Tensor::param(vec![n, m], data)?))
}
