//! The shared model components {φ, τ, h_κ, h_ρ} and client-local prompt sets.

mod layers;
mod params;
mod prompts;

pub use layers::{Classifier, FeatureExtractor, FeatureTransformer, Linear, ProjectionHead, Route};
pub use params::{ParamFile, ParamMap, ParamRecord};
pub use prompts::{init_prompts, PromptKind, PromptSet, PROMPT_INIT_STD};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::seeding;

/// Layer widths and head sizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Feature dimension `m` shared by φ, τ, the heads and the prompts.
    pub feature_dim: usize,
    pub num_classes: usize,
    pub proj_dim: usize,
    pub ffn: bool,
    /// Skip connection around τ's attention.
    #[serde(default = "default_true")]
    pub attn_residual: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 16,
            hidden: vec![32],
            feature_dim: 16,
            num_classes: 10,
            proj_dim: 8,
            ffn: false,
            attn_residual: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("model {what} must be positive")));
        if self.input_dim == 0 {
            return bad("input_dim");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim");
        }
        if self.proj_dim == 0 {
            return bad("proj_dim");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths");
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("model needs at least 2 classes".into()));
        }
        Ok(())
    }

    /// `(input_dim, hidden..., m)`.
    pub fn extractor_widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.feature_dim))
            .collect()
    }
}

/// The global parameter set exchanged between server and clients.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub phi: FeatureExtractor,
    pub tau: FeatureTransformer,
    pub hk: Classifier,
    pub hrho: ProjectionHead,
}

/// Weights `U(±1/√fan_in)`, deterministic in `seed`.
pub fn init_bundle(cfg: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    cfg.validate()?;
    let mut rng = seeding::stream(seed, seeding::tags::MODEL_INIT, 0);
    let m = cfg.feature_dim;
    let phi = FeatureExtractor::init(&mut rng, &cfg.extractor_widths());
    let tau = FeatureTransformer::init(&mut rng, m, cfg.ffn, cfg.attn_residual);
    let hk = Classifier {
        linear: Linear::init(&mut rng, m, cfg.num_classes, true),
    };
    let hrho = ProjectionHead {
        weight: layers::uniform_param(&mut rng, vec![cfg.proj_dim, m], m),
    };
    Ok(ModelBundle { phi, tau, hk, hrho })
}

impl ModelBundle {
    pub fn feature_dim(&self) -> usize {
        self.tau.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.hk.num_classes()
    }

    /// Canonical `(key, tensor)` pairs in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.phi.layers.iter().enumerate() {
            out.push((format!("phi.layer{i}.weight"), &l.weight));
            if let Some(b) = &l.bias {
                out.push((format!("phi.layer{i}.bias"), b));
            }
        }
        out.push(("tau.wq".into(), &self.tau.wq));
        out.push(("tau.wk".into(), &self.tau.wk));
        out.push(("tau.wv".into(), &self.tau.wv));
        out.push(("tau.wo".into(), &self.tau.wo));
        if let Some(ffn) = &self.tau.ffn {
            out.push(("tau.ffn.weight".into(), &ffn.weight));
            if let Some(b) = &ffn.bias {
                out.push(("tau.ffn.bias".into(), b));
            }
        }
        out.push(("hk.weight".into(), &self.hk.linear.weight));
        if let Some(b) = &self.hk.linear.bias {
            out.push(("hk.bias".into(), b));
        }
        out.push(("hrho.weight".into(), &self.hrho.weight));
        out
    }

    /// Mutable counterpart of [`named_tensors`](Self::named_tensors), same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.phi.layers.iter_mut().enumerate() {
            out.push((format!("phi.layer{i}.weight"), &mut l.weight));
            if let Some(b) = &mut l.bias {
                out.push((format!("phi.layer{i}.bias"), b));
            }
        }
        out.push(("tau.wq".into(), &mut self.tau.wq));
        out.push(("tau.wk".into(), &mut self.tau.wk));
        out.push(("tau.wv".into(), &mut self.tau.wv));
        out.push(("tau.wo".into(), &mut self.tau.wo));
        if let Some(ffn) = &mut self.tau.ffn {
            out.push(("tau.ffn.weight".into(), &mut ffn.weight));
            if let Some(b) = &mut ffn.bias {
                out.push(("tau.ffn.bias".into(), b));
            }
        }
        out.push(("hk.weight".into(), &mut self.hk.linear.weight));
        if let Some(b) = &mut self.hk.linear.bias {
            out.push(("hk.bias".into(), b));
        }
        out.push(("hrho.weight".into(), &mut self.hrho.weight));
        out
    }

    pub fn to_params(&self) -> ParamMap {
        ParamMap::from_iter(self.named_tensors().into_iter().map(|(k, t)| (k, t.clone())))
    }

    /// Overwrites every value from `params`, which must carry exactly this
    /// bundle's key set and shapes.
    pub fn load_params(&mut self, params: &ParamMap) -> Result<()> {
        let expected: Vec<String> = self.named_tensors().into_iter().map(|(k, _)| k).collect();
        params.check_keys(expected.iter().map(String::as_str))?;
        for (key, t) in self.named_tensors_mut() {
            let src = params.get(&key).expect("key set checked");
            if src.shape() != t.shape() {
                return Err(Error::Schema(format!(
                    "`{key}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Rebuilds a bundle of architecture `cfg` from a parameter map.
    pub fn from_params(cfg: &ModelConfig, params: &ParamMap) -> Result<Self> {
        let mut bundle = init_bundle(cfg, 0)?;
        bundle.load_params(params)?;
        Ok(bundle)
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

fn batch_input<'t>(tape: &'t Tape, batch: &[Scalar], cols: usize) -> Result<crate::autodiff::Var<'t>> {
    if batch.is_empty() || cols == 0 || !batch.len().is_multiple_of(cols) {
        return Err(Error::shape(
            "batch",
            format!("{} values do not form rows of width {cols}", batch.len()),
        ));
    }
    tape.input(batch.len() / cols, cols, batch.to_vec())
}

/// Features `φ(x)` for a row-major `B × input_dim` batch.
pub fn extract(phi: &FeatureExtractor, batch: &[Scalar], input_dim: usize) -> Result<Vec<Scalar>> {
    if input_dim != phi.input_dim() {
        return Err(Error::shape(
            "extract",
            format!("batch width {input_dim}, extractor expects {}", phi.input_dim()),
        ));
    }
    let tape = Tape::new();
    let x = batch_input(&tape, batch, input_dim)?;
    Ok(phi.forward(&tape, x, Route::Frozen)?.value())
}

/// Stacks `f` over the prompts, runs τ and splits the `(1+n) × m` output into
/// `(f′, p′)`.
pub fn transform(tau: &FeatureTransformer, f: &[Scalar], prompts: &PromptSet) -> Result<(Vec<Scalar>, Vec<Scalar>)> {
    let m = tau.dim();
    if f.len() != m || prompts.dim() != m {
        return Err(Error::shape(
            "transform",
            format!("feature {} and prompts {} for dimension {m}", f.len(), prompts.dim()),
        ));
    }
    let tape = Tape::new();
    let row = tape.input(1, m, f.to_vec())?;
    let seq = match prompts.bind(&tape, Route::Frozen) {
        Some(p) => row.concat_rows(&p)?,
        None => row,
    };
    let mut out = tau.forward_sequence(&tape, seq, Route::Frozen)?.value();
    let rest = out.split_off(m);
    Ok((out, rest))
}

pub fn classify(hk: &Classifier, f: &[Scalar]) -> Result<Vec<Scalar>> {
    let tape = Tape::new();
    let x = batch_input(&tape, f, hk.linear.input_dim())?;
    Ok(hk.forward(&tape, x, Route::Frozen)?.value())
}

pub fn project(hrho: &ProjectionHead, f: &[Scalar]) -> Result<Vec<Scalar>> {
    let tape = Tape::new();
    let x = batch_input(&tape, f, hrho.weight.shape()[1])?;
    Ok(hrho.forward(&tape, x, Route::Frozen)?.value())
}
