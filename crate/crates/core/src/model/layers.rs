use rand::Rng as _;

use crate::autodiff::{prompted_attention_row0, AttentionVars, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seeding::Rng;

/// How a component's tensors are bound onto a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    /// Leaves receive gradients.
    Train,
    /// Leaves are constants: a stop-gradient barrier.
    Frozen,
}

fn bind<'t>(tape: &'t Tape, t: &Tensor, route: Route) -> Var<'t> {
    match route {
        Route::Train => tape.param(t),
        Route::Frozen => tape.constant(t),
    }
}

/// `U(−1/√fan_in, 1/√fan_in)` matrix of the given shape, trainable.
pub(crate) fn uniform_param(rng: &mut Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as Scalar).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::param(shape, data).expect("positive dims")
}

/// Affine map `y = x·Wᵀ + b` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub(crate) fn init(rng: &mut Rng, input: usize, output: usize, bias: bool) -> Self {
        let weight = uniform_param(rng, vec![output, input], input);
        let bias = bias.then(|| uniform_param(rng, vec![output], input));
        Linear { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, route: Route) -> Result<Var<'t>> {
        let y = x.matmul_t(&bind(tape, &self.weight, route))?;
        match &self.bias {
            Some(b) => y.add_row(&bind(tape, b, route)),
            None => Ok(y),
        }
    }
}

/// MLP feature extractor φ with ReLU after every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub layers: Vec<Linear>,
}

impl FeatureExtractor {
    pub(crate) fn init(rng: &mut Rng, widths: &[usize]) -> Self {
        let layers = widths.windows(2).map(|w| Linear::init(rng, w[0], w[1], true)).collect();
        FeatureExtractor { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").output_dim()
    }

    /// `B × input_dim → B × m`.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, route: Route) -> Result<Var<'t>> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "extract",
                format!("batch has {} columns, extractor expects {}", x.cols(), self.input_dim()),
            ));
        }
        self.layers
            .iter()
            .try_fold(x, |h, layer| Ok(layer.forward(tape, h, route)?.relu()))
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.as_ref().map_or(0, Tensor::numel))
            .sum()
    }
}

/// Feature transformation module τ: one single-head self-attention block over
/// `[f; p]` (with an optional skip connection `X + Attn(X)`), optionally
/// followed by a residual position-wise feed-forward layer
/// `A + ReLU(A·W_ffᵀ + b_ff)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTransformer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn: Option<Linear>,
    /// Adds the block input to the attention output.
    pub residual: bool,
}

impl FeatureTransformer {
    pub(crate) fn init(rng: &mut Rng, m: usize, ffn: bool, residual: bool) -> Self {
        let mut square = || uniform_param(rng, vec![m, m], m);
        let (wq, wk, wv, wo) = (square(), square(), square(), square());
        let ffn = ffn.then(|| Linear::init(rng, m, m, true));
        FeatureTransformer {
            wq,
            wk,
            wv,
            wo,
            ffn,
            residual,
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn ffn_enabled(&self) -> bool {
        self.ffn.is_some()
    }

    pub fn attention<'t>(&self, tape: &'t Tape, route: Route) -> AttentionVars<'t> {
        AttentionVars {
            wq: bind(tape, &self.wq, route),
            wk: bind(tape, &self.wk, route),
            wv: bind(tape, &self.wv, route),
            wo: bind(tape, &self.wo, route),
        }
    }

    fn feed_forward<'t>(&self, tape: &'t Tape, a: Var<'t>, route: Route) -> Result<Var<'t>> {
        match &self.ffn {
            Some(ffn) => a.add(&ffn.forward(tape, a, route)?.relu()),
            None => Ok(a),
        }
    }

    /// Transformed features `f′` for every row of `features` (`B × m`), each
    /// attending over itself and the shared prompts.
    pub fn forward_features<'t>(
        &self,
        tape: &'t Tape,
        features: Var<'t>,
        prompts: Option<Var<'t>>,
        route: Route,
    ) -> Result<Var<'t>> {
        if features.cols() != self.dim() {
            return Err(Error::shape(
                "transform",
                format!(
                    "features have {} columns, transformer dimension is {}",
                    features.cols(),
                    self.dim()
                ),
            ));
        }
        let w = self.attention(tape, route);
        let mut a = prompted_attention_row0(features, prompts, &w)?;
        if self.residual {
            a = a.add(&features)?;
        }
        self.feed_forward(tape, a, route)
    }

    /// The whole `(1+n) × m` output sequence for one stacked input.
    pub fn forward_sequence<'t>(&self, tape: &'t Tape, seq: Var<'t>, route: Route) -> Result<Var<'t>> {
        if seq.cols() != self.dim() {
            return Err(Error::shape(
                "transform",
                format!(
                    "sequence has {} columns, transformer dimension is {}",
                    seq.cols(),
                    self.dim()
                ),
            ));
        }
        let w = self.attention(tape, route);
        let mut a = crate::autodiff::attention_block(seq, &w)?;
        if self.residual {
            a = a.add(&seq)?;
        }
        self.feed_forward(tape, a, route)
    }
}

/// Global classifier h_κ: `m → C` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub linear: Linear,
}

impl Classifier {
    pub fn num_classes(&self) -> usize {
        self.linear.output_dim()
    }

    pub fn forward<'t>(&self, tape: &'t Tape, f: Var<'t>, route: Route) -> Result<Var<'t>> {
        if f.cols() != self.linear.input_dim() {
            return Err(Error::shape(
                "classify",
                format!(
                    "features have {} columns, classifier expects {}",
                    f.cols(),
                    self.linear.input_dim()
                ),
            ));
        }
        self.linear.forward(tape, f, route)
    }
}

/// Projection head h_ρ: bias-free linear map followed by L2 normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub weight: Tensor,
}

impl ProjectionHead {
    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Unit-norm rows; a zero pre-image row is an error.
    pub fn forward<'t>(&self, tape: &'t Tape, f: Var<'t>, route: Route) -> Result<Var<'t>> {
        if f.cols() != self.weight.shape()[1] {
            return Err(Error::shape(
                "project",
                format!(
                    "features have {} columns, head expects {}",
                    f.cols(),
                    self.weight.shape()[1]
                ),
            ));
        }
        f.matmul_t(&bind(tape, &self.weight, route))?
            .l2_normalize_rows()
            .map_err(|_| Error::ZeroNorm("projection head output"))
    }
}
