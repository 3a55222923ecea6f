//! One client's local round: alternating feature-learning and
//! task-adaptation epochs with per-loss gradient routing.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, ParamGroup, Scalar, Tape, Tensor, Var};
use crate::data::{AugmentationPolicy, Dataset};
use crate::error::{Error, Result};
use crate::losses::{info_nce_batch, MomentumEncoders, NegativeQueue};
use crate::model::{
    init_prompts, Classifier, FeatureExtractor, ModelBundle, ParamMap, ProjectionHead, PromptKind, PromptSet, Route,
};
use crate::seeding::{self, tags, Rng};

/// A trainable component of the local model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    Phi,
    Tau,
    Hk,
    Hrho,
    PKappa,
    PRho,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Phi,
        Component::Tau,
        Component::Hk,
        Component::Hrho,
        Component::PKappa,
        Component::PRho,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Phi => "phi",
            Component::Tau => "tau",
            Component::Hk => "hk",
            Component::Hrho => "hrho",
            Component::PKappa => "p_kappa",
            Component::PRho => "p_rho",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Loss {
    Ce,
    Con,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Prompts align features with the frozen classifier; φ learns only from L_Con.
    FeatureLearning,
    /// The model adapts to the task; φ learns only from L_CE.
    TaskAdaptation,
    /// No alternation: every loss reaches every component on its path.
    Joint,
}

/// Which components each loss may update in each phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RoutingTable {
    pub tau_con_grad_phase2: bool,
}

impl RoutingTable {
    pub fn routed(&self, phase: Phase, loss: Loss) -> &'static [Component] {
        use Component::*;
        match (phase, loss) {
            (Phase::FeatureLearning, Loss::Ce) => &[PKappa, Tau],
            (Phase::FeatureLearning, Loss::Con) => &[Phi, Tau, Hrho],
            (Phase::TaskAdaptation, Loss::Ce) => &[Phi, Tau, Hk],
            (Phase::TaskAdaptation, Loss::Con) if self.tau_con_grad_phase2 => &[Tau, PRho],
            (Phase::TaskAdaptation, Loss::Con) => &[PRho],
            (Phase::Joint, Loss::Ce) => &[Phi, Tau, Hk, PKappa],
            (Phase::Joint, Loss::Con) => &[Phi, Tau, Hrho, PRho],
        }
    }

    pub fn route(&self, phase: Phase, loss: Loss, c: Component) -> Route {
        if self.routed(phase, loss).contains(&c) {
            Route::Train
        } else {
            Route::Frozen
        }
    }
}

/// Epoch split of one local round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub r_f: usize,
    pub r_a: usize,
}

impl PhasePlan {
    pub fn total(&self) -> usize {
        self.r_f + self.r_a
    }

    /// Checks `r_f + r_a = r`. Returns a warning when `r_f ≤ r_a`.
    pub fn validate(&self, r: usize) -> Result<Option<String>> {
        if self.total() != r {
            return Err(Error::Constraint {
                constraint: "R_f + R_a = R",
                detail: format!("{} + {} != {r}", self.r_f, self.r_a),
            });
        }
        Ok((self.r_f <= self.r_a).then(|| {
            format!(
                "R_f = {} is not larger than R_a = {}; feature learning should get more epochs",
                self.r_f, self.r_a
            )
        }))
    }
}

impl Default for PhasePlan {
    fn default() -> Self {
        PhasePlan { r_f: 4, r_a: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    pub phi: Scalar,
    pub tau: Scalar,
    pub hk: Scalar,
    pub hrho: Scalar,
    pub p_kappa: Scalar,
    pub p_rho: Scalar,
}

impl LearningRates {
    pub fn uniform(lr: Scalar) -> Self {
        LearningRates {
            phi: lr,
            tau: lr,
            hk: lr,
            hrho: lr,
            p_kappa: lr,
            p_rho: lr,
        }
    }

    pub fn get(&self, c: Component) -> Scalar {
        match c {
            Component::Phi => self.phi,
            Component::Tau => self.tau,
            Component::Hk => self.hk,
            Component::Hrho => self.hrho,
            Component::PKappa => self.p_kappa,
            Component::PRho => self.p_rho,
        }
    }
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            tau: 0.01,
            ..Self::uniform(0.1)
        }
    }
}

/// Everything a local round needs besides the data and the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientHyper {
    pub lr: LearningRates,
    pub batch_size: usize,
    pub momentum: Scalar,
    pub temperature: Scalar,
    pub ce_weight: Scalar,
    pub con_weight: Scalar,
    pub alternating: bool,
    pub contrastive: bool,
    pub personalized_classifier: bool,
    pub routing: RoutingTable,
    pub augmentation: AugmentationPolicy,
}

impl Default for ClientHyper {
    fn default() -> Self {
        ClientHyper {
            lr: LearningRates::default(),
            batch_size: 100,
            momentum: 0.999,
            temperature: 0.07,
            ce_weight: 1.0,
            con_weight: 1.0,
            alternating: true,
            contrastive: true,
            personalized_classifier: false,
            routing: RoutingTable::default(),
            augmentation: AugmentationPolicy::default(),
        }
    }
}

impl ClientHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {} outside [0, 1]",
                self.momentum
            )));
        }
        self.augmentation.validate()
    }
}

/// Client-private state that survives across rounds.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: usize,
    pub p_kappa: PromptSet,
    pub p_rho: PromptSet,
    pub queue: NegativeQueue,
    pub momentum: Option<MomentumEncoders>,
    pub data: Dataset,
    pub test: Option<Dataset>,
    /// Per-client classifier kept when the personalized-classifier ablation is on.
    pub local_hk: Option<Classifier>,
    shuffle_rng: Rng,
    augment_rng: Rng,
}

/// Prompt counts and queue geometry for new clients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClientSpec {
    pub n_kappa: usize,
    pub n_rho: usize,
    pub feature_dim: usize,
    pub proj_dim: usize,
    pub queue_size: usize,
}

impl ClientState {
    pub fn new(
        client_id: usize,
        data: Dataset,
        test: Option<Dataset>,
        spec: ClientSpec,
        root_seed: u64,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("client dataset"));
        }
        let id = client_id as u64;
        let prompt_seed = seeding::derive_seed(root_seed, "client-prompts", id);
        let p_kappa = init_prompts(PromptKind::Classification, spec.n_kappa, spec.feature_dim, prompt_seed)?;
        let p_rho = init_prompts(PromptKind::Contrastive, spec.n_rho, spec.feature_dim, prompt_seed)?;
        let mut queue_rng = seeding::stream(root_seed, tags::QUEUE_INIT, id);
        let queue = NegativeQueue::random(spec.queue_size, spec.proj_dim, &mut queue_rng)?;
        Ok(ClientState {
            client_id,
            p_kappa,
            p_rho,
            queue,
            momentum: None,
            data,
            test,
            local_hk: None,
            shuffle_rng: seeding::stream(root_seed, tags::SHUFFLE, id),
            augment_rng: seeding::stream(root_seed, tags::AUGMENT, id),
        })
    }

    pub fn sample_count(&self) -> usize {
        self.data.len()
    }

    /// Classifier used for evaluation: the local one when personalized.
    pub fn eval_classifier<'a>(&'a self, global: &'a ModelBundle) -> &'a Classifier {
        self.local_hk.as_ref().unwrap_or(&global.hk)
    }
}

/// What a client sends to the server.
#[derive(Clone, Debug, PartialEq)]
pub struct UploadPayload {
    pub client_id: usize,
    pub params: ParamMap,
    pub sample_count: usize,
}

impl UploadPayload {
    pub fn new(client_id: usize, bundle: &ModelBundle, sample_count: usize) -> Result<Self> {
        if sample_count == 0 {
            return Err(Error::InvalidArgument("payload sample count must be positive".into()));
        }
        let params = bundle.to_params();
        debug_assert!(params.keys().all(|k| !is_prompt_key(k)));
        Ok(UploadPayload {
            client_id,
            params,
            sample_count,
        })
    }
}

pub fn is_prompt_key(key: &str) -> bool {
    key.starts_with("p_kappa") || key.starts_with("p_rho")
}

/// Mean losses over the batches of one phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossMeans {
    pub ce: Option<Scalar>,
    pub con: Option<Scalar>,
}

#[derive(Default)]
struct LossAccumulator {
    ce: (Scalar, usize),
    con: (Scalar, usize),
}

impl LossAccumulator {
    fn add(&mut self, ce: Option<Scalar>, con: Option<Scalar>) {
        if let Some(v) = ce {
            self.ce.0 += v;
            self.ce.1 += 1;
        }
        if let Some(v) = con {
            self.con.0 += v;
            self.con.1 += 1;
        }
    }

    fn means(&self) -> LossMeans {
        let mean = |(s, n): (Scalar, usize)| (n > 0).then(|| s / n as Scalar);
        LossMeans {
            ce: mean(self.ce),
            con: mean(self.con),
        }
    }
}

/// Losses of one local round, split by phase (joint training reports under
/// `feature_learning`), plus the mean over every epoch of the round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalLosses {
    pub feature_learning: LossMeans,
    pub task_adaptation: LossMeans,
    pub overall: LossMeans,
}

#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub payload: UploadPayload,
    pub losses: LocalLosses,
}

/// Prompts the contrastive branch attends over, and whether they may train.
fn con_prompts(state: &ClientState) -> Option<(&PromptSet, bool)> {
    if !state.p_rho.is_empty() {
        Some((&state.p_rho, true))
    } else if !state.p_kappa.is_empty() {
        // without dedicated prompts the branch shares p_κ as a fixed input
        Some((&state.p_kappa, false))
    } else {
        None
    }
}

fn component_tensors<'a>(
    c: Component,
    bundle: &'a mut ModelBundle,
    p_kappa: &'a mut PromptSet,
    p_rho: &'a mut PromptSet,
) -> Vec<&'a mut Tensor> {
    match c {
        Component::Phi => bundle
            .phi
            .layers
            .iter_mut()
            .flat_map(|l| std::iter::once(&mut l.weight).chain(l.bias.as_mut()))
            .collect(),
        Component::Tau => {
            let t = &mut bundle.tau;
            let mut v = vec![&mut t.wq, &mut t.wk, &mut t.wv, &mut t.wo];
            if let Some(ffn) = &mut t.ffn {
                v.push(&mut ffn.weight);
                v.extend(ffn.bias.as_mut());
            }
            v
        }
        Component::Hk => std::iter::once(&mut bundle.hk.linear.weight)
            .chain(bundle.hk.linear.bias.as_mut())
            .collect(),
        Component::Hrho => vec![&mut bundle.hrho.weight],
        Component::PKappa => p_kappa.matrix_mut().into_iter().collect(),
        Component::PRho => p_rho.matrix_mut().into_iter().collect(),
    }
}

fn bind_prompts<'t>(tape: &'t Tape, prompts: &PromptSet, route: Route) -> Option<Var<'t>> {
    prompts.bind(tape, route)
}

/// Classification branch `h_κ ∘ τ([φ(x), p_κ])` on the tape; τ is bypassed
/// when the client has no classification prompts.
fn ce_forward<'t>(
    tape: &'t Tape,
    bundle: &ModelBundle,
    p_kappa: &PromptSet,
    x: Var<'t>,
    labels: &[usize],
    route: impl Fn(Component) -> Route,
) -> Result<Var<'t>> {
    let f = bundle.phi.forward(tape, x, route(Component::Phi))?;
    let f = match bind_prompts(tape, p_kappa, route(Component::PKappa)) {
        Some(p) => bundle.tau.forward_features(tape, f, Some(p), route(Component::Tau))?,
        None => f,
    };
    bundle.hk.forward(tape, f, route(Component::Hk))?.cross_entropy(labels)
}

/// Query projection `h_ρ ∘ τ([φ(x′), p])` on the tape.
fn query_forward<'t>(
    tape: &'t Tape,
    phi: &FeatureExtractor,
    tau: &crate::model::FeatureTransformer,
    hrho: &ProjectionHead,
    prompts: Option<(&PromptSet, Route)>,
    x: Var<'t>,
    route: impl Fn(Component) -> Route,
) -> Result<Var<'t>> {
    let f = phi.forward(tape, x, route(Component::Phi))?;
    let f = match prompts.and_then(|(p, r)| bind_prompts(tape, p, r)) {
        Some(p) => tau.forward_features(tape, f, Some(p), route(Component::Tau))?,
        None => f,
    };
    hrho.forward(tape, f, route(Component::Hrho))
}

/// Positive keys `h̃_ρ ∘ τ([φ̃(x″), p])`, computed off the training tape.
fn key_forward(
    momentum: &MomentumEncoders,
    tau: &crate::model::FeatureTransformer,
    prompts: Option<&PromptSet>,
    x: &[Scalar],
    rows: usize,
) -> Result<Vec<Scalar>> {
    let tape = Tape::new();
    let input = tape.input(rows, x.len() / rows, x.to_vec())?;
    let q = query_forward(
        &tape,
        &momentum.phi,
        tau,
        &momentum.hrho,
        prompts.map(|p| (p, Route::Frozen)),
        input,
        |_| Route::Frozen,
    )?;
    Ok(q.value())
}

/// `(q, k₊)` for a batch of two-view pairs; both row-normalized, `k₊` constant.
pub fn two_view_forward(
    state: &ClientState,
    bundle: &ModelBundle,
    momentum: &MomentumEncoders,
    view_q: &[Scalar],
    view_k: &[Scalar],
    rows: usize,
) -> Result<(Vec<Scalar>, Vec<Scalar>)> {
    let prompts = con_prompts(state).map(|(p, _)| p);
    let tape = Tape::new();
    let x = tape.input(rows, view_q.len() / rows, view_q.to_vec())?;
    let q = query_forward(
        &tape,
        &bundle.phi,
        &bundle.tau,
        &bundle.hrho,
        prompts.map(|p| (p, Route::Frozen)),
        x,
        |_| Route::Frozen,
    )?;
    let k = key_forward(momentum, &bundle.tau, prompts, view_k, rows)?;
    Ok((q.value(), k))
}

fn check_finite(v: Scalar, what: &str, state: &ClientState, phase: Phase) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "{what} = {v} on client {} during {phase:?}",
            state.client_id
        )))
    }
}

/// One SGD step on one batch. Returns the unweighted `(L_CE, L_Con)` values.
fn train_step(
    state: &mut ClientState,
    bundle: &mut ModelBundle,
    phase: Phase,
    hyper: &ClientHyper,
    batch: &[usize],
) -> Result<(Scalar, Option<Scalar>)> {
    let routing = hyper.routing;
    let (xs, labels) = state.data.gather(batch);
    let rows = batch.len();
    let cols = state.data.input_dim();

    let mut trainable: BTreeSet<Component> = BTreeSet::new();
    let ce_used: &[Component] = if state.p_kappa.is_empty() {
        &[Component::Phi, Component::Hk]
    } else {
        &[Component::Phi, Component::Tau, Component::Hk, Component::PKappa]
    };
    let ce_route = |c: Component| routing.route(phase, Loss::Ce, c);
    trainable.extend(ce_used.iter().filter(|&&c| ce_route(c) == Route::Train));

    let tape = Tape::new();
    let x = tape.input(rows, cols, xs.clone())?;
    let ce = ce_forward(&tape, bundle, &state.p_kappa, x, &labels, ce_route)?;
    let ce_value = ce.item();
    check_finite(ce_value, "L_CE", state, phase)?;
    let mut loss = ce.scale(hyper.ce_weight);

    let mut con_out = None;
    if hyper.contrastive {
        let mut view_q = Vec::with_capacity(xs.len());
        let mut view_k = Vec::with_capacity(xs.len());
        for row in xs.chunks(cols) {
            let (a, b) = hyper.augmentation.two_views(row, &mut state.augment_rng);
            view_q.extend(a);
            view_k.extend(b);
        }
        let con_route = |c: Component| routing.route(phase, Loss::Con, c);
        let prompts = con_prompts(state);
        let mut con_used = vec![Component::Phi, Component::Hrho];
        let prompt_route = match prompts {
            Some((_, trainable_prompts)) => {
                con_used.push(Component::Tau);
                if trainable_prompts {
                    con_used.push(Component::PRho);
                    con_route(Component::PRho)
                } else {
                    Route::Frozen
                }
            }
            None => Route::Frozen,
        };
        trainable.extend(con_used.iter().filter(|&&c| con_route(c) == Route::Train));

        let momentum = state.momentum.as_ref().expect("momentum encoders built at round start");
        let keys = key_forward(momentum, &bundle.tau, prompts.map(|(p, _)| p), &view_k, rows)?;
        let xq = tape.input(rows, cols, view_q)?;
        let q = query_forward(
            &tape,
            &bundle.phi,
            &bundle.tau,
            &bundle.hrho,
            prompts.map(|(p, _)| (p, prompt_route)),
            xq,
            con_route,
        )?;
        let k = tape.input(rows, q.cols(), keys.clone())?;
        let con = info_nce_batch(q, k, &state.queue, hyper.temperature)?;
        let con_value = con.item();
        check_finite(con_value, "L_Con", state, phase)?;
        loss = loss.add(&con.scale(hyper.con_weight))?;
        con_out = Some((con_value, keys));
    }

    let mut grads = tape.backward(loss)?;
    for c in trainable {
        let tensors = component_tensors(c, bundle, &mut state.p_kappa, &mut state.p_rho);
        let mut group = ParamGroup::new(c.name(), hyper.lr.get(c), tensors)?;
        sgd_step(&mut group, &mut grads)?;
    }

    Ok((
        ce_value,
        match con_out {
            Some((v, keys)) => {
                state
                    .momentum
                    .as_mut()
                    .expect("momentum encoders built at round start")
                    .update(&bundle.phi, &bundle.hrho)?;
                state.queue.push(&keys)?;
                Some(v)
            }
            None => None,
        },
    ))
}

/// One pass over the client's data in reshuffled mini-batches.
pub fn run_epoch(
    state: &mut ClientState,
    bundle: &mut ModelBundle,
    phase: Phase,
    hyper: &ClientHyper,
) -> Result<LossMeans> {
    if state.data.is_empty() {
        return Err(Error::Empty("client dataset"));
    }
    if hyper.contrastive && state.momentum.is_none() {
        state.momentum = Some(MomentumEncoders::from_online(
            &bundle.phi,
            &bundle.hrho,
            hyper.momentum,
        )?);
    }
    let mut order: Vec<usize> = (0..state.data.len()).collect();
    order.shuffle(&mut state.shuffle_rng);
    let mut acc = LossAccumulator::default();
    for batch in order.chunks(hyper.batch_size) {
        let (ce, con) = train_step(state, bundle, phase, hyper, batch)?;
        acc.add(Some(ce), con);
    }
    Ok(acc.means())
}

/// Feature-learning epoch (`p_κ`, τ from L_CE; φ, τ, h_ρ from L_Con).
pub fn feature_learning_epoch(
    state: &mut ClientState,
    bundle: &mut ModelBundle,
    hyper: &ClientHyper,
) -> Result<LossMeans> {
    run_epoch(state, bundle, Phase::FeatureLearning, hyper)
}

/// Task-adaptation epoch (φ, τ, h_κ from L_CE; `p_ρ` from L_Con).
pub fn task_adaptation_epoch(
    state: &mut ClientState,
    bundle: &mut ModelBundle,
    hyper: &ClientHyper,
) -> Result<LossMeans> {
    run_epoch(state, bundle, Phase::TaskAdaptation, hyper)
}

fn mean_of(epochs: &[LossMeans]) -> LossMeans {
    let mut acc = LossAccumulator::default();
    epochs.iter().for_each(|e| acc.add(e.ce, e.con));
    acc.means()
}

/// Downloads `global`, trains locally and returns the upload. Only the
/// client's private fields change; `global` is untouched.
pub fn local_round(
    state: &mut ClientState,
    global: &ModelBundle,
    plan: PhasePlan,
    hyper: &ClientHyper,
) -> Result<LocalOutcome> {
    hyper.validate()?;
    let mut bundle = global.clone();
    if hyper.personalized_classifier {
        if let Some(hk) = &state.local_hk {
            bundle.hk = hk.clone();
        }
    }
    state.momentum = if hyper.contrastive {
        Some(MomentumEncoders::from_online(
            &bundle.phi,
            &bundle.hrho,
            hyper.momentum,
        )?)
    } else {
        None
    };

    let losses = if hyper.alternating {
        let f = (0..plan.r_f)
            .map(|_| feature_learning_epoch(state, &mut bundle, hyper))
            .collect::<Result<Vec<_>>>()?;
        let a = (0..plan.r_a)
            .map(|_| task_adaptation_epoch(state, &mut bundle, hyper))
            .collect::<Result<Vec<_>>>()?;
        let all: Vec<LossMeans> = f.iter().chain(&a).copied().collect();
        LocalLosses {
            feature_learning: mean_of(&f),
            task_adaptation: mean_of(&a),
            overall: mean_of(&all),
        }
    } else {
        let j = (0..plan.total())
            .map(|_| run_epoch(state, &mut bundle, Phase::Joint, hyper))
            .collect::<Result<Vec<_>>>()?;
        LocalLosses {
            feature_learning: mean_of(&j),
            task_adaptation: LossMeans::default(),
            overall: mean_of(&j),
        }
    };

    if hyper.personalized_classifier {
        state.local_hk = Some(bundle.hk.clone());
    }
    let payload = UploadPayload::new(state.client_id, &bundle, state.sample_count())?;
    Ok(LocalOutcome { payload, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tensor::test_tol;
    use crate::data::make_synthetic;
    use crate::model::{init_bundle, ModelConfig};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            hidden: vec![8],
            feature_dim: 6,
            num_classes: 3,
            proj_dim: 4,
            ffn: false,
            attn_residual: true,
        }
    }

    fn setup(n_kappa: usize, n_rho: usize) -> (ClientState, ModelBundle, ClientHyper) {
        let cfg = small_cfg();
        let data = make_synthetic(3, 6, 8, 2.0, 3).unwrap();
        let spec = ClientSpec {
            n_kappa,
            n_rho,
            feature_dim: 6,
            proj_dim: 4,
            queue_size: 16,
        };
        let state = ClientState::new(0, data, None, spec, 11).unwrap();
        let bundle = init_bundle(&cfg, 5).unwrap();
        let hyper = ClientHyper {
            batch_size: 8,
            momentum: 0.9,
            temperature: 0.5,
            ..ClientHyper::default()
        };
        (state, bundle, hyper)
    }

    #[test]
    fn routing_table_matches_phases() {
        let t = RoutingTable::default();
        use Component::*;
        assert_eq!(t.routed(Phase::FeatureLearning, Loss::Ce), &[PKappa, Tau]);
        assert_eq!(t.routed(Phase::FeatureLearning, Loss::Con), &[Phi, Tau, Hrho]);
        assert_eq!(t.routed(Phase::TaskAdaptation, Loss::Ce), &[Phi, Tau, Hk]);
        assert_eq!(t.routed(Phase::TaskAdaptation, Loss::Con), &[PRho]);
        let t2 = RoutingTable {
            tau_con_grad_phase2: true,
        };
        assert!(t2.routed(Phase::TaskAdaptation, Loss::Con).contains(&Tau));
    }

    #[test]
    fn phase_plan_validation() {
        assert_eq!(PhasePlan { r_f: 4, r_a: 1 }.validate(5).unwrap(), None);
        assert!(PhasePlan { r_f: 3, r_a: 2 }.validate(5).unwrap().is_none());
        assert!(PhasePlan { r_f: 2, r_a: 3 }.validate(5).unwrap().is_some());
        match (PhasePlan { r_f: 3, r_a: 3 }).validate(5) {
            Err(Error::Constraint { constraint, .. }) => assert_eq!(constraint, "R_f + R_a = R"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn feature_learning_freezes_hk_and_p_rho() {
        let (mut state, mut bundle, hyper) = setup(3, 2);
        let (hk, p_rho, phi) = (bundle.hk.clone(), state.p_rho.clone(), bundle.phi.clone());
        state.momentum = Some(MomentumEncoders::from_online(&bundle.phi, &bundle.hrho, 0.9).unwrap());
        feature_learning_epoch(&mut state, &mut bundle, &hyper).unwrap();
        assert_eq!(bundle.hk, hk);
        assert_eq!(state.p_rho, p_rho);
        assert_ne!(bundle.phi, phi);
    }

    #[test]
    fn task_adaptation_freezes_p_kappa_and_hrho() {
        let (mut state, mut bundle, hyper) = setup(3, 2);
        let (hrho, p_kappa) = (bundle.hrho.clone(), state.p_kappa.clone());
        let p_rho = state.p_rho.clone();
        state.momentum = Some(MomentumEncoders::from_online(&bundle.phi, &bundle.hrho, 0.9).unwrap());
        task_adaptation_epoch(&mut state, &mut bundle, &hyper).unwrap();
        assert_eq!(bundle.hrho, hrho);
        assert_eq!(state.p_kappa, p_kappa);
        assert_ne!(state.p_rho, p_rho);
    }

    #[test]
    fn zero_lr_payload_equals_global() {
        let (mut state, bundle, mut hyper) = setup(3, 2);
        hyper.lr = LearningRates::uniform(0.0);
        let out = local_round(&mut state, &bundle, PhasePlan::default(), &hyper).unwrap();
        assert_eq!(out.payload.params, bundle.to_params());
        assert!(out.payload.params.keys().all(|k| !is_prompt_key(k)));
        assert_eq!(out.payload.sample_count, 24);
    }

    #[test]
    fn round_is_deterministic_and_leaves_global_alone() {
        let (state, bundle, hyper) = setup(3, 2);
        let before = bundle.clone();
        let (mut a, mut b) = (state.clone(), state);
        let pa = local_round(&mut a, &bundle, PhasePlan::default(), &hyper).unwrap();
        let pb = local_round(&mut b, &bundle, PhasePlan::default(), &hyper).unwrap();
        assert_eq!(pa.payload, pb.payload);
        assert_eq!(bundle, before);
        assert_eq!(a.p_kappa, b.p_kappa);
    }

    #[test]
    fn identity_views_with_zero_momentum_give_equal_query_and_key() {
        let (state, bundle, _) = setup(3, 2);
        let m = MomentumEncoders::from_online(&bundle.phi, &bundle.hrho, 0.0).unwrap();
        let (x, _) = state.data.gather(&[0, 1, 2]);
        let (q, k) = two_view_forward(&state, &bundle, &m, &x, &x, 3).unwrap();
        assert_eq!(q, k);
        for row in q.chunks(4) {
            let n: Scalar = row.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < test_tol(1e-12));
        }
    }

    #[test]
    fn empty_prompts_still_train() {
        let (mut state, bundle, hyper) = setup(0, 0);
        let out = local_round(&mut state, &bundle, PhasePlan::default(), &hyper).unwrap();
        assert_ne!(out.payload.params, bundle.to_params());
    }
}
