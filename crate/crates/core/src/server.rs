//! Server side: sample-weighted aggregation, client sampling and the
//! training loop.

use crate::autodiff::{Scalar, Tensor};
use crate::client::{is_prompt_key, local_round, ClientHyper, ClientState, LocalOutcome, LossMeans, PhasePlan};
use crate::error::{Error, Result};
use crate::eval::{accuracy_with, mean_std, RoundReport};
use crate::model::{ModelBundle, ParamMap};
use crate::seeding::{self, tags, Rng};

pub use crate::client::UploadPayload;

/// Sample-weighted mean of the payloads' parameters.
///
/// Payloads are ordered by client id and averaged as
/// `θ₁ + Σᵢ wᵢ(θᵢ − θ₁)`, so the result does not depend on the order of the
/// input and identical payloads reproduce their values exactly.
pub fn aggregate_params(payloads: &[UploadPayload]) -> Result<ParamMap> {
    let Some(first) = payloads.first() else {
        return Err(Error::Empty("payload list"));
    };
    for p in payloads {
        if let Some(k) = p.params.keys().find(|k| is_prompt_key(k)) {
            return Err(Error::Schema(format!(
                "client {} uploaded prompt key `{k}`",
                p.client_id
            )));
        }
        if !p.params.same_schema(&first.params) {
            return Err(Error::Schema(format!(
                "client {} payload schema differs from client {}",
                p.client_id, first.client_id
            )));
        }
        if p.sample_count == 0 {
            return Err(Error::InvalidArgument(format!(
                "client {} reports zero samples",
                p.client_id
            )));
        }
    }
    let mut order: Vec<&UploadPayload> = payloads.iter().collect();
    order.sort_by_key(|p| p.client_id);
    if order.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::InvalidArgument("duplicate client id among payloads".into()));
    }
    let total: usize = order.iter().map(|p| p.sample_count).sum();
    let weights: Vec<Scalar> = order
        .iter()
        .map(|p| p.sample_count as Scalar / total as Scalar)
        .collect();

    let anchor = &order[0].params;
    let mut out = ParamMap::new();
    for (key, base) in anchor.iter() {
        let mut data = base.data().to_vec();
        for (p, &w) in order.iter().zip(&weights).skip(1) {
            let theta = p.params.get(key).expect("schema checked").data();
            data.iter_mut()
                .zip(theta.iter().zip(base.data()))
                .for_each(|(acc, (t, b))| *acc += w * (t - b));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("aggregate of `{key}`")));
        }
        out.insert(key.clone(), Tensor::param(base.shape().to_vec(), data)?);
    }
    Ok(out)
}

/// [`aggregate_params`] loaded into a copy of `template`.
pub fn aggregate(payloads: &[UploadPayload], template: &ModelBundle) -> Result<ModelBundle> {
    let params = aggregate_params(payloads)?;
    let mut bundle = template.clone();
    bundle.load_params(&params)?;
    Ok(bundle)
}

/// `max(1, round(fraction·n))` distinct ids drawn uniformly, ascending.
pub fn sample_clients(n: usize, fraction: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "participation fraction {fraction} outside (0, 1]"
        )));
    }
    if n == 0 {
        return Err(Error::Empty("client population"));
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut ids = rand::seq::index::sample(rng, n, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Server state between rounds.
#[derive(Clone, Debug)]
pub struct GlobalState {
    pub round: usize,
    pub bundle: ModelBundle,
    pub fraction: f64,
    pub root_seed: u64,
}

impl GlobalState {
    pub fn new(bundle: ModelBundle, fraction: f64, root_seed: u64) -> Self {
        GlobalState {
            round: 0,
            bundle,
            fraction,
            root_seed,
        }
    }
}

/// How client rounds are executed. Results do not depend on `workers`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Execution {
    /// 1 runs clients sequentially; more uses a thread pool of that size
    /// (when built with the `parallel` feature).
    pub workers: usize,
}

impl Default for Execution {
    fn default() -> Self {
        Execution { workers: 1 }
    }
}

enum Runner {
    Sequential,
    #[cfg(feature = "parallel")]
    Pool(rayon::ThreadPool),
}

impl Runner {
    fn new(exec: Execution) -> Result<Self> {
        if exec.workers <= 1 {
            return Ok(Runner::Sequential);
        }
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(exec.workers)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            Ok(Runner::Pool(pool))
        }
        #[cfg(not(feature = "parallel"))]
        {
            log::warn!(
                "built without the `parallel` feature; running {} workers sequentially",
                exec.workers
            );
            Ok(Runner::Sequential)
        }
    }

    /// Applies `f` to every element, returning results in input order.
    fn map<T, R, F>(&self, items: &mut [T], f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(&mut T) -> R + Sync + Send,
    {
        match self {
            Runner::Sequential => items.iter_mut().map(f).collect(),
            #[cfg(feature = "parallel")]
            Runner::Pool(pool) => {
                use rayon::prelude::*;
                pool.install(|| items.par_iter_mut().map(f).collect())
            }
        }
    }
}

fn mean_losses(items: impl Iterator<Item = LossMeans>) -> LossMeans {
    let (mut ce, mut nce, mut con, mut ncon) = (0.0, 0, 0.0, 0);
    for l in items {
        if let Some(v) = l.ce {
            ce += v;
            nce += 1;
        }
        if let Some(v) = l.con {
            con += v;
            ncon += 1;
        }
    }
    LossMeans {
        ce: (nce > 0).then(|| ce / nce as Scalar),
        con: (ncon > 0).then(|| con / ncon as Scalar),
    }
}

/// Called after every round with the new server state, all clients, the
/// round's payloads and its report.
pub trait RoundObserver {
    fn on_round(
        &mut self,
        global: &GlobalState,
        clients: &[ClientState],
        payloads: &[UploadPayload],
        report: &RoundReport,
    ) -> Result<()>;
}

impl<F> RoundObserver for F
where
    F: FnMut(&GlobalState, &[ClientState], &[UploadPayload], &RoundReport) -> Result<()>,
{
    fn on_round(
        &mut self,
        global: &GlobalState,
        clients: &[ClientState],
        payloads: &[UploadPayload],
        report: &RoundReport,
    ) -> Result<()> {
        self(global, clients, payloads, report)
    }
}

/// Runs `rounds` rounds of sample → broadcast → local rounds → aggregate →
/// evaluate. `clients[i]` must have `client_id == i` and a test set.
pub fn run_training(
    global: &mut GlobalState,
    clients: &mut [ClientState],
    rounds: usize,
    plan: PhasePlan,
    hyper: &ClientHyper,
    exec: Execution,
    observer: &mut dyn RoundObserver,
) -> Result<Vec<RoundReport>> {
    if let Some((i, c)) = clients.iter().enumerate().find(|(i, c)| c.client_id != *i) {
        return Err(Error::InvalidArgument(format!(
            "client at position {i} has id {}",
            c.client_id
        )));
    }
    if let Some(c) = clients.iter().find(|c| c.test.is_none()) {
        return Err(Error::InvalidArgument(format!(
            "client {} has no test set",
            c.client_id
        )));
    }
    hyper.validate()?;
    let runner = Runner::new(exec)?;
    let mut reports = Vec::with_capacity(rounds);

    for _ in 0..rounds {
        let t = global.round;
        let mut rng = seeding::stream(global.root_seed, tags::SAMPLE_CLIENTS, t as u64);
        let selected = sample_clients(clients.len(), global.fraction, &mut rng)?;
        let mut active: Vec<&mut ClientState> = clients
            .iter_mut()
            .filter(|c| selected.binary_search(&c.client_id).is_ok())
            .collect();

        let snapshot = &global.bundle;
        let outcomes: Vec<LocalOutcome> = runner
            .map(&mut active, |c| local_round(c, snapshot, plan, hyper))
            .into_iter()
            .collect::<Result<_>>()?;
        let payloads: Vec<UploadPayload> = outcomes.iter().map(|o| o.payload.clone()).collect();

        let bundle = match aggregate(&payloads, &global.bundle) {
            Err(Error::NonFinite(detail)) => {
                log::error!("round {t}: {detail}");
                return Err(Error::NonFiniteAggregate { round: t });
            }
            other => other?,
        };

        let accuracies: Vec<f64> = runner
            .map(&mut active, |c| {
                let test = c.test.as_ref().expect("checked above");
                accuracy_with(&bundle, c.eval_classifier(&bundle), &c.p_kappa, test)
            })
            .into_iter()
            .collect::<Result<_>>()?;
        let (mean, std) = mean_std(&accuracies);
        let report = RoundReport {
            round: t,
            clients: selected.clone(),
            accuracies,
            client_losses: outcomes.iter().map(|o| o.losses.overall).collect(),
            mean_accuracy: mean,
            std_accuracy: std,
            feature_learning: mean_losses(outcomes.iter().map(|o| o.losses.feature_learning)),
            task_adaptation: mean_losses(outcomes.iter().map(|o| o.losses.task_adaptation)),
            payload_params: payloads[0].params.numel(),
        };
        log::info!(
            "round {t}: mean acc {:.4} ± {:.4} over {} clients",
            report.mean_accuracy,
            report.std_accuracy,
            selected.len()
        );

        global.bundle = bundle;
        global.round += 1;
        observer.on_round(global, clients, &payloads, &report)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Observer that does nothing.
pub fn no_observer() -> impl RoundObserver {
    |_: &GlobalState, _: &[ClientState], _: &[UploadPayload], _: &RoundReport| Ok(())
}
