//! Experiment assembly and the train / ablate / probe / partition commands.

mod commands;
mod config;

pub use commands::{
    ablate, cmd_partition, probe, probe_bundle, prompt_params, read_checkpoint, run, train, AblationRow,
    PartitionReport, ProbeReport, RunOutput, TrainSummary, CHECKPOINT_FORMAT, PROMPTS_FORMAT,
};
pub use config::{
    load_config, load_config_str, parse_override, DataConfig, ExperimentConfig, FederationConfig, OptimConfig,
    PartitionConfig, Preset, PromptConfig,
};

use std::path::Path;

use crate::autodiff::Scalar;
use crate::client::{ClientSpec, ClientState};
use crate::data::{
    dirichlet_partition, make_synthetic_split, matched_partition, pathological_partition, Dataset, PartitionAssignment,
};
use crate::error::{Error, Result};
use crate::model::init_bundle;
use crate::seeding::{derive_seed, tags};
use crate::server::GlobalState;

/// Train and test pools of an experiment.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let c = cfg.model.num_classes;
    let (train, test) = match cfg.data.source.as_str() {
        "synthetic" => {
            let centers = derive_seed(cfg.seed, tags::DATA, 0);
            let train = make_synthetic_split(
                c,
                cfg.model.input_dim,
                cfg.data.per_class,
                spread(cfg),
                centers,
                derive_seed(cfg.seed, tags::DATA, 1),
            )?;
            let test = make_synthetic_split(
                c,
                cfg.model.input_dim,
                cfg.data.test_per_class,
                spread(cfg),
                centers,
                derive_seed(cfg.seed, tags::TEST_DATA, 0),
            )?;
            (train, test)
        }
        "csv" => {
            let read = |p: &Option<String>| Dataset::from_csv(Path::new(p.as_deref().unwrap_or_default()), Some(c));
            (read(&cfg.data.train_csv)?, read(&cfg.data.test_csv)?)
        }
        other => return Err(Error::Config(format!("unknown data source `{other}`"))),
    };
    for d in [&train, &test] {
        if d.input_dim() != cfg.model.input_dim {
            return Err(Error::Config(format!(
                "data has {} features but model.input_dim = {}",
                d.input_dim(),
                cfg.model.input_dim
            )));
        }
    }
    Ok((train, test))
}

#[allow(clippy::unnecessary_cast)]
fn spread(cfg: &ExperimentConfig) -> Scalar {
    cfg.data.spread as Scalar
}

/// Labeled pool for linear probing: a fresh synthetic draw around the same
/// class centers, or the test pool for CSV data.
pub fn probe_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.data.source.as_str() {
        "synthetic" => make_synthetic_split(
            cfg.model.num_classes,
            cfg.model.input_dim,
            cfg.data.probe_per_class,
            spread(cfg),
            derive_seed(cfg.seed, tags::DATA, 0),
            derive_seed(cfg.seed, "probe-data", 0),
        ),
        _ => Ok(load_data(cfg)?.1),
    }
}

/// Training partition for the configured scheme.
pub fn partition(cfg: &ExperimentConfig, labels: &[usize]) -> Result<PartitionAssignment> {
    let p = &cfg.partition;
    let n = cfg.federation.clients;
    match p.scheme.as_str() {
        "dirichlet" => dirichlet_partition(labels, n, p.alpha, cfg.seed),
        "pathological" => pathological_partition(labels, n, p.classes_per_client, cfg.seed),
        other => Err(Error::Config(format!("unknown partition scheme `{other}`"))),
    }
}

/// Initial server state and clients, each with a test split that follows
/// its training label distribution.
pub fn build(cfg: &ExperimentConfig) -> Result<(GlobalState, Vec<ClientState>)> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    let part = partition(cfg, train.labels())?;
    let test_part = matched_partition(train.labels(), &part, test.labels(), cfg.seed)?;
    let a = &cfg.ablation;
    let spec = ClientSpec {
        n_kappa: if a.use_p_kappa { cfg.prompts.n_kappa } else { 0 },
        n_rho: if a.use_p_rho { cfg.prompts.n_rho } else { 0 },
        feature_dim: cfg.model.feature_dim,
        proj_dim: cfg.model.proj_dim,
        queue_size: cfg.optim.queue_size,
    };
    let clients = part
        .clients
        .iter()
        .zip(&test_part.clients)
        .enumerate()
        .map(|(i, (tr, te))| {
            if te.is_empty() {
                return Err(Error::InfeasiblePartition(format!(
                    "client {i} gets no test samples; raise data.test_per_class"
                )));
            }
            ClientState::new(i, train.subset(tr)?, Some(test.subset(te)?), spec, cfg.seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let bundle = init_bundle(&cfg.model, cfg.seed)?;
    Ok((
        GlobalState::new(bundle, cfg.federation.participation, cfg.seed),
        clients,
    ))
}
