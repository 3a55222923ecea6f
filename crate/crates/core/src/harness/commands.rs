use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build, load_data, partition, probe_data, ExperimentConfig};
use crate::client::ClientState;
use crate::data::PartitionAssignment;
use crate::error::{Error, Result};
use crate::eval::{best_round, linear_probe, write_metrics_csv, AblationConfig, RoundReport};
use crate::io::{atomic_write, write_csv};
use crate::model::{extract, ModelBundle, ParamMap};
use crate::server::{run_training, Execution, GlobalState, RoundObserver, UploadPayload};

pub const CHECKPOINT_FORMAT: &str = "fedpft-bundle-v1";
pub const PROMPTS_FORMAT: &str = "fedpft-prompts-v1";

/// Final state of a training run.
pub struct RunOutput {
    pub global: GlobalState,
    pub clients: Vec<ClientState>,
    pub reports: Vec<RoundReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub rounds: usize,
    pub clients: usize,
    pub ablation: AblationConfig,
    pub best_mean_accuracy: f64,
    pub best_round: usize,
    pub final_mean_accuracy: f64,
    pub payload_params: usize,
}

impl TrainSummary {
    fn new(cfg: &ExperimentConfig, reports: &[RoundReport]) -> Self {
        let (best_round, best) = best_round(reports).unwrap_or((0, 0.0));
        TrainSummary {
            seed: cfg.seed,
            rounds: reports.len(),
            clients: cfg.federation.clients,
            ablation: cfg.ablation,
            best_mean_accuracy: best,
            best_round,
            final_mean_accuracy: reports.last().map_or(0.0, |r| r.mean_accuracy),
            payload_params: reports.first().map_or(0, |r| r.payload_params),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

fn write_bundle(path: &Path, bundle: &ModelBundle) -> Result<()> {
    atomic_write(path, bundle.to_params().to_json(CHECKPOINT_FORMAT)?.as_bytes())
}

/// Prompt sets of one client, keyed `p_kappa` / `p_rho` (absent when disabled).
pub fn prompt_params(client: &ClientState) -> ParamMap {
    [&client.p_kappa, &client.p_rho]
        .into_iter()
        .filter_map(|p| p.matrix().map(|m| (p.kind().key().to_string(), m.clone())))
        .collect()
}

fn write_prompts(dir: &Path, clients: &[ClientState]) -> Result<()> {
    for c in clients {
        let path = dir.join(format!("client_{:03}.json", c.client_id));
        atomic_write(&path, prompt_params(c).to_json(PROMPTS_FORMAT)?.as_bytes())?;
    }
    Ok(())
}

struct Checkpointer<'a> {
    out: Option<&'a Path>,
    every: usize,
}

impl RoundObserver for Checkpointer<'_> {
    fn on_round(
        &mut self,
        global: &GlobalState,
        clients: &[ClientState],
        _: &[UploadPayload],
        _: &RoundReport,
    ) -> Result<()> {
        let Some(out) = self.out else { return Ok(()) };
        if self.every == 0 || !global.round.is_multiple_of(self.every) {
            return Ok(());
        }
        let dir = out.join("checkpoints").join(format!("round_{:04}", global.round));
        write_bundle(&dir.join("bundle.json"), &global.bundle)?;
        write_prompts(&dir.join("prompts"), clients)
    }
}

/// Builds and trains without writing anything (unless `out` is given for
/// periodic checkpoints). `workers` overrides the configured pool size.
pub fn run(cfg: &ExperimentConfig, workers: Option<usize>, out: Option<&Path>) -> Result<RunOutput> {
    let (mut global, mut clients) = build(cfg)?;
    let exec = Execution {
        workers: workers.unwrap_or(cfg.federation.workers),
    };
    let mut obs = Checkpointer {
        out,
        every: cfg.federation.checkpoint_every,
    };
    let reports = run_training(
        &mut global,
        &mut clients,
        cfg.federation.rounds,
        cfg.plan(),
        &cfg.client_hyper(),
        exec,
        &mut obs,
    )?;
    Ok(RunOutput {
        global,
        clients,
        reports,
    })
}

/// Trains and writes `metrics.csv`, `checkpoint.json`, `prompts/`,
/// `config.toml` and `summary.json` into `out`.
pub fn train(cfg: &ExperimentConfig, out: &Path, workers: Option<usize>) -> Result<(TrainSummary, RunOutput)> {
    let result = run(cfg, workers, Some(out))?;
    atomic_write(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    write_metrics_csv(&out.join("metrics.csv"), &result.reports)?;
    write_bundle(&out.join("checkpoint.json"), &result.global.bundle)?;
    write_prompts(&out.join("prompts"), &result.clients)?;
    let summary = TrainSummary::new(cfg, &result.reports);
    write_json(&out.join("summary.json"), &summary)?;
    Ok((summary, result))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub flags: AblationConfig,
    pub best_mean_accuracy: f64,
    pub best_round: usize,
    pub final_mean_accuracy: f64,
}

/// Runs each named setting at the config's seed. Writes `ablation.csv` when
/// `out` is given.
pub fn ablate(
    cfg: &ExperimentConfig,
    settings: &[String],
    out: Option<&Path>,
    workers: Option<usize>,
) -> Result<Vec<AblationRow>> {
    let parsed = settings
        .iter()
        .map(|s| Ok((s.trim().to_ascii_uppercase(), AblationConfig::setting(s)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (name, flags) in parsed {
        let mut c = cfg.clone();
        c.ablation = AblationConfig {
            personalized_classifier: cfg.ablation.personalized_classifier,
            ..flags
        };
        let result = run(&c, workers, None)?;
        let summary = TrainSummary::new(&c, &result.reports);
        log::info!("setting {name}: best mean accuracy {:.4}", summary.best_mean_accuracy);
        rows.push(AblationRow {
            setting: name,
            flags: c.ablation,
            best_mean_accuracy: summary.best_mean_accuracy,
            best_round: summary.best_round,
            final_mean_accuracy: summary.final_mean_accuracy,
        });
    }
    if let Some(out) = out {
        let header: Vec<String> = [
            "setting",
            "p_kappa",
            "alternating",
            "l_con",
            "p_rho",
            "personalized_classifier",
            "best_mean_acc",
            "best_round",
            "final_mean_acc",
        ]
        .map(String::from)
        .to_vec();
        let lines = rows.iter().map(|r| {
            std::iter::once(r.setting.clone())
                .chain(r.flags.flags().iter().map(|f| f.to_string()))
                .chain([
                    format!("{:?}", r.best_mean_accuracy),
                    r.best_round.to_string(),
                    format!("{:?}", r.final_mean_accuracy),
                ])
                .collect::<Vec<_>>()
        });
        write_csv(&out.join("ablation.csv"), &header, lines)?;
    }
    Ok(rows)
}

/// Reads a bundle checkpoint written by [`train`].
pub fn read_checkpoint(path: &Path, cfg: &ExperimentConfig) -> Result<ModelBundle> {
    let (format, params) = ParamMap::read(path)?;
    if format != CHECKPOINT_FORMAT {
        return Err(Error::Schema(format!(
            "{} has format `{format}`, expected `{CHECKPOINT_FORMAT}`",
            path.display()
        )));
    }
    ModelBundle::from_params(&cfg.model, &params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub samples: usize,
    pub feature_dim: usize,
}

/// Linear-probe accuracy of the extractor φ in `bundle` on the probe pool.
pub fn probe_bundle(cfg: &ExperimentConfig, bundle: &ModelBundle) -> Result<ProbeReport> {
    let test = probe_data(cfg)?;
    let features = extract(&bundle.phi, test.features(), test.input_dim())?;
    let accuracy = linear_probe(&features, test.labels(), cfg.model.num_classes, cfg.seed, cfg.probe)?;
    Ok(ProbeReport {
        accuracy,
        samples: test.len(),
        feature_dim: bundle.phi.output_dim(),
    })
}

pub fn probe(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<ProbeReport> {
    probe_bundle(cfg, &read_checkpoint(checkpoint, cfg)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub scheme: String,
    pub class_histograms: Vec<Vec<usize>>,
    pub assignment: PartitionAssignment,
}

pub fn cmd_partition(cfg: &ExperimentConfig) -> Result<PartitionReport> {
    let (train, _) = load_data(cfg)?;
    let assignment = partition(cfg, train.labels())?;
    Ok(PartitionReport {
        scheme: cfg.partition.scheme.clone(),
        class_histograms: assignment.client_histograms(train.labels(), cfg.model.num_classes),
        assignment,
    })
}
