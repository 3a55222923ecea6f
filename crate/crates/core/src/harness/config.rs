//! Experiment configuration: presets, TOML files and `section.key=value`
//! overrides, merged in that order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::client::{ClientHyper, LearningRates, PhasePlan, RoutingTable};
use crate::data::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::eval::{AblationConfig, ProbeConfig};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `synthetic` or `csv`.
    pub source: String,
    pub per_class: usize,
    pub test_per_class: usize,
    /// Size of the separate linear-probe pool (synthetic data only).
    pub probe_per_class: usize,
    /// Distance of the class centers from the origin.
    pub spread: f64,
    pub train_csv: Option<String>,
    pub test_csv: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: "synthetic".into(),
            per_class: 500,
            test_per_class: 100,
            probe_per_class: 200,
            spread: 1.5,
            train_csv: None,
            test_csv: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub r_f: usize,
    pub r_a: usize,
    pub participation: f64,
    pub batch_size: usize,
    pub workers: usize,
    /// Write a checkpoint every this many rounds (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            clients: 40,
            rounds: 1000,
            local_epochs: 5,
            r_f: 4,
            r_a: 1,
            participation: 1.0,
            batch_size: 100,
            workers: 1,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub n_kappa: usize,
    pub n_rho: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig { n_kappa: 10, n_rho: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_phi: f64,
    pub lr_tau: f64,
    /// τ learning rate used when the contrastive loss is off.
    pub lr_tau_no_con: f64,
    pub lr_hk: f64,
    pub lr_hrho: f64,
    pub lr_p_kappa: f64,
    pub lr_p_rho: f64,
    pub momentum: f64,
    pub temperature: f64,
    pub queue_size: usize,
    pub ce_weight: f64,
    pub con_weight: f64,
    pub tau_con_grad_phase2: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_phi: 0.1,
            lr_tau: 0.01,
            lr_tau_no_con: 0.05,
            lr_hk: 0.1,
            lr_hrho: 0.1,
            lr_p_kappa: 0.1,
            lr_p_rho: 0.1,
            momentum: 0.999,
            temperature: 0.07,
            queue_size: 65536,
            ce_weight: 1.0,
            con_weight: 1.0,
            tau_con_grad_phase2: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    /// `dirichlet` or `pathological`.
    pub scheme: String,
    pub alpha: f64,
    pub classes_per_client: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            scheme: "dirichlet".into(),
            alpha: 0.5,
            classes_per_client: 2,
        }
    }
}

/// A complete experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: Option<String>,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub federation: FederationConfig,
    pub prompts: PromptConfig,
    pub optim: OptimConfig,
    pub augment: AugmentationPolicy,
    pub partition: PartitionConfig,
    pub ablation: AblationConfig,
    pub probe: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: None,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            federation: FederationConfig::default(),
            prompts: PromptConfig::default(),
            optim: OptimConfig::default(),
            augment: AugmentationPolicy::default(),
            partition: PartitionConfig::default(),
            ablation: AblationConfig::full(),
            probe: ProbeConfig::default(),
        }
    }
}

/// Named starting points for a config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Paper-scale hyperparameters.
    Paper,
    /// Small enough to run in seconds to minutes on a laptop.
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected paper or desk)"
            ))),
        }
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self::default(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn desk() -> Self {
        let mut c = Self::default();
        c.federation.clients = 8;
        c.federation.rounds = 60;
        c.federation.batch_size = 20;
        c.data.per_class = 50;
        c.data.test_per_class = 50;
        c.model.num_classes = 10;
        c.model.input_dim = 16;
        c.model.feature_dim = 16;
        c.optim.queue_size = 256;
        c
    }

    pub fn plan(&self) -> PhasePlan {
        PhasePlan {
            r_f: self.federation.r_f,
            r_a: self.federation.r_a,
        }
    }

    /// Checks every constraint; returns warnings that do not block a run.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        let f = &self.federation;
        if let Some(w) = self.plan().validate(f.local_epochs)? {
            warnings.push(w);
        }
        let constraint = |constraint: &'static str, ok: bool, detail: String| {
            if ok {
                Ok(())
            } else {
                Err(Error::Constraint { constraint, detail })
            }
        };
        constraint("clients ≥ 1", f.clients >= 1, format!("clients = {}", f.clients))?;
        constraint(
            "0 < participation ≤ 1",
            f.participation > 0.0 && f.participation <= 1.0,
            format!("participation = {}", f.participation),
        )?;
        constraint(
            "batch_size ≥ 1",
            f.batch_size >= 1,
            format!("batch_size = {}", f.batch_size),
        )?;
        constraint("workers ≥ 1", f.workers >= 1, format!("workers = {}", f.workers))?;
        let o = &self.optim;
        for (name, lr) in [
            ("lr_phi", o.lr_phi),
            ("lr_tau", o.lr_tau),
            ("lr_tau_no_con", o.lr_tau_no_con),
            ("lr_hk", o.lr_hk),
            ("lr_hrho", o.lr_hrho),
            ("lr_p_kappa", o.lr_p_kappa),
            ("lr_p_rho", o.lr_p_rho),
        ] {
            constraint(
                "learning rates ≥ 0",
                lr >= 0.0 && lr.is_finite(),
                format!("{name} = {lr}"),
            )?;
        }
        constraint(
            "0 ≤ momentum ≤ 1",
            (0.0..=1.0).contains(&o.momentum),
            format!("momentum = {}", o.momentum),
        )?;
        constraint(
            "temperature > 0",
            o.temperature > 0.0,
            format!("temperature = {}", o.temperature),
        )?;
        constraint(
            "queue_size ≥ 1",
            o.queue_size >= 1,
            format!("queue_size = {}", o.queue_size),
        )?;
        let p = &self.partition;
        match p.scheme.as_str() {
            "dirichlet" => constraint("alpha > 0", p.alpha > 0.0, format!("alpha = {}", p.alpha))?,
            "pathological" => constraint(
                "1 ≤ classes_per_client ≤ num_classes",
                (1..=self.model.num_classes).contains(&p.classes_per_client),
                format!("classes_per_client = {}", p.classes_per_client),
            )?,
            other => {
                return Err(Error::Config(format!(
                    "unknown partition scheme `{other}` (expected dirichlet or pathological)"
                )))
            }
        }
        match self.data.source.as_str() {
            "synthetic" => {
                constraint(
                    "per_class ≥ 1",
                    self.data.per_class >= 1,
                    format!("per_class = {}", self.data.per_class),
                )?;
                constraint(
                    "test_per_class ≥ 1",
                    self.data.test_per_class >= 1,
                    format!("test_per_class = {}", self.data.test_per_class),
                )?;
            }
            "csv" => {
                if self.data.train_csv.is_none() || self.data.test_csv.is_none() {
                    return Err(Error::Config("csv data needs data.train_csv and data.test_csv".into()));
                }
            }
            other => return Err(Error::Config(format!("unknown data source `{other}`"))),
        }
        self.augment.validate()?;
        self.model.validate()?;
        Ok(warnings)
    }

    /// Client hyperparameters implied by the optimizer and ablation sections.
    pub fn client_hyper(&self) -> ClientHyper {
        let o = &self.optim;
        let a = &self.ablation;
        #[allow(clippy::unnecessary_cast)]
        let s = |v: f64| v as Scalar;
        ClientHyper {
            lr: LearningRates {
                phi: s(o.lr_phi),
                tau: s(if a.use_l_con { o.lr_tau } else { o.lr_tau_no_con }),
                hk: s(o.lr_hk),
                hrho: s(o.lr_hrho),
                p_kappa: s(o.lr_p_kappa),
                p_rho: s(o.lr_p_rho),
            },
            batch_size: self.federation.batch_size,
            momentum: s(o.momentum),
            temperature: s(o.temperature),
            ce_weight: s(o.ce_weight),
            con_weight: s(o.con_weight),
            alternating: a.use_alternating,
            contrastive: a.use_l_con,
            personalized_classifier: a.personalized_classifier,
            routing: RoutingTable {
                tau_con_grad_phase2: o.tau_con_grad_phase2,
            },
            augmentation: self.augment,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `section.key=value`; the value is read as a TOML literal, falling
/// back to a bare string.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value)> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let path: Vec<String> = path.trim().split('.').map(|s| s.trim().to_string()).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` is not a section")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Builds a config from a preset, optional TOML text and overrides. A
/// top-level `preset = "desk"` in the text selects the base when `preset` is
/// `None`. Unknown keys anywhere are errors.
pub fn load_config_str(text: Option<&str>, preset: Option<Preset>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut file = match text {
        Some(t) => t.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()))?,
        None => toml::Table::new(),
    };
    let file_preset = match file.remove("preset") {
        Some(toml::Value::String(s)) => Some(s.parse()?),
        Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
        None => None,
    };
    let base = ExperimentConfig::preset(preset.or(file_preset).unwrap_or(Preset::Paper));
    let mut table = toml::Table::try_from(&base).map_err(|e| Error::Serde(e.to_string()))?;
    merge(&mut table, file);
    for o in overrides {
        let (path, value) = parse_override(o)?;
        set_path(&mut table, &path, value)?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    for w in cfg.validate()? {
        log::warn!("{w}");
    }
    Ok(cfg)
}

pub fn load_config(path: Option<&Path>, preset: Option<Preset>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = path
        .map(|p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e)))
        .transpose()?;
    load_config_str(text.as_deref(), preset, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_gives_paper_defaults() {
        let c = load_config_str(None, None, &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.federation.clients, 40);
        assert_eq!(c.federation.batch_size, 100);
        assert_eq!(c.federation.local_epochs, 5);
        assert_eq!(c.federation.rounds, 1000);
        assert_eq!((c.federation.r_f, c.federation.r_a), (4, 1));
        assert_eq!((c.prompts.n_kappa, c.prompts.n_rho), (10, 20));
        assert_eq!((c.optim.lr_tau, c.optim.lr_phi, c.optim.lr_hk), (0.01, 0.1, 0.1));
        assert_eq!(c.optim.lr_tau_no_con, 0.05);
    }

    #[test]
    fn three_two_split_is_accepted() {
        let c = load_config_str(Some("[federation]\nr_f = 3\nr_a = 2\n"), None, &[]).unwrap();
        assert_eq!(c.plan(), PhasePlan { r_f: 3, r_a: 2 });
    }

    #[test]
    fn broken_sum_names_the_constraint() {
        let err = load_config_str(None, None, &["federation.r_f=3".into(), "federation.r_a=3".into()]).unwrap_err();
        assert!(err.to_string().contains("R_f + R_a = R"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(load_config_str(Some("[federation]\nclientz = 3\n"), None, &[]).is_err());
        assert!(load_config_str(None, None, &["bogus.key=1".into()]).is_err());
        assert!(load_config_str(Some("extra = 1\n"), None, &[]).is_err());
    }

    #[test]
    fn overrides_beat_file_and_preset() {
        let c = load_config_str(
            Some("preset = \"desk\"\n[federation]\nrounds = 7\n"),
            None,
            &["federation.rounds=9".into(), "partition.scheme=pathological".into()],
        )
        .unwrap();
        assert_eq!(c.federation.clients, 8);
        assert_eq!(c.federation.rounds, 9);
        assert_eq!(c.partition.scheme, "pathological");
    }

    #[test]
    fn ablation_flags_shape_the_hyperparameters() {
        let mut c = ExperimentConfig::desk();
        c.ablation = AblationConfig::setting("III").unwrap();
        let h = c.client_hyper();
        assert!(h.alternating && !h.contrastive);
        assert_eq!(h.lr.tau, 0.05);
        c.ablation = AblationConfig::full();
        assert_eq!(c.client_hyper().lr.tau, 0.01);
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig::desk();
        assert_eq!(load_config_str(Some(&c.to_toml().unwrap()), None, &[]).unwrap(), c);
    }
}
