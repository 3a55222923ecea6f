//! Personalized accuracy, linear probing, feature/attention export, per-round
//! reports and the ablation settings.

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{prompted_attention_weights, sgd_step, ParamGroup, Scalar, Tape, Tensor};
use crate::client::LossMeans;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::write_csv;
use crate::model::{Classifier, ModelBundle, PromptSet, Route};
use crate::seeding;

/// Transformed features `f′` for every sample (τ is bypassed without prompts).
pub fn transformed_features(bundle: &ModelBundle, prompts: &PromptSet, data: &Dataset) -> Result<Vec<Scalar>> {
    let tape = Tape::new();
    let x = tape.input(data.len(), data.input_dim(), data.features().to_vec())?;
    let f = bundle.phi.forward(&tape, x, Route::Frozen)?;
    let f = match prompts.bind(&tape, Route::Frozen) {
        Some(p) => bundle.tau.forward_features(&tape, f, Some(p), Route::Frozen)?,
        None => f,
    };
    Ok(f.value())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[Scalar]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, Scalar::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

pub fn accuracy_from_logits(logits: &[Scalar], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if !logits.len().is_multiple_of(labels.len()) {
        return Err(Error::shape(
            "accuracy",
            format!("{} logits for {} labels", logits.len(), labels.len()),
        ));
    }
    let c = logits.len() / labels.len();
    let correct = logits
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Accuracy of `classifier ∘ τ([φ(x), p_κ])` with the bundle's φ and τ.
pub fn accuracy_with(
    bundle: &ModelBundle,
    classifier: &Classifier,
    p_kappa: &PromptSet,
    test: &Dataset,
) -> Result<f64> {
    let f = transformed_features(bundle, p_kappa, test)?;
    let tape = Tape::new();
    let fv = tape.input(test.len(), bundle.feature_dim(), f)?;
    let logits = classifier.forward(&tape, fv, Route::Frozen)?.value();
    accuracy_from_logits(&logits, test.labels())
}

/// Accuracy of the personalized model (global φ, τ, h_κ with local `p_κ`).
pub fn personalized_accuracy(bundle: &ModelBundle, p_kappa: &PromptSet, test: &Dataset) -> Result<f64> {
    accuracy_with(bundle, &bundle.hk, p_kappa, test)
}

/// Probe training settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: Scalar,
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 200,
            lr: 0.1,
            train_fraction: 0.8,
        }
    }
}

fn probe_split(labels: &[usize], num_classes: usize, seed: u64, fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    let present: Vec<bool> = {
        let mut p = vec![false; num_classes];
        labels.iter().for_each(|&y| p[y] = true);
        p
    };
    let n_train = ((labels.len() as f64 * fraction).round() as usize).clamp(1, labels.len() - 1);
    for attempt in 0..2 {
        let mut idx: Vec<usize> = (0..labels.len()).collect();
        idx.shuffle(&mut seeding::stream(seed, "probe-split", attempt));
        let test = idx.split_off(n_train);
        let mut seen = vec![false; num_classes];
        idx.iter().for_each(|&i| seen[labels[i]] = true);
        if seen == present {
            return Ok((idx, test));
        }
    }
    Err(Error::DegenerateSplit(format!(
        "a class is missing from the training side after a re-draw (seed {seed})"
    )))
}

/// Held-out accuracy of a fresh linear classifier trained by full-batch
/// gradient descent on frozen `features` (`S × m`). Features are standardized
/// with training-side statistics.
pub fn linear_probe(
    features: &[Scalar],
    labels: &[usize],
    num_classes: usize,
    split_seed: u64,
    cfg: ProbeConfig,
) -> Result<f64> {
    let s = labels.len();
    if s < 2 * num_classes || num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "linear probe needs at least 2·C = {} samples, got {s}",
            2 * num_classes
        )));
    }
    if !features.len().is_multiple_of(s) || features.is_empty() {
        return Err(Error::shape(
            "linear_probe",
            format!("{} values for {s} samples", features.len()),
        ));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: num_classes,
        });
    }
    let m = features.len() / s;
    let (train, test) = probe_split(labels, num_classes, split_seed, cfg.train_fraction)?;

    let mut mean = vec![0.0; m];
    let mut std = vec![0.0; m];
    for &i in &train {
        mean.iter_mut()
            .zip(&features[i * m..(i + 1) * m])
            .for_each(|(a, v)| *a += v);
    }
    mean.iter_mut().for_each(|a| *a /= train.len() as Scalar);
    for &i in &train {
        for j in 0..m {
            std[j] += (features[i * m + j] - mean[j]).powi(2);
        }
    }
    std.iter_mut().for_each(|v| {
        let sd = (*v / train.len() as Scalar).sqrt();
        *v = if sd > 1e-12 { sd } else { 1.0 };
    });
    let gather = |idx: &[usize]| -> (Vec<Scalar>, Vec<usize>) {
        let x = idx
            .iter()
            .flat_map(|&i| (0..m).map(move |j| (i, j)))
            .map(|(i, j)| (features[i * m + j] - mean[j]) / std[j])
            .collect();
        (x, idx.iter().map(|&i| labels[i]).collect())
    };
    let (xtr, ytr) = gather(&train);
    let (xte, yte) = gather(&test);

    let mut w = Tensor::param(vec![num_classes, m], vec![0.0; num_classes * m])?;
    let mut b = Tensor::param(vec![num_classes], vec![0.0; num_classes])?;
    for _ in 0..cfg.epochs {
        let tape = Tape::new();
        let x = tape.input(ytr.len(), m, xtr.clone())?;
        let loss = x
            .matmul_t(&tape.param(&w))?
            .add_row(&tape.param(&b))?
            .cross_entropy(&ytr)?;
        let mut grads = tape.backward(loss)?;
        let mut group = ParamGroup::new("probe", cfg.lr, vec![&mut w, &mut b])?;
        sgd_step(&mut group, &mut grads)?;
    }
    let tape = Tape::new();
    let x = tape.input(yte.len(), m, xte)?;
    let logits = x.matmul_t(&tape.constant(&w))?.add_row(&tape.constant(&b))?.value();
    accuracy_from_logits(&logits, &yte)
}

fn fmt(v: Scalar) -> String {
    format!("{v:?}")
}

/// Writes `client,label,f0..f{m-1}` rows of transformed features.
pub fn export_features(path: &Path, rows: &[(usize, &ModelBundle, &PromptSet, &Dataset)]) -> Result<()> {
    let m = rows.first().map_or(0, |r| r.1.feature_dim());
    let header: Vec<String> = ["client".to_string(), "label".to_string()]
        .into_iter()
        .chain((0..m).map(|j| format!("f{j}")))
        .collect();
    let mut out = Vec::new();
    for &(client, bundle, prompts, data) in rows {
        let f = transformed_features(bundle, prompts, data)?;
        for (row, &y) in f.chunks(m).zip(data.labels()) {
            out.push(
                [client.to_string(), y.to_string()]
                    .into_iter()
                    .chain(row.iter().map(|&v| fmt(v)))
                    .collect::<Vec<_>>(),
            );
        }
    }
    write_csv(path, &header, out)
}

/// Attention weights of the `f′` position over `[f; p]`, one `B × (1+n)` row
/// per feature row.
pub fn attention_rows(bundle: &ModelBundle, features: &[Scalar], prompts: &PromptSet) -> Result<Vec<Scalar>> {
    let m = bundle.feature_dim();
    let tape = Tape::new();
    let f = tape.input(features.len() / m, m, features.to_vec())?;
    let w = bundle.tau.attention(&tape, Route::Frozen);
    Ok(prompted_attention_weights(f, prompts.bind(&tape, Route::Frozen), &w)?.value())
}

/// Writes `sample,w_f,w_p1..w_pn` rows.
pub fn export_attention(path: &Path, bundle: &ModelBundle, features: &[Scalar], prompts: &PromptSet) -> Result<()> {
    let weights = attention_rows(bundle, features, prompts)?;
    let cols = 1 + prompts.len();
    let header: Vec<String> = ["sample".to_string(), "w_f".to_string()]
        .into_iter()
        .chain((1..cols).map(|j| format!("w_p{j}")))
        .collect();
    let rows = weights.chunks(cols).enumerate().map(|(i, row)| {
        std::iter::once(i.to_string())
            .chain(row.iter().map(|&v| fmt(v)))
            .collect::<Vec<_>>()
    });
    write_csv(path, &header, rows)
}

/// Reads a numeric CSV written by the exporters: header plus rows of numbers.
pub fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| {
            let rec = rec?;
            rec.iter()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::InvalidArgument(format!("bad number `{v}`")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

/// Evaluation of one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<usize>,
    pub accuracies: Vec<f64>,
    pub client_losses: Vec<LossMeans>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub feature_learning: LossMeans,
    pub task_adaptation: LossMeans,
    pub payload_params: usize,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Index and value of the round with the highest mean accuracy (first one on ties).
pub fn best_round(reports: &[RoundReport]) -> Option<(usize, f64)> {
    reports.iter().fold(None, |best: Option<(usize, f64)>, r| match best {
        Some((_, a)) if a >= r.mean_accuracy => best,
        _ => Some((r.round, r.mean_accuracy)),
    })
}

/// `round,client,acc,lce,lcon` rows.
pub fn write_metrics_csv(path: &Path, reports: &[RoundReport]) -> Result<()> {
    let header: Vec<String> = ["round", "client", "acc", "lce", "lcon"].map(String::from).to_vec();
    let opt = |v: Option<Scalar>| v.map(fmt).unwrap_or_default();
    let rows = reports.iter().flat_map(|r| {
        r.clients
            .iter()
            .zip(&r.accuracies)
            .zip(&r.client_losses)
            .map(move |((c, a), l)| {
                vec![
                    r.round.to_string(),
                    c.to_string(),
                    format!("{a:?}"),
                    opt(l.ce),
                    opt(l.con),
                ]
            })
    });
    write_csv(path, &header, rows)
}

/// Component switches of the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub use_p_kappa: bool,
    pub use_alternating: bool,
    pub use_l_con: bool,
    pub use_p_rho: bool,
    pub personalized_classifier: bool,
}

impl AblationConfig {
    pub const SETTINGS: [&'static str; 8] = ["I", "II", "III", "IV", "V", "VI", "VII", "VIII"];

    pub fn full() -> Self {
        Self::setting("V").expect("known setting")
    }

    pub fn setting(name: &str) -> Result<Self> {
        let f = |k, a, c, r| AblationConfig {
            use_p_kappa: k,
            use_alternating: a,
            use_l_con: c,
            use_p_rho: r,
            personalized_classifier: false,
        };
        Ok(match name.trim().to_ascii_uppercase().as_str() {
            "I" => f(false, false, false, false),
            "II" => f(true, false, false, false),
            "III" => f(true, true, false, false),
            "IV" => f(true, true, true, false),
            "V" => f(true, true, true, true),
            "VI" => f(false, false, true, false),
            "VII" => f(true, false, true, false),
            "VIII" => f(true, false, true, true),
            _ => return Err(Error::UnknownSetting(name.to_string())),
        })
    }

    /// Every flag set here is also set in `other`.
    pub fn is_subset_of(&self, other: &AblationConfig) -> bool {
        let a = self.flags();
        let b = other.flags();
        a.iter().zip(&b).all(|(x, y)| !x || *y)
    }

    pub fn flags(&self) -> [bool; 5] {
        [
            self.use_p_kappa,
            self.use_alternating,
            self.use_l_con,
            self.use_p_rho,
            self.personalized_classifier,
        ]
    }
}

impl FromStr for AblationConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::setting(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tensor::test_tol;
    use crate::model::{init_bundle, init_prompts, ModelConfig, PromptKind};
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        let logits = vec![0.0; 40];
        let labels: Vec<usize> = (0..10).map(|i| i % 4).collect();
        assert!((accuracy_from_logits(&logits, &labels).unwrap() - 0.3).abs() < 1e-12);
        let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
        assert_eq!(accuracy_from_logits(&[0.0; 32], &labels).unwrap(), 0.25);
    }

    #[test]
    fn monotone_logit_transform_keeps_accuracy() {
        let logits = [0.2, -1.0, 3.0, 0.5, 0.4, -2.0];
        let labels = [2, 0];
        let squashed: Vec<Scalar> = logits.iter().map(|v: &Scalar| v.tanh() * 5.0 + 1.0).collect();
        assert_eq!(
            accuracy_from_logits(&logits, &labels).unwrap(),
            accuracy_from_logits(&squashed, &labels).unwrap()
        );
    }

    #[test]
    fn evaluation_is_pure() {
        let cfg = ModelConfig::default();
        let b = init_bundle(&cfg, 1).unwrap();
        let p = init_prompts(PromptKind::Classification, 4, 16, 2).unwrap();
        let data = crate::data::make_synthetic(10, 16, 3, 2.0, 1).unwrap();
        let (b0, p0) = (b.clone(), p.clone());
        let a = personalized_accuracy(&b, &p, &data).unwrap();
        assert!((0.0..=1.0).contains(&a));
        assert_eq!(b, b0);
        assert_eq!(p, p0);
    }

    #[test]
    fn probe_separable_one_hot() {
        let c = 4;
        let labels: Vec<usize> = (0..80).map(|i| i % c).collect();
        let feats: Vec<Scalar> = labels
            .iter()
            .flat_map(|&y| (0..c).map(move |j| if j == y { 1.0 } else { 0.0 }))
            .collect();
        assert_eq!(
            linear_probe(&feats, &labels, c, 3, ProbeConfig::default()).unwrap(),
            1.0
        );
    }

    #[test]
    fn probe_on_noise_is_near_chance() {
        let c = 5;
        let mut rng = crate::seeding::Rng::seed_from_u64(8);
        let mean: f64 = (0..5)
            .map(|seed| {
                let labels: Vec<usize> = (0..1000).map(|i| i % c).collect();
                let feats: Vec<Scalar> = (0..1000 * 8).map(|_| StandardNormal.sample(&mut rng)).collect();
                linear_probe(&feats, &labels, c, seed, ProbeConfig::default()).unwrap()
            })
            .sum::<f64>()
            / 5.0;
        assert!((mean - 0.2).abs() <= 0.1, "{mean}");
    }

    #[test]
    fn probe_rejects_small_or_degenerate_inputs() {
        assert!(linear_probe(&[0.0; 3], &[0, 1, 2], 3, 0, ProbeConfig::default()).is_err());
        // class 2 appears once, so some split may miss it; with train fraction 0.5
        // on 6 samples both draws can drop it
        let labels = [0, 0, 1, 1, 0, 2];
        let r = (0..50).map(|s| {
            linear_probe(
                &[0.0; 6],
                &labels,
                3,
                s,
                ProbeConfig {
                    train_fraction: 0.5,
                    ..ProbeConfig::default()
                },
            )
        });
        assert!(r.into_iter().any(|x| matches!(x, Err(Error::DegenerateSplit(_)))));
    }

    #[test]
    fn attention_export_rows_are_distributions() {
        let cfg = ModelConfig::default();
        let b = init_bundle(&cfg, 1).unwrap();
        let p = init_prompts(PromptKind::Classification, 10, 16, 2).unwrap();
        let data = crate::data::make_synthetic(10, 16, 2, 2.0, 1).unwrap();
        let f = crate::model::extract(&b.phi, data.features(), 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("att.csv");
        export_attention(&path, &b, &f, &p).unwrap();
        let (header, rows) = read_numeric_csv(&path).unwrap();
        assert_eq!(header.len(), 12);
        assert_eq!(header[1], "w_f");
        for row in &rows {
            assert_eq!(row.len() - 1, 11);
            assert!(row[1..].iter().all(|&w| w >= 0.0));
            assert!((row[1..].iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn feature_export_round_trips() {
        let cfg = ModelConfig::default();
        let b = init_bundle(&cfg, 1).unwrap();
        let p = init_prompts(PromptKind::Classification, 3, 16, 2).unwrap();
        let data = crate::data::make_synthetic(10, 16, 2, 2.0, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        export_features(&path, &[(7, &b, &p, &data)]).unwrap();
        let (header, rows) = read_numeric_csv(&path).unwrap();
        assert_eq!(header[..3], ["client", "label", "f0"]);
        let f = transformed_features(&b, &p, &data).unwrap();
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row[0], 7.0);
            assert_eq!(row[1] as usize, data.labels()[i]);
            for j in 0..16 {
                assert!((row[2 + j] - f[i * 16 + j] as f64).abs() < test_tol(1e-9) as f64);
            }
        }
    }

    #[test]
    fn settings_map_to_flags() {
        assert_eq!(AblationConfig::setting("I").unwrap(), AblationConfig::default());
        let i = AblationConfig::setting("I").unwrap();
        let iii = AblationConfig::setting("iii").unwrap();
        let v = AblationConfig::setting("V").unwrap();
        assert!(i.is_subset_of(&iii) && iii.is_subset_of(&v) && !v.is_subset_of(&iii));
        assert!(matches!(AblationConfig::setting("IX"), Err(Error::UnknownSetting(_))));
        assert_eq!(AblationConfig::SETTINGS.len(), 8);
    }

    #[test]
    fn best_round_is_max_mean() {
        let mk = |round, m| RoundReport {
            round,
            clients: vec![],
            accuracies: vec![],
            client_losses: vec![],
            mean_accuracy: m,
            std_accuracy: 0.0,
            feature_learning: LossMeans::default(),
            task_adaptation: LossMeans::default(),
            payload_params: 0,
        };
        assert_eq!(best_round(&[mk(0, 0.2), mk(1, 0.5), mk(2, 0.5)]), Some((1, 0.5)));
        assert_eq!(best_round(&[]), None);
    }
}
