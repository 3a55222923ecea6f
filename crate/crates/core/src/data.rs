//! Synthetic datasets, non-IID client partitions and two-view augmentation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::seeding::{self, Rng};

/// Labeled feature vectors, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<Scalar>,
    labels: Vec<usize>,
    input_dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<Scalar>, labels: Vec<usize>, input_dim: usize, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if input_dim == 0 || features.len() != labels.len() * input_dim {
            return Err(Error::shape(
                "dataset",
                format!(
                    "{} values for {} samples of width {input_dim}",
                    features.len(),
                    labels.len()
                ),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        Ok(Dataset {
            features,
            labels,
            input_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[Scalar] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> &[Scalar] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Rows `indices` gathered into a row-major batch with their labels.
    pub fn gather(&self, indices: &[usize]) -> (Vec<Scalar>, Vec<usize>) {
        let x = indices.iter().flat_map(|&i| self.sample(i).iter().copied()).collect();
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (x, y) = self.gather(indices);
        Dataset::new(x, y, self.input_dim, self.num_classes)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        histogram(&self.labels, self.num_classes)
    }

    /// Reads a `label,f0,f1,...` CSV file.
    pub fn from_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.get(0) != Some("label") || headers.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "{}: header must be `label,f0,f1,...`",
                path.display()
            )));
        }
        let input_dim = headers.len() - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for record in reader.records() {
            let record = record?;
            let parse_err = |v: &str| Error::InvalidArgument(format!("{}: cannot parse `{v}`", path.display()));
            let y = &record[0];
            labels.push(y.trim().parse::<usize>().map_err(|_| parse_err(y))?);
            for v in record.iter().skip(1) {
                features.push(v.trim().parse::<Scalar>().map_err(|_| parse_err(v))?);
            }
        }
        let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1).max(2));
        Dataset::new(features, labels, input_dim, classes)
    }
}

pub fn histogram(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    labels.iter().for_each(|&y| h[y] += 1);
    h
}

fn unit_center(rng: &mut Rng, dim: usize) -> Vec<Scalar> {
    let v: Vec<Scalar> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<Scalar>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Class centers for [`make_synthetic`]: random unit directions scaled by `spread`.
pub fn synthetic_centers(num_classes: usize, input_dim: usize, spread: Scalar, seed: u64) -> Vec<Vec<Scalar>> {
    let mut rng = seeding::stream(seed, "synthetic-centers", 0);
    (0..num_classes)
        .map(|_| {
            unit_center(&mut rng, input_dim)
                .into_iter()
                .map(|v| v * spread)
                .collect()
        })
        .collect()
}

/// `per_class` samples for each of `num_classes` isotropic unit-variance
/// Gaussians around the centers of [`synthetic_centers`]. The centers depend
/// on `center_seed`, the draws on `sample_seed`, so train and test pools can
/// share a geometry.
pub fn make_synthetic_split(
    num_classes: usize,
    input_dim: usize,
    per_class: usize,
    spread: Scalar,
    center_seed: u64,
    sample_seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || input_dim == 0 || per_class == 0 || !(spread > 0.0) {
        return Err(Error::InvalidArgument(
            "synthetic data needs ≥ 2 classes and positive dimension, per-class count and spread".into(),
        ));
    }
    let centers = synthetic_centers(num_classes, input_dim, spread, center_seed);
    let mut rng = seeding::stream(sample_seed, "synthetic-samples", 0);
    let mut features = Vec::with_capacity(num_classes * per_class * input_dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            features.extend(center.iter().map(|mu| {
                let z: Scalar = StandardNormal.sample(&mut rng);
                mu + z
            }));
            labels.push(c);
        }
    }
    Dataset::new(features, labels, input_dim, num_classes)
}

pub fn make_synthetic(
    num_classes: usize,
    input_dim: usize,
    per_class: usize,
    spread: Scalar,
    seed: u64,
) -> Result<Dataset> {
    make_synthetic_split(num_classes, input_dim, per_class, spread, seed, seed)
}

/// Per-client index lists into a parent dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionAssignment {
    pub clients: Vec<Vec<usize>>,
}

impl PartitionAssignment {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Disjoint, in range, every client nonempty.
    pub fn validate(&self, total: usize) -> Result<()> {
        let mut seen = vec![false; total];
        for (i, idx) in self.clients.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::InfeasiblePartition(format!("client {i} is empty")));
            }
            for &j in idx {
                if j >= total || std::mem::replace(&mut seen[j], true) {
                    return Err(Error::InfeasiblePartition(format!("index {j} out of range or reused")));
                }
            }
        }
        Ok(())
    }

    pub fn assigned(&self) -> usize {
        self.clients.iter().map(Vec::len).sum()
    }

    pub fn client_histograms(&self, labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
        self.clients
            .iter()
            .map(|idx| {
                let mut h = vec![0; num_classes];
                idx.iter().for_each(|&i| h[labels[i]] += 1);
                h
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn class_indices(labels: &[usize], num_classes: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); num_classes];
    labels.iter().enumerate().for_each(|(i, &y)| by_class[y].push(i));
    by_class.iter_mut().for_each(|v| v.shuffle(rng));
    by_class
}

fn num_classes_of(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

/// Dirichlet label-skew partition: for each class, client shares are drawn
/// from `Dir(α·1_N)` and the class's shuffled indices are cut accordingly.
/// Clients left empty take one sample from the currently largest client.
pub fn dirichlet_partition(labels: &[usize], num_clients: usize, alpha: f64, seed: u64) -> Result<PartitionAssignment> {
    if num_clients == 0 || !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "dirichlet partition needs N ≥ 1 and α > 0 (got N={num_clients}, α={alpha})"
        )));
    }
    if num_clients > labels.len() {
        return Err(Error::InfeasiblePartition(format!(
            "{num_clients} clients for {} samples",
            labels.len()
        )));
    }
    let mut rng = seeding::stream(seed, seeding::tags::PARTITION, 0);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let by_class = class_indices(labels, num_classes_of(labels), &mut rng);
    let mut clients = vec![Vec::new(); num_clients];
    for idx in &by_class {
        if idx.is_empty() {
            continue;
        }
        let mut shares: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = shares.iter().sum();
        if total > 0.0 && total.is_finite() {
            shares.iter_mut().for_each(|s| *s /= total);
        } else {
            // every draw underflowed: hand the class to one client
            let pick = rng.random_range(0..num_clients);
            shares = (0..num_clients).map(|i| if i == pick { 1.0 } else { 0.0 }).collect();
        }
        let n = idx.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (i, s) in shares.iter().enumerate() {
            cum += s;
            let end = if i + 1 == num_clients {
                n
            } else {
                ((cum * n as f64).round() as usize).min(n)
            };
            let end = end.max(start);
            clients[i].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    while let Some(empty) = clients.iter().position(Vec::is_empty) {
        let largest = (0..num_clients)
            .max_by_key(|&i| (clients[i].len(), std::cmp::Reverse(i)))
            .expect("at least one client");
        let moved = clients[largest].pop().expect("largest client nonempty");
        clients[empty].push(moved);
    }
    clients.iter_mut().for_each(|c| c.sort_unstable());
    Ok(PartitionAssignment { clients })
}

/// Pathological partition: every client gets `classes_per_client` distinct
/// classes and the same number of samples from each. Class slots are dealt
/// round-robin over a shuffled class order; every shard has the size of the
/// smallest class divided by its slot count, so some samples stay unused.
pub fn pathological_partition(
    labels: &[usize],
    num_clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<PartitionAssignment> {
    let num_classes = num_classes_of(labels);
    if num_clients == 0 || classes_per_client == 0 || classes_per_client > num_classes {
        return Err(Error::InfeasiblePartition(format!(
            "{classes_per_client} classes per client with {num_classes} classes and {num_clients} clients"
        )));
    }
    let mut rng = seeding::stream(seed, seeding::tags::PARTITION, 1);
    let by_class = class_indices(labels, num_classes, &mut rng);
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut rng);

    let slots: Vec<Vec<usize>> = (0..num_clients)
        .map(|i| {
            (0..classes_per_client)
                .map(|j| order[(i * classes_per_client + j) % num_classes])
                .collect()
        })
        .collect();
    let mut demand = vec![0usize; num_classes];
    slots.iter().flatten().for_each(|&c| demand[c] += 1);
    let shard = (0..num_classes)
        .filter(|&c| demand[c] > 0)
        .map(|c| by_class[c].len() / demand[c])
        .min()
        .unwrap_or(0);
    if shard == 0 {
        return Err(Error::InfeasiblePartition(format!(
            "{} shards of {classes_per_client} classes do not fit the class sizes",
            num_clients * classes_per_client
        )));
    }
    let mut next = vec![0usize; num_classes];
    let clients = slots
        .iter()
        .map(|classes| {
            let mut idx: Vec<usize> = classes
                .iter()
                .flat_map(|&c| {
                    let s = next[c];
                    next[c] += shard;
                    by_class[c][s..s + shard].to_vec()
                })
                .collect();
            idx.sort_unstable();
            idx
        })
        .collect();
    Ok(PartitionAssignment { clients })
}

/// Splits `pool_labels` across clients with the same per-class proportions
/// as `train` has over `train_labels` (largest-remainder rounding), so each
/// client's held-out data follows its training label distribution.
pub fn matched_partition(
    train_labels: &[usize],
    train: &PartitionAssignment,
    pool_labels: &[usize],
    seed: u64,
) -> Result<PartitionAssignment> {
    let num_classes = num_classes_of(train_labels).max(num_classes_of(pool_labels));
    let hist = train.client_histograms(train_labels, num_classes);
    let mut rng = seeding::stream(seed, seeding::tags::TEST_PARTITION, 0);
    let by_class = class_indices(pool_labels, num_classes, &mut rng);
    let n_clients = train.num_clients();
    let mut clients = vec![Vec::new(); n_clients];
    for (c, idx) in by_class.iter().enumerate() {
        let counts: Vec<usize> = hist.iter().map(|h| h[c]).collect();
        let total: usize = counts.iter().sum();
        if total == 0 {
            continue;
        }
        let n = idx.len();
        let exact: Vec<f64> = counts.iter().map(|&k| k as f64 * n as f64 / total as f64).collect();
        let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut rest: Vec<usize> = (0..n_clients).collect();
        rest.sort_by(|&a, &b| {
            let ra = exact[a] - take[a] as f64;
            let rb = exact[b] - take[b] as f64;
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let short = n - take.iter().sum::<usize>();
        rest.iter().take(short).for_each(|&i| take[i] += 1);
        let mut start = 0;
        for (i, k) in take.iter().enumerate() {
            clients[i].extend_from_slice(&idx[start..start + k]);
            start += k;
        }
    }
    clients.iter_mut().for_each(|c| c.sort_unstable());
    Ok(PartitionAssignment { clients })
}

/// Stochastic feature-vector augmentation: additive Gaussian noise followed
/// by independent coordinate masking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub noise_std: f64,
    pub mask_prob: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            noise_std: 1.0,
            mask_prob: 0.1,
        }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        AugmentationPolicy {
            noise_std: 0.0,
            mask_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() || !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::InvalidArgument(format!("invalid augmentation policy {self:?}")));
        }
        Ok(())
    }

    fn view(&self, x: &[Scalar], rng: &mut Rng) -> Vec<Scalar> {
        #[allow(clippy::unnecessary_cast)]
        let normal = Normal::new(0.0, self.noise_std as Scalar).expect("validated std");
        x.iter()
            .map(|v| {
                let noisy = v + normal.sample(rng);
                let masked = rng.random::<f64>() < self.mask_prob;
                if masked {
                    0.0
                } else {
                    noisy
                }
            })
            .collect()
    }

    /// Two independent views of `x`.
    pub fn two_views(&self, x: &[Scalar], rng: &mut Rng) -> (Vec<Scalar>, Vec<Scalar>) {
        let a = self.view(x, rng);
        let b = self.view(x, rng);
        (a, b)
    }
}
