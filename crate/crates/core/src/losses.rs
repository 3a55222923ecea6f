//! Classification and contrastive losses, plus the MoCo key queue and
//! momentum encoders.

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::kernels::{dot, log_sum_exp};
use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{FeatureExtractor, ProjectionHead};
use crate::seeding::Rng;

/// Tolerance on `‖k‖ = 1` for queued keys.
#[cfg(not(feature = "f32"))]
pub const UNIT_NORM_TOL: Scalar = 1e-6;
#[cfg(feature = "f32")]
pub const UNIT_NORM_TOL: Scalar = 1e-5;

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[Scalar], label: usize) -> Result<Scalar> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "cross_entropy needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cross_entropy logits".into()));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

fn check_beta(beta: Scalar) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {beta}"
        )))
    }
}

/// InfoNCE for one query: the positive competes against every queued key,
/// with the positive itself included in the denominator (K + 1 terms).
pub fn info_nce(q: &[Scalar], k_plus: &[Scalar], queue: &NegativeQueue, beta: Scalar) -> Result<Scalar> {
    check_beta(beta)?;
    if queue.is_empty() {
        return Err(Error::Empty("negative queue"));
    }
    if q.len() != queue.dim() || k_plus.len() != queue.dim() {
        return Err(Error::shape(
            "info_nce",
            format!(
                "query {} / key {} for queue dimension {}",
                q.len(),
                k_plus.len(),
                queue.dim()
            ),
        ));
    }
    let mut logits = Vec::with_capacity(queue.len() + 1);
    logits.push(dot(q, k_plus) / beta);
    logits.extend(queue.keys_in_order().map(|k| dot(q, k) / beta));
    Ok(log_sum_exp(&logits) - logits[0])
}

/// Batched InfoNCE on the tape: mean over the rows of `q` (`B × d`) with
/// positives `k_plus` (`B × d`, treated as constants).
pub fn info_nce_batch<'t>(q: Var<'t>, k_plus: Var<'t>, queue: &NegativeQueue, beta: Scalar) -> Result<Var<'t>> {
    check_beta(beta)?;
    if queue.is_empty() {
        return Err(Error::Empty("negative queue"));
    }
    if q.cols() != queue.dim() {
        return Err(Error::shape(
            "info_nce",
            format!("query width {} vs queue {}", q.cols(), queue.dim()),
        ));
    }
    let tape: &'t Tape = q.tape();
    let negatives = tape.input(
        queue.len(),
        queue.dim(),
        queue.keys_in_order().flatten().copied().collect(),
    )?;
    let pos = q.row_dot(&k_plus.detach())?;
    let logits = pos.concat_cols(&q.matmul_t(&negatives)?)?.scale(1.0 / beta);
    logits.cross_entropy(&vec![0; q.rows()])
}

/// Fixed-capacity FIFO of unit-norm keys.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    storage: Vec<Scalar>,
    len: usize,
    /// Slot the next key is written to; when full, also the oldest key.
    cursor: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::InvalidArgument(
                "queue capacity and dimension must be positive".into(),
            ));
        }
        Ok(NegativeQueue {
            capacity,
            dim,
            storage: vec![0.0; capacity * dim],
            len: 0,
            cursor: 0,
        })
    }

    /// A full queue of random unit vectors.
    pub fn random(capacity: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        let mut queue = Self::new(capacity, dim)?;
        let keys: Vec<Scalar> = (0..capacity)
            .flat_map(|_| {
                let v: Vec<Scalar> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
                let norm = dot(&v, &v).sqrt();
                v.into_iter().map(move |x| x / norm)
            })
            .collect();
        queue.push(&keys)?;
        Ok(queue)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Stored keys from oldest to newest.
    pub fn keys_in_order(&self) -> impl Iterator<Item = &[Scalar]> {
        let start = if self.len == self.capacity { self.cursor } else { 0 };
        (0..self.len).map(move |i| {
            let slot = (start + i) % self.capacity;
            &self.storage[slot * self.dim..(slot + 1) * self.dim]
        })
    }

    /// Appends a row-major batch of keys in order, evicting the oldest once
    /// full. Every key must be unit norm; nothing is pushed otherwise.
    pub fn push(&mut self, keys: &[Scalar]) -> Result<()> {
        if !keys.len().is_multiple_of(self.dim) {
            return Err(Error::shape(
                "queue_push",
                format!("{} values for key width {}", keys.len(), self.dim),
            ));
        }
        for (i, k) in keys.chunks(self.dim).enumerate() {
            if (dot(k, k).sqrt() - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::NotUnitNorm(i));
            }
        }
        for k in keys.chunks(self.dim) {
            let slot = self.cursor;
            self.storage[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(k);
            self.cursor = (self.cursor + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
        Ok(())
    }
}

/// Momentum-averaged copies φ̃ and h̃_ρ. Their tensors never require gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumEncoders {
    pub phi: FeatureExtractor,
    pub hrho: ProjectionHead,
    momentum: Scalar,
}

impl MomentumEncoders {
    pub fn from_online(phi: &FeatureExtractor, hrho: &ProjectionHead, momentum: Scalar) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1]")));
        }
        let mut phi = phi.clone();
        let mut hrho = hrho.clone();
        for l in &mut phi.layers {
            l.weight.set_requires_grad(false);
            if let Some(b) = &mut l.bias {
                b.set_requires_grad(false);
            }
        }
        hrho.weight.set_requires_grad(false);
        Ok(MomentumEncoders { phi, hrho, momentum })
    }

    pub fn momentum(&self) -> Scalar {
        self.momentum
    }

    fn tensor_pairs<'a>(
        &'a mut self,
        phi: &'a FeatureExtractor,
        hrho: &'a ProjectionHead,
    ) -> Result<Vec<(&'a mut crate::autodiff::Tensor, &'a crate::autodiff::Tensor)>> {
        if self.phi.layers.len() != phi.layers.len() {
            return Err(Error::shape("momentum_update", "extractor depth differs"));
        }
        let mut pairs = Vec::new();
        for (mine, theirs) in self.phi.layers.iter_mut().zip(&phi.layers) {
            pairs.push((&mut mine.weight, &theirs.weight));
            match (&mut mine.bias, &theirs.bias) {
                (Some(a), Some(b)) => pairs.push((a, b)),
                (None, None) => {}
                _ => return Err(Error::shape("momentum_update", "bias layout differs")),
            }
        }
        pairs.push((&mut self.hrho.weight, &hrho.weight));
        for (a, b) in &pairs {
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    "momentum_update",
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
        }
        Ok(pairs)
    }

    /// `θ̃ ← μ·θ̃ + (1 − μ)·θ` for every parameter.
    pub fn update(&mut self, phi: &FeatureExtractor, hrho: &ProjectionHead) -> Result<()> {
        let mu = self.momentum;
        for (target, online) in self.tensor_pairs(phi, hrho)? {
            target
                .data_mut()
                .iter_mut()
                .zip(online.data())
                .for_each(|(t, o)| *t = mu * *t + (1.0 - mu) * o);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{grad_check, DEFAULT_EPS, GRAD_TOLERANCE};
    use crate::autodiff::tensor::test_tol;
    use crate::autodiff::Tensor;
    use crate::model::{init_bundle, ModelConfig};
    use rand::{Rng as _, SeedableRng};

    fn unit(v: &[Scalar]) -> Vec<Scalar> {
        let n = dot(v, v).sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn cross_entropy_values() {
        assert!((cross_entropy(&[0.0; 4], 2).unwrap() - (4.0 as Scalar).ln()).abs() < 1e-12);
        assert!(cross_entropy(&[200.0, 0.0, 0.0], 0).unwrap() < test_tol(1e-12));
        // −ln(e²/(e²+1))
        let direct = -((2.0 as Scalar).exp() / ((2.0 as Scalar).exp() + 1.0)).ln();
        assert!((cross_entropy(&[2.0, 0.0], 0).unwrap() - direct).abs() < test_tol(1e-12));
        assert!((direct - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_errors() {
        assert!(matches!(
            cross_entropy(&[0.0, 1.0], 2),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(cross_entropy(&[1.0], 0).is_err());
        assert!(matches!(
            cross_entropy(&[Scalar::INFINITY, 0.0], 0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn cross_entropy_shift_invariance() {
        let mut rng = Rng::seed_from_u64(1);
        for _ in 0..50 {
            let logits: Vec<Scalar> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let c = rng.random_range(-50.0..50.0);
            let shifted: Vec<Scalar> = logits.iter().map(|v| v + c).collect();
            let y = rng.random_range(0..5);
            assert!((cross_entropy(&logits, y).unwrap() - cross_entropy(&shifted, y).unwrap()).abs() < test_tol(1e-9));
        }
    }

    fn orthogonal_setup() -> (Vec<Scalar>, NegativeQueue) {
        let q = vec![1.0, 0.0, 0.0];
        let mut queue = NegativeQueue::new(2, 3).unwrap();
        queue.push(&[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        (q, queue)
    }

    #[test]
    fn info_nce_reference_values() {
        let (q, queue) = orthogonal_setup();
        let e: Scalar = 1.0;
        let direct1 = -(e.exp() / (e.exp() + 2.0)).ln();
        let direct05 = -((2.0 as Scalar).exp() / ((2.0 as Scalar).exp() + 2.0)).ln();
        assert!((info_nce(&q, &q, &queue, 1.0).unwrap() - direct1).abs() < test_tol(1e-12));
        assert!((info_nce(&q, &q, &queue, 0.5).unwrap() - direct05).abs() < test_tol(1e-12));
        assert!((direct1 - 0.551445).abs() < 1e-6);
        assert!((direct05 - 0.2395448).abs() < 1e-6);
    }

    #[test]
    fn info_nce_uniform_case_is_log_k_plus_one() {
        let mut queue = NegativeQueue::new(5, 2).unwrap();
        let k = unit(&[1.0, 1.0]);
        for _ in 0..5 {
            queue.push(&k).unwrap();
        }
        let loss = info_nce(&k, &k, &queue, 0.07).unwrap();
        assert!((loss - (6.0 as Scalar).ln()).abs() < 1e-9);
    }

    #[test]
    fn info_nce_errors() {
        let (q, queue) = orthogonal_setup();
        assert!(info_nce(&q, &q, &queue, 0.0).is_err());
        let empty = NegativeQueue::new(3, 3).unwrap();
        assert!(matches!(info_nce(&q, &q, &empty, 1.0), Err(Error::Empty(_))));
    }

    #[test]
    fn info_nce_decreases_with_positive_similarity() {
        let (_, queue) = orthogonal_setup();
        let q = vec![1.0, 0.0, 0.0];
        let mut last = Scalar::INFINITY;
        for step in 0..10 {
            let angle = 3.0 - 0.3 * step as Scalar;
            let k = vec![angle.cos(), 0.0, angle.sin()];
            let loss = info_nce(&q, &k, &queue, 0.5).unwrap();
            assert!(loss < last);
            last = loss;
        }
    }

    #[test]
    fn batched_info_nce_matches_scalar_and_gradients_check() {
        let mut rng = Rng::seed_from_u64(2);
        let queue = NegativeQueue::random(6, 4, &mut rng).unwrap();
        let q_raw: Vec<Scalar> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k_raw: Vec<Scalar> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let qs: Vec<Scalar> = q_raw.chunks(4).flat_map(unit).collect();
        let ks: Vec<Scalar> = k_raw.chunks(4).flat_map(unit).collect();
        let tape = Tape::new();
        let loss = info_nce_batch(
            tape.input(3, 4, qs.clone()).unwrap(),
            tape.input(3, 4, ks.clone()).unwrap(),
            &queue,
            0.2,
        )
        .unwrap()
        .item();
        let expected: Scalar = (0..3)
            .map(|i| info_nce(&qs[i * 4..(i + 1) * 4], &ks[i * 4..(i + 1) * 4], &queue, 0.2).unwrap())
            .sum::<Scalar>()
            / 3.0;
        assert!((loss - expected).abs() < 1e-12);

        let raw = Tensor::new(vec![3, 4], q_raw).unwrap();
        let keys = Tensor::new(vec![3, 4], ks).unwrap();
        let err = grad_check(
            |t, v| info_nce_batch(v[0].l2_normalize_rows()?, t.constant(&keys), &queue, 0.2),
            &[raw],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < GRAD_TOLERANCE, "{err}");
    }

    #[test]
    fn queue_fifo_examples() {
        let keys: Vec<Vec<Scalar>> = (0..5).map(|i| unit(&[1.0, i as Scalar])).collect();
        let mut q = NegativeQueue::new(4, 2).unwrap();
        q.push(&keys[0]).unwrap();
        assert_eq!(q.len(), 1);
        for k in &keys[1..4] {
            q.push(k).unwrap();
        }
        q.push(&keys[4]).unwrap();
        let got: Vec<&[Scalar]> = q.keys_in_order().collect();
        assert_eq!(got, keys[1..5].iter().map(Vec::as_slice).collect::<Vec<_>>());

        let mut q = NegativeQueue::new(4, 2).unwrap();
        q.push(&keys[..3].concat()).unwrap();
        q.push(&keys[3..5].concat()).unwrap();
        assert_eq!(q.len(), 4);
        assert_eq!(q.keys_in_order().next().unwrap(), keys[1].as_slice());
    }

    #[test]
    fn queue_rejects_non_unit_keys() {
        let mut q = NegativeQueue::new(4, 2).unwrap();
        assert!(matches!(q.push(&[1.0, 0.0, 2.0, 0.0]), Err(Error::NotUnitNorm(1))));
        assert!(q.is_empty());
    }

    #[test]
    fn random_queue_is_full_and_unit() {
        let mut rng = Rng::seed_from_u64(3);
        let q = NegativeQueue::random(16, 8, &mut rng).unwrap();
        assert_eq!(q.len(), 16);
        assert!(q
            .keys_in_order()
            .all(|k| (dot(k, k).sqrt() - 1.0).abs() < test_tol(1e-12)));
    }

    #[test]
    fn momentum_update_cases() {
        let cfg = ModelConfig {
            input_dim: 3,
            hidden: vec![],
            feature_dim: 2,
            num_classes: 2,
            proj_dim: 2,
            ffn: false,
            attn_residual: true,
        };
        let online = init_bundle(&cfg, 1).unwrap();
        let other = init_bundle(&cfg, 2).unwrap();

        let mut frozen = MomentumEncoders::from_online(&other.phi, &other.hrho, 1.0).unwrap();
        frozen.update(&online.phi, &online.hrho).unwrap();
        assert_eq!(frozen.phi, other.phi);

        let mut copy = MomentumEncoders::from_online(&other.phi, &other.hrho, 0.0).unwrap();
        copy.update(&online.phi, &online.hrho).unwrap();
        assert_eq!(copy.phi, online.phi);
        assert_eq!(copy.hrho, online.hrho);
        assert!(!copy.hrho.weight.requires_grad());

        let mut half = MomentumEncoders::from_online(&other.phi, &other.hrho, 0.5).unwrap();
        half.hrho.weight.data_mut().iter_mut().for_each(|v| *v = 2.0);
        let mut target = online.hrho.clone();
        target.weight.data_mut().iter_mut().for_each(|v| *v = 4.0);
        half.update(&online.phi, &target).unwrap();
        assert!(half.hrho.weight.data().iter().all(|v| *v == 3.0));

        assert!(MomentumEncoders::from_online(&online.phi, &online.hrho, 1.5).is_err());
        let wide = init_bundle(&ModelConfig { feature_dim: 3, ..cfg }, 1).unwrap();
        assert!(half.update(&wide.phi, &wide.hrho).is_err());
    }
}
