//! Connectivity functions over fixed weights.
//!
//! Each weight `w` carries a trainable score `t`. In prune mode the score is
//! squashed to a binary mask `m(t) = 1 if t > 0 else 0`; in flip mode to a
//! sign filter `f(t) = 1 if t > 0 else -1`. Both are hard threshold
//! functions, so the backward pass uses the straight-through estimator: the
//! threshold's Jacobian is treated as the identity and the upstream gradient
//! passes through unchanged.

use crate::tensor::Tensor;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("weights {w:?} and scores {t:?} must have identical shapes")]
    ShapeMismatch { w: Vec<usize>, t: Vec<usize> },
    #[error("{0} is not defined in dense mode")]
    DenseMode(&'static str),
}

/// How a parameter's connectivity is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Conventional training: the weights themselves are the parameters.
    Dense,
    /// Weights fixed; a binary mask over them is trained.
    Prune,
    /// Weights fixed; a sign filter over them is trained.
    Flip,
}

/// A fixed weight tensor paired with its trainable scores.
///
/// In `Prune`/`Flip` mode the weights are never written after construction;
/// only the scores move.
#[derive(Debug, Clone)]
pub struct MaskedParam {
    w: Tensor,
    t: Tensor,
    mode: Mode,
}

/// Binary mask: elementwise 1 where `t > 0`, else 0.
pub fn mask_forward(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 });
    Tensor::new(t.shape().to_vec(), data.collect()).unwrap()
}

/// Sign filter: elementwise 1 where `t > 0`, else -1 (sign(0) taken as -1 so
/// the function is total; fresh scores are strictly positive so the boundary
/// is never hit at initialization).
pub fn flip_forward(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| if v > 0.0 { 1.0 } else { -1.0 });
    Tensor::new(t.shape().to_vec(), data.collect()).unwrap()
}

/// Straight-through estimator: the gradient of the hard threshold is treated
/// as the identity, so the upstream gradient is returned unchanged.
pub fn ste_backward(upstream: &Tensor) -> Tensor {
    upstream.clone()
}

/// Scores drawn uniformly from (0, 0.1], computed as `0.1 * (1 - u)` with
/// `u` uniform on [0, 1). Strictly positive, so every mask starts at 1 and
/// every filter at +1.
pub fn init_scores<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| 0.1 * (1.0 - rng.gen::<f32>()))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

impl MaskedParam {
    pub fn dense(w: Tensor) -> Self {
        let t = Tensor::zeros(w.shape());
        MaskedParam {
            w,
            t,
            mode: Mode::Dense,
        }
    }

    pub fn masked(w: Tensor, t: Tensor, mode: Mode) -> Result<Self, MaskError> {
        if w.shape() != t.shape() {
            return Err(MaskError::ShapeMismatch {
                w: w.shape().to_vec(),
                t: t.shape().to_vec(),
            });
        }
        Ok(MaskedParam { w, t, mode })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn weights(&self) -> &Tensor {
        &self.w
    }

    pub fn scores(&self) -> &Tensor {
        &self.t
    }

    /// The tensor the optimizer updates: weights in dense mode, scores
    /// otherwise. Weights in prune/flip mode stay untouched for the lifetime
    /// of the parameter.
    pub fn trainable_mut(&mut self) -> &mut Tensor {
        match self.mode {
            Mode::Dense => &mut self.w,
            Mode::Prune | Mode::Flip => &mut self.t,
        }
    }

    /// `w` in dense mode, `w * m(t)` in prune mode, `w * f(t)` in flip mode.
    pub fn effective_weights(&self) -> Tensor {
        let mut out = self.w.clone();
        self.effective_weights_into(&mut out);
        out
    }

    /// Same as [`effective_weights`](Self::effective_weights), writing into a
    /// caller-owned buffer of the right shape.
    pub fn effective_weights_into(&self, out: &mut Tensor) {
        assert_eq!(out.shape(), self.w.shape());
        match self.mode {
            Mode::Dense => out.data_mut().copy_from_slice(self.w.data()),
            Mode::Prune => {
                for ((o, &w), &t) in out
                    .data_mut()
                    .iter_mut()
                    .zip(self.w.data())
                    .zip(self.t.data())
                {
                    *o = if t > 0.0 { w } else { 0.0 };
                }
            }
            Mode::Flip => {
                for ((o, &w), &t) in out
                    .data_mut()
                    .iter_mut()
                    .zip(self.w.data())
                    .zip(self.t.data())
                {
                    *o = if t > 0.0 { w } else { -w };
                }
            }
        }
    }

    /// Fraction of connections whose mask is 0 (prune) or whose filter is -1
    /// (flip).
    pub fn changed_fraction(&self) -> Result<f64, MaskError> {
        match self.mode {
            Mode::Dense => Err(MaskError::DenseMode("changed_fraction")),
            Mode::Prune | Mode::Flip => {
                let changed = self.t.data().iter().filter(|&&t| t <= 0.0).count();
                Ok(changed as f64 / self.t.len() as f64)
            }
        }
    }

    /// FNV-1a over the weight bits; constant across a prune/flip training
    /// run by construction.
    pub fn weight_checksum(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for &v in self.w.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t1(v: &[f32]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn mask_forward_threshold() {
        assert_eq!(mask_forward(&t1(&[0.05])).data(), &[1.0]);
        assert_eq!(mask_forward(&t1(&[-0.3])).data(), &[0.0]);
        assert_eq!(mask_forward(&t1(&[0.0])).data(), &[0.0]);
    }

    #[test]
    fn flip_forward_threshold() {
        assert_eq!(flip_forward(&t1(&[0.05])).data(), &[1.0]);
        assert_eq!(flip_forward(&t1(&[-0.3])).data(), &[-1.0]);
        // boundary: sign(0) = -1, and f(0) * f(0) = 1
        let f0 = flip_forward(&t1(&[0.0]));
        assert_eq!(f0.data(), &[-1.0]);
        assert_eq!(f0.data()[0] * f0.data()[0], 1.0);
    }

    #[test]
    fn ste_is_identity() {
        let up = t1(&[0.2, -1.0]);
        assert_eq!(ste_backward(&up).data(), &[0.2, -1.0]);
        let zeros = t1(&[0.0, 0.0]);
        assert_eq!(ste_backward(&zeros).data(), &[0.0, 0.0]);
    }

    #[test]
    fn effective_weights_per_mode() {
        let w = t1(&[2.0, -3.0]);
        let t = t1(&[0.1, -0.1]);
        let prune = MaskedParam::masked(w.clone(), t.clone(), Mode::Prune).unwrap();
        assert_eq!(prune.effective_weights().data(), &[2.0, 0.0]);
        let flip = MaskedParam::masked(w.clone(), t.clone(), Mode::Flip).unwrap();
        assert_eq!(flip.effective_weights().data(), &[2.0, 3.0]);
        let dense = MaskedParam::dense(w);
        assert_eq!(dense.effective_weights().data(), &[2.0, -3.0]);
    }

    #[test]
    fn changed_fraction_counts() {
        let w = t1(&[1.0, 1.0, 1.0, 1.0]);
        let flip =
            MaskedParam::masked(w.clone(), t1(&[0.1, -0.1, -0.1, 0.1]), Mode::Flip).unwrap();
        assert_eq!(flip.changed_fraction().unwrap(), 0.5);
        let all_neg =
            MaskedParam::masked(w.clone(), t1(&[-1.0, -2.0, -0.5, -0.1]), Mode::Prune).unwrap();
        assert_eq!(all_neg.changed_fraction().unwrap(), 1.0);
        let dense = MaskedParam::dense(w);
        assert!(matches!(
            dense.changed_fraction(),
            Err(MaskError::DenseMode(_))
        ));
    }

    #[test]
    fn fresh_scores_are_strictly_positive_and_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = init_scores(&[200, 50], &mut rng);
        assert!(t.data().iter().all(|&v| v > 0.0 && v <= 0.1));
        let w = Tensor::filled(&[200, 50], 1.0);
        let p = MaskedParam::masked(w, t, Mode::Prune).unwrap();
        assert_eq!(p.changed_fraction().unwrap(), 0.0);
    }

    #[test]
    fn masked_rejects_shape_mismatch() {
        let w = Tensor::zeros(&[2, 3]);
        let t = Tensor::zeros(&[3, 2]);
        assert!(MaskedParam::masked(w, t, Mode::Prune).is_err());
    }

    proptest! {
        #[test]
        fn outputs_stay_in_their_sets(data in proptest::collection::vec(-10.0f32..10.0, 1..64)) {
            let t = t1(&data);
            prop_assert!(mask_forward(&t).data().iter().all(|&m| m == 0.0 || m == 1.0));
            prop_assert!(flip_forward(&t).data().iter().all(|&f| f == -1.0 || f == 1.0));
        }

        #[test]
        fn ste_passes_any_upstream_through(data in proptest::collection::vec(-10.0f32..10.0, 1..64)) {
            let up = t1(&data);
            let through = ste_backward(&up);
            prop_assert_eq!(through.data(), up.data());
        }
    }
}
