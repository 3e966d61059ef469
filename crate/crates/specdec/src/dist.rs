//! Probability distributions over a token vocabulary and the scalar
//! functions built on them: entropy, top-k, total-variation distance, and
//! the residual distribution used by rejection sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Absolute tolerance on the sum-to-one invariant after construction.
pub const SUM_TOLERANCE: f64 = 1e-9;
/// Inputs whose sum deviates by more than this are rejected instead of
/// renormalized.
const RENORM_TOLERANCE: f64 = 1e-6;

/// Index into a vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

/// A probability vector over a token vocabulary: entries are non-negative
/// and sum to one within [`SUM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    /// Validates and normalizes a probability vector. Sums within 1e-6 of
    /// one are renormalized; anything further off is rejected.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDist("empty vector".into()));
        }
        let mut probs = probs;
        for p in &mut probs {
            if !p.is_finite() {
                return Err(Error::InvalidDist(format!("non-finite entry {p}")));
            }
            if *p < 0.0 {
                if *p < -1e-12 {
                    return Err(Error::InvalidDist(format!("negative entry {p}")));
                }
                *p = 0.0;
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > RENORM_TOLERANCE {
            return Err(Error::InvalidDist(format!("entries sum to {sum}")));
        }
        for p in &mut probs {
            *p /= sum;
        }
        Ok(Self(probs))
    }

    /// Uniform distribution over `n` tokens.
    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// Point mass on one token.
    pub fn one_hot(n: usize, token: TokenId) -> Self {
        let mut v = vec![0.0; n];
        v[token.idx()] = 1.0;
        Self(v)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, token: TokenId) -> f64 {
        self.0[token.idx()]
    }

    /// Highest-probability token, lowest index on ties.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        TokenId(best as u32)
    }

    /// Raises entries to the power `1/t` and renormalizes. Callers handle
    /// `t = 0` as a separate argmax path.
    pub fn apply_temperature(&self, t: f64) -> Self {
        assert!(t > 0.0, "temperature must be positive; t=0 is an argmax path");
        if t == 1.0 {
            return self.clone();
        }
        let inv = 1.0 / t;
        let mut v: Vec<f64> = self.0.iter().map(|p| p.powf(inv)).collect();
        let sum: f64 = v.iter().sum();
        for p in &mut v {
            *p /= sum;
        }
        Self(v)
    }

    /// Samples a token by inverse CDF using one uniform draw.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> TokenId {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &p) in self.0.iter().enumerate() {
            acc += p;
            if u < acc {
                return TokenId(i as u32);
            }
        }
        // Rounding can leave acc fractionally below 1; emit the last
        // positive-probability token.
        let last = self.0.iter().rposition(|&p| p > 0.0).unwrap_or(self.0.len() - 1);
        TokenId(last as u32)
    }

    fn check_same_vocab(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::VocabMismatch(self.len(), other.len()));
        }
        Ok(())
    }
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn entropy(d: &ProbDist) -> f64 {
    let h: f64 = d
        .probs()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h.max(0.0)
}

/// The `k` largest probabilities sorted descending, zero-padded when the
/// vocabulary has fewer than `k` entries.
pub fn top_k(d: &ProbDist, k: usize) -> Vec<f64> {
    assert!(k >= 1);
    let mut v = d.probs().to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v.resize(k, 0.0);
    v
}

/// Total variation distance: half the L1 distance.
pub fn tv_distance(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    p.check_same_vocab(q)?;
    let l1: f64 = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(0.5 * l1)
}

/// The normalized positive residual `norm(max(0, p − q))`: the distribution
/// rejection sampling resamples from. Errors when `p == q` everywhere (zero
/// residual mass), which signals a caller bug — rejection was impossible.
pub fn residual_dist(p: &ProbDist, q: &ProbDist) -> Result<ProbDist> {
    p.check_same_vocab(q)?;
    let mut v: Vec<f64> = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(a, b)| (a - b).max(0.0))
        .collect();
    let sum: f64 = v.iter().sum();
    if sum <= 1e-12 {
        return Err(Error::ZeroResidual);
    }
    for x in &mut v {
        *x /= sum;
    }
    Ok(ProbDist(v))
}

/// Inputs to the halting classifier for one drafted token: the top-k draft
/// probabilities, the draft entropy, and a position feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// Top-k probabilities, non-increasing, zero-padded to length k.
    pub top_probs: Vec<f64>,
    pub entropy_nats: f64,
    /// Position feature as fed to the network (possibly normalized).
    pub position: f64,
}

impl FeatureVector {
    pub fn from_dist(d: &ProbDist, k: usize, position: f64) -> Self {
        Self {
            top_probs: top_k(d, k),
            entropy_nats: entropy(d),
            position,
        }
    }

    /// Flat network input: `[top_probs.., entropy, position]`, length k + 2.
    pub fn as_input(&self) -> Vec<f64> {
        let mut v = self.top_probs.clone();
        v.push(self.entropy_nats);
        v.push(self.position);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn d(v: &[f64]) -> ProbDist {
        ProbDist::new(v.to_vec()).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&d(&[1.0, 0.0, 0.0])), 0.0);
        let u4 = entropy(&d(&[0.25; 4]));
        assert!((u4 - 4.0f64.ln()).abs() < 1e-12);
        assert!((entropy(&d(&[0.5, 0.25, 0.25])) - 1.039721).abs() < 1e-6);
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&d(&[0.1, 0.6, 0.3]), 2), vec![0.6, 0.3]);
        assert_eq!(top_k(&d(&[0.1, 0.6, 0.3]), 5), vec![0.6, 0.3, 0.1, 0.0, 0.0]);
        let mut one_hot = vec![1.0];
        one_hot.extend([0.0; 9]);
        assert_eq!(top_k(&d(&one_hot), 10)[0], 1.0);
        assert!(top_k(&d(&one_hot), 10)[1..].iter().all(|&p| p == 0.0));
    }

    #[test]
    fn tv_examples() {
        let p = d(&[0.5, 0.5]);
        assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);
        assert_eq!(tv_distance(&d(&[0.5, 0.5]), &d(&[1.0, 0.0])).unwrap(), 0.5);
        assert!((tv_distance(&d(&[0.1, 0.9]), &d(&[0.9, 0.1])).unwrap() - 0.8).abs() < 1e-12);
        assert!(tv_distance(&d(&[0.5, 0.5]), &d(&[0.5, 0.25, 0.25])).is_err());
    }

    #[test]
    fn residual_examples() {
        let r = residual_dist(&d(&[0.6, 0.4]), &d(&[0.4, 0.6])).unwrap();
        assert_eq!(r.probs(), &[1.0, 0.0]);
        let r = residual_dist(&d(&[1.0, 0.0]), &d(&[0.5, 0.5])).unwrap();
        assert_eq!(r.probs(), &[1.0, 0.0]);
        assert!(matches!(
            residual_dist(&d(&[0.5, 0.5]), &d(&[0.5, 0.5])),
            Err(Error::ZeroResidual)
        ));
    }

    #[test]
    fn construction_rules() {
        // Renormalized within 1e-6, rejected beyond it.
        let ok = ProbDist::new(vec![0.5, 0.5 + 5e-7]).unwrap();
        assert!((ok.probs().iter().sum::<f64>() - 1.0).abs() <= SUM_TOLERANCE);
        assert!(ProbDist::new(vec![0.5, 0.6]).is_err());
        assert!(ProbDist::new(vec![0.5, -0.5]).is_err());
        assert!(ProbDist::new(vec![]).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(d(&[0.5, 0.5]).argmax(), TokenId(0));
        assert_eq!(d(&[0.2, 0.8]).argmax(), TokenId(1));
    }

    #[test]
    fn sampling_matches_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dist = d(&[0.0, 1.0, 0.0]);
        for _ in 0..100 {
            assert_eq!(dist.sample(&mut rng), TokenId(1));
        }
    }

    prop_compose! {
        fn arb_dist(max_len: usize)(len in 1..=max_len)(
            weights in proptest::collection::vec(0.0f64..1.0, len)
        ) -> Vec<f64> {
            weights
        }
    }

    fn normalize(w: Vec<f64>) -> Option<ProbDist> {
        let sum: f64 = w.iter().sum();
        if sum <= 1e-9 {
            return None;
        }
        ProbDist::new(w.iter().map(|x| x / sum).collect()).ok()
    }

    proptest! {
        #[test]
        fn entropy_bounded(w in arb_dist(12)) {
            if let Some(p) = normalize(w) {
                let h = entropy(&p);
                prop_assert!(h >= 0.0);
                prop_assert!(h <= (p.len() as f64).ln() + 1e-9);
            }
        }

        #[test]
        fn tv_is_a_metric(w1 in arb_dist(8), w2 in arb_dist(8), w3 in arb_dist(8)) {
            let (p, q, r) = match (normalize(w1), normalize(w2), normalize(w3)) {
                (Some(p), Some(q), Some(r)) => (p, q, r),
                _ => return Ok(()),
            };
            if p.len() == q.len() && q.len() == r.len() {
                let pq = tv_distance(&p, &q).unwrap();
                let qp = tv_distance(&q, &p).unwrap();
                prop_assert!((pq - qp).abs() < 1e-12);
                let pr = tv_distance(&p, &r).unwrap();
                let rq = tv_distance(&r, &q).unwrap();
                prop_assert!(pq <= pr + rq + 1e-12);
                if pq < 1e-12 {
                    for (a, b) in p.probs().iter().zip(q.probs()) {
                        prop_assert!((a - b).abs() < 1e-9);
                    }
                }
            }
        }

        #[test]
        fn residual_is_valid_dist(w1 in arb_dist(8), w2 in arb_dist(8)) {
            let (p, q) = match (normalize(w1), normalize(w2)) {
                (Some(p), Some(q)) => (p, q),
                _ => return Ok(()),
            };
            if p.len() == q.len() {
                if let Ok(r) = residual_dist(&p, &q) {
                    let sum: f64 = r.probs().iter().sum();
                    prop_assert!((sum - 1.0).abs() <= 1e-9);
                    prop_assert!(r.probs().iter().all(|&x| x >= 0.0));
                }
            }
        }

        #[test]
        fn top_k_sums_below_one(w in arb_dist(12), k in 1usize..20) {
            if let Some(p) = normalize(w) {
                let t = top_k(&p, k);
                prop_assert_eq!(t.len(), k);
                prop_assert!(t.windows(2).all(|w| w[0] >= w[1]));
                prop_assert!(t.iter().sum::<f64>() <= 1.0 + 1e-9);
            }
        }
    }
}
