//! Speculation lookahead policies: the per-token continue/halt contract and
//! its implementations — static lookahead, the acceptance-rate heuristic,
//! the perplexity threshold, and the trained halting classifier.

use crate::classifier::FfnParams;
use crate::dist::{FeatureVector, ProbDist};

/// What a policy sees right after each drafted token.
#[derive(Debug, Clone)]
pub struct DraftObservation {
    /// Draft distribution the token was drawn from.
    pub draft_dist: ProbDist,
    /// Draft probability of the chosen token.
    pub drafted_token_prob: f64,
    /// 1-based position within the current speculative iteration.
    pub position_in_iteration: usize,
    /// Tokens drafted so far across the whole run, this one included.
    pub tokens_drafted_total: usize,
    /// Tokens already emitted to the output before this iteration.
    pub generated_total: usize,
}

/// Per-token continue/halt decision contract. The engine drafts the first
/// token of every iteration unconditionally, then consults
/// [`should_continue`](SpeculationPolicy::should_continue) after each
/// drafted token.
pub trait SpeculationPolicy {
    /// Called once before each speculative iteration.
    fn begin_iteration(&mut self) {}

    /// `true` means draft one more token. The engine applies the hard
    /// `sl_max` cap on top of whatever this returns.
    fn should_continue(&mut self, obs: &DraftObservation) -> bool;

    /// Called once after verification with the iteration's outcome.
    fn end_iteration(&mut self, _accepted: usize, _sl_used: usize) {}

    fn name(&self) -> &str;
}

// ---------------------------------------------------------------------------
// Static lookahead
// ---------------------------------------------------------------------------

/// Drafts exactly `gamma` tokens per iteration.
#[derive(Debug, Clone)]
pub struct StaticPolicy {
    gamma: usize,
    label: String,
}

impl StaticPolicy {
    pub fn new(gamma: usize) -> Self {
        assert!(gamma >= 1);
        Self { gamma, label: format!("static-sl-{gamma}") }
    }
}

impl SpeculationPolicy for StaticPolicy {
    fn should_continue(&mut self, obs: &DraftObservation) -> bool {
        obs.position_in_iteration < self.gamma
    }

    fn name(&self) -> &str {
        &self.label
    }
}

// ---------------------------------------------------------------------------
// Acceptance-rate heuristic
// ---------------------------------------------------------------------------

/// Assisted-generation style heuristic: grow the lookahead after a fully
/// accepted iteration, shrink it otherwise.
#[derive(Debug, Clone)]
pub struct HeuristicPolicy {
    gamma: usize,
    step_up: usize,
    step_down: usize,
    min_sl: usize,
}

impl HeuristicPolicy {
    pub fn new(init: usize, step_up: usize, step_down: usize, min_sl: usize) -> Self {
        assert!(min_sl >= 1 && init >= min_sl);
        Self { gamma: init, step_up, step_down, min_sl }
    }

    /// init 5, +2 on full acceptance, −1 otherwise, floor 1.
    pub fn with_defaults() -> Self {
        Self::new(5, 2, 1, 1)
    }

    pub fn gamma(&self) -> usize {
        self.gamma
    }
}

impl SpeculationPolicy for HeuristicPolicy {
    fn should_continue(&mut self, obs: &DraftObservation) -> bool {
        obs.position_in_iteration < self.gamma
    }

    fn end_iteration(&mut self, accepted: usize, sl_used: usize) {
        if accepted == sl_used {
            self.gamma += self.step_up;
        } else {
            self.gamma = self.gamma.saturating_sub(self.step_down).max(self.min_sl);
        }
    }

    fn name(&self) -> &str {
        "dyn-heuristic"
    }
}

// ---------------------------------------------------------------------------
// Perplexity threshold
// ---------------------------------------------------------------------------

/// Halts when the running perplexity of the drafted tokens (within the
/// current iteration) exceeds `tau_ppl`. A zero-probability drafted token
/// halts immediately.
#[derive(Debug, Clone)]
pub struct PerplexityPolicy {
    tau_ppl: f64,
    neg_log_sum: f64,
    count: usize,
}

impl PerplexityPolicy {
    pub fn new(tau_ppl: f64) -> Self {
        assert!(tau_ppl > 1.0);
        Self { tau_ppl, neg_log_sum: 0.0, count: 0 }
    }
}

impl SpeculationPolicy for PerplexityPolicy {
    fn begin_iteration(&mut self) {
        self.neg_log_sum = 0.0;
        self.count = 0;
    }

    fn should_continue(&mut self, obs: &DraftObservation) -> bool {
        if obs.drafted_token_prob <= 0.0 {
            return false;
        }
        self.neg_log_sum += -obs.drafted_token_prob.ln();
        self.count += 1;
        let ppl = (self.neg_log_sum / self.count as f64).exp();
        ppl <= self.tau_ppl
    }

    fn name(&self) -> &str {
        "ppl-sl"
    }
}

// ---------------------------------------------------------------------------
// Trained halting classifier
// ---------------------------------------------------------------------------

/// Which position the classifier's position feature counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionMode {
    /// Position within the current speculative iteration (1-based).
    Iteration,
    /// Position counted from the beginning of the generation process.
    Global,
}

/// Turns an observation into the position feature value.
pub fn position_feature(mode: PositionMode, obs: &DraftObservation, normalize_by: Option<f64>) -> f64 {
    let raw = match mode {
        PositionMode::Iteration => obs.position_in_iteration as f64,
        PositionMode::Global => (obs.generated_total + obs.position_in_iteration) as f64,
    };
    match normalize_by {
        Some(s) => raw / s,
        None => raw,
    }
}

/// Confidence-threshold policy backed by the trained 2-layer network:
/// continue while the confidence score clears `tau` and the iteration is
/// below `sl_max`.
#[derive(Debug, Clone)]
pub struct DiscoPolicy {
    ffn: FfnParams,
    tau: f64,
    sl_max: usize,
    k: usize,
    position_mode: PositionMode,
    normalize_by: Option<f64>,
}

impl DiscoPolicy {
    pub fn new(
        ffn: FfnParams,
        tau: f64,
        sl_max: usize,
        k: usize,
        position_mode: PositionMode,
        normalize_by: Option<f64>,
    ) -> crate::Result<Self> {
        if ffn.input_dim() != k + 2 {
            return Err(crate::Error::DimensionMismatch { expected: k + 2, got: ffn.input_dim() });
        }
        Ok(Self { ffn, tau, sl_max, k, position_mode, normalize_by })
    }

    pub fn confidence(&self, obs: &DraftObservation) -> f64 {
        let pos = position_feature(self.position_mode, obs, self.normalize_by);
        let fv = FeatureVector::from_dist(&obs.draft_dist, self.k, pos);
        self.ffn.forward_features(&fv).expect("dimension checked at construction")
    }
}

impl SpeculationPolicy for DiscoPolicy {
    fn should_continue(&mut self, obs: &DraftObservation) -> bool {
        if obs.position_in_iteration >= self.sl_max {
            return false;
        }
        self.confidence(obs) >= self.tau
    }

    fn name(&self) -> &str {
        "disco"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::ProbDist;

    fn obs(pos: usize, prob: f64) -> DraftObservation {
        DraftObservation {
            draft_dist: ProbDist::new(vec![prob, 1.0 - prob]).unwrap(),
            drafted_token_prob: prob,
            position_in_iteration: pos,
            tokens_drafted_total: pos,
            generated_total: 0,
        }
    }

    #[test]
    fn static_policy_counts_positions() {
        let mut p = StaticPolicy::new(5);
        assert!(p.should_continue(&obs(4, 0.5)));
        assert!(!p.should_continue(&obs(5, 0.5)));
        let mut one = StaticPolicy::new(1);
        assert!(!one.should_continue(&obs(1, 0.5)));
    }

    #[test]
    fn heuristic_update_rule() {
        let mut p = HeuristicPolicy::with_defaults();
        assert_eq!(p.gamma(), 5);
        p.end_iteration(5, 5);
        assert_eq!(p.gamma(), 7);
        p.end_iteration(3, 7);
        assert_eq!(p.gamma(), 6);
        let mut floor = HeuristicPolicy::new(1, 2, 1, 1);
        floor.end_iteration(0, 1);
        floor.end_iteration(0, 1);
        assert_eq!(floor.gamma(), 1);
    }

    #[test]
    fn perplexity_running_mean() {
        // Two tokens at p=0.5: exp(mean(-ln 0.5)) = 2.0 > 1.5, halt after
        // the second token.
        let mut p = PerplexityPolicy::new(1.5);
        p.begin_iteration();
        assert!(!p.should_continue(&obs(1, 0.5)));

        let mut loose = PerplexityPolicy::new(2.5);
        loose.begin_iteration();
        assert!(loose.should_continue(&obs(1, 0.5)));
        assert!(loose.should_continue(&obs(2, 0.5)));

        // Single token at p=0.1: perplexity 10 > 5.
        let mut tau5 = PerplexityPolicy::new(5.0);
        tau5.begin_iteration();
        assert!(!tau5.should_continue(&obs(1, 0.1)));

        // Certain tokens never trip the threshold.
        let mut certain = PerplexityPolicy::new(1.0001);
        certain.begin_iteration();
        for i in 1..50 {
            assert!(certain.should_continue(&obs(i, 1.0)));
        }

        // Zero probability halts immediately.
        let mut z = PerplexityPolicy::new(100.0);
        z.begin_iteration();
        assert!(!z.should_continue(&obs(1, 0.0)));
    }

    #[test]
    fn disco_threshold_rule() {
        // Bias-only network: confidence is sigmoid(b2) regardless of input.
        let high = FfnParams::bias_only(4 + 2, 3, 2.0); // sigmoid(2) ~ 0.88
        let mut p = DiscoPolicy::new(high.clone(), 0.5, 8, 4, PositionMode::Iteration, None).unwrap();
        assert!(p.should_continue(&obs(1, 0.5)));
        // Cap halts regardless of confidence.
        assert!(!p.should_continue(&obs(8, 0.5)));

        let low = FfnParams::bias_only(4 + 2, 3, -2.0); // sigmoid(-2) ~ 0.12
        let mut p = DiscoPolicy::new(low, 0.5, 8, 4, PositionMode::Iteration, None).unwrap();
        assert!(!p.should_continue(&obs(1, 0.5)));

        // Input dimension must be k + 2.
        assert!(DiscoPolicy::new(high, 0.5, 8, 7, PositionMode::Iteration, None).is_err());
    }
}
