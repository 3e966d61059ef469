//! The generation loops: plain autoregressive decoding, the speculative
//! draft/verify loop with rejection sampling, and the oracle mode that
//! drafts until the first greedy mismatch. Every loop records exact
//! draft/target forward-pass accounting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{residual_dist, ProbDist, TokenId};
use crate::models::{LanguageModel, ModelPair};
use crate::policies::{DraftObservation, SpeculationPolicy};
use crate::{Error, Result};

/// Knobs for one generation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Hard cap on tokens drafted per speculative iteration.
    pub sl_max: usize,
}

impl GenerationConfig {
    pub fn greedy(max_new_tokens: usize, sl_max: usize) -> Self {
        Self { max_new_tokens, temperature: 0.0, seed: 0, sl_max }
    }
}

/// Accounting for one speculative iteration. `emitted` holds the accepted
/// tokens plus the one target-produced token, before any end-of-sequence or
/// budget truncation of the run output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub sl_used: usize,
    pub accepted: usize,
    pub draft_forwards: usize,
    pub target_forwards: usize,
    pub emitted: Vec<TokenId>,
}

/// Full per-run accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub iterations: Vec<IterationRecord>,
    pub prompt_len: usize,
    pub output: Vec<TokenId>,
}

impl RunTrace {
    pub fn total_target_forwards(&self) -> usize {
        self.iterations.iter().map(|i| i.target_forwards).sum()
    }

    pub fn total_draft_forwards(&self) -> usize {
        self.iterations.iter().map(|i| i.draft_forwards).sum()
    }

    pub fn total_drafted(&self) -> usize {
        self.iterations.iter().map(|i| i.sl_used).sum()
    }

    pub fn total_accepted(&self) -> usize {
        self.iterations.iter().map(|i| i.accepted).sum()
    }

    /// One structured-text record per iteration, preceded by a header line.
    pub fn to_jsonl(&self) -> String {
        let mut out = format!(
            "{}\n",
            serde_json::json!({
                "format_version": 1,
                "prompt_len": self.prompt_len,
                "output": self.output,
            })
        );
        for it in &self.iterations {
            out.push_str(&serde_json::to_string(it).expect("iteration serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: serde_json::Value = lines
            .next()
            .ok_or_else(|| Error::Format("empty trace".into()))
            .and_then(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))?;
        if header["format_version"] != 1 {
            return Err(Error::Format("unsupported trace format version".into()));
        }
        let prompt_len = header["prompt_len"]
            .as_u64()
            .ok_or_else(|| Error::Format("missing prompt_len".into()))? as usize;
        let output: Vec<TokenId> = serde_json::from_value(header["output"].clone())
            .map_err(|e| Error::Format(e.to_string()))?;
        let iterations = lines
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { iterations, prompt_len, output })
    }
}

/// Rejection-sampling verification of one block of draft tokens.
///
/// `target_dists` carries one distribution per draft position plus the bonus
/// position. Position `i` keeps the draft token with probability
/// `min(1, p_i(x)/q_i(x))`; the first rejection resamples from the positive
/// residual. Full acceptance samples the bonus token from the last target
/// distribution. Temperature 0 degenerates to argmax agreement.
pub fn verify<R: Rng>(
    draft_tokens: &[TokenId],
    draft_dists: &[ProbDist],
    target_dists: &[ProbDist],
    temperature: f64,
    rng: &mut R,
) -> Result<(usize, TokenId)> {
    let n = draft_tokens.len();
    if n == 0 || draft_dists.len() != n {
        return Err(Error::LengthMismatch(draft_dists.len(), n));
    }
    if target_dists.len() != n + 1 {
        return Err(Error::LengthMismatch(target_dists.len(), n + 1));
    }
    if temperature == 0.0 {
        for (i, &tok) in draft_tokens.iter().enumerate() {
            let target_tok = target_dists[i].argmax();
            if tok != target_tok {
                return Ok((i, target_tok));
            }
        }
        return Ok((n, target_dists[n].argmax()));
    }
    for (i, &tok) in draft_tokens.iter().enumerate() {
        let p = target_dists[i].apply_temperature(temperature);
        let q = draft_dists[i].apply_temperature(temperature);
        let q_x = q.get(tok);
        let ratio = if q_x > 0.0 { (p.get(tok) / q_x).min(1.0) } else { 1.0 };
        let u: f64 = rng.gen();
        if u >= ratio {
            let resid = residual_dist(&p, &q)?;
            return Ok((i, resid.sample(rng)));
        }
    }
    let bonus = target_dists[n].apply_temperature(temperature).sample(rng);
    Ok((n, bonus))
}

fn push_emitted(
    output: &mut Vec<TokenId>,
    emitted: &[TokenId],
    eos: Option<TokenId>,
    max_new_tokens: usize,
) -> bool {
    for &tok in emitted {
        output.push(tok);
        if Some(tok) == eos || output.len() >= max_new_tokens {
            return true;
        }
    }
    false
}

/// The speculative decoding loop: the draft proposes tokens under the
/// policy's control (hard-capped at `cfg.sl_max`), the target verifies them
/// in one modeled forward pass, and accepted tokens plus one target token
/// are appended per iteration.
pub fn speculative_generate<T, D, P>(
    pair: &ModelPair<T, D>,
    prompt: &[TokenId],
    policy: &mut P,
    cfg: &GenerationConfig,
) -> Result<RunTrace>
where
    T: LanguageModel,
    D: LanguageModel,
    P: SpeculationPolicy + ?Sized,
{
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    let eos = pair.vocab().eos();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut context: Vec<TokenId> = prompt.to_vec();
    let mut output: Vec<TokenId> = Vec::new();
    let mut iterations: Vec<IterationRecord> = Vec::new();
    let mut drafted_total = 0usize;

    while output.len() < cfg.max_new_tokens {
        policy.begin_iteration();
        let mut draft_tokens: Vec<TokenId> = Vec::new();
        let mut draft_dists: Vec<ProbDist> = Vec::new();
        let mut draft_ctx = context.clone();
        loop {
            let dist = pair.draft.next_dist(&draft_ctx);
            let tok = if cfg.temperature == 0.0 {
                dist.argmax()
            } else {
                dist.apply_temperature(cfg.temperature).sample(&mut rng)
            };
            drafted_total += 1;
            let obs = DraftObservation {
                drafted_token_prob: dist.get(tok),
                draft_dist: dist.clone(),
                position_in_iteration: draft_tokens.len() + 1,
                tokens_drafted_total: drafted_total,
                generated_total: output.len(),
            };
            draft_tokens.push(tok);
            draft_dists.push(dist);
            draft_ctx.push(tok);
            if Some(tok) == eos || draft_tokens.len() >= cfg.sl_max {
                break;
            }
            if !policy.should_continue(&obs) {
                break;
            }
        }

        // One verification pass: target distributions at every draft
        // position plus the bonus position.
        let n = draft_tokens.len();
        let mut target_dists: Vec<ProbDist> = Vec::with_capacity(n + 1);
        for i in 0..=n {
            target_dists.push(pair.target.next_dist(&draft_ctx[..context.len() + i]));
        }
        let (accepted, next_token) =
            verify(&draft_tokens, &draft_dists, &target_dists, cfg.temperature, &mut rng)?;
        policy.end_iteration(accepted, n);

        let mut emitted: Vec<TokenId> = draft_tokens[..accepted].to_vec();
        emitted.push(next_token);
        iterations.push(IterationRecord {
            sl_used: n,
            accepted,
            draft_forwards: n,
            target_forwards: 1,
            emitted: emitted.clone(),
        });
        let done = push_emitted(&mut output, &emitted, eos, cfg.max_new_tokens);
        context.extend_from_slice(&output[context.len() - prompt.len()..]);
        if done {
            break;
        }
    }

    Ok(RunTrace { iterations, prompt_len: prompt.len(), output })
}

/// Plain autoregressive decoding: one target forward per emitted token.
pub fn autoregressive_generate<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    cfg: &GenerationConfig,
) -> Result<RunTrace> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    let eos = model.vocab().eos();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut context: Vec<TokenId> = prompt.to_vec();
    let mut output: Vec<TokenId> = Vec::new();
    let mut iterations: Vec<IterationRecord> = Vec::new();
    while output.len() < cfg.max_new_tokens {
        let dist = model.next_dist(&context);
        let tok = if cfg.temperature == 0.0 {
            dist.argmax()
        } else {
            dist.apply_temperature(cfg.temperature).sample(&mut rng)
        };
        iterations.push(IterationRecord {
            sl_used: 0,
            accepted: 0,
            draft_forwards: 0,
            target_forwards: 1,
            emitted: vec![tok],
        });
        output.push(tok);
        context.push(tok);
        if Some(tok) == eos {
            break;
        }
    }
    Ok(RunTrace { iterations, prompt_len: prompt.len(), output })
}

/// Oracle mode: per iteration the draft keeps generating until its greedy
/// token mismatches the target's, yielding the per-iteration maximum
/// acceptance. The mismatching draft token still counts as a draft forward
/// (`draft_forwards = accepted + 1` on mismatch) while verification is
/// charged one target forward per iteration, modeling the minimal-call
/// idealization. Defined only for temperature 0.
pub fn oracle_generate<T, D>(
    pair: &ModelPair<T, D>,
    prompt: &[TokenId],
    cfg: &GenerationConfig,
) -> Result<RunTrace>
where
    T: LanguageModel,
    D: LanguageModel,
{
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    if cfg.temperature != 0.0 {
        return Err(Error::OracleNeedsGreedy(cfg.temperature));
    }
    let eos = pair.vocab().eos();
    let mut context: Vec<TokenId> = prompt.to_vec();
    let mut output: Vec<TokenId> = Vec::new();
    let mut iterations: Vec<IterationRecord> = Vec::new();
    while output.len() < cfg.max_new_tokens {
        let mut emitted: Vec<TokenId> = Vec::new();
        let mut draft_forwards = 0usize;
        let mut accepted = 0usize;
        let mut ctx = context.clone();
        loop {
            let draft_tok = pair.draft.next_dist(&ctx).argmax();
            draft_forwards += 1;
            let target_tok = pair.target.next_dist(&ctx).argmax();
            if draft_tok == target_tok {
                accepted += 1;
                emitted.push(target_tok);
                ctx.push(target_tok);
                if Some(target_tok) == eos || accepted >= cfg.sl_max {
                    // Cap reached with everything accepted: the bonus token
                    // comes from the same verification pass.
                    if Some(target_tok) != eos {
                        emitted.push(pair.target.next_dist(&ctx).argmax());
                    }
                    break;
                }
            } else {
                emitted.push(target_tok);
                break;
            }
        }
        iterations.push(IterationRecord {
            sl_used: draft_forwards,
            accepted,
            draft_forwards,
            target_forwards: 1,
            emitted: emitted.clone(),
        });
        let done = push_emitted(&mut output, &emitted, eos, cfg.max_new_tokens);
        context.extend_from_slice(&output[context.len() - prompt.len()..]);
        if done {
            break;
        }
    }
    Ok(RunTrace { iterations, prompt_len: prompt.len(), output })
}
